import numpy as np
import pandas as pd
import pytest

from density_image import legend_rows, peak_nodes, render_density
from experiments import ExperimentReport
from figures import density_figure, iteration_figure, scenario_figure, write_figure
from measure_core import Density, Grid
from report_pdf import generate_pdf_report


def _report(density):
    report = ExperimentReport('decay_slope', 'f' * 64, {'k': 3.0})
    report.measure('slope', [-0.34, -0.33, -0.32])
    report.check('slope', True, 'slope -0.33 within 15% of -1/3')
    report.check('flat', False, 'broken on purpose')
    report.tables['norms'] = pd.DataFrame({'time': [0.01, 0.1, 0.01, 0.1], 'kstar_norm': [3.0, 1.4, 3.1, 1.5],
                                           'seed': [0, 0, 1, 1]})
    report.densities['terminal'] = density
    return report


@pytest.fixture
def plane_density():
    grid = Grid.centered(2, 3.0, 31)
    x, y = np.meshgrid(*grid.axes(), indexing='ij')
    return Density.normalized(grid, np.exp(-0.5 * ((x - 1.0) ** 2 + y * y)))


# ==========================================
# FIGURES
# ==========================================

def test_figure_html_is_reproducible(tmp_path, gaussian_1d):
    fig = density_figure(gaussian_1d, 't = 1')
    write_figure(fig, tmp_path / 'a.html', 'mkvlab-terminal')
    write_figure(fig, tmp_path / 'b.html', 'mkvlab-terminal')
    text = (tmp_path / 'a.html').read_text(encoding='utf-8')
    assert 'mkvlab-terminal' in text
    assert text == (tmp_path / 'b.html').read_text(encoding='utf-8')


def test_iteration_and_scenario_figures(gaussian_1d):
    log = pd.DataFrame({'iter': [1, 2, 3], 'rho': [0.5, 0.1, 0.02], 'ratio': [np.nan, 0.2, 0.2], 'lambda': 0.0})
    assert len(iteration_figure(log, 0.01, 0.02).data) == 1
    report = _report(gaussian_1d)
    assert len(scenario_figure(report).data) == 2
    del report.tables['norms']
    assert scenario_figure(report).layout.title.text == 'decay_slope: failed'


# ==========================================
# IMAGES
# ==========================================

def test_render_marks_the_peaks(plane_density):
    image, legend = render_density(plane_density, size=(320, 240), markers=2, title='terminal')
    assert image.size == (320, 240)
    assert [item['number'] for item in legend] == [1, 2]
    assert legend[0]['position'] == pytest.approx([1.0, 0.0])
    assert legend[0]['value'] >= legend[1]['value']
    rows = legend_rows(legend)
    assert rows[0] == ['#', 'position', 'density']
    assert len(rows) == 3


def test_peak_nodes_in_one_dimension(gaussian_1d):
    assert peak_nodes(gaussian_1d, 1) == [(400,)]
    image, legend = render_density(gaussian_1d)
    assert image.mode == 'RGB'
    assert legend[0]['position'][0] == pytest.approx(0.0, abs=1e-12)


# ==========================================
# PDF
# ==========================================

def test_pdf_is_byte_identical(plane_density):
    report = _report(plane_density)
    first = generate_pdf_report(report).getvalue()
    second = generate_pdf_report(report).getvalue()
    assert first.startswith(b'%PDF')
    assert first == second


def test_pdf_written_to_file(tmp_path, gaussian_1d):
    path = tmp_path / 'report.pdf'
    assert generate_pdf_report(_report(gaussian_1d), str(path)) == str(path)
    assert path.read_bytes().startswith(b'%PDF')
