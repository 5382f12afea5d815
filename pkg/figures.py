"""
Interactive figures for run outputs
Plotly charts written as standalone HTML next to the CSV tables
"""

import plotly.express as px
import plotly.graph_objects as go

import pandas as pd

from measure_core import Density

COLORS = {
    'measured': '#2563EB',
    'reference': '#DC2626',
    'pass': '#10B981',
    'fail': '#DC2626',
}

LAYOUT = dict(
    plot_bgcolor='rgba(0,0,0,0)',
    paper_bgcolor='rgba(0,0,0,0)',
    font_color='#1F2937',
)


def write_figure(fig: go.Figure, path, div_id: str):
    """HTML with a fixed div id so reruns produce identical files"""
    fig.write_html(path, include_plotlyjs='cdn', full_html=True, div_id=div_id)


def density_figure(density: Density, title: str) -> go.Figure:
    """Line plot in d=1, heatmap of the first two axes otherwise (middle slice in d=3)"""
    grid = density.grid
    axes = grid.axes()
    if grid.dim == 1:
        fig = px.line(x=axes[0], y=density.values, title=title, labels={'x': 'x', 'y': 'density'})
        fig.update_traces(line_color=COLORS['measured'])
    else:
        values = density.values if grid.dim == 2 else density.values[:, :, grid.counts[2] // 2]
        fig = px.imshow(values.T, x=axes[0], y=axes[1], origin='lower', color_continuous_scale='Viridis',
                        title=title, labels={'x': 'x0', 'y': 'x1', 'color': 'density'})
    fig.update_layout(**LAYOUT)
    return fig


def iteration_figure(log: pd.DataFrame, floor: float, tolerance: float) -> go.Figure:
    """rho per Picard iterate on a log axis with the Monte-Carlo floor and tolerance"""
    fig = px.line(log, x='iter', y='rho', markers=True, log_y=True, title='Picard iterates',
                  labels={'iter': 'iterate', 'rho': 'rho(mu_j+1, mu_j)'})
    fig.update_traces(line_color=COLORS['measured'])
    fig.add_hline(y=max(floor, 1e-300), line_dash='dot', line_color='#6B7280', annotation_text='MC floor')
    fig.add_hline(y=max(tolerance, 1e-300), line_dash='dash', line_color=COLORS['reference'],
                  annotation_text='tolerance')
    fig.update_layout(**LAYOUT)
    return fig


def criteria_figure(report) -> go.Figure:
    """Pass/fail bar per criterion of an ExperimentReport"""
    frame = pd.DataFrame({
        'criterion': [c.name for c in report.criteria],
        'verdict': ['pass' if c.passed else 'fail' for c in report.criteria],
        'value': [1] * len(report.criteria),
    })
    fig = px.bar(frame, x='criterion', y='value', color='verdict', hover_data={'value': False},
                 color_discrete_map={'pass': COLORS['pass'], 'fail': COLORS['fail']},
                 title=f"{report.scenario}: {'passed' if report.passed else 'failed'}")
    fig.update_yaxes(visible=False)
    fig.update_layout(**LAYOUT)
    return fig


def table_figure(frame: pd.DataFrame, x: str, y: str, title: str, color=None, log_x=False, log_y=False) -> go.Figure:
    fig = px.line(frame, x=x, y=y, color=color, markers=True, log_x=log_x, log_y=log_y, title=title)
    fig.update_layout(**LAYOUT)
    return fig


# scenario table -> (x, y, color, log axes)
SCENARIO_PLOTS = {
    'decay_slope': ('norms', 'time', 'kstar_norm', 'seed', True),
    'entropy_cost': ('entropy_cost', 'time', 'cost_ratio', 'seed', False),
    'kstar_wasserstein': ('distances', 'wasserstein', 'kstar_distance', 'time', False),
    'picard_contraction': ('iterations', 'iter', 'rho', 'seed', False),
}


def scenario_figure(report) -> go.Figure:
    """The scenario's main table when it has one, else the criteria chart"""
    spec = SCENARIO_PLOTS.get(report.scenario)
    if spec is None or spec[0] not in report.tables:
        return criteria_figure(report)
    table, x, y, color, log = spec
    frame = report.tables[table].copy()
    frame[color] = frame[color].astype(str)
    return table_figure(frame, x, y, report.scenario, color=color, log_x=log, log_y=log)
