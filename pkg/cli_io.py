"""
Run configuration, orchestration and serialization

TOML run configs are validated against SCHEMA before anything is computed; dispatch routes a
RunConfig to simulate / picard / metrics / experiment, stages every output in a temporary
directory and renames it into place together with a RunManifest.
"""

import inspect
import json
import logging
import math
import os
import re
import shutil
import time
try:
    import tomllib
except ImportError:  # Python < 3.11
    import tomli as tomllib
import traceback
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, Optional, Tuple

import numpy as np
import pandas as pd

from density_image import render_density
from errors import AcceptanceError, BlowupError, ConfigError, ConvergenceError, MkvlabError
from experiments import RUNNERS, SCENARIOS
from figures import density_figure, iteration_figure, scenario_figure, write_figure
from kernels import DriftSpec, KernelSpec, LipschitzTerm, SingularTerm
from measure_core import Density, EmpiricalMeasure, Grid, InitialLaw, MeasureFlow
from metrics import (KStarParams, dual_oracle_bounds, kstar_distance, kstar_norm_surrogate, relative_entropy,
                     tv_distance, wasserstein_q)
from picard_solver import PicardConfig, at_horizon, class_d_check, class_d_table, flow_diagnostics, solve_fixed_point
from provenance import RunManifest, canonical_hash, file_checksum, to_jsonable, write_json
from report_pdf import generate_pdf_report
from sde_engine import SdeConfig, SigmaSpec, empirical_moments, simulate_decoupled, simulate_interacting

logger = logging.getLogger(__name__)

COMMANDS = ('simulate', 'picard', 'metrics', 'experiment')
FLOAT_FORMAT = '%.17g'
BASELINE_PATH = Path(__file__).resolve().parent / 'configs' / 'baseline.toml'
MOMENT_ORDERS = (1, 2, 4)

REQUIRED = object()

# table -> key -> (kind, default)
SCHEMA: Dict[str, Dict[str, Tuple[str, Any]]] = {
    'kernel': {
        'family': ('str', REQUIRED),
        'epsilon': ('float', 0.0),
        'kappa': ('float', 1.0),
        'beta': ('float', None),
        'anchors': ('matrix', []),
        'cutoff': ('float', None),
    },
    'drift': {
        'coupling': ('float', 1.0),
        'b1': ('str', 'zero'),
        'rate': ('float', 1.0),
        'matrix': ('matrix', None),
        'vector': ('vector', None),
        'faithful': ('bool', False),
        'singular': ('tables', []),
    },
    'drift.singular': {
        'strength': ('float', REQUIRED),
        'center': ('vector', REQUIRED),
        'alpha': ('float', REQUIRED),
        'p_prime': ('float', REQUIRED),
        'q_prime': ('float', REQUIRED),
        'epsilon': ('float', 0.0),
        'form': ('str', 'power_well'),
    },
    'sde': {
        'dim': ('int', REQUIRED),
        'T': ('float', 1.0),
        'dt': ('float', 0.01),
        'n_particles': ('int', 1000),
        'sigma': ('float', 1.0),
        'sigma_matrix': ('matrix', None),
        'sigma_form': ('str', 'constant'),
        'sigma_base': ('vector', None),
        'sigma_slope': ('vector', 0.0),
        'sigma_bounds': ('vector', None),
        'record_times': ('vector', None),
        'record_count': ('int', 2),
        'ellipticity': ('vector', None),
        'cell_list': ('bool', False),
        'threads': ('int', None),
        'chunk_size': ('int', 256),
        'mode': ('str', 'interacting'),
        'flow': ('str', None),
    },
    'init': {
        'family': ('str', 'gaussian'),
        'mean': ('vector', None),
        'std': ('vector', 1.0),
        'cov': ('matrix', None),
        'low': ('vector', None),
        'high': ('vector', None),
        'weights': ('vector', None),
        'means': ('matrix', None),
        'stds': ('vector', None),
        'point': ('vector', None),
        'alpha': ('float', None),
        'radius': ('float', 1.0),
        'path': ('str', None),
    },
    'exponents': {
        'p': ('exponent', math.inf),
        'k': ('exponent', REQUIRED),
    },
    'picard': {
        'M': ('int', 2000),
        'mesh_size': ('int', 10),
        'lambda': ('float', 0.0),
        'lambda_auto': ('bool', True),
        'max_doublings': ('int', 8),
        'tol': ('float', 1e-3),
        'max_iter': ('int', 20),
        'bandwidth': ('bandwidth', 'silverman'),
        'beta0': ('float', 0.25),
        'n': ('int', 1),
        'ceiling': ('float', 1e3),
        'grid_nodes': ('int', None),
        'grid_floor': ('float', 1.0),
        'grid_margin': ('float', 1.0),
        'horizon': ('str', 'config'),
        'r': ('float', None),
    },
    'metrics': {
        'metric': ('str', REQUIRED),
        'first': ('str', REQUIRED),
        'second': ('str', None),
        'k': ('exponent', None),
        'r': ('float', None),
        'q': ('float', 2.0),
        'tol': ('float', 1e-4),
        'max_iter': ('int', 20000),
    },
    'output': {
        'dir': ('str', None),
        'pdf': ('bool', False),
        'html': ('bool', True),
        'image': ('bool', True),
    },
}

TOP_LEVEL = {'command': ('str', None), 'seed': ('int', 0), 'scenario': ('str', None)}
FREE_TABLES = ('experiment', 'thresholds')
METRICS = ('kstar', 'kstar_norm', 'kstar_oracle', 'tv', 'entropy', 'wasserstein')
INIT_FAMILIES = ('gaussian', 'uniform', 'mixture', 'dirac', 'power_law', 'density_file', 'empirical_file')
# runner arguments filled from other tables or the environment, never from [experiment]
INJECTED = ('seed', 'thresholds', 'init', 'drift', 'kernel', 'gamma', 'cfg', 'threads')


# ==========================================
# SERIALIZATION
# ==========================================

def write_frame(frame: pd.DataFrame, path):
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)


def write_density(density: Density, path):
    """`# dim,origin...,spacing...,counts...` header, then one `index,value` row per node (row-major)"""
    grid = density.grid
    header = [str(grid.dim)] + [f"{v:.17g}" for v in grid.origin + grid.spacing] + [str(c) for c in grid.counts]
    frame = pd.DataFrame({'index': np.arange(grid.size), 'value': density.values.ravel()})
    with open(path, 'w', encoding='utf-8', newline='') as handle:
        handle.write('# ' + ','.join(header) + '\n')
        frame.to_csv(handle, index=False, header=False, float_format=FLOAT_FORMAT)


def read_density(path) -> Density:
    with open(path, encoding='utf-8') as handle:
        first = handle.readline()
    if not first.startswith('#'):
        raise ConfigError(f"{path} is not a density file (missing '# dim,...' header)")
    fields = [f.strip() for f in first[1:].split(',')]
    try:
        dim = int(fields[0])
        if len(fields) != 1 + 3 * dim:
            raise ValueError
        origin = [float(v) for v in fields[1:1 + dim]]
        spacing = [float(v) for v in fields[1 + dim:1 + 2 * dim]]
        counts = [int(v) for v in fields[1 + 2 * dim:]]
    except ValueError:
        raise ConfigError(f"{path}: malformed density header '{first.strip()}'")
    grid = Grid(dim, origin, spacing, counts)
    frame = pd.read_csv(path, skiprows=1, header=None, names=['index', 'value'], float_precision='round_trip')
    if not np.array_equal(frame['index'].to_numpy(), np.arange(grid.size)):
        raise ConfigError(f"{path}: expected node indices 0..{grid.size - 1} in order")
    return Density(grid, frame['value'].to_numpy())


def write_empirical(measure: EmpiricalMeasure, path):
    frame = pd.DataFrame(measure.points, columns=[f'x{a}' for a in range(measure.dim)])
    write_frame(frame, path)


def read_empirical(path) -> EmpiricalMeasure:
    frame = pd.read_csv(path, float_precision='round_trip')
    expected = [f'x{a}' for a in range(frame.shape[1])]
    if list(frame.columns) != expected:
        raise ConfigError(f"{path}: expected columns {expected}, got {list(frame.columns)}")
    return EmpiricalMeasure(frame.to_numpy(dtype=float))


def read_measure(path):
    """Density or EmpiricalMeasure, told apart by the density header"""
    with open(path, encoding='utf-8') as handle:
        first = handle.readline()
    return read_density(path) if first.startswith('#') else read_empirical(path)


def law_from_description(description: Dict[str, Any]) -> InitialLaw:
    """Inverse of InitialLaw.describe for the sampler variant"""
    family = description.get('family')
    if family == 'gaussian':
        return InitialLaw.gaussian(description['mean'], cov=description['cov'])
    if family == 'uniform':
        return InitialLaw.uniform(description['low'], description['high'])
    if family == 'mixture':
        return InitialLaw.mixture(description['weights'], description['means'], description['stds'])
    if family == 'dirac':
        return InitialLaw.dirac(description['point'])
    if family == 'power_law':
        return InitialLaw.power_law(description['dim'], description['alpha'], description['radius'])
    raise ConfigError(f"cannot rebuild an initial law of family '{family}'")


def write_flow(flow: MeasureFlow, directory):
    """flow_index.csv (node, time, file), one density file per node and the initial law"""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = []
    for j, density in enumerate(flow.densities):
        name = '' if density is None else f'density_{j:03d}.csv'
        if density is not None:
            write_density(density, directory / name)
        files.append(name)
    write_frame(pd.DataFrame({'node': np.arange(flow.mesh.size), 'time': flow.mesh, 'file': files}),
                directory / 'flow_index.csv')

    law = flow.initial
    if law is None:
        return
    if law.variant == 'sampler':
        record = law.describe()
    elif law.variant == 'density':
        write_density(law.density, directory / 'initial_density.csv')
        record = {'variant': 'density', 'file': 'initial_density.csv'}
    else:
        write_empirical(law.empirical, directory / 'initial_points.csv')
        record = {'variant': 'empirical', 'file': 'initial_points.csv'}
    write_json(directory / 'initial_law.json', record)


def read_flow(directory) -> MeasureFlow:
    directory = Path(directory)
    index = pd.read_csv(directory / 'flow_index.csv', float_precision='round_trip', keep_default_na=False)
    densities = [read_density(directory / name) if name else None for name in index['file']]
    initial = None
    law_path = directory / 'initial_law.json'
    if law_path.exists():
        with open(law_path, encoding='utf-8') as handle:
            record = json.load(handle)
        if record['variant'] == 'sampler':
            initial = law_from_description(record)
        elif record['variant'] == 'density':
            initial = InitialLaw.from_density(read_density(directory / record['file']))
        else:
            initial = InitialLaw.from_empirical(read_empirical(directory / record['file']))
    return MeasureFlow(index['time'].to_numpy(dtype=float), tuple(densities), initial)


# ==========================================
# SCHEMA VALIDATION
# ==========================================

_HEADER = re.compile(r'^\s*\[\[?\s*([A-Za-z0-9_.\-]+)\s*\]\]?\s*(#.*)?$')
_ASSIGNMENT = re.compile(r'^\s*"?([A-Za-z0-9_\-]+)"?\s*=')


def _locate(text: str, table: str, key: Optional[str] = None) -> Optional[int]:
    """1-based line of `key` inside `table` ('' is the top level), or of the table header"""
    current = ''
    for number, line in enumerate(text.splitlines(), 1):
        header = _HEADER.match(line)
        if header:
            current = header.group(1)
            if key is None and current == table:
                return number
            continue
        assignment = _ASSIGNMENT.match(line)
        if assignment and key is not None and current == table and assignment.group(1) == key:
            return number
    return None


def _is_number(value) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def _coerce(kind: str, value: Any, path: str, line: Optional[int]) -> Any:
    def fail(expected):
        raise ConfigError(f"expected {expected}, got {value!r}", path, line)

    if kind == 'str':
        return value if isinstance(value, str) else fail('a string')
    if kind == 'bool':
        return value if isinstance(value, bool) else fail('true or false')
    if kind == 'int':
        return value if isinstance(value, int) and not isinstance(value, bool) else fail('an integer')
    if kind == 'float':
        return float(value) if _is_number(value) else fail('a number')
    if kind == 'exponent':
        if isinstance(value, str) and value.strip().lower() in ('inf', 'infinity'):
            return math.inf
        return float(value) if _is_number(value) else fail("a number or 'inf'")
    if kind == 'bandwidth':
        if value == 'silverman' or (_is_number(value) and value > 0):
            return value if isinstance(value, str) else float(value)
        return fail("'silverman' or a positive number")
    if kind == 'vector':
        if _is_number(value):
            return float(value)
        if isinstance(value, list) and all(_is_number(v) for v in value):
            return [float(v) for v in value]
        return fail('a number or a list of numbers')
    if kind == 'matrix':
        if isinstance(value, list) and all(isinstance(row, list) and all(_is_number(v) for v in row)
                                           for row in value):
            return [[float(v) for v in row] for row in value]
        if isinstance(value, list) and all(_is_number(v) for v in value):
            return [[float(v)] for v in value]
        return fail('a list of lists of numbers')
    raise AssertionError(f"unknown schema kind {kind}")


def _resolve_table(name: str, raw: Any, text: str) -> Dict[str, Any]:
    if not isinstance(raw, dict):
        raise ConfigError(f"'{name}' must be a table", name, _locate(text, '', name))
    schema = SCHEMA[name]
    resolved = {}
    for key, value in raw.items():
        if key not in schema:
            raise ConfigError(f"unknown key in [{name}]; allowed: {sorted(schema)}", f"{name}.{key}",
                              _locate(text, name, key))
        kind, _ = schema[key]
        if kind == 'tables':
            child = f"{name}.{key}"
            if not isinstance(value, list):
                raise ConfigError(f"expected [[{child}]] entries", child, _locate(text, name, key))
            resolved[key] = [_resolve_table(child, entry, text) for entry in value]
        else:
            resolved[key] = _coerce(kind, value, f"{name}.{key}", _locate(text, name, key))
    for key, (kind, default) in schema.items():
        if key in resolved:
            continue
        if default is REQUIRED:
            raise ConfigError(f"missing required key in [{name}]", f"{name}.{key}", _locate(text, name))
        resolved[key] = default
    return resolved


def _runner_parameters(scenario: str) -> Tuple[set, set]:
    """(accepted [experiment] keys, required ones) from the runner signature"""
    signature = inspect.signature(RUNNERS[scenario])
    accepted = {name for name in signature.parameters if name not in INJECTED}
    required = {name for name in accepted if signature.parameters[name].default is inspect.Parameter.empty}
    return accepted, required


def _check_experiment(scenario: str, table: Dict[str, Any], text: str):
    accepted, required = _runner_parameters(scenario)
    for key in table:
        if key not in accepted:
            raise ConfigError(f"unknown key for scenario '{scenario}'; allowed: {sorted(accepted)}",
                              f"experiment.{key}", _locate(text, 'experiment', key))
    missing = sorted(required - set(table))
    if missing:
        raise ConfigError(f"scenario '{scenario}' needs {missing}", f"experiment.{missing[0]}",
                          _locate(text, 'experiment'))


def _check_exponents(d: int, p: float, k: float, text: str):
    """Class-D gate, with the failing inequality quoted"""
    line = _locate(text, 'exponents', 'k')
    try:
        exponents = class_d_check(d, p, k)
    except MkvlabError as exc:
        raise ConfigError(str(exc), 'exponents.k', line)
    problems = []
    if not exponents.in_class_D:
        problems.append(f"(p, k) is not in class D for d={d}: {exponents.inequality()}")
    if not k > 1:
        problems.append(f"k must exceed 1 for k*-metrics, got {k:g}")
    if problems:
        raise ConfigError('; '.join(problems), 'exponents.k', line)


@dataclass(frozen=True)
class RunConfig:
    command: str
    seed: int
    tables: Dict[str, Dict[str, Any]]
    out: Path
    config_hash: str
    scenario: Optional[str] = None
    source: Optional[Path] = None

    def table(self, name: str) -> Dict[str, Any]:
        return self.tables.get(name, {})

    def has(self, name: str) -> bool:
        return name in self.tables

    @property
    def base_dir(self) -> Path:
        return self.source.parent if self.source is not None else Path('.')

    def echo(self) -> Dict[str, Any]:
        """Resolved configuration with every default filled in (the output directory left out)"""
        tables = {name: dict(values) for name, values in self.tables.items()}
        if 'output' in tables:
            tables['output'].pop('dir', None)
        return {'command': self.command, 'seed': self.seed, 'scenario': self.scenario,
                'config_hash': self.config_hash, **tables}


def _input_files(tables: Dict[str, Dict[str, Any]], base_dir: Path) -> Dict[str, str]:
    """Checksums of the files a config reads"""
    paths = {}
    if tables.get('init', {}).get('path'):
        paths['init.path'] = tables['init']['path']
    if tables.get('sde', {}).get('flow'):
        paths['sde.flow'] = tables['sde']['flow']
    for key in ('first', 'second'):
        if tables.get('metrics', {}).get(key):
            paths[f'metrics.{key}'] = tables['metrics'][key]
    checksums = {}
    for key, value in sorted(paths.items()):
        target = base_dir / value
        if target.is_dir():
            checksums[key] = canonical_hash({p.name: file_checksum(p) for p in sorted(target.iterdir()) if p.is_file()})
        elif target.is_file():
            checksums[key] = file_checksum(target)
        else:
            raise ConfigError(f"input '{value}' does not exist", key)
    return checksums


def parse_config(path, command: Optional[str] = None, seed: Optional[int] = None, out=None,
                 scenario: Optional[str] = None) -> RunConfig:
    """
    Read and validate a TOML run configuration

    Args:
        path: config file
        command: subcommand from the command line (overrides `command` in the file)
        seed: seed override
        out: output directory override
        scenario: experiment scenario override

    Returns:
        RunConfig with every default resolved
    """
    path = Path(path)
    try:
        text = path.read_text(encoding='utf-8')
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}")
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}")

    top = {}
    tables: Dict[str, Dict[str, Any]] = {}
    for key, value in data.items():
        if key in TOP_LEVEL:
            top[key] = _coerce(TOP_LEVEL[key][0], value, key, _locate(text, '', key))
        elif key in SCHEMA and key != 'drift.singular':
            tables[key] = _resolve_table(key, value, text)
        elif key in FREE_TABLES:
            if not isinstance(value, dict):
                raise ConfigError(f"'{key}' must be a table", key, _locate(text, '', key))
            tables[key] = dict(value)
        else:
            raise ConfigError(f"unknown top-level key or table; allowed: "
                              f"{sorted((set(TOP_LEVEL) | set(SCHEMA) | set(FREE_TABLES)) - {'drift.singular'})}",
                              key, _locate(text, key) or _locate(text, '', key))

    command = command or top.get('command')
    if command not in COMMANDS:
        raise ConfigError(f"command must be one of {COMMANDS}, got {command!r}", 'command', _locate(text, '', 'command'))
    seed = top.get('seed', 0) if seed is None else int(seed)
    if seed < 0:
        raise ConfigError(f"seed must be non-negative, got {seed}", 'seed', _locate(text, '', 'seed'))

    for name, value in tables.get('thresholds', {}).items():
        _coerce('float', value, f"thresholds.{name}", _locate(text, 'thresholds', name))

    if command in ('simulate', 'picard') and 'sde' not in tables:
        raise ConfigError(f"'{command}' needs an [sde] table", 'sde')
    if command == 'picard':
        if 'exponents' not in tables:
            raise ConfigError("'picard' needs an [exponents] table", 'exponents')
        tables.setdefault('picard', _resolve_table('picard', {}, text))
        tables.setdefault('init', _resolve_table('init', {}, text))
    if command == 'metrics':
        if 'metrics' not in tables:
            raise ConfigError("'metrics' needs a [metrics] table", 'metrics')
        _check_metrics(tables['metrics'], text)

    if 'exponents' in tables:
        if 'sde' in tables:
            d = tables['sde']['dim']
        else:
            d = int(tables.get('experiment', {}).get('d', 1))
        e = tables['exponents']
        _check_exponents(d, e['p'], e['k'], text)
        tables['exponents']['class_d'] = class_d_table([(d, e['p'], e['k'])]).to_dict('records')[0]

    if command == 'experiment':
        experiment = tables.setdefault('experiment', {})
        named = experiment.pop('scenario', None)
        scenario = scenario or named or top.get('scenario')
        if scenario not in SCENARIOS:
            raise ConfigError(f"scenario must be one of {SCENARIOS}, got {scenario!r}", 'scenario')
        _check_experiment(scenario, tables['experiment'], text)
        if scenario == 'picard_contraction':
            for name in ('sde', 'exponents'):
                if name not in tables:
                    raise ConfigError(f"scenario 'picard_contraction' needs an [{name}] table", name)
            tables.setdefault('picard', _resolve_table('picard', {}, text))
            tables.setdefault('init', _resolve_table('init', {}, text))
        tables['thresholds'] = {**load_baseline().get(scenario, {}), **tables.get('thresholds', {})}
    else:
        scenario = None
    tables.setdefault('output', _resolve_table('output', {}, text))

    base_dir = path.parent
    hashed = {'command': command, 'seed': seed, 'scenario': scenario,
              'tables': {name: values for name, values in tables.items() if name != 'output'},
              'output': {k: v for k, v in tables['output'].items() if k != 'dir'},
              'inputs': _input_files(tables, base_dir)}
    config_hash = canonical_hash(hashed)

    if out is None:
        out = tables['output']['dir']
        out = base_dir / out if out is not None else None
    if out is None:
        label = f"{command}-{scenario}" if scenario else command
        out = Path(os.environ.get('MKVLAB_OUT', 'runs')) / f"{label}-{config_hash[:12]}"
    config = RunConfig(command, seed, tables, Path(out), config_hash, scenario, path)
    logger.debug("Resolved config: %s", json.dumps(to_jsonable(config.echo()), sort_keys=True))
    return config


def _check_metrics(table: Dict[str, Any], text: str):
    metric = table['metric']
    if metric not in METRICS:
        raise ConfigError(f"metric must be one of {METRICS}", 'metrics.metric', _locate(text, 'metrics', 'metric'))
    if metric not in ('kstar_norm', 'kstar_oracle') and table['second'] is None:
        raise ConfigError(f"metric '{metric}' compares two measures", 'metrics.second', _locate(text, 'metrics'))
    if metric.startswith('kstar'):
        k = table['k']
        if k is None:
            raise ConfigError(f"metric '{metric}' needs k", 'metrics.k', _locate(text, 'metrics'))
        if not k > 1:
            raise ConfigError(f"k must exceed 1 for k*-metrics, got {k:g}", 'metrics.k', _locate(text, 'metrics', 'k'))


def load_baseline(path=None) -> Dict[str, Dict[str, float]]:
    """Calibrated experiment thresholds, one table per scenario"""
    path = Path(path) if path is not None else BASELINE_PATH
    try:
        with open(path, 'rb') as handle:
            return tomllib.load(handle)
    except FileNotFoundError:
        logger.warning("No baseline thresholds at %s", path)
        return {}
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}")


# ==========================================
# BUILDERS
# ==========================================

def _vector(value, dim: int, default: float = 0.0) -> np.ndarray:
    if value is None:
        return np.full(dim, default)
    return np.broadcast_to(np.asarray(value, dtype=float), (dim,)).copy()


def _need(table: Dict[str, Any], name: str, key: str):
    if table.get(key) is None:
        raise ConfigError(f"[{name}] needs '{key}' here", f"{name}.{key}")
    return table[key]


def build_init(table: Dict[str, Any], dim: int, base_dir: Path = Path('.')) -> InitialLaw:
    family = table['family']
    if family not in INIT_FAMILIES:
        raise ConfigError(f"init family must be one of {INIT_FAMILIES}", 'init.family')
    if family == 'gaussian':
        mean = _vector(table['mean'], dim)
        if table['cov'] is not None:
            law = InitialLaw.gaussian(mean, cov=table['cov'])
        else:
            law = InitialLaw.gaussian(mean, std=_vector(table['std'], dim, 1.0))
    elif family == 'uniform':
        law = InitialLaw.uniform(_vector(_need(table, 'init', 'low'), dim), _vector(_need(table, 'init', 'high'), dim))
    elif family == 'mixture':
        law = InitialLaw.mixture(_need(table, 'init', 'weights'), _need(table, 'init', 'means'),
                                 _need(table, 'init', 'stds'))
    elif family == 'dirac':
        law = InitialLaw.dirac(_vector(table['point'], dim))
    elif family == 'power_law':
        law = InitialLaw.power_law(dim, _need(table, 'init', 'alpha'), table['radius'])
    elif family == 'density_file':
        law = InitialLaw.from_density(read_density(base_dir / _need(table, 'init', 'path')))
    else:
        law = InitialLaw.from_empirical(read_empirical(base_dir / _need(table, 'init', 'path')))
    if law.dim != dim:
        raise ConfigError(f"initial law has dimension {law.dim}, expected {dim}", 'init')
    return law


def build_kernel(table: Dict[str, Any], dim: int) -> KernelSpec:
    return KernelSpec(table['family'], dim, epsilon=table['epsilon'], kappa=table['kappa'], beta=table['beta'],
                      anchors=tuple(tuple(a) for a in table['anchors']), cutoff=table['cutoff'])


def build_drift(tables: Dict[str, Dict[str, Any]], dim: int) -> DriftSpec:
    kernel = build_kernel(tables['kernel'], dim) if 'kernel' in tables else None
    table = tables.get('drift') or _resolve_table('drift', {}, '')
    b1 = None
    if table['b1'] != 'zero':
        b1 = LipschitzTerm(table['b1'], dim, rate=table['rate'], matrix=table['matrix'], vector=table['vector'])
    singular = tuple(SingularTerm(dim, s['strength'], s['center'], s['alpha'], s['p_prime'], s['q_prime'],
                                  epsilon=s['epsilon'], form=s['form']) for s in table['singular'])
    return DriftSpec(dim, kernel=kernel, coupling=table['coupling'], b1=b1, extra_singular=singular,
                     faithful=table['faithful'])


def build_sigma(table: Dict[str, Any]) -> SigmaSpec:
    dim = table['dim']
    if table['sigma_form'] == 'diagonal_affine':
        base = table['sigma_base'] if table['sigma_base'] is not None else table['sigma']
        bounds = _need(table, 'sde', 'sigma_bounds')
        if not isinstance(bounds, list) or len(bounds) != 2:
            raise ConfigError("sigma_bounds must be [lower, upper]", 'sde.sigma_bounds')
        return SigmaSpec('diagonal_affine', dim, base=base, slope=table['sigma_slope'], bounds=tuple(bounds))
    if table['sigma_matrix'] is not None:
        return SigmaSpec('constant', dim, matrix=table['sigma_matrix'])
    return SigmaSpec.scaled_identity(dim, table['sigma'])


def build_sde(tables: Dict[str, Dict[str, Any]], seed: int) -> SdeConfig:
    table = tables['sde']
    dim = table['dim']
    if table['record_times'] is not None:
        record = tuple(np.atleast_1d(table['record_times']).tolist())
    else:
        if table['record_count'] < 2:
            raise ConfigError("record_count must be >= 2", 'sde.record_count')
        record = tuple(np.linspace(0.0, table['T'], table['record_count']).tolist())
    ellipticity = table['ellipticity']
    if ellipticity is not None and (not isinstance(ellipticity, list) or len(ellipticity) != 2):
        raise ConfigError("ellipticity must be [lambda_min, lambda_max]", 'sde.ellipticity')
    return SdeConfig(dim, build_drift(tables, dim), build_sigma(table), table['T'], table['dt'],
                     table['n_particles'], seed, record_mesh=record,
                     ellipticity=None if ellipticity is None else tuple(ellipticity),
                     use_cell_list=table['cell_list'], threads=table['threads'], chunk_size=table['chunk_size'])


def build_picard(tables: Dict[str, Dict[str, Any]], seed: int) -> PicardConfig:
    sde = build_sde(tables, seed)
    e = tables['exponents']
    p = tables['picard']
    return PicardConfig(class_d_check(sde.dim, e['p'], e['k']), sde, M=p['M'], mesh_size=p['mesh_size'],
                        lam=p['lambda'], lambda_auto=p['lambda_auto'], max_doublings=p['max_doublings'],
                        tol=p['tol'], max_iter=p['max_iter'], bandwidth=p['bandwidth'], beta0=p['beta0'],
                        n=p['n'], ceiling=p['ceiling'], grid_floor=p['grid_floor'], grid_margin=p['grid_margin'],
                        grid_nodes=p['grid_nodes'], r=p['r'])


def experiment_arguments(config: RunConfig) -> Dict[str, Any]:
    """Keyword arguments of the scenario runner"""
    scenario = config.scenario
    signature = inspect.signature(RUNNERS[scenario]).parameters
    kwargs = dict(config.table('experiment'))
    kwargs['seed'] = config.seed
    kwargs['thresholds'] = dict(config.table('thresholds'))
    dim = config.table('sde').get('dim') or int(kwargs.get('d', 1))
    if scenario == 'entropy_cost':
        dim = 1
    if 'kernel' in signature and config.has('kernel'):
        kwargs['kernel'] = build_kernel(config.table('kernel'), dim)
    if 'drift' in signature and (config.has('kernel') or config.has('drift')):
        kwargs['drift'] = build_drift(config.tables, dim)
    if 'init' in signature and config.has('init'):
        kwargs['init'] = build_init(config.table('init'), dim, config.base_dir)
    if 'gamma' in signature:
        kwargs['gamma'] = build_init(config.table('init'), dim, config.base_dir)
        kwargs['cfg'] = build_picard(config.tables, config.seed)
        if config.table('picard').get('horizon') == 'tau_n':
            kwargs.setdefault('use_tau_horizon', True)
    return kwargs


# ==========================================
# COMMANDS
# ==========================================

def _run_simulate(config: RunConfig, out: Path, manifest: RunManifest):
    sde = build_sde(config.tables, config.seed)
    init = build_init(config.table('init') or _resolve_table('init', {}, ''), sde.dim, config.base_dir)
    requested = list(sde.record_mesh)
    snapped = sde.snapped_times().tolist()
    moved = [(r, round(r / sde.dt) * sde.dt) for r in requested]
    moved = [(r, s) for r, s in moved if abs(r - s) > 1e-12 * max(1.0, abs(r))]
    if moved:
        logger.warning("Record times snapped to multiples of dt=%g: %s", sde.dt, moved)
    manifest.notes['record_times'] = {'requested': requested, 'snapped': snapped}

    began = time.perf_counter()
    mode = config.table('sde')['mode']
    if mode == 'decoupled':
        flow_dir = _need(config.table('sde'), 'sde', 'flow')
        bundle = simulate_decoupled(sde, read_flow(config.base_dir / flow_dir), init)
    elif mode == 'interacting':
        bundle = simulate_interacting(sde, init)
    else:
        raise ConfigError("sde.mode must be 'interacting' or 'decoupled'", 'sde.mode')
    manifest.timings_ms['simulate'] = 1e3 * (time.perf_counter() - began)

    write_frame(bundle.to_frame(), out / 'trajectories.csv')
    write_empirical(bundle.terminal, out / 'terminal.csv')
    rows = []
    for t in bundle.times:
        for order in MOMENT_ORDERS:
            m = empirical_moments(bundle, t, order)
            row = {'time': float(t), 'order': order, 'absolute_moment': m.absolute_moment}
            for a in range(sde.dim):
                row.update({f'moment_x{a}': m.axis_moments[a], f'mean_x{a}': m.means[a],
                            f'variance_x{a}': m.variances[a]})
            rows.append(row)
    write_frame(pd.DataFrame(rows), out / 'moments.csv')
    write_json(out / 'bundle.json', {'config_hash': config.config_hash, 'seed': bundle.seed, 'mode': mode,
                                     'dim': sde.dim, 'n_particles': sde.n_particles, 'dt': bundle.dt,
                                     'n_steps': bundle.n_steps, 'times': bundle.times,
                                     'requested_times': requested})
    print(f"✅ Simulated {sde.n_particles} particles over {bundle.n_steps} steps")


def _run_picard(config: RunConfig, out: Path, manifest: RunManifest):
    cfg = build_picard(config.tables, config.seed)
    gamma = build_init(config.table('init'), cfg.sde.dim, config.base_dir)
    if config.table('picard')['horizon'] == 'tau_n':
        cfg = at_horizon(gamma, cfg)
        manifest.notes['horizon'] = cfg.sde.T
    flow, log = solve_fixed_point(gamma, cfg)
    manifest.timings_ms['iterates'] = log.timings_ms
    if log.blown_up:
        raise BlowupError(f"k*-norm exceeded {cfg.ceiling:g} at t={log.blowup['blowup_time']:g} "
                          f"in iterate {len(log.entries)}", log.blowup)

    write_frame(log.to_frame(), out / 'iterations.csv')
    write_flow(flow, out / 'flow')
    diagnostics = flow_diagnostics(flow, cfg.exponents, cfg.kparams, cfg.sde.drift.measure_dependent,
                                   log.gamma_pstar_norm, cfg.ceiling)
    write_json(out / 'diagnostics.json', {'exponents': cfg.exponents.describe(), 'log': log.summary(),
                                          'flow': diagnostics.to_dict()})
    if config.table('output')['html']:
        write_figure(iteration_figure(log.to_frame(), log.floor, log.tolerance), out / 'iterations.html',
                     'mkvlab-iterations')
        write_figure(density_figure(flow.densities[-1], f"t = {flow.T:g}"), out / 'terminal.html', 'mkvlab-terminal')
    status = '✅' if log.converged else '⚠️'
    print(f"{status} Picard: {len(log.entries)} iterates, final rho {log.final_rho:.4g}, floor {log.floor:.4g}")


def _run_metrics(config: RunConfig, out: Path, manifest: RunManifest):
    table = config.table('metrics')
    metric = table['metric']
    first = read_measure(config.base_dir / table['first'])
    second = read_measure(config.base_dir / table['second']) if table['second'] else None
    params: Dict[str, Any] = {}

    if metric == 'wasserstein':
        if not (isinstance(first, EmpiricalMeasure) and isinstance(second, EmpiricalMeasure)):
            raise ConfigError("wasserstein compares two point files", 'metrics.first')
        params['q'] = table['q']
        value = wasserstein_q(first, second, table['q'])
    else:
        for key, measure in (('first', first), ('second', second)):
            if measure is not None and not isinstance(measure, Density):
                raise ConfigError(f"metric '{metric}' needs density files", f"metrics.{key}")
        if metric == 'tv':
            value = tv_distance(first, second)
        elif metric == 'entropy':
            value = relative_entropy(first, second)
        else:
            kparams = KStarParams(table['k'], table['r'])
            params.update({'k': table['k'], 'r': kparams.radius(first.grid.dim)})
            if metric == 'kstar':
                value = kstar_distance(first, second, kparams)
            elif metric == 'kstar_norm':
                value = kstar_norm_surrogate(first, kparams)
            else:
                bounds = dual_oracle_bounds(first, kparams, tol=table['tol'], max_iter=table['max_iter'])
                params.update({'lower': bounds.lower, 'upper': bounds.upper, 'iterations': bounds.iterations})
                if not bounds.converged:
                    raise ConvergenceError("dual oracle did not reach its tolerance", bounds.lower, bounds.upper,
                                           bounds.iterations)
                value = bounds.lower
    write_json(out / 'metric.json', {'metric': metric, 'params': params, 'value': value})
    print(f"📊 {metric} = {value:.10g}")


def _run_experiment(config: RunConfig, out: Path, manifest: RunManifest):
    kwargs = experiment_arguments(config)
    report = RUNNERS[config.scenario](**kwargs)
    manifest.timings_ms['scenario'] = 1e3 * report.wall_time
    manifest.notes['report_hash'] = report.config_hash

    write_json(out / 'report.json', report.to_json_dict())
    for name, frame in sorted(report.tables.items()):
        write_frame(frame, out / f'{name}.csv')
    for name, density in sorted(report.densities.items()):
        write_density(density, out / f'density_{name}.csv')
    output = config.table('output')
    if output['html']:
        write_figure(scenario_figure(report), out / 'figure.html', f'mkvlab-{config.scenario}')
    if output['image'] and report.densities:
        for name, density in sorted(report.densities.items()):
            image, _ = render_density(density, title=name)
            image.save(out / f'density_{name}.png', format='PNG')
    if output['pdf']:
        generate_pdf_report(report, str(out / 'report.pdf'))

    for criterion in report.criteria:
        print(f"{'✅' if criterion.passed else '❌'} {criterion.name}: {criterion.detail}")
    if not report.passed:
        names = ', '.join(c.name for c in report.failures())
        raise AcceptanceError(f"scenario {config.scenario} failed: {names}")


HANDLERS: Dict[str, Callable[[RunConfig, Path, RunManifest], None]] = {
    'simulate': _run_simulate,
    'picard': _run_picard,
    'metrics': _run_metrics,
    'experiment': _run_experiment,
}


def _empty(directory: Path):
    shutil.rmtree(directory, ignore_errors=True)
    directory.mkdir(parents=True)


def dispatch(config: RunConfig) -> Tuple[int, RunManifest]:
    """
    Run one command and publish its outputs atomically

    Outputs are written to a hidden sibling directory and renamed over `config.out` at the
    end. A failed run publishes only its manifest (with the error record); an acceptance
    failure keeps the outputs.

    Returns:
        Tuple of (exit code, manifest)
    """
    final = Path(config.out)
    staging = final.parent / f".{final.name}.tmp-{os.getpid()}"
    _empty(staging)
    manifest = RunManifest(config.command, config.config_hash, config.seed)
    if config.scenario:
        manifest.notes['scenario'] = config.scenario

    began = time.perf_counter()
    code, error = 0, None
    try:
        write_json(staging / 'config.json', config.echo())
        HANDLERS[config.command](config, staging, manifest)
    except AcceptanceError as exc:
        code, error = exc.exit_code, exc.to_record()
    except MkvlabError as exc:
        code, error = exc.exit_code, exc.to_record()
        logger.error("%s failed: %s", config.command, exc)
    except Exception as exc:
        code = 3
        error = {'type': type(exc).__name__, 'message': str(exc), 'exit_code': code,
                 'traceback': traceback.format_exc()}
        logger.exception("%s failed unexpectedly", config.command)
    manifest.timings_ms['total'] = 1e3 * (time.perf_counter() - began)

    if code not in (0, AcceptanceError.exit_code):
        _empty(staging)
    manifest.record_files(staging)
    manifest.finish(code, error)
    manifest.write(staging)
    if final.exists():
        shutil.rmtree(final)
    os.replace(staging, final)
    logger.info("Run %s finished with exit code %d in %s", config.command, code, final)
    return code, manifest
