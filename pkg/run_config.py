#!/usr/bin/env python3
"""
Run configuration loading.

Experiment files and model files are flat KEY=VALUE files read with
python-dotenv; process-wide defaults come from config.env. Command-line
flags reach this module as a config_override dict keyed like the file.
"""

import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from dotenv import dotenv_values, load_dotenv

from band_reinsurance_errors import BandReinsuranceError, ConfigError
from reinsurance_contracts import Family, ParameterGrid, grid_from_strings
from thinning_model import SeverityLaw, ThinningModel, validate

logger = logging.getLogger(__name__)

CONTRACT_MODES = ("independent", "shared")
INTEGRATORS = ("exact", "euler")


def load_process_defaults(env_file: str = 'config.env') -> Dict[str, str]:
    """LOG_LEVEL, BAND_THREADS and OUTPUT_ROOT from config.env or the environment"""
    load_dotenv(env_file)
    return {
        'LOG_LEVEL': os.getenv('LOG_LEVEL', 'INFO').upper(),
        'BAND_THREADS': os.getenv('BAND_THREADS', str(os.cpu_count() or 1)),
        'OUTPUT_ROOT': os.getenv('OUTPUT_ROOT', 'outputs'),
    }


def _text(values: Dict[str, Optional[str]], key: str, default: Optional[str] = None) -> Optional[str]:
    value = values.get(key)
    if value is None or str(value).strip() == '':
        return default
    return str(value).strip()


def _number(values, key, default=None, kind=float, positive=False):
    text = _text(values, key)
    if text is None:
        return default
    try:
        number = kind(text)
    except ValueError:
        raise ConfigError(f"{key} must be a {kind.__name__} (got '{text}')", key=key)
    if positive and not number > 0:
        raise ConfigError(f"{key} must be positive (got {number})", key=key)
    return number


def _flag(values, key, default=False) -> bool:
    text = _text(values, key)
    if text is None:
        return default
    if text.lower() in ('true', 'yes', '1', 'on'):
        return True
    if text.lower() in ('false', 'no', '0', 'off'):
        return False
    raise ConfigError(f"{key} must be true or false (got '{text}')", key=key)


def _float_list(values, key, required=True) -> List[float]:
    text = _text(values, key)
    if text is None:
        if required:
            raise ConfigError(f"{key} is required", key=key)
        return []
    try:
        return [float(v) for v in text.split(',') if v.strip()]
    except ValueError:
        raise ConfigError(f"{key} must be a comma-separated list of numbers (got '{text}')", key=key)


def parse_severity(text: str) -> SeverityLaw:
    """`exp:rate`, `gamma:shape:rate` or `lattice:step:m0|m1|...`"""
    parts = text.strip().split(':')
    try:
        if parts[0] == 'exp' and len(parts) == 2:
            return SeverityLaw.exponential(float(parts[1]))
        if parts[0] == 'gamma' and len(parts) == 3:
            return SeverityLaw.gamma(float(parts[1]), float(parts[2]))
        if parts[0] == 'lattice' and len(parts) == 3:
            return SeverityLaw.empirical(float(parts[1]), [float(m) for m in parts[2].split('|')])
    except ValueError:
        pass
    raise ConfigError(f"malformed severity '{text}' (expected exp:rate, gamma:shape:rate or lattice:step:m0|m1|...)",
                      key='SEVERITIES')


def load_model_file(path) -> ThinningModel:
    """Read and validate a model file"""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"model file not found: {path}", key='MODEL_FILE')
    values = dotenv_values(path)

    beta = _float_list(values, 'BETA')
    p_text = _text(values, 'P')
    if p_text is None:
        raise ConfigError("P is required", key='P')
    try:
        p = [[float(v) for v in row.split(',') if v.strip()] for row in p_text.split(';') if row.strip()]
    except ValueError:
        raise ConfigError(f"P rows must be comma-separated numbers (got '{p_text}')", key='P')
    severities_text = _text(values, 'SEVERITIES')
    if severities_text is None:
        raise ConfigError("SEVERITIES is required", key='SEVERITIES')
    severities = [parse_severity(s) for s in severities_text.split(',') if s.strip()]

    eta = _number(values, 'ETA')
    delta = _number(values, 'DELTA')
    if eta is None or delta is None:
        raise ConfigError("ETA and DELTA are required", key='ETA' if eta is None else 'DELTA')
    eta1 = _number(values, 'ETA1', default=eta)

    try:
        model = ThinningModel(beta=tuple(beta), p=tuple(tuple(row) for row in p), severities=tuple(severities),
                              eta=eta, eta1=eta1, delta=delta, label=_text(values, 'LABEL', path.stem))
    except BandReinsuranceError as e:
        raise ConfigError(f"{path.name}: {e}", key='P')
    violations = validate(model)
    if violations:
        raise ConfigError(f"{path.name}: " + "; ".join(violations), key='MODEL_FILE')
    logger.info(f"Loaded model '{model.label}' ({model.m} classes, {model.n} lines) from {path}")
    return model


@dataclass
class RunConfig:
    path: Path
    model_file: Path
    contract_mode: str
    families: List[Family]
    grid: ParameterGrid
    h: float
    x_max: Optional[float] = None
    refine: bool = False
    candidate_cap: int = 200_000
    h_list: List[float] = field(default_factory=list)
    residual_tol: float = 5e-3
    band_cap: int = 8
    b1_stride: int = 1
    sim_paths: int = 10_000
    sim_seed: int = 0
    sim_dt: float = 0.01
    sim_t_max: Optional[float] = None
    sim_x0: List[str] = field(default_factory=lambda: ['0'])
    sim_integrator: str = "exact"
    output_dir: Path = Path('outputs')
    values: Dict[str, str] = field(default_factory=dict)

    @property
    def shared(self) -> bool:
        return self.contract_mode == 'shared'

    @property
    def name(self) -> str:
        return self.path.stem

    def config_hash(self) -> str:
        canonical = json.dumps({k: self.values[k] for k in sorted(self.values)}, separators=(',', ':'))
        return hashlib.sha256(canonical.encode('utf-8')).hexdigest()[:16]

    def load_model(self) -> ThinningModel:
        model = load_model_file(self.model_file)
        if len(self.families) == 1 and model.n > 1:
            self.families = self.families * model.n
        if len(self.families) != model.n:
            raise ConfigError(f"LINE_FAMILIES names {len(self.families)} lines, model has {model.n}",
                              key='LINE_FAMILIES')
        return model


def get_config(config_file, config_override: Optional[Dict] = None) -> RunConfig:
    """
    Load a run configuration file; config_override values (from the command
    line) take precedence over the file.
    """
    path = Path(config_file)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}", key='CONFIG')
    values = {k: v for k, v in dotenv_values(path).items() if v is not None}
    for key, value in (config_override or {}).items():
        if value is not None:
            values[key] = str(value)

    model_text = _text(values, 'MODEL_FILE')
    if model_text is None:
        raise ConfigError("MODEL_FILE is required", key='MODEL_FILE')
    model_file = Path(model_text)
    if not model_file.is_absolute():
        model_file = (path.parent / model_file).resolve()

    mode = _text(values, 'CONTRACT_MODE', 'independent').lower()
    if mode not in CONTRACT_MODES:
        raise ConfigError(f"CONTRACT_MODE must be one of {', '.join(CONTRACT_MODES)} (got '{mode}')",
                          key='CONTRACT_MODE')
    try:
        families = [Family.parse(f) for f in _text(values, 'LINE_FAMILIES', 'identity').split(',') if f.strip()]
    except BandReinsuranceError as e:
        raise ConfigError(str(e), key='LINE_FAMILIES')
    if mode == 'shared' and len(set(families)) > 1:
        raise ConfigError("shared CONTRACT_MODE needs one family for every line", key='LINE_FAMILIES')

    grid_keys = {'b_grid': 'B_GRID', 'M_grid': 'M_GRID', 'L_grid': 'L_GRID'}
    try:
        grid = grid_from_strings(**{arg: _text(values, key) for arg, key in grid_keys.items()})
    except BandReinsuranceError as e:
        raise ConfigError(f"parameter grid: {e}", key='B_GRID')

    h = _number(values, 'H', kind=float)
    if h is None:
        raise ConfigError("H is required", key='H')
    if not h > 0:
        raise ConfigError(f"H must be positive (got {h})", key='H')

    h_list = _float_list(values, 'H_LIST', required=False)
    if any(not v > 0 for v in h_list):
        raise ConfigError("H_LIST entries must be positive", key='H_LIST')

    integrator = _text(values, 'SIM_INTEGRATOR', 'exact').lower()
    if integrator not in INTEGRATORS:
        raise ConfigError(f"SIM_INTEGRATOR must be exact or euler (got '{integrator}')", key='SIM_INTEGRATOR')

    paths = _number(values, 'SIM_PATHS', 10_000, kind=int)
    if paths < 1:
        raise ConfigError(f"SIM_PATHS must be at least 1 (got {paths})", key='SIM_PATHS')

    defaults = load_process_defaults()
    output_dir = Path(_text(values, 'OUTPUT_DIR', os.path.join(defaults['OUTPUT_ROOT'], path.stem)))

    config = RunConfig(
        path=path,
        model_file=model_file,
        contract_mode=mode,
        families=families,
        grid=grid,
        h=h,
        x_max=_number(values, 'X_MAX', positive=True),
        refine=_flag(values, 'REFINE'),
        candidate_cap=_number(values, 'CANDIDATE_CAP', 200_000, kind=int, positive=True),
        h_list=h_list,
        residual_tol=_number(values, 'RESIDUAL_TOL', 5e-3, positive=True),
        band_cap=_number(values, 'BAND_CAP', 8, kind=int, positive=True),
        b1_stride=_number(values, 'B1_STRIDE', 1, kind=int, positive=True),
        sim_paths=paths,
        sim_seed=_number(values, 'SIM_SEED', 0, kind=int),
        sim_dt=_number(values, 'SIM_DT', 0.01, positive=True),
        sim_t_max=_number(values, 'SIM_T_MAX', positive=True),
        sim_x0=[v.strip() for v in _text(values, 'SIM_X0', '0').split(',') if v.strip()],
        sim_integrator=integrator,
        output_dir=output_dir,
        values=values,
    )
    logger.info(f"Loaded run config '{config.name}' ({mode}, families {[f.value for f in families]})")
    return config


def resolve_x0(tokens: Sequence[str], levels: Sequence[float]) -> List[float]:
    """Starting surpluses: numbers, or `a1` / `a1/2` for the first barrier and its half"""
    out = []
    for token in tokens:
        token = token.strip().lower()
        if token in ('a1', 'a1/2'):
            if not levels:
                raise ConfigError("policy has no barrier to resolve SIM_X0", key='SIM_X0')
            out.append(levels[0] / (2.0 if token == 'a1/2' else 1.0))
            continue
        try:
            out.append(float(token))
        except ValueError:
            raise ConfigError(f"SIM_X0 entry '{token}' is not a number, a1 or a1/2", key='SIM_X0')
    return out
