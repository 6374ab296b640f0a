"""
Run configuration: one dataclass tree for every stage of a run.

Values come from the defaults below, then a JSON config file, then
``PSGDE_`` environment variables, then command-line flags.
"""
import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Union

from downstream_eval import TASK_OUTPUTS, ProbeConfig
from errors import ConfigError
from macro_encoder import MacroConfig
from micro_encoder import MicroConfig
from signal_pipeline import PipelineConfig
from synthetic_cohort import GeneratorConfig

logger = logging.getLogger(__name__)

ENV_PREFIX = 'PSGDE_'
STAGES = ('all', 'micro', 'macro', 'eval') + tuple(f'probe:{task}' for task in TASK_OUTPUTS)


@dataclass
class OptimConfig:
    micro_lr: float = 5e-4
    macro_lr: float = 1e-4
    lr_min: float = 1e-8
    betas: List[float] = field(default_factory=lambda: [0.9, 0.99])
    weight_decay: float = 0.05
    micro_epochs: int = 1
    macro_epochs: int = 1
    micro_batch: int = 8
    windows_per_record: int = 16
    warmup_steps: int = 0

    def validate(self):
        if self.micro_lr <= 0 or self.macro_lr <= 0:
            raise ConfigError(f"learning rates must be positive, got {self.micro_lr}, {self.macro_lr}")
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            raise ConfigError(f"betas must be two values in [0, 1), got {self.betas}")
        if self.micro_epochs < 1 or self.macro_epochs < 1 or self.micro_batch < 1:
            raise ConfigError("epochs and batch sizes must be positive")


@dataclass
class PathsConfig:
    out: str = 'runs/default'
    cohort: str = ''

    @property
    def cohort_dir(self) -> Path:
        return Path(self.cohort) if self.cohort else Path(self.out) / 'cohort'


@dataclass
class RunConfig:
    seed: int = 0
    stage: str = 'all'
    cohort: GeneratorConfig = field(default_factory=GeneratorConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    micro: MicroConfig = field(default_factory=MicroConfig.desk)
    macro: MacroConfig = field(default_factory=MacroConfig.desk)
    optim: OptimConfig = field(default_factory=OptimConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def validate(self) -> 'RunConfig':
        if self.stage not in STAGES:
            raise ConfigError(f"Unknown stage {self.stage}; expected one of {list(STAGES)}")
        self.cohort.validate()
        self.micro.validate()
        self.macro.validate()
        self.optim.validate()
        self.probe.validate()
        missing = [m for m in self.micro.modalities if m not in self.cohort.modalities]
        if missing:
            raise ConfigError(f"micro encoder modalities {missing} are not generated by the cohort")
        return self

    def canonical_json(self) -> str:
        """Sorted, compact JSON of everything that shapes the artifacts; output paths and the stage are excluded"""
        body = asdict(self)
        body.pop('paths')
        body.pop('stage')
        return json.dumps(body, sort_keys=True, separators=(',', ':'))

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode('utf-8')).hexdigest()[:16]


def _coerce(value, current, key: str):
    """Convert ``value`` to the type of the field's current value"""
    try:
        if isinstance(value, str) and not isinstance(current, str):
            if isinstance(current, bool):
                lowered = value.strip().lower()
                if lowered not in ('1', '0', 'true', 'false', 'yes', 'no'):
                    raise ValueError(value)
                return lowered in ('1', 'true', 'yes')
            if isinstance(current, (list, dict)):
                return json.loads(value)
            return type(current)(value)
        if isinstance(current, bool) or isinstance(value, bool):
            if not isinstance(value, bool) or not isinstance(current, bool):
                raise ValueError(value)
            return value
        if isinstance(current, float) and isinstance(value, int):
            return float(value)
        if isinstance(current, int) and isinstance(value, float) and value.is_integer():
            return int(value)
        return value
    except (TypeError, ValueError, json.JSONDecodeError):
        raise ConfigError(f"Invalid value {value!r} for {key}") from None


def merge_into(target, data: Mapping, path: str = ''):
    """Recursively apply ``data`` onto a dataclass instance; unknown keys raise ConfigError"""
    names = {f.name for f in fields(target)}
    for key, value in data.items():
        full = f"{path}{key}"
        if key not in names:
            raise ConfigError(f"Unknown config key '{full}'")
        current = getattr(target, key)
        if is_dataclass(current):
            if not isinstance(value, Mapping):
                raise ConfigError(f"Config section '{full}' must be an object")
            merge_into(current, value, f"{full}.")
        else:
            setattr(target, key, _coerce(value, current, full))
    return target


def env_overrides(environ: Optional[Mapping[str, str]] = None) -> Dict:
    """Nested override dict from PSGDE_SEED, PSGDE_OUT and PSGDE_<SECTION>__<FIELD>"""
    environ = os.environ if environ is None else environ
    overrides: Dict = {}
    for name, value in environ.items():
        if not name.startswith(ENV_PREFIX):
            continue
        key = name[len(ENV_PREFIX):]
        if key == 'LOG_LEVEL':
            continue
        if key == 'OUT':
            overrides.setdefault('paths', {})['out'] = value
        elif '__' in key:
            section, option = key.lower().split('__', 1)
            overrides.setdefault(section, {})[option] = value
        else:
            overrides[key.lower()] = value
    return overrides


def load_run_config(path: Optional[Union[str, Path]] = None, environ: Optional[Mapping[str, str]] = None,
                    overrides: Optional[Mapping] = None) -> RunConfig:
    """Defaults < JSON file < environment < explicit overrides; the result is validated"""
    cfg = RunConfig()
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"Config file not found: {path}")
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"Config file {path} is not valid JSON: {e}") from None
        if not isinstance(data, dict):
            raise ConfigError(f"Config file {path} must hold a JSON object")
        merge_into(cfg, data)
        logger.info(f"Loaded config from {path}")
    merge_into(cfg, env_overrides(environ))
    if overrides:
        merge_into(cfg, overrides)
    return cfg.validate()
