"""Run configuration: one JSON document for every pipeline stage."""

import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

from ..core.closure import standard_grid
from ..core.dataset import DEFAULT_INIT_RANGE
from ..core.integrator import IntegratorConfig
from ..core.session import DiagnosticsOptions
from ..core.training import TrainingConfig
from ..nn.models import MODEL_KINDS, config_from_dict, default_config
from .errors import ConfigError, StorageError
from .validation import validate_rho_beta

logger = logging.getLogger(__name__)

RESOLVED_NAME = 'resolved_config.json'


@dataclass(frozen=True)
class DatasetRecipe:
    """How the training, validation and long-run corpora are generated."""
    grid: Optional[Tuple[Tuple[float, float], ...]] = None
    n_sequences: int = 250
    n_valid: int = 25
    n_steps: int = 500
    long_steps: int = 125000
    dt: float = 0.15
    n: int = 256
    init_range: Tuple[float, float] = DEFAULT_INIT_RANGE
    scale: float = 1.0

    def __post_init__(self):
        if self.grid is not None:
            object.__setattr__(self, 'grid', tuple(validate_rho_beta(*pair) for pair in self.grid))
        object.__setattr__(self, 'init_range', tuple(float(v) for v in self.init_range))
        for name in ('n_sequences', 'n_valid', 'n'):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1, got {getattr(self, name)}")
        if self.n_steps < 0 or self.long_steps < 0:
            raise ConfigError("n_steps and long_steps must be non-negative")
        if not self.dt > 0 or not self.scale > 0:
            raise ConfigError(f"dt and scale must be positive, got {self.dt}, {self.scale}")

    @property
    def configurations(self) -> List[Tuple[float, float]]:
        return list(self.grid) if self.grid is not None else standard_grid()

    def to_dict(self) -> dict:
        data = asdict(self)
        data['grid'] = [list(p) for p in self.grid] if self.grid is not None else None
        data['init_range'] = list(self.init_range)
        return data


@dataclass(frozen=True)
class ModelSection:
    """Model kind plus overrides of its default hyper-parameters."""
    kind: str = 'pfno'
    config: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ConfigError(f"model.kind must be one of {MODEL_KINDS}, got {self.kind!r}")
        allowed = set(default_config(self.kind).to_dict())
        unknown = sorted(set(self.config) - allowed)
        if unknown:
            raise ConfigError(f"Unknown configuration key: model.config.{unknown[0]}")
        self.build_config()

    def build_config(self):
        return config_from_dict(self.kind, self.config)

    def to_dict(self) -> dict:
        return {'kind': self.kind, 'config': self.build_config().to_dict()}


SECTIONS = {
    'integrator': IntegratorConfig,
    'dataset': DatasetRecipe,
    'model': ModelSection,
    'training': TrainingConfig,
    'diagnostics': DiagnosticsOptions,
}


@dataclass(frozen=True)
class RunConfig:
    """Everything a run needs, mirroring the CLI subcommands."""
    seed: int = 0
    integrator: IntegratorConfig = field(default_factory=IntegratorConfig)
    dataset: DatasetRecipe = field(default_factory=DatasetRecipe)
    model: ModelSection = field(default_factory=ModelSection)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    diagnostics: DiagnosticsOptions = field(default_factory=DiagnosticsOptions)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'RunConfig':
        """Build a RunConfig, rejecting unknown keys by their dotted path.

        Raises:
            ConfigError: On an unknown key or an invalid value
        """
        if not isinstance(data, dict):
            raise ConfigError("Run configuration must be a JSON object")
        unknown = sorted(set(data) - {f.name for f in fields(cls)})
        if unknown:
            raise ConfigError(f"Unknown configuration key: {unknown[0]}")

        kwargs: Dict[str, Any] = {}
        if 'seed' in data:
            kwargs['seed'] = int(data['seed'])
        for name, section in SECTIONS.items():
            if name in data:
                kwargs[name] = _build_section(name, section, data[name])
        return cls(**kwargs)

    def with_seed(self, seed: Optional[int]) -> 'RunConfig':
        return self if seed is None else replace(self, seed=int(seed))

    def override(self, section: str, **values) -> 'RunConfig':
        """Copy with CLI flag values applied to one section; None values are ignored."""
        values = {k: v for k, v in values.items() if v is not None}
        if not values:
            return self
        current = getattr(self, section)
        return replace(self, **{section: _build_section(section, SECTIONS[section],
                                                        {**current.to_dict(), **values})})

    def to_dict(self) -> dict:
        data: Dict[str, Any] = {'seed': self.seed}
        for name in SECTIONS:
            data[name] = getattr(self, name).to_dict()
        return data


def _build_section(name: str, cls, data: Any):
    if not isinstance(data, dict):
        raise ConfigError(f"{name} must be a JSON object")
    allowed = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"Unknown configuration key: {name}.{unknown[0]}")
    try:
        return cls(**data)
    except ConfigError as e:
        raise ConfigError(f"{name}: {e}")
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{name}: invalid value ({e})")


def load_run_config(path: Optional[Path]) -> RunConfig:
    """Read a RunConfig JSON file, or return defaults when path is None.

    Raises:
        StorageError: If the file cannot be read
        ConfigError: If the content is invalid
    """
    if path is None:
        return RunConfig()
    path = Path(path)
    try:
        text = path.read_text(encoding='utf-8')
    except OSError as e:
        raise StorageError(f"Cannot read run configuration {path}: {e}")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path} is not valid JSON: {e}")
    logger.info(f"Loaded run configuration from {path}")
    return RunConfig.from_dict(data)


def write_resolved(config: RunConfig, out_dir: Path, extra: Optional[dict] = None) -> Path:
    """Write the fully resolved configuration next to a run's outputs."""
    out_dir = Path(out_dir)
    document = config.to_dict()
    if extra:
        document['command'] = extra
    path = out_dir / RESOLVED_NAME
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(document, indent=2, sort_keys=True) + '\n', encoding='utf-8')
    except OSError as e:
        raise StorageError(f"Failed to write {path}: {e}")
    logger.info(f"Resolved configuration written to {path}")
    return path
