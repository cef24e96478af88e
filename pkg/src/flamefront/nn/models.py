"""Parametric neural operators advancing a front by one output interval.

All models map a batch of front samples v of shape (B, N) and the
normalized parameters gamma of shape (B, 2) to the next front, (B, N).
"""

import logging
from dataclasses import dataclass, asdict
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import functional as F
from .tensor import Tensor, no_grad
from ..utils.errors import ConfigError, ShapeError

logger = logging.getLogger(__name__)

BETA_SCALE = 40.0
MODEL_KINDS = ('pfno', 'pfno_star', 'pcnn')


@dataclass(frozen=True)
class GammaInput:
    """Equation parameters as seen by a network."""
    rho: float
    beta: float

    @property
    def normalized(self) -> np.ndarray:
        return np.array([self.rho, self.beta / BETA_SCALE])


GammaLike = Union[GammaInput, Sequence[GammaInput], np.ndarray]


def gamma_batch(gamma: GammaLike, batch: int) -> np.ndarray:
    """Normalized gamma array of shape (batch, 2).

    Accepts one GammaInput, a list of them, or an already normalized array
    of shape (2,) or (batch, 2).
    """
    if isinstance(gamma, GammaInput):
        array = gamma.normalized
    elif isinstance(gamma, np.ndarray):
        array = gamma.astype(np.float64)
    else:
        array = np.stack([g.normalized for g in gamma])

    if array.ndim == 1:
        array = np.tile(array, (batch, 1))
    if array.shape != (batch, 2):
        raise ShapeError(f"gamma must have shape ({batch}, 2), got {array.shape}")
    return array


def _check_keys(cls, data: dict):
    unknown = set(data) - set(cls.__dataclass_fields__)
    if unknown:
        raise ConfigError(f"Unknown {cls.__name__} keys: {sorted(unknown)}")


@dataclass(frozen=True)
class PfnoConfig:
    """Parametric Fourier neural operator hyper-parameters."""
    levels: int = 4
    channels: int = 30
    kappa_max: int = 128
    n_ratios: int = 5
    variant: str = 'full'
    share_layers: bool = True
    n: int = 256
    lift_hidden: int = 64
    proj_hidden: int = 64
    ratio_hidden: int = 32

    def __post_init__(self):
        if self.variant not in ('full', 'star'):
            raise ConfigError(f"variant must be 'full' or 'star', got {self.variant!r}")
        if min(self.levels, self.channels, self.n_ratios, self.lift_hidden, self.proj_hidden) < 1:
            raise ConfigError("levels, channels, n_ratios and hidden widths must be positive")
        if self.n % 2 or not 1 <= self.kappa_max <= self.n // 2:
            raise ConfigError(f"kappa_max={self.kappa_max} must lie in [1, n/2] for n={self.n}")
        if self.kappa_max % 2 ** (self.n_ratios - 1):
            raise ConfigError(
                f"kappa_max={self.kappa_max} is not divisible by 2^(n_ratios-1)={2 ** (self.n_ratios - 1)}"
            )

    @property
    def modes(self) -> int:
        return self.kappa_max + 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> 'PfnoConfig':
        _check_keys(cls, data)
        return cls(**data)


@dataclass(frozen=True)
class PcnnConfig:
    """Parametric convolutional encoder-decoder hyper-parameters."""
    levels: int = 6
    channels: Tuple[int, ...] = (20, 40, 60, 80, 100, 120)
    inception: bool = True
    ratio_hidden: int = 32
    n: int = 256
    kernel: int = 3

    def __post_init__(self):
        object.__setattr__(self, 'channels', tuple(int(c) for c in self.channels))
        if self.levels < 2:
            raise ConfigError(f"pCNN needs at least 2 levels, got {self.levels}")
        if len(self.channels) != self.levels:
            raise ConfigError(f"{len(self.channels)} channel counts given for {self.levels} levels")
        if self.n % 2 ** (self.levels - 1):
            raise ConfigError(f"n={self.n} cannot be halved {self.levels - 1} times")
        if self.kernel % 2 == 0:
            raise ConfigError(f"kernel must be odd, got {self.kernel}")
        if self.inception and min(self.channels) < 3:
            raise ConfigError("Inception blocks need at least 3 channels per level")

    def to_dict(self) -> dict:
        data = asdict(self)
        data['channels'] = list(self.channels)
        return data

    @classmethod
    def from_dict(cls, data: dict) -> 'PcnnConfig':
        _check_keys(cls, data)
        return cls(**data)


def band_index(kappa_max: int, n_ratios: int) -> np.ndarray:
    """Ratio index used by every mode 0..kappa_max.

    Band i < n_ratios - 1 covers (kappa_max / 2^(i+1), kappa_max / 2^i];
    the last band covers everything below, including the mean mode.
    """
    if n_ratios < 1 or kappa_max % 2 ** (n_ratios - 1):
        raise ConfigError(f"Invalid band structure: kappa_max={kappa_max}, n_ratios={n_ratios}")

    index = np.full(kappa_max + 1, n_ratios - 1, dtype=np.intp)
    for kappa in range(1, kappa_max + 1):
        i = 0
        while i < n_ratios - 1 and kappa <= kappa_max >> (i + 1):
            i += 1
        index[kappa] = i
    return index


def dstar_redistribute(d, kappa_max: int):
    """Spread N_D ratios over the modes 0..kappa_max.

    Args:
        d: Ratios of shape (..., N_D), a Tensor or an array
        kappa_max: Highest mode

    Returns:
        Per-mode ratios of shape (..., kappa_max + 1), same type as d
    """
    index = band_index(kappa_max, d.shape[-1])
    if isinstance(d, Tensor):
        return F.take(d, index, axis=-1)
    return np.take(np.asarray(d), index, axis=-1)


@dataclass
class ParamSpec:
    name: str
    shape: Tuple[int, ...]
    init: str  # 'fan_in', 'zeros' or 'spectral'
    fan_in: int = 1
    channels: int = 1


def _dense(prefix: str, n_in: int, n_out: int) -> List[ParamSpec]:
    return [ParamSpec(f'{prefix}.weight', (n_out, n_in), 'fan_in', fan_in=n_in),
            ParamSpec(f'{prefix}.bias', (n_out,), 'zeros')]


def _conv(prefix: str, n_in: int, n_out: int, width: int) -> List[ParamSpec]:
    return [ParamSpec(f'{prefix}.weight', (n_out, n_in, width), 'fan_in', fan_in=n_in * width),
            ParamSpec(f'{prefix}.bias', (n_out,), 'zeros')]


def _pfno_specs(config: PfnoConfig) -> List[ParamSpec]:
    d, k = config.channels, config.modes
    specs = _dense('lift.hidden', 3, config.lift_hidden) + _dense('lift.out', config.lift_hidden, d)

    fourier = ['fourier'] if config.share_layers else [f'fourier{l}' for l in range(config.levels)]
    parts = ('r_re', 'r_im', 's_re', 's_im') if config.variant == 'full' else ('r_re', 'r_im')
    for prefix in fourier:
        specs += _dense(prefix, d, d)
        specs += [ParamSpec(f'{prefix}.{part}', (k, d, d), 'spectral', channels=d) for part in parts]

    if config.variant == 'full':
        for l in range(config.levels):
            specs += _dense(f'ratio{l}.hidden', 2, config.ratio_hidden)
            specs += _dense(f'ratio{l}.out', config.ratio_hidden, config.n_ratios)

    specs += _dense('proj.hidden', d, config.proj_hidden)
    specs += _dense('proj.out', config.proj_hidden, 1)
    return specs


def _inception_split(channels: int) -> List[int]:
    third = channels // 3
    return [channels - 2 * third, third, third]


def _pcnn_specs(config: PcnnConfig) -> List[ParamSpec]:
    specs: List[ParamSpec] = []
    widths = [1] + list(config.channels)
    kernel = config.kernel

    for l in range(config.levels):
        c_in, c_out = widths[l], widths[l + 1]
        for branch in ('main', 'side'):
            prefix = f'enc{l}.{branch}'
            specs += _conv(f'{prefix}.conv0', c_in, c_out, kernel)
            if config.inception:
                for part, (size, width) in enumerate(zip(_inception_split(c_out), (1, 3, 5))):
                    specs += _conv(f'{prefix}.incep{part}', c_out, size, width)
            else:
                specs += _conv(f'{prefix}.conv1', c_out, c_out, kernel)
        specs += _dense(f'ratio{l}.hidden', 2, config.ratio_hidden)
        specs += _dense(f'ratio{l}.out', config.ratio_hidden, 1)

    for l in range(config.levels - 1, 0, -1):
        c_here, c_below = widths[l], widths[l + 1]
        specs += _conv(f'dec{l}.conv0', c_below + c_here, c_here, kernel)
        specs += _conv(f'dec{l}.conv1', c_here, 1 if l == 1 else c_here, kernel)
    return specs


def parameter_specs(config: Union[PfnoConfig, PcnnConfig]) -> List[ParamSpec]:
    if isinstance(config, PfnoConfig):
        return _pfno_specs(config)
    return _pcnn_specs(config)


def init_weights(config: Union[PfnoConfig, PcnnConfig], seed: int) -> Dict[str, np.ndarray]:
    """Draw initial weights deterministically from seed.

    Spectral weights get magnitude uniform in [0, 1/d_z^2) and a uniform
    phase; dense and convolution weights are uniform in
    (-1/sqrt(fan_in), 1/sqrt(fan_in)); biases start at zero.

    Args:
        config: Model configuration
        seed: Seed for numpy's default generator

    Returns:
        Ordered mapping from parameter name to array
    """
    rng = np.random.default_rng(seed)
    weights: Dict[str, np.ndarray] = {}
    specs = parameter_specs(config)
    phases: Dict[str, np.ndarray] = {}

    for spec in specs:
        if spec.init == 'zeros':
            weights[spec.name] = np.zeros(spec.shape)
        elif spec.init == 'fan_in':
            bound = 1.0 / np.sqrt(spec.fan_in)
            weights[spec.name] = rng.uniform(-bound, bound, size=spec.shape)
        else:
            # real and imaginary buffers of one complex weight come as a pair
            stem, part = spec.name.rsplit('.', 1)
            key = f'{stem}.{part[0]}'
            if key not in phases:
                magnitude = rng.uniform(0.0, 1.0, size=spec.shape) / spec.channels ** 2
                phase = rng.uniform(0.0, 2.0 * np.pi, size=spec.shape)
                phases[key] = magnitude * np.exp(1j * phase)
            value = phases[key]
            weights[spec.name] = value.real.copy() if part.endswith('re') else value.imag.copy()
    return weights


class OperatorModel:
    """Base class holding named trainable tensors."""

    kind = ''

    def __init__(self, config, weights: Dict[str, np.ndarray]):
        self.config = config
        expected = {spec.name: spec.shape for spec in parameter_specs(config)}
        if set(weights) != set(expected):
            missing = sorted(set(expected) - set(weights))
            extra = sorted(set(weights) - set(expected))
            raise ShapeError(f"Weights do not match {self.kind} config (missing {missing}, unexpected {extra})")

        self.tensors: Dict[str, Tensor] = {}
        for name, shape in expected.items():
            value = np.asarray(weights[name], dtype=np.float64)
            if value.shape != tuple(shape):
                raise ShapeError(f"Weight {name} has shape {value.shape}, expected {shape}")
            self.tensors[name] = Tensor(value.copy(), requires_grad=True, name=name)

    def parameters(self) -> List[Tensor]:
        return list(self.tensors.values())

    def parameter_count(self) -> int:
        return int(sum(t.data.size for t in self.tensors.values()))

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.tensors.items()}

    def load_state_dict(self, weights: Dict[str, np.ndarray]):
        for name, t in self.tensors.items():
            if weights[name].shape != t.shape:
                raise ShapeError(f"Weight {name} has shape {weights[name].shape}, expected {t.shape}")
            t.data = np.asarray(weights[name], dtype=np.float64).copy()

    def _input(self, v) -> Tensor:
        v = v if isinstance(v, Tensor) else Tensor(v)
        if v.ndim != 2 or v.shape[1] != self.config.n:
            raise ShapeError(f"{self.kind} expects input of shape (B, {self.config.n}), got {v.shape}")
        return v

    def forward(self, v: Tensor, gamma: np.ndarray) -> Tensor:
        raise NotImplementedError

    def __call__(self, v, gamma: GammaLike) -> Tensor:
        v = self._input(v)
        return self.forward(v, gamma_batch(gamma, v.shape[0]))

    def predict(self, values: np.ndarray, gamma: GammaLike) -> np.ndarray:
        """Graph-free forward pass on plain arrays of shape (N,) or (B, N)."""
        values = np.asarray(values, dtype=np.float64)
        single = values.ndim == 1
        with no_grad():
            out = self(values[None] if single else values, gamma).data
        return out[0] if single else out

    def _mlp(self, prefix: str, x: Tensor) -> Tensor:
        t = self.tensors
        hidden = F.relu(F.linear(x, t[f'{prefix}.hidden.weight'], t[f'{prefix}.hidden.bias']))
        return F.linear(hidden, t[f'{prefix}.out.weight'], t[f'{prefix}.out.bias'])


class PFNO(OperatorModel):
    """Parametric Fourier neural operator.

    Each hidden layer computes relu(W z + b + irfft(M(rfft z))) where the
    per-mode mixer M is R + R* D*(gamma) for the full variant and R alone
    for the star variant, which only sees gamma through its input channels.
    The lift P and the projection Q are pointwise two-layer ReLU networks.
    """

    kind = 'pfno'

    def __init__(self, config: PfnoConfig, weights: Dict[str, np.ndarray]):
        self.kind = 'pfno' if config.variant == 'full' else 'pfno_star'
        super().__init__(config, weights)
        self.bands = band_index(config.kappa_max, config.n_ratios)

    def _layer_prefix(self, level: int) -> str:
        return 'fourier' if self.config.share_layers else f'fourier{level}'

    def forward(self, v: Tensor, gamma: np.ndarray) -> Tensor:
        cfg, t = self.config, self.tensors
        batch, n = v.shape
        gamma_channels = np.broadcast_to(gamma[:, :, None], (batch, 2, n))
        x = F.concat([F.reshape(v, (batch, 1, n)), Tensor(gamma_channels)], axis=1)
        z = self._mlp('lift', x)

        gamma_t = Tensor(gamma)
        for level in range(cfg.levels):
            p = self._layer_prefix(level)
            modes = F.rfft(z, modes=cfg.modes)
            if cfg.variant == 'full':
                ratios = F.take(self._mlp(f'ratio{level}', gamma_t), self.bands, axis=1)
                mixed = F.complex_mode_mix(modes, t[f'{p}.r_re'], t[f'{p}.r_im'],
                                           t[f'{p}.s_re'], t[f'{p}.s_im'], ratios)
            else:
                mixed = F.complex_mode_mix(modes, t[f'{p}.r_re'], t[f'{p}.r_im'])
            local = F.linear(z, t[f'{p}.weight'], t[f'{p}.bias'])
            z = F.relu(F.add(local, F.irfft(mixed, n)))

        return F.reshape(self._mlp('proj', z), (batch, n))


class PCNN(OperatorModel):
    """Parametric convolutional encoder-decoder with gamma-scaled side branches."""

    kind = 'pcnn'

    def _conv(self, prefix: str, x: Tensor) -> Tensor:
        return F.conv1d_periodic(x, self.tensors[f'{prefix}.weight'], self.tensors[f'{prefix}.bias'])

    def _branch(self, prefix: str, x: Tensor) -> Tensor:
        h = F.relu(self._conv(f'{prefix}.conv0', x))
        if self.config.inception:
            parts = [self._conv(f'{prefix}.incep{i}', h) for i in range(3)]
            return F.relu(F.concat(parts, axis=1))
        return F.relu(self._conv(f'{prefix}.conv1', h))

    def forward(self, v: Tensor, gamma: np.ndarray) -> Tensor:
        cfg = self.config
        batch, n = v.shape
        gamma_t = Tensor(gamma)

        merged: List[Tensor] = [F.reshape(v, (batch, 1, n))]
        for level in range(cfg.levels):
            x = merged[-1]
            if level >= 1:
                x = F.maxpool1d(x, 2)
            e = self._branch(f'enc{level}.main', x)
            e_side = self._branch(f'enc{level}.side', x)
            ratio = self._mlp(f'ratio{level}', gamma_t)
            merged.append(F.add(e, F.batch_scale(e_side, ratio)))

        decoded = merged[-1]
        for level in range(cfg.levels - 1, 0, -1):
            x = F.concat([F.upsample_nearest(decoded, 2), merged[level]], axis=1)
            h = F.relu(self._conv(f'dec{level}.conv0', x))
            decoded = self._conv(f'dec{level}.conv1', h)
            if level > 1:
                decoded = F.relu(decoded)

        return F.reshape(decoded, (batch, n))


ModelConfig = Union[PfnoConfig, PcnnConfig]


def default_config(kind: str) -> ModelConfig:
    if kind == 'pfno':
        return PfnoConfig()
    if kind == 'pfno_star':
        return PfnoConfig(variant='star')
    if kind == 'pcnn':
        return PcnnConfig()
    raise ConfigError(f"Unknown model kind {kind!r}; choose from {', '.join(MODEL_KINDS)}")


def config_from_dict(kind: str, data: Optional[dict]) -> ModelConfig:
    base = default_config(kind)
    merged = {**base.to_dict(), **(data or {})}
    if kind == 'pfno_star':
        merged['variant'] = 'star'
    elif kind == 'pfno':
        merged['variant'] = merged.get('variant', 'full')
    cls = PcnnConfig if kind == 'pcnn' else PfnoConfig
    return cls.from_dict(merged)


def model_from_weights(kind: str, config: ModelConfig,
                       weights: Dict[str, np.ndarray]) -> OperatorModel:
    if kind == 'pcnn':
        return PCNN(config, weights)
    return PFNO(config, weights)


def build_model(kind: str, config: Optional[ModelConfig] = None, seed: int = 0) -> OperatorModel:
    """Create a freshly initialized model.

    Args:
        kind: 'pfno', 'pfno_star' or 'pcnn'
        config: Model configuration (defaults to the standard sizes)
        seed: Weight initialization seed

    Returns:
        PFNO or PCNN instance
    """
    config = config if config is not None else default_config(kind)
    if kind == 'pcnn' and not isinstance(config, PcnnConfig):
        raise ConfigError("pcnn needs a PcnnConfig")
    if kind in ('pfno', 'pfno_star') and not isinstance(config, PfnoConfig):
        raise ConfigError(f"{kind} needs a PfnoConfig")
    if kind == 'pfno_star' and config.variant != 'star':
        raise ConfigError("pfno_star needs variant='star'")

    model = model_from_weights(kind, config, init_weights(config, seed))
    logger.info(f"Built {model.kind} with {model.parameter_count()} parameters (seed {seed})")
    return model
