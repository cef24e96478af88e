"""Corpus generation, storage and 1-to-n training windows."""

import csv
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, asdict, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .closure import SolverParams, closure_from_rho_beta
from .integrator import IntegratorConfig, SolutionSequence, iterate, simulate
from .spectral import DEFAULT_MESH, FrontState
from ..utils.errors import BlowUpError, ConfigError, NumericalError, StepLimitError, StorageError
from ..utils.progress import ProgressTracker
from ..utils.validation import format_size

logger = logging.getLogger(__name__)

PRECISION = 'float32'
STORAGE_DTYPE = np.dtype('<f4')
DEFAULT_INIT_RANGE = (0.0, 0.03)
MAX_RETRIES = 3
SPLIT_KEYS = {'train': 0, 'valid': 1, 'test': 2, 'long': 3}


@dataclass
class ConfigEntry:
    """One (rho, beta) block of a corpus and the file holding it."""
    rho: float
    beta: float
    mu: float
    nu: float
    tau: float
    file: str
    n_sequences: int
    length: int
    seeds: List[int] = field(default_factory=list)

    @property
    def params(self) -> SolverParams:
        return SolverParams(rho=self.rho, beta=self.beta, mu=self.mu, nu=self.nu, tau=self.tau)


@dataclass
class DatasetManifest:
    """Description of one corpus split on disk."""
    split: str
    dt_out: float
    mesh_size: int
    precision: str
    init_range: List[float]
    master_seed: int
    n_steps: int
    configs: List[ConfigEntry]
    root: Optional[Path] = None

    @property
    def grid(self) -> List[Tuple[float, float]]:
        return [(c.rho, c.beta) for c in self.configs]

    def path_for(self, entry: ConfigEntry) -> Path:
        return Path(self.root or '.') / entry.file

    def expected_bytes(self, entry: ConfigEntry) -> int:
        return entry.n_sequences * entry.length * self.mesh_size * STORAGE_DTYPE.itemsize

    def to_dict(self) -> dict:
        data = asdict(self)
        data.pop('root')
        return data

    @classmethod
    def from_dict(cls, data: dict, root: Optional[Path] = None) -> 'DatasetManifest':
        try:
            configs = [ConfigEntry(**c) for c in data['configs']]
            return cls(
                split=data['split'],
                dt_out=float(data['dt_out']),
                mesh_size=int(data['mesh_size']),
                precision=data['precision'],
                init_range=list(data['init_range']),
                master_seed=int(data['master_seed']),
                n_steps=int(data['n_steps']),
                configs=configs,
                root=root,
            )
        except (KeyError, TypeError) as e:
            raise StorageError(f"Malformed manifest: {e}")


@dataclass
class TrainingWindow:
    """An input state with its n successors from one sequence."""
    input: np.ndarray
    targets: np.ndarray
    rho: float
    beta: float
    config_index: int
    sequence_index: int
    start: int

    @property
    def n(self) -> int:
        return len(self.targets)


def scaled_count(count: int, scale: float) -> int:
    """Shrink a sequence or epoch count for desk-scale runs, never below one."""
    return max(1, int(round(count * scale)))


def sequence_seed(master_seed: int, split: str, config_index: int,
                  sequence_index: int, attempt: int = 0) -> int:
    """Independent 32-bit seed for one sequence attempt, derived by counter."""
    key = [int(master_seed), SPLIT_KEYS.get(split, len(SPLIT_KEYS)), config_index, sequence_index, attempt]
    return int(np.random.SeedSequence(key).generate_state(1)[0])


def initial_condition(seed: int, n: int = DEFAULT_MESH,
                      init_range: Sequence[float] = DEFAULT_INIT_RANGE) -> FrontState:
    """I.i.d. uniform displacement at every grid point."""
    rng = np.random.default_rng(seed)
    return FrontState(rng.uniform(init_range[0], init_range[1], size=n))


def data_filename(split: str, rho: float, beta: float) -> str:
    return f"{split}_rho{rho:g}_beta{beta:g}.f32"


class CorpusWriter:
    """Write corpus splits and their manifests into one directory."""

    def __init__(self, output_base: Path):
        """Initialize writer.

        Args:
            output_base: Directory receiving data files and manifests
        """
        self.output_base = Path(output_base)
        try:
            self.output_base.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise StorageError(f"Cannot create {self.output_base}: {e}")

    def manifest_path(self, split: str) -> Path:
        return self.output_base / f"{split}_manifest.json"

    def write_block(self, filename: str, states: np.ndarray) -> Path:
        """Write a [sequences, steps+1, N] block as raw little-endian float32."""
        path = self.output_base / filename
        try:
            np.ascontiguousarray(states, dtype=STORAGE_DTYPE).tofile(path)
        except OSError as e:
            raise StorageError(f"Failed to write {path}: {e}")
        logger.debug(f"Wrote {path} ({format_size(path.stat().st_size)})")
        return path

    def write_manifest(self, manifest: DatasetManifest) -> Path:
        path = self.manifest_path(manifest.split)
        try:
            with open(path, 'w') as f:
                json.dump(manifest.to_dict(), f, indent=2)
        except OSError as e:
            raise StorageError(f"Failed to write manifest {path}: {e}")
        manifest.root = self.output_base
        logger.info(f"Manifest written to {path}")
        self._generate_csv(manifest)
        return path

    def _generate_csv(self, manifest: DatasetManifest):
        """Per-config summary next to the manifest."""
        csv_path = self.output_base / f"{manifest.split}_summary.csv"
        with open(csv_path, 'w', newline='') as f:
            writer = csv.writer(f)
            writer.writerow(['rho', 'beta', 'mu', 'nu', 'tau', 'n_sequences', 'length', 'size', 'file'])
            for entry in manifest.configs:
                writer.writerow([
                    entry.rho, entry.beta,
                    f"{entry.mu:.12g}", f"{entry.nu:.12g}", f"{entry.tau:.12g}",
                    entry.n_sequences, entry.length,
                    format_size(manifest.expected_bytes(entry)),
                    entry.file,
                ])
        logger.info(f"CSV written to {csv_path}")


def _simulate_with_retries(params: SolverParams, integrator: IntegratorConfig, n_steps: int,
                           dt: float, n: int, init_range: Sequence[float],
                           seed_for_attempt) -> Tuple[np.ndarray, int]:
    last_error: Optional[Exception] = None
    for attempt in range(MAX_RETRIES + 1):
        seed = seed_for_attempt(attempt)
        try:
            sequence = simulate(initial_condition(seed, n, init_range), params, integrator, n_steps, dt)
            return sequence.states, seed
        except (BlowUpError, StepLimitError) as e:
            last_error = e
            logger.warning(f"Sequence at rho={params.rho}, beta={params.beta} failed with seed {seed} "
                           f"(attempt {attempt + 1}): {e}")
    raise NumericalError(
        f"Sequence at rho={params.rho}, beta={params.beta} failed after {MAX_RETRIES} retries: {last_error}"
    )


def simulate_block(params: SolverParams, config_index: int, n_sequences: int, n_steps: int,
                   dt: float = 0.15, seed: int = 0, split: str = 'train', n: int = DEFAULT_MESH,
                   init_range: Sequence[float] = DEFAULT_INIT_RANGE,
                   integrator: Optional[IntegratorConfig] = None, threads: int = 1,
                   progress: Optional[ProgressTracker] = None) -> Tuple[np.ndarray, List[int]]:
    """Integrate the sequences of one configuration, in parallel across sequences.

    Returns:
        (float32 block of shape (n_sequences, n_steps + 1, n), seeds actually used)
    """
    integrator = integrator or IntegratorConfig(dt_out=dt)

    def job(sequence_index: int):
        return _simulate_with_retries(
            params, integrator, n_steps, dt, n, init_range,
            lambda attempt: sequence_seed(seed, split, config_index, sequence_index, attempt),
        )

    block = np.empty((n_sequences, n_steps + 1, n), dtype=STORAGE_DTYPE)
    seeds: List[int] = []
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        # map preserves order, so the block is independent of scheduling
        for i, (states, used_seed) in enumerate(pool.map(job, range(n_sequences))):
            block[i] = states
            seeds.append(used_seed)
            if progress is not None:
                progress.update(1)
    return block, seeds


def generate_corpus(grid: Sequence[Tuple[float, float]], out_dir: Path, split: str = 'train',
                    n_sequences: int = 250, n_steps: int = 500, dt: float = 0.15,
                    init_range: Sequence[float] = DEFAULT_INIT_RANGE, seed: int = 0,
                    n: int = DEFAULT_MESH, integrator: Optional[IntegratorConfig] = None,
                    threads: int = 1) -> DatasetManifest:
    """Integrate n_sequences random sequences for every (rho, beta) and store them.

    Args:
        grid: (rho, beta) configurations
        out_dir: Directory for data files and the manifest
        split: Split tag ('train' or 'valid')
        n_sequences: Sequences per configuration
        n_steps: Output intervals per sequence (each holds n_steps + 1 states)
        dt: Output interval
        init_range: Bounds of the uniform initial displacement
        seed: Master seed
        n: Mesh size
        integrator: Integrator tolerances (dt_out is taken from dt)
        threads: Worker threads across (config, sequence) pairs

    Returns:
        The written DatasetManifest

    Raises:
        NumericalError: If a sequence fails after every retry
        StorageError: If files cannot be written
    """
    if n_sequences < 1 or n_steps < 0:
        raise ConfigError(f"n_sequences must be >= 1 and n_steps >= 0, got {n_sequences}, {n_steps}")
    integrator = integrator or IntegratorConfig(dt_out=dt)
    writer = CorpusWriter(out_dir)
    lo, hi = float(init_range[0]), float(init_range[1])
    if hi < lo:
        raise ConfigError(f"init_range must be increasing, got {init_range}")

    logger.info(f"Generating {split} corpus: {len(grid)} configs x {n_sequences} sequences x {n_steps} steps")
    entries: List[ConfigEntry] = []

    with ProgressTracker(total=len(grid) * n_sequences, desc=f"Generating {split}", unit="seq") as progress:
        for config_index, (rho, beta) in enumerate(grid):
            params = closure_from_rho_beta(rho, beta)

            block, seeds = simulate_block(
                params, config_index, n_sequences, n_steps, dt=dt, seed=seed, split=split, n=n,
                init_range=(lo, hi), integrator=integrator, threads=threads, progress=progress,
            )

            filename = data_filename(split, params.rho, params.beta)
            writer.write_block(filename, block)
            entries.append(ConfigEntry(
                rho=params.rho, beta=params.beta, mu=params.mu, nu=params.nu, tau=params.tau,
                file=filename, n_sequences=n_sequences, length=n_steps + 1, seeds=seeds,
            ))

    manifest = DatasetManifest(
        split=split, dt_out=dt, mesh_size=n, precision=PRECISION, init_range=[lo, hi],
        master_seed=int(seed), n_steps=n_steps, configs=entries,
    )
    writer.write_manifest(manifest)
    return manifest


def generate_long(params: SolverParams, n_steps: int = 125000, dt: float = 0.15, seed: int = 0,
                  n: int = DEFAULT_MESH, init_range: Sequence[float] = DEFAULT_INIT_RANGE,
                  integrator: Optional[IntegratorConfig] = None,
                  out_dir: Optional[Path] = None) -> SolutionSequence:
    """One long reference sequence, optionally streamed to disk.

    With out_dir the states go straight into a float32 file and the
    returned sequence is backed by a read-only memory map of it.
    """
    integrator = integrator or IntegratorConfig(dt_out=dt)
    last_error: Optional[Exception] = None

    for attempt in range(MAX_RETRIES + 1):
        used_seed = sequence_seed(seed, 'long', 0, 0, attempt)
        initial = initial_condition(used_seed, n, init_range)
        try:
            if out_dir is None:
                sequence = simulate(initial, params, integrator, n_steps, dt)
                sequence.seed = used_seed
                return sequence
            return _stream_long(params, initial, integrator, n_steps, dt, seed, used_seed,
                                Path(out_dir), init_range)
        except (BlowUpError, StepLimitError) as e:
            last_error = e
            logger.warning(f"Long run failed with seed {used_seed} (attempt {attempt + 1}): {e}")

    raise NumericalError(f"Long run failed after {MAX_RETRIES} retries: {last_error}")


def _stream_long(params: SolverParams, initial: FrontState, integrator: IntegratorConfig,
                 n_steps: int, dt: float, master_seed: int, used_seed: int, out_dir: Path,
                 init_range: Sequence[float]) -> SolutionSequence:
    writer = CorpusWriter(out_dir)
    filename = data_filename('long', params.rho, params.beta)
    path = out_dir / filename
    block = np.memmap(path, dtype=STORAGE_DTYPE, mode='w+', shape=(1, n_steps + 1, initial.n))

    with ProgressTracker(total=n_steps, desc="Long run", unit="step") as progress:
        for i, values in enumerate(iterate(initial, params, integrator, n_steps, dt)):
            block[0, i] = values
            if i:
                progress.update(1)
    block.flush()
    del block

    manifest = DatasetManifest(
        split='long', dt_out=dt, mesh_size=initial.n, precision=PRECISION,
        init_range=[float(init_range[0]), float(init_range[1])], master_seed=int(master_seed),
        n_steps=n_steps,
        configs=[ConfigEntry(rho=params.rho, beta=params.beta, mu=params.mu, nu=params.nu,
                             tau=params.tau, file=filename, n_sequences=1, length=n_steps + 1,
                             seeds=[used_seed])],
    )
    writer.write_manifest(manifest)
    states = read_sequences(manifest, manifest.configs[0])[0]
    return SolutionSequence(params=params, dt_out=dt, states=states, seed=used_seed)


def write_sequence(out_dir: Path, split: str, sequence: SolutionSequence,
                   master_seed: int = 0) -> DatasetManifest:
    """Store a single sequence (a solve or rollout result) with a one-entry manifest."""
    writer = CorpusWriter(out_dir)
    p = sequence.params
    filename = data_filename(split, p.rho, p.beta)
    writer.write_block(filename, np.asarray(sequence.states)[None])
    manifest = DatasetManifest(
        split=split, dt_out=sequence.dt_out, mesh_size=sequence.states.shape[-1],
        precision=PRECISION, init_range=list(DEFAULT_INIT_RANGE), master_seed=int(master_seed),
        n_steps=len(sequence) - 1,
        configs=[ConfigEntry(rho=p.rho, beta=p.beta, mu=p.mu, nu=p.nu, tau=p.tau, file=filename,
                             n_sequences=1, length=len(sequence),
                             seeds=[] if sequence.seed is None else [int(sequence.seed)])],
    )
    writer.write_manifest(manifest)
    return manifest


def load_manifest(path: Path, split: str = 'train') -> DatasetManifest:
    """Load and check a manifest.

    Args:
        path: Manifest file, or a corpus directory holding {split}_manifest.json
        split: Split to load when path is a directory

    Raises:
        StorageError: If the manifest is malformed or a data file is missing or short
    """
    path = Path(path)
    if path.is_dir():
        path = path / f"{split}_manifest.json"
    try:
        with open(path) as f:
            data = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise StorageError(f"Cannot read manifest {path}: {e}")

    manifest = DatasetManifest.from_dict(data, root=path.parent)
    if manifest.precision != PRECISION:
        raise StorageError(f"Unsupported precision {manifest.precision!r} in {path}")

    for entry in manifest.configs:
        data_path = manifest.path_for(entry)
        if not data_path.exists():
            raise StorageError(f"Data file {data_path} referenced by {path} is missing")
        size = data_path.stat().st_size
        if size != manifest.expected_bytes(entry):
            raise StorageError(
                f"Data file {data_path} has {size} bytes, expected {manifest.expected_bytes(entry)}"
            )
    return manifest


def read_sequences(manifest: DatasetManifest, entry: ConfigEntry) -> np.ndarray:
    """Read-only memory map of shape [sequences, steps+1, N]."""
    path = manifest.path_for(entry)
    try:
        return np.memmap(path, dtype=STORAGE_DTYPE, mode='r',
                         shape=(entry.n_sequences, entry.length, manifest.mesh_size))
    except (OSError, ValueError) as e:
        raise StorageError(f"Cannot map {path}: {e}")


def select_configs(manifest: DatasetManifest, betas: Optional[Sequence[float]] = None) -> List[int]:
    """Indices of the configurations whose beta is in betas (all when None)."""
    if not betas:
        return list(range(len(manifest.configs)))
    wanted = {float(b) for b in betas}
    chosen = [i for i, c in enumerate(manifest.configs) if float(c.beta) in wanted]
    if not chosen:
        raise ConfigError(f"No configuration in the {manifest.split} corpus has beta in {sorted(wanted)}")
    return chosen


def window_index(manifest: DatasetManifest, n: int = 20, stride: int = 1,
                 betas: Optional[Sequence[float]] = None) -> np.ndarray:
    """Provenance rows (config index, sequence index, start) of every window.

    Raises:
        ConfigError: If n does not fit in the sequences
    """
    if n < 1 or stride < 1:
        raise ConfigError(f"n and stride must be positive, got n={n}, stride={stride}")
    rows = []
    for ci in select_configs(manifest, betas):
        entry = manifest.configs[ci]
        if entry.length < n + 1:
            raise ConfigError(f"n={n} needs sequences of at least {n + 1} states, "
                              f"got {entry.length} at rho={entry.rho}, beta={entry.beta}")
        for si in range(entry.n_sequences):
            for start in range(0, entry.length - n, stride):
                rows.append((ci, si, start))
    return np.array(rows, dtype=np.int64).reshape(-1, 3)


class WindowLoader:
    """Assemble batches of windows from memory-mapped corpus files."""

    def __init__(self, manifest: DatasetManifest, n: int):
        self.manifest = manifest
        self.n = n
        self._maps: Dict[int, np.ndarray] = {}

    def _states(self, config_index: int) -> np.ndarray:
        if config_index not in self._maps:
            self._maps[config_index] = read_sequences(self.manifest, self.manifest.configs[config_index])
        return self._maps[config_index]

    def window(self, row) -> TrainingWindow:
        ci, si, start = (int(v) for v in row)
        states = self._states(ci)[si]
        entry = self.manifest.configs[ci]
        return TrainingWindow(
            input=states[start].astype(np.float64),
            targets=states[start + 1:start + 1 + self.n].astype(np.float64),
            rho=entry.rho, beta=entry.beta,
            config_index=ci, sequence_index=si, start=start,
        )

    def batch(self, rows: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Inputs (B, N), targets (B, n, N) and raw (rho, beta) pairs (B, 2)."""
        windows = [self.window(row) for row in rows]
        inputs = np.stack([w.input for w in windows])
        targets = np.stack([w.targets for w in windows])
        gammas = np.array([(w.rho, w.beta) for w in windows], dtype=np.float64)
        return inputs, targets, gammas


def windows(manifest: DatasetManifest, n: int = 20, stride: int = 1,
            shuffle_seed: Optional[int] = None,
            betas: Optional[Sequence[float]] = None) -> Iterator[TrainingWindow]:
    """Stream 1-to-n training windows.

    Args:
        manifest: Loaded corpus manifest
        n: Number of target states per window
        stride: Step between consecutive window starts in a sequence
        shuffle_seed: Permute the stream deterministically when given
        betas: Keep only configurations with these beta values

    Yields:
        TrainingWindow objects tagged with their provenance
    """
    rows = window_index(manifest, n, stride, betas)
    if shuffle_seed is not None:
        rows = rows[np.random.default_rng(shuffle_seed).permutation(len(rows))]
    loader = WindowLoader(manifest, n)
    for row in rows:
        yield loader.window(row)
