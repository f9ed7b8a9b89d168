"""Synthetic time-varying MIMO-OFDM channels.

A realisation is a sum of planar-wave rays, each carrying a gain, a
Doppler shift, a delay, an initial phase and a direction of departure at
a uniform planar array. Sequences of CSI frames are sliced into
(history, future) windows and persisted in a small binary format.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from channelkan.errors import (
    ConfigError,
    DatasetFormatError,
    EmptyDatasetError,
    MalformedHeaderError,
    TruncatedPayloadError,
    VersionMismatchError,
)

SPEED_OF_LIGHT = 299_792_458.0

DATASET_MAGIC = b"CKAN"
DATASET_VERSION = 1
_HEADER = struct.Struct("<4sI")
_SYSTEM = struct.Struct("<IIIIddd")
_DIMS = struct.Struct("<IIQ")


@dataclass(frozen=True)
class SystemConfig:
    n_h: int = 4
    n_v: int = 2
    n_r: int = 2
    K: int = 48
    f_c: float = 2.4e9
    delta_f: float = 180e3
    dt: float = 0.5e-3

    def __post_init__(self):
        for name in ("n_h", "n_v", "n_r", "K"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("f_c", "delta_f", "dt"):
            if not float(getattr(self, name)) > 0:
                raise ConfigError(f"{name} must be > 0")

    @property
    def n_t(self) -> int:
        return self.n_h * self.n_v

    @property
    def n_pairs(self) -> int:
        """Antenna pairs per subcarrier; pair index is ``ue * n_t + bs``."""
        return self.n_t * self.n_r

    def subcarrier_freqs(self) -> np.ndarray:
        k = np.arange(self.K)
        return self.f_c + (k - (self.K - 1) / 2.0) * self.delta_f

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SystemConfig":
        return cls(**{k: d[k] for k in ("n_h", "n_v", "n_r", "K", "f_c", "delta_f", "dt") if k in d})


@dataclass(frozen=True)
class PathParams:
    beta: float
    nu: float
    tau: float
    phi0: float
    theta: float
    varphi: float


@dataclass
class ClusterSet:
    clusters: list[list[PathParams]]

    def __post_init__(self):
        if not self.clusters or any(len(c) == 0 for c in self.clusters):
            raise ConfigError("a ClusterSet needs >= 1 cluster, each with >= 1 ray")

    @property
    def paths(self) -> list[PathParams]:
        return [p for c in self.clusters for p in c]

    def arrays(self) -> dict[str, np.ndarray]:
        paths = self.paths
        return {
            name: np.array([getattr(p, name) for p in paths], dtype=np.float64)
            for name in ("beta", "nu", "tau", "phi0", "theta", "varphi")
        }

    def merged(self, other: "ClusterSet") -> "ClusterSet":
        return ClusterSet(self.clusters + other.clusters)


@dataclass
class CsiSequence:
    frames: np.ndarray  # (T_total, K, n_pairs) complex128
    system: SystemConfig

    @property
    def dt(self) -> float:
        return self.system.dt

    def __len__(self) -> int:
        return self.frames.shape[0]


@dataclass
class WindowedSample:
    history: np.ndarray  # (T, K, n_pairs)
    future: np.ndarray  # (L, K, n_pairs)


@dataclass
class WindowDataset:
    """A stack of windows sharing one system configuration."""

    history: np.ndarray  # (N, T, K, n_pairs) complex128
    future: np.ndarray  # (N, L, K, n_pairs) complex128
    system: SystemConfig
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.history = np.asarray(self.history, dtype=np.complex128)
        self.future = np.asarray(self.future, dtype=np.complex128)
        if self.history.ndim != 4 or self.future.ndim != 4:
            raise ConfigError("history/future must be 4-d (N, time, K, pairs)")
        if self.history.shape[0] != self.future.shape[0]:
            raise ConfigError("history and future sample counts differ")
        expected = (self.system.K, self.system.n_pairs)
        for arr in (self.history, self.future):
            if arr.shape[2:] != expected:
                raise ConfigError(f"frame shape {arr.shape[2:]} != system {expected}")

    @property
    def T(self) -> int:
        return self.history.shape[1]

    @property
    def L(self) -> int:
        return self.future.shape[1]

    def __len__(self) -> int:
        return self.history.shape[0]

    def __getitem__(self, i: int) -> WindowedSample:
        return WindowedSample(self.history[i], self.future[i])

    def __iter__(self) -> Iterator[WindowedSample]:
        for i in range(len(self)):
            yield self[i]

    def subset(self, idx) -> "WindowDataset":
        return WindowDataset(self.history[idx], self.future[idx], self.system, dict(self.metadata))

    @classmethod
    def from_samples(cls, samples: Sequence[WindowedSample], system: SystemConfig, T: int, L: int):
        if samples:
            hist = np.stack([s.history for s in samples])
            fut = np.stack([s.future for s in samples])
        else:
            hist = np.zeros((0, T, system.K, system.n_pairs), dtype=np.complex128)
            fut = np.zeros((0, L, system.K, system.n_pairs), dtype=np.complex128)
        return cls(hist, fut, system)


# -- physics -----------------------------------------------------------------


def max_doppler(velocity_mps: float, f_c: float) -> float:
    return velocity_mps * f_c / SPEED_OF_LIGHT


def kmh_to_mps(v: float) -> float:
    return v / 3.6


def _steering(theta: np.ndarray, varphi: np.ndarray, cfg: SystemConfig) -> np.ndarray:
    theta = np.atleast_1d(theta)
    varphi = np.atleast_1d(varphi)
    p = np.arange(cfg.n_h)
    q = np.arange(cfg.n_v)
    a_h = np.exp(1j * np.pi * np.outer(np.sin(varphi) * np.cos(theta), p))
    a_v = np.exp(1j * np.pi * np.outer(np.sin(theta), q))
    # row-wise Kronecker product a_h (x) a_v
    return (a_h[:, :, None] * a_v[:, None, :]).reshape(theta.shape[0], cfg.n_t)


def steering_vector(theta: float, varphi: float, cfg: SystemConfig) -> np.ndarray:
    """Half-wavelength UPA response, horizontal (x) vertical."""
    return _steering(np.array([theta]), np.array([varphi]), cfg)[0]


def channel_tensor(times, freqs, clusters: ClusterSet, cfg: SystemConfig) -> np.ndarray:
    """h(t, f) for every (time, frequency) pair, shape (len(times), len(freqs), n_t)."""
    p = clusters.arrays()
    times = np.atleast_1d(np.asarray(times, dtype=np.float64))
    freqs = np.atleast_1d(np.asarray(freqs, dtype=np.float64))
    coef = p["beta"] * np.exp(1j * p["phi0"])
    temporal = np.exp(2j * np.pi * np.outer(times, p["nu"])) * coef
    spectral = np.exp(-2j * np.pi * np.outer(freqs, p["tau"]))
    steer = _steering(p["theta"], p["varphi"], cfg)
    return np.einsum("tp,kp,pn->tkn", temporal, spectral, steer)


def channel_vector(t: float, f_k: float, clusters: ClusterSet, cfg: SystemConfig) -> np.ndarray:
    return channel_tensor([t], [f_k], clusters, cfg)[0, 0]


def generate_sequence(clusters, cfg: SystemConfig, T_total: int) -> CsiSequence:
    """CSI frames at t = 0, dt, ..., (T_total - 1) dt.

    ``clusters`` holds one ClusterSet per UE antenna; a bare ClusterSet is
    accepted when ``n_r == 1``.
    """
    if T_total < 1:
        raise ConfigError("T_total must be >= 1")
    if isinstance(clusters, ClusterSet):
        clusters = [clusters]
    if len(clusters) != cfg.n_r:
        raise ConfigError(f"need {cfg.n_r} cluster sets (one per UE antenna), got {len(clusters)}")
    times = np.arange(T_total) * cfg.dt
    freqs = cfg.subcarrier_freqs()
    per_ue = [channel_tensor(times, freqs, cs, cfg) for cs in clusters]
    return CsiSequence(np.concatenate(per_ue, axis=2), cfg)


def sample_clusters(
    velocity: float,
    cfg: SystemConfig,
    rng: np.random.Generator,
    n_clusters: int = 3,
    rays_per_cluster: int = 8,
    tau_max: float = 1e-6,
    angle_spread: float = math.radians(5.0),
) -> ClusterSet:
    """Draw a random sum-of-rays geometry for a UE moving at ``velocity`` m/s.

    Ray powers sum to one, so ``E[|h|^2] = n_t`` at any (t, f).
    """
    if velocity < 0:
        raise ConfigError("velocity must be >= 0")
    nu_max = max_doppler(velocity, cfg.f_c)
    powers = rng.exponential(size=n_clusters)
    powers /= powers.sum()
    centers_theta = rng.uniform(-math.pi / 4, math.pi / 4, size=n_clusters)
    centers_varphi = rng.uniform(-math.pi / 2, math.pi / 2, size=n_clusters)
    clusters = []
    for n in range(n_clusters):
        beta = math.sqrt(powers[n] / rays_per_cluster)
        alpha = rng.uniform(0.0, 2 * math.pi, size=rays_per_cluster)
        tau = rng.uniform(0.0, tau_max, size=rays_per_cluster)
        phi0 = rng.uniform(-math.pi, math.pi, size=rays_per_cluster)
        theta = np.clip(centers_theta[n] + angle_spread * rng.standard_normal(rays_per_cluster), -math.pi, math.pi)
        varphi = np.clip(centers_varphi[n] + angle_spread * rng.standard_normal(rays_per_cluster), -math.pi, math.pi)
        rays = [
            PathParams(beta, nu_max * math.cos(alpha[m]), tau[m], phi0[m], theta[m], varphi[m])
            for m in range(rays_per_cluster)
        ]
        clusters.append(rays)
    return ClusterSet(clusters)


def simulate_sequence(velocity: float, cfg: SystemConfig, T_total: int, seed) -> CsiSequence:
    """Draw independent geometries per UE antenna and evaluate them."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    clusters = [sample_clusters(velocity, cfg, rng) for _ in range(cfg.n_r)]
    return generate_sequence(clusters, cfg, T_total)


def add_noise(seq: CsiSequence, snr_db: float | None, rng: np.random.Generator) -> CsiSequence:
    """Add circularly-symmetric Gaussian noise referenced to the mean channel power.

    ``snr_db`` of ``None`` or ``inf`` means clean.
    """
    if snr_db is None or (math.isinf(snr_db) and snr_db > 0):
        return CsiSequence(seq.frames.copy(), seq.system)
    if not math.isfinite(snr_db):
        raise ConfigError(f"snr_db must be finite or +inf, got {snr_db}")
    power = float(np.mean(np.abs(seq.frames) ** 2)) / 10.0 ** (snr_db / 10.0)
    shape = seq.frames.shape
    noise = (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) * math.sqrt(power / 2.0)
    return CsiSequence(seq.frames + noise, seq.system)


def window(seq: CsiSequence, T: int, L: int, stride: int = 1) -> list[WindowedSample]:
    total = len(seq)
    if T < 1 or L < 1 or stride < 1:
        raise ConfigError("T, L and stride must be >= 1")
    if T + L > total:
        raise EmptyDatasetError(f"T + L = {T + L} exceeds sequence length {total}")
    count = (total - T - L) // stride + 1
    out = []
    for i in range(count):
        s = i * stride
        out.append(WindowedSample(seq.frames[s:s + T].copy(), seq.frames[s + T:s + T + L].copy()))
    return out


def build_dataset(
    n_windows: int,
    velocity_kmh: float,
    snr_db: float | None,
    system: SystemConfig,
    T: int,
    L: int,
    seed: int,
) -> WindowDataset:
    """Independent geometry per window; noise touches the history only."""
    root = np.random.SeedSequence(seed)
    histories, futures = [], []
    for child in root.spawn(n_windows):
        geo_seed, noise_seed = child.spawn(2)
        clean = simulate_sequence(kmh_to_mps(velocity_kmh), system, T + L, np.random.default_rng(geo_seed))
        noisy = add_noise(clean, snr_db, np.random.default_rng(noise_seed))
        histories.append(noisy.frames[:T])
        futures.append(clean.frames[T:])
    meta = {
        "seed": int(seed),
        "velocity_kmh": float(velocity_kmh),
        "snr_db": None if snr_db is None or math.isinf(snr_db) else float(snr_db),
        "generator": "sum-of-rays",
        "n_clusters": 3,
        "rays_per_cluster": 8,
        "tau_max_s": 1e-6,
        "angle_spread_deg": 5.0,
    }
    if n_windows == 0:
        empty = WindowDataset.from_samples([], system, T, L)
        empty.metadata = meta
        return empty
    return WindowDataset(np.stack(histories), np.stack(futures), system, meta)


# -- persistence -------------------------------------------------------------


def save_dataset(dataset: WindowDataset, path, metadata: dict | None = None) -> Path:
    path = Path(path)
    cfg = dataset.system
    n = len(dataset)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(DATASET_MAGIC, DATASET_VERSION))
        fh.write(_SYSTEM.pack(cfg.n_h, cfg.n_v, cfg.n_r, cfg.K, cfg.f_c, cfg.delta_f, cfg.dt))
        fh.write(_DIMS.pack(dataset.T, dataset.L, n))
        for i in range(n):
            fh.write(np.ascontiguousarray(dataset.history[i]).astype("<c16").tobytes())
            fh.write(np.ascontiguousarray(dataset.future[i]).astype("<c16").tobytes())
    meta = dict(dataset.metadata)
    meta.update(metadata or {})
    meta.update({"format_version": DATASET_VERSION, "samples": n, "T": dataset.T, "L": dataset.L,
                 "system": cfg.to_dict()})
    Path(str(path) + ".meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path


def read_dataset_header(fh) -> tuple[SystemConfig, int, int, int]:
    head = fh.read(_HEADER.size)
    if len(head) < _HEADER.size:
        raise MalformedHeaderError("file too short for a dataset header")
    magic, version = _HEADER.unpack(head)
    if magic != DATASET_MAGIC:
        raise MalformedHeaderError(f"bad magic {magic!r}, expected {DATASET_MAGIC!r}")
    if version != DATASET_VERSION:
        raise VersionMismatchError(f"dataset format version {version}, this build reads {DATASET_VERSION}")
    rest = fh.read(_SYSTEM.size + _DIMS.size)
    if len(rest) < _SYSTEM.size + _DIMS.size:
        raise MalformedHeaderError("dataset header truncated")
    try:
        cfg = SystemConfig(*_SYSTEM.unpack(rest[:_SYSTEM.size]))
    except ConfigError as exc:
        raise MalformedHeaderError(f"invalid system block: {exc}") from exc
    T, L, n = _DIMS.unpack(rest[_SYSTEM.size:])
    return cfg, T, L, n


def load_dataset(path) -> WindowDataset:
    path = Path(path)
    with open(path, "rb") as fh:
        cfg, T, L, n = read_dataset_header(fh)
        frame = cfg.K * cfg.n_pairs
        per_sample = (T + L) * frame * 16
        payload = fh.read()
    if len(payload) < per_sample * n:
        raise TruncatedPayloadError(f"expected {per_sample * n} payload bytes, found {len(payload)}")
    if len(payload) > per_sample * n:
        raise DatasetFormatError(f"{len(payload) - per_sample * n} trailing bytes after payload")
    data = np.frombuffer(payload, dtype="<c16").astype(np.complex128).reshape(n, T + L, cfg.K, cfg.n_pairs)
    meta_path = Path(str(path) + ".meta.json")
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    return WindowDataset(data[:, :T].copy(), data[:, T:].copy(), cfg, meta)
