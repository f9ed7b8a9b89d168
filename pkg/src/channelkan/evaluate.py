"""Link-level metrics, classical baselines and the experiment grid."""

from __future__ import annotations

import contextlib
import csv
import json
import logging
import math
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.special import erfc

from channelkan.channel import SystemConfig, WindowDataset, build_dataset
from channelkan.errors import ConfigError, DimensionError
from channelkan.model import ABLATIONS, ModelConfig, ModelParams, init_params
from channelkan.train import TrainConfig, predict_batch, train

log = logging.getLogger(__name__)

BASELINES = ("hold", "ar")


@dataclass
class MetricReport:
    nmse: float
    se_bps_hz: float
    ber: float
    velocity_kmh: float | None = None
    snr_db: float | None = None
    variant: str = "full"
    seed: int = 0
    link_snr_db: float | None = None
    train_seconds: float = 0.0
    error: str | None = None

    def to_dict(self) -> dict:
        return asdict(self)


# -- baselines ---------------------------------------------------------------


@dataclass
class BaselinePredictor:
    """Zero-order hold or per-feature complex AR(p) rolled forward L steps."""

    kind: str
    L: int
    order: int = 0
    coef: np.ndarray | None = None  # (features, order), coef[:, i] multiplies lag i + 1
    fallback: np.ndarray | None = None  # features that reverted to hold

    def __post_init__(self):
        if self.kind not in BASELINES:
            raise ConfigError(f"unknown baseline {self.kind!r}")

    def __call__(self, histories: np.ndarray) -> np.ndarray:
        histories = np.asarray(histories, dtype=np.complex128)
        B, T = histories.shape[:2]
        frame = histories.shape[2:]
        if self.kind == "hold":
            return np.repeat(histories[:, -1:], self.L, axis=1)
        p = self.order
        if p >= T:
            raise ConfigError(f"AR order {p} must be < history length {T}")
        flat = histories.reshape(B, T, -1)
        if flat.shape[2] != self.coef.shape[0]:
            raise DimensionError("history features do not match the fitted AR model")
        buf = list(np.moveaxis(flat[:, T - p:], 1, 0))  # oldest first, each (B, F)
        out = []
        for _ in range(self.L):
            nxt = sum(self.coef[:, i] * buf[-1 - i] for i in range(p))
            out.append(nxt)
            buf.append(nxt)
        pred = np.stack(out, axis=1)
        if self.fallback is not None and self.fallback.any():
            pred[:, :, self.fallback] = flat[:, -1:, self.fallback]
        return pred.reshape((B, self.L) + frame)


def fit_linear_ar(train_set: WindowDataset, order: int, ridge: float = 1e-6) -> BaselinePredictor:
    """Ridge least-squares AR(p) per feature over full (history + future) windows."""
    if order < 1:
        raise ConfigError("AR order must be >= 1")
    if order >= train_set.T:
        raise ConfigError(f"AR order {order} must be < T={train_set.T}")
    if len(train_set) == 0:
        raise ConfigError("cannot fit AR on an empty dataset")
    seq = np.concatenate([train_set.history, train_set.future], axis=1)
    N, S = seq.shape[:2]
    x = seq.reshape(N, S, -1)
    # lagged design: lags[:, t, f, i] = x[:, t - 1 - i, f]
    lags = np.stack([x[:, order - 1 - i:S - 1 - i] for i in range(order)], axis=-1)
    y = x[:, order:]
    gram = np.einsum("ntfi,ntfj->fij", lags.conj(), lags)
    rhs = np.einsum("ntfi,ntf->fi", lags.conj(), y)
    fallback = np.linalg.matrix_rank(gram, hermitian=True) < order
    coef = np.linalg.solve(gram + ridge * np.eye(order), rhs[..., None])[..., 0]
    coef[fallback] = 0.0
    if fallback.any():
        log.warning("AR(%d): %d of %d features rank deficient, holding them", order, fallback.sum(), len(fallback))
    return BaselinePredictor("ar", train_set.L, order, coef, fallback)


def hold_predictor(L: int) -> BaselinePredictor:
    return BaselinePredictor("hold", L)


def model_predictor(params: ModelParams, cfg: ModelConfig) -> Callable[[np.ndarray], np.ndarray]:
    return lambda histories: predict_batch(params, cfg, histories)


# -- metrics -----------------------------------------------------------------


def eval_nmse(predictor, test_set: WindowDataset, return_excluded: bool = False):
    """Mean per-window NMSE; windows with an all-zero future are skipped."""
    if len(test_set) == 0:
        raise ConfigError("empty test set")
    pred = predictor(test_set.history) if callable(predictor) else np.asarray(predictor)
    truth = test_set.future
    axes = tuple(range(1, truth.ndim))
    den = np.sum(np.abs(truth) ** 2, axis=axes)
    keep = den > 0
    excluded = int((~keep).sum())
    if excluded:
        warnings.warn(f"{excluded} zero-norm windows excluded from NMSE", RuntimeWarning)
    if not keep.any():
        raise ConfigError("every test window has zero norm")
    num = np.sum(np.abs(pred - truth) ** 2, axis=axes)
    value = float(np.mean(num[keep] / den[keep]))
    return (value, excluded) if return_excluded else value


def _links(x: np.ndarray, n_t: int) -> np.ndarray:
    """(..., K, n_r * n_t) -> (links, n_t), one MISO link per UE antenna."""
    x = np.asarray(x, dtype=np.complex128)
    if x.shape[-1] % n_t:
        raise DimensionError(f"pair axis {x.shape[-1]} not a multiple of n_t={n_t}")
    return x.reshape(-1, n_t)


def effective_gains(pred: np.ndarray, truth: np.ndarray, n_t: int):
    """h^H w per link with MRT beam w from the predicted channel.

    Returns (complex gains, number of links that fell back to a uniform beam).
    """
    if np.shape(pred) != np.shape(truth):
        raise DimensionError(f"pred {np.shape(pred)} and truth {np.shape(truth)} differ")
    h_hat = _links(pred, n_t)
    h = _links(truth, n_t)
    norm = np.linalg.norm(h_hat, axis=1)
    zero = norm == 0
    w = np.empty_like(h_hat)
    w[~zero] = h_hat[~zero] / norm[~zero, None]
    w[zero] = 1.0 / math.sqrt(n_t)
    return np.sum(h.conj() * w, axis=1), int(zero.sum())


def spectral_efficiency(pred: np.ndarray, truth: np.ndarray, snr_db: float, n_t: int) -> float:
    """Mean log2(1 + rho |h^H w|^2) over samples, steps, subcarriers and UE antennas."""
    gains, _ = effective_gains(pred, truth, n_t)
    rho = 10.0 ** (snr_db / 10.0)
    return float(np.mean(np.log2(1.0 + rho * np.abs(gains) ** 2)))


def qfunc(x):
    return 0.5 * erfc(np.asarray(x) / math.sqrt(2.0))


def qpsk_ber_theory(gains: np.ndarray, snr_db: float) -> float:
    """Average coherent QPSK bit error probability over the given link gains."""
    rho = 10.0 ** (snr_db / 10.0)
    return float(np.mean(qfunc(np.sqrt(rho * np.abs(gains) ** 2))))


def bit_error_rate(pred, truth, snr_db: float, n_t: int, n_bits: int = 100_000, rng=None) -> float:
    """Monte-Carlo QPSK over MRT-beamformed links, coherent detection.

    Each symbol picks a link uniformly at random; the receiver knows the
    effective scalar gain, so prediction error shows up as lost beam gain.
    """
    if n_bits < 1000:
        raise ConfigError("n_bits must be >= 1000")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    gains, _ = effective_gains(pred, truth, n_t)
    n_sym = n_bits // 2
    g = gains[rng.integers(len(gains), size=n_sym)]
    bits = rng.integers(0, 2, size=(n_sym, 2))
    sym = ((1 - 2 * bits[:, 0]) + 1j * (1 - 2 * bits[:, 1])) / math.sqrt(2.0)
    sigma = math.sqrt(0.5 / 10.0 ** (snr_db / 10.0))
    noise = sigma * (rng.standard_normal(n_sym) + 1j * rng.standard_normal(n_sym))
    z = np.conj(g) * (g * sym + noise)
    decided = np.stack([z.real < 0, z.imag < 0], axis=1)
    return float(np.count_nonzero(decided != bits.astype(bool)) / (2 * n_sym))


def evaluate_predictions(pred, test_set: WindowDataset, link_snr_db: float, n_bits: int, seed: int) -> MetricReport:
    n_t = test_set.system.n_t
    return MetricReport(
        nmse=eval_nmse(pred, test_set),
        se_bps_hz=spectral_efficiency(pred, test_set.future, link_snr_db, n_t),
        ber=bit_error_rate(pred, test_set.future, link_snr_db, n_t, n_bits, np.random.default_rng([seed, 7919])),
        link_snr_db=link_snr_db,
        seed=seed,
    )


# -- experiment grid ---------------------------------------------------------


def desk_system() -> SystemConfig:
    """The reduced system the experiments run on (see README)."""
    return SystemConfig(n_h=2, n_v=1, n_r=1, K=8)


@dataclass
class GridConfig:
    velocities_kmh: list[float] = field(default_factory=lambda: [10.0, 60.0, 100.0])
    snrs_db: list[float | None] = field(default_factory=lambda: [None])
    variants: list[str] = field(default_factory=lambda: ["full"])
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    system: SystemConfig = field(default_factory=desk_system)
    model: dict = field(default_factory=dict)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(lr0=1e-2))
    T: int = 16
    L: int = 4
    n_train: int = 800
    n_val: int = 100
    n_test: int = 100
    ar_order: int = 4
    kan_init: float = 1.0
    link_snr_db: float = 10.0
    n_bits: int = 100_000

    def __post_init__(self):
        for v in self.variants:
            if v not in ABLATIONS and v not in BASELINES:
                raise ConfigError(f"unknown variant {v!r}")
        if isinstance(self.system, dict):
            self.system = SystemConfig.from_dict(self.system)
        if isinstance(self.train, dict):
            self.train = TrainConfig.from_dict(self.train)

    def model_config(self, variant: str = "full") -> ModelConfig:
        base = ModelConfig.from_dict(
            {**self.model, "T": self.T, "P": self.L, "K": self.system.K, "n_pairs": self.system.n_pairs}
        )
        return base.with_ablation(variant) if variant in ABLATIONS else base

    def cells(self) -> list[tuple[float, float | None, str, int]]:
        return [
            (v, s, var, seed)
            for v in self.velocities_kmh
            for s in self.snrs_db
            for var in self.variants
            for seed in self.seeds
        ]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["system"] = self.system.to_dict()
        d["train"] = self.train.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GridConfig":
        d = dict(d)
        if "system" in d:
            d["system"] = SystemConfig.from_dict(d["system"])
        if "train" in d:
            d["train"] = TrainConfig.from_dict(d["train"])
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


def condition_seed(seed: int, velocity_kmh: float, snr_db: float | None) -> list[int]:
    snr_code = 0 if snr_db is None or math.isinf(snr_db) else int(round(snr_db * 1000)) + 1_000_000
    return [int(seed), int(round(velocity_kmh * 1000)), snr_code]


def condition_datasets(grid: GridConfig, velocity_kmh: float, snr_db, seed: int) -> dict[str, WindowDataset]:
    """Train/val/test splits for one (velocity, SNR, seed) condition."""
    root = np.random.SeedSequence(condition_seed(seed, velocity_kmh, snr_db))
    sizes = {"train": grid.n_train, "val": grid.n_val, "test": grid.n_test}
    out = {}
    for (name, n), child in zip(sizes.items(), root.spawn(3)):
        split_seed = int(child.generate_state(1)[0])
        out[name] = build_dataset(n, velocity_kmh, snr_db, grid.system, grid.T, grid.L, split_seed)
    return out


def cell_key(velocity_kmh, snr_db, variant, seed) -> str:
    snr = "clean" if snr_db is None else f"{snr_db:g}dB"
    return f"v{velocity_kmh:g}_{snr}_{variant}_s{seed}"


def run_cell(grid: GridConfig, velocity_kmh: float, snr_db, variant: str, seed: int,
             data: dict[str, WindowDataset] | None = None) -> MetricReport:
    data = data or condition_datasets(grid, velocity_kmh, snr_db, seed)
    t0 = time.perf_counter()
    if variant == "hold":
        predictor = hold_predictor(grid.L)
    elif variant == "ar":
        predictor = fit_linear_ar(data["train"], grid.ar_order)
    else:
        cfg = grid.model_config(variant)
        params = init_params(cfg, seed, kan_init=grid.kan_init)
        tcfg = replace(grid.train, seed=seed)
        best, _, _, _ = train(cfg, params, data["train"], data["val"], tcfg)
        predictor = model_predictor(best, cfg)
    elapsed = time.perf_counter() - t0
    pred = predictor(data["test"].history)
    report = evaluate_predictions(pred, data["test"], grid.link_snr_db, grid.n_bits, seed)
    return replace(report, velocity_kmh=velocity_kmh, snr_db=snr_db, variant=variant, train_seconds=elapsed)


def _run_cell_isolated(args) -> MetricReport:
    grid, v, s, var, seed = args
    try:
        return run_cell(grid, v, s, var, seed)
    except Exception as exc:  # isolate per-cell failures
        log.exception("cell %s failed", cell_key(v, s, var, seed))
        return MetricReport(math.nan, math.nan, math.nan, v, s, var, seed, grid.link_snr_db,
                            error=f"{type(exc).__name__}: {exc}")


def run_experiment_grid(grid: GridConfig, out_dir=None, jobs: int = 1) -> list[MetricReport]:
    """Evaluate every (velocity, SNR, variant, seed) cell.

    With ``out_dir`` each finished cell is cached as JSON and skipped on a
    rerun; failed cells are retried.
    """
    cache = Path(out_dir) / "cells" if out_dir is not None else None
    if cache is not None:
        cache.mkdir(parents=True, exist_ok=True)
    cells = grid.cells()
    results: dict[int, MetricReport] = {}
    todo = []
    for i, (v, s, var, seed) in enumerate(cells):
        path = cache / f"{cell_key(v, s, var, seed)}.json" if cache is not None else None
        if path is not None and path.exists():
            stored = MetricReport(**json.loads(path.read_text()))
            if stored.error is None:
                results[i] = stored
                continue
        todo.append((i, path, (grid, v, s, var, seed)))
    args = [t[2] for t in todo]
    with contextlib.ExitStack() as stack:
        if jobs > 1 and len(todo) > 1:
            pool = stack.enter_context(ProcessPoolExecutor(max_workers=jobs))
            reports = pool.map(_run_cell_isolated, args)
        else:
            reports = map(_run_cell_isolated, args)
        # persist as each cell lands so an interrupted sweep keeps its progress
        for (i, path, _), rep in zip(todo, reports):
            results[i] = rep
            if path is not None and rep.error is None:
                path.write_text(json.dumps(rep.to_dict(), sort_keys=True) + "\n")
    return [results[i] for i in range(len(cells))]


# -- report files ------------------------------------------------------------

REPORT_FIELDS = ["velocity_kmh", "snr_db", "variant", "seed", "nmse", "se_bps_hz", "ber", "link_snr_db", "error"]


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_reports_csv(reports: list[MetricReport], path, timings_path=None):
    """One row per cell; training wall time goes to the optional timings file."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(REPORT_FIELDS)
        for r in reports:
            d = r.to_dict()
            writer.writerow([_fmt(d[k]) for k in REPORT_FIELDS])
    if timings_path is not None:
        with open(timings_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["velocity_kmh", "snr_db", "variant", "seed", "train_seconds"])
            for r in reports:
                writer.writerow([_fmt(r.velocity_kmh), _fmt(r.snr_db), r.variant, r.seed, f"{r.train_seconds:.6f}"])


def median_by(reports: list[MetricReport], keys: tuple[str, ...], metric: str = "nmse") -> dict[tuple, float]:
    groups: dict[tuple, list[float]] = {}
    for r in reports:
        if r.error is None:
            groups.setdefault(tuple(getattr(r, k) for k in keys), []).append(getattr(r, metric))
    return {k: float(np.median(v)) for k, v in groups.items()}


def write_curve_csvs(reports: list[MetricReport], out_dir) -> list[Path]:
    """Long-format NMSE-vs-velocity and NMSE-vs-SNR tables, one row per cell."""
    out_dir = Path(out_dir)
    paths = []
    for axis, name in (("velocity_kmh", "nmse_vs_velocity.csv"), ("snr_db", "nmse_vs_snr.csv")):
        path = out_dir / name
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            other = "snr_db" if axis == "velocity_kmh" else "velocity_kmh"
            writer.writerow(["variant", axis, other, "seed", "nmse"])
            for r in sorted((r for r in reports if r.error is None),
                            key=lambda r: (r.variant, _sort_key(getattr(r, axis)), _sort_key(getattr(r, other)), r.seed)):
                writer.writerow([r.variant, _fmt(getattr(r, axis)), _fmt(getattr(r, other)), r.seed, repr(r.nmse)])
        paths.append(path)
    return paths


def _sort_key(v):
    return math.inf if v is None else v


def write_ablation_table(reports: list[MetricReport], path) -> Path:
    """Per-variant medians over seeds (and conditions), ablations then full."""
    order = [v for v in ABLATIONS if v != "full"] + ["full"] + list(BASELINES)
    present = {r.variant for r in reports if r.error is None}
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant", "nmse", "se_bps_hz", "ber", "cells"])
        for v in order:
            if v not in present:
                continue
            rows = [r for r in reports if r.variant == v and r.error is None]
            writer.writerow([
                v,
                repr(float(np.median([r.nmse for r in rows]))),
                repr(float(np.median([r.se_bps_hz for r in rows]))),
                repr(float(np.median([r.ber for r in rows]))),
                len(rows),
            ])
    return Path(path)
