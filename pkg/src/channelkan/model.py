"""ChannelKAN forward graph.

History frames go through four stages per domain branch:

1. dual-domain expansion: the raw frequency response (CFR) and its IDFT
   over subcarriers (CIR), each realified to ``T x C`` with
   ``C = 2 * K * pairs``;
2. multi-scale spectral enhancement: per column, keep the top-r rFFT bins
   over time at several r, invert, and blend with learnable weights;
3. a 1-D conv stack along the feature axis per time step, then an
   elementwise Chebyshev expansion of ``tanh(s * x)``;
4. a dense fusion of both branches into ``P x C``, un-realified to
   complex frames.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Iterator

import numpy as np

from channelkan.errors import (
    ConfigError,
    ConfigMismatchError,
    DimensionError,
    MalformedHeaderError,
    TruncatedPayloadError,
    VersionMismatchError,
)
from channelkan.numerics import autograd as ag
from channelkan.numerics.autograd import Tensor
from channelkan.numerics.fft import dft, irfft, rfft

ABLATIONS = {
    "full": {},
    "no-multiscale": {"use_multiscale": False},
    "no-cnnkan": {"use_cnn_kan": False},
    "no-dualdomain": {"use_dual_domain": False},
    "no-kan": {"use_kan": False},
}


@dataclass(frozen=True)
class ModelConfig:
    T: int = 16
    P: int = 4
    K: int = 48
    n_pairs: int = 16
    scales: tuple[int, ...] = (2, 4, 8)
    conv_channels: tuple[int, ...] = (16, 16)
    kernel_size: int = 3
    order: int = 4
    kan_prescale: float = 0.5
    conv_activation: str = "gelu"
    fusion_activation: str = "identity"
    use_multiscale: bool = True
    use_dual_domain: bool = True
    use_kan: bool = True
    use_cnn_kan: bool = True

    def __post_init__(self):
        object.__setattr__(self, "scales", tuple(int(r) for r in self.scales))
        object.__setattr__(self, "conv_channels", tuple(int(c) for c in self.conv_channels))
        bins = self.T // 2 + 1
        if min(self.T, self.P, self.K, self.n_pairs) < 1:
            raise ConfigError("T, P, K and n_pairs must be >= 1")
        if not self.scales:
            raise ConfigError("need at least one scale")
        if any(not 1 <= r <= bins for r in self.scales):
            raise ConfigError(f"every kept-bin count must lie in [1, {bins}] for T={self.T}")
        if self.order < 1:
            raise ConfigError("Chebyshev order must be >= 1")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError("kernel_size must be odd")
        for name in ("conv_activation", "fusion_activation"):
            if getattr(self, name) not in ag.ACTIVATIONS:
                raise ConfigError(f"{name} must be one of {sorted(ag.ACTIVATIONS)}")

    @property
    def C(self) -> int:
        return 2 * self.K * self.n_pairs

    @property
    def n_scales(self) -> int:
        return len(self.scales)

    @property
    def branches(self) -> tuple[str, ...]:
        return ("freq", "delay") if self.use_dual_domain else ("freq",)

    def with_ablation(self, name: str) -> "ModelConfig":
        if name not in ABLATIONS:
            raise ConfigError(f"unknown ablation {name!r}; choose from {sorted(ABLATIONS)}")
        return replace(self, **ABLATIONS[name])

    def variant_name(self) -> str:
        """Which ABLATIONS entry these switches correspond to ("custom" if none)."""
        switches = ("use_multiscale", "use_dual_domain", "use_kan", "use_cnn_kan")
        off = {k: False for k in switches if not getattr(self, k)}
        for name, overrides in ABLATIONS.items():
            if overrides == off:
                return name
        return "custom"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scales"] = list(self.scales)
        d["conv_channels"] = list(self.conv_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class DomainFeatures:
    freq: np.ndarray
    delay: np.ndarray


@dataclass
class ModelParams:
    """Named float64 arrays in canonical order."""

    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __setitem__(self, name: str, value: np.ndarray):
        self.tensors[name] = value

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def names(self) -> list[str]:
        return list(self.tensors)

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self.tensors.items()})

    def n_values(self) -> int:
        return sum(v.size for v in self.tensors.values())

    def as_tensors(self, requires_grad: bool = True) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=requires_grad, name=k) for k, v in self.tensors.items()}


# -- realification -----------------------------------------------------------


def realify(x: np.ndarray) -> np.ndarray:
    """(..., K, pairs) complex -> (..., 2*K*pairs) real, (re, im) interleaved."""
    x = np.asarray(x)
    pairs = np.stack([x.real, x.imag], axis=-1)
    return pairs.reshape(x.shape[:-2] + (-1,))


def unrealify(z: np.ndarray, K: int, n_pairs: int) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    pairs = z.reshape(z.shape[:-1] + (K, n_pairs, 2))
    return pairs[..., 0] + 1j * pairs[..., 1]


# -- parameters --------------------------------------------------------------


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    T, C = cfg.T, cfg.C
    shapes: dict[str, tuple[int, ...]] = {}
    for d in cfg.branches:
        if cfg.use_multiscale:
            for q in range(cfg.n_scales):
                shapes[f"{d}.ms.U{q}"] = (T, C)
        if cfg.use_cnn_kan:
            widths = (2,) + cfg.conv_channels + (2,)
            for layer, (cin, cout) in enumerate(zip(widths[:-1], widths[1:])):
                shapes[f"{d}.conv{layer}.w"] = (cout, cin, cfg.kernel_size)
                shapes[f"{d}.conv{layer}.b"] = (cout,)
            if cfg.use_kan:
                shapes[f"{d}.kan.W"] = (cfg.order + 1, T, C)
        else:
            shapes[f"{d}.dense.w"] = (C, C)
            shapes[f"{d}.dense.b"] = (C,)
    shapes["fusion.w"] = (len(cfg.branches) * T * C, cfg.P * C)
    shapes["fusion.b"] = (cfg.P * C,)
    return shapes


def init_params(cfg: ModelConfig, seed: int = 0, kan_init: float = 1.0) -> ModelParams:
    """Fan-in scaled uniform weights, zero biases, 1/k scale weights.

    Only the first-order Chebyshev coefficients start nonzero, drawn from
    ``U(-kan_init, kan_init)``.
    """
    rng = np.random.default_rng(seed)
    params = ModelParams()
    for name, shape in param_shapes(cfg).items():
        kind = name.rsplit(".", 1)[-1]
        if ".ms.U" in name:
            value = np.full(shape, 1.0 / cfg.n_scales)
        elif kind == "b":
            value = np.zeros(shape)
        elif kind == "W":
            value = np.zeros(shape)
            value[1] = rng.uniform(-kan_init, kan_init, size=shape[1:])
        else:
            fan_in = shape[0] if name.endswith("dense.w") or name == "fusion.w" else shape[1] * shape[2]
            bound = 1.0 / np.sqrt(fan_in)
            value = rng.uniform(-bound, bound, size=shape)
        params[name] = value
    return params


# -- stages ------------------------------------------------------------------


def dual_domain_expand(history: np.ndarray) -> DomainFeatures:
    """CFR and CIR realifications of ``history`` (..., T, K, pairs)."""
    history = np.asarray(history, dtype=np.complex128)
    if history.ndim < 3:
        raise DimensionError(f"history must be (..., T, K, pairs), got {history.shape}")
    cir = dft(history, axis=-2, inverse=True)
    return DomainFeatures(realify(history), realify(cir))


def topk_mask(spectrum: np.ndarray, r: int, axis: int = -2) -> np.ndarray:
    """Boolean mask of the ``r`` largest-magnitude bins along ``axis``.

    Ties go to the lower frequency index.
    """
    mag = np.abs(spectrum)
    order = np.argsort(-mag, axis=axis, kind="stable")
    mask = np.zeros(mag.shape, dtype=bool)
    np.put_along_axis(mask, np.take(order, np.arange(r), axis=axis), True, axis=axis)
    return mask


def spectral_filter(z: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """irFFT(mask * rFFT(z)) over the time axis of (..., T, C)."""
    T = z.shape[-2]
    return irfft(rfft(z, axis=-2) * mask, T, axis=-2)


def _masks_for(z: np.ndarray, scales) -> list[np.ndarray]:
    spec = rfft(z, axis=-2)
    return [topk_mask(spec, r, axis=-2) for r in scales]


def multiscale_enhance(z0, weights, scales) -> Tensor:
    """sum_q U_q * irFFT(M_q * rFFT(z0)) with per-column top-r_q masks.

    The mask is piecewise constant in z0, so each filter is treated as a
    fixed symmetric linear map for differentiation.
    """
    z0 = ag.as_tensor(z0)
    if len(weights) != len(scales):
        raise ConfigError("one weight matrix per scale required")
    out = None
    for U, mask in zip(weights, _masks_for(z0.data, scales)):
        filtered = ag.linear_filter(z0, lambda x, m=mask: spectral_filter(x, m))
        term = ag.mul(filtered, U)
        out = term if out is None else ag.add(out, term)
    return out


def cnn_extract(z, convs, activation: str = "gelu") -> Tensor:
    """Conv stack along the feature axis, (re, im) pairs as input channels.

    ``convs`` is a list of (weight, bias); the activation sits between
    layers, the last layer is linear.
    """
    z = ag.as_tensor(z)
    lead, C = z.shape[:-1], z.shape[-1]
    if C % 2:
        raise ConfigError(f"feature width {C} must be even")
    n = int(np.prod(lead))
    act = ag.ACTIVATIONS[activation]
    x = ag.reshape(z, (n, C // 2, 2))
    for i, (w, b) in enumerate(convs):
        x = ag.conv1d(x, ag.as_tensor(w), ag.as_tensor(b))
        if i < len(convs) - 1:
            x = act(x)
    if x.shape[2] != 2:
        raise ConfigError("the last conv layer must return 2 channels")
    return ag.reshape(x, lead + (C,))


def kan_map(q, coef, prescale: float = 1.0) -> Tensor:
    """sum_m W_m * T_m(tanh(prescale * q)), elementwise.

    ``coef`` stacks W_0..W_M on its first axis; ``q`` may carry extra
    leading batch axes.
    """
    q = ag.as_tensor(q)
    coef = ag.as_tensor(coef)
    feat = coef.shape[1:]
    x = q if prescale == 1.0 else ag.mul(q, prescale)
    xh = ag.tanh(x)
    batched = ag.reshape(xh, (-1,) + feat)
    return ag.reshape(ag.chebyshev_map(batched, coef), q.shape)


def dense(z, w, b) -> Tensor:
    return ag.add(ag.matmul(ag.as_tensor(z), ag.as_tensor(w)), ag.as_tensor(b))


def fuse(features, w, b, activation: str = "identity") -> Tensor:
    """Concatenate branch features (B, T, C) and map to (B, P*C)."""
    feats = [ag.as_tensor(f) for f in features]
    cat = feats[0] if len(feats) == 1 else ag.concat(feats, axis=-1)
    batch = cat.shape[0]
    flat = ag.reshape(cat, (batch, -1))
    return ag.ACTIVATIONS[activation](dense(flat, w, b))


def fuse_and_predict(features, w, b, cfg: ModelConfig) -> np.ndarray:
    out = fuse(features, w, b, cfg.fusion_activation)
    return unrealify(out.data.reshape(-1, cfg.P, cfg.C), cfg.K, cfg.n_pairs)


# -- whole graph -------------------------------------------------------------


def _branch(z0: Tensor, d: str, p: dict[str, Tensor], cfg: ModelConfig) -> Tensor:
    z = z0
    if cfg.use_multiscale:
        z = multiscale_enhance(z, [p[f"{d}.ms.U{q}"] for q in range(cfg.n_scales)], cfg.scales)
    if not cfg.use_cnn_kan:
        return dense(z, p[f"{d}.dense.w"], p[f"{d}.dense.b"])
    n_layers = len(cfg.conv_channels) + 1
    convs = [(p[f"{d}.conv{i}.w"], p[f"{d}.conv{i}.b"]) for i in range(n_layers)]
    z = cnn_extract(z, convs, cfg.conv_activation)
    if cfg.use_kan:
        z = kan_map(z, p[f"{d}.kan.W"], cfg.kan_prescale)
    return z


def forward_realified(histories: np.ndarray, params, cfg: ModelConfig) -> Tensor:
    """Batched graph returning realified predictions (B, P*C).

    ``params`` may hold Tensors (to differentiate) or plain arrays.
    """
    histories = np.asarray(histories)
    if histories.ndim != 4 or histories.shape[1:] != (cfg.T, cfg.K, cfg.n_pairs):
        raise DimensionError(
            f"histories must be (B, {cfg.T}, {cfg.K}, {cfg.n_pairs}), got {histories.shape}"
        )
    p = {k: ag.as_tensor(v) for k, v in (params.items() if hasattr(params, "items") else params)}
    feats = dual_domain_expand(histories)
    branches = {"freq": feats.freq, "delay": feats.delay}
    outs = [_branch(Tensor(branches[d]), d, p, cfg) for d in cfg.branches]
    return fuse(outs, p["fusion.w"], p["fusion.b"], cfg.fusion_activation)


def forward(history: np.ndarray, params: ModelParams, cfg: ModelConfig) -> np.ndarray:
    """Predict (P, K, pairs) from one (T, K, pairs) history, or a batch of them."""
    history = np.asarray(history, dtype=np.complex128)
    single = history.ndim == 3
    batch = history[None] if single else history
    out = forward_realified(batch, params, cfg).data
    pred = unrealify(out.reshape(-1, cfg.P, cfg.C), cfg.K, cfg.n_pairs)
    return pred[0] if single else pred


# -- checkpoints -------------------------------------------------------------

CKPT_MAGIC = b"CKPT"
CKPT_VERSION = 1


def save_checkpoint(path, params: ModelParams, cfg: ModelConfig, meta: dict | None = None,
                    extra: dict[str, np.ndarray] | None = None) -> Path:
    """Versioned binary checkpoint: JSON header then named float64 tensors."""
    path = Path(path)
    header = json.dumps({"model": cfg.to_dict(), "meta": meta or {}}, sort_keys=True).encode()
    tensors = list(params.items()) + sorted((extra or {}).items())
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sII", CKPT_MAGIC, CKPT_VERSION, len(header)))
        fh.write(header)
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors:
            raw = name.encode()
            arr = np.ascontiguousarray(arr, dtype="<f8")
            fh.write(struct.pack("<HB", len(raw), arr.ndim))
            fh.write(raw)
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())
    return path


def _read_exact(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) < n:
        raise TruncatedPayloadError("checkpoint ends mid-record")
    return buf


def read_checkpoint_header(path) -> dict:
    with open(path, "rb") as fh:
        head = fh.read(12)
        if len(head) < 12:
            raise MalformedHeaderError("file too short for a checkpoint header")
        magic, version, hlen = struct.unpack("<4sII", head)
        if magic != CKPT_MAGIC:
            raise MalformedHeaderError(f"bad magic {magic!r}, expected {CKPT_MAGIC!r}")
        if version != CKPT_VERSION:
            raise VersionMismatchError(f"checkpoint version {version}, this build reads {CKPT_VERSION}")
        try:
            return json.loads(_read_exact(fh, hlen))
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            raise MalformedHeaderError(f"unreadable checkpoint header: {exc}") from exc


def load_checkpoint(path, expected: ModelConfig | None = None):
    """Return (params, config, meta, extra); refuse a config mismatch."""
    header = read_checkpoint_header(path)
    cfg = ModelConfig.from_dict(header["model"])
    if expected is not None and expected != cfg:
        diff = {k: (v, getattr(cfg, k)) for k, v in expected.to_dict().items()
                if cfg.to_dict().get(k) != v}
        raise ConfigMismatchError(f"checkpoint config differs (runtime, stored): {diff}")
    with open(path, "rb") as fh:
        fh.seek(12 + struct.unpack("<4sII", fh.read(12))[2])
        (count,) = struct.unpack("<I", _read_exact(fh, 4))
        params, extra = ModelParams(), {}
        shapes = param_shapes(cfg)
        for _ in range(count):
            nlen, ndim = struct.unpack("<HB", _read_exact(fh, 3))
            name = _read_exact(fh, nlen).decode()
            shape = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim))
            n = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(_read_exact(fh, 8 * n), dtype="<f8").astype(np.float64).reshape(shape)
            if name in shapes:
                if tuple(shape) != shapes[name]:
                    raise ConfigMismatchError(f"{name}: stored shape {shape} != {shapes[name]}")
                params[name] = arr
            else:
                extra[name] = arr
        if fh.read(1):
            raise MalformedHeaderError("trailing bytes after checkpoint tensors")
    missing = set(shapes) - set(params.tensors)
    if missing:
        raise TruncatedPayloadError(f"checkpoint lacks parameters {sorted(missing)}")
    ordered = ModelParams({k: params[k] for k in shapes})
    return ordered, cfg, header.get("meta", {}), extra
