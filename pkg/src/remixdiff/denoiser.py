"""Noise-prediction networks built from mixable layers.

Two desk-scale architectures: a time-conditioned MLP for low-dimensional data
and a tiny patch-transformer with adaLN conditioning for 8x8 images. Every
forward consumes a flat name -> tensor parameter dict, so the same code runs a
plain model (leaf parameters) and a mixed expert (parameters produced by the
basis-averaging op, through which gradients reach the bank and the logits).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from . import remix
from .numerics import Tensor

ARCHS = ("mlp", "dit-tiny")


@dataclass
class ModelConfig:
    arch: str = "mlp"
    data_dim: int = 2          # mlp feature count
    width: int = 128
    depth: int = 4
    image_size: int = 8        # dit-tiny: single-channel side length
    patch_size: int = 2
    num_heads: int = 4
    num_classes: int = 0       # 0 = unconditional
    time_embed_dim: int = 64

    def validate(self) -> None:
        if self.arch not in ARCHS:
            raise ValueError(f"unknown arch '{self.arch}'")
        if self.width < 1 or self.depth < 1:
            raise ValueError("width and depth must be >= 1")
        if self.time_embed_dim % 2 != 0:
            raise ValueError("time_embed_dim must be even")
        if self.num_classes < 0:
            raise ValueError("num_classes must be >= 0")
        if self.arch == "dit-tiny":
            if self.width % self.num_heads != 0:
                raise ValueError(
                    f"width {self.width} not divisible by num_heads {self.num_heads}"
                )
            if self.image_size % self.patch_size != 0:
                raise ValueError(
                    f"patch_size {self.patch_size} must divide image_size {self.image_size}"
                )

    @property
    def sample_dim(self) -> int:
        """Flattened sample dimensionality the network denoises."""
        return self.data_dim if self.arch == "mlp" else self.image_size ** 2

    @property
    def num_tokens(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @classmethod
    def mlp_default(cls, **kw) -> "ModelConfig":
        return cls(arch="mlp", width=128, depth=4, **kw)

    @classmethod
    def dit_tiny_default(cls, **kw) -> "ModelConfig":
        return cls(arch="dit-tiny", width=64, depth=3, image_size=8,
                   patch_size=2, num_heads=4, **kw)


# -- parameter table -----------------------------------------------------------
#
# Init kinds: ("normal", std), ("zeros",), ("adaln_bias",) which packs the
# scale/shift/gate bias as [ones, zeros, zeros] so blocks start as identities
# with closed gates.

def param_specs(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...], tuple]]:
    cfg.validate()
    E = cfg.time_embed_dim
    W = cfg.width
    specs: list[tuple[str, tuple[int, ...], tuple]] = []

    def lecun(fan_in: int) -> tuple:
        return ("normal", 1.0 / math.sqrt(fan_in))

    if cfg.arch == "mlp":
        D = cfg.data_dim
        specs += [
            ("time.fc1.w", (E, E), lecun(E)),
            ("time.fc1.b", (E,), ("zeros",)),
            ("time.fc2.w", (E, E), lecun(E)),
            ("time.fc2.b", (E,), ("zeros",)),
        ]
        if cfg.num_classes > 0:
            specs.append(("class.table", (cfg.num_classes + 1, E), ("normal", 0.02)))
        in_dim = D
        for layer in range(cfg.depth):
            specs += [
                (f"layers.{layer}.w", (in_dim, W), lecun(in_dim)),
                (f"layers.{layer}.b", (W,), ("zeros",)),
                (f"layers.{layer}.tproj", (E, W), lecun(E)),
            ]
            in_dim = W
        # Small-std head: untrained predictions stay near zero without killing
        # the gradient flow into the trunk.
        specs += [
            ("out.w", (W, D), ("normal", 0.02)),
            ("out.b", (D,), ("zeros",)),
        ]
        return specs

    # dit-tiny
    P = cfg.patch_size ** 2
    specs += [
        ("patch.w", (P, W), lecun(P)),
        ("patch.b", (W,), ("zeros",)),
        ("pos", (cfg.num_tokens, W), ("normal", 0.02)),
        ("time.fc1.w", (E, W), lecun(E)),
        ("time.fc1.b", (W,), ("zeros",)),
        ("time.fc2.w", (W, W), lecun(W)),
        ("time.fc2.b", (W,), ("zeros",)),
    ]
    if cfg.num_classes > 0:
        specs.append(("class.table", (cfg.num_classes + 1, W), ("normal", 0.02)))
    for b in range(cfg.depth):
        pre = f"blocks.{b}"
        specs += [
            (f"{pre}.mod1.w", (W, 3 * W), ("zeros",)),
            (f"{pre}.mod1.b", (3 * W,), ("adaln_bias",)),
            (f"{pre}.attn.qkv.w", (W, 3 * W), lecun(W)),
            (f"{pre}.attn.qkv.b", (3 * W,), ("zeros",)),
            (f"{pre}.attn.out.w", (W, W), lecun(W)),
            (f"{pre}.attn.out.b", (W,), ("zeros",)),
            (f"{pre}.mod2.w", (W, 3 * W), ("zeros",)),
            (f"{pre}.mod2.b", (3 * W,), ("adaln_bias",)),
            (f"{pre}.mlp.fc1.w", (W, 4 * W), lecun(W)),
            (f"{pre}.mlp.fc1.b", (4 * W,), ("zeros",)),
            (f"{pre}.mlp.fc2.w", (4 * W, W), lecun(4 * W)),
            (f"{pre}.mlp.fc2.b", (W,), ("zeros",)),
        ]
    specs += [
        ("head.w", (W, P), ("normal", 0.02)),
        ("head.b", (P,), ("zeros",)),
    ]
    return specs


def count_params(cfg: ModelConfig) -> int:
    """Trainable value count of one plain (un-widened) model."""
    return sum(int(np.prod(shape)) for _, shape, _ in param_specs(cfg))


def init_plain_params(
    cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32
) -> dict[str, np.ndarray]:
    """One plain parameter set, drawn in spec order (rng consumption is fixed)."""
    params: dict[str, np.ndarray] = {}
    for name, shape, init in param_specs(cfg):
        if init[0] == "normal":
            arr = (init[1] * rng.standard_normal(shape)).astype(dtype)
        elif init[0] == "zeros":
            arr = np.zeros(shape, dtype=dtype)
        elif init[0] == "adaln_bias":
            w = shape[0] // 3
            arr = np.concatenate(
                [np.ones(w, dtype=dtype), np.zeros(2 * w, dtype=dtype)]
            )
        else:
            raise ValueError(f"unknown init {init}")
        params[name] = arr
    return params


# -- forward --------------------------------------------------------------------


def _wrap_params(params: dict) -> dict[str, Tensor]:
    return {
        name: (p if isinstance(p, Tensor) else Tensor(p)) for name, p in params.items()
    }


def _condition_embed(cfg: ModelConfig, params, t: np.ndarray, y: np.ndarray | None) -> Tensor:
    dtype = params["time.fc1.w"].dtype
    e = nx.sinusoidal_embed(t, cfg.time_embed_dim, dtype=dtype)
    e = nx.silu(nx.linear(e, params["time.fc1.w"], params["time.fc1.b"]))
    e = nx.linear(e, params["time.fc2.w"], params["time.fc2.b"])
    if cfg.num_classes > 0:
        if y is None:
            y = np.full(t.shape[0], cfg.num_classes, dtype=np.int64)
        e = e + nx.index(params["class.table"], np.asarray(y, dtype=np.int64))
    return e


def adaln_modulate(hidden: Tensor, cond: Tensor, w: Tensor, b: Tensor,
                   eps: float = 1e-5) -> Tensor:
    """Project the condition embedding to per-channel scale/shift/gate and apply
    gate * (scale * layernorm(hidden) + shift). Tokens share one modulation per
    sample; a zero gate makes the result vanish, leaving residual paths intact.
    """
    width = hidden.shape[-1]
    if w.shape[-1] != 3 * width:
        raise ValueError(f"modulation projects to 3*width={3*width}, got {w.shape[-1]}")
    m = nx.linear(cond, w, b)
    scale = m[:, 0:width]
    shift = m[:, width:2 * width]
    gate = m[:, 2 * width:3 * width]
    if hidden.ndim == 3:
        bsz = hidden.shape[0]
        scale = nx.reshape(scale, (bsz, 1, width))
        shift = nx.reshape(shift, (bsz, 1, width))
        gate = nx.reshape(gate, (bsz, 1, width))
    normed = nx.layernorm(hidden, eps=eps)
    return gate * (scale * normed + shift)


def _attention(h: Tensor, params, prefix: str, num_heads: int) -> Tensor:
    bsz, tok, width = h.shape
    dh = width // num_heads
    qkv = nx.linear(h, params[f"{prefix}.qkv.w"], params[f"{prefix}.qkv.b"])
    qkv = nx.reshape(qkv, (bsz, tok, 3, num_heads, dh))
    q = nx.transpose(qkv[:, :, 0], (0, 2, 1, 3))
    k = nx.transpose(qkv[:, :, 1], (0, 2, 1, 3))
    v = nx.transpose(qkv[:, :, 2], (0, 2, 1, 3))
    scores = nx.matmul(q, nx.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
    att = nx.softmax(scores, axis=-1)
    out = nx.matmul(att, v)
    out = nx.reshape(nx.transpose(out, (0, 2, 1, 3)), (bsz, tok, width))
    return nx.linear(out, params[f"{prefix}.out.w"], params[f"{prefix}.out.b"])


def _forward_mlp(cfg: ModelConfig, params, x: Tensor, t, y) -> Tensor:
    e = _condition_embed(cfg, params, t, y)
    h = x
    for layer in range(cfg.depth):
        z = nx.linear(h, params[f"layers.{layer}.w"], params[f"layers.{layer}.b"])
        z = z + nx.matmul(e, params[f"layers.{layer}.tproj"])
        h = nx.silu(z)
    return nx.linear(h, params["out.w"], params["out.b"])


def _forward_dit(cfg: ModelConfig, params, x: Tensor, t, y) -> Tensor:
    bsz = x.shape[0]
    side = cfg.image_size
    p = cfg.patch_size
    grid = side // p
    # (B, S*S) -> (B, tokens, p*p)
    patches = nx.reshape(x, (bsz, grid, p, grid, p))
    patches = nx.transpose(patches, (0, 1, 3, 2, 4))
    patches = nx.reshape(patches, (bsz, grid * grid, p * p))

    h = nx.linear(patches, params["patch.w"], params["patch.b"]) + params["pos"]
    c = _condition_embed(cfg, params, t, y)
    for b in range(cfg.depth):
        pre = f"blocks.{b}"
        u = adaln_modulate(h, c, params[f"{pre}.mod1.w"], params[f"{pre}.mod1.b"])
        h = h + _attention(u, params, f"{pre}.attn", cfg.num_heads)
        v = adaln_modulate(h, c, params[f"{pre}.mod2.w"], params[f"{pre}.mod2.b"])
        m = nx.gelu(nx.linear(v, params[f"{pre}.mlp.fc1.w"], params[f"{pre}.mlp.fc1.b"]))
        h = h + nx.linear(m, params[f"{pre}.mlp.fc2.w"], params[f"{pre}.mlp.fc2.b"])
    h = nx.layernorm(h)
    out = nx.linear(h, params["head.w"], params["head.b"])
    # (B, tokens, p*p) -> (B, S*S)
    out = nx.reshape(out, (bsz, grid, grid, p, p))
    out = nx.transpose(out, (0, 1, 3, 2, 4))
    return nx.reshape(out, (bsz, side * side))


def denoiser_forward(cfg: ModelConfig, params: dict, x, t, y=None) -> Tensor:
    """Predict the noise in ``x`` at timesteps ``t`` (scalar or per-sample)."""
    params = _wrap_params(params)
    x = nx.as_tensor(x, next(iter(params.values())))
    if x.ndim != 2 or x.shape[1] != cfg.sample_dim:
        raise ValueError(f"expected input (B, {cfg.sample_dim}), got {x.shape}")
    t = np.atleast_1d(np.asarray(t))
    if t.shape[0] == 1 and x.shape[0] > 1:
        t = np.full(x.shape[0], t[0])
    if t.shape[0] != x.shape[0]:
        raise ValueError(f"t batch {t.shape[0]} does not match x batch {x.shape[0]}")
    if cfg.arch == "mlp":
        return _forward_mlp(cfg, params, x, t, y)
    return _forward_dit(cfg, params, x, t, y)


# -- mixed model ------------------------------------------------------------------


class MixedDenoiser:
    """A denoiser whose every trainable tensor is K-widened in a basis bank.

    Evaluating under a coefficient vector first averages each widened tensor
    over the basis axis, then runs the plain forward, so gradients reach both
    the bank and whatever produced the coefficients.
    """

    def __init__(self, cfg: ModelConfig, bank: remix.BasisBank):
        cfg.validate()
        self.cfg = cfg
        self.bank = bank

    @property
    def K(self) -> int:
        return self.bank.K

    @classmethod
    def build(
        cls,
        cfg: ModelConfig,
        K: int,
        rng: np.random.Generator,
        dtype=np.float32,
        unmixed: tuple[str, ...] = (),
    ) -> "MixedDenoiser":
        """Independent random init per basis (basis-major draw order, so K=1
        consumes the rng exactly like a plain init)."""
        drawn = [init_plain_params(cfg, rng, dtype) for _ in range(K)]
        layers = {}
        shared = {}
        for name in drawn[0]:
            if name in unmixed:
                shared[name] = Tensor(drawn[0][name].copy(), requires_grad=True)
            else:
                layers[name] = Tensor(
                    np.stack([d[name] for d in drawn]), requires_grad=True
                )
        return cls(cfg, remix.BasisBank(K, layers, shared))

    @classmethod
    def from_plain(
        cls, cfg: ModelConfig, plain: dict[str, np.ndarray], K: int,
        unmixed: tuple[str, ...] = (),
    ) -> "MixedDenoiser":
        """K-fold replication of pretrained plain weights into a bank."""
        expected = {name for name, _, _ in param_specs(cfg)}
        if set(plain) != expected:
            missing = expected - set(plain)
            extra = set(plain) - expected
            raise ValueError(f"plain params mismatch: missing={missing}, extra={extra}")
        layers = {}
        shared = {}
        for name, shape, _ in param_specs(cfg):
            arr = plain[name]
            if arr.shape != shape:
                raise ValueError(f"'{name}' has shape {arr.shape}, expected {shape}")
            if name in unmixed:
                shared[name] = Tensor(arr.copy(), requires_grad=True)
            else:
                layers[name] = Tensor(
                    np.repeat(arr[None], K, axis=0).copy(), requires_grad=True
                )
        return cls(cfg, remix.BasisBank(K, layers, shared))

    def mixed_params(self, alpha) -> dict[str, Tensor]:
        """Per-layer basis average under ``alpha`` (a (K,) tensor, or one per
        layer for local mixers); opted-out tensors pass through unmixed."""
        params: dict[str, Tensor] = {}
        for name, widened in self.bank.layers.items():
            a = alpha[name] if isinstance(alpha, dict) else alpha
            params[name] = nx.mix(nx.as_tensor(a, widened), widened)
        params.update(self.bank.shared)
        return params

    def predict_noise(self, alpha, x, t, y=None) -> Tensor:
        return denoiser_forward(self.cfg, self.mixed_params(alpha), x, t, y)

    def trainable(self) -> dict[str, Tensor]:
        return self.bank.trainable()

    def alpha_for_expert(self, mixer: remix.MixerTable, i: int):
        """Coefficient tensor(s) for expert ``i`` matching the mixer scope."""
        if mixer.kind != "onehot" and mixer.scope == "local":
            return {name: remix.coefficients(mixer, i, name) for name in self.bank.layers}
        return remix.coefficients(mixer, i)


# -- inference providers ------------------------------------------------------------


def plain_provider(cfg: ModelConfig, params: dict[str, np.ndarray]):
    """Noise-prediction callable for a single plain parameter set."""
    def provide(x: np.ndarray, t: int, labels: np.ndarray | None) -> np.ndarray:
        with nx.no_grad():
            return denoiser_forward(cfg, params, x, t, labels).data
    return provide


def precomputed_provider(
    cfg: ModelConfig,
    experts: list[dict[str, np.ndarray]],
    partition: remix.IntervalPartition,
):
    """Route each timestep to its pre-materialized expert."""
    if len(experts) != partition.N:
        raise ValueError(f"got {len(experts)} experts for N={partition.N}")
    def provide(x: np.ndarray, t: int, labels: np.ndarray | None) -> np.ndarray:
        i = remix.interval_of(int(t), partition)
        with nx.no_grad():
            return denoiser_forward(cfg, experts[i], x, t, labels).data
    return provide


def runtime_mix_provider(
    model: MixedDenoiser,
    mixer: remix.MixerTable,
    partition: remix.IntervalPartition,
):
    """Materialize the serving expert afresh on every call (no caching), the
    latency counterpart to precomputing."""
    def provide(x: np.ndarray, t: int, labels: np.ndarray | None) -> np.ndarray:
        i = remix.interval_of(int(t), partition)
        with nx.no_grad():
            if mixer.kind != "onehot" and mixer.scope == "local":
                alpha = {
                    name: remix.coefficients(mixer, i, name).data
                    for name in model.bank.layers
                }
            else:
                alpha = remix.coefficients(mixer, i).data
            params = remix.materialize_expert(model.bank, alpha)
            return denoiser_forward(model.cfg, params, x, t, labels).data
    return provide
