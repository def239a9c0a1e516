"""Decoder-block definition: configs, presets, weights, reference forward.

One pre-norm block with seven linear maps (q, k, v, o, gate, up, down),
per-head softmax attention (unmasked; any correct attention serves here), a
SwiGLU MLP, and two residual adds. Low-rank variants replace each linear map
W[d_out, d_in] with a factor pair: down-factor B[r, d_in] applied first, then
up-factor A[d_out, r].

Variant pathways per projection, input x:
    full-rank  y = W x
    svd        y = A (B x)
    cola       y = A crossgate(B x)     nonlinearity at rank r, see below
    lax        h = B x; y = A (h + h_prev); h is passed to the next layer

cola's rank-r nonlinearity splits z into halves (u, v) of r/2 and emits
concat(silu(u)*v, silu(v)*u): each half gates the other, the output keeps
rank r, and replacing it with identity recovers the svd pathway. r must be
even. lax uses h_prev = 0 in the first layer and fuses all seven projections
uniformly.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from fractions import Fraction

import numpy as np

from .tensor import (
    DimensionError,
    DivisibilityError,
    Tensor,
    matmul,
    mm_values,
    seeded_fill,
    swiglu,
    swiglu_values,
    transpose,
)
from .norms import rmsnorm_reference

EPS_DEFAULT = 1e-6

PROJECTIONS = ("q", "k", "v", "o", "gate", "up", "down")


class Variant(str, Enum):
    FULL_RANK = "full-rank"
    SVD = "svd"
    COLA = "cola"
    LAX = "lax"


LOWRANK_VARIANTS = (Variant.SVD, Variant.COLA, Variant.LAX)


@dataclass(frozen=True)
class ModelConfig:
    layers: int
    heads: int
    d: int
    d_ff: int
    r: int | None = None

    def __post_init__(self):
        for name in ("layers", "heads", "d", "d_ff"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.d % self.heads != 0:
            raise DivisibilityError(f"d={self.d} not divisible by heads={self.heads}")
        if self.r is not None and self.r <= 0:
            raise ValueError("r must be positive when set")

    @property
    def head_dim(self) -> int:
        return self.d // self.heads

    @property
    def alpha(self) -> Fraction:
        """MLP expansion d_ff / d."""
        return Fraction(self.d_ff, self.d)

    @property
    def beta(self) -> Fraction:
        """Rank reduction d / r."""
        if self.r is None:
            raise ValueError("beta undefined without r")
        return Fraction(self.d, self.r)


# Published model sizes; r is the canonical d/4.
PRESETS = {
    "1b": ModelConfig(layers=24, heads=32, d=2048, d_ff=5472, r=512),
    "3b": ModelConfig(layers=28, heads=24, d=3072, d_ff=8192, r=768),
    "7b": ModelConfig(layers=32, heads=32, d=4096, d_ff=11008, r=1024),
    "13b": ModelConfig(layers=40, heads=40, d=5120, d_ff=13824, r=1280),
    "30b": ModelConfig(layers=36, heads=64, d=8192, d_ff=22016, r=2048),
}


def preset(name: str) -> ModelConfig:
    key = name.lower()
    if key not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return PRESETS[key]


@dataclass(frozen=True)
class RunShape:
    b: int
    s: int
    tp: int = 1
    p: int = 1

    def __post_init__(self):
        for name in ("b", "s", "tp", "p"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    @property
    def tokens(self) -> int:
        return self.b * self.s


def projection_dims(cfg: ModelConfig) -> dict[str, tuple[int, int]]:
    """Per projection (d_out, d_in)."""
    d, d_ff = cfg.d, cfg.d_ff
    return {
        "q": (d, d),
        "k": (d, d),
        "v": (d, d),
        "o": (d, d),
        "gate": (d_ff, d),
        "up": (d_ff, d),
        "down": (d, d_ff),
    }


@dataclass(frozen=True)
class DecoderBlockWeights:
    cfg: ModelConfig
    variant: Variant
    full: dict[str, Tensor]          # full-rank W[d_out, d_in]; empty for low-rank
    down_factors: dict[str, Tensor]  # B[r, d_in]; empty for full-rank
    up_factors: dict[str, Tensor]    # A[d_out, r]; empty for full-rank
    gamma1: Tensor
    gamma2: Tensor

    def linear_parameter_count(self) -> int:
        """Elements of the built linear weights (norm scales excluded)."""
        count = sum(w.elements for w in self.full.values())
        count += sum(w.elements for w in self.down_factors.values())
        count += sum(w.elements for w in self.up_factors.values())
        return count


def build_block(cfg: ModelConfig, variant: Variant, seed: int, element_bytes: int = 2) -> DecoderBlockWeights:
    """Deterministic block weights; same (cfg, variant, seed) yields the same block."""
    dims = projection_dims(cfg)
    if variant is Variant.FULL_RANK:
        full = {}
        counter = 0
        for name in PROJECTIONS:
            d_out, d_in = dims[name]
            full[name] = seeded_fill((d_out, d_in), seed + counter, element_bytes)
            counter += 1
        down_factors: dict[str, Tensor] = {}
        up_factors: dict[str, Tensor] = {}
    else:
        if cfg.r is None:
            raise ValueError(f"variant {variant.value} needs cfg.r")
        if variant is Variant.COLA and cfg.r % 2 != 0:
            raise DivisibilityError(f"r={cfg.r} must be even for the cola gate split")
        full = {}
        down_factors = {}
        up_factors = {}
        counter = 0
        for name in PROJECTIONS:
            d_out, d_in = dims[name]
            down_factors[name] = seeded_fill((cfg.r, d_in), seed + counter, element_bytes)
            up_factors[name] = seeded_fill((d_out, cfg.r), seed + counter + 1, element_bytes)
            counter += 2
    gamma1 = seeded_fill((cfg.d,), seed + 101, element_bytes)
    gamma2 = seeded_fill((cfg.d,), seed + 102, element_bytes)
    return DecoderBlockWeights(cfg, variant, full, down_factors, up_factors, gamma1, gamma2)


def lowrank_crossgate_values(z: np.ndarray) -> np.ndarray:
    """Rank-preserving gate: split z into halves (u, v), each half gates the other."""
    r = z.shape[-1]
    if r % 2 != 0:
        raise DivisibilityError(f"rank {r} must be even for the gate split")
    u = z[..., : r // 2]
    v = z[..., r // 2 :]
    return np.concatenate([swiglu_values(u, v), swiglu_values(v, u)], axis=-1)


def softmax_rows(m: np.ndarray) -> np.ndarray:
    shifted = m - np.max(m, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def sdpa_values(
    qv: np.ndarray, kv: np.ndarray, vv: np.ndarray, b: int, s: int, heads: int, head_dim: int
) -> tuple[np.ndarray, int]:
    """Per-head scaled-dot-product attention on [tokens, heads*head_dim] inputs.

    Returns (output, gemm_flops). Heads are contiguous feature slices; each
    (batch, head) pair runs scores = q k^T / sqrt(head_dim), row softmax, then
    probs @ v, all with the shared ascending-k matmul kernel.
    """
    width = heads * head_dim
    q4 = qv.reshape(b, s, heads, head_dim)
    k4 = kv.reshape(b, s, heads, head_dim)
    v4 = vv.reshape(b, s, heads, head_dim)
    out = np.empty((b, s, heads, head_dim), dtype=np.float64)
    scale = 1.0 / np.sqrt(float(head_dim))
    flops = 0
    for bi in range(b):
        for h in range(heads):
            qh = np.ascontiguousarray(q4[bi, :, h, :])
            kh = np.ascontiguousarray(k4[bi, :, h, :])
            vh = np.ascontiguousarray(v4[bi, :, h, :])
            scores = mm_values(qh, np.ascontiguousarray(kh.T)) * scale
            probs = softmax_rows(scores)
            out[bi, :, h, :] = mm_values(probs, vh)
            flops += 2 * s * s * head_dim * 2
    return out.reshape(b * s, width), flops


def _project_reference(
    block: DecoderBlockWeights, name: str, x2d: Tensor, h_prev: np.ndarray | None
) -> tuple[Tensor, Tensor | None]:
    """One projection on [tokens, d_in] input; returns (output, lax h or None)."""
    variant = block.variant
    if variant is Variant.FULL_RANK:
        out, _ = matmul(x2d, transpose(block.full[name]))
        return out, None
    z, _ = matmul(x2d, transpose(block.down_factors[name]))
    if variant is Variant.SVD:
        out, _ = matmul(z, transpose(block.up_factors[name]))
        return out, None
    if variant is Variant.COLA:
        gated = Tensor(lowrank_crossgate_values(z.values), z.element_bytes)
        out, _ = matmul(gated, transpose(block.up_factors[name]))
        return out, None
    # lax
    h_cur = z
    merged = z.values if h_prev is None else z.values + h_prev
    out, _ = matmul(Tensor(merged, z.element_bytes), transpose(block.up_factors[name]))
    return out, h_cur


def reference_forward(
    block: DecoderBlockWeights,
    x: Tensor,
    h_prev: dict[str, Tensor] | None = None,
    eps: float = EPS_DEFAULT,
) -> tuple[Tensor, dict[str, Tensor] | None]:
    """Single-device oracle for one block.

    x is [b, s, d]. For the lax variant, h_prev maps projection name to the
    previous layer's [b, s, r] bundle entry (None means zeros, the first-layer
    boundary), and the returned bundle feeds the next layer. Other variants
    return h_cur = None.
    """
    if x.values.ndim != 3 or x.shape[2] != block.cfg.d:
        raise DimensionError(f"x must be [b, s, d={block.cfg.d}], got {x.shape}")
    cfg = block.cfg
    b, s, d = x.shape
    tokens = b * s
    x2d = Tensor(x.values.reshape(tokens, d), x.element_bytes)

    def prev(name: str) -> np.ndarray | None:
        if block.variant is not Variant.LAX or h_prev is None:
            return None
        return h_prev[name].values.reshape(tokens, cfg.r)

    h_out: dict[str, Tensor] = {}

    def project(name: str, inp: Tensor) -> Tensor:
        out, h_cur = _project_reference(block, name, inp, prev(name))
        if h_cur is not None:
            h_out[name] = Tensor(h_cur.values.reshape(b, s, cfg.r), x.element_bytes)
        return out

    n1 = rmsnorm_reference(x2d, block.gamma1, eps)
    q = project("q", n1)
    k = project("k", n1)
    v = project("v", n1)
    attn_vals, _ = sdpa_values(q.values, k.values, v.values, b, s, cfg.heads, cfg.head_dim)
    o = project("o", Tensor(attn_vals, x.element_bytes))
    x_mid = Tensor(x2d.values + o.values, x.element_bytes)

    n2 = rmsnorm_reference(x_mid, block.gamma2, eps)
    g = project("gate", n2)
    u = project("up", n2)
    act = swiglu(g, u)
    m = project("down", act)
    y2d = x_mid.values + m.values

    y = Tensor(y2d.reshape(b, s, d), x.element_bytes)
    return y, (h_out if block.variant is Variant.LAX else None)


def zero_h_prev(cfg: ModelConfig, shape: RunShape, element_bytes: int = 2) -> dict[str, Tensor]:
    """The lax first-layer boundary bundle: zeros for all seven projections."""
    if cfg.r is None:
        raise ValueError("h bundle needs cfg.r")
    return {
        name: Tensor(np.zeros((shape.b, shape.s, cfg.r)), element_bytes)
        for name in PROJECTIONS
    }


def seeded_h_prev(cfg: ModelConfig, shape: RunShape, seed: int, element_bytes: int = 2) -> dict[str, Tensor]:
    """Deterministic nonzero lax bundle, for exercising the fusion path."""
    if cfg.r is None:
        raise ValueError("h bundle needs cfg.r")
    return {
        name: seeded_fill((shape.b, shape.s, cfg.r), seed + 7 * i, element_bytes)
        for i, name in enumerate(PROJECTIONS)
    }
