"""Closed-form communication volumes and arithmetic-intensity models.

Everything here is exact rational arithmetic (fractions.Fraction); callers
decide when to collapse to floats. Volumes follow the logical-payload
convention used by the trace: one tensor's element count per collective, no
ring factor, so the simulator's per-block all-reduce volume can be checked
for equality rather than approximate agreement.
"""

from __future__ import annotations

from fractions import Fraction

from .model import ModelConfig, RunShape
from .plan import Strategy

ITER_MODES = ("dp-full", "dp-lowrank", "pp", "tp-full", "tp-vanilla", "tp-btp")


def ai_matmul(m: int, n: int, k: int, element_bytes: int = 2) -> Fraction:
    """FLOPs per byte for an [m,k]x[k,n] matmul reading both operands and
    writing the result once."""
    if min(m, n, k) <= 0:
        raise ValueError("matmul dimensions must be positive")
    return Fraction(2 * m * n * k, (m * k + k * n + m * n) * element_bytes)


def tp_block_volume(strategy: Strategy, cfg: ModelConfig, shape: RunShape) -> int:
    """Forward all-reduce elements per block under each sharding strategy.

    full-rank: two boundary tensors of d per token. vanilla: five of d plus
    two of d_ff (the rank-sharded reductions land on full-width outputs).
    btp: seven of r.
    """
    t = shape.tokens
    if strategy is Strategy.FULL_RANK:
        return 2 * t * cfg.d
    if strategy is Strategy.VANILLA:
        return 5 * t * cfg.d + 2 * t * cfg.d_ff
    if strategy is Strategy.BOTTLENECK:
        if cfg.r is None:
            raise ValueError("btp volume needs a bottleneck rank r")
        return 7 * t * cfg.r
    raise ValueError(f"unknown strategy {strategy!r}")


def iter_volume(mode: str, cfg: ModelConfig, shape: RunShape) -> int:
    """Per-iteration communication elements for one parallelism axis.

    Data-parallel modes count one gradient all-reduce of every trainable
    linear parameter. Pipeline counts the boundary activation each way.
    Tensor-parallel modes double the per-block forward volume to cover the
    mirrored backward reductions.
    """
    l, d, d_ff, r = cfg.layers, cfg.d, cfg.d_ff, cfg.r
    t = shape.b * shape.s
    if mode == "dp-full":
        return l * (4 * d * d + 3 * d * d_ff)
    if mode == "dp-lowrank":
        if r is None:
            raise ValueError("dp-lowrank needs a bottleneck rank r")
        return l * (11 * d * r + 3 * d_ff * r)
    if mode == "pp":
        return 2 * shape.p * t * d
    if mode == "tp-full":
        return 2 * l * tp_block_volume(Strategy.FULL_RANK, cfg, shape)
    if mode == "tp-vanilla":
        return 2 * l * tp_block_volume(Strategy.VANILLA, cfg, shape)
    if mode == "tp-btp":
        return 2 * l * tp_block_volume(Strategy.BOTTLENECK, cfg, shape)
    raise ValueError(f"unknown iteration-volume mode {mode!r}: expected one of {ITER_MODES}")


def mlp_ai(strategy: Strategy, cfg: ModelConfig, shape: RunShape) -> Fraction:
    """Arithmetic intensity of the sharded MLP, two-byte elements assumed.

    Counts GEMM FLOPs against bytes for weights, activations, and the
    strategy's communication, per device.
    """
    b, s, tp = shape.b, shape.s, shape.tp
    d = cfg.d
    alpha = cfg.alpha
    if strategy is Strategy.FULL_RANK:
        num = alpha * b * s * d * d
        den = b * s * d * tp + alpha * d * (d + b * s)
        return Fraction(num, den)
    if cfg.r is None:
        raise ValueError("low-rank arithmetic intensity needs a bottleneck rank r")
    beta = cfg.beta
    num = 4 * b * s * d * d * (1 + alpha)
    if strategy is Strategy.VANILLA:
        den = 4 * b * s * d * beta * tp * (1 + alpha) + 4 * d * d * (1 + alpha) + 8 * b * s * d
        return Fraction(num, den)
    if strategy is Strategy.BOTTLENECK:
        den = 4 * beta * b * s * d * (1 + alpha) + 4 * d * d * (1 + alpha) + 8 * b * s * d * tp
        return Fraction(num, den)
    raise ValueError(f"unknown strategy {strategy!r}")


def volume_ratios(cfg: ModelConfig, shape: RunShape) -> dict[str, Fraction]:
    """Exact per-block and per-iteration volume ratios between strategies."""
    alpha, out = cfg.alpha, {}
    out["vanilla_over_full"] = Fraction(5 + 2 * alpha, 2)
    if cfg.r is not None:
        beta = cfg.beta
        out["full_over_btp"] = Fraction(2 * beta, 7)
        out["vanilla_over_btp"] = Fraction((5 + 2 * alpha) * beta, 7)
        out["dp_full_over_dp_lowrank"] = Fraction(
            iter_volume("dp-full", cfg, shape), iter_volume("dp-lowrank", cfg, shape)
        )
    return out


def costs(cfg: ModelConfig, shape: RunShape, element_bytes: int = 2) -> dict:
    """One stable dictionary with every closed-form quantity for a run."""
    out: dict = {
        "alpha": _frac(cfg.alpha),
        "beta": _frac(cfg.beta) if cfg.r is not None else None,
        "block_volume_elements": {},
        "iter_volume_elements": {},
        "mlp_arithmetic_intensity": {},
        "volume_ratios": {k: _frac(v) for k, v in volume_ratios(cfg, shape).items()},
    }
    for strat in (Strategy.FULL_RANK, Strategy.VANILLA, Strategy.BOTTLENECK):
        if strat is not Strategy.FULL_RANK and cfg.r is None:
            continue
        out["block_volume_elements"][strat.value] = tp_block_volume(strat, cfg, shape)
        out["mlp_arithmetic_intensity"][strat.value] = _frac(mlp_ai(strat, cfg, shape))
    for mode in ITER_MODES:
        if "lowrank" in mode or mode == "tp-btp":
            if cfg.r is None:
                continue
        out["iter_volume_elements"][mode] = iter_volume(mode, cfg, shape)
    return out


def _frac(x: Fraction) -> dict:
    return {"exact": f"{x.numerator}/{x.denominator}", "value": float(x)}
