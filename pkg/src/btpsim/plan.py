"""Sharding plans: who holds which weight slice, where collectives fire.

A TP chunk is a span of ops between collectives that ends in exactly one
all-reduce. The three strategies differ in what that boundary tensor is:

    full-rank  two chunks per block (attention, mlp); column-then-row sharded
               full matrices; boundary payload [b, s, d]; residual replicated.
    vanilla    one chunk per factor pair (seven per block), sharded along the
               rank dimension r; boundary payloads [b, s, d] or [b, s, d_ff];
               residual replicated, attention recomputed on every rank.
    btp        seven chunks per block, each starting at an up-factor
               (column-parallel over its output features) and ending at the
               next down-factor (row-parallel over its input features); every
               boundary payload is [b, s, r]; the residual stream stays
               sharded along d, and the model-final gather is charged to a
               separate boundary counter.

RMSNorm over the sharded residual (btp only) is sharded-unsafe and needs a
handler: either a standalone statistic all-reduce (sync) or the fused online
form whose statistic rides the chunk's own all-reduce.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .model import LOWRANK_VARIANTS, ModelConfig, RunShape, Variant


class Strategy(str, Enum):
    FULL_RANK = "full-rank"
    VANILLA = "vanilla"
    BOTTLENECK = "btp"


class NormMode(str, Enum):
    REPLICATED = "replicated"  # every rank sees the full row; no collective
    SYNC = "sync"              # standalone statistic all-reduce per norm
    ONLINE = "online"          # statistic rides the chunk all-reduce


class Safety(str, Enum):
    SAFE = "sharded-safe"
    UNSAFE = "sharded-unsafe"


class PlanError(ValueError):
    """The requested plan is inconsistent; message names the failing piece."""


@dataclass(frozen=True)
class OpContext:
    tp: int
    heads: int | None = None
    input_sharded: bool = False
    layouts_match: bool = True


_ELEMENTWISE_OPS = {"elementwise", "silu", "swiglu", "scale", "crossgate"}


def classify(op_kind: str, ctx: OpContext) -> Safety:
    """Sharded-safe means per-rank execution on shards equals the unsharded op."""
    if op_kind in _ELEMENTWISE_OPS:
        return Safety.SAFE
    if op_kind == "residual-add":
        return Safety.SAFE if ctx.layouts_match else Safety.UNSAFE
    if op_kind == "attention":
        if not ctx.input_sharded:
            return Safety.SAFE
        if ctx.heads is None:
            raise PlanError("attention classification needs heads")
        return Safety.SAFE if ctx.heads % ctx.tp == 0 else Safety.UNSAFE
    if op_kind == "rmsnorm":
        return Safety.UNSAFE if ctx.input_sharded else Safety.SAFE
    if op_kind == "concat-across-shards":
        return Safety.UNSAFE
    raise PlanError(f"unknown op kind {op_kind!r}")


@dataclass(frozen=True)
class ChunkSpec:
    chunk_id: str
    ops: tuple[str, ...]
    payload_elements: int          # boundary all-reduce, tag=block
    rider_elements: int = 0        # fused statistic, tag=fused-stat (online only)

    @property
    def kind(self) -> str:
        return "all-reduce-coalesced" if self.rider_elements else "all-reduce"


@dataclass(frozen=True)
class PredictedCollective:
    chunk_id: str
    kind: str
    tag: str
    elements: int
    extras: tuple[tuple[str, int], ...] = ()


@dataclass(frozen=True)
class ShardPlan:
    strategy: Strategy
    variant: Variant
    cfg: ModelConfig
    shape: RunShape
    norm_mode: NormMode
    grouping: bool
    lowrank_ckpt: bool
    chunks: tuple[ChunkSpec, ...]
    stat_collectives: tuple[PredictedCollective, ...]  # standalone (sync only)
    residual_layout: str          # "replicated" | "sharded-d"
    final_gather_elements: int    # boundary-tagged gather before the model head
    warnings: tuple[str, ...] = ()

    @property
    def block_volume_elements(self) -> int:
        """Block-tagged forward volume per pass, including sync stats."""
        return sum(c.payload_elements for c in self.chunks) + sum(
            p.elements for p in self.stat_collectives
        )

    @property
    def boundary_volume_elements(self) -> int:
        return sum(c.payload_elements for c in self.chunks)


def _require_divisible(value: int, by: int, dim_name: str) -> None:
    if value % by != 0:
        raise PlanError(f"{dim_name}={value} not divisible by tp={by}")


def _validate(strategy: Strategy, variant: Variant, cfg: ModelConfig, shape: RunShape) -> None:
    tp = shape.tp
    if strategy is Strategy.FULL_RANK:
        if variant is not Variant.FULL_RANK:
            raise PlanError(f"full-rank strategy cannot shard variant {variant.value}")
        _require_divisible(cfg.d, tp, "d")
        _require_divisible(cfg.d_ff, tp, "d_ff")
        if classify("attention", OpContext(tp=tp, heads=cfg.heads, input_sharded=tp > 1)) is Safety.UNSAFE:
            raise PlanError(f"heads={cfg.heads} not divisible by tp={tp}")
        return
    if variant not in LOWRANK_VARIANTS:
        raise PlanError(f"{strategy.value} strategy needs a low-rank variant, got {variant.value}")
    if cfg.r is None:
        raise PlanError(f"{strategy.value} strategy needs cfg.r")
    if variant is Variant.COLA and cfg.r % 2 != 0:
        raise PlanError(f"r={cfg.r} must be even for the cola gate split")
    if strategy is Strategy.VANILLA:
        _require_divisible(cfg.r, tp, "r")
        if variant is Variant.COLA and (cfg.r // 2) % tp != 0:
            raise PlanError(
                f"cola gate halves r/2={cfg.r // 2} not divisible by tp={tp}; "
                "gate pairs cannot stay rank-local"
            )
        return
    # btp
    _require_divisible(cfg.d, tp, "d")
    _require_divisible(cfg.d_ff, tp, "d_ff")
    if classify("attention", OpContext(tp=tp, heads=cfg.heads, input_sharded=tp > 1)) is Safety.UNSAFE:
        raise PlanError(f"heads={cfg.heads} not divisible by tp={tp}")


def _check_chunk_safety(chunks: tuple[ChunkSpec, ...], norm_mode: NormMode, cfg, shape) -> None:
    # Every intervening op must be sharded-safe or have a named handler.
    handled = {"rmsnorm"} if norm_mode in (NormMode.SYNC, NormMode.ONLINE) else set()
    for chunk in chunks:
        for op in chunk.ops:
            kind = op.split("[")[0]
            if kind == "gemm":
                continue
            sharded = "sharded" in op
            safety = classify(
                kind, OpContext(tp=shape.tp, heads=cfg.heads, input_sharded=sharded)
            )
            if safety is Safety.UNSAFE and kind not in handled:
                raise PlanError(f"sharded-unsafe op {op!r} in chunk {chunk.chunk_id} has no handler")


def _full_rank_chunks(cfg: ModelConfig, shape: RunShape, grouping: bool) -> tuple[ChunkSpec, ...]:
    t = shape.tokens
    qkv = ("gemm[qkv col-d]",) if grouping else ("gemm[q col-d]", "gemm[k col-d]", "gemm[v col-d]")
    gateup = ("gemm[gate+up col-d_ff]",) if grouping else ("gemm[gate col-d_ff]", "gemm[up col-d_ff]")
    attn = ChunkSpec(
        "attn",
        ("rmsnorm",) + qkv + ("attention[head-sharded]", "gemm[o row-d]"),
        t * cfg.d,
    )
    mlp = ChunkSpec(
        "mlp",
        ("residual-add", "rmsnorm") + gateup + ("swiglu", "gemm[down row-d_ff]"),
        t * cfg.d,
    )
    return (attn, mlp)


def _vanilla_chunks(cfg: ModelConfig, shape: RunShape, variant: Variant, grouping: bool) -> tuple[ChunkSpec, ...]:
    t = shape.tokens
    d, d_ff = cfg.d, cfg.d_ff
    gate_op = {"svd": (), "cola": ("crossgate",), "lax": ("elementwise",)}[variant.value]

    def pair(ops_prefix: tuple[str, ...], b_label: str, a_label: str) -> tuple[str, ...]:
        return ops_prefix + (f"gemm[{b_label} col-r]",) + gate_op + (f"gemm[{a_label} row-r]",)

    if grouping:
        return (
            ChunkSpec("qkv", pair(("rmsnorm",), "B_qkv", "A_qkv batched"), 3 * t * d),
            ChunkSpec("o", pair(("attention",), "B_o", "A_o"), t * d),
            ChunkSpec("gate_up", pair(("residual-add", "rmsnorm"), "B_gate+up", "A_gate+up batched"), 2 * t * d_ff),
            ChunkSpec("down", pair(("swiglu",), "B_down", "A_down"), t * d),
        )
    return (
        ChunkSpec("q", pair(("rmsnorm",), "B_q", "A_q"), t * d),
        ChunkSpec("k", pair((), "B_k", "A_k"), t * d),
        ChunkSpec("v", pair((), "B_v", "A_v"), t * d),
        ChunkSpec("o", pair(("attention",), "B_o", "A_o"), t * d),
        ChunkSpec("gate", pair(("residual-add", "rmsnorm"), "B_gate", "A_gate"), t * d_ff),
        ChunkSpec("up", pair((), "B_up", "A_up"), t * d_ff),
        ChunkSpec("down", pair(("swiglu",), "B_down", "A_down"), t * d),
    )


def _btp_chunks(
    cfg: ModelConfig, shape: RunShape, variant: Variant, grouping: bool, norm_mode: NormMode
) -> tuple[ChunkSpec, ...]:
    t = shape.tokens
    r = cfg.r or 0
    rider = t if norm_mode is NormMode.ONLINE else 0
    gate_op = {"svd": (), "cola": ("crossgate",), "lax": ("elementwise",)}[variant.value]
    norm_op = "rmsnorm[sharded-d]"
    if grouping:
        return (
            ChunkSpec("qkv", (norm_op, "gemm[B_qkv row-d]"), 3 * t * r, rider),
            ChunkSpec(
                "o",
                gate_op + ("gemm[A_qkv col-d batched]", "attention[head-sharded]", "gemm[B_o row-d]"),
                t * r,
            ),
            ChunkSpec(
                "gate_up",
                gate_op + ("gemm[A_o col-d]", "residual-add", norm_op, "gemm[B_gate+up row-d]"),
                2 * t * r,
                rider,
            ),
            ChunkSpec(
                "down",
                gate_op + ("gemm[A_gate+up col-d_ff batched]", "swiglu", "gemm[B_down row-d_ff]"),
                t * r,
            ),
        )
    return (
        ChunkSpec("q", (norm_op, "gemm[B_q row-d]"), t * r, rider),
        ChunkSpec("k", ("gemm[B_k row-d]",), t * r),
        ChunkSpec("v", ("gemm[B_v row-d]",), t * r),
        ChunkSpec(
            "o",
            gate_op
            + ("gemm[A_q col-d]", "gemm[A_k col-d]", "gemm[A_v col-d]", "attention[head-sharded]", "gemm[B_o row-d]"),
            t * r,
        ),
        ChunkSpec(
            "gate",
            gate_op + ("gemm[A_o col-d]", "residual-add", norm_op, "gemm[B_gate row-d]"),
            t * r,
            rider,
        ),
        ChunkSpec("up", ("gemm[B_up row-d]",), t * r),
        ChunkSpec(
            "down",
            gate_op + ("gemm[A_gate col-d_ff]", "gemm[A_up col-d_ff]", "swiglu", "gemm[B_down row-d_ff]"),
            t * r,
        ),
    )


def plan(
    strategy: Strategy,
    cfg: ModelConfig,
    shape: RunShape,
    variant: Variant | None = None,
    *,
    online_norm: bool = False,
    grouping: bool = False,
    lowrank_ckpt: bool = False,
) -> ShardPlan:
    """Build and validate a sharding plan; PlanError names any violation."""
    if variant is None:
        variant = Variant.FULL_RANK if strategy is Strategy.FULL_RANK else Variant.SVD
    _validate(strategy, variant, cfg, shape)

    warnings: list[str] = []
    t = shape.tokens
    if strategy is Strategy.BOTTLENECK:
        norm_mode = NormMode.ONLINE if online_norm else NormMode.SYNC
        chunks = _btp_chunks(cfg, shape, variant, grouping, norm_mode)
        residual = "sharded-d"
        final_gather = t * cfg.d
        stats: tuple[PredictedCollective, ...] = ()
        if norm_mode is NormMode.SYNC:
            stats = (
                PredictedCollective("norm1-stat", "all-reduce", "block", t),
                PredictedCollective("norm2-stat", "all-reduce", "block", t),
            )
    else:
        if online_norm:
            warnings.append(
                f"online rmsnorm has no sharded norm input under the {strategy.value} "
                "strategy; falling back to synchronous (replicated) normalization"
            )
        norm_mode = NormMode.REPLICATED
        stats = ()
        residual = "replicated"
        final_gather = 0
        if strategy is Strategy.FULL_RANK:
            chunks = _full_rank_chunks(cfg, shape, grouping)
        else:
            chunks = _vanilla_chunks(cfg, shape, variant, grouping)

    if lowrank_ckpt and strategy is Strategy.FULL_RANK:
        warnings.append("low-rank checkpointing has no low-rank boundaries under full-rank; ignored")
        lowrank_ckpt = False

    _check_chunk_safety(chunks, norm_mode, cfg, shape)
    return ShardPlan(
        strategy=strategy,
        variant=variant,
        cfg=cfg,
        shape=shape,
        norm_mode=norm_mode,
        grouping=grouping,
        lowrank_ckpt=lowrank_ckpt,
        chunks=chunks,
        stat_collectives=stats,
        residual_layout=residual,
        final_gather_elements=final_gather,
        warnings=tuple(warnings),
    )


def apply_grouping(pl: ShardPlan) -> ShardPlan:
    """Re-plan with shared-input down-paths fused and up-paths batched.

    Volume is preserved exactly; GEMM launch count strictly drops for every
    strategy, and collective count strictly drops for vanilla and btp (their
    parallel boundary all-reduces coalesce). Full-rank keeps its two
    collectives, there is nothing to merge.
    """
    if pl.grouping:
        return pl
    return plan(
        pl.strategy,
        pl.cfg,
        pl.shape,
        pl.variant,
        online_norm=pl.norm_mode is NormMode.ONLINE,
        grouping=True,
        lowrank_ckpt=pl.lowrank_ckpt,
    )


def enumerate_collectives(pl: ShardPlan, model_tail: bool = False) -> list[PredictedCollective]:
    """Static prediction of one forward pass's collectives, in execution order."""
    out: list[PredictedCollective] = []
    stats = {p.chunk_id: p for p in pl.stat_collectives}
    first_mlp = "gate_up" if pl.grouping else "gate"
    for chunk in pl.chunks:
        if chunk.chunk_id in ("q", "qkv") and "norm1-stat" in stats:
            out.append(stats["norm1-stat"])
        if chunk.chunk_id == first_mlp and "norm2-stat" in stats:
            out.append(stats["norm2-stat"])
        extras = (("fused-stat", chunk.rider_elements),) if chunk.rider_elements else ()
        out.append(
            PredictedCollective(chunk.chunk_id, chunk.kind, "block", chunk.payload_elements, extras)
        )
    if model_tail and pl.final_gather_elements:
        out.append(
            PredictedCollective("final-gather", "all-gather", "boundary", pl.final_gather_elements)
        )
    return out


def describe(pl: ShardPlan) -> str:
    """Stable one-line-per-chunk text form, for golden tests and debugging."""
    cfg, shape = pl.cfg, pl.shape
    head = (
        f"plan strategy={pl.strategy.value} variant={pl.variant.value} "
        f"tp={shape.tp} b={shape.b} s={shape.s} d={cfg.d} d_ff={cfg.d_ff} "
        f"r={cfg.r if cfg.r is not None else '-'} heads={cfg.heads} "
        f"norm={pl.norm_mode.value} grouping={'on' if pl.grouping else 'off'} "
        f"residual={pl.residual_layout}"
    )
    lines = [head]
    for p in pl.stat_collectives:
        lines.append(f"stat {p.chunk_id}: all-reduce payload={p.elements} tag={p.tag}")
    for chunk in pl.chunks:
        rider = f" rider={chunk.rider_elements}" if chunk.rider_elements else ""
        lines.append(
            f"chunk {chunk.chunk_id}: ops={','.join(chunk.ops)} -> {chunk.kind} "
            f"payload={chunk.payload_elements}{rider}"
        )
    if pl.final_gather_elements:
        lines.append(
            f"boundary final-gather: all-gather payload={pl.final_gather_elements} tag=boundary"
        )
    for w in pl.warnings:
        lines.append(f"warning: {w}")
    return "\n".join(lines)


def col_shard_bounds(total: int, tp: int, rank: int) -> tuple[int, int]:
    width = total // tp
    return rank * width, (rank + 1) * width


def cola_pair_indices(r: int, tp: int, rank: int) -> np.ndarray:
    """Vanilla cola rank-shard: matching slices of both gate halves.

    The crossgate pairs index j with j + r/2, so each rank holds the same
    contiguous slice of both halves; needs (r/2) % tp == 0.
    """
    half = r // 2
    width = half // tp
    lo = rank * width
    return np.concatenate([np.arange(lo, lo + width), half + np.arange(lo, lo + width)])
