"""Single-process SPMD execution of a sharding plan over tp simulated ranks.

Ranks run in a deterministic round-robin: every op is evaluated for rank 0,
then rank 1, and so on, and collectives are synchronous rendezvous points that
fold contributions in ascending rank order. There is no clock and no latency
model; the trace records logical payloads (one tensor's element count per
collective, no ring or tree factor), GEMM launches, and FLOP totals summed
over ranks.

Replicated tensors are computed once and shared by reference across rank
workspaces; that is bitwise-faithful because replicated SPMD computation is
identical on every rank. FLOP accounting still charges such work once per
rank.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import (
    EPS_DEFAULT,
    PROJECTIONS,
    DecoderBlockWeights,
    Tensor,
    Variant,
    lowrank_crossgate_values,
    sdpa_values,
)
from .norms import local_rms, local_sumsq, rmsnorm_values
from .plan import NormMode, PlanError, ShardPlan, Strategy, col_shard_bounds, cola_pair_indices
from .tensor import mm_values, swiglu_values

# Fixed per-element costs for non-GEMM work; only relative scale matters and
# the same table applies to every strategy.
EW_FLOPS = {
    "rmsnorm": 4,
    "swiglu": 5,
    "crossgate": 5,
    "add": 1,
    "softmax": 5,
    "scale": 1,
}


@dataclass(frozen=True)
class CollectiveRecord:
    kind: str                 # all-reduce | all-reduce-coalesced | all-gather
    chunk_id: str
    tag: str                  # block | fused-stat | boundary
    elements: int
    nbytes: int
    pass_tag: str             # forward | reforward
    extras: tuple[tuple[str, int, int], ...] = ()  # coalesced riders: (tag, elements, nbytes)

    def payloads(self) -> tuple[tuple[str, int, int], ...]:
        return ((self.tag, self.elements, self.nbytes),) + self.extras


@dataclass
class Trace:
    element_bytes: int = 2
    records: list[CollectiveRecord] = field(default_factory=list)
    gemm_launches: int = 0
    gemm_flops: int = 0
    elementwise_flops: int = 0

    def add_ew(self, kind: str, elements: int) -> None:
        self.elementwise_flops += EW_FLOPS[kind] * elements

    def volume(self, tag: str | None = None, pass_tag: str | None = None) -> tuple[int, int, int]:
        """(elements, bytes, calls) filtered by payload tag and pass.

        calls counts records carrying at least one matching payload; a
        coalesced record is one call.
        """
        elements = nbytes = calls = 0
        for rec in self.records:
            if pass_tag is not None and rec.pass_tag != pass_tag:
                continue
            hit = False
            for t, e, b in rec.payloads():
                if tag is None or t == tag:
                    elements += e
                    nbytes += b
                    hit = True
            if hit:
                calls += 1
        return elements, nbytes, calls

    def record_tuples(self, pass_tag: str | None = None) -> list[tuple]:
        """(chunk_id, kind, tag, elements, extras-as-(tag, elements)) per record."""
        out = []
        for rec in self.records:
            if pass_tag is not None and rec.pass_tag != pass_tag:
                continue
            extras = tuple((t, e) for t, e, _ in rec.extras)
            out.append((rec.chunk_id, rec.kind, rec.tag, rec.elements, extras))
        return out


def trace_volume(trace: Trace, tag: str | None = None, pass_tag: str | None = None) -> tuple[int, int, int]:
    return trace.volume(tag=tag, pass_tag=pass_tag)


def ring_transfer_elements(trace: Trace, tp: int, pass_tag: str | None = None) -> int:
    """Optional derived metric: 2*(tp-1)*payload elements summed over records.

    This is the total element traffic of a ring all-reduce across all ranks;
    it is kept strictly separate from the logical-payload convention used for
    volume validation.
    """
    total = 0
    for rec in trace.records:
        if pass_tag is not None and rec.pass_tag != pass_tag:
            continue
        for _, e, _ in rec.payloads():
            total += 2 * (tp - 1) * e
    return total


class SimGroup:
    """Rendezvous collectives over per-rank arrays, recording into a Trace."""

    def __init__(self, trace: Trace, pass_tag: str = "forward"):
        self.trace = trace
        self.pass_tag = pass_tag

    def _emit(self, kind, chunk_id, tag, elements, extras=()):
        eb = self.trace.element_bytes
        self.trace.records.append(
            CollectiveRecord(
                kind=kind,
                chunk_id=chunk_id,
                tag=tag,
                elements=elements,
                nbytes=elements * eb,
                pass_tag=self.pass_tag,
                extras=tuple((t, e, e * eb) for t, e in extras),
            )
        )

    @staticmethod
    def _fold(per_rank: list[np.ndarray]) -> np.ndarray:
        out = per_rank[0].copy()
        for arr in per_rank[1:]:
            if arr.shape != out.shape:
                raise ValueError("all-reduce operands must share a shape")
            out = out + arr
        return out

    def all_reduce(self, per_rank: list[np.ndarray], chunk_id: str, tag: str = "block") -> np.ndarray:
        """Elementwise sum folded in ascending rank order; emits one record.

        A single-rank group still emits a record (the payload is the logical
        boundary tensor, independent of tp).
        """
        out = self._fold(per_rank)
        self._emit("all-reduce", chunk_id, tag, int(out.size))
        return out

    def all_reduce_coalesced(
        self,
        mains: list[np.ndarray],
        stats: list[np.ndarray],
        chunk_id: str,
        tag: str = "block",
        stat_tag: str = "fused-stat",
    ) -> tuple[np.ndarray, np.ndarray]:
        """Two buffers reduced under one record; the stat rides the main payload."""
        main_out = self._fold(mains)
        stat_out = self._fold(stats)
        self._emit(
            "all-reduce-coalesced",
            chunk_id,
            tag,
            int(main_out.size),
            extras=((stat_tag, int(stat_out.size)),),
        )
        return main_out, stat_out

    def all_gather(self, per_rank: list[np.ndarray], chunk_id: str, tag: str = "boundary", axis: int = -1) -> np.ndarray:
        out = np.concatenate(per_rank, axis=axis)
        self._emit("all-gather", chunk_id, tag, int(out.size))
        return out


@dataclass
class SimResult:
    y: Tensor
    h_cur: dict[str, Tensor] | None
    trace: Trace
    workspaces: list[dict[str, np.ndarray]]
    plan: ShardPlan


def _gemm_ranks(trace: Trace, pairs: list[tuple[np.ndarray, np.ndarray]]) -> list[np.ndarray]:
    """One logical GEMM launch evaluated for every rank; flops summed over ranks."""
    outs = []
    for a, b in pairs:
        outs.append(mm_values(a, b))
        trace.gemm_flops += 2 * a.shape[0] * b.shape[1] * a.shape[1]
    trace.gemm_launches += 1
    return outs


def _gemm_ranks_batched(trace: Trace, per_rank: list[list[tuple[np.ndarray, np.ndarray]]]) -> list[list[np.ndarray]]:
    """Batched GEMM: several independent pairs per rank under one launch."""
    outs = []
    for pairs in per_rank:
        rank_outs = []
        for a, b in pairs:
            rank_outs.append(mm_values(a, b))
            trace.gemm_flops += 2 * a.shape[0] * b.shape[1] * a.shape[1]
        outs.append(rank_outs)
    trace.gemm_launches += 1
    return outs


def _sdpa_sharded(trace: Trace, q_sh, k_sh, v_sh, b, s, heads_per_rank, head_dim):
    """Head-sharded attention: each rank runs its own head slice."""
    outs = []
    probs_elems = 0
    for qr, kr, vr in zip(q_sh, k_sh, v_sh):
        out, fl = sdpa_values(qr, kr, vr, b, s, heads_per_rank, head_dim)
        trace.gemm_flops += fl
        probs_elems += b * heads_per_rank * s * s
        outs.append(out)
    trace.gemm_launches += 2
    trace.add_ew("softmax", probs_elems)
    trace.add_ew("scale", probs_elems)
    return outs


def _sdpa_replicated(trace: Trace, qv, kv, vv, b, s, heads, head_dim, tp):
    """Replicated attention (vanilla): every rank redundantly runs all heads."""
    out, fl = sdpa_values(qv, kv, vv, b, s, heads, head_dim)
    trace.gemm_flops += fl * tp
    trace.gemm_launches += 2
    probs_elems = b * heads * s * s
    trace.add_ew("softmax", probs_elems * tp)
    trace.add_ew("scale", probs_elems * tp)
    return out


def _variant_a_input(pl: ShardPlan, trace: Trace, name: str, z: np.ndarray, h_prev, replicated_ranks: int):
    """What the up-factor consumes, given the reduced rank-r tensor z.

    Returns (a_input, h_cur, distinct) where distinct says whether a_input is
    a new tensor (cola gate, lax merge) or z itself (svd).
    """
    variant = pl.variant
    if variant is Variant.SVD:
        return z, None, False
    if variant is Variant.COLA:
        out = lowrank_crossgate_values(z)
        trace.add_ew("crossgate", z.size * replicated_ranks)
        return out, None, True
    # lax: h_cur is the fresh low-rank projection, before the merge
    h_cur = z
    merged = z if h_prev is None else z + h_prev
    if h_prev is not None:
        trace.add_ew("add", z.size * replicated_ranks)
    return merged, h_cur, h_prev is not None


def execute_forward(
    pl: ShardPlan,
    block: DecoderBlockWeights,
    x: Tensor,
    h_prev: dict[str, Tensor] | None = None,
    *,
    eps: float = EPS_DEFAULT,
    model_tail: bool = False,
    trace: Trace | None = None,
) -> SimResult:
    """Run one block forward under the plan; returns the gathered logical output.

    The oracle contract: the gathered y (and the lax h bundle) matches
    reference_forward on the same block and input within float64 reassociation
    error. h_prev is given logically ([b, s, r] per projection); sharding it
    is the simulator's job.
    """
    if block.variant is not pl.variant:
        raise PlanError(f"plan variant {pl.variant.value} != block variant {block.variant.value}")
    if x.values.ndim != 3 or x.shape[2] != pl.cfg.d:
        raise PlanError(f"x must be [b, s, d={pl.cfg.d}], got {x.shape}")
    if (x.shape[0], x.shape[1]) != (pl.shape.b, pl.shape.s):
        raise PlanError(f"x batch/seq {x.shape[:2]} disagrees with plan shape")
    if trace is None:
        trace = Trace(element_bytes=x.element_bytes)
    group = SimGroup(trace)
    b, s, d = x.shape
    xv = x.values.reshape(b * s, d)
    hp = None
    if block.variant is Variant.LAX and h_prev is not None:
        hp = {k: v.values.reshape(b * s, pl.cfg.r) for k, v in h_prev.items()}

    if pl.strategy is Strategy.FULL_RANK:
        y2d, ws = _forward_full_rank(pl, block, xv, trace, group, eps)
        h_cur = None
    elif pl.strategy is Strategy.VANILLA:
        y2d, h2d, ws = _forward_vanilla(pl, block, xv, hp, trace, group, eps)
        h_cur = h2d
    else:
        y2d, h2d, ws = _forward_btp(pl, block, xv, hp, trace, group, eps, model_tail)
        h_cur = h2d

    y = Tensor(y2d.reshape(b, s, d), x.element_bytes)
    h_out = None
    if h_cur is not None:
        h_out = {
            k: Tensor(v.reshape(b, s, pl.cfg.r), x.element_bytes) for k, v in h_cur.items()
        }
    return SimResult(y=y, h_cur=h_out, trace=trace, workspaces=ws, plan=pl)


# ---------------------------------------------------------------------------
# full-rank strategy: column/row sharded full matrices, replicated residual


def _forward_full_rank(pl, block, xv, trace, group, eps):
    cfg, shape = pl.cfg, pl.shape
    tp, t, d, d_ff = shape.tp, shape.tokens, cfg.d, cfg.d_ff
    W = {k: v.values for k, v in block.full.items()}
    d_slices = [col_shard_bounds(d, tp, r) for r in range(tp)]
    ff_slices = [col_shard_bounds(d_ff, tp, r) for r in range(tp)]
    ws: list[dict[str, np.ndarray]] = [dict() for _ in range(tp)]

    def put_repl(name, arr):
        for r in range(tp):
            ws[r][name] = arr

    def put_shard(name, arrs):
        for r in range(tp):
            ws[r][name] = arrs[r]

    put_repl("x", xv)
    n1 = rmsnorm_values(xv, block.gamma1.values, eps)
    trace.add_ew("rmsnorm", t * d * tp)
    put_repl("n1", n1)

    if pl.grouping:
        parts = [
            np.concatenate([W[n][lo:hi, :] for n in ("q", "k", "v")], axis=0).T
            for lo, hi in d_slices
        ]
        fused = _gemm_ranks(trace, [(n1, p) for p in parts])
        q_sh, k_sh, v_sh = zip(*(np.split(f, 3, axis=1) for f in fused))
        q_sh, k_sh, v_sh = list(q_sh), list(k_sh), list(v_sh)
    else:
        q_sh = _gemm_ranks(trace, [(n1, W["q"][lo:hi, :].T) for lo, hi in d_slices])
        k_sh = _gemm_ranks(trace, [(n1, W["k"][lo:hi, :].T) for lo, hi in d_slices])
        v_sh = _gemm_ranks(trace, [(n1, W["v"][lo:hi, :].T) for lo, hi in d_slices])
    put_shard("q", q_sh)
    put_shard("k", k_sh)
    put_shard("v", v_sh)

    attn_sh = _sdpa_sharded(trace, q_sh, k_sh, v_sh, shape.b, shape.s, cfg.heads // tp, cfg.head_dim)
    put_shard("attn", attn_sh)
    o_parts = _gemm_ranks(
        trace, [(attn_sh[r], W["o"][:, lo:hi].T) for r, (lo, hi) in enumerate(d_slices)]
    )
    o = group.all_reduce(o_parts, "attn")
    put_repl("o", o)
    x_mid = xv + o
    trace.add_ew("add", t * d * tp)
    put_repl("x_mid", x_mid)

    n2 = rmsnorm_values(x_mid, block.gamma2.values, eps)
    trace.add_ew("rmsnorm", t * d * tp)
    put_repl("n2", n2)
    if pl.grouping:
        parts = [
            np.concatenate([W[n][lo:hi, :] for n in ("gate", "up")], axis=0).T
            for lo, hi in ff_slices
        ]
        fused = _gemm_ranks(trace, [(n2, p) for p in parts])
        g_sh, u_sh = zip(*(np.split(f, 2, axis=1) for f in fused))
        g_sh, u_sh = list(g_sh), list(u_sh)
    else:
        g_sh = _gemm_ranks(trace, [(n2, W["gate"][lo:hi, :].T) for lo, hi in ff_slices])
        u_sh = _gemm_ranks(trace, [(n2, W["up"][lo:hi, :].T) for lo, hi in ff_slices])
    put_shard("gate", g_sh)
    put_shard("up", u_sh)
    act_sh = [swiglu_values(g, u) for g, u in zip(g_sh, u_sh)]
    trace.add_ew("swiglu", t * d_ff)
    put_shard("act", act_sh)
    m_parts = _gemm_ranks(
        trace, [(act_sh[r], W["down"][:, lo:hi].T) for r, (lo, hi) in enumerate(ff_slices)]
    )
    mlp = group.all_reduce(m_parts, "mlp")
    put_repl("mlp", mlp)
    y = x_mid + mlp
    trace.add_ew("add", t * d * tp)
    put_repl("y", y)
    return y, ws


# ---------------------------------------------------------------------------
# vanilla low-rank strategy: factor pairs sharded along r, replicated residual


def _vanilla_r_indices(pl) -> list[np.ndarray]:
    tp, r = pl.shape.tp, pl.cfg.r
    if pl.variant is Variant.COLA:
        return [cola_pair_indices(r, tp, rank) for rank in range(tp)]
    return [np.arange(*col_shard_bounds(r, tp, rank)) for rank in range(tp)]


def _forward_vanilla(pl, block, xv, hp, trace, group, eps):
    cfg, shape = pl.cfg, pl.shape
    tp, t, d, d_ff, r = shape.tp, shape.tokens, cfg.d, cfg.d_ff, cfg.r
    B = {k: v.values for k, v in block.down_factors.items()}
    A = {k: v.values for k, v in block.up_factors.items()}
    idxs = _vanilla_r_indices(pl)
    ws: list[dict[str, np.ndarray]] = [dict() for _ in range(tp)]
    h_out: dict[str, np.ndarray] = {}

    def put_repl(name, arr):
        for rk in range(tp):
            ws[rk][name] = arr

    def put_shard(name, arrs):
        for rk in range(tp):
            ws[rk][name] = arrs[rk]

    def variant_inputs(name, z_sh):
        """Per-rank up-factor inputs; local because shard layouts keep gate pairs
        and lax bundles rank-aligned."""
        if pl.variant is Variant.SVD:
            return z_sh
        if pl.variant is Variant.COLA:
            outs = []
            for z in z_sh:
                w = z.shape[1] // 2
                u, v = z[:, :w], z[:, w:]
                outs.append(np.concatenate([swiglu_values(u, v), swiglu_values(v, u)], axis=1))
            trace.add_ew("crossgate", t * r)
            put_shard(f"a_in_{name}", outs)
            return outs
        # lax
        h_out[name] = np.concatenate(z_sh, axis=1)
        if hp is None:
            return z_sh
        outs = [z + hp[name][:, idx] for z, idx in zip(z_sh, idxs)]
        trace.add_ew("add", t * r)
        put_shard(f"a_in_{name}", outs)
        return outs

    def down_gemm(names, inp):
        """Column-parallel over r; exact output shards, grouped into one launch
        when names has several entries."""
        if len(names) == 1:
            z = _gemm_ranks(trace, [(inp, B[names[0]][idx, :].T) for idx in idxs])
            return {names[0]: z}
        stacked = _gemm_ranks(
            trace,
            [(inp, np.concatenate([B[n][idx, :] for n in names], axis=0).T) for idx in idxs],
        )
        per_name = {n: [] for n in names}
        for out in stacked:
            for n, piece in zip(names, np.split(out, len(names), axis=1)):
                per_name[n].append(piece)
        return per_name

    def up_gemm(names, a_ins):
        """Row-parallel over r; batched into one launch when grouped."""
        if len(names) == 1:
            n = names[0]
            return {
                n: _gemm_ranks(
                    trace, [(a_ins[n][rk], A[n][:, idxs[rk]].T) for rk in range(tp)]
                )
            }
        per_rank = [
            [(a_ins[n][rk], A[n][:, idxs[rk]].T) for n in names] for rk in range(tp)
        ]
        outs = _gemm_ranks_batched(trace, per_rank)
        return {n: [outs[rk][i] for rk in range(tp)] for i, n in enumerate(names)}

    def pair_chunks(names, inp, chunk_id):
        """Full vanilla chunk(s): down, variant op, up, then one all-reduce
        (coalesced across names when grouped)."""
        z_by_name = down_gemm(names, inp)
        for n in names:
            put_shard(f"z_{n}", z_by_name[n])
        a_ins = {n: variant_inputs(n, z_by_name[n]) for n in names}
        parts = up_gemm(names, a_ins)
        if len(names) == 1:
            full = group.all_reduce(parts[names[0]], chunk_id)
            put_repl(names[0] + "_full", full)
            return {names[0]: full}
        fused = [np.concatenate([parts[n][rk] for n in names], axis=1) for rk in range(tp)]
        reduced = group.all_reduce(fused, chunk_id)
        widths = [A[n].shape[0] for n in names]
        pieces = np.split(reduced, np.cumsum(widths)[:-1], axis=1)
        out = {}
        for n, piece in zip(names, pieces):
            arr = np.ascontiguousarray(piece)
            put_repl(n + "_full", arr)
            out[n] = arr
        return out

    put_repl("x", xv)
    n1 = rmsnorm_values(xv, block.gamma1.values, eps)
    trace.add_ew("rmsnorm", t * d * tp)
    put_repl("n1", n1)

    if pl.grouping:
        qkv = pair_chunks(("q", "k", "v"), n1, "qkv")
    else:
        qkv = {}
        for n in ("q", "k", "v"):
            qkv.update(pair_chunks((n,), n1, n))

    attn = _sdpa_replicated(
        trace, qkv["q"], qkv["k"], qkv["v"], shape.b, shape.s, cfg.heads, cfg.head_dim, tp
    )
    put_repl("attn", attn)
    o = pair_chunks(("o",), attn, "o")["o"]
    x_mid = xv + o
    trace.add_ew("add", t * d * tp)
    put_repl("x_mid", x_mid)

    n2 = rmsnorm_values(x_mid, block.gamma2.values, eps)
    trace.add_ew("rmsnorm", t * d * tp)
    put_repl("n2", n2)
    if pl.grouping:
        gu = pair_chunks(("gate", "up"), n2, "gate_up")
    else:
        gu = {}
        for n in ("gate", "up"):
            gu.update(pair_chunks((n,), n2, n))
    act = swiglu_values(gu["gate"], gu["up"])
    trace.add_ew("swiglu", t * d_ff * tp)
    put_repl("act", act)
    mlp = pair_chunks(("down",), act, "down")["down"]
    y = x_mid + mlp
    trace.add_ew("add", t * d * tp)
    put_repl("y", y)
    return y, (h_out if pl.variant is Variant.LAX else None), ws


# ---------------------------------------------------------------------------
# btp strategy: rank-r chunk boundaries, residual sharded along d


def _forward_btp(pl, block, xv, hp, trace, group, eps, model_tail):
    cfg, shape = pl.cfg, pl.shape
    tp, t, d, d_ff, r = shape.tp, shape.tokens, cfg.d, cfg.d_ff, cfg.r
    B = {k: v.values for k, v in block.down_factors.items()}
    A = {k: v.values for k, v in block.up_factors.items()}
    d_slices = [col_shard_bounds(d, tp, rk) for rk in range(tp)]
    ff_slices = [col_shard_bounds(d_ff, tp, rk) for rk in range(tp)]
    online = pl.norm_mode is NormMode.ONLINE
    ws: list[dict[str, np.ndarray]] = [dict() for _ in range(tp)]
    h_out: dict[str, np.ndarray] = {}

    def put_repl(name, arr):
        for rk in range(tp):
            ws[rk][name] = arr

    def put_shard(name, arrs):
        for rk in range(tp):
            ws[rk][name] = arrs[rk]

    x_sh = [np.ascontiguousarray(xv[:, lo:hi]) for lo, hi in d_slices]
    g1_sh = [block.gamma1.values[lo:hi] for lo, hi in d_slices]
    g2_sh = [block.gamma2.values[lo:hi] for lo, hi in d_slices]
    put_shard("x", x_sh)

    def norm_local(in_sh, g_sh, stat_chunk_id, rms_name):
        """Normalize the sharded residual. Sync exchanges the row sum of
        squares in a standalone collective and normalizes exactly; online
        normalizes by the local RMS and defers the global correction to the
        next chunk boundary (returning the local RMS factors)."""
        ss = [local_sumsq(a) for a in in_sh]
        if online:
            rms_loc = [local_rms(ss[rk], in_sh[rk].shape[1], eps) for rk in range(tp)]
            normed = [(a * g) / rl for a, g, rl in zip(in_sh, g_sh, rms_loc)]
            trace.add_ew("rmsnorm", t * d)
            return normed, (ss, rms_loc)
        ss_tot = group.all_reduce(ss, stat_chunk_id, tag="block")
        rms_g = np.sqrt(ss_tot / d + eps)
        put_repl(rms_name, rms_g)
        normed = [(a * g) / rms_g for a, g in zip(in_sh, g_sh)]
        trace.add_ew("rmsnorm", t * d)
        return normed, None

    def down_chunks(names, in_sh, slices, norm_ctx):
        """Row-parallel down-factors ending the chunk(s) at all-reduces of
        [tokens, r] (grouped: one fused [tokens, len(names)*r]). Under the
        online norm the statistic rides the first (or fused) all-reduce and
        the global divide lands after reduction."""
        rms_g = None

        def correct(arr, ss_tot, width):
            nonlocal rms_g
            rms_g = np.sqrt(ss_tot / width + eps)
            return arr / rms_g

        if pl.grouping and len(names) > 1:
            parts = _gemm_ranks(
                trace,
                [
                    (in_sh[rk], np.concatenate([B[n][:, lo:hi] for n in names], axis=0).T)
                    for rk, (lo, hi) in enumerate(slices)
                ],
            )
            chunk_id = "qkv" if names[0] == "q" else "gate_up"
            if norm_ctx is not None:
                ss, rms_loc = norm_ctx
                parts = [p * rl for p, rl in zip(parts, rms_loc)]
                fused, ss_tot = group.all_reduce_coalesced(parts, ss, chunk_id)
                fused = correct(fused, ss_tot, d)
            else:
                fused = group.all_reduce(parts, chunk_id)
            pieces = np.split(fused, len(names), axis=1)
            return {n: np.ascontiguousarray(p) for n, p in zip(names, pieces)}, rms_g

        out = {}
        for i, n in enumerate(names):
            parts = _gemm_ranks(
                trace,
                [(in_sh[rk], B[n][:, lo:hi].T) for rk, (lo, hi) in enumerate(slices)],
            )
            if norm_ctx is not None:
                ss, rms_loc = norm_ctx
                parts = [p * rl for p, rl in zip(parts, rms_loc)]
                if i == 0:
                    reduced, ss_tot = group.all_reduce_coalesced(parts, ss, n)
                    out[n] = correct(reduced, ss_tot, d)
                else:
                    out[n] = group.all_reduce(parts, n) / rms_g
            else:
                out[n] = group.all_reduce(parts, n)
        return out, rms_g

    def up_inputs(names, z_by_name):
        a_ins = {}
        for n in names:
            put_repl(f"z_{n}", z_by_name[n])
            a_in, h_cur, distinct = _variant_a_input(
                pl, trace, n, z_by_name[n], hp[n] if hp is not None else None, tp
            )
            if h_cur is not None:
                h_out[n] = h_cur
            if distinct:
                put_repl(f"a_in_{n}", a_in)
            a_ins[n] = a_in
        return a_ins

    def up_gemms(names, a_ins, slices):
        """Column-parallel up-factors opening the next chunk; batched into one
        launch when grouped (distinct inputs, so fusing weights is not
        possible, batching is)."""
        if pl.grouping and len(names) > 1:
            per_rank = [
                [(a_ins[n], A[n][lo:hi, :].T) for n in names] for lo, hi in slices
            ]
            outs = _gemm_ranks_batched(trace, per_rank)
            return {n: [outs[rk][i] for rk in range(len(slices))] for i, n in enumerate(names)}
        return {
            n: _gemm_ranks(trace, [(a_ins[n], A[n][lo:hi, :].T) for lo, hi in slices])
            for n in names
        }

    # attention half
    n1, norm_ctx = norm_local(x_sh, g1_sh, "norm1-stat", "norm1-rms")
    put_shard("n1", n1)
    z_qkv, _ = down_chunks(("q", "k", "v"), n1, d_slices, norm_ctx)
    a_ins = up_inputs(("q", "k", "v"), z_qkv)
    qkv_sh = up_gemms(("q", "k", "v"), a_ins, d_slices)
    put_shard("q", qkv_sh["q"])
    put_shard("k", qkv_sh["k"])
    put_shard("v", qkv_sh["v"])
    attn_sh = _sdpa_sharded(
        trace, qkv_sh["q"], qkv_sh["k"], qkv_sh["v"], shape.b, shape.s, cfg.heads // tp, cfg.head_dim
    )
    put_shard("attn", attn_sh)
    z_o, _ = down_chunks(("o",), attn_sh, d_slices, None)
    a_ins_o = up_inputs(("o",), z_o)
    o_sh = up_gemms(("o",), a_ins_o, d_slices)["o"]
    put_shard("o", o_sh)
    x_mid = [xs + os for xs, os in zip(x_sh, o_sh)]
    trace.add_ew("add", t * d)
    put_shard("x_mid", x_mid)

    # mlp half
    n2, norm_ctx2 = norm_local(x_mid, g2_sh, "norm2-stat", "norm2-rms")
    put_shard("n2", n2)
    z_gu, _ = down_chunks(("gate", "up"), n2, d_slices, norm_ctx2)
    a_ins_gu = up_inputs(("gate", "up"), z_gu)
    gu_sh = up_gemms(("gate", "up"), a_ins_gu, ff_slices)
    put_shard("gate", gu_sh["gate"])
    put_shard("up", gu_sh["up"])
    act_sh = [swiglu_values(g, u) for g, u in zip(gu_sh["gate"], gu_sh["up"])]
    trace.add_ew("swiglu", t * d_ff)
    put_shard("act", act_sh)
    z_down, _ = down_chunks(("down",), act_sh, ff_slices, None)
    a_ins_d = up_inputs(("down",), z_down)
    mlp_sh = up_gemms(("down",), a_ins_d, d_slices)["down"]
    put_shard("mlp", mlp_sh)
    y_sh = [xm + ms for xm, ms in zip(x_mid, mlp_sh)]
    trace.add_ew("add", t * d)
    put_shard("y", y_sh)

    if model_tail:
        y = group.all_gather(y_sh, "final-gather", tag="boundary", axis=1)
    else:
        y = np.concatenate(y_sh, axis=1)
    return y, (h_out if pl.variant is Variant.LAX else None), ws


# ---------------------------------------------------------------------------
# re-forward sweeps (checkpointing support)

CKPT_STORED = {
    Strategy.VANILLA: ("x",) + tuple(f"z_{n}" for n in PROJECTIONS),
    Strategy.BOTTLENECK: ("x",) + tuple(f"z_{n}" for n in PROJECTIONS),
}
# sync-mode btp additionally stores the tiny global norm statistics so the
# re-forward never re-runs the statistic exchange
CKPT_STORED_SYNC_EXTRA = ("norm1-rms", "norm2-rms")


def ckpt_stored_names(pl: ShardPlan) -> tuple[str, ...]:
    if pl.strategy not in CKPT_STORED:
        raise PlanError("low-rank checkpointing needs a low-rank strategy")
    names = CKPT_STORED[pl.strategy]
    if pl.strategy is Strategy.BOTTLENECK and pl.norm_mode is NormMode.SYNC:
        names = names + CKPT_STORED_SYNC_EXTRA
    return names


def reforward(pl: ShardPlan, block: DecoderBlockWeights, result: SimResult, hp_logical, eps: float) -> dict[str, bool]:
    """Recompute every non-stored workspace tensor from the checkpoint set.

    Returns name -> bitwise-equal flag against the original forward. All
    collectives emitted here carry pass=reforward; under btp there are none,
    under vanilla the chunk-boundary reductions between stored low-rank
    tensors must re-run.
    """
    trace = result.trace
    group = SimGroup(trace, pass_tag="reforward")
    ws = result.workspaces
    tp = pl.shape.tp
    hp = None
    if pl.variant is Variant.LAX and hp_logical is not None:
        hp = {k: v.values.reshape(pl.shape.tokens, pl.cfg.r) for k, v in hp_logical.items()}
    if pl.strategy is Strategy.VANILLA:
        recomputed = _reforward_vanilla(pl, block, ws, hp, trace, group, eps)
    elif pl.strategy is Strategy.BOTTLENECK:
        recomputed = _reforward_btp(pl, block, ws, hp, trace, group, eps)
    else:
        raise PlanError("re-forward needs a low-rank strategy")
    checks = {}
    for name, value in recomputed.items():
        if isinstance(value, list):
            checks[name] = all(
                np.array_equal(v, ws[rk][name]) for rk, v in enumerate(value)
            )
        else:
            checks[name] = np.array_equal(value, ws[0][name])
    return checks


def _reforward_vanilla(pl, block, ws, hp, trace, group, eps):
    cfg, shape = pl.cfg, pl.shape
    tp, t, d, d_ff, r = shape.tp, shape.tokens, cfg.d, cfg.d_ff, cfg.r
    A = {k: v.values for k, v in block.up_factors.items()}
    idxs = _vanilla_r_indices(pl)
    xv = ws[0]["x"]
    z = {n: [ws[rk][f"z_{n}"] for rk in range(tp)] for n in PROJECTIONS}
    out: dict[str, object] = {}

    def variant_inputs(name):
        if pl.variant is Variant.SVD:
            return z[name]
        if pl.variant is Variant.COLA:
            pieces = []
            for arr in z[name]:
                w = arr.shape[1] // 2
                u, v = arr[:, :w], arr[:, w:]
                pieces.append(np.concatenate([swiglu_values(u, v), swiglu_values(v, u)], axis=1))
            trace.add_ew("crossgate", t * r)
            out[f"a_in_{name}"] = pieces
            return pieces
        if hp is None:
            return z[name]
        pieces = [arr + hp[name][:, idx] for arr, idx in zip(z[name], idxs)]
        trace.add_ew("add", t * r)
        out[f"a_in_{name}"] = pieces
        return pieces

    def rebuild_full(names, chunk_id):
        a_ins = {n: variant_inputs(n) for n in names}
        if pl.grouping and len(names) > 1:
            per_rank = [
                [(a_ins[n][rk], A[n][:, idxs[rk]].T) for n in names] for rk in range(tp)
            ]
            outs = _gemm_ranks_batched(trace, per_rank)
            fused = [np.concatenate(outs[rk], axis=1) for rk in range(tp)]
            reduced = group.all_reduce(fused, chunk_id)
            widths = [A[n].shape[0] for n in names]
            pieces = np.split(reduced, np.cumsum(widths)[:-1], axis=1)
            fulls = {n: np.ascontiguousarray(p) for n, p in zip(names, pieces)}
        else:
            fulls = {}
            for n in names:
                parts = _gemm_ranks(
                    trace, [(a_ins[n][rk], A[n][:, idxs[rk]].T) for rk in range(tp)]
                )
                fulls[n] = group.all_reduce(parts, n)
        for n in names:
            out[n + "_full"] = fulls[n]
        return fulls

    n1 = rmsnorm_values(xv, block.gamma1.values, eps)
    trace.add_ew("rmsnorm", t * d * tp)
    out["n1"] = n1
    if pl.grouping:
        qkv = rebuild_full(("q", "k", "v"), "qkv")
    else:
        qkv = {}
        for n in ("q", "k", "v"):
            qkv.update(rebuild_full((n,), n))
    attn = _sdpa_replicated(
        trace, qkv["q"], qkv["k"], qkv["v"], shape.b, shape.s, cfg.heads, cfg.head_dim, tp
    )
    out["attn"] = attn
    o = rebuild_full(("o",), "o")["o"]
    x_mid = xv + o
    trace.add_ew("add", t * d * tp)
    out["x_mid"] = x_mid
    n2 = rmsnorm_values(x_mid, block.gamma2.values, eps)
    trace.add_ew("rmsnorm", t * d * tp)
    out["n2"] = n2
    if pl.grouping:
        gu = rebuild_full(("gate", "up"), "gate_up")
    else:
        gu = {}
        for n in ("gate", "up"):
            gu.update(rebuild_full((n,), n))
    act = swiglu_values(gu["gate"], gu["up"])
    trace.add_ew("swiglu", t * d_ff * tp)
    out["act"] = act
    # the down chunk's up-factor input is the stored z_down; nothing further
    # is needed for the backward sweep, so no collective fires here
    variant_inputs("down")
    return out


def _reforward_btp(pl, block, ws, hp, trace, group, eps):
    cfg, shape = pl.cfg, pl.shape
    tp, t, d, d_ff, r = shape.tp, shape.tokens, cfg.d, cfg.d_ff, cfg.r
    A = {k: v.values for k, v in block.up_factors.items()}
    d_slices = [col_shard_bounds(d, tp, rk) for rk in range(tp)]
    ff_slices = [col_shard_bounds(d_ff, tp, rk) for rk in range(tp)]
    online = pl.norm_mode is NormMode.ONLINE
    x_sh = [ws[rk]["x"] for rk in range(tp)]
    g1_sh = [block.gamma1.values[lo:hi] for lo, hi in d_slices]
    g2_sh = [block.gamma2.values[lo:hi] for lo, hi in d_slices]
    z = {n: ws[0][f"z_{n}"] for n in PROJECTIONS}
    out: dict[str, object] = {}

    def renorm(in_sh, g_sh, rms_name):
        # local statistics only; the sync-mode global rms was checkpointed
        if online:
            normed = []
            for arr, g in zip(in_sh, g_sh):
                rl = local_rms(local_sumsq(arr), arr.shape[1], eps)
                normed.append((arr * g) / rl)
            trace.add_ew("rmsnorm", t * d)
            return normed
        rms_g = ws[0][rms_name]
        trace.add_ew("rmsnorm", t * d)
        return [(arr * g) / rms_g for arr, g in zip(in_sh, g_sh)]

    def a_input(name):
        a_in, _, distinct = _variant_a_input(
            pl, trace, name, z[name], hp[name] if hp is not None else None, tp
        )
        if distinct:
            out[f"a_in_{name}"] = a_in
        return a_in

    def up(names, slices):
        a_ins = {n: a_input(n) for n in names}
        if pl.grouping and len(names) > 1:
            per_rank = [[(a_ins[n], A[n][lo:hi, :].T) for n in names] for lo, hi in slices]
            outs = _gemm_ranks_batched(trace, per_rank)
            return {n: [outs[rk][i] for rk in range(len(slices))] for i, n in enumerate(names)}
        return {
            n: _gemm_ranks(trace, [(a_ins[n], A[n][lo:hi, :].T) for lo, hi in slices])
            for n in names
        }

    out["n1"] = renorm(x_sh, g1_sh, "norm1-rms")
    qkv_sh = up(("q", "k", "v"), d_slices)
    out["q"], out["k"], out["v"] = qkv_sh["q"], qkv_sh["k"], qkv_sh["v"]
    attn_sh = _sdpa_sharded(
        trace, qkv_sh["q"], qkv_sh["k"], qkv_sh["v"], shape.b, shape.s, cfg.heads // tp, cfg.head_dim
    )
    out["attn"] = attn_sh
    o_sh = up(("o",), d_slices)["o"]
    out["o"] = o_sh
    x_mid = [xs + os for xs, os in zip(x_sh, o_sh)]
    trace.add_ew("add", t * d)
    out["x_mid"] = x_mid
    out["n2"] = renorm(x_mid, g2_sh, "norm2-rms")
    gu_sh = up(("gate", "up"), ff_slices)
    out["gate"], out["up"] = gu_sh["gate"], gu_sh["up"]
    act_sh = [swiglu_values(g, u) for g, u in zip(gu_sh["gate"], gu_sh["up"])]
    trace.add_ew("swiglu", t * d_ff)
    out["act"] = act_sh
    a_input("down")
    out["mlp"] = up(("down",), d_slices)["down"]
    return out
