"""RMS normalization engines: reference, synchronized, and online fused-stat.

The sharded forms normalize a row vector that is split along its feature axis
across tp ranks. The synchronized form exchanges the per-row sum of squares in
a standalone collective before normalizing. The online form normalizes each
shard by its local RMS so the following GEMM sees well-scaled inputs, folds
the local RMS back in before the chunk's all-reduce, and divides once by the
global RMS afterwards; the sum-of-squares statistic rides that same
all-reduce, so no standalone collective is spent.

Identity used by the online form, per shard i of X with weight shard W_i:

    (X_i / rms(X)) @ W_i == ((X_i / rms(X_i)) @ W_i) * (rms(X_i) / rms(X))

The local rms cancels exactly (including its epsilon term), so the recovered
output matches the reference up to float64 rounding of the re-associated
partial sums, not merely to first order in epsilon.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, mm_values


def rmsnorm_reference(x: Tensor, gamma: Tensor, eps: float) -> Tensor:
    """Row-wise x * gamma / sqrt(mean(x^2) + eps) over the last axis."""
    ms = np.mean(x.values * x.values, axis=-1, keepdims=True)
    return Tensor((x.values * gamma.values) / np.sqrt(ms + eps), x.element_bytes)


def rmsnorm_values(xv: np.ndarray, gv: np.ndarray, eps: float) -> np.ndarray:
    ms = np.mean(xv * xv, axis=-1, keepdims=True)
    return (xv * gv) / np.sqrt(ms + eps)


def local_sumsq(xv: np.ndarray) -> np.ndarray:
    """Per-row sum of squares of a shard, shape [rows, 1]."""
    return np.sum(xv * xv, axis=-1, keepdims=True)


def local_rms(ss: np.ndarray, width: int, eps: float) -> np.ndarray:
    return np.sqrt(ss / width + eps)


def sync_rmsnorm(
    x_shards: list[np.ndarray],
    gamma_shards: list[np.ndarray],
    eps: float,
    group,
    chunk_id: str = "norm-stat",
) -> list[np.ndarray]:
    """Exact sharded RMSNorm with one standalone statistic all-reduce.

    Each rank contributes its per-row sum of squares; the reduced statistic
    yields the global RMS, and every rank then normalizes its own shard. The
    gathered result equals rmsnorm_reference up to rounding of the statistic
    reduction.
    """
    total_width = sum(s.shape[-1] for s in x_shards)
    ss_total = group.all_reduce([local_sumsq(s) for s in x_shards], chunk_id, tag="block")
    rms_global = np.sqrt(ss_total / total_width + eps)
    return [xv * gv / rms_global for xv, gv in zip(x_shards, gamma_shards)]


def online_rmsnorm_chunk(
    x_shards: list[np.ndarray],
    w_shards: list[np.ndarray],
    gamma_shards: list[np.ndarray],
    eps: float,
    group,
    chunk_id: str = "chunk",
) -> np.ndarray:
    """Fused sharded RMSNorm + row-split GEMM ending in one coalesced all-reduce.

    w_shards[i] has shape [d_local, n]: the row slice of the full weight that
    consumes shard i. Steps per rank: local RMS, local normalize and scale,
    GEMM, multiply the partial product by the local RMS (undoing the local
    divide exactly), then one all-reduce carrying (partial, sumsq). The global
    RMS divides the reduced product once. Returns the recovered product,
    identical on all ranks.
    """
    total_width = sum(s.shape[-1] for s in x_shards)
    partials = []
    stats = []
    for xv, wv, gv in zip(x_shards, w_shards, gamma_shards):
        ss = local_sumsq(xv)
        rms_loc = local_rms(ss, xv.shape[-1], eps)
        normed = (xv * gv) / rms_loc
        h = mm_values(normed, wv)
        partials.append(h * rms_loc)
        stats.append(ss)
    reduced, ss_total = group.all_reduce_coalesced(partials, stats, chunk_id)
    rms_global = np.sqrt(ss_total / total_width + eps)
    return reduced / rms_global
