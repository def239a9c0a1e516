"""RMSNorm reference and its two sharded forms (sync statistic, fused online)."""

import numpy as np

from btpsim.norms import (
    local_rms,
    local_sumsq,
    online_rmsnorm_chunk,
    rmsnorm_reference,
    rmsnorm_values,
    sync_rmsnorm,
)
from btpsim.simulator import SimGroup, Trace
from btpsim.tensor import Tensor, mm_values, seeded_fill, tensor


def test_rmsnorm_worked_example():
    x = tensor([[3.0, 4.0]])
    gamma = tensor([1.0, 1.0])
    out = rmsnorm_reference(x, gamma, eps=0.0)
    rms = np.sqrt((9.0 + 16.0) / 2.0)
    assert abs(out.values[0, 0] - 3.0 / rms) < 1e-12
    assert abs(out.values[0, 1] - 4.0 / rms) < 1e-12
    assert abs(out.values[0, 0] - 0.8485281374238570) < 1e-12
    assert abs(out.values[0, 1] - 1.1313708498984760) < 1e-12


def test_rmsnorm_scale_invariance_at_eps_zero():
    x = seeded_fill((6, 16), 2)
    gamma = seeded_fill((16,), 3)
    base = rmsnorm_values(x.values, gamma.values, 0.0)
    scaled = rmsnorm_values(1000.0 * x.values, gamma.values, 0.0)
    assert np.max(np.abs(base - scaled)) < 1e-12


def _shards(arr, parts):
    return [np.ascontiguousarray(p) for p in np.split(arr, parts, axis=-1)]


def test_sync_rmsnorm_matches_reference():
    d, tp = 24, 4
    x = seeded_fill((10, d), 7)
    gamma = seeded_fill((d,), 8)
    trace = Trace()
    group = SimGroup(trace)
    normed = sync_rmsnorm(_shards(x.values, tp), _shards(gamma.values, tp), 1e-6, group)
    got = np.concatenate(normed, axis=-1)
    want = rmsnorm_values(x.values, gamma.values, 1e-6)
    assert np.max(np.abs(got - want)) < 1e-12
    assert len(trace.records) == 1
    rec = trace.records[0]
    assert rec.kind == "all-reduce"
    assert rec.tag == "block"
    assert rec.elements == 10  # one statistic per row
    assert rec.extras == ()


def test_online_chunk_matches_unsharded_product():
    d, n, tp = 24, 5, 3
    x = seeded_fill((8, d), 20)
    w = seeded_fill((d, n), 21)
    gamma = seeded_fill((d,), 22)
    trace = Trace()
    group = SimGroup(trace)
    got = online_rmsnorm_chunk(
        _shards(x.values, tp),
        [np.ascontiguousarray(p) for p in np.split(w.values, tp, axis=0)],
        _shards(gamma.values, tp),
        1e-6,
        group,
    )
    want = mm_values(rmsnorm_values(x.values, gamma.values, 1e-6), w.values)
    assert np.max(np.abs(got - want)) < 1e-9
    assert len(trace.records) == 1
    rec = trace.records[0]
    assert rec.kind == "all-reduce-coalesced"
    assert rec.elements == 8 * n
    assert rec.extras[0][0] == "fused-stat"
    assert rec.extras[0][1] == 8


def test_online_local_scale_cancels_exactly_at_eps_zero():
    """The local pre-divide and post-multiply cancel to rounding: 100 trials
    at eps=0 stay within 1e-12 of the plain normalize-then-multiply result."""
    d, n, tp = 16, 4, 4
    worst = 0.0
    for trial in range(100):
        x = seeded_fill((4, d), 1000 + trial)
        w = seeded_fill((d, n), 2000 + trial)
        gamma = seeded_fill((d,), 3000 + trial)
        got = online_rmsnorm_chunk(
            _shards(x.values, tp),
            [np.ascontiguousarray(p) for p in np.split(w.values, tp, axis=0)],
            _shards(gamma.values, tp),
            0.0,
            SimGroup(Trace()),
        )
        want = mm_values(rmsnorm_values(x.values, gamma.values, 0.0), w.values)
        worst = max(worst, float(np.max(np.abs(got - want))))
    assert worst < 1e-12, f"worst deviation {worst:.3e}"


def test_online_eps_cancellation_holds_for_any_eps():
    """The local epsilon enters both the divide and the multiply, so agreement
    with the sync form does not degrade as eps grows."""
    d, n, tp = 16, 4, 4
    x = seeded_fill((6, d), 77)
    w = seeded_fill((d, n), 78)
    gamma = seeded_fill((d,), 79)
    for eps in (0.0, 1e-12, 1e-8, 1e-6, 1e-2, 1.0):
        got = online_rmsnorm_chunk(
            _shards(x.values, tp),
            [np.ascontiguousarray(p) for p in np.split(w.values, tp, axis=0)],
            _shards(gamma.values, tp),
            eps,
            SimGroup(Trace()),
        )
        want = mm_values(rmsnorm_values(x.values, gamma.values, eps), w.values)
        assert np.max(np.abs(got - want)) < 1e-12, f"eps={eps}"


def test_local_statistics_helpers():
    x = seeded_fill((3, 8), 5).values
    ss = local_sumsq(x)
    assert ss.shape == (3, 1)
    assert np.allclose(ss[:, 0], np.sum(x * x, axis=1))
    rms = local_rms(ss, 8, 0.0)
    assert np.allclose(rms[:, 0], np.sqrt(np.mean(x * x, axis=1)))


def test_sync_vs_online_collective_shapes_differ():
    """Sync pays a standalone statistic collective; online rides the chunk."""
    d, n, tp = 16, 4, 2
    x = seeded_fill((5, d), 50)
    w = seeded_fill((d, n), 51)
    gamma = seeded_fill((d,), 52)

    sync_trace = Trace()
    shards = _shards(x.values, tp)
    g_shards = _shards(gamma.values, tp)
    normed = sync_rmsnorm(shards, g_shards, 1e-6, SimGroup(sync_trace))
    # the chunk GEMM after a sync norm still needs its own all-reduce
    w_rows = [np.ascontiguousarray(p) for p in np.split(w.values, tp, axis=0)]
    parts = [mm_values(nv, wv) for nv, wv in zip(normed, w_rows)]
    SimGroup(sync_trace).all_reduce(parts, "chunk")
    assert [r.kind for r in sync_trace.records] == ["all-reduce", "all-reduce"]

    online_trace = Trace()
    online_rmsnorm_chunk(shards, w_rows, g_shards, 1e-6, SimGroup(online_trace))
    assert [r.kind for r in online_trace.records] == ["all-reduce-coalesced"]
