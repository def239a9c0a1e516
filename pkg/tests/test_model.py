"""Block definition: presets, weight construction, reference forward oracle."""

import numpy as np
import pytest

from btpsim.model import (
    PRESETS,
    PROJECTIONS,
    ModelConfig,
    RunShape,
    Variant,
    build_block,
    lowrank_crossgate_values,
    preset,
    projection_dims,
    reference_forward,
    sdpa_values,
    seeded_h_prev,
    zero_h_prev,
)
from btpsim.tensor import DivisibilityError, Tensor, seeded_fill

TOY = ModelConfig(layers=2, heads=4, d=16, d_ff=40, r=4)


def test_preset_table():
    expect = {
        "1b": (24, 32, 2048, 5472, 512),
        "3b": (28, 24, 3072, 8192, 768),
        "7b": (32, 32, 4096, 11008, 1024),
        "13b": (40, 40, 5120, 13824, 1280),
        "30b": (36, 64, 8192, 22016, 2048),
    }
    assert set(PRESETS) == set(expect)
    for name, (layers, heads, d, d_ff, r) in expect.items():
        cfg = preset(name)
        assert (cfg.layers, cfg.heads, cfg.d, cfg.d_ff, cfg.r) == (layers, heads, d, d_ff, r)
    with pytest.raises(KeyError):
        preset("70b")


def test_config_validation():
    with pytest.raises(DivisibilityError):
        ModelConfig(layers=1, heads=3, d=16, d_ff=32)
    with pytest.raises(ValueError):
        ModelConfig(layers=0, heads=2, d=16, d_ff=32)
    cfg = ModelConfig(layers=1, heads=2, d=16, d_ff=40, r=4)
    assert cfg.head_dim == 8
    assert float(cfg.alpha) == 2.5
    assert float(cfg.beta) == 4.0


def test_projection_dims_cover_all_seven():
    dims = projection_dims(TOY)
    assert set(dims) == set(PROJECTIONS)
    assert dims["gate"] == (40, 16)
    assert dims["down"] == (16, 40)


def test_parameter_counts():
    d, d_ff, r = TOY.d, TOY.d_ff, TOY.r
    full = build_block(TOY, Variant.FULL_RANK, seed=0)
    assert full.linear_parameter_count() == 4 * d * d + 3 * d * d_ff
    for variant in (Variant.SVD, Variant.COLA, Variant.LAX):
        low = build_block(TOY, variant, seed=0)
        assert low.linear_parameter_count() == 11 * d * r + 3 * d_ff * r, variant


def test_build_block_deterministic_and_seed_sensitive():
    a = build_block(TOY, Variant.SVD, seed=9)
    b = build_block(TOY, Variant.SVD, seed=9)
    c = build_block(TOY, Variant.SVD, seed=10)
    for name in PROJECTIONS:
        assert np.array_equal(a.down_factors[name].values, b.down_factors[name].values)
        assert np.array_equal(a.up_factors[name].values, b.up_factors[name].values)
    assert not np.array_equal(a.down_factors["q"].values, c.down_factors["q"].values)


def test_cola_requires_even_rank():
    odd = ModelConfig(layers=1, heads=1, d=4, d_ff=8, r=3)
    with pytest.raises(DivisibilityError):
        build_block(odd, Variant.COLA, seed=0)


def test_crossgate_preserves_rank_and_swaps_symmetrically():
    z = seeded_fill((5, 8), 4).values
    out = lowrank_crossgate_values(z)
    assert out.shape == z.shape
    swapped = lowrank_crossgate_values(np.concatenate([z[:, 4:], z[:, :4]], axis=1))
    assert np.array_equal(out[:, :4], swapped[:, 4:])
    assert np.array_equal(out[:, 4:], swapped[:, :4])


def test_sdpa_single_position_returns_value_row():
    # with one key per head, softmax is exactly 1 and the output equals v
    q = seeded_fill((1, 8), 1).values
    k = seeded_fill((1, 8), 2).values
    v = seeded_fill((1, 8), 3).values
    out, flops = sdpa_values(q, k, v, b=1, s=1, heads=2, head_dim=4)
    assert np.array_equal(out, v)
    assert flops == 2 * (2 * 1 * 1 * 4 * 2)


def _sdpa_blas(qv, kv, vv, b, s, heads, head_dim):
    """Independent attention using numpy's own matmul."""
    q = qv.reshape(b, s, heads, head_dim).transpose(0, 2, 1, 3)
    k = kv.reshape(b, s, heads, head_dim).transpose(0, 2, 1, 3)
    v = vv.reshape(b, s, heads, head_dim).transpose(0, 2, 1, 3)
    scores = (q @ k.transpose(0, 1, 3, 2)) / np.sqrt(head_dim)
    scores -= scores.max(axis=-1, keepdims=True)
    probs = np.exp(scores)
    probs /= probs.sum(axis=-1, keepdims=True)
    out = probs @ v
    return out.transpose(0, 2, 1, 3).reshape(b * s, heads * head_dim)


def test_sdpa_matches_independent_blas_version():
    b, s, heads, head_dim = 2, 6, 4, 4
    q = seeded_fill((b * s, heads * head_dim), 11).values
    k = seeded_fill((b * s, heads * head_dim), 12).values
    v = seeded_fill((b * s, heads * head_dim), 13).values
    got, _ = sdpa_values(q, k, v, b, s, heads, head_dim)
    want = _sdpa_blas(q, k, v, b, s, heads, head_dim)
    assert np.max(np.abs(got - want)) < 1e-12


def _block_oracle_blas(block, x, h_prev, eps):
    """Independent full-block forward using numpy operators only."""
    cfg = block.cfg
    b, s, d = x.shape
    xv = x.values.reshape(b * s, d)

    def norm(v, gamma):
        return v * gamma.values / np.sqrt(np.mean(v * v, axis=-1, keepdims=True) + eps)

    def proj(name, inp):
        if block.variant is Variant.FULL_RANK:
            return inp @ block.full[name].values.T
        z = inp @ block.down_factors[name].values.T
        if block.variant is Variant.COLA:
            half = z.shape[1] // 2
            u, v = z[:, :half], z[:, half:]
            sig = lambda t: 1.0 / (1.0 + np.exp(-t))
            z = np.concatenate([u * sig(u) * v, v * sig(v) * u], axis=1)
        elif block.variant is Variant.LAX and h_prev is not None:
            z = z + h_prev[name].values.reshape(b * s, cfg.r)
        return z @ block.up_factors[name].values.T

    n1 = norm(xv, block.gamma1)
    q, k, v = proj("q", n1), proj("k", n1), proj("v", n1)
    attn = _sdpa_blas(q, k, v, b, s, cfg.heads, cfg.head_dim)
    x_mid = xv + proj("o", attn)
    n2 = norm(x_mid, block.gamma2)
    g, u = proj("gate", n2), proj("up", n2)
    act = g * (1.0 / (1.0 + np.exp(-g))) * u
    y = x_mid + proj("down", act)
    return y.reshape(b, s, d)


@pytest.mark.parametrize("variant", [Variant.FULL_RANK, Variant.SVD, Variant.COLA, Variant.LAX])
def test_reference_forward_matches_independent_blas_oracle(variant):
    shape = RunShape(b=2, s=8)
    block = build_block(TOY, variant, seed=21)
    x = seeded_fill((2, 8, TOY.d), 22)
    h_prev = seeded_h_prev(TOY, shape, 23) if variant is Variant.LAX else None
    y, h_cur = reference_forward(block, x, h_prev)
    want = _block_oracle_blas(block, x, h_prev, 1e-6)
    assert np.max(np.abs(y.values - want)) < 1e-9
    if variant is Variant.LAX:
        assert set(h_cur) == set(PROJECTIONS)
        # the bundle entry is the fresh down-projection, before the merge
        xv = x.values.reshape(16, TOY.d)
        n1 = xv * block.gamma1.values / np.sqrt(
            np.mean(xv * xv, axis=-1, keepdims=True) + 1e-6
        )
        want_hq = n1 @ block.down_factors["q"].values.T
        assert np.max(np.abs(h_cur["q"].values.reshape(16, TOY.r) - want_hq)) < 1e-9
    else:
        assert h_cur is None


def test_lax_with_zero_bundle_equals_svd():
    """Zero h_prev makes the merge a no-op, collapsing lax onto the plain
    factor pathway built from the same seed."""
    shape = RunShape(b=2, s=8)
    lax_block = build_block(TOY, Variant.LAX, seed=31)
    svd_block = build_block(TOY, Variant.SVD, seed=31)
    x = seeded_fill((2, 8, TOY.d), 32)
    y_lax, h_cur = reference_forward(lax_block, x, zero_h_prev(TOY, shape))
    y_svd, _ = reference_forward(svd_block, x, None)
    assert np.array_equal(y_lax.values, y_svd.values)
    assert set(h_cur) == set(PROJECTIONS)


def test_lax_bundle_feeds_next_layer():
    shape = RunShape(b=1, s=4)
    block = build_block(TOY, Variant.LAX, seed=41)
    x = seeded_fill((1, 4, TOY.d), 42)
    y1, h1 = reference_forward(block, x, None)
    y2_carried, _ = reference_forward(block, y1, h1)
    y2_fresh, _ = reference_forward(block, y1, None)
    assert not np.array_equal(y2_carried.values, y2_fresh.values)


def test_zero_weights_pass_input_through():
    dims = projection_dims(TOY)
    zero_w = {
        name: Tensor(np.zeros((dout, din)), 2) for name, (dout, din) in dims.items()
    }
    block = build_block(TOY, Variant.FULL_RANK, seed=0)
    block = type(block)(
        cfg=TOY,
        variant=Variant.FULL_RANK,
        full=zero_w,
        down_factors={},
        up_factors={},
        gamma1=block.gamma1,
        gamma2=block.gamma2,
    )
    x = seeded_fill((1, 4, TOY.d), 5)
    y, _ = reference_forward(block, x)
    assert np.array_equal(y.values, x.values)


def test_h_prev_builders():
    shape = RunShape(b=2, s=3)
    zeros_bundle = zero_h_prev(TOY, shape)
    assert set(zeros_bundle) == set(PROJECTIONS)
    assert all(v.shape == (2, 3, TOY.r) for v in zeros_bundle.values())
    assert all(v.values.sum() == 0.0 for v in zeros_bundle.values())
    seeded = seeded_h_prev(TOY, shape, 50)
    assert not np.array_equal(seeded["q"].values, seeded["k"].values)
    again = seeded_h_prev(TOY, shape, 50)
    assert all(np.array_equal(seeded[n].values, again[n].values) for n in PROJECTIONS)
