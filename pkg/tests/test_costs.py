"""Closed-form volumes and arithmetic intensity, cross-validated with traces."""

import itertools
from fractions import Fraction

import pytest

from btpsim.costs import (
    ai_matmul,
    costs,
    iter_volume,
    mlp_ai,
    tp_block_volume,
    volume_ratios,
)
from btpsim.model import ModelConfig, RunShape, Variant, build_block, preset
from btpsim.plan import Strategy, plan
from btpsim.simulator import execute_forward, trace_volume
from btpsim.tensor import seeded_fill

TOY = ModelConfig(layers=2, heads=4, d=16, d_ff=40, r=4)


def test_ai_matmul_worked_example():
    got = ai_matmul(4096, 1024, 4096, element_bytes=2)
    assert got == Fraction(2 * 4096 * 1024 * 4096, (4096 * 4096 + 4096 * 1024 + 4096 * 1024) * 2)
    assert abs(float(got) - 682.6666666666666) < 1e-9
    assert ai_matmul(2, 2, 2, element_bytes=1) == Fraction(16, 12)
    with pytest.raises(ValueError):
        ai_matmul(0, 2, 2)


def test_block_volume_formulas():
    shape = RunShape(b=2, s=8, tp=2)
    t = shape.tokens
    assert tp_block_volume(Strategy.FULL_RANK, TOY, shape) == 2 * t * TOY.d
    assert tp_block_volume(Strategy.VANILLA, TOY, shape) == 5 * t * TOY.d + 2 * t * TOY.d_ff
    assert tp_block_volume(Strategy.BOTTLENECK, TOY, shape) == 7 * t * TOY.r
    no_r = ModelConfig(layers=1, heads=4, d=16, d_ff=40)
    with pytest.raises(ValueError):
        tp_block_volume(Strategy.BOTTLENECK, no_r, shape)


def test_iter_volume_7b_values():
    cfg = preset("7b")
    shape = RunShape(b=4, s=4096, tp=4, p=4)
    assert iter_volume("dp-full", cfg, shape) == 6476005376
    assert iter_volume("dp-lowrank", cfg, shape) == 2558525440
    assert iter_volume("pp", cfg, shape) == 2 * 4 * 4 * 4096 * 4096
    t = 4 * 4096
    assert iter_volume("tp-full", cfg, shape) == 2 * 32 * 2 * t * 4096
    assert iter_volume("tp-vanilla", cfg, shape) == 2 * 32 * (5 * t * 4096 + 2 * t * 11008)
    assert iter_volume("tp-btp", cfg, shape) == 2 * 32 * 7 * t * 1024
    with pytest.raises(ValueError, match="unknown"):
        iter_volume("tp-zigzag", cfg, shape)


def test_dp_gradient_ratio_in_published_band():
    cfg = preset("7b")
    shape = RunShape(b=4, s=4096)
    ratio = Fraction(iter_volume("dp-full", cfg, shape), iter_volume("dp-lowrank", cfg, shape))
    assert Fraction(24, 10) <= ratio <= Fraction(26, 10)
    assert ratio == Fraction(772, 305)


def test_volume_ratios_exact_rationals():
    shape = RunShape(b=1, s=4)
    # alpha = 2.5, beta = 4
    r1 = volume_ratios(TOY, shape)
    assert r1["vanilla_over_full"] == Fraction(5)
    assert r1["full_over_btp"] == Fraction(8, 7)
    assert r1["vanilla_over_btp"] == Fraction(40, 7)
    # alpha = 4
    wide = ModelConfig(layers=1, heads=4, d=16, d_ff=64, r=4)
    r2 = volume_ratios(wide, shape)
    assert r2["vanilla_over_full"] == Fraction(13, 2)
    # ratios reproduce the formulas directly
    for cfg in (TOY, wide):
        rr = volume_ratios(cfg, shape)
        assert rr["vanilla_over_full"] == Fraction(
            tp_block_volume(Strategy.VANILLA, cfg, shape),
            tp_block_volume(Strategy.FULL_RANK, cfg, shape),
        )
        assert rr["vanilla_over_btp"] == Fraction(
            tp_block_volume(Strategy.VANILLA, cfg, shape),
            tp_block_volume(Strategy.BOTTLENECK, cfg, shape),
        )


def test_mlp_ai_7b_bands():
    cfg = preset("7b")
    shape = RunShape(b=4, s=4096, tp=4)
    ai_f = mlp_ai(Strategy.FULL_RANK, cfg, shape)
    ai_v = mlp_ai(Strategy.VANILLA, cfg, shape)
    ai_b = mlp_ai(Strategy.BOTTLENECK, cfg, shape)
    assert 2.3 <= float(ai_b / ai_v) <= 2.8
    assert 0.12 <= float(ai_v / ai_f) <= 0.22
    assert abs(float(ai_v) - 243.92) < 0.01
    assert abs(float(ai_b) - 638.06) < 0.01


def test_mlp_ai_advantage_monotone_over_grid():
    """btp's MLP arithmetic intensity beats vanilla's whenever beta > 1 and
    tp > 1, and the advantage grows with tp; swept over 1000+ points."""
    points = 0
    ds = (512, 1024, 2048, 4096)
    alphas = (Fraction(1), Fraction(3, 2), Fraction(5, 2), Fraction(4))
    betas = (2, 4, 8, 16)
    bss = ((1, 512), (2, 2048), (4, 1024), (8, 4096))
    tps = (2, 4, 8, 16)
    for d, alpha, beta, (b, s), tp in itertools.product(ds, alphas, betas, bss, tps):
        d_ff = int(alpha * d)
        if d % beta or Fraction(d_ff, d) != alpha:
            continue
        cfg = ModelConfig(layers=1, heads=1, d=d, d_ff=d_ff, r=d // beta)
        shape = RunShape(b=b, s=s, tp=tp)
        ai_v = mlp_ai(Strategy.VANILLA, cfg, shape)
        ai_b = mlp_ai(Strategy.BOTTLENECK, cfg, shape)
        assert ai_b > ai_v, (d, alpha, beta, b, s, tp)
        if tp > 2:
            prev = mlp_ai(Strategy.BOTTLENECK, cfg, RunShape(b=b, s=s, tp=tp // 2)) / mlp_ai(
                Strategy.VANILLA, cfg, RunShape(b=b, s=s, tp=tp // 2)
            )
            assert ai_b / ai_v > prev, "advantage must grow with tp"
        points += 1
    assert points >= 1000, points


def test_formula_matches_traced_volume():
    """Cross-validation: the closed form equals the simulator's counter exactly
    for the canonical plan of each strategy."""
    for strategy, variant in [
        (Strategy.FULL_RANK, Variant.FULL_RANK),
        (Strategy.VANILLA, Variant.SVD),
        (Strategy.BOTTLENECK, Variant.SVD),
    ]:
        for tp in (1, 2, 4):
            for b, s in ((1, 4), (2, 8)):
                shape = RunShape(b=b, s=s, tp=tp)
                v = None if strategy is Strategy.FULL_RANK else variant
                pl = plan(strategy, TOY, shape, v, online_norm=True)
                block = build_block(TOY, variant, seed=1)
                result = execute_forward(pl, block, seeded_fill((b, s, TOY.d), 2))
                traced = trace_volume(result.trace, tag="block")[0]
                assert traced == tp_block_volume(strategy, TOY, shape), (strategy, tp, b, s)


def test_costs_summary_structure():
    out = costs(TOY, RunShape(b=2, s=8, tp=2))
    assert out["alpha"] == {"exact": "5/2", "value": 2.5}
    assert out["beta"] == {"exact": "4/1", "value": 4.0}
    assert out["block_volume_elements"]["btp"] == 7 * 16 * TOY.r
    assert set(out["iter_volume_elements"]) == {
        "dp-full", "dp-lowrank", "pp", "tp-full", "tp-vanilla", "tp-btp",
    }
    no_r = ModelConfig(layers=1, heads=4, d=16, d_ff=40)
    out2 = costs(no_r, RunShape(b=2, s=8))
    assert out2["beta"] is None
    assert "btp" not in out2["block_volume_elements"]
    assert "dp-lowrank" not in out2["iter_volume_elements"]
