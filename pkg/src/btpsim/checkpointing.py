"""Low-rank boundary checkpointing: keep block inputs plus the seven reduced
rank-r tensors, drop everything else, and re-materialize in one re-forward
sweep per block.

Memory is counted physically (summed over ranks, replicated storage charged
once per rank). The block output is excluded from footprints because it is
the next boundary's input and would double count.

The recompute cost proxy is arithmetic plus communication: re-forward FLOPs
plus a fixed FLOP-equivalent charge per ring-transferred element
(2*(tp-1)*payload per all-reduce). A FLOPs-only proxy inverts the comparison
between strategies, because the large re-forward GEMMs parallelize equally
well under both; what distinguishes them is that the bottleneck layout
re-forwards without any collective while the rank-sharded layout must re-run
its chunk-boundary reductions.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from fractions import Fraction

from .model import EPS_DEFAULT, DecoderBlockWeights, Tensor
from .plan import PlanError, ShardPlan, Strategy
from .simulator import (
    SimResult,
    ckpt_stored_names,
    execute_forward,
    reforward,
    ring_transfer_elements,
)

# conservative machine-balance factor: FLOP-equivalents charged per element
# moved around the ring
COMM_FLOP_EQUIV_PER_ELEMENT = 64


class CkptPolicy(str, Enum):
    NONE = "none"
    LOWRANK_BOUNDARY = "lowrank-boundary"


@dataclass(frozen=True)
class CkptReport:
    policy: CkptPolicy
    stored_elements_without: int
    stored_elements_with: int
    recompute_flops: int
    reforward_collectives: int
    reforward_ring_elements: int

    @property
    def delta_mem_elements(self) -> int:
        return self.stored_elements_without - self.stored_elements_with

    @property
    def time_proxy(self) -> int:
        return self.recompute_flops + COMM_FLOP_EQUIV_PER_ELEMENT * self.reforward_ring_elements

    def to_dict(self) -> dict:
        return {
            "policy": self.policy.value,
            "stored_elements_without": self.stored_elements_without,
            "stored_elements_with": self.stored_elements_with,
            "delta_mem_elements": self.delta_mem_elements,
            "recompute_flops": self.recompute_flops,
            "reforward_collectives": self.reforward_collectives,
            "reforward_ring_elements": self.reforward_ring_elements,
            "time_proxy": self.time_proxy,
            "eff_ckpt": float(eff_ckpt(self)) if self.policy is CkptPolicy.LOWRANK_BOUNDARY else None,
        }


def eff_ckpt(report: CkptReport) -> Fraction:
    """Memory freed per unit of recompute-time proxy, as an exact rational."""
    if report.time_proxy == 0:
        raise ValueError("nothing was recomputed; eff_ckpt is undefined")
    return Fraction(report.delta_mem_elements, report.time_proxy)


@dataclass
class CkptRun:
    result: SimResult
    report: CkptReport
    recompute_bitwise_ok: bool
    recompute_checks: dict[str, bool]


def workspace_elements(workspaces, names=None, exclude=("y",)) -> int:
    """Physical element count over all rank workspaces.

    names=None counts every entry (minus exclusions); otherwise only the
    named entries, which must all exist on every rank.
    """
    total = 0
    for ws in workspaces:
        if names is None:
            for key, arr in ws.items():
                if key in exclude:
                    continue
                total += arr.size
        else:
            for key in names:
                total += ws[key].size
    return total


def run_with_ckpt(
    pl: ShardPlan,
    block: DecoderBlockWeights,
    x: Tensor,
    policy: CkptPolicy,
    h_prev: dict[str, Tensor] | None = None,
    *,
    eps: float = EPS_DEFAULT,
    model_tail: bool = False,
) -> CkptRun:
    """Forward once, then (under the boundary policy) drop-and-recompute.

    The recomputed tensors are compared bitwise against the forward's
    workspaces; the re-forward repeats the identical op sequence on identical
    inputs, so any mismatch is a simulator defect, not rounding.
    """
    if policy is CkptPolicy.LOWRANK_BOUNDARY and pl.strategy is Strategy.FULL_RANK:
        raise PlanError(
            "lowrank-boundary checkpointing stores rank-r tensors; "
            "the full-rank strategy has none"
        )
    result = execute_forward(pl, block, x, h_prev, eps=eps, model_tail=model_tail)
    without = workspace_elements(result.workspaces)
    if policy is CkptPolicy.NONE:
        report = CkptReport(
            policy=policy,
            stored_elements_without=without,
            stored_elements_with=without,
            recompute_flops=0,
            reforward_collectives=0,
            reforward_ring_elements=0,
        )
        return CkptRun(result=result, report=report, recompute_bitwise_ok=True, recompute_checks={})

    stored = ckpt_stored_names(pl)
    with_ckpt = workspace_elements(result.workspaces, names=stored)
    flops_before = result.trace.gemm_flops + result.trace.elementwise_flops
    checks = reforward(pl, block, result, h_prev, eps)
    flops_after = result.trace.gemm_flops + result.trace.elementwise_flops
    _, _, calls = result.trace.volume(pass_tag="reforward")
    ring = ring_transfer_elements(result.trace, pl.shape.tp, pass_tag="reforward")
    report = CkptReport(
        policy=policy,
        stored_elements_without=without,
        stored_elements_with=with_ckpt,
        recompute_flops=flops_after - flops_before,
        reforward_collectives=calls,
        reforward_ring_elements=ring,
    )
    return CkptRun(
        result=result,
        report=report,
        recompute_bitwise_ok=all(checks.values()),
        recompute_checks=checks,
    )
