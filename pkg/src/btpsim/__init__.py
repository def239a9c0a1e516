"""btpsim: desk-scale simulator and cost model for tensor-parallel low-rank
transformer blocks.

Everything is deterministic: weights and inputs come from a documented PRNG,
collectives reduce in ascending rank order, and the analytical cost model is
exact integer/rational arithmetic.
"""

from .tensor import Tensor, tensor, zeros, matmul, batched_matmul, swiglu, seeded_fill
from .model import ModelConfig, RunShape, Variant, preset, build_block, reference_forward
from .plan import Strategy, NormMode, ShardPlan, PlanError, plan, enumerate_collectives
from .simulator import execute_forward, trace_volume
from .checkpointing import CkptPolicy, run_with_ckpt, eff_ckpt
from . import costs

__all__ = [
    "Tensor",
    "tensor",
    "zeros",
    "matmul",
    "batched_matmul",
    "swiglu",
    "seeded_fill",
    "ModelConfig",
    "RunShape",
    "Variant",
    "preset",
    "build_block",
    "reference_forward",
    "Strategy",
    "NormMode",
    "ShardPlan",
    "PlanError",
    "plan",
    "enumerate_collectives",
    "execute_forward",
    "trace_volume",
    "CkptPolicy",
    "run_with_ckpt",
    "eff_ckpt",
    "costs",
]

__version__ = "0.1.0"
