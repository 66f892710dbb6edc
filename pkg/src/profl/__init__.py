"""Progressive block-wise federated training under device memory limits."""

from .blocks import BlockPlan, GlobalModel, SubModel, assemble_growing, assemble_shrinking, partition
from .federation import FLConfig, RoundRecord, RunResult, run_baseline, run_profl
from .freeze import EffectiveMovementTracker, FreezeController, FreezePolicy, fit_slope
from .memory import MemoryEstimate, eligible, estimate

__version__ = "0.1.0"
