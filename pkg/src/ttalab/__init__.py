"""Desk-scale online test-time adaptation lab.

Before deployment: score each feature-extractor block by how well it
preserves class-prototype geometry under entropy minimization on perturbed
source data, and select the high-scoring ("domain-specific") ones. After
deployment: adapt the selected blocks by entropy minimization and all
parameters by consistency against flip-averaged EMA-teacher pseudo-labels,
predicting with the student+teacher logit ensemble. Ships with source-only /
BN-recalibration / entropy-on-BN baselines and a continual / gradual / mixed
corruption-stream benchmark harness.
"""

from .tensor import Rng, Tape, Tensor, backward
from .nn import BlockNet, BlockSpec, build_model, desk_spec, forward
from .data import CorruptionSpec, ImageBatch, StreamSpec, build_stream, corrupt, flip_h, gen_shapegrid
from .selection import SelectionReport, select_blocks
from .adaptation import AdaptConfig, AdaptState, dplot_step, init_adapt_state
from .config import RunConfig, load_config
from .harness import Report, pretrain, run_benchmark

__version__ = "0.1.0"

__all__ = [
    "Rng",
    "Tape",
    "Tensor",
    "backward",
    "BlockNet",
    "BlockSpec",
    "build_model",
    "desk_spec",
    "forward",
    "CorruptionSpec",
    "ImageBatch",
    "StreamSpec",
    "build_stream",
    "corrupt",
    "flip_h",
    "gen_shapegrid",
    "SelectionReport",
    "select_blocks",
    "AdaptConfig",
    "AdaptState",
    "dplot_step",
    "init_adapt_state",
    "RunConfig",
    "load_config",
    "Report",
    "pretrain",
    "run_benchmark",
    "__version__",
]
