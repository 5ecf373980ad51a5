"""Training-free heterogeneous caching for masked video-to-video diffusion.

A toy Diffusion Transformer is denoised under a three-regime schedule (full,
partial, reuse). Partial steps recompute masked and boundary tokens plus a
clustered, attention-ranked subset of the unmasked context.
"""

from .errors import (
    ConfigError,
    DegenerateReferenceError,
    HetCacheError,
    InvalidInputError,
    NumericFailureError,
)
from .latents import EditMask, TokenGrid, TokenPartition, gather, partition_tokens, scatter
from .scheduler import CacheState, SchedulerConfig, decide_regime, run_baseline, run_denoise
from .selection import ContextSelector, importance, kmeans, select_representatives
from .toydit import AttentionCapture, ToyDit, ToyDitConfig, attention_cost
from .trace import Regime, RunReport, StepTrace

__version__ = "0.1.0"
