"""The three-regime cached denoising loop.

Each timestep measures how far the timestep-modulated latent has drifted
since the previous step and adds that to a running total ``D``:

* ``D <= delta``: reuse the cached model output, no forward pass;
* ``delta < D <= full_multiplier * delta``: partial compute, i.e. run the
  model on generative + margin + a selected subset of context tokens and blend
  the result into the cache with an EMA;
* otherwise (or without a cache): full compute, refreshing the cached output
  and the context-to-generative attention.

``D`` resets to zero after every partial or full step.
"""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import DegenerateReferenceError, InvalidInputError, NumericFailureError
from .latents import EditMask, TokenGrid, TokenPartition, partition_tokens, scatter
from .selection import ContextSelector
from .toydit import AttentionCapture, ToyDit
from .trace import Regime, RunReport, StepTrace

__all__ = [
    "Regime",
    "SchedulerConfig",
    "CacheState",
    "StepResult",
    "rel_l1_distance",
    "drift",
    "accumulate",
    "decide_regime",
    "ema_update",
    "step_size",
    "sampler_update",
    "step",
    "run_denoise",
    "run_baseline",
]


@dataclass(frozen=True)
class SchedulerConfig:
    delta: float = 0.05
    full_multiplier: float = 1.5
    ema_gamma: float = 0.5
    r_ctx: float = 0.7
    k_clusters: int = 16
    margin_radius: int = 1
    steps: int = 50
    seed: int = 0
    kmeans_iters: int = 10
    margin_temporal_radius: int = 0
    margin_metric: str = "chebyshev"
    use_clusters: bool = True
    use_correlation: bool = True

    def __post_init__(self):
        if not self.delta > 0:
            raise InvalidInputError("delta must be > 0")
        if not self.full_multiplier >= 1:
            raise InvalidInputError("full_multiplier must be >= 1")
        if not 0 <= self.ema_gamma <= 1:
            raise InvalidInputError("ema_gamma must be in [0, 1]")
        if not 0 < self.r_ctx <= 1:
            raise InvalidInputError("r_ctx must be in (0, 1]")
        if self.k_clusters < 1:
            raise InvalidInputError("k_clusters must be >= 1")
        if self.margin_radius < 0 or self.margin_temporal_radius < 0:
            raise InvalidInputError("margin radii must be >= 0")
        if self.steps < 1:
            raise InvalidInputError("steps must be >= 1")

    def selector(self) -> ContextSelector:
        return ContextSelector(
            r_ctx=self.r_ctx,
            k_clusters=self.k_clusters,
            seed=self.seed,
            max_iter=self.kmeans_iters,
            use_clusters=self.use_clusters,
            use_correlation=self.use_correlation,
        )

    def partition(self, mask: EditMask) -> TokenPartition:
        return partition_tokens(
            mask,
            self.margin_radius,
            temporal_radius=self.margin_temporal_radius,
            metric=self.margin_metric,
        )


@dataclass(frozen=True)
class CacheState:
    output_cache: TokenGrid | None = None
    attn_cache: AttentionCapture | None = None
    accumulated_d: float = 0.0
    prev_modulated: TokenGrid | None = None

    def __post_init__(self):
        if self.attn_cache is not None and self.output_cache is None:
            raise InvalidInputError("attention cache without an output cache")


class StepResult(NamedTuple):
    output: TokenGrid
    regime: Regime
    state: CacheState
    trace: StepTrace


def rel_l1_distance(f_t: TokenGrid, f_prev: TokenGrid) -> float:
    a = f_t.data if isinstance(f_t, TokenGrid) else np.asarray(f_t, dtype=np.float64)
    b = f_prev.data if isinstance(f_prev, TokenGrid) else np.asarray(f_prev, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidInputError(f"shape mismatch {a.shape} vs {b.shape}")
    ref = np.abs(b).sum()
    if ref == 0:
        raise DegenerateReferenceError("reference has zero L1 norm")
    return float(np.abs(a - b).sum() / ref)


def drift(f_t: TokenGrid, f_prev: TokenGrid) -> float:
    """Relative L1 change; 0 if both inputs are zero, +inf for a zero reference."""
    try:
        return rel_l1_distance(f_t, f_prev)
    except DegenerateReferenceError:
        return 0.0 if not np.any(f_t.data) else float("inf")


def accumulate(d: float, d_t: float) -> float:
    if d < 0 or d_t < 0:
        raise InvalidInputError("drift values must be >= 0")
    return d + d_t


def decide_regime(d: float, cfg: SchedulerConfig, cache_present: bool) -> Regime:
    if not cache_present:
        return Regime.FULL
    if d <= cfg.delta:
        return Regime.REUSE
    if d <= cfg.full_multiplier * cfg.delta:
        return Regime.PARTIAL
    return Regime.FULL


def ema_update(o_cache: TokenGrid, o_t: TokenGrid, gamma: float) -> TokenGrid:
    if o_cache.data.shape != o_t.data.shape:
        raise InvalidInputError(f"shape mismatch {o_cache.data.shape} vs {o_t.data.shape}")
    if not 0 <= gamma <= 1:
        raise InvalidInputError("gamma must be in [0, 1]")
    return TokenGrid((1.0 - gamma) * o_cache.data + gamma * o_t.data)


def step_size(t: int, num_steps: int) -> float:
    """Linear schedule ``t / T**2``: 1/T at the first step, 1/T**2 at the last."""
    return t / (num_steps * num_steps)


def sampler_update(x_t: TokenGrid, o_t: TokenGrid, t: int, num_steps: int) -> TokenGrid:
    nxt = x_t.data - step_size(t, num_steps) * o_t.data
    if not np.isfinite(nxt).all():
        raise NumericFailureError(f"non-finite latent after timestep {t}")
    return TokenGrid(nxt)


def step(
    state: CacheState,
    x_t: TokenGrid,
    t: int,
    model: ToyDit,
    partition: TokenPartition,
    selector: ContextSelector,
    cfg: SchedulerConfig,
    step_index: int = 0,
) -> StepResult:
    f_t = model.modulated_input(x_t, t)
    d_t = None
    d = state.accumulated_d
    if state.prev_modulated is not None:
        d_t = drift(f_t, state.prev_modulated)
        d = accumulate(d, d_t)

    regime = decide_regime(d, cfg, state.output_cache is not None)
    n_tokens = x_t.num_tokens

    if regime is Regime.REUSE:
        out = state.output_cache
        new_state = dataclasses.replace(state, accumulated_d=d, prev_modulated=f_t)
        active, calls = 0, 0
    elif regime is Regime.PARTIAL:
        assert state.attn_cache is not None, "partial step without cached attention"
        features = x_t.tokens()[partition.context]
        chosen = selector(features, state.attn_cache, partition.context, salt=step_index)
        subset = np.sort(np.concatenate([partition.generative, partition.margin, chosen]))
        fresh = model.forward_subset(x_t, t, subset)
        out = scatter(state.output_cache, subset, fresh)
        new_state = CacheState(
            output_cache=ema_update(state.output_cache, out, cfg.ema_gamma),
            attn_cache=state.attn_cache,
            accumulated_d=0.0,
            prev_modulated=f_t,
        )
        active, calls = len(subset), 1
    else:
        out, attn = model.forward_full(x_t, t, partition, capture=True)
        new_state = CacheState(output_cache=out, attn_cache=attn, accumulated_d=0.0, prev_modulated=f_t)
        active, calls = n_tokens, 1

    trace = StepTrace(
        step=step_index,
        timestep=t,
        regime=regime,
        d_t=d_t,
        d_before=d,
        active_tokens=active,
        attention_cost=active * active,
        model_calls=calls,
    )
    return StepResult(out, regime, new_state, trace)


def _snapshot(model: ToyDit, cfg: SchedulerConfig | None, x: TokenGrid) -> dict:
    snap = {"model": dataclasses.asdict(model.config), "grid": list(x.data.shape)}
    if cfg is not None:
        snap["scheduler"] = dataclasses.asdict(cfg)
    return snap


def _check_model(model: ToyDit, steps: int, x: TokenGrid):
    if model.num_timesteps != steps:
        raise InvalidInputError(f"model built for {model.num_timesteps} timesteps, run has {steps}")
    if model.config.channels != x.channels:
        raise InvalidInputError(f"latent has {x.channels} channels, model has {model.config.channels}")


def run_denoise(
    x_T: TokenGrid,
    mask: EditMask,
    cfg: SchedulerConfig,
    model: ToyDit,
    selector: ContextSelector | None = None,
) -> tuple[TokenGrid, RunReport]:
    """Denoise ``x_T`` over ``cfg.steps`` timesteps with the cache scheduler.

    On a numeric failure the raised :class:`NumericFailureError` carries the
    step index in ``.step`` and the report so far in ``.report``.
    """
    _check_model(model, cfg.steps, x_T)
    if mask.extents != x_T.extents:
        raise InvalidInputError(f"mask extents {mask.extents} do not match latent {x_T.extents}")
    partition = cfg.partition(mask)
    selector = selector or cfg.selector()
    report = RunReport(config=_snapshot(model, cfg, x_T))
    state = CacheState()
    x = x_T
    start = time.perf_counter()
    for i, t in enumerate(range(cfg.steps, 0, -1)):
        try:
            res = step(state, x, t, model, partition, selector, cfg, step_index=i)
            x = sampler_update(x, res.output, t, cfg.steps)
        except NumericFailureError as exc:
            report.failed_step = i
            report.wall_time_s = time.perf_counter() - start
            exc.step = i
            exc.report = report
            raise
        state = res.state
        report.steps.append(res.trace)
    report.wall_time_s = time.perf_counter() - start
    return x, report


def run_baseline(x_T: TokenGrid, model: ToyDit, steps: int) -> tuple[TokenGrid, RunReport]:
    """No-cache reference: a plain loop of full forward passes."""
    _check_model(model, steps, x_T)
    report = RunReport(config=_snapshot(model, None, x_T))
    x = x_T
    n = x_T.num_tokens
    start = time.perf_counter()
    for i, t in enumerate(range(steps, 0, -1)):
        out, _ = model.forward_full(x, t, capture=False)
        x = sampler_update(x, out, t, steps)
        report.steps.append(StepTrace(i, t, Regime.FULL, None, 0.0, n, n * n, 1))
    report.wall_time_s = time.perf_counter() - start
    return x, report
