"""Compute accounting, divergence metrics and report serialization.

Costs are analytic multiply-accumulate style unit counts derived from each
step's active token count, never wall-clock time.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from importlib import resources

import jsonschema
import numpy as np

from .errors import InvalidInputError
from .latents import TokenGrid
from .toydit import ToyDitConfig
from .trace import Regime, RunReport, StepTrace

__all__ = [
    "REPORT_SCHEMA_VERSION",
    "CostTotals",
    "Comparison",
    "step_cost",
    "analytic_cost",
    "step_units",
    "mse",
    "l2",
    "psnr",
    "ssim",
    "compare",
    "report_to_dict",
    "report_to_json",
    "report_from_dict",
    "trace_csv",
    "comparison_to_dict",
    "divergence_dict",
    "load_schema",
    "validate",
]

REPORT_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class CostTotals:
    attention: int
    token: int  # qkv/out projections + MLP
    model_calls: int

    @property
    def total(self) -> int:
        return self.attention + self.token

    def to_dict(self) -> dict:
        return {
            "attention_units": self.attention,
            "token_units": self.token,
            "total_units": self.total,
            "model_calls": self.model_calls,
        }


def _cfg(model_cfg) -> ToyDitConfig:
    if isinstance(model_cfg, dict):
        model_cfg = ToyDitConfig(**model_cfg)
    return model_cfg


def _per_token_units(cfg: ToyDitConfig) -> int:
    d = cfg.channels
    return cfg.blocks * (4 * d * d + 2 * d * cfg.mlp_hidden)


def step_cost(entry: StepTrace, model_cfg) -> CostTotals:
    cfg = _cfg(model_cfg)
    if entry.regime is Regime.REUSE:
        return CostTotals(0, 0, entry.model_calls)
    attention = entry.attention_cost * cfg.blocks * cfg.heads
    return CostTotals(attention, entry.active_tokens * _per_token_units(cfg), entry.model_calls)


def analytic_cost(trace, model_cfg) -> CostTotals:
    attention = token = calls = 0
    for entry in trace:
        c = step_cost(entry, model_cfg)
        attention += c.attention
        token += c.token
        calls += c.model_calls
    return CostTotals(attention, token, calls)


def step_units(num_tokens: int, model_cfg) -> int:
    """Cost of one computed step with `num_tokens` active tokens."""
    cfg = _cfg(model_cfg)
    return num_tokens * num_tokens * cfg.blocks * cfg.heads + num_tokens * _per_token_units(cfg)


def _arrays(a, b):
    x = a.data if isinstance(a, TokenGrid) else np.asarray(a, dtype=np.float64)
    y = b.data if isinstance(b, TokenGrid) else np.asarray(b, dtype=np.float64)
    if x.shape != y.shape:
        raise InvalidInputError(f"shape mismatch {x.shape} vs {y.shape}")
    return x, y


def mse(a, b) -> float:
    x, y = _arrays(a, b)
    return float(np.mean((x - y) ** 2))


def l2(a, b) -> float:
    x, y = _arrays(a, b)
    return float(np.sqrt(np.sum((x - y) ** 2)))


def psnr(a, b, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` for identical inputs."""
    if not peak > 0:
        raise InvalidInputError("peak must be > 0")
    err = mse(a, b)
    if err == 0:
        return math.inf
    return 10.0 * math.log10(peak * peak / err)


def ssim(a, b, data_range: float | None = None, window: int = 8) -> float:
    """Mean SSIM over all ``window x window`` spatial windows of every frame
    and channel (stride 1, uniform weights, population statistics).

    Inputs are ``(t, h, w, d)`` grids. ``data_range`` defaults to the spread
    of ``a`` and ``b`` together; windows shrink to the grid when it is
    smaller than ``window``.
    """
    x, y = _arrays(a, b)
    if x.ndim != 4:
        raise InvalidInputError("ssim expects (t, h, w, d) grids")
    if data_range is None:
        data_range = float(max(x.max(), y.max()) - min(x.min(), y.min())) or 1.0
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    wy, wx = min(window, x.shape[1]), min(window, x.shape[2])

    def windows(v):
        return np.lib.stride_tricks.sliding_window_view(v, (wy, wx), axis=(1, 2))

    px, py = windows(x), windows(y)
    mx, my = px.mean(axis=(-2, -1)), py.mean(axis=(-2, -1))
    vx = px.var(axis=(-2, -1))
    vy = py.var(axis=(-2, -1))
    cov = (px * py).mean(axis=(-2, -1)) - mx * my
    s = ((2 * mx * my + c1) * (2 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
    return float(s.mean())


@dataclass(frozen=True)
class Comparison:
    baseline_cost: CostTotals
    candidate_cost: CostTotals
    speedup: float
    l2: float
    mse: float
    psnr: float
    ssim: float
    baseline_histogram: dict
    candidate_histogram: dict

    @property
    def histogram_delta(self) -> dict:
        return {k: self.candidate_histogram[k] - self.baseline_histogram[k] for k in self.baseline_histogram}


def compare(
    baseline: RunReport,
    baseline_latent: TokenGrid,
    candidate: RunReport,
    candidate_latent: TokenGrid,
    peak: float | None = None,
) -> Comparison:
    for key in ("model", "grid", "scene"):
        if baseline.config.get(key) != candidate.config.get(key):
            raise InvalidInputError(f"baseline and candidate differ in {key!r} configuration")
    model_cfg = baseline.config["model"]
    base_cost = analytic_cost(baseline.steps, model_cfg)
    cand_cost = analytic_cost(candidate.steps, model_cfg)
    if peak is None:
        b = baseline_latent.data
        peak = float(b.max() - b.min()) or 1.0
    return Comparison(
        baseline_cost=base_cost,
        candidate_cost=cand_cost,
        speedup=base_cost.total / cand_cost.total if cand_cost.total else math.inf,
        l2=l2(baseline_latent, candidate_latent),
        mse=mse(baseline_latent, candidate_latent),
        psnr=psnr(baseline_latent, candidate_latent, peak),
        ssim=ssim(baseline_latent, candidate_latent, data_range=peak),
        baseline_histogram=baseline.histogram(),
        candidate_histogram=candidate.histogram(),
    )


def _json_float(v: float):
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return v


def report_to_dict(report: RunReport, model_cfg=None) -> dict:
    """Serializable form of a report. Wall time is deliberately left out so
    identical runs serialize to identical bytes."""
    model_cfg = model_cfg or report.config["model"]
    totals = analytic_cost(report.steps, model_cfg)
    out = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "kind": "run_report",
        "config": report.config,
        "steps": [s.to_dict() for s in report.steps],
        "totals": totals.to_dict(),
        "histogram": report.histogram(),
        "failed_step": report.failed_step,
    }
    if report.divergence is not None:
        out["divergence"] = report.divergence
    return out


def report_from_dict(raw: dict) -> RunReport:
    return RunReport(
        config=raw["config"],
        steps=[StepTrace.from_dict(s) for s in raw["steps"]],
        failed_step=raw.get("failed_step"),
        divergence=raw.get("divergence"),
    )


def report_to_json(report: RunReport) -> str:
    return json.dumps(report_to_dict(report), indent=2, sort_keys=True) + "\n"


def comparison_to_dict(cmp: Comparison, label: str | None = None) -> dict:
    out = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "kind": "comparison",
        "baseline_cost": cmp.baseline_cost.to_dict(),
        "candidate_cost": cmp.candidate_cost.to_dict(),
        "speedup": _json_float(cmp.speedup),
        "divergence": divergence_dict(cmp),
        "histogram": {
            "baseline": cmp.baseline_histogram,
            "candidate": cmp.candidate_histogram,
            "delta": cmp.histogram_delta,
        },
    }
    if label is not None:
        out["label"] = label
    return out


def divergence_dict(cmp: Comparison) -> dict:
    return {"l2": cmp.l2, "mse": cmp.mse, "psnr": _json_float(cmp.psnr), "ssim": cmp.ssim}


def trace_csv(report: RunReport, model_cfg=None) -> str:
    """Plot-ready trace: step, timestep, regime, d_t, D, cumulative cost."""
    model_cfg = model_cfg or report.config["model"]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["step", "timestep", "regime", "d_t", "d_before", "active_tokens", "cumulative_cost"])
    running = 0
    for s in report.steps:
        running += step_cost(s, model_cfg).total
        d_t = "" if s.d_t is None else repr(s.d_t)
        writer.writerow([s.step, s.timestep, s.regime.value, d_t, repr(s.d_before), s.active_tokens, running])
    return buf.getvalue()


def load_schema(kind: str) -> dict:
    name = {"run_report": "report.schema.json", "comparison": "comparison.schema.json", "sweep": "sweep.schema.json"}[
        kind
    ]
    return json.loads(resources.files("hetcache.schemas").joinpath(name).read_text())


def validate(document: dict) -> None:
    """Raise ``jsonschema.ValidationError`` unless ``document`` matches its schema."""
    jsonschema.validate(document, load_schema(document.get("kind", "run_report")))
