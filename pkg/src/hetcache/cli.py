"""Command-line entry point: ``hetcache run | compare | sweep | dump-inspect``.

Exit codes: 0 success, 2 configuration or input error, 3 numeric failure.
The output directory comes from ``--out``, else ``$HETCACHE_OUTPUT_DIR``,
else ``output.directory`` in the config.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from . import analysis, dumps
from ._ratio import ceil_ratio
from .config import RunConfig, load_config
from .errors import ConfigError, InvalidInputError, NumericFailureError
from .latents import TokenGrid
from .scenes import Scene, scene_from_config
from .scheduler import SchedulerConfig, run_baseline, run_denoise
from .toydit import ToyDit
from .trace import RunReport

OUTPUT_ENV = "HETCACHE_OUTPUT_DIR"
EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3

# Well below any observed drift, so every step full-computes.
ALL_FULL_DELTA = 1e-12

SWEEP_AXES = {"delta": float, "r_ctx": float, "k_clusters": int}
_AXIS_ALIASES = {"r": "r_ctx", "k": "k_clusters", "K": "k_clusters"}


@dataclass
class Outcome:
    latent: TokenGrid
    report: RunReport


def build(cfg: RunConfig) -> tuple[ToyDit, Scene]:
    model = ToyDit(cfg.model, cfg.scheduler.steps)
    return model, scene_from_config(cfg)


def execute_run(cfg: RunConfig, model: ToyDit | None = None, scene: Scene | None = None) -> Outcome:
    if model is None or scene is None:
        model, scene = build(cfg)
    x0, report = run_denoise(scene.latent, scene.mask, cfg.scheduler, model)
    report.config["scene"] = cfg.snapshot()["scene"]
    return Outcome(x0, report)


def execute_baseline(cfg: RunConfig, mode: str = "loop", model=None, scene=None) -> Outcome:
    if model is None or scene is None:
        model, scene = build(cfg)
    if mode == "loop":
        x0, report = run_baseline(scene.latent, model, cfg.scheduler.steps)
    elif mode == "scheduler":
        forced = SchedulerConfig(delta=ALL_FULL_DELTA, steps=cfg.scheduler.steps, r_ctx=1.0)
        x0, report = run_denoise(scene.latent, scene.mask, forced, model)
    else:
        raise InvalidInputError(f"unknown baseline mode {mode!r}")
    report.config["scene"] = cfg.snapshot()["scene"]
    return Outcome(x0, report)


def comparison_record(baseline: Outcome, candidate: Outcome) -> dict:
    cmp = analysis.compare(baseline.report, baseline.latent, candidate.report, candidate.latent)
    candidate.report.divergence = analysis.divergence_dict(cmp)
    return analysis.comparison_to_dict(cmp)


def partial_step_cost(cfg: RunConfig, scene: Scene) -> int:
    """Analytic cost of one partial step at the config's ``r_ctx``."""
    n_ctx, n_mar, n_gen = cfg.scheduler.partition(scene.mask).counts()
    active = ceil_ratio(cfg.scheduler.r_ctx, n_ctx) + n_mar + n_gen
    return analysis.step_units(active, cfg.model)


def output_dir(cfg: RunConfig, override: str | None) -> Path:
    path = Path(override or os.environ.get(OUTPUT_ENV) or cfg.output.directory)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_json(path: Path, doc: dict) -> None:
    analysis.validate(doc)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _write_run_artifacts(out: Path, cfg: RunConfig, outcome: Outcome, model: ToyDit, prefix: str = "") -> None:
    _write_json(out / f"{prefix}report.json", analysis.report_to_dict(outcome.report))
    (out / f"{prefix}trace.csv").write_text(analysis.trace_csv(outcome.report))
    (out / f"{prefix}timing.json").write_text(
        json.dumps({"wall_time_s": outcome.report.wall_time_s}, indent=2) + "\n"
    )
    if cfg.output.dump_latents:
        dumps.save_latents(out / f"{prefix}x0.htcl", outcome.latent, cfg.output.latent_dtype)
    if cfg.output.dump_weights and not prefix:
        dumps.save_weights(out / "weights.htcl", model.weights)


def _histogram_line(hist: dict) -> str:
    return " ".join(f"{k}={v}" for k, v in hist.items())


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    model, scene = build(cfg)
    out = output_dir(cfg, args.out)
    try:
        outcome = execute_run(cfg, model, scene)
    except NumericFailureError as exc:
        partial = getattr(exc, "report", None)
        if partial is not None:
            partial.config["scene"] = cfg.snapshot()["scene"]
            _write_json(out / "report.json", analysis.report_to_dict(partial))
        raise
    _write_run_artifacts(out, cfg, outcome, model)
    if cfg.output.dump_latents:
        dumps.save_mask(out / "mask.htcl", scene.mask)
    totals = analysis.analytic_cost(outcome.report.steps, cfg.model)
    all_full = cfg.scheduler.steps * analysis.step_units(scene.latent.num_tokens, cfg.model)
    print(f"regimes: {_histogram_line(outcome.report.histogram())}")
    print(f"analytic cost: {totals.total} units (all-full {all_full}), speedup {all_full / totals.total:.3f}x")
    print(f"report: {out / 'report.json'}")
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg = load_config(args.config)
    model, scene = build(cfg)
    out = output_dir(cfg, args.out)
    baseline = execute_baseline(cfg, args.baseline_mode, model, scene)
    candidate = execute_run(cfg, model, scene)
    record = comparison_record(baseline, candidate)
    _write_run_artifacts(out, cfg, baseline, model, prefix="baseline_")
    _write_run_artifacts(out, cfg, candidate, model)
    if cfg.output.dump_latents:
        dumps.save_mask(out / "mask.htcl", scene.mask)
    _write_json(out / "comparison.json", record)
    div = record["divergence"]
    print(f"baseline:  {_histogram_line(record['histogram']['baseline'])}")
    print(f"candidate: {_histogram_line(record['histogram']['candidate'])}")
    print(f"speedup {record['speedup']}  l2 {div['l2']:.6g}  psnr {div['psnr']}  ssim {div['ssim']:.6f}")
    print(f"comparison: {out / 'comparison.json'}")
    return EXIT_OK


def parse_axis(text: str) -> tuple[str, list]:
    if "=" not in text:
        raise ConfigError("axis", f"expected NAME=V1,V2,..., got {text!r}")
    name, _, values = text.partition("=")
    name = _AXIS_ALIASES.get(name.strip(), name.strip())
    if name not in SWEEP_AXES:
        raise ConfigError("axis", f"unknown sweep axis {name!r} (choose from {', '.join(SWEEP_AXES)})")
    items = [v.strip() for v in values.split(",") if v.strip()]
    if not items:
        raise ConfigError("axis", "empty value list")
    try:
        parsed = [SWEEP_AXES[name](v) for v in items]
    except ValueError as exc:
        raise ConfigError(f"scheduler.{name}", str(exc)) from exc
    return name, parsed


def run_sweep(cfg: RunConfig, axis: str, values: list, baseline_mode: str = "loop", jobs: int = 1) -> dict:
    model, scene = build(cfg)
    baseline = execute_baseline(cfg, baseline_mode, model, scene)
    points = [cfg.with_scheduler(**{axis: v}) for v in values]

    def one(point_cfg):
        cand = execute_run(point_cfg, model, scene)
        record = comparison_record(baseline, cand)
        record["point"] = {axis: getattr(point_cfg.scheduler, axis)}
        return record, partial_step_cost(point_cfg, scene)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(one, points))
    else:
        results = [one(p) for p in points]
    rows = [
        {"value": v, "partial_step_cost": cost, "comparison": rec} for v, (rec, cost) in zip(values, results)
    ]
    return {
        "schema_version": analysis.REPORT_SCHEMA_VERSION,
        "kind": "sweep",
        "axis": axis,
        "values": values,
        "rows": rows,
    }


def sweep_csv(table: dict) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(
        [
            table["axis"],
            "speedup",
            "candidate_units",
            "baseline_units",
            "partial_step_cost",
            "l2",
            "psnr",
            "ssim",
            "full",
            "partial",
            "reuse",
        ]
    )
    for row in table["rows"]:
        c = row["comparison"]
        h = c["histogram"]["candidate"]
        writer.writerow(
            [
                row["value"],
                c["speedup"],
                c["candidate_cost"]["total_units"],
                c["baseline_cost"]["total_units"],
                row["partial_step_cost"],
                c["divergence"]["l2"],
                c["divergence"]["psnr"],
                c["divergence"]["ssim"],
                h["full"],
                h["partial"],
                h["reuse"],
            ]
        )
    return buf.getvalue()


def cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    axis, values = parse_axis(args.axis)
    out = output_dir(cfg, args.out)
    table = run_sweep(cfg, axis, values, args.baseline_mode, args.jobs)
    for row in table["rows"]:
        analysis.validate(row["comparison"])
    _write_json(out / "sweep.json", table)
    (out / "sweep.csv").write_text(sweep_csv(table))
    sys.stdout.write(sweep_csv(table))
    return EXIT_OK


def cmd_dump_inspect(args) -> int:
    print(dumps.describe(args.path))
    return EXIT_OK


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hetcache", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("config", help="TOML config path or preset name (default, slow, fast)")
        p.add_argument("--out", help="output directory (overrides $%s and the config)" % OUTPUT_ENV)
        return p

    p = with_config(sub.add_parser("run", help="run the cached denoiser"))
    p.set_defaults(func=cmd_run)

    p = with_config(sub.add_parser("compare", help="compare against the all-full baseline"))
    p.add_argument("--baseline-mode", choices=("loop", "scheduler"), default="loop")
    p.set_defaults(func=cmd_compare)

    p = with_config(sub.add_parser("sweep", help="sweep one scheduler knob"))
    p.add_argument("--axis", required=True, help="e.g. delta=0.05,0.02 | r_ctx=0.3,0.5 | k_clusters=1,4,16")
    p.add_argument("--baseline-mode", choices=("loop", "scheduler"), default="loop")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("dump-inspect", help="print the header(s) of a binary dump")
    p.add_argument("path")
    p.set_defaults(func=cmd_dump_inspect)
    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericFailureError as exc:
        where = f" at step {exc.step}" if exc.step is not None else ""
        print(f"numeric failure{where}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (InvalidInputError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
