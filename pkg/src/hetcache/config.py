"""Run configuration: a sectioned TOML file with strictly typed keys.

Unknown sections or keys are errors, and every error names the offending
field as ``section.key``.
"""

from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Callable

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigError, InvalidInputError
from .scheduler import SchedulerConfig
from .toydit import ToyDitConfig

PRESETS = ("default", "slow", "fast")


@dataclass(frozen=True)
class SceneConfig:
    frames: int = 3
    height: int = 12
    width: int = 12
    latent_seed: int = 0
    mask_rects: tuple[tuple[int, ...], ...] = ()
    mask_file: str | None = None


@dataclass(frozen=True)
class OutputConfig:
    directory: str = "hetcache-out"
    dump_latents: bool = True
    dump_weights: bool = False
    latent_dtype: str = "f64"


@dataclass(frozen=True)
class RunConfig:
    model: ToyDitConfig = field(default_factory=ToyDitConfig)
    scheduler: SchedulerConfig = field(default_factory=SchedulerConfig)
    scene: SceneConfig = field(default_factory=SceneConfig)
    output: OutputConfig = field(default_factory=OutputConfig)
    base_dir: Path = field(default=Path("."), compare=False)

    def snapshot(self) -> dict:
        return {
            "model": dataclasses.asdict(self.model),
            "scheduler": dataclasses.asdict(self.scheduler),
            "scene": {
                **dataclasses.asdict(self.scene),
                "mask_rects": [list(r) for r in self.scene.mask_rects],
            },
        }

    def with_scheduler(self, **changes) -> "RunConfig":
        try:
            sched = dataclasses.replace(self.scheduler, **changes)
        except InvalidInputError as exc:
            key = next(iter(changes), "?")
            raise ConfigError(f"scheduler.{key}", str(exc)) from exc
        return dataclasses.replace(self, scheduler=sched)


def _is_int(v):
    return isinstance(v, int) and not isinstance(v, bool)


def _is_num(v):
    return isinstance(v, (int, float)) and not isinstance(v, bool)


_INT = (_is_int, "an integer")
_POS_INT = (lambda v: _is_int(v) and v >= 1, "an integer >= 1")
_NONNEG_INT = (lambda v: _is_int(v) and v >= 0, "an integer >= 0")
_BOOL = (lambda v: isinstance(v, bool), "a boolean")
_STR = (lambda v: isinstance(v, str), "a string")


def _rects_ok(v):
    return isinstance(v, list) and all(
        isinstance(r, list) and len(r) == 5 and all(_is_int(x) for x in r) for r in v
    )


FIELDS: dict[str, dict[str, tuple[Callable[[Any], bool], str]]] = {
    "model": {
        "channels": (lambda v: _is_int(v) and v >= 2 and v % 2 == 0, "an even integer >= 2"),
        "heads": _POS_INT,
        "blocks": _POS_INT,
        "mlp_hidden": _POS_INT,
        "seed": _INT,
        "attention_aggregation": (lambda v: v in ("mean", "last"), "'mean' or 'last'"),
        "init_scale": (lambda v: _is_num(v) and v > 0, "a number > 0"),
    },
    "scheduler": {
        "steps": _POS_INT,
        "delta": (lambda v: _is_num(v) and v > 0, "a number > 0"),
        "full_multiplier": (lambda v: _is_num(v) and v >= 1, "a number >= 1"),
        "ema_gamma": (lambda v: _is_num(v) and 0 <= v <= 1, "a number in [0, 1]"),
        "r_ctx": (lambda v: _is_num(v) and 0 < v <= 1, "a number in (0, 1]"),
        "k_clusters": _POS_INT,
        "margin_radius": _NONNEG_INT,
        "margin_temporal_radius": _NONNEG_INT,
        "margin_metric": (lambda v: v in ("chebyshev", "manhattan"), "'chebyshev' or 'manhattan'"),
        "seed": _INT,
        "kmeans_iters": _NONNEG_INT,
        "use_clusters": _BOOL,
        "use_correlation": _BOOL,
    },
    "scene": {
        "frames": _POS_INT,
        "height": _POS_INT,
        "width": _POS_INT,
        "latent_seed": _INT,
        "mask_rects": (_rects_ok, "a list of [frame, y0, x0, y1, x1] integer lists"),
        "mask_file": _STR,
    },
    "output": {
        "directory": _STR,
        "dump_latents": _BOOL,
        "dump_weights": _BOOL,
        "latent_dtype": (lambda v: v in ("f32", "f64"), "'f32' or 'f64'"),
    },
}


def parse_config(raw: dict, base_dir: Path = Path(".")) -> RunConfig:
    for section, body in raw.items():
        if section not in FIELDS:
            raise ConfigError(section, "unknown section")
        if not isinstance(body, dict):
            raise ConfigError(section, "must be a table")
        for key, value in body.items():
            if key not in FIELDS[section]:
                raise ConfigError(f"{section}.{key}", "unknown key")
            pred, what = FIELDS[section][key]
            if not pred(value):
                raise ConfigError(f"{section}.{key}", f"must be {what}, got {value!r}")

    def section(name):
        return dict(raw.get(name, {}))

    model = section("model")
    sched = section("scheduler")
    for body, keys in ((model, ("init_scale",)), (sched, ("delta", "full_multiplier", "ema_gamma", "r_ctx"))):
        for key in keys:
            if key in body:
                body[key] = float(body[key])
    scene = section("scene")
    if "channels" in model and "heads" in model and model["channels"] % model["heads"]:
        raise ConfigError("model.heads", "must divide model.channels")
    if "mask_rects" in scene and "mask_file" in scene:
        raise ConfigError("scene.mask_file", "give either mask_rects or mask_file, not both")
    if "mask_rects" in scene:
        scene["mask_rects"] = tuple(tuple(r) for r in scene["mask_rects"])
        frames = scene.get("frames", SceneConfig.frames)
        for r in scene["mask_rects"]:
            if not -1 <= r[0] < frames:
                raise ConfigError("scene.mask_rects", f"frame {r[0]} outside [-1, {frames})")

    try:
        model_cfg = ToyDitConfig(**model)
    except InvalidInputError as exc:
        raise ConfigError("model", str(exc)) from exc
    try:
        sched_cfg = SchedulerConfig(**sched)
    except InvalidInputError as exc:
        raise ConfigError("scheduler", str(exc)) from exc
    return RunConfig(
        model=model_cfg,
        scheduler=sched_cfg,
        scene=SceneConfig(**scene),
        output=OutputConfig(**section("output")),
        base_dir=base_dir,
    )


def load_config(path) -> RunConfig:
    """Load a config file, or a bundled preset by name (``default``, ``slow``, ``fast``)."""
    p = Path(path)
    if not p.exists() and str(path) in PRESETS:
        text = resources.files("hetcache.configs").joinpath(f"{path}.toml").read_text()
        base = Path(".")
    else:
        try:
            text = p.read_text()
        except OSError as exc:
            raise ConfigError("<file>", f"cannot read {path}: {exc}") from exc
        base = p.parent
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError("<file>", f"invalid TOML: {exc}") from exc
    return parse_config(raw, base)
