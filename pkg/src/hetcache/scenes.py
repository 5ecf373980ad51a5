"""Synthetic scenes: seeded Gaussian latents plus rectangle masks."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, InvalidInputError
from .latents import EditMask, TokenGrid

SUITE_SEEDS = tuple(range(10))


@dataclass(frozen=True)
class Scene:
    latent: TokenGrid
    mask: EditMask
    seed: int


def default_rects(frames: int, height: int, width: int) -> tuple[tuple[int, ...], ...]:
    """A box a third of the height tall drifting one column right per frame.

    On a 12x12 grid it covers rows 4..7 and columns 3+f..7+f of frame f.
    """
    y0 = height // 3
    y1 = y0 + max(1, height // 3)
    rects = []
    for f in range(frames):
        x0 = min(width // 4 + f, width - 1)
        rects.append((f, y0, x0, y1, x0 + max(1, (5 * width) // 12)))
    return tuple(rects)


def make_latent(frames: int, height: int, width: int, channels: int, seed: int) -> TokenGrid:
    rng = np.random.default_rng(seed)
    return TokenGrid(rng.standard_normal((frames, height, width, channels)))


def make_scene(frames, height, width, channels, seed, rects=None) -> Scene:
    if rects is None:
        rects = default_rects(frames, height, width)
    latent = make_latent(frames, height, width, channels, seed)
    return Scene(latent, EditMask.from_rectangles(frames, height, width, rects), seed)


def bundled_suite(frames=3, height=12, width=12, channels=32, seeds=SUITE_SEEDS) -> list[Scene]:
    """The ten-seed 3x12x12 scene suite used for trend checks."""
    return [make_scene(frames, height, width, channels, s) for s in seeds]


def scene_from_config(cfg) -> Scene:
    """Build the scene described by a :class:`~hetcache.config.RunConfig`."""
    from .dumps import load_mask

    sc = cfg.scene
    latent = make_latent(sc.frames, sc.height, sc.width, cfg.model.channels, sc.latent_seed)
    if sc.mask_file is not None:
        path = Path(sc.mask_file)
        if not path.is_absolute():
            path = cfg.base_dir / path
        try:
            mask = load_mask(path)
        except (OSError, InvalidInputError) as exc:
            raise ConfigError("scene.mask_file", str(exc)) from exc
        if mask.extents != latent.extents:
            raise ConfigError("scene.mask_file", f"mask extents {mask.extents} != scene {latent.extents}")
    else:
        rects = sc.mask_rects or default_rects(sc.frames, sc.height, sc.width)
        try:
            mask = EditMask.from_rectangles(sc.frames, sc.height, sc.width, rects)
        except InvalidInputError as exc:
            raise ConfigError("scene.mask_rects", str(exc)) from exc
    return Scene(latent, mask, sc.latent_seed)
