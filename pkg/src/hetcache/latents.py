"""Token grids, edit masks and the context/margin/generative split.

A latent video of ``t`` frames, ``h x w`` spatial tokens and ``d`` channels is
stored as a ``(t, h, w, d)`` array. Flattened token index is
``(f * h + y) * w + x``; everything downstream uses that order.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import InvalidInputError

__all__ = [
    "TokenGrid",
    "EditMask",
    "TokenPartition",
    "partition_tokens",
    "gather",
    "scatter",
]


@dataclass(frozen=True)
class TokenGrid:
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 4:
            raise InvalidInputError(f"token grid must be (t, h, w, d), got shape {data.shape}")
        if min(data.shape) <= 0:
            raise InvalidInputError(f"token grid extents must be positive, got {data.shape}")
        if not np.isfinite(data).all():
            raise InvalidInputError("token grid contains non-finite values")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @classmethod
    def from_tokens(cls, tokens: np.ndarray, frames: int, height: int, width: int) -> "TokenGrid":
        tokens = np.asarray(tokens, dtype=np.float64)
        return cls(tokens.reshape(frames, height, width, tokens.shape[-1]))

    @property
    def frames(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def channels(self) -> int:
        return self.data.shape[3]

    @property
    def extents(self) -> tuple[int, int, int]:
        return self.data.shape[:3]

    @property
    def num_tokens(self) -> int:
        return self.frames * self.height * self.width

    def tokens(self) -> np.ndarray:
        """Read-only ``(X, d)`` view in token-major order."""
        return self.data.reshape(self.num_tokens, self.channels)

    def __eq__(self, other):
        if not isinstance(other, TokenGrid):
            return NotImplemented
        return self.data.shape == other.data.shape and np.array_equal(self.data, other.data)

    __hash__ = None


@dataclass(frozen=True)
class EditMask:
    """Boolean flag per token; ``True`` marks a token to be generated."""

    flags: np.ndarray

    def __post_init__(self):
        flags = np.asarray(self.flags)
        if flags.ndim != 3:
            raise InvalidInputError(f"mask must be (t, h, w), got shape {flags.shape}")
        if min(flags.shape, default=0) <= 0:
            raise InvalidInputError(f"mask extents must be positive, got {flags.shape}")
        if flags.dtype != np.bool_:
            if not np.isin(flags, (0, 1)).all():
                raise InvalidInputError("mask values must be 0 or 1")
            flags = flags.astype(np.bool_)
        flags = flags.copy()
        flags.setflags(write=False)
        object.__setattr__(self, "flags", flags)

    @classmethod
    def from_rectangles(
        cls, frames: int, height: int, width: int, rects: Sequence[Sequence[int]]
    ) -> "EditMask":
        """Build a mask from ``(frame, y0, x0, y1, x1)`` half-open rectangles.

        ``frame = -1`` applies the rectangle to every frame. Rectangles are
        clipped to the grid.
        """
        if frames <= 0 or height <= 0 or width <= 0:
            raise InvalidInputError("mask extents must be positive")
        flags = np.zeros((frames, height, width), dtype=np.bool_)
        for rect in rects:
            if len(rect) != 5:
                raise InvalidInputError(f"rectangle must be (frame, y0, x0, y1, x1), got {rect!r}")
            f, y0, x0, y1, x1 = (int(v) for v in rect)
            if f < -1 or f >= frames:
                raise InvalidInputError(f"rectangle frame {f} outside [0, {frames})")
            target = slice(None) if f == -1 else slice(f, f + 1)
            flags[target, max(y0, 0) : max(y1, 0), max(x0, 0) : max(x1, 0)] = True
        return cls(flags)

    @property
    def extents(self) -> tuple[int, int, int]:
        return self.flags.shape

    @property
    def num_tokens(self) -> int:
        return self.flags.size

    def flat(self) -> np.ndarray:
        return self.flags.reshape(-1)


@dataclass(frozen=True)
class TokenPartition:
    context: np.ndarray
    margin: np.ndarray
    generative: np.ndarray

    @property
    def n_context(self) -> int:
        return len(self.context)

    @property
    def n_margin(self) -> int:
        return len(self.margin)

    @property
    def n_generative(self) -> int:
        return len(self.generative)

    @property
    def num_tokens(self) -> int:
        return self.n_context + self.n_margin + self.n_generative

    def counts(self) -> tuple[int, int, int]:
        return self.n_context, self.n_margin, self.n_generative


def _dilate(flags: np.ndarray, radius: int, temporal_radius: int, metric: str) -> np.ndarray:
    t, h, w = flags.shape
    padded = np.pad(flags, ((temporal_radius,) * 2, (radius,) * 2, (radius,) * 2))
    out = np.zeros_like(flags)
    for df in range(-temporal_radius, temporal_radius + 1):
        for dy in range(-radius, radius + 1):
            for dx in range(-radius, radius + 1):
                if metric == "manhattan" and abs(dy) + abs(dx) > radius:
                    continue
                out |= padded[
                    temporal_radius + df : temporal_radius + df + t,
                    radius + dy : radius + dy + h,
                    radius + dx : radius + dx + w,
                ]
    return out


def partition_tokens(
    mask: EditMask,
    margin_radius: int = 1,
    *,
    temporal_radius: int = 0,
    metric: str = "chebyshev",
) -> TokenPartition:
    """Split tokens into context, margin and generative index lists.

    Generative tokens are the masked ones. Margin tokens are unmasked tokens
    within ``margin_radius`` (Chebyshev distance by default, same frame unless
    ``temporal_radius > 0``) of a masked token. The rest are context.
    """
    if not isinstance(mask, EditMask):
        mask = EditMask(mask)
    if margin_radius < 0 or temporal_radius < 0:
        raise InvalidInputError("margin radii must be >= 0")
    if metric not in ("chebyshev", "manhattan"):
        raise InvalidInputError(f"unknown margin metric {metric!r}")

    flags = mask.flags
    near = _dilate(flags, margin_radius, temporal_radius, metric)
    flat_mask = flags.reshape(-1)
    flat_near = near.reshape(-1)
    return TokenPartition(
        context=np.flatnonzero(~flat_near).astype(np.int64),
        margin=np.flatnonzero(flat_near & ~flat_mask).astype(np.int64),
        generative=np.flatnonzero(flat_mask).astype(np.int64),
    )


def _check_indices(indices, num_tokens: int) -> np.ndarray:
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= num_tokens):
        raise InvalidInputError(f"token index out of range [0, {num_tokens})")
    return idx


def gather(grid: TokenGrid, indices) -> np.ndarray:
    idx = _check_indices(indices, grid.num_tokens)
    return grid.tokens()[idx].copy()


def scatter(base: TokenGrid, indices, rows) -> TokenGrid:
    idx = _check_indices(indices, base.num_tokens)
    rows = np.asarray(rows, dtype=np.float64)
    if rows.size == 0 and len(idx) == 0:
        return base
    if rows.shape != (len(idx), base.channels):
        raise InvalidInputError(f"expected rows of shape {(len(idx), base.channels)}, got {rows.shape}")
    if len(np.unique(idx)) != len(idx):
        raise InvalidInputError("scatter indices must be unique")
    tokens = base.tokens().copy()
    tokens[idx] = rows
    return TokenGrid.from_tokens(tokens, *base.extents)
