"""A small deterministic Diffusion Transformer.

The model is untrained: weights are seeded Gaussians. What matters is that it
has the structure the cache scheduler interacts with, namely timestep
modulation of the input, adaptive scale/shift inside each block,
self-attention whose probabilities can be captured, and a forward pass that
can be restricted to a subset of tokens.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np

from ._ratio import ceil_ratio
from .errors import InvalidInputError, NumericFailureError
from .latents import TokenGrid, TokenPartition

__all__ = [
    "ToyDitConfig",
    "BlockWeights",
    "ToyDitWeights",
    "TimestepEmbedding",
    "AttentionCapture",
    "ToyDit",
    "attention_cost",
    "timestep_features",
    "position_features",
]

_LN_EPS = 1e-6
_POS_FREQS = (1.0, 0.5, 0.25, 0.125)


@dataclass(frozen=True)
class ToyDitConfig:
    channels: int = 32
    heads: int = 4
    blocks: int = 4
    mlp_hidden: int = 64
    seed: int = 0
    capture_attention: bool = True
    # "mean" over all heads and blocks, or "last" block only (heads averaged)
    attention_aggregation: str = "mean"
    init_scale: float = 0.02

    def __post_init__(self):
        if self.channels <= 0 or self.channels % 2:
            raise InvalidInputError("channels must be a positive even number")
        if self.heads <= 0 or self.channels % self.heads:
            raise InvalidInputError("channels must be divisible by heads")
        if self.blocks < 1:
            raise InvalidInputError("blocks must be >= 1")
        if self.mlp_hidden < 1:
            raise InvalidInputError("mlp_hidden must be >= 1")
        if self.attention_aggregation not in ("mean", "last"):
            raise InvalidInputError("attention_aggregation must be 'mean' or 'last'")

    @property
    def head_dim(self) -> int:
        return self.channels // self.heads


@dataclass(frozen=True)
class BlockWeights:
    ada: np.ndarray  # (d, 6d): shift/scale/gate for attention and MLP
    qkv: np.ndarray  # (d, 3d)
    proj: np.ndarray  # (d, d)
    fc1: np.ndarray  # (d, mlp_hidden)
    fc2: np.ndarray  # (mlp_hidden, d)


@dataclass(frozen=True)
class ToyDitWeights:
    timestep: np.ndarray  # (d, d) projection of the sinusoidal timestep features
    position: np.ndarray  # (P, d) projection of the coordinate features
    blocks: tuple[BlockWeights, ...]
    final_ada: np.ndarray  # (d, 2d)
    head: np.ndarray  # (d, d)

    @classmethod
    def init(cls, cfg: ToyDitConfig) -> "ToyDitWeights":
        rng = np.random.default_rng(cfg.seed)
        d, hid, s = cfg.channels, cfg.mlp_hidden, cfg.init_scale
        n_pos = 3 * 2 * len(_POS_FREQS)
        # The timestep and position projections feed signals that must carry
        # O(1) energy into the model; they are unit-variance per output.
        timestep = rng.standard_normal((d, d)) / math.sqrt(d)
        position = rng.standard_normal((n_pos, d)) * (0.5 / math.sqrt(n_pos))
        blocks = tuple(
            BlockWeights(
                ada=rng.standard_normal((d, 6 * d)) * s,
                qkv=rng.standard_normal((d, 3 * d)) * s,
                proj=rng.standard_normal((d, d)) * s,
                fc1=rng.standard_normal((d, hid)) * s,
                fc2=rng.standard_normal((hid, d)) * s,
            )
            for _ in range(cfg.blocks)
        )
        final_ada = rng.standard_normal((d, 2 * d)) * s
        head = rng.standard_normal((d, d)) * s
        return cls(timestep, position, blocks, final_ada, head)

    def named_arrays(self) -> list[tuple[str, np.ndarray]]:
        out = [("timestep", self.timestep), ("position", self.position)]
        for i, blk in enumerate(self.blocks):
            for f in fields(BlockWeights):
                out.append((f"blocks.{i}.{f.name}", getattr(blk, f.name)))
        out += [("final_ada", self.final_ada), ("head", self.head)]
        return out

    @classmethod
    def from_arrays(cls, arrays: list[np.ndarray], num_blocks: int) -> "ToyDitWeights":
        """Inverse of :meth:`named_arrays` (order-based)."""
        per_block = len(fields(BlockWeights))
        expected = 4 + per_block * num_blocks
        if len(arrays) != expected:
            raise InvalidInputError(f"expected {expected} weight arrays, got {len(arrays)}")
        blocks = tuple(
            BlockWeights(*arrays[2 + i * per_block : 2 + (i + 1) * per_block]) for i in range(num_blocks)
        )
        return cls(arrays[0], arrays[1], blocks, arrays[-2], arrays[-1])


def timestep_features(t: int, num_timesteps: int, dim: int) -> np.ndarray:
    """Sinusoidal features of the timestep on a quadratically warped clock.

    Warping by ``(t / T) ** 2`` makes early (noisy) steps move faster than
    late ones, which is the drift profile caching schedulers expect.
    """
    tau = (t / num_timesteps) ** 2
    freqs = math.pi * np.geomspace(0.25, 4.0, dim // 2)
    phase = tau * freqs
    return np.concatenate([np.sin(phase), np.cos(phase)])


def position_features(frames: int, height: int, width: int) -> np.ndarray:
    """``(X, P)`` sinusoidal features of each token's (frame, y, x) coordinate."""
    f, y, x = np.meshgrid(np.arange(frames), np.arange(height), np.arange(width), indexing="ij")
    cols = []
    for coord in (f, y, x):
        c = coord.reshape(-1, 1).astype(np.float64)
        freqs = np.asarray(_POS_FREQS)
        cols += [np.sin(c * freqs), np.cos(c * freqs)]
    return np.concatenate(cols, axis=1)


@dataclass(frozen=True)
class TimestepEmbedding:
    """Per-timestep conditioning, fixed for the lifetime of a model.

    ``modulation[t - 1]`` is the vector ``T_t`` multiplied into the latent to
    form the modulated input; ``conditioning[t - 1]`` drives the adaptive
    scale/shift of every block.
    """

    num_timesteps: int
    modulation: np.ndarray
    conditioning: np.ndarray

    @classmethod
    def build(cls, num_timesteps: int, projection: np.ndarray) -> "TimestepEmbedding":
        if num_timesteps < 1:
            raise InvalidInputError("num_timesteps must be >= 1")
        dim = projection.shape[0]
        feats = np.stack([timestep_features(t, num_timesteps, dim) for t in range(1, num_timesteps + 1)])
        # 1 + 0.5 tanh(.) lies in [0.5, 1.5], so T_t is never zero.
        modulation = 1.0 + 0.5 * np.tanh(feats @ projection)
        conditioning = feats / (1.0 + np.exp(-feats))  # SiLU
        modulation.setflags(write=False)
        conditioning.setflags(write=False)
        return cls(num_timesteps, modulation, conditioning)

    def _row(self, table: np.ndarray, t: int) -> np.ndarray:
        if not (isinstance(t, (int, np.integer)) and 1 <= t <= self.num_timesteps):
            raise InvalidInputError(f"unknown timestep {t!r} (valid: 1..{self.num_timesteps})")
        return table[t - 1]

    def modulation_for(self, t: int) -> np.ndarray:
        return self._row(self.modulation, t)

    def conditioning_for(self, t: int) -> np.ndarray:
        return self._row(self.conditioning, t)


@dataclass(frozen=True)
class AttentionCapture:
    """Context-to-generative slice of the post-softmax attention.

    ``matrix[i, j]`` is the attention probability with query
    ``context[i]`` and key ``generative[j]``, aggregated over heads/blocks.
    """

    matrix: np.ndarray
    context: np.ndarray
    generative: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.matrix.shape


def attention_cost(n_context: int, n_margin: int, n_generative: int, r_ctx: float = 1.0) -> int:
    """Quadratic attention cost with a fraction ``r_ctx`` of context tokens kept."""
    if min(n_context, n_margin, n_generative) < 0:
        raise InvalidInputError("token counts must be >= 0")
    if not 0 < r_ctx <= 1:
        raise InvalidInputError("r_ctx must be in (0, 1]")
    return (ceil_ratio(r_ctx, n_context) + n_margin + n_generative) ** 2


def _layer_norm(h: np.ndarray) -> np.ndarray:
    mu = h.mean(axis=-1, keepdims=True)
    var = ((h - mu) ** 2).mean(axis=-1, keepdims=True)
    return (h - mu) / np.sqrt(var + _LN_EPS)


def _gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x**3)))


def _softmax_(logits: np.ndarray) -> np.ndarray:
    """Row softmax computed in place (the attention maps dominate memory traffic)."""
    logits -= logits.max(axis=-1, keepdims=True)
    np.exp(logits, out=logits)
    logits /= logits.sum(axis=-1, keepdims=True)
    return logits


@dataclass(frozen=True)
class ToyDit:
    """Seeded DiT with ``blocks`` rounds of adaLN -> self-attention -> MLP.

    Instances are immutable; forward passes keep no state between calls.
    """

    config: ToyDitConfig
    num_timesteps: int
    weights: ToyDitWeights = None
    embedding: TimestepEmbedding = field(init=False, repr=False)

    def __post_init__(self):
        if self.weights is None:
            object.__setattr__(self, "weights", ToyDitWeights.init(self.config))
        object.__setattr__(
            self, "embedding", TimestepEmbedding.build(self.num_timesteps, self.weights.timestep)
        )

    def modulated_input(self, grid: TokenGrid, t: int) -> TokenGrid:
        """``T_t * x_t`` applied to every token's channel vector."""
        mod = self.embedding.modulation_for(t)
        if grid.channels != len(mod):
            raise InvalidInputError(f"grid has {grid.channels} channels, model has {len(mod)}")
        return TokenGrid(grid.data * mod)

    def forward_full(
        self, grid: TokenGrid, t: int, partition: TokenPartition | None = None, capture: bool | None = None
    ) -> tuple[TokenGrid, AttentionCapture | None]:
        if capture is None:
            capture = self.config.capture_attention
        if capture and partition is None:
            raise InvalidInputError("attention capture needs a token partition")
        if partition is not None and partition.num_tokens != grid.num_tokens:
            raise InvalidInputError("partition does not match grid extents")
        active = np.arange(grid.num_tokens)
        rows = (partition.context, partition.generative) if capture else None
        out, attn = self._forward(grid, t, active, rows)
        return TokenGrid.from_tokens(out, *grid.extents), attn

    def forward_subset(self, grid: TokenGrid, t: int, active) -> np.ndarray:
        """Run every block with attention limited to ``active`` tokens.

        Tokens keep their own positional encoding. Returns ``(len(active), d)``.
        """
        active = np.asarray(active, dtype=np.int64).reshape(-1)
        if active.size == 0:
            raise InvalidInputError("active token set is empty")
        if active.min() < 0 or active.max() >= grid.num_tokens:
            raise InvalidInputError("active token index out of range")
        if np.any(np.diff(active) <= 0):
            raise InvalidInputError("active indices must be unique and sorted ascending")
        out, _ = self._forward(grid, t, active, None)
        return out

    def _forward(self, grid, t, active, capture_sets):
        # overflow is reported through NumericFailureError, not numpy warnings
        with np.errstate(over="ignore", invalid="ignore"):
            return self._forward_checked(grid, t, active, capture_sets)

    def _forward_checked(self, grid, t, active, capture_sets):
        cfg, w = self.config, self.weights
        d, nh, dh = cfg.channels, cfg.heads, cfg.head_dim
        if grid.channels != d:
            raise InvalidInputError(f"grid has {grid.channels} channels, model has {d}")
        cond = self.embedding.conditioning_for(t)
        mod = self.embedding.modulation_for(t)
        pos = position_features(*grid.extents)[active] @ w.position
        h = grid.tokens()[active] * mod + pos
        n = len(active)

        if capture_sets is not None:
            ctx, gen = capture_sets
            attn_sum = np.zeros((len(ctx), len(gen)))
            grid_ix = np.ix_(ctx, gen)
        for li, blk in enumerate(w.blocks):
            shift1, scale1, gate1, shift2, scale2, gate2 = np.split(cond @ blk.ada, 6)
            a = _layer_norm(h) * (1.0 + scale1) + shift1
            q, k, v = np.split(a @ blk.qkv, 3, axis=-1)
            q = q.reshape(n, nh, dh).transpose(1, 0, 2)
            k = k.reshape(n, nh, dh).transpose(1, 0, 2)
            v = v.reshape(n, nh, dh).transpose(1, 0, 2)
            probs = _softmax_((q / math.sqrt(dh)) @ k.transpose(0, 2, 1))
            if capture_sets is not None and (
                cfg.attention_aggregation == "mean" or li == len(w.blocks) - 1
            ):
                for head in range(nh):
                    attn_sum += probs[head][grid_ix]
            o = (probs @ v).transpose(1, 0, 2).reshape(n, d)
            h = h + (1.0 + gate1) * (o @ blk.proj)
            m = _layer_norm(h) * (1.0 + scale2) + shift2
            h = h + (1.0 + gate2) * (_gelu(m @ blk.fc1) @ blk.fc2)
            if not np.isfinite(h).all():
                raise NumericFailureError(f"non-finite activations after block {li}", block=li)

        shift, scale = np.split(cond @ w.final_ada, 2)
        out = (_layer_norm(h) * (1.0 + scale) + shift) @ w.head
        if not np.isfinite(out).all():
            raise NumericFailureError("non-finite model output", block=len(w.blocks) - 1)

        attn = None
        if capture_sets is not None:
            n_agg = nh * (len(w.blocks) if cfg.attention_aggregation == "mean" else 1)
            attn = AttentionCapture(attn_sum / n_agg, capture_sets[0], capture_sets[1])
        return out, attn
