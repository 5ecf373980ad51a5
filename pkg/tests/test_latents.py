import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hetcache.errors import InvalidInputError
from hetcache.latents import EditMask, TokenGrid, gather, partition_tokens, scatter

from conftest import random_grid


def brute_force_partition(flags, radius):
    """Enumerate every cell and apply the same-frame Chebyshev rule."""
    t, h, w = flags.shape
    ctx, mar, gen = [], [], []
    for f, y, x in itertools.product(range(t), range(h), range(w)):
        idx = (f * h + y) * w + x
        if flags[f, y, x]:
            gen.append(idx)
            continue
        near = any(
            flags[f, yy, xx]
            for yy in range(h)
            for xx in range(w)
            if max(abs(yy - y), abs(xx - x)) <= radius
        )
        (mar if near else ctx).append(idx)
    return ctx, mar, gen


class TestTokenGrid:
    def test_token_order(self):
        data = np.arange(2 * 3 * 4 * 2, dtype=float).reshape(2, 3, 4, 2)
        grid = TokenGrid(data)
        assert grid.num_tokens == 24
        f, y, x = 1, 2, 3
        np.testing.assert_array_equal(grid.tokens()[(f * 3 + y) * 4 + x], data[f, y, x])

    def test_rejects_non_finite(self):
        data = np.zeros((1, 2, 2, 2))
        data[0, 0, 0, 0] = np.nan
        with pytest.raises(InvalidInputError):
            TokenGrid(data)

    def test_rejects_wrong_rank(self):
        with pytest.raises(InvalidInputError):
            TokenGrid(np.zeros((2, 2, 2)))


class TestPartition:
    def test_all_false(self):
        p = partition_tokens(EditMask(np.zeros((2, 3, 3), bool)), 1)
        assert p.counts() == (18, 0, 0)

    def test_all_true(self):
        p = partition_tokens(EditMask(np.ones((2, 3, 3), bool)), 1)
        assert p.counts() == (0, 0, 18)

    def test_single_center_token(self):
        flags = np.zeros((1, 5, 5), bool)
        flags[0, 2, 2] = True
        p = partition_tokens(EditMask(flags), 1)
        ctx, mar, gen = brute_force_partition(flags, 1)
        assert (len(gen), len(mar), len(ctx)) == (1, 8, 16)
        assert p.context.tolist() == ctx
        assert p.margin.tolist() == mar
        assert p.generative.tolist() == gen

    def test_margin_stays_in_frame(self):
        flags = np.zeros((3, 4, 4), bool)
        flags[1, 0, 0] = True
        p = partition_tokens(EditMask(flags), 1)
        assert all(16 <= i < 32 for i in p.margin)

    def test_temporal_radius_knob(self):
        flags = np.zeros((3, 4, 4), bool)
        flags[1, 0, 0] = True
        p = partition_tokens(EditMask(flags), 0, temporal_radius=1)
        assert p.margin.tolist() == [0, 32]

    def test_manhattan_metric(self):
        flags = np.zeros((1, 5, 5), bool)
        flags[0, 2, 2] = True
        p = partition_tokens(EditMask(flags), 1, metric="manhattan")
        assert p.n_margin == 4

    def test_zero_extent_mask(self):
        with pytest.raises(InvalidInputError):
            EditMask(np.zeros((0, 3, 3), bool))

    def test_exhaustive_small_grids(self):
        rng = np.random.default_rng(0)
        for t, h, w in itertools.product((1, 2, 4), (1, 3, 6), (1, 4, 6)):
            for density in (0.0, 0.1, 0.4, 1.0):
                flags = rng.random((t, h, w)) < density
                for radius in (0, 1, 2):
                    p = partition_tokens(EditMask(flags), radius)
                    ctx, mar, gen = brute_force_partition(flags, radius)
                    assert (p.context.tolist(), p.margin.tolist(), p.generative.tolist()) == (ctx, mar, gen)

    @settings(max_examples=150, deadline=None)
    @given(
        arrays(np.bool_, st.tuples(st.integers(1, 4), st.integers(1, 6), st.integers(1, 6))),
        st.integers(0, 3),
    )
    def test_cover_disjoint_sorted(self, flags, radius):
        p = partition_tokens(EditMask(flags), radius)
        merged = np.concatenate([p.context, p.margin, p.generative])
        assert sorted(merged.tolist()) == list(range(flags.size))
        for lst in (p.context, p.margin, p.generative):
            assert np.all(np.diff(lst) > 0)
        flat = flags.reshape(-1)
        assert flat[p.generative].all()
        assert not flat[p.context].any() and not flat[p.margin].any()

    @settings(max_examples=100, deadline=None)
    @given(arrays(np.bool_, st.tuples(st.integers(1, 3), st.integers(1, 6), st.integers(1, 6))))
    def test_radius_monotonicity(self, flags):
        prev = None
        for radius in range(4):
            p = partition_tokens(EditMask(flags), radius)
            if prev is not None:
                assert p.n_margin >= prev.n_margin
                assert p.n_context <= prev.n_context
                assert p.n_generative == prev.n_generative
            prev = p

    def test_pure(self):
        flags = np.random.default_rng(1).random((2, 5, 5)) < 0.3
        a = partition_tokens(EditMask(flags), 1)
        b = partition_tokens(EditMask(flags), 1)
        for x, y in zip(a.counts(), b.counts()):
            assert x == y
        np.testing.assert_array_equal(a.margin, b.margin)

    def test_from_rectangles(self):
        m = EditMask.from_rectangles(2, 4, 4, [(0, 1, 1, 3, 3), (-1, 0, 0, 1, 1)])
        assert m.flags[0].sum() == 5
        assert m.flags[1].sum() == 1


class TestGatherScatter:
    def test_identity_gather(self):
        grid = random_grid((2, 3, 3, 4))
        np.testing.assert_array_equal(gather(grid, np.arange(18)), grid.data.reshape(18, 4))

    def test_empty_gather(self):
        out = gather(random_grid((1, 2, 2, 5)), [])
        assert out.shape == (0, 5)

    def test_out_of_range(self):
        with pytest.raises(InvalidInputError):
            gather(random_grid((1, 2, 2, 3)), [4])

    def test_empty_scatter(self):
        grid = random_grid((1, 2, 2, 3))
        assert scatter(grid, [], np.empty((0, 3))) == grid

    def test_scatter_all_ignores_base(self):
        a, b = random_grid((1, 2, 2, 3), 0), random_grid((1, 2, 2, 3), 1)
        idx = np.arange(4)
        assert scatter(a, idx, b.tokens()) == scatter(b, idx, b.tokens())

    def test_duplicate_index(self):
        grid = random_grid((1, 2, 2, 3))
        with pytest.raises(InvalidInputError):
            scatter(grid, [1, 1], np.zeros((2, 3)))

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**16), st.lists(st.integers(0, 23), unique=True))
    def test_round_trip(self, seed, idx):
        grid = random_grid((2, 3, 4, 3), seed)
        rows = gather(grid, idx)
        other = random_grid((2, 3, 4, 3), seed + 1)
        assert scatter(grid, idx, rows) == grid
        merged = scatter(other, idx, rows)
        np.testing.assert_array_equal(gather(merged, idx), rows)
        keep = np.setdiff1d(np.arange(24), idx)
        np.testing.assert_array_equal(gather(merged, keep), gather(other, keep))
