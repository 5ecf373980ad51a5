"""Acceptance suite: one test per criterion, tagged with ``@criterion``.

A summary line per criterion is printed at the end of the pytest run.
"""

import math
import time
from fractions import Fraction

import numpy as np
import pytest

from hetcache import analysis
from hetcache.cli import main
from hetcache.latents import EditMask, TokenGrid, partition_tokens
from hetcache.scenes import bundled_suite, make_scene
from hetcache.scheduler import (
    CacheState,
    Regime,
    SchedulerConfig,
    decide_regime,
    ema_update,
    run_baseline,
    run_denoise,
    sampler_update,
    step,
)
from hetcache.selection import ClusterResult, importance, kmeans, select_representatives
from hetcache.toydit import ToyDit, ToyDitConfig, attention_cost, position_features

from test_scheduler import CountingModel


def criterion(number, title):
    return pytest.mark.criterion(number, title)


def brute_regime(d, delta, cache):
    if not cache:
        return "full"
    if d <= delta:
        return "reuse"
    if d <= 1.5 * delta:
        return "partial"
    return "full"


@criterion(1, "regime decision matches a brute-force oracle")
def test_regime_oracle():
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    for delta in (0.02, 0.05):
        cfg = SchedulerConfig(delta=delta, full_multiplier=1.5)
        ds = rng.uniform(0, 3 * delta, 10_000)
        # include the exact band edges
        ds[:4] = [0.0, delta, 1.5 * delta, 3 * delta]
        flags = rng.random(10_000) < 0.8
        for d, flag in zip(ds, flags):
            assert decide_regime(float(d), cfg, bool(flag)).value == brute_regime(d, delta, flag)
    assert time.perf_counter() - start < 1.0


@criterion(2, "all-full scheduling is bitwise identical to a plain loop")
def test_baseline_bit_equivalence():
    start = time.perf_counter()
    scene = make_scene(4, 16, 16, 32, seed=0)
    model = ToyDit(ToyDitConfig(), 50)
    base, _ = run_baseline(scene.latent, model, 50)
    cfg = SchedulerConfig(delta=1e-12, r_ctx=1.0, steps=50)
    got, report = run_denoise(scene.latent, scene.mask, cfg, model)
    observed = [s.d_t for s in report.steps if s.d_t is not None]
    assert min(observed) > cfg.full_multiplier * cfg.delta
    assert report.histogram() == {"full": 50, "partial": 0, "reuse": 0}
    assert got.data.tobytes() == base.data.tobytes()
    assert time.perf_counter() - start < 30.0


@criterion(3, "reuse steps make no model calls and return the cache bitwise")
def test_reuse_purity():
    reuse_seen = 0
    for scene in bundled_suite(seeds=range(3)):
        for delta in (0.02, 0.05, 0.2):
            cfg = SchedulerConfig(delta=delta)
            model = CountingModel(ToyDit(ToyDitConfig(), cfg.steps))
            part, sel = cfg.partition(scene.mask), cfg.selector()
            state, x = CacheState(), scene.latent
            for i, t in enumerate(range(cfg.steps, 0, -1)):
                before = model.calls
                cached = state.output_cache
                res = step(state, x, t, model, part, sel, cfg, step_index=i)
                if res.regime is Regime.REUSE:
                    reuse_seen += 1
                    assert model.calls == before and res.trace.model_calls == 0
                    assert res.output.data.tobytes() == cached.data.tobytes()
                    assert res.state.output_cache.data.tobytes() == cached.data.tobytes()
                else:
                    assert model.calls == before + 1
                x = sampler_update(x, res.output, t, cfg.steps)
                state = res.state
    assert reuse_seen > 0


@criterion(4, "partial compute with all context equals full compute within 1e-5")
def test_subset_full_equivalence():
    rng = np.random.default_rng(4)
    model_cfg = ToyDitConfig(channels=16, heads=4, blocks=3, mlp_hidden=32, seed=1)
    cfg = SchedulerConfig(delta=0.05, ema_gamma=1.0, r_ctx=1.0, steps=10)
    for seed in range(24):
        f, h, w = int(rng.integers(1, 3)), int(rng.integers(3, 9)), int(rng.integers(3, 9))
        scene = make_scene(f, h, w, 16, seed, rects=[(-1, 1, 1, 1 + h // 3, 1 + w // 3)])
        model = ToyDit(model_cfg, 10)
        part = cfg.partition(scene.mask)
        t = int(rng.integers(1, 11))
        prev, cap = model.forward_full(scene.latent, 10, part, capture=True)
        # accumulated drift inside the partial band, no previous input to add to it
        state = CacheState(output_cache=prev, attn_cache=cap, accumulated_d=0.06)
        res = step(state, scene.latent, t, model, part, cfg.selector(), cfg)
        assert res.regime is Regime.PARTIAL
        assert res.trace.active_tokens == scene.latent.num_tokens
        full, _ = model.forward_full(scene.latent, t, capture=False)
        for got in (res.output, res.state.output_cache):
            rel = np.abs(got.data - full.data).max() / np.abs(full.data).max()
            assert rel <= 1e-5


@criterion(5, "attention cost ratio 14400/22500 at r=0.7")
def test_cost_ratio():
    reduced = attention_cost(100, 20, 30, 0.7)
    full = attention_cost(100, 20, 30, 1.0)
    assert (reduced, full) == (14400, 22500)
    assert Fraction(reduced, full) == Fraction(16, 25)


def dense_first_block_probs(model, grid, t):
    """Head-averaged attention probabilities of block 0, written with scalar loops."""
    cfg, w = model.config, model.weights
    d, nh, dh = cfg.channels, cfg.heads, cfg.head_dim
    cond = model.embedding.conditioning_for(t)
    mod = model.embedding.modulation_for(t)
    shift = [sum(cond[i] * w.blocks[0].ada[i, c] for i in range(d)) for c in range(d)]
    scale = [sum(cond[i] * w.blocks[0].ada[i, d + c] for i in range(d)) for c in range(d)]
    pos = position_features(*grid.extents)
    toks = grid.tokens()
    n = len(toks)
    rows = []
    for i in range(n):
        h = [toks[i, c] * mod[c] + sum(pos[i, p] * w.position[p, c] for p in range(pos.shape[1])) for c in range(d)]
        mu = sum(h) / d
        var = sum((v - mu) ** 2 for v in h) / d
        rows.append([(h[c] - mu) / math.sqrt(var + 1e-6) * (1 + scale[c]) + shift[c] for c in range(d)])
    qkv = w.blocks[0].qkv
    q = [[sum(r[i] * qkv[i, c] for i in range(d)) for c in range(d)] for r in rows]
    k = [[sum(r[i] * qkv[i, d + c] for i in range(d)) for c in range(d)] for r in rows]
    probs = np.zeros((n, n))
    for hd in range(nh):
        sl = range(hd * dh, (hd + 1) * dh)
        for i in range(n):
            logits = [sum(q[i][c] * k[j][c] for c in sl) / math.sqrt(dh) for j in range(n)]
            m = max(logits)
            e = [math.exp(v - m) for v in logits]
            s = sum(e)
            for j in range(n):
                probs[i, j] += e[j] / s / nh
    return probs


@criterion(6, "importance scores match a dense brute force within 1e-6")
def test_importance_oracle():
    start = time.perf_counter()
    rng = np.random.default_rng(6)
    checked = seed = 0
    while checked < 50:
        seed += 1
        cfg = ToyDitConfig(channels=4, heads=1, blocks=1, mlp_hidden=4, seed=seed, init_scale=0.5)
        model = ToyDit(cfg, 5)
        h, w = int(rng.integers(2, 6)), int(rng.integers(2, 6))
        grid = TokenGrid(rng.standard_normal((1, h, w, 4)))
        flags = rng.random((1, h, w)) < 0.3
        flags.reshape(-1)[int(rng.integers(h * w))] = True
        part = partition_tokens(EditMask(flags), 0)
        if part.n_context == 0:
            continue
        t = int(rng.integers(1, 6))
        _, cap = model.forward_full(grid, t, part)
        probs = dense_first_block_probs(model, grid, t)
        want = [sum(probs[i, j] for j in part.generative) / part.n_generative for i in part.context]
        np.testing.assert_allclose(importance(cap), want, rtol=0, atol=1e-6)
        checked += 1
    assert time.perf_counter() - start < 5.0


@criterion(7, "converged K-Means is a fixed point (means and nearest centroids)")
def test_kmeans_fixpoint():
    rng = np.random.default_rng(7)
    checked = 0
    for n in (1, 2, 3, 5, 8, 13, 21, 34, 64):
        for k in range(1, 9):
            for rep in range(3):
                pts = rng.standard_normal((n, 2)) * rng.uniform(0.1, 10)
                if rep == 2:
                    pts = np.round(pts)  # duplicates and ties
                res = kmeans(pts, k, seed=int(rng.integers(1000)), max_iter=1000)
                assert res.converged
                live = min(k, n)
                for i in range(n):
                    dists = [float(np.sum((pts[i] - res.centroids[j]) ** 2)) for j in range(live)]
                    assert dists[res.assignments[i]] <= min(dists) + 1e-9
                for j in range(live):
                    members = pts[res.assignments == j]
                    if len(members):
                        assert np.abs(res.centroids[j] - members.mean(axis=0)).max() <= 1e-6
                checked += 1
    assert checked == 9 * 8 * 3


@criterion(8, "selection is monotone in r and never inverts scores within a cluster")
def test_selection_properties():
    rng = np.random.default_rng(8)
    ratios = (0.05, 0.1, 0.25, 0.34, 0.5, 0.7, 0.9, 1.0)
    for _ in range(1000):
        n = int(rng.integers(1, 40))
        k = int(rng.integers(1, 6))
        labels = rng.integers(0, k, n)
        # coarse scores create ties
        scores = np.round(rng.random(n), int(rng.integers(1, 4)))
        idx = np.sort(rng.choice(200, n, replace=False))
        clusters = ClusterResult(labels, np.zeros((k, 1)), 0, 0.0, True)
        prev = set()
        for r in ratios:
            chosen = set(select_representatives(clusters, scores, r, idx).tolist())
            assert prev <= chosen
            prev = chosen
            for j in range(k):
                members = np.flatnonzero(labels == j)
                if not members.size:
                    continue
                kept = [m for m in members if idx[m] in chosen]
                assert len(kept) == max(1, math.ceil(Fraction(repr(r)) * members.size))
                for a in kept:
                    for b in members:
                        if idx[b] in chosen:
                            continue
                        assert scores[a] > scores[b] or (scores[a] == scores[b] and idx[a] < idx[b])
        assert prev == set(idx.tolist())


@criterion(9, "EMA output stays inside the elementwise envelope")
def test_ema_bounds():
    rng = np.random.default_rng(9)
    for i in range(1000):
        shape = (1, int(rng.integers(1, 4)), int(rng.integers(1, 4)), int(rng.integers(1, 5)))
        a = TokenGrid(rng.standard_normal(shape) * 10 ** rng.uniform(-3, 3))
        b = TokenGrid(rng.standard_normal(shape) * 10 ** rng.uniform(-3, 3))
        gamma = float(rng.choice([0.0, 1.0, rng.random()])) if i % 10 == 0 else float(rng.random())
        out = ema_update(a, b, gamma).data
        assert np.all(out >= np.minimum(a.data, b.data))
        assert np.all(out <= np.maximum(a.data, b.data))


@criterion(10, "suite trend: finite divergence, zero at no-cache, all regimes fire")
def test_suite_trend():
    start = time.perf_counter()
    model = ToyDit(ToyDitConfig(), 50)
    for scene in bundled_suite():
        base_x, base = run_baseline(scene.latent, model, 50)
        full_cost = analysis.analytic_cost(base.steps, model.config).total

        x, _ = run_denoise(scene.latent, scene.mask, SchedulerConfig(delta=0.02, r_ctx=0.7), model)
        assert math.isfinite(analysis.l2(base_x, x))

        x, _ = run_denoise(scene.latent, scene.mask, SchedulerConfig(delta=1e-12, r_ctx=1.0), model)
        assert analysis.l2(base_x, x) == 0.0

        _, report = run_denoise(scene.latent, scene.mask, SchedulerConfig(delta=0.05), model)
        hist = report.histogram()
        assert hist["partial"] >= 1 and hist["reuse"] >= 1 and hist["full"] >= 1
        assert analysis.analytic_cost(report.steps, model.config).total < full_cost
    assert time.perf_counter() - start < 120.0


@criterion(11, "repeated runs give byte-identical reports and dumps")
def test_determinism(tmp_path, capsys):
    from importlib import resources

    text = resources.files("hetcache.configs").joinpath("default.toml").read_text()
    cfg = tmp_path / "det.toml"
    cfg.write_text(text.replace("dump_weights = false", "dump_weights = true"))
    for name in ("a", "b"):
        assert main(["compare", str(cfg), "--out", str(tmp_path / name)]) == 0
    capsys.readouterr()
    files = sorted(p.name for p in (tmp_path / "a").iterdir() if "timing" not in p.name)
    assert {"report.json", "comparison.json", "x0.htcl", "mask.htcl", "weights.htcl"} <= set(files)
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes(), f
