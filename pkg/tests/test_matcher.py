import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from georank.blocks import ffn, init_ffn
from georank.errors import DataError, ShapeError
from georank.features import ExtractorConfig, ExtractorParams, FeatureMap
from georank.keypoints import Keypoint
from georank.matcher import (
    AdapterParams,
    CandidateScore,
    MatchSet,
    MatcherConfig,
    MatcherParams,
    MatcherTrainConfig,
    PairScorer,
    TrainingSample,
    adapter_forward,
    bilinear_sample,
    build_inputs,
    candidate_loss,
    correlate,
    multiview_score,
    refine_forward,
    refine_matches,
    rerank,
    select_candidates,
    similarity_score,
    soft_argmax,
    train_matcher_adapters,
)
from georank.numerics import LinearParams, grad_check, layer_norm
from georank.retrieval import Ranking

SMALL = MatcherConfig(S=4, iterations=1, heads=2, d3=8, window=3, adapter_dim=4, ffn_hidden=8, width=16)


def small_inputs(rng, B=3, h=4, w=4, S=4, d=8, stride=4):
    kp = rng.uniform(0, w * stride - 1, (S, 2)).astype(np.float32)
    fq = rng.standard_normal((B, h, w, d)).astype(np.float32)
    fr = rng.standard_normal((B, h, w, d)).astype(np.float32)
    return build_inputs(kp, fq, fr, stride, [f"c{i}" for i in range(B)])


def with_random_adapters(params, rng):
    """Non-zero up-projections so every trainable array receives gradient."""
    upd = {k: rng.standard_normal(v.shape).astype(v.dtype) * 0.3 for k, v in params.trainable().items()}
    return params.with_arrays(upd)


def ranking(ids, classes=None):
    return Ranking("q", list(ids), [1.0 - 0.01 * i for i in range(len(ids))], list(classes or ids))


# ----------------------------------------------------------------- sampling


def test_bilinear_integer_point_returns_cell(rng):
    fmap = FeatureMap(rng.standard_normal((4, 5, 3)).astype(np.float32), stride=4)
    np.testing.assert_array_equal(bilinear_sample(fmap, Keypoint(8.0, 12.0)), fmap.values[3, 2])


def test_bilinear_midpoint():
    vals = np.zeros((2, 2, 1), np.float32)
    vals[0, 0], vals[0, 1] = 1.0, 3.0
    assert bilinear_sample(FeatureMap(vals, stride=1), Keypoint(0.5, 0.0))[0] == pytest.approx(2.0)


def test_bilinear_matches_scalar_oracle(rng):
    grid = rng.standard_normal((6, 7, 3)).astype(np.float32)
    fmap = FeatureMap(grid, stride=4)
    for _ in range(50):
        x, y = rng.uniform(0, 28), rng.uniform(0, 24)
        gx, gy = min(x / 4, 6.0), min(y / 4, 5.0)
        x0, y0 = int(math.floor(gx)), int(math.floor(gy))
        x1, y1 = min(x0 + 1, 6), min(y0 + 1, 5)
        fx, fy = gx - x0, gy - y0
        want = [
            (1 - fy) * ((1 - fx) * grid[y0, x0, c] + fx * grid[y0, x1, c])
            + fy * ((1 - fx) * grid[y1, x0, c] + fx * grid[y1, x1, c])
            for c in range(3)
        ]
        np.testing.assert_allclose(bilinear_sample(fmap, Keypoint(x, y)), want, atol=1e-6)


def test_bilinear_out_of_bounds():
    with pytest.raises(DataError):
        bilinear_sample(FeatureMap(np.zeros((2, 2, 1), np.float32), stride=4), Keypoint(8.0, 0.0))


# -------------------------------------------------------------- correlation


def test_correlate_zero_and_orthogonal():
    ref = np.zeros((3, 3, 4), np.float32)
    ref[..., :2] = np.random.default_rng(0).standard_normal((3, 3, 2))
    fmap = FeatureMap(ref)
    np.testing.assert_array_equal(correlate(np.zeros(4, np.float32), fmap), np.zeros((3, 3)))
    np.testing.assert_array_equal(correlate(np.array([0, 0, 1, -2], np.float32), fmap), np.zeros((3, 3)))


def test_correlate_dim_mismatch():
    with pytest.raises(ShapeError):
        correlate(np.zeros(3), FeatureMap(np.zeros((2, 2, 4), np.float32)))


def test_self_correlation_argmax_at_unique_maximizer(rng):
    grid = rng.standard_normal((6, 6, 8)).astype(np.float32)
    cells = grid.reshape(36, 8)
    gram = cells @ cells.T
    hits = 0
    for i in range(36):
        if gram[i].argmax() == i and np.sum(gram[i] == gram[i, i]) == 1:
            hits += 1
            corr = correlate(cells[i], FeatureMap(grid))
            assert np.unravel_index(np.argmax(corr), corr.shape) == divmod(i, 6)
    assert hits > 0


def test_soft_argmax_on_peak():
    corr = np.zeros((5, 5))
    corr[3, 1] = 50.0
    np.testing.assert_allclose(soft_argmax(corr), [1.0, 3.0], atol=1e-6)


# --------------------------------------------------------------- refinement


def test_zero_heads_give_soft_argmax_and_half_confidence(rng):
    params = MatcherParams.init(SMALL, seed=1).zero_heads()
    inp = small_inputs(rng)
    xy, conf, _ = refine_forward(inp, params)
    np.testing.assert_allclose(xy, soft_argmax(inp.correlations, SMALL.corr_temperature) * 4, rtol=1e-6)
    np.testing.assert_array_equal(conf, np.full(conf.shape, 0.5, np.float32))


def test_identity_pair_peaked_correlation_recovers_sources(rng):
    grid = rng.standard_normal((8, 8, 8)).astype(np.float32) * 3
    flat = grid.reshape(64, 8)
    gram = flat @ flat.T
    unique = [i for i in range(64) if gram[i].argmax() == i and np.sum(gram[i] == gram[i, i]) == 1]
    cells = np.array([[i % 8, i // 8] for i in unique[:4]])
    assert len(cells) == 4
    kp = (cells * 4).astype(np.float32)
    inp = build_inputs(kp, grid[None], grid[None], 4, ["self"])
    xy, _, _ = refine_forward(inp, MatcherParams.init(SMALL, seed=0).zero_heads())
    assert np.all(np.abs(xy[0] / 4 - cells) <= 1.0)


def test_refine_matches_single_pair(rng):
    params = MatcherParams.init(SMALL, seed=2)
    fr = FeatureMap(rng.standard_normal((4, 4, 8)).astype(np.float32))
    feats = rng.standard_normal((4, 8)).astype(np.float32)
    corr = np.stack([correlate(f, fr) for f in feats])
    ms = refine_matches(corr, feats, fr, params, candidate_id="r1")
    assert len(ms) == 4
    assert np.all((ms.confidences >= 0) & (ms.confidences <= 1))
    with pytest.raises(ShapeError):
        refine_matches(corr, feats[:, :4], fr, params)


@pytest.mark.parametrize("dtype,tol", [(np.float32, 1e-3), (np.float64, 1e-5)])
def test_adapter_and_head_gradients_through_frozen_matcher(rng, dtype, tol):
    params = with_random_adapters(MatcherParams.init(SMALL, seed=3), rng)
    frozen = {k: v.astype(dtype) for k, v in params.arrays.items()}
    inp = small_inputs(rng)
    inp.kp_features, inp.correlations, inp.reference_cells = (
        a.astype(dtype) for a in (inp.kp_features, inp.correlations, inp.reference_cells)
    )
    proj = rng.standard_normal((3, 4, 2))

    def closure(p):
        xy, conf, back = refine_forward(inp, MatcherParams(SMALL, {**frozen, **p}))
        dxy = proj.astype(xy.dtype)
        dconf = np.full(conf.shape, 1.0 / conf.size, conf.dtype)
        loss = float(conf.astype(np.float64).mean() + np.sum(xy.astype(np.float64) * proj))
        return loss, back(dconf, dxy)

    trainable = {k: v for k, v in frozen.items() if k.startswith("head.") or ".adapter." in k}
    rep = grad_check(closure, trainable, dtype=dtype)
    assert rep.max_rel_error < tol


# ------------------------------------------------------------------ scoring


def test_similarity_score_examples():
    ms = lambda c: MatchSet("r", np.zeros((len(c), 2)), np.zeros((len(c), 2)), np.array(c))
    assert similarity_score(ms([0.2, 0.4, 0.6])).c_tilde == pytest.approx(0.4)
    assert similarity_score(ms([1.0] * 5)).c_tilde == 1.0
    assert similarity_score(ms([0.37])).c_tilde == pytest.approx(0.37)
    with pytest.raises(DataError):
        similarity_score(ms([]))


def test_multiview_score_examples():
    s = CandidateScore("r", 0.3)
    assert multiview_score([s, s, s]).c_tilde == pytest.approx(0.3)
    assert multiview_score([CandidateScore("r", 0.0), CandidateScore("r", 1.0)]).c_tilde == 0.5


@settings(max_examples=50, deadline=None)
@given(st.lists(st.lists(st.integers(0, 16), min_size=3, max_size=3), min_size=2, max_size=6))
def test_multiview_average_and_sum_pick_same_candidate(per_view):
    # sixteenths are exact in binary, so sums and means carry no rounding
    per_view = [[v / 16 for v in row] for row in per_view]
    avg = [multiview_score([CandidateScore(f"r{j}", v) for v in row]).c_tilde for j, row in enumerate(per_view)]
    summed = [sum(row) for row in per_view]
    assert int(np.argmax(avg)) == int(np.argmax(summed))


# ------------------------------------------------------------------- rerank


def test_rerank_equal_scores_keep_order():
    s1 = ranking(["a", "b", "c", "d"])
    out = rerank(s1, [CandidateScore(i, 0.5) for i in "abc"], 3)
    assert out.ids == s1.ids


def test_rerank_k1_is_identity():
    s1 = ranking(["a", "b", "c"])
    assert rerank(s1, [CandidateScore("a", 0.1)], 1).ids == s1.ids


def test_rerank_reverses_block_keeps_tail():
    s1 = ranking(["a", "b", "c", "d", "e"])
    out = rerank(s1, [CandidateScore("a", 0.1), CandidateScore("b", 0.2), CandidateScore("c", 0.3)], 3)
    assert out.ids == ["c", "b", "a", "d", "e"]
    assert out.scores[3:] == s1.scores[3:]


def test_rerank_rejects_mismatched_scores():
    with pytest.raises(DataError):
        rerank(ranking(["a", "b", "c"]), [CandidateScore("a", 0.1), CandidateScore("c", 0.3)], 2)


@settings(max_examples=80, deadline=None)
@given(st.integers(1, 8), st.data())
def test_rerank_properties(K, data):
    ids = [f"r{i}" for i in range(10)]
    s1 = ranking(ids)
    vals = data.draw(st.lists(st.sampled_from([0.1, 0.2, 0.5, 0.9]), min_size=K, max_size=K))
    out = rerank(s1, [CandidateScore(i, v) for i, v in zip(ids, vals)], K)
    assert sorted(out.ids) == sorted(ids)
    assert out.ids[K:] == ids[K:]
    perm = data.draw(st.permutations(range(K)))
    permuted = [CandidateScore(ids[i], vals[perm[i]]) for i in range(K)]
    out_p = rerank(s1, permuted, K)
    # the block is ordered by score, ties by stage-1 position
    expect = sorted(range(K), key=lambda i: (-vals[perm[i]], i))
    assert out_p.ids[:K] == [ids[i] for i in expect]


# ----------------------------------------------------------------- adapters


def adapter_setup(rng, alpha=1.0, d=6, k=3):
    base = {}
    init_ffn(base, rng, "f", d, 5)
    down = LinearParams.init(rng, d, k)
    up = LinearParams(rng.standard_normal((k, d)).astype(np.float32), rng.standard_normal(d).astype(np.float32))
    return base, AdapterParams(down, up, alpha)


def test_adapter_alpha_zero_is_frozen_path(rng):
    base, ad = adapter_setup(rng, alpha=0.0)
    x = rng.standard_normal((4, 6)).astype(np.float32)
    out, _ = adapter_forward(x, lambda u: ffn(u, base, "f"), ad)
    n, _ = layer_norm(x)
    f, _ = ffn(n, base, "f")
    assert out.tobytes() == (f + x).tobytes()


def test_adapter_zero_up_equals_alpha_zero(rng):
    base, ad = adapter_setup(rng)
    x = rng.standard_normal((4, 6)).astype(np.float32)
    zero_up = AdapterParams(ad.down, LinearParams.zeros(3, 6), 1.0)
    a, _ = adapter_forward(x, lambda u: ffn(u, base, "f"), zero_up)
    b, _ = adapter_forward(x, lambda u: ffn(u, base, "f"), AdapterParams(ad.down, ad.up, 0.0))
    np.testing.assert_array_equal(a, b)


def test_adapter_dim_mismatch(rng):
    base, ad = adapter_setup(rng)
    with pytest.raises(ShapeError):
        adapter_forward(np.zeros((2, 5), np.float32), lambda u: ffn(u, base, "f"), ad)


def test_adapter_grad_check(rng):
    base, ad = adapter_setup(rng, alpha=0.7)
    base = {k: v.astype(np.float64) for k, v in base.items()}
    proj = rng.standard_normal((4, 6))

    def closure(p):
        a = AdapterParams(LinearParams(p["down.weight"], p["down.bias"]), LinearParams(p["up.weight"], p["up.bias"]), 0.7)
        out, back = adapter_forward(p["x"], lambda u: ffn(u, base, "f"), a)
        dx, g = back(proj)
        return float(np.sum(out * proj)), {"x": dx, **g}

    params = {"x": rng.standard_normal((4, 6)), **{f"down.{k}": v for k, v in ad.down.arrays().items()}}
    params.update({f"up.{k}": v for k, v in ad.up.arrays().items()})
    assert grad_check(closure, params, dtype=np.float64).max_rel_error < 1e-5


def test_untrained_adapters_match_adapter_free_matcher(rng):
    params = MatcherParams.init(SMALL, seed=5)
    plain = MatcherParams(MatcherConfig(**{**SMALL.as_dict(), "use_adapters": False}), params.arrays)
    inp = small_inputs(rng)
    xa, ca, _ = refine_forward(inp, params)
    xb, cb, _ = refine_forward(inp, plain)
    assert xa.tobytes() == xb.tobytes() and ca.tobytes() == cb.tobytes()


# ----------------------------------------------------------------- training


def test_candidate_loss_large_tau_is_log_k(rng):
    params = with_random_adapters(MatcherParams.init(SMALL, seed=6), rng)
    loss, _, _ = candidate_loss([small_inputs(rng, B=4)], params, tau=1e9)
    assert loss == pytest.approx(math.log(4), abs=1e-6)


def test_select_candidates():
    r = ranking([f"r{i}" for i in range(6)], ["x", "t", "y", "t", "z", "w"])
    assert select_candidates(r, "t", 6) == ["r1", "r0", "r2", "r4"]
    assert select_candidates(r, "t", 6, pool=True) == ["r1", "r0", "r2", "r4", "r5"]
    assert select_candidates(r, "t", 3) is None
    assert select_candidates(r, "q", 6) is None


def tiny_scorer(rng):
    ex = ExtractorParams.init(ExtractorConfig(dim=8, heads=2, blocks=2, stride=4, ffn_hidden=8), seed=0)
    gallery = {f"g{i}": rng.random((16, 16, 3)).astype(np.float32) for i in range(5)}
    return PairScorer(ex, MatcherParams.init(SMALL, seed=0), gallery), gallery


def test_zero_epochs_leave_params_unchanged(rng):
    scorer, gallery = tiny_scorer(rng)
    sample = TrainingSample("q", [("q/0", gallery["g0"] * 0.9)], ["g0", "g1", "g2", "g3"])
    params, stats = train_matcher_adapters([sample], scorer, MatcherTrainConfig(epochs=0))
    assert all(params.arrays[k].tobytes() == v.tobytes() for k, v in scorer.matcher.arrays.items())
    assert stats["losses"] == []


def test_training_moves_only_trainable_arrays(rng):
    scorer, gallery = tiny_scorer(rng)
    ex_before = {k: v.tobytes() for k, v in scorer.extractor.arrays.items()}
    samples = [TrainingSample(f"q{i}", [(f"q{i}/0", gallery[f"g{i}"] * 0.9)], [f"g{i}"] + [f"g{j}" for j in range(5) if j != i]) for i in range(3)]
    params, stats = train_matcher_adapters(samples, scorer, MatcherTrainConfig(epochs=2, lr=0.05))
    changed = {k for k, v in params.arrays.items() if v.tobytes() != scorer.matcher.arrays[k].tobytes()}
    assert changed and all(k.startswith("head.") or ".adapter." in k for k in changed)
    assert {k: v.tobytes() for k, v in scorer.extractor.arrays.items()} == ex_before
    assert len(stats["losses"]) == 2 and stats["used"] == 3


def test_training_is_seed_deterministic(rng):
    scorer, gallery = tiny_scorer(rng)
    samples = [TrainingSample("q", [("q/0", gallery["g2"] * 0.8)], ["g2", "g0", "g1", "g3", "g4"])]
    a, _ = train_matcher_adapters(samples, scorer, MatcherTrainConfig(epochs=2, seed=4))
    b, _ = train_matcher_adapters(samples, scorer, MatcherTrainConfig(epochs=2, seed=4))
    assert all(a.arrays[k].tobytes() == b.arrays[k].tobytes() for k in a.arrays)


def test_training_without_eligible_queries(rng):
    scorer, _ = tiny_scorer(rng)
    with pytest.raises(DataError):
        train_matcher_adapters([TrainingSample("q", [], None)], scorer)


def test_checkpoint_roundtrip():
    p = MatcherParams.init(SMALL, seed=8)
    ck = p.to_checkpoint()
    assert ck["format"] == "matcher-v1"
    q = MatcherParams.from_checkpoint(ck)
    assert q.config == p.config
    assert all(q.arrays[k].tobytes() == v.tobytes() for k, v in p.arrays.items())
