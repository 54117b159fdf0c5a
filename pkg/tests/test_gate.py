import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import erf

from georank.errors import ConfigError, ShapeError
from georank.gate import (
    GateLabel,
    GateParams,
    GateTrainConfig,
    decide_from_logits,
    gate_decide,
    gate_forward,
    gate_loss,
    m3at_label,
    train_gate,
    weighted_cross_entropy,
)
from georank.numerics import grad_check
from georank.retrieval import Embedding, Ranking


def ranking_with_truth_at(pos, n=5, qid="q"):
    classes = [f"x{i}" for i in range(n)]
    if pos is not None:
        classes[pos - 1] = "t"
    return Ranking(qid, list(classes), [0.0] * n, classes)


def embeddings(x):
    return [Embedding(v, f"q{i}") for i, v in enumerate(x)]


def labels(y):
    return [GateLabel(f"q{i}", int(v), 0.0, 0.0) for i, v in enumerate(y)]


# ------------------------------------------------------------------- forward


def test_zero_classifier_gives_zero_logits(rng):
    p = GateParams.init(8, 4, seed=1)
    p.classifier.weight[:] = 0
    p.classifier.bias[:] = 0
    logits, _ = gate_forward(rng.standard_normal(8).astype(np.float32), p)
    np.testing.assert_array_equal(logits, [0.0, 0.0])


def test_constant_query_uses_bias_path_only():
    p = GateParams.init(8, 4, seed=2)
    logits, _ = gate_forward(np.full(8, 3.0, np.float32), p)
    h = np.asarray(p.hidden.bias, np.float64)
    g = h * 0.5 * (1 + erf(h / np.sqrt(2)))
    np.testing.assert_allclose(logits, g @ p.classifier.weight + p.classifier.bias, rtol=1e-5, atol=1e-6)


def test_gate_dim_mismatch():
    with pytest.raises(ShapeError):
        gate_forward(np.zeros(5, np.float32), GateParams.init(8, 4))


def test_gate_checkpoint_roundtrip():
    p = GateParams.init(8, 4, seed=9)
    ck = p.to_checkpoint()
    assert ck["format"] == "gate-v1"
    assert ck["positive_class_index"] == 1
    q = GateParams.from_checkpoint(ck)
    for k, v in p.as_dict().items():
        assert q.as_dict()[k].tobytes() == v.tobytes()


# --------------------------------------------------------------------- labels


@pytest.mark.parametrize("before,after,y", [(4, 2, 1), (1, 1, 0), (2, 3, 0), (None, 5, 1), (3, None, 0), (None, None, 0)])
def test_m3at_label_cases(before, after, y):
    lab = m3at_label(ranking_with_truth_at(before), ranking_with_truth_at(after), "t")
    assert lab.y == y
    assert lab.y == int(lab.rr_after > lab.rr_before)


@settings(max_examples=200, deadline=None)
@given(st.one_of(st.none(), st.integers(1, 6)), st.one_of(st.none(), st.integers(1, 6)))
def test_m3at_label_soundness(before, after):
    lab = m3at_label(ranking_with_truth_at(before, 6), ranking_with_truth_at(after, 6), "t")
    rr = lambda p: 0.0 if p is None else 1.0 / p
    assert lab.y == (1 if rr(after) - rr(before) > 0 else 0)


# -------------------------------------------------------------------- decide


@pytest.mark.parametrize("logits,use", [([2.0, -1.0], False), ([-1.0, 2.0], True), ([0.0, 0.0], False)])
def test_decide_cases(logits, use):
    assert decide_from_logits(logits) is use


@settings(max_examples=100, deadline=None)
@given(st.integers(-64, 64), st.integers(-64, 64), st.integers(-1024, 1024))
def test_decide_shift_invariant(a, b, c):
    # quarter-integers keep the shifted logits exact, ties included
    a, b, c = a / 4, b / 4, c / 4
    assert decide_from_logits([a, b]) == decide_from_logits([a + c, b + c])


def test_decide_threshold():
    assert decide_from_logits([0.0, 0.1], threshold=0.6) is False
    assert decide_from_logits([0.0, 1.0], threshold=0.6) is True


# ---------------------------------------------------------------------- loss


def test_weighted_ce_with_unit_weights_is_plain_ce(rng):
    logits = rng.standard_normal((6, 2))
    y = np.array([0, 1, 0, 1, 0, 1])
    loss, _ = weighted_cross_entropy(logits, y, (1.0, 1.0))
    logp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
    assert loss == pytest.approx(-logp[np.arange(6), y].mean(), abs=1e-6)


def test_weighted_ce_weights_positive_errors_more():
    logits = np.zeros((2, 2))
    logits[1] = [1.0, 0.0]  # positive sample scored wrong
    l_plain, _ = weighted_cross_entropy(logits, np.array([0, 1]), (1.0, 1.0))
    l_weighted, _ = weighted_cross_entropy(logits, np.array([0, 1]), (1.0, 4.0))
    assert l_weighted > l_plain


@pytest.mark.parametrize("dtype,tol", [(np.float32, 1e-3), (np.float64, 1e-5)])
def test_gate_weighted_ce_grad_check(rng, dtype, tol):
    x = rng.standard_normal((6, 8))
    y = np.array([0, 1, 1, 0, 0, 1])
    p = GateParams.init(8, 5, seed=4)

    def closure(arrays):
        return gate_loss(GateParams.from_dict(arrays), x.astype(dtype), y, (1.0, 4.0))

    assert grad_check(closure, p.as_dict(), dtype=dtype).max_rel_error < tol


# --------------------------------------------------------------------- train


def test_train_gate_separates_two_clusters():
    rng = np.random.default_rng(0)
    x = np.concatenate([rng.normal(-1, 0.3, (40, 8)), rng.normal(1, 0.3, (40, 8))])
    x[:, ::2] *= -1  # keep per-vector variance so LN does not erase the clusters
    y = np.array([0] * 40 + [1] * 40)
    gate, _ = train_gate(embeddings(x), labels(y), GateTrainConfig(epochs=2000, lr=0.05, momentum=0.0))
    pred = [gate_decide(v.astype(np.float32), gate) for v in x]
    assert np.mean(np.array(pred) == y) >= 0.99


def test_train_gate_single_class_warns_and_predicts_it():
    x = np.random.default_rng(1).standard_normal((10, 8))
    with pytest.warns(UserWarning):
        gate, _ = train_gate(embeddings(x), labels([1] * 10), GateTrainConfig(epochs=200))
    assert all(gate_decide(v.astype(np.float32), gate) for v in x)


def test_train_gate_is_deterministic():
    x = np.random.default_rng(2).standard_normal((12, 8))
    y = [0, 1] * 6
    a, la = train_gate(embeddings(x), labels(y), GateTrainConfig(epochs=50, seed=3))
    b, lb = train_gate(embeddings(x), labels(y), GateTrainConfig(epochs=50, seed=3))
    assert la == lb
    assert all(a.as_dict()[k].tobytes() == b.as_dict()[k].tobytes() for k in a.as_dict())


def test_raising_positive_weight_never_reduces_positive_predictions():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((40, 8))
    y = (x[:, 0] + 0.8 * rng.standard_normal(40) > 0.7).astype(int)
    counts = []
    for w in (1.0, 2.0, 4.0, 8.0):
        gate, _ = train_gate(embeddings(x), labels(y), GateTrainConfig(class_weights=(1.0, w), epochs=300, seed=0))
        counts.append(sum(gate_decide(v.astype(np.float32), gate) for v in x))
    assert counts == sorted(counts)


def test_train_config_validation():
    with pytest.raises(ConfigError):
        GateTrainConfig(class_weights=(1.0, -1.0))
