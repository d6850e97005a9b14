import math

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from kwscreen.classifier import (
    BCE,
    AslParams,
    ClassifierModel,
    FeatureRecord,
    TrainHyper,
    asl_loss,
    average_precision,
    bce_loss,
    forward,
    init_model,
    load_features,
    load_model,
    mean_average_precision,
    model_from_bytes,
    model_to_bytes,
    predict_topr,
    save_features,
    save_model,
    sigmoid,
    topr,
    train,
)
from kwscreen.corpus import AnnotationSet
from kwscreen.errors import (
    CorruptFeatures,
    CorruptModel,
    DimensionMismatch,
    DivergenceError,
    DomainError,
    JoinError,
    NoPositives,
)

from .oracles import asl_scalar, brute_map

# frozen from a 30-digit independent evaluation
ASL_NEG_P09 = 1.16506881071804185
ASL_NEG_P09_GRAD = 8.20617423390681439
BCE_NEG_P09 = 2.30258509299404568
SIGMOID_09 = 0.71094950262500396
LN2 = 0.69314718055994531


def test_asl_examples():
    loss, grad = asl_loss([0.5], {0}, AslParams(0, 3, 0.05))
    assert loss == pytest.approx(LN2, abs=1e-12)
    assert grad[0] == pytest.approx(-2.0)

    loss, grad = asl_loss([0.9], set(), AslParams(0, 3, 0.05))
    assert loss == pytest.approx(ASL_NEG_P09, rel=1e-12)
    assert grad[0] == pytest.approx(ASL_NEG_P09_GRAD, rel=1e-10)


def test_asl_dead_zone_is_exactly_zero():
    loss, grad = asl_loss([0.04, 0.05, 1e-9], set(), AslParams(0, 3, 0.05))
    assert loss == 0.0
    assert np.all(grad == 0.0)


def test_bce_examples():
    assert bce_loss([0.5], {0})[0] == pytest.approx(LN2, abs=1e-12)
    assert bce_loss([0.9], set())[0] == pytest.approx(BCE_NEG_P09, rel=1e-12)


def test_loss_rejects_nan():
    with pytest.raises(DomainError):
        asl_loss([np.nan, 0.2], {0})
    with pytest.raises(DomainError):
        bce_loss([np.inf], set())


def test_loss_clamps_extremes():
    loss, grad = asl_loss([0.0, 1.0], {0})
    assert np.isfinite(loss) and np.all(np.isfinite(grad))
    assert loss == pytest.approx(-math.log(1e-7) + asl_scalar(1 - 1e-7, 0, 0, 3, 0.05), rel=1e-9)


def test_labels_as_vector_or_set_agree():
    p = [0.2, 0.7, 0.9]
    a = asl_loss(p, {1, 2})
    b = asl_loss(p, np.array([0.0, 1.0, 1.0]))
    assert a[0] == b[0] and np.array_equal(a[1], b[1])


instances = st.tuples(
    hnp.arrays(np.float64, st.integers(1, 8), elements=st.floats(0.05, 0.95)),
    st.floats(0, 4),
    st.floats(0, 4),
    st.floats(0, 0.3),
    st.integers(0, 2**16),
)


@given(instances)
def test_asl_matches_scalar_oracle(inst):
    p, ap, am, delta, seed = inst
    y = np.random.default_rng(seed).integers(0, 2, size=p.size)
    loss, _ = asl_loss(p, y.astype(float), AslParams(ap, am, delta))
    expected = sum(asl_scalar(pi, yi, ap, am, delta) for pi, yi in zip(p, y))
    assert loss == pytest.approx(expected, rel=1e-10, abs=1e-12)


@given(instances)
def test_asl_gradient_matches_finite_differences(inst):
    p, ap, am, delta, seed = inst
    y = np.random.default_rng(seed).integers(0, 2, size=p.size)
    h = 1e-5
    # the shifted branch is non-smooth at p == delta; stay away from it
    assume(np.all(np.abs(p - delta) > 1e-2))
    params = AslParams(ap, am, delta)
    _, grad = asl_loss(p, y.astype(float), params)
    for i in range(p.size):
        lo, hi = p.copy(), p.copy()
        lo[i] -= h
        hi[i] += h
        fd = (asl_loss(hi, y.astype(float), params)[0] - asl_loss(lo, y.astype(float), params)[0]) / (2 * h)
        assert abs(grad[i] - fd) <= 1e-4 * max(abs(fd), 1e-3)


def test_asl_degenerates_to_bce():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(1, 10))
        p = rng.uniform(0, 1, n)
        y = rng.integers(0, 2, n).astype(float)
        la, ga = asl_loss(p, y, AslParams(0, 0, 0))
        lb, gb = bce_loss(p, y)
        assert abs(la - lb) <= 1e-9
        np.testing.assert_allclose(ga, gb, rtol=1e-9)


def test_asl_params_validation():
    with pytest.raises(Exception):
        AslParams(-1, 3, 0.05)
    with pytest.raises(Exception):
        AslParams(0, 3, 1.0)


# -- forward / top-R ------------------------------------------------------------


def test_forward_examples():
    m = ClassifierModel(np.zeros((3, 4)), np.zeros(3), "image")
    np.testing.assert_array_equal(forward(m, np.arange(4.0)), [0.5, 0.5, 0.5])
    m = ClassifierModel(np.zeros((1, 2)), np.array([30.0]), "image")
    assert abs(forward(m, [1.0, -1.0])[0] - 1.0) <= 1e-9
    m = ClassifierModel(np.array([[1.0]]), np.array([0.0]), "text")
    assert forward(m, [0.9])[0] == pytest.approx(SIGMOID_09, rel=1e-14)
    with pytest.raises(DimensionMismatch):
        forward(m, [1.0, 2.0])


def test_sigmoid_stable_at_extremes():
    z = np.array([-1000.0, 0.0, 1000.0])
    np.testing.assert_array_equal(sigmoid(z), [0.0, 0.5, 1.0])


def test_topr_examples():
    assert topr([0.9, 0.1, 0.8], 2).tolist() == [0, 2]
    assert topr([0.5, 0.5], 1).tolist() == [0]
    assert topr([0.1, 0.3, 0.2], 5).tolist() == [1, 2, 0]


@given(hnp.arrays(np.float64, st.integers(1, 30), elements=st.sampled_from([0.0, 0.1, 0.5, 0.7, 1.0])), st.integers(1, 30))
def test_topr_nesting_and_order(p, R):
    a, b = topr(p, R).tolist(), topr(p, R + 1).tolist()
    assert b[: len(a)] == a
    assert len(a) == min(R, p.size)
    expected = sorted(range(p.size), key=lambda i: (-p[i], i))[:R]
    assert a == expected


def test_predict_topr_record():
    m = ClassifierModel(np.eye(3), np.zeros(3), "image")
    pred = predict_topr(m, [0.0, 2.0, 1.0], 2, "s")
    assert pred.top_r == (1, 2) and pred.sample_id == "s"


# -- mAP ------------------------------------------------------------------------


def test_ap_example():
    assert average_precision(np.array([0.9, 0.5, 0.1]), np.array([1, 0, 1])) == pytest.approx(5 / 6)
    assert mean_average_precision([[0.9], [0.5], [0.1]], [{0}, set(), {0}]) == pytest.approx(5 / 6)


def test_map_perfect_and_identity():
    Y = [{0, 2}, {1}, set(), {2}]
    P = np.zeros((4, 3))
    for i, s in enumerate(Y):
        P[i, list(s)] = 1.0
    assert mean_average_precision(P, Y) == 1.0
    assert mean_average_precision(P * 0.6 + 0.2, Y) == 1.0


def test_map_requires_positives():
    with pytest.raises(NoPositives):
        mean_average_precision([[0.3], [0.4]], [set(), set()])


def test_map_accepts_annotation_sets():
    anns = [AnnotationSet("a", "image", frozenset({0})), AnnotationSet("b", "image", frozenset())]
    assert mean_average_precision([[0.9], [0.1]], anns) == 1.0


@given(st.integers(1, 20), st.integers(1, 6), st.integers(0, 2**32 - 1), st.booleans())
def test_map_matches_brute_force(n, L, seed, coarse):
    rng = np.random.default_rng(seed)
    P = rng.uniform(size=(n, L))
    if coarse:
        P = np.round(P, 1)  # force ties
    Y = [set(np.flatnonzero(rng.random(L) < 0.3).tolist()) for _ in range(n)]
    if not any(Y):
        Y[0] = {0}
    assert mean_average_precision(P, Y) == pytest.approx(brute_map(P.tolist(), Y), abs=1e-12)


def test_map_matches_sklearn_without_ties():
    metrics = pytest.importorskip("sklearn.metrics")
    rng = np.random.default_rng(3)
    P = rng.uniform(size=(50, 8))
    Y = rng.random((50, 8)) < 0.3
    Y[0] = True
    ours = mean_average_precision(P, [set(np.flatnonzero(r).tolist()) for r in Y])
    assert ours == pytest.approx(metrics.average_precision_score(Y, P, average="macro"), abs=1e-12)


# -- training -------------------------------------------------------------------


def _toy_set():
    truth = [{0}, {1}, {0, 1}, {0}]
    feats = [FeatureRecord(f"s{i}", "image", np.eye(3)[[0, 1, 2, 0][i]] + 0) for i in range(4)]
    # sample 2 carries both labels; give it its own one-hot slot
    anns = [AnnotationSet(f"s{i}", "image", frozenset(s)) for i, s in enumerate(truth)]
    return feats, anns, truth


def test_toy_convergence_exact_match():
    feats, anns, truth = _toy_set()
    m = train(feats, anns, 2, AslParams(), TrainHyper(lr=0.5, epochs=200, batch_size=128))
    for f, s in zip(feats, truth):
        assert set(predict_topr(m, f.vector, len(s)).top_r) == s
    assert all(b <= a + 1e-12 for a, b in zip(m.history, m.history[1:]))


def test_zero_epochs_returns_initialization():
    feats, anns, _ = _toy_set()
    m = train(feats, anns, 2, BCE, TrainHyper(epochs=0, seed=4))
    assert m == init_model(2, 3, "image", seed=4)
    assert m.history == []


def test_training_is_bit_reproducible():
    rng = np.random.default_rng(1)
    feats = [FeatureRecord(f"x{i}", "text", rng.standard_normal(6)) for i in range(40)]
    anns = [AnnotationSet(f"x{i}", "text", frozenset(rng.choice(5, 2, replace=False).tolist())) for i in range(40)]
    h = TrainHyper(lr=0.2, epochs=5, batch_size=8, seed=9)
    a, b = train(feats, anns, 5, AslParams(), h), train(feats, anns, 5, AslParams(), h)
    assert a == b and a.history == b.history
    assert train(feats, anns, 5, AslParams(), TrainHyper(lr=0.2, epochs=5, batch_size=8, seed=10)) != a


def test_train_join_errors():
    feats, anns, _ = _toy_set()
    with pytest.raises(JoinError):
        train(feats, anns[:2], 2)
    mixed = feats + [FeatureRecord("t", "text", np.zeros(3))]
    with pytest.raises(JoinError):
        train(mixed, anns + [AnnotationSet("t", "text", frozenset())], 2)


def test_train_divergence():
    # saturating sigmoids stop plain steps from blowing up; an overshooting decay does
    feats = [FeatureRecord("a", "image", [1.0, -1.0]), FeatureRecord("b", "image", [-1.0, 1.0])]
    anns = [AnnotationSet("a", "image", frozenset({0})), AnnotationSet("b", "image", frozenset())]
    with pytest.raises(DivergenceError):
        train(feats, anns, 1, BCE, TrainHyper(lr=1e100, epochs=50, weight_decay=1.0))


# -- files ----------------------------------------------------------------------


def test_model_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    m = ClassifierModel(rng.standard_normal((4, 5)), rng.standard_normal(4), "text", "abcdef0123456789")
    save_model(tmp_path / "m.kwcm", m)
    assert load_model(tmp_path / "m.kwcm") == m
    data = model_to_bytes(m)
    bad = bytearray(data)
    bad[30] ^= 0xFF
    with pytest.raises(CorruptModel):
        model_from_bytes(bytes(bad))
    with pytest.raises(CorruptModel):
        model_from_bytes(data[:-5])


@pytest.mark.parametrize("binary", [False, True])
def test_features_round_trip(tmp_path, binary):
    rng = np.random.default_rng(0)
    recs = [FeatureRecord(f"s{i}", "image" if i % 2 else "text", rng.standard_normal(3)) for i in range(5)]
    save_features(tmp_path / "f", recs, binary=binary)
    back = load_features(tmp_path / "f")
    assert [r.sample_id for r in back] == [r.sample_id for r in recs]
    assert [r.modality for r in back] == [r.modality for r in recs]
    for a, b in zip(back, recs):
        assert a.vector.tobytes() == b.vector.tobytes()


def test_corrupt_binary_features(tmp_path):
    recs = [FeatureRecord("s", "image", np.ones(3))]
    save_features(tmp_path / "f", recs, binary=True)
    raw = (tmp_path / "f").read_bytes()
    (tmp_path / "f").write_bytes(raw[:-1] + bytes([raw[-1] ^ 1]))
    with pytest.raises(CorruptFeatures):
        load_features(tmp_path / "f")


def test_feature_record_validation():
    with pytest.raises(DomainError):
        FeatureRecord("s", "image", [np.nan])
    with pytest.raises(DimensionMismatch):
        FeatureRecord("s", "image", np.ones((2, 2)))
