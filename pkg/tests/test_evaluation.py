import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

import oracles
import tiny
from ocgan.evaluation import (CropClassifier, DeskEncoder, FeatureStats, MetricsReport, StatsAccumulator,
                              all_crops, classification_accuracy, evaluate, extract_features, fid,
                              frechet_distance, inception_score, inception_score_from_probs, load_classifier,
                              save_classifier, scene_fid)
from ocgan.training import images_tensor, to_float


def stats(mean, cov, n=100):
    return FeatureStats(np.asarray(mean, float), np.asarray(cov, float), n)


def tr_sqrt_product(a, b):
    # eigenvalues of the (non-symmetric) product are real and non-negative for PSD inputs
    w = np.linalg.eigvals(a @ b)
    return np.sqrt(np.clip(w.real, 0, None)).sum()


# --------------------------------------------------------------------------- Frechet distance


def test_identical_distributions():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(500, 8))
    s = FeatureStats.from_features(x)
    assert frechet_distance(s, s) < 1e-8


def test_mean_shift_only():
    d = np.array([1.0, -2.0, 0.5])
    cov = np.diag([1.0, 2.0, 3.0])
    assert frechet_distance(stats(np.zeros(3), cov), stats(d, cov)) == pytest.approx(d @ d, abs=1e-10)


@pytest.mark.parametrize("D", [1, 4, 32])
def test_scaled_identity(D):
    assert frechet_distance(stats(np.zeros(D), 4 * np.eye(D)), stats(np.zeros(D), np.eye(D))) == pytest.approx(D)


@given(st.integers(0, 10_000))
def test_diagonal_matches_closed_form(seed):
    rng = np.random.default_rng(seed)
    D = 5
    ma, mb = rng.normal(size=D), rng.normal(size=D)
    va, vb = rng.uniform(0.1, 3, D), rng.uniform(0.1, 3, D)
    got = frechet_distance(stats(ma, np.diag(va)), stats(mb, np.diag(vb)))
    assert got == pytest.approx(oracles.frechet_diagonal(ma.tolist(), va.tolist(), mb.tolist(), vb.tolist()),
                                rel=1e-9, abs=1e-9)


@given(st.integers(0, 10_000))
def test_full_covariance_matches_product_eigenvalues(seed):
    rng = np.random.default_rng(seed)
    D = 6
    A, B = rng.normal(size=(D, D)), rng.normal(size=(D, D))
    ca, cb = A @ A.T + 0.1 * np.eye(D), B @ B.T + 0.1 * np.eye(D)
    ma, mb = rng.normal(size=D), rng.normal(size=D)
    want = (ma - mb) @ (ma - mb) + np.trace(ca) + np.trace(cb) - 2 * tr_sqrt_product(ca, cb)
    a, b = stats(ma, ca), stats(mb, cb)
    assert frechet_distance(a, b) == pytest.approx(want, rel=1e-7, abs=1e-8)
    assert frechet_distance(a, b) == pytest.approx(frechet_distance(b, a), rel=1e-8)


def test_rank_deficient_covariance_is_fine():
    v = np.array([[1.0, 1.0], [1.0, 1.0]])
    assert math.isfinite(frechet_distance(stats([0, 0], v), stats([0, 0], np.eye(2))))


def test_non_psd_rejected():
    with pytest.raises(ValueError):
        frechet_distance(stats([0, 0], [[1, 0], [0, -1]]), stats([0, 0], np.eye(2)))
    with pytest.raises(ValueError):
        frechet_distance(stats([0, 0], np.eye(2)), stats([0, 0, 0], np.eye(3)))


def test_sampled_estimate_within_five_percent():
    rng = np.random.default_rng(0)
    D, n = 64, 2048
    d = np.full(D, 1.0)
    a = rng.normal(size=(n, D))
    b = d + 2 * rng.normal(size=(n, D))
    want = d @ d + D  # |d|^2 + tr(I + 4I - 2*2I)
    got = frechet_distance(FeatureStats.from_features(a), FeatureStats.from_features(b))
    assert abs(got - want) / want < 0.05


def test_too_few_samples():
    with pytest.raises(ValueError):
        FeatureStats.from_features(np.zeros((1, 3)))


# --------------------------------------------------------------------------- streaming stats


def test_accumulator_matches_batch_statistics():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(300, 7)) * 3 + 1
    ref = FeatureStats.from_features(x)
    acc = StatsAccumulator(7).update(x[:100]).merge(StatsAccumulator(7).update(x[100:]))
    s = acc.stats()
    assert np.allclose(s.mean, ref.mean) and np.allclose(s.cov, ref.cov) and s.n == 300


@given(st.integers(0, 1000))
def test_accumulator_order_and_grouping(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(60, 4))
    perm = rng.permutation(60)
    a = StatsAccumulator(4).update(x).stats()
    parts = [StatsAccumulator(4).update(x[perm][k:k + 20]) for k in (0, 20, 40)]
    left = parts[0].merge(parts[1]).merge(parts[2]).stats()
    right = parts[0].merge(parts[1].merge(parts[2])).stats()
    for s in (left, right):
        assert np.allclose(s.mean, a.mean) and np.allclose(s.cov, a.cov)


# --------------------------------------------------------------------------- image metrics


@pytest.fixture(scope="module")
def real():
    ds = tiny.dataset(120, seed=4)
    recs = ds.train[:64]
    return to_float(images_tensor(recs)), [r.layout for r in recs]


def test_desk_encoder_is_fixed():
    a, b, c = DeskEncoder(seed=0), DeskEncoder(seed=0), DeskEncoder(seed=1)
    x = torch.rand(4, 3, 64, 64)
    assert torch.equal(a(x), b(x)) and not torch.equal(a(x), c(x))
    assert a.encoder_id != c.encoder_id
    a.train()
    assert not a.training


def test_fid_and_scene_fid_of_identical_sets(real):
    images, layouts = real
    enc = DeskEncoder()
    assert fid(images, images, enc) < 1e-6
    assert scene_fid(images, layouts, images, layouts, enc) < 1e-3


def test_scene_fid_ignores_image_order(real):
    images, layouts = real
    enc = DeskEncoder()
    half = len(layouts) // 2
    perm = list(range(half, len(layouts))) + list(range(half))
    other = images[perm]
    a = scene_fid(images, layouts, images, layouts, enc)
    b = scene_fid(images, layouts, other, [layouts[i] for i in perm], enc)
    assert abs(a - b) < 1e-3


def test_scene_fid_sees_objects_that_fid_misses(real):
    # same images, but each one paired with another image's layout: whole-image FID cannot tell
    images, layouts = real
    enc = DeskEncoder()
    shifted = images.roll(1, 0)
    assert fid(images, shifted, enc) < 1e-6
    assert scene_fid(images, layouts, shifted, layouts, enc) > 0.05


def test_crop_counts(real):
    images, layouts = real
    crops, labels = all_crops(images, layouts, 32)
    assert len(crops) == sum(len(l) for l in layouts) == len(labels)
    with pytest.raises(ValueError):
        all_crops(images[:3], layouts, 32)


def test_inception_score_bounds():
    C = 6
    uniform = np.full((60, C), 1 / C)
    assert inception_score_from_probs(uniform, 5)[0] == pytest.approx(1.0)
    onehot = np.eye(C)[np.arange(60) % C]
    mean, std = inception_score_from_probs(onehot, 5)
    assert mean == pytest.approx(C) and std == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ValueError):
        inception_score_from_probs(uniform[:3], 5)


@given(st.integers(0, 1000))
def test_inception_score_range(seed):
    rng = np.random.default_rng(seed)
    p = rng.dirichlet(np.ones(5), size=50)
    m, _ = inception_score_from_probs(p, 5)
    assert 1 - 1e-9 <= m <= 5 + 1e-9


def test_inception_score_from_logits():
    logits = torch.eye(4).repeat(5, 1) * 100
    m, _ = inception_score(torch.zeros(20, 3, 8, 8), lambda x: logits[: len(x)], n_splits=1)
    assert m == pytest.approx(4.0, rel=1e-6)


class Oracle(torch.nn.Module):
    """Classifier that reads the answer from a lookup keyed on the crop's first pixel."""

    def __init__(self, answers):
        super().__init__()
        self.answers = answers

    def forward(self, x):
        return torch.nn.functional.one_hot(self.answers[: len(x)], 6).float()


def test_classification_accuracy_with_stub_classifiers(real):
    images, layouts = real
    _, labels = all_crops(images, layouts, 32)
    assert classification_accuracy(images, layouts, Oracle(labels)) == 1.0
    wrong = (labels + 1) % 6
    assert classification_accuracy(images, layouts, Oracle(wrong)) == 0.0
    const = torch.zeros_like(labels)
    assert classification_accuracy(images, layouts, Oracle(const)) == pytest.approx((labels == 0).double().mean().item())


def test_classifier_round_trip(tmp_path):
    m = CropClassifier(6, 8).eval()
    save_classifier(m, tmp_path / "c.pt")
    back = load_classifier(tmp_path / "c.pt")
    x = torch.rand(3, 3, 32, 32)
    assert torch.equal(m(x), back(x))


# --------------------------------------------------------------------------- report


def test_report_validation_and_round_trip(tmp_path, real):
    images, layouts = real
    rep = evaluate(images[:20], images[20:40], layouts[20:40], metrics=("fid", "is", "scenefid"), n_splits=2)
    assert rep.ca is None and rep.fid > 0 and rep.settings["n_splits"] == 2
    rep.save(tmp_path / "r.json")
    assert MetricsReport.load(tmp_path / "r.json") == rep
    with pytest.raises(ValueError):
        MetricsReport(fid=1.0).validate()
    with pytest.raises(ValueError):
        MetricsReport(fid=float("nan"), settings={"n_splits": 1, "n_real": 1, "n_fake": 1, "encoder_id": "x"}).validate()


def test_evaluate_argument_errors(real):
    images, layouts = real
    with pytest.raises(ValueError):
        evaluate(images[:4], images[:4], layouts[:4], metrics=("kid",))
    with pytest.raises(ValueError):
        evaluate(images[:4], images[:4], layouts[:4], metrics=("ca",))


def test_extract_features_batches_consistently(real):
    images, _ = real
    enc = DeskEncoder()
    a = extract_features(images[:10], enc, batch_size=3)
    b = extract_features(images[:10], enc, batch_size=10)
    assert np.allclose(a, b, atol=1e-6)
