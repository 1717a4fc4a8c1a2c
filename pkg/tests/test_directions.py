import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import basis
from facefactory.directions import (
    RECIPE_ATTRIBUTES,
    AnnotationError,
    DirectionFitError,
    LabeledLatent,
    SolverConfig,
    ToyAnnotator,
    fit_direction,
    harvest,
    logistic_regression,
    make_annotator,
    recipe_directions,
)
from facefactory.latent import LatentW
from facefactory.store import list_directions, load_direction
from facefactory.toy import ToyGenerator


def cosine(a, b):
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


def same_report(a, b):
    return (np.array_equal(a.direction.vector, b.direction.vector)
            and (a.train_accuracy, a.holdout_accuracy, a.sample_count, a.iterations)
            == (b.train_accuracy, b.holdout_accuracy, b.sample_count, b.iterations))


def isotropic_samples(n, label_fn, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for u in rng.standard_normal((n, 512)):
        out.append(LabeledLatent(LatentW.broadcast(u), int(label_fn(u)), 1.0))
    return out


class Alternating:
    """Stub annotator that labels images 1, 0, 1, 0, ... in call order."""

    name = "alternating"
    stochastic = True
    attributes = ("x",)

    def __init__(self):
        self._next = itertools.cycle([1.0, 0.0])

    def score(self, image, attribute):
        return next(self._next)


class Flaky(ToyAnnotator):
    name = "flaky"

    def __init__(self):
        super().__init__()
        self.calls = 0

    def score(self, image, attribute):
        self.calls += 1
        if self.calls % 10 == 0:
            raise AnnotationError("service timeout")
        return super().score(image, attribute)


@pytest.fixture(scope="module")
def smile_samples(toy64):
    return harvest(toy64, ToyAnnotator(), "smile", 2000, seed=0)


def test_harvest_class_balance(toy64):
    samples = harvest(toy64, ToyAnnotator(), "smile", 1000, seed=1)
    ratio = np.mean([s.label for s in samples])
    assert 0.35 <= ratio <= 0.65
    assert len(samples) == 1000 and samples.skipped == 0


def test_harvest_minimal_and_deterministic(toy64):
    assert len(harvest(toy64, Alternating(), "x", 2, seed=0)) == 2
    a = harvest(toy64, ToyAnnotator(), "age", 50, seed=4)
    b = harvest(toy64, ToyAnnotator(), "age", 50, seed=4)
    assert [s.label for s in a] == [s.label for s in b]
    assert harvest(toy64, ToyAnnotator(), "age", 50, seed=4, workers=4)[7].w.digest() == a[7].w.digest()


def test_harvest_errors(toy64):
    with pytest.raises(ValueError):
        harvest(toy64, ToyAnnotator(), "smile", 1, seed=0)
    with pytest.raises(DirectionFitError, match="single class"):
        harvest(toy64, ToyAnnotator(), "smile", 20, seed=0, threshold=1.1)
    with pytest.raises(AnnotationError):
        harvest(toy64, ToyAnnotator(), "freckles", 20, seed=0)
    with pytest.raises(AnnotationError):
        make_annotator("cloud-api")


def test_failed_annotations_are_skipped(toy64):
    samples = harvest(toy64, Flaky(), "smile", 100, seed=0)
    assert samples.skipped == 10
    assert len(samples) == 90


def test_labeled_latent_invariants(toy64):
    with pytest.raises(ValueError):
        LabeledLatent(toy64.w_avg, 2, 0.5)
    with pytest.raises(ValueError):
        LabeledLatent(toy64.w_avg, 1, 1.5)


def test_smile_direction_recovered(toy64, smile_samples):
    report = fit_direction(smile_samples, "smile")
    assert abs(cosine(report.direction.vector, toy64.directions["smile"])) >= 0.9
    assert report.holdout_accuracy >= 0.95
    assert np.linalg.norm(report.direction.vector) == pytest.approx(1.0, abs=1e-12)
    assert report.converged and not report.warnings
    assert report.sample_count == 2000


def test_fit_is_bitwise_deterministic(smile_samples):
    a = fit_direction(smile_samples, "smile")
    b = fit_direction(smile_samples, "smile")
    assert same_report(a, b)


def test_label_flip_negates_direction(smile_samples):
    flipped = [LabeledLatent(s.w, 1 - s.label, s.confidence) for s in smile_samples]
    a = fit_direction(smile_samples, "smile").direction.vector
    b = fit_direction(flipped, "smile").direction.vector
    assert cosine(a, b) <= -0.99


def test_separable_axis_recovered_within_five_degrees():
    # Noise-free labels sign(<e3, w>) on isotropic latents.
    e3 = basis(3)
    samples = isotropic_samples(20_000, lambda u: u @ e3 > 0)
    vec = fit_direction(samples, "e3").direction.vector
    assert np.degrees(np.arccos(np.clip(vec @ e3, -1, 1))) <= 5.0


def test_random_labels_give_chance_holdout():
    rng = np.random.default_rng(5)
    samples = isotropic_samples(2000, lambda u: rng.random() < 0.5, seed=6)
    report = fit_direction(samples, "noise")
    assert 0.4 <= report.holdout_accuracy <= 0.6


def test_fit_errors_and_small_sample_path():
    samples = isotropic_samples(10, lambda u: u[0] > 0)
    with pytest.raises(DirectionFitError):
        fit_direction([s for s in samples if s.label == 1], "x")
    with pytest.raises(DirectionFitError):
        fit_direction(samples[:1], "x")
    assert {s.label for s in samples} == {0, 1}
    report = fit_direction(samples, "x")
    assert "class-mean" in report.warnings[0]
    assert report.holdout_accuracy == report.train_accuracy
    assert np.linalg.norm(report.direction.vector) == pytest.approx(1.0, abs=1e-12)


def test_non_convergence_is_flagged_but_normalized():
    samples = isotropic_samples(200, lambda u: u[0] > 0)
    report = fit_direction(samples, "x", SolverConfig(max_iter=1))
    assert not report.converged
    assert any("converge" in w for w in report.warnings)
    assert np.linalg.norm(report.direction.vector) == pytest.approx(1.0, abs=1e-12)


def test_logistic_regression_matches_gradient_condition():
    # Independent check: at the optimum the regularized gradient vanishes.
    rng = np.random.default_rng(0)
    X = rng.standard_normal((300, 5))
    y = (X @ np.array([1.0, -2.0, 0.5, 0.0, 0.0]) + 0.3 * rng.standard_normal(300) > 0).astype(int)
    coef, bias, _, converged = logistic_regression(X, y, l2=1e-3, tol=1e-10)
    assert converged
    p = 1.0 / (1.0 + np.exp(-(X @ coef + bias)))
    assert np.abs(X.T @ (p - y) / 300 + 1e-3 * coef).max() < 1e-9
    assert abs(np.mean(p - y)) < 1e-9


def test_recipe_directions(tmp_path):
    toy = ToyGenerator(size=64)
    result = recipe_directions(toy, ToyAnnotator(), n=2000, seed=0, store=tmp_path)
    assert set(result.directions) == set(RECIPE_ATTRIBUTES)
    assert not result.errors
    alias = {"happy": "smile"}
    for name, d in result.directions.items():
        assert np.linalg.norm(d.vector) == pytest.approx(1.0, abs=1e-12)
        assert abs(cosine(d.vector, toy.directions[alias.get(name, name)])) >= 0.9
    assert list_directions(tmp_path) == sorted(RECIPE_ATTRIBUTES)
    assert np.array_equal(load_direction(tmp_path, "yaw").vector, result.directions["yaw"].vector)
    assert load_direction(tmp_path, "yaw").layer_range == (0, 8)
    again = recipe_directions(toy, ToyAnnotator(), n=2000, seed=0)
    assert all(same_report(again.reports[k], result.reports[k]) for k in result.reports)


def test_recipe_isolates_unsupported_attributes(toy64):
    class Partial(ToyAnnotator):
        name = "partial"

        def __init__(self):
            super().__init__()
            self.attributes = ("smile", "happy", "age")

    result = recipe_directions(toy64, Partial(), n=200, seed=0)
    assert set(result.directions) == {"happy", "age"}
    assert set(result.errors) == set(RECIPE_ATTRIBUTES) - {"happy", "age"}


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32), st.floats(0.1, 100))
def test_fitted_direction_has_unit_norm(seed, scale):
    rng = np.random.default_rng(seed)
    axis = rng.standard_normal(512)
    samples = isotropic_samples(60, lambda u: scale * (u @ axis) > 0, seed=seed)
    if len({s.label for s in samples}) < 2:
        return
    assert np.linalg.norm(fit_direction(samples, "p").direction.vector) == pytest.approx(1.0, abs=1e-12)
