"""Learn semantic attribute directions from labelled latents.

Faces are sampled from the generator, scored by an annotator, thresholded
into binary labels, and a logistic-regression classifier is fitted on the
row-averaged latent.  The classifier's weight vector, normalized to unit
length, is the attribute direction.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .generator import GeneratorBackend, RenderedImage
from .latent import DEFAULT_LAYER_RANGES, NUM_LAYERS, LatentW, SemanticDirection, sample_z
from .seeding import derive_seed

log = logging.getLogger(__name__)

RECIPE_ATTRIBUTES = ("happy", "angry", "surprise", "sad", "eye_openness", "age", "yaw", "pitch")


class AnnotationError(RuntimeError):
    pass


class DirectionFitError(ValueError):
    pass


class Annotator(Protocol):
    name: str
    attributes: Sequence[str]
    stochastic: bool

    def score(self, image: RenderedImage, attribute: str) -> float:
        """Attribute score in [0, 1]; raise ``AnnotationError`` on failure."""


class ToyAnnotator:
    """Reads the ground-truth attribute values from a toy render."""

    name = "toy"
    stochastic = False
    aliases = {"happy": "smile"}

    def __init__(self):
        from .toy import ATTRIBUTES

        self.attributes = tuple(ATTRIBUTES) + tuple(self.aliases)

    def score(self, image: RenderedImage, attribute: str) -> float:
        params = image.params or {}
        attrs = params.get("attributes")
        if attrs is None:
            raise AnnotationError("image has no toy side channel")
        key = self.aliases.get(attribute, attribute)
        if key not in attrs:
            raise AnnotationError(f"toy annotator cannot label {attribute!r}")
        return float(attrs[key])


ANNOTATORS = {"toy": ToyAnnotator}


def make_annotator(name: str) -> Annotator:
    try:
        return ANNOTATORS[name]()
    except KeyError:
        raise AnnotationError(f"unknown annotator {name!r}; choose from {sorted(ANNOTATORS)}") from None


@dataclass(frozen=True)
class LabeledLatent:
    w: LatentW
    label: int
    confidence: float

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label}")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence must lie in [0, 1], got {self.confidence}")


class Harvest(list):
    """A list of :class:`LabeledLatent` that also remembers how many were skipped."""

    def __init__(self, items=(), skipped: int = 0):
        super().__init__(items)
        self.skipped = skipped


def _label(score: float, threshold: float) -> tuple[int, float]:
    label = int(score >= threshold)
    confidence = score if label else 1.0 - score
    return label, float(np.clip(confidence, 0.0, 1.0))


def _render_sample(backend, seed, i):
    w = backend.map(sample_z(derive_seed(seed, "harvest", i)))
    return w, backend.synthesize(w)


def harvest_many(backend: GeneratorBackend, annotator: Annotator, attributes: Sequence[str], n: int, seed: int,
                 thresholds: dict | None = None, workers: int = 1) -> dict[str, Harvest]:
    """Sample ``n`` faces once and label them for every attribute.

    Sample ``i`` uses the seed ``derive_seed(seed, "harvest", i)``, so the
    result does not depend on ``workers``.  A failed annotation skips that
    sample for that attribute only.
    """
    if n < 2:
        raise ValueError(f"need n >= 2, got {n}")
    thresholds = thresholds or {}
    missing = [a for a in attributes if a not in annotator.attributes]
    if missing:
        raise AnnotationError(f"annotator {annotator.name!r} cannot label {missing}")
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            rendered = list(pool.map(lambda i: _render_sample(backend, seed, i), range(n)))
    else:
        rendered = [_render_sample(backend, seed, i) for i in range(n)]

    out = {}
    for attr in attributes:
        items, skipped = [], 0
        for w, image in rendered:
            try:
                score = annotator.score(image, attr)
            except Exception as exc:  # noqa: BLE001 - per-sample isolation
                log.debug("annotation failed for %s: %s", attr, exc)
                skipped += 1
                continue
            label, conf = _label(score, thresholds.get(attr, 0.5))
            items.append(LabeledLatent(w, label, conf))
        labels = {s.label for s in items}
        if len(labels) < 2:
            raise DirectionFitError(f"harvest for {attr!r} produced a single class ({labels or 'no samples'})")
        out[attr] = Harvest(items, skipped)
    return out


def harvest(backend: GeneratorBackend, annotator: Annotator, attribute: str, n: int, seed: int,
            threshold: float = 0.5, workers: int = 1) -> Harvest:
    return harvest_many(backend, annotator, [attribute], n, seed, {attribute: threshold}, workers)[attribute]


# -- fitting ------------------------------------------------------------------


@dataclass(frozen=True)
class SolverConfig:
    l2: float = 1e-3
    max_iter: int = 1000
    tol: float = 1e-8
    holdout_fraction: float = 0.2
    split_seed: int = 0


@dataclass(frozen=True)
class FitReport:
    direction: SemanticDirection
    train_accuracy: float
    holdout_accuracy: float
    sample_count: int
    converged: bool = True
    iterations: int = 0
    warnings: tuple = field(default=())


def _loss_terms(X, s, coef, bias, l2):
    margin = s * (X @ coef + bias)
    loss = np.mean(np.logaddexp(0.0, -margin)) + 0.5 * l2 * coef @ coef
    return loss, margin


def logistic_regression(X: np.ndarray, y: np.ndarray, l2: float = 1e-3, max_iter: int = 1000,
                        tol: float = 1e-8) -> tuple[np.ndarray, float, int, bool]:
    """L2-regularized logistic regression by damped Newton steps.

    Minimizes ``mean(log(1 + exp(-s (X w + b)))) + l2 / 2 ||w||^2`` with
    ``s = 2 y - 1``; the intercept is not penalized.  Stops when the largest
    gradient component drops below ``tol``.
    """
    X = np.asarray(X, dtype=np.float64)
    s = 2.0 * np.asarray(y, dtype=np.float64) - 1.0
    n, d = X.shape
    Xb = np.hstack([X, np.ones((n, 1))])
    theta = np.zeros(d + 1)
    reg = np.full(d + 1, l2)
    reg[-1] = 0.0
    loss, margin = _loss_terms(X, s, theta[:-1], theta[-1], l2)
    for it in range(1, max_iter + 1):
        p = 0.5 * (1.0 - np.tanh(0.5 * margin))  # sigmoid(-margin)
        grad = -(Xb.T @ (s * p)) / n + reg * theta
        if np.max(np.abs(grad)) < tol:
            return theta[:-1], float(theta[-1]), it - 1, True
        curv = p * (1.0 - p)
        hess = (Xb.T * curv) @ Xb / n + np.diag(reg)
        hess[-1, -1] += 1e-12
        step = np.linalg.solve(hess, grad)
        t = 1.0
        while True:
            cand = theta - t * step
            c_loss, c_margin = _loss_terms(X, s, cand[:-1], cand[-1], l2)
            if c_loss <= loss - 1e-4 * t * (grad @ step) or t < 1e-10:
                break
            t *= 0.5
        theta, loss, margin = cand, c_loss, c_margin
    p = 0.5 * (1.0 - np.tanh(0.5 * margin))
    grad = -(Xb.T @ (s * p)) / n + reg * theta
    return theta[:-1], float(theta[-1]), max_iter, bool(np.max(np.abs(grad)) < tol)


def _features(samples: Sequence[LabeledLatent]) -> tuple[np.ndarray, np.ndarray]:
    X = np.stack([s.w.rows.mean(axis=0) for s in samples])
    y = np.array([s.label for s in samples], dtype=np.int64)
    return X, y


def _accuracy(X, y, coef, bias) -> float:
    return float(np.mean(((X @ coef + bias) > 0.0).astype(np.int64) == y))


def fit_direction(samples: Sequence[LabeledLatent], attribute: str, solver: SolverConfig = SolverConfig(),
                  layer_range: tuple[int, int] | None = None) -> FitReport:
    """Fit a unit attribute direction from labelled latents.

    With fewer than 20 samples there is no holdout split and the direction is
    the normalized difference of class means.
    """
    if len(samples) < 2:
        raise DirectionFitError(f"need at least 2 samples, got {len(samples)}")
    X, y = _features(samples)
    if len(np.unique(y)) < 2:
        raise DirectionFitError(f"samples for {attribute!r} contain a single class")
    layer_range = layer_range or DEFAULT_LAYER_RANGES.get(attribute, (0, NUM_LAYERS))
    notes = []

    if len(samples) < 20:
        coef = X[y == 1].mean(axis=0) - X[y == 0].mean(axis=0)
        bias = -0.5 * (X[y == 1].mean(axis=0) + X[y == 0].mean(axis=0)) @ coef
        acc = _accuracy(X, y, coef, bias)
        notes.append("fewer than 20 samples: class-mean difference, no holdout")
        direction = SemanticDirection.from_raw(attribute, coef, layer_range, acc)
        return FitReport(direction, acc, acc, len(samples), True, 0, tuple(notes))

    rng = np.random.Generator(np.random.PCG64(solver.split_seed))
    order = rng.permutation(len(samples))
    n_hold = int(round(solver.holdout_fraction * len(samples)))
    hold, train = order[:n_hold], order[n_hold:]
    if len(np.unique(y[train])) < 2:
        raise DirectionFitError(f"training split for {attribute!r} contains a single class")
    coef, bias, iters, converged = logistic_regression(X[train], y[train], solver.l2, solver.max_iter, solver.tol)
    if not converged:
        notes.append(f"solver did not converge in {solver.max_iter} iterations")
        log.warning("direction %s: solver did not converge", attribute)
    train_acc = _accuracy(X[train], y[train], coef, bias)
    hold_acc = _accuracy(X[hold], y[hold], coef, bias) if n_hold else train_acc
    direction = SemanticDirection.from_raw(attribute, coef, layer_range, hold_acc)
    return FitReport(direction, train_acc, hold_acc, len(samples), converged, iters, tuple(notes))


@dataclass
class RecipeResult:
    directions: dict
    reports: dict
    errors: dict


def recipe_directions(backend: GeneratorBackend, annotator: Annotator, n: int = 2000, seed: int = 0,
                      solver: SolverConfig = SolverConfig(), attributes: Sequence[str] = RECIPE_ATTRIBUTES,
                      store=None, thresholds: dict | None = None) -> RecipeResult:
    """Fit every transformation direction; failures are collected, not raised."""
    from .store import save_direction

    result = RecipeResult({}, {}, {})
    usable = [a for a in attributes if a in annotator.attributes]
    for a in attributes:
        if a not in usable:
            result.errors[a] = f"annotator {annotator.name!r} cannot label {a!r}"
    if not usable:
        return result
    try:
        harvests = harvest_many(backend, annotator, usable, n, seed, thresholds)
    except DirectionFitError:
        harvests = {}
        for a in usable:
            try:
                harvests[a] = harvest(backend, annotator, a, n, seed, (thresholds or {}).get(a, 0.5))
            except Exception as exc:  # noqa: BLE001
                result.errors[a] = str(exc)
    for a, samples in harvests.items():
        try:
            report = fit_direction(samples, a, solver)
        except Exception as exc:  # noqa: BLE001
            result.errors[a] = str(exc)
            continue
        result.reports[a] = report
        result.directions[a] = report.direction
        if store is not None:
            save_direction(store, report.direction)
    return result
