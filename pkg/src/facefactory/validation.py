"""Data-quality checks: eye aspect ratio, landmarks, identity uniqueness and a
gender-classifier harness.

Every check returns a report object with ``to_dict()`` (JSON-ready) and
``to_text()`` (one human-readable paragraph).
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np

from .generator import GeneratorBackend, RenderedImage
from .latent import EditSpec, LatentW, SemanticDirection, edit_sequence, sample_z
from .metrics import Embedder, SimilarityMatrix, _embed_all, cosine_matrix

log = logging.getLogger(__name__)

LANDMARK_COUNT = 68
LEFT_EYE = slice(36, 42)
RIGHT_EYE = slice(42, 48)
# published blink endpoints (open -> closed) for two subjects; context only
REFERENCE_BLINK_EAR = ((0.44, 0.12), (0.41, 0.11))
REFERENCE_GENDER_ACCURACY = {"MobileNetV2": 0.94, "InceptionV3": 0.92}


class ValidationError(ValueError):
    pass


class HarnessError(ValueError):
    pass


# -- landmarks and EAR --------------------------------------------------------


class LandmarkSource(str, enum.Enum):
    TOY = "toy-ground-truth"
    EXTERNAL = "external-detector"


@dataclass(frozen=True)
class LandmarkSet:
    points: np.ndarray
    source: LandmarkSource = LandmarkSource.TOY

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64)
        if pts.shape != (LANDMARK_COUNT, 2):
            raise ValidationError(f"expected {LANDMARK_COUNT}x2 landmarks, got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValidationError("landmarks contain non-finite coordinates")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "source", LandmarkSource(self.source))


@dataclass(frozen=True)
class EarReading:
    left: float
    right: float

    @property
    def mean(self) -> float:
        return (self.left + self.right) / 2.0


def eye_aspect_ratio(eye: np.ndarray) -> float:
    """``(|p2 - p6| + |p3 - p5|) / (2 |p1 - p4|)`` for six eye points p1..p6."""
    p = np.asarray(eye, dtype=np.float64)
    span = np.linalg.norm(p[0] - p[3])
    if span < 1e-9:
        raise ValidationError(f"degenerate eye: corner distance {span:.3g}")
    return float((np.linalg.norm(p[1] - p[5]) + np.linalg.norm(p[2] - p[4])) / (2.0 * span))


def ear(landmarks) -> EarReading:
    """Eye aspect ratio of both eyes from a 68-point set.

    "Left" is the eye at indices 36-41 (image left), "right" is 42-47.
    """
    pts = landmarks.points if isinstance(landmarks, LandmarkSet) else LandmarkSet(landmarks).points
    return EarReading(eye_aspect_ratio(pts[LEFT_EYE]), eye_aspect_ratio(pts[RIGHT_EYE]))


@dataclass
class BlinkReport:
    coefficients: list
    ears: list
    passed: bool
    no_op: bool
    violations: list = field(default_factory=list)
    reference: tuple = REFERENCE_BLINK_EAR

    @property
    def initial(self) -> float:
        return self.ears[0]

    @property
    def final(self) -> float:
        return self.ears[-1]

    def to_dict(self) -> dict:
        return {
            "check": "blink",
            "passed": self.passed,
            "no_op": self.no_op,
            "coefficients": [float(c) for c in self.coefficients],
            "ear": [float(e) for e in self.ears],
            "initial": float(self.initial),
            "final": float(self.final),
            "violations": self.violations,
            "reference_endpoints": [list(r) for r in self.reference],
        }

    def to_text(self) -> str:
        status = "no-op" if self.no_op else ("PASS" if self.passed else "FAIL")
        ref = ", ".join(f"{a:.2f} -> {b:.2f}" for a, b in self.reference)
        return (f"blink {status}: EAR {self.initial:.3f} -> {self.final:.3f} over {len(self.ears)} frames"
                f" (published reference, not asserted: {ref})")


def blink_sweep_check(backend: GeneratorBackend, direction: SemanticDirection, frames: int = 6,
                      coeff_start: float = 0.0, coeff_end: float = -4.0, w: LatentW | None = None,
                      subject_seed: int = 0) -> BlinkReport:
    """Edit a subject from open to closed eyes and check EAR falls every frame."""
    from .toy import toy_landmarks

    if w is None:
        w = backend.map(sample_z(subject_seed))
    spec = EditSpec(direction, coeff_start, coeff_end, frames)
    coeffs = list(spec.coefficients())
    ears = [ear(toy_landmarks(backend, wi)).mean for wi in edit_sequence(w, spec)]
    if coeff_start == coeff_end:
        return BlinkReport(coeffs, ears, False, True)
    violations = [i for i in range(1, len(ears)) if not ears[i] < ears[i - 1]]
    return BlinkReport(coeffs, ears, not violations and len(ears) > 1, False, violations)


# -- landmark coverage --------------------------------------------------------


class LandmarkDetector(Protocol):
    name: str
    source: LandmarkSource

    def detect(self, image: RenderedImage) -> np.ndarray | None:
        """68x2 points, or ``None`` when no face is found."""


class ToyLandmarkDetector:
    """Reads the exact landmarks a toy render carries in its side channel."""

    name = "toy"
    source = LandmarkSource.TOY

    def detect(self, image: RenderedImage) -> np.ndarray | None:
        params = image.params or {}
        pts = params.get("landmarks")
        return None if pts is None else np.asarray(pts)


class DlibLandmarkDetector:
    """dlib's HOG face detector plus a 68-point shape predictor (optional)."""

    name = "dlib"
    source = LandmarkSource.EXTERNAL

    def __init__(self, predictor_path):
        try:
            import dlib
        except ImportError as exc:
            raise ValidationError("the dlib detector needs the 'dlib' package") from exc
        self._detector = dlib.get_frontal_face_detector()
        self._predictor = dlib.shape_predictor(str(predictor_path))

    def detect(self, image: RenderedImage) -> np.ndarray | None:
        faces = self._detector(np.ascontiguousarray(image.pixels), 1)
        if len(faces) == 0:
            return None
        shape = self._predictor(np.ascontiguousarray(image.pixels), faces[0])
        return np.array([[p.x, p.y] for p in shape.parts()], dtype=np.float64)


@dataclass
class LandmarkReport:
    entries: list

    @property
    def detection_rate(self) -> float:
        return sum(e["detected"] for e in self.entries) / len(self.entries) if self.entries else 0.0

    @property
    def containment_rate(self) -> float:
        return sum(e["inside"] for e in self.entries) / len(self.entries) if self.entries else 0.0

    def to_dict(self) -> dict:
        return {"check": "landmarks", "detection_rate": self.detection_rate,
                "containment_rate": self.containment_rate, "images": self.entries}

    def to_text(self) -> str:
        errors = sum(e["error"] is not None for e in self.entries)
        return (f"landmarks: {self.detection_rate:.1%} detected, {self.containment_rate:.1%} inside bounds "
                f"over {len(self.entries)} images ({errors} detector errors)")


def landmark_check(images: Sequence[RenderedImage], detector: LandmarkDetector,
                   ids: Sequence[str] | None = None) -> LandmarkReport:
    """Per-image detection, point count and in-bounds check.

    A detector that returns ``None`` counts as a miss; one that raises is
    recorded as a miss with its error message and the run continues.
    """
    ids = list(ids) if ids is not None else [str(i) for i in range(len(images))]
    entries = []
    for sample_id, image in zip(ids, images):
        entry = {"id": sample_id, "detected": False, "points": 0, "inside": False, "error": None}
        try:
            pts = detector.detect(image)
        except Exception as exc:  # noqa: BLE001 - per-image isolation
            entry["error"] = f"{type(exc).__name__}: {exc}"
            entries.append(entry)
            continue
        if pts is not None:
            pts = np.asarray(pts, dtype=np.float64)
            h, w = image.size
            entry["points"] = int(pts.shape[0]) if pts.ndim == 2 else 0
            entry["detected"] = pts.shape == (LANDMARK_COUNT, 2) and bool(np.all(np.isfinite(pts)))
            if entry["detected"]:
                entry["inside"] = bool(np.all((pts >= 0.0).all(axis=1) & (pts[:, 0] <= w) & (pts[:, 1] <= h)))
        entries.append(entry)
    return LandmarkReport(entries)


# -- identity uniqueness ------------------------------------------------------


class Verdict(str, enum.Enum):
    SEPARATED = "separated"
    OVERLAPPING = "overlapping"
    INCONCLUSIVE = "inconclusive"
    DEGENERATE = "degenerate"


@dataclass
class UniquenessReport:
    matrix: SimilarityMatrix
    intra: np.ndarray
    inter: np.ndarray
    margin: float
    verdict: Verdict
    notes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        def summary(x):
            return {"count": int(x.size), "min": float(x.min()), "mean": float(x.mean()), "max": float(x.max())}

        return {"check": "uniqueness", "verdict": self.verdict.value, "margin": float(self.margin),
                "intra": summary(self.intra), "inter": summary(self.inter), "notes": self.notes}

    def to_text(self) -> str:
        return (f"uniqueness {self.verdict.value}: margin {self.margin:+.4f} "
                f"(intra min {self.intra.min():.4f}, inter max {self.inter.max():.4f})"
                + (f"; {'; '.join(self.notes)}" if self.notes else ""))


def uniqueness_report(embedder: Embedder, subjects: Sequence[Sequence[RenderedImage]],
                      subject_ids: Sequence[str] | None = None, inconclusive_gap: float = 0.1) -> UniquenessReport:
    """Compare same-subject and cross-subject cosine scores.

    The margin is ``min(intra) - max(inter)``.  When no subject has two images
    the intra scores fall back to self-similarity and the verdict is
    ``degenerate``; when the intra and inter means differ by less than
    ``inconclusive_gap`` the embedding cannot tell subjects apart and the
    verdict is ``inconclusive``.
    """
    if len(subjects) < 2 or any(len(g) == 0 for g in subjects):
        raise ValidationError("need at least 2 subjects with at least one image each")
    subject_ids = list(subject_ids) if subject_ids is not None else [f"s{i}" for i in range(len(subjects))]
    ids, owner, images = [], [], []
    for sid, group in zip(subject_ids, subjects):
        for j, image in enumerate(group):
            ids.append(f"{sid}/{j}")
            owner.append(sid)
            images.append(image)
    emb = _embed_all(embedder, images, ids)
    scores = cosine_matrix(emb, emb)
    owner = np.array(owner)
    same = owner[:, None] == owner[None, :]
    off_diag = ~np.eye(len(ids), dtype=bool)
    intra = scores[same & off_diag]
    inter = scores[~same]
    notes = []
    degenerate = intra.size == 0
    if degenerate:
        intra = np.diag(scores).copy()
        notes.append("no subject has two images; intra scores are self-similarity")
    if np.any(inter >= 1.0 - 1e-9):
        notes.append("some distinct subjects have identical embeddings")
        degenerate = True
    margin = float(intra.min() - inter.max())
    if degenerate:
        verdict = Verdict.DEGENERATE
    elif intra.mean() - inter.mean() < inconclusive_gap:
        verdict = Verdict.INCONCLUSIVE
    elif margin > 0:
        verdict = Verdict.SEPARATED
    else:
        verdict = Verdict.OVERLAPPING
    return UniquenessReport(SimilarityMatrix(scores, tuple(ids), tuple(ids)), intra, inter, margin, verdict, notes)


# -- gender classifier harness ------------------------------------------------


class BinaryModel(Protocol):
    def fit_epoch(self, X: np.ndarray, y: np.ndarray, rng: np.random.Generator) -> None: ...

    def predict_proba(self, X: np.ndarray) -> np.ndarray: ...


class LinearProbe:
    """Logistic regression on standardized features, trained by minibatch SGD
    on binary cross-entropy."""

    def __init__(self, lr: float = 0.1, batch_size: int = 32, l2: float = 1e-4):
        self.lr = lr
        self.batch_size = batch_size
        self.l2 = l2
        self.coef = None
        self.bias = 0.0
        self._mu = None
        self._sd = None

    def _standardize(self, X):
        return (X - self._mu) / self._sd

    def fit_epoch(self, X, y, rng):
        if self.coef is None:
            self._mu = X.mean(axis=0)
            self._sd = X.std(axis=0) + 1e-8
            self.coef = np.zeros(X.shape[1])
        Xs = self._standardize(X)
        order = rng.permutation(len(y))
        for start in range(0, len(y), self.batch_size):
            idx = order[start:start + self.batch_size]
            p = _sigmoid(Xs[idx] @ self.coef + self.bias)
            err = p - y[idx]
            self.coef -= self.lr * (Xs[idx].T @ err / len(idx) + self.l2 * self.coef)
            self.bias -= self.lr * float(err.mean())

    def predict_proba(self, X):
        return _sigmoid(self._standardize(X) @ self.coef + self.bias)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _bce(p, y) -> float:
    p = np.clip(p, 1e-12, 1.0 - 1e-12)
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)))


def grey_features(image: RenderedImage, grid: int = 16) -> np.ndarray:
    from .metrics import PixelEmbedder

    return PixelEmbedder(grid).embed(image)


@dataclass
class ClassifierHarness:
    model_factory: Callable[[], BinaryModel] = LinearProbe
    epochs: int = 30
    loss: str = "binary-cross-entropy"
    optimizer: str = "sgd"
    seed: int = 0
    features: Callable[[RenderedImage], np.ndarray] = grey_features


@dataclass
class HarnessReport:
    train_accuracy: list
    train_loss: list
    test_accuracy: list
    test_loss: list
    final_test_accuracy: float
    train_size: int
    test_size: int
    reference: dict = field(default_factory=lambda: dict(REFERENCE_GENDER_ACCURACY))

    def to_dict(self) -> dict:
        return {"check": "gender", "final_test_accuracy": self.final_test_accuracy,
                "train_size": self.train_size, "test_size": self.test_size,
                "curves": {"train_accuracy": self.train_accuracy, "train_loss": self.train_loss,
                           "test_accuracy": self.test_accuracy, "test_loss": self.test_loss},
                "published_reference_not_asserted": self.reference}

    def to_text(self) -> str:
        return (f"gender classifier: test accuracy {self.final_test_accuracy:.3f} after {len(self.train_loss)} epochs "
                f"({self.train_size} train / {self.test_size} test)")


def _split(samples, features):
    images = [s[0] for s in samples]
    y = np.array([int(s[1]) for s in samples], dtype=np.float64)
    X = np.stack([features(im) for im in images])
    return images, X, y


def gender_harness_run(harness: ClassifierHarness, train_set: Sequence[tuple], test_set: Sequence[tuple]) -> HarnessReport:
    """Train the harness model on ``(image, label)`` pairs and score the test set.

    Raises :class:`HarnessError` if either set lacks a class or if any test
    image is byte-identical to a training image.
    """
    for name, data in (("train", train_set), ("test", test_set)):
        labels = {int(lbl) for _, lbl in data}
        if labels != {0, 1}:
            raise HarnessError(f"{name} set must contain both classes, has {sorted(labels)}")
    train_images, X_tr, y_tr = _split(train_set, harness.features)
    test_images, X_te, y_te = _split(test_set, harness.features)
    train_digests = {im.digest() for im in train_images}
    leaked = [i for i, im in enumerate(test_images) if im.digest() in train_digests]
    if leaked:
        raise HarnessError(f"{len(leaked)} test images also appear in the training set (first index {leaked[0]})")

    rng = np.random.Generator(np.random.PCG64(harness.seed))
    model = harness.model_factory()
    curves = {"tr_acc": [], "tr_loss": [], "te_acc": [], "te_loss": []}
    for _ in range(harness.epochs):
        model.fit_epoch(X_tr, y_tr, rng)
        p_tr = model.predict_proba(X_tr)
        p_te = model.predict_proba(X_te)
        curves["tr_acc"].append(float(np.mean((p_tr >= 0.5) == y_tr)))
        curves["tr_loss"].append(_bce(p_tr, y_tr))
        curves["te_acc"].append(float(np.mean((p_te >= 0.5) == y_te)))
        curves["te_loss"].append(_bce(p_te, y_te))
    final = curves["te_acc"][-1] if curves["te_acc"] else float("nan")
    return HarnessReport(curves["tr_acc"], curves["tr_loss"], curves["te_acc"], curves["te_loss"], final,
                         len(train_set), len(test_set))


def toy_gender_dataset(backend: GeneratorBackend, n: int, seed: int) -> list[tuple[RenderedImage, int]]:
    """``n`` toy renders labelled 1 when the ground-truth gender value is >= 0.5."""
    from .seeding import derive_seed

    out = []
    for i in range(n):
        image = backend.synthesize(backend.map(sample_z(derive_seed(seed, "gender", i))))
        out.append((image, int(image.params["attributes"]["gender"] >= 0.5)))
    return out


def shuffled_labels(samples: Sequence[tuple], seed: int) -> list[tuple]:
    rng = np.random.Generator(np.random.PCG64(seed))
    labels = rng.permutation([lbl for _, lbl in samples])
    return [(im, int(lbl)) for (im, _), lbl in zip(samples, labels)]

