"""Latent codes, semantic directions and the edit primitives.

All latents are held as float64 and are immutable: the backing arrays are
flagged read-only on construction and every operation returns a new object.

Seeds are turned into latents with numpy's ``PCG64`` bit generator and
``Generator.standard_normal`` (ziggurat).  Both are specified and stable across
platforms, so a stored 64-bit seed is enough to regenerate a ``LatentZ``.
"""

from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass, field

import numpy as np

NUM_LAYERS = 18
LATENT_DIM = 512
LATENT_SHAPE = (NUM_LAYERS, LATENT_DIM)

_UINT64_MAX = 2**64 - 1


def _frozen(array, shape=None, name="array"):
    out = np.array(array, dtype=np.float64, copy=True)
    if shape is not None and out.shape != tuple(shape):
        raise ValueError(f"{name} must have shape {tuple(shape)}, got {out.shape}")
    if not np.all(np.isfinite(out)):
        raise ValueError(f"{name} contains non-finite entries")
    out.setflags(write=False)
    return out


class LatentSource(str, enum.Enum):
    MAPPED = "mapped-from-z"
    INVERTED = "inverted-from-image"
    EDITED = "edited"


@dataclass(frozen=True)
class LatentZ:
    values: np.ndarray
    seed: int

    def __post_init__(self):
        if not 0 <= int(self.seed) <= _UINT64_MAX:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {self.seed}")
        object.__setattr__(self, "values", _frozen(self.values, (LATENT_DIM,), "z"))


@dataclass(frozen=True)
class LatentW:
    rows: np.ndarray
    source: LatentSource = LatentSource.MAPPED

    def __post_init__(self):
        object.__setattr__(self, "rows", _frozen(self.rows, LATENT_SHAPE, "w"))
        object.__setattr__(self, "source", LatentSource(self.source))

    @classmethod
    def broadcast(cls, vector, source=LatentSource.MAPPED) -> "LatentW":
        """Repeat a single 512-vector on every layer."""
        vector = np.asarray(vector, dtype=np.float64)
        if vector.shape != (LATENT_DIM,):
            raise ValueError(f"expected a {LATENT_DIM}-vector, got shape {vector.shape}")
        return cls(np.tile(vector, (NUM_LAYERS, 1)), source)

    def mean_row(self, lo: int = 0, hi: int = NUM_LAYERS) -> np.ndarray:
        return self.rows[lo:hi].mean(axis=0)

    def digest(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.rows, dtype="<f8").tobytes()).hexdigest()


def _check_range(layer_range) -> tuple[int, int]:
    lo, hi = (int(v) for v in layer_range)
    if not 0 <= lo < hi <= NUM_LAYERS:
        raise ValueError(f"layer range must satisfy 0 <= lo < hi <= {NUM_LAYERS}, got [{lo}, {hi})")
    return lo, hi


@dataclass(frozen=True)
class SemanticDirection:
    """A unit direction in W for one attribute.

    ``vector`` is either a 512-vector, applied identically to every row in
    ``layer_range``, or a full (18, 512) matrix applied row-wise.  For the
    matrix form the unit norm is the Frobenius norm of the whole matrix.
    """

    name: str
    vector: np.ndarray
    layer_range: tuple[int, int] = (0, NUM_LAYERS)
    classifier_accuracy: float = float("nan")

    def __post_init__(self):
        vec = _frozen(self.vector, name=f"direction {self.name!r}")
        if vec.shape not in ((LATENT_DIM,), LATENT_SHAPE):
            raise ValueError(f"direction must be shaped ({LATENT_DIM},) or {LATENT_SHAPE}, got {vec.shape}")
        norm = float(np.linalg.norm(vec))
        if abs(norm - 1.0) > 1e-9:
            raise ValueError(f"direction {self.name!r} must have unit norm, got {norm!r}")
        acc = float(self.classifier_accuracy)
        if not (np.isnan(acc) or 0.0 <= acc <= 1.0):
            raise ValueError(f"classifier_accuracy must lie in [0, 1], got {acc}")
        object.__setattr__(self, "vector", vec)
        object.__setattr__(self, "layer_range", _check_range(self.layer_range))
        object.__setattr__(self, "classifier_accuracy", acc)

    @classmethod
    def from_raw(cls, name, vector, layer_range=(0, NUM_LAYERS), classifier_accuracy=float("nan")):
        """Normalize ``vector`` to unit length and wrap it."""
        vector = np.asarray(vector, dtype=np.float64)
        norm = np.linalg.norm(vector)
        if not np.isfinite(norm) or norm == 0.0:
            raise ValueError(f"cannot normalize direction {name!r} with norm {norm}")
        return cls(name, vector / norm, layer_range, classifier_accuracy)

    def with_range(self, layer_range) -> "SemanticDirection":
        return SemanticDirection(self.name, self.vector, layer_range, self.classifier_accuracy)


@dataclass(frozen=True)
class EditSpec:
    direction: SemanticDirection
    coeff_start: float
    coeff_end: float
    frames: int = field(default=1)

    def __post_init__(self):
        if int(self.frames) < 1:
            raise ValueError(f"frames must be >= 1, got {self.frames}")
        if not (np.isfinite(self.coeff_start) and np.isfinite(self.coeff_end)):
            raise ValueError("edit coefficients must be finite")
        object.__setattr__(self, "frames", int(self.frames))

    def coefficients(self) -> np.ndarray:
        return coefficient_ramp(self.coeff_start, self.coeff_end, self.frames)


def coefficient_ramp(start: float, end: float, frames: int) -> np.ndarray:
    """``frames`` evenly spaced values from ``start`` to ``end`` inclusive; one
    frame means ``end`` alone."""
    if frames == 1:
        return np.array([float(end)])
    return np.linspace(float(start), float(end), int(frames))


def sample_z(seed: int) -> LatentZ:
    """Draw 512 standard normals from ``PCG64(seed)``."""
    seed = int(seed)
    if not 0 <= seed <= _UINT64_MAX:
        raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
    rng = np.random.Generator(np.random.PCG64(seed))
    return LatentZ(rng.standard_normal(LATENT_DIM), seed)


def truncate(w: LatentW, w_avg: LatentW, psi: float) -> LatentW:
    if not np.isfinite(psi):
        raise ValueError("psi must be finite")
    if w.rows.shape != w_avg.rows.shape:
        raise ValueError(f"shape mismatch: {w.rows.shape} vs {w_avg.rows.shape}")
    return LatentW(w_avg.rows + psi * (w.rows - w_avg.rows), w.source)


def apply_direction(w: LatentW, direction: SemanticDirection, coeff: float) -> LatentW:
    """Shift the rows of ``w`` inside ``direction.layer_range`` by ``coeff * vector``."""
    if not np.isfinite(coeff):
        raise ValueError("coeff must be finite")
    lo, hi = direction.layer_range
    rows = np.array(w.rows)
    vec = direction.vector
    shift = coeff * (vec if vec.ndim == 1 else vec[lo:hi])
    rows[lo:hi] = rows[lo:hi] + shift
    return LatentW(rows, LatentSource.EDITED)


def mix_styles(source: LatentW, donor: LatentW, layer_range) -> LatentW:
    """Copy ``donor`` rows in ``layer_range`` over ``source``."""
    lo, hi = (int(v) for v in layer_range)
    if hi <= lo:
        raise ValueError(f"empty layer range [{lo}, {hi})")
    lo, hi = _check_range((lo, hi))
    rows = np.array(source.rows)
    rows[lo:hi] = donor.rows[lo:hi]
    return LatentW(rows, LatentSource.EDITED)


def edit_sequence(w: LatentW, spec: EditSpec) -> list[LatentW]:
    return [apply_direction(w, spec.direction, c) for c in spec.coefficients()]


# Default rows touched by each attribute edit; coarse layers carry geometry,
# fine layers carry colour.
DEFAULT_LAYER_RANGES = {
    "happy": (0, NUM_LAYERS),
    "smile": (0, NUM_LAYERS),
    "angry": (0, NUM_LAYERS),
    "surprise": (0, NUM_LAYERS),
    "sad": (0, NUM_LAYERS),
    "eye_openness": (0, NUM_LAYERS),
    "age": (0, NUM_LAYERS),
    "yaw": (0, 8),
    "pitch": (0, 8),
    "skin_hair": (8, NUM_LAYERS),
}
