"""Second-order spherical-harmonics relighting with Lambertian shading.

Conventions
-----------
Directions and normals live in an image-aligned frame: +x right, +y up,
+z toward the viewer.  The real SH basis is used without the Condon-Shortley
phase, in the order ``l=0; l=1 (m=-1, 0, 1); l=2 (m=-2..2)``:

====  =========  ===========================  ==============
 idx  (l, m)     function                     constant
====  =========  ===========================  ==============
 0    (0, 0)     c0                           0.282095
 1    (1, -1)    c1 * y                       0.488603
 2    (1, 0)     c1 * z                       0.488603
 3    (1, 1)     c1 * x                       0.488603
 4    (2, -2)    c2 * x * y                   1.092548
 5    (2, -1)    c2 * y * z                   1.092548
 6    (2, 0)     c3 * (3 z^2 - 1)             0.315392
 7    (2, 1)     c2 * x * z                   1.092548
 8    (2, 2)     c4 * (x^2 - y^2)             0.546274
====  =========  ===========================  ==============

Shading is ``albedo * max(0, sum_i A_l(i) * coeff_i * Y_i(n))`` with the
clamped-cosine convolution weights ``A_0 = pi``, ``A_1 = 2 pi / 3``,
``A_2 = pi / 4``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .generator import RenderedImage, quantize

C0 = 0.5 * math.sqrt(1.0 / math.pi)
C1 = math.sqrt(3.0 / (4.0 * math.pi))
C2 = 0.5 * math.sqrt(15.0 / math.pi)
C3 = 0.25 * math.sqrt(5.0 / math.pi)
C4 = 0.25 * math.sqrt(15.0 / math.pi)
SH_CONSTANTS = (C0, C1, C1, C1, C2, C2, C3, C2, C4)
LAMBERT_WEIGHTS = np.array([math.pi] + [2.0 * math.pi / 3.0] * 3 + [math.pi / 4.0] * 5)

DEFAULT_AMBIENT = 0.3
CANONICAL_DIRECTIONS = {
    "up": (0.0, 1.0, 0.0),
    "down": (0.0, -1.0, 0.0),
    "left": (-1.0, 0.0, 0.0),
    "right": (1.0, 0.0, 0.0),
}


class NormalEstimationError(ValueError):
    pass


@dataclass(frozen=True)
class SHLighting:
    coeffs: np.ndarray
    label: str = ""

    def __post_init__(self):
        c = np.array(self.coeffs, dtype=np.float64)
        if c.shape != (9,) or not np.all(np.isfinite(c)):
            raise ValueError(f"SH lighting needs 9 finite coefficients, got {c}")
        c.setflags(write=False)
        object.__setattr__(self, "coeffs", c)

    def __add__(self, other: "SHLighting") -> "SHLighting":
        return SHLighting(self.coeffs + other.coeffs, self.label)

    def scaled(self, k: float) -> "SHLighting":
        return SHLighting(k * self.coeffs, self.label)

    def to_json(self) -> dict:
        return {"label": self.label, "coeffs": [float(c) for c in self.coeffs]}

    @classmethod
    def from_json(cls, obj) -> "SHLighting":
        return cls(np.asarray(obj["coeffs"], dtype=np.float64), obj.get("label", ""))


@dataclass(frozen=True)
class NormalMap:
    normals: np.ndarray
    albedo: np.ndarray

    def __post_init__(self):
        n = np.asarray(self.normals, dtype=np.float64)
        a = np.asarray(self.albedo, dtype=np.float64)
        if n.ndim != 3 or n.shape[2] != 3 or a.shape != n.shape:
            raise ValueError(f"normals and albedo must both be HxWx3, got {n.shape} and {a.shape}")
        if np.max(np.abs(np.linalg.norm(n, axis=-1) - 1.0)) > 1e-6:
            raise ValueError("normals must be unit vectors")
        if a.min() < 0.0 or a.max() > 1.0:
            raise ValueError("albedo must lie in [0, 1]")
        object.__setattr__(self, "normals", n)
        object.__setattr__(self, "albedo", a)


@dataclass(frozen=True)
class LightingSweep:
    conditions: list
    canonical_four: dict = field(default_factory=dict)

    def __post_init__(self):
        for label, idx in self.canonical_four.items():
            if not 0 <= idx < len(self.conditions):
                raise ValueError(f"canonical condition {label!r} has invalid index {idx}")

    def __len__(self):
        return len(self.conditions)

    def labels(self) -> list[str]:
        return [c.label for c in self.conditions]

    def canonical(self) -> list[SHLighting]:
        return [self.conditions[self.canonical_four[k]] for k in ("up", "down", "left", "right")]

    def to_json(self) -> list:
        return [c.to_json() for c in self.conditions]


def _sh_eval(n: np.ndarray) -> np.ndarray:
    x, y, z = n[..., 0], n[..., 1], n[..., 2]
    return np.stack(
        [
            np.full_like(x, C0),
            C1 * y,
            C1 * z,
            C1 * x,
            C2 * x * y,
            C2 * y * z,
            C3 * (3.0 * z * z - 1.0),
            C2 * x * z,
            C4 * (x * x - y * y),
        ],
        axis=-1,
    )


def sh_basis(n) -> np.ndarray:
    """The nine real SH basis values at a unit direction ``n``."""
    n = np.asarray(n, dtype=np.float64)
    if n.shape != (3,):
        raise ValueError(f"expected a 3-vector, got shape {n.shape}")
    norm = float(np.linalg.norm(n))
    if abs(norm - 1.0) > 1e-6:
        raise ValueError(f"direction must be unit length, got norm {norm}")
    return _sh_eval(n)


def irradiance(normals: np.ndarray, light: SHLighting) -> np.ndarray:
    """Unclamped ``sum_i A_i c_i Y_i(n)`` per pixel; linear in the light."""
    return _sh_eval(np.asarray(normals, dtype=np.float64)) @ (LAMBERT_WEIGHTS * light.coeffs)


def shade_float(geometry: NormalMap, light: SHLighting) -> np.ndarray:
    return geometry.albedo * np.maximum(0.0, irradiance(geometry.normals, light))[..., None]


def shade(geometry: NormalMap, light: SHLighting) -> RenderedImage:
    return RenderedImage(quantize(shade_float(geometry, light)))


def ambient_sh(level: float, label: str = "ambient") -> SHLighting:
    c = np.zeros(9)
    c[0] = level
    return SHLighting(c, label)


def directional_sh(direction, ambient: float = DEFAULT_AMBIENT, intensity: float = 1.0, label: str = "") -> SHLighting:
    """A distant light from ``direction`` projected onto SH, plus ``ambient`` on Y00.

    A delta light of unit intensity projects to ``Y_i(direction)``.
    """
    if ambient < 0.0:
        raise ValueError("ambient must be non-negative")
    c = intensity * sh_basis(direction)
    c[0] += ambient
    return SHLighting(c, label)


def _direction(azimuth_deg: float, elevation_deg: float) -> np.ndarray:
    """In-plane azimuth (0 = right, 90 = up) and elevation toward the viewer."""
    az, el = math.radians(azimuth_deg), math.radians(elevation_deg)
    d = np.array([math.cos(el) * math.cos(az), math.cos(el) * math.sin(az), math.sin(el)])
    d[np.abs(d) < 1e-15] = 0.0
    return d / np.linalg.norm(d)


_CANONICAL_AZIMUTH = {0.0: "right", 90.0: "up", 180.0: "left", 270.0: "down"}


def build_sweep(azimuth_steps: int, elevations, ambient: float = DEFAULT_AMBIENT, intensity: float = 0.8) -> LightingSweep:
    """One ambient condition followed by an azimuth x elevation grid.

    Elevation-major order.  At the middle elevation (by magnitude) the
    azimuths 0/90/180/270 are labelled right/up/left/down and recorded as the
    canonical four when all four exist.
    """
    if azimuth_steps < 1:
        raise ValueError("azimuth_steps must be >= 1")
    elevations = [float(e) for e in elevations]
    if not elevations:
        raise ValueError("need at least one elevation")
    middle = sorted(elevations, key=abs)[len(elevations) // 2]
    # the ambient condition keeps the l=0 energy a directional light would add
    conditions = [ambient_sh(ambient + intensity * C0, "ambient")]
    canonical = {}
    for el in elevations:
        for k in range(azimuth_steps):
            az = 360.0 * k / azimuth_steps
            label = f"az{int(round(az)):03d}_el{int(round(el)):+03d}"
            if el == middle and az in _CANONICAL_AZIMUTH:
                label = _CANONICAL_AZIMUTH[az]
                canonical[label] = len(conditions)
            conditions.append(directional_sh(_direction(az, el), ambient, intensity, label))
    if len(canonical) != 4:
        canonical = {}
    return LightingSweep(conditions, canonical)


PRESET_ELEVATIONS = (0.0, 15.0, 30.0, 45.0, 60.0)


def preset_sweep() -> LightingSweep:
    """The 61-condition preset: 12 azimuths x 5 elevations + ambient."""
    return build_sweep(12, PRESET_ELEVATIONS)


def canonical_light(name: str, ambient: float = DEFAULT_AMBIENT) -> SHLighting:
    sweep = preset_sweep()
    if name not in sweep.canonical_four:
        raise KeyError(f"unknown canonical light {name!r}; expected one of {sorted(CANONICAL_DIRECTIONS)}")
    return sweep.conditions[sweep.canonical_four[name]]


def sweep_to_json(sweep: LightingSweep) -> str:
    return json.dumps(sweep.to_json(), indent=2)


# -- normals ------------------------------------------------------------------


def sphere_normal_map(size: int, radius: float | None = None, albedo: float = 1.0) -> NormalMap:
    """Analytic normals of a centred sphere; background pixels face the viewer."""
    radius = radius if radius is not None else 0.45 * size
    c = size / 2.0
    xs = ((np.arange(size) + 0.5)[None, :] - c) / radius
    ys = -((np.arange(size) + 0.5)[:, None] - c) / radius
    r2 = xs ** 2 + ys ** 2
    inside = r2 < 1.0
    z = np.sqrt(np.clip(1.0 - r2, 0.0, None))
    n = np.stack(np.broadcast_arrays(xs, ys, z), axis=-1)
    out = np.zeros((size, size, 3))
    out[..., 2] = 1.0
    out[inside] = n[inside]
    return NormalMap(out, np.full((size, size, 3), albedo))


def estimate_normals(image: RenderedImage) -> NormalMap:
    """Normals and albedo for ``image``.

    Toy renders carry their projection vector, so the exact head normals are
    rebuilt.  Anything else goes through an ellipsoid fit: the foreground is
    whatever differs from the median border colour, its second moments give
    the ellipse, and the ellipsoid depth equals its smaller semi-axis.  The
    fallback is approximate; albedo is the image itself.
    """
    albedo = image.as_float()
    if image.params and "projections" in image.params:
        from .toy import toy_normals_for

        return NormalMap(toy_normals_for(image.params), albedo)
    return NormalMap(_ellipsoid_fit_normals(albedo), albedo)


def _ellipsoid_fit_normals(pixels: np.ndarray) -> np.ndarray:
    h, w = pixels.shape[:2]
    border = np.concatenate([pixels[0], pixels[-1], pixels[:, 0], pixels[:, -1]])
    bg = np.median(border, axis=0)
    mask = np.abs(pixels - bg).max(axis=-1) > 0.08
    count = int(mask.sum())
    if count < 16:
        raise NormalEstimationError("no foreground found for the ellipsoid fit")
    ys, xs = np.nonzero(mask)
    xs = xs + 0.5
    ys = ys + 0.5
    cx, cy = xs.mean(), ys.mean()
    cov = np.cov(np.stack([xs - cx, ys - cy]), bias=True)
    evals, evecs = np.linalg.eigh(cov)
    if evals.min() <= 0.0:
        raise NormalEstimationError("degenerate foreground for the ellipsoid fit")
    # a uniformly filled ellipse has variance a^2 / 4 along each axis
    semi = 2.0 * np.sqrt(evals)
    gx = (np.arange(w) + 0.5)[None, :] - cx
    gy = (np.arange(h) + 0.5)[:, None] - cy
    # local ellipse coordinates
    u = gx * evecs[0, 0] + gy * evecs[1, 0]
    v = gx * evecs[0, 1] + gy * evecs[1, 1]
    a, b = semi
    c = min(a, b)
    r2 = (u / a) ** 2 + (v / b) ** 2
    inside = r2 < 1.0
    z = c * np.sqrt(np.clip(1.0 - r2, 0.0, None))
    nu, nv, nz = u / a ** 2, v / b ** 2, z / c ** 2
    # back to image axes, then flip y so +y points up
    nx = nu * evecs[0, 0] + nv * evecs[0, 1]
    ny = nu * evecs[1, 0] + nv * evecs[1, 1]
    n = np.stack(np.broadcast_arrays(nx, -ny, nz), axis=-1)
    n = n / np.linalg.norm(n, axis=-1, keepdims=True)
    out = np.zeros((h, w, 3))
    out[..., 2] = 1.0
    out[inside] = n[inside]
    return out


def relight(image: RenderedImage, light: SHLighting) -> RenderedImage:
    out = shade(estimate_normals(image), light)
    return RenderedImage(out.pixels, image.latent_digest)
