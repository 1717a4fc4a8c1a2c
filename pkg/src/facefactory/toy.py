"""Procedural toy face generator with known latent semantics.

Every rendered quantity is a function of a handful of linear projections of
the latent:

* geometry attributes (``smile`` ... ``gender``) and the identity coordinates
  read the mean of the coarse rows ``w[0:8]``;
* colour attributes (``hue``, ``brightness``, ``hair_tone``) read the mean of
  the fine rows ``w[8:18]``.

The projection directions are the columns of a fixed orthonormal basis, so an
edit along one ground-truth direction leaves every other attribute untouched.
Attribute values are ``expit(<g_a, mean_row>)`` (logistic sigmoid, range (0, 1),
0.5 at the projection origin).  Identity coordinates are the raw projections;
the first six shape the face through ``tanh(x / 2)``.

Rendering uses anti-aliased coverage (one-pixel linear ramps) so the image is
a continuous function of the projections, which inversion relies on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import expit

from .generator import GeneratorBackend, UnsupportedOperation
from .latent import LATENT_DIM, NUM_LAYERS, LatentSource, LatentW, LatentZ

BASIS_SEED = 0x5EEDFACE
GEOMETRY_ATTRIBUTES = ("smile", "angry", "surprise", "sad", "eye_openness", "age", "yaw", "pitch", "gender")
COLOR_ATTRIBUTES = ("hue", "brightness", "hair_tone")
ATTRIBUTES = GEOMETRY_ATTRIBUTES + COLOR_ATTRIBUTES
IDENTITY_DIM = 16
RENDERED_IDENTITY = 6
COARSE_ROWS = (0, 8)
FINE_ROWS = (8, NUM_LAYERS)
LANDMARK_COUNT = 68

MAX_YAW_DEG = 35.0
MAX_PITCH_DEG = 20.0
EAR_PER_OPENNESS = 0.6
RESIDUAL_SCALE = 0.02

_BACKGROUND = np.array([0.85, 0.86, 0.88])
_SCLERA = np.array([0.96, 0.96, 0.94])
_IRIS = np.array([0.25, 0.16, 0.10])
_MOUTH_INSIDE = np.array([0.25, 0.08, 0.08])


@lru_cache(maxsize=1)
def _basis() -> np.ndarray:
    rng = np.random.Generator(np.random.PCG64(BASIS_SEED))
    q, r = np.linalg.qr(rng.standard_normal((LATENT_DIM, len(ATTRIBUTES) + IDENTITY_DIM)))
    q = q * np.sign(np.diag(r))
    q.setflags(write=False)
    return q


@dataclass(frozen=True)
class ToyFaceSpec:
    ground_truth_directions: dict
    identity_basis: np.ndarray
    landmark_count: int = LANDMARK_COUNT


def toy_face_spec() -> ToyFaceSpec:
    q = _basis()
    dirs = {name: q[:, i].copy() for i, name in enumerate(ATTRIBUTES)}
    return ToyFaceSpec(dirs, q[:, len(ATTRIBUTES):].T.copy())


# -- geometry -----------------------------------------------------------------


def _geometry(x: np.ndarray, size: int, offset) -> dict:
    """Face layout in pixels from the projection vector ``x``."""
    v = dict(zip(ATTRIBUTES, expit(x[: len(ATTRIBUTES)])))
    t = np.tanh(x[len(ATTRIBUTES):] / 2.0)
    s = size / 256.0

    cx = size / 2.0 + offset[0]
    cy = size / 2.0 + 8.0 * s + offset[1]
    head_a = s * (66.0 + 6.0 * t[0] - 3.0 * (2.0 * v["gender"] - 1.0))
    head_b = s * (84.0 + 6.0 * t[1] + 12.0 * (v["age"] - 0.5))
    theta = math.radians(MAX_YAW_DEG) * 2.0 * (v["yaw"] - 0.5)
    phi = math.radians(MAX_PITCH_DEG) * 2.0 * (v["pitch"] - 0.5)
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    cos_p, sin_p = math.cos(phi), math.sin(phi)

    def project(u, vv, depth):
        u = np.asarray(u, dtype=np.float64)
        vv = np.asarray(vv, dtype=np.float64)
        return cx + u * cos_t + depth * s * sin_t, cy + vv * cos_p - depth * s * sin_p

    eye_v = -head_b * (0.05 + 0.10 * (v["age"] - 0.5))
    eye_u = s * (28.0 + 3.0 * t[2])
    eye_w = s * (22.0 - 6.0 * (v["age"] - 0.5))  # younger faces have wider eyes
    eye_gap = EAR_PER_OPENNESS * eye_w * v["eye_openness"]

    brow_v = eye_v - s * (13.0 + 3.0 * t[5] + 7.0 * v["surprise"] - 4.0 * v["angry"])
    brow_tilt = s * (6.0 * v["angry"] - 6.0 * v["sad"])
    nose_len = s * (30.0 + 4.0 * t[3])
    mouth_v = eye_v + nose_len + s * 20.0
    mouth_half = s * (20.0 + 6.0 * v["smile"])
    curvature = s * (12.0 * (v["smile"] - 0.5) - 8.0 * (v["sad"] - 0.5))
    mouth_gap = s * (1.0 + 14.0 * v["surprise"])
    lip = s * 4.0

    pts = np.zeros((LANDMARK_COUNT, 2))

    # jaw 0..16, image left to image right along the lower outline
    gam = np.linspace(-0.5 * math.pi, 0.5 * math.pi, 17)
    pts[0:17, 0] = cx + head_a * np.sin(gam) + 0.25 * head_a * sin_t * np.cos(gam)
    pts[0:17, 1] = cy + 0.98 * head_b * np.cos(gam) * cos_p

    # brows 17..21 (image-left, outer to inner); 22..26 mirror them
    bu = np.linspace(-0.7, 0.5, 5)
    arc = s * np.array([3.0, 0.8, 0.0, 0.3, 1.2])
    brow_u = -eye_u + bu * eye_w
    brow_vv = brow_v + arc + np.linspace(0.0, 1.0, 5) * brow_tilt
    pts[17:22, 0], pts[17:22, 1] = project(brow_u, brow_vv, 48.0)
    pts[22:27, 0], pts[22:27, 1] = project(-brow_u[::-1], brow_vv[::-1], 48.0)

    # nose bridge 27..30 and base 31..35
    nx, ny = project(np.zeros(4), eye_v + np.linspace(0.0, nose_len, 4), np.linspace(50.0, 65.0, 4))
    pts[27:31, 0], pts[27:31, 1] = nx, ny
    nose_w = s * (9.0 + 3.0 * t[4])
    bx, by = project(np.array([-1.0, -0.5, 0.0, 0.5, 1.0]) * nose_w, eye_v + nose_len + s * np.array([3.0, 4.5, 5.0, 4.5, 3.0]),
                     np.array([58.0, 61.0, 63.0, 61.0, 58.0]))
    pts[31:36, 0], pts[31:36, 1] = bx, by

    # eyes 36..41 (image-left) and 42..47 (image-right)
    xi = np.array([-0.5, -1.0 / 6.0, 1.0 / 6.0, 0.5, 1.0 / 6.0, -1.0 / 6.0])
    lid = np.array([0.0, -0.5, -0.5, 0.0, 0.5, 0.5]) * eye_gap
    ex, ey = project(-eye_u + xi * eye_w, eye_v + lid, 45.0)
    pts[36:42, 0], pts[36:42, 1] = ex, ey
    ex, ey = project(eye_u + xi * eye_w, eye_v + lid, 45.0)
    pts[42:48, 0], pts[42:48, 1] = ex, ey

    # mouth: outer 48..59, inner 60..67; xi in [-1, 1] across the mouth
    def lip_y(xi_, which):
        base = mouth_v - curvature * xi_ ** 2
        taper = 1.0 - xi_ ** 2
        return {
            "upper_outer": base - 0.5 * mouth_gap * taper - lip * taper,
            "upper_inner": base - 0.5 * mouth_gap * taper,
            "lower_inner": base + 0.5 * mouth_gap * taper,
            "lower_outer": base + 0.5 * mouth_gap * taper + 1.2 * lip * taper,
        }[which]

    outer = [(-1.0, "upper_outer"), (-2 / 3, "upper_outer"), (-1 / 3, "upper_outer"), (0.0, "upper_outer"),
             (1 / 3, "upper_outer"), (2 / 3, "upper_outer"), (1.0, "upper_outer"), (2 / 3, "lower_outer"),
             (1 / 3, "lower_outer"), (0.0, "lower_outer"), (-1 / 3, "lower_outer"), (-2 / 3, "lower_outer")]
    inner = [(-0.9, "upper_inner"), (-1 / 3, "upper_inner"), (0.0, "upper_inner"), (1 / 3, "upper_inner"),
             (0.9, "upper_inner"), (1 / 3, "lower_inner"), (0.0, "lower_inner"), (-1 / 3, "lower_inner")]
    for k, spec in ((48, outer), (60, inner)):
        xs_ = np.array([p[0] for p in spec])
        ys_ = np.array([lip_y(p[0], p[1]) for p in spec])
        mx, my = project(xs_ * mouth_half, ys_, 48.0)
        pts[k:k + len(spec), 0], pts[k:k + len(spec), 1] = mx, my

    return {
        "values": v,
        "s": s,
        "cx": cx,
        "cy": cy,
        "head": (cx, cy, head_a, head_b),
        "cos_t": cos_t,
        "eye_w": eye_w * cos_t,
        "eye_gap": eye_gap,
        "mouth_half": mouth_half * cos_t,
        "mouth_curve": (curvature, mouth_gap, lip),
        "landmarks": pts,
    }


# -- rasterization ------------------------------------------------------------


def _window(size, x0, x1, y0, y1):
    c0 = max(0, int(math.floor(x0)) - 2)
    c1 = min(size, int(math.ceil(x1)) + 2)
    r0 = max(0, int(math.floor(y0)) - 2)
    r1 = min(size, int(math.ceil(y1)) + 2)
    if c1 <= c0 or r1 <= r0:
        return None
    xs = (np.arange(c0, c1) + 0.5)[None, :]
    ys = (np.arange(r0, r1) + 0.5)[:, None]
    return (slice(r0, r1), slice(c0, c1)), xs, ys


def _blend(img, sl, cov, color):
    region = img[sl]
    region += (np.asarray(color) - region) * cov[..., None]


def _ellipse_cov(xs, ys, cx, cy, a, b):
    q = np.sqrt(((xs - cx) / a) ** 2 + ((ys - cy) / b) ** 2)
    return np.clip(0.5 - (q - 1.0) * min(a, b), 0.0, 1.0)


def _paint_ellipse(img, cx, cy, a, b, color):
    win = _window(img.shape[0], cx - a, cx + a, cy - b, cy + b)
    if win is not None:
        sl, xs, ys = win
        _blend(img, sl, _ellipse_cov(xs, ys, cx, cy, a, b), color)


def _paint_band(img, x0, x1, top, bottom, color, y_range):
    """Fill between the curves ``top(x)`` and ``bottom(x)`` for x in [x0, x1]."""
    win = _window(img.shape[0], x0, x1, y_range[0], y_range[1])
    if win is None:
        return
    sl, xs, ys = win
    t, b = top(xs), bottom(xs)
    inside_y = np.minimum(ys - t, b - ys)
    inside_x = np.minimum(xs - x0, x1 - xs)
    cov = np.clip(0.5 + inside_y, 0.0, 1.0) * np.clip(0.5 + inside_x, 0.0, 1.0)
    _blend(img, sl, cov, color)


def _paint_polyline(img, pts, half_width, color):
    x0, y0 = pts.min(axis=0) - half_width
    x1, y1 = pts.max(axis=0) + half_width
    win = _window(img.shape[0], x0, x1, y0, y1)
    if win is None:
        return
    sl, xs, ys = win
    dist = np.full(np.broadcast_shapes(xs.shape, ys.shape), np.inf)
    for p, q in zip(pts[:-1], pts[1:]):
        d = q - p
        denom = float(d @ d) or 1e-12
        h = np.clip(((xs - p[0]) * d[0] + (ys - p[1]) * d[1]) / denom, 0.0, 1.0)
        dist = np.minimum(dist, np.hypot(xs - p[0] - h * d[0], ys - p[1] - h * d[1]))
    _blend(img, sl, np.clip(0.5 - (dist - half_width), 0.0, 1.0), color)


def skin_color(hue: float, brightness: float) -> np.ndarray:
    light = np.array([0.97, 0.82, 0.70])
    dark = np.array([0.52, 0.34, 0.22])
    return np.clip((light + (dark - light) * hue) * (0.78 + 0.3 * brightness), 0.0, 1.0)


def hair_color(tone: float) -> np.ndarray:
    return np.array([0.40, 0.27, 0.13]) + (np.array([0.06, 0.05, 0.04]) - np.array([0.40, 0.27, 0.13])) * tone


def render_geometry(geo: dict, size: int) -> np.ndarray:
    v, s = geo["values"], geo["s"]
    cx, cy, a, b = geo["head"]
    pts = geo["landmarks"]
    img = np.empty((size, size, 3))
    img[:] = _BACKGROUND
    skin = skin_color(v["hue"], v["brightness"])
    hair = hair_color(v["hair_tone"])

    # hair behind the head; its length follows the gender value
    top = cy - b - 10.0 * s
    bottom = cy + b * (-0.1 + 1.1 * v["gender"])
    _paint_ellipse(img, cx, 0.5 * (top + bottom), a + 16.0 * s, 0.5 * (bottom - top), hair)
    _paint_ellipse(img, cx, cy, a, b, skin)
    _paint_ellipse(img, cx, cy - 0.75 * b, 1.05 * a, 0.40 * b, hair)

    for idx in (slice(36, 42), slice(42, 48)):
        eye = pts[idx]
        ex = 0.5 * (eye[0, 0] + eye[3, 0])
        ey = 0.5 * (eye[0, 1] + eye[3, 1])
        half_w = 0.5 * abs(eye[3, 0] - eye[0, 0])
        peak = 0.5 * geo["eye_gap"] / math.sqrt(8.0 / 9.0)

        def lid(xs, sign, ex=ex, ey=ey, half_w=half_w, peak=peak):
            return ey + sign * peak * np.sqrt(np.clip(1.0 - ((xs - ex) / half_w) ** 2, 0.0, None))

        yr = (ey - peak - 1.0, ey + peak + 1.0)
        _paint_band(img, ex - half_w, ex + half_w, lambda xs, f=lid: f(xs, -1.0), lambda xs, f=lid: f(xs, 1.0),
                    _SCLERA, yr)
        r = 5.0 * s
        _paint_band(img, ex - r, ex + r, lambda xs, f=lid: np.maximum(f(xs, -1.0), ey - r),
                    lambda xs, f=lid: np.minimum(f(xs, 1.0), ey + r), _IRIS, yr)
        _paint_polyline(img, eye[[0, 1, 2, 3]], 0.8 * s, hair * 0.6)

    brow = hair * 0.9
    _paint_polyline(img, pts[17:22], 2.5 * s, brow)
    _paint_polyline(img, pts[22:27], 2.5 * s, brow)
    nose = skin * 0.8
    _paint_polyline(img, pts[27:31], 1.2 * s, nose)
    _paint_polyline(img, pts[31:36], 1.2 * s, nose)

    mcx = 0.5 * (pts[48, 0] + pts[54, 0])
    half = 0.5 * (pts[54, 0] - pts[48, 0])
    curvature, gap, lip = geo["mouth_curve"]
    corner_y = 0.5 * (pts[48, 1] + pts[54, 1])
    base_y = corner_y + curvature

    def curve(off, thick):
        def f(xs):
            xi = np.clip((xs - mcx) / half, -1.0, 1.0)
            taper = 1.0 - xi ** 2
            return base_y - curvature * xi ** 2 + (off * gap + thick * lip) * taper
        return f

    yr = (corner_y - lip - gap, base_y + gap + 2.0 * lip)
    _paint_band(img, mcx - half, mcx + half, curve(-0.5, -1.0), curve(0.5, 1.2), skin * np.array([0.85, 0.55, 0.55]), yr)
    _paint_band(img, mcx - half, mcx + half, curve(-0.5, 0.0), curve(0.5, 0.0), _MOUTH_INSIDE, yr)
    return img


def head_normals(geo: dict, size: int) -> np.ndarray:
    """Ellipsoid normals over the head (x right, y up, z toward the viewer).

    Pixels outside the head get the background convention ``(0, 0, 1)``.
    """
    cx, cy, a, b = geo["head"]
    c = a
    xs = (np.arange(size) + 0.5)[None, :] - cx
    ys = (np.arange(size) + 0.5)[:, None] - cy
    r2 = (xs / a) ** 2 + (ys / b) ** 2
    inside = r2 < 1.0
    z = c * np.sqrt(np.clip(1.0 - r2, 0.0, None))
    n = np.stack(np.broadcast_arrays(xs / a ** 2, -ys / b ** 2, z / c ** 2), axis=-1)
    n = n / np.linalg.norm(n, axis=-1, keepdims=True)
    out = np.zeros((size, size, 3))
    out[..., 2] = 1.0
    out[inside] = n[inside]
    return out


# -- backend ------------------------------------------------------------------


class ToyGenerator(GeneratorBackend):
    """Deterministic parametric face renderer.

    The mapping from z keeps the 28 semantic coordinates (attributes plus
    identity) at unit scale and shrinks the remaining 484 by
    ``RESIDUAL_SCALE``, so W is strongly anisotropic the way a trained mapping
    network's output is.  The result is rounded to float32 (stored latents
    round-trip exactly) and broadcast to all 18 rows.  ``gender='boy'`` or
    ``'girl'`` reflects the gender coordinate so every sample falls on that
    side, mirroring a pair of per-gender models.
    """

    def __init__(self, size: int = 256, gender: str | None = None, center_offset=(0.0, 0.0)):
        if gender not in (None, "boy", "girl"):
            raise ValueError(f"gender must be None, 'boy' or 'girl', got {gender!r}")
        self.size = int(size)
        self.gender = gender
        self.center_offset = (float(center_offset[0]), float(center_offset[1]))
        self.name = "toy" if gender is None else f"toy-{gender}"
        spec = toy_face_spec()
        self.spec = spec
        q = _basis()
        self._geo_dirs = q[:, [ATTRIBUTES.index(a) for a in GEOMETRY_ATTRIBUTES]].T
        self._color_dirs = q[:, [ATTRIBUTES.index(a) for a in COLOR_ATTRIBUTES]].T
        self._id_dirs = spec.identity_basis
        mean = np.zeros(LATENT_DIM)
        if gender is not None:
            sign = -1.0 if gender == "boy" else 1.0
            mean = sign * math.sqrt(2.0 / math.pi) * spec.ground_truth_directions["gender"]
        self._w_avg = LatentW.broadcast(mean)

    def __getstate__(self):
        return {"size": self.size, "gender": self.gender, "center_offset": self.center_offset}

    def __setstate__(self, state):
        self.__init__(state["size"], state["gender"], state["center_offset"])

    def __repr__(self):
        return f"ToyGenerator(size={self.size}, gender={self.gender!r}, center_offset={self.center_offset})"

    @property
    def output_size(self):
        return (self.size, self.size)

    @property
    def w_avg(self):
        return self._w_avg

    @property
    def directions(self) -> dict:
        return self.spec.ground_truth_directions

    def map(self, z: LatentZ) -> LatentW:
        q = _basis()
        z = np.asarray(z.values, dtype=np.float64)
        semantic = q @ (q.T @ z)
        u = semantic + RESIDUAL_SCALE * (z - semantic)
        if self.gender is not None:
            g = self.spec.ground_truth_directions["gender"]
            c = float(g @ u)
            sign = -1.0 if self.gender == "boy" else 1.0
            u = u + (sign * abs(c) - c) * g
        u = u.astype(np.float32).astype(np.float64)
        return LatentW.broadcast(u, LatentSource.MAPPED)

    # projections ------------------------------------------------------------

    def projections(self, w: LatentW) -> np.ndarray:
        """Rendered projection vector: 12 attribute projections + 6 identity."""
        coarse = w.mean_row(*COARSE_ROWS)
        fine = w.mean_row(*FINE_ROWS)
        geo = self._geo_dirs @ coarse
        col = self._color_dirs @ fine
        by_name = dict(zip(GEOMETRY_ATTRIBUTES, geo)) | dict(zip(COLOR_ATTRIBUTES, col))
        attrs = np.array([by_name[a] for a in ATTRIBUTES])
        return np.concatenate([attrs, self._id_dirs[:RENDERED_IDENTITY] @ coarse])

    def projection_jacobian(self) -> np.ndarray:
        """d projections / d u for a broadcast latent ``w = [u] * 18``."""
        q = _basis()
        return np.concatenate([q[:, : len(ATTRIBUTES)].T, self._id_dirs[:RENDERED_IDENTITY]])

    def attribute_values(self, w: LatentW) -> dict:
        x = self.projections(w)
        return {a: float(v) for a, v in zip(ATTRIBUTES, expit(x[: len(ATTRIBUTES)]))}

    def identity(self, w: LatentW) -> np.ndarray:
        return self._id_dirs @ w.mean_row(*COARSE_ROWS)

    # rendering --------------------------------------------------------------

    def geometry(self, x: np.ndarray) -> dict:
        return _geometry(np.asarray(x, dtype=np.float64), self.size, self.center_offset)

    def render_projections(self, x: np.ndarray) -> np.ndarray:
        return render_geometry(self.geometry(x), self.size)

    def render(self, w: LatentW) -> np.ndarray:
        return self.render_projections(self.projections(w))

    def landmarks(self, w: LatentW) -> np.ndarray:
        return self.geometry(self.projections(w))["landmarks"].copy()

    def normals(self, w: LatentW) -> np.ndarray:
        return head_normals(self.geometry(self.projections(w)), self.size)

    def side_channel(self, w: LatentW):
        x = self.projections(w)
        geo = self.geometry(x)
        return {
            "backend": self.name,
            "projections": x,
            "attributes": {a: float(val) for a, val in geo["values"].items()},
            "identity": self.identity(w),
            "landmarks": geo["landmarks"],
            "size": self.size,
            "center_offset": self.center_offset,
        }


def toy_landmarks(backend: GeneratorBackend, w: LatentW) -> np.ndarray:
    """Ground-truth 68-point landmarks in the standard annotation order."""
    if not isinstance(backend, ToyGenerator):
        raise UnsupportedOperation(f"landmarks are only available from the toy generator, not {backend.name!r}")
    return backend.landmarks(w)


def mouth_curvature(landmarks: np.ndarray) -> float:
    """Mouth-centre height above the corners (positive = smiling), in pixels."""
    pts = np.asarray(landmarks)
    return float(0.5 * (pts[51, 1] + pts[57, 1]) - 0.5 * (pts[48, 1] + pts[54, 1]))


def toy_normals_for(image_params: dict) -> np.ndarray:
    """Recreate exact head normals from a toy render's side channel."""
    geo = _geometry(np.asarray(image_params["projections"]), int(image_params["size"]), image_params["center_offset"])
    return head_normals(geo, int(image_params["size"]))
