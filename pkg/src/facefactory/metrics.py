"""Fréchet distance between embedding populations and identity similarity.

The Fréchet distance between Gaussians fitted to two embedding sets is::

    d^2 = ||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2))

Covariances use divisor ``n`` (maximum likelihood).  The trace of the matrix
root is taken from the symmetric product ``S_a^(1/2) S_b S_a^(1/2)``, which has
the same eigenvalues as ``S_a S_b``; both eigendecompositions clamp negative
eigenvalues at zero.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import numpy as np

from .generator import RenderedImage
from .store import read_container, write_container

EPS = 1e-6


class StatsError(ValueError):
    pass


class FrechetError(ArithmeticError):
    pass


class EmbedderError(RuntimeError):
    pass


@dataclass(frozen=True)
class ActivationStats:
    mu: np.ndarray
    sigma: np.ndarray
    n: int

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=np.float64)
        sigma = np.asarray(self.sigma, dtype=np.float64)
        if mu.ndim != 1 or sigma.shape != (mu.size, mu.size):
            raise StatsError(f"inconsistent shapes mu={mu.shape} sigma={sigma.shape}")
        if int(self.n) < 2:
            raise StatsError(f"need at least 2 samples, got {self.n}")
        if not np.allclose(sigma, sigma.T, rtol=0.0, atol=1e-9):
            raise StatsError("sigma is not symmetric")
        if sigma.size and np.linalg.eigvalsh(0.5 * (sigma + sigma.T)).min() < -1e-8:
            raise StatsError("sigma is not positive semi-definite")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)
        object.__setattr__(self, "n", int(self.n))

    @property
    def dim(self) -> int:
        return self.mu.size

    def save(self, stem) -> None:
        write_container(stem, {"mu": self.mu, "sigma": self.sigma}, {"n": self.n}, dtype="<f8")

    @classmethod
    def load(cls, stem) -> "ActivationStats":
        arrays, meta = read_container(stem)
        return cls(arrays["mu"], arrays["sigma"], meta["n"])


class StatsAccumulator:
    """Streaming mean and scatter (Chan et al. pairwise update).

    Partial accumulators merge exactly, so stats can be reduced from workers
    in any grouping.
    """

    def __init__(self, dim: int | None = None):
        self.dim = dim
        self.n = 0
        self.mean = None
        self.scatter = None

    def _init(self, dim):
        self.dim = dim
        self.mean = np.zeros(dim)
        self.scatter = np.zeros((dim, dim))

    def update(self, batch: np.ndarray, start_index: int = 0) -> "StatsAccumulator":
        batch = np.atleast_2d(np.asarray(batch, dtype=np.float64))
        if self.dim is None or self.mean is None:
            self._init(self.dim or batch.shape[1])
        if batch.shape[1] != self.dim:
            raise StatsError(f"embedding {start_index} has dim {batch.shape[1]}, expected {self.dim}")
        bad = np.nonzero(~np.all(np.isfinite(batch), axis=1))[0]
        if bad.size:
            raise StatsError(f"embedding {start_index + int(bad[0])} is not finite")
        m = batch.shape[0]
        b_mean = batch.mean(axis=0)
        centered = batch - b_mean
        other = StatsAccumulator(self.dim)
        other.n, other.mean, other.scatter = m, b_mean, centered.T @ centered
        return self.merge(other)

    def merge(self, other: "StatsAccumulator") -> "StatsAccumulator":
        if other.n == 0:
            return self
        if self.n == 0:
            self.dim, self.n = other.dim, other.n
            self.mean, self.scatter = other.mean.copy(), other.scatter.copy()
            return self
        if other.dim != self.dim:
            raise StatsError(f"cannot merge dims {self.dim} and {other.dim}")
        n = self.n + other.n
        delta = other.mean - self.mean
        self.mean = self.mean + delta * (other.n / n)
        self.scatter = self.scatter + other.scatter + np.outer(delta, delta) * (self.n * other.n / n)
        self.n = n
        return self

    def stats(self) -> ActivationStats:
        if self.n < 2:
            raise StatsError(f"need at least 2 embeddings, got {self.n}")
        sigma = self.scatter / self.n
        return ActivationStats(self.mean.copy(), 0.5 * (sigma + sigma.T), self.n)


def accumulate_stats(embeddings: Iterable, batch_size: int = 256) -> ActivationStats:
    acc = StatsAccumulator()
    buf, start, seen = [], 0, 0
    dim = None
    for i, e in enumerate(embeddings):
        e = np.asarray(e, dtype=np.float64).ravel()
        if dim is None:
            dim = e.size
        elif e.size != dim:
            raise StatsError(f"embedding {i} has dim {e.size}, expected {dim}")
        buf.append(e)
        seen += 1
        if len(buf) == batch_size:
            acc.update(np.stack(buf), start)
            start, buf = seen, []
    if buf:
        acc.update(np.stack(buf), start)
    return acc.stats()


def _psd_sqrt(m: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    evals, evecs = np.linalg.eigh(0.5 * (m + m.T))
    root = np.sqrt(np.clip(evals, 0.0, None))
    return (evecs * root) @ evecs.T, evals, evecs


def _condition(m: np.ndarray) -> float:
    try:
        return float(np.linalg.cond(m))
    except np.linalg.LinAlgError:
        return float("inf")


def trace_sqrt_product(sigma_a: np.ndarray, sigma_b: np.ndarray) -> float:
    """``Tr((sigma_a sigma_b)^(1/2))`` for PSD inputs."""
    try:
        root_a, _, _ = _psd_sqrt(sigma_a)
        inner = root_a @ sigma_b @ root_a
        evals = np.linalg.eigvalsh(0.5 * (inner + inner.T))
    except np.linalg.LinAlgError as exc:
        raise FrechetError(
            f"matrix square root did not converge (cond(a)={_condition(sigma_a):.3g}, cond(b)={_condition(sigma_b):.3g})"
        ) from exc
    return float(np.sqrt(np.clip(evals, 0.0, None)).sum())


def sqrtm_product(sigma_a: np.ndarray, sigma_b: np.ndarray) -> np.ndarray:
    """A matrix ``S`` with ``S @ S == sigma_a @ sigma_b``.

    ``S = A^(1/2) (A^(1/2) B A^(1/2))^(1/2) A^(-1/2)``.  ``A`` gets ``EPS * I``
    added when its smallest eigenvalue is below ``EPS`` so the inverse root
    exists.
    """
    sigma_a = np.asarray(sigma_a, dtype=np.float64)
    evals = np.linalg.eigvalsh(sigma_a)
    if evals.min() < EPS:
        sigma_a = sigma_a + EPS * np.eye(sigma_a.shape[0])
    try:
        root_a, a_evals, a_evecs = _psd_sqrt(sigma_a)
        inv_root_a = (a_evecs / np.sqrt(a_evals)) @ a_evecs.T
        inner_root, _, _ = _psd_sqrt(root_a @ sigma_b @ root_a)
    except np.linalg.LinAlgError as exc:
        raise FrechetError(f"matrix square root did not converge (cond={_condition(sigma_a):.3g})") from exc
    out = root_a @ inner_root @ inv_root_a
    if not np.all(np.isfinite(out)):
        raise FrechetError(f"matrix square root is not finite (cond={_condition(sigma_a):.3g})")
    return out


def frechet_distance(a: ActivationStats, b: ActivationStats) -> float:
    if a.dim != b.dim:
        raise StatsError(f"dimension mismatch: {a.dim} vs {b.dim}")
    diff = a.mu - b.mu
    tr = 0.5 * (trace_sqrt_product(a.sigma, b.sigma) + trace_sqrt_product(b.sigma, a.sigma))
    d = float(diff @ diff + np.trace(a.sigma) + np.trace(b.sigma) - 2.0 * tr)
    if not np.isfinite(d):
        raise FrechetError(f"Fréchet distance is not finite (cond(a)={_condition(a.sigma):.3g})")
    if d < 0.0:
        if d < -1e-6:
            raise FrechetError(f"Fréchet distance came out negative ({d:.3g}); inputs are not PSD")
        d = 0.0
    return d


# -- embedders ----------------------------------------------------------------


class Embedder(Protocol):
    name: str
    dim: int

    def embed(self, image: RenderedImage) -> np.ndarray: ...


class PixelEmbedder:
    """Block-averaged grey levels; works on any image."""

    name = "pixels"

    def __init__(self, grid: int = 16):
        self.grid = grid
        self.dim = grid * grid

    def embed(self, image: RenderedImage) -> np.ndarray:
        grey = image.as_float().mean(axis=-1)
        h, w = grey.shape
        g = self.grid
        if h % g or w % g:
            raise EmbedderError(f"image size {grey.shape} is not divisible by the {g}x{g} grid")
        return grey.reshape(g, h // g, g, w // g).mean(axis=(1, 3)).ravel()


class ToyIdentityEmbedder:
    """The toy generator's ground-truth identity coordinates.

    Edits along attribute directions never touch this subspace, so it is the
    ideal identity embedding for oracle tests.
    """

    name = "toy-identity"

    def __init__(self, dim: int = 16):
        self.dim = dim

    def embed(self, image: RenderedImage) -> np.ndarray:
        params = image.params or {}
        if "identity" not in params:
            raise EmbedderError("image carries no toy identity side channel")
        return np.asarray(params["identity"], dtype=np.float64)[: self.dim]


EMBEDDERS = {"pixels": PixelEmbedder, "toy-identity": ToyIdentityEmbedder}


def make_embedder(name: str) -> Embedder:
    try:
        return EMBEDDERS[name]()
    except KeyError:
        raise EmbedderError(f"unknown embedder {name!r}; choose from {sorted(EMBEDDERS)}") from None


@dataclass(frozen=True)
class SimilarityMatrix:
    scores: np.ndarray
    row_ids: tuple
    col_ids: tuple

    def to_csv(self, path) -> None:
        lines = ["," + ",".join(map(str, self.col_ids))]
        for rid, row in zip(self.row_ids, self.scores):
            lines.append(f"{rid}," + ",".join(f"{v:.9f}" for v in row))
        Path(path).write_text("\n".join(lines) + "\n")


def _embed_all(embedder: Embedder, images: Sequence, ids: Sequence) -> np.ndarray:
    out = []
    for sample_id, image in zip(ids, images):
        try:
            out.append(np.asarray(embedder.embed(image), dtype=np.float64))
        except Exception as exc:  # noqa: BLE001 - rewrapped with the sample name
            raise EmbedderError(f"embedder {embedder.name!r} failed on sample {sample_id!r}: {exc}") from exc
    return np.stack(out)


def cosine_matrix(emb_a: np.ndarray, emb_b: np.ndarray) -> np.ndarray:
    na = np.linalg.norm(emb_a, axis=1)
    nb = np.linalg.norm(emb_b, axis=1)
    if np.any(na == 0.0) or np.any(nb == 0.0):
        warnings.warn("zero-norm embedding; its similarities are set to 0", RuntimeWarning, stacklevel=2)
    sa = np.divide(emb_a, na[:, None], out=np.zeros_like(emb_a), where=na[:, None] > 0)
    sb = np.divide(emb_b, nb[:, None], out=np.zeros_like(emb_b), where=nb[:, None] > 0)
    return np.clip(sa @ sb.T, -1.0, 1.0)


def cosine_similarity_matrix(embedder: Embedder, images_a: Sequence, images_b: Sequence,
                             ids_a: Sequence | None = None, ids_b: Sequence | None = None) -> SimilarityMatrix:
    if not images_a or not images_b:
        raise ValueError("both image lists must be non-empty")
    ids_a = tuple(ids_a) if ids_a is not None else tuple(f"a{i}" for i in range(len(images_a)))
    ids_b = tuple(ids_b) if ids_b is not None else tuple(f"b{i}" for i in range(len(images_b)))
    ea = _embed_all(embedder, images_a, ids_a)
    eb = ea if images_b is images_a else _embed_all(embedder, images_b, ids_b)
    return SimilarityMatrix(cosine_matrix(ea, eb), ids_a, ids_b)


def stats_for_images(embedder: Embedder, images: Sequence, ids: Sequence | None = None) -> ActivationStats:
    ids = ids if ids is not None else [str(i) for i in range(len(images))]
    return accumulate_stats(_embed_all(embedder, images, ids))
