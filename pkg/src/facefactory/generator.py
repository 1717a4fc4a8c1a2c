"""Generator backends: latent in, image out.

A backend is frozen after construction.  ``synthesize`` must be a pure
function of the latent; backends that cannot be called concurrently are wrapped
in :class:`SerializedBackend`.
"""

from __future__ import annotations

import abc
import hashlib
import io
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np
from PIL import Image

from .latent import LATENT_SHAPE, LatentSource, LatentW, LatentZ


class BackendError(RuntimeError):
    """Base class for generator failures."""


class BackendLoadError(BackendError):
    """The backend could not be constructed (missing weights, missing runtime)."""


class BackendInferenceError(BackendError):
    """The backend was loaded but failed while producing an image."""


class UnsupportedOperation(BackendError):
    pass


@dataclass(frozen=True)
class RenderedImage:
    """An 8-bit RGB image plus provenance.

    ``params`` is an optional ground-truth side channel filled in by the toy
    generator (face parameters, landmarks).  Images read back from PNG have no
    side channel.
    """

    pixels: np.ndarray
    latent_digest: str | None = None
    params: Mapping[str, Any] | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 3 or px.shape[2] != 3 or px.dtype != np.uint8:
            raise ValueError(f"pixels must be an HxWx3 uint8 array, got {px.shape} {px.dtype}")
        px = np.array(px, copy=True)
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def size(self) -> tuple[int, int]:
        return self.pixels.shape[0], self.pixels.shape[1]

    def as_float(self) -> np.ndarray:
        return self.pixels.astype(np.float64) / 255.0

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(repr(self.pixels.shape).encode())
        h.update(self.pixels.tobytes())
        return h.hexdigest()

    def to_png_bytes(self) -> bytes:
        buf = io.BytesIO()
        Image.fromarray(self.pixels, mode="RGB").save(buf, format="PNG")
        return buf.getvalue()

    def save_png(self, path) -> None:
        Path(path).write_bytes(self.to_png_bytes())

    @classmethod
    def load_png(cls, path) -> "RenderedImage":
        with Image.open(path) as im:
            return cls(np.asarray(im.convert("RGB")))


def quantize(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


class GeneratorBackend(abc.ABC):
    """The frozen ``Generator(w, theta)``; theta lives inside the subclass."""

    name: str = "abstract"
    latent_shape = LATENT_SHAPE

    @property
    @abc.abstractmethod
    def output_size(self) -> tuple[int, int]: ...

    @property
    @abc.abstractmethod
    def w_avg(self) -> LatentW: ...

    @abc.abstractmethod
    def map(self, z: LatentZ) -> LatentW:
        """Map a z code into W."""

    @abc.abstractmethod
    def render(self, w: LatentW) -> np.ndarray:
        """Float HxWx3 image in [0, 1] for ``w``."""

    def side_channel(self, w: LatentW) -> Mapping[str, Any] | None:
        return None

    def synthesize(self, w: LatentW) -> RenderedImage:
        if not np.all(np.isfinite(w.rows)):
            raise ValueError("latent contains non-finite entries")
        try:
            image = self.render(w)
        except BackendError:
            raise
        except Exception as exc:  # noqa: BLE001 - re-raised with category
            raise BackendInferenceError(f"{self.name}: inference failed: {exc}") from exc
        if image.shape[:2] != tuple(self.output_size):
            raise BackendInferenceError(f"{self.name}: produced {image.shape[:2]}, expected {self.output_size}")
        return RenderedImage(quantize(image), w.digest(), self.side_channel(w))


class SerializedBackend(GeneratorBackend):
    """Wrap a backend that must not run concurrently (e.g. device-bound)."""

    def __init__(self, inner: GeneratorBackend):
        self._inner = inner
        self._lock = threading.Lock()
        self.name = inner.name

    @property
    def output_size(self):
        return self._inner.output_size

    @property
    def w_avg(self):
        return self._inner.w_avg

    def map(self, z):
        with self._lock:
            return self._inner.map(z)

    def render(self, w):
        with self._lock:
            return self._inner.render(w)

    def side_channel(self, w):
        return self._inner.side_channel(w)


class TorchScriptBackend(GeneratorBackend):
    """Pretrained StyleGAN2-style weights exported with TorchScript.

    The scripted module must expose ``mapping(z) -> (1, 18, 512)`` and
    ``synthesis(w) -> (1, 3, H, W)`` with outputs in [-1, 1]; ``w_avg`` is read
    from a ``w_avg`` buffer on the module.
    """

    def __init__(self, weights_path, name: str = "stylegan2", device: str = "cpu"):
        self.name = name
        try:
            import torch
        except ImportError as exc:
            raise BackendLoadError(f"{name}: torch is not installed") from exc
        path = Path(weights_path)
        if not path.is_file():
            raise BackendLoadError(f"{name}: weights not found at {path}")
        try:
            self._module = torch.jit.load(str(path), map_location=device).eval()
            w_avg = self._module.w_avg.detach().cpu().numpy().astype(np.float64)
        except Exception as exc:  # noqa: BLE001
            raise BackendLoadError(f"{name}: cannot load {path}: {exc}") from exc
        self._torch = torch
        self._device = device
        self._w_avg = LatentW(np.broadcast_to(w_avg.reshape(-1)[-512:], LATENT_SHAPE), LatentSource.MAPPED)
        with torch.no_grad():
            probe = self._module.synthesis(torch.as_tensor(self._w_avg.rows[None].astype(np.float32), device=device))
        self._size = (int(probe.shape[2]), int(probe.shape[3]))

    @property
    def output_size(self):
        return self._size

    @property
    def w_avg(self):
        return self._w_avg

    def map(self, z):
        torch = self._torch
        with torch.no_grad():
            out = self._module.mapping(torch.as_tensor(z.values[None].astype(np.float32), device=self._device))
        return LatentW(out.cpu().numpy().reshape(LATENT_SHAPE).astype(np.float64))

    def render(self, w):
        torch = self._torch
        with torch.no_grad():
            img = self._module.synthesis(torch.as_tensor(w.rows[None].astype(np.float32), device=self._device))
        img = img[0].permute(1, 2, 0).cpu().numpy().astype(np.float64)
        return (img + 1.0) / 2.0


def make_backend(name: str, **options) -> GeneratorBackend:
    """Build a backend from its registry name.

    ``toy``, ``toy-boy`` and ``toy-girl`` are the procedural generator (the
    gendered variants mirror the paired boys/girls models); ``torchscript``
    needs ``weights`` pointing at an exported model.
    """
    from .toy import ToyGenerator

    if name == "toy":
        return ToyGenerator(**options)
    if name in ("toy-boy", "toy-girl"):
        return ToyGenerator(gender=name.split("-")[1], **options)
    if name == "torchscript":
        opts = dict(options)
        weights = opts.pop("weights", None)
        if weights is None:
            raise BackendLoadError("torchscript backend needs a 'weights' path")
        return SerializedBackend(TorchScriptBackend(weights, **opts))
    raise BackendLoadError(f"unknown backend {name!r}")


BACKEND_NAMES = ("toy", "toy-boy", "toy-girl", "torchscript")
