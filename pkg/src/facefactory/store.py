"""On-disk container for named little-endian arrays.

A container is two files sharing a stem: ``<stem>.bin`` holds the raw array
bytes back to back, ``<stem>.json`` describes them::

    {"format": "facefactory-arrays/1",
     "arrays": [{"name": "w", "dtype": "<f4", "shape": [18, 512],
                 "offset": 0, "nbytes": 36864}, ...],
     "meta": {...}}

Writing is deterministic (sorted JSON keys, fixed array order) so identical
content gives identical files.  Latents are stored as float32 as required by
the release format; directions and activation statistics use float64 because
their unit-norm and symmetry invariants do not survive float32 rounding.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from .latent import LatentSource, LatentW, LatentZ, SemanticDirection, sample_z

FORMAT = "facefactory-arrays/1"
_ALLOWED_DTYPES = ("<f4", "<f8")


class ContainerError(ValueError):
    pass


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def write_container(stem, arrays: dict, meta: dict | None = None, dtype: str = "<f4") -> None:
    if dtype not in _ALLOWED_DTYPES:
        raise ContainerError(f"unsupported dtype {dtype!r}")
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    blobs, entries, offset = [], [], 0
    for name, value in arrays.items():
        arr = np.ascontiguousarray(np.asarray(value), dtype=dtype)
        raw = arr.tobytes()
        entries.append({"name": name, "dtype": dtype, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {"format": FORMAT, "arrays": entries, "meta": meta or {}}
    _atomic_write(stem.with_suffix(".bin"), b"".join(blobs))
    _atomic_write(stem.with_suffix(".json"), (json.dumps(header, indent=2, sort_keys=True) + "\n").encode())


def read_container(stem) -> tuple[dict, dict]:
    """Return ``(arrays, meta)``; arrays keep the dtype they were written with."""
    stem = Path(stem)
    try:
        header = json.loads(stem.with_suffix(".json").read_text())
        blob = stem.with_suffix(".bin").read_bytes()
    except (OSError, json.JSONDecodeError) as exc:
        raise ContainerError(f"cannot read container {stem}: {exc}") from exc
    if header.get("format") != FORMAT:
        raise ContainerError(f"{stem}: unknown container format {header.get('format')!r}")
    arrays = {}
    for entry in header["arrays"]:
        if entry["dtype"] not in _ALLOWED_DTYPES:
            raise ContainerError(f"{stem}: unsupported dtype {entry['dtype']!r}")
        start, stop = entry["offset"], entry["offset"] + entry["nbytes"]
        if stop > len(blob):
            raise ContainerError(f"{stem}: array {entry['name']!r} runs past end of data")
        arr = np.frombuffer(blob[start:stop], dtype=entry["dtype"]).reshape(entry["shape"])
        arrays[entry["name"]] = arr.copy()
    return arrays, header.get("meta", {})


# -- latent store -------------------------------------------------------------


def save_latent(directory, w: LatentW, z: LatentZ | None = None) -> Path:
    directory = Path(directory)
    arrays = {"w": w.rows}
    meta = {"source": w.source.value, "shape": list(w.rows.shape), "dtype": "<f4", "seed": None}
    if z is not None:
        arrays = {"z": z.values, "w": w.rows}
        meta["seed"] = int(z.seed)
    write_container(directory / "latent", arrays, meta, dtype="<f4")
    return directory


def load_latent(directory) -> tuple[LatentW, LatentZ | None]:
    arrays, meta = read_container(Path(directory) / "latent")
    w = LatentW(arrays["w"].astype(np.float64), LatentSource(meta["source"]))
    z = None
    if "z" in arrays:
        # z is stored as float32; its seed regenerates the exact float64 draw.
        seed = int(meta["seed"])
        regenerated = sample_z(seed)
        if np.array_equal(regenerated.values.astype("<f4"), arrays["z"]):
            z = regenerated
        else:
            z = LatentZ(arrays["z"].astype(np.float64), seed)
    return w, z


# -- direction store ----------------------------------------------------------


def save_direction(store, direction: SemanticDirection) -> Path:
    directory = Path(store) / direction.name
    acc = direction.classifier_accuracy
    meta = {
        "name": direction.name,
        "layer_range": list(direction.layer_range),
        "classifier_accuracy": None if np.isnan(acc) else acc,
    }
    write_container(directory / "direction", {"vector": direction.vector}, meta, dtype="<f8")
    return directory


def load_direction(store, name: str) -> SemanticDirection:
    arrays, meta = read_container(Path(store) / name / "direction")
    acc = meta.get("classifier_accuracy")
    return SemanticDirection(
        meta["name"],
        arrays["vector"],
        tuple(meta["layer_range"]),
        float("nan") if acc is None else acc,
    )


def list_directions(store) -> list[str]:
    store = Path(store)
    if not store.is_dir():
        return []
    return sorted(p.name for p in store.iterdir() if (p / "direction.json").is_file())
