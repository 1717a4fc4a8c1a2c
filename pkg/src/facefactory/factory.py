"""Resumable dataset rendering.

Layout::

    output_root/
        manifest.csv          one row per image, sorted by sample_id
        manifest.json         plan, scale, dataset seed, tool version
        <gender>/<category>/<subject_id>/<frame:03d>.png

Subject ``k`` of a gender is ``b000012`` / ``g000012`` style and is shared by
every category, so the same child appears in base, expression, blink, ...
renders.  Its latent comes from ``derive_seed(dataset_seed, subject_id,
"base", 0)``; each manifest row records ``derive_seed(dataset_seed,
subject_id, category, frame_index)``, which is also the donor seed for skin and
hair mixes.

Rows are journaled to ``manifest.journal.csv`` (flushed and fsynced per row)
while rendering; the journal is folded into ``manifest.csv`` at the end.  A
rerun skips every row whose file still matches its digest.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Mapping, Sequence

from . import __version__
from .generator import GeneratorBackend
from .latent import (DEFAULT_LAYER_RANGES, SemanticDirection, apply_direction, coefficient_ramp, mix_styles,
                     sample_z)
from .relighting import LightingSweep, preset_sweep, relight
from .seeding import derive_seed

log = logging.getLogger(__name__)

CATEGORIES = ("base", "expressions", "blink", "skin_hair", "aging", "headpose", "relight")
GENDERS = ("boy", "girl")
MANIFEST_COLUMNS = ("sample_id", "subject_id", "gender", "category", "attribute", "frame_index", "coeff",
                    "lighting_label", "seed", "relative_path", "content_digest")
MANIFEST = "manifest.csv"
HEADER = "manifest.json"
JOURNAL = "manifest.journal.csv"
SKIN_HAIR_ROWS = (8, 18)

# largest coefficient per edit; blink closes the eyes, so it runs negative
DEFAULT_COEFF_MAX = {
    "happy": 3.0,
    "sad": 3.0,
    "angry": 3.0,
    "surprise": 3.0,
    "eye_openness": -4.0,
    "age": 3.0,
    "yaw": 2.5,
    "pitch": 2.5,
}
EXPRESSIONS = ("happy", "sad", "angry", "surprise")


class ManifestError(RuntimeError):
    pass


class PlanError(ValueError):
    pass


# -- plans --------------------------------------------------------------------


@dataclass(frozen=True)
class CategorySpec:
    name: str
    boys: int
    girls: int
    frames: int | Mapping[str, int]

    def __post_init__(self):
        if self.name not in CATEGORIES:
            raise PlanError(f"unknown category {self.name!r}; expected one of {CATEGORIES}")
        if self.boys < 0 or self.girls < 0:
            raise PlanError(f"{self.name}: subject counts must be >= 0")
        if self.frames_per_subject < 0:
            raise PlanError(f"{self.name}: frame counts must be >= 0")

    @property
    def frames_per_subject(self) -> int:
        if isinstance(self.frames, Mapping):
            return sum(int(v) for v in self.frames.values())
        return int(self.frames)

    def to_json(self) -> dict:
        frames = dict(self.frames) if isinstance(self.frames, Mapping) else int(self.frames)
        return {"name": self.name, "boys": self.boys, "girls": self.girls, "frames": frames}


@dataclass(frozen=True)
class RenderPlan:
    """Per-category subject counts and frames; ``scale`` multiplies subject
    counts, rounding down."""

    categories: tuple = ()
    scale: Fraction = Fraction(1)

    def __post_init__(self):
        object.__setattr__(self, "scale", Fraction(self.scale))
        if self.scale <= 0:
            raise PlanError(f"scale must be positive, got {self.scale}")
        names = [c.name for c in self.categories]
        if len(set(names)) != len(names):
            raise PlanError(f"duplicate categories in plan: {names}")

    def subjects(self, spec: CategorySpec, gender: str) -> int:
        count = spec.boys if gender == "boy" else spec.girls
        return math.floor(count * self.scale)

    def scaled(self, scale) -> "RenderPlan":
        return RenderPlan(self.categories, Fraction(scale))

    def to_json(self) -> dict:
        return {"scale": str(self.scale), "categories": [c.to_json() for c in self.categories]}

    @classmethod
    def from_json(cls, obj) -> "RenderPlan":
        cats = tuple(CategorySpec(c["name"], int(c["boys"]), int(c["girls"]), c["frames"]) for c in obj["categories"])
        return cls(cats, Fraction(obj.get("scale", "1")))


def published_plan(scale=1) -> RenderPlan:
    """The published composition: 10k/2k/1k subjects per gender and the
    frame counts of each transformation."""
    cats = (
        CategorySpec("base", 10_000, 10_000, 1),
        CategorySpec("expressions", 2_000, 2_000, {"happy": 6, "sad": 6, "angry": 6, "surprise": 6}),
        CategorySpec("blink", 2_000, 2_000, 6),
        CategorySpec("skin_hair", 1_000, 1_000, 6),
        CategorySpec("aging", 2_000, 2_000, 8),
        CategorySpec("headpose", 2_000, 2_000, {"yaw": 8, "pitch": 7}),
        CategorySpec("relight", 10_000, 10_000, 4),
    )
    return RenderPlan(cats, Fraction(scale))


PRESETS = {"paper": published_plan}


def plan_totals(plan: RenderPlan) -> dict:
    """Images per category and the grand total; pure arithmetic."""
    out = {}
    for spec in plan.categories:
        subjects = plan.subjects(spec, "boy") + plan.subjects(spec, "girl")
        out[spec.name] = subjects * spec.frames_per_subject
    out["total"] = sum(out.values())
    return out


# -- work items ---------------------------------------------------------------


def subject_id(gender: str, index: int) -> str:
    return f"{gender[0]}{index:06d}"


@dataclass(frozen=True)
class Frame:
    attribute: str
    frame_index: int
    coeff: float
    lighting_label: str = ""


def _category_frames(spec: CategorySpec, coeff_max: Mapping[str, float], sweep: LightingSweep) -> list[Frame]:
    name = spec.name
    frames = spec.frames if isinstance(spec.frames, Mapping) else None
    out: list[Frame] = []
    if name == "base":
        return [Frame("base", i, 0.0) for i in range(spec.frames_per_subject)]
    if name in ("expressions", "headpose"):
        attrs = frames or ({e: int(spec.frames) for e in EXPRESSIONS} if name == "expressions" else None)
        if attrs is None:
            raise PlanError(f"{name} needs a per-attribute frame map")
        for attr, n in attrs.items():
            hi = coeff_max[attr]
            lo = -hi if name == "headpose" else 0.0
            coeffs = coefficient_ramp(lo, hi, int(n)) if n else []
            offset = len(out)
            out.extend(Frame(attr, offset + k, float(c)) for k, c in enumerate(coeffs))
        return out
    if name in ("blink", "aging"):
        attr = "eye_openness" if name == "blink" else "age"
        n = spec.frames_per_subject
        coeffs = coefficient_ramp(0.0, coeff_max[attr], n) if n else []
        return [Frame(attr, k, float(c)) for k, c in enumerate(coeffs)]
    if name == "skin_hair":
        return [Frame("skin_hair", k, 0.0) for k in range(spec.frames_per_subject)]
    if name == "relight":
        lights = sweep.canonical()
        n = spec.frames_per_subject
        if n > len(lights):
            raise PlanError(f"relight asks for {n} conditions, the sweep has {len(lights)} canonical ones")
        return [Frame("relight", k, 0.0, lights[k].label) for k in range(n)]
    raise PlanError(f"no recipe for category {name!r}")


def required_directions(plan: RenderPlan) -> set[str]:
    need = set()
    for spec in plan.categories:
        if plan.subjects(spec, "boy") + plan.subjects(spec, "girl") == 0 or spec.frames_per_subject == 0:
            continue
        if spec.name == "expressions":
            need |= set(spec.frames) if isinstance(spec.frames, Mapping) else set(EXPRESSIONS)
        elif spec.name == "headpose":
            need |= set(spec.frames) if isinstance(spec.frames, Mapping) else {"yaw", "pitch"}
        elif spec.name == "blink":
            need.add("eye_openness")
        elif spec.name == "aging":
            need.add("age")
    return need


@dataclass(frozen=True)
class Job:
    gender: str
    category: str
    subject_id: str
    frames: tuple


def _relative(gender, category, sid, frame_index) -> str:
    return f"{gender}/{category}/{sid}/{frame_index:03d}.png"


def _sample_id(gender, category, sid, frame_index) -> str:
    return f"{gender}/{category}/{sid}/{frame_index:03d}"


def _digest_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def file_digest(path) -> str:
    return _digest_bytes(Path(path).read_bytes())


def _atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


# -- rendering ----------------------------------------------------------------


@dataclass
class _Context:
    backends: dict
    directions: dict
    dataset_seed: int
    output_root: str
    lights: dict


def _render_job(ctx: _Context, job: Job) -> tuple[list[dict], list[dict]]:
    """Render the frames of one (subject, category); returns (rows, failures)."""
    backend = ctx.backends[job.gender]
    base_seed = derive_seed(ctx.dataset_seed, job.subject_id, "base", 0)
    rows, failures = [], []
    try:
        w = backend.map(sample_z(base_seed))
        base_image = backend.synthesize(w) if job.category == "relight" else None
    except Exception as exc:  # noqa: BLE001 - the whole subject fails
        for f in job.frames:
            failures.append({"sample_id": _sample_id(job.gender, job.category, job.subject_id, f.frame_index),
                             "error": f"{type(exc).__name__}: {exc}"})
        return rows, failures
    for f in job.frames:
        sid = _sample_id(job.gender, job.category, job.subject_id, f.frame_index)
        seed = derive_seed(ctx.dataset_seed, job.subject_id, job.category, f.frame_index)
        try:
            if job.category == "relight":
                image = relight(base_image, ctx.lights[f.lighting_label])
            elif job.category == "skin_hair":
                donor = backend.map(sample_z(seed))
                image = backend.synthesize(mix_styles(w, donor, SKIN_HAIR_ROWS))
            elif job.category == "base":
                image = backend.synthesize(w)
            else:
                image = backend.synthesize(apply_direction(w, ctx.directions[f.attribute], f.coeff))
            data = image.to_png_bytes()
            rel = _relative(job.gender, job.category, job.subject_id, f.frame_index)
            _atomic_write(Path(ctx.output_root) / rel, data)
        except Exception as exc:  # noqa: BLE001 - per-sample isolation
            failures.append({"sample_id": sid, "error": f"{type(exc).__name__}: {exc}"})
            continue
        rows.append({
            "sample_id": sid,
            "subject_id": job.subject_id,
            "gender": job.gender,
            "category": job.category,
            "attribute": f.attribute,
            "frame_index": str(f.frame_index),
            "coeff": repr(float(f.coeff)),
            "lighting_label": f.lighting_label,
            "seed": str(seed),
            "relative_path": rel,
            "content_digest": _digest_bytes(data),
        })
    return rows, failures


_WORKER_CTX: _Context | None = None


def _init_worker(ctx: _Context) -> None:
    global _WORKER_CTX
    _WORKER_CTX = ctx


def _run_in_worker(job: Job):
    return _render_job(_WORKER_CTX, job)


# -- manifest -----------------------------------------------------------------


def _read_rows(path: Path, allow_partial_tail: bool = False) -> list[dict]:
    text = path.read_text()
    lines = text.splitlines(keepends=True)
    if allow_partial_tail and lines and not lines[-1].endswith("\n"):
        lines = lines[:-1]  # torn final append
    reader = csv.DictReader(lines)
    if reader.fieldnames is None:
        return []
    if tuple(reader.fieldnames) != MANIFEST_COLUMNS:
        raise ManifestError(f"{path}: unexpected columns {reader.fieldnames}")
    rows = []
    for i, row in enumerate(reader, start=2):
        if None in row or any(v is None for v in row.values()):
            raise ManifestError(f"{path}: malformed row at line {i}")
        rows.append(dict(row))
    return rows


def read_manifest(output_root) -> list[dict]:
    path = Path(output_root) / MANIFEST
    if not path.is_file():
        raise ManifestError(f"no manifest at {path}")
    return _read_rows(path)


def _rows_to_csv(rows: Sequence[dict]) -> bytes:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=MANIFEST_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow(row)
    return buf.getvalue().encode()


class _Journal:
    def __init__(self, path: Path):
        self.path = path
        new = not path.exists() or path.stat().st_size == 0
        self.fh = open(path, "a", newline="")
        self.writer = csv.DictWriter(self.fh, fieldnames=MANIFEST_COLUMNS, lineterminator="\n")
        if new:
            self.writer.writeheader()

    def append(self, row: dict) -> None:
        self.writer.writerow(row)
        self.fh.flush()
        os.fsync(self.fh.fileno())

    def close(self):
        self.fh.close()


@dataclass
class RenderSummary:
    rows: list
    rendered: int
    skipped: int
    failures: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"rows": len(self.rows), "rendered": self.rendered, "skipped": self.skipped,
                "failures": self.failures}


def ground_truth_directions(backend=None) -> dict[str, SemanticDirection]:
    """The toy generator's own directions under the recipe names."""
    from .toy import toy_face_spec

    gt = toy_face_spec().ground_truth_directions
    alias = {"happy": "smile"}
    return {name: SemanticDirection(name, gt[alias.get(name, name)], DEFAULT_LAYER_RANGES.get(name, (0, 18)), 1.0)
            for name in DEFAULT_COEFF_MAX}


def _plan_jobs(plan, coeff_max, sweep) -> list[Job]:
    jobs = []
    for spec in plan.categories:
        frames = tuple(_category_frames(spec, coeff_max, sweep))
        if not frames:
            continue
        for gender in GENDERS:
            for k in range(plan.subjects(spec, gender)):
                jobs.append(Job(gender, spec.name, subject_id(gender, k), frames))
    return jobs


def render_dataset(plan: RenderPlan, backends: GeneratorBackend | Mapping[str, GeneratorBackend],
                   directions: Mapping[str, SemanticDirection], output_root, sweep: LightingSweep | None = None,
                   dataset_seed: int = 0, workers: int = 1, coeff_max: Mapping[str, float] | None = None) -> RenderSummary:
    """Render every image of ``plan`` under ``output_root``.

    ``backends`` maps ``boy``/``girl`` to a backend (a single backend serves
    both).  Existing rows whose file still matches its digest are kept as is;
    missing or altered files are re-rendered.  Per-sample failures are
    reported and left out of the manifest.
    """
    root = Path(output_root)
    root.mkdir(parents=True, exist_ok=True)
    sweep = sweep or preset_sweep()
    coeff_max = {**DEFAULT_COEFF_MAX, **(coeff_max or {})}
    if isinstance(backends, GeneratorBackend):
        backends = {g: backends for g in GENDERS}
    missing = sorted(required_directions(plan) - set(directions))
    if missing:
        raise PlanError(f"plan needs directions that are not available: {missing}")

    existing: dict[str, dict] = {}
    if (root / MANIFEST).exists():
        for row in read_manifest(root):
            existing[row["sample_id"]] = row
    if (root / JOURNAL).exists():
        for row in _read_rows(root / JOURNAL, allow_partial_tail=True):
            existing[row["sample_id"]] = row

    header = {
        "format": "facefactory-manifest/1",
        "tool_version": __version__,
        "dataset_seed": int(dataset_seed),
        "plan": plan.to_json(),
        "totals": plan_totals(plan),
        "backends": {g: b.name for g, b in backends.items()},
        "coeff_max": coeff_max,
        "columns": list(MANIFEST_COLUMNS),
    }

    valid: dict[str, dict] = {}
    todo: list[Job] = []
    for job in _plan_jobs(plan, coeff_max, sweep):
        pending = []
        for f in job.frames:
            sid = _sample_id(job.gender, job.category, job.subject_id, f.frame_index)
            row = existing.get(sid)
            path = root / row["relative_path"] if row else None
            if row and path.is_file() and file_digest(path) == row["content_digest"]:
                valid[sid] = row
            else:
                pending.append(f)
        if pending:
            todo.append(Job(job.gender, job.category, job.subject_id, tuple(pending)))

    ctx = _Context(dict(backends), dict(directions), int(dataset_seed), str(root),
                   {c.label: c for c in sweep.canonical()})
    journal = _Journal(root / JOURNAL)
    failures: list[dict] = []
    rendered = 0
    try:
        if workers > 1 and len(todo) > 1:
            with ProcessPoolExecutor(workers, initializer=_init_worker, initargs=(ctx,)) as pool:
                results = pool.map(_run_in_worker, todo, chunksize=max(1, len(todo) // (4 * workers)))
                for rows, fails in results:
                    for row in rows:
                        journal.append(row)
                        valid[row["sample_id"]] = row
                    rendered += len(rows)
                    failures.extend(fails)
        else:
            for job in todo:
                rows, fails = _render_job(ctx, job)
                for row in rows:
                    journal.append(row)
                    valid[row["sample_id"]] = row
                rendered += len(rows)
                failures.extend(fails)
    finally:
        journal.close()

    ordered = [valid[k] for k in sorted(valid)]
    _atomic_write(root / HEADER, (json.dumps(header, indent=2, sort_keys=True) + "\n").encode())
    _atomic_write(root / MANIFEST, _rows_to_csv(ordered))
    (root / JOURNAL).unlink(missing_ok=True)
    for f in failures:
        log.warning("render failed for %s: %s", f["sample_id"], f["error"])
    return RenderSummary(ordered, rendered, len(ordered) - rendered, failures)


# -- verification -------------------------------------------------------------


@dataclass
class IntegrityReport:
    rows: int
    violations: list

    @property
    def passed(self) -> bool:
        return not self.violations

    def to_dict(self) -> dict:
        return {"passed": self.passed, "rows": self.rows, "violations": self.violations}

    def to_text(self) -> str:
        head = f"manifest {'OK' if self.passed else 'FAILED'}: {self.rows} rows, {len(self.violations)} violations"
        return "\n".join([head] + [f"  {v['kind']}: {v['detail']}" for v in self.violations[:50]])


def verify_manifest(output_root) -> IntegrityReport:
    """Check ids, files, digests, per-category gender balance and planned totals."""
    root = Path(output_root)
    violations = []
    try:
        rows = read_manifest(root)
    except ManifestError as exc:
        return IntegrityReport(0, [{"kind": "manifest", "detail": str(exc)}])
    seen = set()
    balance: dict[str, dict[str, int]] = {}
    for row in rows:
        sid = row["sample_id"]
        if sid in seen:
            violations.append({"kind": "duplicate", "detail": sid})
        seen.add(sid)
        path = root / row["relative_path"]
        if not path.is_file():
            violations.append({"kind": "missing", "detail": row["relative_path"]})
        elif file_digest(path) != row["content_digest"]:
            violations.append({"kind": "digest", "detail": row["relative_path"]})
        counts = balance.setdefault(row["category"], {"boy": 0, "girl": 0})
        if row["gender"] not in counts:
            violations.append({"kind": "gender", "detail": f"{sid}: unknown gender {row['gender']!r}"})
        else:
            counts[row["gender"]] += 1
    for cat, counts in sorted(balance.items()):
        if counts["boy"] != counts["girl"]:
            violations.append({"kind": "balance", "detail": f"{cat}: {counts['boy']} boys vs {counts['girl']} girls"})
    header_path = root / HEADER
    if header_path.is_file():
        try:
            header = json.loads(header_path.read_text())
            expected = {k: v for k, v in header.get("totals", {}).items() if k != "total"}
            for cat, n in sorted(expected.items()):
                got = sum(c for c in balance.get(cat, {}).values())
                if got != n:
                    violations.append({"kind": "count", "detail": f"{cat}: {got} rows, plan expects {n}"})
        except (json.JSONDecodeError, AttributeError) as exc:
            violations.append({"kind": "header", "detail": f"unreadable {HEADER}: {exc}"})
    else:
        violations.append({"kind": "header", "detail": f"{HEADER} is missing"})
    return IntegrityReport(len(rows), violations)
