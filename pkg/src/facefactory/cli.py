"""``facefactory`` command line.

Machine-readable results go to stdout as one JSON document; logs go to
stderr.  Exit codes:

    0  success
    1  unexpected error
    2  usage error (bad flags)
    3  configuration error
    4  generator backend error
    5  data error (missing or corrupt inputs, manifests, plans)
    6  a validation or integrity check ran and failed
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import __version__

log = logging.getLogger("facefactory")

EXIT_OK, EXIT_ERROR, EXIT_USAGE, EXIT_CONFIG, EXIT_BACKEND, EXIT_DATA, EXIT_CHECK = 0, 1, 2, 3, 4, 5, 6
TOY_GROUND_TRUTH = "toy-ground-truth"


class CheckFailed(Exception):
    """A check ran to completion and reported failure; carries its payload."""

    def __init__(self, payload):
        super().__init__("check failed")
        self.payload = payload


class DataError(Exception):
    pass


# -- helpers ------------------------------------------------------------------


def _backend(cfg, name=None, gender=None):
    from .generator import make_backend

    opts = cfg["backend"]
    name = name or opts["name"]
    if gender and name == "toy":
        name = f"toy-{gender}"
    if name.startswith("toy"):
        return make_backend(name, size=opts["size"])
    extra = {"device": opts["device"]}
    if opts.get("weights"):
        extra["weights"] = opts["weights"]
    return make_backend(name, **extra)


def _directions(source, backend_name, needed):
    """Load directions from a store, or the toy ground truth."""
    from .factory import ground_truth_directions
    from .store import list_directions, load_direction

    if source == TOY_GROUND_TRUTH:
        if not backend_name.startswith("toy"):
            raise DataError("toy ground-truth directions only apply to the toy backend")
        return ground_truth_directions(), TOY_GROUND_TRUTH
    available = set(list_directions(source))
    missing = sorted(set(needed) - available)
    if missing and backend_name.startswith("toy") and not available:
        log.info("direction store %s is empty; using toy ground-truth directions", source)
        return ground_truth_directions(), TOY_GROUND_TRUTH
    if missing:
        raise DataError(f"direction store {source} lacks {missing}")
    return {n: load_direction(source, n) for n in needed}, str(source)


def _sweep(cfg):
    from .relighting import build_sweep, preset_sweep

    s = cfg["sweep"]
    if "azimuth_steps" in s or "elevations" in s:
        return build_sweep(s.get("azimuth_steps", 12), s.get("elevations", [0.0]), s.get("ambient", 0.3),
                           s.get("intensity", 0.8))
    return preset_sweep()


def _load_images(directory):
    from .generator import RenderedImage

    paths = sorted(Path(directory).rglob("*.png"))
    if not paths:
        raise DataError(f"no PNG images under {directory}")
    return [RenderedImage.load_png(p) for p in paths], [str(p.relative_to(directory)) for p in paths]


def _scale(text) -> Fraction:
    try:
        value = Fraction(text)
    except (ValueError, ZeroDivisionError):
        raise argparse.ArgumentTypeError(f"scale must be a positive fraction like 1/1000, got {text!r}") from None
    if value <= 0:
        raise argparse.ArgumentTypeError(f"scale must be positive, got {text!r}")
    return value


# -- commands -----------------------------------------------------------------


def cmd_train_direction(args, cfg):
    from .directions import RECIPE_ATTRIBUTES, SolverConfig, fit_direction, harvest, make_annotator, recipe_directions
    from .store import save_direction

    backend = _backend(cfg, args.backend)
    annotator = make_annotator(args.annotator or cfg["annotator"])
    solver = SolverConfig(**cfg["solver"])
    store = Path(args.store or cfg["direction_store"])
    gt = getattr(backend, "directions", None)

    def describe(report):
        d = report.direction
        out = {"name": d.name, "train_accuracy": report.train_accuracy, "holdout_accuracy": report.holdout_accuracy,
               "sample_count": report.sample_count, "converged": report.converged,
               "layer_range": list(d.layer_range), "warnings": list(report.warnings)}
        if gt is not None:
            key = annotator.aliases.get(d.name, d.name) if hasattr(annotator, "aliases") else d.name
            if key in gt:
                vec = d.vector if d.vector.ndim == 1 else d.vector.mean(axis=0)
                out["cosine_to_ground_truth"] = float(vec @ gt[key] / np.linalg.norm(vec))
        return out

    if args.attribute == "all":
        result = recipe_directions(backend, annotator, args.n, args.seed, solver, RECIPE_ATTRIBUTES, store,
                                   cfg["thresholds"])
        payload = {"store": str(store), "directions": [describe(r) for r in result.reports.values()],
                   "errors": result.errors}
        if result.errors and not result.reports:
            raise DataError(f"every attribute failed: {result.errors}")
        return payload
    samples = harvest(backend, annotator, args.attribute, args.n, args.seed, cfg["thresholds"].get(args.attribute, 0.5))
    report = fit_direction(samples, args.attribute, solver)
    path = save_direction(store, report.direction)
    return {"store": str(store), "path": str(path), "skipped": samples.skipped, **describe(report)}


def cmd_edit(args, cfg):
    from .latent import apply_direction, sample_z
    from .store import load_latent

    backend = _backend(cfg, args.backend)
    if args.latent:
        w, _ = load_latent(args.latent)
    else:
        w = backend.map(sample_z(args.subject_seed))
    directions, source = _directions(args.directions or cfg["direction_store"], backend.name, [args.direction])
    if args.direction not in directions:
        raise DataError(f"no direction {args.direction!r} in {source}; have {sorted(directions)}")
    edited = apply_direction(w, directions[args.direction], args.coeff)
    original = backend.synthesize(w)
    image = backend.synthesize(edited)
    payload = {"direction": args.direction, "direction_source": source, "coeff": args.coeff,
               "digest": image.digest(), "unedited_digest": original.digest(),
               "latent_digest": edited.digest()}
    if args.out:
        image.save_png(args.out)
        payload["out"] = str(args.out)
    return payload


def cmd_invert(args, cfg):
    from .generator import RenderedImage
    from .inversion import InversionConfig, invert
    from .store import save_latent

    backend = _backend(cfg, args.backend)
    try:
        target = RenderedImage.load_png(args.image)
    except OSError as exc:
        raise DataError(f"cannot read {args.image}: {exc}") from exc
    settings = dict(cfg["inversion"])
    if "blur_schedule" in settings:
        settings["blur_schedule"] = tuple(settings["blur_schedule"])
    if args.max_iters is not None:
        settings["max_iters"] = args.max_iters
    result = invert(backend, target, InversionConfig(**settings))
    path = save_latent(args.out, result.w_star)
    return {"out": str(path), "final_loss": result.final_loss, "pixel_mse": result.pixel_mse,
            "iterations": result.iterations_used, "converged": result.converged,
            "latent_digest": result.w_star.digest()}


def cmd_relight(args, cfg):
    from .generator import RenderedImage
    from .relighting import canonical_light, relight

    try:
        image = RenderedImage.load_png(args.image)
    except OSError as exc:
        raise DataError(f"cannot read {args.image}: {exc}") from exc
    out = Path(args.out)
    if args.light:
        lights = [canonical_light(args.light)]
    else:
        lights = _sweep(cfg).conditions
    written = []
    if len(lights) == 1 and out.suffix == ".png":
        relight(image, lights[0]).save_png(out)
        written.append({"label": lights[0].label, "path": str(out)})
    else:
        out.mkdir(parents=True, exist_ok=True)
        for k, light in enumerate(lights):
            path = out / f"{k:03d}_{light.label}.png"
            relight(image, light).save_png(path)
            written.append({"label": light.label, "path": str(path)})
    return {"conditions": len(written), "outputs": written}


def cmd_fid(args, cfg):
    from .metrics import frechet_distance, make_embedder, stats_for_images

    embedder = make_embedder(args.embedder or cfg["embedder"])
    images_a, ids_a = _load_images(args.set_a)
    images_b, ids_b = _load_images(args.set_b)
    sa = stats_for_images(embedder, images_a, ids_a)
    sb = stats_for_images(embedder, images_b, ids_b)
    return {"fid": frechet_distance(sa, sb), "embedder": embedder.name, "n_a": sa.n, "n_b": sb.n}


def _validate_ear(args, cfg, backend):
    from .validation import blink_sweep_check

    directions, _ = _directions(args.directions or cfg["direction_store"], backend.name, ["eye_openness"])
    report = blink_sweep_check(backend, directions["eye_openness"], frames=args.frames,
                               coeff_end=cfg["coeff_max"].get("eye_openness", -4.0), subject_seed=args.subject_seed)
    return report, report.passed and report.final <= 0.5 * report.initial


def _validate_landmarks(args, cfg, backend):
    from .latent import apply_direction, sample_z
    from .validation import DlibLandmarkDetector, ToyLandmarkDetector, landmark_check

    directions, _ = _directions(args.directions or cfg["direction_store"], backend.name, ["yaw", "pitch", "happy"])
    det = cfg["detector"]
    detector = ToyLandmarkDetector() if det["name"] == "toy" else DlibLandmarkDetector(det["predictor"])
    images, ids = [], []
    for k in range(args.count):
        w = backend.map(sample_z(args.subject_seed + k))
        attr = ("yaw", "pitch", "happy")[k % 3]
        coeff = (-1.0) ** k * cfg["coeff_max"].get(attr, 2.5) * ((k % 5) / 4.0)
        images.append(backend.synthesize(apply_direction(w, directions[attr], coeff)))
        ids.append(f"{k:03d}_{attr}{coeff:+.2f}")
    report = landmark_check(images, detector, ids)
    return report, report.detection_rate == 1.0 and report.containment_rate == 1.0


def _validate_uniqueness(args, cfg, backend):
    from .latent import apply_direction, sample_z
    from .metrics import make_embedder
    from .validation import Verdict, uniqueness_report

    edits = ["happy", "sad", "eye_openness", "age", "yaw"]
    directions, _ = _directions(args.directions or cfg["direction_store"], backend.name, edits)
    embedder = make_embedder(args.embedder or "toy-identity")
    subjects = []
    for s in range(args.subjects):
        w = backend.map(sample_z(args.subject_seed + s))
        subjects.append([backend.synthesize(apply_direction(w, directions[e], cfg["coeff_max"].get(e, 2.0)))
                         for e in edits])
    report = uniqueness_report(embedder, subjects, [f"s{args.subject_seed + s}" for s in range(args.subjects)])
    if args.matrix_csv:
        report.matrix.to_csv(args.matrix_csv)
    return report, report.verdict is Verdict.SEPARATED


def _validate_gender(args, cfg, backend):
    from .validation import ClassifierHarness, LinearProbe, gender_harness_run, toy_gender_dataset

    h = cfg["harness"]
    train = toy_gender_dataset(backend, h["train_size"], derive(h["seed"], "train"))
    test = toy_gender_dataset(backend, h["test_size"], derive(h["seed"], "test"))
    harness = ClassifierHarness(lambda: LinearProbe(lr=h["lr"]), epochs=h["epochs"], seed=h["seed"])
    report = gender_harness_run(harness, train, test)
    return report, report.final_test_accuracy >= args.min_accuracy


def derive(*parts):
    from .seeding import derive_seed

    return derive_seed(*parts)


def cmd_validate(args, cfg):
    suites = {"ear": _validate_ear, "landmarks": _validate_landmarks, "uniqueness": _validate_uniqueness,
              "gender": _validate_gender}
    backend = _backend(cfg, args.backend)
    report, ok = suites[args.suite](args, cfg, backend)
    log.info("%s", report.to_text())
    payload = {"suite": args.suite, "passed": bool(ok), "report": report.to_dict()}
    if not ok:
        raise CheckFailed(payload)
    return payload


def _plan(args):
    from .factory import PRESETS

    return PRESETS[args.preset](args.scale)


def cmd_plan_totals(args, cfg):
    from .factory import plan_totals

    return {"preset": args.preset, "scale": str(args.scale), "totals": plan_totals(_plan(args))}


def cmd_render_dataset(args, cfg):
    from .factory import GENDERS, render_dataset, required_directions

    plan = _plan(args)
    name = args.backend or cfg["backend"]["name"]
    backends = {g: _backend(cfg, name, g) for g in GENDERS}
    directions, source = _directions(args.directions or cfg["direction_store"], name, sorted(required_directions(plan)))
    out = Path(args.out or cfg["output_root"])
    summary = render_dataset(plan, backends, directions, out, _sweep(cfg),
                             cfg["dataset_seed"] if args.dataset_seed is None else args.dataset_seed,
                             args.workers or cfg["workers"], cfg["coeff_max"])
    return {"output_root": str(out), "direction_source": source, **summary.to_dict()}


def cmd_verify_manifest(args, cfg):
    from .factory import verify_manifest

    report = verify_manifest(args.root or cfg["output_root"])
    log.info("%s", report.to_text())
    payload = report.to_dict()
    if not report.passed:
        raise CheckFailed(payload)
    return payload


# -- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="facefactory", description="Synthetic face dataset tooling.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--config", help="YAML config file")
    p.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train-direction", help="harvest, label and fit an attribute direction")
    s.add_argument("--attribute", required=True, help="attribute name, or 'all' for the full recipe")
    s.add_argument("--n", type=int, default=2000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--backend")
    s.add_argument("--annotator")
    s.add_argument("--store", help="direction store directory")
    s.set_defaults(func=cmd_train_direction)

    s = sub.add_parser("edit", help="render a subject edited along one direction")
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--subject-seed", type=int)
    g.add_argument("--latent", help="latent store directory")
    s.add_argument("--direction", required=True)
    s.add_argument("--coeff", type=float, required=True)
    s.add_argument("--backend")
    s.add_argument("--directions", help=f"direction store, or '{TOY_GROUND_TRUTH}'")
    s.add_argument("--out", help="output PNG")
    s.set_defaults(func=cmd_edit)

    s = sub.add_parser("invert", help="fit a latent to an image")
    s.add_argument("--image", required=True)
    s.add_argument("--backend")
    s.add_argument("--out", required=True, help="latent store directory")
    s.add_argument("--max-iters", type=int)
    s.set_defaults(func=cmd_invert)

    s = sub.add_parser("relight", help="relight an image with spherical-harmonics lighting")
    s.add_argument("--image", required=True)
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--sweep", choices=["preset61"])
    g.add_argument("--light", choices=["up", "down", "left", "right"])
    s.add_argument("--out", required=True, help="output PNG (single light) or directory")
    s.set_defaults(func=cmd_relight)

    s = sub.add_parser("fid", help="Frechet distance between two image folders")
    s.add_argument("--set-a", required=True)
    s.add_argument("--set-b", required=True)
    s.add_argument("--embedder")
    s.set_defaults(func=cmd_fid)

    s = sub.add_parser("validate", help="run one data-quality suite")
    s.add_argument("--suite", required=True, choices=["ear", "landmarks", "uniqueness", "gender"])
    s.add_argument("--backend")
    s.add_argument("--directions", help=f"direction store, or '{TOY_GROUND_TRUTH}'")
    s.add_argument("--embedder")
    s.add_argument("--subject-seed", type=int, default=0)
    s.add_argument("--frames", type=int, default=6)
    s.add_argument("--count", type=int, default=100, help="images for the landmark suite")
    s.add_argument("--subjects", type=int, default=10, help="subjects for the uniqueness suite")
    s.add_argument("--min-accuracy", type=float, default=0.95, help="gender suite pass mark")
    s.add_argument("--matrix-csv", help="write the uniqueness similarity matrix here")
    s.set_defaults(func=cmd_validate)

    for name, func, helptext in (("render-dataset", cmd_render_dataset, "render a dataset plan"),
                                 ("plan-totals", cmd_plan_totals, "image counts of a plan")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--preset", default="paper", choices=["paper"])
        s.add_argument("--scale", type=_scale, default=Fraction(1))
        if name == "render-dataset":
            s.add_argument("--out")
            s.add_argument("--backend")
            s.add_argument("--directions", help=f"direction store, or '{TOY_GROUND_TRUTH}'")
            s.add_argument("--workers", type=int)
            s.add_argument("--dataset-seed", type=int)
        s.set_defaults(func=func)

    s = sub.add_parser("verify-manifest", help="check a rendered dataset")
    s.add_argument("--root")
    s.set_defaults(func=cmd_verify_manifest)
    return p


def _exit_code(exc) -> int:
    from .config import ConfigError
    from .directions import AnnotationError, DirectionFitError
    from .factory import ManifestError, PlanError
    from .generator import BackendError
    from .inversion import InversionError
    from .metrics import EmbedderError, FrechetError, StatsError
    from .store import ContainerError
    from .validation import HarnessError, ValidationError

    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, BackendError):
        return EXIT_BACKEND
    if isinstance(exc, (DataError, ManifestError, PlanError, ContainerError, EmbedderError, StatsError, FrechetError,
                        AnnotationError, DirectionFitError, InversionError, HarnessError, ValidationError,
                        FileNotFoundError)):
        return EXIT_DATA
    return EXIT_ERROR


def main(argv=None, stdout=None) -> int:
    stdout = stdout or sys.stdout
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=args.log_level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s",
                        force=True)
    from .config import load_config

    try:
        cfg = load_config(args.config)
        payload = args.func(args, cfg)
        code = EXIT_OK
    except CheckFailed as exc:
        payload, code = exc.payload, EXIT_CHECK
    except Exception as exc:  # noqa: BLE001 - categorized exit status
        code = _exit_code(exc)
        log.error("%s: %s", type(exc).__name__, exc)
        if code == EXIT_ERROR:
            log.debug("traceback", exc_info=True)
        payload = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    stdout.write(json.dumps(payload, indent=2, sort_keys=True, default=_json_default) + "\n")
    stdout.flush()
    return code


def _json_default(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return str(obj)


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
