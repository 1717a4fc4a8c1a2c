import csv
import hashlib
import json
import shutil
from fractions import Fraction
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from facefactory.factory import (
    CATEGORIES,
    HEADER,
    JOURNAL,
    MANIFEST,
    MANIFEST_COLUMNS,
    CategorySpec,
    ManifestError,
    PlanError,
    RenderPlan,
    ground_truth_directions,
    published_plan,
    plan_totals,
    read_manifest,
    render_dataset,
    verify_manifest,
)
from facefactory.relighting import preset_sweep
from facefactory.seeding import derive_seed
from facefactory.toy import ToyGenerator

PUBLISHED_TOTALS = {"base": 20_000, "expressions": 96_000, "blink": 24_000, "skin_hair": 12_000,
                "aging": 32_000, "headpose": 60_000, "relight": 80_000, "total": 324_000}
SMALL = Fraction(1, 1000)


def tree_digests(root):
    root = Path(root)
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


def pngs(root):
    return sorted(Path(root).rglob("*.png"))


def render(root, scale=SMALL, **kw):
    return render_dataset(published_plan(scale), ToyGenerator(size=32), ground_truth_directions(), root, **kw)


@pytest.fixture(scope="module")
def rendered(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    summary = render(root)
    return root, summary


def test_published_totals():
    assert plan_totals(published_plan()) == PUBLISHED_TOTALS


def test_scaled_totals():
    assert plan_totals(published_plan(SMALL)) == {k: v // 1000 for k, v in PUBLISHED_TOTALS.items()}


def test_empty_plan_is_zero():
    assert plan_totals(RenderPlan()) == {"total": 0}


def test_scale_rounds_subject_counts_down():
    plan = RenderPlan((CategorySpec("blink", 3, 3, 6),), Fraction(1, 2))
    assert plan_totals(plan)["total"] == 2 * 1 * 6


def test_published_plan_is_gender_balanced():
    for spec in published_plan().categories:
        assert spec.boys == spec.girls
    assert {c.name for c in published_plan().categories} == set(CATEGORIES)


def test_plan_validation():
    with pytest.raises(PlanError):
        CategorySpec("tattoos", 1, 1, 1)
    with pytest.raises(PlanError):
        CategorySpec("base", -1, 1, 1)
    with pytest.raises(PlanError):
        RenderPlan(scale=0)
    with pytest.raises(PlanError):
        RenderPlan((CategorySpec("base", 1, 1, 1), CategorySpec("base", 2, 2, 1)))


def test_plan_json_round_trip():
    plan = published_plan(SMALL)
    assert RenderPlan.from_json(json.loads(json.dumps(plan.to_json()))) == plan


def test_render_small_preset(rendered):
    root, summary = rendered
    assert len(pngs(root)) == 324
    assert summary.rendered == 324 and summary.skipped == 0 and not summary.failures
    assert len(read_manifest(root)) == 324
    report = verify_manifest(root)
    assert report.passed, report.to_text()
    assert not (root / JOURNAL).exists()


def test_manifest_layout(rendered):
    root, _ = rendered
    rows = read_manifest(root)
    assert rows == sorted(rows, key=lambda r: r["sample_id"])
    header = (root / MANIFEST).read_text().splitlines()[0]
    assert header.split(",") == list(MANIFEST_COLUMNS)
    for row in rows:
        parts = Path(row["relative_path"]).parts
        assert parts == (row["gender"], row["category"], row["subject_id"], f"{int(row['frame_index']):03d}.png")
        assert int(row["seed"]) == derive_seed(0, row["subject_id"], row["category"], int(row["frame_index"]))
    meta = json.loads((root / HEADER).read_text())
    assert meta["dataset_seed"] == 0 and meta["plan"]["scale"] == "1/1000"
    assert meta["totals"]["total"] == 324 and meta["tool_version"]


def test_frame_recipes(rendered):
    root, _ = rendered
    rows = read_manifest(root)
    one = [r for r in rows if r["subject_id"] == "b000000"]
    by_cat = {}
    for r in one:
        by_cat.setdefault(r["category"], []).append(r)
    assert {c: len(v) for c, v in by_cat.items()} == {"base": 1, "expressions": 24, "blink": 6, "skin_hair": 6,
                                                      "aging": 8, "headpose": 15, "relight": 4}
    pose = [r["attribute"] for r in by_cat["headpose"]]
    assert pose.count("yaw") == 8 and pose.count("pitch") == 7
    yaw = [float(r["coeff"]) for r in by_cat["headpose"] if r["attribute"] == "yaw"]
    assert yaw[0] == -yaw[-1] != 0
    blink = [float(r["coeff"]) for r in by_cat["blink"]]
    assert blink[0] == 0.0 and blink == sorted(blink, reverse=True)
    assert {r["lighting_label"] for r in by_cat["relight"]} == {"up", "down", "left", "right"}
    assert len({r["seed"] for r in by_cat["skin_hair"]}) == 6


def test_subjects_are_shared_across_categories(rendered):
    root, _ = rendered
    base = (root / "boy/base/b000000/000.png").read_bytes()
    assert (root / "boy/expressions/b000000/000.png").read_bytes() == base  # happy ramp starts at 0
    assert (root / "boy/blink/b000000/000.png").read_bytes() == base


def test_rerun_renders_nothing(rendered, tmp_path):
    root, _ = rendered
    copy = tmp_path / "copy"
    shutil.copytree(root, copy)
    manifest = (copy / MANIFEST).read_bytes()
    summary = render(copy)
    assert summary.rendered == 0 and summary.skipped == 324
    assert (copy / MANIFEST).read_bytes() == manifest


def test_deleted_file_is_repaired_once(rendered, tmp_path):
    root, _ = rendered
    copy = tmp_path / "copy"
    shutil.copytree(root, copy)
    before = tree_digests(copy)
    (copy / "girl/aging/g000000/005.png").unlink()
    assert not verify_manifest(copy).passed
    summary = render(copy)
    assert summary.rendered == 1
    assert tree_digests(copy) == before


def test_altered_file_is_a_digest_violation(rendered, tmp_path):
    root, _ = rendered
    copy = tmp_path / "copy"
    shutil.copytree(root, copy)
    target = copy / "boy/relight/b000000/002.png"
    target.write_bytes(target.read_bytes() + b"\0")
    report = verify_manifest(copy)
    assert [v["kind"] for v in report.violations] == ["digest"]
    assert "boy/relight/b000000/002.png" in report.to_text()
    assert render(copy).rendered == 1
    assert verify_manifest(copy).passed


def test_rendering_is_deterministic_across_workers(rendered, tmp_path):
    root, _ = rendered
    render(tmp_path / "par", workers=2)
    assert tree_digests(tmp_path / "par") == tree_digests(root)


def test_dataset_seed_changes_content(rendered, tmp_path):
    root, _ = rendered
    plan = RenderPlan((CategorySpec("base", 1, 1, 1),))
    render_dataset(plan, ToyGenerator(size=32), {}, tmp_path / "s1", dataset_seed=1)
    assert (tmp_path / "s1/boy/base/b000000/000.png").read_bytes() != (root / "boy/base/b000000/000.png").read_bytes()


def test_resume_from_journal(rendered, tmp_path):
    root, _ = rendered
    copy = tmp_path / "copy"
    shutil.copytree(root, copy)
    lines = (copy / MANIFEST).read_text().splitlines(keepends=True)
    # a crash after 100 journaled rows, mid-way through writing the next one
    (copy / JOURNAL).write_text("".join(lines[:101]) + lines[101][:20])
    (copy / MANIFEST).unlink()
    for row in read_manifest(root)[100:]:
        (copy / row["relative_path"]).unlink()
    summary = render(copy)
    assert summary.rendered == 224 and summary.skipped == 100
    assert tree_digests(copy) == tree_digests(root)


def test_missing_direction_is_rejected(tmp_path):
    dirs = ground_truth_directions()
    del dirs["age"]
    with pytest.raises(PlanError, match="age"):
        render_dataset(published_plan(SMALL), ToyGenerator(size=32), dirs, tmp_path)


def test_corrupt_manifest_aborts(rendered, tmp_path):
    root, _ = rendered
    copy = tmp_path / "copy"
    shutil.copytree(root, copy)
    (copy / MANIFEST).write_text("what,is,this\n1,2,3\n")
    with pytest.raises(ManifestError):
        render(copy)
    assert verify_manifest(copy).violations[0]["kind"] == "manifest"


def test_per_sample_failures_are_isolated(tmp_path):
    dirs = ground_truth_directions()
    dirs["eye_openness"] = None  # every blink frame fails to edit
    plan = RenderPlan((CategorySpec("base", 1, 1, 1), CategorySpec("blink", 1, 1, 6)))
    summary = render_dataset(plan, ToyGenerator(size=32), dirs, tmp_path)
    assert summary.rendered == 2 and len(summary.failures) == 12
    assert all("blink" in f["sample_id"] for f in summary.failures)
    kinds = {v["kind"] for v in verify_manifest(tmp_path).violations}
    assert kinds == {"count"}


def test_gender_imbalance_is_reported(rendered, tmp_path):
    root, _ = rendered
    copy = tmp_path / "copy"
    shutil.copytree(root, copy)
    with open(copy / MANIFEST, newline="") as fh:
        rows = list(csv.DictReader(fh))
    rows = [r for r in rows if r["sample_id"] != "girl/base/g000000/000"]
    with open(copy / MANIFEST, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=MANIFEST_COLUMNS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    kinds = {v["kind"] for v in verify_manifest(copy).violations}
    assert kinds == {"balance", "count"}


def test_relight_asks_for_too_many_conditions(tmp_path):
    plan = RenderPlan((CategorySpec("relight", 1, 1, 5),))
    with pytest.raises(PlanError):
        render_dataset(plan, ToyGenerator(size=32), {}, tmp_path, sweep=preset_sweep())


# -- properties ---------------------------------------------------------------


@given(st.integers(1, 5000))
def test_totals_linear_in_scale(m):
    totals = plan_totals(published_plan(Fraction(m, 1000)))
    assert totals == {k: v * m // 1000 for k, v in PUBLISHED_TOTALS.items()}


@given(st.lists(st.integers(0, 10), min_size=7, max_size=7), st.integers(0, 8))
def test_totals_are_sum_of_products(counts, frames):
    plan = RenderPlan(tuple(CategorySpec(c, n, n + 1, frames) for c, n in zip(CATEGORIES, counts)))
    assert plan_totals(plan)["total"] == sum((2 * n + 1) * frames for n in counts)


@settings(max_examples=300)
@given(st.lists(st.tuples(st.sampled_from(["b", "g"]), st.integers(0, 999_999), st.sampled_from(CATEGORIES),
                          st.integers(0, 60)), min_size=2, max_size=40, unique=True))
def test_seed_derivation_is_injective(keys):
    seeds = {derive_seed(0, f"{g}{i:06d}", c, f) for g, i, c, f in keys}
    assert len(seeds) == len(keys)
