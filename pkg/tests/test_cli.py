import io
import json
import subprocess
import sys

import numpy as np
import pytest

from facefactory.cli import main
from facefactory.generator import RenderedImage
from facefactory.latent import sample_z
from facefactory.toy import ToyGenerator


def run(*argv):
    out = io.StringIO()
    code = main(list(argv), stdout=out)
    return code, json.loads(out.getvalue()) if out.getvalue() else None


@pytest.fixture
def cfg(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    for var in ("FACEFACTORY_DIRECTION_STORE", "FACEFACTORY_OUTPUT_ROOT", "FACEFACTORY_WEIGHTS"):
        monkeypatch.delenv(var, raising=False)
    path = tmp_path / "cfg.yaml"
    path.write_text("backend:\n  size: 32\n")
    return str(path)


@pytest.fixture
def faces(tmp_path):
    toy = ToyGenerator(size=32)
    folder = tmp_path / "faces"
    folder.mkdir()
    for k in range(6):
        toy.synthesize(toy.map(sample_z(k))).save_png(folder / f"{k}.png")
    return folder


def test_plan_totals():
    code, payload = run("plan-totals", "--preset", "paper")
    assert code == 0
    assert payload["totals"]["total"] == 324000
    assert payload["totals"]["expressions"] == 96000


def test_plan_totals_scaled():
    assert run("plan-totals", "--scale", "1/1000")[1]["totals"]["total"] == 324


@pytest.mark.parametrize("argv", [
    [],
    ["no-such-command"],
    ["plan-totals", "--scale", "0"],
    ["plan-totals", "--scale", "abc"],
    ["edit", "--direction", "happy", "--coeff", "1"],
    ["relight", "--image", "x.png", "--out", "y.png", "--light", "sideways"],
])
def test_usage_errors_exit_2(argv, capsys):
    code, payload = run(*argv)
    assert code == 2 and payload is None
    assert capsys.readouterr().out == ""


def test_config_error_exit_3(tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text("nonsense: 1\n")
    code, payload = run("--config", str(bad), "plan-totals")
    assert code == 3 and payload["error"] == "ConfigError"


def test_backend_error_exit_4(cfg):
    code, payload = run("--config", cfg, "edit", "--subject-seed", "1", "--direction", "happy", "--coeff", "0",
                        "--backend", "torchscript")
    assert code == 4


def test_edit_coeff_zero_is_identity(cfg, tmp_path):
    code, payload = run("--config", cfg, "edit", "--subject-seed", "7", "--direction", "happy", "--coeff", "0",
                        "--backend", "toy", "--out", str(tmp_path / "e.png"))
    assert code == 0
    assert payload["digest"] == payload["unedited_digest"]
    assert payload["direction_source"] == "toy-ground-truth"
    toy = ToyGenerator(size=32)
    assert RenderedImage.load_png(tmp_path / "e.png").digest() == toy.synthesize(toy.map(sample_z(7))).digest()


def test_edit_is_reproducible(cfg):
    argv = ("--config", cfg, "edit", "--subject-seed", "3", "--direction", "age", "--coeff", "1.5")
    first, second = run(*argv), run(*argv)
    assert first == second
    assert first[1]["digest"] != first[1]["unedited_digest"]


def test_edit_unknown_direction_exit_5(cfg):
    code, payload = run("--config", cfg, "edit", "--subject-seed", "1", "--direction", "beard", "--coeff", "1",
                        "--directions", "toy-ground-truth")
    assert code == 5 and "beard" in payload["message"]


def test_fid_of_identical_sets_is_zero(cfg, faces):
    code, payload = run("--config", cfg, "fid", "--set-a", str(faces), "--set-b", str(faces))
    assert code == 0
    assert abs(payload["fid"]) <= 1e-8 and payload["n_a"] == 6


def test_fid_missing_folder_exit_5(cfg, tmp_path, faces):
    (tmp_path / "empty").mkdir()
    code, payload = run("--config", cfg, "fid", "--set-a", str(faces), "--set-b", str(tmp_path / "empty"))
    assert code == 5


def test_relight_single_and_sweep(cfg, faces, tmp_path):
    code, payload = run("--config", cfg, "relight", "--image", str(faces / "0.png"), "--light", "left",
                        "--out", str(tmp_path / "l.png"))
    assert code == 0 and payload["outputs"][0]["label"] == "left"
    code, payload = run("--config", cfg, "relight", "--image", str(faces / "0.png"), "--sweep", "preset61",
                        "--out", str(tmp_path / "sweep"))
    assert code == 0 and payload["conditions"] == 61
    assert len(list((tmp_path / "sweep").glob("*.png"))) == 61


def test_invert_writes_a_latent(cfg, faces, tmp_path):
    code, payload = run("--config", cfg, "invert", "--image", str(faces / "2.png"), "--out", str(tmp_path / "lat"))
    assert code == 0 and payload["pixel_mse"] <= 1e-3
    code, edit = run("--config", cfg, "edit", "--latent", str(tmp_path / "lat"), "--direction", "happy",
                     "--coeff", "0")
    assert code == 0 and edit["digest"] == edit["unedited_digest"]


@pytest.mark.parametrize("suite, extra", [
    ("ear", []),
    ("landmarks", ["--count", "12"]),
    ("uniqueness", ["--subjects", "4"]),
])
def test_validate_suites_pass(cfg, suite, extra):
    code, payload = run("--config", cfg, "validate", "--suite", suite, *extra)
    assert code == 0 and payload["passed"] and payload["suite"] == suite


def test_validate_failure_exit_6(cfg, tmp_path):
    strict = tmp_path / "strict.yaml"
    strict.write_text("backend:\n  size: 32\ncoeff_max:\n  eye_openness: 2.0\n")
    code, payload = run("--config", str(strict), "validate", "--suite", "ear")
    assert code == 6 and payload["passed"] is False


def test_render_and_verify(cfg, tmp_path):
    code, payload = run("--config", cfg, "render-dataset", "--scale", "1/1000", "--out", str(tmp_path / "ds"))
    assert code == 0 and payload["rendered"] == 324
    code, payload = run("--config", cfg, "verify-manifest", "--root", str(tmp_path / "ds"))
    assert code == 0 and payload["passed"]
    (tmp_path / "ds/boy/base/b000000/000.png").write_bytes(b"not a png")
    code, payload = run("--config", cfg, "verify-manifest", "--root", str(tmp_path / "ds"))
    assert code == 6 and payload["violations"][0]["kind"] == "digest"


def test_verify_without_manifest_exit_6(cfg, tmp_path):
    code, payload = run("--config", cfg, "verify-manifest", "--root", str(tmp_path / "nothing"))
    assert code == 6 and payload["violations"][0]["kind"] == "manifest"


def test_train_direction_writes_store(cfg, tmp_path):
    code, payload = run("--config", cfg, "train-direction", "--attribute", "smile", "--n", "300",
                        "--store", str(tmp_path / "dirs"))
    assert code == 0
    code, edit = run("--config", cfg, "edit", "--subject-seed", "1", "--direction", "smile", "--coeff", "1",
                     "--directions", str(tmp_path / "dirs"))
    assert code == 0 and edit["direction_source"] == str(tmp_path / "dirs")


def test_stdout_is_pure_json(cfg):
    proc = subprocess.run([sys.executable, "-m", "facefactory.cli", "--config", cfg, "--log-level", "DEBUG",
                           "validate", "--suite", "ear"], capture_output=True, text=True, check=False)
    assert proc.returncode == 0
    assert json.loads(proc.stdout)["passed"] is True
    assert "INFO facefactory" in proc.stderr and "INFO" not in proc.stdout
