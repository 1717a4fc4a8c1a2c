import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.distance import cdist

from conftest import LinearBackend
from facefactory.generator import UnsupportedOperation, make_backend
from facefactory.latent import LatentW, SemanticDirection, apply_direction, mix_styles, sample_z
from facefactory.toy import (
    ATTRIBUTES,
    GEOMETRY_ATTRIBUTES,
    ToyGenerator,
    mouth_curvature,
    toy_face_spec,
    toy_landmarks,
)


def gt(toy, name):
    return SemanticDirection(name, toy.directions[name])


def test_spec_directions_are_orthonormal():
    spec = toy_face_spec()
    assert {"smile", "eye_openness", "yaw", "age", "hue", "gender"} <= set(spec.ground_truth_directions)
    mat = np.stack([spec.ground_truth_directions[a] for a in ATTRIBUTES] + list(spec.identity_basis))
    assert np.allclose(mat @ mat.T, np.eye(len(mat)), atol=1e-12)
    assert spec.landmark_count == 68


def test_synthesize_is_deterministic(toy):
    w = toy.map(sample_z(5))
    digests = {toy.synthesize(w).digest() for _ in range(100)}
    assert len(digests) == 1
    img = toy.synthesize(w)
    assert img.pixels.shape == (256, 256, 3) and img.pixels.dtype == np.uint8
    assert img.latent_digest == w.digest()


def test_w_avg_shape(toy):
    assert toy.w_avg.rows.shape == (18, 512)
    assert toy.output_size == (256, 256)


def test_smile_raises_mouth_curvature(toy):
    for seed in range(10):
        w = toy.map(sample_z(seed))
        before = mouth_curvature(toy_landmarks(toy, w))
        after = mouth_curvature(toy_landmarks(toy, apply_direction(w, gt(toy, "smile"), 1.0)))
        assert after > before


def test_orthogonal_perturbation_keeps_render_parameters(toy):
    spec = toy_face_spec()
    q = np.concatenate([np.stack([spec.ground_truth_directions[a] for a in ATTRIBUTES]), spec.identity_basis])
    noise = np.random.default_rng(3).standard_normal(512)
    noise -= q.T @ (q @ noise)
    w = toy.map(sample_z(9))
    moved = LatentW(w.rows + 5.0 * noise)
    assert np.allclose(toy.projections(moved), toy.projections(w), atol=1e-10)
    assert np.allclose(toy.identity(moved), toy.identity(w), atol=1e-10)


def test_landmarks_need_the_toy_backend(toy):
    with pytest.raises(UnsupportedOperation):
        toy_landmarks(LinearBackend(), toy.w_avg)


def test_closed_eye_lids_coincide(toy):
    w = toy.map(sample_z(2))
    pts = toy_landmarks(toy, apply_direction(w, gt(toy, "eye_openness"), -60.0))
    for eye in (slice(36, 42), slice(42, 48)):
        e = pts[eye]
        assert np.linalg.norm(e[1] - e[5]) < 1e-9
        assert np.linalg.norm(e[2] - e[4]) < 1e-9


def test_neutral_yaw_is_bilaterally_symmetric(toy):
    for seed in range(5):
        w = toy.map(sample_z(seed))
        g = toy.directions["yaw"]
        w0 = LatentW(w.rows - np.outer(w.rows @ g, g))
        assert toy.attribute_values(w0)["yaw"] == pytest.approx(0.5, abs=1e-12)
        pts = toy_landmarks(toy, w0)
        mirrored = pts.copy()
        mirrored[:, 0] = 2 * toy.size / 2.0 - pts[:, 0]
        assert cdist(mirrored, pts).min(axis=1).max() <= 0.5


def test_face_translation_moves_every_landmark(toy):
    moved = ToyGenerator(center_offset=(10.0, 10.0))
    w = toy.map(sample_z(4))
    delta = toy_landmarks(moved, w) - toy_landmarks(toy, w)
    assert np.allclose(delta, 10.0, rtol=0, atol=1e-12)


def test_fine_layer_mixing_changes_colour_only(toy):
    a, b = toy.map(sample_z(1)), toy.map(sample_z(2))
    mixed = mix_styles(a, b, (8, 18))
    va, vb, vm = (toy.attribute_values(x) for x in (a, b, mixed))
    for name in GEOMETRY_ATTRIBUTES:
        assert vm[name] == va[name]
    for name in ("hue", "brightness", "hair_tone"):
        assert vm[name] == pytest.approx(vb[name], abs=1e-12)
    assert np.array_equal(toy_landmarks(toy, mixed), toy_landmarks(toy, a))
    assert np.array_equal(toy.identity(mixed), toy.identity(a))


def test_gendered_backends_fall_on_their_side():
    boy, girl = ToyGenerator(size=64, gender="boy"), ToyGenerator(size=64, gender="girl")
    for s in range(20):
        assert boy.attribute_values(boy.map(sample_z(s)))["gender"] <= 0.5
        assert girl.attribute_values(girl.map(sample_z(s)))["gender"] >= 0.5


def test_make_backend_names():
    assert make_backend("toy", size=64).output_size == (64, 64)
    assert make_backend("toy-girl").gender == "girl"


def test_map_rounds_to_float32(toy):
    w = toy.map(sample_z(8))
    assert np.array_equal(w.rows, w.rows.astype(np.float32).astype(np.float64))
    assert np.array_equal(w.rows, np.tile(w.rows[0], (18, 1)))


# -- properties ---------------------------------------------------------------


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(ATTRIBUTES), st.floats(-4, 4), st.floats(0.01, 3))
def test_attribute_monotone_along_its_direction(seed, name, c, dc):
    toy = ToyGenerator(size=64)
    w = toy.map(sample_z(seed))
    d = gt(toy, name)
    lo = toy.attribute_values(apply_direction(w, d, c))[name]
    hi = toy.attribute_values(apply_direction(w, d, c + dc))[name]
    assert hi > lo


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(ATTRIBUTES), st.floats(-4, 4))
def test_edits_leave_other_attributes_alone(seed, name, c):
    toy = ToyGenerator(size=64)
    w = toy.map(sample_z(seed))
    before = toy.attribute_values(w)
    after = toy.attribute_values(apply_direction(w, gt(toy, name), c))
    for other in ATTRIBUTES:
        if other != name:
            assert after[other] == pytest.approx(before[other], abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(-6, 6), st.floats(-6, 6))
def test_eye_gap_proportional_to_openness(seed, c1, c2):
    toy = ToyGenerator(size=128)
    w = toy.map(sample_z(seed))
    ratios = []
    for c in (c1, c2):
        wc = apply_direction(w, gt(toy, "eye_openness"), c)
        pts = toy_landmarks(toy, wc)
        gap = pts[40, 1] - pts[38, 1]
        ratios.append(gap / toy.attribute_values(wc)["eye_openness"])
    assert ratios[0] == pytest.approx(ratios[1], rel=1e-9)
