import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from diagrobust.image import Image, derive_stream
from diagrobust.perturb import (
    DEFAULT_TABLE,
    KINDS,
    LEVELS,
    ZERO_TABLE,
    DegenerateInputError,
    IntensityLevel,
    IntensityTable,
    InvalidConfigError,
    PerturbationKind,
    PerturbationSpec,
    apply_perturbation,
    build_view_plan,
    kernel_gaussian_noise,
    kernel_motion_blur,
    kernel_occlusion,
    kernel_rotation,
    kernel_salt_pepper,
    line_kernel_offsets,
    motion_blur_at_angle,
    occlusion_rectangle,
    rotate,
)

GRAY = Image.filled(256, 256, (128, 128, 128))


def random_image(w, h, seed=0):
    return Image(np.random.default_rng(seed).integers(0, 256, (h, w, 3), dtype=np.uint8))


def spec(kind, level="medium", qid="q", view=1, seed=5):
    return PerturbationSpec(PerturbationKind(kind), IntensityLevel(level), seed, qid, view)


# Intensity table ------------------------------------------------------------------


def test_default_table_values():
    t = DEFAULT_TABLE
    assert [t.get("gaussian_noise", lv) for lv in LEVELS] == [10, 20, 35]
    assert [t.get("salt_pepper", lv) for lv in LEVELS] == [0.02, 0.05, 0.10]
    assert [t.get("motion_blur", lv) for lv in LEVELS] == [5, 9, 15]
    assert [t.get("occlusion", lv) for lv in LEVELS] == [0.05, 0.10, 0.20]
    assert [t.get("rotation", lv) for lv in LEVELS] == [2, 5, 8]


def test_table_must_increase():
    rows = DEFAULT_TABLE.to_dict()
    rows["rotation"] = {"low": 5, "medium": 5, "high": 8}
    with pytest.raises(InvalidConfigError):
        IntensityTable.from_dict(rows)


def test_table_round_trip():
    assert IntensityTable.from_dict(DEFAULT_TABLE.to_dict()) == DEFAULT_TABLE


# View plans ---------------------------------------------------------------------------


def cells(plan):
    return [(s.kind, s.intensity) for s in plan.specs]


def test_plan_of_five_has_each_kind_once():
    plan = build_view_plan("q1", 42, 5)
    assert sorted(k.value for k, _ in cells(plan)) == sorted(k.value for k in KINDS)


def test_plan_of_fifteen_is_full_grid():
    plan = build_view_plan("q1", 42, 15)
    assert set(cells(plan)) == set(itertools.product(KINDS, LEVELS))
    assert len(plan.specs) == 15


def test_plan_is_deterministic():
    assert build_view_plan("q1", 42, 10) == build_view_plan("q1", 42, 10)
    assert [s.view_index for s in build_view_plan("q1", 42, 10).specs] == list(range(1, 11))


@pytest.mark.parametrize("n", [0, 4, 16, 20])
def test_plan_rejects_bad_sizes(n):
    with pytest.raises(InvalidConfigError):
        build_view_plan("q", 1, n)


@settings(max_examples=60, deadline=None)
@given(st.text(min_size=1, max_size=8), st.integers(0, 2**64 - 1), st.integers(5, 15))
def test_plan_coverage_property(qid, seed, n):
    plan = build_view_plan(qid, seed, n)
    c = cells(plan)
    assert len(c) == n and len(set(c)) == n
    assert {k for k, _ in c} == set(KINDS)
    # the first five views cover the five kinds
    assert {k for k, _ in c[:5]} == set(KINDS)


def test_plan_json_round_trip():
    from diagrobust.perturb import ViewPlan

    plan = build_view_plan("q9", 3, 10)
    assert ViewPlan.from_dict(plan.to_dict()) == plan


def test_spec_rejects_view_zero():
    with pytest.raises(ValueError):
        PerturbationSpec("rotation", "low", 1, "q", 0)


# Generic kernel properties ---------------------------------------------------------------


@pytest.mark.parametrize("kind", [k.value for k in KINDS])
def test_zero_row_is_identity(kind):
    img = random_image(32, 24, seed=1)
    out = apply_perturbation(img, spec(kind), ZERO_TABLE)
    assert out == img


@pytest.mark.parametrize("kind", [k.value for k in KINDS])
@pytest.mark.parametrize("level", [lv.value for lv in LEVELS])
def test_apply_is_deterministic_and_keeps_size(kind, level):
    img = random_image(40, 30, seed=2)
    a = apply_perturbation(img, spec(kind, level), DEFAULT_TABLE)
    b = apply_perturbation(img, spec(kind, level), DEFAULT_TABLE)
    assert a == b
    assert (a.width, a.height) == (40, 30)


def test_different_views_draw_different_noise():
    a = apply_perturbation(GRAY, spec("gaussian_noise", view=1), DEFAULT_TABLE)
    b = apply_perturbation(GRAY, spec("gaussian_noise", view=2), DEFAULT_TABLE)
    assert a != b


# Gaussian noise -----------------------------------------------------------------------------


def test_gaussian_medium_std_within_ten_percent():
    out = apply_perturbation(GRAY, spec("gaussian_noise", "medium"), DEFAULT_TABLE)
    diff = out.array.astype(float) - 128
    for ch in range(3):
        assert abs(diff[..., ch].std() - 20) <= 2.0


def test_gaussian_mean_is_small():
    out = kernel_gaussian_noise(GRAY, 20, derive_stream(42, "gauss", 1))
    diff = out.array.astype(float) - 128
    assert diff.size == 196_608
    assert abs(diff.mean()) < 0.5


def test_gaussian_zero_sigma_identity():
    img = random_image(8, 8)
    assert kernel_gaussian_noise(img, 0, derive_stream(0, "a", 1)) == img


# Salt and pepper --------------------------------------------------------------------------


def extreme_fraction(img):
    a = img.array
    black = (a == 0).all(axis=2)
    white = (a == 255).all(axis=2)
    return (black | white).mean()


def test_salt_pepper_hit_fraction():
    out = kernel_salt_pepper(GRAY, 0.05, derive_stream(42, "sp", 1))
    assert abs(extreme_fraction(out) - 0.05) <= 0.01


def test_salt_pepper_p_one_saturates():
    out = kernel_salt_pepper(random_image(30, 30), 1.0, derive_stream(1, "sp", 1))
    assert extreme_fraction(out) == 1.0
    black = (out.array == 0).all(axis=2).mean()
    assert 0.4 < black < 0.6


def test_salt_pepper_zero_identity():
    img = random_image(10, 10)
    assert kernel_salt_pepper(img, 0.0, derive_stream(1, "sp", 1)) == img


# Motion blur -----------------------------------------------------------------------------


def brute_force_blur(arr, cells, length):
    h, w, _ = arr.shape
    out = np.zeros_like(arr, dtype=np.int64)
    for y in range(h):
        for x in range(w):
            for dy, dx in cells:
                yy = min(max(y + dy, 0), h - 1)
                xx = min(max(x + dx, 0), w - 1)
                out[y, x] += arr[yy, xx]
    return np.clip(np.rint(out / length), 0, 255).astype(np.uint8)


def test_single_white_pixel_horizontal_blur():
    arr = np.zeros((11, 11, 3), np.uint8)
    arr[5, 5] = 255
    out = motion_blur_at_angle(Image(arr), 5, 0.0).array[..., 0]
    assert out[5, 3:8].tolist() == [51] * 5
    assert int((out > 0).sum()) == 5


@pytest.mark.parametrize("length", [3, 5, 9, 15])
@pytest.mark.parametrize("angle", [0.0, 17.0, 45.0, 90.0, 133.0, 179.9])
def test_line_kernel_has_length_distinct_cells(length, angle):
    cells = line_kernel_offsets(length, angle)
    assert len(set(cells)) == length
    assert set(cells) == {(-dy, -dx) for dy, dx in cells}


@pytest.mark.parametrize("angle", [0.0, 30.0, 72.5, 120.0])
def test_blur_matches_brute_force(angle):
    img = random_image(17, 13, seed=4)
    expected = brute_force_blur(img.array.astype(np.int64), line_kernel_offsets(5, angle), 5)
    assert np.array_equal(motion_blur_at_angle(img, 5, angle).array, expected)


@settings(max_examples=30, deadline=None)
@given(
    st.tuples(st.integers(0, 255), st.integers(0, 255), st.integers(0, 255)),
    st.sampled_from([1, 3, 5, 9, 15]),
    st.integers(0, 1000),
)
def test_constant_image_is_blur_fixed_point(color, length, seed):
    img = Image.filled(20, 18, color)
    assert kernel_motion_blur(img, length, derive_stream(seed, "mb", 1)) == img


def test_blur_length_one_identity():
    img = random_image(6, 6)
    assert kernel_motion_blur(img, 1, derive_stream(0, "x", 1)) == img


def test_blur_too_long_is_degenerate():
    with pytest.raises(DegenerateInputError):
        kernel_motion_blur(random_image(8, 20), 9, derive_stream(0, "x", 1))


def test_blur_even_length_rejected():
    with pytest.raises(ValueError):
        motion_blur_at_angle(random_image(8, 8), 4, 0.0)


# Occlusion ----------------------------------------------------------------------------------


def test_occlusion_area_within_two_percent():
    white = Image.filled(256, 256, (255, 255, 255))
    target = round(0.10 * 256 * 256)
    assert target == 6554
    for view in range(1, 21):
        out = kernel_occlusion(white, 0.10, derive_stream(42, "occ", view))
        changed = int((out.array != white.array).any(axis=2).sum())
        assert abs(changed - target) <= 0.02 * target


def test_occlusion_outside_rectangle_untouched():
    img = random_image(64, 48, seed=9)
    x0, y0, w, h = occlusion_rectangle(64, 48, 0.2, derive_stream(1, "o", 1))
    out = kernel_occlusion(img, 0.2, derive_stream(1, "o", 1))
    mask = np.zeros((48, 64), bool)
    mask[y0 : y0 + h, x0 : x0 + w] = True
    assert np.array_equal(out.array[~mask], img.array[~mask])
    assert (out.array[mask] == 128).all()
    assert 0.5 <= w / h <= 2.0 + 1e-9 or w == 64 or h == 48


def test_occlusion_zero_identity():
    img = random_image(8, 8)
    assert kernel_occlusion(img, 0.0, derive_stream(1, "o", 1)) == img


def test_occlusion_tiny_image_is_degenerate():
    with pytest.raises(DegenerateInputError):
        kernel_occlusion(random_image(3, 3), 0.1, derive_stream(1, "o", 1))
    with pytest.raises(DegenerateInputError):
        kernel_occlusion(random_image(4, 4), 0.01, derive_stream(1, "o", 1))


# Rotation -----------------------------------------------------------------------------------


def test_rotation_zero_identity():
    img = random_image(9, 7)
    assert kernel_rotation(img, 0.0, derive_stream(1, "r", 1)) == img


def test_rotation_ninety_is_rot90():
    arr = np.random.default_rng(0).integers(0, 256, (6, 6, 3), dtype=np.uint8)
    assert np.array_equal(rotate(Image(arr), 90).array, np.rot90(arr, 1))


@pytest.mark.parametrize("angle", [2.0, -5.0, 8.0, 30.0])
def test_rotation_matches_scipy_bilinear(angle):
    img = random_image(31, 23, seed=11)
    h, w = 23, 31
    cy, cx = (h - 1) / 2, (w - 1) / 2
    t = np.radians(angle)
    c, s = np.cos(t), np.sin(t)
    matrix = np.array([[c, s], [-s, c]])  # (row, col) output -> input
    offset = np.array([cy, cx]) - matrix @ np.array([cy, cx])
    ref = np.stack(
        [
            ndimage.affine_transform(
                img.array[..., ch].astype(float), matrix, offset=offset, order=1, mode="grid-constant", cval=255.0
            )
            for ch in range(3)
        ],
        axis=2,
    )
    ours = rotate(img, angle).array.astype(float)
    assert np.abs(ours - np.clip(np.rint(ref), 0, 255)).max() <= 1


@settings(max_examples=25, deadline=None)
@given(st.integers(4, 40), st.integers(4, 40), st.floats(0, 44.9), st.integers(0, 100))
def test_rotation_keeps_canvas_and_white_fixed(w, h, deg, seed):
    white = Image.filled(w, h, (255, 255, 255))
    out = kernel_rotation(white, deg, derive_stream(seed, "r", 1))
    assert out == white


def test_rotation_sign_follows_stream():
    img = random_image(20, 20, seed=3)
    outs = {kernel_rotation(img, 5.0, derive_stream(0, "r", v)) for v in range(1, 30)}
    assert outs == {rotate(img, 5.0), rotate(img, -5.0)}


def test_rotation_rejects_large_angle():
    with pytest.raises(ValueError):
        kernel_rotation(random_image(5, 5), 45, derive_stream(0, "r", 1))
