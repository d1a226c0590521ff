import numpy as np
import pytest

from services.errors import ConfigError, DataError, DegeneratePoseError, ShapeError
from services.normalize_service import (
    AUGMENT_SCALE_RANGE, WindowSpec, augment, augment_window, draw_augmentation,
    extract_window, normalize_window, window_centers
)
from services.pose_io_service import PoseSequence

from conftest import moving_frames


def rotate_z(frames, angle):
    c, s = np.cos(angle), np.sin(angle)
    out = frames.copy()
    out[..., 0] = c * frames[..., 0] - s * frames[..., 1]
    out[..., 1] = s * frames[..., 0] + c * frames[..., 1]
    return out


def test_default_window_has_75_rows():
    assert WindowSpec().n_frames == 75


def test_window_for_15_frames():
    spec = WindowSpec.for_frames(15, sample_rate=25.0)
    assert spec.n_frames == 15
    assert spec.length_seconds == pytest.approx(0.6)


def test_window_spec_rejects_single_frame():
    with pytest.raises(ConfigError):
        WindowSpec(length_seconds=0.02, sample_rate=25.0)


def test_extract_window_shape_and_center(moving_sequence, small_spec):
    w = extract_window(moving_sequence, 3.0, small_spec)
    assert w.data.shape == (small_spec.n_frames, 12)
    assert w.center_time == 3.0
    assert not w.normalized


def test_extract_window_clamps_near_edges(moving_sequence, small_spec):
    w = extract_window(moving_sequence, 0.0, small_spec)
    np.testing.assert_allclose(w.points()[0], moving_sequence.frames[0])


def test_extract_window_too_far_outside(moving_sequence, small_spec):
    with pytest.raises(DataError):
        extract_window(moving_sequence, moving_sequence.duration + 5.0, small_spec)


def test_window_centers_cover_sequence(moving_sequence, small_spec):
    centers = window_centers(moving_sequence, small_spec)
    assert centers[0] == 0.0
    assert centers[-1] <= moving_sequence.duration
    assert moving_sequence.duration - centers[-1] < small_spec.stride_seconds
    np.testing.assert_allclose(np.diff(centers), small_spec.stride_seconds)


# ====== 正規化 ======

def test_normalized_channels_have_unit_std(moving_sequence, hip_layout, small_spec):
    w = normalize_window(extract_window(moving_sequence, 4.0, small_spec), hip_layout)
    assert w.normalized
    np.testing.assert_allclose(w.points().reshape(-1, 3).std(axis=0), 1.0)


def test_center_frame_hips_on_x_axis(moving_sequence, hip_layout, small_spec):
    w = normalize_window(extract_window(moving_sequence, 4.0, small_spec), hip_layout)
    center = w.points()[w.n_frames // 2]
    left, right = center[0], center[1]
    np.testing.assert_allclose((left + right) / 2.0, 0.0, atol=1e-12)
    assert right[0] > 0
    assert abs(right[1]) < 1e-12


@pytest.mark.parametrize('angle', [0.3, -1.2, np.pi / 2, 2.9])
def test_invariant_to_rotation_and_translation(hip_layout, small_spec, angle):
    frames = moving_frames(100, 25.0, seed=4)
    moved = rotate_z(frames, angle) + np.array([1.7, -3.1, 0.4])
    a = PoseSequence(hip_layout, frames, 25.0, name='a')
    b = PoseSequence(hip_layout, moved, 25.0, name='b')
    wa = normalize_window(extract_window(a, 2.0, small_spec), hip_layout)
    wb = normalize_window(extract_window(b, 2.0, small_spec), hip_layout)
    np.testing.assert_allclose(wa.data, wb.data, atol=1e-9)


def test_invariant_to_uniform_scale(hip_layout, small_spec):
    frames = moving_frames(100, 25.0, seed=2)
    a = PoseSequence(hip_layout, frames, 25.0)
    b = PoseSequence(hip_layout, frames * 1.8, 25.0)
    wa = normalize_window(extract_window(a, 2.0, small_spec), hip_layout)
    wb = normalize_window(extract_window(b, 2.0, small_spec), hip_layout)
    np.testing.assert_allclose(wa.data, wb.data, atol=1e-9)


def test_normalize_is_idempotent(moving_sequence, hip_layout, small_spec):
    once = normalize_window(extract_window(moving_sequence, 3.0, small_spec), hip_layout)
    twice = normalize_window(once, hip_layout)
    np.testing.assert_allclose(twice.data, once.data, atol=1e-9)


def test_marker_layout_uses_pelvis_midpoints(marker_layout, small_spec):
    n = 40
    frames = np.zeros((n, 5, 3))
    frames[:, 0] = (-0.1, 0.1, 1.0)
    frames[:, 1] = (0.1, 0.1, 1.0)
    frames[:, 2] = (-0.1, -0.1, 1.0)
    frames[:, 3] = (0.1, -0.1, 1.0)
    frames[:, 4, 2] = 1.6 + 0.1 * np.sin(np.arange(n) / 5.0)
    seq = PoseSequence(marker_layout, rotate_z(frames, 0.8), 25.0)
    w = normalize_window(extract_window(seq, 0.8, small_spec), marker_layout)
    center = w.points()[w.n_frames // 2]
    # 左右の中点は原点対称に X 軸上
    lmid = (center[0] + center[2]) / 2.0
    rmid = (center[1] + center[3]) / 2.0
    np.testing.assert_allclose(lmid + rmid, 0.0, atol=1e-12)
    assert rmid[0] > 0
    assert abs(rmid[1]) < 1e-12


def test_constant_channel_is_left_unscaled(hip_layout, small_spec):
    frames = np.zeros((30, 4, 3))
    frames[:, 0] = (-0.2, 0.0, 1.0)
    frames[:, 1] = (0.2, 0.0, 1.0)
    frames[:, 2] = (-0.4, 0.0, 1.0)
    frames[:, 3] = (0.4, 0.0, 1.0)
    seq = PoseSequence(hip_layout, frames, 25.0)
    w = normalize_window(extract_window(seq, 0.5, small_spec), hip_layout)
    assert np.all(np.isfinite(w.data))
    # Z は全点同じ値 → 中心化後は定数のまま
    np.testing.assert_allclose(w.points()[..., 2], 0.0, atol=1e-12)


def test_coincident_hips_are_degenerate(hip_layout, small_spec):
    frames = np.zeros((30, 4, 3))
    frames[:, 2, 0] = 1.0
    seq = PoseSequence(hip_layout, frames, 25.0, name='collapsed')
    with pytest.raises(DegeneratePoseError):
        normalize_window(extract_window(seq, 0.5, small_spec), hip_layout)


def test_layout_mismatch(moving_sequence, marker_layout, small_spec):
    w = extract_window(moving_sequence, 2.0, small_spec)
    with pytest.raises(ShapeError):
        normalize_window(w, marker_layout)


# ====== 拡張 ======

def ramp_sequence(hip_layout, n=400, rate=25.0):
    t = np.arange(n) / rate
    frames = np.zeros((n, 4, 3))
    frames[:, 0] = (-0.2, 0.0, 1.0)
    frames[:, 1] = (0.2, 0.0, 1.0)
    frames[:, 2, 2] = t
    frames[:, 3, 2] = t
    return PoseSequence(hip_layout, frames, rate)


def test_augment_window_on_ramp(hip_layout, small_spec):
    seq = ramp_sequence(hip_layout)
    w = augment_window(seq, 5.0, small_spec, delta_t=0.2, delta_r=0.25)
    n = small_spec.n_frames
    expected = 5.2 + (np.arange(n) - (n - 1) / 2.0) / (1.25 * small_spec.sample_rate)
    np.testing.assert_allclose(w.points()[:, 2, 2], expected, atol=1e-9)
    assert w.data.shape[0] == n


def test_zero_augmentation_matches_plain_window(moving_sequence, small_spec):
    plain = extract_window(moving_sequence, 3.0, small_spec)
    augmented = augment_window(moving_sequence, 3.0, small_spec, 0.0, 0.0)
    np.testing.assert_array_equal(plain.data, augmented.data)


def test_augmentation_draws_stay_in_range(small_spec):
    rng = np.random.default_rng(0)
    draws = np.array([draw_augmentation(rng, small_spec) for _ in range(2000)])
    max_offset = 0.5 * small_spec.length_seconds / 3.0
    assert np.all(np.abs(draws[:, 0]) <= max_offset)
    assert np.all(np.abs(draws[:, 1]) <= AUGMENT_SCALE_RANGE)
    # 一様分布の平均はほぼ0
    assert abs(draws[:, 0].mean()) < 0.1 * max_offset
    assert abs(draws[:, 1].mean()) < 0.1 * AUGMENT_SCALE_RANGE


def test_augment_is_reproducible(moving_sequence, small_spec):
    a = augment(moving_sequence, 3.0, small_spec, np.random.default_rng(9))
    b = augment(moving_sequence, 3.0, small_spec, np.random.default_rng(9))
    np.testing.assert_array_equal(a.data, b.data)
