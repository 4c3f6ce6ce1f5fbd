import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from avatarlink.codec import encode_ack, encode_frame
from avatarlink.errors import InvalidArgumentError
from avatarlink.gsdeform import GaussianSet
from avatarlink.params import PARAM_DIM, MotionParams
from avatarlink.presets import preset_frames
from avatarlink.receiver import (
    CameraSpec,
    ReceiverOptions,
    ReceiverReport,
    composite_reference,
    depth_sort_u16,
    image_metrics,
    interpolate_midframe,
    quantize_depths,
    read_ppm,
    run_receiver,
    write_image,
    write_ppm,
)

# 16x16 pixels over 2x2 m: 8 px per meter, camera looking down -z
CAM = CameraSpec(position=(0.0, 0.0, 5.0), look_at=(0.0, 0.0, 0.0), up=(0.0, 1.0, 0.0),
                 width_m=2.0, height_m=2.0, image_width=16, image_height=16)


def splats(positions, sigma_m, opacity, colors):
    """Isotropic Gaussians with a shared standard deviation in meters."""
    g = len(positions)
    return GaussianSet(np.asarray(positions, float), np.tile([1.0, 0, 0, 0], (g, 1)), np.full((g, 3), sigma_m),
                       np.asarray(opacity, float), np.asarray(colors, float))


def gaussian_alpha(opacity, center_px, sigma_px, w=16, h=16):
    xs = np.arange(w) + 0.5 - center_px[0]
    ys = np.arange(h) + 0.5 - center_px[1]
    dx, dy = np.meshgrid(xs, ys, indexing="xy")
    return opacity * np.exp(-0.5 * (dx * dx + dy * dy) / sigma_px**2)


# ---------------------------------------------------------------------------
# interpolation


def test_midframe_examples():
    v1 = np.zeros(PARAM_DIM)
    v1[72] = 1.0
    v1[5] = math.pi / 2
    mid = interpolate_midframe(MotionParams.zeros(10, 1_000_000), MotionParams.from_vector(11, 1_033_333, v1))
    assert mid.frame_index == 10.5
    assert mid.capture_timestamp_us == 1_016_666
    assert mid.body_pose[72] == 0.5
    assert mid.body_pose[5] == pytest.approx(math.pi / 4, abs=1e-12)


# ---------------------------------------------------------------------------
# depth sort


def oracle_order(depths):
    lo, hi = depths.min(), depths.max()
    if hi == lo:
        return list(range(len(depths)))
    q = [math.floor((d - lo) * 65535.0 / (hi - lo)) for d in depths]
    return sorted(range(len(depths)), key=lambda i: (-q[i], i))


def test_depth_sort_matches_oracle_on_random_scenes(rng):
    for _ in range(10_000):
        n = int(rng.integers(1, 40))
        pts = rng.normal(0, 1, (n, 3))
        if rng.random() < 0.2:
            pts[: n // 2, 2] = pts[0, 2]  # ties
        order = depth_sort_u16(pts, CAM)
        depths = CAM.depths(pts)
        assert order.tolist() == oracle_order(depths)
        # back to front up to one quantization bin
        span = depths.max() - depths.min()
        assert np.all(np.diff(depths[order]) <= span / 65535.0 + 1e-12)


def test_quantize_depths_range():
    q = quantize_depths(np.array([2.0, 3.0, 2.5]))
    assert q.tolist() == [0, 65535, 32767]
    assert quantize_depths(np.array([1.0, 1.0])).tolist() == [0, 0]
    assert quantize_depths(np.array([])).size == 0


def test_depth_sort_rejects_non_finite():
    with pytest.raises(InvalidArgumentError):
        depth_sort_u16(np.array([[0.0, 0.0, np.nan]]), CAM)


# ---------------------------------------------------------------------------
# compositing


def test_composite_single_gaussian():
    g = splats([[0.0, 0.0, 0.0]], 0.25, [0.8], [[1.0, 0.5, 0.25]])
    img = composite_reference(g, np.array([0]), CAM, alpha_min=0.0)
    alpha = gaussian_alpha(0.8, (8.0, 8.0), 2.0)
    np.testing.assert_allclose(img.alpha, alpha, atol=1e-12)
    np.testing.assert_allclose(img.rgb, alpha[..., None] * [1.0, 0.5, 0.25], atol=1e-12)
    # the pixel next to the center, by hand: dx = dy = 0.5 px, sigma = 2 px
    assert img.alpha[8, 8] == pytest.approx(0.8 * math.exp(-0.5 * 0.5 / 4.0), abs=1e-12)


def test_composite_two_overlapping():
    # front (z=1, nearer the camera) red, back (z=-1) blue
    g = splats([[0.0, 0.0, -1.0], [0.0, 0.0, 1.0]], 0.25, [0.6, 0.5], [[0, 0, 1], [1, 0, 0]])
    order = depth_sort_u16(g, CAM)
    assert order.tolist() == [0, 1]
    img = composite_reference(g, order, CAM, alpha_min=0.0)
    a_back = gaussian_alpha(0.6, (8, 8), 2.0)
    a_front = gaussian_alpha(0.5, (8, 8), 2.0)
    np.testing.assert_allclose(img.rgb[..., 0], a_front, atol=1e-9)
    np.testing.assert_allclose(img.rgb[..., 2], a_back * (1 - a_front), atol=1e-9)
    np.testing.assert_allclose(img.alpha, 1 - (1 - a_front) * (1 - a_back), atol=1e-9)


def test_composite_three_gaussians_order_matters():
    pos = [[0.0, 0.0, 0.0], [0.25, 0.0, 0.5], [0.0, 0.25, -0.5]]
    cols = [[1, 0, 0], [0, 1, 0], [0, 0, 1]]
    g = splats(pos, 0.2, [0.9, 0.7, 0.4], cols)
    order = depth_sort_u16(g, CAM)  # back to front: 2, 0, 1
    assert order.tolist() == [2, 0, 1]
    img = composite_reference(g, order, CAM, alpha_min=0.0)
    px = CAM.to_pixels(np.array(pos))
    a = [gaussian_alpha(o, c, 1.6) for o, c in zip([0.9, 0.7, 0.4], px)]
    t = np.ones((16, 16))
    expected = np.zeros((16, 16, 3))
    for i in [1, 0, 2]:  # front to back
        expected += (a[i] * t)[..., None] * np.array(cols[i], float)
        t = t * (1 - a[i])
    np.testing.assert_allclose(img.rgb, expected, atol=1e-9)
    np.testing.assert_allclose(img.alpha, 1 - t, atol=1e-9)


def test_composite_alpha_cutoff():
    g = splats([[0.0, 0.0, 0.0]], 0.25, [0.8], [[1.0, 1.0, 1.0]])
    img = composite_reference(g, np.array([0]), CAM)
    full = gaussian_alpha(0.8, (8, 8), 2.0)
    expected = np.where(full < 1 / 255, 0.0, full)
    np.testing.assert_allclose(img.alpha, expected, atol=1e-12)


def test_composite_skips_singular():
    # a needle lying diagonally in the image plane projects to a line
    c, s = math.cos(math.pi / 8), math.sin(math.pi / 8)
    g = GaussianSet([[0.0, 0.0, 0.0], [0.1, 0.0, 0.0]], [[c, 0, 0, s], [1.0, 0, 0, 0]],
                    [[0.2, 1e-9, 1e-9], [0.2, 0.2, 0.2]], [0.5, 0.5], np.full((2, 3), 0.5))
    img = composite_reference(g, np.array([0, 1]), CAM, alpha_min=0.0)
    assert img.skipped == 1
    assert np.all(np.isfinite(img.rgb))


def test_composite_validates_order():
    g = splats([[0.0, 0.0, 0.0], [0.1, 0, 0]], 0.25, [0.5, 0.5], [[1, 1, 1]] * 2)
    with pytest.raises(InvalidArgumentError):
        composite_reference(g, np.array([0, 0]), CAM)


# ---------------------------------------------------------------------------
# image metrics


def test_ssim_matches_skimage(rng):
    from skimage.metrics import structural_similarity

    for shape in [(32, 32), (40, 24, 3)]:
        a = rng.uniform(0, 1, shape)
        b = np.clip(a + rng.normal(0, 0.1, shape), 0, 1)
        ours = image_metrics(a, b)["ssim"]
        ref = structural_similarity(a, b, data_range=1.0, gaussian_weights=True, sigma=1.5,
                                    use_sample_covariance=False, channel_axis=2 if len(shape) == 3 else None)
        assert ours == pytest.approx(ref, abs=1e-9)


def test_image_metrics_identity_and_errors(rng):
    a = rng.uniform(0, 1, (16, 16, 3))
    m = image_metrics(a, a)
    assert m["l1"] == 0.0 and m["ssim"] == pytest.approx(1.0)
    assert image_metrics(a, a + 0.1)["l1"] == pytest.approx(0.1)
    with pytest.raises(InvalidArgumentError):
        image_metrics(a, a[:15])
    with pytest.raises(InvalidArgumentError):
        image_metrics(np.zeros((8, 8)), np.zeros((8, 8)))


def test_image_files(tmp_path, rng):
    rgb = rng.uniform(0, 1, (9, 7, 3))
    write_ppm(tmp_path / "a.ppm", rgb)
    back = read_ppm(tmp_path / "a.ppm")
    assert np.max(np.abs(back - rgb)) <= 0.5 / 255 + 1e-12
    write_image(tmp_path / "a.png", rgb)
    from PIL import Image

    assert Image.open(tmp_path / "a.png").size == (7, 9)


# ---------------------------------------------------------------------------
# receiver loop


def packets(frames):
    return [encode_frame(p) for p in frames]


def test_frame_rate_doubling(small_package):
    frames = list(preset_frames("wave", 30, 300))
    out, rep = run_receiver(packets(frames), small_package, ReceiverOptions(sort=False, keep_gaussians=False))
    assert rep.frames_out == 599 and rep.interpolated == 299
    assert abs(rep.output_fps - 60.0) <= 0.5
    assert rep.input_fps == pytest.approx(30.0, abs=0.01)
    assert [f.frame_index for f in out[:4]] == [0, 0.5, 1, 1.5]


def test_interpolation_off(small_package):
    frames = list(preset_frames("wave", 30, 30))
    out, rep = run_receiver(packets(frames), small_package, ReceiverOptions(interpolate=False, sort=False))
    assert rep.frames_out == 30 and rep.interpolated == 0
    assert rep.output_fps == pytest.approx(30.0, abs=0.05)


def test_identity_pose_is_an_interpolation_fixed_point(small_package):
    out, _ = run_receiver(packets([MotionParams.zeros(0, 0), MotionParams.zeros(1, 33_333)]), small_package,
                          ReceiverOptions(sort=False))
    a = [f.gaussians.as_array() for f in out]
    assert len(a) == 3 and np.array_equal(a[0], a[1]) and np.array_equal(a[1], a[2])


def test_reorder_within_one_frame(small_package):
    frames = list(preset_frames("walk", 30, 6))
    pk = packets(frames)
    arrival = [pk[0], pk[2], pk[1], pk[3], pk[5], pk[4]]
    out, rep = run_receiver(arrival, small_package, ReceiverOptions(sort=False))
    assert [f.frame_index for f in out if not f.interpolated] == [0, 1, 2, 3, 4, 5]
    assert rep.dropped_late == 0 and rep.gaps == 0 and rep.interpolated == 5


def test_late_and_duplicate_frames_dropped(small_package):
    frames = list(preset_frames("walk", 30, 6))
    pk = packets(frames)
    arrival = [pk[0], pk[1], pk[1], pk[3], pk[4], pk[2], pk[5]]
    out, rep = run_receiver(arrival, small_package, ReceiverOptions(sort=False))
    assert [f.frame_index for f in out if not f.interpolated] == [0, 1, 3, 4, 5]
    assert rep.dropped_late == 2
    assert rep.gaps == 1
    # no midpoint across the gap between 1 and 3
    assert [f.frame_index for f in out if f.interpolated] == [0.5, 3.5, 4.5]


def test_non_frame_and_corrupt_packets_counted(small_package):
    frames = list(preset_frames("walk", 30, 2))
    raw = bytearray(encode_frame(frames[1]).to_bytes())
    raw[0] = 0
    out, rep = run_receiver([encode_frame(frames[0]), encode_ack(0), bytes(raw)], small_package,
                            ReceiverOptions(sort=False))
    assert rep.non_frame_packets == 1 and rep.decode_errors == 1 and rep.frames_out == 1


def test_receiver_is_deterministic(small_package):
    frames = list(preset_frames("idle-sway", 30, 10))
    cam = CameraSpec(image_width=24, image_height=24)
    opts = lambda: ReceiverOptions(camera=cam, composite=True)  # noqa: E731
    _, r1 = run_receiver(packets(frames), small_package, opts())
    _, r2 = run_receiver(packets(frames), small_package, opts())
    assert r1.deterministic() == r2.deterministic()
    assert r1.frames_digest == r2.frames_digest
    assert ReceiverReport.from_dict(r1.to_dict()).to_dict() == r1.to_dict()


def test_render_digest_ignores_latency(small_package):
    frames = list(preset_frames("idle-sway", 30, 2))
    out, _ = run_receiver(packets(frames), small_package)
    f = out[0]
    from dataclasses import replace

    assert replace(f, stage_latencies_us={}).digest() == f.digest()


@given(st.permutations(list(range(8))))
def test_output_indices_always_increase(small_package, perm):
    frames = list(preset_frames("walk", 30, 8))
    pk = packets(frames)
    out, rep = run_receiver([pk[i] for i in perm], small_package, ReceiverOptions(sort=False, interpolate=False))
    idx = [f.frame_index for f in out]
    assert idx == sorted(idx) and len(set(idx)) == len(idx)
    assert rep.frames_out + rep.dropped_late == 8
