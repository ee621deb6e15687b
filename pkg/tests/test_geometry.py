import numpy as np
import pytest

from gazecal import geometry as geo
from gazecal.errors import DegenerateGeometryError, FormatError, ValidationError


def rotation_xyz(rx, ry, rz):
    cx, sx = np.cos(rx), np.sin(rx)
    cy, sy = np.cos(ry), np.sin(ry)
    cz, sz = np.cos(rz), np.sin(rz)
    mx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    my = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    mz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return mz @ my @ mx


def random_pose(rng, max_angle_deg=45.0):
    limit = np.deg2rad(max_angle_deg) / np.sqrt(3)
    angles = rng.uniform(-limit, limit, 3)
    rotation = rotation_xyz(*angles)
    position = np.array(
        [rng.uniform(-150, 150), rng.uniform(-120, 120), rng.uniform(420, 900)]
    )
    return rotation, position


CAMERA = geo.CameraIntrinsics.from_focal(1200.0, 1200.0, 640.0, 360.0)
MODEL = geo.FacialModel.default()


def project_model(rotation, position):
    points = MODEL.points @ rotation.T + position
    return geo.project_points(points, CAMERA)


# ---------------------------------------------------------------------------
# Intrinsics and facial model


def test_intrinsics_require_positive_focals():
    with pytest.raises(ValidationError):
        geo.CameraIntrinsics.from_focal(-1.0, 500.0, 10.0, 10.0)
    with pytest.raises(ValidationError):
        geo.CameraIntrinsics(matrix=np.zeros((3, 3)))


def test_intrinsics_inverse():
    cam = geo.CameraIntrinsics.from_focal(800.0, 820.0, 320.0, 180.0)
    assert np.allclose(cam.matrix @ cam.inverse, np.eye(3), atol=1e-12)


def test_default_model_shape_and_frame():
    points = MODEL.points
    assert points.shape == (6, 3)
    l_mid = points[list(geo.LEFT_EYE_CORNERS)].mean(axis=0)
    r_mid = points[list(geo.RIGHT_EYE_CORNERS)].mean(axis=0)
    # eye midpoints sit symmetric about the origin on the x axis
    assert np.allclose(l_mid + r_mid, 0.0, atol=1e-9)
    assert abs(l_mid[1]) < 1e-9 and abs(l_mid[2]) < 1e-9
    # mouth corners sit below the eyes (y grows downward... toward the mouth)
    assert points[list(geo.MOUTH_CORNERS)][:, 1].mean() > 0


def test_model_from_landmarks_canonicalizes():
    rng = np.random.default_rng(3)
    rotation, _ = random_pose(rng)
    shifted = MODEL.points @ rotation.T + np.array([5.0, -3.0, 11.0])
    rebuilt = geo.FacialModel.from_landmarks(shifted)
    assert np.allclose(rebuilt.points, MODEL.points, atol=1e-9)


def test_model_rejects_degenerate_triangle():
    flat = np.zeros((6, 3))
    flat[:, 0] = np.arange(6, dtype=float)
    with pytest.raises(DegenerateGeometryError):
        geo.FacialModel.from_landmarks(flat)


def test_eye_midpoint_sides():
    left = MODEL.eye_midpoint("left")
    right = MODEL.eye_midpoint("right")
    assert left[0] > right[0]
    with pytest.raises(ValidationError):
        MODEL.eye_midpoint("middle")


# ---------------------------------------------------------------------------
# Pose estimation


def test_head_pose_requires_rotation():
    with pytest.raises(ValidationError):
        geo.HeadPose(rotation=np.eye(3) * 1.5, position=np.array([0.0, 0.0, 600.0]))


def test_recovers_identity_pose():
    rotation = np.eye(3)
    position = np.array([0.0, 0.0, 600.0])
    pose = geo.estimate_head_pose(MODEL, project_model(rotation, position), CAMERA)
    assert pose.converged
    assert np.allclose(pose.rotation, rotation, atol=1e-7)
    assert np.allclose(pose.position, position, atol=1e-4)


def test_recovers_20_degree_yaw():
    rotation = rotation_xyz(0.0, np.deg2rad(20.0), 0.0)
    position = np.array([30.0, -20.0, 650.0])
    pose = geo.estimate_head_pose(MODEL, project_model(rotation, position), CAMERA)
    trace = np.clip((np.trace(pose.rotation @ rotation.T) - 1.0) / 2.0, -1.0, 1.0)
    assert np.degrees(np.arccos(trace)) < 0.1
    assert np.linalg.norm(pose.position - position) < 0.1


def test_pose_round_trip_random_poses():
    rng = np.random.default_rng(2024)
    worst_rot, worst_pos = 0.0, 0.0
    for _ in range(25):
        rotation, position = random_pose(rng)
        pose = geo.estimate_head_pose(MODEL, project_model(rotation, position), CAMERA)
        trace = np.clip((np.trace(pose.rotation @ rotation.T) - 1.0) / 2.0, -1.0, 1.0)
        worst_rot = max(worst_rot, np.degrees(np.arccos(trace)))
        worst_pos = max(worst_pos, np.linalg.norm(pose.position - position))
        assert np.allclose(pose.rotation @ pose.rotation.T, np.eye(3), atol=1e-9)
        assert abs(np.linalg.det(pose.rotation) - 1.0) < 1e-9
    assert worst_rot < 0.1
    assert worst_pos < 0.1


def test_collinear_observations_error():
    observed = np.zeros((6, 2))
    observed[:, 0] = np.linspace(100.0, 200.0, 6)
    observed[:, 1] = np.linspace(50.0, 90.0, 6)
    with pytest.raises(DegenerateGeometryError):
        geo.estimate_head_pose(MODEL, observed, CAMERA)


def test_pose_accepts_raw_landmark_array():
    rotation = np.eye(3)
    position = np.array([10.0, 5.0, 700.0])
    pose = geo.estimate_head_pose(MODEL.points, project_model(rotation, position), CAMERA)
    assert np.allclose(pose.position, position, atol=1e-3)


# ---------------------------------------------------------------------------
# Normalization transform


def test_normalized_pose_is_fixed_point():
    params = geo.NormalizationParams()
    pose = geo.HeadPose(rotation=np.eye(3), position=np.array([0.0, 0.0, params.distance]))
    warp, r_n = geo.normalization_transform(pose, CAMERA, params)
    assert np.allclose(r_n, np.eye(3), atol=1e-9)
    projected = geo.project_points(pose.position[None, :], CAMERA)[0]
    mapped = warp @ np.array([projected[0], projected[1], 1.0])
    mapped = mapped[:2] / mapped[2]
    assert np.allclose(mapped, (30.0, 18.0), atol=1e-6)


def test_warp_centers_reference_point():
    rng = np.random.default_rng(11)
    params = geo.NormalizationParams()
    for _ in range(20):
        rotation, position = random_pose(rng)
        pose = geo.HeadPose(rotation=rotation, position=position)
        warp, r_n = geo.normalization_transform(pose, CAMERA, params)
        assert np.allclose(r_n @ r_n.T, np.eye(3), atol=1e-9)
        projected = geo.project_points(pose.position[None, :], CAMERA)[0]
        mapped = warp @ np.array([projected[0], projected[1], 1.0])
        mapped = mapped[:2] / mapped[2]
        assert np.allclose(mapped, (30.0, 18.0), atol=1e-6)
        # the normalized camera looks straight at the reference point
        assert np.allclose(r_n @ position, [0.0, 0.0, np.linalg.norm(position)], atol=1e-6)
        # roll removal: normalized x axis is orthogonal to the head y axis
        assert abs(r_n[0] @ rotation[:, 1]) < 1e-9


def test_double_distance_halves_scale():
    params = geo.NormalizationParams()
    pose = geo.HeadPose(
        rotation=np.eye(3), position=np.array([0.0, 0.0, 2.0 * params.distance])
    )
    warp, r_n = geo.normalization_transform(pose, CAMERA, params)
    scale = np.diag([1.0, 1.0, 0.5])
    expected = params.camera.matrix @ scale @ r_n @ CAMERA.inverse
    assert np.allclose(warp, expected, atol=1e-12)


def test_reference_at_origin_errors():
    pose = geo.HeadPose(rotation=np.eye(3), position=np.array([0.0, 0.0, 1e-12]))
    with pytest.raises(DegenerateGeometryError):
        geo.normalization_transform(pose, CAMERA, geo.NormalizationParams())


def test_normalization_params_validate():
    with pytest.raises(ValidationError):
        geo.NormalizationParams(distance=0.0)
    with pytest.raises(ValidationError):
        geo.NormalizationParams(focal=-5.0)


# ---------------------------------------------------------------------------
# Image warping


def reference_bilinear(image, inverse, height, width):
    out = np.zeros((height, width))
    src_h, src_w = image.shape
    for v in range(height):
        for u in range(width):
            vec = inverse @ np.array([u, v, 1.0])
            x, y = vec[0] / vec[2], vec[1] / vec[2]
            x0, y0 = int(np.floor(x)), int(np.floor(y))
            fx, fy = x - x0, y - y0
            total = 0.0
            for dy, wy in ((0, 1 - fy), (1, fy)):
                for dx, wx in ((0, 1 - fx), (1, fx)):
                    xi, yi = x0 + dx, y0 + dy
                    if 0 <= xi < src_w and 0 <= yi < src_h:
                        total += wx * wy * image[yi, xi]
            out[v, u] = total
    return out


def test_identity_warp_is_identity():
    rng = np.random.default_rng(0)
    image = rng.integers(0, 256, (36, 60)).astype(np.uint8)
    warped = geo.warp_eye_image(image, np.eye(3))
    assert np.array_equal(warped, image.astype(np.float64))


def test_scale_warp_of_constant_is_constant():
    image = np.full((72, 120), 37.0)
    warp = np.diag([0.5, 0.5, 1.0])
    warped = geo.warp_eye_image(image, warp)
    assert warped.shape == (36, 60)
    assert np.allclose(warped, 37.0)


def test_warp_matches_reference_resampler():
    rng = np.random.default_rng(5)
    image = (rng.integers(0, 2, (36, 60)) * 255).astype(np.float64)
    warp = np.array([[0.9, 0.1, 3.0], [-0.05, 1.1, 2.0], [0.0, 0.0, 1.0]])
    warped = geo.warp_eye_image(image, warp)
    expected = reference_bilinear(image, np.linalg.inv(warp), 36, 60)
    assert np.max(np.abs(warped - expected)) <= 1.0


def test_singular_warp_errors():
    with pytest.raises(DegenerateGeometryError):
        geo.warp_eye_image(np.zeros((36, 60)), np.zeros((3, 3)))


def test_warp_composition_on_smooth_image():
    yy, xx = np.mgrid[0:36, 0:60]
    image = 120.0 + 60.0 * np.sin(xx / 12.0) * np.cos(yy / 9.0)
    # gentle contractions keep the intermediate image inside the frame
    first = np.array([[0.9, 0.02, 2.0], [-0.02, 0.9, 2.5], [0.0, 0.0, 1.0]])
    second = np.array([[0.92, -0.03, 2.2], [0.03, 0.9, 1.5], [0.0, 0.0, 1.0]])
    two_step = geo.warp_eye_image(geo.warp_eye_image(image, first), second)
    one_step = geo.warp_eye_image(image, second @ first)
    assert np.max(np.abs(two_step - one_step)) <= 2.0


# ---------------------------------------------------------------------------
# Head angles


def test_head_angles_identity():
    assert geo.head_angle_vector(np.eye(3)) == pytest.approx((0.0, 0.0))


def test_head_angles_pure_yaw():
    rotation = geo.rotation_from_head_angles(np.deg2rad(10.0), 0.0)
    yaw, pitch = geo.head_angle_vector(rotation)
    assert yaw == pytest.approx(0.1745, abs=1e-4)
    assert pitch == pytest.approx(0.0, abs=1e-9)


def test_head_angles_pure_pitch():
    rotation = geo.rotation_from_head_angles(0.0, np.deg2rad(-5.0))
    yaw, pitch = geo.head_angle_vector(rotation)
    assert yaw == pytest.approx(0.0, abs=1e-9)
    assert pitch == pytest.approx(-0.0873, abs=1e-4)


def test_head_angles_round_trip():
    rng = np.random.default_rng(8)
    for _ in range(50):
        yaw, pitch = rng.uniform(-1.2, 1.2, 2)
        rotation = geo.rotation_from_head_angles(yaw, pitch)
        assert np.allclose(rotation @ rotation.T, np.eye(3), atol=1e-12)
        recovered = geo.head_angle_vector(rotation)
        assert recovered == pytest.approx((yaw, pitch), abs=1e-9)


def test_head_angles_gimbal_error():
    rotation = rotation_xyz(-np.pi / 2.0, 0.0, 0.0)
    with pytest.raises(DegenerateGeometryError):
        geo.head_angle_vector(rotation)


# ---------------------------------------------------------------------------
# Histogram equalization


def test_equalize_constant_image():
    image = np.full((36, 60), 77, dtype=np.uint8)
    assert np.array_equal(geo.histogram_equalize(image), image)


def test_equalize_two_level_image():
    image = np.zeros((4, 4), dtype=np.uint8)
    image[:2] = 255
    out = geo.histogram_equalize(image)
    assert set(np.unique(out)) <= {0, 255}
    assert np.array_equal(out == 255, image == 255)


def test_equalize_uniform_ramp_is_identity():
    image = np.arange(256, dtype=np.uint8).reshape(16, 16)
    out = geo.histogram_equalize(image)
    assert np.max(np.abs(out.astype(int) - image.astype(int))) <= 1


def test_equalize_idempotent():
    rng = np.random.default_rng(4)
    image = rng.integers(40, 200, (36, 60)).astype(np.uint8)
    once = geo.histogram_equalize(image)
    twice = geo.histogram_equalize(once)
    assert np.max(np.abs(twice.astype(int) - once.astype(int))) <= 1


def test_equalize_monotone():
    rng = np.random.default_rng(9)
    image = rng.integers(0, 256, (36, 60)).astype(np.uint8)
    out = geo.histogram_equalize(image)
    order = np.argsort(image.ravel(), kind="stable")
    mapped = out.ravel()[order]
    assert np.all(np.diff(mapped.astype(int)) >= -0)
    # equal inputs map to equal outputs
    flat_in, flat_out = image.ravel(), out.ravel()
    for level in np.unique(flat_in):
        assert len(np.unique(flat_out[flat_in == level])) == 1


# ---------------------------------------------------------------------------
# PGM round trip


def test_pgm_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    image = rng.integers(0, 256, (36, 60)).astype(np.uint8)
    path = tmp_path / "eye.pgm"
    geo.write_pgm(path, image)
    assert np.array_equal(geo.read_pgm(path), image)


def test_pgm_rejects_other_formats(tmp_path):
    path = tmp_path / "bad.pgm"
    path.write_bytes(b"P6\n60 36\n255\n" + bytes(60 * 36 * 3))
    with pytest.raises(FormatError):
        geo.read_pgm(path)
