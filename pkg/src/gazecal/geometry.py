"""Camera geometry for eye-image normalization.

Conventions used throughout
---------------------------
Camera frame: x right, y down, z forward (into the scene). Pixel
coordinates (u, v) have u growing rightwards and v downwards.

Head frame: origin at the centroid of the four eye corners, x from the
subject's right eye towards their left eye, y from the eyes towards the
mouth, z = x cross y (into the head). A subject looking straight into
the camera therefore has rotation equal to the identity.

Head angles: yaw is positive when the head turns towards the subject's
left, pitch is positive when the head tilts up. Both are radians.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import least_squares
from scipy.spatial.transform import Rotation

from .errors import DegenerateGeometryError, FormatError, ValidationError

__all__ = [
    "CameraIntrinsics",
    "FacialModel",
    "HeadPose",
    "NormalizationParams",
    "estimate_head_pose",
    "eye_pose",
    "head_angle_vector",
    "histogram_equalize",
    "normalization_transform",
    "project_points",
    "read_pgm",
    "rotation_from_head_angles",
    "warp_eye_image",
    "write_pgm",
]

_ORTHONORMAL_TOL = 1e-6


def _as_float_array(value, shape, name: str) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if arr.shape != shape:
        raise ValidationError(f"{name} must have shape {shape}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains non-finite values")
    return arr


def _check_rotation(matrix: np.ndarray, name: str) -> None:
    err = np.abs(matrix.T @ matrix - np.eye(3)).max()
    if err > _ORTHONORMAL_TOL:
        raise ValidationError(f"{name} is not orthonormal (deviation {err:.2e})")
    if np.linalg.det(matrix) < 0.0:
        raise ValidationError(f"{name} has negative determinant")


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics as a 3x3 matrix [[fx,0,cx],[0,fy,cy],[0,0,1]]."""

    matrix: np.ndarray

    def __post_init__(self):
        m = _as_float_array(self.matrix, (3, 3), "camera matrix")
        if m[0, 0] <= 0.0 or m[1, 1] <= 0.0:
            raise ValidationError("focal lengths must be positive")
        if m[2, 0] != 0.0 or m[2, 1] != 0.0 or m[2, 2] != 1.0:
            raise ValidationError("last camera matrix row must be [0, 0, 1]")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @classmethod
    def from_focal(cls, fx: float, fy: float, cx: float, cy: float) -> "CameraIntrinsics":
        return cls(np.array([[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]]))

    @property
    def inverse(self) -> np.ndarray:
        return np.linalg.inv(self.matrix)


# Eye corner rows in a facial model: (outer, inner) per eye.
LEFT_EYE_CORNERS = (0, 1)
RIGHT_EYE_CORNERS = (2, 3)
MOUTH_CORNERS = (4, 5)

# Generic six-landmark face in head coordinates (millimetres). Rows are:
# left eye outer/inner, right eye inner/outer, mouth left/right ("left"
# always meaning the subject's left). The small z offsets keep the model
# non-coplanar, which pose estimation from a single view needs.
_DEFAULT_MODEL_POINTS = np.array(
    [
        [45.0, 0.0, 5.0],
        [15.0, 0.0, 0.0],
        [-15.0, 0.0, 0.0],
        [-45.0, 0.0, 5.0],
        [25.0, 65.0, 8.0],
        [-25.0, 65.0, 8.0],
    ]
)


@dataclass(frozen=True)
class FacialModel:
    """Six 3D facial landmarks (four eye corners, two mouth corners)."""

    points: np.ndarray

    def __post_init__(self):
        pts = _as_float_array(self.points, (6, 3), "model points")
        spread = np.linalg.norm(pts - pts.mean(axis=0), axis=1).max()
        if spread < 1e-9:
            raise ValidationError("model points are all identical")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @classmethod
    def default(cls) -> "FacialModel":
        return cls(_DEFAULT_MODEL_POINTS.copy())

    @classmethod
    def from_landmarks(cls, raw_points) -> "FacialModel":
        """Re-express measured landmarks in the canonical head frame.

        The canonical frame puts the origin at the centroid of the four
        eye corners, x along the right-to-left eye direction, y towards
        the mouth (orthogonalized against x) and z = x cross y.
        """
        pts = _as_float_array(np.asarray(raw_points), (6, 3), "landmarks")
        left_mid = pts[list(LEFT_EYE_CORNERS)].mean(axis=0)
        right_mid = pts[list(RIGHT_EYE_CORNERS)].mean(axis=0)
        eye_mid = pts[:4].mean(axis=0)
        mouth_mid = pts[list(MOUTH_CORNERS)].mean(axis=0)
        x_axis = left_mid - right_mid
        nx = np.linalg.norm(x_axis)
        if nx < 1e-9:
            raise DegenerateGeometryError("eye midpoints coincide")
        x_axis = x_axis / nx
        y_raw = mouth_mid - eye_mid
        y_axis = y_raw - x_axis * (y_raw @ x_axis)
        ny = np.linalg.norm(y_axis)
        if ny < 1e-9:
            raise DegenerateGeometryError("mouth lies on the eye axis")
        y_axis = y_axis / ny
        z_axis = np.cross(x_axis, y_axis)
        frame = np.stack([x_axis, y_axis, z_axis], axis=1)
        return cls((pts - eye_mid) @ frame)

    def eye_midpoint(self, side: str) -> np.ndarray:
        """Midpoint of one eye's corners, in head coordinates."""
        if side == "left":
            rows = LEFT_EYE_CORNERS
        elif side == "right":
            rows = RIGHT_EYE_CORNERS
        else:
            raise ValidationError(f"eye side must be 'left' or 'right', got {side!r}")
        return self.points[list(rows)].mean(axis=0)


@dataclass(frozen=True)
class HeadPose:
    """Rigid head placement in the camera frame.

    ``rotation`` maps head coordinates into camera coordinates;
    ``position`` is the head-frame origin (or, for per-eye poses, the
    eye midpoint) in camera coordinates, millimetres. ``converged``
    is False when the refinement that produced the pose did not settle.
    """

    rotation: np.ndarray
    position: np.ndarray
    converged: bool = True

    def __post_init__(self):
        rot = _as_float_array(self.rotation, (3, 3), "rotation")
        _check_rotation(rot, "rotation")
        pos = _as_float_array(self.position, (3,), "position")
        rot.setflags(write=False)
        pos.setflags(write=False)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "position", pos)


@dataclass(frozen=True)
class NormalizationParams:
    """Virtual camera used for eye-image normalization."""

    distance: float = 600.0
    focal: float = 960.0
    width: int = 60
    height: int = 36

    def __post_init__(self):
        if self.distance <= 0.0 or self.focal <= 0.0:
            raise ValidationError("distance and focal length must be positive")
        if self.width < 2 or self.height < 2:
            raise ValidationError("output resolution must be at least 2x2")

    @property
    def camera(self) -> CameraIntrinsics:
        return CameraIntrinsics.from_focal(
            self.focal, self.focal, self.width / 2.0, self.height / 2.0
        )


def project_points(points, rotation, position, camera: CameraIntrinsics) -> np.ndarray:
    """Project 3D points through a pinhole camera, returning Nx2 pixels."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValidationError(f"points must be Nx3, got {pts.shape}")
    rot = _as_float_array(rotation, (3, 3), "rotation")
    pos = _as_float_array(position, (3,), "position")
    cam_pts = pts @ rot.T + pos
    z = cam_pts[:, 2]
    if np.any(z <= 1e-9):
        raise ValidationError("points must lie in front of the camera")
    uv = cam_pts @ camera.matrix.T
    return uv[:, :2] / z[:, None]


def _collinearity_gap(points: np.ndarray) -> float:
    """Second singular value of the centered points; 0 when collinear."""
    centered = points - points.mean(axis=0)
    s = np.linalg.svd(centered, compute_uv=False)
    return float(s[1])


def _dlt_pose(model: np.ndarray, normalized: np.ndarray):
    """Direct linear transform for [R|t] from 3D-2D pairs.

    ``normalized`` holds camera-normalized image coordinates (pixel
    coordinates premultiplied by the inverse intrinsics). Returns
    (rotation, translation) or None when the algebraic solution is not
    a sensible pose (for example for nearly coplanar models).
    """
    n = model.shape[0]
    # Condition both point sets before building the linear system.
    c3 = model.mean(axis=0)
    d3 = np.linalg.norm(model - c3, axis=1).mean()
    if d3 < 1e-12:
        return None
    s3 = np.sqrt(3.0) / d3
    model_n = (model - c3) * s3

    c2 = normalized.mean(axis=0)
    d2 = np.linalg.norm(normalized - c2, axis=1).mean()
    if d2 < 1e-12:
        return None
    s2 = np.sqrt(2.0) / d2
    image_n = (normalized - c2) * s2

    ph = np.hstack([model_n, np.ones((n, 1))])
    a = np.zeros((2 * n, 12))
    a[0::2, 0:4] = ph
    a[0::2, 8:12] = -image_n[:, 0:1] * ph
    a[1::2, 4:8] = ph
    a[1::2, 8:12] = -image_n[:, 1:2] * ph
    _, _, vt = np.linalg.svd(a)
    p_n = vt[-1].reshape(3, 4)

    # Undo the conditioning transforms.
    t2_inv = np.array([[1.0 / s2, 0.0, c2[0]], [0.0, 1.0 / s2, c2[1]], [0.0, 0.0, 1.0]])
    u3 = np.eye(4)
    u3[:3, :3] *= s3
    u3[:3, 3] = -s3 * c3
    p = t2_inv @ p_n @ u3

    # Resolve the sign so points land in front of the camera.
    depths = np.hstack([model, np.ones((n, 1))]) @ p[2]
    if depths.sum() < 0.0:
        p = -p
        depths = -depths
    if np.any(depths <= 0.0):
        return None
    m = p[:, :3]
    if np.linalg.det(m) <= 0.0:
        return None
    u, s, vt = np.linalg.svd(m)
    if s[2] < 1e-9 * s[0]:
        return None
    rot = u @ vt
    scale = s.mean()
    return rot, p[:, 3] / scale


def _frontal_init(model: np.ndarray, normalized: np.ndarray):
    """Camera-facing initial pose aimed at the observed centroid."""
    spread3 = np.linalg.norm(model - model.mean(axis=0), axis=1).mean()
    spread2 = np.linalg.norm(normalized - normalized.mean(axis=0), axis=1).mean()
    depth = spread3 / max(spread2, 1e-9)
    center = normalized.mean(axis=0)
    position = np.array([center[0] * depth, center[1] * depth, depth])
    return np.eye(3), position


def estimate_head_pose(model_points, image_points, camera: CameraIntrinsics) -> HeadPose:
    """Recover the head pose from observed landmark pixels.

    A linear (DLT) estimate seeds a Levenberg-Marquardt refinement of
    the reprojection error; a camera-facing guess is always tried as a
    second seed so nearly coplanar models still converge. Collinear
    observations raise DegenerateGeometryError. If the refinement fails
    to reduce its seed's error the seed is returned with
    ``converged=False``.
    """
    if isinstance(model_points, FacialModel):
        model = model_points.points
    else:
        model = np.asarray(model_points, dtype=np.float64)
    if model.ndim != 2 or model.shape[1] != 3 or model.shape[0] < 4:
        raise ValidationError(f"model points must be Nx3 with N >= 4, got {model.shape}")
    if not np.all(np.isfinite(model)):
        raise ValidationError("model points contain non-finite values")
    observed = np.asarray(image_points, dtype=np.float64)
    if observed.shape != (model.shape[0], 2):
        raise ValidationError(
            f"image points must have shape {(model.shape[0], 2)}, got {observed.shape}"
        )
    if not np.all(np.isfinite(observed)):
        raise ValidationError("image points contain non-finite values")
    if _collinearity_gap(model) < 1e-9:
        raise DegenerateGeometryError("model points are collinear")
    if _collinearity_gap(observed) < 1e-9:
        raise DegenerateGeometryError("observed points are collinear")

    ones = np.ones((observed.shape[0], 1))
    normalized = (np.hstack([observed, ones]) @ camera.inverse.T)[:, :2]

    def residuals(theta):
        rot = Rotation.from_rotvec(theta[:3]).as_matrix()
        cam_pts = model @ rot.T + theta[3:]
        z = np.maximum(cam_pts[:, 2], 1e-9)
        uv = cam_pts @ camera.matrix.T
        return (uv[:, :2] / z[:, None] - observed).ravel()

    seeds = []
    dlt = _dlt_pose(model, normalized)
    if dlt is not None:
        seeds.append(dlt)
    seeds.append(_frontal_init(model, normalized))

    best = None
    for rot0, pos0 in seeds:
        theta0 = np.concatenate([Rotation.from_matrix(rot0).as_rotvec(), pos0])
        seed_cost = 0.5 * np.sum(residuals(theta0) ** 2)
        result = least_squares(residuals, theta0, method="lm", xtol=1e-14, ftol=1e-14)
        if result.cost <= seed_cost:
            cost, theta, ok = result.cost, result.x, True
        else:
            cost, theta, ok = seed_cost, theta0, False
        if best is None or cost < best[0]:
            best = (cost, theta, ok)

    _, theta, converged = best
    rotation = Rotation.from_rotvec(theta[:3]).as_matrix()
    return HeadPose(rotation=rotation, position=theta[3:], converged=converged)


def eye_pose(pose: HeadPose, model: FacialModel, side: str) -> HeadPose:
    """Head pose re-anchored at one eye's corner midpoint."""
    position = pose.rotation @ model.eye_midpoint(side) + pose.position
    return HeadPose(rotation=pose.rotation, position=position, converged=pose.converged)


def normalization_transform(
    pose: HeadPose, camera: CameraIntrinsics, params: NormalizationParams
):
    """Build the image warp into the normalized camera.

    The virtual camera looks straight at ``pose.position`` (the eye),
    keeps its x axis perpendicular to the head's y axis, and sits at
    the fixed distance ``params.distance`` via a z scaling. Returns
    ``(warp, rotation)`` where ``warp`` is the 3x3 pixel homography and
    ``rotation`` maps camera coordinates into the normalized camera.
    """
    distance = np.linalg.norm(pose.position)
    if distance < 1e-6:
        raise DegenerateGeometryError("eye position coincides with the camera center")
    z_axis = pose.position / distance
    head_y = pose.rotation[:, 1]
    x_axis = np.cross(head_y, z_axis)
    nx = np.linalg.norm(x_axis)
    if nx < 1e-9:
        raise DegenerateGeometryError("head y axis is parallel to the view direction")
    x_axis = x_axis / nx
    y_axis = np.cross(z_axis, x_axis)
    rotation = np.stack([x_axis, y_axis, z_axis])

    scale = np.diag([1.0, 1.0, params.distance / distance])
    warp = params.camera.matrix @ scale @ rotation @ camera.inverse
    return warp, rotation


def warp_eye_image(image, warp, out_shape=None) -> np.ndarray:
    """Resample an image through a homography with bilinear interpolation.

    ``warp`` maps source pixel coordinates to destination coordinates;
    sampling happens through its inverse. Samples falling outside the
    source are treated as zero. Returns float64 of ``out_shape``
    (defaults to the normalized eye resolution 36x60).
    """
    src = np.asarray(image, dtype=np.float64)
    if src.ndim != 2 or src.shape[0] < 2 or src.shape[1] < 2:
        raise ValidationError(f"image must be 2D and at least 2x2, got {src.shape}")
    if not np.all(np.isfinite(src)):
        raise ValidationError("image contains non-finite values")
    w = _as_float_array(warp, (3, 3), "warp")
    if abs(np.linalg.det(w)) < 1e-12:
        raise ValidationError("warp is singular")
    if out_shape is None:
        out_shape = (36, 60)
    out_h, out_w = int(out_shape[0]), int(out_shape[1])
    if out_h < 1 or out_w < 1:
        raise ValidationError("output shape must be positive")

    inv = np.linalg.inv(w)
    uu, vv = np.meshgrid(np.arange(out_w, dtype=np.float64), np.arange(out_h, dtype=np.float64))
    denom = inv[2, 0] * uu + inv[2, 1] * vv + inv[2, 2]
    valid = np.abs(denom) > 1e-12
    denom = np.where(valid, denom, 1.0)
    sx = (inv[0, 0] * uu + inv[0, 1] * vv + inv[0, 2]) / denom
    sy = (inv[1, 0] * uu + inv[1, 1] * vv + inv[1, 2]) / denom

    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    fx = sx - x0
    fy = sy - y0

    h, wid = src.shape
    out = np.zeros((out_h, out_w), dtype=np.float64)
    # Accumulate the four neighbours; missing neighbours contribute zero.
    for dy, dx, weight in (
        (0, 0, (1.0 - fx) * (1.0 - fy)),
        (0, 1, fx * (1.0 - fy)),
        (1, 0, (1.0 - fx) * fy),
        (1, 1, fx * fy),
    ):
        yy = y0 + dy
        xx = x0 + dx
        inside = valid & (yy >= 0) & (yy < h) & (xx >= 0) & (xx < wid)
        out[inside] += weight[inside] * src[yy[inside], xx[inside]]
    return out


def head_angle_vector(rotation) -> np.ndarray:
    """Extract (yaw, pitch) radians from a head rotation matrix.

    Yaw and pitch describe the head's z axis (the facing direction):
    yaw = atan2(-z_x, z_z), pitch = asin(z_y). Poses looking straight
    up or down (|z_y| -> 1) have no defined yaw and raise
    DegenerateGeometryError.
    """
    rot = _as_float_array(rotation, (3, 3), "rotation")
    _check_rotation(rot, "rotation")
    z = rot[:, 2]
    if abs(z[1]) >= 1.0 - 1e-9:
        raise DegenerateGeometryError("head is facing straight up or down; yaw undefined")
    pitch = np.arcsin(np.clip(z[1], -1.0, 1.0))
    yaw = np.arctan2(-z[0], z[2])
    return np.array([yaw, pitch])


def rotation_from_head_angles(yaw: float, pitch: float) -> np.ndarray:
    """Head rotation whose facing direction has the given yaw and pitch.

    Inverse of head_angle_vector up to the roll component, which is
    fixed by keeping the head's x axis level (perpendicular to the
    world y axis).
    """
    if abs(pitch) >= np.pi / 2.0 - 1e-9:
        raise DegenerateGeometryError("pitch too close to vertical")
    z = np.array(
        [-np.sin(yaw) * np.cos(pitch), np.sin(pitch), np.cos(yaw) * np.cos(pitch)]
    )
    x = np.cross(np.array([0.0, 1.0, 0.0]), z)
    x = x / np.linalg.norm(x)
    y = np.cross(z, x)
    return np.stack([x, y, z], axis=1)


def histogram_equalize(image) -> np.ndarray:
    """Classic histogram equalization to uint8.

    Maps intensity v to round(255 * (cdf(v) - cdf_min) / (N - cdf_min))
    where cdf_min is the smallest non-zero CDF value. Constant images
    are returned unchanged. Float inputs are quantized to 256 levels
    first.
    """
    arr = np.asarray(image)
    if arr.size == 0:
        raise ValidationError("image is empty")
    if arr.dtype != np.uint8:
        vals = np.asarray(arr, dtype=np.float64)
        if not np.all(np.isfinite(vals)):
            raise ValidationError("image contains non-finite values")
        if vals.min() < 0.0 or vals.max() > 255.0:
            raise ValidationError("intensities must lie in [0, 255]")
        arr = np.floor(vals + 0.5).astype(np.uint8)
    hist = np.bincount(arr.ravel(), minlength=256)
    cdf = np.cumsum(hist)
    total = int(cdf[-1])
    cdf_min = int(cdf[np.nonzero(hist)[0][0]])
    if cdf_min == total:
        return arr.copy()
    lut = np.floor(255.0 * (cdf - cdf_min) / (total - cdf_min) + 0.5)
    lut = np.clip(lut, 0.0, 255.0).astype(np.uint8)
    return lut[arr]


def write_pgm(path, image) -> None:
    """Write a uint8 grayscale image as binary PGM (P5)."""
    arr = np.asarray(image)
    if arr.ndim != 2 or arr.dtype != np.uint8:
        raise ValidationError("PGM output requires a 2D uint8 image")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read a binary PGM (P5) image written by write_pgm."""
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(b"P5"):
        raise FormatError(f"{path}: not a binary PGM file")
    # Header is three whitespace-separated tokens after the magic,
    # with optional '#' comment lines.
    pos = 2
    tokens = []
    while len(tokens) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PGM header")
        tokens.append(data[start:pos])
    pos += 1  # single whitespace byte after the maxval
    try:
        width, height, maxval = (int(t) for t in tokens)
    except ValueError as exc:
        raise FormatError(f"{path}: malformed PGM header") from exc
    if maxval != 255:
        raise FormatError(f"{path}: unsupported PGM max value {maxval}")
    expected = width * height
    pixels = data[pos : pos + expected]
    if len(pixels) != expected:
        raise FormatError(f"{path}: truncated PGM pixel data")
    return np.frombuffer(pixels, dtype=np.uint8).reshape(height, width).copy()
