"""Project sound-source azimuths into an RGB-D camera and build obstacle masks.

Two image frames are involved: the camera frame C and the microphone image
frame M, a virtual pinhole camera at the array centre with the same
intrinsics.  Both use optical axes (x right, y down, z forward).  The
extrinsic ``T`` maps points from C into M.  Array azimuths are measured
counterclockwise from above, so a source at +10 deg lies left of the optical
axis and projects to a column left of ``cx``.
"""

from __future__ import annotations

import bisect
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from ._config import load_toml


class InvalidDepthError(ValueError):
    pass


class BehindCameraError(ValueError):
    pass


def make_transform(rotation=None, translation=None) -> np.ndarray:
    T = np.eye(4)
    if rotation is not None:
        T[:3, :3] = rotation
    if translation is not None:
        T[:3, 3] = translation
    return T


def check_rigid(T, tol: float = 1e-9) -> np.ndarray:
    T = np.asarray(T, dtype=float)
    if T.shape != (4, 4):
        raise ValueError("rigid transform must be 4x4")
    R = T[:3, :3]
    if np.max(np.abs(R @ R.T - np.eye(3))) > tol or abs(np.linalg.det(R) - 1.0) > tol:
        raise ValueError("rotation part is not orthonormal with det +1")
    if not np.allclose(T[3], [0, 0, 0, 1]):
        raise ValueError("last row of a rigid transform must be [0, 0, 0, 1]")
    return T


def invert_transform(T) -> np.ndarray:
    R = T[:3, :3]
    return make_transform(R.T, -R.T @ T[:3, 3])


@dataclass
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    extrinsic: np.ndarray = field(default_factory=lambda: np.eye(4))
    fov_deg: float = 90.0

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be positive")
        self.extrinsic = check_rigid(self.extrinsic)

    @property
    def rotation(self) -> np.ndarray:
        return self.extrinsic[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.extrinsic[:3, 3]

    @classmethod
    def from_dict(cls, doc: dict) -> "CameraModel":
        q = doc.get("quaternion", [1.0, 0.0, 0.0, 0.0])
        w, x, y, z = (float(v) for v in q)
        R = Rotation.from_quat([x, y, z, w]).as_matrix()
        return cls(
            float(doc["fx"]), float(doc["fy"]), float(doc["cx"]), float(doc["cy"]),
            int(doc["width"]), int(doc["height"]),
            make_transform(R, doc.get("translation", [0.0, 0.0, 0.0])),
            float(doc.get("fov_deg", 90.0)),
        )


def load_camera(path) -> CameraModel:
    """Camera model from TOML: fx, fy, cx, cy, width, height, fov_deg,
    quaternion = [w, x, y, z] and translation (m) of the C -> M transform."""
    return CameraModel.from_dict(load_toml(path))


def project(point, camera: CameraModel) -> np.ndarray:
    X, Y, Z = point
    return np.array([camera.cx + camera.fx * X / Z, camera.cy + camera.fy * Y / Z])


def back_project(pixel, depth: float, camera: CameraModel) -> np.ndarray:
    u, v = pixel
    return np.array([(u - camera.cx) / camera.fx * depth, (v - camera.cy) / camera.fy * depth, depth])


def _depth_at(pixel, depth) -> float:
    if np.ndim(depth) == 0:
        return float(depth)
    depth = np.asarray(depth)
    u, v = int(round(pixel[0])), int(round(pixel[1]))
    if not (0 <= v < depth.shape[0] and 0 <= u < depth.shape[1]):
        raise InvalidDepthError(f"pixel {pixel} outside the depth image")
    return float(depth[v, u])


def warp_pixel(pixel, T, depth, camera: CameraModel) -> np.ndarray:
    """Move `pixel` into another view: project(T @ back_project(pixel, D(pixel))).

    `depth` is a depth image (H, W) in meters, sampled at the nearest pixel,
    or a scalar depth for this pixel.
    """
    d = _depth_at(pixel, depth)
    if not (np.isfinite(d) and d > 0):
        raise InvalidDepthError(f"no valid depth at pixel {tuple(pixel)}")
    p = np.asarray(T, dtype=float) @ np.append(back_project(pixel, d, camera), 1.0)
    if p[2] <= 0:
        raise BehindCameraError("warped point lies behind the target image plane")
    return project(p[:3], camera)


def _ray_in_mic_frame(phi_deg):
    phi = np.radians(phi_deg)
    return np.stack([-np.sin(phi), np.zeros_like(phi), np.cos(phi)], axis=-1)


def camera_azimuth(phi_deg, camera: CameraModel):
    """Horizontal angle of the far-field source ray in the camera frame (deg),
    positive toward increasing image columns."""
    d = _ray_in_mic_frame(np.asarray(phi_deg, dtype=float)) @ camera.rotation  # R^T d
    out = np.degrees(np.arctan2(d[..., 0], d[..., 2]))
    return out if np.ndim(out) else float(out)


LEFT_OUT, IN_VIEW, RIGHT_OUT = -1, 0, 1


def _columns(phi_deg, camera: CameraModel, depth=None):
    """Unclipped columns and view status for array azimuths (vectorised)."""
    phi = np.atleast_1d(np.asarray(phi_deg, dtype=float))
    ray = _ray_in_mic_frame(phi)
    R, t = camera.rotation, camera.translation
    if depth is None:
        pc = ray @ R
    else:
        # point where the ray meets the plane z = depth of the M frame,
        # brought back to C (the camera depth stands in for the M depth)
        ahead = ray[:, 2] > 0
        scale = np.where(ahead, depth / np.where(ahead, ray[:, 2], 1.0), 0.0)
        pm = ray * scale[:, None]
        pc = np.where(ahead[:, None], (pm - t) @ R, ray @ R)
    ang = np.degrees(np.arctan2(pc[:, 0], pc[:, 2]))
    with np.errstate(divide="ignore", invalid="ignore"):
        col = camera.cx + camera.fx * pc[:, 0] / pc[:, 2]
    inside = (pc[:, 2] > 0) & (np.abs(ang) < camera.fov_deg / 2.0)
    status = np.where(inside, IN_VIEW, np.where(ang >= 0, RIGHT_OUT, LEFT_OUT))
    return col, status


def azimuth_to_column(phi_deg: float, camera: CameraModel, depth: float | None = None):
    """Image column of the vertical line through a source azimuth.

    Far-field by default (only the rotation of the extrinsic matters).  With
    `depth` the source is placed where its ray meets that depth in the
    microphone image, which is then warped into the camera.  Sources outside
    the horizontal field of view are pinned to the left or right border.

    Returns ``(column, clamped)``.
    """
    col, status = _columns(phi_deg, camera, depth)
    col, status = float(col[0]), int(status[0])
    last = camera.width - 1
    if status == LEFT_OUT:
        return 0.0, True
    if status == RIGHT_OUT:
        return float(last), True
    if col < 0 or col > last:
        return float(min(max(col, 0.0), last)), True
    return col, False


@dataclass(frozen=True)
class Rectangle:
    col_min: int
    col_max: int
    row_min: int
    row_max: int
    out_of_view: bool = False
    azimuths: tuple = ()  # (center, b_left, b_right) in degrees

    def contains(self, u, v):
        """Closed-interval membership (vectorised)."""
        if self.out_of_view:
            return np.zeros(np.shape(u), dtype=bool)
        return (u >= self.col_min) & (u <= self.col_max) & (v >= self.row_min) & (v <= self.row_max)

    def to_record(self) -> dict:
        return {
            "deg": [round(a, 6) for a in self.azimuths],
            "px": [self.col_min, self.col_max, self.row_min, self.row_max],
            "out_of_view": self.out_of_view,
        }


def region_to_rectangle(region, camera: CameraModel, depth: float | None = None,
                        step_deg: float = 0.5) -> Rectangle:
    """Full-height image rectangle covering an angular region.

    `region` is ``(center, b_left, b_right)`` in degrees; the arc runs
    counterclockwise from b_left through the centre to b_right.  Portions
    beyond the field of view extend the rectangle to the matching border; an
    arc entirely outside the view collapses to a zero-width, out-of-view
    rectangle on the border nearest its centre.
    """
    center, b_left, b_right = (float(a) for a in region)
    lo = center - (center - b_left) % 360.0
    hi = center + (b_right - center) % 360.0
    n = max(2, int(math.ceil((hi - lo) / step_deg)) + 1)
    angles = np.unique(np.concatenate([np.linspace(lo, hi, n), [center]]))
    col, status = _columns(angles, camera, depth)
    last = camera.width - 1
    inview = status == IN_VIEW
    if not inview.any():
        c_col, _ = azimuth_to_column(center, camera, depth)
        c = int(round(c_col))
        return Rectangle(c, c, 0, camera.height - 1, True, (center, b_left, b_right))
    cmin = float(np.min(col[inview]))
    cmax = float(np.max(col[inview]))
    if np.any(status == LEFT_OUT):
        cmin = 0.0
    if np.any(status == RIGHT_OUT):
        cmax = float(last)
    c0 = int(min(max(math.floor(cmin), 0), last))
    c1 = int(min(max(math.ceil(cmax), 0), last))
    return Rectangle(c0, c1, 0, camera.height - 1, False, (center, b_left, b_right))


@dataclass
class ObstacleMask:
    frame: int
    width: int
    height: int
    rectangles: list = field(default_factory=list)
    timestamp: float | None = None
    ssl_frame: int | None = None

    @property
    def validity(self) -> np.ndarray:
        """(H, W) booleans, False inside any in-view rectangle."""
        valid = np.ones((self.height, self.width), dtype=bool)
        for r in self.rectangles:
            if r.out_of_view:
                continue
            valid[max(r.row_min, 0) : r.row_max + 1, max(r.col_min, 0) : r.col_max + 1] = False
        return valid

    def to_record(self) -> dict:
        return {
            "frame": self.frame,
            "timestamp": self.timestamp,
            "ssl_frame": self.ssl_frame,
            "rectangles": [r.to_record() for r in self.rectangles],
        }


def build_mask(frame: int, regions_deg, camera: CameraModel, depth: float | None = None,
               **meta) -> ObstacleMask:
    rects = [region_to_rectangle(r, camera, depth) for r in regions_deg]
    return ObstacleMask(frame, camera.width, camera.height, rects, **meta)


def invalidate_depth(depth, mask: ObstacleMask) -> np.ndarray:
    """Copy of `depth` with every masked pixel set to 0 (invalid)."""
    depth = np.asarray(depth)
    if depth.shape != (mask.height, mask.width):
        raise ValueError(
            f"depth image is {depth.shape[1]}x{depth.shape[0]}, mask is {mask.width}x{mask.height}"
        )
    out = depth.copy()
    out[~mask.validity] = 0
    return out


def split_features(keypoints, mask: ObstacleMask):
    """(kept, rejected) keypoints; rows are (u, v[, score, ...])."""
    kp = np.asarray(keypoints, dtype=float).reshape(-1, np.shape(keypoints)[-1] if len(keypoints) else 2)
    hit = np.zeros(len(kp), dtype=bool)
    for r in mask.rectangles:
        hit |= r.contains(kp[:, 0], kp[:, 1])
    return kp[~hit], kp[hit]


def filter_features(keypoints, mask: ObstacleMask) -> np.ndarray:
    """Keypoints that do not fall inside any obstacle rectangle (closed)."""
    return split_features(keypoints, mask)[0]


def write_pgm(path, mask: ObstacleMask) -> None:
    """8-bit binary PGM, 255 = valid pixel, 0 = masked."""
    img = np.where(mask.validity, 255, 0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{mask.width} {mask.height}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end : end + 1].isspace():
            end += 1
        tokens.append(data[pos:end].decode("ascii"))
        pos = end
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic != "P5":
        raise ValueError(f"{path}: not a binary PGM")
    pos += 1
    dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
    return np.frombuffer(data[pos:], dtype=dtype, count=w * h).reshape(h, w)


def mask_record_line(mask: ObstacleMask) -> str:
    return json.dumps(mask.to_record(), sort_keys=True)


class SslHistory:
    """Buffer of recent SSL frames ordered by timestamp.

    Single writer; readers look up the newest frame at or before a time.
    With `maxlen` only (at least) the newest `maxlen` frames are kept;
    ``None`` keeps everything, as an offline run needs.
    """

    def __init__(self, maxlen: int | None = 512):
        self.maxlen = maxlen
        self._frames = []
        self._times = []

    def append(self, frame) -> None:
        if self._times and frame.timestamp < self._times[-1]:
            raise ValueError("SSL frames must arrive in timestamp order")
        self._frames.append(frame)
        self._times.append(frame.timestamp)
        if self.maxlen is not None and len(self._frames) > 2 * self.maxlen:
            del self._frames[: -self.maxlen]
            del self._times[: -self.maxlen]

    def latest_at_or_before(self, t: float):
        i = bisect.bisect_right(self._times, t)
        return self._frames[i - 1] if i else None

    def __len__(self) -> int:
        return len(self._frames)
