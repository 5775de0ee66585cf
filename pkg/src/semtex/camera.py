"""Pinhole cameras, software depth rendering and visibility."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from . import _kernels as K

DEFAULT_BIAS = 1e-3
NEAR_PLANE = 1e-3


@dataclass(frozen=True)
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (self.width > 0 and self.height > 0):
            raise ValueError("image size must be positive")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def scaled(self, width: int, height: int) -> "CameraModel":
        sx, sy = width / self.width, height / self.height
        # pixel centres sit at integer coordinates, hence the half-pixel shift
        return CameraModel(
            self.fx * sx, self.fy * sy, (self.cx + 0.5) * sx - 0.5, (self.cy + 0.5) * sy - 0.5, width, height
        )


def check_pose(pose: np.ndarray, tol: float = 1e-6) -> np.ndarray:
    pose = np.asarray(pose, dtype=np.float64)
    if pose.shape != (4, 4):
        raise ValueError("pose must be 4x4")
    R = pose[:3, :3]
    if not np.allclose(R.T @ R, np.eye(3), atol=tol) or abs(np.linalg.det(R) - 1.0) > tol:
        raise ValueError("pose rotation is not orthonormal")
    return pose


def invert_pose(T: np.ndarray) -> np.ndarray:
    R, t = T[:3, :3], T[:3, 3]
    out = np.eye(4)
    out[:3, :3] = R.T
    out[:3, 3] = -R.T @ t
    return out


@dataclass
class CameraFrame:
    """One posed image.  ``pose`` maps world points into the camera (T_Fw)."""

    id: int
    model: CameraModel
    pose: np.ndarray
    rgb: np.ndarray | None = None
    segmentation: object | None = None

    def __post_init__(self):
        self.pose = check_pose(self.pose)

    @property
    def origin(self) -> np.ndarray:
        """Camera centre in world coordinates."""
        R, t = self.pose[:3, :3], self.pose[:3, 3]
        return -R.T @ t


def project(points: np.ndarray, model: CameraModel, pose: np.ndarray):
    """Project world points; returns ``(uv, depth)``.

    ``uv`` is NaN for points with depth <= 0 (behind the camera).
    """
    p = np.atleast_2d(np.asarray(points, dtype=np.float64))
    pc = p @ pose[:3, :3].T + pose[:3, 3]
    z = pc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = np.column_stack([model.fx * pc[:, 0] / z + model.cx, model.fy * pc[:, 1] / z + model.cy])
    uv[z <= 0] = np.nan
    return uv, z


@dataclass(frozen=True)
class DepthMap:
    """Rendered nearest-surface depth.

    ``depth`` is +inf where no surface was hit; ``face`` holds the hit face
    (-1 for none), ``bary`` its perspective-correct barycentrics for
    vertices 1 and 2, ``planes`` every face's plane ``n . X = d`` in
    camera coordinates and ``edges`` the normals of the planes through the
    camera centre and each face edge (together they give the exact hit
    surface at subpixel positions).
    """

    depth: np.ndarray
    face: np.ndarray
    bary: np.ndarray
    planes: np.ndarray
    edges: np.ndarray
    model: CameraModel

    @property
    def hit(self) -> np.ndarray:
        return self.face >= 0

    def surface_depth(self, u: float, v: float) -> float:
        m = self.model
        return float(K.surface_depth(self.depth, self.face, self.planes, self.edges, m.fx, m.fy, m.cx, m.cy, float(u), float(v)))


def face_planes(cam_verts: np.ndarray, faces: np.ndarray) -> np.ndarray:
    p = cam_verts[faces]
    n = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
    d = (n * p[:, 0]).sum(axis=1)
    return np.ascontiguousarray(np.column_stack([n, d]))


def face_edges(cam_verts: np.ndarray, faces: np.ndarray) -> np.ndarray:
    p = cam_verts[faces]
    e = np.cross(p, np.roll(p, -1, axis=1))
    n = np.linalg.norm(e, axis=2, keepdims=True)
    return np.ascontiguousarray(e / np.where(n > 0, n, 1.0))


def render_depth(positions: np.ndarray, faces: np.ndarray, model: CameraModel, pose: np.ndarray, near: float = NEAR_PLANE) -> DepthMap:
    """Rasterize a triangle mesh into a depth map for one view."""
    positions = np.asarray(positions, dtype=np.float64)
    faces = np.ascontiguousarray(faces, dtype=np.int64)
    cam = np.ascontiguousarray(positions @ pose[:3, :3].T + pose[:3, 3])
    depth = np.full((model.height, model.width), np.inf)
    face = np.full((model.height, model.width), -1, dtype=np.int64)
    bary = np.zeros((model.height, model.width, 2), dtype=np.float32)
    K.rasterize(cam, faces, model.fx, model.fy, model.cx, model.cy, model.width, model.height, near, depth, face, bary)
    return DepthMap(depth, face, bary, face_planes(cam, faces), face_edges(cam, faces), model)


def depth_bias(d: float | np.ndarray, scale: float = DEFAULT_BIAS):
    return scale * (1.0 + np.asarray(d))


def visible(d_x: float, u, depth: DepthMap, bias: float | None = None) -> int:
    """1 if a surface point at depth ``d_x`` projecting to ``u`` is the front surface."""
    m = depth.model
    x, y = float(u[0]), float(u[1])
    if not (-0.5 <= x < m.width - 0.5 and -0.5 <= y < m.height - 0.5):
        return 0
    D = depth.surface_depth(x, y)
    if not np.isfinite(D):
        return 0
    if bias is None:
        bias = float(depth_bias(d_x))
    return int(d_x <= D + bias)


# --------------------------------------------------------------------------
# Trajectories and pose noise


def sample_pose_noise(n: int, seed: int):
    """Unit-scale noise draws: unit translation directions/magnitudes and rotation axes/angles."""
    rng = np.random.default_rng(seed)
    tdir = rng.normal(size=(n, 3))
    tdir /= np.linalg.norm(tdir, axis=1, keepdims=True)
    tmag = rng.uniform(0.0, 1.0, size=n)
    axis = rng.normal(size=(n, 3))
    axis /= np.linalg.norm(axis, axis=1, keepdims=True)
    ang = rng.uniform(0.0, 1.0, size=n)
    return tdir * tmag[:, None], axis * ang[:, None]


def add_pose_noise(
    trajectory: list[np.ndarray], max_translation: float, max_rotation_deg: float, seed: int
) -> list[np.ndarray]:
    """Perturb world<-camera poses with bounded random translation and rotation.

    Each pose gets a translation with uniform direction and length in
    ``[0, max_translation]`` and a rotation about a uniform axis by an angle
    in ``[0, max_rotation_deg]`` (applied in the camera frame).  The draws
    depend only on ``seed`` and the trajectory length, so scaling the bounds
    scales one fixed noise realisation.
    """
    if max_translation < 0 or max_rotation_deg < 0:
        raise ValueError("noise bounds must be non-negative")
    if max_translation == 0 and max_rotation_deg == 0:
        return [np.array(T, dtype=np.float64) for T in trajectory]
    dt, rv = sample_pose_noise(len(trajectory), seed)
    out = []
    for T, d, r in zip(trajectory, dt, rv):
        T = np.array(T, dtype=np.float64)
        dR = Rotation.from_rotvec(r * np.radians(max_rotation_deg)).as_matrix()
        T[:3, :3] = T[:3, :3] @ dR
        T[:3, 3] = T[:3, 3] + d * max_translation
        out.append(T)
    return out


def pose_from_tq(t, q) -> np.ndarray:
    T = np.eye(4)
    T[:3, :3] = Rotation.from_quat(q).as_matrix()
    T[:3, 3] = t
    return T


def load_trajectory(path) -> dict[int, np.ndarray]:
    """Read ``id tx ty tz qx qy qz qw`` lines (world<-camera); returns T_Fw per id."""
    poses = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 8:
            raise ValueError(f"{path}:{lineno}: expected 8 fields, got {len(parts)}")
        fid = int(parts[0])
        vals = [float(x) for x in parts[1:]]
        poses[fid] = invert_pose(pose_from_tq(vals[:3], vals[3:]))
    return poses


def save_trajectory(path, poses: dict[int, np.ndarray]) -> None:
    """Inverse of :func:`load_trajectory`; ``poses`` are T_Fw."""
    lines = []
    for fid in sorted(poses):
        Twc = invert_pose(poses[fid])
        q = Rotation.from_matrix(Twc[:3, :3]).as_quat()
        t = Twc[:3, 3]
        lines.append(f"{fid} " + " ".join(f"{x:.12g}" for x in (*t, *q)))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
