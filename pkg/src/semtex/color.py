"""Weighted running-average fusion of RGB frames into the colour texture."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from .atlas import TexelTable
from .camera import CameraModel
from .semantic import TexelObservation, observe


@dataclass
class ColorTexture:
    resolution: int
    color: np.ndarray = field(default=None)
    weight: np.ndarray = field(default=None)

    def __post_init__(self):
        n = self.resolution * self.resolution
        if self.color is None:
            self.color = np.zeros((n, 3), dtype=np.float32)
        if self.weight is None:
            self.weight = np.zeros(n, dtype=np.float32)

    def image(self) -> np.ndarray:
        return self.color.reshape(self.resolution, self.resolution, 3)

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            np.save(fh, self.color)
            np.save(fh, self.weight)

    @classmethod
    def load(cls, path) -> "ColorTexture":
        with open(path, "rb") as fh:
            color = np.load(fh)
            weight = np.load(fh)
        return cls(int(round(np.sqrt(len(weight)))), color, weight)


def color_weight(p_x, n_x, model: CameraModel, pose: np.ndarray):
    """Inverse squared distance x cos^4 vignetting x clamped view cosine.

    Works on single points or ``(n, 3)`` arrays.
    """
    p = np.atleast_2d(np.asarray(p_x, dtype=np.float64))
    n = np.atleast_2d(np.asarray(n_x, dtype=np.float64))
    pc = p @ pose[:3, :3].T + pose[:3, 3]
    d2 = (pc * pc).sum(axis=1)
    w_dist = 1.0 / d2
    w_vign = (pc[:, 2] / np.sqrt(d2)) ** 4
    origin = -pose[:3, :3].T @ pose[:3, 3]
    view = origin - p
    view /= np.linalg.norm(view, axis=1, keepdims=True)
    n = n / np.linalg.norm(n, axis=1, keepdims=True)
    w_view = np.maximum(0.0, (view * n).sum(axis=1))
    w = w_dist * w_vign * w_view
    return float(w[0]) if np.ndim(p_x) == 1 else w


def fuse_color_frame(
    texture: ColorTexture,
    table: TexelTable,
    model: CameraModel,
    pose: np.ndarray,
    rgb: np.ndarray,
    obs: TexelObservation | None = None,
) -> int:
    """Blend a bilinearly sampled 8-bit RGB image into the visible texels.

    Returns the number of visible texels considered (zero-weight ones leave
    the texture untouched).
    """
    if texture.resolution != table.resolution:
        raise ValueError("texture and texel table resolutions differ")
    if rgb.shape[:2] != (model.height, model.width):
        raise ValueError("image size does not match the camera")
    if obs is None:
        obs = observe(table, model, pose)
    mesh = table.mesh
    origin = -pose[:3, :3].T @ pose[:3, 3]
    K.color_update(
        mesh.positions, mesh.faces, table.face_ranges, table.face, table.bary, table.texel, mesh.normals,
        np.ascontiguousarray(pose[:3, :3]), np.ascontiguousarray(pose[:3, 3]), origin,
        model.fx, model.fy, model.cx, model.cy, model.width, model.height,
        obs.status, obs.u, obs.v, np.ascontiguousarray(rgb, dtype=np.float64), texture.color, texture.weight,
    )
    return int(obs.visible.sum())
