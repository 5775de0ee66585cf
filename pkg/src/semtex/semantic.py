"""Fusion of per-frame argmax segmentations into the semantic texture."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels as K
from .atlas import TexelTable
from .camera import DEFAULT_BIAS, NEAR_PLANE, CameraModel, DepthMap, render_depth
from .sparse import SparseSemanticTexture


@dataclass
class SegmentationResult:
    """Per-pixel best class ``labels`` and its probability ``confidence``."""

    labels: np.ndarray
    confidence: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        self.confidence = np.asarray(self.confidence, dtype=np.float32)
        if self.labels.shape != self.confidence.shape:
            raise ValueError("label and confidence maps differ in shape")

    @property
    def shape(self):
        return self.labels.shape

    def validate(self, class_count: int) -> None:
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= class_count):
            raise ValueError("segmentation label outside the class range")
        c = self.confidence
        if c.size and (np.nanmin(c) < 0 or np.nanmax(c) > 1 or not np.all(np.isfinite(c))):
            raise ValueError("confidences must lie in [0, 1]")


@dataclass(frozen=True)
class FusionParams:
    d_min: float = 0.0
    d_max: float = 100.0
    bias: float = DEFAULT_BIAS

    def __post_init__(self):
        if not 0 <= self.d_min < self.d_max:
            raise ValueError("need 0 <= d_min < d_max")


@dataclass(frozen=True)
class FrameFusionStats:
    touched: int
    occluded: int
    out_of_view: int
    mixed: int = 0


@dataclass
class TexelObservation:
    """Per-texel projection of one frame (aligned with the texel table).

    ``status`` is out of view, occluded, visible, or mixed: visible but the
    nearest pixel shows a different surface (silhouette texels), so its
    label and colour are not sampled.
    """

    status: np.ndarray
    depth: np.ndarray
    u: np.ndarray
    v: np.ndarray
    depth_map: DepthMap
    n_visible: int = -1
    n_occluded: int = -1

    def __post_init__(self):
        if self.n_visible < 0:
            self.n_visible = int(self.visible.sum())
            self.n_occluded = int((self.status == K.STATUS_OCCLUDED).sum())

    @property
    def visible(self) -> np.ndarray:
        """Texels that are the front surface and sampled by the fusion."""
        return self.status == K.STATUS_VISIBLE

    @property
    def unoccluded(self) -> np.ndarray:
        """The visibility indicator proper: front-surface texels, mixed included."""
        return (self.status == K.STATUS_VISIBLE) | (self.status == K.STATUS_MIXED)

    def pixels(self, mask=None):
        """Nearest pixel (x, y) of the selected texels."""
        sel = slice(None) if mask is None else mask
        m = self.depth_map.model
        return (
            np.clip(np.floor(self.u[sel] + 0.5).astype(np.int64), 0, m.width - 1),
            np.clip(np.floor(self.v[sel] + 0.5).astype(np.int64), 0, m.height - 1),
        )


def argmax_reduce(prob_map: np.ndarray) -> SegmentationResult:
    """Collapse ``(H, W, C)`` class probabilities to best label + probability.

    Ties go to the lowest class index.
    """
    prob_map = np.asarray(prob_map)
    labels = np.argmax(prob_map, axis=-1)
    conf = np.take_along_axis(prob_map, labels[..., None], axis=-1)[..., 0]
    return SegmentationResult(labels.astype(np.uint16), conf.astype(np.float32))


def distance_weight(d, d_min: float = 0.0, d_max: float = 100.0):
    """Linear fall-off: 1 up to ``d_min``, 0 from ``d_max`` on."""
    d = np.asarray(d, dtype=np.float64)
    w = np.clip(1.0 - (d - d_min) / (d_max - d_min), 0.0, 1.0)
    out = np.where(d <= d_min, 1.0, w)
    return float(out) if out.ndim == 0 else out


def observe(table: TexelTable, model: CameraModel, pose: np.ndarray, bias: float = DEFAULT_BIAS, depth_map: DepthMap | None = None) -> TexelObservation:
    """Project all texels into a view and classify them visible/occluded/out of view."""
    mesh = table.mesh
    if depth_map is None:
        depth_map = render_depth(mesh.positions, mesh.faces, model, pose)
    n = len(table)
    status = np.empty(n, dtype=np.int8)
    # float32 halves the traffic; visibility itself is decided in float64
    depth = np.empty(n, dtype=np.float32)
    u = np.empty(n, dtype=np.float32)
    v = np.empty(n, dtype=np.float32)
    R = np.ascontiguousarray(pose[:3, :3])
    t = np.ascontiguousarray(pose[:3, 3])
    n_vis, n_occ = K.observe_texels(
        mesh.positions, mesh.faces, table.face_ranges, table.face, table.bary, R, t,
        model.fx, model.fy, model.cx, model.cy, model.width, model.height, NEAR_PLANE,
        depth_map.depth, depth_map.face, depth_map.planes, depth_map.edges, bias,
        status, depth, u, v,
    )
    return TexelObservation(status, depth, u, v, depth_map, int(n_vis), int(n_occ))


def fuse_semantic_frame(
    store: SparseSemanticTexture,
    table: TexelTable,
    model: CameraModel,
    pose: np.ndarray,
    seg: SegmentationResult,
    params: FusionParams = FusionParams(),
    obs: TexelObservation | None = None,
) -> FrameFusionStats:
    """Fuse one segmentation into the store.

    Every visible texel reads the label and confidence at its nearest pixel
    and adds ``w * P*`` to that class and ``w`` to the texel weight, with
    ``w`` the distance fall-off of its camera depth.
    """
    if store.resolution != table.resolution:
        raise ValueError("store and texel table resolutions differ")
    if seg.shape != (model.height, model.width):
        raise ValueError("segmentation size does not match the camera")
    if obs is None:
        obs = observe(table, model, pose, params.bias)
    n = obs.n_visible
    texels = np.empty(n, dtype=np.int64)
    classes = np.empty(n, dtype=np.int64)
    w = np.empty(n)
    p = np.empty(n)
    K.collect_visible(
        obs.status, obs.u, obs.v, obs.depth, table.texel, seg.labels, seg.confidence,
        float(params.d_min), float(params.d_max), texels, classes, w, p,
    )
    store.observe(texels, classes, w, p)
    mixed = int((obs.status == K.STATUS_MIXED).sum())
    return FrameFusionStats(
        touched=n,
        occluded=obs.n_occluded,
        out_of_view=len(obs.status) - n - obs.n_occluded - mixed,
        mixed=mixed,
    )


def fuse_frames(store: SparseSemanticTexture, table: TexelTable, frames, params: FusionParams = FusionParams(), sweep_every: int = 1) -> list[FrameFusionStats]:
    """Fuse a sequence of frames carrying a ``segmentation``.

    A decommit sweep runs after every ``sweep_every`` frames (0 = only once
    at the end) and always after the last frame.
    """
    stats = []
    for k, frame in enumerate(frames, 1):
        if frame.segmentation is None:
            raise ValueError(f"frame {frame.id} has no segmentation")
        stats.append(fuse_semantic_frame(store, table, frame.model, frame.pose, frame.segmentation, params))
        if sweep_every and k % sweep_every == 0:
            store.decommit_sweep()
    if not sweep_every or len(stats) % sweep_every:
        store.decommit_sweep()
    return stats
