"""Pseudo ground truth from the fused mesh, frame scoring and retraining sets.

One propagation round fuses every frame into a fresh store, renders the
fused labels back into each view, scores how strongly each frame's own
segmentation disagrees with them and writes the chosen frames as a
training manifest.  The retraining itself happens outside this package;
its new predictions feed the next round.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .atlas import UNLABELED, TexelTable, palette_image
from .camera import CameraModel, DepthMap, render_depth
from .semantic import FusionParams, SegmentationResult, fuse_frames
from .sparse import SparseSemanticTexture

log = logging.getLogger(__name__)

MIX_NOTE = "mix pseudo-labelled frames with the original training set to avoid forgetting"


@dataclass
class PseudoGroundTruth:
    """Fused labels rendered into one view.

    ``labels`` is ``(H, W)`` uint8 with UNLABELED where nothing confident
    was fused; ``texels`` holds the flat texel under each pixel (-1 when the
    pixel misses the mesh).
    """

    labels: np.ndarray
    source_frame: int
    p_min: float
    texels: np.ndarray

    @property
    def labeled(self) -> np.ndarray:
        return self.labels != UNLABELED


@dataclass(frozen=True)
class InconsistencyReport:
    frame: int
    gamma: float
    consistent_fraction: float | None
    evaluated_pixels: int

    @property
    def inconsistent_fraction(self) -> float | None:
        if self.consistent_fraction is None:
            return None
        return 1.0 - self.consistent_fraction


def pixel_texels(table: TexelTable, depth_map: DepthMap) -> np.ndarray:
    """Texel under every pixel of a rendered view (-1 where nothing was hit)."""
    mesh = table.mesh
    hit = depth_map.hit
    out = np.full(depth_map.face.shape, -1, dtype=np.int64)
    f = depth_map.face[hit]
    b = depth_map.bary[hit].astype(np.float64)
    tri = mesh.uvs[mesh.faces[f]]
    uv = (1.0 - b[:, 0] - b[:, 1])[:, None] * tri[:, 0] + b[:, 0:1] * tri[:, 1] + b[:, 1:2] * tri[:, 2]
    out[hit] = table.texel_at(uv)
    return out


def render_pseudo_gt(
    table: TexelTable,
    store: SparseSemanticTexture,
    model: CameraModel,
    pose: np.ndarray,
    p_min: float = 0.8,
    frame_id: int = -1,
    planes=None,
) -> PseudoGroundTruth:
    """Render the fused argmax into a view, keeping only confident texels.

    ``planes`` may carry a precomputed :meth:`SparseSemanticTexture.fused_planes`
    result when rendering many views from a static store.
    """
    if not 0.0 <= p_min <= 1.0:
        raise ValueError("p_min must lie in [0, 1]")
    mesh = table.mesh
    dm = render_depth(mesh.positions, mesh.faces, model, pose)
    texels = pixel_texels(table, dm)
    if planes is None:
        planes = store.fused_planes()
    fused = planes[0].ravel()
    labels = np.full(texels.shape, UNLABELED, dtype=np.uint8)
    sel = texels >= 0
    t = texels[sel]
    lab = fused[t]
    ok = lab != UNLABELED
    # gate on the exact S/W the store reports, not the float32 plane
    s = store.gather(t[ok], lab[ok].astype(np.int64)).astype(np.float64)
    w = store.weight.ravel()[t[ok]].astype(np.float64)
    ok[ok] = s / w >= p_min
    lab = np.where(ok, lab, UNLABELED)
    labels[sel] = lab
    return PseudoGroundTruth(labels, frame_id, p_min, texels)


def inconsistency(seg: SegmentationResult, pgt: PseudoGroundTruth) -> InconsistencyReport:
    """Confidence-weighted disagreement between a frame's prediction and the fused labels."""
    if seg.shape != pgt.labels.shape:
        raise ValueError("segmentation and pseudo ground truth differ in size")
    m = pgt.labeled
    n = int(m.sum())
    if n == 0:
        return InconsistencyReport(pgt.source_frame, 0.0, None, 0)
    differ = seg.labels[m].astype(np.int64) != pgt.labels[m].astype(np.int64)
    gamma = float(seg.confidence[m][differ].astype(np.float64).sum())
    return InconsistencyReport(pgt.source_frame, gamma, 1.0 - differ.sum() / n, n)


def select_frames(
    reports: list[InconsistencyReport],
    fraction: float,
    min_spacing: int = 10,
    mode: str = "worse",
    best_bounds: tuple[float, float] = (0.02, 1.0),
) -> list[int]:
    """Pick frames for retraining.

    ``worse`` takes the most inconsistent frames; ``best`` the least
    inconsistent among frames whose inconsistent-pixel share lies within
    ``best_bounds``.  Frames closer than ``min_spacing`` ids to an already
    chosen frame are skipped.  At most ``ceil(fraction * len(reports))``
    ids are returned, in selection order.
    """
    if not reports:
        raise ValueError("no frames to select from")
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must lie in (0, 1]")
    if mode not in ("worse", "best"):
        raise ValueError(f"unknown selection mode {mode!r}")
    target = math.ceil(fraction * len(reports))
    if mode == "worse":
        cands = sorted(reports, key=lambda r: (-r.gamma, r.frame))
    else:
        lo, hi = best_bounds
        cands = [r for r in reports if r.inconsistent_fraction is not None and lo <= r.inconsistent_fraction <= hi]
        cands.sort(key=lambda r: (r.gamma, r.frame))
    chosen: list[int] = []
    for r in cands:
        if len(chosen) == target:
            break
        if all(abs(r.frame - c) >= min_spacing for c in chosen):
            chosen.append(r.frame)
    if not chosen:
        log.warning("no frame passed the selection filters")
    return chosen


def write_label_png(path, labels: np.ndarray, palette: dict | None = None) -> None:
    palette_image(labels, palette or {}).save(path)


def read_label_png(path) -> np.ndarray:
    with Image.open(path) as img:
        return np.array(img, dtype=np.uint8)


def emit_training_manifest(
    selection: list[int],
    pseudo_gt: dict,
    rgb_paths: dict,
    out_dir,
    iteration: int = 1,
    mode: str = "worse",
    fraction: float = 0.05,
    palette: dict | None = None,
    p_min: float | None = None,
) -> Path:
    """Write one indexed label PNG per selected frame plus ``manifest.txt``.

    The manifest starts with a single-line JSON header followed by
    ``<rgb_path>\\t<label_path>`` lines; label paths are relative to
    ``out_dir``.
    """
    out = Path(out_dir)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    missing = [f for f in selection if f not in pseudo_gt]
    if missing:
        raise KeyError(f"no pseudo ground truth for frames {missing}")
    if p_min is None:
        p_mins = {pseudo_gt[f].p_min for f in selection}
        p_min = p_mins.pop() if len(p_mins) == 1 else None
    header = {
        "iteration": iteration,
        "mode": mode,
        "fraction": fraction,
        "p_min": p_min,
        "frames": len(selection),
        "ignore_label": UNLABELED,
        "training_mix": MIX_NOTE,
    }
    lines = [json.dumps(header, sort_keys=True, separators=(",", ":"))]
    for fid in selection:
        rel = f"labels/{fid:06d}.png"
        write_label_png(out / rel, pseudo_gt[fid].labels, palette)
        lines.append(f"{rgb_paths[fid]}\t{rel}")
    path = out / "manifest.txt"
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def read_training_manifest(path):
    """Returns ``(header dict, [(rgb_path, label_path), ...])``."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    header = json.loads(lines[0])
    pairs = [tuple(line.split("\t")) for line in lines[1:] if line]
    return header, pairs


@dataclass(frozen=True)
class PropagationParams:
    p_min: float = 0.8
    fraction: float = 0.05
    min_spacing: int = 10
    mode: str = "worse"
    best_bounds: tuple = (0.02, 1.0)
    fusion: FusionParams = FusionParams()
    page_size: int = 128
    decommit_threshold: float = 0.1
    sweep_every: int = 1


@dataclass
class RoundReport:
    iteration: int
    reports: list
    selection: list
    manifest: Path
    checkpoint: Path

    @property
    def mean_gamma(self) -> float:
        return float(np.mean([r.gamma for r in self.reports]))


def score_frames(table: TexelTable, store: SparseSemanticTexture, frames, p_min: float):
    """Pseudo ground truth and inconsistency report for every frame."""
    planes = store.fused_planes()
    pgts, reports = {}, []
    for fr in frames:
        pgt = render_pseudo_gt(table, store, fr.model, fr.pose, p_min, fr.id, planes)
        pgts[fr.id] = pgt
        reports.append(inconsistency(fr.segmentation, pgt))
    return pgts, reports


def propagation_round(
    table: TexelTable,
    frames,
    class_count: int,
    out_dir,
    params: PropagationParams = PropagationParams(),
    iteration: int = 1,
    rgb_paths: dict | None = None,
    palette: dict | None = None,
):
    """Fuse, score, select and write the retraining set for one iteration.

    ``frames`` are :class:`CameraFrame` objects whose ``segmentation`` holds
    the current predictor output.  Fusion always starts from an empty store.
    Returns ``(RoundReport, store)``.
    """
    frames = list(frames)
    if not frames:
        raise ValueError("a propagation round needs at least one frame")
    store = SparseSemanticTexture(table.resolution, class_count, params.page_size, params.decommit_threshold)
    fuse_frames(store, table, frames, params.fusion, params.sweep_every)
    pgts, reports = score_frames(table, store, frames, params.p_min)
    selection = select_frames(reports, params.fraction, params.min_spacing, params.mode, params.best_bounds)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rgb_paths = rgb_paths or {fr.id: f"frame_{fr.id:06d}" for fr in frames}
    manifest = emit_training_manifest(
        selection, pgts, rgb_paths, out, iteration, params.mode, params.fraction, palette, params.p_min
    )
    checkpoint = out / "semantic.sstx"
    store.save(checkpoint)
    return RoundReport(iteration, reports, selection, manifest, checkpoint), store
