"""Resumable pipeline stages over a dataset and a work directory.

Every stage reads its inputs from the dataset and from artifacts earlier
stages left in the work directory, and writes its own artifacts there:

    estimate-normals  cloud.ply
    fuse              atlas.obj, semantic.sstx, color.bin, fuse.json
    propagate         propagation/iter_<k>/ (manifest, labels, report)
    evaluate          iou.json, iou.txt
    robustness        robustness.json
    export            export/ (OBJ, MTL, PNGs)
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .atlas import build_texel_table, export_textured_mesh, load_mesh, save_obj
from .camera import CameraFrame, save_trajectory
from .color import ColorTexture, fuse_color_frame
from .dataset import DataError, DatasetManifest, load_dataset, read_labels, read_probmap, read_rgb, save_palette, write_probmap
from .evaluation import evaluate_backprojection, robustness_sweep, single_frame_iou
from .labelprop import PropagationParams, emit_training_manifest, propagation_round, score_frames, select_frames
from .local_mesh import OrientedCloud, estimate_oriented_cloud, save_ply
from .scan import load_scan, save_scan
from .semantic import FusionParams, SegmentationResult, fuse_semantic_frame, observe
from .sparse import SparseSemanticTexture

log = logging.getLogger(__name__)

ATLAS = "atlas.obj"
CHECKPOINT = "semantic.sstx"
COLOR = "color.bin"
FUSE_INFO = "fuse.json"


class PreconditionError(DataError):
    """A stage was run before the stage that produces its inputs."""


@dataclass
class FuseSettings:
    texture_size: int = 4096
    page_size: int = 128
    decommit_threshold: float = 0.1
    d_min: float = 0.0
    d_max: float = 100.0
    sweep_every: int = 1
    color: bool = True

    @property
    def fusion(self) -> FusionParams:
        return FusionParams(self.d_min, self.d_max)


def _require(path: Path, stage: str) -> Path:
    if not path.exists():
        raise PreconditionError(f"missing {path.name} in {path.parent}; run '{stage}' first")
    return path


def load_frames(ds: DatasetManifest, segmentation_dir=None) -> list[CameraFrame]:
    """Camera frames carrying their segmentation.

    Segmentations at another size than the intrinsics get a rescaled camera.
    With ``segmentation_dir`` the probability maps are read from there
    instead, matched by file name.
    """
    frames = []
    for fe in ds.frames:
        src = fe.probmap if segmentation_dir is None else Path(segmentation_dir) / fe.probmap.name
        if not src.exists():
            raise DataError(f"frame {fe.id}: missing probability map {src}")
        try:
            seg = read_probmap(src)
        except DataError as exc:
            raise DataError(f"frame {fe.id}: {exc}") from exc
        model = ds.intrinsics
        h, w = seg.shape
        if (w, h) != (model.width, model.height):
            model = model.scaled(w, h)
        frames.append(CameraFrame(fe.id, model, ds.poses[fe.id], segmentation=seg))
    return frames


def load_gts(ds: DatasetManifest, frames):
    pairs = [(fr, read_labels(ds.frame(fr.id).gt)) for fr in frames if ds.frame(fr.id).gt is not None]
    for fr, gt in pairs:
        if gt.shape != (fr.model.height, fr.model.width):
            raise DataError(f"frame {fr.id}: ground truth size {gt.shape} differs from its segmentation")
    return [p[0] for p in pairs], [p[1] for p in pairs]


def _load_atlas(work: Path):
    mesh = load_mesh(_require(work / ATLAS, "fuse"))
    info = json.loads(_require(work / FUSE_INFO, "fuse").read_text(encoding="utf-8"))
    return mesh, FuseSettings(**info["settings"])


# --------------------------------------------------------------------------
# stages


def estimate_normals(ds: DatasetManifest, work, epsilon: float = 0.05, max_azimuth_gap: float | None = None) -> Path:
    """Oriented point cloud from every scan in the dataset's scan directory."""
    if ds.scans is None:
        raise PreconditionError("dataset config has no 'scans' directory")
    files = sorted(ds.scans.glob("*.npz"))
    if not files:
        raise DataError(f"no scans in {ds.scans}")
    clouds = [estimate_oriented_cloud(load_scan(f), epsilon, max_azimuth_gap) for f in files]
    merged = OrientedCloud(
        np.concatenate([c.positions for c in clouds]),
        np.concatenate([c.normals for c in clouds]),
        np.concatenate([c.provenance for c in clouds]),
    )
    work = Path(work)
    work.mkdir(parents=True, exist_ok=True)
    out = work / "cloud.ply"
    save_ply(out, merged)
    log.info("wrote %d oriented points from %d scans", len(merged), len(files))
    return out


def fuse(ds: DatasetManifest, work, settings: FuseSettings = FuseSettings()) -> SparseSemanticTexture:
    """Fuse every frame's segmentation (and RGB) into the mesh textures."""
    if ds.mesh is None:
        raise PreconditionError("dataset config has no 'mesh'")
    work = Path(work)
    work.mkdir(parents=True, exist_ok=True)
    mesh = load_mesh(ds.mesh, fallback_atlas=True, resolution=settings.texture_size)
    save_obj(work / ATLAS, mesh)
    # reload so this and every later stage see the identical mesh
    mesh = load_mesh(work / ATLAS)
    table = build_texel_table(mesh, settings.texture_size)
    frames = load_frames(ds)
    store = SparseSemanticTexture(settings.texture_size, ds.class_count, settings.page_size, settings.decommit_threshold)
    color = ColorTexture(settings.texture_size) if settings.color else None
    params = settings.fusion
    for k, fr in enumerate(frames, 1):
        obs = observe(table, fr.model, fr.pose, params.bias)
        fuse_semantic_frame(store, table, fr.model, fr.pose, fr.segmentation, params, obs)
        if color is not None:
            rgb = read_rgb(ds.frame(fr.id).rgb)
            model = fr.model
            if rgb.shape[:2] != (model.height, model.width):
                model = ds.intrinsics.scaled(rgb.shape[1], rgb.shape[0])
                fuse_color_frame(color, table, model, fr.pose, rgb)
            else:
                fuse_color_frame(color, table, model, fr.pose, rgb, obs)
        if settings.sweep_every and k % settings.sweep_every == 0:
            store.decommit_sweep()
    if not settings.sweep_every or len(frames) % settings.sweep_every:
        store.decommit_sweep()
    store.save(work / CHECKPOINT)
    if color is not None:
        color.save(work / COLOR)
    stats = store.memory_stats()
    info = {
        "settings": asdict(settings),
        "frames": [fr.id for fr in frames],
        "committed_pages": stats.committed_pages,
        "committed_fraction": stats.committed_fraction,
    }
    (work / FUSE_INFO).write_text(json.dumps(info, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return store


def propagate(
    ds: DatasetManifest,
    work,
    params: PropagationParams = PropagationParams(),
    iteration: int = 1,
    segmentation_dir=None,
):
    """One label-propagation round.

    Round 1 scores against the store written by ``fuse``.  Later rounds pass
    the retrained predictions in ``segmentation_dir`` and re-fuse them into
    a fresh store.
    """
    work = Path(work)
    mesh, settings = _load_atlas(work)
    ckpt = _require(work / CHECKPOINT, "fuse")
    table = build_texel_table(mesh, settings.texture_size)
    out = work / "propagation" / f"iter_{iteration}"
    rgb_paths = {fe.id: str(fe.rgb) for fe in ds.frames}
    params = PropagationParams(
        params.p_min, params.fraction, params.min_spacing, params.mode, params.best_bounds,
        settings.fusion, settings.page_size, settings.decommit_threshold, settings.sweep_every,
    )
    frames = load_frames(ds, segmentation_dir)
    if segmentation_dir is not None:
        report, _ = propagation_round(table, frames, ds.class_count, out, params, iteration, rgb_paths, ds.palette)
        reports, selection, manifest = report.reports, report.selection, report.manifest
    else:
        store = SparseSemanticTexture.load(ckpt)
        pgts, reports = score_frames(table, store, frames, params.p_min)
        selection = select_frames(reports, params.fraction, params.min_spacing, params.mode, params.best_bounds)
        manifest = emit_training_manifest(
            selection, pgts, rgb_paths, out, iteration, params.mode, params.fraction, ds.palette, params.p_min
        )
    summary = {
        "iteration": iteration,
        "mean_gamma": float(np.mean([r.gamma for r in reports])),
        "selection": selection,
        "frames": [
            {"id": r.frame, "gamma": r.gamma, "consistent_fraction": r.consistent_fraction, "evaluated": r.evaluated_pixels}
            for r in reports
        ],
    }
    (out / "report.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return manifest, summary


def evaluate(ds: DatasetManifest, work):
    """Back-projected IoU of the fused store over all frames with ground truth."""
    work = Path(work)
    mesh, settings = _load_atlas(work)
    store = SparseSemanticTexture.load(_require(work / CHECKPOINT, "fuse"))
    table = build_texel_table(mesh, settings.texture_size)
    frames, gts = load_gts(ds, load_frames(ds))
    if not frames:
        raise DataError("no frame has a ground-truth label image")
    names = ds.names_list()
    report = evaluate_backprojection(table, store, frames, gts, names)
    single = single_frame_iou([fr.segmentation.labels for fr in frames], gts, ds.class_count)
    payload = report.to_dict()
    payload["single_frame_mean_iou"] = single
    (work / "iou.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    text = report.table() + f"\n\nsingle-frame mean IoU: {single:.3f}\n"
    (work / "iou.txt").write_text(text, encoding="utf-8")
    return report, single


def robustness(ds: DatasetManifest, work, levels=(0.0, 0.25, 0.5, 0.75, 1.0), seed: int = 0):
    """IoU under increasing pose noise (fraction of 0.5 m and 5 degrees)."""
    work = Path(work)
    mesh, settings = _load_atlas(work)
    table = build_texel_table(mesh, settings.texture_size)
    frames, gts = load_gts(ds, load_frames(ds))
    if not frames:
        raise DataError("no frame has a ground-truth label image")
    series = robustness_sweep(
        table, frames, gts, ds.class_count, levels, seed, settings.fusion, settings.page_size,
        settings.decommit_threshold, ds.names_list(),
    )
    payload = {"seed": seed, "levels": [{"level": lvl, **rep.to_dict()} for lvl, rep in series]}
    (work / "robustness.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return series


def export(ds: DatasetManifest, work, out_dir=None) -> list[Path]:
    work = Path(work)
    mesh, settings = _load_atlas(work)
    store = SparseSemanticTexture.load(_require(work / CHECKPOINT, "fuse"))
    labels, _ = store.fused_planes()
    color = ColorTexture.load(work / COLOR).image() if (work / COLOR).exists() else None
    return export_textured_mesh(mesh, out_dir or work / "export", labels, color, ds.palette)


# --------------------------------------------------------------------------
# synthetic datasets


def write_synthetic_dataset(
    out_dir,
    kind: str = "street",
    width: int = 320,
    height: int = 240,
    n_frames: int | None = None,
    noise: float = 0.1,
    corrupt_frames=(),
    scans: int = 2,
    seed: int = 0,
    noise_cell: int = 1,
) -> Path:
    """Write a complete dataset for the street or room fixture; returns the config path.

    Predictions are the ground truth with a ``noise`` fraction of pixels
    relabelled, in ``noise_cell``-sized blocks; frames listed in
    ``corrupt_frames`` are relabelled entirely.
    """
    from PIL import Image

    from . import synthetic as S

    out = Path(out_dir)
    for sub in ("rgb", "seg", "gt", "scans"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    if kind == "street":
        scene = S.street_scene(seed=seed)
        poses = S.street_trajectory(n=n_frames or 24)
        sensors = [np.array([[1, 0, 0, x], [0, 1, 0, 0], [0, 0, 1, 1.8], [0, 0, 0, 1.0]]) for x in np.linspace(5, 35, scans)]
    elif kind == "room":
        scene = S.box_room()
        poses = S.room_trajectory(n=n_frames or 20, seed=seed)
        sensors = [np.array([[1, 0, 0, x], [0, 1, 0, 1.2], [0, 0, 1, 1.5], [0, 0, 0, 1.0]]) for x in np.linspace(1.2, 4.8, scans)]
    else:
        raise ValueError(f"unknown fixture {kind!r}")
    cam = S.default_camera(width, height)
    C = scene.class_count

    lines = [f"v {p[0]:.17g} {p[1]:.17g} {p[2]:.17g}" for p in scene.positions]
    lines += [f"f {a} {b} {c}" for a, b, c in scene.faces + 1]
    (out / "mesh.obj").write_text("\n".join(lines) + "\n", encoding="utf-8")
    save_palette(out / "palette.csv", scene.palette, dict(enumerate(scene.class_names)))
    save_trajectory(out / "trajectory.txt", dict(enumerate(poses)))
    for k, T in enumerate(sensors):
        save_scan(out / "scans" / f"{k:04d}.npz", S.simulate_scan(scene.positions, scene.faces, T, rings=16, columns=720, timestamp=float(k)))

    toml = [
        f"class_count = {C}",
        'trajectory = "trajectory.txt"',
        'palette = "palette.csv"',
        'mesh = "mesh.obj"',
        'scans = "scans"',
        "",
        "[intrinsics]",
        f"fx = {float(cam.fx)!r}",
        f"fy = {float(cam.fy)!r}",
        f"cx = {float(cam.cx)!r}",
        f"cy = {float(cam.cy)!r}",
        f"width = {cam.width}",
        f"height = {cam.height}",
    ]
    for k, T in enumerate(poses):
        gt = S.render_labels(scene, cam, T)
        rate = 1.0 if k in corrupt_frames else noise
        labels, conf = S.noisy_segmentation(gt, C, rate, rng, cell=noise_cell)
        name = f"{k:06d}"
        Image.fromarray(S.render_rgb(scene, cam, T)).save(out / "rgb" / f"{name}.png")
        Image.fromarray(gt, mode="L").save(out / "gt" / f"{name}.png")
        write_probmap(out / "seg" / f"{name}.sprb", SegmentationResult(labels, conf), class_count=C)
        toml += ["", "[[frames]]", f"id = {k}", f'rgb = "rgb/{name}.png"', f'probmap = "seg/{name}.sprb"', f'gt = "gt/{name}.png"']
    cfg = out / "dataset.toml"
    cfg.write_text("\n".join(toml) + "\n", encoding="utf-8")
    return cfg


def run_all(config, work, settings: FuseSettings = FuseSettings(), seed: int = 0, levels=(0.0, 1.0)):
    """Every stage in order; returns the evaluation report."""
    ds = load_dataset(config)
    if ds.scans is not None:
        estimate_normals(ds, work)
    fuse(ds, work, settings)
    propagate(ds, work)
    report, _ = evaluate(ds, work)
    robustness(ds, work, levels, seed)
    export(ds, work)
    return report


__all__ = [
    "FuseSettings",
    "PreconditionError",
    "estimate_normals",
    "evaluate",
    "export",
    "fuse",
    "load_frames",
    "propagate",
    "robustness",
    "run_all",
    "write_synthetic_dataset",
]
