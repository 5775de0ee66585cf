"""On-disk dataset layout: config file, probability maps, palettes, images."""

from __future__ import annotations

import csv
import struct
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .camera import CameraModel, load_trajectory
from .semantic import SegmentationResult, argmax_reduce

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

PROBMAP_MAGIC = b"SPRB"
PROBMAP_VERSION = 1
DENSE = 0
ARGMAX_PAIR = 1
_PROBMAP_HEADER = struct.Struct("<4sHBxIII")
_PAIR = np.dtype([("label", "<u2"), ("confidence", "<f4")])


class DataError(Exception):
    """Malformed or inconsistent input data."""


# --------------------------------------------------------------------------
# probability maps


@dataclass(frozen=True)
class ProbMapHeader:
    encoding: int
    width: int
    height: int
    class_count: int


def write_probmap(path, seg: SegmentationResult | None = None, dense: np.ndarray | None = None, class_count: int | None = None) -> None:
    """Write either a dense ``(H, W, C)`` map or an argmax pair map."""
    if (seg is None) == (dense is None):
        raise ValueError("pass exactly one of seg or dense")
    with open(path, "wb") as fh:
        if dense is not None:
            h, w, c = dense.shape
            fh.write(_PROBMAP_HEADER.pack(PROBMAP_MAGIC, PROBMAP_VERSION, DENSE, w, h, c))
            fh.write(np.ascontiguousarray(dense, dtype="<f4").tobytes())
        else:
            if class_count is None:
                raise ValueError("class_count is required for argmax pair maps")
            h, w = seg.shape
            rec = np.empty((h, w), dtype=_PAIR)
            rec["label"] = seg.labels
            rec["confidence"] = seg.confidence
            fh.write(_PROBMAP_HEADER.pack(PROBMAP_MAGIC, PROBMAP_VERSION, ARGMAX_PAIR, w, h, class_count))
            fh.write(rec.tobytes())


def read_probmap_header(path) -> ProbMapHeader:
    with open(path, "rb") as fh:
        raw = fh.read(_PROBMAP_HEADER.size)
    if len(raw) < _PROBMAP_HEADER.size:
        raise DataError(f"{path}: truncated probability map header")
    magic, version, enc, w, h, c = _PROBMAP_HEADER.unpack(raw)
    if magic != PROBMAP_MAGIC:
        raise DataError(f"{path}: not a probability map")
    if version != PROBMAP_VERSION:
        raise DataError(f"{path}: unsupported probability map version {version}")
    if enc not in (DENSE, ARGMAX_PAIR):
        raise DataError(f"{path}: unknown encoding {enc}")
    return ProbMapHeader(enc, w, h, c)


def read_probmap(path) -> SegmentationResult:
    """Load a map as best label + confidence (dense maps are reduced by argmax)."""
    hdr = read_probmap_header(path)
    raw = Path(path).read_bytes()[_PROBMAP_HEADER.size :]
    if hdr.encoding == DENSE:
        n = hdr.width * hdr.height * hdr.class_count
        if len(raw) != 4 * n:
            raise DataError(f"{path}: payload size does not match the header")
        dense = np.frombuffer(raw, dtype="<f4").reshape(hdr.height, hdr.width, hdr.class_count)
        return argmax_reduce(dense)
    if len(raw) != _PAIR.itemsize * hdr.width * hdr.height:
        raise DataError(f"{path}: payload size does not match the header")
    rec = np.frombuffer(raw, dtype=_PAIR).reshape(hdr.height, hdr.width)
    seg = SegmentationResult(rec["label"].astype(np.uint16), rec["confidence"].astype(np.float32))
    if seg.labels.size and seg.labels.max() >= hdr.class_count:
        raise DataError(f"{path}: label outside the class range")
    return seg


# --------------------------------------------------------------------------
# palettes and images


def load_palette(path):
    """CSV ``class_id,r,g,b,name`` -> ``({id: (r, g, b)}, {id: name})``."""
    colours, names = {}, {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.reader(fh):
            if not row or row[0].strip().startswith("#") or row[0].strip() == "class_id":
                continue
            try:
                cid, r, g, b = (int(x) for x in row[:4])
            except ValueError as exc:
                raise DataError(f"{path}: bad palette row {row}") from exc
            colours[cid] = (r, g, b)
            names[cid] = row[4].strip() if len(row) > 4 else str(cid)
    return colours, names


def save_palette(path, colours: dict, names: dict | None = None) -> None:
    names = names or {}
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class_id", "r", "g", "b", "name"])
        for cid in sorted(colours):
            w.writerow([cid, *colours[cid], names.get(cid, str(cid))])


def read_rgb(path) -> np.ndarray:
    with Image.open(path) as img:
        return np.array(img.convert("RGB"), dtype=np.uint8)


def read_labels(path) -> np.ndarray:
    """Label image stored as 8-bit greyscale or palette PNG."""
    with Image.open(path) as img:
        if img.mode not in ("L", "P"):
            raise DataError(f"{path}: label images must be 8-bit single channel")
        return np.array(img, dtype=np.uint8)


# --------------------------------------------------------------------------
# manifest


@dataclass(frozen=True)
class FrameEntry:
    id: int
    rgb: Path
    probmap: Path
    gt: Path | None = None


@dataclass
class DatasetManifest:
    root: Path
    frames: list
    trajectory: Path
    intrinsics: CameraModel
    class_count: int
    palette: dict
    class_names: dict = field(default_factory=dict)
    mesh: Path | None = None
    scans: Path | None = None
    poses: dict = field(default_factory=dict, repr=False)
    fusion: dict = field(default_factory=dict)

    def frame(self, fid: int) -> FrameEntry:
        for fr in self.frames:
            if fr.id == fid:
                return fr
        raise KeyError(fid)

    def names_list(self) -> list:
        return [self.class_names.get(c, str(c)) for c in range(self.class_count)]


def _existing(root: Path, value, what: str) -> Path:
    p = (root / str(value)).resolve() if not Path(str(value)).is_absolute() else Path(value)
    if not p.exists():
        raise DataError(f"{what}: missing file {p}")
    return p


def load_dataset(path) -> DatasetManifest:
    """Read and validate a TOML dataset description.

    Paths are relative to the config file.  Every referenced file must
    exist, frame ids must be unique and have a pose, and every probability
    map must match ``class_count``.
    """
    path = Path(path)
    try:
        cfg = tomllib.loads(path.read_text(encoding="utf-8"))
    except (OSError, tomllib.TOMLDecodeError) as exc:
        raise DataError(f"{path}: {exc}") from exc
    root = path.parent.resolve()
    try:
        C = int(cfg["class_count"])
        intr = cfg["intrinsics"]
        model = CameraModel(
            float(intr["fx"]), float(intr["fy"]), float(intr["cx"]), float(intr["cy"]), int(intr["width"]), int(intr["height"])
        )
        raw_frames = cfg["frames"]
        traj = _existing(root, cfg["trajectory"], "trajectory")
    except KeyError as exc:
        raise DataError(f"{path}: missing key {exc}") from exc
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from exc
    if not 0 < C < 255:
        raise DataError(f"{path}: class_count must be in [1, 254]")
    palette, names = ({}, {})
    if "palette" in cfg:
        palette, names = load_palette(_existing(root, cfg["palette"], "palette"))
    mesh = _existing(root, cfg["mesh"], "mesh") if "mesh" in cfg else None
    scans = _existing(root, cfg["scans"], "scans") if "scans" in cfg else None
    try:
        poses = load_trajectory(traj)
    except ValueError as exc:
        raise DataError(str(exc)) from exc

    frames, seen = [], set()
    for entry in raw_frames:
        if "id" not in entry:
            raise DataError(f"{path}: frame entry without id")
        fid = int(entry["id"])
        tag = f"frame {fid}"
        if fid in seen:
            raise DataError(f"{tag}: duplicate frame id")
        seen.add(fid)
        for key in ("rgb", "probmap"):
            if key not in entry:
                raise DataError(f"{tag}: missing '{key}'")
        fe = FrameEntry(
            fid,
            _existing(root, entry["rgb"], f"{tag} rgb"),
            _existing(root, entry["probmap"], f"{tag} probmap"),
            _existing(root, entry["gt"], f"{tag} gt") if "gt" in entry else None,
        )
        try:
            hdr = read_probmap_header(fe.probmap)
        except DataError as exc:
            raise DataError(f"{tag}: {exc}") from exc
        if hdr.class_count != C:
            raise DataError(f"{tag}: probability map has {hdr.class_count} classes, dataset has {C}")
        if fid not in poses:
            raise DataError(f"{tag}: no pose in {traj.name}")
        frames.append(fe)
    frames.sort(key=lambda f: f.id)
    fusion = dict(cfg.get("fusion", {}))
    unknown = set(fusion) - {"d_min", "d_max"}
    if unknown:
        raise DataError(f"{path}: unknown [fusion] keys {sorted(unknown)}")
    return DatasetManifest(root, frames, traj, model, C, palette, names, mesh, scans, poses, fusion)
