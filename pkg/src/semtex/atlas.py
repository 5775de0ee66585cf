"""UV-parameterized global mesh, fallback atlas and the texel table.

The texel table is the bridge between texture space and the scene: for
every texel whose centre falls inside a UV triangle it records the owning
face and the barycentric coordinates of that centre, from which the 3D
surface point and interpolated normal follow.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
from PIL import Image

from . import _kernels as K

log = logging.getLogger(__name__)

UNLABELED = 255


class MeshError(ValueError):
    """Invalid mesh file or mesh contents."""


@dataclass
class TexturedMesh:
    positions: np.ndarray
    uvs: np.ndarray
    faces: np.ndarray
    normals: np.ndarray | None = None
    chart_of_face: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.positions = np.ascontiguousarray(self.positions, dtype=np.float64)
        self.uvs = np.ascontiguousarray(self.uvs, dtype=np.float64)
        self.faces = np.ascontiguousarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.normals is None:
            self.normals = area_weighted_normals(self.positions, self.faces)
        self.normals = np.ascontiguousarray(self.normals, dtype=np.float64)

    @property
    def n_vertices(self) -> int:
        return len(self.positions)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def validate(self) -> None:
        if self.uvs.shape != (self.n_vertices, 2):
            raise MeshError("every vertex needs a UV coordinate")
        if np.any(self.uvs < 0.0) or np.any(self.uvs > 1.0) or not np.all(np.isfinite(self.uvs)):
            raise MeshError("UV coordinates outside [0, 1]^2")
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= self.n_vertices):
            raise MeshError("face index out of range")
        if np.any((self.faces[:, 0] == self.faces[:, 1]) | (self.faces[:, 1] == self.faces[:, 2]) | (self.faces[:, 0] == self.faces[:, 2])):
            raise MeshError("face references a vertex twice")
        lens = np.linalg.norm(self.normals, axis=1)
        if np.any(np.abs(lens - 1.0) > 1e-6):
            raise MeshError("vertex normals must be unit length")
        _warn_non_manifold(self.faces)


def _warn_non_manifold(faces: np.ndarray) -> None:
    if not len(faces):
        return
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    e.sort(axis=1)
    _, counts = np.unique(e, axis=0, return_counts=True)
    bad = int((counts > 2).sum())
    if bad:
        log.warning("mesh has %d non-manifold edges", bad)


def area_weighted_normals(positions: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Vertex normals from area-weighted face normals (unweighted cross products)."""
    acc = np.zeros_like(positions, dtype=np.float64)
    if len(faces):
        p = positions[faces]
        n = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])  # |n| = 2 * area
        for k in range(3):
            np.add.at(acc, faces[:, k], n)
    norm = np.linalg.norm(acc, axis=1, keepdims=True)
    out = np.zeros_like(acc)
    ok = norm[:, 0] > 0
    out[ok] = acc[ok] / norm[ok]
    out[~ok] = (0.0, 0.0, 1.0)
    return out


# --------------------------------------------------------------------------
# OBJ interchange


def _parse_obj(path):
    v, vt, vn, corners = [], [], [], []
    mtllib = None
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            tag = parts[0]
            if tag == "v":
                v.append([float(x) for x in parts[1:4]])
            elif tag == "vt":
                vt.append([float(x) for x in parts[1:3]])
            elif tag == "vn":
                vn.append([float(x) for x in parts[1:4]])
            elif tag == "f":
                refs = []
                for token in parts[1:]:
                    fields = token.split("/")
                    idx = [int(x) if x else 0 for x in fields] + [0] * (3 - len(fields))
                    refs.append(idx[:3])
                for k in range(1, len(refs) - 1):  # fan-triangulate polygons
                    corners.append([refs[0], refs[k], refs[k + 1]])
            elif tag == "mtllib":
                mtllib = parts[1]
    return (
        np.array(v, dtype=np.float64).reshape(-1, 3),
        np.array(vt, dtype=np.float64).reshape(-1, 2),
        np.array(vn, dtype=np.float64).reshape(-1, 3),
        np.array(corners, dtype=np.int64).reshape(-1, 3, 3),
        mtllib,
    )


def _resolve(idx, n):
    # OBJ indices are 1-based; negatives count from the end
    return np.where(idx < 0, n + idx, idx - 1)


def load_mesh(path, fallback_atlas: bool = False, resolution: int = 4096) -> TexturedMesh:
    """Load an OBJ mesh and validate it.

    Vertices are split wherever one position carries several UVs (seams).
    Missing normals are recomputed by area weighting.  A mesh without UVs is
    an error unless ``fallback_atlas`` is set, in which case a chart atlas is
    generated for ``resolution``.
    """
    path = Path(path)
    if not path.exists():
        raise MeshError(f"mesh file not found: {path}")
    v, vt, vn, corners, _ = _parse_obj(path)
    if not len(corners):
        raise MeshError(f"{path}: no faces")
    vi = _resolve(corners[:, :, 0], len(v))
    has_uv = len(vt) > 0 and np.all(corners[:, :, 1] != 0)
    has_n = len(vn) > 0 and np.all(corners[:, :, 2] != 0)
    if not has_uv:
        if not fallback_atlas:
            raise MeshError(f"{path}: mesh has no UV coordinates and fallback atlas is disabled")
        log.info("%s: no UVs, generating fallback atlas", path)
        return generate_uv_atlas(v, vi, resolution)
    ti = _resolve(corners[:, :, 1], len(vt))
    ni = _resolve(corners[:, :, 2], len(vn)) if has_n else None
    if len(v) == len(vt) and np.array_equal(vi, ti) and (ni is None or np.array_equal(vi, ni)):
        positions, uvs, faces = v, vt, vi
        normals = vn if ni is not None else None
    else:
        keys = np.stack([vi.ravel(), ti.ravel()] + ([ni.ravel()] if ni is not None else []), axis=1)
        uniq, first, inverse = np.unique(keys, axis=0, return_index=True, return_inverse=True)
        # number new vertices by first appearance for a stable order
        order = np.argsort(first, kind="stable")
        rank = np.empty_like(order)
        rank[order] = np.arange(len(order))
        uniq = uniq[order]
        faces = rank[inverse.ravel()].reshape(-1, 3)
        positions, uvs = v[uniq[:, 0]], vt[uniq[:, 1]]
        normals = vn[uniq[:, 2]] if ni is not None else None
    if normals is not None:
        lens = np.linalg.norm(normals, axis=1, keepdims=True)
        normals = np.where(lens > 0, normals / np.where(lens > 0, lens, 1.0), 0.0)
        if np.any(lens[:, 0] == 0):
            normals = None
    mesh = TexturedMesh(positions, uvs, faces, normals)
    mesh.validate()
    return mesh


def save_obj(path, mesh: TexturedMesh, mtllib: str | None = None, material: str | None = None) -> None:
    path = Path(path)
    lines = ["# semtex textured mesh"]
    if mtllib:
        lines.append(f"mtllib {mtllib}")
    lines += [f"v {p[0]:.17g} {p[1]:.17g} {p[2]:.17g}" for p in mesh.positions]
    lines += [f"vt {t[0]:.17g} {t[1]:.17g}" for t in mesh.uvs]
    lines += [f"vn {n[0]:.17g} {n[1]:.17g} {n[2]:.17g}" for n in mesh.normals]
    if material:
        lines.append(f"usemtl {material}")
    f1 = mesh.faces + 1
    lines += [f"f {a}/{a}/{a} {b}/{b}/{b} {c}/{c}/{c}" for a, b, c in f1]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


# --------------------------------------------------------------------------
# Fallback atlas


def _plane_basis(n):
    a = np.array([1.0, 0.0, 0.0]) if abs(n[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    t1 = np.cross(n, a)
    t1 /= np.linalg.norm(t1)
    return t1, np.cross(n, t1)


def _tri_overlap(a: np.ndarray, b: np.ndarray, eps: float) -> bool:
    """Separating-axis test for open 2D triangles (shared edges don't count)."""
    for tri in (a, b):
        for k in range(3):
            e = tri[(k + 1) % 3] - tri[k]
            axis = np.array([-e[1], e[0]])
            pa, pb = a @ axis, b @ axis
            tol = eps * (np.linalg.norm(axis) + 1e-300)
            if pa.max() <= pb.min() + tol or pb.max() <= pa.min() + tol:
                return False
    return True


@dataclass
class _Chart:
    faces: list
    normal: np.ndarray
    basis: tuple
    coords: dict = field(default_factory=dict)  # face -> (3, 2) projected triangle


def _grow_charts(positions, faces, max_angle_deg):
    p = positions[faces]
    fn = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
    area2 = np.linalg.norm(fn, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        fn = fn / area2[:, None]
    cos_max = np.cos(np.radians(max_angle_deg))

    edge_faces: dict = {}
    for f, tri in enumerate(faces.tolist()):
        for k in range(3):
            e = (min(tri[k], tri[(k + 1) % 3]), max(tri[k], tri[(k + 1) % 3]))
            edge_faces.setdefault(e, []).append(f)
    neighbours = [[] for _ in range(len(faces))]
    for fs in edge_faces.values():
        for f in fs:
            neighbours[f].extend(g for g in fs if g != f)

    assigned = np.full(len(faces), -1, dtype=np.int64)
    charts = []
    # seed from the largest faces first; ties by index
    for seed in np.lexsort((np.arange(len(faces)), -area2)):
        if assigned[seed] >= 0:
            continue
        n = fn[seed] if area2[seed] > 0 else np.array([0.0, 0.0, 1.0])
        basis = _plane_basis(n)
        chart = _Chart([], n, basis)
        cid = len(charts)
        queue = deque([seed])
        assigned[seed] = cid
        while queue:
            f = queue.popleft()
            tri2d = np.stack([p[f] @ basis[0], p[f] @ basis[1]], axis=1)
            chart.faces.append(f)
            chart.coords[f] = tri2d
            for g in neighbours[f]:
                if assigned[g] >= 0 or area2[g] == 0 or fn[g] @ n < cos_max:
                    continue
                cand = np.stack([p[g] @ basis[0], p[g] @ basis[1]], axis=1)
                lo, hi = cand.min(0), cand.max(0)
                clash = False
                for h, other in chart.coords.items():
                    if np.any(other.max(0) < lo) or np.any(other.min(0) > hi):
                        continue
                    if _tri_overlap(cand, other, 1e-9):
                        clash = True
                        break
                if clash:
                    continue
                assigned[g] = cid
                # reserve the slot now so a later face cannot overlap it either
                chart.coords[g] = cand
                queue.append(g)
        charts.append(chart)
    return charts


def _shelf_pack(sizes, width, gutter):
    """Place (w, h) rectangles on shelves; returns offsets or None if too tall."""
    order = sorted(range(len(sizes)), key=lambda i: (-sizes[i][1], -sizes[i][0], i))
    offsets = [None] * len(sizes)
    x = y = gutter
    shelf_h = 0
    for i in order:
        w, h = sizes[i]
        if w + 2 * gutter > width:
            return None
        if x + w + gutter > width:
            x = gutter
            y += shelf_h + gutter
            shelf_h = 0
        offsets[i] = (x, y)
        x += w + gutter
        shelf_h = max(shelf_h, h)
    if y + shelf_h + gutter > width:
        return None
    return offsets


def generate_uv_atlas(positions, faces, resolution: int, gutter: int = 2, max_angle_deg: float = 30.0) -> TexturedMesh:
    """Chart atlas by normal-cone region growing, planar projection and shelf packing.

    Charts are grown over edge-adjacent faces whose normals stay within
    ``max_angle_deg`` of the seed face and whose projections do not overlap
    the chart so far.  The common texels-per-meter scale is the largest that
    packs every chart with at least ``gutter`` empty texels between charts.
    """
    positions = np.asarray(positions, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    charts = _grow_charts(positions, faces, max_angle_deg)

    boxes = []
    for ch in charts:
        pts = np.concatenate(list(ch.coords.values()))
        lo = pts.min(0)
        boxes.append((lo, pts.max(0) - lo))
    extents = np.array([b[1] for b in boxes])

    def sizes_at(scale):
        return [(int(np.ceil(w * scale)) + 1, int(np.ceil(h * scale)) + 1) for w, h in extents]

    max_extent = max(float(extents.max()), 1e-12)
    lo_s, hi_s = 0.0, resolution / max_extent
    best = None
    for _ in range(60):
        mid = 0.5 * (lo_s + hi_s)
        packed = _shelf_pack(sizes_at(mid), resolution, gutter)
        if packed is None:
            hi_s = mid
        else:
            lo_s, best = mid, packed
    if best is None:
        best = _shelf_pack(sizes_at(0.0), resolution, gutter)
        if best is None:
            raise MeshError("too many charts to pack at this texture resolution")
    scale = lo_s

    new_pos, new_uv, new_faces = [], [], np.empty_like(faces)
    vid = 0
    for ch, (lo, _), off in zip(charts, boxes, best):
        remap = {}
        for f in ch.faces:
            for k, v in enumerate(faces[f].tolist()):
                if v not in remap:
                    remap[v] = vid
                    vid += 1
                    q = positions[v]
                    xy = np.array([q @ ch.basis[0], q @ ch.basis[1]])
                    # half-texel inset keeps chart content inside its rectangle
                    new_uv.append((np.asarray(off) + 0.5 + (xy - lo) * scale) / resolution)
                    new_pos.append(q)
                new_faces[f, k] = remap[v]
    chart_of_face = np.empty(len(faces), dtype=np.int64)
    for cid, ch in enumerate(charts):
        chart_of_face[ch.faces] = cid
    return TexturedMesh(np.array(new_pos), np.clip(np.array(new_uv), 0.0, 1.0), new_faces, chart_of_face=chart_of_face)


# --------------------------------------------------------------------------
# Texel table


@dataclass(frozen=True)
class TexelTable:
    """Covered texels, grouped by owning face.

    ``texel`` holds flat indices ``row * resolution + col`` where row follows
    the V axis.  ``bary`` stores the barycentrics of vertices 1 and 2 of the
    owning face; vertex 0 gets the remainder.  ``face_ranges[f]:face_ranges[f+1]``
    slices the entries of face ``f``.
    """

    resolution: int
    texel: np.ndarray
    face: np.ndarray
    bary: np.ndarray
    face_ranges: np.ndarray
    mesh: TexturedMesh = field(repr=False, compare=False)

    def __len__(self):
        return len(self.texel)

    @property
    def barycentrics(self) -> np.ndarray:
        b = self.bary.astype(np.float64)
        return np.column_stack([1.0 - b[:, 0] - b[:, 1], b])

    @cached_property
    def positions(self) -> np.ndarray:
        lam = self.barycentrics
        tri = self.mesh.positions[self.mesh.faces[self.face]]
        return np.einsum("ki,kij->kj", lam, tri)

    @cached_property
    def normals(self) -> np.ndarray:
        lam = self.barycentrics
        tri = self.mesh.normals[self.mesh.faces[self.face]]
        n = np.einsum("ki,kij->kj", lam, tri)
        return n / np.linalg.norm(n, axis=1, keepdims=True)

    @cached_property
    def index_map(self) -> np.ndarray:
        """Flat texel -> table row, -1 where uncovered."""
        m = np.full(self.resolution * self.resolution, -1, dtype=np.int64)
        m[self.texel] = np.arange(len(self.texel))
        return m

    @cached_property
    def dilated_map(self) -> np.ndarray:
        """Like :attr:`index_map` but uncovered texels borrow a covered 8-neighbour.

        Used when looking up the texel under an arbitrary UV (rasterized
        pixels near chart borders land in texels whose centre is outside the
        chart).  The 2-texel gutter keeps this from crossing charts.
        """
        res = self.resolution
        base = self.index_map.reshape(res, res)
        out = base.copy()
        for dy, dx in ((0, -1), (0, 1), (-1, 0), (1, 0), (-1, -1), (-1, 1), (1, -1), (1, 1)):
            shifted = np.full_like(base, -1)
            ys = slice(max(dy, 0), res + min(dy, 0))
            yd = slice(max(-dy, 0), res + min(-dy, 0))
            xs = slice(max(dx, 0), res + min(dx, 0))
            xd = slice(max(-dx, 0), res + min(-dx, 0))
            shifted[yd, xd] = base[ys, xs]
            fill = (out < 0) & (shifted >= 0)
            out[fill] = shifted[fill]
        return out.ravel()

    def texel_at(self, uv: np.ndarray) -> np.ndarray:
        """Flat index of the covered texel nearest ``uv`` (or -1)."""
        res = self.resolution
        ij = np.clip(np.floor(np.asarray(uv) * res).astype(np.int64), 0, res - 1)
        rows = self.dilated_map[ij[..., 1] * res + ij[..., 0]]
        return np.where(rows >= 0, self.texel[np.maximum(rows, 0)], -1)


def build_texel_table(mesh: TexturedMesh, resolution: int) -> TexelTable:
    """Rasterize the atlas at texel centres.

    Each covered texel is owned by exactly one face; shared edges are
    resolved by a fill rule and genuine atlas overlaps by lowest face index
    (with a warning).
    """
    owner = np.full(resolution * resolution, -1, dtype=np.int32)
    conflicts = K.raster_uv_owner(mesh.uvs, mesh.faces, resolution, owner)
    if conflicts:
        log.warning("atlas overlap: %d texels claimed by more than one face", conflicts)
    texel = np.flatnonzero(owner >= 0)
    face = owner[texel]
    order = np.argsort(face, kind="stable")
    texel, face = texel[order].astype(np.int64), face[order].astype(np.int64)

    centre = np.column_stack([(texel % resolution) + 0.5, (texel // resolution) + 0.5]) / resolution
    tri = mesh.uvs[mesh.faces[face]]
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    v0, v1, v2 = b - a, c - a, centre - a
    den = v0[:, 0] * v1[:, 1] - v1[:, 0] * v0[:, 1]
    l1 = (v2[:, 0] * v1[:, 1] - v1[:, 0] * v2[:, 1]) / den
    l2 = (v0[:, 0] * v2[:, 1] - v2[:, 0] * v0[:, 1]) / den
    bary = np.column_stack([l1, l2]).astype(np.float32)

    ranges = np.searchsorted(face, np.arange(mesh.n_faces + 1)).astype(np.int64)
    return TexelTable(resolution, texel, face, bary, ranges, mesh)


# --------------------------------------------------------------------------
# Export


def palette_image(labels: np.ndarray, palette: dict) -> Image.Image:
    """Indexed-colour image; UNLABELED texels map to black."""
    img = Image.fromarray(labels.astype(np.uint8), mode="P")
    flat = np.zeros((256, 3), dtype=np.uint8)
    for cid, rgb in palette.items():
        flat[int(cid)] = rgb
    img.putpalette(flat.ravel().tolist())
    return img


def export_textured_mesh(
    mesh: TexturedMesh,
    out_dir,
    semantic_labels: np.ndarray | None = None,
    color: np.ndarray | None = None,
    palette: dict | None = None,
    name: str = "mesh",
) -> list[Path]:
    """Write OBJ + MTL + semantic/colour PNGs.

    ``semantic_labels`` is a ``(res, res)`` class plane with UNLABELED for
    unobserved texels; ``color`` a ``(res, res, 3)`` float plane in [0, 1].
    Texture rows follow V upward, so images are flipped on write.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    mtl_lines = []
    if semantic_labels is not None:
        sem_name = f"{name}_semantic.png"
        palette_image(np.flipud(semantic_labels), palette or {}).save(out / sem_name)
        written.append(out / sem_name)
        mtl_lines += ["newmtl semantic", f"map_Kd {sem_name}", ""]
    if color is not None:
        col_name = f"{name}_color.png"
        img = np.clip(np.round(np.flipud(color) * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(img, mode="RGB").save(out / col_name)
        written.append(out / col_name)
        mtl_lines += ["newmtl color", f"map_Kd {col_name}", ""]
    mtl_name = f"{name}.mtl"
    (out / mtl_name).write_text("\n".join(mtl_lines) + "\n", encoding="utf-8")
    material = "color" if color is not None else ("semantic" if semantic_labels is not None else None)
    save_obj(out / f"{name}.obj", mesh, mtllib=mtl_name, material=material)
    return [out / f"{name}.obj", out / mtl_name] + written
