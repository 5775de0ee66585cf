"""Per-scan local meshing and fast normal estimation.

The simplified scan is unwrapped into (azimuth, ring) parameter space,
triangulated there with the ring polylines as constraints, lifted back to
3D, cleaned up by greedy quality-driven edge flips and finally used to
estimate vertex normals with the angle-weighted mean of face normals.
"""

from __future__ import annotations

import heapq
import logging
from dataclasses import dataclass, field

import numpy as np
import triangle as tr

from .scan import OrganizedScan
from .simplify import simplify_scan

log = logging.getLogger(__name__)


class DegenerateTriangleError(ValueError):
    """Raised when a normal is requested for a zero-area triangle."""


@dataclass
class LocalMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    constrained_edges: frozenset = frozenset()
    param_coords: np.ndarray | None = None
    provenance: np.ndarray | None = None  # (ring, column) per vertex

    @property
    def empty(self) -> bool:
        return len(self.triangles) == 0

    def edges(self) -> set:
        t = self.triangles
        e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        e.sort(axis=1)
        return {tuple(x) for x in e.tolist()}


@dataclass
class OrientedCloud:
    positions: np.ndarray
    normals: np.ndarray
    provenance: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))

    def __len__(self):
        return len(self.positions)


def unwrap_polar(rings, columns, n_columns: int) -> np.ndarray:
    """Map (ring, column) provenance to ``(azimuth, ring)`` parameters."""
    rings = np.asarray(rings, dtype=np.float64)
    columns = np.asarray(columns, dtype=np.float64)
    return np.stack([2.0 * np.pi * columns / n_columns, rings], axis=1)


def _is_degenerate(param: np.ndarray) -> bool:
    if len(param) < 3:
        return True
    d = param - param[0]
    # all points collinear <=> every cross product with the farthest point vanishes
    far = d[np.argmax((d * d).sum(axis=1))]
    cross = d[:, 0] * far[1] - d[:, 1] * far[0]
    scale = max(float(np.abs(far).max()), 1e-300)
    return bool(np.all(np.abs(cross) <= 1e-12 * scale * scale))


def _empty_mesh(vertices, param, provenance, constraints=frozenset()) -> LocalMesh:
    return LocalMesh(vertices, np.zeros((0, 3), dtype=np.int64), constraints, param, provenance)


def triangulate_constrained(
    param: np.ndarray,
    constrained_edges=(),
    vertices: np.ndarray | None = None,
    provenance: np.ndarray | None = None,
    max_azimuth_gap: float | None = None,
) -> LocalMesh:
    """Constrained Delaunay triangulation of the parameter points.

    Duplicate parameter points and all-collinear input yield an empty mesh.
    With ``max_azimuth_gap`` set, triangles whose azimuth extent exceeds it
    are dropped.  Output triangles are counter-clockwise in parameter space.
    """
    param = np.asarray(param, dtype=np.float64)
    if vertices is None:
        vertices = np.column_stack([param, np.zeros(len(param))])
    constraints = frozenset(
        (min(int(a), int(b)), max(int(a), int(b))) for a, b in np.asarray(constrained_edges).reshape(-1, 2)
    )
    if _is_degenerate(param):
        return _empty_mesh(vertices, param, provenance, constraints)
    if len(np.unique(param, axis=0)) != len(param):
        raise ValueError("duplicate parameter points")
    data = {"vertices": param}
    if constraints:
        data["segments"] = np.array(sorted(constraints), dtype=np.int32)
    out = tr.triangulate(data, "pcQ")
    if len(out["vertices"]) != len(param):
        raise ValueError("constraint segments intersect; triangulation added Steiner points")
    tris = out.get("triangles", np.zeros((0, 3), dtype=np.int64)).astype(np.int64)
    if len(tris) and max_azimuth_gap is not None:
        az = param[tris, 0]
        tris = tris[az.max(axis=1) - az.min(axis=1) <= max_azimuth_gap]
    if len(tris):
        # triangle emits CCW already; enforce it anyway
        p = param[tris]
        area2 = (p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1]) - (
            p[:, 2, 0] - p[:, 0, 0]
        ) * (p[:, 1, 1] - p[:, 0, 1])
        tris[area2 < 0] = tris[area2 < 0][:, [0, 2, 1]]
    return LocalMesh(vertices, tris, constraints, param, provenance)


def face_normal(v1, v2, v3) -> np.ndarray:
    """Unit normal of triangle (v1, v2, v3) from ``(v1 - v2) x (v3 - v2)``."""
    v1, v2, v3 = (np.asarray(v, dtype=np.float64) for v in (v1, v2, v3))
    n = np.cross(v1 - v2, v3 - v2)
    norm = np.linalg.norm(n)
    if norm == 0.0 or not np.isfinite(norm):
        raise DegenerateTriangleError("zero-area triangle has no normal")
    return n / norm


def face_normals(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    """Vectorised :func:`face_normal`; degenerate faces come out as NaN."""
    p = vertices[triangles]
    n = np.cross(p[:, 0] - p[:, 1], p[:, 2] - p[:, 1])
    norm = np.linalg.norm(n, axis=1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        n = n / norm
    n[norm[:, 0] == 0] = np.nan
    return n


def corner_angles(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    """Interior angle at each corner, shape ``(faces, 3)``."""
    p = vertices[triangles]
    out = np.empty(triangles.shape, dtype=np.float64)
    for k in range(3):
        e1 = p[:, (k + 1) % 3] - p[:, k]
        e2 = p[:, (k + 2) % 3] - p[:, k]
        denom = np.linalg.norm(e1, axis=1) * np.linalg.norm(e2, axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            c = (e1 * e2).sum(axis=1) / denom
        out[:, k] = np.arccos(np.clip(c, -1.0, 1.0))
    return out


def vertex_normals_mwa(mesh: LocalMesh) -> np.ndarray:
    """Mean-weighted-by-angle vertex normals.

    Vertices without a non-degenerate incident face get NaN.
    """
    verts = np.asarray(mesh.vertices, dtype=np.float64)
    tris = np.asarray(mesh.triangles, dtype=np.int64)
    acc = np.zeros((len(verts), 3))
    if len(tris):
        fn = face_normals(verts, tris)
        alpha = corner_angles(verts, tris)
        good = np.all(np.isfinite(fn), axis=1) & np.all(np.isfinite(alpha), axis=1)
        fn, alpha, t = fn[good], alpha[good], tris[good]
        for k in range(3):
            np.add.at(acc, t[:, k], alpha[:, k, None] * fn)
    norm = np.linalg.norm(acc, axis=1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = acc / norm
    out[norm[:, 0] == 0] = np.nan
    return out


def triangle_quality(v1, v2, v3) -> float:
    """``4*sqrt(3)*area / (sum of squared edge lengths)``; 1 iff equilateral."""
    v1, v2, v3 = (np.asarray(v, dtype=np.float64) for v in (v1, v2, v3))
    s = float(((v2 - v1) ** 2).sum() + ((v3 - v2) ** 2).sum() + ((v1 - v3) ** 2).sum())
    if s == 0.0:
        return 0.0
    area = 0.5 * float(np.linalg.norm(np.cross(v2 - v1, v3 - v1)))
    return 4.0 * np.sqrt(3.0) * area / s


def triangle_qualities(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    p = vertices[triangles]
    s = ((p[:, 1] - p[:, 0]) ** 2).sum(1) + ((p[:, 2] - p[:, 1]) ** 2).sum(1) + ((p[:, 0] - p[:, 2]) ** 2).sum(1)
    area = 0.5 * np.linalg.norm(np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]), axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        q = 4.0 * np.sqrt(3.0) * area / s
    q[s == 0] = 0.0
    return q


def _orient2d(a, b, c) -> float:
    return (b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1])


@dataclass
class FlipLog:
    flips: int = 0
    quality_sums: list = field(default_factory=list)


class _FlipState:
    """Mutable triangle/edge adjacency used by :func:`flip_edges`."""

    def __init__(self, mesh: LocalMesh):
        self.v = np.asarray(mesh.vertices, dtype=np.float64)
        self.param = mesh.param_coords if mesh.param_coords is not None else self.v[:, :2]
        self.tris = [list(t) for t in np.asarray(mesh.triangles).tolist()]
        self.q = [triangle_quality(*self.v[t]) for t in self.tris]
        self.edge_tris: dict[tuple, list] = {}
        for i, t in enumerate(self.tris):
            for e in self._tri_edges(t):
                self.edge_tris.setdefault(e, []).append(i)
        self.constrained = mesh.constrained_edges
        self.version: dict[tuple, int] = {}

    @staticmethod
    def _tri_edges(t):
        return [tuple(sorted((t[k], t[(k + 1) % 3]))) for k in range(3)]

    def candidate(self, e):
        """Return (min gain, sum gain, new tris) for flipping edge e, or None."""
        if e in self.constrained:
            return None
        ts = self.edge_tris.get(e)
        if ts is None or len(ts) != 2:
            return None
        t1, t2 = ts
        a, b = e
        c = next(x for x in self.tris[t1] if x not in e)
        d = next(x for x in self.tris[t2] if x not in e)
        if c == d or tuple(sorted((c, d))) in self.edge_tris:
            return None
        P = self.param
        # t1 is (a, b, c) in some rotation; keep CCW orientation in parameter space
        n1 = [c, d, b] if _orient2d(P[c], P[d], P[b]) > 0 else [c, b, d]
        n2 = [d, c, a] if _orient2d(P[d], P[c], P[a]) > 0 else [d, a, c]
        for t in (n1, n2):
            if not _orient2d(P[t[0]], P[t[1]], P[t[2]]) > 0:
                return None
        # both new triangles must also be non-overlapping: a and b on opposite sides of c-d
        if _orient2d(P[c], P[d], P[a]) * _orient2d(P[c], P[d], P[b]) >= 0:
            return None
        q1 = triangle_quality(*self.v[n1])
        q2 = triangle_quality(*self.v[n2])
        old_min = min(self.q[t1], self.q[t2])
        old_sum = self.q[t1] + self.q[t2]
        return min(q1, q2) - old_min, (q1 + q2) - old_sum, (n1, n2, q1, q2)

    def apply(self, e, new):
        n1, n2, q1, q2 = new
        t1, t2 = self.edge_tris[e]
        for ti in (t1, t2):
            for ed in self._tri_edges(self.tris[ti]):
                lst = self.edge_tris[ed]
                lst.remove(ti)
                if not lst:
                    del self.edge_tris[ed]
        self.tris[t1], self.q[t1] = n1, q1
        self.tris[t2], self.q[t2] = n2, q2
        touched = set()
        for ti in (t1, t2):
            for ed in self._tri_edges(self.tris[ti]):
                self.edge_tris.setdefault(ed, []).append(ti)
                touched.add(ed)
        return touched


def flip_edges(mesh: LocalMesh, tol: float = 1e-12, log_to: FlipLog | None = None) -> LocalMesh:
    """Greedy edge flipping toward better-shaped triangles in 3D.

    A flip is admissible when the edge is unconstrained and interior, both
    replacement triangles stay positively oriented in parameter space, and
    it strictly raises both the smaller quality of the pair and the pair's
    quality sum.  The admissible flip with the largest min-quality gain goes
    first; neighbours are re-queued after every flip and stale queue entries
    are skipped via per-edge version counters.
    """
    if mesh.empty:
        return mesh
    st = _FlipState(mesh)
    heap = []

    def push(e):
        ver = st.version.get(e, 0) + 1
        st.version[e] = ver
        cand = st.candidate(e)
        if cand is not None and cand[0] > tol and cand[1] > tol:
            heapq.heappush(heap, (-cand[0], e, ver))

    for e in list(st.edge_tris):
        push(e)
    total = float(sum(st.q))
    if log_to is not None:
        log_to.quality_sums.append(total)
    while heap:
        _, e, ver = heapq.heappop(heap)
        if st.version.get(e) != ver:
            continue
        cand = st.candidate(e)
        if cand is None or not (cand[0] > tol and cand[1] > tol):
            continue
        touched = st.apply(e, cand[2])
        st.version.pop(e, None)
        if log_to is not None:
            log_to.flips += 1
            total += cand[1]
            log_to.quality_sums.append(total)
        for ed in touched:
            push(ed)
    tris = np.array(st.tris, dtype=np.int64).reshape(-1, 3)
    return LocalMesh(mesh.vertices, tris, mesh.constrained_edges, mesh.param_coords, mesh.provenance)


def local_mesh_from_scan(scan: OrganizedScan, epsilon: float, max_azimuth_gap: float | None = None) -> LocalMesh:
    """Simplify, unwrap and triangulate one scan in its sensor frame."""
    rings = simplify_scan(scan, epsilon)
    if not rings:
        return _empty_mesh(np.zeros((0, 3)), np.zeros((0, 2)), np.zeros((0, 2), dtype=np.int64))
    prov_parts, seg_parts = [], []
    offset = 0
    for sr in rings:
        prov_parts.append(np.column_stack([np.full(len(sr.kept), sr.ring), sr.kept]))
        # map column-valued segments to vertex indices within this ring's block
        pos = {int(c): offset + i for i, c in enumerate(sr.kept)}
        if len(sr.constrained_segments):
            seg_parts.append(np.array([[pos[int(a)], pos[int(b)]] for a, b in sr.constrained_segments]))
        offset += len(sr.kept)
    prov = np.concatenate(prov_parts).astype(np.int64)
    segs = np.concatenate(seg_parts) if seg_parts else np.zeros((0, 2), dtype=np.int64)
    verts = scan.points()[prov[:, 0], prov[:, 1]]
    param = unwrap_polar(prov[:, 0], prov[:, 1], scan.columns)
    return triangulate_constrained(param, segs, verts, prov, max_azimuth_gap)


def estimate_oriented_cloud(
    scan: OrganizedScan, epsilon: float, max_azimuth_gap: float | None = None
) -> OrientedCloud:
    """Simplified scan points with normals, in world coordinates.

    Normals are flipped to face the sensor origin.  Points that end up in
    no triangle (unmeshable fragments) are dropped.
    """
    mesh = local_mesh_from_scan(scan, epsilon, max_azimuth_gap)
    if mesh.empty:
        return OrientedCloud(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 2), dtype=np.int64))
    mesh = flip_edges(mesh)
    n = vertex_normals_mwa(mesh)
    ok = np.all(np.isfinite(n), axis=1)
    p, n, prov = mesh.vertices[ok], n[ok], mesh.provenance[ok]
    away = (n * -p).sum(axis=1) < 0
    n[away] *= -1.0
    R, t = scan.sensor_pose[:3, :3], scan.sensor_pose[:3, 3]
    return OrientedCloud(p @ R.T + t, n @ R.T, prov)


def save_ply(path, cloud: OrientedCloud) -> None:
    """Binary little-endian PLY with x y z nx ny nz as float32."""
    data = np.empty(len(cloud), dtype=[(k, "<f4") for k in ("x", "y", "z", "nx", "ny", "nz")])
    for i, k in enumerate(("x", "y", "z")):
        data[k] = cloud.positions[:, i]
        data["n" + k] = cloud.normals[:, i]
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {len(cloud)}\n"
        + "".join(f"property float {k}\n" for k in data.dtype.names)
        + "end_header\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(data.tobytes())


def load_ply(path) -> OrientedCloud:
    with open(path, "rb") as fh:
        raw = fh.read()
    end = raw.index(b"end_header\n") + len(b"end_header\n")
    header = raw[:end].decode("ascii").splitlines()
    count = next(int(l.split()[-1]) for l in header if l.startswith("element vertex"))
    names = [l.split()[-1] for l in header if l.startswith("property")]
    if "binary_little_endian" not in header[1]:
        raise ValueError("only binary little-endian PLY is supported")
    data = np.frombuffer(raw[end:], dtype=[(k, "<f4") for k in names], count=count)
    pos = np.column_stack([data[k] for k in ("x", "y", "z")]).astype(np.float64)
    nrm = np.column_stack([data[k] for k in ("nx", "ny", "nz")]).astype(np.float64)
    return OrientedCloud(pos, nrm)
