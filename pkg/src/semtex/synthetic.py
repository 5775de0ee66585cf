"""Procedural scenes, cameras and renderers for fixtures and demos.

Also home to a brute-force ray caster, which doubles as the independent
oracle for the rasterizer and the visibility test.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import CameraModel, render_depth
from .scan import OrganizedScan

# Synthia-style street classes
STREET_CLASSES = ["sky", "building", "road", "sidewalk", "vegetation", "pole", "car", "sign", "light", "lanemarking"]
STREET_PALETTE = {
    0: (70, 130, 180),
    1: (70, 70, 70),
    2: (128, 64, 128),
    3: (244, 35, 232),
    4: (107, 142, 35),
    5: (153, 153, 153),
    6: (0, 0, 142),
    7: (220, 220, 0),
    8: (250, 170, 30),
    9: (85, 55, 40),
}
ROOM_CLASSES = ["floor", "ceiling", "wall", "furniture", "picture"]
ROOM_PALETTE = {0: (220, 220, 220), 1: (102, 0, 204), 2: (128, 128, 0), 3: (255, 69, 20), 4: (50, 50, 150)}


@dataclass
class Scene:
    positions: np.ndarray
    faces: np.ndarray
    face_class: np.ndarray
    class_names: list
    palette: dict

    @property
    def class_count(self) -> int:
        return len(self.class_names)


class _Builder:
    def __init__(self):
        self.pos, self.faces, self.cls = [], [], []

    def quad(self, a, b, c, d, cls, subdiv=(1, 1)):
        """Quad a-b-c-d (counter-clockwise seen from the front side)."""
        a, b, c, d = (np.asarray(x, dtype=np.float64) for x in (a, b, c, d))
        nu, nv = subdiv
        base = sum(len(p) for p in self.pos)
        grid = []
        for j in range(nv + 1):
            s = j / nv
            left, right = a + (d - a) * s, b + (c - b) * s
            for i in range(nu + 1):
                grid.append(left + (right - left) * (i / nu))
        self.pos.append(np.array(grid))
        for j in range(nv):
            for i in range(nu):
                v00 = base + j * (nu + 1) + i
                v10, v01, v11 = v00 + 1, v00 + nu + 1, v00 + nu + 2
                self.faces += [[v00, v10, v11], [v00, v11, v01]]
                self.cls += [cls, cls]

    def box(self, lo, hi, cls, inward=False, skip=(), subdiv=1):
        x0, y0, z0 = lo
        x1, y1, z1 = hi
        P = {
            "-x": [(x0, y0, z0), (x0, y0, z1), (x0, y1, z1), (x0, y1, z0)],
            "+x": [(x1, y0, z0), (x1, y1, z0), (x1, y1, z1), (x1, y0, z1)],
            "-y": [(x0, y0, z0), (x1, y0, z0), (x1, y0, z1), (x0, y0, z1)],
            "+y": [(x0, y1, z0), (x0, y1, z1), (x1, y1, z1), (x1, y1, z0)],
            "-z": [(x0, y0, z0), (x0, y1, z0), (x1, y1, z0), (x1, y0, z0)],
            "+z": [(x0, y0, z1), (x1, y0, z1), (x1, y1, z1), (x0, y1, z1)],
        }
        for side, q in P.items():
            if side in skip:
                continue
            if inward:
                q = q[::-1]
            c = cls[side] if isinstance(cls, dict) else cls
            self.quad(*q, cls=c, subdiv=(subdiv, subdiv))

    def build(self, names, palette) -> Scene:
        return Scene(
            np.concatenate(self.pos),
            np.array(self.faces, dtype=np.int64),
            np.array(self.cls, dtype=np.int64),
            names,
            palette,
        )


def box_room(size=(6.0, 5.0, 3.0), partition: bool = True, subdiv: int = 1) -> Scene:
    """Closed room seen from inside, with an optional free-standing cabinet.

    The cabinet occludes parts of the walls and floor from most viewpoints.
    """
    sx, sy, sz = size
    b = _Builder()
    b.box((0, 0, 0), (sx, sy, sz), {"-z": 0, "+z": 1, "-x": 2, "+x": 2, "-y": 2, "+y": 4}, inward=True, subdiv=subdiv)
    if partition:
        b.box((0.45 * sx, 0.4 * sy, 0.0), (0.6 * sx, 0.6 * sy, 0.6 * sz), 3, skip=("-z",))
    return b.build(ROOM_CLASSES, ROOM_PALETTE)


def street_scene(length: float = 40.0, n_poles: int = 6, seed: int = 0) -> Scene:
    """A straight street along +x: road, sidewalks, facades, poles, signs, cars."""
    rng = np.random.default_rng(seed)
    b = _Builder()
    w_road, w_walk, h_bld = 8.0, 2.5, 10.0
    y_r, y_w = w_road / 2, w_road / 2 + w_walk
    b.quad((0, -y_r, 0), (length, -y_r, 0), (length, y_r, 0), (0, y_r, 0), 2, subdiv=(8, 2))
    b.quad((0, -0.1, 0.005), (length, -0.1, 0.005), (length, 0.1, 0.005), (0, 0.1, 0.005), 9, subdiv=(8, 1))
    for side in (-1, 1):
        ya, yb = side * y_r, side * y_w
        lo, hi = min(ya, yb), max(ya, yb)
        b.quad((0, lo, 0.15), (length, lo, 0.15), (length, hi, 0.15), (0, hi, 0.15), 3, subdiv=(8, 1))
        y = side * y_w
        facade = [(0, y, 0), (length, y, 0), (length, y, h_bld), (0, y, h_bld)]
        if side > 0:
            facade = facade[::-1]
        b.quad(*facade, cls=1, subdiv=(8, 2))
    xs = np.linspace(4.0, length - 4.0, n_poles)
    for k, x in enumerate(xs):
        side = 1 if k % 2 else -1
        y = side * (y_r + 0.6)
        r = 0.1
        b.box((x - r, y - r, 0.15), (x + r, y + r, 4.0), 5, skip=("-z",))
        if k % 3 == 0:
            b.box((x - 0.05, y - side * 0.45 - 0.3, 2.2), (x + 0.05, y - side * 0.45 + 0.3, 2.8), 7, skip=())
        elif k % 3 == 1:
            b.box((x - 0.25, y - 0.25, 4.0), (x + 0.25, y + 0.25, 4.3), 8, skip=())
    for k in range(3):
        x = 8.0 + 10.0 * k + rng.uniform(-1, 1)
        b.box((x, -y_r + 0.3, 0.0), (x + 4.0, -y_r + 2.1, 1.5), 6, skip=("-z",))
    for k in range(4):
        x = 6.0 + 9.0 * k
        b.box((x - 0.8, y_r + 0.3, 0.15), (x + 0.8, y_r + 1.9, 2.5), 4, skip=("-z",))
    return b.build(STREET_CLASSES, STREET_PALETTE)


def icosphere(subdivisions: int = 3, radius: float = 1.0):
    t = (1.0 + 5 ** 0.5) / 2.0
    v = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0), (0, -1, t), (0, 1, t),
         (0, -1, -t), (0, 1, -t), (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    f = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9), (5, 11, 4),
         (11, 10, 2), (10, 7, 6), (7, 1, 8), (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8),
         (3, 8, 9), (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    verts = [np.array(x, dtype=np.float64) / np.linalg.norm(x) for x in v]
    faces = list(f)
    for _ in range(subdivisions):
        cache = {}

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        nf = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            nf += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = nf
    return np.array(verts) * radius, np.array(faces, dtype=np.int64)


# --------------------------------------------------------------------------
# cameras


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """T_Fw for a camera at ``eye`` looking at ``target`` (x right, y down, z forward)."""
    eye, target, up = (np.asarray(x, dtype=np.float64) for x in (eye, target, up))
    z = target - eye
    z /= np.linalg.norm(z)
    x = np.cross(z, up)
    if np.linalg.norm(x) < 1e-9:
        x = np.cross(z, (0.0, 1.0, 0.0))
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    T = np.eye(4)
    T[:3, :3] = R
    T[:3, 3] = -R @ eye
    return T


def default_camera(width: int = 160, height: int = 120, hfov_deg: float = 70.0) -> CameraModel:
    f = (width / 2.0) / np.tan(np.radians(hfov_deg) / 2.0)
    return CameraModel(f, f, (width - 1) / 2.0, (height - 1) / 2.0, width, height)


def room_trajectory(scene_size=(6.0, 5.0, 3.0), n: int = 20, seed: int = 0) -> list[np.ndarray]:
    """Cameras spread around the room, looking across it."""
    rng = np.random.default_rng(seed)
    sx, sy, sz = scene_size
    c = np.array([sx / 2, sy / 2, sz / 2])
    poses = []
    for k in range(n):
        a = 2 * np.pi * k / n
        eye = c + np.array([0.38 * sx * np.cos(a), 0.38 * sy * np.sin(a), rng.uniform(-0.2, 0.4)])
        tgt = c + np.array([-0.4 * sx * np.cos(a + 0.3), -0.4 * sy * np.sin(a + 0.3), rng.uniform(-1.2, -0.4)])
        poses.append(look_at(eye, tgt))
    return poses


def street_trajectory(length: float = 40.0, n: int = 24) -> list[np.ndarray]:
    """Cameras driving down the street, alternately looking left and right ahead."""
    poses = []
    for k in range(n):
        x = 1.0 + (length - 6.0) * k / max(n - 1, 1)
        side = 1 if k % 2 else -1
        eye = np.array([x, 0.5 * side, 1.6])
        tgt = np.array([x + 6.0, 4.5 * side, 1.6])
        poses.append(look_at(eye, tgt))
    return poses


# --------------------------------------------------------------------------
# rendering


def render_labels(scene: Scene, model: CameraModel, pose: np.ndarray, unlabeled: int = 255) -> np.ndarray:
    """Ground-truth class image: face class at every covered pixel."""
    dm = render_depth(scene.positions, scene.faces, model, pose)
    out = np.full((model.height, model.width), unlabeled, dtype=np.uint8)
    out[dm.hit] = scene.face_class[dm.face[dm.hit]]
    return out


def render_rgb(scene: Scene, model: CameraModel, pose: np.ndarray) -> np.ndarray:
    """Flat class colours; background black."""
    labels = render_labels(scene, model, pose)
    lut = np.zeros((256, 3), dtype=np.uint8)
    for c, rgb in scene.palette.items():
        lut[c] = rgb
    return lut[labels]


def noisy_segmentation(labels: np.ndarray, class_count: int, rate: float, rng, confidence=(0.6, 0.95), cell: int = 1):
    """Replace a ``rate`` fraction of pixels by a uniformly drawn *other* class.

    With ``cell > 1`` errors come in ``cell x cell`` pixel blocks that share
    one draw, like the blob-shaped mistakes of a real segmenter.  Uncovered
    (255) pixels get class 0.  Returns ``(labels, confidence)``.
    """
    out = labels.astype(np.int64).copy()
    out[out >= class_count] = 0
    h, w = out.shape
    coarse = (-(-h // cell), -(-w // cell))
    flip = np.repeat(np.repeat(rng.random(coarse) < rate, cell, 0), cell, 1)[:h, :w]
    shift = np.repeat(np.repeat(rng.integers(1, class_count, size=coarse), cell, 0), cell, 1)[:h, :w]
    out[flip] = (out[flip] + shift[flip]) % class_count
    conf = rng.uniform(*confidence, size=out.shape).astype(np.float32)
    return out.astype(np.uint16), conf


# --------------------------------------------------------------------------
# ray casting


def ray_cast(origins: np.ndarray, dirs: np.ndarray, positions: np.ndarray, faces: np.ndarray, chunk: int = 4096):
    """Nearest ray/triangle hits by brute force (Moller-Trumbore).

    Returns ``(t, face)`` with ``t = inf`` and ``face = -1`` for misses.
    """
    origins = np.broadcast_to(np.asarray(origins, dtype=np.float64), np.shape(dirs))
    dirs = np.asarray(dirs, dtype=np.float64)
    tri = positions[faces]
    v0 = tri[:, 0]
    e1 = tri[:, 1] - v0
    e2 = tri[:, 2] - v0
    n = len(dirs)
    t_best = np.full(n, np.inf)
    f_best = np.full(n, -1, dtype=np.int64)
    for s in range(0, n, chunk):
        o = origins[s : s + chunk, None, :]
        d = dirs[s : s + chunk, None, :]
        p = np.cross(d, e2[None])
        det = (e1[None] * p).sum(-1)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / det
            tv = o - v0[None]
            u = (tv * p).sum(-1) * inv
            q = np.cross(tv, e1[None])
            v = (d * q).sum(-1) * inv
            t = (e2[None] * q).sum(-1) * inv
            ok = (np.abs(det) > 1e-14) & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > 0)
        t = np.where(ok, t, np.inf)
        k = np.argmin(t, axis=1)
        tb = t[np.arange(len(k)), k]
        t_best[s : s + chunk] = tb
        f_best[s : s + chunk] = np.where(np.isfinite(tb), k, -1)
    return t_best, f_best


def pixel_rays(model: CameraModel, pose: np.ndarray):
    """World-space origin and per-pixel unit-z directions (z component 1 in camera frame)."""
    ys, xs = np.mgrid[0 : model.height, 0 : model.width]
    d_cam = np.stack([(xs - model.cx) / model.fx, (ys - model.cy) / model.fy, np.ones_like(xs, dtype=np.float64)], -1)
    R, t = pose[:3, :3], pose[:3, 3]
    origin = -R.T @ t
    return origin, d_cam.reshape(-1, 3) @ R


def simulate_scan(
    positions: np.ndarray,
    faces: np.ndarray,
    sensor_pose: np.ndarray,
    rings: int = 16,
    columns: int = 360,
    fov_deg=(-15.0, 15.0),
    max_range: float = 100.0,
    timestamp: float = 0.0,
) -> OrganizedScan:
    """Spinning-lidar scan of a mesh; ``sensor_pose`` is world<-sensor."""
    el = np.radians(np.linspace(fov_deg[0], fov_deg[1], rings))
    az = 2 * np.pi * np.arange(columns) / columns
    E, A = np.meshgrid(el, az, indexing="ij")
    d = np.stack([np.cos(E) * np.cos(A), np.cos(E) * np.sin(A), np.sin(E)], -1).reshape(-1, 3)
    R, t = sensor_pose[:3, :3], sensor_pose[:3, 3]
    tt, _ = ray_cast(t, d @ R.T, positions, faces)
    tt[tt > max_range] = np.nan
    tt[~np.isfinite(tt)] = np.nan
    return OrganizedScan(tt.reshape(rings, columns), el, sensor_pose, timestamp)
