"""Compiled inner loops.

Everything here works on plain arrays so the public modules can keep
their dataclass surfaces.  Pixel and texel centres follow one convention
throughout: pixel (x, y) is centred at integer image coordinates, texel
(i, j) at ((i + 0.5) / res, (j + 0.5) / res) in UV space.
"""

import os

import numba
import numpy as np
from numba import njit, prange

if "NUMBA_THREADING_LAYER_PRIORITY" not in os.environ and "NUMBA_THREADING_LAYER" not in os.environ:
    # try OpenMP before TBB; an outdated TBB warns on the first parallel call
    numba.config.THREADING_LAYER_PRIORITY = ["omp", "tbb", "workqueue"]

STATUS_OUT_OF_VIEW = 0
STATUS_OCCLUDED = 1
STATUS_VISIBLE = 2
# visible, but the nearest pixel shows another surface, so its label is not this texel's
STATUS_MIXED = 3


@njit(cache=True, inline="always")
def _edge(ax, ay, bx, by, px, py):
    return (bx - ax) * (py - ay) - (by - ay) * (px - ax)


@njit(cache=True, inline="always")
def _edge_exact(ax, ay, bx, by, px, py):
    # evaluate from the lexicographically smaller endpoint so that the two
    # faces sharing an edge get exactly opposite values
    if ax < bx or (ax == bx and ay < by):
        return _edge(ax, ay, bx, by, px, py)
    return -_edge(bx, by, ax, ay, px, py)


@njit(cache=True, inline="always")
def _owns_boundary(ax, ay, bx, by):
    # tie-break for samples exactly on an edge; antisymmetric in edge direction
    dy = by - ay
    return dy > 0.0 or (dy == 0.0 and (bx - ax) < 0.0)


@njit(cache=True)
def _inside(x0, y0, x1, y1, x2, y2, px, py):
    w0 = _edge_exact(x1, y1, x2, y2, px, py)
    w1 = _edge_exact(x2, y2, x0, y0, px, py)
    w2 = _edge_exact(x0, y0, x1, y1, px, py)
    if w0 < 0.0 or w1 < 0.0 or w2 < 0.0:
        return False
    if w0 == 0.0 and not _owns_boundary(x1, y1, x2, y2):
        return False
    if w1 == 0.0 and not _owns_boundary(x2, y2, x0, y0):
        return False
    if w2 == 0.0 and not _owns_boundary(x0, y0, x1, y1):
        return False
    return True


@njit(cache=True)
def raster_uv_owner(uv, faces, res, owner):
    """Assign each texel whose centre lies in a UV triangle to that face.

    The first face (in index order) wins on conflicts; returns the number of
    conflicting texels so callers can report atlas overlaps.
    """
    conflicts = 0
    for f in range(faces.shape[0]):
        i0, i1, i2 = faces[f, 0], faces[f, 1], faces[f, 2]
        x0, y0 = uv[i0, 0] * res, uv[i0, 1] * res
        x1, y1 = uv[i1, 0] * res, uv[i1, 1] * res
        x2, y2 = uv[i2, 0] * res, uv[i2, 1] * res
        area = _edge(x0, y0, x1, y1, x2, y2)
        if area == 0.0:
            continue
        if area < 0.0:
            x1, y1, x2, y2 = x2, y2, x1, y1
        xmin = max(int(np.floor(min(x0, x1, x2) - 0.5)), 0)
        xmax = min(int(np.ceil(max(x0, x1, x2) - 0.5)), res - 1)
        ymin = max(int(np.floor(min(y0, y1, y2) - 0.5)), 0)
        ymax = min(int(np.ceil(max(y0, y1, y2) - 0.5)), res - 1)
        for j in range(ymin, ymax + 1):
            py = j + 0.5
            for i in range(xmin, xmax + 1):
                px = i + 0.5
                if _inside(x0, y0, x1, y1, x2, y2, px, py):
                    k = j * res + i
                    if owner[k] < 0:
                        owner[k] = f
                    elif owner[k] != f:
                        conflicts += 1
    return conflicts


@njit(cache=True)
def _clip_near(cv, near, out_p, out_b):
    """Clip a camera-space triangle against z >= near.

    Writes up to 4 polygon vertices (position + original barycentrics) and
    returns their count.
    """
    n = 0
    for k in range(3):
        a = k
        b = (k + 1) % 3
        za = cv[a, 2]
        zb = cv[b, 2]
        if za >= near:
            out_p[n, :] = cv[a, :]
            out_b[n, :] = 0.0
            out_b[n, a] = 1.0
            n += 1
        if (za >= near) != (zb >= near):
            t = (near - za) / (zb - za)
            for c in range(3):
                out_p[n, c] = cv[a, c] + t * (cv[b, c] - cv[a, c])
            out_b[n, :] = 0.0
            out_b[n, a] = 1.0 - t
            out_b[n, b] = t
            n += 1
    return n


@njit(cache=True)
def rasterize(cam_verts, faces, fx, fy, cx, cy, width, height, near, depth, face_id, bary):
    """Z-buffered, perspective-correct triangle rasterization.

    ``depth`` must be pre-filled with +inf and ``face_id`` with -1.  ``bary``
    receives the perspective-correct barycentrics (w.r.t. the face's own
    vertices 1 and 2) of the nearest hit at each pixel centre.
    """
    cv = np.empty((3, 3))
    poly = np.empty((4, 3))
    pb = np.empty((4, 3))
    sx = np.empty(4)
    sy = np.empty(4)
    for f in range(faces.shape[0]):
        for k in range(3):
            cv[k, :] = cam_verts[faces[f, k], :]
        if cv[0, 2] < near and cv[1, 2] < near and cv[2, 2] < near:
            continue
        n = _clip_near(cv, near, poly, pb)
        if n < 3:
            continue
        for k in range(n):
            sx[k] = fx * poly[k, 0] / poly[k, 2] + cx
            sy[k] = fy * poly[k, 1] / poly[k, 2] + cy
        for s in range(1, n - 1):
            a, b, c = 0, s, s + 1
            x0, y0, x1, y1, x2, y2 = sx[a], sy[a], sx[b], sy[b], sx[c], sy[c]
            area = _edge(x0, y0, x1, y1, x2, y2)
            if area == 0.0 or not np.isfinite(area):
                continue
            if area < 0.0:
                b, c = c, b
                x1, y1, x2, y2 = x2, y2, x1, y1
                area = -area
            iz0 = 1.0 / poly[a, 2]
            iz1 = 1.0 / poly[b, 2]
            iz2 = 1.0 / poly[c, 2]
            xmin = max(int(np.ceil(min(x0, x1, x2))), 0)
            xmax = min(int(np.floor(max(x0, x1, x2))), width - 1)
            ymin = max(int(np.ceil(min(y0, y1, y2))), 0)
            ymax = min(int(np.floor(max(y0, y1, y2))), height - 1)
            for py in range(ymin, ymax + 1):
                for px in range(xmin, xmax + 1):
                    if not _inside(x0, y0, x1, y1, x2, y2, float(px), float(py)):
                        continue
                    w0 = _edge(x1, y1, x2, y2, px, py) / area
                    w1 = _edge(x2, y2, x0, y0, px, py) / area
                    w2 = 1.0 - w0 - w1
                    p0 = w0 * iz0
                    p1 = w1 * iz1
                    p2 = w2 * iz2
                    invz = p0 + p1 + p2
                    if invz <= 0.0:
                        continue
                    z = 1.0 / invz
                    if z < depth[py, px]:
                        depth[py, px] = z
                        face_id[py, px] = f
                        p0 *= z
                        p1 *= z
                        p2 *= z
                        bary[py, px, 0] = p0 * pb[a, 1] + p1 * pb[b, 1] + p2 * pb[c, 1]
                        bary[py, px, 1] = p0 * pb[a, 2] + p1 * pb[b, 2] + p2 * pb[c, 2]


@njit(cache=True, inline="always")
def _plane_depth(planes, f, rx, ry):
    den = planes[f, 0] * rx + planes[f, 1] * ry + planes[f, 2]
    if den == 0.0:
        return np.inf
    z = planes[f, 3] / den
    if not (z > 0.0) or not np.isfinite(z):
        return np.inf
    return z


@njit(cache=True, inline="always")
def _ray_in_face(edges, f, rx, ry, tol):
    # ray (rx, ry, 1) from the camera centre against the three unit edge-plane normals
    pos = True
    neg = True
    for i in range(3):
        s = edges[f, i, 0] * rx + edges[f, i, 1] * ry + edges[f, i, 2]
        if s < -tol:
            pos = False
        if s > tol:
            neg = False
    return pos or neg


@njit(cache=True, inline="always")
def surface_depths(depth, face_id, planes, edges, fx, fy, cx, cy, u, v):
    """Depths along the ray through subpixel (u, v): exact surface and nearest-pixel plane.

    The exact surface is the nearest face, among those hit in the 3x3
    pixels around (u, v), whose triangle contains the ray, evaluated on its
    plane; this keeps silhouettes exact to the subpixel.  When all nine
    pixels show one face the ray lies inside it and the search is skipped.
    The second value evaluates the plane of the face seen at the nearest
    pixel (the surface whose label that pixel carries).  Both are +inf for
    no-hit pixels; callers bounds-check (u, v) first.
    """
    px = int(np.floor(u + 0.5))
    py = int(np.floor(v + 0.5))
    h, w = face_id.shape
    rx = (u - cx) / fx
    ry = (v - cy) / fy
    f0 = face_id[py, px]
    near = np.inf
    if f0 >= 0:
        near = _plane_depth(planes, f0, rx, ry)
        if not np.isfinite(near):
            near = depth[py, px]
    uniform = f0 >= 0 and 0 < px < w - 1 and 0 < py < h - 1
    if uniform:
        for y in range(py - 1, py + 2):
            for x in range(px - 1, px + 2):
                if face_id[y, x] != f0:
                    uniform = False
    if uniform:
        return near, near
    tol = 1e-9 * np.sqrt(rx * rx + ry * ry + 1.0)
    best = np.inf
    found = False
    for y in range(max(py - 1, 0), min(py + 2, h)):
        for x in range(max(px - 1, 0), min(px + 2, w)):
            f = face_id[y, x]
            if f < 0 or not _ray_in_face(edges, f, rx, ry, tol):
                continue
            z = _plane_depth(planes, f, rx, ry)
            if z < best:
                best = z
                found = True
    if found:
        return best, near
    return near, near


@njit(cache=True)
def surface_depth(depth, face_id, planes, edges, fx, fy, cx, cy, u, v):
    return surface_depths(depth, face_id, planes, edges, fx, fy, cx, cy, u, v)[0]


@njit(cache=True, inline="always")
def _outside_frustum(X, Y, Z, fx, fy, cx, cy, width, height, near):
    """Bit mask of the view-frustum planes a camera-space point lies behind."""
    m = 0
    if Z <= near:
        m |= 1
    if fx * X + (cx + 0.5) * Z < 0.0:
        m |= 2
    if fx * X + (cx + 0.5 - width) * Z >= 0.0:
        m |= 4
    if fy * Y + (cy + 0.5) * Z < 0.0:
        m |= 8
    if fy * Y + (cy + 0.5 - height) * Z >= 0.0:
        m |= 16
    return m


@njit(cache=True)
def _observe_face(
    f, verts, faces, face_ranges, tex_bary, R, t,
    fx, fy, cx, cy, width, height, near,
    depth, face_id, planes, edges, bias_scale,
    status, depth_out, u_out, v_out,
):
    lo = face_ranges[f]
    hi = face_ranges[f + 1]
    cam = np.empty((3, 3))
    out_all = 31
    for c in range(3):
        i = faces[f, c]
        for r in range(3):
            cam[c, r] = R[r, 0] * verts[i, 0] + R[r, 1] * verts[i, 1] + R[r, 2] * verts[i, 2] + t[r]
        out_all &= _outside_frustum(cam[c, 0], cam[c, 1], cam[c, 2], fx, fy, cx, cy, width, height, near)
    if out_all != 0:
        for k in range(lo, hi):
            status[k] = STATUS_OUT_OF_VIEW
            depth_out[k] = np.nan
            u_out[k] = np.nan
            v_out[k] = np.nan
        return 0, 0
    # camera coordinates are affine in the barycentrics
    X0, Y0, Z0 = cam[0, 0], cam[0, 1], cam[0, 2]
    X1, Y1, Z1 = cam[1, 0] - X0, cam[1, 1] - Y0, cam[1, 2] - Z0
    X2, Y2, Z2 = cam[2, 0] - X0, cam[2, 1] - Y0, cam[2, 2] - Z0
    vis = 0
    occ = 0
    for k in range(lo, hi):
        b1 = np.float64(tex_bary[k, 0])
        b2 = np.float64(tex_bary[k, 1])
        Z = Z0 + b1 * Z1 + b2 * Z2
        depth_out[k] = Z
        if Z <= near:
            status[k] = STATUS_OUT_OF_VIEW
            u_out[k] = np.nan
            v_out[k] = np.nan
            continue
        u = fx * (X0 + b1 * X1 + b2 * X2) / Z + cx
        v = fy * (Y0 + b1 * Y1 + b2 * Y2) / Z + cy
        u_out[k] = u
        v_out[k] = v
        if not (u >= -0.5 and u < width - 0.5 and v >= -0.5 and v < height - 0.5):
            status[k] = STATUS_OUT_OF_VIEW
            continue
        D, D_near = surface_depths(depth, face_id, planes, edges, fx, fy, cx, cy, u, v)
        bias = bias_scale * (1.0 + Z)
        if Z <= D + bias:
            if abs(D_near - Z) <= bias:
                status[k] = STATUS_VISIBLE
                vis += 1
            else:
                status[k] = STATUS_MIXED
        else:
            status[k] = STATUS_OCCLUDED
            occ += 1
    return vis, occ


@njit(cache=True, parallel=True)
def observe_texels(
    verts, faces, face_ranges, tex_face, tex_bary, R, t,
    fx, fy, cx, cy, width, height, near,
    depth, face_id, planes, edges, bias_scale,
    status, depth_out, u_out, v_out,
):
    """Project every texel into a frame and run the visibility test.

    Writes per-texel status (out of view / occluded / visible / mixed), camera depth
    and subpixel position (NaN where undefined).  Faces entirely outside
    one frustum plane are rejected wholesale.  Returns the number of visible
    and occluded texels.
    """
    n_vis = 0
    n_occ = 0
    for f in prange(faces.shape[0]):
        vis, occ = _observe_face(
            f, verts, faces, face_ranges, tex_bary, R, t,
            fx, fy, cx, cy, width, height, near,
            depth, face_id, planes, edges, bias_scale,
            status, depth_out, u_out, v_out,
        )
        n_vis += vis
        n_occ += occ
    return n_vis, n_occ


@njit(cache=True)
def collect_visible(status, u, v, depth, texel, labels, conf, d_min, d_max, out_texel, out_class, out_w, out_p):
    """Nearest-pixel label, confidence and distance weight of every visible texel."""
    n = 0
    for k in range(status.shape[0]):
        if status[k] != STATUS_VISIBLE:
            continue
        # status was decided in float64; clamp against float32 rounding at the border
        x = min(max(int(np.floor(u[k] + 0.5)), 0), labels.shape[1] - 1)
        y = min(max(int(np.floor(v[k] + 0.5)), 0), labels.shape[0] - 1)
        d = depth[k]
        if d <= d_min:
            w = 1.0
        else:
            w = 1.0 - (d - d_min) / (d_max - d_min)
            w = min(max(w, 0.0), 1.0)
        out_texel[n] = texel[k]
        out_class[n] = labels[y, x]
        out_w[n] = w
        out_p[n] = conf[y, x]
        n += 1
    return n


@njit(cache=True)
def mark_pages(texels, classes, res, page_size, page_table, needed):
    """Flag uncommitted pages touched by a write batch; returns how many."""
    tiles_x = res // page_size
    C = page_table.shape[2]
    count = 0
    last = -1
    for k in range(texels.shape[0]):
        tx = (texels[k] % res) // page_size
        ty = (texels[k] // res) // page_size
        key = (ty * tiles_x + tx) * C + classes[k]
        if key == last:
            continue
        last = key
        if page_table[ty, tx, classes[k]] < 0 and not needed[key]:
            needed[key] = True
            count += 1
    return count


@njit(cache=True)
def scatter_add(pool, page_table, texels, classes, deltas, res, page_size):
    """Sequential float32 accumulation into committed pages (order preserved)."""
    for k in range(texels.shape[0]):
        x = texels[k] % res
        y = texels[k] // res
        slot = page_table[y // page_size, x // page_size, classes[k]]
        pool[slot, y % page_size, x % page_size] += deltas[k]


@njit(cache=True)
def scatter_observe(pool, page_table, weight, texels, classes, w, p, res, page_size):
    for k in range(texels.shape[0]):
        x = texels[k] % res
        y = texels[k] // res
        slot = page_table[y // page_size, x // page_size, classes[k]]
        pool[slot, y % page_size, x % page_size] += np.float32(w[k] * p[k])
        weight[y, x] += np.float32(w[k])


@njit(cache=True)
def sweep_pages(pool, page_table, weight, page_size, threshold, free_mask):
    """Mark committed pages whose texels are all below threshold and never argmax.

    ``free_mask`` has the page table's shape and receives True for pages to
    release.  Uncommitted classes read as zero for the argmax.
    """
    ty_n, tx_n, C = page_table.shape
    vals = np.zeros(C, dtype=np.float32)
    keep = np.zeros(C, dtype=np.bool_)
    for ty in range(ty_n):
        for tx in range(tx_n):
            any_committed = False
            for c in range(C):
                keep[c] = False
                if page_table[ty, tx, c] >= 0:
                    any_committed = True
            if not any_committed:
                continue
            for j in range(page_size):
                for i in range(page_size):
                    W = weight[ty * page_size + j, tx * page_size + i]
                    if W <= 0.0:
                        continue
                    best = 0
                    bestv = np.float32(-1.0)
                    for c in range(C):
                        s = page_table[ty, tx, c]
                        vals[c] = pool[s, j, i] if s >= 0 else np.float32(0.0)
                        if vals[c] > bestv:
                            bestv = vals[c]
                            best = c
                    keep[best] = True
                    for c in range(C):
                        if page_table[ty, tx, c] >= 0 and vals[c] / W >= threshold:
                            keep[c] = True
            for c in range(C):
                if page_table[ty, tx, c] >= 0 and not keep[c]:
                    free_mask[ty, tx, c] = True


@njit(cache=True)
def fused_planes(pool, page_table, weight, page_size, unlabeled, labels, probs):
    """Per-texel argmax class and its probability S/W (ties -> lowest class)."""
    ty_n, tx_n, C = page_table.shape
    for ty in range(ty_n):
        for tx in range(tx_n):
            for j in range(page_size):
                y = ty * page_size + j
                for i in range(page_size):
                    x = tx * page_size + i
                    W = weight[y, x]
                    if W <= 0.0:
                        labels[y, x] = unlabeled
                        probs[y, x] = 0.0
                        continue
                    best = 0
                    bestv = np.float32(-1.0)
                    for c in range(C):
                        s = page_table[ty, tx, c]
                        val = pool[s, j, i] if s >= 0 else np.float32(0.0)
                        if val > bestv:
                            bestv = val
                            best = c
                    labels[y, x] = best
                    probs[y, x] = bestv / W


@njit(cache=True, parallel=True)
def color_update(
    verts, faces, face_ranges, tex_face, tex_bary, tex_texel, vnormals,
    R, t, origin, fx, fy, cx, cy, width, height,
    status, u_arr, v_arr, rgb, color, cweight,
):
    """Weighted running-average update of visible texels.

    The weight is inverse squared distance x cos^4 vignetting x the clamped
    cosine between the unit view direction and the interpolated normal.
    """
    nf = faces.shape[0]
    for f in prange(nf):
        i0, i1, i2 = faces[f, 0], faces[f, 1], faces[f, 2]
        for k in range(face_ranges[f], face_ranges[f + 1]):
            if status[k] != STATUS_VISIBLE:
                continue
            b1 = np.float64(tex_bary[k, 0])
            b2 = np.float64(tex_bary[k, 1])
            b0 = 1.0 - b1 - b2
            p = np.empty(3)
            n = np.empty(3)
            for c in range(3):
                p[c] = b0 * verts[i0, c] + b1 * verts[i1, c] + b2 * verts[i2, c]
                n[c] = b0 * vnormals[i0, c] + b1 * vnormals[i1, c] + b2 * vnormals[i2, c]
            nn = np.sqrt(n[0] * n[0] + n[1] * n[1] + n[2] * n[2])
            X = R[0, 0] * p[0] + R[0, 1] * p[1] + R[0, 2] * p[2] + t[0]
            Y = R[1, 0] * p[0] + R[1, 1] * p[1] + R[1, 2] * p[2] + t[1]
            Z = R[2, 0] * p[0] + R[2, 1] * p[1] + R[2, 2] * p[2] + t[2]
            d2 = X * X + Y * Y + Z * Z
            if d2 <= 0.0 or nn <= 0.0:
                continue
            cos_t = Z / np.sqrt(d2)
            dx = origin[0] - p[0]
            dy = origin[1] - p[1]
            dz = origin[2] - p[2]
            dl = np.sqrt(dx * dx + dy * dy + dz * dz)
            view = (dx * n[0] + dy * n[1] + dz * n[2]) / (dl * nn)
            if view <= 0.0:
                continue
            w = (1.0 / d2) * cos_t ** 4 * view
            if w <= 0.0:
                continue
            u = u_arr[k]
            v = v_arr[k]
            x0 = int(np.floor(u))
            y0 = int(np.floor(v))
            ax = u - x0
            ay = v - y0
            xa = min(max(x0, 0), width - 1)
            xb = min(max(x0 + 1, 0), width - 1)
            ya = min(max(y0, 0), height - 1)
            yb = min(max(y0 + 1, 0), height - 1)
            tex = tex_texel[k]
            Wold = np.float64(cweight[tex])
            for c in range(3):
                s = (
                    (1 - ax) * (1 - ay) * rgb[ya, xa, c]
                    + ax * (1 - ay) * rgb[ya, xb, c]
                    + (1 - ax) * ay * rgb[yb, xa, c]
                    + ax * ay * rgb[yb, xb, c]
                ) / 255.0
                color[tex, c] = (Wold * color[tex, c] + w * s) / (Wold + w)
            cweight[tex] = Wold + w


@njit(cache=True)
def gather(pool, page_table, texels, classes, res, page_size, out):
    """``S[texel, class]`` for each pair; 0 where the page is not committed."""
    for k in range(texels.shape[0]):
        x = texels[k] % res
        y = texels[k] // res
        slot = page_table[y // page_size, x // page_size, classes[k]]
        out[k] = pool[slot, y % page_size, x % page_size] if slot >= 0 else np.float32(0.0)
