"""Edge-aware scan-ring simplification.

Each ring is reduced with Ramer-Douglas-Peucker using the 3D
point-to-segment distance.  Every interior corner that survives is then
flanked by its two original neighbours ("offset points"), which pins the
surface normal on both sides of a sharp edge for the later reconstruction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .scan import OrganizedScan


@dataclass
class SimplifiedRing:
    """Indices kept from one ring, in original ring order.

    ``kept`` indexes the points handed to :func:`simplify_ring` (for
    :func:`simplify_scan` these are scan columns).  ``offset`` is the subset
    of ``kept`` that was added next to corners.
    """

    kept: np.ndarray
    constrained_segments: np.ndarray
    offset: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    ring: int = 0

    def __len__(self):
        return len(self.kept)


def segment_distances(points: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Euclidean distance from each of ``points`` to the closed segment a-b."""
    ab = b - a
    denom = float(ab @ ab)
    if denom == 0.0:
        return np.linalg.norm(points - a, axis=1)
    t = np.clip((points - a) @ ab / denom, 0.0, 1.0)
    return np.linalg.norm(points - (a + t[:, None] * ab), axis=1)


def rdp_mask(points: np.ndarray, epsilon: float) -> np.ndarray:
    """Boolean keep-mask of Ramer-Douglas-Peucker on an ordered polyline."""
    n = len(points)
    keep = np.zeros(n, dtype=bool)
    if n == 0:
        return keep
    keep[0] = keep[-1] = True
    if epsilon <= 0:
        keep[:] = True
        return keep
    stack = [(0, n - 1)]
    while stack:
        first, last = stack.pop()
        if last - first < 2:
            continue
        d = segment_distances(points[first + 1 : last], points[first], points[last])
        i = int(np.argmax(d))
        if d[i] > epsilon:
            split = first + 1 + i
            keep[split] = True
            stack.append((split, last))
            stack.append((first, split))
    return keep


def _segments(kept: np.ndarray) -> np.ndarray:
    if len(kept) < 2:
        return np.zeros((0, 2), dtype=np.int64)
    return np.stack([kept[:-1], kept[1:]], axis=1).astype(np.int64)


def simplify_ring(ring: np.ndarray, epsilon: float) -> SimplifiedRing | None:
    """Simplify one ordered ring; returns None for fewer than two points."""
    ring = np.asarray(ring, dtype=np.float64)
    if len(ring) < 2:
        return None
    kept = np.flatnonzero(rdp_mask(ring, epsilon))
    return SimplifiedRing(kept=kept, constrained_segments=_segments(kept))


def add_offset_points(ring: np.ndarray, simplified: SimplifiedRing) -> SimplifiedRing:
    """Add the immediate neighbours of every interior kept corner."""
    n = len(ring)
    kept = np.asarray(simplified.kept, dtype=np.int64)
    if len(kept) <= 2:
        return simplified
    is_kept = np.zeros(n, dtype=bool)
    is_kept[kept] = True
    corners = kept[1:-1]
    candidates = np.concatenate([corners - 1, corners + 1])
    candidates = candidates[(candidates >= 0) & (candidates < n)]
    new = np.unique(candidates[~is_kept[candidates]])
    if len(new) == 0:
        return simplified
    merged = np.union1d(kept, new)
    offset = np.union1d(np.asarray(simplified.offset, dtype=np.int64), new)
    return SimplifiedRing(
        kept=merged,
        constrained_segments=_segments(merged),
        offset=offset,
        ring=simplified.ring,
    )


def _valid_runs(valid: np.ndarray):
    """(start, stop) column ranges of consecutive valid returns."""
    padded = np.concatenate([[False], valid, [False]])
    edges = np.flatnonzero(np.diff(padded.astype(np.int8)))
    return list(zip(edges[::2], edges[1::2]))


def simplify_scan(scan: OrganizedScan, epsilon: float, offsets: bool = True) -> list[SimplifiedRing]:
    """Simplify every ring of a scan independently.

    Invalid returns split a ring into runs that are simplified on their own;
    no constrained segment ever bridges a gap.  Rings with fewer than two
    valid returns are skipped.  Indices in the result are scan columns.
    """
    pts = scan.points()
    valid = scan.valid
    out = []
    for r in range(scan.rings):
        if valid[r].sum() < 2:
            continue
        kept_parts, seg_parts, off_parts = [], [], []
        for start, stop in _valid_runs(valid[r]):
            run = pts[r, start:stop]
            if len(run) == 1:
                kept_parts.append(np.array([start]))
                continue
            s = simplify_ring(run, epsilon)
            if offsets:
                s = add_offset_points(run, s)
            kept_parts.append(s.kept + start)
            seg_parts.append(s.constrained_segments + start)
            off_parts.append(s.offset + start)
        out.append(
            SimplifiedRing(
                kept=np.concatenate(kept_parts).astype(np.int64),
                constrained_segments=(
                    np.concatenate(seg_parts).astype(np.int64)
                    if seg_parts
                    else np.zeros((0, 2), dtype=np.int64)
                ),
                offset=(
                    np.concatenate(off_parts).astype(np.int64)
                    if off_parts
                    else np.zeros(0, dtype=np.int64)
                ),
                ring=r,
            )
        )
    return out
