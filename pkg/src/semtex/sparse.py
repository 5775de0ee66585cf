"""Paged sparse class-probability volume.

The volume ``S`` has one ``resolution x resolution`` layer per class and is
split into ``page_size x page_size x 1`` pages.  A page is committed (zero
filled) the first time anything is written into it and can later be
released by :meth:`SparseSemanticTexture.decommit_sweep`.  The per-texel
weight plane ``W`` is dense.  Committed pages live in a slot pool indexed
by a small page table, which is how partially resident GPU textures are
organised as well.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _kernels as K
from .atlas import UNLABELED

PAGE_SIZE = 128
BYTES_PER_VALUE = 4
POOL_RESERVE_BYTES = 1 << 30
CHECKPOINT_MAGIC = b"SSTX"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<4sHIIIfI")
_RECORD = struct.Struct("<III")


@dataclass(frozen=True)
class MemoryStats:
    committed_pages: int
    committed_bytes: int
    dense_bytes: int

    @property
    def committed_fraction(self) -> float:
        return self.committed_bytes / self.dense_bytes if self.dense_bytes else 0.0


class SparseSemanticTexture:
    def __init__(self, resolution: int, class_count: int, page_size: int = PAGE_SIZE, decommit_threshold: float = 0.1):
        if resolution <= 0 or resolution % page_size:
            raise ValueError("resolution must be a positive multiple of the page size")
        if not 0 < class_count < UNLABELED:
            raise ValueError(f"class_count must be in [1, {UNLABELED - 1}]")
        if not 0.0 <= decommit_threshold <= 1.0:
            raise ValueError("decommit_threshold must be a probability")
        self.resolution = resolution
        self.class_count = class_count
        self.page_size = page_size
        self.decommit_threshold = float(decommit_threshold)
        self.tiles = resolution // page_size
        self.page_table = np.full((self.tiles, self.tiles, class_count), -1, dtype=np.int64)
        self.weight = np.zeros((resolution, resolution), dtype=np.float32)
        # zero-filled reservations are mapped lazily, so reserving up front
        # costs address space only and spares later copies on growth
        reserve = min(self.page_table.size, max(16, POOL_RESERVE_BYTES // (page_size * page_size * BYTES_PER_VALUE)))
        self._pool = np.zeros((reserve, page_size, page_size), dtype=np.float32)
        self._free: list[int] = []
        self._used = 0

    # ------------------------------------------------------------------ pages

    @property
    def committed_pages(self) -> int:
        return int((self.page_table >= 0).sum())

    def _slot(self) -> int:
        if self._free:
            return self._free.pop()
        if self._used == len(self._pool):
            grow = max(16, len(self._pool))
            self._pool = np.concatenate([self._pool, np.zeros((grow, self.page_size, self.page_size), dtype=np.float32)])
        self._used += 1
        return self._used - 1

    def _commit(self, ty: int, tx: int, c: int) -> None:
        s = self._slot()
        self._pool[s] = 0.0
        self.page_table[ty, tx, c] = s

    def _release(self, ty: int, tx: int, c: int) -> None:
        s = int(self.page_table[ty, tx, c])
        self.page_table[ty, tx, c] = -1
        self._free.append(s)

    def _check(self, texels: np.ndarray, classes: np.ndarray) -> None:
        if texels.size and (texels.min() < 0 or texels.max() >= self.resolution**2):
            raise IndexError("texel index out of range")
        if classes.size and (classes.min() < 0 or classes.max() >= self.class_count):
            raise IndexError("class index out of range")

    def _commit_for(self, texels: np.ndarray, classes: np.ndarray) -> None:
        needed = np.zeros(self.page_table.size, dtype=np.bool_)
        if K.mark_pages(texels, classes, self.resolution, self.page_size, self.page_table, needed):
            for flat in np.flatnonzero(needed):
                ty, tx, c = np.unravel_index(flat, self.page_table.shape)
                self._commit(int(ty), int(tx), int(c))

    # ----------------------------------------------------------------- writes

    def accumulate(self, texels, classes, deltas) -> None:
        """``S[texel, class] += delta`` for each triple, committing pages as needed.

        Writes are applied in order with float32 arithmetic.
        """
        texels = np.atleast_1d(np.asarray(texels, dtype=np.int64))
        classes = np.atleast_1d(np.asarray(classes, dtype=np.int64))
        deltas = np.atleast_1d(np.asarray(deltas, dtype=np.float32))
        if not (len(texels) == len(classes) == len(deltas)):
            raise ValueError("texels, classes and deltas must have equal length")
        if np.any(deltas < 0) or not np.all(np.isfinite(deltas)):
            raise ValueError("deltas must be finite and non-negative")
        self._check(texels, classes)
        self._commit_for(texels, classes)
        K.scatter_add(self._pool, self.page_table, texels, classes, deltas, self.resolution, self.page_size)

    def observe(self, texels, classes, weights, probs) -> None:
        """Fuse observations: ``S[texel, class] += w * p`` and ``W[texel] += w``."""
        texels = np.asarray(texels, dtype=np.int64)
        classes = np.asarray(classes, dtype=np.int64)
        weights = np.asarray(weights, dtype=np.float64)
        probs = np.asarray(probs, dtype=np.float64)
        self._check(texels, classes)
        self._commit_for(texels, classes)
        K.scatter_observe(self._pool, self.page_table, self.weight, texels, classes, weights, probs, self.resolution, self.page_size)

    # ------------------------------------------------------------------ reads

    def value(self, texel: int, cls: int) -> float:
        y, x = divmod(int(texel), self.resolution)
        s = self.page_table[y // self.page_size, x // self.page_size, cls]
        return float(self._pool[s, y % self.page_size, x % self.page_size]) if s >= 0 else 0.0

    def values(self, texel: int) -> np.ndarray:
        return np.array([self.value(texel, c) for c in range(self.class_count)], dtype=np.float32)

    def gather(self, texels, classes) -> np.ndarray:
        """Vectorised :meth:`value` for paired ``texels`` and ``classes``."""
        texels = np.atleast_1d(np.asarray(texels, dtype=np.int64))
        classes = np.broadcast_to(np.asarray(classes, dtype=np.int64), texels.shape).copy()
        self._check(texels, classes)
        out = np.empty(len(texels), dtype=np.float32)
        K.gather(self._pool, self.page_table, texels, classes, self.resolution, self.page_size, out)
        return out

    def texel_weight(self, texel: int) -> float:
        y, x = divmod(int(texel), self.resolution)
        return float(self.weight[y, x])

    def texel_probability(self, texel: int, cls: int) -> float | None:
        """``S/W`` for one texel and class; None for an unobserved texel."""
        w = self.texel_weight(texel)
        if w <= 0:
            return None
        return self.value(texel, cls) / w

    def fused_argmax(self, texel: int):
        """``(class, probability)`` of the strongest class, or None if unobserved."""
        w = self.texel_weight(texel)
        if w <= 0:
            return None
        v = self.values(texel)
        c = int(np.argmax(v))
        return c, float(v[c]) / w

    def fused_planes(self):
        """Argmax label and probability for every texel, both ``(res, res)``.

        Unobserved texels get label UNLABELED and probability 0.
        """
        labels = np.empty((self.resolution, self.resolution), dtype=np.uint8)
        probs = np.empty((self.resolution, self.resolution), dtype=np.float32)
        K.fused_planes(self._pool, self.page_table, self.weight, self.page_size, UNLABELED, labels, probs)
        return labels, probs

    def dense_snapshot(self, max_bytes: int = 1 << 30) -> np.ndarray:
        """Materialise ``S`` as ``(res*res, C)`` float32; refuses huge volumes."""
        if self.memory_stats().dense_bytes > max_bytes:
            raise MemoryError("dense snapshot exceeds max_bytes")
        ps, r = self.page_size, self.resolution
        out = np.zeros((r, r, self.class_count), dtype=np.float32)
        for ty, tx, c in np.argwhere(self.page_table >= 0):
            out[ty * ps : (ty + 1) * ps, tx * ps : (tx + 1) * ps, c] = self._pool[self.page_table[ty, tx, c]]
        return out.reshape(r * r, self.class_count)

    # ------------------------------------------------------------- decommit

    def decommit_sweep(self) -> int:
        """Release pages whose texels are all below threshold and hold no argmax.

        A threshold of 0 disables the sweep.  Returns the number of freed pages.
        """
        if self.decommit_threshold <= 0:
            return 0
        free = np.zeros(self.page_table.shape, dtype=np.bool_)
        K.sweep_pages(self._pool, self.page_table, self.weight, self.page_size, np.float32(self.decommit_threshold), free)
        idx = np.argwhere(free)
        for ty, tx, c in idx:
            self._release(int(ty), int(tx), int(c))
        return len(idx)

    def memory_stats(self) -> MemoryStats:
        page_bytes = self.page_size * self.page_size * BYTES_PER_VALUE
        n = self.committed_pages
        dense = self.resolution * self.resolution * self.class_count * BYTES_PER_VALUE
        return MemoryStats(n, n * page_bytes, dense)

    # ----------------------------------------------------------- checkpoint

    def save(self, path) -> None:
        """Binary checkpoint: header, W plane, committed pages sorted by (tile_x, tile_y, class)."""
        pages = np.argwhere(self.page_table >= 0)  # rows (ty, tx, c)
        order = np.lexsort((pages[:, 2], pages[:, 0], pages[:, 1]))
        pages = pages[order]
        with open(path, "wb") as fh:
            fh.write(
                _HEADER.pack(
                    CHECKPOINT_MAGIC,
                    CHECKPOINT_VERSION,
                    self.resolution,
                    self.class_count,
                    self.page_size,
                    self.decommit_threshold,
                    len(pages),
                )
            )
            fh.write(self.weight.astype("<f4").tobytes())
            for ty, tx, c in pages:
                fh.write(_RECORD.pack(int(tx), int(ty), int(c)))
                fh.write(self._pool[self.page_table[ty, tx, c]].astype("<f4").tobytes())

    @classmethod
    def load(cls, path) -> "SparseSemanticTexture":
        raw = Path(path).read_bytes()
        magic, version, res, C, ps, thr, n = _HEADER.unpack_from(raw, 0)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a sparse texture checkpoint")
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        store = cls(res, C, ps, thr)
        # keep the exact float32 threshold that was written
        store.decommit_threshold = thr
        off = _HEADER.size
        store.weight = np.frombuffer(raw, dtype="<f4", count=res * res, offset=off).reshape(res, res).astype(np.float32)
        off += res * res * 4
        for _ in range(n):
            tx, ty, c = _RECORD.unpack_from(raw, off)
            off += _RECORD.size
            store._commit(ty, tx, c)
            store._pool[store.page_table[ty, tx, c]] = np.frombuffer(raw, dtype="<f4", count=ps * ps, offset=off).reshape(ps, ps)
            off += ps * ps * 4
        return store
