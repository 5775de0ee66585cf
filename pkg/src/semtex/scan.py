"""Organized range scans (rings x columns) and their on-disk form."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


@dataclass
class OrganizedScan:
    """One sensor revolution stored in its native ring-major grid.

    ``ranges`` is ``(rings, columns)`` in meters; a cell is valid when the
    value is finite and strictly positive.  ``elevations`` holds the beam
    angle (radians) of every ring; column ``c`` sits at azimuth
    ``2*pi*c/columns``.
    """

    ranges: np.ndarray
    elevations: np.ndarray
    sensor_pose: np.ndarray = field(default_factory=lambda: np.eye(4))
    timestamp: float = 0.0

    def __post_init__(self):
        self.ranges = np.asarray(self.ranges, dtype=np.float64)
        self.elevations = np.asarray(self.elevations, dtype=np.float64)
        self.sensor_pose = np.asarray(self.sensor_pose, dtype=np.float64)
        if self.ranges.ndim != 2:
            raise ValueError("ranges must be a 2D rings x columns grid")
        if self.elevations.shape != (self.ranges.shape[0],):
            raise ValueError("need one elevation angle per ring")
        if self.sensor_pose.shape != (4, 4):
            raise ValueError("sensor_pose must be a 4x4 rigid transform")

    @property
    def rings(self) -> int:
        return self.ranges.shape[0]

    @property
    def columns(self) -> int:
        return self.ranges.shape[1]

    @property
    def valid(self) -> np.ndarray:
        with np.errstate(invalid="ignore"):
            return np.isfinite(self.ranges) & (self.ranges > 0)

    @property
    def azimuths(self) -> np.ndarray:
        return 2.0 * np.pi * np.arange(self.columns) / self.columns

    def points(self) -> np.ndarray:
        """Sensor-frame xyz for every cell, shape ``(rings, columns, 3)``.

        Invalid cells come out as NaN.
        """
        r = np.where(self.valid, self.ranges, np.nan)
        el = self.elevations[:, None]
        az = self.azimuths[None, :]
        return np.stack(
            [r * np.cos(el) * np.cos(az), r * np.cos(el) * np.sin(az), r * np.sin(el)],
            axis=-1,
        )


def save_scan(path, scan: OrganizedScan) -> None:
    # np.savez writes fixed zip timestamps, so output is reproducible
    with open(path, "wb") as fh:
        np.savez(
            fh,
            ranges=scan.ranges,
            elevations=scan.elevations,
            sensor_pose=scan.sensor_pose,
            timestamp=np.float64(scan.timestamp),
        )


def load_scan(path) -> OrganizedScan:
    with np.load(Path(path)) as data:
        return OrganizedScan(
            ranges=data["ranges"],
            elevations=data["elevations"],
            sensor_pose=data["sensor_pose"],
            timestamp=float(data["timestamp"]),
        )
