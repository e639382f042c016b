"""Polar range-azimuth grid shared by the simulator and the evaluation metrics."""
from __future__ import annotations

import math
from dataclasses import dataclass


@dataclass(frozen=True)
class RadarGrid:
    """Linear mapping between (range_bin, azimuth_bin) and (meters, radians).

    Range bins span [r_min, r_max] meters, azimuth bins span [-fov/2, +fov/2]
    radians, both endpoint-inclusive.
    """

    height: int = 128
    width: int = 128
    r_min: float = 1.0
    r_max: float = 25.0
    fov: float = math.radians(90.0)

    def __post_init__(self):
        if self.r_min <= 0:
            raise ValueError(f"r_min must be positive, got {self.r_min}")
        if self.r_max <= self.r_min:
            raise ValueError(f"r_max {self.r_max} must exceed r_min {self.r_min}")
        if self.height < 2 or self.width < 2:
            raise ValueError(f"grid must be at least 2x2, got {self.height}x{self.width}")

    @property
    def range_step(self) -> float:
        return (self.r_max - self.r_min) / (self.height - 1)

    @property
    def azimuth_step(self) -> float:
        return self.fov / (self.width - 1)

    def range_of_bin(self, range_bin: float) -> float:
        return self.r_min + range_bin * self.range_step

    def azimuth_of_bin(self, azimuth_bin: float) -> float:
        return -self.fov / 2 + azimuth_bin * self.azimuth_step

    def bin_of_range(self, r: float) -> float:
        return (r - self.r_min) / self.range_step

    def bin_of_azimuth(self, az: float) -> float:
        return (az + self.fov / 2) / self.azimuth_step

    def distance(self, ref_bin: tuple[float, float], other_bin: tuple[float, float]) -> float:
        """Metric distance in meters between two grid locations.

        Azimuth displacement is converted through arc length at the reference
        location's range, so the reference argument order matters.
        """
        r_ref = self.range_of_bin(ref_bin[0])
        r_other = self.range_of_bin(other_bin[0])
        dtheta = self.azimuth_of_bin(ref_bin[1]) - self.azimuth_of_bin(other_bin[1])
        dr = r_ref - r_other
        return math.hypot(dr, r_ref * dtheta)

    def to_dict(self) -> dict:
        return {
            "height": self.height,
            "width": self.width,
            "r_min": self.r_min,
            "r_max": self.r_max,
            "fov": self.fov,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RadarGrid":
        return cls(**d)
