"""Domain randomization ranges (all uniform) used for training-style episodes."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields, replace

Range = tuple[float, float]


@dataclass(frozen=True)
class RandomizationProfile:
    base_position_noise: Range = (-0.03, 0.03)  # m, per axis
    base_yaw_noise: Range = (-2.0, 2.0)  # deg
    base_linear_velocity_noise: Range = (-0.10, 0.10)  # m/s, per axis
    base_angular_velocity_noise: Range = (-0.15, 0.15)  # rad/s
    obstacle_initial_position: Range = (-3.0, 3.0)  # m, per axis, relative to robot
    obstacle_speed: Range = (0.5, 4.0)  # m/s
    obstacle_position_noise: Range = (-0.05, 0.05)  # m, per axis
    obstacle_velocity_noise: Range = (-0.20, 0.20)  # m/s, per axis
    dropout_probability: float = 0.05
    dropout_hold_steps: tuple[int, int] = (1, 3)
    friction_factor: Range = (0.6, 1.2)
    latency: Range = (0.00, 0.06)  # s

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                if len(v) != 2 or not v[0] <= v[1]:
                    raise ValueError(f"{f.name}: range must be (low, high) with low <= high, got {v}")
                if not all(math.isfinite(x) for x in v):
                    raise ValueError(f"{f.name}: range must be finite")
        if not 0.0 <= self.dropout_probability <= 1.0:
            raise ValueError("dropout_probability must lie in [0, 1]")
        if self.dropout_hold_steps[0] < 1:
            raise ValueError("dropout must hold at least one step")
        if self.friction_factor[0] <= 0:
            raise ValueError("friction factor must be positive")
        if self.latency[0] < 0:
            raise ValueError("latency must be non-negative")

    @classmethod
    def exact(cls, **overrides) -> "RandomizationProfile":
        """Noise-free sensing, no dropout, unit friction, zero latency."""
        base = cls(
            base_position_noise=(0.0, 0.0),
            base_yaw_noise=(0.0, 0.0),
            base_linear_velocity_noise=(0.0, 0.0),
            base_angular_velocity_noise=(0.0, 0.0),
            obstacle_position_noise=(0.0, 0.0),
            obstacle_velocity_noise=(0.0, 0.0),
            dropout_probability=0.0,
            friction_factor=(1.0, 1.0),
            latency=(0.0, 0.0),
        )
        return replace(base, **overrides)

    @classmethod
    def from_dict(cls, d: dict) -> "RandomizationProfile":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown randomization keys: {sorted(unknown)}")
        return cls(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()})

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self).items()}

    @staticmethod
    def std_of(r: Range) -> float:
        """Standard deviation of U(r) (width / sqrt(12))."""
        return (r[1] - r[0]) / math.sqrt(12.0)
