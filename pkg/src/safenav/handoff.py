"""Threat-gated blending of navigation and reflex commands."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .controllers import RewardBreakdown
from .state import Command, ZERO_COMMAND


@dataclass(frozen=True)
class HandoffConfig:
    threat_low: float = 0.2
    threat_high: float = 0.6
    rate_limits: tuple[float, float, float] = (0.3, 0.3, 0.6)  # per control step
    alpha_nav: float = 1.0
    alpha_refl: float = 1.0
    alpha_smooth: float = 0.05
    alpha_rp_stab: float = 1.0
    eps: float = 1e-3

    def __post_init__(self):
        if not 0.0 <= self.threat_low < self.threat_high <= 1.0:
            raise ValueError("need 0 <= threat_low < threat_high <= 1")
        if len(self.rate_limits) != 3 or min(self.rate_limits) <= 0:
            raise ValueError("rate limits must be three positive numbers")
        if self.eps <= 0:
            raise ValueError("eps must be positive")


@dataclass
class HandoffState:
    previous: Command = field(default_factory=lambda: ZERO_COMMAND)


def threat_gate(T: float, cfg: HandoffConfig = HandoffConfig()) -> float:
    """Smoothstep from 0 at ``threat_low`` to 1 at ``threat_high``."""
    if T <= cfg.threat_low:
        return 0.0
    if T >= cfg.threat_high:
        return 1.0
    s = (T - cfg.threat_low) / (cfg.threat_high - cfg.threat_low)
    return s * s * (3.0 - 2.0 * s)


def _step_toward(prev: float, target: float, limit: float) -> float:
    out = min(max(target, prev - limit), prev + limit)
    # prev +/- limit can round one ulp past the limit; pull it back so |out - prev| <= limit holds exactly
    while abs(out - prev) > limit:
        out = math.nextafter(out, prev)
    return out


def fuse(u_nav: Command, u_refl: Command, T: float, state: HandoffState,
         cfg: HandoffConfig = HandoffConfig()) -> tuple[Command, HandoffState]:
    g = threat_gate(T, cfg)
    if g == 0.0:
        raw = u_nav
    elif g == 1.0:
        raw = u_refl
    else:
        raw = Command(*((1.0 - g) * a + g * b for a, b in zip(u_nav, u_refl)))
    prev = state.previous
    out = Command(*(_step_toward(p, r, lim) for p, r, lim in zip(prev, raw, cfg.rate_limits)))
    return out, HandoffState(out)


def hard_switch(u_nav: Command, u_refl: Command, T: float, threshold: float = 0.5) -> Command:
    return u_refl if T >= threshold else u_nav


def handoff_rewards(u_fuse: Command, u_nav: Command, u_refl: Command, T: float, du_fuse: Command,
                    tilt_sq: float, cfg: HandoffConfig = HandoffConfig()) -> RewardBreakdown:
    g = threat_gate(T, cfg)
    d_nav = (u_fuse - u_nav).norm() ** 2
    d_refl = (u_fuse - u_refl).norm() ** 2
    return RewardBreakdown(
        coord=(1 - g) * math.exp(-cfg.alpha_nav * d_nav) + g * math.exp(-cfg.alpha_refl * d_refl),
        smooth=math.tanh(cfg.alpha_smooth / (du_fuse.norm() + cfg.eps)),
        stable=math.exp(-cfg.alpha_rp_stab * tilt_sq),
    )
