"""Affine control systems xdot = f(x) + g(x)u for the two benchmark robots.

Each task registers its safety constraint together with analytic Lie
derivatives (b, L_f b, L_f^2 b, L_g L_f b); both constraints have relative
degree 2, i.e. the control first appears in the second time derivative
of b along the dynamics.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

log = logging.getLogger(__name__)


class NonFiniteState(Exception):
    pass


class UnknownConstraint(Exception):
    pass


@dataclass
class SafetyConstraint:
    """b(x) >= 0 with analytic derivative callbacks along one system."""

    constraint_id: str
    b: Callable[[np.ndarray], float]
    lie: Callable[[np.ndarray], tuple]   # x -> (b, Lf_b, Lf2_b, LgLf_b)
    lg_b: Callable[[np.ndarray], np.ndarray]  # should be identically zero (degree 2)


@dataclass
class AffineSystem:
    n: int
    q: int
    f: Callable[[np.ndarray], np.ndarray]
    g: Callable[[np.ndarray], np.ndarray]
    control_bounds: np.ndarray            # (q, 2) rows [lo, hi]
    constraints: dict = field(default_factory=dict)

    def register(self, constraint: SafetyConstraint):
        self.constraints[constraint.constraint_id] = constraint

    def lie_derivatives(self, constraint_id: str, x: np.ndarray):
        """(b, L_f b, L_f^2 b, L_g L_f b) at x for a registered constraint."""
        try:
            con = self.constraints[constraint_id]
        except KeyError:
            raise UnknownConstraint(constraint_id) from None
        return con.lie(np.asarray(x, dtype=np.float64))

    def clamp(self, u: np.ndarray) -> np.ndarray:
        lo, hi = self.control_bounds[:, 0], self.control_bounds[:, 1]
        return np.clip(u, lo, hi)


def step(sys: AffineSystem, x: np.ndarray, u: np.ndarray, dt: float) -> np.ndarray:
    """One explicit Euler step; controls outside the bounds are clamped."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    x = np.asarray(x, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    clamped = sys.clamp(u)
    if np.max(np.abs(clamped - u)) > 1e-9:
        log.warning("control clamped to bounds: %s -> %s", u, clamped)
    x_next = x + dt * (sys.f(x) + sys.g(x) @ clamped)
    if not np.all(np.isfinite(x_next)):
        raise NonFiniteState(f"state diverged: {x_next}")
    return x_next


# ---------------------------------------------------------------------------
# 2D robot (bicycle model): state (x, y, theta, v), controls (turn rate, accel)


def robot2d_f(x):
    return np.array([x[3] * np.cos(x[2]), x[3] * np.sin(x[2]), 0.0, 0.0])


def robot2d_g(x):
    return np.array([[0.0, 0.0], [0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])


def robot2d_system(obstacle=(0.0, 0.0), radius=1.0,
                   bounds=((-3.0, 3.0), (-5.0, 5.0))) -> AffineSystem:
    """Planar robot with one circular-obstacle constraint b = d^2 - R^2."""
    x0, y0 = float(obstacle[0]), float(obstacle[1])
    R = float(radius)
    sys = AffineSystem(4, 2, robot2d_f, robot2d_g, np.array(bounds, dtype=np.float64))

    def b(x):
        return (x[0] - x0) ** 2 + (x[1] - y0) ** 2 - R * R

    def lie(x):
        dx, dy = x[0] - x0, x[1] - y0
        ct, st = np.cos(x[2]), np.sin(x[2])
        v = x[3]
        bv = dx * dx + dy * dy - R * R
        lf = 2.0 * dx * v * ct + 2.0 * dy * v * st
        lf2 = 2.0 * v * v
        lglf = np.array([-2.0 * dx * v * st + 2.0 * dy * v * ct,
                         2.0 * dx * ct + 2.0 * dy * st])
        return bv, lf, lf2, lglf

    def lg_b(x):
        # grad b has zeros in the theta and v slots, which are the only
        # actuated states, so L_g b vanishes identically
        return np.zeros(2)

    sys.register(SafetyConstraint("obstacle", b, lie, lg_b))
    return sys


# ---------------------------------------------------------------------------
# two-link planar arm with absolute joint angles:
# state (theta1, omega1, theta2, omega2), controls (joint accelerations)


def arm_f(x):
    return np.array([x[1], 0.0, x[3], 0.0])


def arm_g(x):
    return np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 0.0], [0.0, 1.0]])


def fk(theta1: float, theta2: float, l1: float = 1.0, l2: float = 1.0):
    """End-effector position; both angles are absolute (measured from +x)."""
    return (l1 * np.cos(theta1) + l2 * np.cos(theta2),
            l1 * np.sin(theta1) + l2 * np.sin(theta2))


def two_link_system(l1=1.0, l2=1.0, obstacle=(1.2, 1.2), radius=0.3,
                    bounds=((-10.0, 10.0), (-10.0, 10.0))) -> AffineSystem:
    """Double-integrator joints with an end-effector obstacle constraint."""
    x0, y0 = float(obstacle[0]), float(obstacle[1])
    R = float(radius)
    l1, l2 = float(l1), float(l2)
    sys = AffineSystem(4, 2, arm_f, arm_g, np.array(bounds, dtype=np.float64))

    def b(x):
        ex, ey = fk(x[0], x[2], l1, l2)
        return (ex - x0) ** 2 + (ey - y0) ** 2 - R * R

    def lie(x):
        t1, w1, t2, w2 = x
        ex, ey = fk(t1, t2, l1, l2)
        dx, dy = ex - x0, ey - y0
        bv = dx * dx + dy * dy - R * R
        # A_i = d b / d theta_i
        A1 = 2.0 * l1 * (dy * np.cos(t1) - dx * np.sin(t1))
        A2 = 2.0 * l2 * (dy * np.cos(t2) - dx * np.sin(t2))
        lf = A1 * w1 + A2 * w2
        dA1_dt1 = 2.0 * l1 * (l1 - dx * np.cos(t1) - dy * np.sin(t1))
        dA2_dt2 = 2.0 * l2 * (l2 - dx * np.cos(t2) - dy * np.sin(t2))
        cross = 2.0 * l1 * l2 * np.cos(t2 - t1)
        lf2 = w1 * w1 * dA1_dt1 + 2.0 * w1 * w2 * cross + w2 * w2 * dA2_dt2
        lglf = np.array([A1, A2])
        return bv, lf, lf2, lglf

    def lg_b(x):
        return np.zeros(2)

    sys.register(SafetyConstraint("obstacle", b, lie, lg_b))
    return sys
