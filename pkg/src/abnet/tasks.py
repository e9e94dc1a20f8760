"""Task wiring: dynamics + safety cascade + observation + samplers per task id.

A Task is everything the training and evaluation code needs to know about
one robot problem; it is rebuilt deterministically from a resolved config
dict, and its hash ties checkpoints and datasets to the problem they were
produced for.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import dynamics as dyn
from . import hocbf
from .config import ConfigError, task_config_hash


def wrap_angle(a: float) -> float:
    """Wrap to (-pi, pi]."""
    return float((a + np.pi) % (2 * np.pi) - np.pi)


@dataclass
class Task:
    task_id: str
    sys: dyn.AffineSystem
    cascades: list
    dt: float
    obs_dim: int
    goal_dim: int
    observe: Callable[[np.ndarray, np.ndarray], np.ndarray]
    sample_start_goal: Callable[[np.random.Generator], tuple]
    backbone_hidden: list
    penalty_hidden: list
    expert: dict
    config: dict
    config_hash: str

    @property
    def q(self) -> int:
        return self.sys.q

    def backbone_dims(self) -> list:
        # outputs: q reference controls, q raw barrier-cost diagonals, 1 raw
        # head penalty
        return [self.obs_dim, *self.backbone_hidden, 2 * self.q + 1]

    def penalty_dims(self) -> list:
        m = self.cascades[0].rel_degree
        return [self.obs_dim, *self.penalty_hidden, m - 1]

    def b_min(self, x) -> float:
        return min(self.sys.constraints[c.constraint_id].b(np.asarray(x, float))
                   for c in self.cascades)


def _build_robot2d(cfg: dict) -> Task:
    d = cfg["dynamics"]
    s = cfg["sampling"]
    sys = dyn.robot2d_system(obstacle=d["obstacle"], radius=d["radius"],
                             bounds=(d["u1_bounds"], d["u2_bounds"]))
    cascade = hocbf.HocbfCascade("obstacle")

    def observe(x, goal):
        bearing = wrap_angle(np.arctan2(goal[1] - x[1], goal[0] - x[0]) - x[2])
        return np.array([x[0], x[1], x[2], x[3], bearing])

    def sample_start_goal(rng):
        start_xy = np.array([rng.uniform(*s["start_x"]), rng.uniform(*s["start_y"])])
        goal = np.array([rng.uniform(*s["goal_x"]), rng.uniform(*s["goal_y"])])
        heading = np.arctan2(goal[1] - start_xy[1], goal[0] - start_xy[0])
        heading += rng.uniform(-s["heading_jitter"], s["heading_jitter"])
        speed = rng.uniform(*s["start_speed"])
        x0 = np.array([start_xy[0], start_xy[1], wrap_angle(heading), speed])
        return x0, goal

    return Task(
        task_id="robot2d", sys=sys, cascades=[cascade], dt=float(d["dt"]),
        obs_dim=5, goal_dim=2, observe=observe, sample_start_goal=sample_start_goal,
        backbone_hidden=list(cfg["model"]["hidden"]),
        penalty_hidden=list(cfg["model"]["penalty_hidden"]),
        expert=dict(cfg["expert"]), config=cfg, config_hash=task_config_hash(cfg),
    )


def arm_ik(gx: float, gy: float, l1: float, l2: float):
    """Absolute joint angles placing the end effector at (gx, gy), elbow-up."""
    r2 = gx * gx + gy * gy
    cos_rel = (r2 - l1 * l1 - l2 * l2) / (2.0 * l1 * l2)
    rel = np.arccos(np.clip(cos_rel, -1.0, 1.0))
    t1 = np.arctan2(gy, gx) - np.arctan2(l2 * np.sin(rel), l1 + l2 * np.cos(rel))
    return wrap_angle(t1), wrap_angle(t1 + rel)


def _build_arm2(cfg: dict) -> Task:
    d = cfg["dynamics"]
    s = cfg["sampling"]
    l1, l2 = float(d["l1"]), float(d["l2"])
    obstacle = np.asarray(d["obstacle"], dtype=np.float64)
    radius = float(d["radius"])
    sys = dyn.two_link_system(l1=l1, l2=l2, obstacle=obstacle, radius=radius,
                              bounds=(d["u1_bounds"], d["u2_bounds"]))
    cascade = hocbf.HocbfCascade("obstacle")
    margin = float(s["obstacle_margin"])

    def observe(x, goal):
        return np.array([x[0], x[1], x[2], x[3], goal[0], goal[1]])

    def sample_ee_point(rng):
        for _ in range(200):
            r = rng.uniform(*s["reach"])
            a = rng.uniform(*s["angle_range"])
            p = np.array([r * np.cos(a), r * np.sin(a)])
            if np.linalg.norm(p - obstacle) >= radius + margin:
                return p
        raise ConfigError("end-effector sampling region excludes almost nothing")

    def sample_start_goal(rng):
        start_p = sample_ee_point(rng)
        goal = sample_ee_point(rng)
        t1, t2 = arm_ik(start_p[0], start_p[1], l1, l2)
        w1 = rng.uniform(*s["start_rate"])
        w2 = rng.uniform(*s["start_rate"])
        return np.array([t1, w1, t2, w2]), goal

    return Task(
        task_id="arm2", sys=sys, cascades=[cascade], dt=float(d["dt"]),
        obs_dim=6, goal_dim=2, observe=observe, sample_start_goal=sample_start_goal,
        backbone_hidden=list(cfg["model"]["hidden"]),
        penalty_hidden=list(cfg["model"]["penalty_hidden"]),
        expert=dict(cfg["expert"]), config=cfg, config_hash=task_config_hash(cfg),
    )


_BUILDERS = {"robot2d": _build_robot2d, "arm2": _build_arm2}


def build_task(cfg: dict) -> Task:
    try:
        builder = _BUILDERS[cfg["task"]]
    except KeyError:
        raise ConfigError(f"unknown task {cfg.get('task')!r}") from None
    return builder(cfg)
