"""Ground-truth label generation.

The expert is a fixed-parameter barrier-QP controller: a proportional
goal-tracking law gives a reference control, and the same constraint rows
the learned heads use (with hand-picked constant penalties) filter it for
safety.  Rolling the expert closed-loop from random starts to random goals
produces the imitation datasets.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dynamics as dyn
from . import head as hd
from . import hocbf, qp
from .tasks import Task, arm_ik, wrap_angle

DATASET_VERSION = 1


class SamplingExhausted(Exception):
    pass


@dataclass
class Dataset:
    task_id: str
    seed: int
    config_hash: str
    x: np.ndarray          # (N, n) states
    z: np.ndarray          # (N, obs) observations
    goal: np.ndarray       # (N, goal_dim)
    u: np.ndarray          # (N, q) expert labels
    traj: np.ndarray       # (N,) trajectory ids
    t: np.ndarray          # (N,) time indices
    goal_reached: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    @property
    def n_records(self) -> int:
        return self.x.shape[0]

    @property
    def n_trajectories(self) -> int:
        return int(self.traj.max()) + 1 if self.n_records else 0

    def split(self, val_fraction: float):
        """(val_indices, train_indices), split by whole trajectories."""
        traj_ids = np.unique(self.traj)
        n_val = max(1, int(round(len(traj_ids) * val_fraction))) if val_fraction > 0 else 0
        val_trajs = set(traj_ids[:n_val].tolist())
        val_mask = np.isin(self.traj, list(val_trajs)) if n_val else np.zeros(self.n_records, bool)
        idx = np.arange(self.n_records)
        return idx[val_mask], idx[~val_mask]

    def subset(self, indices) -> "Dataset":
        return Dataset(self.task_id, self.seed, self.config_hash,
                       self.x[indices], self.z[indices], self.goal[indices],
                       self.u[indices], self.traj[indices], self.t[indices],
                       self.goal_reached)


def tracking_control(task: Task, x: np.ndarray, goal: np.ndarray) -> np.ndarray:
    """Proportional goal-tracking reference, before the safety filter."""
    e = task.expert
    if task.task_id == "robot2d":
        dx, dy = goal[0] - x[0], goal[1] - x[1]
        dist = float(np.hypot(dx, dy))
        tol = float(e["goal_tolerance"])
        bearing = wrap_angle(np.arctan2(dy, dx) - x[2])
        # bearing is undefined at the goal; fade the heading command out
        u1 = e["heading_gain"] * bearing * min(1.0, dist / tol)
        # steer away from the obstacle when it sits roughly ahead: the
        # safety filter alone only brakes, which deadlocks the robot on
        # the boundary with v = 0 for head-on approaches
        ox, oy = task.config["dynamics"]["obstacle"]
        radius = task.config["dynamics"]["radius"]
        obs_margin = float(np.hypot(ox - x[0], oy - x[1])) - radius
        obs_bearing = wrap_angle(np.arctan2(oy - x[1], ox - x[0]) - x[2])
        influence = float(e.get("avoid_distance", 2.0))
        if obs_margin < influence and abs(obs_bearing) < np.pi / 2:
            side = 1.0 if obs_bearing >= 0.0 else -1.0
            falloff = (1.0 - max(obs_margin, 0.0) / influence) ** 2
            u1 -= float(e.get("avoid_gain", 2.0)) * side * falloff
        v_des = min(e["cruise_speed"], e["speed_gain"] * dist)
        if dist > tol:
            # never brake to a standstill away from the goal: at v = 0 the
            # barrier row loses its steering coefficient entirely
            v_des = max(v_des, float(e.get("min_speed", 0.3)))
        u2 = e["accel_gain"] * (v_des - x[3])
        return np.array([u1, u2])
    if task.task_id == "arm2":
        l1 = task.config["dynamics"]["l1"]
        l2 = task.config["dynamics"]["l2"]
        t1d, t2d = arm_ik(goal[0], goal[1], l1, l2)
        u1 = e["kp"] * wrap_angle(t1d - x[0]) - e["kd"] * x[1]
        u2 = e["kp"] * wrap_angle(t2d - x[2]) - e["kd"] * x[3]
        u = np.array([u1, u2])
        # tangential push around the obstacle, mapped to the joints through
        # the end-effector Jacobian transpose; without it the PD pins the
        # end effector on the barrier boundary for through-obstacle targets
        ox, oy = task.config["dynamics"]["obstacle"]
        radius = task.config["dynamics"]["radius"]
        ee = np.array(dyn.fk(x[0], x[2], l1, l2))
        rel = ee - np.array([ox, oy])
        margin = float(np.linalg.norm(rel)) - radius
        influence = float(e.get("avoid_distance", 0.4))
        if 0.0 < np.linalg.norm(rel) and margin < influence:
            radial = rel / np.linalg.norm(rel)
            tangent = np.array([-radial[1], radial[0]])
            to_goal = goal - ee
            side = 1.0 if float(tangent @ to_goal) >= 0.0 else -1.0
            falloff = (1.0 - max(margin, 0.0) / influence) ** 2
            force = float(e.get("avoid_gain", 6.0)) * side * falloff * tangent
            jac = np.array([[-l1 * np.sin(x[0]), -l2 * np.sin(x[2])],
                            [l1 * np.cos(x[0]), l2 * np.cos(x[2])]])
            u = u + jac.T @ force
        return u
    raise ValueError(f"no tracking law for task {task.task_id!r}")


def expert_control(task: Task, x, goal) -> np.ndarray:
    """Safety-filtered expert label: identity cost, fixed penalties."""
    x = np.asarray(x, dtype=np.float64)
    u_ref = tracking_control(task, x, goal)
    p1 = float(task.expert["p1"])
    p2 = float(task.expert["p2"])
    rows = [hocbf.assemble_row(c, task.sys, x, p1, p2) for c in task.cascades]
    Gb, hb = hd.box_rows(task.sys)
    G = np.vstack([np.array([r.as_qp_row()[0] for r in rows]), Gb])
    h = np.concatenate([np.array([r.as_qp_row()[1] for r in rows]), hb])
    prob = qp.QpProblem(np.eye(task.sys.q), -u_ref, G, h)
    sol = qp.solve(prob)
    return sol.u_star


class ExpertPolicy:
    """Expert wrapped in the common policy interface (uses true state + goal)."""

    def __init__(self, task: Task):
        self.task_id = task.task_id
        self.config_hash = task.config_hash

    def act(self, task: Task, x, z, goal=None):
        from .model import ActResult
        u = expert_control(task, x, goal)
        return ActResult(u, u[None, :], np.array([1.0]))


def _goal_reached(task: Task, x, goal) -> bool:
    tol = float(task.expert["goal_tolerance"])
    if task.task_id == "robot2d":
        return float(np.hypot(goal[0] - x[0], goal[1] - x[1])) <= tol
    ex, ey = dyn.fk(x[0], x[2], task.config["dynamics"]["l1"], task.config["dynamics"]["l2"])
    return float(np.hypot(goal[0] - ex, goal[1] - ey)) <= tol


def _roll_expert(task: Task, x0, goal, horizon: int, truncate_at_goal: bool):
    """Closed-loop expert rollout; returns per-step records or None on failure."""
    x = np.asarray(x0, dtype=np.float64)
    if task.b_min(x) < 0:
        return None
    xs, zs, us, reached = [], [], [], False
    for step_idx in range(horizon):
        if task.b_min(x) < 0:
            return None
        try:
            u = expert_control(task, x, goal)
        except (qp.Infeasible, hocbf.DegenerateRow):
            return None
        xs.append(x.copy())
        zs.append(task.observe(x, goal))
        us.append(u)
        x = dyn.step(task.sys, x, u, task.dt)
        if truncate_at_goal and _goal_reached(task, x, goal):
            reached = True
            break
    if task.b_min(x) < 0:
        return None
    if not reached:
        reached = _goal_reached(task, x, goal)
    return np.array(xs), np.array(zs), np.array(us), reached


def generate_dataset(task: Task, seed: int, trajectories: int | None = None,
                     max_retries: int = 50) -> Dataset:
    """Deterministic dataset: roll the expert from sampled starts to goals.

    The 2D task records a fixed-length horizon; the arm draws a jittered
    horizon and truncates on goal arrival.  Any trajectory that dips below
    b = 0, goes infeasible, or hits the singular set is resampled.
    """
    n_traj = int(trajectories if trajectories is not None else task.expert["trajectories"])
    horizon = int(task.expert["horizon"])
    jitter = float(task.expert.get("horizon_jitter", 0.0))
    truncate = task.task_id != "robot2d"

    xs, zs, goals, us, trajs, ts = [], [], [], [], [], []
    reached_flags = []
    for i in range(n_traj):
        result = None
        for attempt in range(max_retries):
            rng = np.random.default_rng([seed, i, attempt])
            x0, goal = task.sample_start_goal(rng)
            hz = horizon
            if jitter:
                hz = int(round(horizon * (1.0 + rng.uniform(-jitter, jitter))))
            result = _roll_expert(task, x0, goal, hz, truncate)
            if result is not None:
                break
        if result is None:
            raise SamplingExhausted(f"trajectory {i}: {max_retries} resamples failed")
        traj_x, traj_z, traj_u, reached = result
        n = traj_x.shape[0]
        xs.append(traj_x)
        zs.append(traj_z)
        us.append(traj_u)
        goals.append(np.tile(goal, (n, 1)))
        trajs.append(np.full(n, i, dtype=np.int64))
        ts.append(np.arange(n, dtype=np.int64))
        reached_flags.append(reached)

    return Dataset(task.task_id, seed, task.config_hash,
                   np.concatenate(xs), np.concatenate(zs), np.concatenate(goals),
                   np.concatenate(us), np.concatenate(trajs), np.concatenate(ts),
                   np.array(reached_flags, dtype=bool))


def dataset_min_b(task: Task, ds: Dataset) -> float:
    return min(task.b_min(ds.x[i]) for i in range(ds.n_records))


# ---------------------------------------------------------------------------
# JSON-lines serialization


def save_dataset(ds: Dataset, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {"format_version": DATASET_VERSION, "task": ds.task_id, "seed": ds.seed,
              "config_hash": ds.config_hash, "records": int(ds.n_records)}
    with open(path, "w") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for i in range(ds.n_records):
            row = {"traj": int(ds.traj[i]), "t": int(ds.t[i]),
                   "x": ds.x[i].tolist(), "z": ds.z[i].tolist(),
                   "goal": ds.goal[i].tolist(), "u_star": ds.u[i].tolist()}
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    return path


def load_dataset(path) -> Dataset:
    with open(path) as fh:
        header = json.loads(fh.readline())
        if header.get("format_version") != DATASET_VERSION:
            raise ValueError(f"unsupported dataset version {header.get('format_version')}")
        xs, zs, goals, us, trajs, ts = [], [], [], [], [], []
        for line in fh:
            row = json.loads(line)
            xs.append(row["x"])
            zs.append(row["z"])
            goals.append(row["goal"])
            us.append(row["u_star"])
            trajs.append(row["traj"])
            ts.append(row["t"])
    return Dataset(header["task"], header["seed"], header["config_hash"],
                   np.array(xs), np.array(zs), np.array(goals), np.array(us),
                   np.array(trajs, dtype=np.int64), np.array(ts, dtype=np.int64))
