"""Closed-loop evaluation: noisy rollouts, metrics, paired benchmarking.

Observation noise is uniform per component with amplitude proportional to
the component magnitude, applied to the model input only; the simulator
always integrates the true state.  Benchmarks are paired: every policy
sees the same starts, goals, and noise draws (common random numbers), so
row-to-row differences isolate the policy.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dynamics as dyn
from . import head as hd
from . import qp
from .autodiff import mse_loss
from .tasks import Task


class UnsafeStart(Exception):
    pass


class EmptyInput(Exception):
    pass


@dataclass
class RunSpec:
    start: np.ndarray
    goal: np.ndarray
    noise_seed: int


@dataclass
class Trajectory:
    states: np.ndarray         # (T+1, n), includes the final state
    controls: np.ndarray       # (T, q)
    b_values: np.ndarray       # (T+1,)
    head_controls: np.ndarray  # (T, h, q)
    weights: np.ndarray        # (T, h)
    flags: dict                # flag -> count

    @property
    def min_b(self) -> float:
        return float(np.min(self.b_values))

    @property
    def clean(self) -> bool:
        """No infeasible/singular/fallback events anywhere in the run."""
        return not self.flags


@dataclass
class MetricsReport:
    name: str
    mse_mean: float
    mse_std: float
    safety: float
    conser_mean: float
    conser_std: float
    u_uncertainty: list
    crashes: int
    runs: int
    flags: dict = field(default_factory=dict)
    failed: bool = False

    def row(self) -> dict:
        return {
            "model": self.name,
            "mse_mean": self.mse_mean,
            "mse_std": self.mse_std,
            "safety": self.safety,
            "conser_mean": self.conser_mean,
            "conser_std": self.conser_std,
            "u1_uncertainty": self.u_uncertainty[0],
            "u2_uncertainty": self.u_uncertainty[1] if len(self.u_uncertainty) > 1 else 0.0,
            "crashes": self.crashes,
            "runs": self.runs,
            "flags": ";".join(f"{k}={v}" for k, v in sorted(self.flags.items())),
        }


def sample_runs(task: Task, n_runs: int, seed: int) -> list:
    """Paired run specs: identical across every policy evaluated on them."""
    specs = []
    for k in range(n_runs):
        rng = np.random.default_rng([seed, k, 11])
        start, goal = task.sample_start_goal(rng)
        specs.append(RunSpec(start, goal, int(rng.integers(2 ** 31))))
    return specs


def sample_scenario_groups(task: Task, n_scenarios: int, replays: int, seed: int) -> list:
    """Scenario groups: each group shares one (start, goal) and varies only
    the noise realization, so the across-run control spread inside a group
    measures noise response rather than scenario diversity."""
    groups = []
    for s in range(n_scenarios):
        rng = np.random.default_rng([seed, s, 13])
        start, goal = task.sample_start_goal(rng)
        groups.append([RunSpec(start, goal, int(rng.integers(2 ** 31)))
                       for _ in range(replays)])
    return groups


def evaluate_grouped(name: str, policy, task: Task, groups: list, horizon: int,
                     noise: float) -> MetricsReport:
    """Uncertainty averaged over per-scenario groups; safety over all runs."""
    group_reports = []
    all_trajs = []
    for g, specs in enumerate(groups):
        report, trajs = evaluate_policy(f"{name}/s{g}", policy, task, specs,
                                        horizon, noise)
        group_reports.append(report)
        all_trajs.extend(trajs)
    total = compute_metrics(name, all_trajs, None, policy, task)
    q = task.sys.q
    total.u_uncertainty = [float(np.mean([r.u_uncertainty[i] for r in group_reports]))
                           for i in range(q)]
    return total


def closed_loop_run(policy, task: Task, start, goal, horizon: int,
                    noise: float = 0.0, noise_seed: int = 0) -> Trajectory:
    """Roll the policy for `horizon` steps from a safe start."""
    x = np.asarray(start, dtype=np.float64)
    if task.b_min(x) < 0:
        raise UnsafeStart(f"b(start) = {task.b_min(x):.3e} < 0")
    rng = np.random.default_rng(noise_seed)
    q = task.sys.q
    states = [x.copy()]
    b_values = [task.b_min(x)]
    controls, head_controls, weights, flags = [], [], [], {}
    h_max = 1
    for _ in range(horizon):
        z = task.observe(x, goal)
        if noise > 0:
            z = z + rng.uniform(-noise, noise, size=z.shape) * np.abs(z)
        try:
            res = policy.act(task, x, z, goal=goal)
            u = res.u
            hc = res.head_controls
            w = res.weights
            for f in res.flags:
                flags[f] = flags.get(f, 0) + 1
        except qp.Infeasible:
            u = hd.fallback_control(task.sys)
            hc = u[None, :]
            w = np.array([1.0])
            flags["fallback_control"] = flags.get("fallback_control", 0) + 1
        h_max = max(h_max, hc.shape[0])
        controls.append(u)
        head_controls.append(hc)
        weights.append(w)
        x = dyn.step(task.sys, x, u, task.dt)
        states.append(x.copy())
        b_values.append(task.b_min(x))
    hc_arr = np.full((horizon, h_max, q), np.nan)
    w_arr = np.full((horizon, h_max), np.nan)
    for t, (hc, w) in enumerate(zip(head_controls, weights)):
        hc_arr[t, :hc.shape[0]] = hc
        w_arr[t, :w.shape[0]] = w
    return Trajectory(np.array(states), np.array(controls), np.array(b_values),
                      hc_arr, w_arr, flags)


def compute_metrics(name: str, trajectories: list, heldout, policy, task: Task) -> MetricsReport:
    """Safety/conservativeness/uncertainty over runs; MSE over held-out records."""
    if not trajectories:
        raise EmptyInput("no trajectories")
    per_run_min_b = np.array([t.min_b for t in trajectories])
    safety = float(np.min(per_run_min_b))
    conser_mean = float(np.mean(per_run_min_b))
    conser_std = float(np.std(per_run_min_b, ddof=1)) if len(trajectories) > 1 else 0.0

    q = trajectories[0].controls.shape[1]
    uncertainty = []
    for i in range(q):
        per_time_std = []
        max_t = max(t.controls.shape[0] for t in trajectories)
        for step in range(max_t):
            vals = [t.controls[step, i] for t in trajectories if t.controls.shape[0] > step]
            if len(vals) >= 2:
                per_time_std.append(float(np.std(vals, ddof=1)))
        uncertainty.append(float(np.mean(per_time_std)) if per_time_std else 0.0)

    mse_mean, mse_std = float("nan"), float("nan")
    if heldout is not None and heldout.n_records:
        errs = []
        for idx in range(heldout.n_records):
            res = policy.act(task, heldout.x[idx], heldout.z[idx], goal=heldout.goal[idx])
            errs.append(mse_loss(res.u, heldout.u[idx]))
        errs = np.array(errs)
        mse_mean = float(np.mean(errs))
        mse_std = float(np.std(errs, ddof=1)) if len(errs) > 1 else 0.0

    flags = {}
    for t in trajectories:
        for key, count in t.flags.items():
            flags[key] = flags.get(key, 0) + count
    crashes = int(np.sum(per_run_min_b < 0))
    return MetricsReport(name, mse_mean, mse_std, safety, conser_mean, conser_std,
                         uncertainty, crashes, len(trajectories), flags)


def _run_chunk(args):
    """Worker for parallel evaluation; rebuilds the task from its config
    (constraint callbacks cannot cross process boundaries)."""
    from .tasks import build_task
    task_config, policy, specs, horizon, noise = args
    task = build_task(task_config)
    return [closed_loop_run(policy, task, s.start, s.goal, horizon, noise, s.noise_seed)
            for s in specs]


def evaluate_policy(name: str, policy, task: Task, specs: list, horizon: int,
                    noise: float, heldout=None, workers: int = 1) -> tuple:
    """(MetricsReport, trajectories) for one policy over paired run specs.

    Runs are independent and individually seeded, so splitting them over
    workers cannot change the results, only the wall time.
    """
    if workers > 1 and len(specs) > 1:
        import concurrent.futures as cf
        workers = min(workers, len(specs))
        chunks = [specs[i::workers] for i in range(workers)]
        with cf.ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_run_chunk, [(task.config, policy, c, horizon, noise)
                                               for c in chunks]))
        # undo the round-robin split so trajectory k matches specs[k]
        trajectories = [None] * len(specs)
        for i, part in enumerate(parts):
            for j, traj in enumerate(part):
                trajectories[i + j * workers] = traj
    else:
        trajectories = [
            closed_loop_run(policy, task, s.start, s.goal, horizon, noise, s.noise_seed)
            for s in specs
        ]
    return compute_metrics(name, trajectories, heldout, policy, task), trajectories


def benchmark(named_policies: dict, task: Task, n_runs: int, horizon: int,
              noise: float, seed: int, heldout=None, workers: int = 1) -> tuple:
    """Paired comparison table; a failing policy yields a failed row, not an abort."""
    specs = sample_runs(task, n_runs, seed)
    reports, all_trajectories = {}, {}
    for name, policy in named_policies.items():
        try:
            report, trajs = evaluate_policy(name, policy, task, specs, horizon,
                                            noise, heldout, workers=workers)
        except Exception as exc:  # isolate per-model failures
            report = MetricsReport(name, float("nan"), float("nan"), float("nan"),
                                   float("nan"), float("nan"), [float("nan")] * task.sys.q,
                                   0, 0, {"error": 1}, failed=True)
            report.flags["error_detail"] = str(exc)[:80]
            trajs = []
        reports[name] = report
        all_trajectories[name] = trajs
    return reports, all_trajectories


def head_count_sweep(head_counts, task: Task, dataset, train_cfg: dict,
                     seeds, horizon: int, noise: float,
                     n_scenarios: int = 5, replays: int = 12) -> list:
    """Scalable-training curve: one row per (h, seed) with grouped metrics."""
    from . import model as mdl
    rows = []
    for h in head_counts:
        for seed in seeds:
            trained, _ = mdl.train_scalable(task, dataset, train_cfg, h=h, seed=seed)
            groups = sample_scenario_groups(task, n_scenarios, replays, seed=1000 + seed)
            report = evaluate_grouped(f"h{h}_s{seed}", trained, task, groups,
                                      horizon, noise)
            rows.append({"heads": h, "seed": seed, "safety": report.safety,
                         "conser_mean": report.conser_mean,
                         "u1_uncertainty": report.u_uncertainty[0],
                         "u2_uncertainty": report.u_uncertainty[1],
                         "crashes": report.crashes})
    return rows


# ---------------------------------------------------------------------------
# report emission


def write_reports(out_dir, reports: dict, trajectories: dict | None = None,
                  sweep_rows: list | None = None):
    """report.json + report.csv (+ traces/*.csv and sweep.csv when given)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = {name: vars(rep) for name, rep in reports.items()}
    with open(out_dir / "report.json", "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True, default=str)
    fieldnames = ["model", "mse_mean", "mse_std", "safety", "conser_mean",
                  "conser_std", "u1_uncertainty", "u2_uncertainty", "crashes",
                  "runs", "flags"]
    with open(out_dir / "report.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        for rep in reports.values():
            writer.writerow(rep.row())
    if trajectories:
        traces = out_dir / "traces"
        traces.mkdir(exist_ok=True)
        for name, trajs in trajectories.items():
            for k, traj in enumerate(trajs):
                path = traces / f"{name}_run{k:03d}.csv"
                with open(path, "w", newline="") as fh:
                    writer = csv.writer(fh)
                    q = traj.controls.shape[1]
                    writer.writerow(["t"] + [f"u{i+1}" for i in range(q)] + ["b"])
                    for t in range(traj.controls.shape[0]):
                        writer.writerow([t] + list(traj.controls[t]) + [traj.b_values[t]])
    if sweep_rows:
        with open(out_dir / "sweep.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(sweep_rows[0].keys()))
            writer.writeheader()
            writer.writerows(sweep_rows)
