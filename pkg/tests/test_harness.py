import numpy as np
import pytest

from abnet import config, expert, harness, tasks
from abnet import qp


def small_task():
    cfg = config.load_config("robot2d")
    cfg["model"]["hidden"] = [16]
    cfg["model"]["penalty_hidden"] = [8]
    return tasks.build_task(cfg)


@pytest.fixture(scope="module")
def task():
    return small_task()


@pytest.fixture(scope="module")
def expert_policy(task):
    return expert.ExpertPolicy(task)


@pytest.fixture(scope="module")
def dataset(task):
    return expert.generate_dataset(task, seed=21, trajectories=4)


class TestClosedLoopRun:
    def test_expert_reproduces_dataset_trajectory(self, task, expert_policy, dataset):
        # zero noise + same start/goal = identical rollout to generation
        traj_id = 1
        mask = dataset.traj == traj_id
        xs = dataset.x[mask]
        us = dataset.u[mask]
        goal = dataset.goal[mask][0]
        run = harness.closed_loop_run(expert_policy, task, xs[0], goal,
                                      horizon=len(xs) - 1, noise=0.0)
        np.testing.assert_allclose(run.states[:len(xs)], xs, atol=1e-12)
        np.testing.assert_allclose(run.controls, us[:-1], atol=1e-12)

    def test_identical_seeds_zero_uncertainty(self, task, expert_policy):
        rng = np.random.default_rng(2)
        start, goal = task.sample_start_goal(rng)
        trajs = [harness.closed_loop_run(expert_policy, task, start, goal, 40,
                                         noise=0.1, noise_seed=7) for _ in range(5)]
        assert all(np.array_equal(t.controls, trajs[0].controls) for t in trajs)
        report = harness.compute_metrics("expert", trajs, None, expert_policy, task)
        # numpy's two-pass std leaves ~1e-18 residue on identical samples
        assert all(u < 1e-15 for u in report.u_uncertainty)
        assert report.conser_std < 1e-15

    def test_unsafe_start_rejected(self, task, expert_policy):
        with pytest.raises(harness.UnsafeStart):
            harness.closed_loop_run(expert_policy, task, [0.1, 0.0, 0.0, 1.0],
                                    [4.0, 0.0], 10)

    def test_b_recorded_every_step(self, task, expert_policy):
        rng = np.random.default_rng(3)
        start, goal = task.sample_start_goal(rng)
        run = harness.closed_loop_run(expert_policy, task, start, goal, 25)
        assert run.b_values.shape == (26,)
        assert run.states.shape == (26, 4)
        assert run.controls.shape == (25, 2)

    def test_infeasible_step_falls_back_and_flags(self, task, monkeypatch):
        class Broken:
            def act(self, task, x, z, goal=None):
                raise qp.Infeasible(1.0)

        rng = np.random.default_rng(4)
        start, goal = task.sample_start_goal(rng)
        run = harness.closed_loop_run(Broken(), task, start, goal, 5)
        assert run.flags.get("fallback_control") == 5
        np.testing.assert_allclose(run.controls, 0.0, atol=1e-9)
        assert not run.clean


class TestComputeMetrics:
    def test_single_run_degenerate_statistics(self, task, expert_policy):
        rng = np.random.default_rng(5)
        start, goal = task.sample_start_goal(rng)
        run = harness.closed_loop_run(expert_policy, task, start, goal, 30, noise=0.05)
        report = harness.compute_metrics("expert", [run], None, expert_policy, task)
        assert report.safety == report.conser_mean
        assert report.conser_std == 0.0
        assert report.u_uncertainty == [0.0, 0.0]

    def test_two_constant_runs_sample_std(self, task):
        # u1 = 0 in one run, u1 = 1 in the other: sample std = 1/sqrt(2)
        def const_traj(u1):
            T = 3
            return harness.Trajectory(
                states=np.zeros((T + 1, 4)), controls=np.column_stack([np.full(T, u1), np.zeros(T)]),
                b_values=np.ones(T + 1), head_controls=np.zeros((T, 1, 2)),
                weights=np.ones((T, 1)), flags={})

        report = harness.compute_metrics("c", [const_traj(0.0), const_traj(1.0)],
                                         None, None, task)
        assert report.u_uncertainty[0] == pytest.approx(np.sqrt(0.5), abs=1e-12)
        assert report.u_uncertainty[1] == 0.0

    def test_hand_built_b_tables(self, task):
        def traj_with_b(bs):
            T = len(bs) - 1
            return harness.Trajectory(
                states=np.zeros((T + 1, 4)), controls=np.zeros((T, 2)),
                b_values=np.array(bs, dtype=float), head_controls=np.zeros((T, 1, 2)),
                weights=np.ones((T, 1)), flags={})

        runs = [traj_with_b([3.0, 1.0, 2.0]), traj_with_b([5.0, 4.0, 6.0])]
        report = harness.compute_metrics("t", runs, None, None, task)
        assert report.safety == 1.0                       # min over runs of min_t b
        assert report.conser_mean == pytest.approx(2.5)   # mean of (1, 4)
        assert report.conser_std == pytest.approx(np.std([1.0, 4.0], ddof=1))
        assert report.crashes == 0

    def test_safety_not_above_conser_mean(self, task, expert_policy):
        specs = harness.sample_runs(task, 6, seed=6)
        report, _ = harness.evaluate_policy("expert", expert_policy, task, specs,
                                            horizon=40, noise=0.1)
        assert report.safety <= report.conser_mean

    def test_empty_input(self, task):
        with pytest.raises(harness.EmptyInput):
            harness.compute_metrics("x", [], None, None, task)

    def test_shorter_runs_excluded_from_late_std(self, task):
        def traj(levels, T):
            return harness.Trajectory(
                states=np.zeros((T + 1, 4)), controls=np.column_stack([np.full(T, levels), np.zeros(T)]),
                b_values=np.ones(T + 1), head_controls=np.zeros((T, 1, 2)),
                weights=np.ones((T, 1)), flags={})

        # three runs early (std over {0,1,2}), two runs late (std over {0,1})
        runs = [traj(0.0, 4), traj(1.0, 4), traj(2.0, 2)]
        report = harness.compute_metrics("t", runs, None, None, task)
        early = np.std([0.0, 1.0, 2.0], ddof=1)
        late = np.std([0.0, 1.0], ddof=1)
        expected = np.mean([early, early, late, late])
        assert report.u_uncertainty[0] == pytest.approx(expected, abs=1e-12)


class TestBenchmark:
    def test_same_model_twice_identical_rows(self, task, expert_policy):
        reports, _ = harness.benchmark({"a": expert_policy, "b": expert_policy},
                                       task, n_runs=4, horizon=30, noise=0.1, seed=7)
        ra, rb = reports["a"], reports["b"]
        assert ra.safety == rb.safety
        assert ra.u_uncertainty == rb.u_uncertainty
        assert ra.conser_mean == rb.conser_mean

    def test_expert_row_is_safe(self, task, expert_policy):
        reports, _ = harness.benchmark({"expert": expert_policy}, task,
                                       n_runs=6, horizon=60, noise=0.0, seed=8)
        assert reports["expert"].safety >= 0.0
        assert reports["expert"].crashes == 0

    def test_failing_model_isolated(self, task, expert_policy):
        class Exploding:
            def act(self, task, x, z, goal=None):
                raise RuntimeError("boom")

        reports, _ = harness.benchmark({"ok": expert_policy, "bad": Exploding()},
                                       task, n_runs=2, horizon=10, noise=0.0, seed=9)
        assert not reports["ok"].failed
        assert reports["bad"].failed

    def test_mse_against_heldout(self, task, expert_policy, dataset):
        specs = harness.sample_runs(task, 2, seed=10)
        report, _ = harness.evaluate_policy("expert", expert_policy, task, specs,
                                            horizon=10, noise=0.0, heldout=dataset)
        # the expert is its own label generator: zero error on its dataset
        assert report.mse_mean == pytest.approx(0.0, abs=1e-14)


class TestParallelEvaluation:
    def test_workers_do_not_change_results(self, task, expert_policy):
        specs = harness.sample_runs(task, 6, seed=12)
        rep1, trajs1 = harness.evaluate_policy("e", expert_policy, task, specs,
                                               horizon=20, noise=0.1, workers=1)
        rep2, trajs2 = harness.evaluate_policy("e", expert_policy, task, specs,
                                               horizon=20, noise=0.1, workers=2)
        assert rep1.safety == rep2.safety
        assert rep1.u_uncertainty == rep2.u_uncertainty
        for a, b in zip(trajs1, trajs2):
            np.testing.assert_array_equal(a.controls, b.controls)

    def test_worker_count_env_cap(self, monkeypatch):
        monkeypatch.setenv("ABNET_THREADS", "1")
        assert config.worker_count() == 1
        monkeypatch.setenv("ABNET_THREADS", "64")
        assert config.worker_count() >= 1
        monkeypatch.setenv("ABNET_THREADS", "zebra")
        with pytest.raises(config.ConfigError):
            config.worker_count()


class TestReports:
    def test_report_files_written(self, task, expert_policy, tmp_path):
        reports, trajs = harness.benchmark({"expert": expert_policy}, task,
                                           n_runs=2, horizon=10, noise=0.1, seed=11)
        harness.write_reports(tmp_path, reports, trajs,
                              sweep_rows=[{"heads": 1, "seed": 0, "safety": 1.0,
                                           "conser_mean": 1.0, "u1_uncertainty": 0.0,
                                           "u2_uncertainty": 0.0, "crashes": 0}])
        assert (tmp_path / "report.json").exists()
        assert (tmp_path / "report.csv").exists()
        assert (tmp_path / "sweep.csv").exists()
        assert (tmp_path / "traces" / "expert_run000.csv").exists()
        header = (tmp_path / "report.csv").read_text().splitlines()[0]
        for col in ("mse_mean", "safety", "conser_mean", "u1_uncertainty", "flags"):
            assert col in header
