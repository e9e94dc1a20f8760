import copy

import numpy as np
import pytest

from abnet import autodiff as ad
from abnet import config, expert, model as mdl, qp, tasks
from abnet import head as hd


def small_task(hidden=(16,), penalty_hidden=(8,)):
    cfg = config.load_config("robot2d")
    cfg["model"]["hidden"] = list(hidden)
    cfg["model"]["penalty_hidden"] = list(penalty_hidden)
    return tasks.build_task(cfg)


@pytest.fixture(scope="module")
def task():
    return small_task()


@pytest.fixture(scope="module")
def tiny_dataset(task):
    return expert.generate_dataset(task, seed=11, trajectories=3)


class TestFuseByLoss:
    def test_equal_losses_uniform(self):
        np.testing.assert_allclose(mdl.fuse_by_loss([0.2, 0.2, 0.2, 0.2]), np.full(4, 0.25))

    def test_hand_value(self):
        np.testing.assert_allclose(mdl.fuse_by_loss([1.0, 3.0]), [0.75, 0.25])

    def test_scale_invariance(self):
        w1 = mdl.fuse_by_loss([0.4, 0.9, 2.0])
        w2 = mdl.fuse_by_loss([4.0, 9.0, 20.0])
        np.testing.assert_allclose(w1, w2, atol=1e-14)

    def test_nonpositive_rejected(self):
        with pytest.raises(mdl.NonPositiveLoss):
            mdl.fuse_by_loss([0.1, 0.0])
        with pytest.raises(mdl.NonPositiveLoss):
            mdl.fuse_by_loss([-1.0, 2.0])

    def test_permutation_equivariant(self):
        losses = [0.3, 1.1, 0.7]
        w = mdl.fuse_by_loss(losses)
        perm = [2, 0, 1]
        wp = mdl.fuse_by_loss([losses[i] for i in perm])
        np.testing.assert_allclose(wp, w[perm])


class TestSimplex:
    def test_weights_on_simplex(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            w = mdl.simplex_weights(rng.normal(scale=5, size=rng.integers(1, 9)))
            assert np.all(w >= 0)
            assert abs(float(np.sum(w)) - 1.0) <= mdl.SIMPLEX_TOL

    def test_single_logit_gives_exact_one(self):
        w = mdl.simplex_weights(np.array([1.7]))
        assert w[0] == 1.0


class TestForward:
    def test_single_head_fusion_is_bitwise_identity(self, task):
        m = mdl.build_model(task, h=1, seed=3)
        rng = np.random.default_rng(5)
        for _ in range(20):
            x, goal = task.sample_start_goal(rng)
            z = task.observe(x, goal)
            res = m.act(task, x, z)
            p1 = m.penalty_value(z)
            out = hd.head_forward(m.heads[0], x, z, task.cascades, task.sys, p1=p1)
            assert res.u.tobytes() == out.u.tobytes()

    def test_two_head_convex_combination(self, task, monkeypatch):
        m = mdl.build_model(task, h=2, seed=4)
        fixed = [np.array([1.0, 0.0]), np.array([0.0, 1.0])]

        def fake_forward(head, x, z, cascades, sys, tape=None, p1=None, solver_opts=None):
            k = int(head.name[-1])
            return hd.HeadOutput(fixed[k], fixed[k], np.ones(2), 1.0, 1.0, None,
                                 qp.QpSolution(fixed[k], np.zeros(0), "optimal", 0.0))

        monkeypatch.setattr(hd, "head_forward", fake_forward)
        res = m.act(task, np.zeros(4), np.zeros(5))
        np.testing.assert_allclose(res.u, [0.5, 0.5], atol=1e-15)

    def test_fused_control_in_head_convex_hull(self, task):
        m = mdl.build_model(task, h=4, seed=6)
        rng = np.random.default_rng(7)
        for _ in range(15):
            x, goal = task.sample_start_goal(rng)
            res = m.act(task, x, task.observe(x, goal))
            lo = np.min(res.head_controls, axis=0) - 1e-12
            hi = np.max(res.head_controls, axis=0) + 1e-12
            assert np.all(res.u >= lo) and np.all(res.u <= hi)

    def test_infeasible_head_excluded_and_renormalized(self, task, monkeypatch):
        m = mdl.build_model(task, h=3, seed=8)
        real_forward = hd.head_forward

        def failing_forward(head, *args, **kwargs):
            if head.name == "head1":
                raise qp.Infeasible(1.0)
            return real_forward(head, *args, **kwargs)

        monkeypatch.setattr(hd, "head_forward", failing_forward)
        rng = np.random.default_rng(9)
        x, goal = task.sample_start_goal(rng)
        res = m.act(task, x, task.observe(x, goal))
        assert "head1:infeasible" in res.flags and "heads_renormalized" in res.flags
        assert np.isnan(res.head_controls[1]).all()
        assert res.weights[1] == 0.0
        assert abs(res.weights.sum() - 1.0) <= 1e-12

    def test_merged_row_holds_for_fused_control(self, task):
        # each head satisfies a . u_k >= rhs(pm_k); the fused control must
        # satisfy a . u >= sum_k w_k rhs(pm_k)
        m = mdl.build_model(task, h=4, seed=10)
        rng = np.random.default_rng(11)
        checked = 0
        for _ in range(40):
            x, goal = task.sample_start_goal(rng)
            res = m.act(task, x, task.observe(x, goal))
            outs = res.outputs
            if any(o is None or not o.rows for o in outs):
                continue
            a = outs[0].rows[0].a
            fused_rhs = sum(w * o.rows[0].rhs for w, o in zip(res.weights, outs))
            assert float(a @ res.u) - fused_rhs >= -1e-9
            checked += 1
        assert checked >= 30


class TestTrainOneshot:
    def test_zero_epochs_is_identity(self, task, tiny_dataset):
        m = mdl.build_model(task, h=2, seed=12)
        before = {k: v.copy() for k, v in m.parameters().items()}
        mdl.train_oneshot(m, task, tiny_dataset, {"epochs": 0})
        after = m.parameters()
        for k in before:
            np.testing.assert_array_equal(before[k], after[k])

    def test_empty_dataset_raises(self, task, tiny_dataset):
        m = mdl.build_model(task, h=1, seed=13)
        empty = tiny_dataset.subset(np.zeros(0, dtype=int))
        with pytest.raises(mdl.EmptyDataset):
            mdl.train_oneshot(m, task, empty, {"epochs": 1})

    def test_overfits_ten_samples(self, task, tiny_dataset):
        m = mdl.build_model(task, h=1, seed=14)
        ds = tiny_dataset.subset(np.arange(0, 100, 10))
        cfg = {"epochs": 500, "batch_size": 10, "lr": 3e-2,
               "lambda_heads": 0.0, "lambda_ref": 0.0}
        rep = mdl.train_oneshot(m, task, ds, cfg, seed=1)
        final_mse = mdl.validation_mse(m, task, ds)
        assert final_mse < 1e-4
        assert rep.steps == 500

    def test_loss_decreases(self, task, tiny_dataset):
        m = mdl.build_model(task, h=2, seed=15)
        rep = mdl.train_oneshot(m, task, tiny_dataset, {"epochs": 3, "batch_size": 16}, seed=2)
        assert rep.loss_history[-1] < rep.loss_history[0]
        mdl.assert_simplex(m.weights)


class TestTrainScalable:
    def test_single_head_matches_plain_training(self, task, tiny_dataset):
        m, rep = mdl.train_scalable(task, tiny_dataset, {"scalable_epochs": 1, "extra_iters": 0}, h=1, seed=3)
        assert m.h == 1
        np.testing.assert_allclose(m.weights, [1.0])

    def test_deterministic(self, task, tiny_dataset):
        cfg = {"scalable_epochs": 1, "extra_iters": 0}
        m1, _ = mdl.train_scalable(task, tiny_dataset, cfg, h=2, seed=4)
        m2, _ = mdl.train_scalable(task, tiny_dataset, cfg, h=2, seed=4)
        np.testing.assert_array_equal(m1.weight_logits, m2.weight_logits)
        for h1, h2 in zip(m1.heads, m2.heads):
            for w1, w2 in zip(h1.backbone.weights, h2.backbone.weights):
                np.testing.assert_array_equal(w1, w2)

    def test_penalty_pick_mode(self, task, tiny_dataset):
        cfg = {"scalable_epochs": 1, "extra_iters": 0, "penalty_merge": "pick", "pick_index": 1}
        m, _ = mdl.train_scalable(task, tiny_dataset, cfg, h=2, seed=5)
        assert m.h == 2
        mdl.assert_simplex(m.weights)


class TestMerge:
    def test_self_merge_is_identity(self, task, tiny_dataset):
        m, _ = mdl.train_scalable(task, tiny_dataset, {"scalable_epochs": 1, "extra_iters": 0}, h=2, seed=6)
        merged = mdl.merge(m, m, (0.5, 0.5))
        assert merged.h == 4
        rng = np.random.default_rng(7)
        for _ in range(10):
            x, goal = task.sample_start_goal(rng)
            z = task.observe(x, goal)
            np.testing.assert_allclose(merged.act(task, x, z).u, m.act(task, x, z).u, atol=1e-12)

    def test_degenerate_mix_returns_first_model(self, task, tiny_dataset):
        a, _ = mdl.train_scalable(task, tiny_dataset, {"scalable_epochs": 1, "extra_iters": 0}, h=1, seed=8)
        b, _ = mdl.train_scalable(task, tiny_dataset, {"scalable_epochs": 1, "extra_iters": 0}, h=1, seed=9)
        merged = mdl.merge(a, b, (1.0, 0.0))
        rng = np.random.default_rng(10)
        for _ in range(10):
            x, goal = task.sample_start_goal(rng)
            z = task.observe(x, goal)
            np.testing.assert_allclose(merged.act(task, x, z).u, a.act(task, x, z).u, atol=1e-12)

    def test_incompatible_tasks_rejected(self, task):
        a = mdl.build_model(task, h=1, seed=11)
        b = copy.deepcopy(a)
        b.config_hash = "deadbeef"
        with pytest.raises(mdl.IncompatibleTasks):
            mdl.merge(a, b, (0.5, 0.5))

    def test_simplex_preserved(self, task):
        a = mdl.build_model(task, h=2, seed=12)
        b = mdl.build_model(task, h=3, seed=13)
        merged = mdl.merge(a, b, (0.3, 0.7))
        mdl.assert_simplex(merged.weights)
        assert merged.h == 5


class TestFullGraphGradients:
    def test_twenty_seeds_match_finite_differences(self):
        # whole training graph (backbones -> QPs -> fusion -> loss) against
        # central differences, one random instance per seed
        cfg = config.load_config("robot2d")
        cfg["model"]["hidden"] = [8]
        cfg["model"]["penalty_hidden"] = [4]
        task = tasks.build_task(cfg)
        checked = 0
        seed = 0
        while checked < 20:
            seed += 1
            m = mdl.build_model(task, h=2, seed=seed)
            rng = np.random.default_rng(seed)
            x = np.array([rng.uniform(1.2, 3.0), rng.uniform(-1.5, 1.5),
                          rng.uniform(-np.pi, np.pi), rng.uniform(0.3, 1.5)])
            if task.b_min(x) <= 0.05:
                continue
            z = task.observe(x, rng.uniform(-4, 4, size=2))
            label = rng.uniform(-1, 1, size=2)

            # skip instances near an active-set switch, where the loss is
            # legitimately nondifferentiable
            res = m.act(task, x, z)
            degenerate = False
            for out in res.outputs:
                slack = out.prob.h - out.prob.G @ out.u
                for lam_i, s_i in zip(out.sol.lambda_star, slack):
                    if lam_i < 1e-4 and s_i < 1e-4:
                        degenerate = True
            if degenerate:
                continue

            tape = ad.Tape()
            fused, _ = m.forward_tape(task, tape, x, z)
            loss = ad.mse(tape, fused, label)
            tape.backward(loss)
            params = m.parameters()
            grads = {k: tape.grad_for(k, like=v) for k, v in params.items()}

            def loss_at(params_override):
                m.set_parameters(params_override)
                try:
                    return ad.mse_loss(m.act(task, x, z).u, label)
                finally:
                    m.set_parameters(params)

            worst = 0.0
            scale_ref = max(max(np.max(np.abs(g)) for g in grads.values()), 1e-6)
            for key, p in params.items():
                fd = np.zeros_like(p)
                flat_fd = fd.ravel()
                flat_p = p.ravel()
                for i in range(flat_p.size):
                    old = flat_p[i]
                    step = 1e-6
                    flat_p[i] = old + step
                    hi = loss_at(params)
                    flat_p[i] = old - step
                    lo = loss_at(params)
                    flat_p[i] = old
                    flat_fd[i] = (hi - lo) / (2 * step)
                denom = max(np.max(np.abs(fd)), scale_ref * 1e-3)
                worst = max(worst, float(np.max(np.abs(grads[key] - fd)) / denom))
            assert worst < 1e-3, f"seed {seed}: rel err {worst:.2e}"
            checked += 1


class TestNoiseFilter:
    def test_output_std_non_increasing_in_heads(self, task):
        # untrained heads with decorrelated inits: averaging more of them
        # under the same observation noise shrinks the output spread
        rng = np.random.default_rng(14)
        stds = {}
        for h in (1, 8):
            vals = []
            for seed in (0, 1, 2):
                m = mdl.build_model(task, h=h, seed=20 + seed)
                x, goal = task.sample_start_goal(rng)
                z = task.observe(x, goal)
                outs = []
                for _ in range(30):
                    zn = z + rng.uniform(-0.1, 0.1, size=z.shape) * np.abs(z)
                    outs.append(m.act(task, x, zn).u)
                vals.append(np.std(np.array(outs), axis=0, ddof=1).mean())
            stds[h] = np.mean(vals)
        assert stds[8] <= stds[1] + 1e-12


class TestCheckpoint:
    def test_roundtrip_bitwise(self, task, tmp_path):
        masks = [np.array([1.0, 1.0, 1.0, 1.0, 0.0]), None]
        m = mdl.build_model(task, h=2, seed=15, masks=None)
        m.heads[0].observation_mask = masks[0]
        path = mdl.save_checkpoint(m, tmp_path / "m.json", task.config)
        back, cfg, opt = mdl.load_checkpoint(path)
        assert back.task_id == m.task_id and back.config_hash == m.config_hash
        assert opt is None and cfg["task"] == "robot2d"
        rng = np.random.default_rng(16)
        x, goal = task.sample_start_goal(rng)
        z = task.observe(x, goal)
        assert back.act(task, x, z).u.tobytes() == m.act(task, x, z).u.tobytes()

    def test_optimizer_state_roundtrip(self, task, tiny_dataset, tmp_path):
        m = mdl.build_model(task, h=1, seed=17)
        opt = ad.AdamState(lr=2e-3)
        mdl.train_oneshot(m, task, tiny_dataset, {"epochs": 1, "batch_size": 64},
                          seed=3, optimizer=opt)
        path = mdl.save_checkpoint(m, tmp_path / "m.json", task.config, optimizer=opt)
        _, _, opt2 = mdl.load_checkpoint(path)
        assert opt2.step == opt.step
        for k in opt.m:
            np.testing.assert_array_equal(opt2.m[k], opt.m[k])

    def test_mismatched_hash_refused(self, task, tmp_path):
        m = mdl.build_model(task, h=1, seed=18)
        path = mdl.save_checkpoint(m, tmp_path / "m.json", task.config)
        with pytest.raises(mdl.IncompatibleTasks):
            mdl.load_checkpoint(path, expected_hash="0000000000000000")

    def test_baseline_roundtrip(self, task, tmp_path):
        p = mdl.build_baseline(task, seed=19)
        path = mdl.save_checkpoint(p, tmp_path / "b.json", task.config)
        back, _, _ = mdl.load_checkpoint(path)
        assert isinstance(back, mdl.MlpPolicy)
        z = np.ones(5)
        np.testing.assert_array_equal(back.net.forward_numpy(z), p.net.forward_numpy(z))
