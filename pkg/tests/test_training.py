import numpy as np
import pytest

from flowforge import autodiff as ad
from flowforge import flows as fl
from flowforge import targets as tg
from flowforge import training as tr
from flowforge.kernels import Rng


class TestEss:
    def test_uniform_weights(self):
        assert tr.ess(np.zeros(100)) == pytest.approx(1.0)

    def test_one_dominant(self):
        lw = np.full(1000, -200.0)
        lw[3] = 0.0
        assert tr.ess(lw) == pytest.approx(1.0 / 1000, rel=1e-6)

    def test_small_exact_value(self):
        # weights (1, 1, 2): (4)^2 / (3 * 6) = 8/9
        assert tr.ess(np.log([1.0, 1.0, 2.0])) == pytest.approx(8.0 / 9.0)

    def test_shift_invariance_exact(self):
        # exact equality requires the shifted inputs themselves to be
        # exactly representable: use dyadic weights and dyadic shifts
        lw = np.round(Rng(0).normal((500,)) * 3 * 256) / 256.0
        for c in (-1024.0, -17.25, 123.5, 2.0**30):
            assert tr.ess(lw + c) == tr.ess(lw)

    def test_shift_invariance_generic(self):
        lw = Rng(0).normal((500,)) * 3
        for c in (-1e6, -17.3, 123.0):
            assert tr.ess(lw + c) == pytest.approx(tr.ess(lw), rel=1e-9)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            tr.ess(np.array([]))


class TestAdam:
    def test_zero_gradient_no_move(self):
        p = [np.ones(3)]
        st = tr.AdamState(p)
        st.step(p, [np.zeros(3)], 0.1)
        assert np.array_equal(p[0], np.ones(3))

    def test_first_step_identity(self):
        g = np.array([0.5, -2.0, 1e-4])
        p = [np.zeros(3)]
        st = tr.AdamState(p)
        st.step(p, [g], lr=0.1)
        expect = -0.1 * g / (np.abs(g) + st.eps)
        assert np.allclose(p[0], expect, rtol=1e-12)

    def test_quadratic_convergence(self):
        theta = [np.array([10.0])]
        st = tr.AdamState(theta)
        for _ in range(5000):
            g = theta[0] - 3.0
            st.step(theta, [g], lr=1e-2)
        assert abs(theta[0][0] - 3.0) <= 1e-3

    def test_nonfinite_gradient_skipped(self):
        p = [np.ones(2)]
        st = tr.AdamState(p)
        applied = st.step(p, [np.array([np.nan, 1.0])], 0.1)
        assert not applied
        assert st.n_skipped == 1 and st.step_count == 1
        assert np.array_equal(p[0], np.ones(2))

    def test_frozen_indices_bit_identical(self):
        p = [np.ones(2), np.full(2, 5.0)]
        st = tr.AdamState(p)
        before = p[1].copy()
        st.step(p, [np.ones(2), np.ones(2)], 0.1, frozen={1})
        assert np.array_equal(p[1], before)
        assert not np.array_equal(p[0], np.ones(2))

    def test_functional_wrapper(self):
        p = [np.zeros(2)]
        st = tr.AdamState(p)
        st2, p2 = tr.adam_step(st, p, [np.ones(2)], 0.1)
        assert np.array_equal(p[0], np.zeros(2))  # input untouched
        assert not np.array_equal(p2[0], p[0])


class TestSchedules:
    def test_constant(self):
        s = tr.make_schedule("constant", 1e-3, 1000)
        assert s(0) == s(999) == 1e-3

    def test_exp_decay_10x(self):
        s = tr.make_schedule("exp_decay", 1e-3, 1000)
        assert s(0) == pytest.approx(1e-3)
        assert s(1000) == pytest.approx(1e-4)

    def test_warmup_then_decay(self):
        s = tr.make_schedule("warmup_decay", 1e-3, 1100)
        assert s(0) == pytest.approx(1e-5)
        assert s(99) == pytest.approx(1e-3)
        assert s(100) == pytest.approx(1e-3)
        assert s(1100) == pytest.approx(1e-4, rel=1e-2)
        assert all(s(k) > 0 for k in range(0, 1100, 50))

    def test_unknown_rejected(self):
        with pytest.raises(ValueError):
            tr.make_schedule("cosine", 1e-3, 10)


class TestLosses:
    def test_identity_flow_reverse_kl_near_zero(self):
        # target = base distribution: loss is zero up to MC noise and the
        # gradient vanishes
        class StdNormal2:
            has_density = True
            has_sampler = False
            event_shape = (2,)

            def log_unnorm(self, x):
                return -0.5 * ad.tsum(x * x, axis=1)

        spec = fl.StackSpec(["cubic_poly"] * 2)
        flow = fl.Flow([fl.BijectionStack(spec)], (2,))
        z = Rng(0).normal((4096, 2))
        tape = ad.Tape()
        pv = [tape.leaf(a) for a in flow.param_arrays()]
        loss = tr.reverse_kl_loss(flow, StdNormal2(), z, pv)
        # E[log q - log p~] = -H(q) + E[x^2/2] = -log(2 pi e) + ... constant
        g = ad.backward(tape, loss).wrt(pv[0])
        assert np.max(np.abs(g)) < 0.05

    def test_constant_shift_leaves_gradient(self):
        class Shifted:
            has_density = True
            event_shape = (1,)

            def __init__(self, c):
                self.c = c

            def log_unnorm(self, x):
                return -0.5 * ad.tsum(x * x, axis=1) + self.c

        spec = fl.StackSpec(["sinh"])
        flow = fl.Flow([fl.BijectionStack(spec, raw=np.array([0.1, 0.0, 0.3, 0.1, -0.2]))], (1,))
        z = Rng(1).normal((512, 1))
        losses, grads = [], []
        for c in (0.0, 7.5):
            tape = ad.Tape()
            pv = [tape.leaf(a) for a in flow.param_arrays()]
            loss = tr.reverse_kl_loss(flow, Shifted(c), z, pv)
            losses.append(float(ad.val(loss)))
            grads.append(ad.backward(tape, loss).wrt(pv[0]))
        assert losses[1] == pytest.approx(losses[0] - 7.5, rel=1e-12)
        assert np.allclose(grads[0], grads[1], atol=1e-12)

    def test_forward_kl_zero_for_exact_match(self):
        target = tg.GMM()
        # construct q = p via a fit-free check: evaluate the KL estimator
        # machinery with q replaced by the target itself
        xs = target.sample(Rng(2), 8192)
        nll = -np.mean(target.log_density(xs))
        kl = nll - target.entropy()
        assert abs(kl) < 0.02

    def test_reverse_kl_gradient_vs_fd(self):
        # 10-parameter radial flow, frozen rng
        spec = fl.StackSpec(["cubic_rational", "sinh"])
        layer = fl.Radial(2, spec, center=np.array([0.2, -0.1]),
                          raw=Rng(3).normal((spec.total_raw,)) * 0.3)
        flow = fl.Flow([layer], (2,))
        target = tg.GMM()
        z = Rng(4).normal((256, 2))
        arrs = flow.param_arrays()
        sizes = [a.size for a in arrs]
        shapes = [a.shape for a in arrs]

        def f(theta):
            pv, off = [], 0
            for s, sh in zip(sizes, shapes):
                pv.append(ad.reshape(theta[off : off + s], sh))
                off += s
            return tr.reverse_kl_loss(flow, target, z, pv)

        theta0 = np.concatenate([a.ravel() for a in arrs])
        res = ad.grad_check(f, theta0, h=1e-5)
        assert res.max_rel_error <= 1e-4

    def test_forward_kl_gradient_vs_fd(self):
        spec = fl.StackSpec(["cubic_poly"] * 2)
        flow = fl.Flow(
            [fl.BijectionStack(spec, raw=Rng(5).normal((spec.total_raw,)) * 0.4)], (1,)
        )
        xs = tg.OscPoly().sample(Rng(6), 256)
        arrs = flow.param_arrays()

        def f(theta):
            return tr.forward_kl_loss(flow, xs, [ad.reshape(theta, arrs[0].shape)])

        res = ad.grad_check(f, arrs[0].copy(), h=1e-5)
        assert res.max_rel_error <= 1e-4


class TestRunConfig:
    def test_unknown_keys_rejected(self):
        with pytest.raises(ValueError):
            tr.make_config("onedim", bogus_knob=3)
        with pytest.raises(ValueError):
            tr.config_from_dict({"preset": "onedim", "bogus": 1})

    def test_unknown_preset_rejected(self):
        with pytest.raises(ValueError):
            tr.make_config("tripledim")

    def test_hash_stable_and_sensitive(self):
        a = tr.make_config("onedim", seed=0)
        b = tr.make_config("onedim", seed=0)
        c = tr.make_config("onedim", seed=1)
        assert a.config_hash() == b.config_hash()
        assert a.config_hash() != c.config_hash()

    def test_every_preset_has_defaults(self):
        for preset in tr.PRESETS:
            for tier in ("desk", "paper"):
                cfg = tr.make_config(preset, tier)
                assert cfg.steps > 0 and cfg.batch > 0


class TestTrainLoop:
    def test_zero_steps_init_record(self):
        cfg = tr.make_config("onedim", K=3, steps=0)
        flow, rec = tr.train(cfg)
        assert rec.status == "ok"
        assert rec.losses == []
        assert rec.evals and rec.evals[0]["step"] == 0

    def test_determinism(self):
        cfg = tr.make_config("onedim", K=3, steps=60, eval_interval=30)
        _, rec1 = tr.train(cfg)
        _, rec2 = tr.train(cfg)
        assert rec1.losses == rec2.losses
        assert rec1.evals == rec2.evals

    def test_seed_changes_losses(self):
        _, rec1 = tr.train(tr.make_config("onedim", K=3, steps=40, seed=0))
        _, rec2 = tr.train(tr.make_config("onedim", K=3, steps=40, seed=1))
        assert rec1.losses != rec2.losses

    def test_loss_decreases_on_medians(self):
        cfg = tr.make_config("onedim", K=9, steps=1500, eval_interval=1500)
        _, rec = tr.train(cfg)
        n = len(rec.losses)
        first = np.median(rec.losses[: n // 10])
        last = np.median(rec.losses[-n // 10 :])
        assert last < first

    def test_metrics_rows_layout(self):
        cfg = tr.make_config("onedim", K=3, steps=20, eval_interval=10)
        _, rec = tr.train(cfg)
        rows = rec.metrics_rows()
        assert len(rows) == 20
        assert rows[9][3] is not None  # eval at step 10
        assert rows[3][3] is None

    def test_divergence_marks_failed(self):
        class Degenerate:
            has_density = True
            has_sampler = False
            event_shape = (1,)

            def log_unnorm(self, x):
                v = ad.val(ad.tsum(x, axis=1))
                return np.full(v.shape, -np.inf)

        cfg = tr.make_config("onedim", K=2, steps=60, eval_interval=10**9)
        rng = Rng(0)
        spec = fl.StackSpec(["sinh"] * 2)
        flow = fl.Flow([fl.BijectionStack(spec)], (1,))
        params = [a.copy() for a in flow.param_arrays()]
        before = [p.copy() for p in params]
        adam = tr.AdamState(params)
        rec = tr.RunRecord(config={}, config_hash="x", seed=0)
        ok = tr._run_loop(
            flow, Degenerate(), cfg, params, adam,
            tr.make_schedule("constant", 1e-3, 60), rng, rng, rec,
        )
        assert not ok and rec.status == "failed"
        assert len(rec.losses) == 10  # aborted after 10 consecutive bad steps
        # skip-and-report policy left parameters untouched
        assert all(np.array_equal(p, b) for p, b in zip(params, before))


class TestPretrainFreeze:
    def test_coupling_params_bit_identical_in_phase1(self):
        cfg = tr.make_config(
            "phi4_bimodal", lattice_L=4, lam=4.0, steps=4, pretrain_steps=6,
            batch=8, eval_interval=1000, eval_batch=64, coupling_layers=2, channels=2,
        )
        root = Rng(cfg.seed)
        r_init, r_train, r_eval, r_aux = root.split(4)
        flow, target, _ = tr.build_flow(cfg, r_init, 4.0)
        params = [a.copy() for a in flow.param_arrays()]
        before = [p.copy() for p in params]
        adam = tr.AdamState(params)
        frozen = tr._frozen_indices(flow, True)
        rec = tr.RunRecord(config={}, config_hash="x", seed=0)
        tr._run_loop(flow, target, cfg, params, adam,
                     tr.make_schedule("constant", 1e-3, 6), r_train, r_eval, rec,
                     frozen=frozen, n_steps=6)
        layer_of = flow.param_layer_indices()
        moved_any_free = False
        for i, (p, b) in enumerate(zip(params, before)):
            if i in frozen:
                assert np.array_equal(p, b), "frozen parameter moved"
            else:
                moved_any_free = moved_any_free or not np.array_equal(p, b)
        assert moved_any_free

    def test_frozen_index_selection(self):
        cfg = tr.make_config("phi4_bimodal", lattice_L=4, lam=4.0,
                             coupling_layers=2, channels=2)
        flow, _, _ = tr.build_flow(cfg, Rng(0), 4.0)
        frozen = tr._frozen_indices(flow, True)
        layer_of = flow.param_layer_indices()
        for i in frozen:
            assert isinstance(flow.layers[layer_of[i]], fl.LatticeCoupling)
        free = [i for i in range(len(layer_of)) if i not in frozen]
        kinds = {type(flow.layers[layer_of[i]]) for i in free}
        assert kinds == {fl.MomentumShellScaling, fl.ZeroMode}


class TestEvaluateFlow:
    def test_identity_flow_on_gaussianlike_target(self):
        class StdNormal2:
            has_density = True
            has_sampler = True
            event_shape = (2,)

            def log_unnorm(self, x):
                return -0.5 * ad.tsum(x * x, axis=1)

            def sample(self, rng, n):
                return rng.normal((n, 2))

            def entropy(self):
                return np.log(2 * np.pi) + 1.0

        flow = fl.Flow([], (2,))
        out = tr.evaluate_flow(flow, StdNormal2(), Rng(1), 4096)
        assert out["ess"] == pytest.approx(1.0)
        assert abs(out["kl"]) < 0.05
