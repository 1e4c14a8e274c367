"""Fisher machinery, constraint projection, and the learning pipelines."""
import numpy as np
import pytest
from scipy.optimize import minimize

from flaplearn.datagen import Dataset
from flaplearn.imitation import (
    FisherMatrix,
    ILConfig,
    behavior_cloning,
    coil,
    constrained_project,
    constraint_norm,
    dagger,
    dart,
    dart_covariance,
    fim_estimate,
    kl_gaussian,
    sample_knot_noise,
    scale_dart_covariance,
    write_metrics,
)
from flaplearn.policy import (
    NetArch,
    NeuralPolicy,
    TrainOptions,
    forward,
    init_policy,
    mse,
    param_count,
)

SMALL = NetArch(n_in=3, n_hidden=4, n_out=5)
FAST_TRAIN = TrainOptions(max_iter=40)


def random_ds(rng: np.random.Generator, n: int, noise: float = 0.1) -> Dataset:
    teacher = init_policy(NetArch(), int(rng.integers(1 << 30)))
    X = rng.standard_normal((12, n))
    Y = forward(teacher, X) + noise * rng.standard_normal((60, n))
    return Dataset(X, Y, ["sampled"] * n, 0)


class TestFisher:
    def test_zero_residuals_zero_matrix(self):
        rng = np.random.default_rng(0)
        net = init_policy(SMALL, 0)
        X = rng.standard_normal((3, 9))
        F = fim_estimate(net, X, forward(net, X))
        assert F.trace() == 0.0
        assert np.array_equal(F.dense(), np.zeros((param_count(SMALL),) * 2))

    def test_single_sample_rank_one(self):
        rng = np.random.default_rng(1)
        net = init_policy(SMALL, 1)
        X = rng.standard_normal((3, 1))
        Y = rng.standard_normal((5, 1))
        F = fim_estimate(net, X, Y)
        assert np.linalg.matrix_rank(F.dense(), tol=1e-12) <= 1

    def test_quadratic_form_identity(self):
        rng = np.random.default_rng(2)
        net = init_policy(SMALL, 2)
        X = rng.standard_normal((3, 7))
        Y = rng.standard_normal((5, 7))
        F = fim_estimate(net, X, Y)
        delta = rng.standard_normal(param_count(SMALL))
        manual = np.mean([(F.G[:, k] @ delta) ** 2 for k in range(7)])
        assert F.quad(delta) == pytest.approx(manual, rel=1e-10)
        dense = float(delta @ F.dense() @ delta)
        assert F.quad(delta) == pytest.approx(dense, rel=1e-10)

    def test_dense_symmetric_psd(self):
        rng = np.random.default_rng(3)
        net = init_policy(SMALL, 3)
        F = fim_estimate(net, rng.standard_normal((3, 12)),
                         rng.standard_normal((5, 12))).dense()
        assert np.max(np.abs(F - F.T)) <= 1e-10
        assert np.min(np.linalg.eigvalsh(F)) >= -1e-10

    def test_solve_regularized_inverts_the_metric(self):
        rng = np.random.default_rng(4)
        G = rng.standard_normal((30, 8))
        F = FisherMatrix(G, 8)
        eps = 1e-3
        B = rng.standard_normal((30, 2))
        Xs = F.solve_regularized(B, eps)
        M = F.dense() + eps * np.eye(30)
        np.testing.assert_allclose(M @ Xs, B, rtol=1e-8, atol=1e-10)


class TestKL:
    def test_identical_zero_and_nonnegative_symmetric(self):
        rng = np.random.default_rng(5)
        a = init_policy(SMALL, 10)
        b = init_policy(SMALL, 11)
        F = fim_estimate(a, rng.standard_normal((3, 6)),
                         rng.standard_normal((5, 6)))
        assert kl_gaussian(a, a, F) == 0.0
        assert kl_gaussian(a, b, F) >= 0.0
        assert kl_gaussian(a, b, F) == pytest.approx(kl_gaussian(b, a, F),
                                                     rel=1e-12)

    def test_size_guards(self):
        rng = np.random.default_rng(6)
        a = init_policy(SMALL, 0)
        c = init_policy(NetArch(3, 5, 5), 0)
        F = fim_estimate(a, rng.standard_normal((3, 4)),
                         rng.standard_normal((5, 4)))
        with pytest.raises(ValueError, match="architecture"):
            kl_gaussian(a, c, F)
        with pytest.raises(ValueError, match="size"):
            kl_gaussian(c, c, F)


class TestILConfig:
    def test_validation(self):
        with pytest.raises(ValueError, match="n_iter"):
            ILConfig(n_iter=0)
        with pytest.raises(ValueError, match="alpha"):
            ILConfig(alpha=1.5)
        with pytest.raises(ValueError, match="dart_scale"):
            ILConfig(dart_scale=0.0)
        with pytest.raises(ValueError, match="rollout_periods"):
            ILConfig(rollout_periods=0)
        with pytest.raises(ValueError, match="nonnegative"):
            ILConfig(mu_c=-1.0)


def feasible_policy(arch: NetArch, seed: int) -> NeuralPolicy:
    """A random policy adjusted so f(0, theta) = 0 exactly."""
    net = init_policy(arch, seed)
    th = net.theta.copy()
    a = np.where(net.b_h >= 0, net.b_h, arch.s_leak * net.b_h)
    th[-arch.n_out:] = -(net.W_o @ a)
    return NeuralPolicy(arch, th)


class TestConstrainedProject:
    def test_feasible_point_is_fixed(self):
        rng = np.random.default_rng(7)
        net = feasible_policy(SMALL, 20)
        F = fim_estimate(net, rng.standard_normal((3, 6)),
                         rng.standard_normal((5, 6)))
        out = constrained_project(net.theta, F, SMALL)
        np.testing.assert_array_equal(out, net.theta)

    def test_projection_reaches_tolerance_default_arch(self):
        rng = np.random.default_rng(8)
        arch = NetArch()
        net = init_policy(arch, 8)
        # bias the outputs so the start is clearly infeasible
        th = net.theta.copy()
        th[-60:] += 0.05
        F = fim_estimate(NeuralPolicy(arch, th),
                         rng.standard_normal((12, 30)),
                         rng.standard_normal((60, 30)))
        out = constrained_project(th, F, arch)
        assert constraint_norm(NeuralPolicy(arch, out)) <= 1e-8

    def test_identity_metric_matches_generic_nlp(self):
        arch = NetArch(n_in=2, n_hidden=3, n_out=2)
        n_th = param_count(arch)
        net = init_policy(arch, 30)
        th0 = net.theta.copy()
        th0[-2:] += 0.3  # infeasible start
        # keep hidden biases away from the activation kink
        off = 2 * 3
        th0[off:off + 3] = np.array([0.4, -0.5, 0.6])

        ours = constrained_project(th0, np.eye(n_th), arch)

        def c_of(th):
            return forward(NeuralPolicy(arch, th), np.zeros(2))

        res = minimize(lambda th: np.sum((th - th0) ** 2), th0,
                       method="SLSQP",
                       constraints={"type": "eq", "fun": c_of},
                       options={"maxiter": 300, "ftol": 1e-14})
        assert res.success
        assert np.linalg.norm(c_of(ours)) <= 1e-8
        assert np.linalg.norm(c_of(res.x)) <= 1e-6
        ours_obj = np.sum((ours - th0) ** 2)
        ref_obj = np.sum((res.x - th0) ** 2)
        assert ours_obj <= ref_obj * (1 + 1e-4) + 1e-12

    def test_zero_metric_floor_still_projects(self):
        arch = SMALL
        net = init_policy(arch, 31)
        th0 = net.theta.copy()
        th0[-5:] += 0.2
        out = constrained_project(th0, np.zeros((param_count(arch),) * 2),
                                  arch)
        assert constraint_norm(NeuralPolicy(arch, out)) <= 1e-8

    def test_exhausted_iterations_still_land_on_manifold(self):
        # even with no KKT steps the closing bias restoration must leave
        # the result exactly feasible, touching only the output bias
        arch = SMALL
        net = init_policy(arch, 32)
        th0 = net.theta.copy()
        th0[-5:] += 0.2
        F = np.eye(param_count(arch))
        out = constrained_project(th0, F, arch, max_iter=0)
        assert constraint_norm(NeuralPolicy(arch, out)) <= 1e-12
        np.testing.assert_array_equal(out[:-arch.n_out], th0[:-arch.n_out])
        assert not np.array_equal(out[-arch.n_out:], th0[-arch.n_out:])


def fake_simulator(control_fn, e0, n_periods):
    """Boundary errors decaying geometrically; calls control_fn per period."""
    e0 = np.asarray(e0.vec if hasattr(e0, "vec") else e0, dtype=float)
    errs = np.empty((n_periods, 12))
    e = e0
    for k in range(n_periods):
        control_fn(e)
        e = 0.5 * e
        errs[k] = e
    return errs


def fake_expert_map(rng: np.random.Generator):
    L = 0.05 * rng.standard_normal((60, 12))
    return lambda e: L @ np.asarray(e, dtype=float)


class TestBehaviorCloning:
    def test_zero_pairs_only(self):
        ds = Dataset(np.zeros((12, 8)), np.zeros((60, 8)), ["zero"] * 8, 0,
                     n_zero=8)
        pol = behavior_cloning(ds, NetArch(), FAST_TRAIN, seed=1)
        assert constraint_norm(pol) <= 1e-3

    def test_deterministic(self):
        rng = np.random.default_rng(9)
        ds = random_ds(rng, 30)
        a = behavior_cloning(ds, NetArch(), FAST_TRAIN, seed=2)
        b = behavior_cloning(ds, NetArch(), FAST_TRAIN, seed=2)
        np.testing.assert_array_equal(a.theta, b.theta)


class TestDagger:
    def test_degenerate_single_iteration_equals_bc(self):
        rng = np.random.default_rng(10)
        ds = random_ds(rng, 25)
        cfg = ILConfig(n_iter=1, n_rollouts=0)

        def never(*_a, **_k):
            raise AssertionError("must not be called")

        pol, recs = dagger(ds, NetArch(), cfg, never, never,
                           opts=FAST_TRAIN, seed=3)
        bc = behavior_cloning(ds, NetArch(), FAST_TRAIN, seed=3)
        np.testing.assert_array_equal(pol.theta, bc.theta)
        assert [r.n_data for r in recs] == [25, 25]

    def test_dataset_growth_and_determinism(self):
        rng = np.random.default_rng(11)
        ds = random_ds(rng, 20)
        cfg = ILConfig(n_iter=2, n_rollouts=3, rollout_periods=4)
        expert = fake_expert_map(np.random.default_rng(0))
        pol, recs = dagger(ds, NetArch(), cfg, expert, fake_simulator,
                           opts=FAST_TRAIN, seed=4)
        # each rollout contributes its start plus 3 interior boundaries
        assert [r.n_data for r in recs] == [20, 32, 44]
        pol2, recs2 = dagger(ds, NetArch(), cfg, expert, fake_simulator,
                             opts=FAST_TRAIN, seed=4)
        np.testing.assert_array_equal(pol.theta, pol2.theta)
        assert [r.n_data for r in recs2] == [r.n_data for r in recs]

    def test_expert_failure_skipped(self):
        rng = np.random.default_rng(12)
        ds = random_ds(rng, 15)
        cfg = ILConfig(n_iter=1, n_rollouts=2, rollout_periods=3)

        calls = [0]

        def flaky(e):
            calls[0] += 1
            if calls[0] % 2 == 0:
                raise RuntimeError("no convergence")
            return np.zeros(60)

        pol, recs = dagger(ds, NetArch(), cfg, flaky, fake_simulator,
                           opts=FAST_TRAIN, seed=5)
        assert recs[-1].n_data == 15 + 3  # half of the 6 labels failed


class TestDart:
    def test_trace_identity_exact(self):
        rng = np.random.default_rng(13)
        A = rng.standard_normal((60, 60))
        Sigma_hat = A @ A.T
        n = 137
        S = scale_dart_covariance(Sigma_hat, n, 1e-4)
        assert float(np.trace(S)) == pytest.approx(1e-4 / n, rel=1e-12)

    def test_perfect_policy_zero_covariance(self):
        rng = np.random.default_rng(14)
        net = init_policy(NetArch(), 40)
        X = rng.standard_normal((12, 10))
        ds = Dataset(X, forward(net, X), ["sampled"] * 10, 0)
        Sig = dart_covariance(net, ds)
        assert np.array_equal(Sig, np.zeros((60, 60)))
        assert np.array_equal(scale_dart_covariance(Sig, 10, 1e-4),
                              np.zeros((60, 60)))

    def test_noise_sampler_matches_covariance(self):
        rng = np.random.default_rng(15)
        B = rng.standard_normal((5, 5))
        Sigma = B @ B.T
        draws = sample_knot_noise(np.random.default_rng(16), Sigma, 10_000)
        emp = np.cov(draws, rowvar=False)
        n = draws.shape[0]
        s = np.sqrt(np.diag(Sigma))
        tol = 6.0 * np.sqrt((np.outer(s, s) ** 2 + Sigma ** 2) / n)
        assert np.all(np.abs(emp - Sigma) <= tol + 1e-12)

    def test_noise_sampler_degenerate_and_shape(self):
        z = sample_knot_noise(np.random.default_rng(0), np.zeros((60, 60)), 3)
        assert np.array_equal(z, np.zeros((3, 60)))

    def test_pipeline_runs_and_is_deterministic(self):
        rng = np.random.default_rng(17)
        ds = random_ds(rng, 20)
        cfg = ILConfig(n_iter=2, n_rollouts=2, rollout_periods=3)
        expert = fake_expert_map(np.random.default_rng(1))
        pol, recs = dart(ds, NetArch(), cfg, expert, fake_simulator,
                         opts=FAST_TRAIN, seed=6)
        assert recs[-1].n_data > 20
        pol2, recs2 = dart(ds, NetArch(), cfg, expert, fake_simulator,
                           opts=FAST_TRAIN, seed=6)
        np.testing.assert_array_equal(pol.theta, pol2.theta)
        assert [r.n_data for r in recs] == [r.n_data for r in recs2]


class TestCoil:
    def test_iterations_project_and_reduce_constraint(self):
        rng = np.random.default_rng(18)
        ds = random_ds(rng, 40)
        cfg = ILConfig(n_iter=2)
        pol, recs = coil(ds, NetArch(n_hidden=12), cfg,
                         opts=FAST_TRAIN, seed=7)
        assert len(recs) == 3
        assert recs[0].constraint_norm_projected is None
        for r in recs[1:]:
            assert r.constraint_norm_projected <= 1e-8
        assert recs[-1].constraint_norm < recs[0].constraint_norm
        assert np.isfinite(recs[-1].mse)

    def test_deterministic(self):
        rng = np.random.default_rng(19)
        ds = random_ds(rng, 30)
        cfg = ILConfig(n_iter=1)
        a, _ = coil(ds, NetArch(n_hidden=12), cfg, opts=FAST_TRAIN, seed=8)
        b, _ = coil(ds, NetArch(n_hidden=12), cfg, opts=FAST_TRAIN, seed=8)
        np.testing.assert_array_equal(a.theta, b.theta)

    def test_signature_has_no_expert_parameter(self):
        import inspect
        params = inspect.signature(coil).parameters
        assert "expert" not in params and "simulator" not in params


class TestMetricsCsv:
    def test_write_and_parse(self, tmp_path):
        from flaplearn.imitation import IterRecord
        recs = [IterRecord(0, 240, 0.0123, 0.5, 1.25),
                IterRecord(1, 300, 0.0045, 0.01, 2.5, 1e-9)]
        p = tmp_path / "metrics.csv"
        write_metrics(recs, str(p))
        lines = p.read_text().strip().split("\n")
        assert lines[0] == "iteration,dataset_size,mse,constraint_norm,wall_time_s"
        row = lines[1].split(",")
        assert int(row[0]) == 0 and int(row[1]) == 240
        assert float(row[2]) == 0.0123
