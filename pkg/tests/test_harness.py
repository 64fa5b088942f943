import csv
import io

import numpy as np
import pytest

from adaptid import fim, harness
from adaptid.fim import BeliefState
from adaptid.harness import RunConfig
from adaptid.model import ConstraintSpec, linear_model

from conftest import THETA, make_belief, random_spd

SHORT = dict(steps=28)


# -- simulation primitives -----------------------------------------------------


def test_noise_free_measurement_is_exact(pendulum):
    rng = np.random.default_rng(0)
    x, y = harness.simulate_step(pendulum, THETA, [0.3, 0.1], [2.0], rng, [0.0])
    np.testing.assert_array_equal(y, pendulum.H @ x)


def test_equilibrium_stays_put(pendulum):
    x, _ = harness.simulate_step(pendulum, THETA, [0.0, 0.0], [0.0], np.random.default_rng(0), [1e-4])
    np.testing.assert_array_equal(x, [0.0, 0.0])


def test_noise_statistics(pendulum):
    rng = np.random.default_rng(1)
    ys = np.array([harness.simulate_step(pendulum, THETA, [0.0, 0.0], [0.0], rng, [1e-4])[1][0] for _ in range(10_000)])
    assert abs(ys.std() / 0.01 - 1) < 0.05


def test_prbs_properties():
    s = harness.prbs(500, (-10, 10), 0.4, 3)
    assert set(np.unique(s)) <= {-10.0, 10.0}
    np.testing.assert_array_equal(s, harness.prbs(500, (-10, 10), 0.4, 3))
    alt = harness.prbs(50, (-1, 1), 1.0, 4)
    assert np.all(alt[1:] == -alt[:-1])
    assert harness.prbs(0, (-1, 1), 0.5, 0).size == 0
    with pytest.raises(ValueError):
        harness.prbs(10, (-1, 1), 0.0, 0)
    switches = np.mean(s[1:] != s[:-1])
    assert abs(switches - 0.4) < 0.07


# -- EKF baseline -----------------------------------------------------------------


def test_ekf_equals_kalman_filter_on_linear_model():
    rng = np.random.default_rng(2)
    A = np.array([[0.9, 0.2], [-0.1, 0.7]])
    B = np.array([[0.0], [1.0]])
    F = np.array([[0.3], [0.5]])
    H = np.array([[1.0, 0.0]])
    m = linear_model(A, B, H, F)
    T, v, qn = 40, 0.04, 1e-6
    U = rng.normal(size=(1, T))
    Y = rng.normal(size=(1, T))
    prior = BeliefState([0.2], [0.1, -0.3], [v], random_spd(rng, 3), [[1e-6]])
    thetas, pdiag, flags = harness.ekf_baseline(m, U, Y, prior, qn)

    G = np.block([[A, F], [np.zeros((1, 2)), np.eye(1)]])
    Bz = np.r_[B[:, 0], 0.0]
    Ha = np.array([[1.0, 0.0, 0.0]])
    perm = [1, 2, 0]
    z = np.r_[prior.x_hat, prior.theta_hat]
    P = prior.P[np.ix_(perm, perm)]
    for t in range(T):
        if t > 0:
            z = G @ z + Bz * U[0, t - 1]
            P = G @ P @ G.T + np.diag([0.0, 0.0, qn])
            S = Ha @ P @ Ha.T + v
            K = P @ Ha.T / S
            z = z + (K * (Y[0, t] - Ha @ z)).ravel()
            P = (np.eye(3) - K @ Ha) @ P
        assert abs(thetas[t, 0] - z[2]) <= 1e-8
        np.testing.assert_allclose(pdiag[t], np.r_[P[2, 2], P[0, 0], P[1, 1]], atol=1e-8)
    assert not flags.any()


def test_ekf_stays_at_truth_without_noise(pendulum):
    U = harness.prbs(60, (-10, 10), 0.5, 5)[None, :]
    from adaptid.model import rollout

    X = rollout(pendulum, THETA, np.zeros(2), U[:, :-1])
    Y = np.hstack([[[0.0]], pendulum.H @ X])
    prior = BeliefState(THETA, [0.0, 0.0], [1e-12], 1e-10 * np.eye(4), [[1e-30]])
    thetas, _, _ = harness.ekf_baseline(pendulum, U, Y, prior, theta_noise=0.0)
    np.testing.assert_allclose(thetas, np.tile(THETA, (60, 1)), atol=1e-8)


def test_ekf_clips_exploding_covariance():
    m = linear_model([[3.0]], [[0.0]], [[1e-9]], [[0.0]])
    prior = BeliefState([1.0], [0.0], [1.0], np.eye(2), [[1.0]])
    _, pdiag, flags = harness.ekf_baseline(m, np.zeros((1, 30)), np.zeros((1, 30)), prior)
    assert flags.any()
    assert np.all(pdiag <= harness.EIG_CLIP * (1 + 1e-9))


# -- metrics ----------------------------------------------------------------------


def test_mse_examples():
    mean, se = harness.metric_mse(np.tile(THETA, (3, 5, 1)), THETA)
    np.testing.assert_array_equal(mean, 0.0)
    assert harness.metric_mse([[3.0]], [2.0])[0][0] == pytest.approx(0.25)
    assert harness.metric_mse(np.array([[[1.0]], [[3.0]]]), [2.0])[0][0] == pytest.approx(0.25)
    _, se = harness.metric_mse(np.array([[[1.0]], [[3.0]]]), [2.0])
    assert se[0] == 0.0
    with pytest.raises(ZeroDivisionError):
        harness.metric_mse([[1.0, 2.0]], [0.0, 1.0])


def test_ocv_examples(pend_spec):
    feasible = np.array([[[0.1, 50.0], [-0.7, -80.0]]])
    np.testing.assert_array_equal(harness.metric_ocv(feasible, pend_spec)[0], 0.0)
    spec = ConstraintSpec([-1], [1], [-1.0], [1.0])  # S = 0.5; standardized half-width 0.5
    over = 1.0 + 0.1 / 0.5  # 10% standardized exceedance
    assert harness.metric_ocv([[over]], spec)[0][0] == pytest.approx(0.1)
    assert harness.metric_ocv([[-over]], spec)[0][0] == pytest.approx(0.1)
    # norm, not squared norm
    spec2 = ConstraintSpec([-1], [1], [-1.0, -1.0], [1.0, 1.0])
    assert harness.ocv_values([1.6, 1.8], spec2) == pytest.approx(np.hypot(0.3, 0.4))


# -- CRB --------------------------------------------------------------------------


def test_crb_uninformative_is_prior():
    m = linear_model([[0.9, 0.1], [0.0, 0.8]], [[0.0], [1.0]], [[0.0, 0.0]], [[1.0, 0.0], [0.0, 1.0]])
    P0 = np.diag([4.0, 9.0, 1.0, 1.0])
    theta = np.array([2.0, -3.0])
    crb = harness.crb_curve(m, theta, np.zeros((10, 2)), np.ones((10, 1)), [1e-4], P0)
    np.testing.assert_allclose(crb, 4.0 / 4.0 + 9.0 / 9.0, rtol=1e-12)


def _pend_traj(pendulum, T, seed):
    from adaptid.model import rollout

    U = harness.prbs(T, (-10, 10), 0.5, seed)[:, None]
    X = np.vstack([np.zeros((1, 2)), rollout(pendulum, THETA, np.zeros(2), U[:-1].T).T])
    return X, U


def test_crb_is_non_increasing(pendulum):
    X, U = _pend_traj(pendulum, 150, 6)
    crb = harness.crb_curve(pendulum, THETA, X, U, [1e-4], 1e4 * np.eye(4))
    assert np.all(np.diff(crb) <= 1e-12 * crb[:-1])
    assert crb[-1] < crb[0]


def test_crb_matches_batch_schur_bound(pendulum):
    X, U = _pend_traj(pendulum, 12, 7)
    P0 = 1e4 * np.eye(4)
    _, covs = harness.crb_curve(pendulum, THETA, X, U, [1e-4], P0, return_cov=True)
    prior = BeliefState(THETA, [0.0, 0.0], [1e-4], P0, [[1e-12]])
    for t in range(1, 12):
        E = fim.prediction_error_jacobians(pendulum, THETA, np.zeros(2), U[:t].T)
        C, _ = fim.reduced_covariance(fim.assemble_fim(prior, E, [1e-4], t))
        np.testing.assert_allclose(covs[t], C, rtol=1e-6)


# -- configuration ---------------------------------------------------------------


def test_default_config_matches_the_pendulum_study():
    c = RunConfig()
    assert (c.k, c.b, c.gamma, c.P0_scale) == (6, 7, 400.0, 1e4)
    assert c.theta_true == [-24.0, 1.0] and c.noise_std == [0.01]
    assert c.constraints().x_max[0] == pytest.approx(np.pi / 4)
    assert c.build_model().dt == 0.1


@pytest.mark.parametrize(
    "kwargs",
    [dict(b=3), dict(steps=5), dict(strategy="nope"), dict(k=0), dict(gamma=-1.0), dict(prbs_switch_prob=0.0), dict(prbs_levels=[-20.0, 20.0]), dict(theta_true=[1.0])],
)
def test_invalid_configs(kwargs):
    with pytest.raises(ValueError):
        RunConfig(**kwargs)


def test_initial_belief_draws():
    cfg = RunConfig()
    draws = [harness.initial_belief(cfg, np.random.default_rng(i)) for i in range(2000)]
    Z = np.array([d.z_hat for d in draws])
    assert np.all(np.abs(Z.mean(axis=0)) < 0.1)
    assert np.all(np.abs(Z.std(axis=0) - 1.0) < 0.06)
    b = draws[0]
    np.testing.assert_array_equal(b.P, 1e4 * np.eye(4))
    np.testing.assert_allclose(b.v_hat, [1e-4])
    np.testing.assert_allclose(np.sqrt(b.Q[0, 0]) / b.v_hat[0], 2e-3)


# -- closed loop -----------------------------------------------------------------


def test_prbs_strategy_never_designs(monkeypatch):
    from adaptid import design

    def boom(*a, **k):
        raise AssertionError("design invoked")

    monkeypatch.setattr(design, "receding_horizon_step", boom)
    monkeypatch.setattr(design, "optimize_design", boom)
    log = harness.run_experiment(RunConfig(strategy="prbs", **SHORT))
    assert set(np.unique(log.u)) <= {-10.0, 10.0}
    assert np.all(np.isnan(log.criterion))


def test_same_seed_identical_log(tmp_path):
    cfg = RunConfig(strategy="prbs", seed=3, **SHORT)
    a = harness.run_experiment(cfg, csv_path=tmp_path / "a.csv")
    b = harness.run_experiment(cfg, csv_path=tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert a.to_csv() == b.to_csv()
    c = harness.run_experiment(RunConfig(strategy="prbs", seed=4, **SHORT))
    assert c.to_csv() != a.to_csv()


def test_csv_schema(tmp_path):
    log = harness.run_experiment(RunConfig(strategy="prbs", **SHORT), csv_path=tmp_path / "run.csv")
    text = (tmp_path / "run.csv").read_text()
    rows = list(csv.reader(io.StringIO(text)))
    assert rows[0] == [
        "t", "x_true1", "x_true2", "u1", "y1", "theta_hat1", "theta_hat2",
        "P_diag1", "P_diag2", "P_diag3", "P_diag4", "criterion", "ocv",
    ]  # fmt: skip
    assert len(rows) == 29 and [int(r[0]) for r in rows[1:]] == list(range(28))
    assert text == log.to_csv()
    assert float(rows[5][3]) == log.u[4, 0]


def test_partial_log_survives_abort(tmp_path, monkeypatch):
    real = harness.simulate_step
    calls = {"n": 0}

    def flaky(*a, **k):
        calls["n"] += 1
        if calls["n"] > 10:
            raise KeyboardInterrupt
        return real(*a, **k)

    monkeypatch.setattr(harness, "simulate_step", flaky)
    with pytest.raises(KeyboardInterrupt):
        harness.run_experiment(RunConfig(strategy="prbs", **SHORT), csv_path=tmp_path / "p.csv")
    assert len((tmp_path / "p.csv").read_text().splitlines()) == 12


def test_strategies_share_noise_prior_and_baseline():
    a = harness.run_experiment(RunConfig(strategy="prbs", **SHORT))
    e = harness.run_experiment(RunConfig(strategy="ekf-prbs", **SHORT))
    np.testing.assert_array_equal(a.u, e.u)
    np.testing.assert_array_equal(a.y, e.y)
    np.testing.assert_array_equal(a.theta_hat[0], e.theta_hat[0])


def test_estimates_logged_after_each_block():
    log = harness.run_experiment(RunConfig(strategy="prbs", steps=42))
    assert np.all(np.isfinite(log.theta_hat)) and np.all(log.P_diag > 0)
    # before the first block the prior draw is carried through the predictions
    np.testing.assert_allclose(log.theta_hat[:7], np.tile(log.theta_hat[0], (7, 1)), rtol=0, atol=1e-12)
    assert np.max(np.abs(log.theta_hat[-1] - THETA) / np.abs(THETA)) < 0.05


def test_prbs2_stays_small():
    log = harness.run_experiment(RunConfig(strategy="prbs2", **SHORT))
    assert set(np.unique(log.u)) <= {-1.2, 1.2}


@pytest.fixture(scope="module")
def adaptive_log():
    return harness.run_experiment(RunConfig(strategy="adaptive", seed=0))


def test_adaptive_run_settles(adaptive_log):
    log = adaptive_log
    b = 7
    assert log.t.size == 150
    assert np.all(np.abs(log.u[b:]) < 10.0)
    assert np.all(np.isfinite(log.criterion[b:])) and np.all(np.isnan(log.criterion[:b]))
    assert np.all((log.criterion[b:] > 0) & (log.criterion[b:] <= 2.0 + 1e-12))
    assert np.mean(log.ocv[75:]) < 0.01
    assert np.max(np.abs(log.theta_hat[-1] - THETA) / np.abs(THETA)) < 0.01


# -- Monte Carlo -----------------------------------------------------------------


def test_single_run_aggregate_matches_log():
    cfg = RunConfig(strategy="prbs", **SHORT)
    res = harness.monte_carlo(cfg, 1)
    log = harness.run_experiment(cfg, harness.run_seeds(cfg.seed, 0))
    np.testing.assert_array_equal(res.mse_mean, harness.metric_mse(log.theta_hat, cfg.theta_true)[0])
    np.testing.assert_array_equal(res.ocv_mean, log.ocv)
    np.testing.assert_array_equal(res.crb_mean, log.crb)
    np.testing.assert_array_equal(res.mse_se, 0.0)


def test_doubling_runs_reproduces_first_half(tmp_path):
    cfg = RunConfig(strategy="ekf-prbs", **SHORT)
    two = harness.monte_carlo(cfg, 2)
    four = harness.monte_carlo(cfg, 4, run_dir=tmp_path)
    for a, b in zip(two.logs, four.logs[:2]):
        assert a.to_csv() == b.to_csv()
    assert sorted(p.name for p in tmp_path.iterdir()) == [f"ekf-prbs_run{i:04d}.csv" for i in range(4)]


def test_parallel_matches_serial():
    cfg = RunConfig(strategy="ekf-prbs", **SHORT)
    assert harness.monte_carlo(cfg, 2, workers=2).aggregate_csv() == harness.monte_carlo(cfg, 2).aggregate_csv()


def test_aggregate_schema_and_summary():
    res = harness.monte_carlo(RunConfig(strategy="ekf-prbs", **SHORT), 2)
    rows = list(csv.reader(io.StringIO(res.aggregate_csv())))
    assert rows[0] == harness.AGGREGATE_HEADER and len(rows) == 29
    s = res.summary()
    assert s["runs"] == 2 and s["strategy"] == "ekf-prbs"
    assert s["final_mse"] == res.mse_mean[-1]


def test_monte_carlo_needs_a_run():
    with pytest.raises(ValueError):
        harness.monte_carlo(RunConfig(**SHORT), 0)
