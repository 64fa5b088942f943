"""Closed-loop simulation, PRBS and EKF baselines, metrics and Monte Carlo orchestration."""

from __future__ import annotations

import csv
import io
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from multiprocessing import get_context

import jax
import jax.numpy as jnp
import numpy as np

from adaptid import design, estimator, ukf
from adaptid.fim import BeliefState
from adaptid.model import ConstraintSpec, NoiseSpec, SystemModel, cached_model

log = logging.getLogger(__name__)

STRATEGIES = ("adaptive", "prbs", "prbs2", "ekf-prbs")
EIG_CLIP = 1e8


# -- configuration --------------------------------------------------------------


@dataclass
class RunConfig:
    """One closed-loop experiment.  Defaults reproduce the pendulum study."""

    model: str = "pendulum"
    model_params: dict = field(default_factory=lambda: {"dt": 0.1})
    theta_true: list = field(default_factory=lambda: [-24.0, 1.0])
    x0: list = field(default_factory=lambda: [0.0, 0.0])
    noise_std: list = field(default_factory=lambda: [0.01])
    u_min: list = field(default_factory=lambda: [-10.0])
    u_max: list = field(default_factory=lambda: [10.0])
    x_min: list = field(default_factory=lambda: [-np.pi / 4, -np.inf])
    x_max: list = field(default_factory=lambda: [np.pi / 4, np.inf])
    gamma: float = 400.0
    k: int = 6
    b: int = 7
    steps: int = 150
    strategy: str = "adaptive"
    seed: int = 0
    # initial belief
    prior_theta_std: float = 1.0
    prior_x_std: float = 1.0
    P0_scale: float = 1e4
    Q0_rel_std: float = 1e-3
    # excitation
    prbs_levels: list = field(default_factory=lambda: [-10.0, 10.0])
    prbs_switch_prob: float = 0.5
    prbs2_levels: list = field(default_factory=lambda: [-1.2, 1.2])
    prbs2_switch_prob: float = 0.3
    warmup_levels: list = field(default_factory=lambda: [-5.0, 5.0])
    warmup_switch_prob: float = 0.3
    # solvers
    adam_iterations: int = 3000
    adam_stepsize: float = 1e-3
    hops: int = 20
    hop_step_scale: float = 0.5
    hop_temperature: float = 1.0
    lbfgs_maxcor: int = 10
    lbfgs_gtol_rel: float = 1e-8
    lbfgs_maxiter: int = 500
    ut_alpha: float = 1e-1
    ut_beta: float = 2.0
    ut_kappa: float = 0.0
    ekf_theta_noise: float = 1e-8

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy: unknown value {self.strategy!r}; expected one of {STRATEGIES}")
        m = self.build_model()
        d = m.dims
        need = d.d_theta + d.d_x + d.d_y
        if self.b < need:
            raise ValueError(f"b: must be >= d_theta + d_x + d_y = {need}, got {self.b}")
        if self.steps < self.b:
            raise ValueError(f"steps: must be >= b = {self.b}")
        if self.k < 1:
            raise ValueError("k: must be >= 1")
        if not self.gamma >= 0:
            raise ValueError("gamma: must be >= 0")
        if len(self.theta_true) != d.d_theta or len(self.x0) != d.d_x or len(self.noise_std) != d.d_y:
            raise ValueError("theta_true/x0/noise_std: dimensions do not match the model")
        for name in ("prbs_switch_prob", "prbs2_switch_prob", "warmup_switch_prob"):
            if not 0 < getattr(self, name) <= 1:
                raise ValueError(f"{name}: must lie in (0, 1]")
        for name in ("prbs_levels", "prbs2_levels", "warmup_levels"):
            lv = getattr(self, name)
            if len(lv) != 2 or not all(self.u_min[i] <= v <= self.u_max[i] for v in lv for i in range(len(self.u_min))):
                raise ValueError(f"{name}: must be two levels inside [u_min, u_max]")
        self.constraints()
        self.noise()

    def build_model(self) -> SystemModel:
        return cached_model(self.model, **self.model_params)

    def constraints(self) -> ConstraintSpec:
        return ConstraintSpec(self.u_min, self.u_max, self.x_min, self.x_max, self.gamma)

    def noise(self) -> NoiseSpec:
        return NoiseSpec.from_std(self.noise_std)

    def adam(self) -> design.AdamOptions:
        return design.AdamOptions(iterations=self.adam_iterations, stepsize=self.adam_stepsize)

    def optimizer(self, seed: int = 0) -> estimator.OptimizerOptions:
        return estimator.OptimizerOptions(
            hops=self.hops,
            step_scale=self.hop_step_scale,
            temperature=self.hop_temperature,
            maxcor=self.lbfgs_maxcor,
            gtol_rel=self.lbfgs_gtol_rel,
            maxiter=self.lbfgs_maxiter,
            seed=seed,
        )

    def ut(self) -> ukf.UTParams:
        return ukf.UTParams(self.ut_alpha, self.ut_beta, self.ut_kappa)

    def to_dict(self) -> dict:
        return asdict(self)


def initial_belief(config: RunConfig, rng: np.random.Generator) -> BeliefState:
    """Zero-mean Gaussian draw of (theta, x), P = P0_scale * I, accurate v with tiny Q."""
    m = config.build_model()
    d = m.dims
    theta0 = config.prior_theta_std * rng.standard_normal(d.d_theta)
    x0 = config.prior_x_std * rng.standard_normal(d.d_x)
    v = config.noise().v
    # 0.1% relative std on the noise std  ->  std(v) = 2 * rel * v
    Q0 = np.diag((2.0 * config.Q0_rel_std * v) ** 2)
    P0 = config.P0_scale * np.eye(d.d_theta + d.d_x)
    return BeliefState(theta0, x0, v, P0, Q0)


# -- simulation primitives ------------------------------------------------------


def simulate_step(model: SystemModel, theta_true, x_true, u, rng: np.random.Generator, v) -> tuple[np.ndarray, np.ndarray]:
    """Exact dynamics step followed by a noisy measurement of the new state."""
    from adaptid.model import step

    x_next = step(model, theta_true, x_true, u)
    noise = np.sqrt(np.asarray(v, dtype=float)) * rng.standard_normal(model.dims.d_y)
    return x_next, model.H @ x_next + noise


def prbs(length: int, levels=(-1.0, 1.0), switch_prob: float = 0.5, seed=None) -> np.ndarray:
    """Two-level random telegraph sequence: each step switches level with ``switch_prob``."""
    if not 0 < switch_prob <= 1:
        raise ValueError("switch_prob must lie in (0, 1]")
    low, high = float(levels[0]), float(levels[1])
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    out = np.empty(length)
    if length == 0:
        return out
    state = rng.random() < 0.5
    switches = rng.random(length) < switch_prob
    for i in range(length):
        if i > 0 and switches[i]:
            state = not state
        out[i] = high if state else low
    return out


@lru_cache(maxsize=None)
def _augmented_step(model: SystemModel):
    """[x; theta] -> [f_theta(x, u); theta] and its Jacobian, compiled."""
    d = model.dims

    def f(z, u):
        x, theta = z[: d.d_x], z[d.d_x :]
        return jnp.concatenate([model.step_fn(theta, x, u), theta])

    return jax.jit(f), jax.jit(jax.jacfwd(f))


def ekf_baseline(model: SystemModel, inputs, outputs, prior: BeliefState, theta_noise: float = 1e-8):
    """Extended Kalman filter on the parameter-augmented state [x; theta].

    ``inputs`` holds u_0..u_{T-1} (d_u, T) and ``outputs`` y_0..y_{T-1}
    (d_y, T); y_0 is not used.  Row t of the returned estimates is the
    filtered parameter after y_t.  Returns (theta_hat (T, d_theta),
    P_diag (T, d_theta + d_x) in (theta, x) order, flags (T,)).
    """
    d = model.dims
    inputs = np.asarray(inputs, dtype=float).reshape(d.d_u, -1)
    outputs = np.asarray(outputs, dtype=float).reshape(d.d_y, -1)
    T = inputs.shape[1]
    f, jac = _augmented_step(model)
    n = d.d_x + d.d_theta
    z = np.concatenate([prior.x_hat, prior.theta_hat])
    perm = np.r_[d.d_theta : n, 0 : d.d_theta]  # (theta, x) -> (x, theta)
    P = prior.P[np.ix_(perm, perm)].copy()
    Qp = np.diag(np.r_[np.zeros(d.d_x), np.full(d.d_theta, theta_noise)])
    Ha = np.hstack([model.H, np.zeros((d.d_y, d.d_theta))])
    V = np.diag(prior.v_hat)
    I = np.eye(n)

    thetas = np.empty((T, d.d_theta))
    pdiag = np.empty((T, n))
    flags = np.zeros(T, dtype=bool)
    for t in range(T):
        if t > 0:
            u = inputs[:, t - 1]
            F = np.asarray(jac(z, u))
            z = np.asarray(f(z, u))
            P = F @ P @ F.T + Qp
            S = Ha @ P @ Ha.T + V
            K = np.linalg.solve(S, Ha @ P).T
            z = z + K @ (outputs[:, t] - Ha @ z)
            A = I - K @ Ha
            P = A @ P @ A.T + K @ V @ K.T
            P = 0.5 * (P + P.T)
            if not np.all(np.isfinite(P)) or not np.all(np.isfinite(z)):
                flags[t] = True
                z = np.where(np.isfinite(z), z, 0.0)
                P = EIG_CLIP * I
            else:
                w, Vec = np.linalg.eigh(P)
                if w[-1] > EIG_CLIP:
                    flags[t] = True
                    P = (Vec * np.minimum(w, EIG_CLIP)) @ Vec.T
        thetas[t] = z[d.d_x :]
        pdiag[t] = np.r_[np.diag(P)[d.d_x :], np.diag(P)[: d.d_x]]
    return thetas, pdiag, flags


# -- metrics ----------------------------------------------------------------------


def normalized_sq_error(estimates, theta_true) -> np.ndarray:
    theta_true = np.asarray(theta_true, dtype=float)
    if np.any(theta_true == 0):
        raise ZeroDivisionError("normalised MSE is undefined for a zero true parameter")
    est = np.asarray(estimates, dtype=float)
    return np.sum((est - theta_true) ** 2 / theta_true**2, axis=-1)


def metric_mse(estimates, theta_true) -> tuple[np.ndarray, np.ndarray]:
    """Normalised MSE per t for estimates shaped (runs, T, d_theta); also its MC standard error."""
    est = np.asarray(estimates, dtype=float)
    if est.ndim == 2:
        est = est[None]
    e = normalized_sq_error(est, theta_true)
    return e.mean(axis=0), _stderr(e)


def ocv_values(states, spec: ConstraintSpec) -> np.ndarray:
    """||(S x_min - S x)^+ + (S x - S x_max)^+|| for states shaped (..., d_x)."""
    states = np.asarray(states, dtype=float)
    lo, hi = spec.scaled_bounds
    sx = states * spec.s_diag
    excess = np.maximum(lo - sx, 0.0) + np.maximum(sx - hi, 0.0)
    return np.linalg.norm(excess, axis=-1)


def metric_ocv(states, spec: ConstraintSpec) -> tuple[np.ndarray, np.ndarray]:
    """Monte Carlo mean OCV per t for trajectories shaped (runs, T, d_x), with standard error."""
    states = np.asarray(states, dtype=float)
    if states.ndim == 2:
        states = states[None]
    o = ocv_values(states, spec)
    return o.mean(axis=0), _stderr(o)


def _stderr(samples) -> np.ndarray:
    n = samples.shape[0]
    if n < 2:
        return np.zeros(samples.shape[1:])
    return samples.std(axis=0, ddof=1) / np.sqrt(n)


@lru_cache(maxsize=None)
def _transition_jacobians(model: SystemModel):
    d = model.dims

    def f(z, u):
        theta, x = z[: d.d_theta], z[d.d_theta :]
        return jnp.concatenate([theta, model.step_fn(theta, x, u)])

    return jax.jit(jax.vmap(jax.jacfwd(f), in_axes=(0, 0)))


def crb_curve(model: SystemModel, theta_true, states, inputs, v_true, prior_P, return_cov: bool = False):
    """Approximate CRB along a realised trajectory, evaluated at the true parameters.

    ``states`` is (T, d_x) holding x_0..x_{T-1}, ``inputs`` (T, d_u).  Entry t
    uses y_1..y_t and is reported as sum_k [C_t]_kk / theta_k^2.

    The information of y_1..y_t about (theta, x_0) is accumulated in covariance
    form, propagating (theta, x_t) forward with the exact transition Jacobians.
    This equals the Schur-reduced batch bound but stays well conditioned when
    the open-loop sensitivities grow geometrically.
    """
    d = model.dims
    theta_true = np.asarray(theta_true, dtype=float)
    states = np.asarray(states, dtype=float).reshape(-1, d.d_x)
    inputs = np.asarray(inputs, dtype=float).reshape(-1, d.d_u)
    T = states.shape[0]
    V = np.diag(np.atleast_1d(np.asarray(v_true, dtype=float)))
    Z = np.hstack([np.tile(theta_true, (T, 1)), states])
    F_all = np.asarray(_transition_jacobians(model)(Z, inputs))
    Ha = np.hstack([np.zeros((d.d_y, d.d_theta)), model.H])
    n = d.d_theta + d.d_x
    I = np.eye(n)
    P = np.array(prior_P, dtype=float)
    out = np.empty(T)
    covs = np.empty((T, d.d_theta, d.d_theta))
    for t in range(T):
        if t > 0:
            F = F_all[t - 1]
            P = F @ P @ F.T
            S = Ha @ P @ Ha.T + V
            K = np.linalg.solve(S, Ha @ P).T
            A = I - K @ Ha
            P = A @ P @ A.T + K @ V @ K.T
            P = 0.5 * (P + P.T)
        C = P[: d.d_theta, : d.d_theta]
        covs[t] = C
        out[t] = float(np.sum(np.diag(C) / theta_true**2))
    return (out, covs) if return_cov else out


# -- closed loop ------------------------------------------------------------------


@dataclass
class ExperimentLog:
    """Per-step record; row t holds x_t, the input u_t applied at t and the measurement y_t."""

    t: np.ndarray
    x_true: np.ndarray
    u: np.ndarray
    y: np.ndarray
    theta_hat: np.ndarray
    P_diag: np.ndarray
    criterion: np.ndarray
    ocv: np.ndarray
    crb: np.ndarray
    events: list = field(default_factory=list)

    def csv_header(self) -> list[str]:
        return csv_header(self.x_true.shape[1], self.u.shape[1], self.y.shape[1], self.theta_hat.shape[1], self.P_diag.shape[1])

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.csv_header())
        for i in range(self.t.size):
            w.writerow(_csv_row(self, i))
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text


def csv_header(d_x, d_u, d_y, d_theta, d_z) -> list[str]:
    return (
        ["t"]
        + [f"x_true{i + 1}" for i in range(d_x)]
        + [f"u{i + 1}" for i in range(d_u)]
        + [f"y{i + 1}" for i in range(d_y)]
        + [f"theta_hat{i + 1}" for i in range(d_theta)]
        + [f"P_diag{i + 1}" for i in range(d_z)]
        + ["criterion", "ocv"]
    )


def _fmt(v) -> str:
    return repr(float(v))


def _csv_row(log_: ExperimentLog, i: int) -> list[str]:
    return (
        [str(int(log_.t[i]))]
        + [_fmt(v) for v in log_.x_true[i]]
        + [_fmt(v) for v in log_.u[i]]
        + [_fmt(v) for v in log_.y[i]]
        + [_fmt(v) for v in log_.theta_hat[i]]
        + [_fmt(v) for v in log_.P_diag[i]]
        + [_fmt(log_.criterion[i]), _fmt(log_.ocv[i])]
    )


def run_seeds(master_seed: int, run_index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=master_seed, spawn_key=(run_index,))


def run_experiment(config: RunConfig, seed_seq: np.random.SeedSequence | None = None, csv_path=None) -> ExperimentLog:
    """Simulate one closed-loop experiment.

    Random streams (measurement noise, PRBS, prior draw, basin hopping) are
    independent children of the run seed, so strategies run with the same
    seed see identical noise, prior and baseline PRBS.
    """
    seed_seq = seed_seq if seed_seq is not None else np.random.SeedSequence(config.seed)
    noise_ss, prbs_ss, prior_ss, hop_ss = seed_seq.spawn(4)
    noise_rng = np.random.default_rng(noise_ss)
    prior_rng = np.random.default_rng(prior_ss)
    hop_rng = np.random.default_rng(hop_ss)
    prbs1_ss, prbs2_ss, warm_ss = prbs_ss.spawn(3)

    model = config.build_model()
    d = model.dims
    spec = config.constraints()
    v_true = config.noise().v
    theta_true = np.asarray(config.theta_true, dtype=float)
    T, b = config.steps, config.b
    ut_params = config.ut()
    opt = config.optimizer()

    prbs1 = prbs(T, config.prbs_levels, config.prbs_switch_prob, np.random.default_rng(prbs1_ss))
    prbs2 = prbs(T, config.prbs2_levels, config.prbs2_switch_prob, np.random.default_rng(prbs2_ss))
    if config.strategy in ("prbs", "ekf-prbs"):
        schedule = prbs1
    elif config.strategy == "prbs2":
        schedule = prbs2
    else:
        schedule = prbs(T, config.warmup_levels, config.warmup_switch_prob, np.random.default_rng(warm_ss))
    schedule = np.tile(schedule[:, None], (1, d.d_u))

    prior0 = initial_belief(config, prior_rng)

    xs = np.empty((T, d.d_x))
    us = np.empty((T, d.d_u))
    ys = np.empty((T, d.d_y))
    thetas = np.empty((T, d.d_theta))
    pdiag = np.empty((T, d.d_theta + d.d_x))
    crit = np.full(T, np.nan)
    events: list = []

    writer = _IncrementalCsv(csv_path, csv_header(d.d_x, d.d_u, d.d_y, d.d_theta, d.d_theta + d.d_x))

    x = np.asarray(config.x0, dtype=float)
    y = model.H @ x + np.sqrt(v_true) * noise_rng.standard_normal(d.d_y)

    if config.strategy == "ekf-prbs":
        # the EKF only needs the data stream, so simulate it first
        for t in range(T):
            xs[t], us[t], ys[t] = x, schedule[t], y
            x, y = simulate_step(model, theta_true, x, us[t], noise_rng, v_true)
        thetas, pdiag, flags = ekf_baseline(model, us.T, ys.T, prior0, config.ekf_theta_noise)
        events += [(int(t), "ekf-covariance-clipped") for t in np.flatnonzero(flags)]
        ocv = ocv_values(xs, spec)
        log_ = ExperimentLog(np.arange(T), xs, us, ys, thetas, pdiag, crit, ocv, np.empty(0), events)
        for i in range(T):
            writer.row(_csv_row(log_, i))
        writer.close()
        log_.crb = crb_curve(model, theta_true, xs, us, v_true, prior0.P)
        return log_

    belief = prior0
    boundary = prior0
    loop = design.LoopState(belief, design.DesignHorizon.initial(config.k, spec))
    adam = config.adam()
    for t in range(T):
        xs[t], ys[t] = x, y
        if t >= b and t % b == 0:
            data = estimator.BlockData(us[t - b : t].T, ys[t - b + 1 : t + 1].T, t - b)
            try:
                res = estimator.fit_block(model, data, boundary, opt, hop_rng)
                aug = ukf.propagate_to_present(model, ukf.AugmentedBelief.from_belief(res.belief), data.inputs, ut_params)
                belief = res.belief.replace(theta_hat=aug.z_hat[: d.d_theta], x_hat=aug.z_hat[d.d_theta :], P=aug.P)
                if res.regularized:
                    events.append((t, "estimator-regularized"))
            except (estimator.EstimationFailedError, np.linalg.LinAlgError, ArithmeticError, ValueError) as exc:
                events.append((t, f"estimation-failed: {exc}"))
                belief = _safe_predict(model, belief, us[t - 1], ut_params, events, t)
            boundary = belief
            loop.belief = belief
        elif t > 0:
            belief = _safe_predict(model, belief, us[t - 1], ut_params, events, t)
            loop.belief = belief

        if config.strategy == "adaptive" and t >= b:
            u, diag = design.receding_horizon_step(model, loop, spec, adam, ut_params, predict=False)
            if diag is None:
                events.append((t, "design-failed-hold"))
            else:
                crit[t] = diag.info_term
                if diag.warning:
                    events.append((t, "design-warning"))
        else:
            u = schedule[t]

        us[t] = u
        thetas[t] = belief.theta_hat
        pdiag[t] = np.diag(belief.P)
        writer.row(_csv_row_arrays(t, x, u, y, belief.theta_hat, pdiag[t], crit[t], ocv_values(x, spec)))
        x, y = simulate_step(model, theta_true, x, u, noise_rng, v_true)
    writer.close()

    ocv = ocv_values(xs, spec)
    crb = crb_curve(model, theta_true, xs, us, v_true, prior0.P)
    return ExperimentLog(np.arange(T), xs, us, ys, thetas, pdiag, crit, ocv, crb, events)


def _safe_predict(model, belief, u, params, events, t):
    try:
        return ukf.predict_belief(model, belief, u, params)
    except (np.linalg.LinAlgError, ArithmeticError, ValueError) as exc:
        events.append((t, f"prediction-failed: {exc}"))
        return belief


def _csv_row_arrays(t, x, u, y, theta, pdiag, crit, ocv) -> list[str]:
    return (
        [str(int(t))]
        + [_fmt(v) for v in x]
        + [_fmt(v) for v in u]
        + [_fmt(v) for v in y]
        + [_fmt(v) for v in theta]
        + [_fmt(v) for v in pdiag]
        + [_fmt(crit), _fmt(ocv)]
    )


class _IncrementalCsv:
    def __init__(self, path, header):
        self._fh = None
        if path is not None:
            self._fh = open(path, "w", newline="")
            self._w = csv.writer(self._fh, lineterminator="\n")
            self._w.writerow(header)
            self._fh.flush()

    def row(self, values):
        if self._fh is not None:
            self._w.writerow(values)
            self._fh.flush()

    def close(self):
        if self._fh is not None:
            self._fh.close()
            self._fh = None


# -- Monte Carlo ------------------------------------------------------------------

AGGREGATE_HEADER = ["t", "mse_mean", "mse_se", "ocv_mean", "ocv_se", "crb_mean"]


@dataclass
class MonteCarloResult:
    config: RunConfig
    logs: list
    t: np.ndarray
    mse_mean: np.ndarray
    mse_se: np.ndarray
    ocv_mean: np.ndarray
    ocv_se: np.ndarray
    crb_mean: np.ndarray

    def aggregate_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(AGGREGATE_HEADER)
        for i in range(self.t.size):
            w.writerow(
                [str(int(self.t[i]))]
                + [_fmt(a[i]) for a in (self.mse_mean, self.mse_se, self.ocv_mean, self.ocv_se, self.crb_mean)]
            )
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text

    def summary(self) -> dict:
        b = self.config.b
        return {
            "strategy": self.config.strategy,
            "runs": len(self.logs),
            "final_mse": float(self.mse_mean[-1]),
            "mean_ocv_after_warmup": float(self.ocv_mean[b:].mean()),
            "final_crb": float(self.crb_mean[-1]),
        }


def _run_one(args):
    config, index, csv_path = args
    return run_experiment(config, run_seeds(config.seed, index), csv_path)


def aggregate(config: RunConfig, logs: list) -> MonteCarloResult:
    thetas = np.stack([lg.theta_hat for lg in logs])
    mse, mse_se = metric_mse(thetas, config.theta_true)
    ocv = np.stack([lg.ocv for lg in logs])
    crb = np.stack([lg.crb for lg in logs])
    return MonteCarloResult(
        config, logs, logs[0].t.copy(), mse, mse_se, ocv.mean(axis=0), _stderr(ocv), crb.mean(axis=0)
    )


def monte_carlo(config: RunConfig, runs: int, workers: int = 1, run_dir=None) -> MonteCarloResult:
    """Independent replications with per-run seeds derived from ``config.seed``.

    Run i always uses the same seed regardless of ``runs``; results are
    reduced in run-index order whatever the completion order.
    """
    if runs < 1:
        raise ValueError("runs must be >= 1")
    jobs = []
    for i in range(runs):
        path = None if run_dir is None else os.path.join(run_dir, f"{config.strategy}_run{i:04d}.csv")
        jobs.append((config, i, path))
    if workers <= 1:
        logs = [_run_one(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers, mp_context=get_context("spawn")) as pool:
            logs = list(pool.map(_run_one, jobs))
    return aggregate(config, logs)
