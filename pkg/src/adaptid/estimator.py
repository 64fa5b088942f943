"""Block-wise maximum-likelihood refits of (theta, x_tau, v) with a Gaussian prior.

Each block of ``b`` samples is fitted by basin hopping over L-BFGS local
solves.  The objective is twice the negative log-likelihood: Gaussian
prediction errors over the block, the log-determinant of V, and quadratic
prior terms summarising all earlier data.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import lru_cache

import jax
import jax.numpy as jnp
import numpy as np
from scipy.optimize import minimize

from adaptid import fim
from adaptid.fim import BeliefState
from adaptid.model import SystemModel, rollout_traced

log = logging.getLogger(__name__)

BARRIER = 1e12


class EstimationFailedError(RuntimeError):
    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


@dataclass(frozen=True)
class BlockData:
    """Inputs u_tau..u_{tau+b-1} (d_u, b) and the outputs y_{tau+1}..y_{tau+b} (d_y, b) they produced."""

    inputs: np.ndarray
    outputs: np.ndarray
    tau: int = 0

    def __post_init__(self):
        u = np.atleast_2d(np.asarray(self.inputs, dtype=float))
        y = np.atleast_2d(np.asarray(self.outputs, dtype=float))
        if u.shape[1] != y.shape[1]:
            raise ValueError("inputs and outputs must cover the same samples")
        object.__setattr__(self, "inputs", u)
        object.__setattr__(self, "outputs", y)

    @property
    def b(self) -> int:
        return self.inputs.shape[1]


@dataclass(frozen=True)
class OptimizerOptions:
    hops: int = 20
    step_scale: float = 0.5
    temperature: float = 1.0
    maxcor: int = 10
    gtol_rel: float = 1e-8
    maxiter: int = 500
    seed: int = 0


@dataclass
class EstimationResult:
    belief: BeliefState
    nll: float
    hops_taken: int
    converged: bool
    regularized: bool = False
    history: list = field(default_factory=list, repr=False)


def check_block_size(model: SystemModel, b: int):
    d = model.dims
    need = d.d_theta + d.d_x + d.d_y
    if b < need:
        raise ValueError(f"block size b={b} is below d_theta + d_x + d_y = {need}")


# -- objective ------------------------------------------------------------------


def nll_traced(step_fn, H, u, y, theta0, x0, v0, P_inv, Q_inv, theta, x_tau, log_v):
    v = jnp.exp(log_v)
    pred = H @ rollout_traced(step_fn, theta, x_tau, u)
    resid = y - pred
    fit = jnp.sum(resid**2 / v[:, None])
    logdet = u.shape[1] * jnp.sum(log_v)
    dz = jnp.concatenate([theta - theta0, x_tau - x0])
    dv = v - v0
    total = fit + logdet + dz @ P_inv @ dz + dv @ Q_inv @ dv
    return jnp.where(jnp.isfinite(total), total, BARRIER)


@lru_cache(maxsize=None)
def _nll_fns(model: SystemModel):
    H = jnp.asarray(model.H)
    d = model.dims

    def packed(w, u, y, theta0, x0, v0, P_inv, Q_inv):
        theta = w[: d.d_theta]
        x_tau = w[d.d_theta : d.d_theta + d.d_x]
        log_v = w[d.d_theta + d.d_x :]
        return nll_traced(model.step_fn, H, u, y, theta0, x0, v0, P_inv, Q_inv, theta, x_tau, log_v)

    def value_and_grad(*args):
        val, grad = jax.value_and_grad(packed)(*args)
        # past the barrier the gradient carries no information
        return val, jnp.where(jnp.isfinite(grad) & (val < BARRIER), grad, 0.0)

    return jax.jit(packed), jax.jit(value_and_grad)


def _block_args(data: BlockData, prior: BeliefState):
    return (
        data.inputs,
        data.outputs,
        prior.theta_hat,
        prior.x_hat,
        prior.v_hat,
        fim.prior_precision(prior.P),
        fim.spd_inverse(prior.Q),
    )


def block_nll(model: SystemModel, data: BlockData, prior: BeliefState, theta, x_tau, log_v) -> float:
    """Twice the negative block log-likelihood (up to a constant) at v = exp(log_v)."""
    w = np.concatenate([np.atleast_1d(theta), np.atleast_1d(x_tau), np.atleast_1d(log_v)]).astype(float)
    f, _ = _nll_fns(model)
    return float(f(w, *_block_args(data, prior)))


# -- fitting ----------------------------------------------------------------------


def _local_solve(vg, w0, args, opts: OptimizerOptions):
    def fun(w):
        val, grad = vg(w, *args)
        return float(val), np.asarray(grad, dtype=float)

    f0, _ = fun(w0)
    gtol = opts.gtol_rel * max(1.0, abs(f0))
    res = minimize(
        fun,
        w0,
        jac=True,
        method="L-BFGS-B",
        options={"maxcor": opts.maxcor, "gtol": gtol, "ftol": 1e-15, "maxiter": opts.maxiter},
    )
    grad_norm = float(np.max(np.abs(res.jac))) if res.jac is not None else np.inf
    tol = opts.gtol_rel * max(1.0, abs(float(res.fun)))
    return np.asarray(res.x, dtype=float), float(res.fun), grad_norm <= tol


def fit_block(
    model: SystemModel,
    data: BlockData,
    prior: BeliefState,
    opts: OptimizerOptions | None = None,
    rng: np.random.Generator | None = None,
) -> EstimationResult:
    """Basin hopping from the prior mean; returns the smoothed block-start belief."""
    opts = opts or OptimizerOptions()
    check_block_size(model, data.b)
    rng = rng if rng is not None else np.random.default_rng(opts.seed)
    d = model.dims
    _, vg = _nll_fns(model)
    args = _block_args(data, prior)

    start = np.concatenate([prior.theta_hat, prior.x_hat, np.log(prior.v_hat)])
    cur_w, cur_f, cur_ok = _local_solve(vg, start, args, opts)
    best_w, best_f, best_ok = cur_w, cur_f, cur_ok
    history = [cur_f]
    for _ in range(1, opts.hops):
        scale = opts.step_scale * np.maximum(np.abs(cur_w), 1.0)
        trial = cur_w + scale * rng.standard_normal(cur_w.size)
        w, f, ok = _local_solve(vg, trial, args, opts)
        history.append(f)
        if not np.isfinite(f) or f >= BARRIER:
            continue
        if f < cur_f or rng.random() < np.exp(-(f - cur_f) / opts.temperature):
            cur_w, cur_f = w, f
        if f < best_f:
            best_w, best_f, best_ok = w, f, ok
    if not np.isfinite(best_f) or best_f >= BARRIER:
        raise EstimationFailedError("every basin-hopping hop was non-finite", best=best_w)

    theta = best_w[: d.d_theta]
    x_tau = best_w[d.d_theta : d.d_theta + d.d_x]
    v = np.exp(best_w[d.d_theta + d.d_x :])
    P, Q, regularized = posterior_covariance(model, data, (theta, x_tau, v), prior, return_flag=True)
    belief = BeliefState(theta, x_tau, v, P, Q)
    return EstimationResult(belief, best_f, opts.hops, best_ok, regularized, history)


def posterior_covariance(model: SystemModel, data: BlockData, estimate, prior: BeliefState, return_flag=False):
    """Inverse block information at the plug-in estimate: (P, Q).

    P inverts P_prior^{-1} + sum_i E_i^T V^{-1} E_i over the block;
    Q inverts Q_prior^{-1} + (b/2) V^{-2}.
    """
    theta, x_tau, v = (np.atleast_1d(np.asarray(a, dtype=float)) for a in estimate)
    E = fim.prediction_error_jacobians(model, theta, x_tau, data.inputs)
    blocks = fim.assemble_fim(prior, E, v, data.b)
    J = blocks.joint
    d_z = J.shape[0]
    regularized = not np.linalg.cond(J) <= fim.RIDGE_COND
    if regularized:
        J = J + fim.RIDGE_SCALE * np.trace(J) / d_z * np.eye(d_z)
    P = fim.spd_inverse(J)
    P = 0.5 * (P + P.T)
    Q = fim.spd_inverse(blocks.J_v)
    return (P, Q, regularized) if return_flag else (P, Q)
