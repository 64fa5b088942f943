"""Conservative block Fisher information, Schur-reduced parameter bound,
the adaptive trace criterion, the constraint penalty and the relaxed design objective.

The ``*_traced`` helpers are pure ``jax.numpy`` and are what the design
optimizer differentiates; the public functions wrap them with validation and
return numpy arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from functools import lru_cache

import jax
import jax.numpy as jnp
import numpy as np

from adaptid.model import ConstraintSpec, SystemModel, rollout_traced

RIDGE_COND = 1e12
RIDGE_SCALE = 1e-9
JITTER_LEVELS = (0.0, 1e-12, 1e-11, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6)
PRIOR_COND_MAX = 1e14


class IllConditionedPriorError(np.linalg.LinAlgError):
    def __init__(self, cond):
        self.cond = cond
        super().__init__(f"prior covariance is numerically singular (condition number {cond:.3g})")


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class BeliefState:
    """Joint estimate (theta_hat, x_hat, v_hat): P covers (theta, x), Q covers v."""

    theta_hat: np.ndarray
    x_hat: np.ndarray
    v_hat: np.ndarray
    P: np.ndarray
    Q: np.ndarray

    def __post_init__(self):
        for name in ("theta_hat", "x_hat", "v_hat"):
            object.__setattr__(self, name, np.atleast_1d(np.asarray(getattr(self, name), dtype=float)))
        for name in ("P", "Q"):
            object.__setattr__(self, name, np.atleast_2d(np.asarray(getattr(self, name), dtype=float)))
        d_z = self.theta_hat.size + self.x_hat.size
        if self.P.shape != (d_z, d_z):
            raise ValueError(f"P has shape {self.P.shape}, expected {(d_z, d_z)}")
        if self.Q.shape != (self.v_hat.size,) * 2:
            raise ValueError("Q does not match v_hat")
        if not np.all(self.v_hat > 0):
            raise ValueError("v_hat must be strictly positive")
        for name in ("P", "Q"):
            M = getattr(self, name)
            if not np.allclose(M, M.T, rtol=1e-9, atol=1e-12 * max(1.0, np.abs(M).max())):
                raise ValueError(f"{name} is not symmetric")
            eig = np.linalg.eigvalsh(0.5 * (M + M.T))
            if eig[0] < -1e-10 * max(eig[-1], 0.0) or eig[-1] <= 0:
                raise ValueError(f"{name} is not positive definite (eigenvalues {eig[0]:.3g}..{eig[-1]:.3g})")

    @property
    def d_theta(self) -> int:
        return self.theta_hat.size

    @property
    def z_hat(self) -> np.ndarray:
        return np.concatenate([self.theta_hat, self.x_hat])

    @property
    def C_theta(self) -> np.ndarray:
        """Marginal parameter covariance (top-left block of P)."""
        d = self.d_theta
        return self.P[:d, :d]

    def replace(self, **changes) -> "BeliefState":
        return replace(self, **changes)


@dataclass(frozen=True)
class FimBlocks:
    J_theta: np.ndarray
    J_theta_x: np.ndarray
    J_x: np.ndarray
    J_v: np.ndarray

    @property
    def joint(self) -> np.ndarray:
        """[[J_theta, J_theta_x], [J_theta_x^T, J_x]]."""
        return np.block([[self.J_theta, self.J_theta_x], [self.J_theta_x.T, self.J_x]])


# -- symmetric inverses ---------------------------------------------------------


def spd_inverse(A) -> np.ndarray:
    """Inverse of a symmetric positive definite matrix via Cholesky with jitter escalation."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    A = 0.5 * (A + A.T)
    n = A.shape[0]
    scale = max(np.trace(A) / n, np.finfo(float).tiny)
    eye = np.eye(n)
    for level in JITTER_LEVELS:
        try:
            L = np.linalg.cholesky(A + level * scale * eye)
        except np.linalg.LinAlgError:
            continue
        Linv = np.linalg.solve(L, eye)
        return Linv.T @ Linv
    raise NotPositiveDefiniteError("matrix is not positive definite even after jitter")


def _jitter_traced(A):
    n = A.shape[0]
    A_ng = jax.lax.stop_gradient(A)
    scale = jnp.maximum(jnp.trace(A_ng) / n, 1e-300)
    levels = jnp.asarray(JITTER_LEVELS)
    eye = jnp.eye(n)
    ok = jax.vmap(lambda lv: jnp.all(jnp.isfinite(jnp.linalg.cholesky(A_ng + lv * scale * eye))))(levels)
    first = jnp.argmax(ok)
    return jnp.where(jnp.any(ok), levels[first] * scale, levels[-1] * scale)


def spd_inverse_traced(A):
    A = 0.5 * (A + A.T)
    n = A.shape[0]
    L = jnp.linalg.cholesky(A + _jitter_traced(A) * jnp.eye(n))
    Linv = jax.scipy.linalg.solve_triangular(L, jnp.eye(n), lower=True)
    return Linv.T @ Linv


def spd_solve_traced(A, B):
    A = 0.5 * (A + A.T)
    n = A.shape[0]
    L = jnp.linalg.cholesky(A + _jitter_traced(A) * jnp.eye(n))
    return jax.scipy.linalg.cho_solve((L, True), B)


# -- traced building blocks ---------------------------------------------------------


def error_jacobians_traced(step_fn, H, theta, x_t, U):
    """E_{t+i} = H [d f^i/d theta, d f^i/d x_t] stacked as (k, d_y, d_theta + d_x)."""
    d_theta = theta.shape[0]
    H = jnp.asarray(H)

    def outputs(z):
        return H @ rollout_traced(step_fn, z[:d_theta], z[d_theta:], U)

    jac = jax.jacfwd(outputs)(jnp.concatenate([theta, x_t]))  # (d_y, k, d_z)
    return jnp.transpose(jac, (1, 0, 2))


def information_traced(P_inv, E, v):
    """P^{-1} + sum_i E_i^T V^{-1} E_i."""
    return P_inv + jnp.einsum("kyi,y,kyj->ij", E, 1.0 / v, E)


def reduced_covariance_traced(J, d_theta):
    """Schur-reduced bound (J_theta - J_theta_x J_x^{-1} J_theta_x^T)^{-1} and a ridge flag."""
    J = 0.5 * (J + J.T)
    J_t = J[:d_theta, :d_theta]
    J_tx = J[:d_theta, d_theta:]
    J_x = J[d_theta:, d_theta:]
    d_x = J_x.shape[0]
    eig = jnp.linalg.eigvalsh(jax.lax.stop_gradient(J_x))
    ill = (eig[0] <= 0) | (eig[-1] > RIDGE_COND * eig[0])
    ridge = jnp.where(ill, RIDGE_SCALE * jnp.trace(jax.lax.stop_gradient(J_x)) / d_x, 0.0)
    J_x = J_x + ridge * jnp.eye(d_x)
    schur = J_t - J_tx @ spd_solve_traced(J_x, J_tx.T)
    return spd_inverse_traced(schur), ill


_reduced_jit = jax.jit(reduced_covariance_traced, static_argnums=1)


def criterion_traced(C_next, C_prior_inv):
    return jnp.trace(C_next @ C_prior_inv)


def penalty_traced(states, lo, hi, s):
    """(1/k) sum_i ||(S x_min - S x_i)^+ + (S x_i - S x_max)^+||^2 for states (d_x, k)."""
    sx = s[:, None] * states
    excess = jnp.maximum(lo[:, None] - sx, 0.0) + jnp.maximum(sx - hi[:, None], 0.0)
    return jnp.sum(excess**2) / states.shape[1]


def design_objective_traced(step_fn, H, theta, x_t, U, P_inv, C_prior_inv, v, lo, hi, s, gamma):
    d_theta = theta.shape[0]
    E = error_jacobians_traced(step_fn, H, theta, x_t, U)
    C_next, _ = reduced_covariance_traced(information_traced(P_inv, E, v), d_theta)
    info = criterion_traced(C_next, C_prior_inv)
    pen = penalty_traced(rollout_traced(step_fn, theta, x_t, U), lo, hi, s)
    return info + gamma * pen, (info, pen)


@lru_cache(maxsize=None)
def _objective_jit(model: SystemModel):
    H = jnp.asarray(model.H)
    return jax.jit(lambda *args: design_objective_traced(model.step_fn, H, *args))


@lru_cache(maxsize=None)
def _jacobians_jit(model: SystemModel):
    H = jnp.asarray(model.H)
    return jax.jit(lambda theta, x, U: error_jacobians_traced(model.step_fn, H, theta, x, U))


# -- public API -----------------------------------------------------------------


def prediction_error_jacobians(model: SystemModel, theta, x_t, U) -> np.ndarray:
    """List-like (k, d_y, d_theta + d_x) array of horizon Jacobians."""
    d = model.dims
    U = np.asarray(U, dtype=float).reshape(d.d_u, -1)
    if U.shape[1] < 1:
        raise ValueError("horizon must be >= 1")
    E = np.asarray(_jacobians_jit(model)(np.asarray(theta, float), np.asarray(x_t, float), U))
    if not np.all(np.isfinite(E)):
        bad = int(np.flatnonzero(~np.isfinite(E).reshape(E.shape[0], -1).all(axis=1))[0])
        from adaptid.diff import NonFiniteError

        raise NonFiniteError(bad, "derivative")
    return E


def prior_precision(P) -> np.ndarray:
    P = np.atleast_2d(np.asarray(P, dtype=float))
    cond = np.linalg.cond(P)
    if not np.isfinite(cond) or cond > PRIOR_COND_MAX:
        raise IllConditionedPriorError(cond)
    return spd_inverse(P)


def assemble_fim(prior: BeliefState, jacobians, v, k: int) -> FimBlocks:
    v = np.atleast_1d(np.asarray(v, dtype=float))
    if not np.all(v > 0):
        raise ValueError("noise variances must be positive")
    E = np.asarray(jacobians, dtype=float)
    d_z = prior.P.shape[0]
    E = E.reshape(-1, v.size, d_z) if E.size else np.zeros((0, v.size, d_z))
    J = prior_precision(prior.P) + np.einsum("kyi,y,kyj->ij", E, 1.0 / v, E)
    J = 0.5 * (J + J.T)
    d = prior.d_theta
    J_v = spd_inverse(prior.Q) + 0.5 * k * np.diag(1.0 / v**2)
    return FimBlocks(J[:d, :d].copy(), J[:d, d:].copy(), J[d:, d:].copy(), J_v)


def reduced_covariance(blocks: FimBlocks) -> tuple[np.ndarray, bool]:
    """Return (C_tilde, regularized)."""
    C, ill = _reduced_jit(jnp.asarray(blocks.joint), blocks.J_theta.shape[0])
    C = np.asarray(C)
    return 0.5 * (C + C.T), bool(ill)


def criterion(C_next, C_prior) -> float:
    C_next = np.atleast_2d(np.asarray(C_next, dtype=float))
    C_prior = np.atleast_2d(np.asarray(C_prior, dtype=float))
    return float(np.trace(np.linalg.solve(C_prior.T, C_next.T).T))


def penalty(states, spec: ConstraintSpec) -> float:
    states = np.asarray(states, dtype=float)
    states = states.reshape(spec.x_min.size, -1)
    lo, hi = spec.scaled_bounds
    return float(penalty_traced(jnp.asarray(states), jnp.asarray(lo), jnp.asarray(hi), jnp.asarray(spec.s_diag)))


def objective_constants(belief: BeliefState, spec: ConstraintSpec):
    """Arguments of the traced objective that do not depend on U."""
    lo, hi = spec.scaled_bounds
    return (
        belief.theta_hat,
        belief.x_hat,
        prior_precision(belief.P),
        spd_inverse(belief.C_theta),
        belief.v_hat,
        lo,
        hi,
        spec.s_diag,
        float(spec.gamma),
    )


def design_objective(model: SystemModel, belief: BeliefState, U, spec: ConstraintSpec, k: int | None = None):
    """Relaxed objective: (total, info_term, penalty_term) with total = info + gamma * penalty."""
    U = np.asarray(U, dtype=float).reshape(model.dims.d_u, -1)
    if k is not None and U.shape[1] != k:
        raise ValueError(f"U has {U.shape[1]} columns, expected k={k}")
    theta, x, P_inv, Cp_inv, v, lo, hi, s, gamma = objective_constants(belief, spec)
    total, (info, pen) = _objective_jit(model)(theta, x, U, P_inv, Cp_inv, v, lo, hi, s, gamma)
    return float(total), float(info), float(pen)
