"""Unscented prediction of the augmented estimate z = [theta; x] between estimation blocks.

Only the time update is used: parameters pass through each sigma point
unchanged and the state part goes through the model dynamics.  Corrections
come from the block maximum-likelihood refits, not from a measurement update.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import jax
import jax.numpy as jnp
import numpy as np

from adaptid.fim import BeliefState, JITTER_LEVELS, NotPositiveDefiniteError
from adaptid.model import SystemModel


@dataclass(frozen=True)
class UTParams:
    """Scaled unscented transform: lambda = alpha^2 (d_z + kappa) - d_z, eta = d_z + lambda."""

    alpha: float = 1e-1
    beta: float = 2.0
    kappa: float = 0.0

    def eta(self, d_z: int) -> float:
        return self.alpha**2 * (d_z + self.kappa)

    @property
    def cov_offset(self) -> float:
        return 1.0 - self.alpha**2 + self.beta


@dataclass(frozen=True)
class AugmentedBelief:
    z_hat: np.ndarray
    P: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "z_hat", np.atleast_1d(np.asarray(self.z_hat, dtype=float)))
        object.__setattr__(self, "P", np.atleast_2d(np.asarray(self.P, dtype=float)))
        if self.P.shape != (self.z_hat.size,) * 2:
            raise ValueError("P does not match z_hat")

    @classmethod
    def from_belief(cls, belief: BeliefState) -> "AugmentedBelief":
        return cls(belief.z_hat, belief.P)


@dataclass(frozen=True)
class SigmaSet:
    points: np.ndarray  # (2 d_z + 1, d_z)
    weights_mean: np.ndarray
    weights_cov: np.ndarray


def psd_cholesky(P: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor of a symmetrised P with escalating diagonal jitter."""
    P = 0.5 * (P + P.T)
    n = P.shape[0]
    scale = max(np.trace(P) / n, np.finfo(float).tiny)
    for level in JITTER_LEVELS:
        try:
            return np.linalg.cholesky(P + level * scale * np.eye(n))
        except np.linalg.LinAlgError:
            continue
    raise NotPositiveDefiniteError("covariance is not positive semidefinite")


def sigma_points(belief: AugmentedBelief, eta: float, cov_offset: float = 0.0) -> SigmaSet:
    """2 d_z + 1 points: the mean, then mean +/- sqrt(eta) times the Cholesky columns.

    Weights: w_0 = (eta - d_z)/eta, w_s = 1/(2 eta); the covariance weight of the
    centre point adds ``cov_offset`` (1 - alpha^2 + beta for the scaled transform).
    """
    if not eta > 0:
        raise ValueError("eta must be positive")
    z = belief.z_hat
    d_z = z.size
    L = psd_cholesky(belief.P) * np.sqrt(eta)
    points = np.concatenate([z[None, :], z[None, :] + L.T, z[None, :] - L.T])
    wm = np.full(2 * d_z + 1, 0.5 / eta)
    wm[0] = (eta - d_z) / eta
    wc = wm.copy()
    wc[0] += cov_offset
    return SigmaSet(points, wm, wc)


@lru_cache(maxsize=None)
def _propagate_points(model: SystemModel):
    d_theta = model.dims.d_theta

    def one(z, u):
        theta = z[:d_theta]
        return jnp.concatenate([theta, model.step_fn(theta, z[d_theta:], u)])

    return jax.jit(jax.vmap(one, in_axes=(0, None)))


def ut_predict(model: SystemModel, belief: AugmentedBelief, u_t, params: UTParams | None = None) -> AugmentedBelief:
    params = params or UTParams()
    d_z = belief.z_hat.size
    sig = sigma_points(belief, params.eta(d_z), params.cov_offset)
    u_t = np.atleast_1d(np.asarray(u_t, dtype=float))
    Z = np.asarray(_propagate_points(model)(sig.points, u_t))
    if not np.all(np.isfinite(Z)):
        raise ArithmeticError("non-finite sigma point after propagation")
    mean = sig.weights_mean @ Z
    D = Z - mean
    P = (D * sig.weights_cov[:, None]).T @ D
    P = 0.5 * (P + P.T)
    # the negative centre weight can push a nonlinear prediction slightly indefinite
    L = psd_cholesky(P)
    if np.linalg.eigvalsh(P)[0] <= 0:
        P = L @ L.T
    return AugmentedBelief(mean, P)


def propagate_to_present(model: SystemModel, belief: AugmentedBelief, inputs, params: UTParams | None = None) -> AugmentedBelief:
    """Chain :func:`ut_predict` over the columns of ``inputs`` (d_u, n)."""
    inputs = np.asarray(inputs, dtype=float).reshape(model.dims.d_u, -1)
    for j in range(inputs.shape[1]):
        belief = ut_predict(model, belief, inputs[:, j], params)
    return belief


def predict_belief(model: SystemModel, belief: BeliefState, u_t, params: UTParams | None = None) -> BeliefState:
    """One unscented prediction of a full belief; v_hat and Q are carried over."""
    out = ut_predict(model, AugmentedBelief.from_belief(belief), u_t, params)
    d = belief.d_theta
    return belief.replace(theta_hat=out.z_hat[:d], x_hat=out.z_hat[d:], P=out.P)
