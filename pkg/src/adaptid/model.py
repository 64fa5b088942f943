"""System models: deterministic dynamics, linear-Gaussian outputs, constraint sets."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, NamedTuple

import jax
import jax.numpy as jnp
import numpy as np


class NonFiniteStateError(ArithmeticError):
    def __init__(self, step_index: int):
        self.step_index = step_index
        super().__init__(f"non-finite state produced at rollout step {step_index}")


class Dims(NamedTuple):
    d_x: int
    d_u: int
    d_theta: int
    d_y: int


@dataclass(frozen=True, eq=False)
class SystemModel:
    """x_{t+1} = step_fn(theta, x_t, u_t);  y_t = H x_t + e_t.

    ``step_fn`` must be built from ``jax.numpy`` operations so it can be
    differentiated and compiled.  Instances hash by identity, which is what
    keys the compiled-function caches elsewhere in the package.
    """

    name: str
    step_fn: Callable
    H: np.ndarray
    dims: Dims
    dt: float | None = None

    def __post_init__(self):
        H = np.atleast_2d(np.asarray(self.H, dtype=float))
        object.__setattr__(self, "H", H)
        object.__setattr__(self, "dims", Dims(*self.dims))
        if H.shape != (self.dims.d_y, self.dims.d_x):
            raise ValueError(f"H has shape {H.shape}, expected {(self.dims.d_y, self.dims.d_x)}")
        if np.any(H) and np.linalg.matrix_rank(H) < self.dims.d_y:
            raise ValueError("H must have full row rank")

    @cached_property
    def _step_jit(self):
        return jax.jit(self.step_fn)

    @cached_property
    def _rollout_jit(self):
        return jax.jit(lambda theta, x0, U: rollout_traced(self.step_fn, theta, x0, U))


def rollout_traced(step_fn, theta, x0, U):
    """States x_{t+1..t+k} as a (d_x, k) array; U is (d_u, k).  Traceable."""

    def body(x, u):
        x_next = step_fn(theta, x, u)
        return x_next, x_next

    _, xs = jax.lax.scan(body, x0, jnp.asarray(U).T)
    return xs.T


def _vec(a, n, what):
    a = np.atleast_1d(np.asarray(a, dtype=float))
    if a.shape != (n,):
        raise ValueError(f"{what} has shape {a.shape}, expected ({n},)")
    return a


def step(model: SystemModel, theta, x, u) -> np.ndarray:
    d = model.dims
    x_next = np.asarray(
        model._step_jit(_vec(theta, d.d_theta, "theta"), _vec(x, d.d_x, "x"), _vec(u, d.d_u, "u"))
    )
    if not np.all(np.isfinite(x_next)):
        raise NonFiniteStateError(0)
    return x_next


def rollout(model: SystemModel, theta, x_t, U) -> np.ndarray:
    d = model.dims
    U = np.asarray(U, dtype=float).reshape(d.d_u, -1)
    if U.shape[1] < 1:
        raise ValueError("rollout needs k >= 1 inputs")
    xs = np.asarray(model._rollout_jit(_vec(theta, d.d_theta, "theta"), _vec(x_t, d.d_x, "x_t"), U))
    bad = ~np.isfinite(xs).all(axis=0)
    if bad.any():
        raise NonFiniteStateError(int(np.flatnonzero(bad)[0]))
    return xs


def observe(model: SystemModel, x, noise_sample=None) -> np.ndarray:
    y = model.H @ np.asarray(x, dtype=float)
    if noise_sample is not None:
        y = y + np.asarray(noise_sample, dtype=float)
    return y


# -- constraint and noise specifications ---------------------------------------


def standardizer(lo, hi) -> np.ndarray:
    """Diagonal of S: 1/(hi - lo) where both bounds are finite, else 0."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    boxed = np.isfinite(lo) & np.isfinite(hi)
    width = np.where(boxed, hi - lo, 1.0)
    return np.where(boxed, 1.0 / width, 0.0)


@dataclass(frozen=True, eq=False)
class ConstraintSpec:
    """Box bounds on inputs and states, the standardizer S and penalty weight gamma.

    States with an infinite bound are unconstrained (S_ii = 0).  Passing ``S``
    explicitly is allowed but it must agree with the bounds.
    """

    u_min: np.ndarray
    u_max: np.ndarray
    x_min: np.ndarray
    x_max: np.ndarray
    gamma: float = 0.0
    S: np.ndarray | None = field(default=None)

    def __post_init__(self):
        for name in ("u_min", "u_max", "x_min", "x_max"):
            object.__setattr__(self, name, np.atleast_1d(np.asarray(getattr(self, name), dtype=float)))
        if self.u_min.shape != self.u_max.shape or self.x_min.shape != self.x_max.shape:
            raise ValueError("bound shapes disagree")
        if not np.all(np.isfinite(self.u_min) & np.isfinite(self.u_max)):
            raise ValueError("input bounds must be finite")
        if not np.all(self.u_min < self.u_max):
            raise ValueError("u_min < u_max must hold elementwise")
        both = np.isfinite(self.x_min) & np.isfinite(self.x_max)
        if not np.all(self.x_min[both] < self.x_max[both]):
            raise ValueError("x_min < x_max must hold elementwise where finite")
        if not self.gamma >= 0:
            raise ValueError("gamma must be >= 0")
        s_diag = standardizer(self.x_min, self.x_max)
        if self.S is None:
            object.__setattr__(self, "S", np.diag(s_diag))
        else:
            S = np.atleast_2d(np.asarray(self.S, dtype=float))
            if not np.allclose(S, np.diag(s_diag), rtol=1e-12, atol=0.0):
                raise ValueError("S is inconsistent with the state bounds")
            object.__setattr__(self, "S", S)

    @property
    def s_diag(self) -> np.ndarray:
        return np.diag(self.S).copy()

    @property
    def scaled_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """(S x_min, S x_max) with zeros on unconstrained coordinates."""
        s = self.s_diag
        lo = np.where(s > 0, s * np.where(np.isfinite(self.x_min), self.x_min, 0.0), 0.0)
        hi = np.where(s > 0, s * np.where(np.isfinite(self.x_max), self.x_max, 0.0), 0.0)
        return lo, hi

    def with_gamma(self, gamma: float) -> "ConstraintSpec":
        return ConstraintSpec(self.u_min, self.u_max, self.x_min, self.x_max, gamma)


@dataclass(frozen=True)
class NoiseSpec:
    v: np.ndarray

    def __post_init__(self):
        v = np.atleast_1d(np.asarray(self.v, dtype=float))
        if not np.all(v > 0):
            raise ValueError("noise variances must be strictly positive")
        object.__setattr__(self, "v", v)

    @property
    def V(self) -> np.ndarray:
        return np.diag(self.v)

    @classmethod
    def from_std(cls, std) -> "NoiseSpec":
        return cls(np.square(np.atleast_1d(np.asarray(std, dtype=float))))


# -- model registry -------------------------------------------------------------

_REGISTRY: dict[str, Callable[..., SystemModel]] = {}


def register_model(name: str):
    """Decorator registering a factory ``(**params) -> SystemModel`` under ``name``."""

    def deco(factory):
        _REGISTRY[name] = factory
        return factory

    return deco


def make_model(name: str, **params) -> SystemModel:
    try:
        factory = _REGISTRY[name]
    except KeyError:
        raise KeyError(f"unknown model {name!r}; registered: {sorted(_REGISTRY)}") from None
    return factory(**params)


def registered_models() -> list[str]:
    return sorted(_REGISTRY)


_MODEL_CACHE: dict[tuple, SystemModel] = {}


def cached_model(name: str, **params) -> SystemModel:
    """Like :func:`make_model` but reuses instances so compiled functions are shared."""
    key = (name, json.dumps(params, sort_keys=True, default=lambda a: np.asarray(a).tolist()))
    if key not in _MODEL_CACHE:
        _MODEL_CACHE[key] = make_model(name, **params)
    return _MODEL_CACHE[key]


@register_model("pendulum")
def pendulum_model(dt: float = 0.1) -> SystemModel:
    """Euler-discretised pendulum; theta = (gravity term, input gain), only the angle is measured."""
    if not dt > 0:
        raise ValueError("dt must be positive")

    def step_fn(theta, x, u):
        angle = x[0] + x[1] * dt
        rate = x[1] + (theta[0] * jnp.sin(x[0]) + theta[1] * u[0]) * dt
        return jnp.stack([angle, rate])

    return SystemModel("pendulum", step_fn, np.array([[1.0, 0.0]]), Dims(2, 1, 2, 1), dt)


@register_model("linear")
def linear_model(A, B, H, F=None) -> SystemModel:
    """x' = A x + B u + F theta.

    Affine in (theta, x), so rollouts, information matrices and unscented
    predictions all have closed forms; used as an exact oracle.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.asarray(B, dtype=float).reshape(A.shape[0], -1)
    H = np.atleast_2d(np.asarray(H, dtype=float))
    F = np.zeros((A.shape[0], 1)) if F is None else np.asarray(F, dtype=float).reshape(A.shape[0], -1)
    A_j, B_j, F_j = jnp.asarray(A), jnp.asarray(B), jnp.asarray(F)

    def step_fn(theta, x, u):
        return A_j @ x + B_j @ u + F_j @ theta

    return SystemModel("linear", step_fn, H, Dims(A.shape[0], B.shape[1], F.shape[1], H.shape[0]))
