"""Receding-horizon input design in sigmoid-transformed input coordinates."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import lru_cache

import jax
import jax.numpy as jnp
import numpy as np

from adaptid import fim
from adaptid.fim import BeliefState
from adaptid.model import ConstraintSpec, SystemModel

log = logging.getLogger(__name__)

CLAMP_REL = 1e-9


def transform(u, spec: ConstraintSpec, return_flag: bool = False):
    """Map inputs inside (u_min, u_max) to R via the logit of the scaled input.

    Inputs on or outside the bounds are clamped to ``CLAMP_REL * range`` inside
    first; ``return_flag=True`` also reports whether that happened.
    """
    u = np.asarray(u, dtype=float)
    lo = spec.u_min.reshape((-1,) + (1,) * (u.ndim - 1)) if u.ndim else spec.u_min[0]
    hi = spec.u_max.reshape((-1,) + (1,) * (u.ndim - 1)) if u.ndim else spec.u_max[0]
    width = hi - lo
    delta = CLAMP_REL * width
    clamped = np.clip(u, lo + delta, hi - delta)
    flagged = bool(np.any(clamped != u))
    z = (clamped - lo) / width
    out = np.log(z) - np.log1p(-z)
    return (out, flagged) if return_flag else out


def inverse_transform(w, spec: ConstraintSpec):
    """sigmoid(w) * (u_max - u_min) + u_min, elementwise; never attains the bounds."""
    w = np.asarray(w, dtype=float)
    lo = spec.u_min.reshape((-1,) + (1,) * (w.ndim - 1)) if w.ndim else spec.u_min[0]
    hi = spec.u_max.reshape((-1,) + (1,) * (w.ndim - 1)) if w.ndim else spec.u_max[0]
    u = _sigmoid(w) * (hi - lo) + lo
    # the sigmoid saturates to exactly 0/1 in floating point for |w| > ~37
    delta = CLAMP_REL * (hi - lo)
    return np.clip(u, lo + delta, hi - delta)


def _sigmoid(w):
    return 0.5 * (1.0 + np.tanh(0.5 * w))


def inverse_transform_traced(w, lo, hi):
    return jax.nn.sigmoid(w) * (hi - lo)[:, None] + lo[:, None]


@dataclass(frozen=True)
class DesignHorizon:
    """k-step input plan held in free coordinates; the raw view is always derived."""

    U_free: np.ndarray
    spec: ConstraintSpec = field(repr=False)

    def __post_init__(self):
        U = np.asarray(self.U_free, dtype=float)
        U = U.reshape(self.spec.u_min.size, -1)
        object.__setattr__(self, "U_free", U)

    @classmethod
    def initial(cls, k: int, spec: ConstraintSpec) -> "DesignHorizon":
        """All-midpoint plan (U_free = 0)."""
        if k < 1:
            raise ValueError("horizon length must be >= 1")
        return cls(np.zeros((spec.u_min.size, k)), spec)

    @property
    def k(self) -> int:
        return self.U_free.shape[1]

    @property
    def U_raw(self) -> np.ndarray:
        return inverse_transform(self.U_free, self.spec)

    def shifted(self) -> "DesignHorizon":
        """Warm start for t+1: drop the first column, repeat the last."""
        U = np.concatenate([self.U_free[:, 1:], self.U_free[:, -1:]], axis=1)
        return DesignHorizon(U, self.spec)


@dataclass(frozen=True)
class AdamOptions:
    iterations: int = 50
    stepsize: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_halvings: int = 10


@dataclass(frozen=True)
class DesignDiagnostics:
    total: float
    info_term: float
    penalty_term: float
    iterations: int
    warning: bool = False


def _objective_free(model: SystemModel):
    H = jnp.asarray(model.H)

    def objective(U_free, theta, x, P_inv, Cp_inv, v, lo, hi, s, gamma, u_lo, u_hi):
        U = inverse_transform_traced(U_free, u_lo, u_hi)
        return fim.design_objective_traced(model.step_fn, H, theta, x, U, P_inv, Cp_inv, v, lo, hi, s, gamma)

    return objective


@lru_cache(maxsize=None)
def _value_and_grad(model: SystemModel):
    return jax.jit(jax.value_and_grad(_objective_free(model), has_aux=True))


def objective_and_gradient(model, belief, spec, U_free):
    """Relaxed objective in free coordinates and its gradient w.r.t. U_free."""
    consts = fim.objective_constants(belief, spec) + (spec.u_min, spec.u_max)
    (total, (info, pen)), grad = _value_and_grad(model)(np.asarray(U_free, float), *consts)
    return float(total), float(info), float(pen), np.asarray(grad)


@lru_cache(maxsize=None)
def _adam_loop(model: SystemModel):
    """Compiled Adam descent; the whole iteration budget runs inside one call."""
    vg = jax.value_and_grad(_objective_free(model), has_aux=True)

    def finite(total, aux, grad):
        return jnp.isfinite(total) & jnp.isfinite(aux[0]) & jnp.isfinite(aux[1]) & jnp.all(jnp.isfinite(grad))

    def run(U0, consts, stepsize, iterations, beta1, beta2, eps, max_halvings):
        (total0, aux0), grad0 = vg(U0, *consts)
        zeros = jnp.zeros_like(U0)
        # U, m, s, total, aux, grad, n_done, lr, halvings, best_U, best_total, best_aux
        init = (U0, zeros, zeros, total0, aux0, grad0, 0, stepsize, 0, U0, total0, aux0)

        def cond(c):
            return (c[6] < iterations) & (c[8] <= max_halvings)

        def body(c):
            U, m, s, total, aux, grad, n, lr, halvings, bU, btot, baux = c
            m_new = beta1 * m + (1 - beta1) * grad
            s_new = beta2 * s + (1 - beta2) * grad**2
            k = n + 1
            m_hat = m_new / (1 - beta1**k)
            s_hat = s_new / (1 - beta2**k)
            U_new = U - lr * m_hat / (jnp.sqrt(s_hat) + eps)
            (t_new, a_new), g_new = vg(U_new, *consts)
            ok = finite(t_new, a_new, g_new)
            pick = lambda new, old: jax.tree_util.tree_map(lambda a, b: jnp.where(ok, a, b), new, old)
            U, m, s, total, aux, grad = pick((U_new, m_new, s_new, t_new, a_new, g_new), (U, m, s, total, aux, grad))
            better = ok & (t_new < btot)
            bU, btot, baux = jax.tree_util.tree_map(
                lambda a, b: jnp.where(better, a, b), (U_new, t_new, a_new), (bU, btot, baux)
            )
            n = n + jnp.where(ok, 1, 0)
            lr = jnp.where(ok, lr, 0.5 * lr)
            halvings = halvings + jnp.where(ok, 0, 1)
            return (U, m, s, total, aux, grad, n, lr, halvings, bU, btot, baux)

        out = jax.lax.while_loop(cond, body, init)
        U, _, _, total, aux, grad, n, _, halvings, bU, btot, baux = out
        warn = halvings > max_halvings
        start_ok = finite(total0, aux0, grad0)
        return (
            jnp.where(warn, bU, U),
            jnp.where(warn, btot, total),
            jax.tree_util.tree_map(lambda a, b: jnp.where(warn, a, b), baux, aux),
            n,
            warn | ~start_ok,
        )

    return jax.jit(run)


def optimize_design(
    model: SystemModel,
    belief: BeliefState,
    spec: ConstraintSpec,
    horizon: DesignHorizon,
    opts: AdamOptions | None = None,
) -> tuple[DesignHorizon, DesignDiagnostics]:
    """Run a fixed budget of Adam iterations on the relaxed objective in free coordinates.

    A non-finite objective or gradient rejects the step and halves the
    stepsize; after ``max_halvings`` rejections the best iterate so far is
    returned with ``warning`` set.
    """
    opts = opts or AdamOptions()
    consts = fim.objective_constants(belief, spec) + (spec.u_min, spec.u_max)
    consts = tuple(jnp.asarray(c, dtype=float) for c in consts)
    U, total, (info, pen), n, warn = _adam_loop(model)(
        jnp.asarray(horizon.U_free),
        consts,
        float(opts.stepsize),
        int(opts.iterations),
        float(opts.beta1),
        float(opts.beta2),
        float(opts.eps),
        int(opts.max_halvings),
    )
    warn = bool(warn)
    if warn:
        log.warning("design objective or gradient non-finite; returning best iterate")
    U = np.asarray(U)
    if not np.all(np.isfinite(U)):
        U, warn = horizon.U_free, True
    return DesignHorizon(U, spec), DesignDiagnostics(float(total), float(info), float(pen), int(n), warn)


@dataclass
class LoopState:
    """Mutable receding-horizon state carried between time steps."""

    belief: BeliefState
    horizon: DesignHorizon
    last_input: np.ndarray | None = None


def receding_horizon_step(
    model: SystemModel,
    state: LoopState,
    spec: ConstraintSpec,
    opts: AdamOptions | None = None,
    ut_params=None,
    predict: bool = True,
) -> tuple[np.ndarray, DesignDiagnostics | None]:
    """One pass of steps 2-4: unscented prediction with the last input, design, emit u*_t.

    ``state`` is updated in place (belief, warm-started horizon, last input).
    If the design fails the previous input is held and ``None`` diagnostics
    are returned.
    """
    from adaptid import ukf

    if predict and state.last_input is not None:
        state.belief = ukf.predict_belief(model, state.belief, state.last_input, ut_params)
    try:
        horizon, diag = optimize_design(model, state.belief, spec, state.horizon, opts)
    except (np.linalg.LinAlgError, ArithmeticError, ValueError) as exc:
        log.warning("design failed (%s); holding previous input", exc)
        held = state.last_input if state.last_input is not None else inverse_transform(np.zeros(spec.u_min.size), spec)
        state.horizon = state.horizon.shifted()
        state.last_input = np.asarray(held, dtype=float)
        return state.last_input, None
    u_star = horizon.U_raw[:, 0].copy()
    state.horizon = horizon.shifted()
    state.last_input = u_star
    return u_star, diag
