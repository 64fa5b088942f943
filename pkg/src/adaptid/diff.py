"""Forward-mode Jacobians and a central-difference oracle.

Jacobians are computed with JAX forward mode: one pass carries a tangent for
every input coordinate (``jax.jacfwd`` vectorises the seeds), which is the
cheap direction for the short rollouts differentiated here.  Functions passed
to :func:`jacobian` must be written with ``jax.numpy`` operations; nesting
(``jacobian`` of a function that itself calls ``jacobian``) is supported, which
is what the design gradient needs.
"""

from __future__ import annotations

from typing import Callable

import jax
import jax.numpy as jnp
import numpy as np

EPS_CBRT = np.finfo(float).eps ** (1.0 / 3.0)


class NonFiniteError(ArithmeticError):
    """A differentiated expression produced inf or nan."""

    def __init__(self, index, what="value"):
        self.index = index
        super().__init__(f"non-finite {what} at output index {index}")


def jacobian_fn(func: Callable) -> Callable:
    """Return a traceable function ``point -> d func / d point``."""
    return jax.jacfwd(func)


def jacobian(func: Callable, point, check: bool = True) -> np.ndarray:
    """Exact Jacobian of ``func`` at ``point`` (rows: outputs, cols: inputs).

    Scalar outputs give a row vector, scalar inputs a column vector.
    Raises :class:`NonFiniteError` naming the first offending output row.
    """
    point = jnp.asarray(point, dtype=float)
    value, jac = _value_and_jacobian(func, point)
    value = np.atleast_1d(np.asarray(value, dtype=float))
    jac = np.asarray(jac, dtype=float).reshape(value.size, point.size)
    if check:
        _check_finite(value.ravel(), jac)
    return jac


def _value_and_jacobian(func, point):
    def both(p):
        out = func(p)
        return out, out

    jac, value = jax.jacfwd(both, has_aux=True)(point)
    return value, jac


def _check_finite(value, jac):
    bad_val = ~np.isfinite(value)
    if bad_val.any():
        raise NonFiniteError(int(np.flatnonzero(bad_val)[0]))
    bad_rows = ~np.isfinite(jac).all(axis=1)
    if bad_rows.any():
        raise NonFiniteError(int(np.flatnonzero(bad_rows)[0]), "derivative")


def finite_difference_jacobian(func: Callable, point, step: float | None = None) -> np.ndarray:
    """Central-difference Jacobian estimate, used as an oracle for :func:`jacobian`.

    With ``step=None`` each coordinate uses ``cbrt(eps) * max(1, |point_i|)``;
    an explicit ``step`` is used as given for every coordinate.
    """
    point = np.atleast_1d(np.asarray(point, dtype=float))
    if step is not None and not step > 0:
        raise ValueError("step must be positive")
    f0 = np.atleast_1d(np.asarray(func(point), dtype=float))
    jac = np.empty((f0.size, point.size))
    for i in range(point.size):
        h = step if step is not None else EPS_CBRT * max(1.0, abs(point[i]))
        up = point.copy()
        dn = point.copy()
        up[i] += h
        dn[i] -= h
        f_up = np.atleast_1d(np.asarray(func(up), dtype=float)).ravel()
        f_dn = np.atleast_1d(np.asarray(func(dn), dtype=float)).ravel()
        jac[:, i] = (f_up - f_dn) / (up[i] - dn[i])
    _check_finite(f0.ravel(), jac)
    return jac
