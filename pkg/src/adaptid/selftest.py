"""Fast invariant checks run by ``adaptid selftest``.

Each check returns (passed, detail).  ``fault`` names a check whose
quantity under test is deliberately perturbed, to prove the check can fail.
"""

from __future__ import annotations

import jax
import numpy as np

from adaptid import design, diff, fim, ukf
from adaptid.model import ConstraintSpec, linear_model, pendulum_model, rollout_traced


def _rel_err(a, b, floor=1e-8):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(b), floor)))


def check_ad_vs_fd(fault=False, trials=20, seed=0):
    rng = np.random.default_rng(seed)
    model = pendulum_model()

    def outputs(z, U):
        return (model.H @ rollout_traced(model.step_fn, z[:2], z[2:], U)).ravel()

    value = jax.jit(outputs)
    jac = jax.jit(diff.jacobian_fn(outputs))
    worst = 0.0
    for _ in range(trials):
        U = rng.uniform(-10, 10, (1, int(rng.integers(1, 7))))
        z = np.r_[np.array([-24.0, 1.0]) + rng.normal(0, 1, 2), rng.normal(0, 0.3, 2)]
        J = np.asarray(jac(z, U))
        if fault:
            J = J * (1 + 1e-2)
        fd = diff.finite_difference_jacobian(lambda p: np.asarray(value(p, U)), z)
        worst = max(worst, _rel_err(J, fd, floor=1e-3))
    return worst <= 1e-4, f"max relative error {worst:.2e}"


def check_ut_linear(fault=False, trials=20, seed=1):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        dx, dth = int(rng.integers(1, 4)), int(rng.integers(1, 3))
        A = rng.normal(0, 0.5, (dx, dx))
        B = rng.normal(size=(dx, 1))
        F = rng.normal(size=(dx, dth))
        m = linear_model(A, B, np.eye(dx)[:1], F)
        n = dth + dx
        L = rng.normal(size=(n, n))
        P = L @ L.T + 0.1 * np.eye(n)
        z = rng.normal(size=n)
        u = rng.normal(size=1)
        out = ukf.ut_predict(m, ukf.AugmentedBelief(z, P), u)
        Ab = np.block([[np.eye(dth), np.zeros((dth, dx))], [F, A]])
        mean = Ab @ z + np.r_[np.zeros(dth), B @ u]
        cov = Ab @ P @ Ab.T
        if fault:
            cov = cov * (1 + 1e-6)
        err = max(np.max(np.abs(out.z_hat - mean)), np.max(np.abs(out.P - cov)) / max(1.0, np.max(np.abs(cov))))
        worst = max(worst, float(err))
    return worst <= 1e-9, f"max error {worst:.2e}"


def check_schur(fault=False, trials=50, seed=2):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        n = int(rng.integers(2, 7))
        d = int(rng.integers(1, n))
        L = rng.normal(size=(n, n))
        J = L @ L.T + n * np.eye(n)
        blocks = fim.FimBlocks(J[:d, :d], J[:d, d:], J[d:, d:], np.eye(1))
        C, _ = fim.reduced_covariance(blocks)
        ref = np.linalg.inv(J)[:d, :d]
        if fault:
            C = C + 1e-6
        worst = max(worst, float(np.max(np.abs(C - ref))))
    return worst <= 1e-10, f"max error {worst:.2e}"


def check_transform(fault=False, n=10_000, seed=3):
    rng = np.random.default_rng(seed)
    spec = ConstraintSpec([-10.0], [10.0], [-np.inf], [np.inf])
    u = rng.uniform(-10, 10, (1, n))
    u_back = design.inverse_transform(design.transform(u, spec), spec)
    # beyond |w| ~ 14 the raw input cannot resolve w to 1e-10 in double precision
    w = rng.uniform(-10, 10, (1, n))
    w_back = design.transform(design.inverse_transform(w, spec), spec)
    if fault:
        u_back = u_back + 1e-8
    err = max(float(np.max(np.abs(u_back - u))), float(np.max(np.abs(w_back - w))))
    inside = bool(np.all((u_back > -10) & (u_back < 10)))
    return err <= 1e-10 and inside, f"round-trip error {err:.2e}, strictly inside bounds: {inside}"


CHECKS = {
    "ad": ("AD Jacobian vs central differences", check_ad_vs_fd),
    "ut": ("unscented prediction vs exact linear prediction", check_ut_linear),
    "schur": ("Schur-reduced covariance vs full inverse", check_schur),
    "transform": ("input transform round trip", check_transform),
}


def run_all(fault: str | None = None):
    """Return [(key, description, passed, detail)] for every check."""
    if fault is not None and fault not in CHECKS:
        raise ValueError(f"unknown fault target {fault!r}; expected one of {sorted(CHECKS)}")
    out = []
    for key, (desc, fn) in CHECKS.items():
        try:
            ok, detail = fn(fault=(key == fault))
        except Exception as exc:  # a crash counts as a failure
            ok, detail = False, f"raised {type(exc).__name__}: {exc}"
        out.append((key, desc, ok, detail))
    return out
