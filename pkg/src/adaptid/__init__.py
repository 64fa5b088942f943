"""Adaptive, constraint-aware input design with online parameter/state estimation."""

import jax

# All of the numerics (Schur complements, information sums over unstable
# rollouts) need double precision.
jax.config.update("jax_enable_x64", True)

from adaptid.model import (  # noqa: E402
    ConstraintSpec,
    NoiseSpec,
    SystemModel,
    make_model,
    pendulum_model,
    register_model,
)
from adaptid.fim import BeliefState, FimBlocks  # noqa: E402

__all__ = [
    "BeliefState",
    "ConstraintSpec",
    "FimBlocks",
    "NoiseSpec",
    "SystemModel",
    "make_model",
    "pendulum_model",
    "register_model",
]

__version__ = "0.1.0"
