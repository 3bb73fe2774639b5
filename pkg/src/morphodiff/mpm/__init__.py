"""Differentiable 2D MLS-MPM soft-body simulator.

The substep kernels come from the compiled ``_kernels`` extension when it is
importable, otherwise from the numpy implementation in ``_kernels_py``. Set
``MORPHODIFF_PURE_PYTHON=1`` to force the fallback.
"""
from __future__ import annotations

import os

from . import _kernels_py

try:
    if os.environ.get("MORPHODIFF_PURE_PYTHON", "") not in ("", "0"):
        raise ImportError("pure-python backend forced")
    from . import _kernels as _compiled  # type: ignore[attr-defined]
except ImportError:
    _compiled = None

BACKENDS = {"python": _kernels_py}
if _compiled is not None:
    BACKENDS["cython"] = _compiled
BACKEND = "cython" if _compiled is not None else "python"


def get_kernels(name: str | None = None):
    """Kernel module by name; ``None`` picks the import-time default."""
    name = name or BACKEND
    try:
        return BACKENDS[name]
    except KeyError:
        raise ValueError(f"mpm backend {name!r} not available (have {sorted(BACKENDS)})") from None


from .sim import (  # noqa: E402
    ControllerParams,
    MpmConfig,
    RolloutResult,
    Scene,
    SimulationError,
    controller_eval,
    rollout,
    rollout_grad,
    simulate,
    substep,
)

__all__ = [
    "BACKEND",
    "BACKENDS",
    "ControllerParams",
    "MpmConfig",
    "RolloutResult",
    "Scene",
    "SimulationError",
    "controller_eval",
    "get_kernels",
    "rollout",
    "rollout_grad",
    "simulate",
    "substep",
]
