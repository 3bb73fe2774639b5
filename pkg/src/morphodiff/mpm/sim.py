"""Rollouts, open-loop controllers, and the full-storage adjoint."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, asdict

import numpy as np

log = logging.getLogger(__name__)


class SimulationError(RuntimeError):
    """Non-finite state encountered during a rollout."""

    def __init__(self, step: int, msg: str = "non-finite simulation state"):
        super().__init__(f"{msg} at substep {step}")
        self.step = step


@dataclass
class MpmConfig:
    grid_res: int = 128
    dt: float = 1e-4
    substeps_per_control_step: int = 17
    control_steps: int = 100
    gravity: tuple = (0.0, -9.8)
    mass_density: float = 1e3
    youngs_modulus: float = 1e5
    poisson_ratio: float = 0.2
    actuation_stress_scale: float | None = None
    ground_friction: float = 0.4
    boundary_cells: int = 3
    backend: str | None = None

    def __post_init__(self):
        self.gravity = tuple(float(g) for g in self.gravity)
        if self.actuation_stress_scale is None:
            self.actuation_stress_scale = 0.3 * self.youngs_modulus
        wave = math.sqrt(self.youngs_modulus / self.mass_density)
        limit = 0.5 * self.dx / wave
        if self.dt > limit:
            raise ValueError(f"CFL violated: dt={self.dt} > 0.5*dx/c={limit:.3g}")

    @property
    def dx(self) -> float:
        return 1.0 / self.grid_res

    @property
    def inv_dx(self) -> float:
        return float(self.grid_res)

    @property
    def mu(self) -> float:
        return self.youngs_modulus / (2 * (1 + self.poisson_ratio))

    @property
    def lam(self) -> float:
        nu = self.poisson_ratio
        return self.youngs_modulus * nu / ((1 + nu) * (1 - 2 * nu))

    @property
    def ground_y(self) -> float:
        return self.boundary_cells * self.dx

    @property
    def control_dt(self) -> float:
        return self.dt * self.substeps_per_control_step

    @property
    def total_substeps(self) -> int:
        return self.substeps_per_control_step * self.control_steps

    def to_dict(self) -> dict:
        d = asdict(self)
        d["gravity"] = list(self.gravity)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MpmConfig":
        return cls(**d)

    def domain_boxes(self) -> np.ndarray:
        """Ground (Coulomb friction) and the three remaining walls."""
        lo, hi = self.ground_y, 1.0 - self.ground_y
        big = 10.0
        return np.array([
            [-big, -big, big, lo, 0],
            [-big, -big, lo, big, 0],
            [hi, -big, big, big, 0],
            [-big, hi, big, big, 0],
        ], dtype=np.float64)


# ---------------------------------------------------------------- controllers


@dataclass
class ControllerParams:
    """Open-loop actuation.

    ``kind="sine"``: ``values`` is (k, 4) rows of (amplitude, frequency, phase, bias).
    ``kind="sequence"``: ``values`` is (control_steps, k).
    ``kind="none"``: passive robot, no actuators.
    """

    kind: str
    values: np.ndarray
    control_dt: float = 1.7e-3

    def __post_init__(self):
        self.values = np.array(self.values, dtype=np.float64)
        if self.kind == "none":
            self.values = self.values.reshape(0, 0)

    @property
    def n_actuators(self) -> int:
        if self.kind == "sine":
            return self.values.shape[0]
        if self.kind == "sequence":
            return self.values.shape[1]
        return 0

    def copy(self) -> "ControllerParams":
        return ControllerParams(self.kind, self.values.copy(), self.control_dt)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "values": self.values.tolist(), "control_dt": self.control_dt}

    @classmethod
    def from_dict(cls, d: dict) -> "ControllerParams":
        return cls(d["kind"], np.asarray(d["values"], dtype=np.float64), d.get("control_dt", 1.7e-3))


def _raw(cp: ControllerParams, step: int) -> np.ndarray:
    if cp.kind == "sine":
        amp, freq, phase, bias = cp.values.T
        return bias + amp * np.sin(2 * np.pi * freq * step * cp.control_dt + phase)
    if cp.kind == "sequence":
        return cp.values[step].copy()
    return np.zeros(0)


def controller_eval(cp: ControllerParams, step: int) -> np.ndarray:
    """Actuation per actuator at a control step, clamped to [-1, 1]."""
    return np.clip(_raw(cp, step), -1.0, 1.0)


def controller_backward(cp: ControllerParams, step: int, g_a: np.ndarray) -> np.ndarray:
    """Adjoint of ``controller_eval`` w.r.t. ``cp.values``."""
    raw = _raw(cp, step)
    g = np.where(np.abs(raw) < 1.0, g_a, 0.0)
    out = np.zeros_like(cp.values)
    if cp.kind == "sine":
        amp, freq, phase, _ = cp.values.T
        arg = 2 * np.pi * freq * step * cp.control_dt + phase
        s, c = np.sin(arg), np.cos(arg)
        out[:, 0] = g * s
        out[:, 1] = g * amp * c * 2 * np.pi * step * cp.control_dt
        out[:, 2] = g * amp * c
        out[:, 3] = g
    elif cp.kind == "sequence":
        out[step] = g
    return out


# ---------------------------------------------------------------- scenes


@dataclass
class Scene:
    """All particles of one rollout; robot particles come first."""

    x: np.ndarray
    v: np.ndarray
    mass: np.ndarray
    vol: np.ndarray
    mu: np.ndarray
    lam: np.ndarray
    fiber: np.ndarray
    actuator: np.ndarray
    n_robot: int
    boxes: np.ndarray
    objects: list = field(default_factory=list)  # list of (start, stop) index pairs
    mirror_of: np.ndarray | None = None  # robot particles that are mirror copies of design points

    @property
    def n(self) -> int:
        return self.x.shape[0]


@dataclass
class Trace:
    frames: np.ndarray  # (control_steps + 1, P, 2) particle positions
    n_robot: int
    objects: list
    bad_det: int = 0
    box_contact: bool = False
    dx: float = 1.0 / 128

    @property
    def robot(self) -> np.ndarray:
        return self.frames[:, : self.n_robot]

    def object_centroids(self) -> np.ndarray:
        if not self.objects:
            return np.zeros((self.frames.shape[0], 0, 2))
        return np.stack([self.frames[:, a:b].mean(1) for a, b in self.objects], 1)


@dataclass
class RolloutResult:
    performance: float
    trace: Trace | None
    failed: bool = False
    message: str = ""


def _act_p(scene: Scene, a: np.ndarray, s_act: float) -> np.ndarray:
    out = np.zeros(scene.n)
    on = scene.actuator >= 0
    if on.any() and a.size:
        out[on] = a[scene.actuator[on]] * s_act
    return out


def substep(scene: Scene, state, a, cfg: MpmConfig, kernels=None):
    """One substep from ``state = (x, v, C, F)``; returns the new state tuple."""
    from . import get_kernels

    k = kernels or get_kernels(cfg.backend)
    x, v, C, F = state
    out = (np.empty_like(x), np.empty_like(v), np.empty_like(C), np.empty_like(F))
    k.substep(x, v, C, F, scene.mass, scene.vol, scene.mu, scene.lam, _act_p(scene, np.asarray(a, float), cfg.actuation_stress_scale),
              scene.fiber, cfg.inv_dx, cfg.dt, cfg.gravity, scene.boxes, cfg.ground_friction, *out)
    return out


def initial_state(scene: Scene):
    n = scene.n
    return (scene.x.copy(), scene.v.copy(), np.zeros((n, 2, 2)), np.tile(np.eye(2), (n, 1, 1)))


def simulate(scene: Scene, cp: ControllerParams, cfg: MpmConfig, store: bool = False):
    """Run the full horizon. Returns (Trace, stored substep states or None)."""
    from . import get_kernels

    k = get_kernels(cfg.backend)
    S, n_sub = cfg.control_steps, cfg.substeps_per_control_step
    n = scene.n
    x, v, C, F = initial_state(scene)
    frames = np.empty((S + 1, n, 2))
    frames[0] = x
    hist = None
    if store:
        total = S * n_sub
        hist = (np.empty((total, n, 2)), np.empty((total, n, 2)), np.empty((total, n, 2, 2)), np.empty((total, n, 2, 2)))
    xo, vo, Co, Fo = np.empty_like(x), np.empty_like(v), np.empty_like(C), np.empty_like(F)
    bad_det = 0
    grav = cfg.gravity
    for s in range(S):
        act = _act_p(scene, controller_eval(cp, s), cfg.actuation_stress_scale)
        for j in range(n_sub):
            if store:
                i = s * n_sub + j
                hist[0][i], hist[1][i], hist[2][i], hist[3][i] = x, v, C, F
            k.substep(x, v, C, F, scene.mass, scene.vol, scene.mu, scene.lam, act, scene.fiber,
                      cfg.inv_dx, cfg.dt, grav, scene.boxes, cfg.ground_friction, xo, vo, Co, Fo)
            x, xo = xo, x
            v, vo = vo, v
            C, Co = Co, C
            F, Fo = Fo, F
        if not (np.isfinite(x).all() and np.isfinite(F).all()):
            raise SimulationError((s + 1) * n_sub)
        det = F[:, 0, 0] * F[:, 1, 1] - F[:, 0, 1] * F[:, 1, 0]
        bad_det += int((det <= 0).sum())
        frames[s + 1] = x
    trace = Trace(frames, scene.n_robot, list(scene.objects), bad_det, dx=cfg.dx)
    return trace, hist


@dataclass
class SimGrad:
    x: np.ndarray  # dL/d initial positions (P, 2)
    v: np.ndarray
    mass: np.ndarray
    vol: np.ndarray
    actuation: np.ndarray  # dL/d a  (control_steps, k)
    controller: np.ndarray  # dL/d cp.values


def simulate_grad(scene: Scene, cp: ControllerParams, cfg: MpmConfig, loss_and_grad):
    """Forward rollout with storage, then the reverse sweep.

    ``loss_and_grad(trace) -> (loss, g_frames)`` supplies the scalar loss and
    its gradient w.r.t. every stored frame.
    """
    from . import get_kernels

    k = get_kernels(cfg.backend)
    trace, hist = simulate(scene, cp, cfg, store=True)
    loss, g_frames = loss_and_grad(trace)
    S, n_sub = cfg.control_steps, cfg.substeps_per_control_step
    n = scene.n
    gx = np.array(g_frames[S], dtype=np.float64)
    gv = np.zeros((n, 2))
    gC = np.zeros((n, 2, 2))
    gF = np.zeros((n, 2, 2))
    g_mass = np.zeros(n)
    g_vol = np.zeros(n)
    K = cp.n_actuators
    g_a = np.zeros((S, K))
    g_cp = np.zeros_like(cp.values)
    s_act = cfg.actuation_stress_scale
    on = scene.actuator >= 0
    for s in reversed(range(S)):
        act = _act_p(scene, controller_eval(cp, s), s_act)
        g_act = np.zeros(n)
        for j in reversed(range(n_sub)):
            i = s * n_sub + j
            k.substep_backward(hist[0][i], hist[1][i], hist[2][i], hist[3][i], scene.mass, scene.vol, scene.mu,
                               scene.lam, act, scene.fiber, cfg.inv_dx, cfg.dt, cfg.gravity, scene.boxes,
                               cfg.ground_friction, gx, gv, gC, gF, g_act, g_mass, g_vol)
        if K and on.any():
            g_a[s] = np.bincount(scene.actuator[on], g_act[on] * s_act, minlength=K)[:K]
            g_cp += controller_backward(cp, s, g_a[s])
        gx += g_frames[s]
    if not np.isfinite(gx).all():
        raise SimulationError(0, "non-finite adjoint")
    return loss, trace, SimGrad(gx, gv, g_mass, g_vol, g_a, g_cp)


# ---------------------------------------------------------------- task-level API


def rollout(design, cp: ControllerParams, task, config: MpmConfig) -> RolloutResult:
    """Simulate ``design`` on ``task`` and score it with the task metric.

    ``task`` provides ``build_scene(design, config)``, ``metric(trace)`` and a
    ``sentinel`` worst-case value. Degenerate designs score the sentinel.
    """
    if design is None:
        return RolloutResult(task.sentinel, None, True, "degenerate design")
    scene = task.build_scene(design, config)
    try:
        trace, _ = simulate(scene, cp, config)
    except SimulationError as e:
        log.warning("rollout failed: %s", e)
        return RolloutResult(task.sentinel, None, True, str(e))
    return RolloutResult(float(task.metric(trace)), trace)


def rollout_grad(design, cp: ControllerParams, task, config: MpmConfig):
    """Returns (performance, dL/d solid points (M, 2), dL/d controller values).

    L is the task loss (negated performance or a smooth surrogate of it).
    """
    scene = task.build_scene(design, config)
    loss, trace, g = simulate_grad(scene, cp, config, task.loss_and_grad)
    perf = float(task.metric(trace))
    g_design = task.design_grad(design, scene, g)
    return perf, g_design, g.controller
