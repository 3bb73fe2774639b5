"""Six 2D task environments: scene construction, metrics, and differentiable losses.

Every task exposes ``build_scene``, ``metric``, ``loss_and_grad`` (loss is the
negated metric, or a smooth surrogate for balancing) and ``design_grad``
(maps a simulation gradient onto the design's solid points), plus the
prescribed open-loop controller and actuator layout.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .mpm.sim import ControllerParams, MpmConfig, Scene
from .robotize import RobotDesign, RobotizeConfig

SENTINEL = -1e9
TASK_NAMES = ("balancing", "landing", "crawling", "hurdling", "gripping", "box_moving")
_BIG = 10.0


# ------------------------------------------------------------------ metrics


def _cells(points, dx):
    return set(map(tuple, np.floor(np.asarray(points) / dx).astype(np.int64)))


def iou_cells(a, b, dx) -> float:
    A, B = _cells(a, dx), _cells(b, dx)
    union = len(A | B)
    return len(A & B) / union if union else 1.0


def metric_balancing(trace) -> float:
    return iou_cells(trace.robot[0], trace.robot[-1], trace.dx)


def metric_landing(trace, target) -> float:
    c = trace.robot[-1].mean(0)
    return math.exp(-float(np.linalg.norm(c - np.asarray(target))))


def metric_crawling(trace) -> float:
    r = trace.robot
    return abs(float(r[-1, :, 0].mean() - r[0, :, 0].mean()))


metric_hurdling = metric_crawling


def metric_gripping(trace) -> float:
    oc = trace.object_centroids()
    return float(oc[-1, 0, 1] - oc[0, 0, 1])


def metric_box(trace) -> float:
    oc = trace.object_centroids()
    return float(oc[0, 0, 0] - oc[-1, 0, 0])


def soft_iou(a, b, sigma):
    """Min/max overlap of Gaussian-splatted occupancies; returns (value, d/da points, d/db points)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    both = np.concatenate([a, b])
    # grid anchored to multiples of sigma so it does not move with the points
    lo = np.floor(both.min(0) / sigma - 4) * sigma
    hi = np.ceil(both.max(0) / sigma + 4) * sigma
    gx = np.arange(lo[0], hi[0] + sigma, sigma)
    gy = np.arange(lo[1], hi[1] + sigma, sigma)

    def splat(p):
        ex = np.exp(-((gx[:, None] - p[None, :, 0]) ** 2) / (2 * sigma ** 2))
        ey = np.exp(-((gy[:, None] - p[None, :, 1]) ** 2) / (2 * sigma ** 2))
        return ex @ ey.T, ex, ey

    A, ax, ay = splat(a)
    B, bx, by = splat(b)
    a_low = A <= B
    num = np.where(a_low, A, B).sum()
    den = np.where(a_low, B, A).sum()
    val = num / den
    gA = np.where(a_low, 1.0 / den, -num / den ** 2)
    gB = np.where(a_low, -num / den ** 2, 1.0 / den)

    def back(G, p, ex, ey):
        g = np.empty_like(p)
        T = G @ ey  # (Cx, P)
        g[:, 0] = (T * ex * (gx[:, None] - p[None, :, 0])).sum(0) / sigma ** 2
        U = G.T @ ex  # (Cy, P)
        g[:, 1] = (U * ey * (gy[:, None] - p[None, :, 1])).sum(0) / sigma ** 2
        return g

    return float(val), back(gA, a, ax, ay), back(gB, b, bx, by)


# ------------------------------------------------------------------ scene helpers


def lattice(x0, y0, x1, y1, spacing):
    xs = np.arange(x0 + 0.5 * spacing, x1, spacing)
    ys = np.arange(y0 + 0.5 * spacing, y1, spacing)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    return np.stack([X.ravel(), Y.ravel()], 1)


def _material(E, nu):
    mu = E / (2 * (1 + nu))
    lam = E * nu / ((1 + nu) * (1 - 2 * nu))
    return mu, lam


@dataclass
class _Parts:
    x: list = field(default_factory=list)
    v: list = field(default_factory=list)
    vol: list = field(default_factory=list)
    rho: list = field(default_factory=list)
    E: list = field(default_factory=list)
    nu: list = field(default_factory=list)
    fiber: list = field(default_factory=list)
    act: list = field(default_factory=list)

    def add(self, x, v, vol, rho, E, nu, fiber=None, act=None):
        n = len(x)
        self.x.append(np.asarray(x, dtype=np.float64).reshape(n, 2))
        self.v.append(np.broadcast_to(np.asarray(v, dtype=np.float64), (n, 2)).copy())
        self.vol.append(np.full(n, vol) if np.ndim(vol) == 0 else np.asarray(vol))
        self.rho.append(np.full(n, rho))
        self.E.append(np.full(n, E))
        self.nu.append(np.full(n, nu))
        self.fiber.append(np.zeros((n, 2)) if fiber is None else np.asarray(fiber, dtype=np.float64))
        self.act.append(np.full(n, -1, dtype=np.int64) if act is None else np.asarray(act, dtype=np.int64))
        return n

    def scene(self, n_robot, boxes, objects, mirror_of=None) -> Scene:
        cat = lambda a: np.concatenate(a) if a else np.zeros(0)  # noqa: E731
        x = np.concatenate(self.x)
        vol = cat(self.vol)
        mu, lam = _material(cat(self.E), cat(self.nu))
        return Scene(x=x, v=np.concatenate(self.v), mass=vol * cat(self.rho), vol=vol, mu=mu, lam=lam,
                     fiber=np.concatenate(self.fiber), actuator=np.concatenate(self.act), n_robot=n_robot,
                     boxes=np.asarray(boxes, dtype=np.float64), objects=objects, mirror_of=mirror_of)


def _add_design(parts: _Parts, design: RobotDesign, offset, v=(0.0, 0.0)):
    fib = np.zeros((design.n, 2))
    on = design.actuator_id >= 0
    if design.k:
        fib[on] = design.fibers[design.actuator_id[on]]
    return parts.add(design.solid_points + np.asarray(offset), v, design.particle_volume, design.mass_density,
                     design.youngs_modulus, design.poisson_ratio, fib, design.actuator_id)


# ------------------------------------------------------------------ task classes


@dataclass(frozen=True)
class ActuatorConfig:
    k: int
    axes: tuple
    fiber: tuple


@dataclass
class Task:
    """Base task; subclasses override layout, controller and metric."""

    name: str = ""
    workspace: tuple = (0.08, 0.08)
    k: int = 0
    axes: tuple = (0,)
    fiber: tuple = (0.0, 1.0)
    align: str = "bottom"
    metric_id: str = ""
    sentinel: float = SENTINEL
    colliders: list = field(default_factory=list)
    init_velocity: tuple = (0.0, 0.0)
    controls_steps: int = 100

    @property
    def passive(self) -> bool:
        return self.k == 0

    @property
    def actuators(self) -> ActuatorConfig:
        return ActuatorConfig(self.k, tuple(self.axes), tuple(self.fiber))

    def robotize_config(self, base: RobotizeConfig | None = None) -> RobotizeConfig:
        base = base or RobotizeConfig()
        return replace(base, workspace=tuple(self.workspace), k=self.k, axes=tuple(self.axes),
                       fiber=tuple(self.fiber), align=self.align)

    def controller(self, cfg: MpmConfig | None = None) -> ControllerParams:
        cfg = cfg or MpmConfig()
        return ControllerParams("none", np.zeros((0, 0)), cfg.control_dt)

    # scene ---------------------------------------------------------
    def origin(self, design: RobotDesign, cfg: MpmConfig):
        return np.array([0.35, cfg.ground_y])

    def build_scene(self, design: RobotDesign, cfg: MpmConfig) -> Scene:
        parts = _Parts()
        n = _add_design(parts, design, self.origin(design, cfg), self.init_velocity)
        return parts.scene(n, np.concatenate([cfg.domain_boxes(), self.static_boxes(design, cfg)]), [])

    def static_boxes(self, design, cfg) -> np.ndarray:
        return np.zeros((0, 5))

    # objective -----------------------------------------------------
    def metric(self, trace) -> float:
        raise NotImplementedError

    def loss_and_grad(self, trace):
        raise NotImplementedError

    def design_grad(self, design: RobotDesign, scene: Scene, g) -> np.ndarray:
        return g.x[: design.n].copy()

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "workspace": list(self.workspace),
            "actuators": {"k": self.k, "axes": list(self.axes), "fiber": list(self.fiber)},
            "align": self.align,
            "metric": self.metric_id,
            "colliders": self.colliders,
            "init_velocity": list(self.init_velocity),
            "controller": self.controller().to_dict(),
            "horizon": {"control_steps": 100, "substeps": 17},
        }


def _displacement_loss(trace, sign_axis=0):
    r = trace.robot
    d = float(r[-1, :, sign_axis].mean() - r[0, :, sign_axis].mean())
    s = 1.0 if d >= 0 else -1.0
    M = r.shape[1]
    g = np.zeros_like(trace.frames)
    g[-1, :M, sign_axis] = -s / M
    g[0, :M, sign_axis] = s / M
    return -abs(d), g


class Crawling(Task):
    def __init__(self):
        super().__init__(name="crawling", k=4, axes=(0,), fiber=(0.0, 1.0), metric_id="distance_x")

    def controller(self, cfg=None):
        cfg = cfg or MpmConfig()
        ph = [0.5 * math.pi, 1.5 * math.pi, 0.0, math.pi]
        return ControllerParams("sine", [[0.3, 30.0, p, 0.0] for p in ph], cfg.control_dt)

    def metric(self, trace):
        return metric_crawling(trace)

    def loss_and_grad(self, trace):
        return _displacement_loss(trace)


class Hurdling(Crawling):
    obstacle = (0.01, 0.03)
    gap = 0.07

    def __init__(self):
        Task.__init__(self, name="hurdling", k=2, axes=(0,), fiber=(0.0, 1.0), metric_id="distance_x",
                      colliders=[{"kind": "obstacle", "size": [0.01, 0.03], "ahead": 0.07}])

    def origin(self, design, cfg):
        return np.array([0.3, cfg.ground_y])

    def static_boxes(self, design, cfg):
        # the obstacle position depends only on the workspace, not on the design
        cx = self.origin(design, cfg)[0] + 0.5 * self.workspace[0] + self.gap
        w, h = self.obstacle
        return np.array([[cx - w / 2, -_BIG, cx + w / 2, cfg.ground_y + h, 0]])

    def obstacle_contact(self, trace, cfg: MpmConfig | None = None) -> bool:
        """Diagnostic only: did any robot particle come within one cell of the obstacle?"""
        cfg = cfg or MpmConfig()
        b = self.static_boxes(None, cfg)[0]
        r = trace.robot.reshape(-1, 2)
        d = trace.dx
        inside = (r[:, 0] > b[0] - d) & (r[:, 0] < b[2] + d) & (r[:, 1] < b[3] + d)
        return bool(inside.any())

    def controller(self, cfg=None):
        cfg = cfg or MpmConfig()
        S = cfg.control_steps
        n = max(1, round(0.3 * S))
        seq = np.zeros((S, 2))
        ramp = np.linspace(0.0, 1.0, n)
        # id 1 is the cluster nearer the obstacle and gets the larger ramp
        seq[:n, 1] = ramp * 1.0
        seq[:n, 0] = ramp * 0.3
        return ControllerParams("sequence", seq, cfg.control_dt)


class Balancing(Task):
    platform = (0.02, 0.05)

    def __init__(self):
        super().__init__(name="balancing", k=0, metric_id="iou", init_velocity=(0.0, 0.5),
                         colliders=[{"kind": "platform", "size": [0.02, 0.05]}])

    def origin(self, design, cfg):
        cx = 0.5
        return np.array([cx - 0.5 * self.workspace[0], cfg.ground_y + self.platform[1]])

    def static_boxes(self, design, cfg):
        w, h = self.platform
        return np.array([[0.5 - w / 2, -_BIG, 0.5 + w / 2, cfg.ground_y + h, 0]])

    def metric(self, trace):
        return metric_balancing(trace)

    def loss_and_grad(self, trace):
        r = trace.robot
        val, ga, gb = soft_iou(r[0], r[-1], trace.dx)
        g = np.zeros_like(trace.frames)
        g[0, : r.shape[1]] = -ga
        g[-1, : r.shape[1]] = -gb
        return -val, g


class Landing(Task):
    offset = (0.08, 0.045)

    def __init__(self):
        super().__init__(name="landing", k=0, metric_id="exp_neg_distance", init_velocity=(0.5, 0.0),
                         colliders=[{"kind": "target_marker", "size": [0.02, 0.05]}])
        self._target = None

    def target(self, cfg: MpmConfig):
        return np.array([0.5, cfg.ground_y + 0.025])

    def origin(self, design, cfg):
        tgt = self.target(cfg)
        want = tgt + np.array([-self.offset[0], self.offset[1]])
        off = want - design.solid_points.mean(0)
        lowest = (design.solid_points[:, 1] + off[1]).min()
        floor = cfg.ground_y + 0.5 * math.sqrt(design.particle_volume)
        if lowest < floor:
            off[1] += floor - lowest
        return off

    def build_scene(self, design, cfg):
        self._target = self.target(cfg)
        return super().build_scene(design, cfg)

    def metric(self, trace):
        return metric_landing(trace, self._target if self._target is not None else self.target(MpmConfig()))

    def loss_and_grad(self, trace):
        tgt = self._target if self._target is not None else self.target(MpmConfig())
        r = trace.robot
        c = r[-1].mean(0)
        diff = c - tgt
        d = float(np.linalg.norm(diff))
        val = math.exp(-d)
        g = np.zeros_like(trace.frames)
        if d > 0:
            g[-1, : r.shape[1]] = val * diff / d / r.shape[1]
        return -val, g

    def design_grad(self, design, scene, g):
        # the placement re-centres the design, so only centroid-free motion matters
        out = g.x[: design.n].copy()
        return out - out.mean(0)


class Gripping(Task):
    """Two mirrored fingers under a base glued to a sticky ceiling block; object on the ground."""

    obj = 0.03
    gap = 0.04
    base_h = 0.02

    def __init__(self):
        super().__init__(name="gripping", workspace=(0.06, 0.08), k=2, axes=(0,), fiber=(0.0, 1.0), align="top",
                         metric_id="object_lift_y",
                         colliders=[{"kind": "object", "size": [0.03, 0.03]}, {"kind": "glued_base"}])

    def controller(self, cfg=None):
        cfg = cfg or MpmConfig()
        S = cfg.control_steps
        seq = np.zeros((S, 2))
        # id 0 = inner cluster of the right finger, id 1 = outer
        h = S // 2
        seq[:h, 0] = np.linspace(0.0, 1.0, h)
        seq[h:, 1] = np.linspace(1.0, 0.0, S - h)
        return ControllerParams("sequence", seq, cfg.control_dt)

    def layout(self, cfg):
        cx = 0.5
        y_f = cfg.ground_y + 0.01
        return cx, y_f

    def build_scene(self, design, cfg):
        cx, y_f = self.layout(cfg)
        W, H = self.workspace
        parts = _Parts()
        off = np.array([cx + self.gap / 2, y_f])
        n1 = _add_design(parts, design, off)
        mir = design.solid_points + off
        mir[:, 0] = 2 * cx - mir[:, 0]
        fib = np.zeros((design.n, 2))
        on = design.actuator_id >= 0
        fib[on] = design.fibers[design.actuator_id[on]] * np.array([-1.0, 1.0])
        n2 = parts.add(mir, (0, 0), design.particle_volume, design.mass_density, design.youngs_modulus,
                       design.poisson_ratio, fib, design.actuator_id)
        sp = 0.5 * cfg.dx
        bx0, bx1 = cx - self.gap / 2 - W, cx + self.gap / 2 + W
        by0 = y_f + H
        base = lattice(bx0, by0, bx1, by0 + self.base_h, sp)
        n3 = parts.add(base, (0, 0), sp * sp, design.mass_density, design.youngs_modulus, design.poisson_ratio)
        n_robot = n1 + n2 + n3
        o = self.obj
        box = lattice(cx - o / 2, cfg.ground_y, cx + o / 2, cfg.ground_y + o, sp)
        parts.add(box, (0, 0), sp * sp, design.mass_density, design.youngs_modulus, design.poisson_ratio)
        glue = [[bx0 - cfg.dx, by0 + 0.5 * self.base_h, bx1 + cfg.dx, _BIG, 1]]
        boxes = np.concatenate([cfg.domain_boxes(), np.asarray(glue, dtype=np.float64)])
        mirror_of = np.arange(design.n)
        return parts.scene(n_robot, boxes, [(n_robot, n_robot + len(box))], mirror_of)

    def metric(self, trace):
        return metric_gripping(trace)

    def loss_and_grad(self, trace):
        a, b = trace.objects[0]
        g = np.zeros_like(trace.frames)
        n = b - a
        g[-1, a:b, 1] = -1.0 / n
        g[0, a:b, 1] = 1.0 / n
        return -metric_gripping(trace), g

    def design_grad(self, design, scene, g):
        n = design.n
        out = g.x[:n].copy()
        out[:, 0] -= g.x[n:2 * n, 0]
        out[:, 1] += g.x[n:2 * n, 1]
        return out


class BoxMoving(Task):
    obj = 0.03

    def __init__(self):
        super().__init__(name="box_moving", workspace=(0.16, 0.06), k=2, axes=(1,), fiber=(1.0, 0.0),
                         metric_id="object_shift_left_x", colliders=[{"kind": "object", "size": [0.03, 0.03]}])
        self._cfg = MpmConfig()

    def origin(self, design, cfg):
        return np.array([0.3, cfg.ground_y])

    def controller(self, cfg=None):
        cfg = cfg or MpmConfig()
        seq = np.zeros((cfg.control_steps, 2))
        seq[:, 0] = np.linspace(0.0, 1.0, cfg.control_steps)  # lower actuator ramps, upper stays off
        return ControllerParams("sequence", seq, cfg.control_dt)

    def _anchor(self, design, cfg):
        """Box placement from the design: (centre x, resting height, index of max x, min x, top point)."""
        pts = design.solid_points + self.origin(design, cfg)
        imax, imin = int(pts[:, 0].argmax()), int(pts[:, 0].argmin())
        bcx = pts[:, 0].mean() + 0.5 * (pts[imax, 0] - pts[imin, 0])
        under = np.flatnonzero(np.abs(pts[:, 0] - bcx) < 0.5 * self.obj + 0.5 * cfg.dx)
        if under.size:
            itop = int(under[pts[under, 1].argmax()])
            top = pts[itop, 1] + 0.5 * math.sqrt(design.particle_volume)
        else:
            itop, top = -1, cfg.ground_y
        return bcx, top, imax, imin, itop

    def build_scene(self, design, cfg):
        self._cfg = cfg
        parts = _Parts()
        n = _add_design(parts, design, self.origin(design, cfg))
        bcx, top, *_ = self._anchor(design, cfg)
        o = self.obj
        sp = 0.5 * cfg.dx
        y0 = top + 0.25 * cfg.dx
        box = lattice(bcx - o / 2, y0, bcx + o / 2, y0 + o, sp)
        parts.add(box, (0, 0), sp * sp, design.mass_density, design.youngs_modulus, design.poisson_ratio)
        return parts.scene(n, cfg.domain_boxes(), [(n, n + len(box))])

    def design_grad(self, design, scene, g):
        # the box is placed relative to the design, so its gradient flows back too
        n = design.n
        out = g.x[:n].copy()
        a, b = scene.objects[0]
        gx, gy = g.x[a:b].sum(0)
        cfg = self._cfg
        _, _, imax, imin, itop = self._anchor(design, cfg)
        out[:, 0] += gx / n
        out[imax, 0] += 0.5 * gx
        out[imin, 0] -= 0.5 * gx
        if itop >= 0:
            out[itop, 1] += gy
        return out

    def metric(self, trace):
        return metric_box(trace)

    def loss_and_grad(self, trace):
        a, b = trace.objects[0]
        g = np.zeros_like(trace.frames)
        n = b - a
        g[-1, a:b, 0] = 1.0 / n
        g[0, a:b, 0] = -1.0 / n
        return -metric_box(trace), g


_TASKS = {"crawling": Crawling, "hurdling": Hurdling, "balancing": Balancing, "landing": Landing,
          "gripping": Gripping, "box_moving": BoxMoving}


def build_task(name: str) -> Task:
    try:
        return _TASKS[name]()
    except KeyError:
        raise ValueError(f"unknown task {name!r}; choose from {', '.join(TASK_NAMES)}") from None
