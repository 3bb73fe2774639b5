"""Turn a surface point sample into a simulatable soft robot, and map gradients back.

Pipeline: x_t -> x0_hat (noise-prediction inversion) -> solid interior points
-> actuator labels (k-means) -> constant material. Gradients w.r.t. the
solid points reach x0_hat through a Gaussian-kernel correspondence and x_t
through the 1/sqrt(alpha_bar) factor (the network output is held fixed).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from . import diffusion as df

_CROSS = ndimage.generate_binary_structure(2, 1)


class DegenerateGeometry(ValueError):
    """The sample does not enclose a usable solid region."""

    def __init__(self, msg: str = "degenerate geometry"):
        super().__init__(msg)


@dataclass
class RobotizeConfig:
    resolution: int = 40  # occupancy grid cells per side
    bandwidth: float = 1.5  # kernel bandwidth in cells
    tau: float = 0.35  # threshold relative to an evenly spaced boundary
    closing_radius: int = 1
    peel: bool = True
    min_points: int = 64
    alpha: float = 20.0
    workspace: tuple = (0.08, 0.08)
    align: str = "bottom"  # "bottom": rests on y=0 of the workspace; "top": hangs from y=height
    k: int = 4
    axes: tuple = (0,)
    fiber: tuple = (0.0, 1.0)
    youngs_modulus: float = 1e5
    poisson_ratio: float = 0.2
    mass_density: float = 1e3
    seed: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["workspace"] = list(self.workspace)
        d["axes"] = list(self.axes)
        d["fiber"] = list(self.fiber)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RobotizeConfig":
        d = dict(d)
        for key in ("workspace", "axes", "fiber"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class SolidifyReport:
    occupancy: np.ndarray
    components: int
    chosen_size: int
    fill_ratio: float
    cell: float
    origin: tuple

    def to_dict(self) -> dict:
        return {
            "occupancy": ["".join("1" if v else "0" for v in row) for row in self.occupancy],
            "components": self.components,
            "chosen_size": self.chosen_size,
            "fill_ratio": self.fill_ratio,
            "cell": self.cell,
            "origin": list(self.origin),
        }


@dataclass
class RobotDesign:
    """Solid points live in workspace-local coordinates, ``[0, w] x [0, h]``."""

    solid_points: np.ndarray
    actuator_id: np.ndarray
    fibers: np.ndarray  # (k, 2) unit vectors
    youngs_modulus: float
    poisson_ratio: float
    particle_volume: float
    mass_density: float
    workspace: tuple
    scale: float = 1.0  # local = (shape_points - anchor) * scale
    anchor: np.ndarray = field(default_factory=lambda: np.zeros(2))
    shape_points: np.ndarray | None = None
    x_hat0: np.ndarray | None = None
    report: SolidifyReport | None = None

    @property
    def n(self) -> int:
        return self.solid_points.shape[0]

    @property
    def k(self) -> int:
        return self.fibers.shape[0]

    def to_dict(self) -> dict:
        d = {
            "points": self.solid_points.tolist(),
            "labels": self.actuator_id.tolist(),
            "fibers": self.fibers.tolist(),
            "youngs_modulus": self.youngs_modulus,
            "poisson_ratio": self.poisson_ratio,
            "particle_volume": self.particle_volume,
            "mass_density": self.mass_density,
            "workspace": list(self.workspace),
            "scale": self.scale,
            "anchor": self.anchor.tolist(),
        }
        if self.shape_points is not None:
            d["shape_points"] = self.shape_points.tolist()
        if self.x_hat0 is not None:
            d["x_hat0"] = self.x_hat0.tolist()
        if self.report is not None:
            d["report"] = self.report.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RobotDesign":
        arr = lambda k: None if d.get(k) is None else np.asarray(d[k], dtype=np.float64)  # noqa: E731
        return cls(
            solid_points=np.asarray(d["points"], dtype=np.float64).reshape(-1, 2),
            actuator_id=np.asarray(d["labels"], dtype=np.int64),
            fibers=np.asarray(d["fibers"], dtype=np.float64).reshape(-1, 2),
            youngs_modulus=float(d["youngs_modulus"]),
            poisson_ratio=float(d["poisson_ratio"]),
            particle_volume=float(d["particle_volume"]),
            mass_density=float(d["mass_density"]),
            workspace=tuple(d["workspace"]),
            scale=float(d.get("scale", 1.0)),
            anchor=np.asarray(d.get("anchor", [0.0, 0.0]), dtype=np.float64),
            shape_points=arr("shape_points"),
            x_hat0=arr("x_hat0"),
        )

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


# ------------------------------------------------------------------ solidify


def _band_cells(cfg: RobotizeConfig) -> float:
    """How far (in cells) the thresholded density reaches outside a straight boundary."""
    return cfg.bandwidth * math.sqrt(2.0 * math.log(1.0 / cfg.tau))


def solidify(x_hat0, cfg: RobotizeConfig | None = None):
    """Solid interior points (one per interior cell centre) and a report.

    Density of the points under a Gaussian kernel is thresholded at ``tau``
    times the density an evenly spaced boundary would produce, closed, and
    flood filled from the border. The thresholded band sticks out past the
    sampled boundary, so cells within that distance of the exterior are
    peeled off before the largest 4-connected component is kept.
    """
    cfg = cfg or RobotizeConfig()
    x = np.asarray(x_hat0, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != 2 or not np.isfinite(x).all():
        raise ValueError("x_hat0 must be a finite (N, 2) array")
    R = cfg.resolution
    band = _band_cells(cfg)
    margin = int(math.ceil(band)) + 2
    lo, hi = x.min(0), x.max(0)
    ext = float(max(hi[0] - lo[0], hi[1] - lo[1]))
    if ext <= 0 or R - 2 * margin < 2:
        raise DegenerateGeometry()
    cell = ext / (R - 2 * margin)
    centre = 0.5 * (lo + hi)
    origin = centre - 0.5 * R * cell
    h = cfg.bandwidth * cell

    # nearest-neighbour spacing sets the density an even boundary would give
    if x.shape[0] >= 2:
        d, _ = cKDTree(x).query(x, k=2)
        spacing = float(np.median(d[:, 1]))
    else:
        spacing = cell
    spacing = max(spacing, 1e-3 * cell)
    ref = math.sqrt(2.0 * math.pi) * h / spacing

    gx = origin[0] + (np.arange(R) + 0.5) * cell
    gy = origin[1] + (np.arange(R) + 0.5) * cell
    dx2 = (gx[:, None] - x[None, :, 0]) ** 2  # (R, N)
    dy2 = (gy[:, None] - x[None, :, 1]) ** 2
    ex = np.exp(-dx2 / (2 * h * h))
    ey = np.exp(-dy2 / (2 * h * h))
    dens = ex @ ey.T  # separable Gaussian: (R_x, R_y)
    occ = dens > cfg.tau * ref

    if cfg.closing_radius > 0:
        st = ndimage.iterate_structure(_CROSS, cfg.closing_radius)
        occ = ndimage.binary_closing(occ, structure=st)
    free_lab, nfree = ndimage.label(~occ, structure=_CROSS)
    border = np.unique(np.concatenate([free_lab[0], free_lab[-1], free_lab[:, 0], free_lab[:, -1]]))
    exterior = np.isin(free_lab, border[border > 0])
    interior = ~exterior
    if cfg.peel:
        depth = ndimage.distance_transform_edt(interior)
        interior = depth > band + 0.5
    lab, ncomp = ndimage.label(interior, structure=_CROSS)
    if ncomp == 0:
        raise DegenerateGeometry()
    sizes = np.bincount(lab.ravel())[1:]
    best = int(np.argmax(sizes)) + 1
    keep = lab == best
    ii, jj = np.nonzero(keep)
    pts = np.stack([gx[ii], gy[jj]], 1)
    report = SolidifyReport(keep, int(ncomp), int(sizes[best - 1]), float(keep.mean()), float(cell),
                            (float(origin[0]), float(origin[1])))
    return pts, report


# ------------------------------------------------------------------ actuators


def kmeans(points, k: int, seed: int = 0, iters: int = 100, tol: float = 1e-9):
    """k-means++ seeding then Lloyd iterations. Returns (labels, centroids)."""
    X = np.asarray(points, dtype=np.float64)
    M = X.shape[0]
    if M < k:
        raise ValueError(f"cannot form {k} clusters from {M} points")
    rng = np.random.default_rng(seed)
    cent = np.empty((k, X.shape[1]))
    cent[0] = X[rng.integers(M)]
    d2 = ((X - cent[0]) ** 2).sum(1)
    for j in range(1, k):
        tot = d2.sum()
        if tot <= 0:
            idx = int(rng.integers(M))
        else:
            idx = int(np.searchsorted(np.cumsum(d2), rng.random() * tot, side="right"))
            idx = min(idx, M - 1)
        cent[j] = X[idx]
        d2 = np.minimum(d2, ((X - cent[j]) ** 2).sum(1))
    labels = np.zeros(M, dtype=np.int64)
    for _ in range(iters):
        dist = ((X[:, None, :] - cent[None]) ** 2).sum(2)
        labels = np.argmin(dist, 1)
        new = cent.copy()
        for j in range(k):
            m = labels == j
            if m.any():
                new[j] = X[m].mean(0)
            else:
                # re-seed an empty cluster at the worst-served point
                far = int(np.argmax(dist[np.arange(M), labels]))
                new[j] = X[far]
        shift = float(np.abs(new - cent).max())
        cent = new
        if shift <= tol:
            break
    labels = np.argmin(((X[:, None, :] - cent[None]) ** 2).sum(2), 1)
    return labels, cent


def place_actuators(solid_points, k: int, axes=(0,), seed: int = 0) -> np.ndarray:
    """Cluster on the chosen coordinate axes; ids ordered by centroid along ``axes[0]``."""
    P = np.asarray(solid_points, dtype=np.float64)
    if P.shape[0] < k:
        raise ValueError(f"cannot place {k} actuators on {P.shape[0]} points")
    if k == 0:
        return np.full(P.shape[0], -1, dtype=np.int64)
    axes = list(axes)
    X = P[:, axes] - P[:, axes].mean(0)
    labels, cent = kmeans(X, k, seed)
    order = np.lexsort(tuple(cent[:, a] for a in reversed(range(len(axes)))))
    remap = np.empty(k, dtype=np.int64)
    remap[order] = np.arange(k)
    return remap[labels]


# ------------------------------------------------------------------ gradients


def kernel_weights(solid_points, x_hat0, alpha: float = 20.0) -> np.ndarray:
    """Row-normalised Gaussian weights, shape (M, N)."""
    u = np.asarray(solid_points, dtype=np.float64)
    v = np.asarray(x_hat0, dtype=np.float64)
    d2 = ((u[:, None, :] - v[None, :, :]) ** 2).sum(2)
    logits = -alpha * d2
    logits -= logits.max(1, keepdims=True)
    w = np.exp(logits)
    return w / w.sum(1, keepdims=True)


def kernel_backward(solid_points, x_hat0, grad_solid, alpha: float = 20.0) -> np.ndarray:
    """Route per-solid-point gradients to the surface points that control them."""
    W = kernel_weights(solid_points, x_hat0, alpha)
    return W.T @ np.asarray(grad_solid, dtype=np.float64)


def chain_grad_to_xt(grad_x_hat0, t: int, schedule: df.NoiseSchedule):
    if not 1 <= t <= schedule.T:
        raise ValueError(f"diffusion step {t} outside [1, {schedule.T}]")
    return np.asarray(grad_x_hat0) / math.sqrt(schedule.ab(t))


def design_grad_to_xt(design: RobotDesign, grad_local, t: int, schedule: df.NoiseSchedule, alpha=None):
    """Gradient w.r.t. workspace-local solid points -> gradient w.r.t. x_t (or x0_hat at t = 0)."""
    g_shape = np.asarray(grad_local) * design.scale
    g = kernel_backward(design.shape_points, design.x_hat0, g_shape, alpha if alpha is not None else 20.0)
    return g if t == 0 else chain_grad_to_xt(g, t, schedule)


# ------------------------------------------------------------------ full pipeline


def build_design(x_hat0, cfg: RobotizeConfig | None = None) -> RobotDesign:
    """Solidify, fit into the workspace, place actuators, attach constant material."""
    cfg = cfg or RobotizeConfig()
    pts, report = solidify(x_hat0, cfg)
    if pts.shape[0] < max(cfg.min_points, cfg.k):
        raise DegenerateGeometry(f"degenerate geometry: {pts.shape[0]} solid points")
    W, H = cfg.workspace
    cell = report.cell
    lo = pts.min(0) - 0.5 * cell
    hi = pts.max(0) + 0.5 * cell
    size = hi - lo
    scale = float(min(W / size[0], H / size[1]))
    # centre horizontally, align vertically
    off_x = 0.5 * (W - size[0] * scale)
    off_y = 0.0 if cfg.align == "bottom" else H - size[1] * scale
    anchor = lo - np.array([off_x, off_y]) / scale
    local = (pts - anchor) * scale
    labels = place_actuators(local, cfg.k, cfg.axes, cfg.seed)
    fib = np.asarray(cfg.fiber, dtype=np.float64)
    fib = fib / np.linalg.norm(fib)
    fibers = np.tile(fib, (cfg.k, 1))
    return RobotDesign(
        solid_points=local,
        actuator_id=labels,
        fibers=fibers,
        youngs_modulus=cfg.youngs_modulus,
        poisson_ratio=cfg.poisson_ratio,
        particle_volume=float((cell * scale) ** 2),
        mass_density=cfg.mass_density,
        workspace=(float(W), float(H)),
        scale=scale,
        anchor=anchor,
        shape_points=pts,
        x_hat0=np.array(x_hat0, dtype=np.float64),
        report=report,
    )


def robotize(x_t, t: int, p, c, s: float, schedule: df.NoiseSchedule, cfg: RobotizeConfig | None = None,
             eps_hat=None) -> RobotDesign:
    """x_t -> x0_hat -> design. At t = 0, x_t is used as x0_hat directly.

    ``eps_hat`` may be passed in when the guided noise estimate is already known.
    """
    if t == 0:
        x_hat0 = np.asarray(x_t, dtype=np.float64)
    else:
        if eps_hat is None:
            eps_hat = df.guided_eps(p, x_t, t, c, s)
        x_hat0 = df.predict_x0(x_t, t, eps_hat, schedule)
    return build_design(x_hat0, cfg)
