"""Physics-augmented sampling: embedding optimization, co-design MCMC, and baselines."""
from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import denoiser as dn
from . import diffusion as df
from . import robotize as rb
from .mpm import MpmConfig, SimulationError, rollout, rollout_grad
from .mpm.sim import ControllerParams, simulate_grad
from .tasks import SENTINEL, Task, build_task, lattice

log = logging.getLogger(__name__)

PASSIVE_TASKS = ("balancing", "landing")


def pmap(fn, items, jobs: int = 1):
    """Ordered map; with ``jobs > 1`` work runs in a process pool but results keep input order."""
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, items))


# ------------------------------------------------------------------ evaluation


@dataclass
class Evaluation:
    performance: float
    design: rb.RobotDesign | None
    failed: bool
    message: str = ""


def evaluate_detail(x0, task: Task, controller: ControllerParams | None = None,
                    mcfg: MpmConfig | None = None, rcfg: rb.RobotizeConfig | None = None) -> Evaluation:
    mcfg = mcfg or MpmConfig()
    try:
        design = rb.build_design(np.asarray(x0, dtype=np.float64), task.robotize_config(rcfg))
    except rb.DegenerateGeometry as e:
        return Evaluation(task.sentinel, None, True, str(e))
    cp = controller if controller is not None else task.controller(mcfg)
    res = rollout(design, cp, task, mcfg)
    return Evaluation(res.performance, design, res.failed, res.message)


def evaluate(x0, task: Task, p=None, schedule=None, mcfg: MpmConfig | None = None,
             rcfg: rb.RobotizeConfig | None = None, controller: ControllerParams | None = None) -> float:
    """Robotize a clean sample, run it under the task's prescribed controller, return the metric.

    Robotization or simulation failure scores the task sentinel.
    """
    return evaluate_detail(x0, task, controller, mcfg, rcfg).performance


class _Evaluator:
    """Picklable closure for pool evaluation."""

    def __init__(self, task_name, mcfg, rcfg):
        self.task_name, self.mcfg, self.rcfg = task_name, mcfg, rcfg

    def __call__(self, x0):
        return evaluate(x0, build_task(self.task_name), mcfg=self.mcfg, rcfg=self.rcfg)


def evaluate_many(x0s, task: Task, mcfg=None, rcfg=None, jobs: int = 1):
    return pmap(_Evaluator(task.name, mcfg or MpmConfig(), rcfg), list(x0s), jobs)


# ------------------------------------------------------------------ buffer


@dataclass
class BufferEntry:
    x0: np.ndarray
    performance: float
    epoch_created: int

    @property
    def valid(self) -> bool:
        return bool(np.isfinite(self.performance) and self.performance > SENTINEL)

    def to_dict(self) -> dict:
        return {"x0": np.asarray(self.x0).tolist(), "performance": self.performance,
                "epoch_created": self.epoch_created}

    @classmethod
    def from_dict(cls, d) -> "BufferEntry":
        return cls(np.asarray(d["x0"], dtype=np.float64), float(d["performance"]), int(d["epoch_created"]))


@dataclass
class EmbedOptimConfig:
    buffer_capacity: int = 60
    min_buffer: int = 60
    samples_per_epoch: int = 60
    train_iters_per_epoch: int = 1
    top_k: int = 6
    batch_size: int = 6
    embed_lr: float = 3e-2  # 10 single-step epochs must cover the class-embedding scale
    max_epochs: int = 10
    guidance_scale: float = 2.0

    @classmethod
    def for_task(cls, name: str, **kw) -> "EmbedOptimConfig":
        d = {}
        if name in ("balancing", "landing", "hurdling"):
            d["buffer_capacity"] = 600
        if name in PASSIVE_TASKS:
            d["top_k"] = 12
        d.update(kw)
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "EmbedOptimConfig":
        return cls(**d)

    def validate(self) -> None:
        for k in ("buffer_capacity", "samples_per_epoch", "top_k", "batch_size"):
            if getattr(self, k) < 1:
                raise ValueError(f"{k} must be positive")
        if self.min_buffer < 0 or self.train_iters_per_epoch < 0 or self.max_epochs < 0:
            raise ValueError("counts must be non-negative")
        if self.embed_lr <= 0:
            raise ValueError("embed_lr must be positive")


def filter_buffer(buffer: list, new_entries: list, cfg: EmbedOptimConfig) -> list:
    """Union, then keep the top-k valid entries plus the newest ones up to capacity.

    Entries are kept in age order (oldest first).
    """
    union = list(buffer) + list(new_entries)
    cap = cfg.buffer_capacity
    if len(union) <= cap:
        return union
    valid = [i for i, e in enumerate(union) if e.valid]
    # best first; among equal scores prefer the newer entry
    ranked = sorted(valid, key=lambda i: (-union[i].performance, -i))
    keep = set(ranked[: min(cfg.top_k, cap)])
    for i in range(len(union) - 1, -1, -1):
        if len(keep) >= cap:
            break
        keep.add(i)
    return [union[i] for i in sorted(keep)]


def top_entries(buffer: list, k: int) -> list:
    valid = [e for e in buffer if e.valid]
    return sorted(valid, key=lambda e: -e.performance)[:k]


@dataclass
class EmbedState:
    c: np.ndarray
    buffer: list = field(default_factory=list)
    adam: dn.AdamState | None = None
    epoch: int = 0

    @classmethod
    def init(cls, E: int) -> "EmbedState":
        return cls(np.zeros(E), [], dn.AdamState.zeros(E), 0)

    def embedding(self) -> dn.Embedding:
        return dn.Embedding(self.c.copy(), False)

    def to_dict(self) -> dict:
        return {"c": self.c.tolist(), "epoch": self.epoch,
                "adam": {"m": self.adam.m.tolist(), "v": self.adam.v.tolist(), "step": self.adam.step},
                "buffer": [e.to_dict() for e in self.buffer]}

    @classmethod
    def from_dict(cls, d) -> "EmbedState":
        a = d["adam"]
        return cls(np.asarray(d["c"], dtype=np.float64), [BufferEntry.from_dict(e) for e in d["buffer"]],
                   dn.AdamState(np.asarray(a["m"], dtype=np.float64), np.asarray(a["v"], dtype=np.float64),
                                int(a["step"])), int(d["epoch"]))


def embedding_loss_grad(p, c, x0_batch, schedule, rng):
    """Noise-prediction loss on a batch with shared conditioning ``c``; returns (loss, dloss/dc)."""
    x0_batch = np.asarray(x0_batch, dtype=np.float64)
    B = x0_batch.shape[0]
    loss, _, g_c = df.train_step(p, x0_batch, np.broadcast_to(c, (B, p.E)), schedule, rng, drop_prob=0.0)
    return loss, g_c.sum(0)


def embed_optim_epoch(state: EmbedState, p, task: Task, cfg: EmbedOptimConfig, schedule, rng,
                      mcfg: MpmConfig | None = None, rcfg=None, jobs: int = 1, n_points: int = 256):
    """One epoch: sample with the current embedding, score, update the buffer, train ``c``.

    Returns (new state, log row dict). The denoiser parameters are never modified.
    """
    seeds = rng.integers(0, 2 ** 63 - 1, cfg.samples_per_epoch)
    rngs = [np.random.default_rng(int(s)) for s in seeds]
    x0s = df.sample_batch(p, state.embedding(), cfg.guidance_scale, schedule, rngs, n_points)
    perfs = evaluate_many(x0s, task, mcfg, rcfg, jobs)
    epoch = state.epoch + 1
    new = [BufferEntry(x, float(v), epoch) for x, v in zip(x0s, perfs)]
    buffer = filter_buffer(state.buffer, new, cfg)
    c, adam = state.c.copy(), state.adam or dn.AdamState.zeros(p.E)
    losses = []
    if len(buffer) >= cfg.min_buffer:
        top = top_entries(buffer, cfg.top_k)
        if not top:
            log.warning("no valid samples in buffer; skipping embedding training")
        else:
            for _ in range(cfg.train_iters_per_epoch):
                idx = rng.choice(len(top), cfg.batch_size, replace=cfg.batch_size > len(top))
                loss, g = embedding_loss_grad(p, c, np.stack([top[i].x0 for i in idx]), schedule, rng)
                c, adam = dn.adam_update(c, g, adam, cfg.embed_lr)
                losses.append(loss)
    valid = np.array([e.performance for e in buffer if e.valid])
    row = {
        "epoch": epoch,
        "buffer_mean": float(valid.mean()) if valid.size else SENTINEL,
        "buffer_max": float(valid.max()) if valid.size else SENTINEL,
        "sample_mean": float(np.mean([v for v in perfs if v > SENTINEL])) if any(v > SENTINEL for v in perfs) else SENTINEL,
        "embedding_norm": float(np.linalg.norm(c)),
        "loss": float(np.mean(losses)) if losses else float("nan"),
    }
    return EmbedState(c, buffer, adam, epoch), row


def optimize_embedding(p, task: Task, cfg: EmbedOptimConfig, schedule, seed: int = 0, state=None,
                       mcfg=None, rcfg=None, jobs: int = 1, callback=None):
    rng = np.random.default_rng(seed)
    state = state or EmbedState.init(p.E)
    rows = []
    for _ in range(cfg.max_epochs):
        state, row = embed_optim_epoch(state, p, task, cfg, schedule, rng, mcfg, rcfg, jobs)
        rows.append(row)
        log.info("epoch %d buffer max %.4g mean %.4g", row["epoch"], row["buffer_max"], row["buffer_mean"])
        if callback is not None:
            callback(state, row)
    return state, rows


# ------------------------------------------------------------------ diffusion as co-design


@dataclass
class CodesignConfig:
    t_max: int = 400
    t_min: int = 0
    delta_t: int = 50
    K: int = 5
    sigma_scale: float = 1e-4
    kappa: float = 1e4
    gamma: float = 0.01
    renorm_scale: float = 10.0
    controller_reset_policy: str = "inherit"
    noise_form: str = "ula"  # "ula": sigma * eps, "literal": sigma**2 * eps

    @classmethod
    def for_task(cls, name: str, **kw) -> "CodesignConfig":
        d = {}
        if name == "landing":
            d.update(t_max=150, delta_t=25)
        d["K"] = 3 if name in PASSIVE_TASKS else 5
        d["gamma"] = 0.01 if name == "crawling" else 0.001
        d.update(kw)
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "CodesignConfig":
        return cls(**d)

    def validate(self) -> None:
        if self.delta_t < 1:
            raise ValueError("delta_t must be >= 1")
        if self.K < 0 or self.t_min < 0 or self.t_max < 0:
            raise ValueError("K, t_min, t_max must be non-negative")
        if self.controller_reset_policy not in ("inherit", "reset"):
            raise ValueError("controller_reset_policy must be 'inherit' or 'reset'")
        if self.noise_form not in ("ula", "literal"):
            raise ValueError("noise_form must be 'ula' or 'literal'")

    def sigma(self, t: int, schedule) -> float:
        return self.sigma_scale * schedule.b(t)

    def active_times(self, T: int) -> list:
        """Diffusion times with co-design steps, from t_max down in strides of delta_t."""
        hi = min(self.t_max, T)
        lo = max(self.t_min, 1)
        return [t for t in range(hi, lo - 1, -1) if (self.t_max - t) % self.delta_t == 0]


@dataclass
class StepInfo:
    t: int
    performance: float
    grad_norm: float
    eps_norm: float
    skipped: bool


def mcmc_codesign_step(x_t, t: int, phi: ControllerParams, p, c, s: float, task: Task, ccfg: CodesignConfig,
                       schedule, rng, mcfg: MpmConfig | None = None, rcfg=None, eps_hat=None):
    """One inner co-design update of (x_t, phi) at diffusion time t; returns (x_t', phi', info)."""
    mcfg = mcfg or MpmConfig()
    if eps_hat is None:
        eps_hat = df.guided_eps(p, x_t, t, c, s)
    g_x = np.zeros_like(x_t)
    g_phi = np.zeros_like(phi.values)
    perf, skipped = task.sentinel, False
    try:
        design = rb.robotize(x_t, t, p, c, s, schedule, task.robotize_config(rcfg), eps_hat=eps_hat)
        perf, g_local, g_phi = rollout_grad(design, phi, task, mcfg)
        g_x = rb.design_grad_to_xt(design, g_local, t, schedule)
    except (rb.DegenerateGeometry, SimulationError) as e:
        log.info("co-design step at t=%d skipped: %s", t, e)
        skipped = True
    gn, en = float(np.linalg.norm(g_x)), float(np.linalg.norm(eps_hat))
    if ccfg.kappa * gn > ccfg.renorm_scale * en and gn > 0:
        g_x = g_x * (ccfg.renorm_scale * en / (ccfg.kappa * gn))
    sig = ccfg.sigma(t, schedule)
    noise = rng.standard_normal(x_t.shape)
    amp = sig if ccfg.noise_form == "ula" else sig ** 2
    x_new = x_t + 0.5 * sig ** 2 * (eps_hat - ccfg.kappa * g_x) + amp * noise
    phi_new = phi.copy()
    if ccfg.gamma:
        phi_new.values = phi.values - ccfg.gamma * g_phi
    return x_new, phi_new, StepInfo(t, float(perf), gn, en, skipped)


def sample_codesign(p, c, s: float, task: Task, ccfg: CodesignConfig, schedule, rng,
                    mcfg: MpmConfig | None = None, rcfg=None, n_points: int = 256, phi0=None):
    """Reverse diffusion with co-design updates at the active times.

    The sampler consumes ``rng`` exactly like plain sampling; co-design noise
    comes from a child stream, so disabling the updates reproduces plain
    sampling bit for bit. Returns (x0, phi, performance, step infos).
    """
    mcfg = mcfg or MpmConfig()
    phi_init = phi0 if phi0 is not None else task.controller(mcfg)
    noise_rng = rng.spawn(1)[0]
    active = set(ccfg.active_times(schedule.T)) if ccfg.K > 0 else set()
    st = {"phi": phi_init.copy()}
    infos = []

    def hook(t, x):
        if t not in active:
            return None
        if ccfg.controller_reset_policy == "reset":
            st["phi"] = phi_init.copy()
        for _ in range(ccfg.K):
            x, st["phi"], info = mcmc_codesign_step(x, t, st["phi"], p, c, s, task, ccfg, schedule, noise_rng,
                                                    mcfg, rcfg)
            infos.append(info)
        return x

    x0 = df.sample(p, c, s, schedule, rng, hook=hook, n_points=n_points)
    ev = evaluate_detail(x0, task, st["phi"], mcfg, rcfg)
    return x0, st["phi"], ev.performance, infos


def compose_embeddings(parts, p, x_t, t: int):
    """Weighted composition of several conditions into one noise estimate."""
    return df.compose_eps(p, x_t, t, parts)


# ------------------------------------------------------------------ baselines


@dataclass
class BaselineResult:
    kind: str
    best: float
    initial: list
    final: list
    histories: list

    def to_dict(self) -> dict:
        return asdict(self)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def baseline_design(task: Task, kind: str, mcfg: MpmConfig, rcfg=None):
    """Full-workspace lattice design plus the map from particles to logits."""
    rc = task.robotize_config(rcfg)
    W, H = rc.workspace
    sp = 0.5 * mcfg.dx
    pts = lattice(0.0, 0.0, W, H, sp)
    act = rb.place_actuators(pts, rc.k, rc.axes, rc.seed)
    fib = np.tile(np.asarray(rc.fiber, dtype=np.float64), (rc.k, 1))
    fib = fib / np.linalg.norm(rc.fiber) if rc.k else np.zeros((0, 2))
    design = rb.RobotDesign(solid_points=pts, actuator_id=act, fibers=fib, youngs_modulus=rc.youngs_modulus,
                            poisson_ratio=rc.poisson_ratio, particle_volume=sp * sp, mass_density=rc.mass_density,
                            workspace=(W, H), scale=1.0, anchor=np.zeros(2), shape_points=pts.copy(),
                            x_hat0=pts.copy(), report=None)
    if kind == "particle":
        owner = np.arange(len(pts))
    elif kind == "voxel":
        cell = mcfg.dx
        ij = np.floor(pts / cell).astype(np.int64)
        _, owner = np.unique(ij[:, 0] * 100003 + ij[:, 1], return_inverse=True)
    else:
        raise ValueError(f"unknown baseline kind {kind!r}")
    return design, owner.ravel()


def _soft_eval(task, design, owner, z, phi, mcfg):
    """Task loss and gradients for soft occupancy ``sigmoid(z)`` scaling particle masses."""
    scene = task.build_scene(design, mcfg)
    occ = _sigmoid(z)[owner]
    n = design.n
    scene.mass[:n] = scene.mass[:n] * occ
    loss, trace, g = simulate_grad(scene, phi, mcfg, task.loss_and_grad)
    perf = float(task.metric(trace))
    dm = g.mass[:n] * design.mass_density * design.particle_volume * occ * (1 - occ)
    gz = np.bincount(owner, dm, minlength=z.size)
    return perf, gz, g.controller


def baseline_run(task: Task, kind: str, iters: int, seed: int, mcfg=None, rcfg=None, lr: float = 0.01,
                 gamma: float | None = None):
    """Gradient co-optimization of occupancy logits and the controller from one random start.

    Returns (initial performance, best performance seen, history).
    """
    mcfg = mcfg or MpmConfig()
    gamma = CodesignConfig.for_task(task.name).gamma if gamma is None else gamma
    design, owner = baseline_design(task, kind, mcfg, rcfg)
    rng = np.random.default_rng(seed)
    z = rng.standard_normal(owner.max() + 1)
    phi = task.controller(mcfg)
    adam = dn.AdamState.zeros(z.size)
    hist = []
    for it in range(iters + 1):
        try:
            perf, gz, gphi = _soft_eval(task, design, owner, z, phi, mcfg)
        except SimulationError as e:
            log.warning("baseline rollout failed: %s", e)
            perf, gz, gphi = task.sentinel, None, None
        hist.append(perf)
        if it == iters or gz is None:
            break
        z, adam = dn.adam_update(z, gz, adam, lr)
        if gamma:
            phi = replace(phi, values=phi.values - gamma * gphi)
    return hist[0], max(hist), hist


class _BaselineJob:
    def __init__(self, task_name, kind, iters, mcfg, rcfg, lr):
        self.args = (task_name, kind, iters, mcfg, rcfg, lr)

    def __call__(self, seed):
        name, kind, iters, mcfg, rcfg, lr = self.args
        return baseline_run(build_task(name), kind, iters, seed, mcfg, rcfg, lr)


def _baseline(kind, task, iters, seeds, mcfg=None, rcfg=None, lr=0.01, jobs=1) -> BaselineResult:
    res = pmap(_BaselineJob(task.name, kind, iters, mcfg or MpmConfig(), rcfg, lr), list(seeds), jobs)
    return BaselineResult(kind, max(r[1] for r in res), [r[0] for r in res], [r[1] for r in res],
                          [r[2] for r in res])


def baseline_voxel(task: Task, iters: int, seeds, **kw) -> BaselineResult:
    """Per-voxel occupancy logits on the workspace grid; best over the given restarts."""
    return _baseline("voxel", task, iters, seeds, **kw)


def baseline_particle(task: Task, iters: int, seeds, **kw) -> BaselineResult:
    """Per-particle existence logits on a fixed lattice; best over the given restarts."""
    return _baseline("particle", task, iters, seeds, **kw)
