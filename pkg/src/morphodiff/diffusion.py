"""DDPM noising, training objective, guided ancestral sampling."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import denoiser as dn

log = logging.getLogger(__name__)


@dataclass
class NoiseSchedule:
    """Linear beta schedule. Arrays are indexed by ``t - 1`` for ``t = 1..T``."""

    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def __post_init__(self):
        self.beta = np.linspace(self.beta_start, self.beta_end, self.T)
        self.alpha = 1.0 - self.beta
        self.alpha_bar = np.cumprod(self.alpha)

    def b(self, t: int) -> float:
        return float(self.beta[t - 1])

    def a(self, t: int) -> float:
        return float(self.alpha[t - 1])

    def ab(self, t: int) -> float:
        """alpha-bar with the convention ab(0) = 1."""
        return 1.0 if t == 0 else float(self.alpha_bar[t - 1])

    def to_dict(self) -> dict:
        return {"T": self.T, "beta_start": self.beta_start, "beta_end": self.beta_end}


def _check_t(t, T):
    if not 1 <= t <= T:
        raise ValueError(f"diffusion step {t} outside [1, {T}]")


def q_sample(x0, t: int, eps, schedule: NoiseSchedule):
    _check_t(t, schedule.T)
    ab = schedule.ab(t)
    return np.sqrt(ab) * np.asarray(x0) + np.sqrt(1.0 - ab) * np.asarray(eps)


def predict_x0(x_t, t: int, eps_hat, schedule: NoiseSchedule):
    _check_t(t, schedule.T)
    ab = schedule.ab(t)
    return (np.asarray(x_t) - np.sqrt(1.0 - ab) * np.asarray(eps_hat)) / np.sqrt(ab)


def cfg_eps(eps_null, eps_cond, s: float):
    eps_null = np.asarray(eps_null)
    eps_cond = np.asarray(eps_cond)
    if eps_null.shape != eps_cond.shape:
        raise ValueError("guidance inputs differ in shape")
    return eps_null + s * (eps_cond - eps_null)


def ddpm_step(x_t, t: int, eps_hat, schedule: NoiseSchedule, rng=None, z=None):
    """Ancestral step x_t -> x_{t-1}. At t = 1 the posterior mean is returned.

    Noise comes from ``z`` if given, otherwise from ``rng``.
    """
    _check_t(t, schedule.T)
    a, b, ab = schedule.a(t), schedule.b(t), schedule.ab(t)
    mean = (np.asarray(x_t) - (b / np.sqrt(1.0 - ab)) * np.asarray(eps_hat)) / np.sqrt(a)
    if t == 1:
        return mean
    var = (1.0 - schedule.ab(t - 1)) / (1.0 - ab) * b
    if z is None:
        z = rng.standard_normal(mean.shape)
    return mean + np.sqrt(var) * z


def guided_eps(p, x_t, t: int, c, s: float):
    """Classifier-free guided noise estimate for one state or a batch.

    ``c`` is an Embedding or an (E,) / (B, E) array. When the guidance scale is
    zero or ``c`` is null only the null branch is evaluated; the result is the
    same as the full formula.
    """
    vec = c.vec if isinstance(c, dn.Embedding) else np.asarray(c, dtype=np.float64)
    null = np.zeros(p.E)
    if s == 0 or (isinstance(c, dn.Embedding) and c.is_null):
        return dn.forward(p, x_t, t, null)
    x = np.asarray(x_t)
    if x.ndim == 2:
        both = dn.forward(p, np.stack([x, x]), t, np.stack([null, vec]))
        return cfg_eps(both[0], both[1], s)
    B = x.shape[0]
    vec = np.broadcast_to(vec, (B, p.E))
    both = dn.forward(p, np.concatenate([x, x]), t, np.concatenate([np.zeros((B, p.E)), vec]))
    return cfg_eps(both[:B], both[B:], s)


def compose_eps(p, x_t, t: int, parts):
    """Weighted guidance over several conditions: eps_null + sum_i w_i (eps_i - eps_null)."""
    if not parts:
        raise ValueError("need at least one (embedding, weight) part")
    null = np.zeros(p.E)
    eps_null = dn.forward(p, x_t, t, null)
    out = eps_null.copy()
    for c, w in parts:
        vec = c.vec if isinstance(c, dn.Embedding) else np.asarray(c, dtype=np.float64)
        out = out + w * (dn.forward(p, x_t, t, vec) - eps_null)
    return out


def sample(p, c, s: float, schedule: NoiseSchedule, rng, hook=None, n_points: int = 256,
           snapshot_every: int | None = None, snapshots: list | None = None):
    """One reverse trajectory x_T ~ N(0, I) -> x_0.

    After each step the state at the new diffusion time ``t`` is passed to
    ``hook(t, x)``; a non-None return value replaces the state.
    """
    x = rng.standard_normal((n_points, 2))
    for t in range(schedule.T, 0, -1):
        eps = guided_eps(p, x, t, c, s)
        x = ddpm_step(x, t, eps, schedule, rng)
        if hook is not None:
            r = hook(t - 1, x)
            if r is not None:
                x = r
        if snapshot_every and snapshots is not None and (t - 1) % snapshot_every == 0:
            snapshots.append((t - 1, x.copy()))
    return x


def sample_batch(p, c, s: float, schedule: NoiseSchedule, rngs, n_points: int = 256):
    """Many independent trajectories evaluated together; one generator per trajectory."""
    B = len(rngs)
    x = np.stack([r.standard_normal((n_points, 2)) for r in rngs])
    for t in range(schedule.T, 0, -1):
        eps = guided_eps(p, x, t, c, s)
        if t == 1:
            x = ddpm_step(x, t, eps, schedule)
        else:
            z = np.stack([r.standard_normal((n_points, 2)) for r in rngs])
            x = ddpm_step(x, t, eps, schedule, z=z)
    return x


# ------------------------------------------------------------------ training


def train_step(p, x0, cond, schedule: NoiseSchedule, rng, drop_prob: float = 0.1):
    """Noise-prediction loss and gradients on one batch.

    ``cond`` is either an int array of class ids (gradients flow into the class
    table) or a (B, E) array of embedding vectors. Returns (loss, grads dict,
    grad wrt the conditioning vectors).
    """
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.ndim == 2:
        x0 = x0[None]
    B = x0.shape[0]
    if B == 0:
        raise ValueError("empty batch")
    cond = np.asarray(cond)
    class_ids = None
    if cond.ndim == 1 and np.issubdtype(cond.dtype, np.integer):
        class_ids = cond
        c = p.arrays["class_embed"][cond]
    else:
        c = np.broadcast_to(cond.astype(np.float64), (B, p.E)).copy()
    t = rng.integers(1, schedule.T + 1, B)
    eps = rng.standard_normal(x0.shape)
    keep = rng.random(B) >= drop_prob
    c = c * keep[:, None]
    sab = np.sqrt(schedule.alpha_bar[t - 1])[:, None, None]
    x_t = sab * x0 + np.sqrt(1.0 - sab ** 2) * eps
    pred, cache = dn.forward_cached(p, x_t, t, c)
    diff = pred - eps
    loss = float(np.mean(diff ** 2))
    up = 2.0 * diff / diff.size
    grads, _, g_c = dn.backward_cached(p, cache, up)
    g_c = g_c * keep[:, None]
    if class_ids is not None:
        ge = np.zeros_like(p.arrays["class_embed"])
        np.add.at(ge, class_ids, g_c)
        grads["class_embed"] = ge
    return loss, grads, g_c


def train(p, clouds, labels, steps: int, batch_size: int = 32, lr: float = 1e-3, seed: int = 0,
          schedule: NoiseSchedule | None = None, state=None, callback=None, log_every: int = 500,
          lr_end: float | None = None):
    """Adam training on (clouds, class labels). Returns (params, optimizer state, loss history).

    With ``lr_end`` the learning rate decays linearly from ``lr`` to ``lr_end``.
    """
    schedule = schedule or NoiseSchedule()
    rng = np.random.default_rng(seed)
    clouds = np.asarray(clouds, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    hist = []
    for i in range(steps):
        idx = rng.integers(0, clouds.shape[0], batch_size)
        loss, grads, _ = train_step(p, clouds[idx], labels[idx], schedule, rng)
        cur = lr if lr_end is None else lr + (lr_end - lr) * i / max(steps - 1, 1)
        p, state = dn.adam_step(p, grads, state, cur)
        hist.append(loss)
        if callback is not None:
            callback(i, loss, p)
        if log_every and (i + 1) % log_every == 0:
            log.info("step %d loss %.4f", i + 1, float(np.mean(hist[-log_every:])))
    return p, state, hist
