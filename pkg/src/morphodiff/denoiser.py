"""Permutation-equivariant point-set noise predictor with a hand-written backward pass.

Architecture (H hidden units, E embedding width)::

    g      = time_embed(t) W_t + c W_c + b_g          conditioning vector
    block  : u = silu(h W_in + b_in)
             ctx = mean_points(u) W_ctx + b_ctx
             h = (1 + silu(g) W_sc + b_sc) * (u + ctx) + silu(g) W_sh + b_sh
    decode : out = silu([h, ctx] W_d1 + b_d1) W_d2 + b_d2

The last layer starts at zero so an untrained model predicts zero noise.
Everything is float64. Inputs are batched: x (B, N, 2), t (B,), c (B, E).
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

MAGIC = b"MFG1"
FORMAT_VERSION = 1
_FLAG_OPTIM = 1
_HEADER = "<IIQIII"  # version, E, count, H, classes, flags
_FROZEN = ("freqs",)


def silu(x):
    return x * expit(x)


def _silu_sig(x):
    s = expit(x)
    return x * s, s


def _dsilu(x, s=None):
    if s is None:
        s = expit(x)
    return s * (1.0 + x * (1.0 - s))


def time_embed(t, dim: int = 64, freqs=None) -> np.ndarray:
    """Interleaved sinusoidal features ``[sin(t w_0), cos(t w_0), sin(t w_1), ...]``, ``w_i = 10000^(-2i/dim)``."""
    t = np.asarray(t, dtype=np.float64)
    if freqs is None:
        freqs = default_freqs(dim)
    arg = t[..., None] * freqs
    out = np.empty(t.shape + (2 * freqs.shape[0],))
    out[..., 0::2] = np.sin(arg)
    out[..., 1::2] = np.cos(arg)
    return out


def default_freqs(dim: int) -> np.ndarray:
    if dim % 2:
        raise ValueError("embedding width must be even")
    return 10000.0 ** (-2.0 * np.arange(dim // 2) / dim)


@dataclass
class Embedding:
    vec: np.ndarray
    is_null: bool = False

    @classmethod
    def null(cls, dim: int = 64) -> "Embedding":
        return cls(np.zeros(dim), True)

    def to_dict(self) -> dict:
        return {"vec": self.vec.tolist(), "is_null": self.is_null}

    @classmethod
    def from_dict(cls, d) -> "Embedding":
        return cls(np.asarray(d["vec"], dtype=np.float64), bool(d.get("is_null", False)))


def _layout(E: int, H: int, n_classes: int):
    return [
        ("freqs", (E // 2,)),
        ("W_t", (E, E)), ("W_c", (E, E)), ("b_g", (E,)),
        ("W_in1", (2, H)), ("b_in1", (H,)), ("W_ctx1", (H, H)), ("b_ctx1", (H,)),
        ("W_sc1", (E, H)), ("b_sc1", (H,)), ("W_sh1", (E, H)), ("b_sh1", (H,)),
        ("W_in2", (H, H)), ("b_in2", (H,)), ("W_ctx2", (H, H)), ("b_ctx2", (H,)),
        ("W_sc2", (E, H)), ("b_sc2", (H,)), ("W_sh2", (E, H)), ("b_sh2", (H,)),
        ("W_d1", (2 * H, H)), ("b_d1", (H,)), ("W_d2", (H, 2)), ("b_d2", (2,)),
        ("class_embed", (n_classes, E)),
    ]


@dataclass
class DenoiserParams:
    E: int
    H: int
    n_classes: int
    arrays: dict = field(default_factory=dict)

    @classmethod
    def init(cls, seed: int = 0, E: int = 64, H: int = 64, n_classes: int = 10) -> "DenoiserParams":
        rng = np.random.default_rng(seed)
        p = cls(E, H, n_classes)
        for name, shape in _layout(E, H, n_classes):
            if name == "freqs":
                a = default_freqs(E)
            elif name.startswith("b_") or name in ("W_d2",):
                a = np.zeros(shape)
            elif name == "class_embed":
                # small so that a few optimizer steps on a free embedding span the class spread
                a = rng.normal(0.0, 0.1, shape)
            elif name.startswith(("W_sc", "W_sh")):
                a = rng.normal(0.0, 0.5 / np.sqrt(shape[0]), shape)
            else:
                a = rng.normal(0.0, 1.0 / np.sqrt(shape[0]), shape)
            p.arrays[name] = a
        return p

    @property
    def names(self):
        return [n for n, _ in _layout(self.E, self.H, self.n_classes)]

    @property
    def count(self) -> int:
        return sum(a.size for a in self.arrays.values())

    def flat(self) -> np.ndarray:
        return np.concatenate([self.arrays[n].ravel() for n in self.names])

    def set_flat(self, v: np.ndarray) -> None:
        i = 0
        for n, shape in _layout(self.E, self.H, self.n_classes):
            k = int(np.prod(shape))
            self.arrays[n] = np.array(v[i:i + k]).reshape(shape)
            i += k

    def copy(self) -> "DenoiserParams":
        return DenoiserParams(self.E, self.H, self.n_classes, {k: v.copy() for k, v in self.arrays.items()})

    def checksum(self) -> str:
        return hashlib.sha256(self.flat().astype("<f8").tobytes()).hexdigest()

    def embedding(self, class_id: int) -> Embedding:
        return Embedding(self.arrays["class_embed"][class_id].copy())

    def __getitem__(self, k):
        return self.arrays[k]


# ------------------------------------------------------------------ forward / backward


def _as_batch(x, t, c, E):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.ndim != 3 or x.shape[2] != 2:
        raise ValueError(f"expected points of shape (N, 2) or (B, N, 2), got {x.shape}")
    B = x.shape[0]
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (B,))
    c = np.asarray(c.vec if isinstance(c, Embedding) else c, dtype=np.float64)
    if c.ndim == 1:
        c = np.broadcast_to(c, (B, c.shape[0]))
    if c.shape != (B, E):
        raise ValueError(f"embedding must have width {E}, got {c.shape}")
    return x, t, c, single


def _pool(u):
    # sorting first makes the summation order independent of point order
    return np.sort(u, axis=1).sum(axis=1) / u.shape[1]


def _rowmm(a, W):
    # stacked (1, n) products round the same whatever the batch size, unlike one (B, n) gemm
    return (a[:, None, :] @ W)[:, 0]


def _forward(p: DenoiserParams, x, t, c):
    A = p.arrays
    temb = time_embed(t, p.E, A["freqs"])
    g = _rowmm(temb, A["W_t"]) + _rowmm(c, A["W_c"]) + A["b_g"]
    sg = silu(g)
    cache = {"x": x, "temb": temb, "c": c, "g": g, "sg": sg}
    h = x
    for k in ("1", "2"):
        a = h @ A["W_in" + k] + A["b_in" + k]
        u, sig = _silu_sig(a)
        pooled = _pool(u)
        ctx = _rowmm(pooled, A["W_ctx" + k]) + A["b_ctx" + k]
        sc = _rowmm(sg, A["W_sc" + k]) + A["b_sc" + k]
        sh = _rowmm(sg, A["W_sh" + k]) + A["b_sh" + k]
        z = u + ctx[:, None, :]
        cache[k] = (h, a, sig, pooled, ctx, sc, z)
        h = (1.0 + sc)[:, None, :] * z + sh[:, None, :]
    ctx2 = cache["2"][4]
    cat = np.concatenate([h, np.broadcast_to(ctx2[:, None, :], h.shape)], axis=2)
    d = cat @ A["W_d1"] + A["b_d1"]
    e, sig = _silu_sig(d)
    out = e @ A["W_d2"] + A["b_d2"]
    cache["dec"] = (cat, d, sig, e)
    return out, cache


def forward(p: DenoiserParams, x_t, t, c) -> np.ndarray:
    """Predicted noise, same shape as ``x_t``."""
    x, t, c, single = _as_batch(x_t, t, c, p.E)
    out, _ = _forward(p, x, t, c)
    return out[0] if single else out


def _sum01(a):
    return a.reshape(-1, a.shape[-1]).sum(0)


def backward(p: DenoiserParams, x_t, t, c, upstream):
    """Gradients of ``<forward(p, x_t, t, c), upstream>``.

    Returns ``(grad_p, grad_x, grad_c)``; ``grad_p`` is a dict keyed like
    ``p.arrays`` (the frequency table and class table get zeros).
    """
    x, t, c, single = _as_batch(x_t, t, c, p.E)
    up = np.asarray(upstream, dtype=np.float64)
    if single:
        up = up[None]
    if up.shape != x.shape:
        raise ValueError("upstream must match the output shape")
    _, cache = _forward(p, x, t, c)
    G, g_x, g_c = backward_cached(p, cache, up)
    if single:
        return G, g_x[0], g_c[0]
    return G, g_x, g_c


def forward_cached(p: DenoiserParams, x_t, t, c):
    """Batched forward that also returns the cache consumed by ``backward_cached``."""
    x, t, c, _ = _as_batch(x_t, t, c, p.E)
    return _forward(p, x, t, c)


def backward_cached(p: DenoiserParams, cache, up):
    A = p.arrays
    x = cache["x"]
    G = {n: np.zeros_like(a) for n, a in A.items()}
    N = x.shape[1]

    cat, d, dsig, e = cache["dec"]
    G["W_d2"] = e.reshape(-1, e.shape[-1]).T @ up.reshape(-1, 2)
    G["b_d2"] = _sum01(up)
    g_d = (up @ A["W_d2"].T) * _dsilu(d, dsig)
    G["W_d1"] = cat.reshape(-1, cat.shape[-1]).T @ g_d.reshape(-1, g_d.shape[-1])
    G["b_d1"] = _sum01(g_d)
    g_cat = g_d @ A["W_d1"].T
    H = p.H
    g_h = g_cat[:, :, :H]
    g_ctx_extra = g_cat[:, :, H:].sum(1)
    g_sg = np.zeros_like(cache["sg"])
    sg = cache["sg"]
    for k in ("2", "1"):
        h_in, a, sig, pooled, ctx, sc, z = cache[k]
        g_sc = (g_h * z).sum(1)
        g_sh = g_h.sum(1)
        g_z = g_h * (1.0 + sc)[:, None, :]
        g_ctx = g_z.sum(1)
        if k == "2":
            g_ctx = g_ctx + g_ctx_extra
        G["W_sc" + k] = sg.T @ g_sc
        G["b_sc" + k] = g_sc.sum(0)
        G["W_sh" + k] = sg.T @ g_sh
        G["b_sh" + k] = g_sh.sum(0)
        g_sg += g_sc @ A["W_sc" + k].T + g_sh @ A["W_sh" + k].T
        G["W_ctx" + k] = pooled.T @ g_ctx
        G["b_ctx" + k] = g_ctx.sum(0)
        g_pool = g_ctx @ A["W_ctx" + k].T
        g_u = g_z + g_pool[:, None, :] / N
        g_a = g_u * _dsilu(a, sig)
        G["W_in" + k] = h_in.reshape(-1, h_in.shape[-1]).T @ g_a.reshape(-1, g_a.shape[-1])
        G["b_in" + k] = _sum01(g_a)
        g_h = g_a @ A["W_in" + k].T
    g_x = g_h
    g_g = g_sg * _dsilu(cache["g"])
    G["W_t"] = cache["temb"].T @ g_g
    G["W_c"] = cache["c"].T @ g_g
    G["b_g"] = g_g.sum(0)
    g_c = g_g @ A["W_c"].T
    return G, g_x, g_c


# ------------------------------------------------------------------ optimizer


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)


def adam_update(w: np.ndarray, g: np.ndarray, state: AdamState, lr: float,
                b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
    """One Adam step on a flat vector; returns (new w, new state)."""
    step = state.step + 1
    m = b1 * state.m + (1 - b1) * g
    v = b2 * state.v + (1 - b2) * g * g
    mhat = m / (1 - b1 ** step)
    vhat = v / (1 - b2 ** step)
    return w - lr * mhat / (np.sqrt(vhat) + eps), AdamState(m, v, step)


def flatten_grads(p: DenoiserParams, grads: dict) -> np.ndarray:
    return np.concatenate([np.asarray(grads[n]).ravel() for n in p.names])


def adam_step(p: DenoiserParams, grads: dict, state: AdamState | None, lr: float):
    """Adam on all parameters except the frozen frequency table."""
    state = state or AdamState.zeros(p.count)
    g = flatten_grads(p, grads)
    i = 0
    for n in p.names:
        k = p.arrays[n].size
        if n in _FROZEN:
            g[i:i + k] = 0.0
        i += k
    w, state = adam_update(p.flat(), g, state, lr)
    out = p.copy()
    out.set_flat(w)
    for n in _FROZEN:
        out.arrays[n] = p.arrays[n].copy()
    return out, state


# ------------------------------------------------------------------ checkpoint


def save_checkpoint(path, p: DenoiserParams, state: AdamState | None = None) -> None:
    """Little-endian binary: magic, version u32, E u32, count u64, H u32, classes u32, flags u32, floats."""
    flags = _FLAG_OPTIM if state is not None else 0
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack(_HEADER, FORMAT_VERSION, p.E, p.count, p.H, p.n_classes, flags))
        f.write(p.flat().astype("<f8").tobytes())
        if state is not None:
            f.write(struct.pack("<Q", state.step))
            f.write(state.m.astype("<f8").tobytes())
            f.write(state.v.astype("<f8").tobytes())


def load_checkpoint(path):
    """Returns (DenoiserParams, AdamState or None)."""
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    if len(data) < 4 + struct.calcsize(_HEADER):
        raise ValueError(f"{path}: truncated header")
    version, E, count, H, nc, flags = struct.unpack_from(_HEADER, data, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 4 + struct.calcsize(_HEADER)
    p = DenoiserParams(E, H, nc)
    expect = sum(int(np.prod(s)) for _, s in _layout(E, H, nc))
    if expect != count:
        raise ValueError(f"{path}: parameter count {count} does not match layout {expect}")
    need = off + 8 * count + ((8 + 16 * count) if flags & _FLAG_OPTIM else 0)
    if len(data) != need:
        raise ValueError(f"{path}: expected {need} bytes, found {len(data)}")
    p.set_flat(np.frombuffer(data, "<f8", count, off).astype(np.float64))
    off += 8 * count
    state = None
    if flags & _FLAG_OPTIM:
        (step,) = struct.unpack_from("<Q", data, off)
        off += 8
        m = np.frombuffer(data, "<f8", count, off).astype(np.float64)
        v = np.frombuffer(data, "<f8", count, off + 8 * count).astype(np.float64)
        state = AdamState(m, v, step)
    return p, state
