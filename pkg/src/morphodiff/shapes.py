"""Point-set primitives, the procedural 2D shape corpus, and geometric metrics.

Shapes are built as shapely polygons, their boundary is sampled at even
arc-length spacing, normalized (centroid at the origin, max extent 1.6) and
jittered.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
import shapely
from shapely import affinity
from shapely.geometry import Point, Polygon, box as shp_box
from shapely.ops import unary_union

FAMILIES = ("disc", "box", "capsule", "L-shape", "n-legged-blob", "star", "ring-segment")

# conditioning classes: legged blobs are split by leg count
CLASS_NAMES = (
    "disc", "box", "capsule", "L-shape",
    "blob-2", "blob-3", "blob-4", "blob-5",
    "star", "ring-segment",
)

DEFAULT_N = 256
DEFAULT_JITTER = 0.005
MAX_EXTENT = 1.6


@dataclass
class ShapeSpec:
    family: str
    params: dict = field(default_factory=dict)
    seed: int = 0

    def to_dict(self) -> dict:
        return {"family": self.family, "params": dict(self.params), "seed": int(self.seed)}

    @classmethod
    def from_dict(cls, d: dict) -> "ShapeSpec":
        return cls(d["family"], dict(d.get("params", {})), int(d.get("seed", 0)))

    @property
    def class_name(self) -> str:
        if self.family == "n-legged-blob":
            return f"blob-{int(self.params['n'])}"
        return self.family

    @property
    def class_id(self) -> int:
        return CLASS_NAMES.index(self.class_name)


def _capsule(length, radius):
    half = max(length / 2 - radius, 0.0)
    core = shp_box(-half, -radius, half, radius) if half > 0 else Point(0, 0).buffer(radius, 64)
    ends = [Point(-half, 0).buffer(radius, 64), Point(half, 0).buffer(radius, 64)]
    return unary_union([core, *ends])


def _l_shape(w, h, t, mirror):
    g = unary_union([shp_box(-w / 2, -h / 2, -w / 2 + t, h / 2), shp_box(-w / 2, -h / 2, w / 2, -h / 2 + t)])
    return affinity.scale(g, xfact=-1.0, origin=(0, 0)) if mirror else g


def _blob(n, body_w, body_h, leg_len, leg_w):
    body = affinity.scale(Point(0, 0).buffer(1.0, 64), body_w / 2, body_h / 2, origin=(0, 0))
    legs = []
    span = body_w * 0.8
    for i in range(n):
        cx = -span / 2 + span * (i + 0.5) / n
        # legs start inside the body so the union stays connected
        legs.append(shp_box(cx - leg_w / 2, -body_h / 2 - leg_len, cx + leg_w / 2, -body_h / 4))
    return unary_union([body, *legs])


def _star(points, r_out, ratio, rot):
    k = np.arange(2 * points)
    ang = rot + np.pi * k / points
    r = np.where(k % 2 == 0, r_out, r_out * ratio)
    return Polygon(np.stack([r * np.cos(ang), r * np.sin(ang)], 1))


def _ring_segment(r_out, r_in, span, rot):
    a = np.linspace(-span / 2, span / 2, 96) + rot
    outer = np.stack([r_out * np.cos(a), r_out * np.sin(a)], 1)
    inner = np.stack([r_in * np.cos(a[::-1]), r_in * np.sin(a[::-1])], 1)
    return Polygon(np.concatenate([outer, inner]))


def region(spec: ShapeSpec):
    """Return the shapely polygon for a spec."""
    p = spec.params
    f = spec.family
    if f == "disc":
        g = Point(0, 0).buffer(p["r"], 128)
    elif f == "box":
        g = shp_box(-p["w"] / 2, -p["h"] / 2, p["w"] / 2, p["h"] / 2)
    elif f == "capsule":
        g = _capsule(p["length"], p["radius"])
    elif f == "L-shape":
        g = _l_shape(p["w"], p["h"], p["t"], bool(p.get("mirror", False)))
    elif f == "n-legged-blob":
        g = _blob(int(p["n"]), p["body_w"], p["body_h"], p["leg_len"], p["leg_w"])
    elif f == "star":
        g = _star(int(p["points"]), p["r_out"], p["ratio"], p["rot"])
    elif f == "ring-segment":
        g = _ring_segment(p["r_out"], p["r_in"], p["span"], p["rot"])
    else:
        raise ValueError(f"unknown shape family {f!r}")
    if g.geom_type != "Polygon":
        # keep the largest piece of a multipolygon
        g = max(g.geoms, key=lambda q: q.area)
    return g


def random_spec(rng: np.random.Generator, family: str | None = None, seed: int = 0) -> ShapeSpec:
    """Draw a spec with family-specific parameter ranges."""
    if family is None:
        family = FAMILIES[int(rng.integers(len(FAMILIES)))]
    u = rng.uniform
    if family == "disc":
        params = {"r": u(0.3, 0.8)}
    elif family == "box":
        params = {"w": u(0.3, 1.0), "h": u(0.2, 1.0)}
    elif family == "capsule":
        r = u(0.12, 0.3)
        params = {"length": u(3 * r, 1.0), "radius": r}
    elif family == "L-shape":
        w, h = u(0.5, 1.0), u(0.5, 1.0)
        params = {"w": w, "h": h, "t": u(0.2, 0.4) * min(w, h), "mirror": bool(rng.integers(2))}
    elif family == "n-legged-blob":
        bw = u(0.6, 1.0)
        n = int(rng.integers(2, 6))
        params = {
            "n": n,
            "body_w": bw,
            "body_h": u(0.3, 0.5),
            "leg_len": u(0.15, 0.35),
            "leg_w": u(0.35, 0.6) * 0.8 * bw / n,
        }
    elif family == "star":
        params = {"points": int(rng.integers(5, 8)), "r_out": u(0.5, 0.9), "ratio": u(0.45, 0.7), "rot": u(0, 2 * np.pi)}
    elif family == "ring-segment":
        ro = u(0.5, 0.9)
        params = {"r_out": ro, "r_in": ro * u(0.45, 0.7), "span": u(0.6 * np.pi, 1.4 * np.pi), "rot": np.pi / 2}
    else:
        raise ValueError(f"unknown shape family {family!r}")
    return ShapeSpec(family, params, seed)


def sample_surface(spec: ShapeSpec, n: int = DEFAULT_N, jitter: float = DEFAULT_JITTER) -> np.ndarray:
    """Sample ``n`` points evenly along the boundary of ``spec``'s region.

    The clean points are centered on their centroid and scaled to a max extent
    of 1.6, then a zero-mean Gaussian jitter (norm-truncated at 2.5 sigma) is
    added, so the centroid stays at the origin.
    """
    if n < 8:
        raise ValueError("need at least 8 surface points")
    g = region(spec)
    if not g.is_valid or g.area <= 1e-9:
        raise ValueError(f"degenerate region for {spec.family}")
    rng = np.random.default_rng(np.random.SeedSequence([int(spec.seed), 0x5EED]))
    ring = g.exterior
    length = ring.length
    d = (rng.uniform() + np.arange(n)) * (length / n)
    pts = shapely.get_coordinates(shapely.line_interpolate_point(ring, d))
    pts = pts - pts.mean(0)
    ext = (pts.max(0) - pts.min(0)).max()
    pts = pts * (MAX_EXTENT / ext)
    lim = np.abs(pts).max()
    if lim > 0.98:
        pts *= 0.98 / lim
    if jitter > 0:
        j = rng.normal(0.0, jitter, size=pts.shape)
        nrm = np.linalg.norm(j, axis=1, keepdims=True)
        j *= np.minimum(1.0, 2.5 * jitter / np.maximum(nrm, 1e-300))
        pts = pts + (j - j.mean(0))
    pts = pts - pts.mean(0)
    return pts


def generate_corpus(count: int, seed: int = 0, n: int = DEFAULT_N, jitter: float = DEFAULT_JITTER):
    """Deterministic corpus of ``count`` shapes; returns (specs, points[count, n, 2])."""
    if count < 1:
        raise ValueError("count must be >= 1")
    root = np.random.SeedSequence(seed)
    specs, clouds = [], []
    for i, child in enumerate(root.spawn(count)):
        rng = np.random.default_rng(child)
        fam = FAMILIES[i % len(FAMILIES)]
        spec = random_spec(rng, fam, seed=int(rng.integers(2**31)))
        specs.append(spec)
        clouds.append(sample_surface(spec, n, jitter))
    # shuffle family order deterministically so prefixes stay balanced
    order = np.random.default_rng(root.entropy).permutation(count) if count > 1 else np.arange(1)
    specs = [specs[i] for i in order]
    return specs, np.stack([clouds[i] for i in order])


def save_corpus(directory: str, specs, clouds) -> list[str]:
    os.makedirs(directory, exist_ok=True)
    names = []
    for i, (s, p) in enumerate(zip(specs, clouds)):
        name = f"shape_{i:05d}.json"
        with open(os.path.join(directory, name), "w") as fh:
            json.dump({"spec": s.to_dict(), "points": np.asarray(p).tolist()}, fh)
        names.append(name)
    return names


def load_corpus(directory: str):
    names = sorted(f for f in os.listdir(directory) if f.endswith(".json"))
    if not names:
        raise FileNotFoundError(f"no shapes in {directory}")
    specs, clouds = [], []
    for name in names:
        with open(os.path.join(directory, name)) as fh:
            d = json.load(fh)
        specs.append(ShapeSpec.from_dict(d["spec"]))
        clouds.append(np.asarray(d["points"], dtype=np.float64))
    return specs, np.stack(clouds)


def _sqdist(a, b):
    d = (a * a).sum(-1)[..., :, None] + (b * b).sum(-1)[..., None, :] - 2.0 * a @ np.swapaxes(b, -1, -2)
    return np.maximum(d, 0.0)


def chamfer(a, b) -> float:
    """Symmetric Chamfer distance: mean NN distance a->b plus b->a."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 2)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 2)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("chamfer of an empty point set")
    d = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(-1))
    return float(d.min(1).mean() + d.min(0).mean())


def chamfer_batch(a, bs) -> np.ndarray:
    """Chamfer between one set ``a`` (N,2) and each of ``bs`` (K,M,2)."""
    d = np.sqrt(_sqdist(np.asarray(a)[None], np.asarray(bs)))
    return d.min(2).mean(1) + d.min(1).mean(1)


def _descriptor(clouds, res=24):
    # blurred occupancy image; L2 between descriptors pre-ranks chamfer neighbours
    clouds = np.asarray(clouds)
    idx = np.clip(((clouds + 1.0) * (res / 2)).astype(int), 0, res - 1)
    img = np.zeros((len(clouds), res, res))
    for k in range(len(clouds)):
        np.add.at(img[k], (idx[k, :, 0], idx[k, :, 1]), 1.0)
    from scipy.ndimage import gaussian_filter

    img = gaussian_filter(img, sigma=(0, 1.0, 1.0))
    return img.reshape(len(clouds), -1) / clouds.shape[1]


def nearest_chamfer(queries, corpus, candidates: int = 64, exclude_self: bool = False) -> np.ndarray:
    """Chamfer from each query to its nearest corpus shape.

    Candidates are pre-ranked by a blurred-occupancy descriptor and the exact
    Chamfer distance is taken over the best ``candidates`` of them. With
    ``exclude_self`` the queries must be the corpus itself.
    """
    queries = np.asarray(queries)
    corpus = np.asarray(corpus)
    dq, dc = _descriptor(queries), _descriptor(corpus)
    d2 = (dq * dq).sum(1)[:, None] + (dc * dc).sum(1)[None] - 2 * dq @ dc.T
    if exclude_self:
        np.fill_diagonal(d2, np.inf)
    k = min(candidates, corpus.shape[0] - (1 if exclude_self else 0))
    out = np.empty(len(queries))
    for i in range(len(queries)):
        cand = np.argpartition(d2[i], k - 1)[:k]
        out[i] = chamfer_batch(queries[i], corpus[cand]).min()
    return out
