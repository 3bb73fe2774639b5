"""Command-line experiment runner.

Every command writes into a run directory holding ``config.json`` (the fully
resolved configuration), ``metrics.csv``, the command's artifacts and
``manifest.json`` (sha256 of every produced file). Wall-clock information goes
only to the ``timing.json`` sidecar so re-runs are byte-identical otherwise.
"""
from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import io
import json
import logging
import os
import sys
import time

import numpy as np

from . import codesign as cd
from . import denoiser as dn
from . import diffusion as df
from . import robotize as rb
from . import shapes
from .mpm import MpmConfig, SimulationError
from .mpm.sim import ControllerParams, simulate
from .tasks import TASK_NAMES, build_task

log = logging.getLogger("morphodiff")

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC = 0, 1, 2, 3
COMMANDS = ("gen-corpus", "train", "optimize-embedding", "sample", "codesign", "evaluate", "baseline", "render")
SIDECAR = "timing.json"


class ConfigError(ValueError):
    pass


class MissingArtifact(FileNotFoundError):
    pass


class NumericalFailure(ArithmeticError):
    pass


# ------------------------------------------------------------------ configuration


def default_config() -> dict:
    return {
        "seed": 0,
        "corpus": {"count": 2048, "seed": 0},
        "schedule": df.NoiseSchedule().to_dict(),
        "model": {"E": 64, "H": 64, "n_classes": len(shapes.CLASS_NAMES), "init_seed": 0},
        "train": {"steps": 20000, "batch_size": 32, "lr": 2e-3, "lr_end": 2e-4, "seed": 0, "log_every": 500},
        "task": {"name": "crawling"},
        "mpm": MpmConfig().to_dict(),
        "robotize": rb.RobotizeConfig().to_dict(),
        "embed": cd.EmbedOptimConfig().to_dict(),
        "codesign": cd.CodesignConfig().to_dict(),
        "sample": {"count": 4, "seed": 0, "guidance_scale": 2.0, "class_id": None, "n_points": 256,
                   "snapshot_every": 0, "evaluate": True},
        "baseline": {"kind": "both", "iters": 10, "restarts": 20, "lr": 0.01},
        "render": {"every": 10, "x": "epoch", "y": "buffer_max", "size": 400},
        "paths": {"corpus": None, "checkpoint": None, "embedding": None, "samples": None, "controllers": None,
                  "metrics": None},
        "run": {"name": None},
    }


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _coerce(value, default, key):
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false"):
            return value.lower() == "true"
        raise ConfigError(f"{key}: expected a boolean, got {value!r}")
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or float(value) != int(value):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return int(value)
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(f"{key}: expected a string, got {value!r}")
    if isinstance(default, list) and not isinstance(value, list):
        raise ConfigError(f"{key}: expected a list, got {value!r}")
    return value


def merge_config(base: dict, update: dict, prefix: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in update.items():
        key = f"{prefix}{k}"
        if k not in out:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(out[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"{key} must be a mapping")
            out[k] = merge_config(out[k], v, key + ".")
        else:
            out[k] = _coerce(v, out[k], key)
    return out


def apply_set(cfg: dict, assignment: str) -> dict:
    if "=" not in assignment:
        raise ConfigError(f"--set expects section.key=value, got {assignment!r}")
    path, text = assignment.split("=", 1)
    parts = path.strip().split(".")
    upd = node = {}
    for p in parts[:-1]:
        node[p] = {}
        node = node[p]
    node[parts[-1]] = _parse_value(text)
    return merge_config(cfg, upd)


def task_defaults(cfg: dict, explicit: dict) -> dict:
    """Fill task-dependent defaults for embedding and co-design unless set explicitly."""
    name = cfg["task"]["name"]
    if name not in TASK_NAMES:
        raise ConfigError(f"unknown task {name!r}")
    out = copy.deepcopy(cfg)
    for sec, cls in (("embed", cd.EmbedOptimConfig), ("codesign", cd.CodesignConfig)):
        td = cls.for_task(name).to_dict()
        for k, v in td.items():
            if k not in explicit.get(sec, {}):
                out[sec][k] = v
    return out


def resolve_config(path: str | None, sets: list, overrides: dict | None = None) -> dict:
    cfg = default_config()
    explicit: dict = {}
    if path:
        if not os.path.exists(path):
            raise MissingArtifact(f"config file not found: {path}")
        try:
            with open(path) as fh:
                user = json.load(fh)
        except json.JSONDecodeError as e:
            raise ConfigError(f"invalid JSON in {path}: {e}") from None
        if not isinstance(user, dict):
            raise ConfigError("config root must be a mapping")
        cfg = merge_config(cfg, user)
        explicit = copy.deepcopy(user)
    for s in sets or []:
        cfg = apply_set(cfg, s)
        sec, _, key = s.split("=", 1)[0].partition(".")
        explicit.setdefault(sec, {})
        if isinstance(explicit[sec], dict):
            explicit[sec][key.split(".")[0]] = True
    for k, v in (overrides or {}).items():
        if v is not None:
            cfg = apply_set(cfg, f"{k}={json.dumps(v)}")
    cfg = task_defaults(cfg, explicit)
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    try:
        mpm_config(cfg)
        rb.RobotizeConfig.from_dict(cfg["robotize"])
        cd.EmbedOptimConfig.from_dict(cfg["embed"]).validate()
        cd.CodesignConfig.from_dict(cfg["codesign"]).validate()
        df.NoiseSchedule(**cfg["schedule"])
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None
    tr = cfg["train"]
    if tr["steps"] < 0 or tr["batch_size"] < 1 or tr["lr"] <= 0:
        raise ConfigError("train: steps >= 0, batch_size >= 1 and lr > 0 required")
    if cfg["corpus"]["count"] < 1:
        raise ConfigError("corpus.count must be positive")
    if cfg["sample"]["count"] < 0:
        raise ConfigError("sample.count must be non-negative")
    if cfg["baseline"]["kind"] not in ("voxel", "particle", "both"):
        raise ConfigError("baseline.kind must be voxel, particle or both")
    if cfg["baseline"]["restarts"] < 1 or cfg["baseline"]["iters"] < 0:
        raise ConfigError("baseline: restarts >= 1 and iters >= 0 required")


def mpm_config(cfg) -> MpmConfig:
    return MpmConfig.from_dict(cfg["mpm"])


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


# ------------------------------------------------------------------ run directory


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Run:
    def __init__(self, command: str, cfg: dict, out: str | None = None):
        if out is None:
            root = os.environ.get("MFG_RUN_DIR", "runs")
            name = cfg["run"]["name"] or f"{command}-{config_hash(cfg)[:12]}"
            out = os.path.join(root, name)
        self.dir = out
        self.run_id = f"{command}-{config_hash(cfg)[:12]}"
        self.command = command
        self.cfg = cfg
        os.makedirs(out, exist_ok=True)
        self.files: list[str] = []
        self.t0 = time.time()
        self.write_json("config.json", cfg)

    def path(self, rel: str) -> str:
        p = os.path.join(self.dir, rel)
        os.makedirs(os.path.dirname(p), exist_ok=True)
        return p

    def _track(self, rel):
        if rel not in self.files:
            self.files.append(rel)

    def write_text(self, rel: str, text: str) -> str:
        p = self.path(rel)
        with open(p, "w", newline="") as fh:
            fh.write(text)
        self._track(rel)
        return p

    def write_json(self, rel: str, obj) -> str:
        return self.write_text(rel, json.dumps(obj, sort_keys=True, indent=1) + "\n")

    def write_csv(self, rel: str, rows: list, fields: list | None = None) -> str:
        fields = fields or (list(rows[0].keys()) if rows else ["empty"])
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r.get(k)) for k in fields})
        return self.write_text(rel, buf.getvalue())

    def add_file(self, rel: str) -> None:
        self._track(rel)

    def finish(self, status: int = 0) -> None:
        if "metrics.csv" not in self.files:
            self.write_csv("metrics.csv", [])
        manifest = {"command": self.command,
                    "files": {f: sha256_file(os.path.join(self.dir, f)) for f in sorted(self.files)}}
        with open(os.path.join(self.dir, "manifest.json"), "w") as fh:
            fh.write(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
        side = {"command": self.command, "started": self.t0, "finished": time.time(),
                "elapsed_s": time.time() - self.t0, "status": status}
        with open(os.path.join(self.dir, SIDECAR), "w") as fh:
            json.dump(side, fh, indent=1)


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return "" if v is None else v


# ------------------------------------------------------------------ artifact loading


def _need(path, what):
    if not path:
        raise MissingArtifact(f"no {what} given (set paths.{what})")
    if not os.path.exists(path):
        raise MissingArtifact(f"{what} not found: {path}")
    return path


def load_model(cfg):
    path = _need(cfg["paths"]["checkpoint"], "checkpoint")
    try:
        p, _ = dn.load_checkpoint(path)
    except ValueError as e:
        raise ConfigError(f"bad checkpoint {path}: {e}") from None
    return p


def load_embedding(cfg, p):
    path = cfg["paths"]["embedding"]
    if path:
        _need(path, "embedding")
        with open(path) as fh:
            d = json.load(fh)
        emb = dn.Embedding.from_dict(d.get("embedding", d))
        if emb.vec.shape != (p.E,):
            raise ConfigError(f"embedding dimension {emb.vec.shape} does not match model E={p.E}")
        return emb
    cid = cfg["sample"]["class_id"]
    if cid is not None:
        if not 0 <= cid < p.n_classes:
            raise ConfigError(f"class_id {cid} out of range")
        return p.embedding(cid)
    return dn.Embedding.null(p.E)


def load_samples(path):
    _need(path, "samples")
    if os.path.isdir(path):
        names = sorted(f for f in os.listdir(path) if f.endswith(".json"))
        files = [os.path.join(path, f) for f in names]
    else:
        files = [path]
    if not files:
        raise MissingArtifact(f"no sample files in {path}")
    out = []
    for f in files:
        with open(f) as fh:
            d = json.load(fh)
        pts = d.get("x0", d.get("points"))
        if pts is None:
            raise ConfigError(f"{f} holds no point set")
        out.append((os.path.splitext(os.path.basename(f))[0], np.asarray(pts, dtype=np.float64), d.get("seed")))
    return out


METRIC_FIELDS = ["run_id", "task", "sample_id", "seed", "metric"]


def _row(run, cfg, sample_id, seed, metric) -> dict:
    return {"run_id": run.run_id, "task": cfg["task"]["name"], "sample_id": sample_id, "seed": seed,
            "metric": metric}


def sample_doc(seed, x0) -> dict:
    return {"seed": int(seed), "x0": np.asarray(x0).tolist()}


# ------------------------------------------------------------------ commands


def cmd_gen_corpus(cfg, run: Run, jobs: int):
    c = cfg["corpus"]
    specs, clouds = shapes.generate_corpus(c["count"], c["seed"])
    names = shapes.save_corpus(run.path("corpus"), specs, clouds)
    for n in names:
        run.add_file(f"corpus/{n}")
    counts = np.bincount([s.class_id for s in specs], minlength=len(shapes.CLASS_NAMES))
    run.write_csv("metrics.csv", [{"class_id": i, "class_name": shapes.CLASS_NAMES[i], "count": int(n)}
                                  for i, n in enumerate(counts)])


def cmd_train(cfg, run: Run, jobs: int):
    corpus = _need(cfg["paths"]["corpus"], "corpus")
    try:
        specs, clouds = shapes.load_corpus(corpus)
    except FileNotFoundError as e:
        raise MissingArtifact(str(e)) from None
    m, tr = cfg["model"], cfg["train"]
    p = dn.DenoiserParams.init(m["init_seed"], m["E"], m["H"], m["n_classes"])
    labels = np.array([s.class_id for s in specs])
    if labels.max() >= p.n_classes:
        raise ConfigError("corpus has more classes than model.n_classes")
    p, state, hist = df.train(p, clouds, labels, tr["steps"], tr["batch_size"], tr["lr"], tr["seed"],
                              df.NoiseSchedule(**cfg["schedule"]), lr_end=tr["lr_end"], log_every=tr["log_every"])
    if not np.all(np.isfinite(hist)) or not np.all(np.isfinite(p.flat())):
        raise NumericalFailure("training diverged (non-finite loss or weights)")
    dn.save_checkpoint(run.path("model.mfg"), p, state)
    run.add_file("model.mfg")
    every = max(1, tr["log_every"])
    rows = [{"step": min(i + every, len(hist)), "loss": float(np.mean(hist[i:i + every]))}
            for i in range(0, len(hist), every)]
    run.write_csv("metrics.csv", rows, ["step", "loss"])


def cmd_optimize_embedding(cfg, run: Run, jobs: int):
    p = load_model(cfg)
    task = build_task(cfg["task"]["name"])
    ecfg = cd.EmbedOptimConfig.from_dict(cfg["embed"])
    before = p.checksum()
    state, rows = cd.optimize_embedding(p, task, ecfg, df.NoiseSchedule(**cfg["schedule"]), seed=cfg["seed"],
                                        mcfg=mpm_config(cfg), rcfg=rb.RobotizeConfig.from_dict(cfg["robotize"]),
                                        jobs=jobs)
    assert p.checksum() == before
    if not np.all(np.isfinite(state.c)):
        raise NumericalFailure("embedding became non-finite")
    run.write_json("embedding.json", {"embedding": state.embedding().to_dict(), "task": task.name})
    run.write_json("buffer.json", state.to_dict())
    run.write_csv("metrics.csv", rows, ["epoch", "buffer_mean", "buffer_max", "sample_mean", "embedding_norm", "loss"])


def _evaluate_rows(cfg, names, x0s, jobs, controllers=None):
    task = build_task(cfg["task"]["name"])
    mcfg, rcfg = mpm_config(cfg), rb.RobotizeConfig.from_dict(cfg["robotize"])
    if controllers is None:
        perfs = cd.evaluate_many(x0s, task, mcfg, rcfg, jobs)
    else:
        perfs = [cd.evaluate(x, task, mcfg=mcfg, rcfg=rcfg, controller=c) for x, c in zip(x0s, controllers)]
    return perfs


def cmd_sample(cfg, run: Run, jobs: int):
    p = load_model(cfg)
    emb = load_embedding(cfg, p)
    sc = cfg["sample"]
    sched = df.NoiseSchedule(**cfg["schedule"])
    seeds = [sc["seed"] + i for i in range(sc["count"])]
    if sc["snapshot_every"]:
        x0s = []
        for s in seeds:
            snaps: list = []
            x0s.append(df.sample(p, emb, sc["guidance_scale"], sched, np.random.default_rng(s),
                                 n_points=sc["n_points"], snapshot_every=sc["snapshot_every"], snapshots=snaps))
            run.write_json(f"snapshots/seed_{s:06d}.json", [{"t": t, "x": x.tolist()} for t, x in snaps])
    else:
        x0s = list(df.sample_batch(p, emb, sc["guidance_scale"], sched, [np.random.default_rng(s) for s in seeds],
                                   sc["n_points"])) if seeds else []
    if not all(np.all(np.isfinite(x)) for x in x0s):
        raise NumericalFailure("non-finite sample")
    rows = []
    for s, x in zip(seeds, x0s):
        run.write_json(f"samples/seed_{s:06d}.json", sample_doc(s, x))
        rows.append(_row(run, cfg, f"seed_{s:06d}", s, None))
    if sc["evaluate"]:
        for r, v in zip(rows, _evaluate_rows(cfg, None, x0s, jobs)):
            r["metric"] = float(v)
    run.write_csv("metrics.csv", rows, METRIC_FIELDS)


class _CodesignJob:
    def __init__(self, cfg):
        self.cfg = cfg

    def __call__(self, seed):
        cfg = self.cfg
        p = load_model(cfg)
        emb = load_embedding(cfg, p)
        task = build_task(cfg["task"]["name"])
        return cd.sample_codesign(p, emb, cfg["sample"]["guidance_scale"], task,
                                  cd.CodesignConfig.from_dict(cfg["codesign"]), df.NoiseSchedule(**cfg["schedule"]),
                                  np.random.default_rng(seed), mpm_config(cfg),
                                  rb.RobotizeConfig.from_dict(cfg["robotize"]), cfg["sample"]["n_points"])


def cmd_codesign(cfg, run: Run, jobs: int):
    load_embedding(cfg, load_model(cfg))  # fail early on missing artifacts
    sc = cfg["sample"]
    seeds = [sc["seed"] + i for i in range(sc["count"])]
    results = cd.pmap(_CodesignJob(cfg), seeds, jobs)
    rows, steps = [], []
    for s, (x0, phi, perf, infos) in zip(seeds, results):
        if not np.all(np.isfinite(x0)):
            raise NumericalFailure(f"non-finite co-design sample for seed {s}")
        run.write_json(f"samples/seed_{s:06d}.json", sample_doc(s, x0))
        run.write_json(f"controllers/seed_{s:06d}.json", phi.to_dict())
        rows.append(_row(run, cfg, f"seed_{s:06d}", s, float(perf)))
        steps += [{"seed": s, "t": i.t, "performance": i.performance, "grad_norm": i.grad_norm,
                   "eps_norm": i.eps_norm, "skipped": int(i.skipped)} for i in infos]
    run.write_csv("metrics.csv", rows, METRIC_FIELDS)
    run.write_csv("steps.csv", steps, ["seed", "t", "performance", "grad_norm", "eps_norm", "skipped"])


def cmd_evaluate(cfg, run: Run, jobs: int):
    samples = load_samples(cfg["paths"]["samples"])
    ctrl_dir = cfg["paths"]["controllers"]
    controllers = None
    if ctrl_dir:
        _need(ctrl_dir, "controllers")
        controllers = []
        for name, *_ in samples:
            f = os.path.join(ctrl_dir, name + ".json")
            _need(f, "controllers")
            with open(f) as fh:
                controllers.append(ControllerParams.from_dict(json.load(fh)))
    perfs = _evaluate_rows(cfg, [s[0] for s in samples], [s[1] for s in samples], jobs, controllers)
    run.write_csv("metrics.csv", [_row(run, cfg, n, sd, float(v)) for (n, _, sd), v in zip(samples, perfs)],
                  METRIC_FIELDS)


def cmd_baseline(cfg, run: Run, jobs: int):
    b = cfg["baseline"]
    task = build_task(cfg["task"]["name"])
    kinds = ("voxel", "particle") if b["kind"] == "both" else (b["kind"],)
    seeds = [cfg["seed"] + i for i in range(b["restarts"])]
    rows, summary = [], {}
    for kind in kinds:
        fn = cd.baseline_voxel if kind == "voxel" else cd.baseline_particle
        res = fn(task, b["iters"], seeds, mcfg=mpm_config(cfg), rcfg=rb.RobotizeConfig.from_dict(cfg["robotize"]),
                 lr=b["lr"], jobs=jobs)
        for s, i0, best in zip(seeds, res.initial, res.final):
            rows.append({"kind": kind, "seed": s, "initial": float(i0), "best": float(best)})
        summary[kind] = res.to_dict()
    run.write_csv("metrics.csv", rows, ["kind", "seed", "initial", "best"])
    run.write_json("baselines.json", summary)


# ------------------------------------------------------------------ SVG


def _svg(width, height, body) -> str:
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}">\n<rect width="100%" height="100%" fill="white"/>\n'
            + "".join(body) + "</svg>\n")


_COLORS = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")


def frame_svg(frame, colors, boxes, size=400, view=(0.0, 0.0, 1.0, 1.0)) -> str:
    x0, y0, x1, y1 = view
    sx = size / (x1 - x0)

    def tx(p):
        return (p[0] - x0) * sx, size - (p[1] - y0) * sx

    body = []
    for b in boxes:
        bx0, by0 = tx((max(b[0], x0), min(b[3], y1)))
        bx1, by1 = tx((min(b[2], x1), max(b[1], y0)))
        if bx1 > bx0 and by1 > by0:
            fill = "#bbbbbb" if b[4] == 0 else "#999966"
            body.append(f'<rect x="{bx0:.2f}" y="{by0:.2f}" width="{bx1 - bx0:.2f}" height="{by1 - by0:.2f}" '
                        f'fill="{fill}"/>\n')
    r = max(0.8, 0.003 * sx)
    for p, c in zip(frame, colors):
        px, py = tx(p)
        body.append(f'<circle cx="{px:.2f}" cy="{py:.2f}" r="{r:.2f}" fill="{c}"/>\n')
    return _svg(size, size, body)


def line_plot_svg(xs, ys, xlabel, ylabel, size=400) -> str:
    xs, ys = np.asarray(xs, dtype=float), np.asarray(ys, dtype=float)
    m = 50
    W = H = size
    if xs.size == 0:
        return _svg(W, H, [f'<text x="{m}" y="{H / 2}">no data</text>\n'])
    xl, xh = xs.min(), xs.max() if xs.max() > xs.min() else xs.min() + 1
    yl, yh = ys.min(), ys.max() if ys.max() > ys.min() else ys.min() + 1
    px = m + (xs - xl) / (xh - xl) * (W - 2 * m)
    py = H - m - (ys - yl) / (yh - yl) * (H - 2 * m)
    pts = " ".join(f"{a:.2f},{b:.2f}" for a, b in zip(px, py))
    body = [
        f'<line x1="{m}" y1="{H - m}" x2="{W - m}" y2="{H - m}" stroke="black"/>\n',
        f'<line x1="{m}" y1="{m}" x2="{m}" y2="{H - m}" stroke="black"/>\n',
        f'<polyline points="{pts}" fill="none" stroke="{_COLORS[0]}" stroke-width="2"/>\n',
        f'<text x="{W / 2}" y="{H - 10}" text-anchor="middle">{xlabel}</text>\n',
        f'<text x="15" y="{H / 2}" transform="rotate(-90 15 {H / 2})" text-anchor="middle">{ylabel}</text>\n',
        f'<text x="{m}" y="{H - m + 15}" font-size="10">{xl:.4g}</text>\n',
        f'<text x="{W - m}" y="{H - m + 15}" font-size="10" text-anchor="end">{xh:.4g}</text>\n',
        f'<text x="{m - 4}" y="{H - m}" font-size="10" text-anchor="end">{yl:.4g}</text>\n',
        f'<text x="{m - 4}" y="{m}" font-size="10" text-anchor="end">{yh:.4g}</text>\n',
    ]
    body += [f'<circle cx="{a:.2f}" cy="{b:.2f}" r="2.5" fill="{_COLORS[0]}"/>\n' for a, b in zip(px, py)]
    return _svg(W, H, body)


def cmd_render(cfg, run: Run, jobs: int):
    r = cfg["render"]
    paths = cfg["paths"]
    if not paths["samples"] and not paths["metrics"]:
        raise MissingArtifact("nothing to render (set paths.samples and/or paths.metrics)")
    rows = []
    if paths["samples"]:
        task = build_task(cfg["task"]["name"])
        mcfg, rcfg = mpm_config(cfg), rb.RobotizeConfig.from_dict(cfg["robotize"])
        for name, x0, _ in load_samples(paths["samples"]):
            try:
                design = rb.build_design(x0, task.robotize_config(rcfg))
            except rb.DegenerateGeometry as e:
                rows.append({"name": name, "frames": 0, "performance": task.sentinel, "note": str(e)})
                continue
            cp = task.controller(mcfg)
            ctrl = paths["controllers"]
            if ctrl:
                with open(_need(os.path.join(ctrl, name + ".json"), "controllers")) as fh:
                    cp = ControllerParams.from_dict(json.load(fh))
            scene = task.build_scene(design, mcfg)
            trace, _ = simulate(scene, cp, mcfg)
            n = scene.n_robot
            colors = [_COLORS[(a % (len(_COLORS) - 1)) + 1] if a >= 0 else _COLORS[0]
                      for a in scene.actuator[:n]] + ["#444444"] * (scene.n - n)
            allp = trace.frames.reshape(-1, 2)
            lo, hi = allp.min(0) - 0.03, allp.max(0) + 0.03
            span = float(max(hi - lo))
            view = (lo[0], lo[1], lo[0] + span, lo[1] + span)
            k = 0
            for s in range(0, trace.frames.shape[0], max(1, r["every"])):
                run.write_text(f"frames/{name}/frame_{s:04d}.svg",
                               frame_svg(trace.frames[s], colors, scene.boxes, r["size"], view))
                k += 1
            cen = trace.robot.mean(1)
            run.write_csv(f"frames/{name}/trace.csv",
                          [{"step": i, "centroid_x": float(c[0]), "centroid_y": float(c[1])} for i, c in enumerate(cen)],
                          ["step", "centroid_x", "centroid_y"])
            rows.append({"name": name, "frames": k, "performance": float(task.metric(trace)), "note": ""})
    if paths["metrics"]:
        _need(paths["metrics"], "metrics")
        with open(paths["metrics"]) as fh:
            data = list(csv.DictReader(fh))
        if data and (r["x"] not in data[0] or r["y"] not in data[0]):
            raise ConfigError(f"metrics file lacks columns {r['x']!r}/{r['y']!r}")
        xs = [float(d[r["x"]]) for d in data]
        ys = [float(d[r["y"]]) for d in data]
        run.write_text("summary.svg", line_plot_svg(xs, ys, r["x"], r["y"], r["size"]))
    run.write_csv("metrics.csv", rows, ["name", "frames", "performance", "note"])


HANDLERS = {
    "gen-corpus": cmd_gen_corpus,
    "train": cmd_train,
    "optimize-embedding": cmd_optimize_embedding,
    "sample": cmd_sample,
    "codesign": cmd_codesign,
    "evaluate": cmd_evaluate,
    "baseline": cmd_baseline,
    "render": cmd_render,
}

_SHORTCUTS = (("corpus", "paths.corpus"), ("checkpoint", "paths.checkpoint"), ("embedding", "paths.embedding"),
              ("samples", "paths.samples"), ("controllers", "paths.controllers"), ("metrics", "paths.metrics"),
              ("task", "task.name"), ("seed", "seed"))


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="morphodiff", description="Physics-guided point-set diffusion for soft robots.")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value (repeatable)")
        sp.add_argument("--jobs", type=int, default=1, help="parallel workers for rollouts and samples")
        sp.add_argument("--out", help="run directory (default: $MFG_RUN_DIR or ./runs, named by config hash)")
        for flag, _ in _SHORTCUTS:
            sp.add_argument(f"--{flag}", type=int if flag == "seed" else str, default=None)
        sp.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        overrides = {key: getattr(args, flag) for flag, key in _SHORTCUTS}
        cfg = resolve_config(args.config, args.set, overrides)
        run = Run(args.command, cfg, args.out)
        with np.errstate(over="ignore", invalid="ignore"):
            HANDLERS[args.command](cfg, run, args.jobs)
        run.finish(EXIT_OK)
        print(run.dir)
        return EXIT_OK
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingArtifact as e:
        print(f"missing artifact: {e}", file=sys.stderr)
        return EXIT_MISSING
    except (NumericalFailure, SimulationError, FloatingPointError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
