import csv
import json
import os
import subprocess
import sys

import numpy as np
import pytest

from conftest import random_params
from morphodiff import cli
from morphodiff import denoiser as dn

FAST = ["--set", "schedule.T=30", "--set", "mpm.control_steps=5", "--set", "sample.n_points=32"]


def run(args, out=None, env=None):
    argv = list(args) + FAST + (["--out", str(out)] if out else [])
    if env:
        old = {k: os.environ.get(k) for k in env}
        os.environ.update(env)
    try:
        return cli.main(argv)
    finally:
        if env:
            for k, v in old.items():
                if v is None:
                    os.environ.pop(k, None)
                else:
                    os.environ[k] = v


def tree(d):
    out = {}
    for root, _, files in os.walk(d):
        for f in files:
            if f == cli.SIDECAR:
                continue
            p = os.path.join(root, f)
            with open(p, "rb") as fh:
                out[os.path.relpath(p, d)] = fh.read()
    return out


def metrics(d):
    with open(os.path.join(d, "metrics.csv")) as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def art(tmp_path_factory):
    base = tmp_path_factory.mktemp("cli")
    ckpt = base / "model.mfg"
    dn.save_checkpoint(str(ckpt), random_params(0, E=8, H=8, n_classes=10))
    model = ["--checkpoint", str(ckpt), "--set", "model.E=8", "--set", "model.H=8"]
    assert run(["sample", *model, "--set", "sample.count=2"], base / "s1") == 0
    return {"base": base, "ckpt": str(ckpt), "model": model, "samples": base / "s1"}


def assert_rerun_identical(args, tmp_path):
    assert run(args, tmp_path / "a") == 0
    assert run(args, tmp_path / "b") == 0
    a, b = tree(tmp_path / "a"), tree(tmp_path / "b")
    assert a == b and "manifest.json" in a and "config.json" in a and "metrics.csv" in a
    man = json.loads(a["manifest.json"])
    import hashlib

    for rel, h in man["files"].items():
        assert hashlib.sha256(a[rel]).hexdigest() == h
    assert os.path.exists(tmp_path / "a" / cli.SIDECAR)
    return tmp_path / "a"


def test_gen_corpus_and_train_deterministic(tmp_path):
    d = assert_rerun_identical(["gen-corpus", "--set", "corpus.count=10"], tmp_path / "c")
    assert sum(int(r["count"]) for r in metrics(d)) == 10
    t = assert_rerun_identical(["train", "--corpus", str(d / "corpus"), "--set", "train.steps=3",
                                "--set", "model.E=8", "--set", "model.H=8", "--set", "train.log_every=1"],
                               tmp_path / "t")
    p, _ = dn.load_checkpoint(str(t / "model.mfg"))
    assert p.E == 8 and [r["step"] for r in metrics(t)] == ["1", "2", "3"]


def test_sample_evaluate_round_trip(art, tmp_path):
    s = assert_rerun_identical(["sample", *art["model"], "--set", "sample.count=2"], tmp_path / "s")
    rows = metrics(s)
    assert [r["sample_id"] for r in rows] == ["seed_000000", "seed_000001"]
    assert run(["evaluate", "--samples", str(s / "samples")], tmp_path / "e") == 0
    ev = metrics(tmp_path / "e")
    for a, b in zip(rows, ev):
        assert a["sample_id"] == b["sample_id"] and abs(float(a["metric"]) - float(b["metric"])) <= 1e-9
    assert run(["evaluate", "--samples", str(s / "samples"), "--jobs", "2"], tmp_path / "e2") == 0
    assert tree(tmp_path / "e") == tree(tmp_path / "e2")


def test_codesign_with_zero_steps_equals_sample(art, tmp_path):
    d = assert_rerun_identical(["codesign", *art["model"], "--set", "sample.count=2", "--set", "codesign.K=0"],
                               tmp_path / "k0")
    for f in ("seed_000000.json", "seed_000001.json"):
        assert (d / "samples" / f).read_bytes() == (art["samples"] / "samples" / f).read_bytes()
    assert run(["codesign", *art["model"], "--set", "sample.count=1", "--set", "codesign.t_max=20",
                "--set", "codesign.delta_t=10", "--set", "codesign.K=1"], tmp_path / "k1") == 0
    assert (tmp_path / "k1" / "controllers" / "seed_000000.json").exists()
    assert run(["evaluate", "--samples", str(tmp_path / "k1" / "samples"),
                "--controllers", str(tmp_path / "k1" / "controllers")], tmp_path / "k1e") == 0


def test_optimize_embedding_then_sample(art, tmp_path):
    d = assert_rerun_identical(["optimize-embedding", *art["model"], "--set", "embed.max_epochs=1",
                                "--set", "embed.samples_per_epoch=2", "--set", "embed.min_buffer=0"], tmp_path / "o")
    assert len(metrics(d)) == 1
    assert run(["sample", *art["model"], "--embedding", str(d / "embedding.json"), "--set", "sample.count=1",
                "--set", "sample.evaluate=false"], tmp_path / "s") == 0


def test_baseline_and_render(art, tmp_path):
    d = assert_rerun_identical(["baseline", "--set", "baseline.kind=voxel", "--set", "baseline.restarts=1",
                                "--set", "baseline.iters=1"], tmp_path / "b")
    assert metrics(d)[0]["kind"] == "voxel"
    r = assert_rerun_identical(["render", "--samples", str(art["samples"] / "samples"), "--set", "render.every=2",
                                "--metrics", str(d / "metrics.csv"), "--set", "render.x=seed",
                                "--set", "render.y=best"], tmp_path / "r")
    assert (r / "summary.svg").read_text().startswith("<svg")


def test_run_dir_from_environment(art, tmp_path):
    assert run(["evaluate", "--samples", str(art["samples"] / "samples")], env={"MFG_RUN_DIR": str(tmp_path)}) == 0
    (sub,) = os.listdir(tmp_path)
    assert sub.startswith("evaluate-") and len(sub) == len("evaluate-") + 12
    assert metrics(tmp_path / sub)[0]["run_id"] == sub


def test_exit_codes(art, tmp_path):
    assert run(["sample", "--set", "nosuch.key=1"], tmp_path / "x") == cli.EXIT_CONFIG
    assert run(["sample", "--set", "sample.count=abc"], tmp_path / "x") == cli.EXIT_CONFIG
    assert run(["sample", "--set", "mpm.dt=0.01"], tmp_path / "x") == cli.EXIT_CONFIG  # CFL
    assert run(["sample", "--set", "task.name=flying"], tmp_path / "x") == cli.EXIT_CONFIG
    assert run(["sample", "--checkpoint", str(tmp_path / "none.mfg")], tmp_path / "x") == cli.EXIT_MISSING
    assert run(["evaluate"], tmp_path / "x") == cli.EXIT_MISSING
    emb = tmp_path / "huge.json"
    emb.write_text(json.dumps({"embedding": {"vec": [1e308] * 8, "is_null": False}}))
    assert run(["sample", *art["model"], "--embedding", str(emb), "--set", "sample.count=1"],
               tmp_path / "x") == cli.EXIT_NUMERIC


def test_set_and_config_file(tmp_path):
    f = tmp_path / "c.json"
    f.write_text(json.dumps({"task": {"name": "landing"}, "codesign": {"K": 7}}))
    cfg = cli.resolve_config(str(f), ["sample.count=3", "mpm.gravity=[0, -5]"])
    assert cfg["sample"]["count"] == 3 and cfg["mpm"]["gravity"] == [0, -5]
    assert cfg["codesign"]["K"] == 7 and cfg["codesign"]["t_max"] == 150  # explicit wins, task fills the rest
    with pytest.raises(cli.ConfigError):
        cli.resolve_config(None, ["sample.count"])


def test_console_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "morphodiff.cli", "gen-corpus", "--set", "corpus.count=2",
                          "--out", str(tmp_path / "g")], capture_output=True, text=True)
    assert res.returncode == 0 and res.stdout.strip() == str(tmp_path / "g")
