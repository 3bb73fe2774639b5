import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import random_params
from morphodiff import codesign as cd
from morphodiff import denoiser as dn
from morphodiff import diffusion as df
from morphodiff import shapes
from morphodiff.mpm import MpmConfig
from morphodiff.tasks import SENTINEL, Crawling, _Parts, build_task

S = df.NoiseSchedule()


class ZeroNoise:
    def standard_normal(self, shape):
        return np.zeros(shape)


class FlatTask(Crawling):
    """Contact-free toy: loss is the vertical spread of the final frame."""

    def __init__(self):
        super().__init__()
        self.name = "flat"

    def build_scene(self, design, cfg):
        p = _Parts()
        n = p.add(design.solid_points + 0.45, (0, 0), design.particle_volume, design.mass_density,
                  design.youngs_modulus, design.poisson_ratio, design.fibers[design.actuator_id], design.actuator_id)
        return p.scene(n, np.zeros((0, 5)), [])

    def loss_and_grad(self, trace):
        last = trace.robot[-1]
        M = len(last)
        c = last[:, 1].mean()
        g = np.zeros_like(trace.frames)
        g[-1, :M, 1] = 2 * (last[:, 1] - c) / M
        return float(((last[:, 1] - c) ** 2).sum() / M), g

    def metric(self, trace):
        return -self.loss_and_grad(trace)[0]


def entries(perfs, epoch=0):
    return [cd.BufferEntry(np.full((2, 2), float(i)), p, epoch) for i, p in enumerate(perfs)]


# ------------------------------------------------------------------ buffer


def test_filter_buffer_examples():
    cfg = cd.EmbedOptimConfig(buffer_capacity=3, top_k=1)
    old = entries([5.0, 1.0])
    new = entries([2.0, 3.0], 1)
    out = cd.filter_buffer(old, new, cfg)
    assert [e.performance for e in out] == [5.0, 2.0, 3.0]
    cfg = cd.EmbedOptimConfig(buffer_capacity=10)
    assert cd.filter_buffer(old, new, cfg) == old + new


def test_sentinel_entries_kept_but_not_trained_on(caplog):
    buf = entries([SENTINEL] * 3)
    assert cd.top_entries(buf, 2) == []
    assert not any(e.valid for e in buf)


@given(st.lists(st.floats(-5, 5) | st.just(SENTINEL), min_size=0, max_size=30),
       st.lists(st.floats(-5, 5) | st.just(SENTINEL), min_size=0, max_size=30),
       st.integers(1, 12), st.integers(1, 5))
def test_filter_buffer_properties(old, new, cap, k):
    cfg = cd.EmbedOptimConfig(buffer_capacity=cap, top_k=k)
    a, b = entries(old), entries(new, 1)
    union = a + b
    out = cd.filter_buffer(a, b, cfg)
    assert len(out) == min(cap, len(union))
    idx = [next(i for i, u in enumerate(union) if u is e) for e in out]
    assert idx == sorted(idx)  # age order kept
    valid = [e.performance for e in union if e.valid]
    if valid:
        assert max(valid) in [e.performance for e in out]


# ------------------------------------------------------------------ embedding optimization


def test_embedding_grad_matches_fd():
    p = random_params(1)
    c = np.random.default_rng(0).standard_normal(p.E) * 0.5
    x0 = np.random.default_rng(1).standard_normal((3, 16, 2))
    _, g = cd.embedding_loss_grad(p, c, x0, S, np.random.default_rng(7))
    h = 1e-6
    num = np.zeros_like(c)
    for i in range(p.E):
        e = np.zeros_like(c)
        e[i] = h
        lp = cd.embedding_loss_grad(p, c + e, x0, S, np.random.default_rng(7))[0]
        lm = cd.embedding_loss_grad(p, c - e, x0, S, np.random.default_rng(7))[0]
        num[i] = (lp - lm) / (2 * h)
    assert np.abs(num - g).max() <= 1e-4 * np.abs(num).max()


def test_zero_train_iters_keep_embedding_and_model():
    p = random_params(2)
    before = p.checksum()
    cfg = cd.EmbedOptimConfig(samples_per_epoch=2, min_buffer=0, train_iters_per_epoch=0)
    st0 = cd.EmbedState.init(p.E)
    st0.c[:] = 0.25
    st1, row = cd.embed_optim_epoch(st0, p, build_task("crawling"), cfg, df.NoiseSchedule(T=20),
                                    np.random.default_rng(0), MpmConfig(control_steps=5), n_points=16)
    assert np.array_equal(st1.c, st0.c)
    assert len(st1.buffer) == 2 and st1.epoch == 1 and row["epoch"] == 1
    after = p.checksum()
    assert before == after


def test_embedding_training_moves_c_only():
    p = random_params(3)
    snap = {k: v.copy() for k, v in p.arrays.items()}
    cfg = cd.EmbedOptimConfig(samples_per_epoch=2, min_buffer=0, train_iters_per_epoch=2)
    st0 = cd.EmbedState.init(p.E)
    st0.buffer = entries([1.0, 2.0])
    for e in st0.buffer:
        e.x0 = np.random.default_rng(0).standard_normal((16, 2))
    st1, row = cd.embed_optim_epoch(st0, p, build_task("crawling"), cfg, df.NoiseSchedule(T=20),
                                    np.random.default_rng(0), MpmConfig(control_steps=5), n_points=16)
    assert not np.array_equal(st1.c, st0.c) and np.isfinite(row["loss"])
    assert all(np.array_equal(snap[k], p.arrays[k]) for k in snap)
    rt = cd.EmbedState.from_dict(st1.to_dict())
    assert np.array_equal(rt.c, st1.c) and rt.adam.step == st1.adam.step and len(rt.buffer) == len(st1.buffer)


# ------------------------------------------------------------------ co-design MCMC


def patched_step(monkeypatch, g_x, g_phi, perf=0.5):
    monkeypatch.setattr(cd.rb, "robotize", lambda *a, **k: object())
    monkeypatch.setattr(cd, "rollout_grad", lambda d, phi, task, cfg: (perf, None, g_phi))
    monkeypatch.setattr(cd.rb, "design_grad_to_xt", lambda d, g, t, s: g_x.copy())


def test_mcmc_degenerate_cases(monkeypatch):
    r = np.random.default_rng(0)
    x, eps = r.standard_normal((6, 2)), r.standard_normal((6, 2))
    task = build_task("crawling")
    phi = task.controller()
    patched_step(monkeypatch, np.zeros((6, 2)), np.ones_like(phi.values))
    ccfg = cd.CodesignConfig(sigma_scale=1.0)
    sig = ccfg.sigma(100, S)
    x1, phi1, info = cd.mcmc_codesign_step(x, 100, phi, None, None, 0.0, task, ccfg, S, ZeroNoise(), eps_hat=eps)
    assert np.array_equal(x1, x + 0.5 * sig ** 2 * eps)
    assert np.array_equal(phi1.values, phi.values - ccfg.gamma)
    ccfg = cd.CodesignConfig(sigma_scale=1.0, gamma=0.0)
    _, phi2, _ = cd.mcmc_codesign_step(x, 100, phi, None, None, 0.0, task, ccfg, S, ZeroNoise(), eps_hat=eps)
    assert np.array_equal(phi2.values, phi.values)


def test_mcmc_noise_forms_and_renorm(monkeypatch):
    r = np.random.default_rng(1)
    x, eps = r.standard_normal((6, 2)), r.standard_normal((6, 2))
    g = 100.0 * r.standard_normal((6, 2))
    task = build_task("crawling")
    patched_step(monkeypatch, g, np.zeros_like(task.controller().values))
    for form, power in (("ula", 1), ("literal", 2)):
        ccfg = cd.CodesignConfig(sigma_scale=1.0, noise_form=form)
        sig = ccfg.sigma(50, S)
        x1, _, info = cd.mcmc_codesign_step(x, 50, task.controller(), None, None, 0.0, task, ccfg, S,
                                            np.random.default_rng(5), eps_hat=eps)
        z = np.random.default_rng(5).standard_normal(x.shape)
        # kappa*|g| far exceeds 10*|eps|, so the design term is rescaled to exactly that size
        gs = g * (10 * np.linalg.norm(eps) / (ccfg.kappa * np.linalg.norm(g)))
        assert np.allclose(x1, x + 0.5 * sig ** 2 * (eps - ccfg.kappa * gs) + sig ** power * z, rtol=0, atol=1e-15)
        assert info.grad_norm == pytest.approx(np.linalg.norm(g))


def test_mcmc_mean_update(monkeypatch):
    r = np.random.default_rng(2)
    x, eps = r.standard_normal((3, 2)), r.standard_normal((3, 2))
    g = 1e-4 * r.standard_normal((3, 2))
    task = build_task("crawling")
    patched_step(monkeypatch, g, np.zeros_like(task.controller().values))
    ccfg = cd.CodesignConfig(sigma_scale=1e3, kappa=1.0)
    sig = ccfg.sigma(500, S)
    rng = np.random.default_rng(3)
    n = 10_000
    draws = np.stack([cd.mcmc_codesign_step(x, 500, task.controller(), None, None, 0.0, task, ccfg, S, rng,
                                            eps_hat=eps)[0] for _ in range(n)])
    expect = x + 0.5 * sig ** 2 * (eps - g)
    se = sig / np.sqrt(n)
    assert np.abs(draws.mean(0) - expect).max() <= 3 * se * 1.5  # 6 coordinates, small slack
    assert draws.std(0).mean() == pytest.approx(sig, rel=0.05)


def test_mcmc_skips_degenerate_geometry():
    task = build_task("crawling")
    x = np.random.default_rng(0).standard_normal((8, 2))
    eps = np.zeros_like(x)
    ccfg = cd.CodesignConfig()
    x1, _, info = cd.mcmc_codesign_step(x, 10, task.controller(), None, None, 0.0, task, ccfg, S, ZeroNoise(),
                                        eps_hat=eps)
    assert info.skipped and info.performance == task.sentinel and np.array_equal(x1, x)


def test_mcmc_design_descent_on_toy_task():
    cfg = MpmConfig(control_steps=5)
    _, clouds = shapes.generate_corpus(8, 0)
    task = FlatTask()
    t = 10
    x = clouds[2] * np.sqrt(S.ab(t))
    ccfg = cd.CodesignConfig(kappa=1e10, sigma_scale=1.0, renorm_scale=np.inf, gamma=0.0)
    phi = task.controller(cfg)
    perfs = []
    for _ in range(11):
        x, phi, info = cd.mcmc_codesign_step(x, t, phi, None, None, 0.0, task, ccfg, S, ZeroNoise(), cfg,
                                             eps_hat=np.zeros_like(x))
        perfs.append(info.performance)
    assert perfs[-1] > perfs[0]


def test_active_times_and_validation():
    assert cd.CodesignConfig().active_times(1000) == list(range(400, 0, -50))
    assert cd.CodesignConfig(t_max=0).active_times(1000) == []
    assert cd.CodesignConfig(t_max=100, t_min=50, delta_t=25).active_times(1000) == [100, 75, 50]
    assert cd.CodesignConfig.for_task("landing").t_max == 150
    for bad in ({"delta_t": 0}, {"noise_form": "x"}, {"controller_reset_policy": "x"}, {"K": -1}):
        with pytest.raises(ValueError):
            cd.CodesignConfig(**bad).validate()


@pytest.mark.parametrize("ccfg", [cd.CodesignConfig(K=0), cd.CodesignConfig(t_max=0)])
def test_disabled_codesign_matches_plain_sampling(ccfg):
    p = random_params(4, n_classes=3)
    sch = df.NoiseSchedule(T=60)
    c = dn.Embedding(np.random.default_rng(0).standard_normal(p.E), False)
    x_cd, *_ = cd.sample_codesign(p, c, 2.0, build_task("crawling"), ccfg, sch, np.random.default_rng(9),
                                  MpmConfig(control_steps=5), n_points=32)
    x_plain = df.sample(p, c, 2.0, sch, np.random.default_rng(9), n_points=32)
    assert np.array_equal(x_cd, x_plain)


def test_codesign_runs_steps_at_active_times():
    p = random_params(5)
    sch = df.NoiseSchedule(T=60)
    ccfg = cd.CodesignConfig(t_max=40, delta_t=20, K=2)
    _, phi, perf, infos = cd.sample_codesign(p, dn.Embedding(np.zeros(p.E), True), 0.0, build_task("crawling"),
                                             ccfg, sch, np.random.default_rng(0), MpmConfig(control_steps=5),
                                             n_points=32)
    assert [i.t for i in infos] == [40, 40, 20, 20]


def test_compose_single_part_is_cfg():
    p = random_params(6)
    x = np.random.default_rng(0).standard_normal((16, 2))
    c = np.random.default_rng(1).standard_normal(p.E)
    assert np.allclose(cd.compose_embeddings([(c, 2.0)], p, x, 30), df.guided_eps(p, x, 30, c, 2.0), atol=1e-14)


# ------------------------------------------------------------------ baselines


def test_baseline_zero_iterations_and_descent():
    cfg = MpmConfig(control_steps=10)
    task = build_task("crawling")
    init, best, hist = cd.baseline_run(task, "voxel", 0, 0, cfg)
    assert hist == [init] and best == init
    for kind in ("voxel", "particle"):
        init, best, hist = cd.baseline_run(task, kind, 3, 1, cfg)
        assert len(hist) == 4 and best > init
    with pytest.raises(ValueError):
        cd.baseline_design(task, "mesh", cfg)


def test_evaluate_sentinel_on_degenerate_sample():
    x = np.random.default_rng(0).standard_normal((8, 2))
    assert cd.evaluate(x, build_task("crawling")) == SENTINEL
