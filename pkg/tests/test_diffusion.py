import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from morphodiff import denoiser as dn
from morphodiff import diffusion as df
from morphodiff import shapes

from conftest import random_params

S = df.NoiseSchedule()


def test_schedule_invariants():
    assert np.all((S.beta > 0) & (S.beta < 1))
    assert np.all(np.diff(S.alpha_bar) < 0)
    assert S.alpha_bar[-1] < 1e-4
    assert S.ab(0) == 1.0 and S.b(1) == pytest.approx(1e-4) and S.b(1000) == pytest.approx(0.02)


def test_scalar_examples():
    class Fake:
        T = 10

        def ab(self, t):
            return 0.25

    assert df.q_sample(1.0, 3, 0.5, Fake()) == pytest.approx(0.5 + np.sqrt(0.75) * 0.5)
    assert df.predict_x0(1.0, 3, 0.5, Fake()) == pytest.approx((1.0 - np.sqrt(0.75) * 0.5) / 0.5)
    assert df.cfg_eps(0.2, 0.4, 2.0) == pytest.approx(0.6)
    assert df.cfg_eps(0.2, 0.4, 0.0) == 0.2 and df.cfg_eps(0.2, 0.4, 1.0) == 0.4


def test_ddpm_step_hand_example():
    class Fake:
        T = 10

        def a(self, t):
            return 0.99

        def b(self, t):
            return 0.01

        def ab(self, t):
            return 0.5 if t == 5 else 0.505

    out = df.ddpm_step(np.array([1.0]), 5, np.array([0.2]), Fake(), z=np.zeros(1))
    assert out[0] == pytest.approx((1 / np.sqrt(0.99)) * (1 - (0.01 / np.sqrt(0.5)) * 0.2), abs=1e-12)
    assert out[0] == pytest.approx(1.00220, abs=1e-5)


def test_ddpm_terminal_step_is_deterministic():
    x = np.random.default_rng(0).standard_normal((4, 2))
    e = np.random.default_rng(1).standard_normal((4, 2))
    a = df.ddpm_step(x, 1, e, S, np.random.default_rng(5))
    b = df.ddpm_step(x, 1, e, S, np.random.default_rng(6))
    assert np.array_equal(a, b)


@given(st.integers(1, 1000), st.integers(0, 1000))
def test_predict_x0_inverts_q_sample(t, seed):
    r = np.random.default_rng(seed)
    x0 = r.standard_normal((16, 2))
    eps = r.standard_normal((16, 2))
    back = df.predict_x0(df.q_sample(x0, t, eps, S), t, eps, S)
    assert np.abs(back - x0).max() <= 1e-12 * max(1.0, 1 / np.sqrt(S.ab(t)))


@given(st.floats(-5, 5), st.integers(0, 100))
def test_cfg_fixed_point(s, seed):
    a = np.random.default_rng(seed).standard_normal((3, 2))
    assert np.allclose(df.cfg_eps(a, a, s), a, atol=1e-15)


def test_guidance_zero_equals_unconditional():
    p = random_params(0, E=8)
    c = dn.Embedding(np.random.default_rng(0).standard_normal(8))
    short = df.NoiseSchedule(T=40)
    a = df.sample(p, c, 0.0, short, np.random.default_rng(3), n_points=16)
    b = df.sample(p, dn.Embedding.null(8), 2.0, short, np.random.default_rng(3), n_points=16)
    assert np.array_equal(a, b)


def test_sample_reproducible_and_batch_equivalent():
    p = random_params(1, E=8)
    c = dn.Embedding(np.random.default_rng(2).standard_normal(8))
    short = df.NoiseSchedule(T=30)
    a = df.sample(p, c, 2.0, short, np.random.default_rng(9), n_points=12)
    b = df.sample(p, c, 2.0, short, np.random.default_rng(9), n_points=12)
    assert np.array_equal(a, b)
    batch = df.sample_batch(p, c, 2.0, short, [np.random.default_rng(9), np.random.default_rng(10)], 12)
    assert np.array_equal(batch[0], a)
    assert np.array_equal(batch[1], df.sample(p, c, 2.0, short, np.random.default_rng(10), n_points=12))


def test_hook_sees_every_step_and_can_overwrite():
    p = random_params(1, E=8)
    short = df.NoiseSchedule(T=20)
    seen = []

    def hook(t, x):
        seen.append(t)
        if t == 5:
            return np.zeros_like(x)
        return None

    snaps = []
    df.sample(p, dn.Embedding.null(8), 1.0, short, np.random.default_rng(0), hook=hook, n_points=8,
              snapshot_every=5, snapshots=snaps)
    assert seen == list(range(19, -1, -1))
    assert [t for t, _ in snaps] == [15, 10, 5, 0]
    assert np.all(snaps[2][1] == 0)


def test_compose_reduces_to_cfg_and_is_linear():
    p = random_params(3, E=8)
    r = np.random.default_rng(0)
    x = r.standard_normal((10, 2))
    c = dn.Embedding(r.standard_normal(8))
    assert np.allclose(df.compose_eps(p, x, 40, [(c, 2.5)]), df.guided_eps(p, x, 40, c, 2.5), atol=1e-13)
    two = df.compose_eps(p, x, 40, [(c, 0.7), (c, 1.1)])
    assert np.allclose(two, df.compose_eps(p, x, 40, [(c, 1.8)]), atol=1e-13)
    with pytest.raises(ValueError):
        df.compose_eps(p, x, 40, [])


def test_train_step_zero_model_loss_near_one():
    p = dn.DenoiserParams.init(0, 8, 8, 3)
    x0 = np.random.default_rng(0).standard_normal((64, 32, 2)) * 0.5
    loss, _, _ = df.train_step(p, x0, np.zeros(64, dtype=int), S, np.random.default_rng(1))
    assert loss == pytest.approx(1.0, abs=0.05)
    a = df.train_step(p, x0[:4], np.zeros(4, dtype=int), S, np.random.default_rng(2))
    b = df.train_step(p, x0[:4], np.zeros(4, dtype=int), S, np.random.default_rng(2))
    assert a[0] == b[0] and all(np.array_equal(a[1][k], b[1][k]) for k in a[1])


def test_train_step_embedding_grad_matches_fd():
    p = random_params(5, E=8)
    x0 = np.random.default_rng(0).standard_normal((3, 8, 2))
    c = np.random.default_rng(1).standard_normal(8)

    def loss(cv):
        return df.train_step(p, x0, np.broadcast_to(cv, (3, 8)), S, np.random.default_rng(7), drop_prob=0.0)[0]

    _, _, g_c = df.train_step(p, x0, np.broadcast_to(c, (3, 8)), S, np.random.default_rng(7), drop_prob=0.0)
    g = g_c.sum(0)
    h = 1e-6
    num = np.array([(loss(c + h * e) - loss(c - h * e)) / (2 * h) for e in np.eye(8)])
    assert np.abs(num - g).max() <= 1e-4 * np.abs(num).max()


def test_training_reduces_loss():
    _, clouds = shapes.generate_corpus(32, seed=0)
    p = dn.DenoiserParams.init(0, 16, 16, 10)
    labels = np.zeros(32, dtype=int)
    _, _, hist = df.train(p, clouds, labels, 200, batch_size=16, lr=3e-3, seed=0, log_every=0)
    assert np.mean(hist[-40:]) < np.mean(hist[:10])
