import numpy as np
import pytest

from morphodiff import mpm, shapes
from morphodiff import robotize as rb
from morphodiff.mpm import ControllerParams, MpmConfig, SimulationError
from morphodiff.mpm import _kernels_py as kpy
from morphodiff.mpm.sim import Scene, initial_state, simulate
from morphodiff.tasks import _Parts, build_task, lattice

BACKENDS = sorted(mpm.BACKENDS)


def block_design(nx, ny, k=2, spacing=None, axis=0, fiber=(0.0, 1.0)):
    cfg = MpmConfig()
    sp = spacing or 0.5 * cfg.dx
    pts = lattice(0, 0, nx * sp, ny * sp, sp)
    act = (pts[:, axis] > np.median(pts[:, axis])).astype(np.int64) if k == 2 else np.zeros(len(pts), np.int64)
    fib = np.tile(np.asarray(fiber, float), (k, 1))
    return rb.RobotDesign(pts, act, fib, cfg.youngs_modulus, cfg.poisson_ratio, sp * sp, cfg.mass_density,
                          (nx * sp, ny * sp))


class AirTask:
    """Contact-free test scene: the design floats at mid-domain; loss is a fixed nonlinear functional."""

    name = "air"
    sentinel = -1e9

    def __init__(self, seed=0):
        self.seed = seed

    def build_scene(self, design, cfg):
        p = _Parts()
        n = p.add(design.solid_points + 0.45, (0.1, -0.05), design.particle_volume, design.mass_density,
                  design.youngs_modulus, design.poisson_ratio,
                  design.fibers[design.actuator_id], design.actuator_id)
        return p.scene(n, np.zeros((0, 5)), [])

    def _w(self, shape):
        return np.random.default_rng(self.seed).standard_normal(shape)

    def loss_and_grad(self, trace):
        w = self._w(trace.frames.shape[1:])
        last = trace.frames[-1]
        c = last.mean(0)
        loss = float((w * last).sum()) + 50.0 * float(((last - c) ** 2).sum())
        g = np.zeros_like(trace.frames)
        g[-1] = w + 100.0 * (last - c)
        return loss, g

    def metric(self, trace):
        return -self.loss_and_grad(trace)[0]

    def design_grad(self, design, scene, g):
        return g.x[: design.n].copy()


def random_state(n=40, seed=0):
    r = np.random.default_rng(seed)
    x = 0.5 + 0.03 * r.random((n, 2))
    v = 0.1 * r.standard_normal((n, 2))
    C = r.standard_normal((n, 2, 2))
    F = np.eye(2) + 0.05 * r.standard_normal((n, 2, 2))
    mass = 1 + r.random(n)
    vol = 1e-4 * (1 + r.random(n))
    mu = np.full(n, 4e4)
    lam = np.full(n, 3e4)
    act = r.uniform(-1, 1, n) * 3e4
    fib = r.standard_normal((n, 2))
    fib /= np.linalg.norm(fib, axis=1, keepdims=True)
    return x, v, C, F, mass, vol, mu, lam, act, fib


@pytest.mark.skipif("cython" not in mpm.BACKENDS, reason="compiled kernels not built")
def test_compiled_kernels_match_reference():
    kc = mpm.BACKENDS["cython"]
    args = random_state()
    boxes = np.array([[-1, -1, 2, 0.505, 0], [0.52, 0.52, 2, 2, 1]], dtype=np.float64)
    n = args[0].shape[0]
    outs = []
    for k in (kpy, kc):
        o = (np.empty((n, 2)), np.empty((n, 2)), np.empty((n, 2, 2)), np.empty((n, 2, 2)))
        k.substep(*args, 64.0, 1e-4, (0.0, -9.8), boxes, 0.4, *o)
        outs.append(o)
    for a, b in zip(*outs):
        assert np.allclose(a, b, rtol=1e-12, atol=1e-13)
    r = np.random.default_rng(1)
    grads = []
    for k in (kpy, kc):
        gx, gv = r.standard_normal((n, 2)), r.standard_normal((n, 2))
        gC, gF = r.standard_normal((n, 2, 2)), r.standard_normal((n, 2, 2))
        g = [gx.copy(), gv.copy(), gC.copy(), gF.copy(), np.zeros(n), np.zeros(n), np.zeros(n)]
        k.substep_backward(*args, 64.0, 1e-4, (0.0, -9.8), boxes, 0.4, *g)
        grads.append(g)
        r = np.random.default_rng(1)
    for a, b in zip(*grads):
        assert np.allclose(a, b, rtol=1e-9, atol=1e-9 * np.abs(a).max())


@pytest.mark.parametrize("backend", BACKENDS)
def test_p2g_conserves_momentum(backend):
    k = mpm.get_kernels(backend)
    x, v, C, F, mass, vol, mu, lam, act, fib = random_state(seed=3)
    _, mv, m = k.p2g(x, v, C, F, mass, vol, mu, lam, act, fib, 64.0, 1e-4)
    p = (mass[:, None] * v).sum(0)
    assert np.abs(mv.reshape(-1, 2).sum(0) - p).max() <= 1e-10 * np.abs(p).max()
    assert abs(m.sum() - mass.sum()) <= 1e-12 * mass.sum()


@pytest.mark.parametrize("backend", BACKENDS)
def test_ballistic_free_fall(backend):
    cfg = MpmConfig(backend=backend)
    p = _Parts()
    p.add([[0.5, 0.6]], (0, 0), 1e-5, 1e3, 1e5, 0.2)
    scene = p.scene(1, np.zeros((0, 5)), [])
    state = initial_state(scene)
    for n in range(1, 60):
        state = mpm.substep(scene, state, np.zeros(0), cfg)
        assert abs(state[1][0, 1] - (-9.8 * n * cfg.dt)) <= 1e-12
        assert abs(state[1][0, 0]) <= 1e-12


def test_mirror_symmetry_drift():
    cfg = MpmConfig(control_steps=40)
    d = block_design(16, 8, k=1)
    p = _Parts()
    cx = 0.5 - 0.5 * d.workspace[0]
    n = p.add(d.solid_points + [cx, cfg.ground_y], (0, 0), d.particle_volume, d.mass_density, d.youngs_modulus,
              d.poisson_ratio, d.fibers[d.actuator_id], d.actuator_id)
    scene = p.scene(n, cfg.domain_boxes(), [])
    cp = ControllerParams("sine", [[0.5, 10.0, 0.3, 0.0]], cfg.control_dt)
    trace, _ = simulate(scene, cp, cfg)
    drift = np.abs(np.diff(trace.robot[:, :, 0].mean(1)))
    assert drift.max() <= 1e-6
    assert np.abs(trace.robot[:, :, 1].mean(1) - trace.robot[0, :, 1].mean()).max() > 1e-4  # it does move


def test_passive_rest_on_ground():
    cfg = MpmConfig()
    d = block_design(12, 8, k=1)
    task = build_task("crawling")
    cp = ControllerParams("sine", [[0.0, 30.0, 0.0, 0.0]] * 4, cfg.control_dt)
    res = mpm.rollout(d, cp, task, cfg)
    c = res.trace.robot.mean(1)
    assert np.abs(c - c[0]).max() <= 1e-3
    assert res.trace.bad_det == 0


def test_controller_clamp_and_examples():
    cfg = MpmConfig()
    cp = build_task("crawling").controller(cfg)
    assert np.allclose(mpm.controller_eval(cp, 0), [0.3, -0.3, 0.0, 0.0], atol=1e-15)
    flat = ControllerParams("sine", [[0.0, 30.0, 1.0, 0.25]])
    assert all(np.array_equal(mpm.controller_eval(flat, s), [0.25]) for s in range(10))
    big = ControllerParams("sine", [[5.0, 7.0, 0.2, 0.5]], cfg.control_dt)
    assert max(np.abs(mpm.controller_eval(big, s)).max() for s in range(100)) <= 1.0
    seq = build_task("hurdling").controller(cfg)
    assert np.allclose(mpm.controller_eval(seq, 29), [0.3, 1.0])
    assert np.allclose(mpm.controller_eval(seq, 0), [0.0, 0.0])
    assert np.array_equal(mpm.controller_eval(seq, 30), [0.0, 0.0])


def test_cfl_check():
    with pytest.raises(ValueError, match="CFL"):
        MpmConfig(dt=1e-3)


def test_rollout_grad_matches_fd():
    cfg = MpmConfig(control_steps=5)
    d = block_design(10, 5)
    assert d.n == 50
    task = AirTask()
    cp = ControllerParams("sine", [[0.6, 40.0, 0.2, 0.1], [0.5, 25.0, 1.0, -0.2]], cfg.control_dt)

    def loss(design, c):
        return task.loss_and_grad(mpm.simulate(task.build_scene(design, cfg), c, cfg)[0])[0]

    _, g_pts, g_cp = mpm.rollout_grad(d, cp, task, cfg)
    h = 1e-4
    num = np.zeros_like(cp.values)
    for i in np.ndindex(cp.values.shape):
        a, b = cp.copy(), cp.copy()
        a.values[i] += h
        b.values[i] -= h
        num[i] = (loss(d, a) - loss(d, b)) / (2 * h)
    assert np.abs(num - g_cp).max() <= 1e-3 * np.abs(num).max()

    r = np.random.default_rng(5)
    h = 1e-7
    for _ in range(3):
        u = r.standard_normal(d.solid_points.shape)
        dp, dm = rb.RobotDesign(**{**d.__dict__}), rb.RobotDesign(**{**d.__dict__})
        dp.solid_points = d.solid_points + h * u
        dm.solid_points = d.solid_points - h * u
        fd = (loss(dp, cp) - loss(dm, cp)) / (2 * h)
        an = float((g_pts * u).sum())
        assert abs(fd - an) <= 1e-2 * abs(fd)


def test_unused_actuator_has_zero_gradient():
    cfg = MpmConfig(control_steps=5)
    d = block_design(10, 5, k=2)
    d.actuator_id[:] = 0  # actuator 1 drives nothing
    cp = ControllerParams("sine", [[0.6, 40.0, 0.2, 0.1], [0.5, 25.0, 1.0, -0.2]], cfg.control_dt)
    _, _, g_cp = mpm.rollout_grad(d, cp, AirTask(), cfg)
    assert np.all(g_cp[1] == 0) and np.abs(g_cp[0]).max() > 0


def test_rollout_deterministic_and_sentinel():
    cfg = MpmConfig(control_steps=10)
    d = block_design(8, 8)
    task = build_task("crawling")
    cp = task.controller(cfg)
    a = mpm.rollout(d, cp, task, cfg)
    b = mpm.rollout(d, cp, task, cfg)
    assert np.array_equal(a.trace.frames, b.trace.frames) and a.performance == b.performance
    assert mpm.rollout(None, cp, task, cfg).performance == task.sentinel
    bad = ControllerParams("sine", [[0.3, 30.0, float("nan"), 0.0]] * 4, cfg.control_dt)
    res = mpm.rollout(d, bad, task, cfg)
    assert res.failed and res.performance == task.sentinel
    with pytest.raises(SimulationError):
        mpm.rollout_grad(d, bad, task, cfg)


def test_crawling_legged_blob_moves():
    spec = shapes.ShapeSpec("n-legged-blob", {"n": 4, "body_w": 0.9, "body_h": 0.4, "leg_len": 0.3, "leg_w": 0.1})
    task = build_task("crawling")
    d = rb.build_design(shapes.sample_surface(spec), task.robotize_config())
    res = mpm.rollout(d, task.controller(), task, MpmConfig())
    assert not res.failed and res.performance > 0


def test_contact_scene_descent():
    cfg = MpmConfig(control_steps=20)
    task = build_task("crawling")
    d = block_design(16, 8, k=4)
    d.actuator_id = np.minimum((d.solid_points[:, 0] / d.workspace[0] * 4).astype(np.int64), 3)
    d.fibers = np.tile([0.0, 1.0], (4, 1))
    cp = task.controller(cfg)
    perf0, _, g = mpm.rollout_grad(d, cp, task, cfg)
    step = 0.05 / np.abs(g).max()
    for _ in range(20):
        cp = ControllerParams(cp.kind, cp.values - step * g, cp.control_dt)
        perf, _, g = mpm.rollout_grad(d, cp, task, cfg)
    assert perf > perf0
