"""Pure-numpy MLS-MPM substep and its reverse-mode adjoint.

Reference implementation and import-time fallback for the compiled kernels in
``_kernels.pyx``; both expose the same two functions.

The grid is unbounded: each substep allocates a window covering the 3x3
stencils of all particles, and static boxes (ground, walls, obstacles) are
applied to the nodes that fall inside them. ``boxes`` rows are
``(x0, y0, x1, y1, kind)`` with kind 0 = Coulomb friction, 1 = sticky.
"""
from __future__ import annotations

import numpy as np

_OFFSETS = [(i, j) for i in range(3) for j in range(3)]


def _weights(x, inv_dx):
    xp = x * inv_dx
    base = np.floor(xp - 0.5).astype(np.int64)
    fx = xp - base
    w = np.stack([0.5 * (1.5 - fx) ** 2, 0.75 - (fx - 1.0) ** 2, 0.5 * (fx - 0.5) ** 2])
    dw = np.stack([fx - 1.5, -2.0 * (fx - 1.0), fx - 0.5])
    return base, fx, w, dw


def _stress(F, mu, lam, act_p, fiber):
    """K = P(F) F^T for fixed-corotated elasticity plus fiber actuation."""
    a, b, c, d = F[:, 0, 0], F[:, 0, 1], F[:, 1, 0], F[:, 1, 1]
    th = np.arctan2(c - b, a + d)
    cs, sn = np.cos(th), np.sin(th)
    R = np.empty_like(F)
    R[:, 0, 0], R[:, 0, 1], R[:, 1, 0], R[:, 1, 1] = cs, -sn, sn, cs
    J = a * d - b * c
    FmR = F - R
    K = 2.0 * mu[:, None, None] * np.einsum("pij,pkj->pik", FmR, F)
    iso = lam * (J - 1.0) * J
    K[:, 0, 0] += iso
    K[:, 1, 1] += iso
    g = np.einsum("pij,pj->pi", F, fiber)
    K += act_p[:, None, None] * g[:, :, None] * g[:, None, :]
    return K, R, J, g


def _window(base):
    lo = base.min(0)
    hi = base.max(0) + 3
    return lo, hi - lo


def _node_index(base, lo, shape, off):
    ij = base + np.asarray(off) - lo
    return ij[:, 0] * shape[1] + ij[:, 1]


def _grid_update(mv, m, lo, shape, inv_dx, dt, gravity, boxes, friction):
    """Momentum -> velocity, gravity, collider projection. Returns v, pre-projection v, and branch flags."""
    dx = 1.0 / inv_dx
    has = m > 0
    vpre = np.zeros_like(mv)
    vpre[has] = mv[has] / m[has, None]
    vpre[has] += dt * np.asarray(gravity)
    v = vpre.copy()
    n = m.shape[0]
    ii = np.arange(n) // shape[1] + lo[0]
    jj = np.arange(n) % shape[1] + lo[1]
    X, Y = ii * dx, jj * dx
    # (node, box) projections applied in box order; record per-box inputs for the adjoint
    trace = []
    for b in boxes:
        x0, y0, x1, y1, kind = b
        inside = has & (X >= x0) & (X <= x1) & (Y >= y0) & (Y <= y1)
        if not inside.any():
            trace.append(None)
            continue
        idx = np.nonzero(inside)[0]
        vin = v[idx].copy()
        if kind == 1:
            v[idx] = 0.0
            trace.append((idx, kind, None, None, vin))
            continue
        # outward normal of the nearest face
        dists = np.stack([X[idx] - x0, x1 - X[idx], Y[idx] - y0, y1 - Y[idx]])
        face = np.argmin(dists, axis=0)
        axis = np.where(face < 2, 0, 1)
        sign = np.where(face % 2 == 0, -1.0, 1.0)
        vn = vin[np.arange(len(idx)), axis] * sign
        vt = vin[np.arange(len(idx)), 1 - axis]
        active = vn < 0
        mag = np.abs(vt) + friction * vn
        slide = active & (mag > 0)
        newt = np.where(slide, np.sign(vt) * mag, np.where(active, 0.0, vt))
        newn = np.where(active, 0.0, vn)
        out = np.empty_like(vin)
        out[np.arange(len(idx)), axis] = newn * sign
        out[np.arange(len(idx)), 1 - axis] = newt
        v[idx] = out
        trace.append((idx, kind, (axis, sign, active, slide, np.sign(vt)), None, vin))
    return v, vpre, has, trace


def _grid_update_backward(gv, vpre, has, m, trace, friction, dt, gravity):
    gv = gv.copy()
    for rec in reversed(trace):
        if rec is None:
            continue
        idx, kind, info, _, vin = rec
        if kind == 1:
            gv[idx] = 0.0
            continue
        axis, sign, active, slide, sgt = info
        r = np.arange(len(idx))
        g_out_n = gv[idx][r, axis] * sign
        g_out_t = gv[idx][r, 1 - axis]
        g_vn = np.where(active, np.where(slide, g_out_t * friction * sgt, 0.0), g_out_n)
        g_vt = np.where(active, np.where(slide, g_out_t, 0.0), g_out_t)
        gin = np.empty((len(idx), 2))
        gin[r, axis] = g_vn * sign
        gin[r, 1 - axis] = g_vt
        gv[idx] = gin
    g_mv = np.zeros_like(gv)
    g_m = np.zeros(len(m))
    g_mv[has] = gv[has] / m[has, None]
    vel = vpre[has] - dt * np.asarray(gravity)
    g_m[has] = -(gv[has] * vel).sum(1) / m[has]
    return g_mv, g_m


def _p2g(x, v, C, F, mass, vol, mu, lam, act_p, fiber, inv_dx, dt):
    dx = 1.0 / inv_dx
    base, fx, w, dw = _weights(x, inv_dx)
    K, R, J, g = _stress(F, mu, lam, act_p, fiber)
    coef = -dt * vol * 4.0 * inv_dx * inv_dx
    A = coef[:, None, None] * K + mass[:, None, None] * C
    lo, shape = _window(base)
    nn = shape[0] * shape[1]
    mv = np.zeros((nn, 2))
    m = np.zeros(nn)
    mvp = mass[:, None] * v
    nodes, dposs = [], []
    for off in _OFFSETS:
        wt = w[off[0], :, 0] * w[off[1], :, 1]
        dpos = (np.asarray(off, dtype=np.float64) - fx) * dx
        node = _node_index(base, lo, shape, off)
        contrib = wt[:, None] * (mvp + np.einsum("pij,pj->pi", A, dpos))
        mv[:, 0] += np.bincount(node, contrib[:, 0], nn)
        mv[:, 1] += np.bincount(node, contrib[:, 1], nn)
        m += np.bincount(node, wt * mass, nn)
        nodes.append(node)
        dposs.append(dpos)
    return dict(base=base, fx=fx, w=w, dw=dw, K=K, R=R, J=J, g=g, A=A, coef=coef, lo=lo, shape=shape,
                mv=mv, m=m, nodes=nodes, dposs=dposs)


def substep(x, v, C, F, mass, vol, mu, lam, act_p, fiber, inv_dx, dt, gravity, boxes, friction,
            x_out, v_out, C_out, F_out):
    """Advance one explicit MLS-MPM substep; writes into the ``*_out`` arrays."""
    st = _p2g(x, v, C, F, mass, vol, mu, lam, act_p, fiber, inv_dx, dt)
    gvel, _, _, _ = _grid_update(st["mv"], st["m"], st["lo"], st["shape"], inv_dx, dt, gravity, boxes, friction)
    w = st["w"]
    nv = np.zeros_like(v)
    nC = np.zeros_like(C)
    for k, off in enumerate(_OFFSETS):
        wt = w[off[0], :, 0] * w[off[1], :, 1]
        gvn = gvel[st["nodes"][k]]
        nv += wt[:, None] * gvn
        nC += (4.0 * inv_dx * inv_dx) * wt[:, None, None] * gvn[:, :, None] * st["dposs"][k][:, None, :]
    v_out[...] = nv
    C_out[...] = nC
    x_out[...] = x + dt * nv
    F_out[...] = F + dt * np.einsum("pij,pjk->pik", nC, F)


def substep_backward(x, v, C, F, mass, vol, mu, lam, act_p, fiber, inv_dx, dt, gravity, boxes, friction,
                     gx, gv, gC, gF, g_act_p, g_mass, g_vol):
    """Reverse one substep.

    On entry ``gx, gv, gC, gF`` hold adjoints of the substep outputs; on exit
    they hold adjoints of the inputs. Adjoints of the per-particle actuation
    coefficient, mass and volume are accumulated into ``g_act_p``, ``g_mass``,
    ``g_vol``.
    """
    dx = 1.0 / inv_dx
    st = _p2g(x, v, C, F, mass, vol, mu, lam, act_p, fiber, inv_dx, dt)
    gvel, vpre, has, trace = _grid_update(st["mv"], st["m"], st["lo"], st["shape"], inv_dx, dt, gravity, boxes, friction)
    w, dw, fx = st["w"], st["dw"], st["fx"]
    nn = st["m"].shape[0]
    c4 = 4.0 * inv_dx * inv_dx

    nC = np.zeros_like(C)
    for k, off in enumerate(_OFFSETS):
        wt = w[off[0], :, 0] * w[off[1], :, 1]
        nC += c4 * wt[:, None, None] * gvel[st["nodes"][k]][:, :, None] * st["dposs"][k][:, None, :]

    # G2P: x' = x + dt nv, F' = (I + dt nC) F
    g_nC = gC + dt * np.einsum("pij,pkj->pik", gF, F)
    g_F = gF + dt * np.einsum("pji,pjk->pik", nC, gF)
    g_nv = gv + dt * gx
    g_x = gx.copy()
    g_fx = np.zeros_like(fx)
    g_grid_v = np.zeros((nn, 2))
    for k, off in enumerate(_OFFSETS):
        wx, wy = w[off[0], :, 0], w[off[1], :, 1]
        wt = wx * wy
        node, dpos = st["nodes"][k], st["dposs"][k]
        gvn = gvel[node]
        contrib = wt[:, None] * g_nv + c4 * wt[:, None] * np.einsum("pij,pj->pi", g_nC, dpos)
        g_grid_v[:, 0] += np.bincount(node, contrib[:, 0], nn)
        g_grid_v[:, 1] += np.bincount(node, contrib[:, 1], nn)
        g_w = (g_nv * gvn).sum(1) + c4 * np.einsum("pi,pij,pj->p", gvn, g_nC, dpos)
        g_dpos = c4 * wt[:, None] * np.einsum("pij,pi->pj", g_nC, gvn)
        g_fx[:, 0] += g_w * dw[off[0], :, 0] * wy - dx * g_dpos[:, 0]
        g_fx[:, 1] += g_w * wx * dw[off[1], :, 1] - dx * g_dpos[:, 1]

    g_mv, g_m = _grid_update_backward(g_grid_v, vpre, has, st["m"], trace, friction, dt, gravity)

    # P2G: mv += w (m v + A dpos), m += w m
    A = st["A"]
    mvp = mass[:, None] * v
    g_A = np.zeros_like(A)
    g_v = np.zeros_like(v)
    for k, off in enumerate(_OFFSETS):
        wx, wy = w[off[0], :, 0], w[off[1], :, 1]
        wt = wx * wy
        node, dpos = st["nodes"][k], st["dposs"][k]
        gp = g_mv[node]
        gm = g_m[node]
        g_v += (wt * mass)[:, None] * gp
        g_A += wt[:, None, None] * gp[:, :, None] * dpos[:, None, :]
        g_dpos = wt[:, None] * np.einsum("pij,pi->pj", A, gp)
        g_w = (gp * (mvp + np.einsum("pij,pj->pi", A, dpos))).sum(1) + gm * mass
        g_mass += wt * ((gp * v).sum(1) + gm)
        g_fx[:, 0] += g_w * dw[off[0], :, 0] * wy - dx * g_dpos[:, 0]
        g_fx[:, 1] += g_w * wx * dw[off[1], :, 1] - dx * g_dpos[:, 1]
    g_x += g_fx * inv_dx

    g_C = mass[:, None, None] * g_A
    g_mass += (g_A * C).sum((1, 2))
    K = st["K"]
    g_vol += -dt * c4 * (g_A * K).sum((1, 2))
    g_K = st["coef"][:, None, None] * g_A

    # K(F) adjoint
    R, J, g = st["R"], st["J"], st["g"]
    a, b, c, d = F[:, 0, 0], F[:, 0, 1], F[:, 1, 0], F[:, 1, 1]
    mu2 = 2.0 * mu[:, None, None]
    g_F += mu2 * (np.einsum("pij,pjk->pik", g_K, F) + np.einsum("pji,pjk->pik", g_K, F - R))
    g_R = -mu2 * np.einsum("pij,pjk->pik", g_K, F)
    cs, sn = R[:, 0, 0], R[:, 1, 0]
    g_th = g_R[:, 0, 0] * (-sn) + g_R[:, 0, 1] * (-cs) + g_R[:, 1, 0] * cs + g_R[:, 1, 1] * (-sn)
    xx, yy = a + d, c - b
    r2 = xx * xx + yy * yy
    g_F[:, 0, 0] += g_th * (-yy / r2)
    g_F[:, 1, 1] += g_th * (-yy / r2)
    g_F[:, 1, 0] += g_th * (xx / r2)
    g_F[:, 0, 1] += g_th * (-xx / r2)
    g_J = lam * (2.0 * J - 1.0) * (g_K[:, 0, 0] + g_K[:, 1, 1])
    g_F[:, 0, 0] += g_J * d
    g_F[:, 0, 1] += g_J * (-c)
    g_F[:, 1, 0] += g_J * (-b)
    g_F[:, 1, 1] += g_J * a
    sym = g_K + np.swapaxes(g_K, 1, 2)
    gg = act_p[:, None] * np.einsum("pij,pj->pi", sym, g)
    g_F += gg[:, :, None] * fiber[:, None, :]
    g_act_p += np.einsum("pij,pi,pj->p", g_K, g, g)

    gx[...] = g_x
    gv[...] = g_v
    gC[...] = g_C
    gF[...] = g_F


def p2g(x, v, C, F, mass, vol, mu, lam, act_p, fiber, inv_dx, dt):
    """Particle-to-grid transfer only; returns (window origin, momentum (W, H, 2), mass (W, H))."""
    st = _p2g(x, v, C, F, mass, vol, mu, lam, act_p, fiber, inv_dx, dt)
    W, H = st["shape"]
    return st["lo"], st["mv"].reshape(W, H, 2), st["m"].reshape(W, H)
