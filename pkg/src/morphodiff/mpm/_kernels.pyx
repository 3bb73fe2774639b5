# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled MLS-MPM substep and adjoint; mirrors ``_kernels_py`` exactly in API."""
import numpy as np
cimport numpy as cnp
from libc.math cimport floor, atan2, cos, sin, fabs

cnp.import_array()

cdef enum:
    MAXBOX = 32


cdef inline void _wts(double xp, long* base, double* fx, double* w, double* dw) noexcept nogil:
    cdef long b = <long>floor(xp - 0.5)
    cdef double f = xp - b
    base[0] = b
    fx[0] = f
    w[0] = 0.5 * (1.5 - f) * (1.5 - f)
    w[1] = 0.75 - (f - 1.0) * (f - 1.0)
    w[2] = 0.5 * (f - 0.5) * (f - 0.5)
    dw[0] = f - 1.5
    dw[1] = -2.0 * (f - 1.0)
    dw[2] = f - 0.5


cdef inline void _stress(double* F, double mu, double lam, double act, double* fib,
                         double* K, double* R, double* J, double* g) noexcept nogil:
    cdef double a = F[0], b = F[1], c = F[2], d = F[3]
    cdef double th = atan2(c - b, a + d)
    cdef double cs = cos(th), sn = sin(th)
    R[0] = cs; R[1] = -sn; R[2] = sn; R[3] = cs
    J[0] = a * d - b * c
    cdef double m00 = a - cs, m01 = b + sn, m10 = c - sn, m11 = d - cs
    cdef double mu2 = 2.0 * mu
    # (F - R) F^T
    K[0] = mu2 * (m00 * a + m01 * b)
    K[1] = mu2 * (m00 * c + m01 * d)
    K[2] = mu2 * (m10 * a + m11 * b)
    K[3] = mu2 * (m10 * c + m11 * d)
    cdef double iso = lam * (J[0] - 1.0) * J[0]
    K[0] += iso
    K[3] += iso
    g[0] = a * fib[0] + b * fib[1]
    g[1] = c * fib[0] + d * fib[1]
    K[0] += act * g[0] * g[0]
    K[1] += act * g[0] * g[1]
    K[2] += act * g[1] * g[0]
    K[3] += act * g[1] * g[1]


cdef inline void _project(double* v, double X, double Y, double[:, ::1] boxes, int nb,
                          double friction, double* stages, int* hit) noexcept nogil:
    """Apply colliders in order; stores the velocity entering each box and a hit code."""
    cdef int k, axis, face
    cdef double x0, y0, x1, y1, dmin, dd, sign, vn, vt, mag
    for k in range(nb):
        stages[2 * k] = v[0]
        stages[2 * k + 1] = v[1]
        hit[k] = 0
        x0 = boxes[k, 0]; y0 = boxes[k, 1]; x1 = boxes[k, 2]; y1 = boxes[k, 3]
        if not (X >= x0 and X <= x1 and Y >= y0 and Y <= y1):
            continue
        if boxes[k, 4] == 1.0:
            v[0] = 0.0
            v[1] = 0.0
            hit[k] = 1
            continue
        face = 0
        dmin = X - x0
        dd = x1 - X
        if dd < dmin:
            dmin = dd; face = 1
        dd = Y - y0
        if dd < dmin:
            dmin = dd; face = 2
        dd = y1 - Y
        if dd < dmin:
            dmin = dd; face = 3
        axis = 0 if face < 2 else 1
        sign = -1.0 if face % 2 == 0 else 1.0
        vn = v[axis] * sign
        vt = v[1 - axis]
        if vn < 0:
            mag = fabs(vt) + friction * vn
            if mag > 0:
                v[1 - axis] = mag if vt > 0 else (-mag if vt < 0 else 0.0)
                hit[k] = 2 + 4 * face  # sliding
            else:
                v[1 - axis] = 0.0
                hit[k] = 3 + 4 * face  # stuck
            v[axis] = 0.0
        else:
            hit[k] = 0


cdef inline void _project_back(double* g, double[:, ::1] boxes, int nb, double friction,
                               double* stages, int* hit) noexcept nogil:
    cdef int k, axis, face, code
    cdef double sign, gn, gt, vt, sgt
    for k in range(nb - 1, -1, -1):
        code = hit[k]
        if code == 0:
            continue
        if code == 1:
            g[0] = 0.0
            g[1] = 0.0
            continue
        face = (code - 2) // 4
        axis = 0 if face < 2 else 1
        sign = -1.0 if face % 2 == 0 else 1.0
        gt = g[1 - axis]
        if (code - 2) % 4 == 0:
            vt = stages[2 * k + 1 - axis]
            sgt = 1.0 if vt > 0 else (-1.0 if vt < 0 else 0.0)
            g[axis] = gt * friction * sgt * sign
            g[1 - axis] = gt
        else:
            g[0] = 0.0
            g[1] = 0.0


cdef void _window(double[:, ::1] x, double inv_dx, long* lo, long* shape) noexcept nogil:
    cdef Py_ssize_t p, n = x.shape[0]
    cdef long bx, by, lx = 0, ly = 0, hx = 0, hy = 0
    for p in range(n):
        bx = <long>floor(x[p, 0] * inv_dx - 0.5)
        by = <long>floor(x[p, 1] * inv_dx - 0.5)
        if p == 0 or bx < lx:
            lx = bx
        if p == 0 or by < ly:
            ly = by
        if p == 0 or bx > hx:
            hx = bx
        if p == 0 or by > hy:
            hy = by
    lo[0] = lx; lo[1] = ly
    shape[0] = hx + 3 - lx
    shape[1] = hy + 3 - ly


cdef void _p2g(double[:, ::1] x, double[:, ::1] v, double[:, :, ::1] C, double[:, :, ::1] F,
               double[::1] mass, double[::1] vol, double[::1] mu, double[::1] lam,
               double[::1] act_p, double[:, ::1] fiber, double inv_dx, double dt,
               long* lo, long* shape, double[:, ::1] mv, double[::1] m, double[:, ::1] Aout) noexcept nogil:
    cdef Py_ssize_t p, n = x.shape[0]
    cdef long bx, by, node
    cdef int i, j
    cdef double fxx, fxy, wx[3], wy[3], dwx[3], dwy[3]
    cdef double Fp[4], K[4], R[4], J, g[2], fib[2], A[4]
    cdef double dx = 1.0 / inv_dx, coef, wt, dpx, dpy, mvx, mvy
    for p in range(n):
        _wts(x[p, 0] * inv_dx, &bx, &fxx, wx, dwx)
        _wts(x[p, 1] * inv_dx, &by, &fxy, wy, dwy)
        Fp[0] = F[p, 0, 0]; Fp[1] = F[p, 0, 1]; Fp[2] = F[p, 1, 0]; Fp[3] = F[p, 1, 1]
        fib[0] = fiber[p, 0]; fib[1] = fiber[p, 1]
        _stress(Fp, mu[p], lam[p], act_p[p], fib, K, R, &J, g)
        coef = -dt * vol[p] * 4.0 * inv_dx * inv_dx
        A[0] = coef * K[0] + mass[p] * C[p, 0, 0]
        A[1] = coef * K[1] + mass[p] * C[p, 0, 1]
        A[2] = coef * K[2] + mass[p] * C[p, 1, 0]
        A[3] = coef * K[3] + mass[p] * C[p, 1, 1]
        Aout[p, 0] = A[0]; Aout[p, 1] = A[1]; Aout[p, 2] = A[2]; Aout[p, 3] = A[3]
        mvx = mass[p] * v[p, 0]
        mvy = mass[p] * v[p, 1]
        for i in range(3):
            for j in range(3):
                wt = wx[i] * wy[j]
                dpx = (i - fxx) * dx
                dpy = (j - fxy) * dx
                node = (bx + i - lo[0]) * shape[1] + (by + j - lo[1])
                mv[node, 0] += wt * (mvx + A[0] * dpx + A[1] * dpy)
                mv[node, 1] += wt * (mvy + A[2] * dpx + A[3] * dpy)
                m[node] += wt * mass[p]


cdef void _grid(double[:, ::1] mv, double[::1] m, long* lo, long* shape, double inv_dx, double dt,
                double gx, double gy, double[:, ::1] boxes, double friction,
                double[:, ::1] vout) noexcept nogil:
    cdef Py_ssize_t node, nn = m.shape[0]
    cdef int nb = boxes.shape[0]
    cdef double vv[2], stages[2 * MAXBOX], X, Y, dx = 1.0 / inv_dx
    cdef int hit[MAXBOX]
    for node in range(nn):
        if m[node] > 0:
            vv[0] = mv[node, 0] / m[node] + dt * gx
            vv[1] = mv[node, 1] / m[node] + dt * gy
            X = (node // shape[1] + lo[0]) * dx
            Y = (node % shape[1] + lo[1]) * dx
            _project(vv, X, Y, boxes, nb, friction, stages, hit)
            vout[node, 0] = vv[0]
            vout[node, 1] = vv[1]
        else:
            vout[node, 0] = 0.0
            vout[node, 1] = 0.0


def _check_boxes(boxes):
    b = np.ascontiguousarray(boxes, dtype=np.float64).reshape(-1, 5)
    if b.shape[0] > MAXBOX:
        raise ValueError(f"at most {MAXBOX} collider boxes")
    return b


def p2g(double[:, ::1] x, double[:, ::1] v, double[:, :, ::1] C, double[:, :, ::1] F,
        double[::1] mass, double[::1] vol, double[::1] mu, double[::1] lam,
        double[::1] act_p, double[:, ::1] fiber, double inv_dx, double dt):
    """Particle-to-grid transfer only; returns (window origin, momentum (W, H, 2), mass (W, H))."""
    cdef long lo[2]
    cdef long shape[2]
    _window(x, inv_dx, lo, shape)
    nn = shape[0] * shape[1]
    mv = np.zeros((nn, 2))
    m = np.zeros(nn)
    A = np.empty((x.shape[0], 4))
    _p2g(x, v, C, F, mass, vol, mu, lam, act_p, fiber, inv_dx, dt, lo, shape, mv, m, A)
    return np.array([lo[0], lo[1]]), mv.reshape(shape[0], shape[1], 2), m.reshape(shape[0], shape[1])


def substep(double[:, ::1] x, double[:, ::1] v, double[:, :, ::1] C, double[:, :, ::1] F,
            double[::1] mass, double[::1] vol, double[::1] mu, double[::1] lam,
            double[::1] act_p, double[:, ::1] fiber, double inv_dx, double dt, gravity, boxes,
            double friction, double[:, ::1] x_out, double[:, ::1] v_out, double[:, :, ::1] C_out,
            double[:, :, ::1] F_out):
    """Advance one explicit MLS-MPM substep; writes into the ``*_out`` arrays."""
    cdef double[:, ::1] bx = _check_boxes(boxes)
    cdef double gx = gravity[0], gy = gravity[1]
    cdef long lo[2]
    cdef long shape[2]
    _window(x, inv_dx, lo, shape)
    cdef Py_ssize_t nn = shape[0] * shape[1]
    cdef double[:, ::1] mv = np.zeros((nn, 2))
    cdef double[::1] m = np.zeros(nn)
    cdef double[:, ::1] gvel = np.empty((nn, 2))
    cdef double[:, ::1] A = np.empty((x.shape[0], 4))
    cdef Py_ssize_t p, n = x.shape[0]
    cdef long bxi, byi, node
    cdef int i, j
    cdef double fxx, fxy, wx[3], wy[3], dwx[3], dwy[3], wt, dpx, dpy, gvx, gvy
    cdef double nvx, nvy, c00, c01, c10, c11, c4 = 4.0 * inv_dx * inv_dx, dx = 1.0 / inv_dx
    with nogil:
        _p2g(x, v, C, F, mass, vol, mu, lam, act_p, fiber, inv_dx, dt, lo, shape, mv, m, A)
        _grid(mv, m, lo, shape, inv_dx, dt, gx, gy, bx, friction, gvel)
        for p in range(n):
            _wts(x[p, 0] * inv_dx, &bxi, &fxx, wx, dwx)
            _wts(x[p, 1] * inv_dx, &byi, &fxy, wy, dwy)
            nvx = 0.0; nvy = 0.0; c00 = 0.0; c01 = 0.0; c10 = 0.0; c11 = 0.0
            for i in range(3):
                for j in range(3):
                    wt = wx[i] * wy[j]
                    dpx = (i - fxx) * dx
                    dpy = (j - fxy) * dx
                    node = (bxi + i - lo[0]) * shape[1] + (byi + j - lo[1])
                    gvx = gvel[node, 0]
                    gvy = gvel[node, 1]
                    nvx = nvx + wt * gvx
                    nvy = nvy + wt * gvy
                    c00 = c00 + c4 * wt * gvx * dpx
                    c01 = c01 + c4 * wt * gvx * dpy
                    c10 = c10 + c4 * wt * gvy * dpx
                    c11 = c11 + c4 * wt * gvy * dpy
            v_out[p, 0] = nvx
            v_out[p, 1] = nvy
            C_out[p, 0, 0] = c00; C_out[p, 0, 1] = c01; C_out[p, 1, 0] = c10; C_out[p, 1, 1] = c11
            x_out[p, 0] = x[p, 0] + dt * nvx
            x_out[p, 1] = x[p, 1] + dt * nvy
            F_out[p, 0, 0] = F[p, 0, 0] + dt * (c00 * F[p, 0, 0] + c01 * F[p, 1, 0])
            F_out[p, 0, 1] = F[p, 0, 1] + dt * (c00 * F[p, 0, 1] + c01 * F[p, 1, 1])
            F_out[p, 1, 0] = F[p, 1, 0] + dt * (c10 * F[p, 0, 0] + c11 * F[p, 1, 0])
            F_out[p, 1, 1] = F[p, 1, 1] + dt * (c10 * F[p, 0, 1] + c11 * F[p, 1, 1])


def substep_backward(double[:, ::1] x, double[:, ::1] v, double[:, :, ::1] C, double[:, :, ::1] F,
                     double[::1] mass, double[::1] vol, double[::1] mu, double[::1] lam,
                     double[::1] act_p, double[:, ::1] fiber, double inv_dx, double dt, gravity, boxes,
                     double friction, double[:, ::1] gx, double[:, ::1] gv, double[:, :, ::1] gC,
                     double[:, :, ::1] gF, double[::1] g_act_p, double[::1] g_mass, double[::1] g_vol):
    """Reverse one substep; see ``_kernels_py.substep_backward``."""
    cdef double[:, ::1] bxs = _check_boxes(boxes)
    cdef int nb = bxs.shape[0]
    cdef double grx = gravity[0], gry = gravity[1]
    cdef long lo[2]
    cdef long shape[2]
    _window(x, inv_dx, lo, shape)
    cdef Py_ssize_t nn = shape[0] * shape[1]
    cdef Py_ssize_t n = x.shape[0]
    cdef double[:, ::1] mv = np.zeros((nn, 2))
    cdef double[::1] m = np.zeros(nn)
    cdef double[:, ::1] gvel = np.empty((nn, 2))
    cdef double[:, ::1] A = np.empty((n, 4))
    cdef double[:, ::1] ggv = np.zeros((nn, 2))
    cdef double[:, ::1] gmv = np.zeros((nn, 2))
    cdef double[::1] gm = np.zeros(nn)
    cdef double[:, ::1] gfx = np.zeros((n, 2))
    cdef Py_ssize_t p, node
    cdef long bxi, byi
    cdef int i, j
    cdef double fxx, fxy, wx[3], wy[3], dwx[3], dwy[3], wt, dpx, dpy, gvx, gvy
    cdef double c4 = 4.0 * inv_dx * inv_dx, dx = 1.0 / inv_dx
    cdef double nc[4], gnc[4], gnv[2], Fp[4], gFp[4], gw, gdx, gdy
    cdef double vv[2], stages[2 * MAXBOX], X, Y, gg[2], velx, vely
    cdef int hit[MAXBOX]
    cdef double gpx, gpy, gmn, gA[4], mvx, mvy, gK[4], K[4], R[4], J, g[2], fib[2], coef
    cdef double a, b, c, d, mu2, gR[4], gth, xx, yy, r2, gJ, sx, sy, cs, sn
    with nogil:
        _p2g(x, v, C, F, mass, vol, mu, lam, act_p, fiber, inv_dx, dt, lo, shape, mv, m, A)
        _grid(mv, m, lo, shape, inv_dx, dt, grx, gry, bxs, friction, gvel)

        # G2P adjoint
        for p in range(n):
            _wts(x[p, 0] * inv_dx, &bxi, &fxx, wx, dwx)
            _wts(x[p, 1] * inv_dx, &byi, &fxy, wy, dwy)
            nc[0] = 0.0; nc[1] = 0.0; nc[2] = 0.0; nc[3] = 0.0
            for i in range(3):
                for j in range(3):
                    wt = wx[i] * wy[j]
                    dpx = (i - fxx) * dx
                    dpy = (j - fxy) * dx
                    node = (bxi + i - lo[0]) * shape[1] + (byi + j - lo[1])
                    nc[0] += c4 * wt * gvel[node, 0] * dpx
                    nc[1] += c4 * wt * gvel[node, 0] * dpy
                    nc[2] += c4 * wt * gvel[node, 1] * dpx
                    nc[3] += c4 * wt * gvel[node, 1] * dpy
            Fp[0] = F[p, 0, 0]; Fp[1] = F[p, 0, 1]; Fp[2] = F[p, 1, 0]; Fp[3] = F[p, 1, 1]
            gFp[0] = gF[p, 0, 0]; gFp[1] = gF[p, 0, 1]; gFp[2] = gF[p, 1, 0]; gFp[3] = gF[p, 1, 1]
            # g_nC = gC + dt gF F^T
            gnc[0] = gC[p, 0, 0] + dt * (gFp[0] * Fp[0] + gFp[1] * Fp[1])
            gnc[1] = gC[p, 0, 1] + dt * (gFp[0] * Fp[2] + gFp[1] * Fp[3])
            gnc[2] = gC[p, 1, 0] + dt * (gFp[2] * Fp[0] + gFp[3] * Fp[1])
            gnc[3] = gC[p, 1, 1] + dt * (gFp[2] * Fp[2] + gFp[3] * Fp[3])
            # g_F = gF + dt nC^T gF
            gF[p, 0, 0] = gFp[0] + dt * (nc[0] * gFp[0] + nc[2] * gFp[2])
            gF[p, 0, 1] = gFp[1] + dt * (nc[0] * gFp[1] + nc[2] * gFp[3])
            gF[p, 1, 0] = gFp[2] + dt * (nc[1] * gFp[0] + nc[3] * gFp[2])
            gF[p, 1, 1] = gFp[3] + dt * (nc[1] * gFp[1] + nc[3] * gFp[3])
            gnv[0] = gv[p, 0] + dt * gx[p, 0]
            gnv[1] = gv[p, 1] + dt * gx[p, 1]
            for i in range(3):
                for j in range(3):
                    wt = wx[i] * wy[j]
                    dpx = (i - fxx) * dx
                    dpy = (j - fxy) * dx
                    node = (bxi + i - lo[0]) * shape[1] + (byi + j - lo[1])
                    gvx = gvel[node, 0]
                    gvy = gvel[node, 1]
                    ggv[node, 0] += wt * gnv[0] + c4 * wt * (gnc[0] * dpx + gnc[1] * dpy)
                    ggv[node, 1] += wt * gnv[1] + c4 * wt * (gnc[2] * dpx + gnc[3] * dpy)
                    gw = gnv[0] * gvx + gnv[1] * gvy + c4 * (gvx * (gnc[0] * dpx + gnc[1] * dpy)
                                                             + gvy * (gnc[2] * dpx + gnc[3] * dpy))
                    gdx = c4 * wt * (gnc[0] * gvx + gnc[2] * gvy)
                    gdy = c4 * wt * (gnc[1] * gvx + gnc[3] * gvy)
                    gfx[p, 0] += gw * dwx[i] * wy[j] - dx * gdx
                    gfx[p, 1] += gw * wx[i] * dwy[j] - dx * gdy

        # grid adjoint
        for node in range(nn):
            if m[node] > 0:
                vv[0] = mv[node, 0] / m[node] + dt * grx
                vv[1] = mv[node, 1] / m[node] + dt * gry
                X = (node // shape[1] + lo[0]) * dx
                Y = (node % shape[1] + lo[1]) * dx
                _project(vv, X, Y, bxs, nb, friction, stages, hit)
                gg[0] = ggv[node, 0]
                gg[1] = ggv[node, 1]
                _project_back(gg, bxs, nb, friction, stages, hit)
                velx = mv[node, 0] / m[node]
                vely = mv[node, 1] / m[node]
                gmv[node, 0] = gg[0] / m[node]
                gmv[node, 1] = gg[1] / m[node]
                gm[node] = -(gg[0] * velx + gg[1] * vely) / m[node]

        # P2G adjoint
        for p in range(n):
            _wts(x[p, 0] * inv_dx, &bxi, &fxx, wx, dwx)
            _wts(x[p, 1] * inv_dx, &byi, &fxy, wy, dwy)
            gA[0] = 0.0; gA[1] = 0.0; gA[2] = 0.0; gA[3] = 0.0
            sx = 0.0; sy = 0.0
            mvx = mass[p] * v[p, 0]
            mvy = mass[p] * v[p, 1]
            for i in range(3):
                for j in range(3):
                    wt = wx[i] * wy[j]
                    dpx = (i - fxx) * dx
                    dpy = (j - fxy) * dx
                    node = (bxi + i - lo[0]) * shape[1] + (byi + j - lo[1])
                    gpx = gmv[node, 0]
                    gpy = gmv[node, 1]
                    gmn = gm[node]
                    sx += wt * mass[p] * gpx
                    sy += wt * mass[p] * gpy
                    gA[0] += wt * gpx * dpx
                    gA[1] += wt * gpx * dpy
                    gA[2] += wt * gpy * dpx
                    gA[3] += wt * gpy * dpy
                    gdx = wt * (A[p, 0] * gpx + A[p, 2] * gpy)
                    gdy = wt * (A[p, 1] * gpx + A[p, 3] * gpy)
                    gw = (gpx * (mvx + A[p, 0] * dpx + A[p, 1] * dpy)
                          + gpy * (mvy + A[p, 2] * dpx + A[p, 3] * dpy) + gmn * mass[p])
                    g_mass[p] += wt * (gpx * v[p, 0] + gpy * v[p, 1] + gmn)
                    gfx[p, 0] += gw * dwx[i] * wy[j] - dx * gdx
                    gfx[p, 1] += gw * wx[i] * dwy[j] - dx * gdy
            gv[p, 0] = sx
            gv[p, 1] = sy
            gx[p, 0] += gfx[p, 0] * inv_dx
            gx[p, 1] += gfx[p, 1] * inv_dx

            g_mass[p] += gA[0] * C[p, 0, 0] + gA[1] * C[p, 0, 1] + gA[2] * C[p, 1, 0] + gA[3] * C[p, 1, 1]
            gC[p, 0, 0] = mass[p] * gA[0]
            gC[p, 0, 1] = mass[p] * gA[1]
            gC[p, 1, 0] = mass[p] * gA[2]
            gC[p, 1, 1] = mass[p] * gA[3]

            Fp[0] = F[p, 0, 0]; Fp[1] = F[p, 0, 1]; Fp[2] = F[p, 1, 0]; Fp[3] = F[p, 1, 1]
            fib[0] = fiber[p, 0]; fib[1] = fiber[p, 1]
            _stress(Fp, mu[p], lam[p], act_p[p], fib, K, R, &J, g)
            g_vol[p] += -dt * c4 * (gA[0] * K[0] + gA[1] * K[1] + gA[2] * K[2] + gA[3] * K[3])
            coef = -dt * vol[p] * c4
            gK[0] = coef * gA[0]; gK[1] = coef * gA[1]; gK[2] = coef * gA[2]; gK[3] = coef * gA[3]

            a = Fp[0]; b = Fp[1]; c = Fp[2]; d = Fp[3]
            mu2 = 2.0 * mu[p]
            # gF += 2mu (gK F + gK^T (F - R))
            gF[p, 0, 0] += mu2 * (gK[0] * a + gK[1] * c + gK[0] * (a - R[0]) + gK[2] * (c - R[2]))
            gF[p, 0, 1] += mu2 * (gK[0] * b + gK[1] * d + gK[0] * (b - R[1]) + gK[2] * (d - R[3]))
            gF[p, 1, 0] += mu2 * (gK[2] * a + gK[3] * c + gK[1] * (a - R[0]) + gK[3] * (c - R[2]))
            gF[p, 1, 1] += mu2 * (gK[2] * b + gK[3] * d + gK[1] * (b - R[1]) + gK[3] * (d - R[3]))
            gR[0] = -mu2 * (gK[0] * a + gK[1] * c)
            gR[1] = -mu2 * (gK[0] * b + gK[1] * d)
            gR[2] = -mu2 * (gK[2] * a + gK[3] * c)
            gR[3] = -mu2 * (gK[2] * b + gK[3] * d)
            cs = R[0]; sn = R[2]
            gth = gR[0] * (-sn) + gR[1] * (-cs) + gR[2] * cs + gR[3] * (-sn)
            xx = a + d
            yy = c - b
            r2 = xx * xx + yy * yy
            gF[p, 0, 0] += gth * (-yy / r2)
            gF[p, 1, 1] += gth * (-yy / r2)
            gF[p, 1, 0] += gth * (xx / r2)
            gF[p, 0, 1] += gth * (-xx / r2)
            gJ = lam[p] * (2.0 * J - 1.0) * (gK[0] + gK[3])
            gF[p, 0, 0] += gJ * d
            gF[p, 0, 1] += gJ * (-c)
            gF[p, 1, 0] += gJ * (-b)
            gF[p, 1, 1] += gJ * a
            # actuation: K += act g g^T, g = F f
            gg[0] = act_p[p] * ((gK[0] + gK[0]) * g[0] + (gK[1] + gK[2]) * g[1])
            gg[1] = act_p[p] * ((gK[2] + gK[1]) * g[0] + (gK[3] + gK[3]) * g[1])
            gF[p, 0, 0] += gg[0] * fib[0]
            gF[p, 0, 1] += gg[0] * fib[1]
            gF[p, 1, 0] += gg[1] * fib[0]
            gF[p, 1, 1] += gg[1] * fib[1]
            g_act_p[p] += gK[0] * g[0] * g[0] + gK[1] * g[0] * g[1] + gK[2] * g[1] * g[0] + gK[3] * g[1] * g[1]
