# Compiled twins of the reference kernels (see _reference.py for the
# contracts; signatures and branch structure are kept identical).

import numpy as np

cimport numpy as cnp
from libc.math cimport INFINITY

cnp.import_array()


cdef inline double _bilin(const double[:, ::1] plane, double u, double v,
                          Py_ssize_t h, Py_ssize_t w) noexcept nogil:
    cdef Py_ssize_t u0 = <Py_ssize_t>u
    cdef Py_ssize_t v0 = <Py_ssize_t>v
    if u0 > w - 2:
        u0 = w - 2
    if v0 > h - 2:
        v0 = h - 2
    if u0 < 0:
        u0 = 0
    if v0 < 0:
        v0 = 0
    cdef double fu = u - u0
    cdef double fv = v - v0
    return ((1.0 - fv) * ((1.0 - fu) * plane[v0, u0] + fu * plane[v0, u0 + 1])
            + fv * ((1.0 - fu) * plane[v0 + 1, u0] + fu * plane[v0 + 1, u0 + 1]))


def sample_patches(const double[:, ::1] plane,
                   const double[::1] u, const double[::1] v,
                   const double[::1] off_u, const double[::1] off_v,
                   double border=0.0):
    cdef Py_ssize_t h = plane.shape[0], w = plane.shape[1]
    cdef Py_ssize_t N = u.shape[0], P = off_u.shape[0]
    vals_arr = np.zeros((N, P))
    ok_arr = np.zeros(N, dtype=np.uint8)
    cdef double[:, ::1] vals = vals_arr
    cdef unsigned char[::1] ok = ok_arr
    cdef Py_ssize_t n, k
    cdef double uu, vv
    cdef bint good
    with nogil:
        for n in range(N):
            good = True
            for k in range(P):
                uu = u[n] + off_u[k]
                vv = v[n] + off_v[k]
                if not (border <= uu <= w - 1 - border and
                        border <= vv <= h - 1 - border):
                    good = False
                    break
            if not good:
                continue
            ok[n] = 1
            for k in range(P):
                vals[n, k] = _bilin(plane, u[n] + off_u[k], v[n] + off_v[k], h, w)
    return vals_arr, ok_arr


def warp_points(double fu, double fv, double cu, double cv,
                const double[:, ::1] R, const double[::1] t,
                const double[::1] xn, const double[::1] yn,
                const double[::1] idepth, double z_min):
    cdef Py_ssize_t N = xn.shape[0]
    pu_arr = np.zeros(N); pv_arr = np.zeros(N)
    un_arr = np.zeros(N); vn_arr = np.zeros(N)
    iz_arr = np.zeros(N)
    ok_arr = np.zeros(N, dtype=np.uint8)
    cdef double[::1] pu = pu_arr, pv = pv_arr, un = un_arr, vn = vn_arr, iz = iz_arr
    cdef unsigned char[::1] ok = ok_arr
    cdef Py_ssize_t n
    cdef double x, y, rho, X, Y, Z
    with nogil:
        for n in range(N):
            rho = idepth[n]
            x = xn[n] / rho
            y = yn[n] / rho
            X = R[0, 0] * x + R[0, 1] * y + R[0, 2] / rho + t[0]
            Y = R[1, 0] * x + R[1, 1] * y + R[1, 2] / rho + t[1]
            Z = R[2, 0] * x + R[2, 1] * y + R[2, 2] / rho + t[2]
            if Z > z_min:
                ok[n] = 1
                un[n] = X / Z
                vn[n] = Y / Z
                iz[n] = 1.0 / Z
                pu[n] = fu * un[n] + cu
                pv[n] = fv * vn[n] + cv
    return pu_arr, pv_arr, un_arr, vn_arr, iz_arr, ok_arr


def photometric_blocks(const double[:, ::1] I,
                       const double[:, ::1] Gu, const double[:, ::1] Gv,
                       double fu, double fv, double cu, double cv,
                       const double[:, ::1] R, const double[::1] t,
                       double gain, double b_host, double b_tgt,
                       const double[:, ::1] xn, const double[:, ::1] yn,
                       const double[:, ::1] ref, const double[::1] idepth,
                       double border, double z_min, bint with_grads=True):
    cdef Py_ssize_t h = I.shape[0], w = I.shape[1]
    cdef Py_ssize_t N = xn.shape[0], P = xn.shape[1]
    res_arr = np.zeros((N, P)); gu_arr = np.zeros((N, P)); gv_arr = np.zeros((N, P))
    un_arr = np.zeros((N, P)); vn_arr = np.zeros((N, P)); iz_arr = np.zeros((N, P))
    valid_arr = np.zeros(N, dtype=np.uint8)
    cdef double[:, ::1] res = res_arr, gu = gu_arr, gv = gv_arr
    cdef double[:, ::1] un = un_arr, vn = vn_arr, iz = iz_arr
    cdef unsigned char[::1] valid = valid_arr
    # per-feature scratch for the warp pass
    tmp = np.zeros((5, P))
    cdef double[:, ::1] s = tmp
    cdef Py_ssize_t n, k
    cdef double x, y, rho, X, Y, Z, puk, pvk
    cdef bint good
    with nogil:
        for n in range(N):
            rho = idepth[n]
            good = True
            for k in range(P):
                x = xn[n, k] / rho
                y = yn[n, k] / rho
                X = R[0, 0] * x + R[0, 1] * y + R[0, 2] / rho + t[0]
                Y = R[1, 0] * x + R[1, 1] * y + R[1, 2] / rho + t[1]
                Z = R[2, 0] * x + R[2, 1] * y + R[2, 2] / rho + t[2]
                if Z <= z_min:
                    good = False
                    break
                puk = fu * X / Z + cu
                pvk = fv * Y / Z + cv
                if not (border <= puk <= w - 1 - border and
                        border <= pvk <= h - 1 - border):
                    good = False
                    break
                s[0, k] = puk
                s[1, k] = pvk
                s[2, k] = X / Z
                s[3, k] = Y / Z
                s[4, k] = 1.0 / Z
            if not good:
                continue
            valid[n] = 1
            for k in range(P):
                un[n, k] = s[2, k]
                vn[n, k] = s[3, k]
                iz[n, k] = s[4, k]
                res[n, k] = (_bilin(I, s[0, k], s[1, k], h, w) - b_tgt) \
                    - gain * (ref[n, k] - b_host)
                if with_grads:
                    gu[n, k] = _bilin(Gu, s[0, k], s[1, k], h, w)
                    gv[n, k] = _bilin(Gv, s[0, k], s[1, k], h, w)
    return res_arr, gu_arr, gv_arr, un_arr, vn_arr, iz_arr, valid_arr


# Bresenham circle of radius 3, clockwise from 12 o'clock (du, dv).
_RING_U = (0, 1, 2, 3, 3, 3, 2, 1, 0, -1, -2, -3, -3, -3, -2, -1)
_RING_V = (-3, -3, -2, -1, 0, 1, 2, 3, 3, 3, 2, 1, 0, -1, -2, -3)


def fast_corners(const double[:, ::1] I, double threshold, int margin=3):
    cdef Py_ssize_t h = I.shape[0], w = I.shape[1]
    cdef int m = margin if margin > 3 else 3
    if h - 2 * m <= 0 or w - 2 * m <= 0:
        return np.zeros((0, 2), dtype=np.int32)
    mask_arr = np.zeros((h, w), dtype=np.uint8)
    cdef unsigned char[:, ::1] mask = mask_arr
    cdef int ru[16]
    cdef int rv[16]
    cdef Py_ssize_t k
    for k in range(16):
        ru[k] = _RING_U[k]
        rv[k] = _RING_V[k]
    cdef Py_ssize_t u, v, s, j
    cdef double c, lo, hi, val
    cdef int state[16]
    cdef bint found, run_ok
    cdef int nb, nd
    with nogil:
        for v in range(m, h - m):
            for u in range(m, w - m):
                c = I[v, u]
                hi = c + threshold
                lo = c - threshold
                nb = 0
                nd = 0
                for k in range(16):
                    val = I[v + rv[k], u + ru[k]]
                    if val > hi:
                        state[k] = 1
                        nb += 1
                    elif val < lo:
                        state[k] = -1
                        nd += 1
                    else:
                        state[k] = 0
                if nb < 9 and nd < 9:
                    continue
                found = False
                for s in range(16):
                    if state[s] == 0:
                        continue
                    run_ok = True
                    for j in range(1, 9):
                        if state[(s + j) % 16] != state[s]:
                            run_ok = False
                            break
                    if run_ok:
                        found = True
                        break
                if found:
                    mask[v, u] = 1
    vs, us = np.nonzero(mask_arr)
    return np.stack([us, vs], axis=1).astype(np.int32)


def epipolar_ssd(const double[:, ::1] I,
                 const double[::1] pu, const double[::1] pv,
                 const double[::1] ref,
                 const double[::1] off_u, const double[::1] off_v,
                 double gain, double b_host, double b_tgt, double border):
    cdef Py_ssize_t h = I.shape[0], w = I.shape[1]
    cdef Py_ssize_t M = pu.shape[0], P = ref.shape[0]
    ssd_arr = np.full(M, np.inf)
    ok_arr = np.zeros(M, dtype=np.uint8)
    cdef double[::1] ssd = ssd_arr
    cdef unsigned char[::1] ok = ok_arr
    cdef Py_ssize_t n, k
    cdef double uu, vv, r, acc
    cdef bint good
    with nogil:
        for n in range(M):
            good = True
            for k in range(P):
                uu = pu[n] + off_u[k]
                vv = pv[n] + off_v[k]
                if not (border <= uu <= w - 1 - border and
                        border <= vv <= h - 1 - border):
                    good = False
                    break
            if not good:
                continue
            ok[n] = 1
            acc = 0.0
            for k in range(P):
                r = (_bilin(I, pu[n] + off_u[k], pv[n] + off_v[k], h, w) - b_tgt) \
                    - gain * (ref[k] - b_host)
                acc += r * r
            ssd[n] = acc
    return ssd_arr, ok_arr
