"""Hot loops: layer simulation over time, its reverse-time adjoint, mean-shift.

Every kernel exists twice, a numba version (``*_nb``) and a vectorised numpy
version (``*_np``).  The public names at the bottom of the module point at
one or the other depending on :data:`metaneuron._accel.USE_NUMBA`.

Array layout is time-major: currents, spikes and states are ``(T, B, N)``.
Neuron kinds are coded ``0`` = first order (LIF), ``1`` = second order.
"""

import numpy as np

from metaneuron._accel import USE_NUMBA, njit

FIRST_ORDER = 0
SECOND_ORDER = 1


# --------------------------------------------------------------------------
# forward
# --------------------------------------------------------------------------

@njit
def layer_forward_nb(cur, kind, ta, tb, tc, td, v_th, g, v_reset, v0, u0,
                     dt, smooth_k, limit):
    T, B, N = cur.shape
    spikes = np.empty_like(cur)
    v_pre = np.empty_like(cur)
    v_post = np.empty_like(cur)
    u_post = np.empty_like(cur)
    err = np.full(3, -1, dtype=np.int64)
    v = np.empty((B, N), dtype=cur.dtype)
    u = np.empty((B, N), dtype=cur.dtype)
    for bi in range(B):
        for j in range(N):
            v[bi, j] = v0[j]
            u[bi, j] = u0[j]
    for t in range(T):
        for bi in range(B):
            for j in range(N):
                vv = v[bi, j]
                uu = u[bi, j]
                i = cur[t, bi, j]
                if kind[j] == SECOND_ORDER:
                    vn = vv + dt * (vv * vv - vv - uu + i)
                    un = uu + dt * ta[j] * (tb[j] * vv - uu)
                    rv = tc[j]
                    inc = td[j]
                else:
                    vn = vv + dt * (-g[j] * vv + i)
                    un = uu
                    rv = v_reset[j]
                    inc = 0.0
                if smooth_k > 0.0:
                    s = 1.0 / (1.0 + np.exp(-smooth_k * (vn - v_th[j])))
                    vp = s * rv + (1.0 - s) * vn
                    up = un + inc * s
                elif vn > v_th[j]:
                    s = 1.0
                    vp = rv
                    up = un + inc
                else:
                    s = 0.0
                    vp = vn
                    up = un
                spikes[t, bi, j] = s
                v_pre[t, bi, j] = vn
                v_post[t, bi, j] = vp
                u_post[t, bi, j] = up
                v[bi, j] = vp
                u[bi, j] = up
                if not (abs(vp) <= limit and abs(up) <= limit):
                    err[0] = t
                    err[1] = bi
                    err[2] = j
                    return spikes, v_pre, v_post, u_post, err
    return spikes, v_pre, v_post, u_post, err


def layer_forward_np(cur, kind, ta, tb, tc, td, v_th, g, v_reset, v0, u0,
                     dt, smooth_k, limit):
    T, B, N = cur.shape
    second = kind == SECOND_ORDER
    reset_to = np.where(second, tc, v_reset)
    bump = np.where(second, td, 0.0)
    spikes = np.zeros_like(cur)
    v_pre = np.zeros_like(cur)
    v_post = np.zeros_like(cur)
    u_post = np.zeros_like(cur)
    err = np.full(3, -1, dtype=np.int64)
    v = np.broadcast_to(v0, (B, N)).astype(cur.dtype)
    u = np.broadcast_to(u0, (B, N)).astype(cur.dtype)
    with np.errstate(over="ignore", invalid="ignore"):
        for t in range(T):
            i = cur[t]
            vn = np.where(second, v + dt * (v * v - v - u + i), v + dt * (-g * v + i))
            un = np.where(second, u + dt * ta * (tb * v - u), u)
            if smooth_k > 0.0:
                s = 1.0 / (1.0 + np.exp(-smooth_k * (vn - v_th)))
                vp = s * reset_to + (1.0 - s) * vn
                up = un + bump * s
            else:
                fired = vn > v_th
                s = fired.astype(cur.dtype)
                vp = np.where(fired, reset_to, vn)
                up = np.where(fired, un + bump, un)
            spikes[t] = s
            v_pre[t] = vn
            v_post[t] = vp
            u_post[t] = up
            bad = ~((np.abs(vp) <= limit) & (np.abs(up) <= limit))
            if bad.any():
                bi, j = np.argwhere(bad)[0]
                err[:] = (t, bi, j)
                return spikes, v_pre, v_post, u_post, err
            v, u = vp, up
    return spikes, v_pre, v_post, u_post, err


# --------------------------------------------------------------------------
# backward
# --------------------------------------------------------------------------

@njit
def layer_backward_nb(g_spk, spikes, v_pre, v_post, u_post, kind, ta, tb, tc,
                      td, v_th, g, v_reset, v0, u0, dt, smooth_k, window):
    """Adjoint sweep.  Returns dL/d(current), per-neuron dL/dtheta, bad step."""
    T, B, N = g_spk.shape
    g_cur = np.empty_like(g_spk)
    g_theta = np.zeros((N, 4), dtype=g_spk.dtype)
    adj_v = np.zeros((B, N), dtype=g_spk.dtype)
    adj_u = np.zeros((B, N), dtype=g_spk.dtype)
    bad_t = -1
    for t in range(T - 1, -1, -1):
        for bi in range(B):
            for j in range(N):
                if t > 0:
                    vprev = v_post[t - 1, bi, j]
                    uprev = u_post[t - 1, bi, j]
                else:
                    vprev = v0[j]
                    uprev = u0[j]
                vn = v_pre[t, bi, j]
                s = spikes[t, bi, j]
                second = kind[j] == SECOND_ORDER
                rv = tc[j] if second else v_reset[j]
                if smooth_k > 0.0:
                    ds = smooth_k * s * (1.0 - s)
                    dv_dvn = (1.0 - s) + (rv - vn) * ds
                    du_dvn = td[j] * ds if second else 0.0
                else:
                    ds = 1.0 if abs(vn - v_th[j]) < window else 0.0
                    dv_dvn = 1.0 - s
                    du_dvn = 0.0
                av = adj_v[bi, j]
                au = adj_u[bi, j]
                gvn = g_spk[t, bi, j] * ds + av * dv_dvn + au * du_dvn
                g_cur[t, bi, j] = gvn * dt
                if second:
                    gun = au
                    g_theta[j, 0] += gun * dt * (tb[j] * vprev - uprev)
                    g_theta[j, 1] += gun * dt * ta[j] * vprev
                    g_theta[j, 2] += av * s
                    g_theta[j, 3] += au * s
                    adj_v[bi, j] = gvn * (1.0 + dt * (2.0 * vprev - 1.0)) + gun * dt * ta[j] * tb[j]
                    adj_u[bi, j] = -dt * gvn + gun * (1.0 - dt * ta[j])
                else:
                    adj_v[bi, j] = gvn * (1.0 - dt * g[j])
                if bad_t < 0 and not np.isfinite(gvn):
                    bad_t = t
    return g_cur, g_theta, bad_t


def layer_backward_np(g_spk, spikes, v_pre, v_post, u_post, kind, ta, tb, tc,
                      td, v_th, g, v_reset, v0, u0, dt, smooth_k, window):
    T, B, N = g_spk.shape
    second = kind == SECOND_ORDER
    reset_to = np.where(second, tc, v_reset)
    g_cur = np.empty_like(g_spk)
    g_theta = np.zeros((N, 4), dtype=g_spk.dtype)
    adj_v = np.zeros((B, N), dtype=g_spk.dtype)
    adj_u = np.zeros((B, N), dtype=g_spk.dtype)
    bad_t = -1
    v0b = np.broadcast_to(v0, (B, N))
    u0b = np.broadcast_to(u0, (B, N))
    for t in range(T - 1, -1, -1):
        vprev = v_post[t - 1] if t > 0 else v0b
        uprev = u_post[t - 1] if t > 0 else u0b
        vn = v_pre[t]
        s = spikes[t]
        if smooth_k > 0.0:
            ds = smooth_k * s * (1.0 - s)
            dv_dvn = (1.0 - s) + (reset_to - vn) * ds
            du_dvn = np.where(second, td * ds, 0.0)
        else:
            ds = (np.abs(vn - v_th) < window).astype(g_spk.dtype)
            dv_dvn = 1.0 - s
            du_dvn = 0.0
        gvn = g_spk[t] * ds + adj_v * dv_dvn + adj_u * du_dvn
        g_cur[t] = gvn * dt
        gun = np.where(second, adj_u, 0.0)
        g_theta[:, 0] += (gun * dt * (tb * vprev - uprev)).sum(axis=0)
        g_theta[:, 1] += (gun * dt * ta * vprev).sum(axis=0)
        g_theta[:, 2] += np.where(second, adj_v * s, 0.0).sum(axis=0)
        g_theta[:, 3] += (gun * s).sum(axis=0)
        adj_v = np.where(
            second,
            gvn * (1.0 + dt * (2.0 * vprev - 1.0)) + gun * dt * ta * tb,
            gvn * (1.0 - dt * g),
        )
        adj_u = np.where(second, -dt * gvn + gun * (1.0 - dt * ta), 0.0)
        if bad_t < 0 and not np.isfinite(gvn).all():
            bad_t = t
    return g_cur, g_theta, bad_t


# --------------------------------------------------------------------------
# mean-shift
# --------------------------------------------------------------------------

@njit
def mean_shift_modes_nb(points, bandwidth, max_iter, tol):
    n, dim = points.shape
    modes = points.copy()
    bw2 = bandwidth * bandwidth
    for k in range(n):
        x = points[k].copy()
        for _ in range(max_iter):
            acc = np.zeros(dim)
            cnt = 0
            for m in range(n):
                d2 = 0.0
                for q in range(dim):
                    diff = points[m, q] - x[q]
                    d2 += diff * diff
                if d2 <= bw2:
                    cnt += 1
                    for q in range(dim):
                        acc[q] += points[m, q]
            shift = 0.0
            for q in range(dim):
                nxt = acc[q] / cnt
                shift += (nxt - x[q]) ** 2
                x[q] = nxt
            if shift <= tol * tol:
                break
        modes[k] = x
    return modes


def mean_shift_modes_np(points, bandwidth, max_iter, tol):
    x = points.copy()
    active = np.ones(len(points), dtype=bool)
    bw2 = bandwidth * bandwidth
    for _ in range(max_iter):
        if not active.any():
            break
        cur = x[active]
        d2 = ((cur[:, None, :] - points[None, :, :]) ** 2).sum(axis=-1)
        inside = d2 <= bw2
        nxt = (inside @ points) / inside.sum(axis=1, keepdims=True)
        moved = ((nxt - cur) ** 2).sum(axis=1)
        x[active] = nxt
        idx = np.flatnonzero(active)
        active[idx[moved <= tol * tol]] = False
    return x


if USE_NUMBA:
    layer_forward = layer_forward_nb
    layer_backward = layer_backward_nb
    mean_shift_modes = mean_shift_modes_nb
else:
    layer_forward = layer_forward_np
    layer_backward = layer_backward_np
    mean_shift_modes = mean_shift_modes_np
