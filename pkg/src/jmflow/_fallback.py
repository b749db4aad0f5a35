"""Pure numpy versions of the compiled kernels (same signatures, same results
up to rounding).  Used when the extension is not built or is disabled with
``JMFLOW_BACKEND=python``."""
import math

import numpy as np


def _pairs(N):
    i, j = np.triu_indices(N, 1)
    return i, j


def _pot_acc(masses, d, q, want_acc=True):
    N = masses.shape[0]
    X = q.reshape(N, d)
    i, j = _pairs(N)
    D = X[j] - X[i]
    r2 = np.maximum(np.einsum("ij,ij->i", D, D), 1e-300)
    r = np.sqrt(r2)
    mm = masses[i] * masses[j]
    U = float(np.sum(mm / r))
    rmin = float(r.min()) if r.size else 1e300
    if not want_acc:
        return U, None, rmin
    W = D / (r2 * r)[:, None]
    acc = np.zeros((N, d))
    np.add.at(acc, i, masses[j][:, None] * W)
    np.add.at(acc, j, -masses[i][:, None] * W)
    return U, acc.ravel(), rmin


def potential_acc(masses, d, q):
    """Return ``(U, acc, rmin)`` at the flat configuration ``q``."""
    return _pot_acc(np.asarray(masses), d, np.asarray(q))


def _rhs(masses, d, y, mrep):
    n = mrep.shape[0]
    U, acc, rmin = _pot_acc(masses, d, y[:n])
    v = y[n:2 * n]
    f = np.empty_like(y)
    f[:n] = v
    f[n:2 * n] = acc
    f[2 * n] = 0.5 * float(np.dot(mrep * v, v)) + U
    return f, rmin


def _rms(x):
    return math.sqrt(float(np.dot(x, x)) / x.shape[0])


def dop853(masses, d, y0, t0, t1, rtol, atol, h_init, h_max, kepler_eta,
           coll_tol, max_steps, record, A, B, C, E3, E5):
    masses = np.asarray(masses, dtype=float)
    mrep = np.repeat(masses, d)
    S = y0.shape[0]
    NST = 12
    Mtot = float(masses.sum())
    sgn = 1.0 if t1 >= t0 else -1.0
    y = np.array(y0, dtype=float)
    K = np.empty((NST + 1, S))
    K[0], rmin = _rhs(masses, d, y, mrep)
    rmin_prev = rmin_min = rmin
    span = abs(t1 - t0)
    if h_init > 0:
        h_abs = h_init
    else:
        scale = atol + np.abs(y) * rtol
        d0 = _rms(y / scale)
        d1 = _rms(K[0] / scale)
        h0 = 1e-6 if (d0 < 1e-5 or d1 < 1e-5) else 0.01 * d0 / d1
        f1, _ = _rhs(masses, d, y + sgn * h0 * K[0], mrep)
        d2 = _rms((f1 - K[0]) / scale) / h0
        if d1 <= 1e-15 and d2 <= 1e-15:
            h1 = max(1e-6, h0 * 1e-3)
        else:
            h1 = (0.01 / max(d1, d2)) ** (1.0 / 8.0)
        h_abs = min(100 * h0, h1)
    if span == 0.0:
        h_abs = 0.0

    rec_t, rec_y, rec_r = [], [], []
    if record:
        rec_t.append(t0)
        rec_y.append(y.copy())
        rec_r.append(rmin)

    t_hi, t_lo, t_prev = float(t0), 0.0, float(t0)
    rejected = False
    n_acc = n_rej = consec = ncoll = 0
    status = 0
    t_star = float("nan")
    A = np.asarray(A)
    B = np.asarray(B)
    E3 = np.asarray(E3)
    E5 = np.asarray(E5)
    while span > 0.0:
        rem = sgn * ((t1 - t_hi) - t_lo)
        if rem <= 0.0:
            break
        if n_acc >= max_steps:
            status = 3
            break
        if h_max > 0 and h_abs > h_max:
            h_abs = h_max
        if kepler_eta > 0:
            h_abs = min(h_abs, kepler_eta * math.sqrt(rmin_prev ** 3 / Mtot))
        last = False
        if h_abs >= rem:
            h_abs = rem
            last = True
        if h_abs < 1e-25 * (1.0 + abs(t_hi)) or consec > 60:
            status = 2
            break
        h = sgn * h_abs
        for s in range(1, NST):
            K[s], _ = _rhs(masses, d, y + h * (A[s, :s] @ K[:s]), mrep)
        ynew = y + h * (B @ K[:NST])
        K[NST], rmin_new = _rhs(masses, d, ynew, mrep)
        if np.all(np.isfinite(ynew)) and np.all(np.isfinite(K[NST])):
            scale = atol + rtol * np.maximum(np.abs(y), np.abs(ynew))
            err5 = float(np.sum(((E5 @ K) / scale) ** 2))
            err3 = float(np.sum(((E3 @ K) / scale) ** 2))
            if err5 == 0.0 and err3 == 0.0:
                errn = 0.0
            else:
                errn = h_abs * err5 / math.sqrt((err5 + 0.01 * err3) * S)
        else:
            errn = 1e10
        if errn < 1.0:
            factor = 10.0 if errn == 0.0 else min(10.0, 0.9 * errn ** (-1.0 / 8.0))
            if rejected and factor > 1.0:
                factor = 1.0
            rejected = False
            consec = 0
            t_prev = t_hi + t_lo
            if last:
                t_hi, t_lo = float(t1), 0.0
            else:
                yy = h - t_lo
                tt = t_hi + yy
                t_lo = (tt - t_hi) - yy
                t_hi = tt
            y = ynew
            K[0] = K[NST]
            n_acc += 1
            h_abs *= factor
            rmin_min = min(rmin_min, rmin_new)
            if record:
                rec_t.append(t_hi + t_lo)
                rec_y.append(y.copy())
                rec_r.append(rmin_new)
            if rmin_new < coll_tol and rmin_new < rmin_prev:
                ncoll += 1
            else:
                ncoll = 0
            if ncoll >= 10:
                r1, r2 = rmin_prev ** 1.5, rmin_new ** 1.5
                tn = t_hi + t_lo
                t_star = tn + r2 * (tn - t_prev) / (r1 - r2) if r1 > r2 else tn
                status = 1
                break
            rmin_prev = rmin_new
        else:
            h_abs *= max(0.2, 0.9 * errn ** (-1.0 / 8.0))
            rejected = True
            n_rej += 1
            consec += 1
    if record:
        rt = np.array(rec_t)
        ry = np.array(rec_y).reshape(-1, S)
        rr = np.array(rec_r)
    else:
        rt, ry, rr = np.empty(0), np.empty((0, S)), np.empty(0)
    return (status, t_hi + t_lo, y, h_abs, n_acc, n_rej, rt, ry, rr, t_star, rmin_min)


def discrete_action(masses, d, Q, dt, barrier_tol, grad):
    masses = np.asarray(masses, dtype=float)
    N = masses.shape[0]
    M = dt.shape[0]
    mrep = np.repeat(masses, d)
    dQ = Q[1:] - Q[:-1]
    w = dQ * mrep[None, :] / dt[:, None]
    kin = 0.5 * float(np.sum(w * dQ))
    mid = 0.5 * (Q[1:] + Q[:-1])
    i, j = _pairs(N)
    X = mid.reshape(M, N, d)
    D = X[:, j] - X[:, i]
    r2 = np.maximum(np.einsum("kpd,kpd->kp", D, D), 1e-300)
    r = np.sqrt(r2)
    mm = masses[i] * masses[j]
    Uk = (mm[None, :] / r).sum(axis=1)
    pot = float(np.dot(dt, Uk))
    flag = bool(r.min() < barrier_tol)
    # m_i * acc_i at each midpoint
    F = mm[None, :, None] * D / (r2 * r)[:, :, None]
    macc = np.zeros((M, N, d))
    np.add.at(macc, (slice(None), i), F)
    np.add.at(macc, (slice(None), j), -F)
    macc = macc.reshape(M, N * d) * (0.5 * dt)[:, None]
    grad[...] = 0.0
    grad[:-1] += macc - w
    grad[1:] += w + macc
    # closest approach along each linear segment
    Xn = Q.reshape(M + 1, N, d)
    R = Xn[:, i] - Xn[:, j]
    R0, S = R[:-1], R[1:] - R[:-1]
    dd = np.einsum("kpd,kpd->kp", R0, R0)
    ww = np.einsum("kpd,kpd->kp", S, S)
    dw = np.einsum("kpd,kpd->kp", R0, S)
    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.where(ww > 0, np.clip(-dw / np.where(ww > 0, ww, 1.0), 0.0, 1.0), 0.0)
    seg = np.sqrt(np.maximum(dd + 2 * s * dw + s * s * ww, 0.0))
    seg_rmin = float(seg.min())
    if M > 1:
        Rn = R[1:-1]
        if float(np.sqrt(np.einsum("kpd,kpd->kp", Rn, Rn)).min()) < barrier_tol:
            flag = True
    return kin + pot, kin, pot, flag, seg_rmin
