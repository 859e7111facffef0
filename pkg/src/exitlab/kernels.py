"""Hot path-stepping kernels, in numba and pure-numpy twins.

Kernels advance a batch of paths through one block of pre-drawn standard
normal increments ``Z`` of shape ``(P, B, d)``.  All randomness is drawn
outside (one Philox stream per path), so for a fixed draw layout the two
backends walk identical floating-point sequences: the numpy twins
evaluate the same expressions in the same order, only vectorized across
paths.  ``tests/test_sde.py`` and ``benchmarks/bench_backends.py`` check
bit-identity.

Status codes written to ``status``: 0 = still inside, 1 = left the box
during the block (``exit_step`` holds the in-block step index, and the
``x_prev``/``x_new`` rows hold the straddling states), 2 = NaN appeared.

The Euler kernels cover polynomial drift (exponent/coefficient tables)
or tabulated 1-d drift, constant diffusion matrices, and axis-box
domains; everything else takes the generic callable engine in
:mod:`exitlab.sde`.
"""

from __future__ import annotations

import numpy as np

from ._accel import HAS_NUMBA, njit

STATUS_ALIVE = 0
STATUS_EXITED = 1
STATUS_NAN = 2


# ----------------------------------------------------------------------
# Euler-Maruyama, polynomial drift, axis box
# ----------------------------------------------------------------------

def _poly_drift_ordered(xa, E, C):
    """Polynomial drift with the same operation order as the jit kernel:
    coefficient first, then cumulative-product monomials dimension by
    dimension, terms accumulated sequentially."""
    P, d = xa.shape
    M = E.shape[0]
    emax = int(E.max()) if E.size else 0
    pows = np.empty((d, emax + 1, P))
    pows[:, 0, :] = 1.0
    for kk in range(d):
        for e in range(1, emax + 1):
            pows[kk, e] = pows[kk, e - 1] * xa[:, kk]
    drift = np.zeros((P, d))
    for j in range(d):
        acc = np.zeros(P)
        for m in range(M):
            if C[m, j] == 0.0:
                continue
            term = np.full(P, C[m, j])
            for kk in range(d):
                e = E[m, kk]
                if e > 0:
                    term = term * pows[kk, e]
            acc = acc + term
        drift[:, j] = acc
    return drift


def _euler_poly_box_numpy(x, status, exit_step, x_prev, x_new,
                          E, C, sig, eps, dt, lo, hi, Z):
    P, B, d = Z.shape
    alive = status == STATUS_ALIVE
    sqdt = np.sqrt(dt)
    for k in range(B):
        if not alive.any():
            break
        xa = x[alive]
        drift = _poly_drift_ordered(xa, E, C)
        noise = np.zeros_like(xa)
        for j in range(d):
            acc = np.zeros(xa.shape[0])
            for jj in range(d):
                acc = acc + sig[j, jj] * Z[alive, k, jj]
            noise[:, j] = acc
        xn = xa + drift * dt + (eps * sqdt) * noise
        bad = ~np.all(np.isfinite(xn), axis=1)
        out = np.any((xn <= lo) | (xn >= hi), axis=1) & ~bad
        idx = np.flatnonzero(alive)
        done = out | bad
        if done.any():
            stopped = idx[done]
            x_prev[stopped] = xa[done]
            x_new[stopped] = xn[done]
            exit_step[stopped] = k
            status[stopped] = np.where(bad[done], STATUS_NAN, STATUS_EXITED)
        x[idx] = xn
        alive[idx[done]] = False
    return


if HAS_NUMBA:

    @njit(cache=True, nogil=True)
    def _euler_poly_box_numba(x, status, exit_step, x_prev, x_new,
                              E, C, sig, eps, dt, lo, hi, Z):
        P, B, d = Z.shape
        M = E.shape[0]
        sqdt = np.sqrt(dt)
        for p in range(P):
            if status[p] != STATUS_ALIVE:
                continue
            for k in range(B):
                bad = False
                outside = False
                for j in range(d):
                    drift_j = 0.0
                    for m in range(M):
                        term = C[m, j]
                        if term != 0.0:
                            for kk in range(d):
                                e = E[m, kk]
                                if e > 0:
                                    xv = x[p, kk]
                                    mon = xv
                                    for _ in range(e - 1):
                                        mon *= xv
                                    term *= mon
                            drift_j += term
                    noise_j = 0.0
                    for jj in range(d):
                        noise_j += sig[j, jj] * Z[p, k, jj]
                    x_new[p, j] = x[p, j] + drift_j * dt + (eps * sqdt) * noise_j
                for j in range(d):
                    v = x_new[p, j]
                    if not np.isfinite(v):
                        bad = True
                    elif v <= lo[j] or v >= hi[j]:
                        outside = True
                if bad or outside:
                    for j in range(d):
                        x_prev[p, j] = x[p, j]
                        x[p, j] = x_new[p, j]
                    exit_step[p] = k
                    status[p] = STATUS_NAN if bad else STATUS_EXITED
                    break
                for j in range(d):
                    x[p, j] = x_new[p, j]
        return


def euler_poly_box_block(x, status, exit_step, x_prev, x_new,
                         E, C, sig, eps, dt, lo, hi, Z, backend: str):
    if backend == "numba":
        _euler_poly_box_numba(x, status, exit_step, x_prev, x_new,
                              E, C, sig, eps, dt, lo, hi, Z)
    else:
        _euler_poly_box_numpy(x, status, exit_step, x_prev, x_new,
                              E, C, sig, eps, dt, lo, hi, Z)


# ----------------------------------------------------------------------
# Euler-Maruyama, tabulated 1-d drift, interval domain
# ----------------------------------------------------------------------

def _euler_table1d_numpy(x, status, exit_step, x_prev, x_new,
                         grid_lo, grid_dx, table, sig, eps, dt, lo, hi, Z):
    P, B, _ = Z.shape
    alive = status == STATUS_ALIVE
    sqdt = np.sqrt(dt)
    n_tab = table.size
    for k in range(B):
        if not alive.any():
            break
        xa = x[alive, 0]
        pos = (xa - grid_lo) / grid_dx
        i = np.clip(pos.astype(np.int64), 0, n_tab - 2)
        w = pos - i
        w = np.clip(w, 0.0, 1.0)
        drift = table[i] * (1.0 - w) + table[i + 1] * w
        xn = xa + drift * dt + (eps * sig * sqdt) * Z[alive, k, 0]
        bad = ~np.isfinite(xn)
        out = ((xn <= lo) | (xn >= hi)) & ~bad
        idx = np.flatnonzero(alive)
        done = out | bad
        if done.any():
            stopped = idx[done]
            x_prev[stopped, 0] = xa[done]
            x_new[stopped, 0] = xn[done]
            exit_step[stopped] = k
            status[stopped] = np.where(bad[done], STATUS_NAN, STATUS_EXITED)
        x[idx, 0] = xn
        alive[idx[done]] = False


if HAS_NUMBA:

    @njit(cache=True, nogil=True)
    def _euler_table1d_numba(x, status, exit_step, x_prev, x_new,
                             grid_lo, grid_dx, table, sig, eps, dt, lo, hi, Z):
        P, B, _ = Z.shape
        sqdt = np.sqrt(dt)
        n_tab = table.size
        for p in range(P):
            if status[p] != STATUS_ALIVE:
                continue
            for k in range(B):
                xv = x[p, 0]
                pos = (xv - grid_lo) / grid_dx
                i = int(pos)
                if i < 0:
                    i = 0
                elif i > n_tab - 2:
                    i = n_tab - 2
                w = pos - i
                if w < 0.0:
                    w = 0.0
                elif w > 1.0:
                    w = 1.0
                drift = table[i] * (1.0 - w) + table[i + 1] * w
                xn = xv + drift * dt + (eps * sig * sqdt) * Z[p, k, 0]
                if not np.isfinite(xn):
                    x_prev[p, 0] = xv
                    x_new[p, 0] = xn
                    x[p, 0] = xn
                    exit_step[p] = k
                    status[p] = STATUS_NAN
                    break
                if xn <= lo or xn >= hi:
                    x_prev[p, 0] = xv
                    x_new[p, 0] = xn
                    x[p, 0] = xn
                    exit_step[p] = k
                    status[p] = STATUS_EXITED
                    break
                x[p, 0] = xn
        return


def euler_table1d_block(x, status, exit_step, x_prev, x_new,
                        grid_lo, grid_dx, table, sig, eps, dt, lo, hi, Z,
                        backend: str):
    if backend == "numba":
        _euler_table1d_numba(x, status, exit_step, x_prev, x_new,
                             grid_lo, grid_dx, table, sig, eps, dt, lo, hi, Z)
    else:
        _euler_table1d_numpy(x, status, exit_step, x_prev, x_new,
                             grid_lo, grid_dx, table, sig, eps, dt, lo, hi, Z)


# ----------------------------------------------------------------------
# Exact Ornstein-Uhlenbeck stepping for the 2-d linear saddle
# ----------------------------------------------------------------------
#
# State per path: the accumulated stochastic integral N(t) of the unstable
# Duhamel representation and the stable coordinate x2.  The unstable
# coordinate is eps * exp(lp * t) * N(t), so the exit test compares |N|
# against a shrinking threshold thr_k = (delta/eps) * exp(-lp * t_{k+1})
# and never forms the exponential explicitly.  Per-step increments use
# the exact transition variances, so grid values are exact samples.

def _ou_saddle_numpy(N, x2, status, exit_step, N_exit, x2_at_exit_prev,
                     x2_at_exit_new, lp, lm, eps, dt, delta, w0, thr0, Z):
    P, B, _ = Z.shape
    alive = status == STATUS_ALIVE
    rho = np.exp(-2.0 * lp * dt)
    a2 = np.exp(-lm * dt)
    s2 = eps * np.sqrt((1.0 - np.exp(-2.0 * lm * dt)) / (2.0 * lm))
    decay = np.exp(-lp * dt)
    base = (1.0 - rho) / (2.0 * lp)
    w = w0
    thr = thr0
    for k in range(B):
        s1 = np.sqrt(w * base)
        thr = thr * decay
        if alive.any():
            idx = np.flatnonzero(alive)
            Nn = N[idx] + s1 * Z[idx, k, 0]
            x2n = a2 * x2[idx] + s2 * Z[idx, k, 1]
            out = np.abs(Nn) >= thr
            if out.any():
                stopped = idx[out]
                N_exit[stopped] = Nn[out]
                x2_at_exit_prev[stopped] = x2[stopped]
                x2_at_exit_new[stopped] = x2n[out]
                exit_step[stopped] = k
                status[stopped] = STATUS_EXITED
                alive[stopped] = False
            N[idx] = Nn
            x2[idx] = x2n
        w = w * rho
    return w, thr


if HAS_NUMBA:

    @njit(cache=True, nogil=True)
    def _ou_saddle_numba(N, x2, status, exit_step, N_exit, x2_at_exit_prev,
                         x2_at_exit_new, lp, lm, eps, dt, delta, w0, thr0, Z):
        P, B, _ = Z.shape
        rho = np.exp(-2.0 * lp * dt)
        a2 = np.exp(-lm * dt)
        s2 = eps * np.sqrt((1.0 - np.exp(-2.0 * lm * dt)) / (2.0 * lm))
        decay = np.exp(-lp * dt)
        base = (1.0 - rho) / (2.0 * lp)
        for p in range(P):
            if status[p] != STATUS_ALIVE:
                continue
            w = w0
            thr = thr0
            for k in range(B):
                s1 = np.sqrt(w * base)
                thr = thr * decay
                Nn = N[p] + s1 * Z[p, k, 0]
                x2n = a2 * x2[p] + s2 * Z[p, k, 1]
                if abs(Nn) >= thr:
                    N_exit[p] = Nn
                    x2_at_exit_prev[p] = x2[p]
                    x2_at_exit_new[p] = x2n
                    exit_step[p] = k
                    status[p] = STATUS_EXITED
                    N[p] = Nn
                    x2[p] = x2n
                    break
                N[p] = Nn
                x2[p] = x2n
                w = w * rho
        w = w0
        thr = thr0
        for k in range(B):
            thr = thr * decay
            w = w * rho
        return w, thr


def ou_saddle_block(N, x2, status, exit_step, N_exit, x2_at_exit_prev,
                    x2_at_exit_new, lp, lm, eps, dt, delta, w0, thr0, Z,
                    backend: str):
    if backend == "numba":
        return _ou_saddle_numba(N, x2, status, exit_step, N_exit,
                                x2_at_exit_prev, x2_at_exit_new,
                                lp, lm, eps, dt, delta, w0, thr0, Z)
    return _ou_saddle_numpy(N, x2, status, exit_step, N_exit,
                            x2_at_exit_prev, x2_at_exit_new,
                            lp, lm, eps, dt, delta, w0, thr0, Z)
