"""Hot-loop kernels for the selective state-space scan.

Two interchangeable backends compute identical results: a numba
@njit pair (default when numba imports) and a pure-numpy pair.
Selection: the MLSA_BACKEND environment variable ("auto", "numba",
"numpy") read at import, overridable at runtime via set_backend().

Shapes (C-contiguous float32 or float64):
    u, delta : [B, L, E]      inputs and per-step timescales
    a        : [E, N]         diagonal state matrix (negative entries)
    bm, cm   : [B, L, N]      input-dependent state-in / state-out maps
    y        : [B, L, E]      scan output
    h_hist   : [B, L, E, N]   post-update states, saved for backward

The recurrence per (b, e, n):
    abar = exp(delta * a)
    bbar = ((abar - 1) / a) * bm        (delta * bm when |a| < 1e-8)
    h    = abar * h + bbar * u
    y   += cm * h
"""

from __future__ import annotations

import os

import numpy as np

_SMALL_A = 1e-8

try:
    from numba import njit
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a hard dependency here
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def deco(fn):
            return fn
        return deco if not (args and callable(args[0])) else args[0]


# ---------------------------------------------------------------------------
# numpy reference backend
# ---------------------------------------------------------------------------

def scan_fwd_numpy(u, delta, a, bm, cm, save_states: bool):
    B, L, E = u.shape
    N = a.shape[1]
    y = np.zeros((B, L, E), dtype=u.dtype)
    h_hist = np.zeros((B, L, E, N), dtype=u.dtype) if save_states else None
    h = np.zeros((B, E, N), dtype=u.dtype)
    small = np.abs(a) < _SMALL_A
    for t in range(L):
        dt = delta[:, t, :, None]                      # [B,E,1]
        abar = np.exp(dt * a)                          # [B,E,N]
        coef = np.where(small, dt, (abar - 1.0) / np.where(small, 1.0, a))
        h = abar * h + (coef * bm[:, t, None, :]) * u[:, t, :, None]
        y[:, t] = np.einsum("ben,bn->be", h, cm[:, t])
        if save_states:
            h_hist[:, t] = h
    return y, h_hist


def scan_bwd_numpy(u, delta, a, bm, cm, h_hist, gy):
    B, L, E = u.shape
    N = a.shape[1]
    dt_ = u.dtype
    du = np.zeros_like(u)
    ddelta = np.zeros_like(delta)
    da = np.zeros_like(a)
    dbm = np.zeros_like(bm)
    dcm = np.zeros_like(cm)
    g = np.zeros((B, E, N), dtype=dt_)                 # dL/dh_t
    small = np.abs(a) < _SMALL_A
    a_safe = np.where(small, 1.0, a)
    for t in range(L - 1, -1, -1):
        h_t = h_hist[:, t]                             # [B,E,N]
        dcm[:, t] = np.einsum("ben,be->bn", h_t, gy[:, t])
        g = g + gy[:, t, :, None] * cm[:, t, None, :]
        h_prev = h_hist[:, t - 1] if t > 0 else np.zeros((B, E, N), dtype=dt_)
        dt = delta[:, t, :, None]
        abar = np.exp(dt * a)
        coef = np.where(small, dt, (abar - 1.0) / a_safe)
        bmt = bm[:, t, None, :]
        ut = u[:, t, :, None]
        du[:, t] = np.einsum("ben,bn->be", g * coef, bm[:, t])
        dbm[:, t] = np.einsum("ben,be->bn", g * coef, u[:, t])
        # d abar / d delta = a * abar; d coef / d delta = abar
        ddelta[:, t] = np.einsum(
            "ben->be", g * (h_prev * a * abar + abar * bmt * ut))
        # d abar / d a = delta * abar
        # d coef / d a = (delta*abar*a - abar + 1) / a^2, limit delta^2/2
        dcoef_da = np.where(
            small, 0.5 * dt * dt, (dt * abar * a_safe - abar + 1.0) / (a_safe * a_safe))
        da += np.einsum(
            "ben->en", g * (h_prev * dt * abar + dcoef_da * bmt * ut))
        g = g * abar
    return du, ddelta, da, dbm, dcm


# ---------------------------------------------------------------------------
# numba backend (same math, explicit loops, single-threaded)
# ---------------------------------------------------------------------------

if HAVE_NUMBA:

    @njit(cache=True, fastmath=True)
    def _scan_fwd_nb(u, delta, a, bm, cm, y, h_hist, save_states):
        B, L, E = u.shape
        N = a.shape[1]
        h = np.zeros((E, N), dtype=u.dtype)
        for b in range(B):
            h[:, :] = 0.0
            for t in range(L):
                for e in range(E):
                    dt = delta[b, t, e]
                    ue = u[b, t, e]
                    acc = 0.0
                    for n in range(N):
                        an = a[e, n]
                        abar = np.exp(dt * an)
                        if an < _SMALL_A and an > -_SMALL_A:
                            coef = dt
                        else:
                            coef = (abar - 1.0) / an
                        hn = abar * h[e, n] + coef * bm[b, t, n] * ue
                        h[e, n] = hn
                        if save_states:
                            h_hist[b, t, e, n] = hn
                        acc += cm[b, t, n] * hn
                    y[b, t, e] = acc

    @njit(cache=True, fastmath=True)
    def _scan_bwd_nb(u, delta, a, bm, cm, h_hist, gy,
                     du, ddelta, da, dbm, dcm):
        B, L, E = u.shape
        N = a.shape[1]
        g = np.zeros((E, N), dtype=u.dtype)
        for b in range(B):
            g[:, :] = 0.0
            for t in range(L - 1, -1, -1):
                for e in range(E):
                    dt = delta[b, t, e]
                    ue = u[b, t, e]
                    gye = gy[b, t, e]
                    du_acc = 0.0
                    ddt_acc = 0.0
                    for n in range(N):
                        an = a[e, n]
                        abar = np.exp(dt * an)
                        tiny = an < _SMALL_A and an > -_SMALL_A
                        if tiny:
                            coef = dt
                        else:
                            coef = (abar - 1.0) / an
                        h_t = h_hist[b, t, e, n]
                        if t > 0:
                            h_prev = h_hist[b, t - 1, e, n]
                        else:
                            h_prev = 0.0
                        dcm[b, t, n] += h_t * gye
                        gn = g[e, n] + gye * cm[b, t, n]
                        du_acc += gn * coef * bm[b, t, n]
                        dbm[b, t, n] += gn * coef * ue
                        ddt_acc += gn * (h_prev * an * abar + abar * bm[b, t, n] * ue)
                        if tiny:
                            dcoef_da = 0.5 * dt * dt
                        else:
                            dcoef_da = (dt * abar * an - abar + 1.0) / (an * an)
                        da[e, n] += gn * (h_prev * dt * abar
                                          + dcoef_da * bm[b, t, n] * ue)
                        g[e, n] = gn * abar
                    du[b, t, e] = du_acc
                    ddelta[b, t, e] = ddt_acc

    def scan_fwd_numba(u, delta, a, bm, cm, save_states: bool):
        B, L, E = u.shape
        N = a.shape[1]
        y = np.zeros((B, L, E), dtype=u.dtype)
        h_hist = np.zeros((B, L, E, N), dtype=u.dtype) if save_states \
            else np.zeros((1, 1, 1, 1), dtype=u.dtype)
        _scan_fwd_nb(u, delta, a, bm, cm, y, h_hist, save_states)
        return y, (h_hist if save_states else None)

    def scan_bwd_numba(u, delta, a, bm, cm, h_hist, gy):
        du = np.zeros_like(u)
        ddelta = np.zeros_like(delta)
        da = np.zeros_like(a)
        dbm = np.zeros_like(bm)
        dcm = np.zeros_like(cm)
        _scan_bwd_nb(u, delta, a, bm, cm, h_hist, gy, du, ddelta, da, dbm, dcm)
        return du, ddelta, da, dbm, dcm
else:  # pragma: no cover
    scan_fwd_numba = scan_fwd_numpy
    scan_bwd_numba = scan_bwd_numpy


# ---------------------------------------------------------------------------
# backend selection
# ---------------------------------------------------------------------------

_VALID = ("auto", "numba", "numpy")
_backend = "numpy"


def set_backend(name: str) -> str:
    """Pick the scan implementation; returns the resolved backend name."""
    global _backend
    if name not in _VALID:
        raise ValueError(f"backend must be one of {_VALID}, got {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba backend requested but numba is not importable")
    _backend = "numba" if name == "auto" and HAVE_NUMBA else \
        "numpy" if name == "auto" else name
    return _backend


def get_backend() -> str:
    return _backend


def scan_forward(u, delta, a, bm, cm, save_states: bool):
    if _backend == "numba":
        return scan_fwd_numba(u, delta, a, bm, cm, save_states)
    return scan_fwd_numpy(u, delta, a, bm, cm, save_states)


def scan_backward(u, delta, a, bm, cm, h_hist, gy):
    if _backend == "numba":
        return scan_bwd_numba(u, delta, a, bm, cm, h_hist, gy)
    return scan_bwd_numpy(u, delta, a, bm, cm, h_hist, gy)


set_backend(os.environ.get("MLSA_BACKEND", "auto"))
