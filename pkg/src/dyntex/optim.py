"""Flat-vector optimizers: L-BFGS (synthesis) and Adam (flow training).

Both operate on 1-D float64 parameter vectors with a user callback
returning (loss, gradient). The L-BFGS implementation uses the
two-loop recursion with a strong-Wolfe line search (bracket + zoom
with cubic interpolation).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class NanLossError(RuntimeError):
    """Loss or gradient became non-finite; carries the best iterate."""

    def __init__(self, message, best_x=None, best_f=None):
        super().__init__(message)
        self.best_x = best_x
        self.best_f = best_f


@dataclass
class LbfgsOptions:
    m: int = 20  # history pairs
    c1: float = 1e-4
    c2: float = 0.9
    max_line_evals: int = 20
    grad_tol: float = 1e-6  # inf-norm stopping threshold
    loss_rel_tol: float = 1e-12  # relative loss-change stopping threshold
    curvature_min: float = 1e-10  # pairs with s'y <= this * |s||y| are discarded


@dataclass
class LbfgsResult:
    x: np.ndarray
    fx: float
    trace: list  # accepted loss per iteration, starting with f(x0)
    status: str  # converged | max_iters | line_search_failed
    iterations: int
    n_evals: int


def _cubic_min(a, fa, dga, b, fb, dgb):
    """Minimizer of the cubic through (a, fa, dga), (b, fb, dgb);
    falls back to bisection when ill-conditioned."""
    if a == b:
        return a
    d1 = dga + dgb - 3 * (fa - fb) / (a - b)
    rad = d1 * d1 - dga * dgb
    if rad < 0 or not np.isfinite(rad):
        return 0.5 * (a + b)
    d2 = np.sqrt(rad) * np.sign(b - a)
    t = b - (b - a) * ((dgb + d2 - d1) / (dgb - dga + 2 * d2))
    lo, hi = (a, b) if a < b else (b, a)
    span = hi - lo
    if not np.isfinite(t) or t <= lo + 0.1 * span or t >= hi - 0.1 * span:
        return 0.5 * (a + b)
    return t


def _strong_wolfe(fun, x, f0, g0, d, t0, opts):
    """Strong-Wolfe line search along d from x.

    Returns (t, f, g, evals, ok). A non-finite trial loss is treated as
    a too-high value so the search backs off into the finite region.
    On acceptance, one secant refinement of the step is attempted; on
    (locally) quadratic objectives this lands on the line minimum.
    """
    dg0 = float(g0 @ d)
    evals = 0

    def phi(t):
        nonlocal evals
        f, g = fun(x + t * d)
        evals += 1
        return f, g, float(g @ d)

    def refine(ta, fa, dga, t, f, g, dg):
        # secant step on phi'; skip when already near the line minimum
        if abs(dg) <= 1e-6 * abs(dg0) or evals >= opts.max_line_evals:
            return t, f, g
        denom = dg - dga
        if denom == 0:
            return t, f, g
        t_ref = t - dg * (t - ta) / denom
        if not np.isfinite(t_ref) or t_ref <= 0:
            return t, f, g
        f_ref, g_ref, dg_ref = phi(t_ref)
        armijo = f_ref <= f0 + opts.c1 * t_ref * dg0
        if np.isfinite(f_ref) and armijo and abs(dg_ref) <= min(abs(dg), -opts.c2 * dg0):
            return t_ref, f_ref, g_ref
        return t, f, g

    t_prev, f_prev, g_prev, dg_prev = 0.0, f0, g0, dg0
    t = t0
    bracket = None
    for _ in range(opts.max_line_evals):
        f, g, dg = phi(t)
        if not np.isfinite(f):
            bracket = (t_prev, f_prev, g_prev, dg_prev, t, np.inf, g, dg)
            break
        if f > f0 + opts.c1 * t * dg0 or (evals > 1 and f >= f_prev):
            bracket = (t_prev, f_prev, g_prev, dg_prev, t, f, g, dg)
            break
        if abs(dg) <= -opts.c2 * dg0:
            t, f, g = refine(t_prev, f_prev, dg_prev, t, f, g, dg)
            return t, f, g, evals, True
        if dg >= 0:
            bracket = (t, f, g, dg, t_prev, f_prev, g_prev, dg_prev)
            break
        t_prev, f_prev, g_prev, dg_prev = t, f, g, dg
        t = min(t * 2.0, t0 * 1e4) if t > 0 else 1.0
    if bracket is None:
        return t_prev, f_prev, g_prev, evals, t_prev > 0

    lo_t, lo_f, lo_g, lo_dg, hi_t, hi_f, hi_g, hi_dg = bracket
    best = (lo_t, lo_f, lo_g)
    while evals < opts.max_line_evals:
        if abs(hi_t - lo_t) < 1e-15:
            break
        if np.isfinite(hi_f):
            t = _cubic_min(lo_t, lo_f, lo_dg, hi_t, hi_f, hi_dg)
        else:
            t = 0.5 * (lo_t + hi_t)
        f, g, dg = phi(t)
        if not np.isfinite(f) or f > f0 + opts.c1 * t * dg0 or f >= lo_f:
            hi_t, hi_f, hi_dg = t, f, dg
        else:
            if abs(dg) <= -opts.c2 * dg0:
                t, f, g = refine(lo_t, lo_f, lo_dg, t, f, g, dg)
                return t, f, g, evals, True
            if dg * (hi_t - lo_t) >= 0:
                hi_t, hi_f, hi_dg = lo_t, lo_f, lo_dg
            lo_t, lo_f, lo_g, lo_dg = t, f, g, dg
            best = (t, f, g)
        if abs(hi_t - lo_t) < 1e-15:
            break
    t, f, g = best
    return t, f, g, evals, t > 0 and f < f0


def lbfgs_minimize(fun, x0, max_iters=1000, options=None, callback=None):
    """Minimize fun(x) -> (loss, grad) by L-BFGS.

    The accepted-loss trace is monotone nonincreasing. Stops on the
    iteration budget, gradient tolerance, relative loss change, or a
    failed line search (returning the best iterate with a status flag).
    Raises NanLossError if the loss or gradient is non-finite at an
    accepted point.
    """
    opts = options or LbfgsOptions()
    x = np.asarray(x0, dtype=np.float64).copy()
    if not np.all(np.isfinite(x)):
        raise NanLossError("initial point is not finite")
    f, g = fun(x)
    n_evals = 1
    if not np.isfinite(f) or not np.all(np.isfinite(g)):
        raise NanLossError("loss or gradient non-finite at the initial point", x, f)
    trace = [f]
    s_hist, y_hist, rho_hist = [], [], []
    status = "max_iters"
    it = 0
    for it in range(1, max_iters + 1):
        ginf = float(np.max(np.abs(g))) if g.size else 0.0
        if ginf < opts.grad_tol:
            status = "converged"
            it -= 1
            break

        # two-loop recursion
        q = -g
        alphas = []
        for s, y, rho in zip(reversed(s_hist), reversed(y_hist), reversed(rho_hist)):
            a = rho * (s @ q)
            alphas.append(a)
            q -= a * y
        if y_hist:
            gamma = (s_hist[-1] @ y_hist[-1]) / (y_hist[-1] @ y_hist[-1])
            q *= gamma
        for (s, y, rho), a in zip(
            zip(s_hist, y_hist, rho_hist), reversed(alphas)
        ):
            b = rho * (y @ q)
            q += (a - b) * s
        d = q
        dg0 = float(g @ d)
        if not np.isfinite(dg0) or dg0 >= 0:
            # fall back to steepest descent if the direction degenerates
            s_hist, y_hist, rho_hist = [], [], []
            d = -g
            dg0 = float(g @ d)

        t0 = min(1.0, 1.0 / max(1.0, float(np.abs(g).sum()))) if it == 1 else 1.0
        if it == 1:
            # with a degenerately small gradient the unit-capped trial step
            # cannot change the loss at floating-point resolution; rescale
            # so the largest coordinate moves by one unit
            dinf = float(np.max(np.abs(d))) if d.size else 0.0
            if 0.0 < t0 * dinf < 1e-8:
                t0 = 1.0 / dinf
        t, f_new, g_new, evals, ok = _strong_wolfe(fun, x, f, g, d, t0, opts)
        n_evals += evals
        if not ok or t == 0.0:
            status = "line_search_failed"
            it -= 1
            break
        if not np.isfinite(f_new) or not np.all(np.isfinite(g_new)):
            raise NanLossError(
                f"non-finite loss or gradient accepted at iteration {it}", x, f
            )
        s = t * d
        y = g_new - g
        sy = float(s @ y)
        if sy > opts.curvature_min * float(np.linalg.norm(s)) * float(np.linalg.norm(y)):
            s_hist.append(s)
            y_hist.append(y)
            rho_hist.append(1.0 / sy)
            if len(s_hist) > opts.m:
                s_hist.pop(0)
                y_hist.pop(0)
                rho_hist.pop(0)
        x = x + s
        f_prev = f
        f, g = f_new, g_new
        trace.append(f)
        if callback is not None:
            callback(it, x, f)
        if abs(f_prev - f) <= opts.loss_rel_tol * max(1.0, abs(f_prev)):
            status = "converged"
            break
    return LbfgsResult(x=x, fx=f, trace=trace, status=status, iterations=it, n_evals=n_evals)


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: np.ndarray = None
    v: np.ndarray = None
    t: int = 0


def adam_step(grad, state, params):
    """One bias-corrected Adam update; returns the new parameter vector."""
    g = np.asarray(grad)
    p = np.asarray(params)
    if g.shape != p.shape:
        raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
    if state.m is None:
        state.m = np.zeros_like(p, dtype=np.float64)
        state.v = np.zeros_like(p, dtype=np.float64)
    state.t += 1
    state.m = state.beta1 * state.m + (1 - state.beta1) * g
    state.v = state.beta2 * state.v + (1 - state.beta2) * g * g
    m_hat = state.m / (1 - state.beta1**state.t)
    v_hat = state.v / (1 - state.beta2**state.t)
    return p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
