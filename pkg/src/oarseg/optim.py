"""Optimizers for registration: line-search gradient descent and bounded L-BFGS."""

from __future__ import annotations

import numpy as np
from scipy import optimize

from .errors import InfeasibleBounds, NonFiniteObjective


def finite_difference_gradient(objective, x, steps):
    """Central finite differences with per-coordinate step sizes."""
    x = np.asarray(x, dtype=np.float64)
    steps = np.broadcast_to(np.asarray(steps, dtype=np.float64), x.shape)
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = steps[i]
        g[i] = (objective(x + e) - objective(x - e)) / (2.0 * steps[i])
    return g


def linesearch_gd_minimize(objective, gradient, x0, lr: float = 5.0, lr_upper: float = 5.0,
                           stop_window: int = 10, stop_eps: float = 1e-4,
                           max_iters: int = 200, on_iterate=None):
    """First-order descent with backtracking line search.

    The search direction is the conjugate (Polak-Ribiere+) combination of the
    current gradient with the previous direction, falling back to the plain
    negative gradient whenever conjugacy stops producing a descent direction;
    plain steepest descent stalls on the long narrow valleys that image-metric
    objectives develop. Steps never exceed lr_upper. Stops when the running
    best objective improved by less than stop_eps over the trailing stop_window
    iterations, or at max_iters. Returns (x_best, f_best, n_iters).
    """
    x = np.asarray(x0, dtype=np.float64).copy()
    fx = float(objective(x))
    if not np.isfinite(fx):
        raise NonFiniteObjective(f"objective at start is {fx}")
    best_x, best_f = x.copy(), fx
    best_trace = [best_f]

    step = min(lr, lr_upper)
    iters = 0
    g_prev = None
    d_prev = None
    for iters in range(1, max_iters + 1):
        g = np.asarray(gradient(x), dtype=np.float64)
        norm = float(np.linalg.norm(g))
        moved = False
        if norm > 0 and np.all(np.isfinite(g)):
            d = -g
            if g_prev is not None and d_prev is not None:
                beta = float(g @ (g - g_prev)) / float(g_prev @ g_prev)
                if beta > 0.0:
                    cand = -g + beta * d_prev
                    if float(cand @ g) < 0.0:  # keep only descent directions
                        d = cand
            g_prev, d_prev = g, d

            for dn in ([d / np.linalg.norm(d)] if np.allclose(d, -g)
                       else [d / np.linalg.norm(d), -g / norm]):
                trial = min(step * 2.0, lr_upper)  # allow regrowth after backtracking
                for _ in range(12):
                    cand = x + trial * dn
                    fc = float(objective(cand))
                    if np.isfinite(fc) and fc < fx:
                        x, fx = cand, fc
                        step = trial
                        moved = True
                        break
                    trial *= 0.5
                if moved:
                    break
                d_prev = None  # conjugate direction failed; next try is steepest
        if moved and fx < best_f:
            best_x, best_f = x.copy(), fx
        best_trace.append(best_f)
        if on_iterate is not None:
            on_iterate(x, fx)
        if iters >= stop_window and best_trace[-1 - stop_window] - best_trace[-1] < stop_eps:
            break
    return best_x, best_f, iters


def lbfgsb_minimize(objective, gradient, x0, lower, upper, max_iters: int = 20,
                    history: int = 10, on_iterate=None, ftol: float = 1e-12,
                    gtol: float = 1e-10):
    """Bound-constrained L-BFGS. Returns (x, f) with x feasible.

    ftol/gtol default tight enough for analytic objectives; callers minimizing
    a noisy estimate should raise gtol to that estimate's gradient noise floor,
    or the line search will walk near-flat directions out to the bounds.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    lower = np.broadcast_to(np.asarray(lower, dtype=np.float64), x0.shape)
    upper = np.broadcast_to(np.asarray(upper, dtype=np.float64), x0.shape)
    if np.any(lower > upper):
        raise InfeasibleBounds("lower bound exceeds upper bound")
    start = np.clip(x0, lower, upper)

    callback = None
    if on_iterate is not None:
        callback = lambda xk: on_iterate(np.asarray(xk))

    res = optimize.minimize(
        objective,
        start,
        jac=gradient,
        method="L-BFGS-B",
        bounds=list(zip(lower, upper)),
        callback=callback,
        options={"maxiter": max_iters, "maxcor": history, "ftol": ftol, "gtol": gtol},
    )
    x = np.clip(res.x, lower, upper)
    return x, float(res.fun)
