"""Adam, learning-rate schedules, gradient clipping and L-BFGS."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np


class OptimizerError(FloatingPointError):
    pass


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], state: AdamState,
              lr: float) -> tuple[dict[str, np.ndarray], AdamState]:
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    for k, g in grads.items():
        if not np.isfinite(g).all():
            raise OptimizerError(f"non-finite gradient for {k!r}; Adam step aborted")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    out = {}
    for k, p in params.items():
        g = grads[k]
        m = state.m.get(k)
        v = state.v.get(k)
        m = (1.0 - b1) * g if m is None else b1 * m + (1.0 - b1) * g
        v = (1.0 - b2) * g * g if v is None else b2 * v + (1.0 - b2) * g * g
        state.m[k], state.v[k] = m, v
        out[k] = p - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return out, state


def lr_cosine(step: int, period: int, eta_max: float, eta_min: float) -> float:
    """Cosine annealing with warm restarts every ``period`` steps."""
    if period < 1:
        raise ValueError("period must be >= 1")
    r = step % period
    # (1 + cos a) / 2 = cos^2(a / 2); the sine branch avoids cancellation near a = pi
    if 2 * r <= period:
        c = math.cos(0.5 * math.pi * (r / period))
    else:
        c = math.sin(0.5 * math.pi * ((period - r) / period))
    return eta_min + (eta_max - eta_min) * (c * c)


def lr_exponential(step: int, eta0: float, gamma: float, decay_steps: int) -> float:
    """Staircase decay: eta0 * gamma ** floor(step / decay_steps)."""
    if decay_steps < 1 or not 0 < gamma <= 1:
        raise ValueError("need decay_steps >= 1 and 0 < gamma <= 1")
    return eta0 * gamma ** (step // decay_steps)


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))


def clip_grad_norm(grads: Mapping[str, np.ndarray], tau: float) -> dict[str, np.ndarray]:
    if tau <= 0:
        raise ValueError("clip norm must be positive")
    norm = global_norm(grads)
    if norm <= tau:
        return dict(grads)
    scale = tau / norm
    return {k: g * scale for k, g in grads.items()}


# --- L-BFGS ----------------------------------------------------------------


@dataclass
class LbfgsHistory:
    m: int = 20
    s_list: deque = field(default_factory=deque)
    y_list: deque = field(default_factory=deque)

    def push(self, s: np.ndarray, y: np.ndarray) -> bool:
        """Store (s, y) if it has positive curvature; returns whether it was kept."""
        if float(y @ s) <= 1e-12 * float(np.linalg.norm(s) * np.linalg.norm(y)) or float(y @ s) <= 0.0:
            return False
        self.s_list.append(s)
        self.y_list.append(y)
        while len(self.s_list) > self.m:
            self.s_list.popleft()
            self.y_list.popleft()
        return True

    def direction(self, g: np.ndarray) -> np.ndarray:
        """-H g by the two-loop recursion."""
        q = g.copy()
        alphas = []
        rhos = [1.0 / float(y @ s) for s, y in zip(self.s_list, self.y_list)]
        for s, y, rho in zip(reversed(self.s_list), reversed(self.y_list), reversed(rhos)):
            a = rho * float(s @ q)
            alphas.append(a)
            q -= a * y
        if self.s_list:
            s, y = self.s_list[-1], self.y_list[-1]
            q *= float(s @ y) / float(y @ y)
        for (s, y, rho), a in zip(zip(self.s_list, self.y_list, rhos), reversed(alphas)):
            b = rho * float(y @ q)
            q += (a - b) * s
        return -q


@dataclass
class LbfgsResult:
    x: np.ndarray
    f: float
    grad_norm: float
    iterations: int
    status: str  # "converged", "max_iters", "line_search_failed"
    trace: list[float]
    history: LbfgsHistory
    n_evals: int = 0


def _cubic_min(a, fa, ga, b, fb, gb):
    """Minimizer of the cubic interpolating (a, fa, ga), (b, fb, gb), or None."""
    d1 = ga + gb - 3.0 * (fa - fb) / (a - b)
    disc = d1 * d1 - ga * gb
    if disc < 0:
        return None
    d2 = math.copysign(math.sqrt(disc), b - a)
    denom = gb - ga + 2.0 * d2
    if denom == 0:
        return None
    return b - (b - a) * (gb + d2 - d1) / denom


def strong_wolfe(phi: Callable[[float], tuple[float, float]], f0: float, g0: float, alpha0: float = 1.0,
                 c1: float = 1e-4, c2: float = 0.9, max_zoom: int = 25, alpha_max: float = 1e10):
    """Line search on phi(alpha) -> (value, derivative).

    Returns (alpha, f, g, ok, n_evals). On failure ``alpha`` is the best
    sufficient-decrease point seen (possibly 0).
    """
    n_evals = 0
    best = (0.0, f0, g0)
    a_prev, f_prev, g_prev = 0.0, f0, g0
    a = alpha0
    lo = hi = None
    for i in range(60):
        fa, ga = phi(a)
        n_evals += 1
        if math.isfinite(fa) and fa <= f0 + c1 * a * g0 and fa < best[1]:
            best = (a, fa, ga)
        if not math.isfinite(fa) or fa > f0 + c1 * a * g0 or (i > 0 and fa >= f_prev):
            lo, hi = (a_prev, f_prev, g_prev), (a, fa, ga)
            break
        if abs(ga) <= -c2 * g0:
            return a, fa, ga, True, n_evals
        if ga >= 0:
            lo, hi = (a, fa, ga), (a_prev, f_prev, g_prev)
            break
        a_prev, f_prev, g_prev = a, fa, ga
        a = min(2.0 * a, alpha_max)
    else:
        return best[0], best[1], best[2], False, n_evals

    for _ in range(max_zoom):
        (a_lo, f_lo, g_lo), (a_hi, f_hi, g_hi) = lo, hi
        width = abs(a_hi - a_lo)
        a = None
        if math.isfinite(f_hi):
            a = _cubic_min(a_lo, f_lo, g_lo, a_hi, f_hi, g_hi)
        left, right = min(a_lo, a_hi), max(a_lo, a_hi)
        if a is None or not (left + 0.1 * width <= a <= right - 0.1 * width):
            a = 0.5 * (a_lo + a_hi)
        fa, ga = phi(a)
        n_evals += 1
        if math.isfinite(fa) and fa <= f0 + c1 * a * g0 and fa < best[1]:
            best = (a, fa, ga)
        if not math.isfinite(fa) or fa > f0 + c1 * a * g0 or fa >= f_lo:
            hi = (a, fa, ga)
        else:
            if abs(ga) <= -c2 * g0:
                return a, fa, ga, True, n_evals
            if ga * (a_hi - a_lo) >= 0:
                hi = lo
            lo = (a, fa, ga)
        if width < 1e-16 * max(1.0, abs(a)):
            break
    return best[0], best[1], best[2], False, n_evals


def lbfgs_run(fun: Callable[[np.ndarray], tuple[float, np.ndarray]], x0, max_iters: int = 100, m: int = 20,
              c1: float = 1e-4, c2: float = 0.9, grad_tol: float = 1e-9, callback=None) -> LbfgsResult:
    """Minimize ``fun`` (returning value and gradient) from ``x0``.

    Never raises on line-search trouble: the best point so far is returned with
    ``status='line_search_failed'``.
    """
    x = np.array(x0, dtype=np.float64)
    f, g = fun(x)
    n_evals = 1
    hist = LbfgsHistory(m)
    trace = [float(f)]
    status = "max_iters"
    it = 0
    for it in range(1, max_iters + 1):
        gnorm = float(np.linalg.norm(g))
        if gnorm <= grad_tol:
            status, it = "converged", it - 1
            break
        d = hist.direction(g)
        gd = float(g @ d)
        if gd >= 0:  # not a descent direction; restart from steepest descent
            hist = LbfgsHistory(m)
            d = -g
            gd = -gnorm * gnorm
        alpha0 = min(1.0, 1.0 / gnorm) if not hist.s_list else 1.0
        cache = {}

        def phi(a):
            xa = x + a * d
            fa, ga = fun(xa)
            cache[a] = (xa, ga)
            return float(fa), float(ga @ d)

        a, fa, _, ok, ne = strong_wolfe(phi, float(f), gd, alpha0, c1, c2)
        n_evals += ne
        if a == 0.0 or fa >= f:
            status = "line_search_failed"
            break
        x_new, g_new = cache[a]
        hist.push(x_new - x, g_new - g)
        x, f, g = x_new, fa, g_new
        trace.append(float(f))
        if callback is not None:
            callback(it, x, f)
        if not ok:
            status = "line_search_failed"
            break
    else:
        if float(np.linalg.norm(g)) <= grad_tol:
            status = "converged"
    return LbfgsResult(x, float(f), float(np.linalg.norm(g)), it, status, trace, hist, n_evals)
