"""Discrete Laplace lifting and numerical inversion (Stehfest, fixed Talbot, fitted quadrature)."""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np


class LaplaceError(ValueError):
    pass


def discrete_laplace_transform(samples, dt: float, s: complex, times=None, rule: str = "left") -> complex:
    """sum_m exp(-s t_m) f(t_m) dt over uniform samples starting at t = 0.

    ``rule='trapezoid'`` halves the end-point weights. If ``times`` is given it
    must be 0, dt, 2 dt, ...
    """
    f = np.asarray(samples, dtype=np.float64)
    if dt <= 0:
        raise LaplaceError("dt must be positive")
    if f.ndim != 1 or len(f) < 1:
        raise LaplaceError("need a 1-D series with at least one sample")
    t = dt * np.arange(len(f))
    if times is not None:
        times = np.asarray(times, dtype=np.float64)
        if times.shape != f.shape or not np.allclose(times, t, rtol=0, atol=1e-9 * max(dt, t[-1])):
            raise LaplaceError("samples must be uniformly spaced from t=0; resample first")
    w = np.full(len(f), dt)
    if rule == "trapezoid":
        if len(f) > 1:
            w[0] = w[-1] = dt / 2
    elif rule != "left":
        raise LaplaceError(f"unknown rule {rule!r}")
    return complex(np.sum(np.exp(-complex(s) * t) * f * w))


@lru_cache(maxsize=None)
def stehfest_coefficients(n: int) -> tuple[float, ...]:
    """Gaver-Stehfest weights V_1..V_n, evaluated exactly then rounded."""
    if n % 2 or n < 2:
        raise LaplaceError("n_terms must be even")
    half = n // 2
    fact = math.factorial
    out = []
    for k in range(1, n + 1):
        acc = Fraction(0)
        for j in range((k + 1) // 2, min(k, half) + 1):
            acc += Fraction(j ** half * fact(2 * j),
                            fact(half - j) * fact(j) * fact(j - 1) * fact(k - j) * fact(2 * j - k))
        out.append(float((-1) ** (k + half) * acc))
    return tuple(out)


def stehfest_invert(F: Callable[[float], float], t: float, n_terms: int = 14) -> float:
    if t <= 0:
        raise LaplaceError("t must be positive")
    if n_terms % 2 or not 8 <= n_terms <= 18:
        raise LaplaceError("n_terms must be even and within [8, 18]")
    a = math.log(2.0) / t
    return a * sum(v * F(k * a) for k, v in enumerate(stehfest_coefficients(n_terms), start=1))


def talbot_nodes(t: float, n_nodes: int) -> tuple[np.ndarray, np.ndarray]:
    """Fixed-Talbot contour nodes s_k and complex weights, so f(t) ~ Re sum w_k e^{s_k t} F(s_k)."""
    r = 2.0 * n_nodes / (5.0 * t)
    theta = np.pi * np.arange(1, n_nodes) / n_nodes
    cot = 1.0 / np.tan(theta)
    s = np.concatenate([[r + 0j], r * theta * (cot + 1j)])
    sig = theta + (theta * cot - 1.0) * cot
    w = np.concatenate([[0.5 + 0j], 1.0 + 1j * sig]) * (r / n_nodes)
    return s, w


def talbot_invert(F: Callable[[complex], complex], t: float, n_nodes: int = 32) -> float:
    if t <= 0:
        raise LaplaceError("t must be positive")
    if n_nodes < 8:
        raise LaplaceError("n_nodes must be >= 8")
    s, w = talbot_nodes(t, n_nodes)
    vals = np.array([F(sk) for sk in s], dtype=np.complex128)
    return float(np.real(np.sum(w * np.exp(s * t) * vals)))


# --- fitted quadrature -----------------------------------------------------


@dataclass
class QuadratureRule:
    poles: np.ndarray  # complex (n_poles,)
    times: np.ndarray  # (n_times,)
    weights: np.ndarray  # real (n_times, n_poles)
    residual: float  # sum of squared misfits over pairs and times
    objective: float  # residual + ridge * |coefficients|^2
    coeffs: np.ndarray | None = None  # (degree + 1, n_poles) Chebyshev coefficients, smooth rules only
    domain: tuple[float, float] | None = None

    def weights_at(self, t) -> np.ndarray:
        """Weights at arbitrary times.

        Smooth rules evaluate their Chebyshev series; per-time rules fall back
        to linear interpolation between fitted times, which is only accurate on
        a fine time grid.
        """
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        if self.coeffs is not None:
            return _cheb_basis(t, self.domain, len(self.coeffs) - 1) @ self.coeffs
        if len(self.times) == 1:
            return np.repeat(self.weights, len(t), axis=0)
        return np.stack([np.interp(t, self.times, self.weights[:, k]) for k in range(len(self.poles))], axis=-1)

    def invert(self, F: Callable[[complex], complex], t) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        vals = np.array([F(s) for s in self.poles], dtype=np.complex128)
        basis = np.exp(np.outer(t, self.poles)) * vals
        return np.real(np.sum(self.weights_at(t) * basis, axis=-1))


def _cheb_basis(t: np.ndarray, domain: tuple[float, float], degree: int) -> np.ndarray:
    lo, hi = domain
    tau = np.zeros_like(t) if hi == lo else (2.0 * t - lo - hi) / (hi - lo)
    return np.polynomial.chebyshev.chebvander(tau, degree)


def _solve(A: np.ndarray, b: np.ndarray, ridge: float, where: str) -> np.ndarray:
    # rows reading 0 = 0 (imaginary parts with real poles) constrain nothing
    keep = np.any(A != 0.0, axis=1) | (b != 0.0)
    A, b = A[keep], b[keep]
    if ridge > 0:  # augmented least squares; avoids squaring the condition number
        n = A.shape[1]
        aug = np.vstack([A, math.sqrt(ridge) * np.eye(n)])
        return np.linalg.lstsq(aug, np.concatenate([b, np.zeros(n)]), rcond=None)[0]
    # column equilibration: rank is judged on the scaled matrix so that poles
    # with very different |e^{s t} F(s)| are not mistaken for dependent columns
    scale = np.linalg.norm(A, axis=0)
    scale[scale == 0] = 1.0
    As = A / scale
    rank = np.linalg.matrix_rank(As)
    if rank < min(A.shape):
        raise LaplaceError(f"rank-deficient system {where} (rank {rank}); use ridge > 0")
    if A.shape[0] < A.shape[1]:  # underdetermined: minimum-norm in the original variables
        return np.linalg.lstsq(A, b, rcond=None)[0]
    return np.linalg.lstsq(As, b, rcond=None)[0] / scale


def fit_quadrature_weights(poles: Sequence[complex], times: Sequence[float],
                           pairs: Sequence[tuple[Callable, Callable]], ridge: float = 0.0,
                           degree: int | None = None) -> QuadratureRule:
    """Real weights w_k(t) with sum_k w_k(t) e^{s_k t} F(s_k) ~ f(t) for every pair.

    By default each time gets its own least-squares solve. With ``degree``
    set, every w_k(t) is a Chebyshev series of that degree over
    [min(times), max(times)] fitted jointly across all times, which is what
    makes the rule usable at times it was not fitted on.

    With ``ridge == 0`` an underdetermined system gets its minimum-norm exact
    solution; a system whose rank falls below min(rows, cols) is rejected.
    """
    poles = np.asarray(poles, dtype=np.complex128)
    times = np.asarray(times, dtype=np.float64)
    if not pairs:
        raise LaplaceError("need at least one transform pair")
    if ridge < 0:
        raise LaplaceError("ridge must be >= 0")
    if len(np.unique(poles)) != len(poles):
        raise LaplaceError("poles must be distinct")
    if times.ndim != 1 or len(times) == 0:
        raise LaplaceError("need at least one time")
    if degree is not None and degree < 0:
        raise LaplaceError("degree must be >= 0")
    Fs = np.array([[F(s) for s in poles] for F, _ in pairs], dtype=np.complex128)  # (pairs, poles)
    targets = np.array([[float(f(t)) for t in times] for _, f in pairs])  # (pairs, times)
    n_p = len(poles)

    if degree is not None:
        domain = (float(times.min()), float(times.max()))
        T = _cheb_basis(times, domain, degree)  # (times, degree+1)
        a = Fs[:, :, None] * np.exp(np.outer(poles, times))[None]  # (pairs, poles, times)
        X = np.einsum("pkt,td->ptdk", a, T).reshape(len(pairs) * len(times), -1)
        A = np.vstack([X.real, X.imag])
        b = np.concatenate([targets.ravel(), np.zeros(targets.size)])
        c = _solve(A, b, ridge, "for the smooth weight model")
        resid = float(np.sum((A @ c - b) ** 2))
        coeffs = c.reshape(degree + 1, n_p)
        return QuadratureRule(poles, times, T @ coeffs, resid, resid + ridge * float(c @ c), coeffs, domain)

    weights = np.zeros((len(times), n_p))
    resid = 0.0
    for i, t in enumerate(times):
        a = Fs * np.exp(poles * t)
        A = np.vstack([a.real, a.imag])
        b = np.concatenate([targets[:, i], np.zeros(len(pairs))])
        w = _solve(A, b, ridge, f"at t={t}")
        weights[i] = w
        resid += float(np.sum((A @ w - b) ** 2))
    objective = resid + ridge * float(np.sum(weights ** 2))
    return QuadratureRule(poles, times, weights, resid, objective)


# --- oracle suite ----------------------------------------------------------


def oracle_suite() -> list[tuple[str, float, float, bool]]:
    """(name, error, tolerance, passed) for the closed-form inversion checks."""
    pairs = {
        "1": (lambda s: 1.0 / s, lambda t: 1.0),
        "t": (lambda s: 1.0 / s ** 2, lambda t: t),
        "exp(-t)": (lambda s: 1.0 / (s + 1.0), lambda t: math.exp(-t)),
    }
    rows = []
    for name, (F, f) in pairs.items():
        for t in (0.5, 1.0, 2.0):
            ref = f(t)
            err = abs(stehfest_invert(F, t, 14) - ref) / abs(ref)
            rows.append((f"stehfest[14] {name} t={t}", err, 1e-4, err <= 1e-4))
            err = abs(talbot_invert(F, t, 32) - ref) / abs(ref)
            rows.append((f"talbot[32] {name} t={t}", err, 1e-6, err <= 1e-6))
    for t in (0.5, 1.0, 2.0, math.pi):
        err = abs(talbot_invert(lambda s: s / (s * s + 1.0), t, 32) - math.cos(t))
        rows.append((f"talbot[32] cos t={t:.4g}", err, 1e-6, err <= 1e-6))
    errs = []
    for dt in (1e-2, 5e-3, 2.5e-3):
        n = int(round(20.0 / dt))
        approx = discrete_laplace_transform(np.exp(-dt * np.arange(n)), dt, 1.0)
        errs.append(abs(approx - 0.5))
    ratio = min(errs[0] / errs[1], errs[1] / errs[2])
    rows.append((f"dlt halving ratio (order {math.log2(ratio):.2f})", ratio, 1.9, ratio >= 1.9))
    return rows
