"""Mixture properties, PDE residuals and the composite training loss.

Residual functions are written with arithmetic operators only, so they accept
plain arrays as well as graph nodes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np

from . import tensorgraph as tg

LOSS_COLUMNS = ("total", "data", "continuity", "momentum", "phase", "causality", "poles", "wall")


@dataclass(frozen=True)
class FluidConstants:
    rho_l: float = 998.0
    rho_g: float = 1.2
    mu_l: float = 1e-3
    mu_g: float = 1.8e-5
    sigma_surface: float = 0.072
    eps_interface: float = 3e-5

    def __post_init__(self):
        if not (self.rho_l > self.rho_g > 0 and self.mu_l > self.mu_g > 0):
            raise ValueError("need rho_l > rho_g > 0 and mu_l > mu_g > 0")


@dataclass(frozen=True)
class LossWeights:
    lambda_c: float = 0.10
    lambda_m: float = 0.05
    lambda_phi: float = 0.08
    lambda_causality: float = 0.0
    lambda_poles: float = 0.0
    lambda_wall: float = 0.0
    eps_var: float = 1e-8

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"{f.name} must be >= 0")

    def zero_physics(self) -> "LossWeights":
        return LossWeights(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, self.eps_var)


@dataclass
class LossReport:
    total: float
    data: float
    continuity: float = 0.0
    momentum: float = 0.0
    phase: float = 0.0
    causality: float = 0.0
    poles: float = 0.0
    wall: float = 0.0
    node: tg.Node | None = field(default=None, repr=False, compare=False)

    def row(self) -> list[float]:
        return [getattr(self, k) for k in LOSS_COLUMNS]


def mixture_properties(phi, const: FluidConstants = FluidConstants()):
    """(rho_mix, mu_mix) with alpha = (1 + phi) / 2, deliberately unclamped."""
    alpha = (phi + 1.0) * 0.5
    rho = alpha * (const.rho_l - const.rho_g) + const.rho_g
    mu = alpha * (const.mu_l - const.mu_g) + const.mu_g
    return rho, mu


def continuity_residual(du_dx, dv_dy):
    return du_dx + dv_dy


def momentum_residual(u, v, du_dt, du_dx, dv_dy, rho_mix, dp_dx=None):
    """rho (dU/dt + U dU/dx + V dV/dy), optionally + dP/dx (pressure moved to the left side)."""
    r = rho_mix * (du_dt + u * du_dx + v * dv_dy)
    if dp_dx is not None:
        r = r + dp_dx
    return r


def phase_residual(phi):
    return phi ** 3 - phi


def wall_contact_angle_residual(phi, dphi_dn, theta_e, const: FluidConstants = FluidConstants()):
    """eps dphi/dn + (3 sigma cos(theta_e) / 2) (1 - phi^2); theta_e in radians."""
    coef = 1.5 * const.sigma_surface * np.cos(theta_e)
    return dphi_dn * const.eps_interface + (1.0 - phi * phi) * coef


def causality_pole_penalties(log_sigmas, sigma_floor: float = 1e-3, band: tuple[float, float] = (1e-3, 10.0)):
    """Hinge penalties on the pole decay rates.

    ``log_sigmas`` is a list (one entry per layer) of log decay-rate arrays or
    nodes. Returns (L_causality, L_poles) as nodes.
    """
    tau_min, tau_max = band
    if sigma_floor < 0 or not 0 < tau_min < tau_max:
        raise ValueError("need sigma_floor >= 0 and 0 < tau_min < tau_max")
    lo, hi = math.log(1.0 / tau_max), math.log(1.0 / tau_min)
    ls = tg.concat([tg.as_node(x) for x in log_sigmas], axis=0)
    causal = tg.mean(tg.square(tg.relu(tg.sub(sigma_floor, tg.exp(ls)))))
    outside = tg.add(tg.relu(tg.sub(lo, ls)), tg.relu(tg.sub(ls, hi)))
    return causal, tg.mean(tg.square(outside))


def data_loss(pred, truth, eps_var: float = 1e-8) -> tg.Node:
    """Per-field MSE over the batch divided by that field's batch variance, averaged over fields."""
    truth = tg.value(truth)
    n_fields = truth.shape[-1]
    flat = truth.reshape(-1, n_fields)
    scale = 1.0 / (flat.var(axis=0) + eps_var)
    sq = tg.square(tg.sub(pred, truth))
    return tg.mean(tg.mul(sq, scale), axis=None)


def composite_loss(pred, truth, residuals: dict | None = None, penalties: dict | None = None,
                   weights: LossWeights = LossWeights()) -> LossReport:
    """L_data + sum of lambda-weighted mean-squared residuals and penalties.

    ``residuals`` may hold 'continuity', 'momentum', 'phase', 'wall' pointwise
    residuals; ``penalties`` may hold scalar 'causality' and 'poles' terms.
    """
    if tg.value(pred).shape != tg.value(truth).shape:
        raise ValueError(f"prediction {tg.value(pred).shape} and truth {tg.value(truth).shape} differ")
    residuals = residuals or {}
    penalties = penalties or {}
    lam = {"continuity": weights.lambda_c, "momentum": weights.lambda_m, "phase": weights.lambda_phi,
           "wall": weights.lambda_wall, "causality": weights.lambda_causality, "poles": weights.lambda_poles}
    # the scalar loss never needs coordinate derivatives, and residuals may carry different seed sets
    with tg.no_tangents():
        data = data_loss(pred, truth, weights.eps_var)
        parts = {}
        for name, r in residuals.items():
            parts[name] = tg.mean(tg.square(r), axis=None)
        for name, pen in penalties.items():
            parts[name] = tg.as_node(pen)
        total = data
        for name, node in parts.items():
            if name not in lam:
                raise KeyError(f"unknown loss component {name!r}")
            if lam[name] != 0.0:
                total = tg.add(total, tg.mul(node, lam[name]))
    report = LossReport(float(total.value), float(data.value),
                        **{k: float(v.value) for k, v in parts.items()})
    report.node = total
    return report
