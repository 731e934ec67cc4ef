"""Run configuration and the training loop (Adam phase, then L-BFGS refinement)."""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from . import tensorgraph as tg
from .data import Dataset, DatasetError, NormStats, fit_norm_stats, _atomic_write_text
from .model import ModelConfig, ModelParams, encode_input, forward, init_params, save_checkpoint
from .optim import (AdamState, LbfgsResult, OptimizerError, adam_step, clip_grad_norm, lbfgs_run, lr_cosine,
                    lr_exponential)
from .physics import (LOSS_COLUMNS, FluidConstants, LossReport, LossWeights, causality_pole_penalties,
                      composite_loss, continuity_residual, data_loss, mixture_properties, momentum_residual,
                      phase_residual, wall_contact_angle_residual)

HISTORY_HEADER = ",".join(("epoch",) + LOSS_COLUMNS + ("lr",))


class TrainingError(RuntimeError):
    def __init__(self, msg: str, epoch: int | None = None):
        super().__init__(msg)
        self.epoch = epoch


@dataclass
class RunConfig:
    # architecture
    d_v: int = 256
    n_layers: int = 8
    n_poles: int = 64
    # batching: n_groups contact-angle conditions x n_query points each
    n_groups: int = 16
    n_query: int = 1024
    # optimization
    eta0: float = 3e-4
    schedule: str = "exponential"
    gamma: float = 0.95
    decay_steps: int | None = None  # None -> max(1, epochs // 10)
    cosine_period: int | None = None  # None -> epochs
    eta_min: float = 1e-6
    epochs: int = 500
    clip_norm: float = 1.0
    lbfgs_after_epochs: int | None = None  # None -> after all Adam epochs
    lbfgs_max_iters: int = 0
    lbfgs_subset: int = 8192
    # loss
    lambda_c: float = 0.10
    lambda_m: float = 0.05
    lambda_phi: float = 0.08
    lambda_causality: float = 0.0
    lambda_poles: float = 0.0
    lambda_wall: float = 0.0
    eps_var: float = 1e-8
    sigma_floor: float = 1e-3
    pole_band: tuple[float, float] = (1e-3, 10.0)
    momentum_full_pressure: bool = False
    log_every: int = 500
    seed: int = 0

    def __post_init__(self):
        self.pole_band = tuple(float(v) for v in self.pole_band)
        self.validate()

    def validate(self) -> None:
        counts = {"d_v": self.d_v, "n_layers": self.n_layers, "n_poles": self.n_poles, "n_groups": self.n_groups,
                  "n_query": self.n_query, "epochs": self.epochs, "log_every": self.log_every,
                  "lbfgs_subset": self.lbfgs_subset}
        for k, v in counts.items():
            if int(v) != v or v < 1:
                raise ValueError(f"{k} must be an integer >= 1, got {v!r}")
        if self.lbfgs_max_iters < 0:
            raise ValueError("lbfgs_max_iters must be >= 0")
        if self.lbfgs_after_epochs is not None and self.lbfgs_after_epochs < 0:
            raise ValueError("lbfgs_after_epochs must be >= 0")
        if not self.eta0 > 0 or not self.clip_norm > 0:
            raise ValueError("eta0 and clip_norm must be positive")
        if self.schedule not in ("exponential", "cosine"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.schedule == "cosine" and not 0 < self.eta_min <= self.eta0:
            raise ValueError("cosine schedule needs 0 < eta_min <= eta0")
        self.loss_weights()  # checks the lambdas

    def model_config(self) -> ModelConfig:
        return ModelConfig(self.d_v, self.n_layers, self.n_poles)

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda_c, self.lambda_m, self.lambda_phi, self.lambda_causality,
                           self.lambda_poles, self.lambda_wall, self.eps_var)

    def adam_epochs(self) -> int:
        return self.epochs if self.lbfgs_after_epochs is None else min(self.epochs, self.lbfgs_after_epochs)

    def learning_rate(self, step: int) -> float:
        if self.schedule == "cosine":
            return lr_cosine(step, self.cosine_period or self.epochs, self.eta0, self.eta_min)
        return lr_exponential(step, self.eta0, self.gamma, self.decay_steps or max(1, self.epochs // 10))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["pole_band"] = list(self.pole_band)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "RunConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ValueError(f"unknown run config keys: {', '.join(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "RunConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class TrainResult:
    params: ModelParams
    stats: NormStats
    history: list[list[float]]  # rows matching HISTORY_HEADER
    lbfgs: LbfgsResult | None = None
    checkpoint: Path | None = None
    extra: dict = field(default_factory=dict)


# --- problem setup ---------------------------------------------------------


@dataclass
class _Prepared:
    coords: np.ndarray  # (n, 5) encoded inputs
    targets: np.ndarray  # (n, 4) z-scored outputs
    theta: np.ndarray  # (n,) degrees
    groups: list[np.ndarray]  # record indices per contact angle


def _prepare(ds: Dataset, stats: NormStats) -> _Prepared:
    enc = encode_input(ds.x, ds.y, ds.t, ds.theta_s, stats)
    angles = ds.angles()
    groups = [np.flatnonzero(ds.theta_s == a) for a in angles]
    return _Prepared(enc.coords, stats.normalize_outputs(ds.outputs()), ds.theta_s.copy(), groups)


def _sample_batch(prep: _Prepared, cfg: RunConfig, rng: np.random.Generator) -> np.ndarray:
    """(B, N) record indices: B angle groups, N points per group."""
    n_avail = len(prep.groups)
    if cfg.n_groups >= n_avail:
        chosen = range(n_avail)
    else:
        chosen = np.sort(rng.choice(n_avail, cfg.n_groups, replace=False))
    groups = [prep.groups[g] for g in chosen]
    n = min(cfg.n_query, min(len(g) for g in groups))
    rows = []
    for g in groups:
        rows.append(g if n == len(g) else np.sort(rng.choice(g, n, replace=False)))
    return np.stack(rows)


@dataclass
class Scales:
    """Reference magnitudes that make the physics residuals dimensionless."""

    length: float
    time: float
    velocity: float
    rho: float

    @classmethod
    def from_stats(cls, stats: NormStats, const: FluidConstants) -> "Scales":
        lx = 0.5 * (stats.input_max["x"] - stats.input_min["x"])
        ly = 0.5 * (stats.input_max["y"] - stats.input_min["y"])
        tt = 0.5 * (stats.input_max["t"] - stats.input_min["t"])
        u = max(stats.output_std["U"], stats.output_std["V"])
        if u == 0.0:
            u = 1.0
        return cls(max(lx, ly), tt, u, const.rho_l)

    @property
    def continuity(self) -> float:
        return self.length / self.velocity

    @property
    def momentum(self) -> float:
        return 1.0 / (self.rho * self.velocity * max(1.0 / self.time, self.velocity / self.length))


def physics_residuals(out: tg.Node, coords: tg.Node, stats: NormStats, scales: Scales, weights: LossWeights,
                      const: FluidConstants, full_pressure: bool = False) -> dict[str, tg.Node]:
    """Dimensionless continuity, momentum and phase residuals of normalized model outputs."""
    phys = stats.denormalize_outputs(out)
    res = {}
    need_c = weights.lambda_c > 0
    need_m = weights.lambda_m > 0
    if need_c or need_m:
        du_dx = tg.input_jacobian(phys, coords, 0, component=0, span=stats.span("x"))
        dv_dy = tg.input_jacobian(phys, coords, 1, component=1, span=stats.span("y"))
        if need_c:
            res["continuity"] = tg.mul(continuity_residual(du_dx, dv_dy), scales.continuity)
        if need_m:
            du_dt = tg.input_jacobian(phys, coords, 2, component=0, span=stats.span("t"))
            dp_dx = None
            if full_pressure:
                dp_dx = tg.input_jacobian(phys, coords, 0, component=2, span=stats.span("x"))
            rho, _ = mixture_properties(tg.take(phys, 3), const)
            r = momentum_residual(tg.take(phys, 0), tg.take(phys, 1), du_dt, du_dx, dv_dy, rho, dp_dx)
            res["momentum"] = tg.mul(r, scales.momentum)
    if weights.lambda_phi > 0:
        res["phase"] = phase_residual(tg.take(phys, 3))
    return res


def wall_residual(params: ModelParams, nodes, coords: np.ndarray, theta_deg: np.ndarray, stats: NormStats,
                  const: FluidConstants) -> tg.Node:
    """Contact-angle residual on the batch points projected onto the wall y = y_min."""
    wall = coords.copy()
    wall[..., 1] = -1.0
    c = tg.seed_coordinates(wall, (1,))
    phys = stats.denormalize_outputs(forward(params, c, nodes))
    dphi_dy = tg.input_jacobian(phys, c, 1, component=3, span=stats.span("y"))
    # outward normal of the bottom wall points in -y
    return wall_contact_angle_residual(tg.take(phys, 3), tg.neg(dphi_dy), np.radians(theta_deg)[..., None], const)


def batch_loss(params: ModelParams, nodes, coords: np.ndarray, targets: np.ndarray, stats: NormStats,
               cfg: RunConfig, scales: Scales, const: FluidConstants, theta: np.ndarray | None = None) -> LossReport:
    weights = cfg.loss_weights()
    dims = []
    if weights.lambda_c > 0 or weights.lambda_m > 0:
        dims = [0, 1, 2] if weights.lambda_m > 0 else [0, 1]
    if dims:
        c = tg.seed_coordinates(coords, dims)
        out = forward(params, c, nodes)
        residuals = physics_residuals(out, c, stats, scales, weights, const, cfg.momentum_full_pressure)
    else:
        out = forward(params, coords, nodes)
        residuals = {"phase": phase_residual(tg.take(stats.denormalize_outputs(out), 3))} \
            if weights.lambda_phi > 0 else {}
    if weights.lambda_wall > 0:
        residuals["wall"] = wall_residual(params, nodes, coords, theta, stats, const)
    penalties = {}
    if weights.lambda_causality > 0 or weights.lambda_poles > 0:
        ls = [nodes[f"layers.{i}.log_sigma"] for i in range(params.config.n_layers)]
        causal, poles = causality_pole_penalties(ls, cfg.sigma_floor, cfg.pole_band)
        penalties = {"causality": causal, "poles": poles}
    return composite_loss(out, targets, residuals, penalties, weights)


# --- training --------------------------------------------------------------


def _write_history(path: Path, rows: list[list[float]]) -> None:
    lines = [HISTORY_HEADER]
    for r in rows:
        lines.append(",".join([str(int(r[0]))] + [repr(float(v)) for v in r[1:]]))
    _atomic_write_text(path, "\n".join(lines) + "\n")


def _flatten(arrays: Mapping[str, np.ndarray]) -> np.ndarray:
    return np.concatenate([a.ravel() for a in arrays.values()])


def _unflatten(flat: np.ndarray, like: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    out, i = {}, 0
    for k, a in like.items():
        out[k] = flat[i:i + a.size].reshape(a.shape).copy()
        i += a.size
    return out


def lbfgs_refine(params: ModelParams, coords: np.ndarray, targets: np.ndarray, max_iters: int,
                 eps_var: float = 1e-8) -> tuple[ModelParams, LbfgsResult]:
    """Minimize the data loss over a fixed point set with L-BFGS."""
    names = list(params.arrays)
    c = coords[None]
    y = targets[None]

    def fun(flat):
        arrays = _unflatten(flat, params.arrays)
        nodes = {k: tg.leaf(v) for k, v in arrays.items()}
        try:
            loss = data_loss(forward(params, c, nodes), y, eps_var)
        except tg.NonFiniteError:
            return math.inf, np.zeros_like(flat)
        grads = tg.gradients(loss, [nodes[k] for k in names])
        return float(loss.value), np.concatenate([g.ravel() for g in grads])

    res = lbfgs_run(fun, _flatten(params.arrays), max_iters=max_iters)
    return ModelParams(params.config, _unflatten(res.x, params.arrays), params.seed), res


def train_pipeline(cfg: RunConfig, train: Dataset, out_dir=None, stats: NormStats | None = None,
                   const: FluidConstants = FluidConstants(),
                   callback: Callable[[int, LossReport], None] | None = None) -> TrainResult:
    """Train from scratch; writes ckpt.json and loss_history.csv when ``out_dir`` is given."""
    cfg.validate()
    if len(train) == 0:
        raise DatasetError("training split is empty")
    stats = stats if stats is not None else fit_norm_stats(train)
    prep = _prepare(train, stats)
    scales = Scales.from_stats(stats, const)
    params = init_params(cfg.model_config(), cfg.seed)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    adam = AdamState()
    history: list[list[float]] = []
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "ckpt.json" if out is not None else None
    extra = {"run_config": cfg.to_dict()}
    n_adam = cfg.adam_epochs()

    for epoch in range(1, n_adam + 1):
        idx = _sample_batch(prep, cfg, rng)
        lr = cfg.learning_rate(epoch - 1)
        nodes = {k: tg.leaf(v) for k, v in params.arrays.items()}
        try:
            rep = batch_loss(params, nodes, prep.coords[idx], prep.targets[idx], stats, cfg, scales, const,
                             prep.theta[idx])
            if not math.isfinite(rep.total):
                raise tg.NonFiniteError("loss")
            grads = tg.gradients(rep.node, list(nodes.values()))
            grads = clip_grad_norm(dict(zip(nodes, grads)), cfg.clip_norm)
            new_arrays, adam = adam_step(params.arrays, grads, adam, lr)
        except (tg.NonFiniteError, OptimizerError) as exc:
            if ckpt is not None:
                save_checkpoint(params, stats, ckpt, extra)
                _write_history(out / "loss_history.csv", history)
            raise TrainingError(f"non-finite loss or gradient at epoch {epoch} ({exc}); "
                                f"last good parameters kept", epoch) from None
        if epoch % cfg.log_every == 0 or epoch == n_adam:
            history.append([epoch] + rep.row() + [lr])
        if callback is not None:
            callback(epoch, rep)
        params = ModelParams(params.config, new_arrays, params.seed)
        for i in range(params.config.n_layers):  # sigma = exp(log_sigma) keeps every pole decaying
            if not np.isfinite(params.arrays[f"layers.{i}.log_sigma"]).all():
                raise TrainingError(f"pole decay rates became non-finite at epoch {epoch}", epoch)

    lres = None
    if cfg.lbfgs_max_iters > 0:
        n = len(prep.coords)
        sub = np.arange(n) if n <= cfg.lbfgs_subset else np.sort(rng.choice(n, cfg.lbfgs_subset, replace=False))
        params, lres = lbfgs_refine(params, prep.coords[sub], prep.targets[sub], cfg.lbfgs_max_iters, cfg.eps_var)
        row = [0.0] * len(LOSS_COLUMNS)
        row[0] = row[1] = lres.f
        history.append([n_adam + lres.iterations] + row + [0.0])

    if ckpt is not None:
        save_checkpoint(params, stats, ckpt, extra)
        _write_history(out / "loss_history.csv", history)
    return TrainResult(params, stats, history, lres, ckpt)


def read_history(path) -> list[dict[str, float]]:
    with open(path) as fh:
        header = fh.readline().strip()
        if header != HISTORY_HEADER:
            raise ValueError(f"{path}: unexpected loss history header")
        keys = header.split(",")
        return [dict(zip(keys, map(float, line.split(",")))) for line in fh if line.strip()]


def mean_abs_continuity(params: ModelParams, stats: NormStats, ds: Dataset, const: FluidConstants = FluidConstants(),
                        chunk: int = 4096) -> float:
    """Mean |dimensionless continuity residual| of a trained model over a dataset."""
    if len(ds) == 0:
        raise DatasetError("empty dataset")
    scales = Scales.from_stats(stats, const)
    weights = LossWeights(1.0, 0.0, 0.0)
    prep = _prepare(ds, stats)
    total = 0.0
    with tg.no_grad():
        for i in range(0, len(ds), chunk):
            c = tg.seed_coordinates(prep.coords[i:i + chunk], (0, 1))
            r = physics_residuals(forward(params, c), c, stats, scales, weights, const)["continuity"]
            total += float(np.abs(r.value).sum())
    return total / len(ds)
