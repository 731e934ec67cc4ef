"""Laplace neural operator: input encoding, pole-kernel layers, checkpoints."""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import tensorgraph as tg
from .data import NormStats

CHECKPOINT_FORMAT = "pilno-ckpt"
CHECKPOINT_VERSION = 1
EXP_CLAMP = 50.0
N_INPUTS = 5
N_OUTPUTS = 4


@dataclass(frozen=True)
class ModelConfig:
    d_v: int = 256
    n_layers: int = 8
    n_poles: int = 64

    def __post_init__(self):
        if min(self.d_v, self.n_layers, self.n_poles) < 1:
            raise ValueError("d_v, n_layers and n_poles must all be >= 1")


@dataclass
class LayerParams:
    log_sigma: object
    omega: object
    W_real: object
    W_imag: object
    W_loc: object
    W_ker: object
    b_ker: object
    ln_gain: object
    ln_bias: object


LAYER_FIELDS = ("log_sigma", "omega", "W_real", "W_imag", "W_loc", "W_ker", "b_ker", "ln_gain", "ln_bias")


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape for every learnable array, in canonical order."""
    d, m = cfg.d_v, cfg.n_poles
    shapes = {"W_lift": (N_INPUTS, d), "b_lift": (d,)}
    for i in range(cfg.n_layers):
        layer = {
            "log_sigma": (m,), "omega": (m,),
            "W_real": (d, m), "W_imag": (d, m),
            "W_loc": (d, d),
            "W_ker": (2 * m, d), "b_ker": (d,),
            "ln_gain": (d,), "ln_bias": (d,),
        }
        shapes.update({f"layers.{i}.{k}": s for k, s in layer.items()})
    shapes.update({"W_proj1": (d, d), "b_proj1": (d,), "W_proj2": (d, N_OUTPUTS), "b_proj2": (N_OUTPUTS,)})
    return shapes


@dataclass
class ModelParams:
    config: ModelConfig
    arrays: dict[str, np.ndarray]
    seed: int = 0

    def layer(self, i: int, source: Mapping | None = None) -> LayerParams:
        src = self.arrays if source is None else source
        return LayerParams(*(src[f"layers.{i}.{k}"] for k in LAYER_FIELDS))

    def count(self) -> int:
        return sum(a.size for a in self.arrays.values())

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.arrays.items()}, self.seed)

    def poles(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """Per layer (sigma, omega)."""
        return [(np.exp(self.arrays[f"layers.{i}.log_sigma"]), self.arrays[f"layers.{i}.omega"].copy())
                for i in range(self.config.n_layers)]


def _glorot(rng, fan_in, fan_out, shape):
    lim = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, shape)


def init_params(cfg: ModelConfig, seed: int) -> ModelParams:
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape in param_shapes(cfg).items():
        base = name.rsplit(".", 1)[-1]
        if base == "log_sigma":
            arrays[name] = rng.uniform(math.log(1e-2), math.log(1e2), shape)
        elif base == "omega":
            arrays[name] = rng.uniform(-math.pi, math.pi, shape)
        elif base == "ln_gain":
            arrays[name] = np.ones(shape)
        elif base.startswith("b_") or base == "ln_bias":
            arrays[name] = np.zeros(shape)
        else:
            arrays[name] = _glorot(rng, shape[0], shape[1], shape)
    return ModelParams(cfg, arrays, seed)


# --- encoding --------------------------------------------------------------


@dataclass
class EncodedBatch:
    coords: np.ndarray  # (B, N, 5): x~, y~, t~, cos, sin
    n_clamped: int = 0

    @property
    def kernel_time(self) -> np.ndarray:
        return (self.coords[..., 2:3] + 1.0) / 2.0


def encode_input(x, y, t, theta_s, stats: NormStats) -> EncodedBatch:
    """Physical coordinates (theta_s in degrees) -> model inputs.

    Out-of-range x, y, t are clamped to [-1, 1]; ``n_clamped`` records how many.
    """
    xyt = np.stack(np.broadcast_arrays(*(np.asarray(v, dtype=np.float64) for v in (x, y, t))), axis=-1)
    z, n_out = stats.normalize_inputs(xyt)
    th = np.radians(np.broadcast_to(np.asarray(theta_s, dtype=np.float64), z.shape[:-1]))
    coords = np.concatenate([z, np.cos(th)[..., None], np.sin(th)[..., None]], axis=-1)
    return EncodedBatch(coords, n_out)


# --- forward ---------------------------------------------------------------


def laplace_kernel(t_k, log_sigma, omega):
    """(K_real, K_imag) for kernel time t_k (..., 1) and M poles."""
    sigma = tg.exp(log_sigma)
    damp = tg.exp(tg.neg(tg.clamp_max(tg.mul(t_k, sigma), EXP_CLAMP)))
    phase = tg.mul(t_k, omega)
    return tg.mul(damp, tg.cos(phase)), tg.mul(damp, tg.sin(phase))


def laplace_projection_layer(v, t_k, lp: LayerParams, ln_eps: float = 1e-5) -> tg.Node:
    v = tg.as_node(v)
    d_v = v.shape[-1]
    if tg.value(lp.W_real).shape[0] != d_v or tg.value(lp.W_loc).shape != (d_v, d_v):
        raise ValueError(f"layer parameters do not match latent width {d_v}")
    if tg.as_node(t_k).shape[:-1] != v.shape[:-1]:
        raise ValueError("kernel time and latent features disagree on batch shape")
    k_re, k_im = laplace_kernel(t_k, lp.log_sigma, lp.omega)
    p_re = tg.mul(tg.matmul(v, lp.W_real), k_re)
    p_im = tg.mul(tg.matmul(v, lp.W_imag), k_im)
    kern = tg.add(tg.matmul(tg.concat([p_re, p_im]), lp.W_ker), lp.b_ker)
    local = tg.matmul(v, lp.W_loc)
    h = tg.layer_norm(tg.gelu(tg.add(local, kern)), ln_eps)
    return tg.add(tg.mul(h, lp.ln_gain), lp.ln_bias)


def forward(params: ModelParams, coords, nodes: Mapping[str, tg.Node] | None = None) -> tg.Node:
    """(B, N, 5) encoded coordinates -> (B, N, 4) normalized [U, V, P, phi].

    ``coords`` may be an array, an :class:`EncodedBatch`, or a seeded node
    (for input derivatives). ``nodes`` supplies graph leaves for the
    parameters when gradients are wanted.
    """
    if isinstance(coords, EncodedBatch):
        coords = coords.coords
    c = tg.as_node(coords)
    if c.shape[-1] != N_INPUTS:
        raise ValueError(f"expected {N_INPUTS} input features, got {c.shape[-1]}")
    p = nodes if nodes is not None else {k: tg.const(v) for k, v in params.arrays.items()}
    t_k = tg.mul(tg.add(tg.take(c, 2), 1.0), 0.5)
    v = tg.gelu(tg.add(tg.matmul(c, p["W_lift"]), p["b_lift"]))
    for i in range(params.config.n_layers):
        v = laplace_projection_layer(v, t_k, params.layer(i, p))
    h = tg.gelu(tg.add(tg.matmul(v, p["W_proj1"]), p["b_proj1"]))
    return tg.add(tg.matmul(h, p["W_proj2"]), p["b_proj2"])


def predict(params: ModelParams, coords: np.ndarray, chunk: int = 8192) -> np.ndarray:
    """Value-only forward over (n, 5) coordinates, in chunks."""
    coords = np.asarray(coords, dtype=np.float64)
    out = np.empty((len(coords), N_OUTPUTS))
    with tg.no_grad():
        for s in range(0, len(coords), chunk):
            out[s:s + chunk] = forward(params, coords[None, s:s + chunk]).value[0]
    return out


# --- checkpoints -----------------------------------------------------------


class CheckpointError(Exception):
    code = "checkpoint"


class CheckpointVersionError(CheckpointError):
    code = "version"


class CheckpointShapeError(CheckpointError):
    code = "shape"


class CheckpointTruncatedError(CheckpointError):
    code = "truncated"


def save_checkpoint(params: ModelParams, stats: NormStats | None, path, extra: Mapping | None = None) -> None:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": {"d_v": params.config.d_v, "n_layers": params.config.n_layers,
                   "n_poles": params.config.n_poles, "seed": params.seed, **(extra or {})},
        "norm_stats": None if stats is None else stats.to_dict(),
        "params": {k: v.tolist() for k, v in params.arrays.items()},
    }
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w") as fh:
        json.dump(doc, fh)
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[ModelParams, NormStats | None]:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise CheckpointTruncatedError(f"{path}: unreadable checkpoint ({exc})") from None
    if not isinstance(doc, dict) or doc.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not a {CHECKPOINT_FORMAT} document")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"{path}: version {doc.get('version')} != {CHECKPOINT_VERSION}")
    try:
        c = doc["config"]
        cfg = ModelConfig(int(c["d_v"]), int(c["n_layers"]), int(c["n_poles"]))
        raw = doc["params"]
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointTruncatedError(f"{path}: missing field {exc}") from None
    expected = param_shapes(cfg)
    if set(raw) != set(expected):
        raise CheckpointShapeError(f"{path}: parameter names do not match the manifest")
    arrays = {}
    for name, shape in expected.items():
        try:
            arr = np.asarray(raw[name], dtype=np.float64)
        except (ValueError, TypeError):
            raise CheckpointShapeError(f"{path}: {name} is not a rectangular numeric array") from None
        if arr.shape != shape:
            raise CheckpointShapeError(f"{path}: {name} has shape {arr.shape}, manifest says {shape}")
        arrays[name] = arr
    stats = None if doc.get("norm_stats") is None else NormStats.from_dict(doc["norm_stats"])
    return ModelParams(cfg, arrays, int(c.get("seed", 0))), stats
