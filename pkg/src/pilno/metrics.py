"""Per-field error metrics (MAE, RMSE, nRMSE, R^2) and checkpoint evaluation."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import INPUTS, OUTPUTS, Dataset, DatasetError, NormStats, read_dataset, stats_path
from .model import encode_input, load_checkpoint, predict

UNITS = {"U": "m/s", "V": "m/s", "P": "Pa", "phi": "-"}


class MetricsError(ValueError):
    pass


@dataclass
class FieldMetrics:
    mae: float
    rmse: float
    nrmse: float | None  # None when the truth is constant
    r2: float | None

    def to_dict(self) -> dict:
        return {"mae": self.mae, "rmse": self.rmse, "nrmse": self.nrmse, "r2": self.r2}


@dataclass
class MetricReport:
    fields: dict[str, FieldMetrics]
    n_points: int
    units: dict[str, str] = field(default_factory=lambda: dict(UNITS))

    def to_dict(self) -> dict:
        return {"n_points": self.n_points, "units": self.units,
                "fields": {k: v.to_dict() for k, v in self.fields.items()}}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def table(self) -> str:
        rows = [f"{'field':<6}{'R2':>10}{'RMSE':>14}{'nRMSE':>10}{'MAE':>14}  unit"]
        for name, m in self.fields.items():
            r2 = "undef" if m.r2 is None else f"{m.r2:.4f}"
            nr = "undef" if m.nrmse is None else f"{100.0 * m.nrmse:.2f}%"
            rows.append(f"{name:<6}{r2:>10}{m.rmse:>14.3e}{nr:>10}{m.mae:>14.3e}  {self.units.get(name, '')}")
        rows.append(f"n_points = {self.n_points}")
        return "\n".join(rows)


def field_metrics(truth, pred) -> FieldMetrics:
    truth = np.asarray(truth, dtype=np.float64).ravel()
    pred = np.asarray(pred, dtype=np.float64).ravel()
    if truth.shape != pred.shape:
        raise MetricsError(f"truth has {truth.size} values, prediction {pred.size}")
    if truth.size < 2:
        raise MetricsError("need at least two points")
    err = pred - truth
    mae = float(np.mean(np.abs(err)))
    ss_res = float(np.sum(err * err))
    rmse = math.sqrt(ss_res / truth.size)
    span = float(truth.max() - truth.min())
    if span == 0.0:
        return FieldMetrics(mae, rmse, None, None)
    ss_tot = float(np.sum((truth - truth.mean()) ** 2))
    return FieldMetrics(mae, rmse, rmse / span, 1.0 - ss_res / ss_tot)


def compute_metrics(truth, pred, names=OUTPUTS) -> MetricReport:
    """Metrics per column of (n, n_fields) arrays in physical units."""
    truth = np.asarray(truth, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    if truth.ndim == 1:
        truth, pred = truth[:, None], pred[:, None]
    if truth.shape != pred.shape:
        raise MetricsError(f"shape mismatch {truth.shape} vs {pred.shape}")
    if truth.shape[1] != len(names):
        raise MetricsError(f"expected {len(names)} fields, got {truth.shape[1]}")
    fields_ = {n: field_metrics(truth[:, i], pred[:, i]) for i, n in enumerate(names)}
    return MetricReport(fields_, len(truth))


def _stats_match(a: NormStats, b: NormStats, rtol: float = 1e-9) -> bool:
    da, db = a.to_dict(), b.to_dict()
    for key in ("input_min", "input_max", "output_mean", "output_std"):
        for k in set(da[key]) | set(db[key]):
            if k not in da[key] or k not in db[key]:
                return False
            x, y = da[key][k], db[key][k]
            if abs(x - y) > rtol * max(abs(x), abs(y), 1e-300):
                return False
    return True


def predict_dataset(params, stats: NormStats, ds: Dataset, chunk: int = 8192) -> np.ndarray:
    """Physical-unit predictions (n, 4) for every record of ``ds``."""
    enc = encode_input(ds.x, ds.y, ds.t, ds.theta_s, stats)
    return stats.denormalize_outputs(predict(params, enc.coords, chunk))


def evaluate_checkpoint(ckpt_path, data_path, times=None, time_tol: float = 1e-9,
                        errors_csv=None) -> MetricReport:
    """Evaluate a checkpoint against a dataset CSV.

    ``times`` restricts the evaluation to those snapshot times. If the dataset
    has a stats sidecar it must agree with the stats stored in the checkpoint.
    """
    params, stats = load_checkpoint(ckpt_path)
    if stats is None:
        raise MetricsError(f"{ckpt_path}: checkpoint carries no normalization statistics")
    sidecar = stats_path(data_path)
    if sidecar.exists() and not _stats_match(stats, NormStats.load(sidecar)):
        raise MetricsError(f"normalization statistics of {ckpt_path} and {sidecar} differ")
    ds = read_dataset(data_path)
    if times is not None:
        keep = np.zeros(len(ds), dtype=bool)
        for t in times:
            keep |= np.abs(ds.t - t) <= time_tol
        ds = ds.subset(keep)
    if len(ds) == 0:
        raise DatasetError("no records to evaluate")
    pred = predict_dataset(params, stats, ds)
    truth = ds.outputs()
    if errors_csv is not None:
        write_error_csv(errors_csv, ds, np.abs(pred - truth))
    return compute_metrics(truth, pred)


def write_error_csv(path, ds: Dataset, abs_err: np.ndarray) -> None:
    path = Path(path)
    with open(path, "w") as fh:
        fh.write(",".join(INPUTS) + ",theta_s,field,abs_error\n")
        pts = ds.inputs().tolist()
        for j, name in enumerate(OUTPUTS):
            for p, e in zip(pts, abs_err[:, j].tolist()):
                fh.write(f"{p[0]!r},{p[1]!r},{p[2]!r},{p[3]!r},{name},{e!r}\n")
