"""Manufactured droplet-spreading corpus, normalization and dataset files.

Velocity comes from a decaying streamfunction (divergence-free by
construction). The phase field is a tanh profile of the signed distance to a
spherical cap whose base radius relaxes exponentially toward the equilibrium
radius for the substrate contact angle at fixed droplet volume. Pressure is
the capillary jump 2*sigma/R inside the cap.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

COLUMNS = ("x", "y", "t", "theta_s", "U", "V", "P", "phi")
INPUTS = ("x", "y", "t")
OUTPUTS = ("U", "V", "P", "phi")
ANGLE_RANGE = (20.0, 160.0)
ANGLE_TOL = 1e-9


class DatasetError(ValueError):
    pass


@dataclass
class GeneratorConfig:
    """Manufactured-solution settings. Lengths in m, times in s, angles in degrees.

    The domain size, initial radius and interface width are not taken from any
    experiment; they only set a plausible millimetre-scale droplet.
    """

    length: float = 1e-3
    height: float = 1e-3
    angles: list[float] = field(default_factory=lambda: np.linspace(20.0, 160.0, 12).tolist())
    held_out_angles: list[float] = field(default_factory=lambda: [45.0, 135.0])
    t_end: float = 0.08
    n_times: int = 200
    points_per_snapshot: int = 256
    interface_fraction: float = 0.5
    amplitude: float = 1.6e-5  # streamfunction A, m^2/s
    tau_v: float = 0.04
    tau_s: float = 0.02
    r0: float = 2.5e-4
    initial_angle: float = 90.0
    eps: float = 3e-5
    sigma_surface: float = 0.072
    p_amb: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        if not (self.length > 0 and self.height > 0):
            raise DatasetError("degenerate domain: length and height must be positive")
        if not self.angles:
            raise DatasetError("angle list is empty")
        for a in list(self.angles) + list(self.held_out_angles):
            if not ANGLE_RANGE[0] <= a <= ANGLE_RANGE[1]:
                raise DatasetError(f"contact angle {a} outside {ANGLE_RANGE}")
        if self.n_times < 1 or self.points_per_snapshot < 1:
            raise DatasetError("n_times and points_per_snapshot must be >= 1")
        if not 0.0 <= self.interface_fraction <= 1.0:
            raise DatasetError("interface_fraction must lie in [0, 1]")
        for name in ("tau_v", "tau_s", "r0", "eps", "t_end"):
            if getattr(self, name) <= 0:
                raise DatasetError(f"{name} must be positive")
        if 2 * self.r0 >= self.length:
            raise DatasetError("initial droplet does not fit in the domain")

    @classmethod
    def from_dict(cls, d: Mapping) -> "GeneratorConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise DatasetError(f"unknown generator config keys: {sorted(unknown)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg

    @classmethod
    def from_json(cls, path) -> "GeneratorConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.t_end, self.n_times)


# --- closed-form fields ----------------------------------------------------


def cap_volume(base_radius, theta_deg):
    """Volume of a spherical cap with the given base radius and contact angle."""
    th = np.radians(theta_deg)
    c, s = np.cos(th), np.sin(th)
    return math.pi / 3.0 * base_radius ** 3 * (2.0 - 3.0 * c + c ** 3) / s ** 3


def equilibrium_radius(theta_deg, volume):
    th = np.radians(theta_deg)
    c, s = np.cos(th), np.sin(th)
    return (3.0 * volume * s ** 3 / (math.pi * (2.0 - 3.0 * c + c ** 3))) ** (1.0 / 3.0)


def cap_height(base_radius, volume):
    """Height h solving V = pi h (3 a^2 + h^2) / 6 (one real root, Cardano)."""
    a = np.asarray(base_radius, dtype=np.float64)
    p = 3.0 * a ** 2
    q = -6.0 * volume / math.pi
    disc = np.sqrt(q * q / 4.0 + p ** 3 / 27.0)
    return np.cbrt(-q / 2.0 + disc) + np.cbrt(-q / 2.0 - disc)


def base_radius(t, theta_deg, cfg: GeneratorConfig):
    vol = cap_volume(cfg.r0, cfg.initial_angle)
    r_eq = equilibrium_radius(theta_deg, vol)
    return r_eq + (cfg.r0 - r_eq) * np.exp(-np.asarray(t) / cfg.tau_s)


def cap_geometry(t, theta_deg, cfg: GeneratorConfig):
    """(base radius, sphere radius, centre height) of the cap at time ``t``."""
    vol = cap_volume(cfg.r0, cfg.initial_angle)
    a = base_radius(t, theta_deg, cfg)
    h = cap_height(a, vol)
    big_r = (a * a + h * h) / (2.0 * h)
    return a, big_r, h - big_r


def velocity(x, y, t, cfg: GeneratorConfig):
    k_x, k_y = math.pi / cfg.length, math.pi / cfg.height
    decay = cfg.amplitude * np.exp(-np.asarray(t) / cfg.tau_v)
    u = decay * k_y * np.sin(k_x * x) * np.cos(k_y * y)
    v = -decay * k_x * np.cos(k_x * x) * np.sin(k_y * y)
    return u, v


def velocity_gradients(x, y, t, cfg: GeneratorConfig):
    """Analytic (dU/dx, dV/dy, dU/dt)."""
    k_x, k_y = math.pi / cfg.length, math.pi / cfg.height
    decay = cfg.amplitude * np.exp(-np.asarray(t) / cfg.tau_v)
    cc = np.cos(k_x * x) * np.cos(k_y * y)
    du_dx = decay * k_x * k_y * cc
    dv_dy = -decay * k_x * k_y * cc
    du_dt = -decay / cfg.tau_v * k_y * np.sin(k_x * x) * np.cos(k_y * y)
    return du_dx, dv_dy, du_dt


def phase_field(x, y, t, theta_deg, cfg: GeneratorConfig):
    _, big_r, yc = cap_geometry(t, theta_deg, cfg)
    dist = big_r - np.hypot(x - cfg.length / 2.0, y - yc)
    return np.tanh(dist / (math.sqrt(2.0) * cfg.eps))


def pressure(phi, t, theta_deg, cfg: GeneratorConfig):
    _, big_r, _ = cap_geometry(t, theta_deg, cfg)
    return cfg.p_amb + cfg.sigma_surface * (2.0 / big_r) * (1.0 + phi) / 2.0


# --- datasets --------------------------------------------------------------


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray
    t: np.ndarray
    theta_s: np.ndarray
    U: np.ndarray
    V: np.ndarray
    P: np.ndarray
    phi: np.ndarray

    def __len__(self) -> int:
        return len(self.x)

    def column(self, name: str) -> np.ndarray:
        return getattr(self, name)

    def subset(self, idx) -> "Dataset":
        return Dataset(*(self.column(c)[idx] for c in COLUMNS))

    def inputs(self) -> np.ndarray:
        return np.stack([self.x, self.y, self.t, self.theta_s], axis=-1)

    def outputs(self) -> np.ndarray:
        return np.stack([self.U, self.V, self.P, self.phi], axis=-1)

    def angles(self) -> np.ndarray:
        return np.unique(self.theta_s)

    @classmethod
    def concat(cls, parts: Sequence["Dataset"]) -> "Dataset":
        return cls(*(np.concatenate([p.column(c) for p in parts]) for c in COLUMNS))

    @classmethod
    def empty(cls) -> "Dataset":
        return cls(*(np.zeros(0) for _ in COLUMNS))


def _sample_points(n: int, t: float, theta: float, cfg: GeneratorConfig, rng) -> tuple:
    n_iface = int(round(n * cfg.interface_fraction))
    xs = [rng.uniform(0.0, cfg.length, n - n_iface)]
    ys = [rng.uniform(0.0, cfg.height, n - n_iface)]
    if n_iface:
        _, big_r, yc = cap_geometry(t, theta, cfg)
        lo = math.asin(float(np.clip(-yc / big_r, -1.0, 1.0)))
        band = 4.0 * math.sqrt(2.0) * cfg.eps
        got = 0
        while got < n_iface:
            m = 2 * (n_iface - got) + 8
            alpha = rng.uniform(lo, math.pi - lo, m)
            rad = big_r + rng.uniform(-band, band, m)
            px = cfg.length / 2.0 + rad * np.cos(alpha)
            py = yc + rad * np.sin(alpha)
            ok = (px >= 0) & (px <= cfg.length) & (py >= 0) & (py <= cfg.height)
            px, py = px[ok][: n_iface - got], py[ok][: n_iface - got]
            xs.append(px)
            ys.append(py)
            got += len(px)
    return np.concatenate(xs), np.concatenate(ys)


def generate_snapshot(t: float, theta: float, n: int, cfg: GeneratorConfig, rng) -> Dataset:
    x, y = _sample_points(n, t, theta, cfg, rng)
    tt = np.full_like(x, t)
    u, v = velocity(x, y, tt, cfg)
    phi = phase_field(x, y, tt, theta, cfg)
    p = pressure(phi, tt, theta, cfg)
    return Dataset(x, y, tt, np.full_like(x, theta), u, v, p, phi)


def generate_angles(angles: Iterable[float], cfg: GeneratorConfig) -> Dataset:
    """Records for every (angle, snapshot) pair, ordered by angle then time.

    Each pair draws from its own seed stream so the result does not depend on
    how shards are scheduled.
    """
    times = cfg.times()
    parts = []
    for theta in angles:
        for j, t in enumerate(times):
            key = (cfg.seed, int(round(float(theta) * 1e6)), j)
            rng = np.random.default_rng(np.random.SeedSequence(key))
            parts.append(generate_snapshot(float(t), float(theta), cfg.points_per_snapshot, cfg, rng))
    return Dataset.concat(parts) if parts else Dataset.empty()


def generate_manufactured_dataset(cfg: GeneratorConfig) -> tuple[Dataset, Dataset]:
    """(train, test): configured angles, then the held-out angles."""
    cfg.validate()
    return generate_angles(cfg.angles, cfg), generate_angles(cfg.held_out_angles, cfg)


def write_generated(cfg: GeneratorConfig, out_dir) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train, test = generate_manufactured_dataset(cfg)
    stats = fit_norm_stats(train)
    paths = {"train": out / "train.csv", "test": out / "test.csv"}
    write_dataset(paths["train"], train)
    stats.save(stats_path(paths["train"]))
    if len(test):
        write_dataset(paths["test"], test)
        stats.save(stats_path(paths["test"]))
    else:
        del paths["test"]
    with open(out / "generator.json", "w") as fh:
        json.dump(dataclasses.asdict(cfg), fh, indent=2)
    return paths


def split_by_contact_angle(ds: Dataset, held_out: Iterable[float]) -> tuple[Dataset, Dataset]:
    held_out = list(held_out)
    mask = np.zeros(len(ds), dtype=bool)
    for a in held_out:
        hit = np.abs(ds.theta_s - a) <= ANGLE_TOL
        if not hit.any():
            raise DatasetError(f"held-out angle {a} not present in dataset")
        mask |= hit
    return ds.subset(~mask), ds.subset(mask)


# --- normalization ---------------------------------------------------------


@dataclass
class NormStats:
    """Min/max of the coordinate inputs and mean/std of the output fields."""

    input_min: dict[str, float]
    input_max: dict[str, float]
    output_mean: dict[str, float]
    output_std: dict[str, float]
    constant_outputs: list[str] = field(default_factory=list)

    def span(self, name: str) -> tuple[float, float]:
        return self.input_min[name], self.input_max[name]

    def normalize_inputs(self, values: np.ndarray, clip: bool = True) -> tuple[np.ndarray, int]:
        """(..., 3) physical x, y, t -> [-1, 1]; returns (array, number clamped)."""
        lo = np.array([self.input_min[k] for k in INPUTS])
        hi = np.array([self.input_max[k] for k in INPUTS])
        z = 2.0 * (values - lo) / (hi - lo) - 1.0
        n_out = int(np.count_nonzero((z < -1.0) | (z > 1.0)))
        if clip:
            z = np.clip(z, -1.0, 1.0)
        return z, n_out

    def denormalize_inputs(self, z: np.ndarray) -> np.ndarray:
        lo = np.array([self.input_min[k] for k in INPUTS])
        hi = np.array([self.input_max[k] for k in INPUTS])
        return lo + (z + 1.0) * (hi - lo) / 2.0

    def _mean_std(self) -> tuple[np.ndarray, np.ndarray]:
        mu = np.array([self.output_mean[k] for k in OUTPUTS])
        sd = np.array([self.output_std[k] for k in OUTPUTS])
        return mu, sd

    def normalize_outputs(self, values: np.ndarray) -> np.ndarray:
        mu, sd = self._mean_std()
        safe = np.where(sd > 0, sd, 1.0)
        return np.where(sd > 0, (values - mu) / safe, 0.0)

    def denormalize_outputs(self, z):
        """Works on arrays and graph nodes alike."""
        mu, sd = self._mean_std()
        return z * sd + mu

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "NormStats":
        return cls(**d)

    def save(self, path) -> None:
        _atomic_write_text(path, json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path) -> "NormStats":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def fit_norm_stats(ds: Dataset) -> NormStats:
    if len(ds) == 0:
        raise DatasetError("cannot fit normalization statistics on an empty split")
    in_min, in_max = {}, {}
    for k in INPUTS:
        col = ds.column(k)
        lo, hi = float(col.min()), float(col.max())
        if not hi > lo:
            raise DatasetError(f"input coordinate {k!r} is constant; cannot map to [-1, 1]")
        in_min[k], in_max[k] = lo, hi
    mean, std, constant = {}, {}, []
    for k in OUTPUTS:
        col = ds.column(k)
        mean[k] = float(col.mean())
        std[k] = float(col.std())
        if std[k] == 0.0:
            constant.append(k)
    return NormStats(in_min, in_max, mean, std, constant)


def stats_path(dataset_path) -> Path:
    p = Path(dataset_path)
    return p.with_name(p.stem + ".stats.json")


# --- files -----------------------------------------------------------------


def _atomic_write_text(path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def write_dataset(path, ds: Dataset) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    cols = [ds.column(c).tolist() for c in COLUMNS]
    with open(tmp, "w", newline="") as fh:
        fh.write(",".join(COLUMNS) + "\n")
        for row in zip(*cols):
            fh.write(",".join(map(repr, row)) + "\n")
    os.replace(tmp, path)


def read_dataset(path, column_map: Mapping[str, str] | None = None) -> Dataset:
    """Read a dataset CSV.

    Without ``column_map`` the header must be exactly ``x,y,t,theta_s,U,V,P,phi``.
    ``column_map`` maps each of those names to a column of a foreign file.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DatasetError(f"{path}: empty file")
        header = [h.strip() for h in header]
        if column_map is None:
            if tuple(header) != COLUMNS:
                raise DatasetError(f"{path}: header mismatch, expected {','.join(COLUMNS)} got {','.join(header)}")
            idx = list(range(len(COLUMNS)))
        else:
            try:
                idx = [header.index(column_map[c]) for c in COLUMNS]
            except (KeyError, ValueError) as exc:
                raise DatasetError(f"{path}: header mismatch for column map ({exc})") from None
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                vals = [float(row[i]) for i in idx]
            except (ValueError, IndexError):
                raise DatasetError(f"{path}: malformed row at line {lineno}") from None
            if not all(math.isfinite(v) for v in vals):
                raise DatasetError(f"{path}: non-finite value at line {lineno}")
            rows.append(vals)
    if not rows:
        raise DatasetError(f"{path}: no records")
    arr = np.array(rows, dtype=np.float64)
    return Dataset(*(arr[:, i].copy() for i in range(len(COLUMNS))))


def read_points(path) -> np.ndarray:
    """Query points CSV with header x,y,t,theta_s -> (n, 4) array."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DatasetError(f"{path}: empty file")
        if [h.strip() for h in header] != list(COLUMNS[:4]):
            raise DatasetError(f"{path}: header mismatch, expected x,y,t,theta_s")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                if len(row) < 4:
                    raise ValueError
                rows.append([float(v) for v in row[:4]])
            except ValueError:
                raise DatasetError(f"{path}: malformed row at line {lineno}") from None
    if not rows:
        raise DatasetError(f"{path}: no points")
    return np.array(rows, dtype=np.float64)
