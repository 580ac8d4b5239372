"""Run configuration and the stages built on it: data, model bundles, reports.

A run directory holds ``config.json`` plus ``data/``, ``model/`` and
``report/`` subtrees.  Arrays are stored as little-endian float64 ``.npy``
files next to a JSON manifest with their SHA-256 digests; anything
wall-clock dependent goes to ``timings.json`` so that every other file is
reproducible byte for byte.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import __version__
from .coarsening import (
    CoarsePair,
    SubgridFluxField,
    coarse_step,
    coarsen_state,
    exact_subgrid_flux,
    ic_family,
)
from .estimator import QMClosure, StageError
from .spectral import load_basis, save_basis
from .swe_fv import (
    Grid1D,
    SolverBlowupError,
    SweParams,
    SweState,
    froude_from_gravity,
    simulate,
    step_modified_euler,
)

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
FIELDS = ("h", "q")


@dataclass
class RunConfig:
    """All knobs of a closure experiment; defaults give the full-scale setup."""

    n_fine: int = 1920
    ratio: int = 20
    domain_min: float = -25.0
    domain_max: float = 25.0
    gravity: float = 9.81
    froude: Optional[float] = None
    dt_factor: float = 0.1
    spinup_steps: int = 12200
    sample_steps: int = 3260
    sample_stride: Optional[int] = None
    train_deltas: List[float] = field(default_factory=lambda: [0.0, 0.5, 1.0])
    test_deltas: List[float] = field(default_factory=lambda: [0.25, 0.75])
    n_delays: int = 64
    stencil_width: int = 5
    n_eigenfunctions: int = 6144
    eigenfunctions_per_trajectory: Optional[List[int]] = None
    rank: int = 6144
    pivoting: str = "greedy"
    seed: int = 0
    conditioning_period: int = 10
    horizon: int = 120
    max_bandwidth_pairs: int = 4_000_000
    cond_bandwidth_scale: float = 1.0
    scale_exponent: float = -0.5
    observable_dtype: str = "float64"
    output_dir: str = "qmcl_run"

    def __post_init__(self):
        self.validate()

    def validate(self):
        for name in ("n_fine", "ratio", "spinup_steps", "sample_steps", "n_delays", "stencil_width",
                     "n_eigenfunctions", "rank", "conditioning_period", "max_bandwidth_pairs"):
            value = getattr(self, name)
            if int(value) != value or value < (0 if name == "spinup_steps" else 1):
                raise ValueError(f"{name} must be a positive integer, got {value}")
        if self.horizon < 0:
            raise ValueError("horizon must be nonnegative")
        if self.n_fine % self.ratio:
            raise ValueError(f"n_fine={self.n_fine} is not divisible by ratio={self.ratio}")
        if self.stencil_width % 2 == 0:
            raise ValueError("stencil_width must be odd")
        if self.dt_factor <= 0 or self.gravity <= 0 or (self.froude is not None and self.froude <= 0):
            raise ValueError("dt_factor, gravity and froude must all be positive")
        if self.sample_stride is not None and self.sample_stride < 1:
            raise ValueError("sample_stride must be >= 1")
        if self.pivoting not in ("greedy", "random"):
            raise ValueError("pivoting must be 'greedy' or 'random'")
        if self.observable_dtype not in ("float64", "float32"):
            raise ValueError("observable_dtype must be float64 or float32")
        for d in list(self.train_deltas) + list(self.test_deltas):
            if not 0.0 <= d <= 1.0:
                raise ValueError(f"delta {d} outside [0, 1]")
        if not self.train_deltas:
            raise ValueError("need at least one training trajectory")
        if self.n_samples_per_trajectory < self.n_delays:
            raise ValueError(
                f"{self.n_samples_per_trajectory} samples per trajectory cannot fill {self.n_delays} delays"
            )

    # presets

    @classmethod
    def full(cls, **overrides):
        return cls(**overrides)

    @classmethod
    def desk(cls, **overrides):
        """Laptop-sized setup: same physical times as the full-scale run on a 480-cell grid."""
        values = dict(
            n_fine=480, ratio=10, spinup_steps=3050, sample_steps=815,
            train_deltas=[0.0, 1.0], test_deltas=[0.5], n_delays=16,
            n_eigenfunctions=256, rank=512, horizon=60,
        )
        values.update(overrides)
        return cls(**values)

    @classmethod
    def toy(cls, **overrides):
        values = dict(
            n_fine=96, ratio=4, spinup_steps=200, sample_steps=160,
            train_deltas=[0.0, 1.0], test_deltas=[0.5], n_delays=8,
            n_eigenfunctions=64, rank=128, horizon=20, max_bandwidth_pairs=250_000,
        )
        values.update(overrides)
        return cls(**values)

    PRESETS = ("full", "desk", "toy")

    @classmethod
    def preset(cls, name, **overrides):
        if name not in cls.PRESETS:
            raise ValueError(f"unknown preset {name!r}")
        return getattr(cls, name)(**overrides)

    # derived quantities

    @property
    def fine_grid(self) -> Grid1D:
        return Grid1D(self.n_fine, self.domain_min, self.domain_max)

    @property
    def pair(self) -> CoarsePair:
        return CoarsePair(self.fine_grid, self.ratio)

    @property
    def froude_number(self) -> float:
        return froude_from_gravity(self.gravity) if self.froude is None else self.froude

    @property
    def fine_params(self) -> SweParams:
        return SweParams(froude=self.froude_number, dt=self.dt_factor * self.fine_grid.dx)

    @property
    def coarse_params(self) -> SweParams:
        return self.pair.coarse_params(self.fine_params)

    @property
    def stride(self) -> int:
        return self.ratio if self.sample_stride is None else self.sample_stride

    @property
    def n_cells(self) -> int:
        return self.n_fine // self.ratio

    @property
    def n_samples_per_trajectory(self) -> int:
        return math.ceil(self.sample_steps / self.stride)

    @property
    def n_embedded_per_trajectory(self) -> int:
        return self.n_samples_per_trajectory - self.n_delays + 1

    @property
    def n_product_samples(self) -> int:
        return self.n_embedded_per_trajectory * len(self.train_deltas) * self.n_cells

    # serialization

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, values):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**values)

    def save(self, path):
        write_json(path, self.to_dict())

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def estimator(self) -> QMClosure:
        return QMClosure(
            n_delays=self.n_delays,
            stencil_width=self.stencil_width,
            n_eigenfunctions=self.n_eigenfunctions,
            eigenfunctions_per_trajectory=self.eigenfunctions_per_trajectory,
            rank=self.rank,
            pivoting=self.pivoting,
            seed=self.seed,
            froude=self.froude_number,
            domain_length=self.domain_max - self.domain_min,
            dt=self.coarse_params.dt,
            conditioning_period=self.conditioning_period,
            max_bandwidth_pairs=self.max_bandwidth_pairs,
            cond_bandwidth_scale=self.cond_bandwidth_scale,
            scale_exponent=self.scale_exponent,
        )


GENERATION_KEYS = (
    "n_fine", "ratio", "domain_min", "domain_max", "gravity", "froude", "dt_factor",
    "spinup_steps", "sample_steps", "sample_stride", "train_deltas",
)


# file helpers


def write_json(path, obj):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def save_arrays(directory, arrays: Dict[str, np.ndarray]):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    digests = {}
    for name, arr in arrays.items():
        path = directory / f"{name}.npy"
        np.save(path, np.ascontiguousarray(arr))
        digests[path.name] = sha256_file(path)
    return digests


# data generation


@dataclass
class TrainingSet:
    """Resolved states and exact subgrid fluxes, each ``(T, 2, M)`` per trajectory."""

    deltas: List[float]
    resolved: List[np.ndarray]
    fluxes: List[np.ndarray]
    fine_steps: List[int]
    outliers: List[int] = field(default_factory=list)

    def save(self, directory, config: RunConfig):
        directory = Path(directory)
        arrays = {}
        for i in range(len(self.deltas)):
            arrays[f"resolved_{i}"] = self.resolved[i]
            arrays[f"fluxes_{i}"] = self.fluxes[i]
        digests = save_arrays(directory, arrays)
        write_json(directory / "manifest.json", {
            "format_version": FORMAT_VERSION,
            "package_version": __version__,
            "deltas": list(self.deltas),
            "fine_steps": list(self.fine_steps),
            "flux_outliers": list(self.outliers),
            "flux_sampling": "subgrid fluxes taken at the same instant as the resolved sample (coarse step start)",
            "config": config.to_dict(),
            "files": digests,
        })

    @classmethod
    def load(cls, directory):
        directory = Path(directory)
        meta = read_json(directory / "manifest.json")
        n = len(meta["deltas"])
        return cls(
            deltas=meta["deltas"],
            resolved=[np.load(directory / f"resolved_{i}.npy") for i in range(n)],
            fluxes=[np.load(directory / f"fluxes_{i}.npy") for i in range(n)],
            fine_steps=meta["fine_steps"],
            outliers=meta.get("flux_outliers", []),
        ), meta


def spin_up(config: RunConfig, delta: float) -> SweState:
    grid, params = config.fine_grid, config.fine_params
    u = ic_family(delta, grid, domain_length=grid.length)
    u.validate(0)
    for n in range(1, config.spinup_steps + 1):
        u = step_modified_euler(u, grid, params, step=n)
    return u


def sample_trajectory(config: RunConfig, start: SweState, n_fine_steps: int, stride: int):
    """Coarsened states and exact subgrid fluxes every ``stride`` fine steps."""
    states = simulate(start, config.fine_grid, config.fine_params, n_fine_steps, stride)
    pair, params = config.pair, config.fine_params
    resolved = np.stack([coarsen_state(s, pair).to_array() for s in states])
    fluxes = np.stack([exact_subgrid_flux(s, pair, params).to_array() for s in states])
    return resolved, fluxes


def count_flux_outliers(fluxes, threshold=10.0):
    """Samples farther than ``threshold`` robust standard deviations from the median."""
    count = 0
    for f in range(2):
        x = fluxes[:, f].ravel()
        med = np.median(x)
        mad = 1.4826 * np.median(np.abs(x - med))
        if mad > 0:
            count += int(np.sum(np.abs(x - med) > threshold * mad))
    return count


def generate_training_data(config: RunConfig) -> TrainingSet:
    resolved, fluxes, outliers = [], [], []
    for delta in config.train_deltas:
        try:
            start = spin_up(config, delta)
            X, Y = sample_trajectory(config, start, config.sample_steps - 1, config.stride)
        except SolverBlowupError as exc:
            raise StageError(f"generate[delta={delta}]", exc) from exc
        n_out = count_flux_outliers(Y)
        if n_out:
            logger.warning("delta=%s: %d flux samples flagged as outliers", delta, n_out)
        resolved.append(X)
        fluxes.append(Y)
        outliers.append(n_out)
    steps = [config.spinup_steps + k * config.stride for k in range(config.n_samples_per_trajectory)]
    return TrainingSet(list(config.train_deltas), resolved, fluxes, steps, outliers)


# model bundle


def train(config: RunConfig, training: TrainingSet) -> QMClosure:
    if list(training.deltas) != list(config.train_deltas):
        raise StageError("train", "training set deltas do not match the configuration")
    if training.resolved[0].shape[2] != config.n_cells:
        raise StageError("train", "training set grid does not match the configuration")
    est = config.estimator()
    return est.fit(training.resolved, training.fluxes)


_FITTED_ARRAYS = ("transfer_", "obs_h_", "obs_q_", "cond_scales_", "train_stencils_")


def save_model(model: QMClosure, directory, config: RunConfig):
    directory = Path(directory)
    save_basis(model.basis_, directory / "basis")
    dtype = np.dtype(config.observable_dtype)
    arrays = {name.rstrip("_"): getattr(model, name) for name in _FITTED_ARRAYS}
    arrays["obs_h"] = arrays["obs_h"].astype(dtype)
    arrays["obs_q"] = arrays["obs_q"].astype(dtype)
    digests = save_arrays(directory, arrays)
    for name in ("phi.npy", "weights.npy", "eigvals.npy", "basis.json"):
        digests[f"basis/{name}"] = sha256_file(directory / "basis" / name)
    write_json(directory / "manifest.json", {
        "format_version": FORMAT_VERSION,
        "package_version": __version__,
        "estimator_params": model.get_params(),
        "fitted": {
            "eps": model.eps_,
            "eps_pilot": model.eps_pilot_,
            "eps_cond": model.eps_cond_,
            "log_geomean_pilot_density": model.log_gm_,
            "n_cells": model.n_cells_,
            "n_trajectories": model.n_trajectories_,
            "n_samples": model.basis_.n_samples,
            "n_basis": model.basis_.n_basis,
            "factors": model.factor_info_,
        },
        "dimensions": {"L": config.n_eigenfunctions, "r": config.rank, "NM": config.n_product_samples},
        "basis_construction": "partial Cholesky of raw kernel, then symmetric Sinkhorn of the factor, then reduced eigensolve",
        "observable_dtype": config.observable_dtype,
        "gravity": config.gravity,
        "froude": config.froude_number,
        "config": config.to_dict(),
        "files": digests,
    })
    write_json(directory / "timings.json", model.timings_)


def load_model(directory) -> QMClosure:
    directory = Path(directory)
    meta = read_json(directory / "manifest.json")
    model = QMClosure(**meta["estimator_params"])
    model.basis_, _ = load_basis(directory / "basis")
    for name in _FITTED_ARRAYS:
        setattr(model, name, np.load(directory / f"{name.rstrip('_')}.npy"))
    fitted = meta["fitted"]
    model.eps_ = fitted["eps"]
    model.eps_pilot_ = fitted["eps_pilot"]
    model.eps_cond_ = fitted["eps_cond"]
    model.log_gm_ = fitted["log_geomean_pilot_density"]
    model.n_cells_ = fitted["n_cells"]
    model.n_trajectories_ = fitted["n_trajectories"]
    model.factor_info_ = fitted["factors"]
    model.timings_ = {}
    return model


# prediction


@dataclass
class PredictionReport:
    """Aligned trajectories ``(T, 2, M)`` of the closure, the truth and the zero-closure baseline."""

    delta: Optional[float]
    predicted: np.ndarray
    surrogate_flux: np.ndarray
    zero_closure: np.ndarray
    truth: Optional[np.ndarray] = None
    true_flux: Optional[np.ndarray] = None
    skipped: List[int] = field(default_factory=list)
    conditioning_period: int = 1
    timings: Dict[str, float] = field(default_factory=dict)

    @property
    def n_steps(self):
        return self.predicted.shape[0] - 1

    def rmse_series(self):
        """Per-step spatial RMSE against the truth, ``{model: (T, 2)}``."""
        if self.truth is None:
            return {}
        return {
            "qmcl": np.sqrt(np.mean((self.predicted - self.truth) ** 2, axis=2)),
            "zero_closure": np.sqrt(np.mean((self.zero_closure - self.truth) ** 2, axis=2)),
        }

    def rmse(self):
        """Space-time RMSE per model and field."""
        if self.truth is None:
            return {}
        out = {}
        for name, pred in (("qmcl", self.predicted), ("zero_closure", self.zero_closure)):
            err = np.sqrt(np.mean((pred - self.truth) ** 2, axis=(0, 2)))
            out[name] = {f: float(err[i]) for i, f in enumerate(FIELDS)}
        return out

    def save(self, directory):
        directory = Path(directory)
        arrays = {"predicted": self.predicted, "surrogate_flux": self.surrogate_flux, "zero_closure": self.zero_closure}
        if self.truth is not None:
            arrays["truth"] = self.truth
            arrays["true_flux"] = self.true_flux
        digests = save_arrays(directory, arrays)
        write_json(directory / "manifest.json", {
            "format_version": FORMAT_VERSION,
            "delta": self.delta,
            "n_steps": self.n_steps,
            "conditioning_period": self.conditioning_period,
            "skipped_cells": self.skipped,
            "rmse": self.rmse(),
            "files": digests,
        })
        write_json(directory / "timings.json", self.timings)

    @classmethod
    def load(cls, directory):
        directory = Path(directory)
        meta = read_json(directory / "manifest.json")
        has_truth = (directory / "truth.npy").exists()
        return cls(
            delta=meta["delta"],
            predicted=np.load(directory / "predicted.npy"),
            surrogate_flux=np.load(directory / "surrogate_flux.npy"),
            zero_closure=np.load(directory / "zero_closure.npy"),
            truth=np.load(directory / "truth.npy") if has_truth else None,
            true_flux=np.load(directory / "true_flux.npy") if has_truth else None,
            skipped=meta["skipped_cells"],
            conditioning_period=meta["conditioning_period"],
        )


def zero_closure_rollout(initial, n_steps, grid: Grid1D, params: SweParams):
    """Coarse dynamics with all subgrid fluxes forced to zero."""
    u = SweState.from_array(initial)
    zeros = SubgridFluxField.zeros(len(u))
    out = [u.to_array()]
    for k in range(1, n_steps + 1):
        u = coarse_step(u, zeros, grid, params, step=k)
        out.append(u.to_array())
    return np.stack(out)


def predict(model: QMClosure, initial, horizon, conditioning_period, truth=None, true_flux=None, delta=None) -> PredictionReport:
    """Closed-model rollout plus the zero-closure baseline from the same initial state."""
    initial = np.asarray(initial, dtype=np.float64)
    timings = {}
    t0 = time.perf_counter()
    try:
        out = model.rollout(initial, horizon, conditioning_period)
    except SolverBlowupError as exc:
        raise StageError("predict", exc) from exc
    timings["qmcl"] = time.perf_counter() - t0
    grid = Grid1D(model.n_cells_, 0.0, model.domain_length)
    params = SweParams(froude=model._froude(), dt=model.dt)
    t0 = time.perf_counter()
    zero = zero_closure_rollout(initial, horizon, grid, params)
    timings["zero_closure"] = time.perf_counter() - t0
    if truth is not None and np.shape(truth) != out["states"].shape:
        raise ValueError("truth trajectory does not match the prediction horizon")
    if sum(out["skipped"]):
        logger.warning("%d cell conditionings kept their prior", sum(out["skipped"]))
    return PredictionReport(
        delta=delta,
        predicted=out["states"],
        surrogate_flux=out["fluxes"],
        zero_closure=zero,
        truth=truth,
        true_flux=true_flux,
        skipped=out["skipped"],
        conditioning_period=conditioning_period,
        timings=timings,
    )


def truth_trajectory(config: RunConfig, delta: float, horizon: int):
    """Spun-up fine run coarsened every coarse step: ``(resolved, fluxes)``."""
    try:
        start = spin_up(config, delta)
        return sample_trajectory(config, start, horizon * config.ratio, config.ratio)
    except SolverBlowupError as exc:
        raise StageError(f"truth[delta={delta}]", exc) from exc


def run_prediction(config: RunConfig, model: QMClosure, delta: float, horizon=None, conditioning_period=None):
    horizon = config.horizon if horizon is None else horizon
    period = config.conditioning_period if conditioning_period is None else conditioning_period
    t0 = time.perf_counter()
    X, Y = truth_trajectory(config, delta, horizon)
    elapsed = time.perf_counter() - t0
    report = predict(model, X[0], horizon, period, truth=X, true_flux=Y, delta=delta)
    report.timings["truth"] = elapsed
    return report


# tables


def _write_table(path, array, header):
    np.savetxt(path, array, delimiter=",", fmt="%.17g", header=header, comments="")


def export_report(report: PredictionReport, directory, x_centers=None) -> List[Path]:
    """Write space-time tables, final profiles and RMSE summaries as CSV."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    M = report.predicted.shape[2]
    cell_header = ",".join(f"cell_{m}" for m in range(M))
    series = {"qmcl": report.predicted, "zero_closure": report.zero_closure, "qmcl_flux": report.surrogate_flux}
    if report.truth is not None:
        series["truth"] = report.truth
        series["true_flux"] = report.true_flux
    written = []
    for name, arr in series.items():
        for i, f in enumerate(FIELDS):
            path = directory / f"{name}_{f}.csv"
            _write_table(path, arr[:, i, :], cell_header)
            written.append(path)

    x = np.arange(M, dtype=np.float64) if x_centers is None else np.asarray(x_centers)
    cols, names = [x], ["x"]
    for name, arr in series.items():
        for i, f in enumerate(FIELDS):
            cols.append(arr[-1, i, :])
            names.append(f"{name}_{f}")
    path = directory / "final_profiles.csv"
    _write_table(path, np.column_stack(cols), ",".join(names))
    written.append(path)

    if report.truth is not None:
        rm = report.rmse_series()
        steps = np.arange(report.n_steps + 1, dtype=np.float64)
        path = directory / "rmse_timeseries.csv"
        _write_table(
            path,
            np.column_stack([steps, rm["qmcl"][:, 0], rm["qmcl"][:, 1], rm["zero_closure"][:, 0], rm["zero_closure"][:, 1]]),
            "step,qmcl_h,qmcl_q,zero_closure_h,zero_closure_q",
        )
        written.append(path)
        path = directory / "rmse_summary.csv"
        with open(path, "w") as fh:
            fh.write("model,field,rmse\n")
            for model_name, vals in report.rmse().items():
                for f in FIELDS:
                    fh.write(f"{model_name},{f},{vals[f]!r}\n")
        written.append(path)

    write_json(directory / "manifest.json", {
        "format_version": FORMAT_VERSION,
        "delta": report.delta,
        "n_steps": report.n_steps,
        "n_cells": M,
        "conditioning_period": report.conditioning_period,
        "layout": "space-time tables: one row per coarse step (0..n_steps), one column per coarse cell",
        "files": {p.name: sha256_file(p) for p in written},
    })
    written.append(directory / "manifest.json")
    return written
