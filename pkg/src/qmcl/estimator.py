"""Scikit-learn style estimator for the quantum-mechanical subgrid closure."""

from __future__ import annotations

import logging
import time

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from . import kernel as kern
from .coarsening import SubgridFluxField, coarse_step
from .quantum import (
    build_observables,
    build_transfer,
    condition_density,
    evolve_density,
    feature_vectors,
    init_density_uniform,
    surrogate_flux,
)
from .spectral import assemble_multi_trajectory, eigenbasis, pivoted_cholesky
from .swe_fv import Grid1D, SweParams, SweState, froude_from_gravity

logger = logging.getLogger(__name__)


class StageError(RuntimeError):
    """Failure inside a named training or prediction stage."""

    def __init__(self, stage, cause):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage


def _check_trajectories(X, name):
    if isinstance(X, np.ndarray) and X.ndim == 3:
        X = [X]
    out = []
    for k, traj in enumerate(X):
        arr = np.asarray(traj, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[1] != 2:
            raise ValueError(f"{name}[{k}] must have shape (T, 2, M), got {arr.shape}")
        check_array(arr.reshape(arr.shape[0], -1), dtype=np.float64)
        out.append(arr)
    if not out:
        raise ValueError(f"{name} is empty")
    return out


def split_evenly(total, parts):
    base, extra = divmod(int(total), int(parts))
    return [base + (1 if i < extra else 0) for i in range(parts)]


class QMClosure(BaseEstimator):
    """Data-driven closure predicting subgrid fluxes from resolved states.

    Parameters
    ----------
    n_delays : int
        Delay-embedding length of the basis kernel.
    stencil_width : int
        Odd number of neighbouring cells compared by the conditioning kernel.
    n_eigenfunctions : int
        Total basis size, split evenly across training trajectories unless
        ``eigenfunctions_per_trajectory`` is given.
    rank : int
        Partial Cholesky rank for each trajectory's kernel matrix.
    pivoting : {"greedy", "random"}
        Pivot rule of the partial Cholesky factorization.
    froude : float or None
        Froude number; ``None`` means ``1/sqrt(2 * 9.81)``.
    domain_length : float
        Periodic domain length of the coarse grid.
    dt : float
        Coarse timestep used by :meth:`rollout`.
    conditioning_period : int
        Condition densities every this many coarse steps during rollout.
    cond_bandwidth_scale : float
        Multiplier on the tuned conditioning bandwidth.
    scale_exponent : float
        Exponent of the variable-bandwidth density rule.
    """

    def __init__(
        self,
        n_delays=64,
        stencil_width=5,
        n_eigenfunctions=6144,
        eigenfunctions_per_trajectory=None,
        rank=6144,
        pivoting="greedy",
        seed=0,
        froude=None,
        domain_length=50.0,
        dt=20 * 0.1 * 50.0 / 1920,
        conditioning_period=10,
        max_bandwidth_pairs=4_000_000,
        cond_bandwidth_scale=1.0,
        scale_exponent=-0.5,
    ):
        self.n_delays = n_delays
        self.stencil_width = stencil_width
        self.n_eigenfunctions = n_eigenfunctions
        self.eigenfunctions_per_trajectory = eigenfunctions_per_trajectory
        self.rank = rank
        self.pivoting = pivoting
        self.seed = seed
        self.froude = froude
        self.domain_length = domain_length
        self.dt = dt
        self.conditioning_period = conditioning_period
        self.max_bandwidth_pairs = max_bandwidth_pairs
        self.cond_bandwidth_scale = cond_bandwidth_scale
        self.scale_exponent = scale_exponent

    # offline stage

    def fit(self, X, y):
        """Build the basis and projected operators, then tune the conditioning kernel.

        ``X`` holds resolved trajectories and ``y`` the matching subgrid-flux
        trajectories, each of shape ``(T_i, 2, M)``.
        """
        X = _check_trajectories(X, "X")
        y = _check_trajectories(y, "y")
        if len(X) != len(y) or any(a.shape != b.shape for a, b in zip(X, y)):
            raise ValueError("resolved and flux trajectories must have matching shapes")
        n_cells = X[0].shape[2]
        if any(a.shape[2] != n_cells for a in X):
            raise ValueError("all trajectories must share the number of cells")
        Q, J = int(self.n_delays), int(self.stencil_width)
        if self.eigenfunctions_per_trajectory is not None:
            per_traj = [int(k) for k in self.eigenfunctions_per_trajectory]
            if len(per_traj) != len(X):
                raise ValueError("need one eigenfunction count per trajectory")
        else:
            per_traj = split_evenly(self.n_eigenfunctions, len(X))
        timings = {}

        t0 = time.perf_counter()
        try:
            delays = [kern.delay_embed(traj, Q) for traj in X]
        except ValueError as exc:
            raise StageError("embed", exc) from exc
        stencils = np.concatenate([kern.stencil_embed(traj[Q - 1 :], J) for traj in X])
        flux = np.concatenate([traj[Q - 1 :].transpose(1, 0, 2).reshape(2, -1) for traj in y], axis=1)

        try:
            d2 = kern.sample_sqdists(np.concatenate(delays), self.max_bandwidth_pairs, self.seed)
            self.eps_ = kern.tune_bandwidth(d2, Q)
        except kern.DegenerateDataError as exc:
            raise StageError("bandwidth", exc) from exc
        timings["bandwidth"] = time.perf_counter() - t0

        t0 = time.perf_counter()
        bases, factor_info = [], []
        for i, (emb, L_i) in enumerate(zip(delays, per_traj)):
            n_i = emb.shape[0]

            def row(p, emb=emb):
                return kern.kernel_rows(emb[p : p + 1], emb, self.eps_, Q)[0]

            try:
                lr = pivoted_cholesky(row, np.ones(n_i), min(int(self.rank), n_i), seed=self.seed + i, pivoting=self.pivoting)
                G, _ = kern.bistochastic_normalize(lr.F)
                bases.append(eigenbasis(G, min(L_i, lr.rank), np.full(n_i, 1.0 / n_i), n_cells))
            except Exception as exc:
                raise StageError(f"basis[trajectory {i}]", exc) from exc
            factor_info.append({"rank": lr.rank, "trace_residual": lr.trace_residual})
        self.basis_ = assemble_multi_trajectory(bases)
        self.factor_info_ = factor_info
        timings["basis"] = time.perf_counter() - t0

        t0 = time.perf_counter()
        self.transfer_ = build_transfer(self.basis_)
        self.obs_h_, self.obs_q_ = build_observables(flux[0], flux[1], self.basis_)
        timings["operators"] = time.perf_counter() - t0

        t0 = time.perf_counter()
        try:
            self._fit_conditioning(stencils, J)
        except kern.DegenerateDataError as exc:
            raise StageError("conditioning", exc) from exc
        timings["conditioning"] = time.perf_counter() - t0

        self.train_stencils_ = stencils
        self.n_cells_ = n_cells
        self.n_trajectories_ = len(X)
        self.timings_ = timings
        return self

    def _fit_conditioning(self, stencils, J):
        n = stencils.shape[0]
        n_keep = min(n, int(np.sqrt(self.max_bandwidth_pairs)))
        idx = np.arange(n)
        if n_keep < n:
            idx = np.sort(np.random.default_rng(self.seed).choice(n, n_keep, replace=False))
        d2 = kern.sqdist(stencils[idx], stencils[idx])
        self.eps_pilot_ = kern.tune_bandwidth(d2.ravel(), J)
        self.cond_scales_, self.log_gm_ = kern.variable_scales(
            stencils, self.eps_pilot_, J, self.scale_exponent, return_reference=True
        )
        b = self.cond_scales_[idx]
        self.eps_cond_ = kern.tune_bandwidth((d2 / np.outer(b, b)).ravel(), J) * self.cond_bandwidth_scale

    # online stage

    def _froude(self):
        return froude_from_gravity() if self.froude is None else self.froude

    def _check_state(self, state):
        check_is_fitted(self, ["basis_", "obs_h_", "transfer_"])
        arr = np.asarray(state, dtype=np.float64)
        if arr.shape != (2, self.n_cells_):
            raise ValueError(f"expected a resolved state of shape (2, {self.n_cells_}), got {arr.shape}")
        check_array(arr, dtype=np.float64)
        return arr

    def features(self, state):
        """Conditioning feature vectors, shape ``(M, n_samples)``."""
        state = self._check_state(state)
        J = int(self.stencil_width)
        queries = kern.stencil_embed(state, J)
        qs = kern.query_scales(
            queries, self.train_stencils_, self.eps_pilot_, J, self.log_gm_, self.scale_exponent
        )
        return feature_vectors(state, self.train_stencils_, self.eps_cond_, J, qs, self.cond_scales_)

    def initial_density(self):
        check_is_fitted(self, "basis_")
        return init_density_uniform(self.basis_, self.n_cells_)

    def condition(self, rho, state):
        rho, _ = condition_density(rho, self.features(state), self.basis_)
        return rho

    def evolve(self, rho):
        return evolve_density(rho, self.transfer_)

    def flux(self, rho):
        """Surrogate subgrid fluxes, shape ``(2, M)``."""
        return np.stack(surrogate_flux(rho, self.obs_h_, self.obs_q_))

    def predict_flux(self, X):
        """Fluxes from a uniform density conditioned once on each given state."""
        X = np.asarray(X, dtype=np.float64)
        single = X.ndim == 2
        states = X[None] if single else X
        out = np.stack([self.flux(self.condition(self.initial_density(), s)) for s in states])
        return out[0] if single else out

    def rollout(self, initial_state, n_steps, conditioning_period=None):
        """Integrate the closed coarse dynamics.

        Returns a dict with ``states`` and ``fluxes`` of shape
        ``(n_steps + 1, 2, M)`` and ``skipped``, the number of cells that
        kept their prior at each conditioning event.
        """
        u = SweState.from_array(self._check_state(initial_state))
        period = self.conditioning_period if conditioning_period is None else conditioning_period
        if period < 1:
            raise ValueError("conditioning_period must be >= 1")
        grid = Grid1D(self.n_cells_, 0.0, self.domain_length)
        params = SweParams(froude=self._froude(), dt=self.dt)

        rho = self.initial_density()
        rho, skipped = condition_density(rho, self.features(u.to_array()), self.basis_)
        n_skipped = [int(skipped.size)]
        f = self.flux(rho)
        states, fluxes = [u.to_array()], [f]
        for k in range(1, int(n_steps) + 1):
            u = coarse_step(u, SubgridFluxField(f[0], f[1]), grid, params, step=k)
            rho = self.evolve(rho)
            if k % period == 0:
                rho, skipped = condition_density(rho, self.features(u.to_array()), self.basis_)
                n_skipped.append(int(skipped.size))
            f = self.flux(rho)
            states.append(u.to_array())
            fluxes.append(f)
        return {"states": np.stack(states), "fluxes": np.stack(fluxes), "skipped": n_skipped}

    def predict(self, X, n_steps=1, conditioning_period=None):
        """Predicted resolved trajectory from the initial state ``X`` of shape ``(2, M)``."""
        return self.rollout(X, n_steps, conditioning_period)["states"]
