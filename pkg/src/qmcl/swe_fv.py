"""Finite-volume solver for the 1-D periodic shallow water equations.

Cell averages ``u_m = (h_m, q_m)`` evolve by flux differences of the local
Lax-Friedrichs (LLF) numerical flux; ``F_m`` lives on the left face of
cell ``m``.  Time integration uses the two-stage modified Euler scheme.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass
from typing import Callable, List

import numpy as np

logger = logging.getLogger(__name__)

GRAVITY = 9.81


class SolverBlowupError(RuntimeError):
    """Raised when a step produces a nonpositive or non-finite height."""

    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"step {step}: {message}")
        self.step = step


def froude_from_gravity(g=GRAVITY):
    """Froude number ``1/sqrt(2 g)`` used by the test problem."""
    if g <= 0:
        raise ValueError("gravity must be positive")
    return 1.0 / math.sqrt(2.0 * g)


@dataclass(frozen=True)
class Grid1D:
    num_cells: int
    domain_min: float = -25.0
    domain_max: float = 25.0

    def __post_init__(self):
        if int(self.num_cells) != self.num_cells or self.num_cells < 2:
            raise ValueError(f"num_cells must be an integer >= 2, got {self.num_cells}")
        if not self.domain_max > self.domain_min:
            raise ValueError("domain_max must exceed domain_min")

    @property
    def length(self) -> float:
        return self.domain_max - self.domain_min

    @property
    def dx(self) -> float:
        return self.length / self.num_cells

    @property
    def centers(self) -> np.ndarray:
        return self.domain_min + (np.arange(self.num_cells) + 0.5) * self.dx


@dataclass(frozen=True)
class SweParams:
    froude: float
    dt: float

    def __post_init__(self):
        if not self.froude > 0:
            raise ValueError("froude must be positive")
        if not self.dt > 0:
            raise ValueError("dt must be positive")


@dataclass(frozen=True, eq=False)
class SweState:
    """Cell-averaged height ``h`` and momentum ``q``."""

    h: np.ndarray
    q: np.ndarray

    def __post_init__(self):
        h = np.asarray(self.h, dtype=np.float64)
        q = np.asarray(self.q, dtype=np.float64)
        if h.ndim != 1 or h.shape != q.shape:
            raise ValueError(f"h and q must be 1-D of equal length, got {h.shape} and {q.shape}")
        object.__setattr__(self, "h", h)
        object.__setattr__(self, "q", q)

    @classmethod
    def from_array(cls, u) -> "SweState":
        u = np.asarray(u, dtype=np.float64)
        if u.ndim != 2 or u.shape[0] != 2:
            raise ValueError(f"expected an array of shape (2, n), got {u.shape}")
        return cls(u[0].copy(), u[1].copy())

    def to_array(self) -> np.ndarray:
        return np.stack([self.h, self.q])

    def __len__(self):
        return self.h.shape[0]

    def roll(self, shift: int) -> "SweState":
        return SweState(np.roll(self.h, shift), np.roll(self.q, shift))

    def validate(self, step=None):
        if not (np.all(np.isfinite(self.h)) and np.all(np.isfinite(self.q))):
            raise SolverBlowupError("non-finite state", step)
        if np.any(self.h <= 0):
            m = int(np.argmin(self.h))
            raise SolverBlowupError(f"nonpositive height {self.h[m]:.3e} in cell {m}", step)
        return self


def _check_positive_height(h):
    if np.any(np.asarray(h) <= 0):
        raise ValueError("height must be strictly positive")


def physical_flux(h, q, froude):
    """Return ``(q, q**2/h + h**2 / (2 Fr**2))``; works elementwise on arrays."""
    _check_positive_height(h)
    h = np.asarray(h, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    flux_q = q * q / h + 0.5 * h * h / (froude * froude)
    if flux_q.ndim == 0:
        return float(q), float(flux_q)
    return q, flux_q


def llf_wavespeed(h_left, q_left, h_right, q_right, froude):
    """Largest local signal speed across a face."""
    _check_positive_height(h_left)
    _check_positive_height(h_right)
    inv_fr = 1.0 / froude
    left = np.abs(q_left / h_left) + inv_fr * np.sqrt(h_left)
    right = np.abs(q_right / h_right) + inv_fr * np.sqrt(h_right)
    return np.maximum(left, right)


def llf_flux(h_left, q_left, h_right, q_right, froude):
    """Local Lax-Friedrichs flux between a left and right cell state."""
    lam = llf_wavespeed(h_left, q_left, h_right, q_right, froude)
    fh_l, fq_l = physical_flux(h_left, q_left, froude)
    fh_r, fq_r = physical_flux(h_right, q_right, froude)
    flux_h = 0.5 * (fh_l + fh_r) - 0.5 * lam * (np.subtract(h_right, h_left))
    flux_q = 0.5 * (fq_l + fq_r) - 0.5 * lam * (np.subtract(q_right, q_left))
    if np.ndim(flux_h) == 0:
        return float(flux_h), float(flux_q)
    return flux_h, flux_q


def face_fluxes(state: SweState, froude):
    """LLF fluxes on the left face of every cell, ``F_m = F(u_{m-1}, u_m)``."""
    return llf_flux(np.roll(state.h, 1), np.roll(state.q, 1), state.h, state.q, froude)


def flux_divergence(flux_h, flux_q, dx) -> SweState:
    # (F_m - F_{m+1}) / dx with F_M wrapping to F_0
    return SweState(
        (flux_h - np.roll(flux_h, -1)) / dx,
        (flux_q - np.roll(flux_q, -1)) / dx,
    )


def fine_rhs(state: SweState, grid: Grid1D, params: SweParams) -> SweState:
    if len(state) != grid.num_cells:
        raise ValueError(f"state has {len(state)} cells, grid has {grid.num_cells}")
    fh, fq = face_fluxes(state, params.froude)
    return flux_divergence(fh, fq, grid.dx)


def step_modified_euler(
    state: SweState,
    grid: Grid1D,
    params: SweParams,
    rhs_fn: Callable[[SweState, Grid1D, SweParams], SweState] = fine_rhs,
    step=None,
) -> SweState:
    """Advance one step with the two-stage modified Euler (Heun) scheme."""
    dt = params.dt
    k1 = rhs_fn(state, grid, params)
    mid = SweState(state.h + dt * k1.h, state.q + dt * k1.q).validate(step)
    k2 = rhs_fn(mid, grid, params)
    out = SweState(
        state.h + 0.5 * dt * (k1.h + k2.h),
        state.q + 0.5 * dt * (k1.q + k2.q),
    )
    return out.validate(step)


def cfl_number(state: SweState, grid: Grid1D, params: SweParams) -> float:
    speed = np.abs(state.q / state.h) + np.sqrt(state.h) / params.froude
    return float(np.max(speed) * params.dt / grid.dx)


def simulate(
    initial: SweState,
    grid: Grid1D,
    params: SweParams,
    n_steps: int,
    sample_every: int = 1,
) -> List[SweState]:
    """Integrate ``n_steps`` fine steps, keeping states at multiples of ``sample_every``.

    The returned list starts with ``initial`` (step 0).
    """
    if n_steps < 0:
        raise ValueError("n_steps must be nonnegative")
    if sample_every < 1:
        raise ValueError("sample_every must be >= 1")
    initial.validate(0)
    cfl = cfl_number(initial, grid, params)
    if cfl > 1.0:
        warnings.warn(f"CFL number {cfl:.3f} exceeds 1 for the initial state", RuntimeWarning)
    state = initial
    out = [initial]
    for n in range(1, n_steps + 1):
        state = step_modified_euler(state, grid, params, step=n)
        if n % sample_every == 0:
            out.append(state)
    return out
