"""Coarse grid, spatial averaging and subgrid fluxes.

The coarse cell ``m`` covers fine cells ``[ratio*m, ratio*(m+1))``.  The
exact subgrid flux at the left face of coarse cell ``m`` is the fine face
flux there minus the LLF flux computed from the averaged state, so that the
coarse flux-difference law with these corrections reproduces the averaged
fine tendency.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .swe_fv import (
    Grid1D,
    SweParams,
    SweState,
    face_fluxes,
    flux_divergence,
)


@dataclass(frozen=True)
class CoarsePair:
    fine: Grid1D
    ratio: int

    def __post_init__(self):
        if int(self.ratio) != self.ratio or self.ratio < 1:
            raise ValueError("ratio must be a positive integer")
        if self.fine.num_cells % self.ratio:
            raise ValueError(
                f"fine grid of {self.fine.num_cells} cells is not divisible by ratio {self.ratio}"
            )

    @property
    def coarse(self) -> Grid1D:
        return Grid1D(self.fine.num_cells // self.ratio, self.fine.domain_min, self.fine.domain_max)

    def coarse_params(self, fine_params: SweParams) -> SweParams:
        return SweParams(froude=fine_params.froude, dt=self.ratio * fine_params.dt)


@dataclass(frozen=True, eq=False)
class SubgridFluxField:
    """Subgrid flux ``G_m`` on the left face of each coarse cell."""

    g_h: np.ndarray
    g_q: np.ndarray

    def __post_init__(self):
        g_h = np.asarray(self.g_h, dtype=np.float64)
        g_q = np.asarray(self.g_q, dtype=np.float64)
        if g_h.ndim != 1 or g_h.shape != g_q.shape:
            raise ValueError("g_h and g_q must be 1-D of equal length")
        if not (np.all(np.isfinite(g_h)) and np.all(np.isfinite(g_q))):
            raise ValueError("subgrid fluxes must be finite")
        object.__setattr__(self, "g_h", g_h)
        object.__setattr__(self, "g_q", g_q)

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros(n), np.zeros(n))

    def to_array(self):
        return np.stack([self.g_h, self.g_q])

    def __len__(self):
        return self.g_h.shape[0]


def coarsen_state(fine_state: SweState, pair: CoarsePair) -> SweState:
    if len(fine_state) != pair.fine.num_cells:
        raise ValueError(f"state has {len(fine_state)} cells, fine grid has {pair.fine.num_cells}")
    shape = (pair.fine.num_cells // pair.ratio, pair.ratio)
    return SweState(fine_state.h.reshape(shape).mean(axis=1), fine_state.q.reshape(shape).mean(axis=1))


def coarse_flux(coarse_state: SweState, params: SweParams):
    """LLF fluxes ``(F_h, F_q)`` on the left face of each coarse cell."""
    return face_fluxes(coarse_state, params.froude)


def exact_subgrid_flux(fine_state: SweState, pair: CoarsePair, params: SweParams) -> SubgridFluxField:
    fh, fq = face_fluxes(fine_state, params.froude)
    ch, cq = coarse_flux(coarsen_state(fine_state, pair), params)
    return SubgridFluxField(fh[:: pair.ratio] - ch, fq[:: pair.ratio] - cq)


def _coarse_grid(grid) -> Grid1D:
    return grid.coarse if isinstance(grid, CoarsePair) else grid


def coarse_rhs(coarse_state: SweState, subgrid: SubgridFluxField, grid, params: SweParams) -> SweState:
    """Coarse tendency with subgrid fluxes added on every face.

    ``grid`` is a :class:`CoarsePair` or the coarse :class:`Grid1D` itself.
    """
    grid = _coarse_grid(grid)
    n = grid.num_cells
    if len(coarse_state) != n or len(subgrid) != n:
        raise ValueError(
            f"expected {n} coarse cells, got state {len(coarse_state)} and subgrid {len(subgrid)}"
        )
    ch, cq = coarse_flux(coarse_state, params)
    return flux_divergence(ch + subgrid.g_h, cq + subgrid.g_q, grid.dx)


def coarse_step(
    coarse_state: SweState,
    subgrid: SubgridFluxField,
    grid,
    params: SweParams,
    step=None,
) -> SweState:
    """One modified Euler step on the coarse grid with ``subgrid`` held fixed.

    ``params.dt`` is the coarse timestep (see :meth:`CoarsePair.coarse_params`).
    """
    grid = _coarse_grid(grid)
    dt = params.dt
    k1 = coarse_rhs(coarse_state, subgrid, grid, params)
    mid = SweState(coarse_state.h + dt * k1.h, coarse_state.q + dt * k1.q).validate(step)
    k2 = coarse_rhs(mid, subgrid, grid, params)
    out = SweState(
        coarse_state.h + 0.5 * dt * (k1.h + k2.h),
        coarse_state.q + 0.5 * dt * (k1.q + k2.q),
    )
    return out.validate(step)


def ic_family(delta: float, grid: Grid1D, domain_length: float | None = None) -> SweState:
    """One-parameter family of smooth periodic initial conditions, ``delta`` in [0, 1]."""
    if not 0.0 <= delta <= 1.0:
        raise ValueError(f"delta must lie in [0, 1], got {delta}")
    length = grid.length if domain_length is None else domain_length
    x = grid.centers
    k = 2.0 * math.pi / length
    h0 = 1.0 + 0.3 * (1.0 - delta / 2.0) * np.sin(k * 3.5 * (1.0 - delta / 2.0) * x + math.pi / 6.0)
    v0 = 1.0 + 0.2 * (1.0 - delta) * np.sin(k * 3.0 * (1.0 - delta) * x)
    return SweState(h0, h0 * v0)
