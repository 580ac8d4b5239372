"""Projected operators and per-cell density fields.

A density field is an ``(M, L)`` array: one unit-norm coefficient vector per
coarse cell, expressed in the columns of a :class:`SpectralBasis`.  All
projected operators are block diagonal over trajectories because basis
columns of different trajectories have disjoint support; they are computed
block by block.
"""

from __future__ import annotations

import logging

import numpy as np

from .kernel import kernel_rows, stencil_embed
from .spectral import SpectralBasis

logger = logging.getLogger(__name__)

NORM_FLOOR = 1e-12


class DegenerateDensityError(RuntimeError):
    def __init__(self, message, cell=None):
        super().__init__(message)
        self.cell = cell


def project_multiplication(values, basis: SpectralBasis) -> np.ndarray:
    """Matrix of multiplication by ``values`` in the basis, ``<phi_i, values * phi_k>``."""
    values = np.asarray(values, dtype=np.float64)
    if values.shape != (basis.n_samples,):
        raise ValueError(f"expected {basis.n_samples} sample values, got {values.shape}")
    if not np.all(np.isfinite(values)):
        raise ValueError("values must be finite")
    L = basis.n_basis
    out = np.zeros((L, L))
    wv = basis.weights * values
    for b in basis.blocks:
        phi = basis.phi[b.rows(), b.cols()]
        block = phi.T @ (wv[b.rows(), None] * phi)
        out[b.cols(), b.cols()] = 0.5 * (block + block.T)
    return out


def build_observables(flux_h, flux_q, basis: SpectralBasis):
    """Quantum observables for the height and momentum subgrid fluxes.

    ``flux_h`` and ``flux_q`` are sample vectors aligned with the basis rows.
    """
    return project_multiplication(flux_h, basis), project_multiplication(flux_q, basis)


def shift_within_trajectories(values, basis: SpectralBasis) -> np.ndarray:
    """``(P f)(n, m) = f(n - 1, m)`` inside each trajectory, zero at its first time."""
    values = np.asarray(values, dtype=np.float64)
    out = np.zeros_like(values)
    M = basis.n_cells
    for b in basis.blocks:
        start, stop = b.row_start, b.row_stop
        out[start + M : stop] = values[start : stop - M]
    return out


def build_transfer(basis: SpectralBasis) -> np.ndarray:
    """Projected shift operator ``P_ik = <phi_i, P phi_k>``."""
    if not basis.blocks:
        raise ValueError("basis carries no block metadata")
    L = basis.n_basis
    out = np.zeros((L, L))
    shifted = shift_within_trajectories(basis.phi, basis)
    for b in basis.blocks:
        rows, cols = b.rows(), b.cols()
        out[cols, cols] = basis.phi[rows, cols].T @ (basis.weights[rows, None] * shifted[rows, cols])
    return out


def normalize_rows(rho, context="density"):
    norms = np.linalg.norm(rho, axis=1)
    bad = np.flatnonzero(norms < NORM_FLOOR)
    if bad.size:
        raise DegenerateDensityError(f"{context}: vanishing norm in cell {int(bad[0])}", int(bad[0]))
    return rho / norms[:, None]


def init_density_uniform(basis: SpectralBasis, n_cells: int | None = None) -> np.ndarray:
    """Every cell gets the normalized projection of the constant function."""
    n_cells = basis.n_cells if n_cells is None else n_cells
    coeff = basis.coefficients(np.ones(basis.n_samples))
    norm = np.linalg.norm(coeff)
    if norm < 1e-8:
        logger.warning("constant function nearly orthogonal to the basis (norm %.2e)", norm)
    if norm < NORM_FLOOR:
        raise DegenerateDensityError("constant function has no projection on the basis")
    return np.tile(coeff / norm, (n_cells, 1))


def evolve_density(rho, transfer) -> np.ndarray:
    """Apply the transfer matrix to each cell's vector and renormalize."""
    rho = np.atleast_2d(rho)
    return normalize_rows(rho @ np.asarray(transfer).T, "evolve")


def feature_vectors(
    state,
    train_stencils,
    eps,
    stencil_width,
    query_scale=None,
    train_scales=None,
) -> np.ndarray:
    """Conditioning-kernel similarities of every cell's stencil to all training stencils.

    ``state`` has shape ``(2, M)``; the result has shape ``(M, n_samples)``.
    """
    queries = stencil_embed(state, stencil_width)
    return kernel_rows(queries, train_stencils, eps, stencil_width, query_scale, train_scales)


def effect_matrix(features, basis: SpectralBasis) -> np.ndarray:
    """Projected multiplication by the square root of a feature vector."""
    return project_multiplication(np.sqrt(features), basis)


def apply_effects(rho, features, basis: SpectralBasis) -> np.ndarray:
    """``e_m rho_m`` for every cell without forming the ``L x L`` effects.

    Equivalent to ``effect_matrix(features[m]) @ rho[m]``.
    """
    rho = np.atleast_2d(rho)
    features = np.atleast_2d(features)
    out = np.zeros_like(rho)
    sqrt_f = np.sqrt(features)
    for b in basis.blocks:
        rows, cols = b.rows(), b.cols()
        phi = basis.phi[rows, cols]
        vals = rho[:, cols] @ phi.T  # (M, block samples)
        vals *= sqrt_f[:, rows] * basis.weights[rows]
        out[:, cols] = vals @ phi
    return out


def condition_density(rho, features, basis: SpectralBasis):
    """Quantum Bayes update of each cell's density by its feature vector.

    Cells whose updated vector has norm below ``1e-12`` keep their prior.
    Returns ``(posterior, skipped_cells)``.
    """
    rho = np.atleast_2d(np.asarray(rho, dtype=np.float64))
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if np.any(features < 0):
        raise ValueError("feature values must be nonnegative")
    updated = apply_effects(rho, features, basis)
    norms = np.linalg.norm(updated, axis=1)
    skipped = np.flatnonzero(norms < NORM_FLOOR)
    if skipped.size:
        logger.warning("uninformative conditioning in %d cells; keeping prior", skipped.size)
        updated[skipped] = rho[skipped]
        norms[skipped] = np.linalg.norm(rho[skipped], axis=1)
    return updated / norms[:, None], skipped


def surrogate_flux(rho, obs_h, obs_q):
    """Expected fluxes ``rho_m^T A rho_m`` per cell for both observables."""
    rho = np.atleast_2d(rho)
    return np.sum((rho @ obs_h) * rho, axis=1), np.sum((rho @ obs_q) * rho, axis=1)
