"""Low-rank kernel factorization and kernel eigenbases over product samples."""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Sequence, Tuple

import numpy as np
from scipy.linalg import eigh

logger = logging.getLogger(__name__)


class NumericalBreakdownError(RuntimeError):
    pass


@dataclass
class LowRankFactor:
    F: np.ndarray
    pivots: List[int]
    trace_residual: float

    @property
    def rank(self) -> int:
        return self.F.shape[1]


@dataclass
class Block:
    """Sample rows ``[row_start, row_stop)`` and basis columns ``[col_start, col_stop)``."""

    row_start: int
    row_stop: int
    col_start: int
    col_stop: int
    n_times: int

    def rows(self):
        return slice(self.row_start, self.row_stop)

    def cols(self):
        return slice(self.col_start, self.col_stop)


@dataclass
class SpectralBasis:
    """Eigenfunctions sampled on product samples, orthonormal under ``weights``.

    ``phi`` has one eigenfunction per column.  Samples inside a block are
    ordered time-major with ``n_cells`` cells per time.
    """

    phi: np.ndarray
    eigvals: np.ndarray
    weights: np.ndarray
    n_cells: int
    blocks: List[Block] = field(default_factory=list)

    @property
    def n_samples(self) -> int:
        return self.phi.shape[0]

    @property
    def n_basis(self) -> int:
        return self.phi.shape[1]

    def gram(self):
        return self.phi.T @ (self.weights[:, None] * self.phi)

    def coefficients(self, values):
        """Weighted inner products ``<phi_l, values>`` for every column."""
        return self.phi.T @ (self.weights * np.asarray(values, dtype=np.float64))


def pivoted_cholesky(
    row_oracle: Callable[[int], np.ndarray],
    diag,
    rank: int,
    seed=None,
    pivoting: str = "greedy",
    tol: float = 0.0,
) -> LowRankFactor:
    """Partial Cholesky factorization ``K ~ F F^T`` from kernel rows.

    ``pivoting="greedy"`` takes the largest residual diagonal entry;
    ``"random"`` samples pivots proportionally to the residual diagonal
    (randomly pivoted Cholesky).  Stops early when the residual trace
    drops to ``tol`` or no positive residual is left.
    """
    d = np.array(diag, dtype=np.float64)
    n = d.shape[0]
    if rank < 1:
        raise ValueError("rank must be >= 1")
    if np.any(d <= 0):
        raise ValueError("kernel diagonal must be positive")
    if pivoting not in ("greedy", "random"):
        raise ValueError(f"unknown pivoting rule {pivoting!r}")
    rng = np.random.default_rng(seed)
    rank = min(rank, n)
    breakdown = -1e-12 * float(np.max(d))
    F = np.zeros((n, rank))
    pivots = []
    for i in range(rank):
        total = float(d.sum())
        if total <= tol or np.max(d) <= 0:
            break
        if pivoting == "greedy":
            p = int(np.argmax(d))
        else:
            p = int(rng.choice(n, p=d / total))
        g = np.asarray(row_oracle(p), dtype=np.float64) - F[:, :i] @ F[p, :i]
        if g[p] <= 0:
            break
        F[:, i] = g / np.sqrt(g[p])
        d -= F[:, i] ** 2
        d[p] = 0.0
        if np.min(d) < breakdown:
            raise NumericalBreakdownError(
                f"residual diagonal {np.min(d):.3e} at pivot {i} is negative"
            )
        np.maximum(d, 0.0, out=d)
        pivots.append(p)
    F = F[:, : len(pivots)]
    return LowRankFactor(F=F, pivots=pivots, trace_residual=float(d.sum()))


def _fix_signs(phi):
    scale = np.max(np.abs(phi), axis=0)
    for k in range(phi.shape[1]):
        nz = np.flatnonzero(np.abs(phi[:, k]) > 1e-10 * scale[k])
        if nz.size and phi[nz[0], k] < 0:
            phi[:, k] *= -1.0
    return phi


def eigenbasis(G, n_basis: int, weights=None, n_cells: int = 1, rank_tol: float = 1e-12) -> SpectralBasis:
    """Leading eigenfunctions of the kernel operator with factor ``G``.

    The operator is ``f -> (G G^T) (n * weights * f)``, i.e. the kernel
    function ``n * (G G^T)`` integrated against the sampling measure.  For
    the uniform empirical measure this is just ``G G^T``, so a bistochastic
    ``G G^T`` has leading eigenvalue one with a constant eigenfunction.
    """
    G = np.asarray(G, dtype=np.float64)
    n, r = G.shape
    w = np.full(n, 1.0 / n) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (n,) or np.any(w <= 0):
        raise ValueError("weights must be positive, one per sample")
    if n_basis > r:
        raise ValueError(f"cannot extract {n_basis} eigenfunctions from a rank-{r} factor")
    D = n * w
    B = G.T @ (D[:, None] * G)
    B = 0.5 * (B + B.T)
    lam, C = eigh(B)
    order = np.argsort(lam)[::-1]
    lam, C = lam[order], C[:, order]
    keep = int(np.sum(lam[:n_basis] > rank_tol))
    if keep < n_basis:
        warnings.warn(
            f"numerical rank allows only {keep} of {n_basis} eigenfunctions", RuntimeWarning
        )
    lam, C = lam[:keep], C[:, :keep]
    phi = (G @ C) * np.sqrt(n / lam)
    phi = _fix_signs(phi)
    n_times = n // n_cells if n_cells else n
    return SpectralBasis(
        phi=phi,
        eigvals=lam,
        weights=w,
        n_cells=n_cells,
        blocks=[Block(0, n, 0, keep, n_times)],
    )


def assemble_multi_trajectory(bases: Sequence[SpectralBasis], n_per_basis: Sequence[int] | None = None) -> SpectralBasis:
    """Direct sum of per-trajectory bases with zero padding.

    Each trajectory receives total weight ``1 / I``; columns are rescaled by
    ``sqrt(I)`` so the combined basis stays orthonormal.
    """
    bases = list(bases)
    if not bases:
        raise ValueError("no bases given")
    n_cells = bases[0].n_cells
    if any(b.n_cells != n_cells for b in bases):
        raise ValueError("all bases must share the number of cells")
    if any(len(b.blocks) != 1 for b in bases):
        raise ValueError("expected single-block bases")
    I = len(bases)
    if n_per_basis is None:
        n_per_basis = [b.n_basis for b in bases]
    if len(n_per_basis) != I:
        raise ValueError("need one basis size per trajectory")
    n_total = sum(b.n_samples for b in bases)
    L_total = sum(int(k) for k in n_per_basis)
    phi = np.zeros((n_total, L_total))
    weights = np.empty(n_total)
    eigvals = np.empty(L_total)
    blocks = []
    row = col = 0
    for b, L_i in zip(bases, n_per_basis):
        L_i = int(L_i)
        if L_i > b.n_basis:
            raise ValueError(f"requested {L_i} eigenfunctions from a basis with {b.n_basis}")
        rows = slice(row, row + b.n_samples)
        cols = slice(col, col + L_i)
        if I == 1:
            phi[rows, cols] = b.phi[:, :L_i]
            weights[rows] = b.weights
        else:
            phi[rows, cols] = b.phi[:, :L_i] * np.sqrt(I)
            weights[rows] = b.weights / I
        eigvals[cols] = b.eigvals[:L_i]
        blocks.append(Block(row, row + b.n_samples, col, col + L_i, b.blocks[0].n_times))
        row += b.n_samples
        col += L_i
    return SpectralBasis(phi=phi, eigvals=eigvals, weights=weights, n_cells=n_cells, blocks=blocks)


def save_basis(basis: SpectralBasis, directory, metadata=None):
    """Write ``phi``/``weights``/``eigvals`` as ``.npy`` plus a JSON sidecar."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    np.save(directory / "phi.npy", np.ascontiguousarray(basis.phi))
    np.save(directory / "weights.npy", basis.weights)
    np.save(directory / "eigvals.npy", basis.eigvals)
    meta = {
        "n_samples": basis.n_samples,
        "n_basis": basis.n_basis,
        "n_cells": basis.n_cells,
        "blocks": [vars(b) for b in basis.blocks],
        "eigvals": basis.eigvals.tolist(),
    }
    if metadata:
        meta.update(metadata)
    with open(directory / "basis.json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)


def load_basis(directory) -> Tuple[SpectralBasis, dict]:
    directory = Path(directory)
    with open(directory / "basis.json") as fh:
        meta = json.load(fh)
    basis = SpectralBasis(
        phi=np.load(directory / "phi.npy"),
        eigvals=np.load(directory / "eigvals.npy"),
        weights=np.load(directory / "weights.npy"),
        n_cells=int(meta["n_cells"]),
        blocks=[Block(**b) for b in meta["blocks"]],
    )
    return basis, meta
