"""Feature maps and Gaussian kernels on product samples.

Product samples ``(n, m)`` of one trajectory are flattened time-major,
``s = n * n_cells + m``.  Resolved trajectories are arrays of shape
``(T, 2, M)`` holding ``(h, q)`` per coarse cell.
"""

from __future__ import annotations

import logging

import numpy as np
from scipy.spatial.distance import cdist
from scipy.special import logsumexp

logger = logging.getLogger(__name__)


class DegenerateDataError(ValueError):
    pass


class BistochasticError(RuntimeError):
    pass


def _as_trajectory(resolved):
    u = np.asarray(resolved, dtype=np.float64)
    if u.ndim != 3 or u.shape[1] != 2:
        raise ValueError(f"expected a resolved trajectory of shape (T, 2, M), got {u.shape}")
    return u


def delay_embed(resolved, n_delays):
    """Delay vectors for every cell and every time with a full history.

    Returns an array of shape ``((T - Q + 1) * M, 2 * Q)``.  Row ``n * M + m``
    holds ``(h, q)`` at cell ``m`` for original times ``n + Q - 1, n + Q - 2,
    ..., n`` (newest first).
    """
    u = _as_trajectory(resolved)
    T, _, M = u.shape
    Q = int(n_delays)
    if Q < 1:
        raise ValueError("n_delays must be >= 1")
    if T < Q:
        raise ValueError(f"trajectory of length {T} is shorter than {Q} delays")
    n_emb = T - Q + 1
    cells = u.transpose(0, 2, 1)  # (T, M, 2)
    out = np.empty((n_emb, M, Q, 2))
    for k in range(Q):
        out[:, :, k, :] = cells[Q - 1 - k : Q - 1 - k + n_emb]
    return out.reshape(n_emb * M, 2 * Q)


def stencil_embed(resolved, stencil_width):
    """Stencil vectors ``(h, q)`` at the ``J`` nearest cells, left to right, periodic.

    ``resolved`` is a single state ``(2, M)`` or a trajectory ``(T, 2, M)``;
    the result has shape ``(M, 2J)`` or ``(T * M, 2J)`` respectively.
    """
    J = int(stencil_width)
    if J < 1 or J % 2 == 0:
        raise ValueError(f"stencil width must be a positive odd integer, got {stencil_width}")
    u = np.asarray(resolved, dtype=np.float64)
    single = u.ndim == 2
    u = _as_trajectory(u[None] if single else u)
    T, _, M = u.shape
    half = (J - 1) // 2
    out = np.empty((T, M, J, 2))
    for k, offset in enumerate(range(-half, half + 1)):
        # value at cell m + offset lands in slot m
        out[:, :, k, :] = np.roll(u, -offset, axis=2).transpose(0, 2, 1)
    out = out.reshape(T * M, 2 * J)
    return out if not single else out.reshape(M, 2 * J)


def sqdist(a, b):
    """Pairwise squared Euclidean distances between rows of ``a`` and ``b``."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    return cdist(a, b, "sqeuclidean")


def gaussian_kernel(a, b, eps, n_delays):
    """``exp(-|a - b|^2 / (eps * Q))`` for two delay vectors."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    if eps <= 0:
        raise ValueError("eps must be positive")
    d2 = np.sum((a - b) ** 2)
    return float(np.exp(-d2 / (eps * n_delays)))


def conditioning_kernel(a, b, eps, stencil_width, scale_a=1.0, scale_b=1.0):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    if eps <= 0 or scale_a <= 0 or scale_b <= 0:
        raise ValueError("bandwidth and scales must be positive")
    d2 = np.sum((a - b) ** 2)
    return float(np.exp(-d2 / (eps * stencil_width * scale_a * scale_b)))


def kernel_rows(queries, data, eps, denominator, query_scales=None, data_scales=None):
    """Gaussian kernel block ``exp(-d^2 / (eps * denominator * b_i * b_j))``."""
    d2 = sqdist(queries, data)
    bw = eps * denominator
    if query_scales is not None or data_scales is not None:
        qs = np.ones(d2.shape[0]) if query_scales is None else np.asarray(query_scales)
        ds = np.ones(d2.shape[1]) if data_scales is None else np.asarray(data_scales)
        return np.exp(-d2 / (bw * np.outer(qs, ds)))
    return np.exp(-d2 / bw)


def sample_sqdists(points, max_pairs=4_000_000, seed=0):
    """Squared distances over all pairs of a uniform point subsample.

    The subsample size is chosen so that the number of ordered pairs
    (diagonal included) stays below ``max_pairs``.
    """
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    n_keep = min(n, int(np.floor(np.sqrt(max_pairs))))
    if n_keep < n:
        rng = np.random.default_rng(seed)
        idx = np.sort(rng.choice(n, size=n_keep, replace=False))
        points = points[idx]
    return sqdist(points, points).ravel()


def bandwidth_slope_curve(sqdists, denominator, n_grid=48, span=1e6):
    """Log-grid of ``eps`` and the centered log-log slope of the kernel sum.

    Returns ``(eps_grid, log_sum, slope)``; ``slope`` is defined on the
    interior points ``eps_grid[1:-1]``.
    """
    d2 = np.asarray(sqdists, dtype=np.float64).ravel()
    if d2.size == 0:
        raise DegenerateDataError("no distances given")
    if not np.any(d2 > 0):
        raise DegenerateDataError("all distances are zero")
    ref = np.median(d2[d2 > 0]) / denominator
    eps_grid = ref * np.logspace(-np.log10(span), np.log10(span), n_grid)
    log_sum = np.array([logsumexp(-d2 / (e * denominator)) for e in eps_grid])
    log_eps = np.log(eps_grid)
    slope = (log_sum[2:] - log_sum[:-2]) / (log_eps[2:] - log_eps[:-2])
    return eps_grid, log_sum, slope


def tune_bandwidth(sqdists, denominator, n_grid=48, span=1e6):
    """Bandwidth at which the kernel sum grows fastest in log-log scale.

    When the slope is monotone (e.g. a single distance scale without the
    zero self-distances) the smallest interior grid point is returned.
    """
    eps_grid, _, slope = bandwidth_slope_curve(sqdists, denominator, n_grid, span)
    return float(eps_grid[1 + int(np.argmax(slope))])


def pilot_density(queries, data, eps_pilot, stencil_width, chunk=2048):
    """Mean fixed-bandwidth Gaussian affinity of each query to the data."""
    queries = np.atleast_2d(queries)
    out = np.empty(queries.shape[0])
    for start in range(0, queries.shape[0], chunk):
        block = kernel_rows(queries[start : start + chunk], data, eps_pilot, stencil_width)
        out[start : start + chunk] = block.mean(axis=1)
    return out


def variable_scales(stencils, eps_pilot, stencil_width, exponent=-0.5, return_reference=False):
    """Per-sample bandwidth factors ``(p_i / geomean(p)) ** exponent``.

    With ``return_reference`` the log geometric mean of the pilot densities
    is returned as well, for scaling out-of-sample queries consistently.
    """
    stencils = np.atleast_2d(np.asarray(stencils, dtype=np.float64))
    if stencils.shape[0] == 0:
        raise ValueError("no samples")
    p = pilot_density(stencils, stencils, eps_pilot, stencil_width)
    if np.any(p <= 0):
        raise DegenerateDataError("zero pilot density")
    log_gm = float(np.mean(np.log(p)))
    scales = np.exp(exponent * (np.log(p) - log_gm))
    if return_reference:
        return scales, log_gm
    return scales


def query_scales(queries, data, eps_pilot, stencil_width, log_gm, exponent=-0.5):
    p = pilot_density(queries, data, eps_pilot, stencil_width)
    with np.errstate(divide="ignore"):
        logp = np.log(p)
    # a query far from all data gets the largest finite scale seen numerically
    logp = np.where(np.isfinite(logp), logp, np.log(np.finfo(float).tiny))
    return np.exp(exponent * (logp - log_gm))


def bistochastic_normalize(factor, tol=1e-10, max_iter=500):
    """Symmetric Sinkhorn scaling of ``K = F F^T`` through its factor.

    Finds ``v > 0`` with ``diag(v) K diag(v)`` having unit row sums and
    returns ``(G, v)`` with ``G = diag(v) F``.
    """
    F = np.asarray(factor, dtype=np.float64)
    if F.ndim != 2:
        raise ValueError("factor must be a matrix")
    v = np.ones(F.shape[0])
    residual = np.inf
    for it in range(max_iter + 1):
        Kv = F @ (F.T @ v)
        if np.any(Kv <= 0):
            raise BistochasticError(f"nonpositive row sum at iteration {it}")
        rowsum = v * Kv
        residual = float(np.max(np.abs(rowsum - 1.0)))
        if residual < tol:
            logger.debug("sinkhorn converged in %d iterations (residual %.2e)", it, residual)
            return v[:, None] * F, v
        if it == max_iter:
            break
        v = np.sqrt(v / Kv)
    raise BistochasticError(f"no convergence after {max_iter} iterations, residual {residual:.3e}")


def kernel_from_factor(G):
    """Dense ``G G^T`` mirrored from its upper triangle so it is exactly symmetric."""
    K = G @ G.T
    upper = np.triu(K)
    return upper + np.triu(K, 1).T
