import numpy as np
import pytest

from oracles import classical_bayes_mean, random_weighted_basis
from qmcl.kernel import stencil_embed
from qmcl.quantum import (
    DegenerateDensityError,
    apply_effects,
    build_observables,
    build_transfer,
    condition_density,
    effect_matrix,
    evolve_density,
    feature_vectors,
    init_density_uniform,
    project_multiplication,
    shift_within_trajectories,
    surrogate_flux,
)
from qmcl.spectral import Block, SpectralBasis, assemble_multi_trajectory, eigenbasis


def complete_basis(rng, n_times, n_cells, L=None, weights=None):
    n = n_times * n_cells
    L = n if L is None else L
    w = np.full(n, 1.0 / n) if weights is None else weights
    phi = random_weighted_basis(rng, n, L, w)
    return SpectralBasis(phi, np.ones(L), w, n_cells, [Block(0, n, 0, L, n_times)])


def constant_leading_basis(rng, n_times, n_cells, L):
    """Orthonormal basis whose first column is the constant function."""
    n = n_times * n_cells
    A = np.column_stack([np.ones(n), rng.normal(size=(n, L - 1))])
    Q, _ = np.linalg.qr(A)
    phi = Q * np.sqrt(n)
    phi[:, 0] = np.abs(phi[:, 0])
    return SpectralBasis(phi, np.ones(L), np.full(n, 1.0 / n), n_cells, [Block(0, n, 0, L, n_times)])


def multi_basis(rng, sizes, n_cells, L_each):
    parts = []
    for n_times in sizes:
        b = constant_leading_basis(rng, n_times, n_cells, L_each)
        parts.append(b)
    return assemble_multi_trajectory(parts)


def test_project_constant_is_scaled_identity():
    basis = multi_basis(np.random.default_rng(0), [5, 7], 3, 6)
    np.testing.assert_allclose(project_multiplication(np.full(36, 2.5), basis), 2.5 * np.eye(12), atol=1e-10)


def test_project_nonnegative_is_psd():
    rng = np.random.default_rng(1)
    basis = multi_basis(rng, [6, 6], 4, 10)
    A = project_multiplication(rng.uniform(0, 3, 48), basis)
    assert np.array_equal(A, A.T)
    assert np.linalg.eigvalsh(A).min() >= -1e-9


def test_project_complete_basis_similar_to_diagonal():
    rng = np.random.default_rng(2)
    w = rng.uniform(0.5, 1.5, 20)
    w /= w.sum()
    basis = complete_basis(rng, 5, 4, weights=w)
    vals = rng.normal(size=20)
    A = project_multiplication(vals, basis)
    np.testing.assert_allclose(np.sort(np.linalg.eigvalsh(A)), np.sort(vals), atol=1e-10)
    # completeness gives sum_i phi_i(s)^2 = 1 / w_s, so the weights cancel in the trace
    assert np.trace(A) == pytest.approx(np.sum(vals), abs=1e-10)


def test_project_rejects_bad_values():
    basis = complete_basis(np.random.default_rng(3), 2, 2)
    with pytest.raises(ValueError):
        project_multiplication(np.ones(3), basis)
    with pytest.raises(ValueError):
        project_multiplication(np.array([1, np.inf, 0, 0]), basis)


def test_build_observables():
    basis = complete_basis(np.random.default_rng(4), 3, 2)
    A_h, A_q = build_observables(np.zeros(6), np.full(6, -1.5), basis)
    assert np.all(A_h == 0)
    np.testing.assert_allclose(A_q, -1.5 * np.eye(6), atol=1e-12)


def test_shift_within_trajectories():
    basis = multi_basis(np.random.default_rng(5), [3, 2], 2, 3)
    f = np.arange(10.0)
    np.testing.assert_array_equal(shift_within_trajectories(f, basis), [0, 0, 0, 1, 2, 3, 0, 0, 6, 7])


def test_transfer_leading_mode():
    basis = multi_basis(np.random.default_rng(6), [8, 8, 8], 3, 4)
    P = build_transfer(basis)
    n_emb = 24
    for b in basis.blocks:
        assert P[b.col_start, b.col_start] == pytest.approx(1 - 3 / n_emb, abs=1e-12)
    # no coupling across trajectories
    assert np.all(P[:4, 4:] == 0)


def test_transfer_single_time_is_zero():
    basis = complete_basis(np.random.default_rng(7), 1, 4)
    assert np.all(build_transfer(basis) == 0)


def test_transfer_complete_basis_shifts_samples():
    rng = np.random.default_rng(8)
    basis = complete_basis(rng, 6, 3)
    P = build_transfer(basis)
    f = rng.normal(size=18)
    c = basis.coefficients(f)
    np.testing.assert_allclose(basis.phi @ (P @ c), shift_within_trajectories(f, basis), atol=1e-10)
    assert np.linalg.norm(P, 2) <= 1 + 1e-6


def test_transfer_norm_on_kernel_basis():
    rng = np.random.default_rng(9)
    G = np.abs(rng.normal(size=(40, 10)))
    from qmcl.kernel import bistochastic_normalize

    G, _ = bistochastic_normalize(G)
    basis = eigenbasis(G, 8, n_cells=4)
    assert np.linalg.norm(build_transfer(basis), 2) <= 1 + 1e-6


def test_init_density_uniform():
    basis = constant_leading_basis(np.random.default_rng(10), 4, 3, 5)
    rho = init_density_uniform(basis)
    assert rho.shape == (3, 5)
    np.testing.assert_allclose(rho, np.tile(np.eye(5)[0], (3, 1)), atol=1e-12)
    np.testing.assert_allclose(np.linalg.norm(rho, axis=1), 1.0, atol=1e-12)


def test_init_density_degenerate():
    basis = constant_leading_basis(np.random.default_rng(11), 4, 3, 5)
    basis.phi = basis.phi[:, 1:]
    basis.blocks = [Block(0, 12, 0, 4, 4)]
    with pytest.raises(DegenerateDensityError):
        init_density_uniform(basis)


def test_evolve_identity_and_scaling():
    rng = np.random.default_rng(12)
    rho = rng.normal(size=(4, 6))
    rho /= np.linalg.norm(rho, axis=1, keepdims=True)
    np.testing.assert_allclose(evolve_density(rho, np.eye(6)), rho, atol=1e-15)
    np.testing.assert_allclose(evolve_density(rho, 2 * np.eye(6)), rho, atol=1e-15)
    with pytest.raises(DegenerateDensityError) as info:
        evolve_density(rho, np.zeros((6, 6)))
    assert info.value.cell == 0


def test_evolve_delta_density_advances_one_sample():
    rng = np.random.default_rng(13)
    basis = complete_basis(rng, 5, 2)
    P = build_transfer(basis)
    s = 1 * 2 + 1  # time 1, cell 1
    delta = np.zeros(10)
    delta[s] = 1.0
    rho = basis.coefficients(delta)
    rho /= np.linalg.norm(rho)
    out = evolve_density(rho, P)[0]
    psi = basis.phi @ out
    assert np.argmax(np.abs(psi)) == s + 2
    np.testing.assert_allclose(np.delete(psi, s + 2), 0, atol=1e-10)


def test_effects_without_matrices():
    rng = np.random.default_rng(14)
    basis = multi_basis(rng, [4, 5], 3, 6)
    rho = rng.normal(size=(3, 12))
    f = rng.uniform(0, 1, size=(3, 27))
    out = apply_effects(rho, f, basis)
    for m in range(3):
        np.testing.assert_allclose(out[m], effect_matrix(f[m], basis) @ rho[m], atol=1e-13)


def test_condition_flat_features_is_identity():
    rng = np.random.default_rng(15)
    basis = complete_basis(rng, 4, 3)
    rho = rng.normal(size=(3, 12))
    rho /= np.linalg.norm(rho, axis=1, keepdims=True)
    for c in (1.0, 0.3):
        post, skipped = condition_density(rho, np.full((3, 12), c), basis)
        np.testing.assert_allclose(post, rho, atol=1e-12)
        assert skipped.size == 0


def test_condition_zero_features_keeps_prior(caplog):
    rng = np.random.default_rng(16)
    basis = complete_basis(rng, 4, 3)
    rho = np.tile(np.eye(12)[0], (3, 1))
    f = np.ones((3, 12))
    f[1] = 0.0
    post, skipped = condition_density(rho, f, basis)
    assert list(skipped) == [1]
    np.testing.assert_array_equal(post[1], rho[1])
    assert "keeping prior" in caplog.text
    with pytest.raises(ValueError):
        condition_density(rho, -f, basis)


def test_condition_matches_classical_bayes():
    rng = np.random.default_rng(17)
    w = rng.uniform(0.5, 1.5, 30)
    w /= w.sum()
    basis = complete_basis(rng, 10, 3, weights=w)
    psi = rng.uniform(0.5, 1.5, 30)
    rho = basis.coefficients(psi)[None]
    rho /= np.linalg.norm(rho)
    lik = rng.uniform(0, 1, 30)
    post, _ = condition_density(rho, lik[None], basis)
    a = rng.normal(size=30)
    A = project_multiplication(a, basis)
    flux, _ = surrogate_flux(post, A, A)
    # pure state psi has classical density psi^2; the effect multiplies psi by sqrt(lik)
    assert flux[0] == pytest.approx(classical_bayes_mean(psi**2, lik, a, w), abs=1e-10)


def test_surrogate_flux():
    rng = np.random.default_rng(18)
    rho = rng.normal(size=(5, 4))
    rho /= np.linalg.norm(rho, axis=1, keepdims=True)
    fh, fq = surrogate_flux(rho, 3.0 * np.eye(4), np.zeros((4, 4)))
    np.testing.assert_allclose(fh, 3.0, atol=1e-14)
    assert np.all(fq == 0)
    B = rng.normal(size=(4, 4))
    fh, _ = surrogate_flux(rho, B @ B.T, B)
    assert np.all(fh >= -1e-9)


def test_delta_density_reads_training_flux():
    rng = np.random.default_rng(19)
    basis = complete_basis(rng, 6, 4)
    a = rng.normal(size=24)
    A = project_multiplication(a, basis)
    for s in (0, 7, 23):
        delta = np.zeros(24)
        delta[s] = 1.0
        rho = basis.coefficients(delta)
        rho /= np.linalg.norm(rho)
        flux, _ = surrogate_flux(rho[None], A, A)
        assert flux[0] == pytest.approx(a[s], abs=1e-8)


def test_feature_vectors_shift_and_self_match():
    rng = np.random.default_rng(20)
    train = rng.uniform(0.5, 1.5, size=(3, 2, 8))
    stencils = stencil_embed(train, 5)
    state = train[1]
    f = feature_vectors(state, stencils, 0.2, 5)
    assert f.shape == (8, 24)
    for m in range(8):
        assert f[m, 8 + m] == 1.0
    shifted = feature_vectors(np.roll(state, 1, axis=1), stencils, 0.2, 5)
    assert np.array_equal(shifted[1:], f[:-1]) and np.array_equal(shifted[0], f[-1])
    assert np.all((f > 0) & (f <= 1))
