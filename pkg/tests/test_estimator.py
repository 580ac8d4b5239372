import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from qmcl import QMClosure
from qmcl.estimator import StageError, split_evenly


def test_params_roundtrip():
    est = QMClosure(n_delays=8, rank=32)
    params = est.get_params()
    assert params["n_delays"] == 8 and params["rank"] == 32
    twin = clone(est)
    assert twin.get_params() == params
    est.set_params(stencil_width=3)
    assert est.stencil_width == 3


def test_defaults_match_full_scale_setup():
    est = QMClosure()
    assert (est.n_delays, est.stencil_width, est.n_eigenfunctions, est.rank) == (64, 5, 6144, 6144)
    assert est.conditioning_period == 10
    assert est.dt == pytest.approx(20 * 0.1 * 50 / 1920)


def test_not_fitted():
    with pytest.raises(NotFittedError):
        QMClosure().predict(np.ones((2, 4)))


def test_split_evenly():
    assert split_evenly(10, 3) == [4, 3, 3]


def test_fit_validation():
    X = [np.ones((10, 2, 4))]
    with pytest.raises(ValueError):
        QMClosure(n_delays=2).fit(X, [np.ones((9, 2, 4))])
    with pytest.raises(ValueError):
        QMClosure(n_delays=2).fit([np.ones((10, 3, 4))], [np.ones((10, 3, 4))])
    with pytest.raises(StageError, match=r"\[embed\]"):
        QMClosure(n_delays=20).fit(X, X)
    # constant data has no distance scale
    with pytest.raises(StageError, match=r"\[bandwidth\]"):
        QMClosure(n_delays=2, n_eigenfunctions=4, rank=4).fit(X, X)


def test_toy_fit_invariants(toy_config, toy_model):
    m = toy_model
    n_emb = toy_config.n_embedded_per_trajectory
    assert m.basis_.n_samples == 2 * n_emb * toy_config.n_cells
    assert m.basis_.n_basis == toy_config.n_eigenfunctions
    np.testing.assert_allclose(m.basis_.gram(), np.eye(m.basis_.n_basis), atol=1e-8)
    np.testing.assert_allclose(m.basis_.eigvals[[0, 32]], 1.0, atol=1e-9)
    assert np.allclose(m.obs_h_, m.obs_h_.T, atol=1e-12)
    assert np.linalg.norm(m.transfer_, 2) <= 1 + 1e-6
    assert m.eps_ > 0 and m.eps_cond_ > 0
    assert abs(np.mean(np.log(m.cond_scales_))) < 1e-12
    assert set(m.timings_) == {"bandwidth", "basis", "operators", "conditioning"}


def test_toy_online_api(toy_model, toy_training):
    m = toy_model
    state = toy_training.resolved[0][20]
    rho = m.initial_density()
    np.testing.assert_allclose(np.linalg.norm(rho, axis=1), 1.0, atol=1e-12)
    rho = m.condition(rho, state)
    rho = m.evolve(rho)
    np.testing.assert_allclose(np.linalg.norm(rho, axis=1), 1.0, atol=1e-12)
    assert m.flux(rho).shape == (2, m.n_cells_)
    assert m.predict_flux(state).shape == (2, m.n_cells_)
    assert m.predict_flux(toy_training.resolved[0][:3]).shape == (3, 2, m.n_cells_)
    out = m.rollout(state, 5, conditioning_period=2)
    assert out["states"].shape == (6, 2, m.n_cells_)
    assert len(out["skipped"]) == 3  # initial, steps 2 and 4
    np.testing.assert_array_equal(m.predict(state, n_steps=5, conditioning_period=2), out["states"])
    assert np.array_equal(m.predict(state, n_steps=0), state[None])
    with pytest.raises(ValueError):
        m.rollout(state[:, :-1], 1)
    with pytest.raises(ValueError):
        m.rollout(state, 1, conditioning_period=0)


def test_flux_tracks_training_sample(toy_model, toy_training):
    # conditioning on a training state gives a flux closer to the truth than the mean flux
    m = toy_model
    k = m.n_delays - 1 + 10
    state, truth = toy_training.resolved[1][k], toy_training.fluxes[1][k]
    pred = m.predict_flux(state)
    mean = np.mean(np.concatenate([f for f in toy_training.fluxes], axis=0), axis=(0, 2))
    err = np.sqrt(np.mean((pred - truth) ** 2, axis=1))
    base = np.sqrt(np.mean((mean[:, None] - truth) ** 2, axis=1))
    assert np.all(err < base)
