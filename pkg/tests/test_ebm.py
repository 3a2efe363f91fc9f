import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import minimize

from ebft.ebm import (OracleError, constrained_mle, ebm_tilt_oracle, solve_fm_kl, solve_norm_primal,
                      tilt)
from ebft.whitening import kl_divergence


def instance(seed, N=16, d=3):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((N, d)), rng.dirichlet(np.ones(N)), rng.dirichlet(np.ones(N))


def cosine(a, b):
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


@pytest.mark.parametrize("seed", range(4))
@pytest.mark.parametrize("alpha", [0.25, 1.0])
def test_gap_and_tilt_residual(seed, alpha):
    Phi, q, p = instance(seed)
    r = ebm_tilt_oracle(q, p, Phi, beta=1.0, alpha=alpha)
    assert r.converged
    assert r.gap <= 1e-6 and r.tilt_residual <= 1e-5
    assert r.rho.sum() == pytest.approx(1.0, abs=1e-12)


@settings(max_examples=15)
@given(st.integers(0, 2**31), st.floats(0.1, 5.0), st.floats(0.2, 2.0))
def test_gap_property(seed, beta, alpha):
    Phi, q, p = instance(seed, N=9, d=2)
    r = ebm_tilt_oracle(q, p, Phi, beta=beta, alpha=alpha)
    assert r.gap <= 1e-6 and r.tilt_residual <= 1e-5


def test_primal_matches_generic_simplex_solver():
    Phi, q, p = instance(11, N=6, d=2)
    v = p @ Phi
    logr, _, ok = solve_fm_kl(q, Phi, v, beta=2.0)
    assert ok

    def F(z):
        rho = np.exp(z - z.max())
        rho /= rho.sum()
        return np.sum((rho @ Phi - v) ** 2) + kl_divergence(rho, q) / 2.0

    res = minimize(F, np.log(q), method="BFGS", options={"gtol": 1e-12})
    z = res.x - res.x.max()
    ref = np.exp(z) / np.exp(z).sum()
    assert np.allclose(np.exp(logr), ref, atol=1e-6)


def test_small_alpha_direction():
    Phi, q, p = instance(3)
    r = ebm_tilt_oracle(q, p, Phi, alpha=1e-6)
    assert cosine(r.chi, -(p @ Phi)) >= 1 - 1e-6


def test_unit_alpha_matches_constrained_mle():
    for seed in range(3):
        Phi, q, p = instance(seed)
        r = ebm_tilt_oracle(q, p, Phi, alpha=1.0)
        chi = constrained_mle(p, q, Phi, r.beta_tilde)
        assert np.abs(chi - r.chi).max() <= 1e-6


def test_p_equals_q_is_already_matched():
    Phi, q, _ = instance(5)
    r = ebm_tilt_oracle(q, q, Phi)
    assert np.allclose(r.rho, q, atol=1e-12)
    assert np.linalg.norm(r.chi) <= 1e-8 and r.primal_value <= 1e-20


def test_squared_and_unsquared_forms_share_the_optimizer():
    Phi, q, p = instance(7, N=8, d=2)
    r = ebm_tilt_oracle(q, p, Phi, alpha=0.5)
    rho = solve_norm_primal(q, Phi, r.v, r.beta_tilde)
    assert np.abs(rho - r.rho).max() <= 1e-6


@settings(max_examples=10)
@given(st.integers(0, 2**31))
def test_alignment_with_data_mean_falls_as_alpha_grows(seed):
    # E_rho*[phi] is a proximal map of mu_p / alpha, and proximal maps are monotone
    Phi, q, p = instance(seed, N=9, d=2)
    mu = p @ Phi
    align = [mu @ (ebm_tilt_oracle(q, p, Phi, alpha=a).rho @ Phi) for a in (0.1, 0.25, 0.5, 1.0, 2.0)]
    assert all(b <= a + 1e-9 for a, b in zip(align, align[1:]))


def test_tilt_normalizes():
    Phi, q, _ = instance(0)
    assert np.exp(tilt(q, Phi, np.array([0.3, -1.0, 2.0]))).sum() == pytest.approx(1.0, abs=1e-13)
    assert np.allclose(tilt(q, Phi, np.zeros(3)), np.log(q))


def test_row_fields():
    Phi, q, p = instance(1)
    row = ebm_tilt_oracle(q, p, Phi).row()
    assert {"alpha", "beta_tilde", "gap", "tilt_residual", "chi_norm"} <= set(row)


def test_preconditions():
    Phi, q, p = instance(0)
    bad_q = q.copy()
    bad_q[0] = 0.0
    with pytest.raises(ValueError, match="support"):
        ebm_tilt_oracle(bad_q, p, Phi)
    with pytest.raises(ValueError, match="enumerate"):
        ebm_tilt_oracle(np.full(1025, 1 / 1025), np.full(1025, 1 / 1025), np.zeros((1025, 2)))
    with pytest.raises(ValueError):
        ebm_tilt_oracle(q, p, Phi, alpha=0.0)


def test_strict_mode_raises_on_budget_exhaustion(monkeypatch):
    import ebft.ebm as ebm

    Phi, q, p = instance(0)
    real = ebm.solve_fm_kl
    monkeypatch.setattr(ebm, "solve_fm_kl", lambda *a, **k: (real(*a, **k)[0], 1, False))
    with pytest.raises(OracleError):
        ebm.ebm_tilt_oracle(q, p, Phi, strict=True)
