import math

import numpy as np
import pytest

from dpjl import pld as pld_mod
from dpjl.pld import (Direction, GridExhaustedError, MechanismSpec, PrivacyLossDistribution,
                      account, build_pld, compose_pld, composed_privacy_curve, delta_at_epsilon,
                      epsilon_at_delta, epsilon_for_pld)
from dpjl.tradeoff import EXACT, eps_delta_sweep

from oracles import gaussian_delta, tv_mixture

BOTH = (Direction.REMOVE, Direction.ADD)


def gaussian_pld(mu, delta_eps=1e-4, steps=1):
    """PLD of the unsubsampled Gaussian mechanism with shift mu (sigma = 1/mu)."""
    return compose_pld(build_pld(MechanismSpec(1.0 / mu, EXACT, 1.0), Direction.REMOVE, delta_eps), steps)


def deltas(pld, eps):
    return np.array([delta_at_epsilon(pld, e) for e in eps])


# ---------------------------------------------------------------- single step


@pytest.mark.parametrize("r", [5, EXACT])
@pytest.mark.parametrize("direction", BOTH)
def test_vanishing_sample_rate_collapses_to_zero_loss(r, direction):
    pld = build_pld(MechanismSpec(0.6, r, 1e-12), direction, 1e-3)
    near_zero = np.abs(pld.losses) <= pld.grid_spacing + 1e-15
    assert pld.masses[near_zero].sum() >= 1 - 1e-9


def test_gaussian_moments():
    pld = build_pld(MechanismSpec(1.0, EXACT, 1.0), Direction.REMOVE, 1e-3)
    # null side: L = X - 1/2 with X ~ N(0, 1)
    q0 = pld.null_masses()
    mean0 = float(np.dot(pld.losses, q0) / q0.sum())
    var0 = float(np.dot((pld.losses - mean0) ** 2, q0) / q0.sum())
    assert abs(mean0 + 0.5) <= 2 * pld.grid_spacing
    assert abs(var0 - 1.0) <= 0.01
    # alternative side: mean +1/2
    assert abs(pld.mean_loss() - 0.5) <= 2 * pld.grid_spacing
    assert abs(pld.variance_loss() - 1.0) <= 0.01


def test_likelihood_ratios_integrate_to_one():
    pld = build_pld(MechanismSpec(0.6, 5, 0.01), Direction.REMOVE, 1e-4)
    assert abs(pld.null_masses().sum() - 1.0) <= 1e-4


@pytest.mark.parametrize("mu", [0.5, 1.0, 2.0])
def test_single_step_gaussian_closed_form(mu):
    pld = gaussian_pld(mu, delta_eps=1e-5)
    eps = np.array([0.0, 1.0, 2.0])
    np.testing.assert_allclose(deltas(pld, eps), gaussian_delta(eps, mu), rtol=0, atol=1e-5)


@pytest.mark.parametrize("mu,p", [(2.0, 0.3), (1.0, 0.05), (4.0, 0.5)])
@pytest.mark.parametrize("direction", BOTH)
def test_delta_at_zero_is_total_variation(mu, p, direction):
    pld = build_pld(MechanismSpec(1.0 / mu, EXACT, p), direction, 1e-5)
    assert abs(delta_at_epsilon(pld, 0.0) - tv_mixture(mu, p)) <= 1e-5


def test_delta_at_infinity_is_unresolved_mass():
    pld = gaussian_pld(1.0, 1e-3)
    assert delta_at_epsilon(pld, math.inf) == pld.mass_at_plus_inf
    assert pld.mass_at_plus_inf < 1e-12
    manual = PrivacyLossDistribution(0.5, -1, np.array([0.2, 0.3, 0.45]), 0.05, Direction.REMOVE)
    assert delta_at_epsilon(manual, math.inf) == 0.05


def test_delta_formula_on_hand_built_distribution():
    q = np.array([0.2, 0.3, 0.45])
    pld = PrivacyLossDistribution(0.5, -1, q, 0.05, Direction.REMOVE)  # losses -0.5, 0, 0.5
    assert delta_at_epsilon(pld, 0.0) == pytest.approx(0.05 + 0.45 * (1 - math.exp(-0.5)), abs=1e-15)
    assert delta_at_epsilon(pld, 0.5) == pytest.approx(0.05, abs=1e-15)


# ---------------------------------------------------------------- composition


def test_compose_once_is_identity():
    pld = gaussian_pld(1.0, 1e-3)
    assert compose_pld(pld, 1) is pld


@pytest.mark.parametrize("mu,steps", [(1.0, 2), (1.0, 4)])
def test_gaussian_composition(mu, steps):
    pld = gaussian_pld(mu, delta_eps=1e-4, steps=steps)
    eps = np.linspace(0, 5, 26)
    np.testing.assert_allclose(deltas(pld, eps), gaussian_delta(eps, mu * math.sqrt(steps)),
                               rtol=0, atol=1e-4)


def test_composition_is_associative():
    base = build_pld(MechanismSpec(1.0, 5, 0.1), Direction.REMOVE, 1e-3)
    six = compose_pld(base, 6)
    two_three = compose_pld(compose_pld(base, 2), 3)
    eps = np.linspace(0, 4, 41)
    np.testing.assert_allclose(deltas(two_three, eps), deltas(six, eps), rtol=0, atol=1e-6)


def test_infinite_mass_composes():
    q = np.array([0.5, 0.49])
    pld = PrivacyLossDistribution(1.0, 0, q, 0.01, Direction.REMOVE, clamp=100.0)
    assert compose_pld(pld, 5).mass_at_plus_inf == pytest.approx(1 - 0.99**5, rel=1e-12)


@pytest.mark.parametrize("direction", BOTH)
def test_composition_degrades_privacy(direction):
    base = build_pld(MechanismSpec(1.0, 5, 0.05), direction, 1e-3)
    eps = np.linspace(0, 6, 61)
    prev = deltas(base, eps)
    for steps in (2, 3, 4, 7):
        cur = deltas(compose_pld(base, steps), eps)
        assert np.all(cur >= prev - 1e-12)
        prev = cur


@pytest.mark.parametrize("steps", [1, 10])
def test_halving_grid_spacing_does_not_increase_delta(steps):
    spec = MechanismSpec(0.8, 5, 0.05)
    eps = np.linspace(0, 5, 51)
    coarse = deltas(compose_pld(build_pld(spec, Direction.REMOVE, 2e-3), steps), eps)
    fine = deltas(compose_pld(build_pld(spec, Direction.REMOVE, 1e-3), steps), eps)
    assert np.all(fine <= coarse + 1e-12)


# ---------------------------------------------------------------- epsilon


def test_epsilon_monotone_in_jl_dimension():
    eps = [epsilon_at_delta(MechanismSpec(1.0, r, 0.05, 20), 1e-5, delta_eps=1e-3)
           for r in (1, 2, 5, 10, 30, 100)]
    assert all(np.isfinite(eps))
    assert all(a >= b for a, b in zip(eps, eps[1:]))


def test_epsilon_for_pld_inverts_delta():
    pld = gaussian_pld(1.0, 1e-4, steps=3)
    eps = epsilon_for_pld(pld, 1e-5)
    assert delta_at_epsilon(pld, eps) == pytest.approx(1e-5, rel=1e-9)
    assert delta_at_epsilon(pld, eps - 1e-3) > 1e-5


def test_account_reports_max_over_directions():
    res = account(MechanismSpec(1.0, 5, 0.05, 10), 1e-5, delta_eps=1e-3)
    assert res.epsilon == max(res.epsilon_by_direction.values())
    assert set(res.epsilon_by_direction) == {"add", "remove"}
    np.testing.assert_allclose(res.delta_at([res.epsilon]), [1e-5], rtol=1e-6)


def test_grid_exhaustion_reports_achievable_range():
    pld = PrivacyLossDistribution(0.5, -1, np.array([0.2, 0.3, 0.499]), 1e-3, Direction.REMOVE)
    with pytest.raises(GridExhaustedError, match="achievable") as info:
        epsilon_for_pld(pld, 1e-4)
    assert info.value.achievable_delta == 1e-3


def test_account_gives_up_at_the_clamp_cap(monkeypatch):
    monkeypatch.setattr(pld_mod, "MAX_CLAMP", 64.0)
    with pytest.raises(GridExhaustedError, match="unattainable"):
        account(MechanismSpec(0.5, 1, 0.5, 50), 1e-10, delta_eps=1e-2)


def test_account_widens_the_clamp_when_needed():
    res = account(MechanismSpec(1.0, 1, 0.05, 20), 1e-5, delta_eps=1e-3)
    assert res.epsilon > 32
    assert max(res.clamp_by_direction.values()) > 32
    for d, c in res.clamp_by_direction.items():
        assert res.delta_eps_by_direction[d] == pytest.approx(1e-3 * c / 32)


def test_sweep_agrees_with_direct_delta():
    spec = MechanismSpec(1.0, 10, 0.05, 20)
    curve = composed_privacy_curve(spec, delta_eps=1e-3)
    res = account(spec, 1e-5, delta_eps=1e-3)
    eps, delta = eps_delta_sweep(curve)
    keep = np.nonzero((eps >= 0.1) & (eps <= 8))[0]
    pick = keep[np.linspace(0, keep.size - 1, 150).astype(int)]
    np.testing.assert_allclose(res.delta_at(eps[pick]), delta[pick], rtol=0, atol=2e-4)


# ---------------------------------------------------------------- validation


def test_distribution_validation():
    with pytest.raises(ValueError, match="total mass"):
        PrivacyLossDistribution(1.0, 0, np.array([0.5, 0.4]), 0.0, Direction.REMOVE)
    with pytest.raises(ValueError):
        PrivacyLossDistribution(0.0, 0, np.array([1.0]), 0.0, Direction.REMOVE)
    with pytest.raises(ValueError):
        PrivacyLossDistribution(1.0, 0, np.array([1.5, -0.5]), 0.0, Direction.REMOVE)
    pld = PrivacyLossDistribution(1.0, 0, np.array([1.0]), 0.0, Direction.REMOVE)
    with pytest.raises(ValueError):
        delta_at_epsilon(pld, -1.0)
    with pytest.raises(ValueError):
        epsilon_for_pld(pld, 0.0)
    with pytest.raises(ValueError):
        compose_pld(pld, 0)


@pytest.mark.parametrize("kwargs", [dict(sigma=0.0), dict(sigma=math.inf), dict(jl_dim=0),
                                    dict(sample_rate=0.0), dict(sample_rate=1.5), dict(steps=0)])
def test_mechanism_spec_validation(kwargs):
    base = dict(sigma=1.0, jl_dim=5, sample_rate=0.1, steps=1)
    base.update(kwargs)
    with pytest.raises(ValueError):
        MechanismSpec(**base)


def test_describe():
    assert MechanismSpec(0.6, EXACT, 0.01, 3).describe() == "sigma=0.6 r=exact p=0.01 T=3"
    assert MechanismSpec(0.6, 5, 0.01, 3).describe() == "sigma=0.6 r=5 p=0.01 T=3"
