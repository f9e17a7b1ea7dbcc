import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from corpus import (CORPUS_NAMES, V0, battery, chain, cleared, corpus_item, origin_scenario,
                    single_node)
from gridclear.market import LocationalPrices, Scenario, clear_market
from gridclear.prosumer import Boxes, LtiDynamics, ProsumerSpec, QuadraticUtility, utility_total
from gridclear.verify import (OracleTooLarge, brute_force_welfare, check_decay_conditions,
                              check_strict_implementability, decay_report, detect_price_decay,
                              equal_share_voltages, verify_competitive_equilibrium, verify_nash)

LIGHT = [n for n in CORPUS_NAMES if n not in ("ev_example", "synthetic_example")]


def nash_of(out, tol=1e-5, **override):
    pr = out.prices
    args = dict(alpha=pr.alpha, xi_lo=pr.xi_lo, xi_hi=pr.xi_hi, U=out.inputs, P=out.injections)
    args.update(override)
    return verify_nash(out.scenario, args["alpha"], args["xi_lo"], args["xi_hi"], args["U"],
                       args["P"], tol)


def test_origin_equilibrium_with_zero_prices_passes():
    s = origin_scenario()
    zeros = np.zeros((s.n, s.T))
    prices = LocationalPrices(zeros, np.zeros(s.T), zeros, zeros)
    U = [np.zeros((s.T, 2)) for _ in range(s.n)]
    rep = verify_competitive_equilibrium(s, prices, U, zeros, 1e-5)
    assert rep.verdict == "pass"


def test_missing_decomposition_is_incomplete():
    out = cleared("oracle_pair")
    rep = verify_competitive_equilibrium(out.scenario, LocationalPrices(out.prices.lam),
                                         out.inputs, out.injections, 1e-5)
    assert rep.conditions["price_decomposition"].passed is None
    assert rep.conditions["price_decomposition"].detail == "not checkable"
    assert rep.verdict == "incomplete"


def test_report_serializes():
    d = verify_competitive_equilibrium(*_triple(cleared("oracle_pair")), 1e-5).to_dict()
    assert d["verdict"] == "pass" and set(d["conditions"]) == {"best_response", "balance", "voltage",
                                                           "price_decomposition", "complementarity"}


def _triple(out):
    return out.scenario, out.prices, out.inputs, out.injections


def test_nash_passes_on_cleared_market():
    rep = nash_of(cleared("tight_chain"))
    assert rep.passed
    assert set(rep.conditions) == {"prosumers", "alpha_stationarity", "xi_lo_coefficient",
                                   "xi_hi_coefficient", "xi_nonnegative", "complementarity"}


def test_nash_flags_unbalanced_injections():
    out = cleared("oracle_pair")
    P = out.injections.copy()
    P[0, 0] += 1.0
    rep = nash_of(out, P=P)
    assert rep.conditions["alpha_stationarity"].passed is False


def test_nash_flags_voltage_price_on_slack_bound():
    out = cleared("oracle_pair")  # voltage limits are loose, every slack is large
    xi_hi = out.prices.xi_hi.copy()
    xi_hi[1, 0] = 0.5
    rep = nash_of(out, xi_hi=xi_hi)
    assert rep.conditions["complementarity"].passed is False


def _tampered(out, kind):
    s, pr = out.scenario, out.prices
    U = [u.copy() for u in out.inputs]
    P = out.injections.copy()
    alpha, xi_lo, xi_hi = pr.alpha.copy(), pr.xi_lo.copy(), pr.xi_hi.copy()
    if kind == "alpha":
        alpha[0] += 0.3
    elif kind == "xi":
        xi_hi[0, -1] += 0.3
    elif kind == "P":
        P[0, 0] += 0.2
        P[-1, 0] -= 0.2
    elif kind == "U":
        U[0][0] = -U[0][0] + 0.05
    prices = LocationalPrices.from_decomposition(s.R, alpha, xi_lo, xi_hi)
    return s, prices, U, P


@pytest.mark.parametrize("name", LIGHT)
@pytest.mark.parametrize("kind", ["none", "alpha", "xi", "P", "U"])
def test_nash_verdict_matches_competitive_verdict(name, kind):
    s, prices, U, P = _tampered(cleared(name), kind)
    ce = verify_competitive_equilibrium(s, prices, U, P, 1e-5)
    ne = verify_nash(s, prices.alpha, prices.xi_lo, prices.xi_hi, U, P, 1e-5)
    assert ce.passed == ne.passed
    if kind == "none":
        assert ce.passed


@pytest.mark.parametrize("name", LIGHT)
def test_passing_triples_attain_optimal_welfare(name):
    out = cleared(name)
    s = out.scenario
    for prices in filter(None, (out.prices, out.min_norm_prices)):
        if verify_competitive_equilibrium(s, prices, out.inputs, out.injections, 1e-5).passed:
            total = sum(utility_total(sp, out.inputs[i]) for i, sp in enumerate(s.prosumers))
            assert total == pytest.approx(out.welfare, rel=1e-4, abs=1e-8)


def test_strict_with_wide_limits():
    rep = check_strict_implementability(corpus_item("ev_wide_T24"), 1e-6)
    assert rep.strict and rep.spread <= 1e-5


def test_single_node_is_trivially_strict():
    rep = check_strict_implementability(single_node(), 1e-6)
    assert rep.strict and rep.spread == 0.0


def test_binding_limits_are_not_strict():
    rep = check_strict_implementability(corpus_item("tight_chain"), 1e-6)
    assert not rep.strict and rep.spread is None


def test_decay_conditions_hold_on_constant_supply_preset():
    rep = check_decay_conditions(corpus_item("synthetic_T20"))
    assert rep.passed, rep.items
    assert rep.witnesses["D"] == 23.0
    s = corpus_item("synthetic_T20")
    sv = equal_share_voltages(s)
    expected = min(np.minimum(s.envelope.hi - sv, sv - s.envelope.lo))
    assert rep.witnesses["equal_share_slack"] == pytest.approx(expected)


def test_decay_conditions_reject_sinusoidal_supply():
    rep = check_decay_conditions(corpus_item("ev_T20"))
    assert rep.items["constant_supply"] is False and not rep.passed


def test_decay_conditions_reject_zero_utilities():
    spec = ProsumerSpec(LtiDynamics([[1.0]], [[1.0]]), Boxes([-1.0], [1.0], [-1.0], [1.0]),
                        QuadraticUtility([[0.0]], [[0.0]], [[0.0]], [0.0], [0.0], [[0.0]], [1.0]),
                        np.ones(3), 0.0, [0.0])
    s = Scenario(chain(1), (spec,), 1.0, V0, 0.95**2, 1.05**2)
    assert check_decay_conditions(s).items["negative_definite_utility"] is False


def test_decay_detection_examples():
    assert detect_price_decay(np.zeros((3, 5))) == 0
    lam = np.zeros((3, 5))
    lam[0, -1] = 1.0
    assert detect_price_decay(lam) is None
    lam = np.ones((2, 6))
    lam[:, 4:] = 1e-7
    assert detect_price_decay(lam, 1e-5) == 4


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 4), st.integers(1, 12), st.integers(0, 12))
def test_decay_index_is_tight(n, T, k):
    k = min(k, T)
    lam = np.zeros((n, T))
    lam[:, :k] = 1.0
    t_bar = detect_price_decay(lam)
    if k == T:
        assert t_bar is None
    else:
        assert t_bar == k
        assert np.abs(lam[:, t_bar:]).max(initial=0.0) <= 1e-5


def test_post_decay_equal_share_injections_are_feasible():
    rep = decay_report(cleared("synthetic_T20"))
    assert rep.t_bar is not None
    assert rep.balance_after <= 1e-9 and rep.margin_after > 0


def test_oracle_analytic_single_prosumer():
    spec = ProsumerSpec(LtiDynamics([[1.0]], [[1.0]]), Boxes([-5.0], [5.0], [-1.0], [1.0]),
                        QuadraticUtility([[0.0]], [[1.0]], [[0.0]], [0.0], [0.0], [[0.0]], [0.5]),
                        np.zeros(1), 0.0, [0.0])
    s = Scenario(chain(1), (spec,), 0.5, V0, 0.95**2, 1.05**2)
    orc = brute_force_welfare(s, shadow_step=None)
    assert orc.welfare == pytest.approx(0.0, abs=1e-12)
    assert orc.inputs[0][0, 0] == pytest.approx(0.0, abs=1e-12)


def test_oracle_refuses_large_problems():
    with pytest.raises(OracleTooLarge):
        brute_force_welfare(corpus_item("ev_T20"))


def test_oracle_matches_market_on_quadratic_pair():
    def pros(a, target, w):
        return ProsumerSpec(LtiDynamics([[0.9]], [[1.0]]), Boxes([-5.0], [5.0], [-1.0], [1.0]),
                            QuadraticUtility([[0.2]], [[1.0]], [[w]], [0.0], [target], [[0.3]], [0.5]),
                            np.array([a]), 0.0, [0.0])
    s = Scenario(chain(2), (pros(0.4, 1.0, 1.0), pros(0.1, 0.8, 2.0)), 0.5, V0, 0.0, 2.0)
    out = clear_market(s)
    orc = brute_force_welfare(s, resolution=1e-2)
    assert orc.welfare == pytest.approx(out.welfare, abs=1e-3)
    assert orc.welfare <= out.welfare + 1e-9
