"""One test per acceptance criterion, each at its stated tolerance."""

import json
import time

import numpy as np

from corpus import ACCEPTANCE, CORPUS_NAMES, cleared, corpus_item, oracle_pair, random_tree
from gridclear.market import LocationalPrices, best_response, clear_market
from gridclear.network import Line, RadialNetwork, build_sensitivity_matrices, recover_line_flows
from gridclear.prosumer import payoff
from gridclear.scenario import load_scenario, run, widen_voltage_limits, with_horizon
from gridclear.verify import (brute_force_welfare, check_decay_conditions,
                              check_strict_implementability, decay_report,
                              verify_competitive_equilibrium, verify_nash)


def record(k, passed, detail):
    passed = bool(passed)
    ACCEPTANCE[k] = (passed, detail)
    print(f"criterion {k}: {'PASS' if passed else 'FAIL'}  {detail}")
    assert passed, detail


def test_criterion_01_equilibrium_equivalence_scaled_ev():
    t0 = time.perf_counter()
    s = with_horizon(load_scenario("ev_example"), 20)
    out = clear_market(s)
    rep = verify_competitive_equilibrium(s, out.prices, out.inputs, out.injections, 1e-5)
    rel = []
    for i, spec in enumerate(s.prosumers):
        mine = payoff(spec, out.prices.lam[i], out.inputs[i], out.injections[i], s.delta)
        best = best_response(spec, out.prices.lam[i], s.delta).payoff
        rel.append((best - mine) / max(1.0, abs(best)))
    elapsed = time.perf_counter() - t0
    ok = rep.passed and max(rel) <= 1e-4 and elapsed < 60
    record(1, ok, f"verdict={rep.verdict} max relative gap={max(rel):.1e} runtime={elapsed:.1f}s")


def test_criterion_02_prices_nonnegative_on_corpus():
    mins = {name: float(cleared(name).prices.lam.min()) for name in CORPUS_NAMES}
    worst = min(mins, key=mins.get)
    ok = len(mins) >= 10 and mins[worst] >= -1e-6
    record(2, ok, f"{len(mins)} scenarios, min price {mins[worst]:.2e} ({worst})")


def test_criterion_03_balance_and_voltage_on_certified_runs():
    bal, slack = 0.0, np.inf
    for name in CORPUS_NAMES:
        out = cleared(name)
        env = out.scenario.envelope
        bal = max(bal, float(np.abs(out.injections.sum(axis=0)).max()))
        vt = out.v_tilde
        slack = min(slack, float((vt - env.lo[:, None]).min()), float((env.hi[:, None] - vt).min()))
    record(3, bal <= 1e-6 and slack >= -1e-6, f"max |sum p|={bal:.1e} kW, min voltage slack={slack:.2e} kV^2")


def test_criterion_04_complementary_slackness():
    worst = 0.0
    for name in CORPUS_NAMES:
        out = cleared(name)
        env = out.scenario.envelope
        vt = out.v_tilde
        worst = max(worst, float(np.abs(out.prices.xi_lo * (vt - env.lo[:, None])).max()),
                    float(np.abs(out.prices.xi_hi * (env.hi[:, None] - vt)).max()))
    record(4, worst <= 1e-6, f"max |xi * slack|={worst:.1e}")


def test_criterion_05_uniform_prices_iff_voltage_interior():
    ev = load_scenario("ev_example")
    wide = check_strict_implementability(widen_voltage_limits(ev, 100.0), 1e-6)
    tight = cleared("ev_example")
    lam = tight.prices.lam
    spread = float((lam.max(axis=0) - lam.min(axis=0)).max())
    ok = wide.strict and wide.spread <= 1e-5 and spread > 1e-3
    record(5, ok, f"widened: strict={wide.strict} spread={wide.spread:.1e}; "
                  f"+-5% limits: spread={spread:.2e}")


def test_criterion_06_price_decay_on_constant_supply_example():
    s = corpus_item("synthetic_example")
    a2 = check_decay_conditions(s)
    dec = decay_report(cleared("synthetic_example"), 1e-5)
    ok = (a2.passed and dec.t_bar is not None and dec.t_bar < s.T
          and dec.balance_after <= 1e-6 and dec.margin_after > 0)
    record(6, ok, f"conditions={a2.items} D={a2.witnesses['D']:g} decay index={dec.t_bar} "
                  f"post-decay balance={dec.balance_after} margin={dec.margin_after}")


def test_criterion_07_brute_force_oracle():
    t0 = time.perf_counter()
    s = oracle_pair()
    out = clear_market(s)
    orc = brute_force_welfare(s, resolution=1e-2)
    elapsed = time.perf_counter() - t0
    dw = abs(orc.welfare - out.welfare)
    da = abs(orc.shadow_price - out.prices.alpha[0])
    ok = dw <= 1e-3 and da <= 5e-2 and out.prices.alpha[0] > 0 and elapsed < 30
    record(7, ok, f"welfare gap={dw:.1e}, alpha(0)={out.prices.alpha[0]:.4f} "
                  f"vs shadow {orc.shadow_price:.4f}, runtime={elapsed:.1f}s")


def _variants(out):
    s, pr = out.scenario, out.prices
    yield "cleared", pr, out.inputs, out.injections
    alpha = pr.alpha.copy()
    alpha[0] += 0.3
    yield "alpha+0.3", LocationalPrices.from_decomposition(s.R, alpha, pr.xi_lo, pr.xi_hi), \
        out.inputs, out.injections
    P = out.injections.copy()
    P[0, 0] += 0.5
    yield "unbalanced", pr, out.inputs, P


def test_criterion_08_nash_matches_competitive_equilibrium():
    mismatches, checked = [], 0
    for name in CORPUS_NAMES:
        out = cleared(name)
        for tag, prices, U, P in _variants(out):
            ce = verify_competitive_equilibrium(out.scenario, prices, U, P, 1e-5)
            ne = verify_nash(out.scenario, prices.alpha, prices.xi_lo, prices.xi_hi, U, P, 1e-5)
            checked += 1
            if ce.passed != ne.passed:
                mismatches.append(f"{name}/{tag}")
    record(8, not mismatches, f"{checked} triples, mismatches={mismatches}")


def test_criterion_09_network_sensitivities():
    chain = RadialNetwork(2, [Line(0, 1, 0.3), Line(1, 2, 0.7)])
    star = RadialNetwork(3, [Line(0, 1, 0.5), Line(0, 2, 1.0), Line(0, 3, 0.25)])
    exact = (np.array_equal(build_sensitivity_matrices(chain).R, [[0.6, 0.6], [0.6, 2.0]])
             and np.array_equal(build_sensitivity_matrices(star).R, np.diag([1.0, 2.0, 0.5])))
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(1, 13))
        net = random_tree(rng, n, x_scale=1.0)
        p = rng.normal(size=(n, 3))
        p -= p.mean(axis=0)
        q = rng.normal(size=n)
        S = build_sensitivity_matrices(net)
        closed = 100.0 + S.R @ p + (S.X @ q)[:, None]
        v = recover_line_flows(net, p, q, 100.0).v[1:]
        worst = max(worst, float(np.max(np.abs(v - closed) / np.abs(closed))))
    record(9, exact and worst <= 1e-9, f"hand cases exact={exact}, recursion rel. error={worst:.1e}")


def test_criterion_10_repeated_clear_is_byte_identical(tmp_path, capsys):
    codes = [run(["clear", "--scenario", "ev_example", "--out", str(tmp_path / k)]) for k in "ab"]
    capsys.readouterr()
    names = ["prices.csv", "trajectories.csv", "voltages.csv", "flows.csv", "report.json",
             "scenario.json"]
    same = all((tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes() for f in names)
    rows = len((tmp_path / "a" / "prices.csv").read_text().splitlines()) - 1
    verdict = json.loads((tmp_path / "a" / "report.json").read_text())["equilibrium"]["verdict"]
    record(10, same and rows == 900 and codes == [0, 0],
           f"identical={same}, prices rows={rows}, exit codes={codes}, verdict={verdict}")
