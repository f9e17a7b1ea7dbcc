"""Clear a day-ahead EV charging market and look at the locational prices.

Nine charging stations sit on three feeders.  Each station has a small
solar supply and a battery it wants to fill by the end of the horizon.
"""
import numpy as np

from gridclear import clear_market, load_scenario, verify_competitive_equilibrium

s = load_scenario("ev_example")
out = clear_market(s)
print(f"{s.n} prosumers, {s.T} steps of {s.delta} h, welfare {out.welfare:.4f}")

# the system price alpha is shared, the rest comes from voltage congestion
lam = out.prices.lam
spread = lam.max(axis=0) - lam.min(axis=0)
t = int(spread.argmax())
print(f"\nlargest spread across nodes: {spread.max():.4f} at step {t}")
steps = range(max(t - 2, 0), min(t + 3, s.T))
print("price at each node around that step, system price alpha last")
for i in range(s.n):
    print(f"  node {i + 1}: " + " ".join(f"{lam[i, k]:8.4f}" for k in steps))
print("  alpha : " + " ".join(f"{out.prices.alpha[k]:8.4f}" for k in steps))
print(f"binding voltage multipliers: {(out.prices.xi_lo > 1e-6).sum()} low, "
      f"{(out.prices.xi_hi > 1e-6).sum()} high")

v = out.flows.v[1:]
print(f"squared voltage range {v.min():.3f} .. {v.max():.3f} kV^2 "
      f"(limits {s.v0 * s.frac_lo.min():.3f} .. {s.v0 * s.frac_hi.max():.3f})")

rep = verify_competitive_equilibrium(s, out.prices, out.inputs, out.injections)
print(f"\ncompetitive equilibrium: {rep.verdict}")
for name, c in rep.conditions.items():
    print(f"  {name:22s} {c.passed!s:5s} residual {c.residual:.1e}")

final_soc = np.array([x[-1, 0] for x in out.states])
print("\nfinal state of charge:", np.round(final_soc, 3))
