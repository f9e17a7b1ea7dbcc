"""Prices on a long horizon with constant supply fall to zero and stay there.

Once every battery is full enough, extra energy is worth nothing and the
market can share the remaining supply equally without touching the
voltage limits.
"""
import numpy as np

from gridclear import check_decay_conditions, clear_market, detect_price_decay
from gridclear.scenario import scenario_from_dict
from gridclear.verify import decay_report

s = scenario_from_dict({"preset": "synthetic_example", "horizon": {"T": 20}})

cond = check_decay_conditions(s)
print("structural conditions")
for k, ok in cond.items.items():
    print(f"  {k:26s} {ok}")
print(f"  bound on the decay step D = {cond.witnesses['D']:.0f}")

out = clear_market(s)
t_bar = detect_price_decay(out.prices.lam)
print(f"\nprices are zero from step {t_bar} on")
print("max price per step:", np.round(out.prices.lam.max(axis=0), 4))

rep = decay_report(out)
print(f"equal-share injections after decay: balance {rep.balance_after:.1e}, "
      f"voltage margin {rep.margin_after:.3f} kV^2")
