"""Compare the market optimum against an exhaustive grid search.

Two small batteries, two steps.  The grid search knows nothing about
duals, yet its welfare and its finite-difference shadow price of the
balance constraint should match the market's.
"""
import time

from gridclear import brute_force_welfare, clear_market
from gridclear.market import Scenario
from gridclear.network import Line, RadialNetwork
from gridclear.prosumer import Boxes, LtiDynamics, ProsumerSpec, QuadraticUtility

delta = 0.5


def battery(supply, x0, weight):
    return ProsumerSpec(LtiDynamics([[1.0]], [[0.9 * delta]]), Boxes([0.0], [4.0], [-1.0], [1.0]),
                        QuadraticUtility([[0.0]], [[1.0]], [[weight]], [0.0], [3.0], [[0.0]], [delta]),
                        supply, 0.0, [x0])


net = RadialNetwork(2, [Line(0, 1, 0.5), Line(1, 2, 0.5)])
s = Scenario(net, (battery([0.1, 0.05], 1.0, 1.0), battery([0.05, 0.1], 2.0, 2.0)),
             delta, 12.35**2, 0.0, 2.0)

out = clear_market(s)
t0 = time.perf_counter()
orc = brute_force_welfare(s, resolution=1e-2)
print(f"market welfare  {out.welfare:.8f}")
print(f"grid welfare    {orc.welfare:.8f}  ({orc.points} points, {time.perf_counter() - t0:.1f} s)")
print(f"system price at step 0: market {out.prices.alpha[0]:.4f}, "
      f"finite difference {orc.shadow_price:.4f}")
