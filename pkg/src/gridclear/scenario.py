"""Scenario files, the two built-in example presets, and results bundles."""

from __future__ import annotations

import copy
import csv
import io
import json
import math
import os
import tempfile
from pathlib import Path

import numpy as np

from .market import Scenario
from .network import Line, RadialNetwork
from .prosumer import Boxes, LtiDynamics, ProsumerSpec, QuadraticUtility


class ScenarioFileError(ValueError):
    """A scenario document is malformed; ``field`` names the offending entry."""

    def __init__(self, message, field=None, line=None, column=None):
        where = f" ({field})" if field else ""
        if line is not None:
            where += f" at line {line}, column {column}"
        super().__init__(message + where)
        self.field = field
        self.line = line
        self.column = column


V0 = 12.35**2
FRAC_LO = 0.95**2
FRAC_HI = 1.05**2

# Stand-in for the 9-node example feeder: three chains of three nodes below
# node 0.  Labels are placed so that the synthetic preset's net supplies keep
# the equal-share injections strictly inside the voltage limits.
DEFAULT_CHAINS = ((1, 9, 2), (3, 5, 8), (4, 7, 6))


def default_lines(r: float = 0.5, x: float = 0.0) -> list[dict]:
    lines = []
    for chain in DEFAULT_CHAINS:
        prev = 0
        for node in chain:
            lines.append({"i": prev, "j": node, "r": r, "x": x})
            prev = node
    return lines


# Net supply of the EV preset.  Sinusoids with a 24 h period (48 steps of
# 0.5 h); figure-derived, approximate.  Node order 1..9.
EV_SUPPLY = (
    {"mean": 0.5, "amplitude": 1.0, "phase": 0.0},
    {"mean": 2.0, "amplitude": 1.6, "phase": 3.14},
    {"mean": 0.6, "amplitude": 1.2, "phase": 0.3},
    {"mean": 0.4, "amplitude": 0.8, "phase": 0.6},
    {"mean": -0.3, "amplitude": 0.5, "phase": 2.0},
    {"mean": 0.5, "amplitude": 1.2, "phase": 0.2},
    {"mean": -0.4, "amplitude": 0.5, "phase": 2.5},
    {"mean": 0.4, "amplitude": 0.9, "phase": 0.9},
    {"mean": 0.2, "amplitude": 0.8, "phase": 1.5},
)
EV_X0 = (0.23, 0.21, 0.2, 0.24, 0.27, 0.25, 0.3, 0.25, 0.28)
SYNTHETIC_SUPPLY = (10, 9, -7, 10, -5, -8, 11, 12, -9)


def ev_example(T: int = 100, delta: float = 0.5) -> dict:
    """EV charging: SoC dynamics ``x+ = x + 0.9 u delta``, capacity 30 kWh."""
    C, eta, umax = 30.0, 0.9, 1.8
    prosumers = []
    for k, frac in enumerate(EV_X0):
        prosumers.append({
            "dynamics": {"A": [[1.0]], "B": [[eta * delta]]},
            "boxes": {"x_lo": [0.2 * C], "x_hi": [0.85 * C], "u_lo": [-umax], "u_hi": [umax]},
            "utility": {"Qf": [[0.0]], "Rf": [[1.0]], "QT": [[1.0]], "x_ref": [0.0],
                        "xT_ref": [0.85 * C], "H": [[0.0]], "h_lin": [delta]},
            "supply": {"kind": "sinusoid", "period": 48.0, **EV_SUPPLY[k]},
            "q": 0.0,
            "x0": [frac * C],
        })
    return {
        "network": {"nodes": 9, "lines": default_lines()},
        "voltage": {"v0": V0, "frac_lo": FRAC_LO, "frac_hi": FRAC_HI},
        "horizon": {"T": T, "delta": delta},
        "prosumers": prosumers,
    }


def synthetic_example(T: int = 50, delta: float = 0.83) -> dict:
    """Three-state loads with quadratic consumption and constant supplies."""
    A = [[1.1, 0.0, 0.0], [0.0, 0.6, 0.0], [0.0, 0.0, -0.8]]
    B = [[4.0, 5.0], [2.0, 1.0], [3.0, 5.0]]
    eye3 = np.eye(3)
    eye2 = np.eye(2)
    prosumers = []
    for a in SYNTHETIC_SUPPLY:
        prosumers.append({
            "dynamics": {"A": A, "B": B},
            "boxes": {"x_lo": [-12.0] * 3, "x_hi": [12.0] * 3, "u_lo": [-10.0] * 2, "u_hi": [10.0] * 2},
            "utility": {"Qf": (0.5 * eye3).tolist(), "Rf": (0.3 * eye2).tolist(),
                        "QT": (0.5 * eye3).tolist(), "x_ref": [0.0] * 3, "xT_ref": [0.0] * 3,
                        "H": (3.0 * eye2).tolist(), "h_lin": [0.0, 0.0]},
            "supply": {"kind": "constant", "value": float(a)},
            "q": 0.0,
            "x0": [8.0, 10.0, 12.0],
        })
    return {
        "network": {"nodes": 9, "lines": default_lines()},
        "voltage": {"v0": V0, "frac_lo": FRAC_LO, "frac_hi": FRAC_HI},
        "horizon": {"T": T, "delta": delta},
        "prosumers": prosumers,
    }


PRESETS = {"ev_example": ev_example, "synthetic_example": synthetic_example}

_TOP_KEYS = {"preset", "network", "voltage", "horizon", "prosumers"}
_SECTION_KEYS = {
    "network": {"nodes", "lines"},
    "voltage": {"v0", "frac_lo", "frac_hi"},
    "horizon": {"T", "delta"},
}
_PROSUMER_KEYS = {"dynamics", "boxes", "utility", "supply", "q", "x0"}
_DYN_KEYS = {"A", "B"}
_BOX_KEYS = {"x_lo", "x_hi", "u_lo", "u_hi"}
_UTIL_KEYS = {"Qf", "Rf", "QT", "x_ref", "xT_ref", "H", "h_lin"}
_LINE_KEYS = {"i", "j", "r", "x"}


def _keys(obj, allowed, where, required=None):
    if not isinstance(obj, dict):
        raise ScenarioFileError("expected an object", where)
    extra = set(obj) - allowed
    if extra:
        raise ScenarioFileError(f"unknown key(s) {sorted(extra)}", where)
    missing = (allowed if required is None else required) - set(obj)
    if missing:
        raise ScenarioFileError(f"missing key(s) {sorted(missing)}", where)


def _matrix(value, rows, cols, where):
    try:
        a = np.array(value, dtype=float)
    except (TypeError, ValueError):
        raise ScenarioFileError("not a numeric matrix", where) from None
    if a.ndim != 2 or a.shape != (rows, cols):
        raise ScenarioFileError(f"expected a {rows}x{cols} row-major matrix, got shape {a.shape}", where)
    return a


def _vector(value, size, where):
    try:
        a = np.array(value, dtype=float)
    except (TypeError, ValueError):
        raise ScenarioFileError("not a numeric vector", where) from None
    if a.ndim != 1 or a.size != size:
        raise ScenarioFileError(f"expected a vector of length {size}", where)
    return a


def supply_series(spec, T: int, where: str = "supply") -> np.ndarray:
    """Expand a supply entry (list, sinusoid or constant) to T values."""
    if isinstance(spec, list):
        return _vector(spec, T, where)
    if not isinstance(spec, dict) or "kind" not in spec:
        raise ScenarioFileError("supply must be a list or an object with 'kind'", where)
    kind = spec["kind"]
    if kind == "constant":
        _keys(spec, {"kind", "value"}, where)
        return np.full(T, float(spec["value"]))
    if kind == "sinusoid":
        _keys(spec, {"kind", "mean", "amplitude", "period", "phase"}, where)
        t = np.arange(T)
        return spec["mean"] + spec["amplitude"] * np.sin(2 * math.pi * t / spec["period"] + spec["phase"])
    raise ScenarioFileError(f"unknown supply kind {kind!r}", where)


def _merge_preset(doc: dict) -> dict:
    name = doc["preset"]
    if name not in PRESETS:
        raise ScenarioFileError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}", "preset")
    horizon = doc.get("horizon", {})
    _keys(horizon, _SECTION_KEYS["horizon"], "horizon", required=set())
    base = PRESETS[name](**horizon)
    for key in ("network", "voltage", "prosumers"):
        if key in doc:
            if key == "voltage":
                _keys(doc[key], _SECTION_KEYS[key], key, required=set())
                base[key] = {**base[key], **doc[key]}
            else:
                base[key] = copy.deepcopy(doc[key])
    return base


def scenario_from_dict(doc: dict) -> Scenario:
    """Validate a scenario document and build the :class:`Scenario`."""
    _keys(doc, _TOP_KEYS, "<root>", required=set())
    if "preset" in doc:
        doc = _merge_preset(doc)
    for key in ("network", "voltage", "horizon", "prosumers"):
        if key not in doc:
            raise ScenarioFileError("missing section", key)
    for key, allowed in _SECTION_KEYS.items():
        _keys(doc[key], allowed, key)

    net_doc = doc["network"]
    n = net_doc["nodes"]
    if not isinstance(n, int) or n < 1:
        raise ScenarioFileError("must be a positive integer", "network.nodes")
    lines = []
    for k, ln in enumerate(net_doc["lines"]):
        where = f"network.lines[{k}]"
        _keys(ln, _LINE_KEYS, where, required={"i", "j", "r"})
        lines.append(Line(int(ln["i"]), int(ln["j"]), float(ln["r"]), float(ln.get("x", 0.0))))
    try:
        network = RadialNetwork(n, tuple(lines))
    except ValueError as exc:
        raise ScenarioFileError(str(exc), "network.lines") from None

    T = doc["horizon"]["T"]
    delta = float(doc["horizon"]["delta"])
    if not isinstance(T, int) or T < 1:
        raise ScenarioFileError("must be a positive integer", "horizon.T")
    if not delta > 0:
        raise ScenarioFileError("must be positive", "horizon.delta")

    volt = doc["voltage"]
    frac_lo = np.broadcast_to(np.asarray(volt["frac_lo"], float), (n,)).copy()
    frac_hi = np.broadcast_to(np.asarray(volt["frac_hi"], float), (n,)).copy()

    plist = doc["prosumers"]
    if not isinstance(plist, list) or not plist:
        raise ScenarioFileError("needs at least one prosumer", "prosumers")
    if len(plist) != n:
        raise ScenarioFileError(f"expected {n} prosumers (one per non-root node), got {len(plist)}",
                                "prosumers")
    prosumers = [_prosumer(p, T, f"prosumers[{k}]") for k, p in enumerate(plist)]
    try:
        return Scenario(network, tuple(prosumers), delta, float(volt["v0"]), frac_lo, frac_hi)
    except ValueError as exc:
        raise ScenarioFileError(str(exc), "<root>") from None


def _prosumer(doc, T, where) -> ProsumerSpec:
    _keys(doc, _PROSUMER_KEYS, where)
    _keys(doc["dynamics"], _DYN_KEYS, where + ".dynamics")
    A = np.array(doc["dynamics"]["A"], dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ScenarioFileError("A must be a square row-major matrix", where + ".dynamics.A")
    d = A.shape[0]
    B = np.array(doc["dynamics"]["B"], dtype=float)
    if B.ndim != 2 or B.shape[0] != d:
        raise ScenarioFileError(f"B must have {d} rows", where + ".dynamics.B")
    m = B.shape[1]
    _keys(doc["boxes"], _BOX_KEYS, where + ".boxes")
    bx = {k: _vector(doc["boxes"][k], d if k[0] == "x" else m, f"{where}.boxes.{k}")
          for k in _BOX_KEYS}
    ut_doc = doc["utility"]
    _keys(ut_doc, _UTIL_KEYS, where + ".utility")
    ut = QuadraticUtility(
        Qf=_matrix(ut_doc["Qf"], d, d, where + ".utility.Qf"),
        Rf=_matrix(ut_doc["Rf"], m, m, where + ".utility.Rf"),
        QT=_matrix(ut_doc["QT"], d, d, where + ".utility.QT"),
        x_ref=_vector(ut_doc["x_ref"], d, where + ".utility.x_ref"),
        xT_ref=_vector(ut_doc["xT_ref"], d, where + ".utility.xT_ref"),
        H=_matrix(ut_doc["H"], m, m, where + ".utility.H"),
        h_lin=_vector(ut_doc["h_lin"], m, where + ".utility.h_lin"),
    )
    try:
        return ProsumerSpec(
            LtiDynamics(A, B), Boxes(**bx), ut, supply_series(doc["supply"], T, where + ".supply"),
            float(doc["q"]), _vector(doc["x0"], d, where + ".x0"))
    except ValueError as exc:
        raise ScenarioFileError(str(exc), where) from None


def load_scenario(path) -> Scenario:
    """Load a scenario from a JSON file, or by preset name."""
    if str(path) in PRESETS and not Path(path).exists():
        return scenario_from_dict({"preset": str(path)})
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioFileError(f"invalid JSON: {exc.msg}", None, exc.lineno, exc.colno) from None
    return scenario_from_dict(doc)


def scenario_to_dict(s: Scenario) -> dict:
    """Fully explicit document (supply written as series)."""
    def arr(a):
        return np.asarray(a, float).tolist()

    return {
        "network": {"nodes": s.n,
                    "lines": [{"i": ln.i, "j": ln.j, "r": ln.r, "x": ln.x} for ln in s.network.lines]},
        "voltage": {"v0": s.v0, "frac_lo": arr(s.frac_lo), "frac_hi": arr(s.frac_hi)},
        "horizon": {"T": s.T, "delta": s.delta},
        "prosumers": [{
            "dynamics": {"A": arr(p.dynamics.A), "B": arr(p.dynamics.B)},
            "boxes": {k: arr(getattr(p.boxes, k)) for k in ("x_lo", "x_hi", "u_lo", "u_hi")},
            "utility": {k: arr(getattr(p.utility, k)) for k in ("Qf", "Rf", "QT", "x_ref", "xT_ref", "H", "h_lin")},
            "supply": arr(p.supply),
            "q": p.q,
            "x0": arr(p.x0),
        } for p in s.prosumers],
    }


def atomic_write(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_scenario(s: Scenario, path) -> None:
    atomic_write(path, json.dumps(scenario_to_dict(s), indent=1) + "\n")


def widen_voltage_limits(s: Scenario, factor: float) -> Scenario:
    """Scale the distance of both squared-voltage limits from 1 by ``factor``."""
    from dataclasses import replace
    lo = 1.0 + factor * (np.asarray(s.frac_lo) - 1.0)
    hi = 1.0 + factor * (np.asarray(s.frac_hi) - 1.0)
    return replace(s, frac_lo=lo, frac_hi=hi)


def with_horizon(s: Scenario, T: int) -> Scenario:
    """Truncate every supply series to the first ``T`` steps."""
    from dataclasses import replace
    if T > s.T:
        raise ValueError("can only shorten the horizon")
    return replace(s, prosumers=tuple(replace(p, supply=p.supply[:T]) for p in s.prosumers))


# --- results bundle -------------------------------------------------------

def fmt(value) -> str:
    """Shortest round-trip decimal text for CSV cells."""
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([c if isinstance(c, str) else fmt(c) for c in row])
    return buf.getvalue()


PRICE_HEADER = ["t", "node", "lambda", "alpha", "xi_lo", "xi_hi"]
VOLTAGE_HEADER = ["t", "node", "v_tilde", "v_lo", "v_hi"]
FLOW_HEADER = ["t", "line", "P", "Q"]


def trajectory_header(s: Scenario) -> list[str]:
    d = max(p.d for p in s.prosumers)
    m = max(p.m for p in s.prosumers)
    return ["t", "node", *[f"x{k}" for k in range(d)], *[f"u{k}" for k in range(m)], "p"]


def bundle_tables(outcome) -> dict[str, str]:
    s = outcome.scenario
    n, T = s.n, s.T
    pr = outcome.prices
    alpha = pr.alpha if pr.alpha is not None else np.full(T, np.nan)
    zeros = np.zeros((n, T))
    xi_lo = pr.xi_lo if pr.xi_lo is not None else zeros
    xi_hi = pr.xi_hi if pr.xi_hi is not None else zeros
    prices = _csv(PRICE_HEADER, ((t, i + 1, pr.lam[i, t], alpha[t], xi_lo[i, t], xi_hi[i, t])
                                 for t in range(T) for i in range(n)))
    header = trajectory_header(s)
    d = sum(h.startswith("x") for h in header)
    m = sum(h.startswith("u") for h in header)
    rows = []
    for t in range(T):
        for i in range(n):
            x = list(outcome.states[i][t]) + [""] * (d - s.prosumers[i].d)
            u = list(outcome.inputs[i][t]) + [""] * (m - s.prosumers[i].m)
            rows.append((t, i + 1, *x, *u, outcome.injections[i, t]))
    traj = _csv(header, rows)
    env = s.envelope
    vt = outcome.v_tilde
    volts = _csv(VOLTAGE_HEADER, ((t, i + 1, vt[i, t], env.lo[i], env.hi[i])
                                  for t in range(T) for i in range(n)))
    fl = outcome.flows
    flows = _csv(FLOW_HEADER, ((t, f"{a}-{b}", fl.P[e, t], fl.Q[e, t])
                               for t in range(T) for e, (a, b) in enumerate(fl.lines)))
    return {"prices.csv": prices, "trajectories.csv": traj, "voltages.csv": volts, "flows.csv": flows}


def write_bundle(out_dir, outcome, report: dict) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, text in bundle_tables(outcome).items():
        atomic_write(out / name, text)
    atomic_write(out / "report.json", _dump(report))
    write_scenario(outcome.scenario, out / "scenario.json")
    return out


def read_bundle(out_dir, s: Scenario):
    """Read prices (with decomposition), inputs and injections from a bundle.

    Returns ``(lam, alpha, xi_lo, xi_hi, inputs, injections)``; the
    decomposition entries are ``None`` when the columns are blank or NaN.
    """
    out = Path(out_dir)
    n, T = s.n, s.T
    lam = np.full((n, T), np.nan)
    alpha = np.full(T, np.nan)
    xi_lo = np.full((n, T), np.nan)
    xi_hi = np.full((n, T), np.nan)
    with open(out / "prices.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    if len(rows) != n * T:
        raise ScenarioFileError(f"prices.csv has {len(rows)} rows, expected {n * T}", "prices.csv")
    for r in rows:
        t, i = int(r["t"]), int(r["node"]) - 1
        lam[i, t] = float(r["lambda"])
        alpha[t] = float(r["alpha"]) if r["alpha"] else np.nan
        xi_lo[i, t] = float(r["xi_lo"]) if r["xi_lo"] else np.nan
        xi_hi[i, t] = float(r["xi_hi"]) if r["xi_hi"] else np.nan
    inputs = [np.zeros((T, p.m)) for p in s.prosumers]
    inj = np.zeros((n, T))
    with open(out / "trajectories.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    if len(rows) != n * T:
        raise ScenarioFileError(f"trajectories.csv has {len(rows)} rows, expected {n * T}",
                                "trajectories.csv")
    for r in rows:
        t, i = int(r["t"]), int(r["node"]) - 1
        inputs[i][t] = [float(r[f"u{k}"]) for k in range(s.prosumers[i].m)]
        inj[i, t] = float(r["p"])
    decomposed = not (np.isnan(alpha).any() or np.isnan(xi_lo).any() or np.isnan(xi_hi).any())
    if not decomposed:
        alpha = xi_lo = xi_hi = None
    return lam, alpha, xi_lo, xi_hi, inputs, inj


# --- command line ---------------------------------------------------------

EXIT_OK, EXIT_UNCERTIFIED, EXIT_ERROR = 0, 1, 2
DEFAULT_OUT = "gridclear_out"


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        if math.isnan(v):
            return None
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return v
    return obj


def _dump(obj) -> str:
    return json.dumps(_jsonable(obj), indent=1, sort_keys=True) + "\n"


def _parser():
    import argparse

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--scenario", help="scenario JSON file or preset name")
    common.add_argument("--out", help="results directory (GRIDCLEAR_OUT overrides)")
    common.add_argument("--tol", type=float, default=1e-5, help="certification tolerance")
    common.add_argument("--verbose", action="store_true", help="solver trace on stderr")
    ap = argparse.ArgumentParser(prog="gridclear", description="Microgrid market clearing")
    sub = ap.add_subparsers(dest="command", required=True)
    sub.add_parser("clear", parents=[common], help="clear the market and write a results bundle")
    sub.add_parser("verify", parents=[common], help="re-certify a results bundle")
    br = sub.add_parser("best-response", parents=[common], help="one prosumer's optimal plan")
    br.add_argument("--node", type=int, required=True, help="prosumer node, 1-based")
    sub.add_parser("strict", parents=[common], help="strict implementability check")
    sub.add_parser("decay", parents=[common], help="decaying-price assumptions and detection")
    sub.add_parser("oracle", parents=[common], help="brute-force welfare comparison")
    return ap


def _require_scenario(args) -> Scenario:
    if not args.scenario:
        raise ScenarioFileError("--scenario is required for this command", "--scenario")
    return load_scenario(args.scenario)


def _clear_report(outcome, tol):
    from .verify import check_decay_conditions, decay_report, verify_outcome

    eq = verify_outcome(outcome, tol)
    dec = decay_report(outcome, tol)
    report = {
        "equilibrium": eq.to_dict(),
        "decay_conditions": check_decay_conditions(outcome.scenario).to_dict(),
        "decay_T": dec.t_bar,
        "welfare": outcome.welfare,
        "degenerate_duals": outcome.degenerate,
        "solver": {"status": outcome.solution.status, "iterations": outcome.solution.iterations,
                   "kkt_max": outcome.solution.residuals.max()},
    }
    return eq, dec, report


def _cmd_clear(args, out):
    from .market import clear_market

    outcome = clear_market(_require_scenario(args))
    eq, _, report = _clear_report(outcome, args.tol)
    write_bundle(out, outcome, report)
    return EXIT_OK if eq.passed else EXIT_UNCERTIFIED, {"verdict": eq.verdict, "out": str(out)}


def _bundle_scenario(args, out) -> tuple[Scenario, Path]:
    if args.scenario and Path(args.scenario).is_dir():
        out = Path(args.scenario)
    path = Path(out) / "scenario.json"
    if not path.exists():
        raise ScenarioFileError(f"no results bundle in {out}", "--out")
    return load_scenario(path), Path(out)


def _cmd_verify(args, out):
    from .market import LocationalPrices
    from .verify import verify_competitive_equilibrium

    s, out = _bundle_scenario(args, out)
    lam, alpha, xi_lo, xi_hi, U, P = read_bundle(out, s)
    prices = LocationalPrices(lam, alpha, xi_lo, xi_hi)
    rep = verify_competitive_equilibrium(s, prices, U, P, args.tol)
    return EXIT_OK if rep.passed else EXIT_UNCERTIFIED, rep.to_dict()


def _cmd_best_response(args, out):
    from .market import best_response, clear_market

    s = _require_scenario(args)
    if not 1 <= args.node <= s.n:
        raise ScenarioFileError(f"node must lie in 1..{s.n}", "--node")
    prices_csv = Path(out) / "prices.csv"
    if prices_csv.exists():
        lam = read_bundle(out, s)[0]
        source = str(prices_csv)
    else:
        lam = clear_market(s, degeneracy_check=False).prices.lam
        source = "cleared"
    i = args.node - 1
    spec = s.prosumers[i]
    br = best_response(spec, lam[i], s.delta)
    header = ["t", *[f"u{k}" for k in range(spec.m)], "p", "lambda"]
    rows = [(t, *br.inputs[t], br.injections[t], lam[i, t]) for t in range(s.T)]
    atomic_write(Path(out) / f"best_response_node{args.node}.csv", _csv(header, rows))
    return EXIT_OK, {"node": args.node, "payoff": br.payoff, "prices": source}


def _cmd_strict(args, out):
    from .verify import check_strict_implementability

    s = _require_scenario(args)
    rep = check_strict_implementability(s, args.tol)
    res = {"strict": rep.strict, "min_margin": rep.min_margin, "price_spread": rep.spread,
           "relaxed_welfare": rep.relaxed.welfare}
    atomic_write(Path(out) / "strict.json", _dump(res))
    ok = not rep.strict or rep.spread <= 10 * args.tol
    return EXIT_OK if ok else EXIT_UNCERTIFIED, res


def _cmd_decay(args, out):
    from .market import clear_market

    outcome = clear_market(_require_scenario(args))
    eq, dec, report = _clear_report(outcome, args.tol)
    report["decay"] = {"balance_after": dec.balance_after, "margin_after": dec.margin_after,
                       "initial_state_feasibility": "asserted by the user, not checked"}
    write_bundle(out, outcome, report)
    res = {"decay_T": dec.t_bar, "decay_conditions": report["decay_conditions"]["passed"]}
    return EXIT_OK if eq.passed else EXIT_UNCERTIFIED, res


def _cmd_oracle(args, out):
    from .market import clear_market
    from .verify import brute_force_welfare

    s = _require_scenario(args)
    outcome = clear_market(s, degeneracy_check=False)
    orc = brute_force_welfare(s)
    alpha0 = None if outcome.prices.alpha is None else float(outcome.prices.alpha[0])
    res = {"welfare": outcome.welfare, "oracle_welfare": orc.welfare,
           "welfare_gap": abs(outcome.welfare - orc.welfare), "alpha0": alpha0,
           "oracle_shadow_price": orc.shadow_price, "grid_points": orc.points}
    atomic_write(Path(out) / "oracle.json", _dump(res))
    return EXIT_OK if res["welfare_gap"] <= 1e-3 else EXIT_UNCERTIFIED, res


_COMMANDS = {"clear": _cmd_clear, "verify": _cmd_verify, "best-response": _cmd_best_response,
             "strict": _cmd_strict, "decay": _cmd_decay, "oracle": _cmd_oracle}


def run(argv=None) -> int:
    """Run one subcommand; returns the process exit code.

    0: certified, 1: certification failed, 2: error (a JSON record goes to
    stderr).
    """
    import logging
    import sys

    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        stream=sys.stderr, format="%(name)s: %(message)s")
    out = Path(os.environ.get("GRIDCLEAR_OUT") or args.out or DEFAULT_OUT)
    try:
        code, result = _COMMANDS[args.command](args, out)
    except Exception as exc:  # noqa: BLE001 - every failure becomes an error record
        record = {"error": type(exc).__name__, "message": str(exc), "command": args.command}
        for key in ("field", "line", "column"):
            if getattr(exc, key, None) is not None:
                record[key] = getattr(exc, key)
        sys.stderr.write(_dump(record))
        return EXIT_ERROR
    sys.stdout.write(_dump(result))
    return code


def main() -> None:
    raise SystemExit(run())
