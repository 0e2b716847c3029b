"""Convert a MATPOWER/PYPOWER case dict into the JSON case format.

Example only, untested. Builds the single-period wind study used by the
acceptance suite: every generator becomes a memoryless controllable device
(x_1 = u) with its polynomial cost, loads become fixed injections, and a wind
farm is attached at ``--wind-bus``. ``--extra-load BUS:MW`` adds local demand,
which the shipped case uses to put the nominal 8-9 flow under its rating. Forecast errors are expressed in
normalized wind units, so the wind error map equals the nominal infeed.

    python scripts/matpower_to_case.py path/to/case118.py out.json
"""

from __future__ import annotations

import argparse
import importlib.util
import json
from collections import defaultdict


def load_matpower(path: str, func: str) -> dict:
    spec = importlib.util.spec_from_file_location("mpcase", path)
    mod = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(mod)
    return getattr(mod, func)()


def convert(
    ppc,
    wind_bus: int,
    wind_mw: float,
    monitored: list[str],
    limit_overrides: dict[str, float],
    extra_load: dict[int, float] | None = None,
) -> dict:
    base = float(ppc["baseMVA"])
    buses = [int(b[0]) for b in ppc["bus"]]
    slack = next(int(b[0]) for b in ppc["bus"] if int(b[1]) == 3)

    lines = []
    for br in ppc["branch"]:
        if int(br[10]) == 0:
            continue
        f, t = int(br[0]), int(br[1])
        tap = float(br[8]) or 1.0
        rate = float(br[5]) or 9900.0
        key = f"{f}-{t}"
        lines.append(
            {
                "from": f,
                "to": t,
                "x_pu": float(br[3]) * tap,
                "limit_mw": limit_overrides.get(key, rate),
            }
        )

    devices = []
    for k, (g, cost) in enumerate(zip(ppc["gen"], ppc["gencost"])):
        c2, c1, c0 = (float(v) for v in cost[4:7])
        devices.append(
            {
                "id": f"g{int(g[0])}_{k}",
                "bus": int(g[0]),
                "A": [[0.0]],
                "B": [[1.0]],
                "x0": [0.0],
                "cost": {"f_u": [c1], "H_u": [[2.0 * c2]], "c": c0},
            }
        )

    load = defaultdict(float)
    for b in ppc["bus"]:
        if float(b[2]) != 0.0:
            load[int(b[0])] += float(b[2])
    for bus, p in (extra_load or {}).items():
        load[bus] += p
    injections = [
        {"id": f"load{bus}", "bus": bus, "r": [-p], "G": [[0.0]]}
        for bus, p in sorted(load.items())
    ]
    injections.append({"id": "wind", "bus": wind_bus, "r": [wind_mw], "G": [[wind_mw]]})

    return {
        "format_version": 1,
        "name": "ieee118-wind",
        "base_mva": base,
        "buses": buses,
        "slack": slack,
        "lines": lines,
        "devices": devices,
        "injections": injections,
        "horizon": 1,
        "n_xi": 1,
        "same_step_recourse": True,
        "monitored_lines": monitored,
    }


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("case_py")
    ap.add_argument("out")
    ap.add_argument("--func", default="case118")
    ap.add_argument("--wind-bus", type=int, default=9)
    ap.add_argument("--wind-mw", type=float, default=1000.0)
    ap.add_argument("--monitor", default="8-9")
    ap.add_argument("--limit", type=float, default=950.0)
    ap.add_argument("--extra-load", action="append", default=[], metavar="BUS:MW")
    args = ap.parse_args()
    ppc = load_matpower(args.case_py, args.func)
    extra = {int(b): float(p) for b, p in (item.split(":") for item in args.extra_load)}
    case = convert(ppc, args.wind_bus, args.wind_mw, [args.monitor], {args.monitor: args.limit}, extra)
    with open(args.out, "w") as fh:
        json.dump(case, fh, indent=1)


if __name__ == "__main__":
    main()
