"""Synthetic grid-description fixtures.

Each function returns the plain-data form of a grid file; ``write_fixtures``
renders them to JSON.  The instances are small but deliberately shaped:
cheap generation sits at the top of the tree and expensive generation at the
bottom, so coordinated interchange strictly beats isolated operation, while
every grid can still cover its own load with boundaries frozen at zero.
"""
from __future__ import annotations

import json
from pathlib import Path

__all__ = ["ded_trilevel_data", "opf_trilevel_data", "write_fixtures"]


def _daily(base: float, swing: float, periods: int = 24) -> list[float]:
    import math
    return [round(base * (1.0 + swing * math.sin(2.0 * math.pi * (t - 8) / periods)), 3)
            for t in range(periods)]


def ded_trilevel_data() -> dict:
    """Three-level dispatch tree: one transmission grid, two subtransmission
    grids, four distribution grids; 24 periods, one shared interchange series
    per edge."""
    T = 24

    def leaf(name: str, a1: float, load: float) -> dict:
        # the feed tie is sized to what the grid can actually absorb: imports
        # beyond the load trough would force generation below zero, so a
        # larger tie would only add dead range
        return {
            "model": "ded", "periods": T, "delta_t": 1.0,
            "buses": [{"id": f"{name}-b1"}],
            "generators": [{
                "id": f"{name}-g1", "bus": f"{name}-b1", "a0": 1.0, "a1": a1,
                "a2": 0.1, "p_min": 0.0, "p_max": 12.0,
                "ramp_up": 4.0, "ramp_down": 4.0, "reserve_cost": 0.1}],
            "loads": [{"id": f"{name}-d1", "bus": f"{name}-b1",
                       "p": _daily(load, 0.25), "q": 0.0}],
            "lines": [],
            "boundary_ports": [{
                "id": "feed", "bus": f"{name}-b1", "role": "upper",
                "quantities": ["p"], "capacity": round(0.7 * load, 2)}],
            "reserves": {"up": [0.5] * T, "down": [0.5] * T},
        }

    def mid(name: str, a1: float, load: float,
            ties: tuple[float, float]) -> dict:
        return {
            "model": "ded", "periods": T, "delta_t": 1.0,
            "buses": [{"id": f"{name}-b1"}, {"id": f"{name}-b2"}],
            "generators": [{
                "id": f"{name}-g1", "bus": f"{name}-b1", "a0": 2.0, "a1": a1,
                "a2": 0.05, "p_min": 0.0, "p_max": 30.0,
                "ramp_up": 6.0, "ramp_down": 6.0, "reserve_cost": 0.08}],
            "loads": [{"id": f"{name}-d1", "bus": f"{name}-b2",
                       "p": _daily(load, 0.3), "q": 0.0}],
            "lines": [{"id": f"{name}-l1", "from": f"{name}-b1",
                       "to": f"{name}-b2", "r": 0.01, "x": 0.03,
                       "capacity": 40.0,
                       "ptdf": {f"{name}-b1": 0.9, f"{name}-b2": -0.9}}],
            "boundary_ports": [
                {"id": "feed", "bus": f"{name}-b1", "role": "upper",
                 "quantities": ["p"], "capacity": 15.0},
                {"id": "serve-1", "bus": f"{name}-b2", "role": "lower",
                 "quantities": ["p"], "capacity": ties[0]},
                {"id": "serve-2", "bus": f"{name}-b2", "role": "lower",
                 "quantities": ["p"], "capacity": ties[1]}],
            "reserves": {"up": [1.0] * T, "down": [1.0] * T},
        }

    tx = {
        "model": "ded", "periods": T, "delta_t": 1.0,
        "buses": [{"id": "tx-b1"}, {"id": "tx-b2"}, {"id": "tx-b3"}],
        "generators": [
            {"id": "tx-g1", "bus": "tx-b1", "a0": 5.0, "a1": 5.0, "a2": 0.02,
             "p_min": 0.0, "p_max": 60.0, "ramp_up": 10.0, "ramp_down": 10.0,
             "reserve_cost": 0.05},
            {"id": "tx-g2", "bus": "tx-b2", "a0": 4.0, "a1": 8.0, "a2": 0.03,
             "p_min": 0.0, "p_max": 40.0, "ramp_up": 8.0, "ramp_down": 8.0,
             "reserve_cost": 0.06}],
        "loads": [{"id": "tx-d1", "bus": "tx-b3", "p": _daily(20.0, 0.3),
                   "q": 0.0}],
        "lines": [
            {"id": "tx-l1", "from": "tx-b1", "to": "tx-b3", "r": 0.01,
             "x": 0.05, "capacity": 80.0,
             "ptdf": {"tx-b1": 0.6, "tx-b2": 0.2, "tx-b3": -0.5}},
            {"id": "tx-l2", "from": "tx-b2", "to": "tx-b3", "r": 0.01,
             "x": 0.05, "capacity": 70.0,
             "ptdf": {"tx-b1": 0.4, "tx-b2": 0.8, "tx-b3": -0.5}}],
        "boundary_ports": [
            {"id": "to-sa", "bus": "tx-b2", "role": "lower",
             "quantities": ["p"], "capacity": 15.0},
            {"id": "to-sb", "bus": "tx-b3", "role": "lower",
             "quantities": ["p"], "capacity": 15.0}],
        "reserves": {"up": [1.0] * T, "down": [1.0] * T},
    }

    return {
        "format_version": 1,
        "units": "per-unit",
        "grids": {
            "tx": tx,
            "sa": mid("sa", 25.0, 10.0, ties=(4.2, 3.5)),
            "sb": mid("sb", 28.0, 9.0, ties=(4.55, 3.15)),
            "da1": leaf("da1", 60.0, 6.0),
            "da2": leaf("da2", 70.0, 5.0),
            "db1": leaf("db1", 65.0, 6.5),
            "db2": leaf("db2", 80.0, 4.5),
        },
        "hierarchy": {
            "grid": "tx",
            "children": [
                {"grid": "sa",
                 "coupling": [{"parent_port": "to-sa", "child_port": "feed"}],
                 "children": [
                     {"grid": "da1",
                      "coupling": [{"parent_port": "serve-1", "child_port": "feed"}]},
                     {"grid": "da2",
                      "coupling": [{"parent_port": "serve-2", "child_port": "feed"}]}]},
                {"grid": "sb",
                 "coupling": [{"parent_port": "to-sb", "child_port": "feed"}],
                 "children": [
                     {"grid": "db1",
                      "coupling": [{"parent_port": "serve-1", "child_port": "feed"}]},
                     {"grid": "db2",
                      "coupling": [{"parent_port": "serve-2", "child_port": "feed"}]}]},
            ],
        },
    }


def opf_trilevel_data() -> dict:
    """Three radial feeders in a chain, coupled through (P, Q, v) ports."""
    vb = {"v_min": 0.81, "v_max": 1.21}
    return {
        "format_version": 1,
        "units": "per-unit",
        "grids": {
            "hv": {
                "model": "radial-opf",
                "loss_cost": 1.0,
                "buses": [
                    {"id": "hv-b1", "v_min": 1.0, "v_max": 1.0},
                    {"id": "hv-b2", "b_shunt": 0.05, **vb},
                    {"id": "hv-b3", **vb}],
                "generators": [{
                    "id": "hv-g1", "bus": "hv-b1", "a0": 2.0, "a1": 10.0,
                    "a2": 0.05, "p_min": 0.0, "p_max": 5.0,
                    "q_min": -3.0, "q_max": 3.0}],
                "loads": [
                    {"id": "hv-d1", "bus": "hv-b2", "p": 0.6, "q": 0.2},
                    {"id": "hv-d2", "bus": "hv-b3", "p": 0.1, "q": 0.05}],
                "lines": [
                    {"id": "hv-l1", "from": "hv-b1", "to": "hv-b2",
                     "r": 0.01, "x": 0.02, "l_max": 9.0},
                    {"id": "hv-l2", "from": "hv-b1", "to": "hv-b3",
                     "r": 0.01, "x": 0.02, "l_max": 9.0}],
                "boundary_ports": [{
                    "id": "to-mv", "bus": "hv-b3", "role": "lower",
                    "quantities": ["p", "q", "v"], "capacity": 3.0}],
            },
            "mv": {
                "model": "radial-opf",
                "loss_cost": 1.0,
                "buses": [
                    {"id": "mv-b1", **vb},
                    {"id": "mv-b2", **vb},
                    {"id": "mv-b3", **vb}],
                "generators": [{
                    "id": "mv-g1", "bus": "mv-b2", "a0": 1.0, "a1": 35.0,
                    "a2": 0.08, "p_min": 0.0, "p_max": 1.5,
                    "q_min": -1.0, "q_max": 1.0}],
                "loads": [{"id": "mv-d1", "bus": "mv-b3", "p": 0.5, "q": 0.2}],
                "lines": [
                    {"id": "mv-l1", "from": "mv-b1", "to": "mv-b2",
                     "r": 0.02, "x": 0.04, "l_max": 4.0},
                    {"id": "mv-l2", "from": "mv-b2", "to": "mv-b3",
                     "r": 0.02, "x": 0.04, "l_max": 4.0}],
                "boundary_ports": [
                    {"id": "from-hv", "bus": "mv-b1", "role": "upper",
                     "quantities": ["p", "q", "v"], "capacity": 3.0},
                    {"id": "to-lv", "bus": "mv-b3", "role": "lower",
                     "quantities": ["p", "q", "v"], "capacity": 2.0}],
            },
            "lv": {
                "model": "radial-opf",
                "loss_cost": 1.0,
                "buses": [
                    {"id": "lv-b1", **vb},
                    {"id": "lv-b2", **vb},
                    {"id": "lv-b3", **vb}],
                "generators": [{
                    "id": "lv-g1", "bus": "lv-b3", "a0": 0.5, "a1": 80.0,
                    "a2": 0.1, "p_min": 0.0, "p_max": 1.0,
                    "q_min": -0.5, "q_max": 0.5}],
                "loads": [{"id": "lv-d1", "bus": "lv-b2", "p": 0.3, "q": 0.1}],
                "lines": [
                    {"id": "lv-l1", "from": "lv-b1", "to": "lv-b2",
                     "r": 0.02, "x": 0.04, "l_max": 4.0},
                    {"id": "lv-l2", "from": "lv-b2", "to": "lv-b3",
                     "r": 0.02, "x": 0.04, "l_max": 4.0}],
                "boundary_ports": [{
                    "id": "from-mv", "bus": "lv-b1", "role": "upper",
                    "quantities": ["p", "q", "v"], "capacity": 2.0}],
            },
        },
        "hierarchy": {
            "grid": "hv",
            "children": [{
                "grid": "mv",
                "coupling": [{"parent_port": "to-mv", "child_port": "from-hv"}],
                "children": [{
                    "grid": "lv",
                    "coupling": [{"parent_port": "to-lv", "child_port": "from-mv"}],
                }],
            }],
        },
    }


def write_fixtures(directory: str | Path) -> list[Path]:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for name, data in (("ded_trilevel", ded_trilevel_data()),
                       ("opf_trilevel", opf_trilevel_data())):
        path = out / f"{name}.json"
        path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
        written.append(path)
    return written


if __name__ == "__main__":
    import sys
    target = sys.argv[1] if len(sys.argv) > 1 else "fixtures"
    for p in write_fixtures(target):
        print(p)
