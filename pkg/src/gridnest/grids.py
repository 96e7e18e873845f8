"""Power-grid model builders and the grid-description file format.

Two builders translate a parsed grid description into a ``ConvexProgram``:

* ``build_ded`` — multi-period dispatch: quadratic generation cost, one
  system-wide power balance per period, generator output limits, ramp limits
  between consecutive periods, spinning-reserve capacity/requirement rows, and
  distribution-factor line limits.
* ``build_opf_radial`` — single-period radial power flow in squared
  voltage/current variables: per-bus active/reactive balances, per-line
  voltage-drop identities, and the convex relaxation of the flow product,
  ``P² + Q² ≤ v·l``, as a cone row.

Interchange with neighbouring grids enters each model as a *virtual
generator*: a boundary port contributes injection (or withdrawal) variables
that either sit in the program's upper block (pinned by the parent) or its
lower block (chosen for the children).  ``build_hierarchy`` assembles the
whole tree and the selector matrices between blocks.

Voltage coupling is expressed in the squared magnitude ``v = V²`` on both
sides of a port; file bounds ``v_min``/``v_max`` use the same convention.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .coordinator import HierarchyNode
from .program import ConstraintKind, ConvexProgram, QuadraticConstraint

__all__ = [
    "Bus",
    "BoundaryPort",
    "ConvexityViolation",
    "DedLayout",
    "Generator",
    "GridBuildWarning",
    "GridFile",
    "GridFileError",
    "GridSpec",
    "HierarchyEntry",
    "Line",
    "Load",
    "NonRadialTopology",
    "OpfLayout",
    "attach_boundary",
    "build_ded",
    "build_hierarchy",
    "build_opf_radial",
    "parse_grid_data",
    "parse_grid_file",
    "serialize_grid_file",
]

FORMAT_VERSION = 1
OPF_QUANTITIES = ("p", "q", "v")


class GridFileError(ValueError):
    """A grid description failed validation; the message carries the field path."""


class ConvexityViolation(GridFileError):
    """A cost curve bends the wrong way (negative quadratic coefficient)."""


class NonRadialTopology(GridFileError):
    """The network is not a tree (or uses the meshed AC form, which is not built)."""


class GridBuildWarning(UserWarning):
    """Non-fatal modelling concern detected while building a program."""


# ---------------------------------------------------------------------------
# data model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Bus:
    id: str
    g_shunt: float = 0.0
    b_shunt: float = 0.0
    v_min: float | None = None  # squared-magnitude bounds
    v_max: float | None = None


@dataclass(frozen=True)
class Generator:
    id: str
    bus: str
    a0: float = 0.0
    a1: float = 0.0
    a2: float = 0.0
    p_min: float = 0.0
    p_max: float = 0.0
    q_min: float = 0.0
    q_max: float = 0.0
    ramp_up: float = float("inf")
    ramp_down: float = float("inf")
    reserve_cost: float = 0.0


@dataclass(frozen=True)
class Load:
    id: str
    bus: str
    p: tuple[float, ...]
    q: tuple[float, ...] = (0.0,)


@dataclass(frozen=True)
class Line:
    id: str
    from_bus: str
    to_bus: str
    r: float = 0.0
    x: float = 0.0
    capacity: float | None = None  # flow bound used by the dispatch model
    l_max: float | None = None  # squared-current bound used by the radial model
    ptdf: dict[str, float] = field(default_factory=dict, hash=False, compare=True)

    def __post_init__(self) -> None:  # frozen + dict field: freeze a copy
        object.__setattr__(self, "ptdf", dict(self.ptdf))


@dataclass(frozen=True)
class BoundaryPort:
    id: str
    bus: str
    role: str  # "upper" (pinned by the parent) or "lower" (offered to children)
    quantities: tuple[str, ...]
    capacity: float | None = None


@dataclass(frozen=True)
class GridSpec:
    id: str
    model: str  # "ded" or "radial-opf"
    buses: tuple[Bus, ...]
    generators: tuple[Generator, ...]
    loads: tuple[Load, ...]
    lines: tuple[Line, ...]
    boundary_ports: tuple[BoundaryPort, ...] = ()
    periods: int = 1
    delta_t: float = 1.0
    reserve_up: tuple[float, ...] | None = None
    reserve_down: tuple[float, ...] | None = None
    # price per unit of squared line current: keeps the cone relaxation tight
    # (spilling surplus into fictitious losses is never free) and the exchange
    # value function strictly shaped instead of flat
    loss_cost: float = 0.0

    def bus(self, bus_id: str) -> Bus:
        for b in self.buses:
            if b.id == bus_id:
                return b
        raise GridFileError(f"grid {self.id}: unknown bus {bus_id!r}")

    def port(self, port_id: str) -> BoundaryPort:
        for p in self.boundary_ports:
            if p.id == port_id:
                return p
        raise GridFileError(f"grid {self.id}: unknown boundary port {port_id!r}")

    def ports(self, role: str) -> tuple[BoundaryPort, ...]:
        return tuple(p for p in self.boundary_ports if p.role == role)

    def port_dim(self, port: BoundaryPort) -> int:
        return self.periods if self.model == "ded" else len(port.quantities)


@dataclass(frozen=True)
class HierarchyEntry:
    grid: str
    coupling: tuple[tuple[str, str], ...] = ()  # (parent_port, child_port) pairs
    children: tuple["HierarchyEntry", ...] = ()


@dataclass(frozen=True)
class GridFile:
    format_version: int
    units: str
    grids: dict[str, GridSpec]
    hierarchy: HierarchyEntry | None = None


# ---------------------------------------------------------------------------
# parsing / serialization
# ---------------------------------------------------------------------------


def _need(obj: dict, key: str, where: str):
    if key not in obj:
        raise GridFileError(f"{where}: missing required field {key!r}")
    return obj[key]


def _number(obj: dict, key: str, where: str, default: float | None = None) -> float:
    if key not in obj:
        if default is None:
            raise GridFileError(f"{where}: missing required field {key!r}")
        return default
    val = obj[key]
    if isinstance(val, bool) or not isinstance(val, (int, float)):
        raise GridFileError(f"{where}.{key}: expected a number, got {val!r}")
    return float(val)


def _series(obj: dict, key: str, where: str, periods: int,
            default: float | None = None) -> tuple[float, ...]:
    if key not in obj:
        if default is None:
            raise GridFileError(f"{where}: missing required field {key!r}")
        return (default,) * periods
    val = obj[key]
    if isinstance(val, (int, float)) and not isinstance(val, bool):
        return (float(val),) * periods
    if isinstance(val, list):
        if len(val) != periods:
            raise GridFileError(
                f"{where}.{key}: series length {len(val)} != periods {periods}")
        if any(isinstance(v, bool) or not isinstance(v, (int, float)) for v in val):
            raise GridFileError(f"{where}.{key}: series entries must be numbers")
        return tuple(float(v) for v in val)
    raise GridFileError(f"{where}.{key}: expected a number or list, got {type(val).__name__}")


def _check_unique(ids: list[str], what: str, where: str) -> None:
    seen: set[str] = set()
    for i in ids:
        if i in seen:
            raise GridFileError(f"{where}: duplicate {what} id {i!r}")
        seen.add(i)


def _parse_grid(gid: str, g: dict) -> GridSpec:
    where = f"grids.{gid}"
    model = _need(g, "model", where)
    if model == "meshed":
        raise NonRadialTopology(
            f"{where}.model: the meshed AC formulation is nonconvex and is not "
            "built; use 'ded' or 'radial-opf'")
    if model not in ("ded", "radial-opf"):
        raise GridFileError(f"{where}.model: unknown model {model!r}")
    periods = int(_number(g, "periods", where, default=1.0))
    if model == "radial-opf" and periods != 1:
        raise GridFileError(f"{where}.periods: the radial flow model is single-period")
    if periods < 1:
        raise GridFileError(f"{where}.periods: must be >= 1")
    delta_t = _number(g, "delta_t", where, default=1.0)

    buses = []
    for i, b in enumerate(g.get("buses", [])):
        bw = f"{where}.buses[{i}]"
        v_min = b.get("v_min")
        v_max = b.get("v_max")
        if v_min is not None and v_max is not None and v_min > v_max:
            raise GridFileError(f"{bw}: v_min {v_min} > v_max {v_max}")
        buses.append(Bus(id=str(_need(b, "id", bw)),
                         g_shunt=_number(b, "g_shunt", bw, 0.0),
                         b_shunt=_number(b, "b_shunt", bw, 0.0),
                         v_min=None if v_min is None else float(v_min),
                         v_max=None if v_max is None else float(v_max)))
    _check_unique([b.id for b in buses], "bus", where)
    bus_ids = {b.id for b in buses}

    def check_bus(ref: str, ctx: str) -> str:
        if ref not in bus_ids:
            raise GridFileError(f"{ctx}: references unknown bus {ref!r}")
        return ref

    gens = []
    for i, gn in enumerate(g.get("generators", [])):
        gw = f"{where}.generators[{i}]"
        a2 = _number(gn, "a2", gw, 0.0)
        gen_id = str(_need(gn, "id", gw))
        if a2 < 0:
            raise ConvexityViolation(
                f"{gw}: generator {gen_id!r} has a2 = {a2} < 0 (concave cost)")
        p_min = _number(gn, "p_min", gw, 0.0)
        p_max = _number(gn, "p_max", gw)
        if p_min > p_max:
            raise GridFileError(f"{gw}: p_min {p_min} > p_max {p_max}")
        q_min = _number(gn, "q_min", gw, 0.0)
        q_max = _number(gn, "q_max", gw, 0.0)
        if q_min > q_max:
            raise GridFileError(f"{gw}: q_min {q_min} > q_max {q_max}")
        gens.append(Generator(
            id=gen_id, bus=check_bus(str(_need(gn, "bus", gw)), gw),
            a0=_number(gn, "a0", gw, 0.0), a1=_number(gn, "a1", gw, 0.0), a2=a2,
            p_min=p_min, p_max=p_max, q_min=q_min, q_max=q_max,
            ramp_up=_number(gn, "ramp_up", gw, float("inf")),
            ramp_down=_number(gn, "ramp_down", gw, float("inf")),
            reserve_cost=_number(gn, "reserve_cost", gw, 0.0)))
    _check_unique([gn.id for gn in gens], "generator", where)

    loads = []
    for i, ld in enumerate(g.get("loads", [])):
        lw = f"{where}.loads[{i}]"
        loads.append(Load(
            id=str(_need(ld, "id", lw)), bus=check_bus(str(_need(ld, "bus", lw)), lw),
            p=_series(ld, "p", lw, periods),
            q=_series(ld, "q", lw, periods, default=0.0)))
    _check_unique([ld.id for ld in loads], "load", where)

    lines = []
    for i, ln in enumerate(g.get("lines", [])):
        lw = f"{where}.lines[{i}]"
        r = _number(ln, "r", lw, 0.0)
        if r < 0:
            raise GridFileError(f"{lw}: negative resistance {r}")
        ptdf = ln.get("ptdf", {})
        if not isinstance(ptdf, dict):
            raise GridFileError(f"{lw}.ptdf: expected a bus->factor mapping")
        for bref in ptdf:
            check_bus(str(bref), f"{lw}.ptdf")
        lines.append(Line(
            id=str(_need(ln, "id", lw)),
            from_bus=check_bus(str(_need(ln, "from", lw)), lw),
            to_bus=check_bus(str(_need(ln, "to", lw)), lw),
            r=r, x=_number(ln, "x", lw, 0.0),
            capacity=None if "capacity" not in ln else _number(ln, "capacity", lw),
            l_max=None if "l_max" not in ln else _number(ln, "l_max", lw),
            ptdf={str(k): float(v) for k, v in ptdf.items()}))
    _check_unique([ln.id for ln in lines], "line", where)

    ports = []
    for i, pt in enumerate(g.get("boundary_ports", [])):
        pw = f"{where}.boundary_ports[{i}]"
        role = str(_need(pt, "role", pw))
        if role not in ("upper", "lower"):
            raise GridFileError(f"{pw}.role: expected 'upper' or 'lower', got {role!r}")
        quantities = tuple(str(q) for q in pt.get(
            "quantities", ["p"] if model == "ded" else list(OPF_QUANTITIES)))
        allowed = ("p",) if model == "ded" else OPF_QUANTITIES
        if tuple(quantities) != allowed:
            raise GridFileError(
                f"{pw}.quantities: the {model} model couples {list(allowed)}, "
                f"got {list(quantities)}")
        ports.append(BoundaryPort(
            id=str(_need(pt, "id", pw)), bus=check_bus(str(_need(pt, "bus", pw)), pw),
            role=role, quantities=quantities,
            capacity=None if "capacity" not in pt else _number(pt, "capacity", pw)))
    _check_unique([p.id for p in ports], "boundary port", where)

    reserves = g.get("reserves", {})
    if reserves and model != "ded":
        raise GridFileError(f"{where}.reserves: only the dispatch model carries reserves")
    res_up = _series(reserves, "up", f"{where}.reserves", periods, default=0.0) \
        if reserves else None
    res_down = _series(reserves, "down", f"{where}.reserves", periods, default=0.0) \
        if reserves else None
    loss_cost = _number(g, "loss_cost", where, default=0.0)
    if loss_cost and model != "radial-opf":
        raise GridFileError(f"{where}.loss_cost: only the radial flow model prices losses")
    if loss_cost < 0:
        raise GridFileError(f"{where}.loss_cost: must be nonnegative")

    return GridSpec(
        id=gid, model=model, buses=tuple(buses), generators=tuple(gens),
        loads=tuple(loads), lines=tuple(lines), boundary_ports=tuple(ports),
        periods=periods, delta_t=delta_t, reserve_up=res_up, reserve_down=res_down,
        loss_cost=loss_cost)


def _parse_hierarchy(h: dict, grids: dict[str, GridSpec], where: str,
                     used: set[str]) -> HierarchyEntry:
    gid = str(_need(h, "grid", where))
    if gid not in grids:
        raise GridFileError(f"{where}.grid: unknown grid {gid!r}")
    if gid in used:
        raise GridFileError(f"{where}.grid: grid {gid!r} appears twice in the hierarchy")
    used.add(gid)
    coupling = []
    for i, c in enumerate(h.get("coupling", [])):
        cw = f"{where}.coupling[{i}]"
        coupling.append((str(_need(c, "parent_port", cw)), str(_need(c, "child_port", cw))))
    children = tuple(
        _parse_hierarchy(ch, grids, f"{where}.children[{i}]", used)
        for i, ch in enumerate(h.get("children", [])))
    return HierarchyEntry(grid=gid, coupling=tuple(coupling), children=children)


def _validate_coupling(parent: GridSpec, child: GridSpec,
                       entry: HierarchyEntry, where: str) -> None:
    if not entry.coupling:
        raise GridFileError(f"{where}: child grid {child.id!r} declares no coupling")
    child_ports = []
    for parent_port, child_port in entry.coupling:
        pp = parent.port(parent_port)
        cp = child.port(child_port)
        if pp.role != "lower":
            raise GridFileError(
                f"{where}: parent port {parent_port!r} has role {pp.role!r}; "
                "couplings consume 'lower' ports")
        if cp.role != "upper":
            raise GridFileError(
                f"{where}: child port {child_port!r} has role {cp.role!r}; "
                "couplings feed 'upper' ports")
        if parent.model != child.model:
            raise GridFileError(
                f"{where}: cannot couple a {parent.model} grid to a "
                f"{child.model} grid")
        if parent.model == "ded" and parent.periods != child.periods:
            raise GridFileError(
                f"{where}: period counts differ ({parent.periods} vs {child.periods})")
        if pp.quantities != cp.quantities:
            raise GridFileError(
                f"{where}: coupled quantities differ "
                f"({list(pp.quantities)} vs {list(cp.quantities)})")
        child_ports.append(child_port)
    missing = [p.id for p in child.ports("upper") if p.id not in child_ports]
    if missing:
        raise GridFileError(
            f"{where}: child grid {child.id!r} leaves upper ports {missing} unpinned")


def parse_grid_data(data: dict) -> GridFile:
    if not isinstance(data, dict):
        raise GridFileError("top level: expected an object")
    version = _need(data, "format_version", "top level")
    if version != FORMAT_VERSION:
        raise GridFileError(
            f"top level.format_version: expected {FORMAT_VERSION}, got {version!r}")
    units = str(_need(data, "units", "top level"))
    raw_grids = _need(data, "grids", "top level")
    if not isinstance(raw_grids, dict) or not raw_grids:
        raise GridFileError("top level.grids: expected a non-empty object")
    grids = {str(gid): _parse_grid(str(gid), g) for gid, g in raw_grids.items()}

    hierarchy = None
    if "hierarchy" in data and data["hierarchy"] is not None:
        used: set[str] = set()
        hierarchy = _parse_hierarchy(data["hierarchy"], grids, "hierarchy", used)
        root = grids[hierarchy.grid]
        if root.ports("upper"):
            raise GridFileError(
                f"hierarchy: root grid {root.id!r} must not declare upper ports")

        def walk(entry: HierarchyEntry, where: str) -> None:
            parent = grids[entry.grid]
            consumed: set[str] = set()
            for i, ch in enumerate(entry.children):
                cw = f"{where}.children[{i}]"
                _validate_coupling(parent, grids[ch.grid], ch, cw)
                for parent_port, _ in ch.coupling:
                    if parent_port in consumed:
                        raise GridFileError(
                            f"{cw}: parent port {parent_port!r} is already coupled")
                    consumed.add(parent_port)
                walk(ch, cw)
            unused = [p.id for p in parent.ports("lower") if p.id not in consumed]
            if unused:
                raise GridFileError(
                    f"{where}: grid {parent.id!r} leaves lower ports {unused} uncoupled")
            for ch in entry.children:
                if not ch.children and grids[ch.grid].ports("lower"):
                    raise GridFileError(
                        f"{where}: leaf grid {ch.grid!r} declares lower ports")

        walk(hierarchy, "hierarchy")
    return GridFile(format_version=int(version), units=units, grids=grids,
                    hierarchy=hierarchy)


def parse_grid_file(path: str | Path) -> GridFile:
    text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as err:
        raise GridFileError(f"{path}: not valid JSON ({err})") from err
    try:
        return parse_grid_data(data)
    except GridFileError as err:
        raise type(err)(f"{path}: {err}") from err


def serialize_grid_file(gf: GridFile) -> dict:
    """Canonical plain-data form; ``parse_grid_data`` inverts it exactly."""

    def ser_grid(g: GridSpec) -> dict:
        out: dict = {"model": g.model}
        if g.model == "ded":
            out["periods"] = g.periods
            out["delta_t"] = g.delta_t
        out["buses"] = [
            {k: v for k, v in (("id", b.id), ("g_shunt", b.g_shunt),
                               ("b_shunt", b.b_shunt), ("v_min", b.v_min),
                               ("v_max", b.v_max)) if v is not None}
            for b in g.buses]
        out["generators"] = [
            {"id": gn.id, "bus": gn.bus, "a0": gn.a0, "a1": gn.a1, "a2": gn.a2,
             "p_min": gn.p_min, "p_max": gn.p_max, "q_min": gn.q_min,
             "q_max": gn.q_max,
             **({} if gn.ramp_up == float("inf") else {"ramp_up": gn.ramp_up}),
             **({} if gn.ramp_down == float("inf") else {"ramp_down": gn.ramp_down}),
             **({} if gn.reserve_cost == 0.0 else {"reserve_cost": gn.reserve_cost})}
            for gn in g.generators]
        out["loads"] = [
            {"id": ld.id, "bus": ld.bus, "p": list(ld.p), "q": list(ld.q)}
            for ld in g.loads]
        out["lines"] = [
            {"id": ln.id, "from": ln.from_bus, "to": ln.to_bus, "r": ln.r, "x": ln.x,
             **({} if ln.capacity is None else {"capacity": ln.capacity}),
             **({} if ln.l_max is None else {"l_max": ln.l_max}),
             **({} if not ln.ptdf else {"ptdf": dict(sorted(ln.ptdf.items()))})}
            for ln in g.lines]
        if g.boundary_ports:
            out["boundary_ports"] = [
                {"id": p.id, "bus": p.bus, "role": p.role,
                 "quantities": list(p.quantities),
                 **({} if p.capacity is None else {"capacity": p.capacity})}
                for p in g.boundary_ports]
        if g.reserve_up is not None:
            out["reserves"] = {"up": list(g.reserve_up), "down": list(g.reserve_down)}
        if g.loss_cost:
            out["loss_cost"] = g.loss_cost
        return out

    def ser_entry(e: HierarchyEntry) -> dict:
        out: dict = {"grid": e.grid}
        if e.coupling:
            out["coupling"] = [
                {"parent_port": pp, "child_port": cp} for pp, cp in e.coupling]
        if e.children:
            out["children"] = [ser_entry(c) for c in e.children]
        return out

    data: dict = {
        "format_version": gf.format_version,
        "units": gf.units,
        "grids": {gid: ser_grid(g) for gid, g in sorted(gf.grids.items())},
    }
    if gf.hierarchy is not None:
        data["hierarchy"] = ser_entry(gf.hierarchy)
    return data


# ---------------------------------------------------------------------------
# dispatch model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DedLayout:
    """Index map for the dispatch program.

    Internal block: output, then up-reserve, then down-reserve, each
    generator-major over periods.  Upper block: one period series per upper
    port; lower block: one per lower port.
    """

    spec: GridSpec

    @property
    def T(self) -> int:
        return self.spec.periods

    @property
    def n_internal(self) -> int:
        return 3 * len(self.spec.generators) * self.T

    def pg(self, gen: int, t: int) -> int:
        return gen * self.T + t

    def pgu(self, gen: int, t: int) -> int:
        return len(self.spec.generators) * self.T + gen * self.T + t

    def pgd(self, gen: int, t: int) -> int:
        return 2 * len(self.spec.generators) * self.T + gen * self.T + t

    def upper(self, port: int, t: int) -> int:
        return self.n_internal + port * self.T + t

    def lower(self, port: int, t: int) -> int:
        return (self.n_internal + len(self.spec.ports("upper")) * self.T
                + port * self.T + t)


def build_ded(spec: GridSpec) -> ConvexProgram:
    """Multi-period dispatch program; boundary ports become virtual generators
    (upper: injections pinned by the parent; lower: withdrawals offered to
    children)."""
    if spec.model != "ded":
        raise GridFileError(f"grid {spec.id}: build_ded requires model 'ded'")
    lay = DedLayout(spec)
    T, dT = spec.periods, spec.delta_t
    gens = spec.generators
    up_ports = spec.ports("upper")
    lo_ports = spec.ports("lower")
    n = lay.n_internal + (len(up_ports) + len(lo_ports)) * T

    c0 = 0.0
    c1 = np.zeros(n)
    C2 = np.zeros((n, n))
    for gi, gen in enumerate(gens):
        c0 += gen.a0 * T
        for t in range(T):
            c1[lay.pg(gi, t)] += gen.a1
            C2[lay.pg(gi, t), lay.pg(gi, t)] += 2.0 * gen.a2
            c1[lay.pgu(gi, t)] += gen.reserve_cost
            c1[lay.pgd(gi, t)] += gen.reserve_cost

    cons: list[QuadraticConstraint] = []
    pairs: list[tuple[int, int]] = []

    def pair(q: np.ndarray, r: float, name: str) -> None:
        cons.append(QuadraticConstraint(q=q, r=r, name=f"{name}+"))
        cons.append(QuadraticConstraint(q=-q, r=-r, name=f"{name}-"))
        pairs.append((len(cons) - 2, len(cons) - 1))

    def row(q: np.ndarray, r: float, name: str) -> None:
        cons.append(QuadraticConstraint(q=q, r=r, name=name))

    demand = np.zeros(T)
    for ld in spec.loads:
        demand += np.asarray(ld.p)

    # period balance: generation plus imports covers demand plus exports
    for t in range(T):
        q = np.zeros(n)
        for gi in range(len(gens)):
            q[lay.pg(gi, t)] = 1.0
        for pi in range(len(up_ports)):
            q[lay.upper(pi, t)] = 1.0
        for pi in range(len(lo_ports)):
            q[lay.lower(pi, t)] = -1.0
        pair(q, -demand[t], f"balance[{t}]")

    for gi, gen in enumerate(gens):
        for t in range(T):
            q = np.zeros(n); q[lay.pg(gi, t)] = 1.0
            row(q, -gen.p_max, f"p-max[{gen.id},{t}]")
            q = np.zeros(n); q[lay.pg(gi, t)] = -1.0
            row(q, gen.p_min, f"p-min[{gen.id},{t}]")
        for t in range(1, T):
            if np.isfinite(gen.ramp_up):
                q = np.zeros(n)
                q[lay.pg(gi, t)] = 1.0
                q[lay.pg(gi, t - 1)] = -1.0
                row(q, -gen.ramp_up * dT, f"ramp-up[{gen.id},{t}]")
            if np.isfinite(gen.ramp_down):
                q = np.zeros(n)
                q[lay.pg(gi, t)] = -1.0
                q[lay.pg(gi, t - 1)] = 1.0
                row(q, -gen.ramp_down * dT, f"ramp-down[{gen.id},{t}]")
        for t in range(T):
            q = np.zeros(n); q[lay.pgu(gi, t)] = -1.0
            row(q, 0.0, f"res-up-nn[{gen.id},{t}]")
            if np.isfinite(gen.ramp_up):
                q = np.zeros(n); q[lay.pgu(gi, t)] = 1.0
                row(q, -gen.ramp_up * dT, f"res-up-cap[{gen.id},{t}]")
            q = np.zeros(n); q[lay.pgu(gi, t)] = 1.0; q[lay.pg(gi, t)] = 1.0
            row(q, -gen.p_max, f"res-up-room[{gen.id},{t}]")
            q = np.zeros(n); q[lay.pgd(gi, t)] = -1.0
            row(q, 0.0, f"res-dn-nn[{gen.id},{t}]")
            if np.isfinite(gen.ramp_down):
                q = np.zeros(n); q[lay.pgd(gi, t)] = 1.0
                row(q, -gen.ramp_down * dT, f"res-dn-cap[{gen.id},{t}]")
            q = np.zeros(n); q[lay.pgd(gi, t)] = 1.0; q[lay.pg(gi, t)] = -1.0
            row(q, gen.p_min, f"res-dn-room[{gen.id},{t}]")

    res_up = spec.reserve_up or (0.0,) * T
    res_down = spec.reserve_down or (0.0,) * T
    for t in range(T):
        if res_up[t] > 0.0:
            q = np.zeros(n)
            for gi in range(len(gens)):
                q[lay.pgu(gi, t)] = -1.0
            row(q, res_up[t], f"res-up-req[{t}]")
        if res_down[t] > 0.0:
            q = np.zeros(n)
            for gi in range(len(gens)):
                q[lay.pgd(gi, t)] = -1.0
            row(q, res_down[t], f"res-dn-req[{t}]")

    # line flows from injection distribution factors
    for ln in spec.lines:
        if ln.capacity is None:
            continue
        for t in range(T):
            q = np.zeros(n)
            for gi, gen in enumerate(gens):
                q[lay.pg(gi, t)] = ln.ptdf.get(gen.bus, 0.0)
            for pi, pt in enumerate(up_ports):
                q[lay.upper(pi, t)] = ln.ptdf.get(pt.bus, 0.0)
            for pi, pt in enumerate(lo_ports):
                q[lay.lower(pi, t)] = -ln.ptdf.get(pt.bus, 0.0)
            shed = -sum(ln.ptdf.get(ld.bus, 0.0) * ld.p[t] for ld in spec.loads)
            row(q, shed - ln.capacity, f"line-max[{ln.id},{t}]")
            row(-q, -shed - ln.capacity, f"line-min[{ln.id},{t}]")

    for pi, pt in enumerate(up_ports):
        if pt.capacity is None:
            continue
        for t in range(T):
            q = np.zeros(n); q[lay.upper(pi, t)] = 1.0
            row(q, -pt.capacity, f"import-max[{pt.id},{t}]")
            q = np.zeros(n); q[lay.upper(pi, t)] = -1.0
            row(q, -pt.capacity, f"import-min[{pt.id},{t}]")
    for pi, pt in enumerate(lo_ports):
        if pt.capacity is None:
            continue
        for t in range(T):
            q = np.zeros(n); q[lay.lower(pi, t)] = 1.0
            row(q, -pt.capacity, f"export-max[{pt.id},{t}]")
            q = np.zeros(n); q[lay.lower(pi, t)] = -1.0
            row(q, -pt.capacity, f"export-min[{pt.id},{t}]")

    cap = sum(g.p_max for g in gens) + sum(
        p.capacity if p.capacity is not None else float("inf") for p in up_ports)
    worst = float(demand.max(initial=0.0))
    if cap < worst:
        warnings.warn(
            f"grid {spec.id}: peak demand {worst} exceeds local capacity {cap}; "
            "the program may be infeasible without imports", GridBuildWarning,
            stacklevel=2)

    return ConvexProgram(
        n_internal=lay.n_internal, n_upper=len(up_ports) * T,
        n_lower=len(lo_ports) * T, c0=c0, c1=c1, C2=C2,
        constraints=cons, equality_pairs=pairs)


# ---------------------------------------------------------------------------
# radial flow model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OpfLayout:
    """Index map for the radial flow program.

    Internal block: generator P, generator Q, bus v (squared magnitude), line
    P, line Q, line l (squared current).  Upper block: (p, q, v) per upper
    port; lower block: the same per lower port.
    """

    spec: GridSpec

    @property
    def nG(self) -> int:
        return len(self.spec.generators)

    @property
    def nB(self) -> int:
        return len(self.spec.buses)

    @property
    def nL(self) -> int:
        return len(self.spec.lines)

    @property
    def n_internal(self) -> int:
        return 2 * self.nG + self.nB + 3 * self.nL

    def pg(self, gen: int) -> int:
        return gen

    def qg(self, gen: int) -> int:
        return self.nG + gen

    def v(self, bus: int) -> int:
        return 2 * self.nG + bus

    def p_line(self, line: int) -> int:
        return 2 * self.nG + self.nB + line

    def q_line(self, line: int) -> int:
        return 2 * self.nG + self.nB + self.nL + line

    def l_line(self, line: int) -> int:
        return 2 * self.nG + self.nB + 2 * self.nL + line

    def upper(self, port: int, comp: int) -> int:
        return self.n_internal + 3 * port + comp

    def lower(self, port: int, comp: int) -> int:
        return self.n_internal + 3 * len(self.spec.ports("upper")) + 3 * port + comp

    def bus_index(self, bus_id: str) -> int:
        for i, b in enumerate(self.spec.buses):
            if b.id == bus_id:
                return i
        raise GridFileError(f"grid {self.spec.id}: unknown bus {bus_id!r}")


def _check_radial(spec: GridSpec) -> None:
    parent: dict[str, str] = {b.id: b.id for b in spec.buses}

    def find(a: str) -> str:
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for ln in spec.lines:
        ra, rb = find(ln.from_bus), find(ln.to_bus)
        if ra == rb:
            raise NonRadialTopology(
                f"grid {spec.id}: line {ln.id!r} closes a loop; the radial flow "
                "model needs a tree")
        parent[ra] = rb
    roots = {find(b.id) for b in spec.buses}
    if len(roots) > 1:
        raise NonRadialTopology(
            f"grid {spec.id}: network splits into {len(roots)} disconnected parts")


def build_opf_radial(spec: GridSpec) -> ConvexProgram:
    """Single-period radial flow program in squared voltage/current variables;
    the flow product is relaxed to the cone row P² + Q² ≤ v·l per line."""
    if spec.model != "radial-opf":
        raise GridFileError(
            f"grid {spec.id}: build_opf_radial requires model 'radial-opf'")
    _check_radial(spec)
    lay = OpfLayout(spec)
    up_ports = spec.ports("upper")
    lo_ports = spec.ports("lower")
    anchored = bool(up_ports) or any(
        b.v_min is not None and b.v_max is not None and b.v_min == b.v_max
        for b in spec.buses)
    if not anchored:
        raise GridFileError(
            f"grid {spec.id}: no voltage anchor — fix one bus (v_min == v_max) "
            "or declare an upper port")
    n = lay.n_internal + 3 * (len(up_ports) + len(lo_ports))

    c0 = 0.0
    c1 = np.zeros(n)
    C2 = np.zeros((n, n))
    for gi, gen in enumerate(spec.generators):
        c0 += gen.a0
        c1[lay.pg(gi)] += gen.a1
        C2[lay.pg(gi), lay.pg(gi)] += 2.0 * gen.a2
    for li in range(lay.nL):
        c1[lay.l_line(li)] += spec.loss_cost

    cons: list[QuadraticConstraint] = []
    pairs: list[tuple[int, int]] = []

    def pair(q: np.ndarray, r: float, name: str) -> None:
        cons.append(QuadraticConstraint(q=q, r=r, name=f"{name}+"))
        cons.append(QuadraticConstraint(q=-q, r=-r, name=f"{name}-"))
        pairs.append((len(cons) - 2, len(cons) - 1))

    def row(q: np.ndarray, r: float, name: str) -> None:
        cons.append(QuadraticConstraint(q=q, r=r, name=name))

    for bi, bus in enumerate(spec.buses):
        qp = np.zeros(n)
        qq = np.zeros(n)
        p_dem = q_dem = 0.0
        for gi, gen in enumerate(spec.generators):
            if gen.bus == bus.id:
                qp[lay.pg(gi)] += 1.0
                qq[lay.qg(gi)] += 1.0
        for ld in spec.loads:
            if ld.bus == bus.id:
                p_dem += ld.p[0]
                q_dem += ld.q[0]
        for li, ln in enumerate(spec.lines):
            if ln.to_bus == bus.id:  # arriving flow net of the line loss
                qp[lay.p_line(li)] += 1.0
                qp[lay.l_line(li)] -= ln.r
                qq[lay.q_line(li)] += 1.0
                qq[lay.l_line(li)] -= ln.x
            if ln.from_bus == bus.id:
                qp[lay.p_line(li)] -= 1.0
                qq[lay.q_line(li)] -= 1.0
        qp[lay.v(bi)] -= bus.g_shunt
        qq[lay.v(bi)] += bus.b_shunt
        for pi, pt in enumerate(up_ports):
            if pt.bus == bus.id:
                qp[lay.upper(pi, 0)] += 1.0
                qq[lay.upper(pi, 1)] += 1.0
        for pi, pt in enumerate(lo_ports):
            if pt.bus == bus.id:
                qp[lay.lower(pi, 0)] -= 1.0
                qq[lay.lower(pi, 1)] -= 1.0
        pair(qp, -p_dem, f"p-balance[{bus.id}]")
        pair(qq, -q_dem, f"q-balance[{bus.id}]")

    for li, ln in enumerate(spec.lines):
        fi = lay.bus_index(ln.from_bus)
        ti = lay.bus_index(ln.to_bus)
        q = np.zeros(n)
        q[lay.v(ti)] = 1.0
        q[lay.v(fi)] = -1.0
        q[lay.p_line(li)] = 2.0 * ln.r
        q[lay.q_line(li)] = 2.0 * ln.x
        q[lay.l_line(li)] = -(ln.r ** 2 + ln.x ** 2)
        pair(q, 0.0, f"v-drop[{ln.id}]")

        Q = np.zeros((n, n))
        Q[lay.p_line(li), lay.p_line(li)] = 2.0
        Q[lay.q_line(li), lay.q_line(li)] = 2.0
        Q[lay.v(fi), lay.l_line(li)] = -1.0
        Q[lay.l_line(li), lay.v(fi)] = -1.0
        cons.append(QuadraticConstraint(
            q=np.zeros(n), r=0.0, Q=Q, kind=ConstraintKind.CONE,
            name=f"cone[{ln.id}]"))

        q = np.zeros(n); q[lay.l_line(li)] = -1.0
        row(q, 0.0, f"l-nn[{ln.id}]")
        if ln.l_max is not None:
            q = np.zeros(n); q[lay.l_line(li)] = 1.0
            row(q, -ln.l_max, f"l-max[{ln.id}]")

    for bi, bus in enumerate(spec.buses):
        if bus.v_max is not None:
            q = np.zeros(n); q[lay.v(bi)] = 1.0
            row(q, -bus.v_max, f"v-max[{bus.id}]")
        if bus.v_min is not None:
            q = np.zeros(n); q[lay.v(bi)] = -1.0
            row(q, bus.v_min, f"v-min[{bus.id}]")

    for gi, gen in enumerate(spec.generators):
        q = np.zeros(n); q[lay.pg(gi)] = 1.0
        row(q, -gen.p_max, f"p-max[{gen.id}]")
        q = np.zeros(n); q[lay.pg(gi)] = -1.0
        row(q, gen.p_min, f"p-min[{gen.id}]")
        q = np.zeros(n); q[lay.qg(gi)] = 1.0
        row(q, -gen.q_max, f"q-max[{gen.id}]")
        q = np.zeros(n); q[lay.qg(gi)] = -1.0
        row(q, gen.q_min, f"q-min[{gen.id}]")

    # a port's voltage coordinate is the squared magnitude at its bus
    for pi, pt in enumerate(up_ports):
        q = np.zeros(n)
        q[lay.upper(pi, 2)] = 1.0
        q[lay.v(lay.bus_index(pt.bus))] = -1.0
        pair(q, 0.0, f"port-v[{pt.id}]")
        if pt.capacity is not None:
            for comp, tag in ((0, "p"), (1, "q")):
                q = np.zeros(n); q[lay.upper(pi, comp)] = 1.0
                row(q, -pt.capacity, f"import-{tag}-max[{pt.id}]")
                q = np.zeros(n); q[lay.upper(pi, comp)] = -1.0
                row(q, -pt.capacity, f"import-{tag}-min[{pt.id}]")
    for pi, pt in enumerate(lo_ports):
        q = np.zeros(n)
        q[lay.lower(pi, 2)] = 1.0
        q[lay.v(lay.bus_index(pt.bus))] = -1.0
        pair(q, 0.0, f"port-v[{pt.id}]")
        if pt.capacity is not None:
            for comp, tag in ((0, "p"), (1, "q")):
                q = np.zeros(n); q[lay.lower(pi, comp)] = 1.0
                row(q, -pt.capacity, f"export-{tag}-max[{pt.id}]")
                q = np.zeros(n); q[lay.lower(pi, comp)] = -1.0
                row(q, -pt.capacity, f"export-{tag}-min[{pt.id}]")

    return ConvexProgram(
        n_internal=lay.n_internal, n_upper=3 * len(up_ports),
        n_lower=3 * len(lo_ports), c0=c0, c1=c1, C2=C2,
        constraints=cons, equality_pairs=pairs)


# ---------------------------------------------------------------------------
# hierarchy assembly
# ---------------------------------------------------------------------------


def attach_boundary(parent: GridSpec, child: GridSpec,
                    coupling: tuple[tuple[str, str], ...]) -> np.ndarray:
    """Selector matrix: child upper-block coordinates out of the parent's
    lower block, following the declared port pairings."""
    lo_ports = parent.ports("lower")
    up_ports = child.ports("upper")
    lo_offset: dict[str, int] = {}
    off = 0
    for p in lo_ports:
        lo_offset[p.id] = off
        off += parent.port_dim(p)
    up_offset: dict[str, int] = {}
    off = 0
    for p in up_ports:
        up_offset[p.id] = off
        off += child.port_dim(p)
    n_rows = off
    n_cols = sum(parent.port_dim(p) for p in lo_ports)
    I = np.zeros((n_rows, n_cols))
    for parent_port, child_port in coupling:
        if parent_port not in lo_offset:
            raise GridFileError(
                f"coupling: {parent.id!r} has no lower port {parent_port!r}")
        if child_port not in up_offset:
            raise GridFileError(
                f"coupling: {child.id!r} has no upper port {child_port!r}")
        dim = child.port_dim(child.port(child_port))
        for k in range(dim):
            I[up_offset[child_port] + k, lo_offset[parent_port] + k] = 1.0
    return I


def _build_program(spec: GridSpec) -> ConvexProgram:
    return build_ded(spec) if spec.model == "ded" else build_opf_radial(spec)


def build_hierarchy(gf: GridFile) -> HierarchyNode:
    """Instantiate the declared tree: one program per grid, selector matrices
    on every edge.  Node labels are the grid ids."""
    if gf.hierarchy is None:
        raise GridFileError("the file declares no hierarchy")

    counters: dict[int, int] = {}

    def make(entry: HierarchyEntry, level: int,
             parent: GridSpec | None, coupling) -> HierarchyNode:
        spec = gf.grids[entry.grid]
        counters[level] = counters.get(level, 0) + 1
        mapping = None
        if parent is not None:
            mapping = attach_boundary(parent, spec, coupling)
        node = HierarchyNode(
            level=level, index=counters[level], problem=_build_program(spec),
            mapping=mapping, name=spec.id)
        node.children = [
            make(ch, level + 1, spec, ch.coupling) for ch in entry.children]
        return node

    root = make(gf.hierarchy, 1, None, ())
    root.validate()
    return root
