"""Domain model for hybrid AC/DC network cases.

A :class:`NetworkCase` holds the complete steady-state description of a
combined AC grid, DC grid and the converter stations that couple them.
Cases are immutable after construction; every operation that "modifies"
a case (scenario application, unit conversion) returns a new object.

Case and scenario files use the plain-text formats documented in
``docs/FORMAT.md``.  Internally everything is stored in per-unit on the
case's MVA base.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

CASE_FORMAT_VERSION = 1
SCENARIO_FORMAT_VERSION = 1

DEFAULT_DC_V_MIN = 0.9
DEFAULT_DC_V_MAX = 1.1
DEFAULT_K_MIN = 0.001
DEFAULT_K_MAX = 0.5


class CaseError(Exception):
    """Base class for case-file problems."""


class CaseFormatError(CaseError):
    """Syntactic problem in a case or scenario file."""

    def __init__(self, path, line_no, message):
        self.path = str(path)
        self.line_no = line_no
        super().__init__(f"{path}:{line_no}: {message}")


class CaseValidationError(CaseError):
    """A structural invariant of the case is violated."""


class ScenarioError(CaseError):
    """Scenario references an element absent from the case."""


# ---------------------------------------------------------------------------
# element types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AcBus:
    id: int
    voltage_setpoint: float = 1.0
    angle: float = 0.0
    v_min: float = 0.9
    v_max: float = 1.1
    angle_min: float = -0.6
    angle_max: float = 0.6
    load_p: float = 0.0
    load_q: float = 0.0
    shunt_g: float = 0.0
    shunt_b: float = 0.0

    def check(self):
        if not self.v_min <= self.v_max:
            raise CaseValidationError(f"ac bus {self.id}: v_min > v_max")
        if self.v_min <= 0.0:
            raise CaseValidationError(f"ac bus {self.id}: v_min must be positive")
        if not self.angle_min <= 0.0 <= self.angle_max:
            raise CaseValidationError(
                f"ac bus {self.id}: angle bounds must contain 0")


@dataclass(frozen=True)
class Generator:
    bus: int
    p_min: float
    p_max: float
    q_min: float
    q_max: float
    cost_alpha: float
    cost_beta: float
    cost_gamma: float

    def check(self, index):
        if self.p_min > self.p_max:
            raise CaseValidationError(f"generator {index}: p_min > p_max")
        if self.q_min > self.q_max:
            raise CaseValidationError(f"generator {index}: q_min > q_max")
        if self.cost_alpha < 0.0:
            raise CaseValidationError(
                f"generator {index}: quadratic cost coefficient must be >= 0")

    def cost(self, p):
        return self.cost_alpha * p * p + self.cost_beta * p + self.cost_gamma


@dataclass(frozen=True)
class AcBranch:
    from_bus: int
    to_bus: int
    resistance: float
    reactance: float
    charging_b: float = 0.0
    tap_ratio: float = 1.0

    def check(self):
        if self.from_bus == self.to_bus:
            raise CaseValidationError(
                f"ac branch {self.from_bus}-{self.to_bus}: self loop")
        if self.tap_ratio <= 0.0:
            raise CaseValidationError(
                f"ac branch {self.from_bus}-{self.to_bus}: tap ratio must be > 0")
        if self.resistance == 0.0 and self.reactance == 0.0:
            raise CaseValidationError(
                f"ac branch {self.from_bus}-{self.to_bus}: zero series impedance")

    @property
    def series_g(self):
        z2 = self.resistance ** 2 + self.reactance ** 2
        return self.resistance / z2

    @property
    def series_b(self):
        z2 = self.resistance ** 2 + self.reactance ** 2
        return -self.reactance / z2


@dataclass(frozen=True)
class DcBus:
    id: int
    v_nominal: float = 1.0
    v_min: float = DEFAULT_DC_V_MIN
    v_max: float = DEFAULT_DC_V_MAX

    def check(self):
        if not self.v_min <= self.v_nominal <= self.v_max:
            raise CaseValidationError(
                f"dc bus {self.id}: v_nominal outside [v_min, v_max]")


@dataclass(frozen=True)
class DcBranch:
    from_bus: int
    to_bus: int
    resistance: float

    def check(self):
        if self.resistance <= 0.0:
            raise CaseValidationError(
                f"dc branch {self.from_bus}-{self.to_bus}: resistance must be > 0")
        if self.from_bus == self.to_bus:
            raise CaseValidationError(
                f"dc branch {self.from_bus}-{self.to_bus}: self loop")

    @property
    def admittance(self):
        return 1.0 / self.resistance


class ControlMode:
    """Converter outer-loop control modes."""

    P_CONTROL = "p"
    V_CONTROL = "v"
    DROOP = "droop"

    ALL = (P_CONTROL, V_CONTROL, DROOP)


@dataclass(frozen=True)
class ConverterControl:
    mode: str = ControlMode.DROOP
    p_ref: float = 0.0
    u_ref: float = 1.0
    k_droop: float = 0.1
    k_min: float = DEFAULT_K_MIN
    k_max: float = DEFAULT_K_MAX

    def check(self, conv_id):
        if self.mode not in ControlMode.ALL:
            raise CaseValidationError(
                f"converter {conv_id}: unknown control mode {self.mode!r}")
        if self.mode == ControlMode.DROOP:
            if self.k_min <= 0.0:
                raise CaseValidationError(
                    f"converter {conv_id}: k_min must be > 0")
            if not self.k_min <= self.k_droop <= self.k_max:
                raise CaseValidationError(
                    f"converter {conv_id}: k_droop {self.k_droop} outside "
                    f"[{self.k_min}, {self.k_max}]")


@dataclass(frozen=True)
class LossCoefficients:
    """No-load / linear / quadratic loss terms of one flow direction."""

    a: float
    b: float
    c: float

    def check(self, conv_id, label):
        if self.a < 0.0 or self.b < 0.0 or self.c < 0.0:
            raise CaseValidationError(
                f"converter {conv_id}: {label} loss coefficients must be >= 0")


@dataclass(frozen=True)
class ConverterStation:
    id: int
    ac_bus: int
    dc_bus: int
    loss_rectifier: LossCoefficients
    loss_inverter: LossCoefficients
    p_dc_min: float
    p_dc_max: float
    i_max: float
    control: ConverterControl = field(default_factory=ConverterControl)

    def check(self):
        self.loss_rectifier.check(self.id, "rectifier")
        self.loss_inverter.check(self.id, "inverter")
        if self.p_dc_min > self.p_dc_max:
            raise CaseValidationError(
                f"converter {self.id}: p_dc_min > p_dc_max")
        if self.i_max <= 0.0:
            raise CaseValidationError(
                f"converter {self.id}: i_max must be > 0")
        self.control.check(self.id)


@dataclass(frozen=True)
class NetworkCase:
    name: str
    s_nominal: float
    v_dc_nominal: float
    ac_buses: tuple[AcBus, ...]
    generators: tuple[Generator, ...]
    ac_branches: tuple[AcBranch, ...]
    dc_buses: tuple[DcBus, ...] = ()
    dc_branches: tuple[DcBranch, ...] = ()
    converters: tuple[ConverterStation, ...] = ()

    # -- lookups ---------------------------------------------------------

    def ac_bus_index(self, bus_id):
        try:
            return self._ac_index()[bus_id]
        except KeyError:
            raise CaseValidationError(f"unknown ac bus id {bus_id}") from None

    def dc_bus_index(self, bus_id):
        try:
            return self._dc_index()[bus_id]
        except KeyError:
            raise CaseValidationError(f"unknown dc bus id {bus_id}") from None

    def converter(self, conv_id):
        for conv in self.converters:
            if conv.id == conv_id:
                return conv
        raise CaseValidationError(f"unknown converter id {conv_id}")

    def _ac_index(self):
        return {bus.id: i for i, bus in enumerate(self.ac_buses)}

    def _dc_index(self):
        return {bus.id: i for i, bus in enumerate(self.dc_buses)}

    # -- validation ------------------------------------------------------

    def validate(self):
        """Check all structural invariants; return a list of warnings.

        Raises :class:`CaseValidationError` on a hard violation.  Soft
        findings (isolated AC buses, converter-free leaf DC buses) are
        returned as warning strings.
        """
        if not self.ac_buses:
            raise CaseValidationError("case has no ac buses")
        if not self.generators:
            raise CaseValidationError("case has no generators")

        ac_ids = [b.id for b in self.ac_buses]
        if len(set(ac_ids)) != len(ac_ids):
            raise CaseValidationError("duplicate ac bus ids")
        dc_ids = [b.id for b in self.dc_buses]
        if len(set(dc_ids)) != len(dc_ids):
            raise CaseValidationError("duplicate dc bus ids")
        conv_ids = [c.id for c in self.converters]
        if len(set(conv_ids)) != len(conv_ids):
            raise CaseValidationError("duplicate converter ids")

        for bus in self.ac_buses:
            bus.check()
        for i, gen in enumerate(self.generators, start=1):
            gen.check(i)
            if gen.bus not in set(ac_ids):
                raise CaseValidationError(
                    f"generator {i} references unknown ac bus {gen.bus}")
        for br in self.ac_branches:
            br.check()
            for end in (br.from_bus, br.to_bus):
                if end not in set(ac_ids):
                    raise CaseValidationError(
                        f"ac branch {br.from_bus}-{br.to_bus} references "
                        f"unknown ac bus {end}")
        for bus in self.dc_buses:
            bus.check()
        for br in self.dc_branches:
            br.check()
            for end in (br.from_bus, br.to_bus):
                if end not in set(dc_ids):
                    raise CaseValidationError(
                        f"dc branch {br.from_bus}-{br.to_bus} references "
                        f"unknown dc bus {end}")
        for conv in self.converters:
            conv.check()
            if conv.ac_bus not in set(ac_ids):
                raise CaseValidationError(
                    f"converter {conv.id} references unknown ac bus {conv.ac_bus}")
            if conv.dc_bus not in set(dc_ids):
                raise CaseValidationError(
                    f"converter {conv.id} references unknown dc bus {conv.dc_bus}")
        dc_bus_converters = {}
        for conv in self.converters:
            dc_bus_converters.setdefault(conv.dc_bus, []).append(conv.id)

        warnings = []
        warnings.extend(self._check_connectivity(
            ac_ids, [(b.from_bus, b.to_bus) for b in self.ac_branches], "ac"))
        warnings.extend(self._check_connectivity(
            dc_ids, [(b.from_bus, b.to_bus) for b in self.dc_branches], "dc"))

        dc_degree = {i: 0 for i in dc_ids}
        for br in self.dc_branches:
            dc_degree[br.from_bus] += 1
            dc_degree[br.to_bus] += 1
        for bus_id, deg in dc_degree.items():
            if deg == 1 and bus_id not in dc_bus_converters:
                warnings.append(
                    f"dc bus {bus_id} is a leaf with no converter injection")
        return warnings

    @staticmethod
    def _check_connectivity(ids, edges, label):
        degree = {i: 0 for i in ids}
        adjacency = {i: [] for i in ids}
        for a, b in edges:
            degree[a] += 1
            degree[b] += 1
            adjacency[a].append(b)
            adjacency[b].append(a)
        active = [i for i in ids if degree[i] > 0]
        warnings = [f"{label} bus {i} is isolated (no branches)"
                    for i in ids if degree[i] == 0 and len(ids) > 1]
        if not active:
            return warnings
        seen = {active[0]}
        stack = [active[0]]
        while stack:
            node = stack.pop()
            for nxt in adjacency[node]:
                if nxt not in seen:
                    seen.add(nxt)
                    stack.append(nxt)
        missing = [i for i in active if i not in seen]
        if missing:
            raise CaseValidationError(
                f"{label} grid is not connected: buses {missing} unreachable")
        return warnings


# ---------------------------------------------------------------------------
# scenarios
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Scenario:
    """Contingency: generators (1-based index) and converters (id) to remove."""

    name: str = "normal"
    generator_outages: frozenset[int] = frozenset()
    converter_outages: frozenset[int] = frozenset()

    @property
    def is_empty(self):
        return not self.generator_outages and not self.converter_outages


def apply_scenario(case: NetworkCase, scenario: Scenario) -> NetworkCase:
    """Return a new case with the scenario's outaged elements removed.

    Generator outages are 1-based indices into ``case.generators``;
    converter outages are converter ids.  The AC and DC buses of a
    removed converter stay in the network (the DC bus simply loses its
    injection).  The input case is left untouched.
    """
    n_gen = len(case.generators)
    for idx in sorted(scenario.generator_outages):
        if not 1 <= idx <= n_gen:
            raise ScenarioError(
                f"scenario {scenario.name!r}: unknown generator index {idx}")
    conv_ids = {c.id for c in case.converters}
    for cid in sorted(scenario.converter_outages):
        if cid not in conv_ids:
            raise ScenarioError(
                f"scenario {scenario.name!r}: unknown converter id {cid}")

    generators = tuple(g for i, g in enumerate(case.generators, start=1)
                       if i not in scenario.generator_outages)
    converters = tuple(c for c in case.converters
                       if c.id not in scenario.converter_outages)
    if not generators:
        raise ScenarioError(
            f"scenario {scenario.name!r} removes every generator")
    return replace(case, generators=generators, converters=converters)


# ---------------------------------------------------------------------------
# file parsing
# ---------------------------------------------------------------------------

_SECTIONS = ("ac_bus", "generator", "ac_branch", "dc_bus", "dc_branch",
             "converter")


def _tokens(path, text):
    """Yield (line_no, [fields]) for non-empty, non-comment lines."""
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if line:
            yield line_no, line.split()


def _num(path, line_no, tok, what):
    try:
        return float(tok)
    except ValueError:
        raise CaseFormatError(path, line_no, f"bad {what}: {tok!r}") from None


def _intval(path, line_no, tok, what):
    try:
        return int(tok)
    except ValueError:
        raise CaseFormatError(path, line_no, f"bad {what}: {tok!r}") from None


def parse_case(path) -> NetworkCase:
    """Parse and validate a case file; returns a per-unit NetworkCase.

    Files declare ``units pu`` (all quantities already per-unit) or
    ``units mixed`` (power-like columns in MW/MVAr and costs per MWh,
    converted here by the ``s_nominal`` base).  See docs/FORMAT.md.
    """
    path = Path(path)
    case = parse_case_text(path.read_text(), source=str(path))
    return case


def parse_case_text(text: str, source: str = "<string>") -> NetworkCase:
    lines = list(_tokens(source, text))
    if not lines:
        raise CaseFormatError(source, 1, "empty case file")
    line_no, head = lines[0]
    if len(head) != 2 or head[0] != "mtdcopf-case":
        raise CaseFormatError(source, line_no,
                              "expected header 'mtdcopf-case <version>'")
    version = _intval(source, line_no, head[1], "format version")
    if version != CASE_FORMAT_VERSION:
        raise CaseFormatError(source, line_no,
                              f"unsupported case format version {version}")

    name = "unnamed"
    units = "pu"
    s_nominal = None
    v_dc_nominal = None
    section = None
    rows: dict[str, list[tuple[int, list[str]]]] = {s: [] for s in _SECTIONS}

    for line_no, toks in lines[1:]:
        if toks[0].startswith("[") and toks[0].endswith("]"):
            section = toks[0][1:-1]
            if section not in _SECTIONS:
                raise CaseFormatError(source, line_no,
                                      f"unknown section [{section}]")
            continue
        if section is None:
            key = toks[0]
            if key == "name":
                name = " ".join(toks[1:]) or "unnamed"
            elif key == "units":
                units = toks[1]
                if units not in ("pu", "mixed"):
                    raise CaseFormatError(source, line_no,
                                          f"unknown units {units!r}")
            elif key == "s_nominal":
                s_nominal = _num(source, line_no, toks[1], "s_nominal")
            elif key == "v_dc_nominal":
                v_dc_nominal = _num(source, line_no, toks[1], "v_dc_nominal")
            else:
                raise CaseFormatError(source, line_no,
                                      f"unknown header field {key!r}")
            continue
        rows[section].append((line_no, toks))

    if s_nominal is None or s_nominal <= 0:
        raise CaseFormatError(source, 1, "missing or invalid s_nominal")
    if v_dc_nominal is None or v_dc_nominal <= 0:
        raise CaseFormatError(source, 1, "missing or invalid v_dc_nominal")

    base = s_nominal if units == "mixed" else 1.0

    def power(line_no, tok, what):
        return _num(source, line_no, tok, what) / base

    ac_buses = []
    for line_no, t in rows["ac_bus"]:
        if len(t) != 11:
            raise CaseFormatError(source, line_no,
                                  f"ac_bus row needs 11 fields, got {len(t)}")
        ac_buses.append(AcBus(
            id=_intval(source, line_no, t[0], "ac bus id"),
            voltage_setpoint=_num(source, line_no, t[1], "vm_set"),
            angle=_num(source, line_no, t[2], "va"),
            v_min=_num(source, line_no, t[3], "v_min"),
            v_max=_num(source, line_no, t[4], "v_max"),
            angle_min=_num(source, line_no, t[5], "va_min"),
            angle_max=_num(source, line_no, t[6], "va_max"),
            load_p=power(line_no, t[7], "p_load"),
            load_q=power(line_no, t[8], "q_load"),
            shunt_g=power(line_no, t[9], "g_shunt"),
            shunt_b=power(line_no, t[10], "b_shunt"),
        ))

    generators = []
    for line_no, t in rows["generator"]:
        if len(t) != 8:
            raise CaseFormatError(source, line_no,
                                  f"generator row needs 8 fields, got {len(t)}")
        generators.append(Generator(
            bus=_intval(source, line_no, t[0], "generator bus"),
            p_min=power(line_no, t[1], "p_min"),
            p_max=power(line_no, t[2], "p_max"),
            q_min=power(line_no, t[3], "q_min"),
            q_max=power(line_no, t[4], "q_max"),
            cost_alpha=_num(source, line_no, t[5], "cost_a") * base * base,
            cost_beta=_num(source, line_no, t[6], "cost_b") * base,
            cost_gamma=_num(source, line_no, t[7], "cost_c"),
        ))

    ac_branches = []
    for line_no, t in rows["ac_branch"]:
        if len(t) != 6:
            raise CaseFormatError(source, line_no,
                                  f"ac_branch row needs 6 fields, got {len(t)}")
        ac_branches.append(AcBranch(
            from_bus=_intval(source, line_no, t[0], "from bus"),
            to_bus=_intval(source, line_no, t[1], "to bus"),
            resistance=_num(source, line_no, t[2], "r"),
            reactance=_num(source, line_no, t[3], "x"),
            charging_b=_num(source, line_no, t[4], "b"),
            tap_ratio=_num(source, line_no, t[5], "tap"),
        ))

    dc_buses = []
    for line_no, t in rows["dc_bus"]:
        if len(t) not in (2, 4):
            raise CaseFormatError(source, line_no,
                                  f"dc_bus row needs 2 or 4 fields, got {len(t)}")
        bus_id = _intval(source, line_no, t[0], "dc bus id")
        v_nom = _num(source, line_no, t[1], "v_nominal")
        if len(t) == 4:
            v_min = _num(source, line_no, t[2], "v_min")
            v_max = _num(source, line_no, t[3], "v_max")
        else:
            v_min, v_max = DEFAULT_DC_V_MIN, DEFAULT_DC_V_MAX
        dc_buses.append(DcBus(id=bus_id, v_nominal=v_nom,
                              v_min=v_min, v_max=v_max))

    dc_branches = []
    for line_no, t in rows["dc_branch"]:
        if len(t) != 3:
            raise CaseFormatError(source, line_no,
                                  f"dc_branch row needs 3 fields, got {len(t)}")
        dc_branches.append(DcBranch(
            from_bus=_intval(source, line_no, t[0], "from bus"),
            to_bus=_intval(source, line_no, t[1], "to bus"),
            resistance=_num(source, line_no, t[2], "r"),
        ))

    converters = []
    for line_no, t in rows["converter"]:
        if len(t) != 18:
            raise CaseFormatError(source, line_no,
                                  f"converter row needs 18 fields, got {len(t)}")
        mode = t[12]
        if mode not in ControlMode.ALL:
            raise CaseFormatError(source, line_no,
                                  f"unknown control mode {mode!r}")
        converters.append(ConverterStation(
            id=_intval(source, line_no, t[0], "converter id"),
            ac_bus=_intval(source, line_no, t[1], "ac bus"),
            dc_bus=_intval(source, line_no, t[2], "dc bus"),
            loss_rectifier=LossCoefficients(
                a=_num(source, line_no, t[3], "loss_a_r"),
                b=_num(source, line_no, t[4], "loss_b_r"),
                c=_num(source, line_no, t[5], "loss_c_r")),
            loss_inverter=LossCoefficients(
                a=_num(source, line_no, t[6], "loss_a_i"),
                b=_num(source, line_no, t[7], "loss_b_i"),
                c=_num(source, line_no, t[8], "loss_c_i")),
            p_dc_min=power(line_no, t[9], "p_dc_min"),
            p_dc_max=power(line_no, t[10], "p_dc_max"),
            i_max=_num(source, line_no, t[11], "i_max"),
            control=ConverterControl(
                mode=mode,
                p_ref=power(line_no, t[13], "p_ref"),
                u_ref=_num(source, line_no, t[14], "u_ref"),
                k_droop=_num(source, line_no, t[15], "k_droop"),
                k_min=_num(source, line_no, t[16], "k_min"),
                k_max=_num(source, line_no, t[17], "k_max")),
        ))

    case = NetworkCase(
        name=name,
        s_nominal=s_nominal,
        v_dc_nominal=v_dc_nominal,
        ac_buses=tuple(ac_buses),
        generators=tuple(generators),
        ac_branches=tuple(ac_branches),
        dc_buses=tuple(dc_buses),
        dc_branches=tuple(dc_branches),
        converters=tuple(converters),
    )
    case.validate()
    return case


# ---------------------------------------------------------------------------
# serialization (canonical per-unit form)
# ---------------------------------------------------------------------------

def _fmt(v):
    return repr(float(v))


def serialize_case(case: NetworkCase) -> str:
    """Render the canonical per-unit text form of a case.

    ``parse_case_text(serialize_case(c))`` reproduces ``c`` exactly, and
    serializing again is byte-identical.
    """
    out = [f"mtdcopf-case {CASE_FORMAT_VERSION}",
           f"name {case.name}",
           "units pu",
           f"s_nominal {_fmt(case.s_nominal)}",
           f"v_dc_nominal {_fmt(case.v_dc_nominal)}",
           "",
           "[ac_bus]"]
    for b in case.ac_buses:
        out.append(" ".join([str(b.id)] + [_fmt(v) for v in (
            b.voltage_setpoint, b.angle, b.v_min, b.v_max, b.angle_min,
            b.angle_max, b.load_p, b.load_q, b.shunt_g, b.shunt_b)]))
    out += ["", "[generator]"]
    for g in case.generators:
        out.append(" ".join([str(g.bus)] + [_fmt(v) for v in (
            g.p_min, g.p_max, g.q_min, g.q_max,
            g.cost_alpha, g.cost_beta, g.cost_gamma)]))
    out += ["", "[ac_branch]"]
    for br in case.ac_branches:
        out.append(" ".join([str(br.from_bus), str(br.to_bus)] +
                            [_fmt(v) for v in (br.resistance, br.reactance,
                                               br.charging_b, br.tap_ratio)]))
    out += ["", "[dc_bus]"]
    for b in case.dc_buses:
        out.append(" ".join([str(b.id)] + [_fmt(v) for v in (
            b.v_nominal, b.v_min, b.v_max)]))
    out += ["", "[dc_branch]"]
    for br in case.dc_branches:
        out.append(f"{br.from_bus} {br.to_bus} {_fmt(br.resistance)}")
    out += ["", "[converter]"]
    for c in case.converters:
        ctl = c.control
        out.append(" ".join(
            [str(c.id), str(c.ac_bus), str(c.dc_bus)] +
            [_fmt(v) for v in (c.loss_rectifier.a, c.loss_rectifier.b,
                               c.loss_rectifier.c, c.loss_inverter.a,
                               c.loss_inverter.b, c.loss_inverter.c,
                               c.p_dc_min, c.p_dc_max, c.i_max)] +
            [ctl.mode] +
            [_fmt(v) for v in (ctl.p_ref, ctl.u_ref, ctl.k_droop,
                               ctl.k_min, ctl.k_max)]))
    return "\n".join(out) + "\n"


def parse_scenario(path) -> Scenario:
    path = Path(path)
    return parse_scenario_text(path.read_text(), source=str(path))


def parse_scenario_text(text: str, source: str = "<string>") -> Scenario:
    lines = list(_tokens(source, text))
    if not lines:
        raise CaseFormatError(source, 1, "empty scenario file")
    line_no, head = lines[0]
    if len(head) != 2 or head[0] != "mtdcopf-scenario":
        raise CaseFormatError(source, line_no,
                              "expected header 'mtdcopf-scenario <version>'")
    version = _intval(source, line_no, head[1], "format version")
    if version != SCENARIO_FORMAT_VERSION:
        raise CaseFormatError(source, line_no,
                              f"unsupported scenario format version {version}")

    name = "unnamed"
    gens = set()
    convs = set()
    for line_no, toks in lines[1:]:
        key = toks[0]
        if key == "name":
            name = " ".join(toks[1:]) or "unnamed"
        elif key == "generator_outage":
            gens.update(_intval(source, line_no, t, "generator index")
                        for t in toks[1:])
        elif key == "converter_outage":
            convs.update(_intval(source, line_no, t, "converter id")
                         for t in toks[1:])
        else:
            raise CaseFormatError(source, line_no,
                                  f"unknown scenario field {key!r}")
    return Scenario(name=name, generator_outages=frozenset(gens),
                    converter_outages=frozenset(convs))


def serialize_scenario(scenario: Scenario) -> str:
    out = [f"mtdcopf-scenario {SCENARIO_FORMAT_VERSION}",
           f"name {scenario.name}"]
    for idx in sorted(scenario.generator_outages):
        out.append(f"generator_outage {idx}")
    for cid in sorted(scenario.converter_outages):
        out.append(f"converter_outage {cid}")
    return "\n".join(out) + "\n"
