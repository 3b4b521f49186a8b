"""Independent Newton-Raphson AC/DC power flow used to cross-check OPF runs.

The power flow solves the same physics as the OPF stack but through a
separately written code path: complex bus-power mismatches from the
admittance matrix (instead of the polar trigonometric sums), the
unsquared apparent-power coupling ``|S| - U*I`` and a finite-difference
Jacobian.  Agreement between the two paths is therefore evidence, not a
tautology.

With every control pinned (generator dispatch, converter reactive
power, converter control law) the hybrid network is a square system:
the one slack bus absorbs the AC balance, and the DC side is closed by
the converter control laws.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .case import NetworkCase
from .equations import (ConverterMode, ConverterSetting, OpfEquations,
                        RECTIFIER, Slot, loss_direction)


class PowerFlowError(Exception):
    pass


class SingularSystemError(PowerFlowError):
    """Structurally singular Jacobian, e.g. an isolated bus."""


@dataclass(frozen=True)
class PinnedConverter:
    """Fully determined converter control for the square power flow."""

    id: int
    mode: str                  # "p" | "v" | "droop"
    p_ref: float
    u_ref: float
    k_droop: float
    q_c: float


@dataclass
class PowerFlowSetup:
    case: NetworkCase
    slack_bus: int
    slack_voltage: float
    gen_p: dict[int, float]          # by 1-based generator index
    gen_q: dict[int, float]
    converters: dict[int, PinnedConverter]
    promoted_slack_converter: int | None = None


@dataclass
class PowerFlowResult:
    setup: PowerFlowSetup
    u: dict[int, float]
    theta: dict[int, float]
    u_dc: dict[int, float]
    p_dc: dict[int, float]
    p_c: dict[int, float]
    i_c: dict[int, float]
    p_loss: dict[int, float]
    slack_p: float
    slack_q: float
    iterations: int
    max_mismatch: float
    residual_history: list[float] = field(default_factory=list)


def setup_from_stage(system: OpfEquations, x: np.ndarray) -> PowerFlowSetup:
    """Pin every control from a solved OPF state.

    Converters keep the control law their stage imposed; stage-1 style
    free converters become power-controlled at their solved transfer,
    with the widest-range converter promoted to voltage control so the
    DC side keeps a voltage anchor.
    """
    case = system.case
    lay = system.layout
    slack_bus = lay.reference_bus
    gen_p = {}
    gen_q = {}
    for g in range(1, len(case.generators) + 1):
        gen_p[g] = lay.value(x, Slot.PG, g)
        gen_q[g] = lay.value(x, Slot.QG, g)

    pinned = {}
    all_p_controlled = True
    for conv in case.converters:
        s = system.settings[conv.id]
        q_c = lay.value(x, Slot.QC, conv.id)
        if s.mode in (ConverterMode.FREE, ConverterMode.P_FIXED):
            pinned[conv.id] = PinnedConverter(
                id=conv.id, mode="p",
                p_ref=lay.value(x, Slot.PDC, conv.id),
                u_ref=lay.value(x, Slot.UDC, conv.dc_bus),
                k_droop=0.0, q_c=q_c)
        elif s.mode is ConverterMode.V_FIXED:
            all_p_controlled = False
            pinned[conv.id] = PinnedConverter(
                id=conv.id, mode="v", p_ref=0.0, u_ref=s.u_ref,
                k_droop=0.0, q_c=q_c)
        else:
            all_p_controlled = False
            k = (lay.value(x, Slot.K, conv.id)
                 if s.mode is ConverterMode.DROOP_VARIABLE else s.k_droop)
            pinned[conv.id] = PinnedConverter(
                id=conv.id, mode="droop", p_ref=s.p_ref, u_ref=s.u_ref,
                k_droop=k, q_c=q_c)

    promoted = None
    if pinned and all_p_controlled:
        # a DC voltage anchor is required when every converter holds power
        promoted = max(case.converters,
                       key=lambda c: (c.p_dc_max - c.p_dc_min, -c.id)).id
        old = pinned[promoted]
        pinned[promoted] = PinnedConverter(
            id=promoted, mode="v", p_ref=0.0, u_ref=old.u_ref,
            k_droop=0.0, q_c=old.q_c)

    return PowerFlowSetup(
        case=case, slack_bus=slack_bus,
        slack_voltage=lay.value(x, Slot.U, slack_bus),
        gen_p=gen_p, gen_q=gen_q, converters=pinned,
        promoted_slack_converter=promoted)


class _SquareSystem:
    """Mismatch vector of the pinned hybrid power flow."""

    def __init__(self, setup: PowerFlowSetup):
        case = setup.case
        self.setup = setup
        self.case = case
        self.ac_ids = [b.id for b in case.ac_buses]
        self.dc_ids = [b.id for b in case.dc_buses]
        self.conv_ids = [c.id for c in case.converters]
        self.non_slack = [b for b in self.ac_ids if b != setup.slack_bus]

        # complex bus admittance assembled independently of the OPF path
        n = len(self.ac_ids)
        pos = {b: i for i, b in enumerate(self.ac_ids)}
        Y = np.zeros((n, n), dtype=complex)
        for br in case.ac_branches:
            f, t = pos[br.from_bus], pos[br.to_bus]
            y = 1.0 / complex(br.resistance, br.reactance)
            ysh = 0.5j * br.charging_b
            Y[f, f] += (y + ysh) / br.tap_ratio ** 2
            Y[t, t] += y + ysh
            Y[f, t] -= y / br.tap_ratio
            Y[t, f] -= y / br.tap_ratio
        for b in case.ac_buses:
            Y[pos[b.id], pos[b.id]] += complex(b.shunt_g, b.shunt_b)
        self.ybus = Y
        self.ac_pos = pos
        self.dc_pos = {b: i for i, b in enumerate(self.dc_ids)}
        ndc = len(self.dc_ids)
        self.lap = np.zeros((ndc, ndc))
        for br in case.dc_branches:
            f, t = self.dc_pos[br.from_bus], self.dc_pos[br.to_bus]
            g = 1.0 / br.resistance
            self.lap[f, f] += g
            self.lap[t, t] += g
            self.lap[f, t] -= g
            self.lap[t, f] -= g

        # unknown ordering
        self.var_names = []
        for b in self.non_slack:
            self.var_names.append(("U", b))
        for b in self.non_slack:
            self.var_names.append(("TH", b))
        for b in self.dc_ids:
            self.var_names.append(("UDC", b))
        for c in self.conv_ids:
            self.var_names += [("PDC", c), ("PC", c), ("IC", c),
                               ("PLOSS", c)]
        self.n = len(self.var_names)
        self.index = {nm: i for i, nm in enumerate(self.var_names)}

        self.eq_names = []
        for b in self.non_slack:
            self.eq_names.append(("P", b))
        for b in self.non_slack:
            self.eq_names.append(("Q", b))
        for b in self.dc_ids:
            self.eq_names.append(("DC", b))
        for c in self.conv_ids:
            self.eq_names += [("COUPLE", c), ("LOSS", c), ("CBAL", c),
                              ("CTRL", c)]
        if len(self.eq_names) != self.n:
            raise PowerFlowError(
                f"system is not square: {len(self.eq_names)} equations, "
                f"{self.n} unknowns")

        self.gen_by_bus: dict[int, list[int]] = {}
        for g, gen in enumerate(case.generators, start=1):
            self.gen_by_bus.setdefault(gen.bus, []).append(g)
        self.conv_by_ac: dict[int, list[int]] = {}
        for c in case.converters:
            self.conv_by_ac.setdefault(c.ac_bus, []).append(c.id)
        self.conv_by_dc: dict[int, list[int]] = {}
        for c in case.converters:
            self.conv_by_dc.setdefault(c.dc_bus, []).append(c.id)

    def start(self) -> np.ndarray:
        x = np.zeros(self.n)
        for (kind, elem), i in self.index.items():
            if kind == "U":
                x[i] = 1.0
            elif kind == "UDC":
                x[i] = 1.0
            elif kind == "PC":
                x[i] = 0.05
            elif kind == "IC":
                x[i] = 0.05
            elif kind == "PLOSS":
                conv = self.case.converter(elem)
                x[i] = conv.loss_rectifier.a
        return x

    def mismatch(self, x: np.ndarray) -> np.ndarray:
        setup, case = self.setup, self.case
        u = {b: (setup.slack_voltage if b == setup.slack_bus
                 else x[self.index[("U", b)]]) for b in self.ac_ids}
        th = {b: (0.0 if b == setup.slack_bus
                  else x[self.index[("TH", b)]]) for b in self.ac_ids}
        V = np.array([u[b] * np.exp(1j * th[b]) for b in self.ac_ids])
        s_inj = V * np.conj(self.ybus @ V)

        f = np.zeros(self.n)
        row = 0
        for b in self.non_slack:
            bus = case.ac_buses[self.ac_pos[b]]
            p = -bus.load_p
            for g in self.gen_by_bus.get(b, ()):
                p += setup.gen_p[g]
            for cid in self.conv_by_ac.get(b, ()):
                p -= x[self.index[("PC", cid)]]
            f[row] = p - s_inj[self.ac_pos[b]].real
            row += 1
        for b in self.non_slack:
            bus = case.ac_buses[self.ac_pos[b]]
            q = -bus.load_q
            for g in self.gen_by_bus.get(b, ()):
                q += setup.gen_q[g]
            for cid in self.conv_by_ac.get(b, ()):
                q -= setup.converters[cid].q_c
            f[row] = q - s_inj[self.ac_pos[b]].imag
            row += 1

        udc = np.array([x[self.index[("UDC", b)]] for b in self.dc_ids])
        currents = self.lap @ udc if self.dc_ids else np.zeros(0)
        for j, b in enumerate(self.dc_ids):
            p = 0.0
            for cid in self.conv_by_dc.get(b, ()):
                p += x[self.index[("PDC", cid)]]
            f[row] = p - 2.0 * udc[j] * currents[j]
            row += 1

        for cid in self.conv_ids:
            conv = case.converter(cid)
            pc = x[self.index[("PC", cid)]]
            ic = x[self.index[("IC", cid)]]
            pl = x[self.index[("PLOSS", cid)]]
            pdc = x[self.index[("PDC", cid)]]
            qc = setup.converters[cid].q_c
            uc = u[conv.ac_bus]
            udc_c = x[self.index[("UDC", conv.dc_bus)]]
            coeffs = (conv.loss_rectifier
                      if loss_direction(pdc) == RECTIFIER
                      else conv.loss_inverter)
            ctl = setup.converters[cid]
            f[row] = np.hypot(pc, qc) - uc * ic
            f[row + 1] = pl - (coeffs.a + coeffs.b * ic + coeffs.c * ic * ic)
            f[row + 2] = pc - pdc - pl
            if ctl.mode == "p":
                f[row + 3] = pdc - ctl.p_ref
            elif ctl.mode == "v":
                f[row + 3] = udc_c - ctl.u_ref
            else:
                f[row + 3] = (pdc - ctl.p_ref
                              + (udc_c - ctl.u_ref) / ctl.k_droop)
            row += 4
        return f

    def fd_jacobian(self, x: np.ndarray) -> np.ndarray:
        J = np.zeros((self.n, self.n))
        for i in range(self.n):
            h = 1e-6 * max(1.0, abs(x[i]))
            xp = x.copy()
            xm = x.copy()
            xp[i] += h
            xm[i] -= h
            J[:, i] = (self.mismatch(xp) - self.mismatch(xm)) / (2.0 * h)
        return J


def newton_powerflow(setup: PowerFlowSetup, x0: np.ndarray | None = None,
                     tol: float = 1e-10, max_iter: int = 50
                     ) -> PowerFlowResult:
    """Solve the pinned hybrid power flow by a plain Newton iteration.

    Raises :class:`SingularSystemError` naming the offending bus when
    the Jacobian is structurally singular (isolated buses), and
    :class:`PowerFlowError` on divergence.
    """
    sq = _SquareSystem(setup)
    x = sq.start() if x0 is None else np.asarray(x0, dtype=float).copy()
    history = []
    for it in range(max_iter + 1):
        f = sq.mismatch(x)
        norm = float(np.max(np.abs(f))) if f.size else 0.0
        history.append(norm)
        if not np.isfinite(norm):
            raise PowerFlowError(f"mismatch diverged at iteration {it}")
        if norm <= tol:
            return _result(sq, setup, x, it, norm, history)
        if it == max_iter:
            break
        J = sq.fd_jacobian(x)
        _check_singular(sq, J)
        try:
            dx = np.linalg.solve(J, -f)
        except np.linalg.LinAlgError as exc:
            raise SingularSystemError(
                f"Jacobian is singular: {exc}") from exc
        # cap voltage/angle updates so iterates stay in the operational
        # basin instead of diving to the low-voltage branch
        cap = 1.0
        for (kind, _), step in zip(sq.var_names, dx):
            limit = {"U": 0.15, "UDC": 0.1, "TH": 0.3}.get(kind, 0.6)
            if abs(step) > limit:
                cap = min(cap, limit / abs(step))
        dx = cap * dx
        # norm-reduction damping; full steps near the solution keep the
        # quadratic tail intact
        alpha = 1.0
        for _ in range(30):
            trial = x + alpha * dx
            ft = sq.mismatch(trial)
            tn = float(np.max(np.abs(ft))) if ft.size else 0.0
            if np.isfinite(tn) and tn < (1.0 - 1e-4 * alpha) * norm:
                break
            alpha *= 0.5
        x = x + alpha * dx
    raise PowerFlowError(
        f"Newton power flow did not converge in {max_iter} iterations "
        f"(last mismatch {history[-1]:.3e})")


def _check_singular(sq: _SquareSystem, J: np.ndarray):
    scale = np.max(np.abs(J), initial=0.0)
    row_max = np.max(np.abs(J), axis=1) if J.size else np.zeros(0)
    dead = np.flatnonzero(row_max <= 1e-12 * max(scale, 1.0))
    if dead.size:
        kind, elem = sq.eq_names[dead[0]]
        label = {"P": "ac bus", "Q": "ac bus", "DC": "dc bus"}.get(kind,
                                                                   "element")
        raise SingularSystemError(
            f"singular Jacobian: equation {kind} of {label} {elem} has no "
            f"dependence on any unknown (isolated bus?)")


def _result(sq, setup, x, iters, norm, history) -> PowerFlowResult:
    case = setup.case
    u = {}
    th = {}
    for b in sq.ac_ids:
        if b == setup.slack_bus:
            u[b] = setup.slack_voltage
            th[b] = 0.0
        else:
            u[b] = float(x[sq.index[("U", b)]])
            th[b] = float(x[sq.index[("TH", b)]])
    V = np.array([u[b] * np.exp(1j * th[b]) for b in sq.ac_ids])
    s_inj = V * np.conj(sq.ybus @ V)
    sb = sq.ac_pos[setup.slack_bus]
    bus = case.ac_buses[sb]
    slack_p = s_inj[sb].real + bus.load_p
    slack_q = s_inj[sb].imag + bus.load_q
    for cid in sq.conv_by_ac.get(setup.slack_bus, ()):
        slack_p += float(x[sq.index[("PC", cid)]])
        slack_q += setup.converters[cid].q_c
    for g in sq.gen_by_bus.get(setup.slack_bus, ())[1:]:
        # only the first slack-bus generator absorbs the imbalance
        slack_p -= setup.gen_p[g]
        slack_q -= setup.gen_q[g]

    return PowerFlowResult(
        setup=setup,
        u=u, theta=th,
        u_dc={b: float(x[sq.index[("UDC", b)]]) for b in sq.dc_ids},
        p_dc={c: float(x[sq.index[("PDC", c)]]) for c in sq.conv_ids},
        p_c={c: float(x[sq.index[("PC", c)]]) for c in sq.conv_ids},
        i_c={c: float(x[sq.index[("IC", c)]]) for c in sq.conv_ids},
        p_loss={c: float(x[sq.index[("PLOSS", c)]]) for c in sq.conv_ids},
        slack_p=float(slack_p), slack_q=float(slack_q),
        iterations=iters, max_mismatch=norm,
        residual_history=history)


# ---------------------------------------------------------------------------
# verification record
# ---------------------------------------------------------------------------

@dataclass
class VerificationRecord:
    equations_max_residual: float
    newton_iterations: int
    newton_max_mismatch: float
    max_discrepancy: float
    discrepancies: dict[str, float]
    passed: bool
    message: str = ""

    def as_dict(self):
        return {
            "equations_max_residual": self.equations_max_residual,
            "newton_iterations": self.newton_iterations,
            "newton_max_mismatch": self.newton_max_mismatch,
            "max_discrepancy": self.max_discrepancy,
            "passed": self.passed,
            "message": self.message,
        }


def verify_solution(system: OpfEquations, x: np.ndarray,
                    tolerance: float = 1e-6) -> VerificationRecord:
    """Double-check a solved OPF state through both code paths.

    Re-evaluates every OPF residual at ``x`` and independently re-solves
    the network with all controls pinned; reports the largest
    per-variable difference between the two states.
    """
    residuals = system.residual_vector(x)
    eq_max = float(np.max(np.abs(residuals))) if residuals.size else 0.0

    setup = setup_from_stage(system, x)
    pf = newton_powerflow(setup)

    lay = system.layout
    disc = {}
    for b in system.case.ac_buses:
        disc[f"U[{b.id}]"] = abs(pf.u[b.id] - lay.value(x, Slot.U, b.id))
        disc[f"TH[{b.id}]"] = abs(pf.theta[b.id]
                                  - lay.value(x, Slot.TH, b.id))
    for b in system.case.dc_buses:
        disc[f"UDC[{b.id}]"] = abs(pf.u_dc[b.id]
                                   - lay.value(x, Slot.UDC, b.id))
    for c in system.case.converters:
        disc[f"PDC[{c.id}]"] = abs(pf.p_dc[c.id]
                                   - lay.value(x, Slot.PDC, c.id))
        disc[f"PC[{c.id}]"] = abs(pf.p_c[c.id]
                                  - lay.value(x, Slot.PC, c.id))
        disc[f"IC[{c.id}]"] = abs(pf.i_c[c.id]
                                  - lay.value(x, Slot.IC, c.id))
        disc[f"PLOSS[{c.id}]"] = abs(pf.p_loss[c.id]
                                     - lay.value(x, Slot.PLOSS, c.id))
    max_disc = max(disc.values()) if disc else 0.0
    passed = eq_max <= tolerance and max_disc <= tolerance
    return VerificationRecord(
        equations_max_residual=eq_max,
        newton_iterations=pf.iterations,
        newton_max_mismatch=pf.max_mismatch,
        max_discrepancy=float(max_disc),
        discrepancies=disc,
        passed=passed,
        message="" if passed else "discrepancy above tolerance",
    )
