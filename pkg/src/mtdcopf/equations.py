"""Residual and objective evaluators for the hybrid AC/DC OPF.

The network steady state is a flat variable vector laid out by
:class:`VariableLayout`:

* ``U``, ``TH``       voltage magnitude / angle per AC bus,
* ``PG``, ``QG``      active / reactive output per generator,
* ``UDC``             voltage per DC bus,
* ``PDC, PC, QC, IC, PLOSS`` per converter,
* ``K``               droop gain per converter, only when it is optimized.

All equality constraints are exposed through :class:`OpfEquations` as a
vectorized residual function with an analytic Jacobian.  Sign
conventions (documented in the README):

* ``PC``/``QC`` are drawn *from* the AC bus into the converter, so the
  AC bus balance subtracts them like a load.
* ``PDC`` is the power injected *into* the DC grid, so a converter
  rectifying (AC to DC) has ``PDC > 0``.
* The converter internal balance ``PC - PDC - PLOSS = 0`` holds in both
  flow directions under these conventions.
* The DC grid keeps the bipolar form ``P = 2 U I``.
* The apparent-power coupling is implemented per-unit as
  ``PC^2 + QC^2 - (U_ac * IC)^2 = 0`` with ``IC >= 0``.
* The droop law ``PDC - p_ref + (UDC - u_ref)/k = 0`` is evaluated in
  the equivalent k-scaled form ``k*(PDC - p_ref) + (UDC - u_ref) = 0``;
  since ``k >= k_min > 0`` the zero sets coincide, and the scaled form
  keeps all derivatives bounded when ``k`` itself is a variable.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .case import (ControlMode, ConverterStation, LossCoefficients,
                   NetworkCase)

RECTIFIER = "rectifier"
INVERTER = "inverter"


class Slot(str, enum.Enum):
    """Kinds of entries in the flat variable vector."""

    U = "U"
    TH = "TH"
    PG = "PG"
    QG = "QG"
    UDC = "UDC"
    PDC = "PDC"
    PC = "PC"
    QC = "QC"
    IC = "IC"
    PLOSS = "PLOSS"
    K = "K"


class Residual(str, enum.Enum):
    """Kinds of equality residuals."""

    AC_ACTIVE = "AcActiveBalance"
    AC_REACTIVE = "AcReactiveBalance"
    DC_BALANCE = "DcCurrentBalance"
    CONV_BALANCE = "ConverterPowerBalance"
    CONV_COUPLING = "ConverterCoupling"
    CONV_LOSS = "ConverterLossDef"
    DROOP = "DroopLaw"
    P_CONTROL = "PControlLaw"
    V_CONTROL = "VControlLaw"


class ConverterMode(str, enum.Enum):
    """How a converter is constrained in one OPF stage."""

    FREE = "free"              # no control law, PDC a free bounded variable
    P_FIXED = "p"              # PDC pinned to p_ref
    V_FIXED = "v"              # UDC pinned to u_ref
    DROOP_FIXED = "droop"      # droop law, gain frozen
    DROOP_VARIABLE = "droop*"  # droop law, gain an optimization variable


@dataclass(frozen=True)
class ConverterSetting:
    """Per-converter control configuration for one problem build."""

    mode: ConverterMode
    p_ref: float = 0.0
    u_ref: float = 1.0
    k_droop: float | None = None
    k_min: float = 0.001
    k_max: float = 0.5


class LayoutError(Exception):
    pass


@dataclass
class VariableLayout:
    """Mapping between named slots and indices of the flat vector."""

    names: list[str]
    kinds: list[Slot]
    elements: list[int]
    index: dict[tuple[Slot, int], int]
    n: int
    reference_bus: int

    @classmethod
    def build(cls, case: NetworkCase, k_variable_converters=()):
        names, kinds, elements = [], [], []
        index = {}

        def add(kind, element):
            key = (kind, element)
            if key in index:
                raise LayoutError(f"duplicate slot {kind.value}[{element}]")
            index[key] = len(names)
            names.append(f"{kind.value}[{element}]")
            kinds.append(kind)
            elements.append(element)

        for bus in case.ac_buses:
            add(Slot.U, bus.id)
        for bus in case.ac_buses:
            add(Slot.TH, bus.id)
        for g, _gen in enumerate(case.generators, start=1):
            add(Slot.PG, g)
        for g, _gen in enumerate(case.generators, start=1):
            add(Slot.QG, g)
        for bus in case.dc_buses:
            add(Slot.UDC, bus.id)
        for conv in case.converters:
            add(Slot.PDC, conv.id)
            add(Slot.PC, conv.id)
            add(Slot.QC, conv.id)
            add(Slot.IC, conv.id)
            add(Slot.PLOSS, conv.id)
        for conv in case.converters:
            if conv.id in k_variable_converters:
                add(Slot.K, conv.id)

        gen_buses = [g.bus for g in case.generators]
        reference_bus = gen_buses[0] if gen_buses else case.ac_buses[0].id
        return cls(names=names, kinds=kinds, elements=elements, index=index,
                   n=len(names), reference_bus=reference_bus)

    def slot(self, kind: Slot, element: int) -> int:
        try:
            return self.index[(kind, element)]
        except KeyError:
            raise LayoutError(f"no slot {kind.value}[{element}]") from None

    def has_slot(self, kind: Slot, element: int) -> bool:
        return (kind, element) in self.index

    def value(self, x, kind: Slot, element: int) -> float:
        return float(x[self.slot(kind, element)])


# ---------------------------------------------------------------------------
# admittance assembly
# ---------------------------------------------------------------------------

def build_ac_admittance(case: NetworkCase):
    """Dense bus-admittance matrices (G, B) including shunts and taps.

    Branch model is the standard pi-section with an off-nominal tap on
    the from side: ``yff = (y + jb/2)/tap^2``, ``yft = ytf = -y/tap``,
    ``ytt = y + jb/2``.
    """
    n = len(case.ac_buses)
    idx = {bus.id: i for i, bus in enumerate(case.ac_buses)}
    Y = np.zeros((n, n), dtype=complex)
    for br in case.ac_branches:
        f, t = idx[br.from_bus], idx[br.to_bus]
        y = 1.0 / complex(br.resistance, br.reactance)
        ysh = 0.5j * br.charging_b
        tap = br.tap_ratio
        Y[f, f] += (y + ysh) / tap ** 2
        Y[t, t] += y + ysh
        Y[f, t] += -y / tap
        Y[t, f] += -y / tap
    for bus in case.ac_buses:
        i = idx[bus.id]
        Y[i, i] += complex(bus.shunt_g, bus.shunt_b)
    return Y.real.copy(), Y.imag.copy()


def build_dc_admittance(case: NetworkCase):
    """Dense DC branch-admittance matrix Y[i, j] = sum of 1/r for lines i-j."""
    n = len(case.dc_buses)
    idx = {bus.id: i for i, bus in enumerate(case.dc_buses)}
    Y = np.zeros((n, n))
    for br in case.dc_branches:
        f, t = idx[br.from_bus], idx[br.to_bus]
        Y[f, t] += br.admittance
        Y[t, f] += br.admittance
    return Y


# ---------------------------------------------------------------------------
# elementary evaluators (public, element-wise)
# ---------------------------------------------------------------------------

def ac_injection(U, delta, gbus, bbus, i):
    """Active/reactive power injected into the network at bus index ``i``.

    Evaluates ``P_i = U_i sum_j U_j (G_ij cos d_ij + B_ij sin d_ij)`` and
    the matching reactive form with ``d_ij = delta_i - delta_j``.
    """
    U = np.asarray(U, dtype=float)
    delta = np.asarray(delta, dtype=float)
    if not 0 <= i < U.shape[0]:
        raise IndexError(f"bus index {i} out of range")
    d = delta[i] - delta
    cos_d, sin_d = np.cos(d), np.sin(d)
    p = U[i] * float(np.dot(U, gbus[i] * cos_d + bbus[i] * sin_d))
    q = U[i] * float(np.dot(U, gbus[i] * sin_d - bbus[i] * cos_d))
    return p, q


def converter_loss(i_c, direction, coeffs: LossCoefficients):
    """Converter loss ``a + b*i_c + c*i_c**2`` for one flow direction."""
    if i_c < 0:
        raise ValueError(f"converter current must be >= 0, got {i_c}")
    if direction not in (RECTIFIER, INVERTER):
        raise ValueError(f"unknown loss direction {direction!r}")
    return coeffs.a + coeffs.b * i_c + coeffs.c * i_c * i_c


def loss_direction(p_dc):
    """Rectifier (AC to DC) when the DC-side injection is non-negative."""
    return RECTIFIER if p_dc >= 0.0 else INVERTER


# ---------------------------------------------------------------------------
# the assembled equation system
# ---------------------------------------------------------------------------

@dataclass
class ResidualInfo:
    kind: Residual
    element: int
    label: str


class OpfEquations:
    """Vectorized residuals, objectives and Jacobian for one problem build.

    Parameters
    ----------
    case : NetworkCase
        Validated network.
    settings : dict[int, ConverterSetting]
        Control configuration per converter id.  Converters left out
        default to their case-file control interpreted literally.
    """

    def __init__(self, case: NetworkCase, settings=None):
        self.case = case
        self.settings = dict(settings or {})
        for conv in case.converters:
            if conv.id not in self.settings:
                self.settings[conv.id] = _setting_from_control(conv)
            s = self.settings[conv.id]
            if s.mode is ConverterMode.DROOP_FIXED:
                if s.k_droop is None or not s.k_min <= s.k_droop <= s.k_max:
                    raise LayoutError(
                        f"converter {conv.id}: droop gain {s.k_droop} outside "
                        f"[{s.k_min}, {s.k_max}]")

        k_vars = {cid for cid, s in self.settings.items()
                  if s.mode is ConverterMode.DROOP_VARIABLE}
        self.layout = VariableLayout.build(case, k_variable_converters=k_vars)
        self.gbus, self.bbus = build_ac_admittance(case)
        self.ydc = build_dc_admittance(case)
        self._build_index_maps()
        self._build_residual_list()

    # -- construction helpers ---------------------------------------------

    def _build_index_maps(self):
        case, lay = self.case, self.layout
        self.n_ac = len(case.ac_buses)
        self.n_dc = len(case.dc_buses)
        self.iu = np.array([lay.slot(Slot.U, b.id) for b in case.ac_buses],
                           dtype=int)
        self.ith = np.array([lay.slot(Slot.TH, b.id) for b in case.ac_buses],
                            dtype=int)
        self.ipg = np.array([lay.slot(Slot.PG, g) for g in
                             range(1, len(case.generators) + 1)], dtype=int)
        self.iqg = np.array([lay.slot(Slot.QG, g) for g in
                             range(1, len(case.generators) + 1)], dtype=int)
        self.iudc = np.array([lay.slot(Slot.UDC, b.id) for b in case.dc_buses],
                             dtype=int)
        self.gen_bus_pos = np.array(
            [case.ac_bus_index(g.bus) for g in case.generators], dtype=int)
        self.conv_ac_pos = np.array(
            [case.ac_bus_index(c.ac_bus) for c in case.converters], dtype=int)
        self.conv_dc_pos = np.array(
            [case.dc_bus_index(c.dc_bus) for c in case.converters], dtype=int)
        self.load_p = np.array([b.load_p for b in case.ac_buses])
        self.load_q = np.array([b.load_q for b in case.ac_buses])

    def _build_residual_list(self):
        case = self.case
        self.residuals: list[ResidualInfo] = []
        for bus in case.ac_buses:
            self.residuals.append(ResidualInfo(
                Residual.AC_ACTIVE, bus.id, f"P-balance ac bus {bus.id}"))
        for bus in case.ac_buses:
            self.residuals.append(ResidualInfo(
                Residual.AC_REACTIVE, bus.id, f"Q-balance ac bus {bus.id}"))
        for bus in case.dc_buses:
            self.residuals.append(ResidualInfo(
                Residual.DC_BALANCE, bus.id, f"dc balance bus {bus.id}"))
        for conv in case.converters:
            self.residuals.append(ResidualInfo(
                Residual.CONV_COUPLING, conv.id,
                f"coupling converter {conv.id}"))
            self.residuals.append(ResidualInfo(
                Residual.CONV_LOSS, conv.id, f"loss converter {conv.id}"))
            self.residuals.append(ResidualInfo(
                Residual.CONV_BALANCE, conv.id,
                f"power balance converter {conv.id}"))
        for conv in case.converters:
            mode = self.settings[conv.id].mode
            if mode is ConverterMode.FREE:
                continue
            kind = {ConverterMode.P_FIXED: Residual.P_CONTROL,
                    ConverterMode.V_FIXED: Residual.V_CONTROL,
                    ConverterMode.DROOP_FIXED: Residual.DROOP,
                    ConverterMode.DROOP_VARIABLE: Residual.DROOP}[mode]
            self.residuals.append(ResidualInfo(
                kind, conv.id, f"{kind.value} converter {conv.id}"))
        self.m = len(self.residuals)

    # -- AC injections -----------------------------------------------------

    def ac_injections(self, x):
        """Vector (P, Q) injections for all AC buses at state ``x``."""
        U = x[self.iu]
        th = x[self.ith]
        d = th[:, None] - th[None, :]
        cos_d, sin_d = np.cos(d), np.sin(d)
        UU = U[:, None] * U[None, :]
        p = np.sum(UU * (self.gbus * cos_d + self.bbus * sin_d), axis=1)
        q = np.sum(UU * (self.gbus * sin_d - self.bbus * cos_d), axis=1)
        return p, q

    def dc_node_currents(self, x):
        """I_i = sum_j Y_ij (U_i - U_j) per DC bus."""
        udc = x[self.iudc]
        diff = udc[:, None] - udc[None, :]
        return np.sum(self.ydc * diff, axis=1)

    # -- residual vector ----------------------------------------------------

    def residual_vector(self, x):
        case, lay = self.case, self.layout
        r = np.empty(self.m)
        p_inj, q_inj = self.ac_injections(x)

        rp = -self.load_p - p_inj
        rq = -self.load_q - q_inj
        np.add.at(rp, self.gen_bus_pos, x[self.ipg])
        np.add.at(rq, self.gen_bus_pos, x[self.iqg])
        for k, conv in enumerate(case.converters):
            pos = self.conv_ac_pos[k]
            rp[pos] -= lay.value(x, Slot.PC, conv.id)
            rq[pos] -= lay.value(x, Slot.QC, conv.id)
        r[:self.n_ac] = rp
        r[self.n_ac:2 * self.n_ac] = rq

        base = 2 * self.n_ac
        if self.n_dc:
            udc = x[self.iudc]
            currents = self.dc_node_currents(x)
            rdc = -2.0 * udc * currents
            for k, conv in enumerate(case.converters):
                rdc[self.conv_dc_pos[k]] += lay.value(x, Slot.PDC, conv.id)
            r[base:base + self.n_dc] = rdc
        base += self.n_dc

        for conv in case.converters:
            pc = lay.value(x, Slot.PC, conv.id)
            qc = lay.value(x, Slot.QC, conv.id)
            ic = lay.value(x, Slot.IC, conv.id)
            pdc = lay.value(x, Slot.PDC, conv.id)
            ploss = lay.value(x, Slot.PLOSS, conv.id)
            uc = lay.value(x, Slot.U, conv.ac_bus)
            coeffs = (conv.loss_rectifier if loss_direction(pdc) == RECTIFIER
                      else conv.loss_inverter)
            r[base] = pc * pc + qc * qc - (uc * ic) ** 2
            r[base + 1] = ploss - (coeffs.a + coeffs.b * ic + coeffs.c * ic * ic)
            r[base + 2] = pc - pdc - ploss
            base += 3

        for conv in case.converters:
            s = self.settings[conv.id]
            if s.mode is ConverterMode.FREE:
                continue
            pdc = lay.value(x, Slot.PDC, conv.id)
            udc = lay.value(x, Slot.UDC, conv.dc_bus)
            if s.mode is ConverterMode.P_FIXED:
                r[base] = pdc - s.p_ref
            elif s.mode is ConverterMode.V_FIXED:
                r[base] = udc - s.u_ref
            else:
                # droop law scaled through by k (> 0), which has the same
                # zero set but stays polynomial when k is a variable
                k = (lay.value(x, Slot.K, conv.id)
                     if s.mode is ConverterMode.DROOP_VARIABLE else s.k_droop)
                r[base] = k * (pdc - s.p_ref) + (udc - s.u_ref)
            base += 1
        return r

    # -- Jacobian ------------------------------------------------------------

    def jacobian(self, x):
        """Analytic Jacobian of the residual vector, as CSR."""
        return sp.csr_matrix(self.jacobian_dense(x))

    def jacobian_dense(self, x):
        case, lay = self.case, self.layout
        J = np.zeros((self.m, lay.n))
        U = x[self.iu]
        th = x[self.ith]
        d = th[:, None] - th[None, :]
        cos_d, sin_d = np.cos(d), np.sin(d)
        G, B = self.gbus, self.bbus
        p_inj, q_inj = self.ac_injections(x)

        # dP/dU, dP/dTH, dQ/dU, dQ/dTH (standard polar power-flow forms)
        t1 = G * cos_d + B * sin_d
        t2 = G * sin_d - B * cos_d
        dP_dU = U[:, None] * t1
        np.fill_diagonal(dP_dU, p_inj / U + np.diag(G) * U)
        dP_dTH = U[:, None] * U[None, :] * t2
        np.fill_diagonal(dP_dTH, -q_inj - np.diag(B) * U ** 2)
        dQ_dU = U[:, None] * t2
        np.fill_diagonal(dQ_dU, q_inj / U - np.diag(B) * U)
        dQ_dTH = -U[:, None] * U[None, :] * t1
        np.fill_diagonal(dQ_dTH, p_inj - np.diag(G) * U ** 2)

        rows_p = np.arange(self.n_ac)
        rows_q = self.n_ac + rows_p
        J[np.ix_(rows_p, self.iu)] = -dP_dU
        J[np.ix_(rows_p, self.ith)] = -dP_dTH
        J[np.ix_(rows_q, self.iu)] = -dQ_dU
        J[np.ix_(rows_q, self.ith)] = -dQ_dTH
        for g, pos in enumerate(self.gen_bus_pos):
            J[pos, self.ipg[g]] += 1.0
            J[self.n_ac + pos, self.iqg[g]] += 1.0
        for k, conv in enumerate(case.converters):
            pos = self.conv_ac_pos[k]
            J[pos, lay.slot(Slot.PC, conv.id)] -= 1.0
            J[self.n_ac + pos, lay.slot(Slot.QC, conv.id)] -= 1.0

        base = 2 * self.n_ac
        if self.n_dc:
            udc = x[self.iudc]
            currents = self.dc_node_currents(x)
            rowsum = np.sum(self.ydc, axis=1)
            # r_i = PDC_i - 2 U_i I_i with I_i = sum_j Y_ij (U_i - U_j)
            dU = 2.0 * udc[:, None] * self.ydc
            np.fill_diagonal(dU, -2.0 * currents - 2.0 * udc * rowsum)
            J[np.ix_(base + np.arange(self.n_dc), self.iudc)] = dU
            for k, conv in enumerate(case.converters):
                J[base + self.conv_dc_pos[k], lay.slot(Slot.PDC, conv.id)] += 1.0
        base += self.n_dc

        for conv in case.converters:
            pc = lay.value(x, Slot.PC, conv.id)
            qc = lay.value(x, Slot.QC, conv.id)
            ic = lay.value(x, Slot.IC, conv.id)
            pdc = lay.value(x, Slot.PDC, conv.id)
            uc = lay.value(x, Slot.U, conv.ac_bus)
            coeffs = (conv.loss_rectifier if loss_direction(pdc) == RECTIFIER
                      else conv.loss_inverter)
            ipc = lay.slot(Slot.PC, conv.id)
            iqc = lay.slot(Slot.QC, conv.id)
            iic = lay.slot(Slot.IC, conv.id)
            ipl = lay.slot(Slot.PLOSS, conv.id)
            ipd = lay.slot(Slot.PDC, conv.id)
            iuc = lay.slot(Slot.U, conv.ac_bus)

            J[base, ipc] = 2.0 * pc
            J[base, iqc] = 2.0 * qc
            J[base, iuc] = -2.0 * uc * ic * ic
            J[base, iic] = -2.0 * uc * uc * ic
            J[base + 1, ipl] = 1.0
            J[base + 1, iic] = -(coeffs.b + 2.0 * coeffs.c * ic)
            J[base + 2, ipc] = 1.0
            J[base + 2, ipd] = -1.0
            J[base + 2, ipl] = -1.0
            base += 3

        for conv in case.converters:
            s = self.settings[conv.id]
            if s.mode is ConverterMode.FREE:
                continue
            ipd = lay.slot(Slot.PDC, conv.id)
            iud = lay.slot(Slot.UDC, conv.dc_bus)
            if s.mode is ConverterMode.P_FIXED:
                J[base, ipd] = 1.0
            elif s.mode is ConverterMode.V_FIXED:
                J[base, iud] = 1.0
            elif s.mode is ConverterMode.DROOP_FIXED:
                J[base, ipd] = s.k_droop
                J[base, iud] = 1.0
            else:
                k = lay.value(x, Slot.K, conv.id)
                pdc = lay.value(x, Slot.PDC, conv.id)
                J[base, ipd] = k
                J[base, iud] = 1.0
                J[base, lay.slot(Slot.K, conv.id)] = pdc - s.p_ref
            base += 1
        return J

    # -- element-wise views (used by tests and diagnostics) -------------------

    def ac_balance_residual(self, x, bus_id):
        r = self.residual_vector(x)
        i = self.case.ac_bus_index(bus_id)
        return float(r[i]), float(r[self.n_ac + i])

    def dc_balance_residual(self, x, dc_bus_id):
        r = self.residual_vector(x)
        i = self.case.dc_bus_index(dc_bus_id)
        return float(r[2 * self.n_ac + i])

    def converter_coupling_residual(self, x, conv_id):
        r = self.residual_vector(x)
        base = 2 * self.n_ac + self.n_dc
        for conv in self.case.converters:
            if conv.id == conv_id:
                return float(r[base]), float(r[base + 2])
            base += 3
        raise LayoutError(f"unknown converter id {conv_id}")

    def control_law_residual(self, x, conv_id):
        r = self.residual_vector(x)
        base = 2 * self.n_ac + self.n_dc + 3 * len(self.case.converters)
        for conv in self.case.converters:
            s = self.settings[conv.id]
            if s.mode is ConverterMode.FREE:
                continue
            if conv.id == conv_id:
                return float(r[base])
            base += 1
        raise LayoutError(f"converter {conv_id} has no control-law residual")

    # -- objectives -----------------------------------------------------------

    def objective_cost(self, x):
        """Total quadratic generation cost over in-service generators."""
        total = 0.0
        for g, gen in enumerate(self.case.generators):
            total += gen.cost(float(x[self.ipg[g]]))
        return total

    def objective_vdev(self, x):
        """Sum of squared DC voltage deviations from 1 pu."""
        udc = x[self.iudc]
        return float(np.sum((udc - 1.0) ** 2))

    def cost_gradient(self, x):
        g = np.zeros(self.layout.n)
        for i, gen in enumerate(self.case.generators):
            slot = self.ipg[i]
            g[slot] = 2.0 * gen.cost_alpha * x[slot] + gen.cost_beta
        return g

    def vdev_gradient(self, x):
        g = np.zeros(self.layout.n)
        g[self.iudc] = 2.0 * (x[self.iudc] - 1.0)
        return g

    def cost_hess_diag(self, x):
        h = np.zeros(self.layout.n)
        for i, gen in enumerate(self.case.generators):
            h[self.ipg[i]] = 2.0 * gen.cost_alpha
        return h

    def vdev_hess_diag(self, x):
        h = np.zeros(self.layout.n)
        h[self.iudc] = 2.0
        return h

    # -- bounds and starts ------------------------------------------------------

    def bounds(self):
        """Per-slot (lower, upper) arrays; the reference angle is pinned."""
        case, lay = self.case, self.layout
        lb = np.full(lay.n, -np.inf)
        ub = np.full(lay.n, np.inf)
        for i, bus in enumerate(case.ac_buses):
            lb[self.iu[i]], ub[self.iu[i]] = bus.v_min, bus.v_max
            lb[self.ith[i]], ub[self.ith[i]] = bus.angle_min, bus.angle_max
        ref = lay.slot(Slot.TH, lay.reference_bus)
        lb[ref] = ub[ref] = 0.0
        for g, gen in enumerate(case.generators):
            lb[self.ipg[g]], ub[self.ipg[g]] = gen.p_min, gen.p_max
            lb[self.iqg[g]], ub[self.iqg[g]] = gen.q_min, gen.q_max
        for i, bus in enumerate(case.dc_buses):
            lb[self.iudc[i]], ub[self.iudc[i]] = bus.v_min, bus.v_max
        for conv in case.converters:
            s = self.settings[conv.id]
            ipd = lay.slot(Slot.PDC, conv.id)
            lb[ipd], ub[ipd] = conv.p_dc_min, conv.p_dc_max
            iic = lay.slot(Slot.IC, conv.id)
            lb[iic], ub[iic] = 0.0, conv.i_max
            if s.mode is ConverterMode.DROOP_VARIABLE:
                ik = lay.slot(Slot.K, conv.id)
                lb[ik], ub[ik] = s.k_min, s.k_max
        return lb, ub

    def flat_start(self):
        """Flat start: 1 pu voltages, zero angles and transfers, mid dispatch.

        Converter slots are seeded at a consistent zero-transfer state
        with a small nonzero current so the coupling constraint has a
        usable gradient from the first iteration.
        """
        case, lay = self.case, self.layout
        x = np.zeros(lay.n)
        x[self.iu] = 1.0
        for g, gen in enumerate(case.generators):
            x[self.ipg[g]] = 0.5 * (gen.p_min + gen.p_max)
            x[self.iqg[g]] = 0.5 * (gen.q_min + gen.q_max)
        if self.n_dc:
            x[self.iudc] = 1.0
        for conv in case.converters:
            s = self.settings[conv.id]
            ic0 = min(0.1, 0.5 * conv.i_max)
            loss0 = (conv.loss_rectifier.a + conv.loss_rectifier.b * ic0
                     + conv.loss_rectifier.c * ic0 * ic0)
            x[lay.slot(Slot.IC, conv.id)] = ic0
            x[lay.slot(Slot.PLOSS, conv.id)] = loss0
            x[lay.slot(Slot.PC, conv.id)] = loss0
            if s.mode is ConverterMode.DROOP_VARIABLE:
                x[lay.slot(Slot.K, conv.id)] = math.sqrt(s.k_min * s.k_max)
        return x

    def residual_labels(self):
        return [info.label for info in self.residuals]


def _setting_from_control(conv: ConverterStation) -> ConverterSetting:
    ctl = conv.control
    mode = {ControlMode.P_CONTROL: ConverterMode.P_FIXED,
            ControlMode.V_CONTROL: ConverterMode.V_FIXED,
            ControlMode.DROOP: ConverterMode.DROOP_FIXED}[ctl.mode]
    return ConverterSetting(mode=mode, p_ref=ctl.p_ref, u_ref=ctl.u_ref,
                            k_droop=ctl.k_droop, k_min=ctl.k_min,
                            k_max=ctl.k_max)


# ---------------------------------------------------------------------------
# conservation accounting
# ---------------------------------------------------------------------------

@dataclass
class PowerBalance:
    """Network-wide balances recomputed from a state vector."""

    total_generation: float
    total_load: float
    ac_losses: float
    net_ac_to_dc: float
    total_dc_injection: float
    dc_line_losses: float
    converter_losses: float

    @property
    def ac_mismatch(self):
        return (self.total_generation - self.total_load - self.ac_losses
                - self.net_ac_to_dc)

    @property
    def dc_mismatch(self):
        return self.total_dc_injection - self.dc_line_losses


def power_balance(system: OpfEquations, x) -> PowerBalance:
    """Recompute conservation sums from branch-wise loss formulas.

    AC losses come from per-branch complex flows plus shunt consumption;
    DC line losses are ``2 Y (U_i - U_j)^2`` per line (bipolar base).
    """
    case, lay = system.case, system.layout
    idx = {bus.id: i for i, bus in enumerate(case.ac_buses)}
    U = x[system.iu]
    th = x[system.ith]
    V = U * np.exp(1j * th)

    ac_loss = 0.0
    for br in case.ac_branches:
        f, t = idx[br.from_bus], idx[br.to_bus]
        y = 1.0 / complex(br.resistance, br.reactance)
        ysh = 0.5j * br.charging_b
        vf, vt = V[f], V[t]
        i_f = (y + ysh) / br.tap_ratio ** 2 * vf - y / br.tap_ratio * vt
        i_t = (y + ysh) * vt - y / br.tap_ratio * vf
        ac_loss += (vf * np.conj(i_f) + vt * np.conj(i_t)).real
    for bus in case.ac_buses:
        ac_loss += bus.shunt_g * U[idx[bus.id]] ** 2

    total_gen = float(np.sum(x[system.ipg]))
    total_load = float(np.sum(system.load_p))
    net_ac_dc = sum(lay.value(x, Slot.PC, c.id) for c in case.converters)
    total_pdc = sum(lay.value(x, Slot.PDC, c.id) for c in case.converters)
    conv_loss = sum(lay.value(x, Slot.PLOSS, c.id) for c in case.converters)

    dc_loss = 0.0
    dcidx = {bus.id: i for i, bus in enumerate(case.dc_buses)}
    udc = x[system.iudc] if system.n_dc else np.zeros(0)
    for br in case.dc_branches:
        du = udc[dcidx[br.from_bus]] - udc[dcidx[br.to_bus]]
        dc_loss += 2.0 * br.admittance * du * du

    return PowerBalance(
        total_generation=total_gen,
        total_load=total_load,
        ac_losses=float(ac_loss),
        net_ac_to_dc=float(net_ac_dc),
        total_dc_injection=float(total_pdc),
        dc_line_losses=float(dc_loss),
        converter_losses=float(conv_loss),
    )
