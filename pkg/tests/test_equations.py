import math

import numpy as np
import pytest

from mtdcopf.case import LossCoefficients, parse_case_text
from mtdcopf.equations import (ConverterMode, ConverterSetting, OpfEquations,
                               RECTIFIER, INVERTER, Slot, ac_injection,
                               build_ac_admittance, converter_loss,
                               power_balance)
from tests.test_case import MINIMAL

TABLE_RECT = LossCoefficients(0.011, 0.003, 0.004)
TABLE_INV = LossCoefficients(0.011, 0.003, 0.007)


def fd_jacobian(system, x, h=1e-6):
    n = system.layout.n
    J = np.zeros((system.m, n))
    for i in range(n):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        J[:, i] = (system.residual_vector(xp)
                   - system.residual_vector(xm)) / (2.0 * h)
    return J


def random_in_bounds(system, rng):
    lb, ub = system.bounds()
    finite = np.isfinite(lb) & np.isfinite(ub)
    x = np.empty(system.layout.n)
    w = rng.uniform(0.05, 0.95, size=x.size)
    x[finite] = lb[finite] + w[finite] * (ub[finite] - lb[finite])
    x[~finite] = rng.normal(0.0, 0.3, size=int((~finite).sum()))
    return x


class TestAcInjection:
    def test_lossless_line_no_angle_difference(self):
        # G = 0 everywhere, equal voltages and angles: no active flow,
        # reactive from the line susceptance only
        case = parse_case_text(MINIMAL.replace("1 2 0.01 0.1 0.02 1.0",
                                               "1 2 0.0 0.1 0.02 1.0"))
        g, b = build_ac_admittance(case)
        U = np.array([1.0, 1.0])
        th = np.zeros(2)
        p, q = ac_injection(U, th, g, b, 0)
        assert p == pytest.approx(0.0, abs=1e-12)
        assert q == pytest.approx(-(b[0, 0] + b[0, 1]), abs=1e-12)

    def test_isolated_bus_with_shunt(self):
        g = np.array([[0.25]])
        b = np.array([[0.1]])
        p, q = ac_injection(np.array([1.0]), np.array([0.0]), g, b, 0)
        assert p == pytest.approx(0.25)
        assert q == pytest.approx(-0.1)

    def test_two_bus_series_admittance_frozen_oracle(self):
        # independent straight-line evaluation, frozen in
        # tests/oracle computation: y = 1/(0.01+j0.1), U = (1.02, 1.0),
        # angle difference 0.05 rad
        r, xr = 0.01, 0.1
        y = 1.0 / complex(r, xr)
        G = np.array([[y.real, -y.real], [-y.real, y.real]])
        B = np.array([[y.imag, -y.imag], [-y.imag, y.imag]])
        U = np.array([1.02, 1.0])
        th = np.array([0.05, 0.0])
        p, q = ac_injection(U, th, G, B, 0)
        assert p == pytest.approx(0.5262002583743101, rel=1e-12)
        assert q == pytest.approx(0.16412731813391251, rel=1e-12)

    def test_index_out_of_range(self):
        g = np.zeros((2, 2))
        with pytest.raises(IndexError):
            ac_injection(np.ones(2), np.zeros(2), g, g, 5)


class TestAcBalance:
    def test_empty_bus_balances(self):
        # bus 2 carries nothing at all: no load, generator, converter, lines
        text = MINIMAL.replace("2 1.0 0.0 0.9 1.1 -0.5 0.5 0.4 0.1 0.0 0.0",
                               "2 1.0 0.0 0.9 1.1 -0.5 0.5 0.0 0.0 0.0 0.0")
        text = text.replace("[ac_branch]\n1 2 0.01 0.1 0.02 1.0",
                            "[ac_branch]")
        case = parse_case_text(text)
        system = OpfEquations(case)
        x = system.flat_start()
        x[system.ipg[0]] = 0.0
        x[system.iqg[0]] = 0.0
        rp, rq = system.ac_balance_residual(x, 2)
        assert rp == pytest.approx(0.0, abs=1e-12)
        assert rq == pytest.approx(0.0, abs=1e-12)

    def test_generation_matches_load_without_lines(self):
        # single bus carrying both the only generator and the only load
        text = """\
mtdcopf-case 1
name one-bus
units pu
s_nominal 100.0
v_dc_nominal 200.0

[ac_bus]
1 1.0 0.0 0.9 1.1 -0.5 0.5 0.3 0.1 0.0 0.0

[generator]
1 0.0 1.0 -0.5 0.5 100.0 2000.0 0.0

[ac_branch]

[dc_bus]

[dc_branch]

[converter]
"""
        case = parse_case_text(text)
        system = OpfEquations(case)
        x = system.flat_start()
        x[system.ipg[0]] = 0.3
        x[system.iqg[0]] = 0.1
        rp, rq = system.ac_balance_residual(x, 1)
        assert rp == pytest.approx(0.0, abs=1e-12)
        assert rq == pytest.approx(0.0, abs=1e-12)


class TestDcBalance:
    def _two_node_system(self):
        text = MINIMAL.replace("[dc_bus]\n",
                               "[dc_bus]\n1 1.0 0.9 1.1\n2 1.0 0.9 1.1\n")
        text = text.replace("[dc_branch]\n", "[dc_branch]\n1 2 0.1\n")
        text = text.replace(
            "[converter]\n",
            "[converter]\n"
            "1 1 1 0.011 0.003 0.004 0.011 0.003 0.007 "
            "-1.0 1.0 1.2 p 0.0 1.0 0.1 0.001 0.5\n"
            "2 2 2 0.011 0.003 0.004 0.011 0.003 0.007 "
            "-1.0 1.0 1.2 p 0.0 1.0 0.1 0.001 0.5\n")
        case = parse_case_text(text)
        return OpfEquations(case)

    def test_equal_voltages_zero_injection(self):
        system = self._two_node_system()
        x = system.flat_start()
        for bus_id in (1, 2):
            assert system.dc_balance_residual(x, bus_id) == pytest.approx(
                0.0, abs=1e-12)

    def test_two_node_hand_value(self):
        # Y = 10, U = (1.01, 1.00): I1 = 0.1, so P_dc,1 = 2*1.01*0.1 = 0.202
        system = self._two_node_system()
        lay = system.layout
        x = system.flat_start()
        x[lay.slot(Slot.UDC, 1)] = 1.01
        x[lay.slot(Slot.UDC, 2)] = 1.00
        x[lay.slot(Slot.PDC, 1)] = 0.202
        assert system.dc_balance_residual(x, 1) == pytest.approx(0.0,
                                                                 abs=1e-12)
        currents = system.dc_node_currents(x)
        assert currents[0] == pytest.approx(0.1)

    def test_two_node_antisymmetry(self):
        system = self._two_node_system()
        lay = system.layout
        rng = np.random.default_rng(11)
        for _ in range(20):
            x = system.flat_start()
            x[lay.slot(Slot.UDC, 1)] = rng.uniform(0.9, 1.1)
            x[lay.slot(Slot.UDC, 2)] = rng.uniform(0.9, 1.1)
            i1, i2 = system.dc_node_currents(x)
            assert i1 == pytest.approx(-i2, abs=1e-14)


class TestConverterLoss:
    def test_no_load_rectifier(self):
        assert converter_loss(0.0, RECTIFIER, TABLE_RECT) == 0.011

    def test_unit_current(self):
        assert converter_loss(1.0, RECTIFIER, TABLE_RECT) == pytest.approx(
            0.018)
        assert converter_loss(1.0, INVERTER, TABLE_INV) == pytest.approx(
            0.021)

    def test_negative_current_rejected(self):
        with pytest.raises(ValueError):
            converter_loss(-0.1, RECTIFIER, TABLE_RECT)

    def test_loss_positive_for_all_currents(self):
        rng = np.random.default_rng(3)
        for i_c in rng.uniform(0.0, 2.0, size=200):
            assert converter_loss(float(i_c), RECTIFIER,
                                  TABLE_RECT) >= 0.011
            assert converter_loss(float(i_c), INVERTER, TABLE_INV) >= 0.011


class TestConverterCoupling:
    def test_zero_transfer_pins_no_load_loss(self, three_terminal):
        settings = {c.id: ConverterSetting(mode=ConverterMode.FREE)
                    for c in three_terminal.converters}
        system = OpfEquations(three_terminal, settings)
        lay = system.layout
        x = system.flat_start()
        conv = three_terminal.converters[0]
        for kind, val in ((Slot.PC, 0.0), (Slot.QC, 0.0), (Slot.IC, 0.0),
                          (Slot.PLOSS, 0.011), (Slot.PDC, -0.011)):
            x[lay.slot(kind, conv.id)] = val
        r_couple, r_balance = system.converter_coupling_residual(x, conv.id)
        assert r_couple == pytest.approx(0.0, abs=1e-14)
        assert r_balance == pytest.approx(0.0, abs=1e-14)

    def test_apparent_power_magnitude(self, three_terminal):
        settings = {c.id: ConverterSetting(mode=ConverterMode.FREE)
                    for c in three_terminal.converters}
        system = OpfEquations(three_terminal, settings)
        lay = system.layout
        conv = three_terminal.converters[0]
        x = system.flat_start()
        x[lay.slot(Slot.U, conv.ac_bus)] = 1.0
        x[lay.slot(Slot.PC, conv.id)] = 0.6
        x[lay.slot(Slot.QC, conv.id)] = 0.8
        x[lay.slot(Slot.IC, conv.id)] = 1.0
        r_couple, _ = system.converter_coupling_residual(x, conv.id)
        assert r_couple == pytest.approx(0.0, abs=1e-14)

    def test_coupling_homogeneity(self, three_terminal):
        # scaling (P, Q) by t at fixed U scales the current solution by t
        settings = {c.id: ConverterSetting(mode=ConverterMode.FREE)
                    for c in three_terminal.converters}
        system = OpfEquations(three_terminal, settings)
        lay = system.layout
        conv = three_terminal.converters[0]
        rng = np.random.default_rng(5)
        for _ in range(20):
            p, q, t = rng.uniform(0.1, 0.8, size=3)
            x = system.flat_start()
            x[lay.slot(Slot.U, conv.ac_bus)] = 1.0
            x[lay.slot(Slot.PC, conv.id)] = p
            x[lay.slot(Slot.QC, conv.id)] = q
            x[lay.slot(Slot.IC, conv.id)] = math.hypot(p, q)
            r0, _ = system.converter_coupling_residual(x, conv.id)
            assert r0 == pytest.approx(0.0, abs=1e-12)
            x[lay.slot(Slot.PC, conv.id)] = t * p
            x[lay.slot(Slot.QC, conv.id)] = t * q
            x[lay.slot(Slot.IC, conv.id)] = t * math.hypot(p, q)
            r1, _ = system.converter_coupling_residual(x, conv.id)
            assert r1 == pytest.approx(0.0, abs=1e-12)


class TestControlLaw:
    def _system(self, case, mode, **kw):
        settings = {c.id: ConverterSetting(mode=mode, **kw)
                    for c in case.converters}
        return OpfEquations(case, settings)

    def test_droop_zero_deviation(self, three_terminal):
        system = self._system(three_terminal, ConverterMode.DROOP_FIXED,
                              p_ref=0.25, u_ref=1.0, k_droop=0.2)
        lay = system.layout
        conv = three_terminal.converters[0]
        x = system.flat_start()
        x[lay.slot(Slot.UDC, conv.dc_bus)] = 1.0
        x[lay.slot(Slot.PDC, conv.id)] = 0.25
        assert system.control_law_residual(x, conv.id) == pytest.approx(
            0.0, abs=1e-14)
        x[lay.slot(Slot.PDC, conv.id)] = 0.3
        assert system.control_law_residual(x, conv.id) != pytest.approx(
            0.0, abs=1e-6)

    def test_droop_rearrangement(self, three_terminal):
        # k = 0.5, u_ref = 1, p_ref = 0.5, U = 1.05: law holds iff P = 0.4
        system = self._system(three_terminal, ConverterMode.DROOP_FIXED,
                              p_ref=0.5, u_ref=1.0, k_droop=0.5)
        lay = system.layout
        conv = three_terminal.converters[0]
        x = system.flat_start()
        x[lay.slot(Slot.UDC, conv.dc_bus)] = 1.05
        x[lay.slot(Slot.PDC, conv.id)] = 0.4
        assert system.control_law_residual(x, conv.id) == pytest.approx(
            0.0, abs=1e-14)
        x[lay.slot(Slot.PDC, conv.id)] = 0.5
        assert abs(system.control_law_residual(x, conv.id)) > 1e-3

    def test_p_control_ignores_voltage(self, three_terminal):
        system = self._system(three_terminal, ConverterMode.P_FIXED,
                              p_ref=0.3)
        lay = system.layout
        conv = three_terminal.converters[0]
        for udc in (0.92, 1.0, 1.08):
            x = system.flat_start()
            x[lay.slot(Slot.UDC, conv.dc_bus)] = udc
            x[lay.slot(Slot.PDC, conv.id)] = 0.3
            assert system.control_law_residual(x, conv.id) == pytest.approx(
                0.0, abs=1e-14)

    def test_out_of_range_gain_rejected_at_build(self, three_terminal):
        with pytest.raises(Exception) as err:
            self._system(three_terminal, ConverterMode.DROOP_FIXED,
                         p_ref=0.0, u_ref=1.0, k_droop=0.7)
        assert "0.7" in str(err.value)

    def test_mode_equivalence_at_anchor(self, three_terminal):
        # a droop law anchored at the operating point is satisfied exactly
        # when the matching p-control law is
        lay_args = dict(p_ref=0.31, u_ref=1.013)
        droop = self._system(three_terminal, ConverterMode.DROOP_FIXED,
                             k_droop=0.2, **lay_args)
        pctl = self._system(three_terminal, ConverterMode.P_FIXED,
                            **lay_args)
        conv = three_terminal.converters[0]
        x = droop.flat_start()
        x[droop.layout.slot(Slot.UDC, conv.dc_bus)] = 1.013
        x[droop.layout.slot(Slot.PDC, conv.id)] = 0.31
        assert droop.control_law_residual(x, conv.id) == pytest.approx(
            0.0, abs=1e-14)
        y = pctl.flat_start()
        y[pctl.layout.slot(Slot.UDC, conv.dc_bus)] = 1.013
        y[pctl.layout.slot(Slot.PDC, conv.id)] = 0.31
        assert pctl.control_law_residual(y, conv.id) == pytest.approx(
            0.0, abs=1e-14)


class TestObjectives:
    def test_single_generator_square(self, ac_small):
        system = OpfEquations(ac_small)
        x = system.flat_start()
        x[system.ipg] = 0.0
        x[system.ipg[0]] = 2.0
        gen = ac_small.generators[0]
        expected = gen.cost_alpha * 4.0 + gen.cost_beta * 2.0
        assert system.objective_cost(x) == pytest.approx(expected)

    def test_all_zero_output_gives_constant_terms(self, ac_small):
        system = OpfEquations(ac_small)
        x = system.flat_start()
        x[system.ipg] = 0.0
        assert system.objective_cost(x) == pytest.approx(
            sum(g.cost_gamma for g in ac_small.generators))

    def test_two_generator_substitution(self):
        text = MINIMAL.replace(
            "[generator]\n1 0.0 1.0 -0.5 0.5 100.0 2000.0 0.0",
            "[generator]\n1 0.0 1.0 -0.5 0.5 2.0 1.0 0.5\n"
            "2 0.0 2.0 -0.5 0.5 1.0 0.0 1.0")
        case = parse_case_text(text)
        system = OpfEquations(case)
        x = system.flat_start()
        x[system.ipg[0]] = 0.5
        x[system.ipg[1]] = 1.0
        assert system.objective_cost(x) == pytest.approx(3.5)

    def test_vdev_values(self, three_terminal):
        settings = {c.id: ConverterSetting(mode=ConverterMode.FREE)
                    for c in three_terminal.converters}
        system = OpfEquations(three_terminal, settings)
        x = system.flat_start()
        assert system.objective_vdev(x) == pytest.approx(0.0)
        lay = system.layout
        x[lay.slot(Slot.UDC, 1)] = 1.01
        x[lay.slot(Slot.UDC, 2)] = 0.99
        assert system.objective_vdev(x) == pytest.approx(2e-4)

    def test_vdev_permutation_invariant(self, three_terminal):
        settings = {c.id: ConverterSetting(mode=ConverterMode.FREE)
                    for c in three_terminal.converters}
        system = OpfEquations(three_terminal, settings)
        lay = system.layout
        vals = [1.02, 0.97, 1.05]
        results = set()
        import itertools
        for perm in itertools.permutations(vals):
            x = system.flat_start()
            for bus, v in zip(three_terminal.dc_buses, perm):
                x[lay.slot(Slot.UDC, bus.id)] = v
            results.add(round(system.objective_vdev(x), 15))
        assert len(results) == 1


class TestJacobian:
    @pytest.mark.parametrize("build", [
        lambda case: {c.id: ConverterSetting(mode=ConverterMode.FREE)
                      for c in case.converters},
        lambda case: {c.id: ConverterSetting(
            mode=ConverterMode.DROOP_VARIABLE, p_ref=0.1, u_ref=1.0)
            for c in case.converters},
        lambda case: {
            1: ConverterSetting(mode=ConverterMode.P_FIXED, p_ref=0.2),
            2: ConverterSetting(mode=ConverterMode.V_FIXED, u_ref=1.01),
            3: ConverterSetting(mode=ConverterMode.DROOP_FIXED, p_ref=0.1,
                                u_ref=1.0, k_droop=0.2)},
    ])
    def test_matches_finite_differences(self, three_terminal, build):
        system = OpfEquations(three_terminal, build(three_terminal))
        rng = np.random.default_rng(42)
        for _ in range(10):
            x = random_in_bounds(system, rng)
            J = system.jacobian_dense(x)
            Jfd = fd_jacobian(system, x)
            assert np.allclose(J, Jfd, rtol=1e-6, atol=1e-8)

    def test_p_control_row_independent_of_voltage(self, three_terminal):
        settings = {c.id: ConverterSetting(mode=ConverterMode.P_FIXED,
                                           p_ref=0.2)
                    for c in three_terminal.converters}
        system = OpfEquations(three_terminal, settings)
        x = system.flat_start()
        J = system.jacobian_dense(x)
        row = 2 * system.n_ac + system.n_dc + 3 * len(
            three_terminal.converters)
        for bus in three_terminal.dc_buses:
            col = system.layout.slot(Slot.UDC, bus.id)
            assert J[row, col] == 0.0

    def test_ac_row_sparsity_is_local(self, three_terminal):
        system = OpfEquations(three_terminal)
        x = system.flat_start()
        x[system.ith] = np.linspace(0.0, 0.05, system.n_ac)
        J = system.jacobian_dense(x)
        neighbors = {b.id: {b.id} for b in three_terminal.ac_buses}
        for br in three_terminal.ac_branches:
            neighbors[br.from_bus].add(br.to_bus)
            neighbors[br.to_bus].add(br.from_bus)
        for i, bus in enumerate(three_terminal.ac_buses):
            row = J[i]
            for j, other in enumerate(three_terminal.ac_buses):
                if other.id not in neighbors[bus.id]:
                    assert row[system.iu[j]] == 0.0
                    assert row[system.ith[j]] == 0.0

    def test_returns_sparse_matrix(self, three_terminal):
        system = OpfEquations(three_terminal)
        x = system.flat_start()
        J = system.jacobian(x)
        assert hasattr(J, "toarray")
        assert np.allclose(J.toarray(), system.jacobian_dense(x))


def test_conservation_identity_at_feasible_point(three_terminal):
    # at any point with small residuals the recomputed branch-wise sums
    # close: generation = load + ac losses + net transfer, dc injections =
    # dc line losses
    from mtdcopf.nlp import OpfProblem, solve
    from mtdcopf.strategy import default_stage_options

    settings = {c.id: ConverterSetting(mode=ConverterMode.FREE)
                for c in three_terminal.converters}
    system = OpfEquations(three_terminal, settings)
    sol = solve(OpfProblem.from_system(system, "cost"),
                default_stage_options())
    assert sol.converged
    bal = power_balance(system, sol.x)
    n_eps = system.m * max(sol.max_residual, 1e-12)
    assert abs(bal.ac_mismatch) <= max(n_eps, 1e-9)
    assert abs(bal.dc_mismatch) <= max(n_eps, 1e-9)
