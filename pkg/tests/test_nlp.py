import numpy as np
import pytest

from mtdcopf.equations import ConverterMode, ConverterSetting, OpfEquations
from mtdcopf.nlp import (OpfProblem, SolverError, SolverOptions, SolveStatus,
                         kkt_report, solve)
from mtdcopf.strategy import default_stage_options


def bound_qp(x0=3.0):
    """min x^2 subject to x >= 1; the KKT solution is x = 1, z = 2."""
    return OpfProblem(
        n=1, lb=np.array([1.0]), ub=np.array([np.inf]),
        x0=np.array([x0]),
        residual=lambda x: np.zeros(0),
        jacobian=lambda x: np.zeros((0, 1)),
        objective=lambda x: float(x[0] ** 2),
        gradient=lambda x: 2.0 * x,
        hess_diag=lambda x: np.array([2.0]))


def equality_qp():
    """min (x-2)^2 + (y-1)^2 s.t. x + y = 1; solution (1, 0), lam = -2."""
    return OpfProblem(
        n=2, lb=np.full(2, -np.inf), ub=np.full(2, np.inf),
        x0=np.zeros(2),
        residual=lambda x: np.array([x[0] + x[1] - 1.0]),
        jacobian=lambda x: np.array([[1.0, 1.0]]),
        objective=lambda x: float((x[0] - 2.0) ** 2 + (x[1] - 1.0) ** 2),
        gradient=lambda x: np.array([2.0 * (x[0] - 2.0),
                                     2.0 * (x[1] - 1.0)]),
        hess_diag=lambda x: np.full(2, 2.0))


def contradictory():
    return OpfProblem(
        n=1, lb=np.array([-np.inf]), ub=np.array([np.inf]),
        x0=np.array([0.2]),
        residual=lambda x: np.array([x[0], x[0] - 1.0]),
        jacobian=lambda x: np.array([[1.0], [1.0]]),
        objective=lambda x: 0.0,
        gradient=lambda x: np.zeros(1),
        hess_diag=lambda x: np.zeros(1))


TIGHT = SolverOptions(tol_feas=1e-8, tol_opt=1e-8)


class TestAnalyticProblems:
    def test_bound_qp(self):
        sol = solve(bound_qp(), TIGHT)
        assert sol.status == SolveStatus.CONVERGED
        assert sol.x[0] == pytest.approx(1.0, abs=1e-8)
        assert sol.z_lower[0] == pytest.approx(2.0, abs=1e-6)

    def test_equality_qp(self):
        sol = solve(equality_qp(), TIGHT)
        assert sol.status == SolveStatus.CONVERGED
        assert sol.x == pytest.approx(np.array([1.0, 0.0]), abs=1e-8)
        assert sol.lam[0] == pytest.approx(-2.0, abs=1e-6)

    def test_contradictory_equalities_infeasible(self):
        sol = solve(contradictory())
        assert sol.status == SolveStatus.INFEASIBLE
        assert sol.x[0] == pytest.approx(0.5, abs=1e-4)
        assert sol.max_residual == pytest.approx(0.5, abs=1e-4)
        assert "stall" in sol.message or "violation" in sol.message


class TestKktReport:
    def test_converged_qp_scalars_small(self):
        prob = bound_qp()
        sol = solve(prob, TIGHT)
        rep = kkt_report(prob, sol)
        assert rep.feasibility <= 1e-6
        assert rep.stationarity <= 1e-6
        assert rep.complementarity <= 1e-6

    def test_perturbation_detected(self):
        prob = equality_qp()
        sol = solve(prob, TIGHT)
        sol.x = sol.x + 0.1
        rep = kkt_report(prob, sol)
        assert max(rep.feasibility, rep.stationarity) > 1e-3

    def test_infeasible_certificate_consistent(self):
        prob = contradictory()
        sol = solve(prob)
        rep = kkt_report(prob, sol)
        assert rep.feasibility == pytest.approx(sol.max_residual, rel=1e-12)

    def test_converged_within_ten_times_tolerance(self, three_terminal):
        settings = {c.id: ConverterSetting(mode=ConverterMode.FREE)
                    for c in three_terminal.converters}
        system = OpfEquations(three_terminal, settings)
        prob = OpfProblem.from_system(system, "cost")
        options = default_stage_options()
        sol = solve(prob, options)
        assert sol.status == SolveStatus.CONVERGED
        rep = kkt_report(prob, sol)
        assert rep.feasibility <= 10.0 * options.tol_feas
        assert rep.stationarity <= 10.0 * options.tol_opt
        assert rep.complementarity <= 10.0 * options.tol_opt


class TestDeterminism:
    def test_identical_runs_bitwise(self, three_terminal):
        settings = {c.id: ConverterSetting(mode=ConverterMode.FREE)
                    for c in three_terminal.converters}

        def run():
            system = OpfEquations(three_terminal, settings)
            prob = OpfProblem.from_system(system, "cost")
            return solve(prob, SolverOptions(tol_feas=1e-9, tol_opt=1e-5,
                                             trace=True))

        a, b = run(), run()
        assert a.iterations == b.iterations
        assert np.array_equal(a.x, b.x)
        assert np.array_equal(a.lam, b.lam)
        for ta, tb in zip(a.trace, b.trace):
            if "x" in ta:
                assert np.array_equal(ta["x"], tb["x"])


class TestIterateBehaviour:
    def test_barrier_monotone_and_iterates_interior(self, three_terminal):
        settings = {c.id: ConverterSetting(mode=ConverterMode.FREE)
                    for c in three_terminal.converters}
        system = OpfEquations(three_terminal, settings)
        prob = OpfProblem.from_system(system, "cost")
        sol = solve(prob, SolverOptions(tol_feas=1e-9, tol_opt=1e-5,
                                        trace=True))
        assert sol.status == SolveStatus.CONVERGED
        lb, ub = prob.lb, prob.ub
        fixed = lb == ub
        mus = [t["mu"] for t in sol.trace if "mu" in t]
        assert all(m2 <= m1 + 1e-15 for m1, m2 in zip(mus, mus[1:]))
        for t in sol.trace:
            if "x" not in t:
                continue
            x = t["x"]
            free = ~fixed
            has_lb = np.isfinite(lb) & free
            has_ub = np.isfinite(ub) & free
            assert np.all(x[has_lb] > lb[has_lb])
            assert np.all(x[has_ub] < ub[has_ub])

    def test_converged_meets_advertised_tolerances(self, three_terminal):
        settings = {c.id: ConverterSetting(mode=ConverterMode.FREE)
                    for c in three_terminal.converters}
        system = OpfEquations(three_terminal, settings)
        prob = OpfProblem.from_system(system, "cost")
        options = default_stage_options()
        sol = solve(prob, options)
        assert sol.status == SolveStatus.CONVERGED
        assert sol.max_residual <= options.tol_feas
        assert sol.kkt_stationarity <= options.tol_opt


class TestProblemValidation:
    def test_dimension_mismatch(self):
        with pytest.raises(SolverError):
            OpfProblem(
                n=2, lb=np.zeros(1), ub=np.ones(2), x0=np.zeros(2),
                residual=lambda x: np.zeros(0),
                jacobian=lambda x: np.zeros((0, 2)),
                objective=lambda x: 0.0,
                gradient=lambda x: np.zeros(2),
                hess_diag=lambda x: np.zeros(2))

    def test_crossed_bounds(self):
        with pytest.raises(SolverError):
            OpfProblem(
                n=1, lb=np.array([2.0]), ub=np.array([1.0]),
                x0=np.zeros(1),
                residual=lambda x: np.zeros(0),
                jacobian=lambda x: np.zeros((0, 1)),
                objective=lambda x: 0.0,
                gradient=lambda x: np.zeros(1),
                hess_diag=lambda x: np.zeros(1))

    def test_non_finite_residual_named(self):
        prob = OpfProblem(
            n=1, lb=np.array([-np.inf]), ub=np.array([np.inf]),
            x0=np.array([1.0]),
            residual=lambda x: np.array([np.nan]),
            jacobian=lambda x: np.ones((1, 1)),
            objective=lambda x: 0.0,
            gradient=lambda x: np.zeros(1),
            hess_diag=lambda x: np.zeros(1),
            residual_labels=["broken constraint"])
        with pytest.raises(SolverError) as err:
            solve(prob)
        assert "broken constraint" in str(err.value)

    def test_initial_point_projected_into_bounds(self):
        prob = bound_qp(x0=-5.0)
        sol = solve(prob, TIGHT)
        assert sol.status == SolveStatus.CONVERGED
        assert sol.x[0] == pytest.approx(1.0, abs=1e-8)


class TestLinearSolverSwitch:
    def test_sparse_path_matches_dense(self, three_terminal):
        settings = {c.id: ConverterSetting(mode=ConverterMode.FREE)
                    for c in three_terminal.converters}
        system = OpfEquations(three_terminal, settings)
        dense = solve(OpfProblem.from_system(system, "cost"),
                      SolverOptions(tol_feas=1e-8, tol_opt=1e-4,
                                    linear_solver="dense"))
        system2 = OpfEquations(three_terminal, settings)
        sparse = solve(OpfProblem.from_system(system2, "cost"),
                       SolverOptions(tol_feas=1e-8, tol_opt=1e-4,
                                     linear_solver="sparse"))
        assert dense.status == SolveStatus.CONVERGED
        assert sparse.status == SolveStatus.CONVERGED
        assert dense.objective_value == pytest.approx(
            sparse.objective_value, rel=1e-6)
