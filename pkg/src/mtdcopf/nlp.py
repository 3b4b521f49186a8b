"""Primal-dual interior-point solver for equality-constrained NLPs.

Solves problems of the form::

    min f(x)   s.t.  c(x) = 0,  lb <= x <= ub

which is exactly the shape of every OPF stage: the physics and control
laws are smooth equality residuals and the operating limits are simple
bounds.  The method is a conventional monotone barrier scheme: Newton
steps on the perturbed KKT system, inertia-corrected symmetric solves,
a fraction-to-boundary rule (tau = 0.995) and a monotone Armijo line
search on an l1 merit function.  Second derivatives of the Lagrangian
are approximated by finite differences of the analytic constraint
Jacobian; the objective Hessian (diagonal for both OPF objectives) is
analytic.

Slots with equal lower and upper bounds are treated as fixed
parameters: they are pinned to their value and removed from the barrier
and from the stationarity measure.

A feasibility-restoration phase (Gauss-Newton on ``0.5*||c||^2`` inside
the bounds) takes over when the main line search fails.  If restoration
stalls, the solver returns an ``infeasible`` verdict whose certificate
is the least-violating point seen.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .equations import OpfEquations


class SolverError(Exception):
    """Structural failure: dimension mismatch or non-finite evaluation."""


class SolveStatus:
    CONVERGED = "converged"
    INFEASIBLE = "infeasible"
    ITERATION_LIMIT = "iteration_limit"


@dataclass
class SolverOptions:
    tol_feas: float = 1e-6
    tol_opt: float = 1e-6
    max_iter: int = 300
    mu_init: float = 0.1
    mu_min: float | None = None        # default tol_opt / 20
    kappa_mu: float = 0.2
    theta_mu: float = 1.5
    kappa_eps: float = 10.0
    tau: float = 0.995
    armijo_eta: float = 1e-4
    max_backtracks: int = 30
    fd_step: float = 1e-6
    linear_solver: str = "auto"        # auto | dense | sparse
    dense_limit: int = 500
    stall_window: int = 10
    stall_tol: float = 1e-10
    cap_violation: float = 1e-4
    obj_scale_target: float = 100.0
    trace: bool = False

    def resolved_mu_min(self, problem: "OpfProblem | None" = None):
        if self.mu_min is not None:
            return self.mu_min
        base = self.tol_opt / 20.0
        if problem is None:
            return base
        bounded = np.any(np.isfinite(problem.lb) & (problem.lb != problem.ub)
                         ) or np.any(np.isfinite(problem.ub)
                                     & (problem.lb != problem.ub))
        if problem.m > 0 and bounded:
            # finite-difference Hessian noise (~1e-8) must stay below the
            # barrier curvature mu/slack^2 of interior slots, else the
            # inertia test flaps at the barrier floor
            return max(base, 1e-7)
        return base


@dataclass
class OpfProblem:
    """Flattened NLP: residuals as equalities, per-slot bounds, objective."""

    n: int
    lb: np.ndarray
    ub: np.ndarray
    x0: np.ndarray
    residual: Callable[[np.ndarray], np.ndarray]
    jacobian: Callable[[np.ndarray], np.ndarray]
    objective: Callable[[np.ndarray], float]
    gradient: Callable[[np.ndarray], np.ndarray]
    hess_diag: Callable[[np.ndarray], np.ndarray]
    residual_labels: Sequence[str] = ()
    objective_kind: str = "cost"
    system: OpfEquations | None = None

    def __post_init__(self):
        self.lb = np.asarray(self.lb, dtype=float)
        self.ub = np.asarray(self.ub, dtype=float)
        self.x0 = np.asarray(self.x0, dtype=float)
        if self.lb.shape != (self.n,) or self.ub.shape != (self.n,):
            raise SolverError("bound arrays do not match problem dimension")
        if self.x0.shape != (self.n,):
            raise SolverError("initial point does not match problem dimension")
        if np.any(self.lb > self.ub):
            bad = int(np.argmax(self.lb > self.ub))
            raise SolverError(f"lower bound above upper bound at slot {bad}")
        self.m = len(self.residual(self.x0))

    @classmethod
    def from_system(cls, system: OpfEquations, objective: str,
                    x0: np.ndarray | None = None) -> "OpfProblem":
        lb, ub = system.bounds()
        if objective == "cost":
            obj, grad, hess = (system.objective_cost, system.cost_gradient,
                               system.cost_hess_diag)
        elif objective == "vdev":
            obj, grad, hess = (system.objective_vdev, system.vdev_gradient,
                               system.vdev_hess_diag)
        else:
            raise SolverError(f"unknown objective {objective!r}")
        start = system.flat_start() if x0 is None else np.asarray(x0, float)
        return cls(n=system.layout.n, lb=lb, ub=ub, x0=start,
                   residual=system.residual_vector,
                   jacobian=system.jacobian_dense,
                   objective=obj, gradient=grad, hess_diag=hess,
                   residual_labels=system.residual_labels(),
                   objective_kind=objective, system=system)


@dataclass
class OpfSolution:
    x: np.ndarray
    lam: np.ndarray
    z_lower: np.ndarray
    z_upper: np.ndarray
    objective_value: float
    max_residual: float
    kkt_stationarity: float
    kkt_complementarity: float
    status: str
    iterations: int
    mu_final: float
    message: str = ""
    trace: list | None = None

    @property
    def converged(self):
        return self.status == SolveStatus.CONVERGED


@dataclass
class KktReport:
    feasibility: float
    stationarity: float
    complementarity: float

    def max_error(self):
        return max(self.feasibility, self.stationarity, self.complementarity)


def kkt_report(problem: OpfProblem, solution: OpfSolution,
               options: "SolverOptions | None" = None) -> KktReport:
    """Recompute KKT scalars from scratch, independent of solver state.

    Feasibility is ``max|c(x)|``, stationarity the infinity norm of
    ``grad f - J^T lam - z_L + z_U`` over non-fixed slots (in the same
    deterministic objective scaling the solver derives from the problem),
    and complementarity ``max |z * slack|`` over finite bounds.
    """
    x = solution.x
    fixed = problem.lb == problem.ub
    c = problem.residual(x)
    feas = float(np.max(np.abs(c))) if c.size else 0.0
    target = (options or SolverOptions()).obj_scale_target
    s_obj = _objective_scale(problem, target)
    r = s_obj * problem.gradient(x)
    if c.size:
        J = np.asarray(problem.jacobian(x))
        r -= J.T @ solution.lam
    r -= solution.z_lower
    r += solution.z_upper
    stat = float(np.max(np.abs(r[~fixed]))) if np.any(~fixed) else 0.0
    has_lb = np.isfinite(problem.lb) & ~fixed
    has_ub = np.isfinite(problem.ub) & ~fixed
    comp = 0.0
    if np.any(has_lb):
        comp = max(comp, float(np.max(np.abs(
            solution.z_lower[has_lb] * (x - problem.lb)[has_lb]))))
    if np.any(has_ub):
        comp = max(comp, float(np.max(np.abs(
            solution.z_upper[has_ub] * (problem.ub - x)[has_ub]))))
    return KktReport(feasibility=feas, stationarity=stat, complementarity=comp)


# ---------------------------------------------------------------------------
# solver internals
# ---------------------------------------------------------------------------

def _project_interior(x, lb, ub, fixed):
    """Push the start strictly inside its bounds (kappa = 1e-2 rule)."""
    x = x.copy()
    kappa = 1e-2
    for i in range(x.size):
        if fixed[i]:
            x[i] = lb[i]
            continue
        lo, hi = lb[i], ub[i]
        if np.isfinite(lo) and np.isfinite(hi):
            pad = min(kappa * max(1.0, abs(lo)), kappa * (hi - lo))
            x[i] = min(max(x[i], lo + pad), hi - pad)
        elif np.isfinite(lo):
            x[i] = max(x[i], lo + kappa * max(1.0, abs(lo)))
        elif np.isfinite(hi):
            x[i] = min(x[i], hi - kappa * max(1.0, abs(hi)))
    return x


def _check_finite(vec, what, labels=None):
    vec = np.asarray(vec)
    if np.all(np.isfinite(vec)):
        return
    idx = int(np.argmax(~np.isfinite(np.atleast_1d(vec).ravel())))
    name = ""
    if labels is not None and idx < len(labels):
        name = f" ({labels[idx]})"
    raise SolverError(f"non-finite {what} at entry {idx}{name}")


def _ldl_inertia_solve(K, rhs):
    """Bunch-Kaufman LDL^T: returns (solution, (pos, neg, zero)).

    Inertia comes from the signs of the block-diagonal D factor, which
    is robust to the wild diagonal scaling the barrier terms introduce.
    """
    lu, d, perm = scipy.linalg.ldl(K)
    n = K.shape[0]
    pos = neg = zero = 0
    dtol = 1e-14 * max(1.0, float(np.max(np.abs(d))))
    i = 0
    while i < n:
        if i + 1 < n and abs(d[i, i + 1]) > dtol:
            a, b, c = d[i, i], d[i + 1, i + 1], d[i, i + 1]
            det = a * b - c * c
            if det < 0.0:
                pos += 1
                neg += 1
            elif det > 0.0:
                if a + b > 0.0:
                    pos += 2
                else:
                    neg += 2
            else:
                zero += 1
                if a + b > dtol:
                    pos += 1
                elif a + b < -dtol:
                    neg += 1
                else:
                    zero += 1
            i += 2
        else:
            if d[i, i] > dtol:
                pos += 1
            elif d[i, i] < -dtol:
                neg += 1
            else:
                zero += 1
            i += 1
    sol = None
    if zero == 0:
        L = lu[perm, :]
        w = scipy.linalg.solve_triangular(L, rhs[perm], lower=True,
                                          unit_diagonal=True)
        y = np.empty_like(w)
        i = 0
        while i < n:
            if i + 1 < n and abs(d[i, i + 1]) > dtol:
                blk = d[i:i + 2, i:i + 2]
                y[i:i + 2] = scipy.linalg.solve(blk, w[i:i + 2])
                i += 2
            else:
                y[i] = w[i] / d[i, i]
                i += 1
        v = scipy.linalg.solve_triangular(L.T, y, lower=False,
                                          unit_diagonal=True)
        sol = np.empty_like(v)
        sol[perm] = v
    return sol, (pos, neg, zero)


def _objective_scale(problem: OpfProblem, target: float) -> float:
    """Gradient-based objective scaling factor at the projected start."""
    if target <= 0:
        return 1.0
    fixed = problem.lb == problem.ub
    x = _project_interior(problem.x0, problem.lb, problem.ub, fixed)
    gmax = float(np.max(np.abs(problem.gradient(x)), initial=0.0))
    return 1.0 if gmax <= target else target / gmax


class _Workspace:
    """Mutable state of one solve; owns nothing shared."""

    def __init__(self, problem: OpfProblem, options: SolverOptions):
        self.p = problem
        self.o = options
        self.s_obj = _objective_scale(problem, options.obj_scale_target)
        self.fixed = problem.lb == problem.ub
        self.free = ~self.fixed
        self.has_lb = np.isfinite(problem.lb) & self.free
        self.has_ub = np.isfinite(problem.ub) & self.free
        self.x = _project_interior(problem.x0, problem.lb, problem.ub,
                                   self.fixed)
        self.m = problem.m
        self.lam = np.zeros(self.m)
        mu = options.mu_init
        self.z_l = np.zeros(problem.n)
        self.z_u = np.zeros(problem.n)
        self.z_l[self.has_lb] = mu / (self.x - problem.lb)[self.has_lb]
        self.z_u[self.has_ub] = mu / (problem.ub - self.x)[self.has_ub]
        self.mu = mu
        self.nu = 1.0
        self.delta_w_last = 0.0
        self.iters = 0
        self.reset_pending = False
        self.best_kkt = None     # (score, x, lam, z_l, z_u, feas, stat, comp)
        self.trace = [] if options.trace else None
        self.best_x = self.x.copy()
        self.best_viol = self._violation(self.x)
        self.use_dense = (options.linear_solver == "dense" or
                          (options.linear_solver == "auto"
                           and problem.n + self.m <= options.dense_limit))
        self._init_multipliers()

    # -- helpers -----------------------------------------------------------

    def _obj(self, x):
        return self.s_obj * self.p.objective(x)

    def _grad(self, x):
        return self.s_obj * self.p.gradient(x)

    def _hess_diag(self, x):
        return self.s_obj * self.p.hess_diag(x)

    def _violation(self, x):
        c = self.p.residual(x)
        return float(np.max(np.abs(c))) if c.size else 0.0

    def _init_multipliers(self):
        """Least-squares equality multipliers at the start point."""
        if self.m == 0:
            return
        J = np.asarray(self.p.jacobian(self.x))
        g = self._grad(self.x) - self.z_l + self.z_u
        try:
            lam, *_ = np.linalg.lstsq(J[:, self.free].T, g[self.free],
                                      rcond=None)
        except np.linalg.LinAlgError:
            return
        if np.all(np.isfinite(lam)) and np.max(np.abs(lam), initial=0.0) <= 1e3:
            self.lam = lam

    def _errors(self, x, lam, z_l, z_u, mu):
        p = self.p
        c = p.residual(x)
        feas = float(np.max(np.abs(c))) if c.size else 0.0
        r = self._grad(x)
        if c.size:
            r -= np.asarray(p.jacobian(x)).T @ lam
        r -= z_l
        r += z_u
        stat = float(np.max(np.abs(r[self.free]))) if np.any(self.free) else 0.0
        comp = 0.0
        if np.any(self.has_lb):
            comp = max(comp, float(np.max(np.abs(
                z_l[self.has_lb] * (x - p.lb)[self.has_lb] - mu))))
        if np.any(self.has_ub):
            comp = max(comp, float(np.max(np.abs(
                z_u[self.has_ub] * (p.ub - x)[self.has_ub] - mu))))
        return feas, stat, comp

    def _lagrangian_hessian(self, x, J0, lam):
        """FD-of-Jacobian Hessian plus the analytic objective diagonal.

        Central differences of the analytic Jacobian keep the error at
        O(h^2), well below the solver tolerances.
        """
        p, n = self.p, self.p.n
        H = np.diag(self._hess_diag(x))
        if self.m == 0 or not np.any(lam):
            return H
        Hc = np.zeros((n, n))
        for i in np.flatnonzero(self.free):
            h = self.o.fd_step * (1.0 + abs(x[i]))
            xp = x.copy()
            xp[i] += h
            xm = x.copy()
            xm[i] -= h
            Hc[:, i] = (np.asarray(self.p.jacobian(xp)).T @ lam
                        - np.asarray(self.p.jacobian(xm)).T @ lam) / (2.0 * h)
        # constraint curvature enters with a minus under the convention
        # r_stat = grad f - J^T lam - z_L + z_U
        H -= 0.5 * (Hc + Hc.T)
        return H

    def _barrier_gradient(self, x, mu):
        g = self._grad(x)
        sl = np.where(self.has_lb, x - self.p.lb, 1.0)
        su = np.where(self.has_ub, self.p.ub - x, 1.0)
        g[self.has_lb] -= mu / sl[self.has_lb]
        g[self.has_ub] += mu / su[self.has_ub]
        return g

    def _merit(self, x, mu, nu):
        c = self.p.residual(x)
        val = self._obj(x)
        if np.any(self.has_lb):
            sl = (x - self.p.lb)[self.has_lb]
            if np.any(sl <= 0):
                return np.inf
            val -= mu * float(np.sum(np.log(sl)))
        if np.any(self.has_ub):
            su = (self.p.ub - x)[self.has_ub]
            if np.any(su <= 0):
                return np.inf
            val += -mu * float(np.sum(np.log(su)))
        if c.size:
            val += nu * float(np.sum(np.abs(c)))
        return val

    def _fraction_to_boundary(self, x, dx):
        tau = self.o.tau
        alpha = 1.0
        for i in np.flatnonzero(self.has_lb):
            if dx[i] < 0.0:
                alpha = min(alpha, -tau * (x[i] - self.p.lb[i]) / dx[i])
        for i in np.flatnonzero(self.has_ub):
            if dx[i] > 0.0:
                alpha = min(alpha, tau * (self.p.ub[i] - x[i]) / dx[i])
        return alpha

    def _dual_fraction(self, z, dz, mask):
        tau = self.o.tau
        alpha = 1.0
        for i in np.flatnonzero(mask):
            if dz[i] < 0:
                alpha = min(alpha, -tau * z[i] / dz[i])
        return alpha

    def _solve_kkt(self, W, J, rhs_x, rhs_c, step_cap=np.inf):
        """Inertia-corrected symmetric solve; returns (dx, dlam).

        Directions far longer than ``step_cap`` indicate near-singular
        curvature (degenerate slots wandering a flat manifold); they are
        treated like wrong inertia and regularized away.
        """
        p, o = self.p, self.o
        n, m = p.n, self.m
        delta_w = 0.0
        delta_c = 0.0
        attempts = 0
        while True:
            attempts += 1
            if attempts > 40:
                raise SolverError("inertia correction failed to stabilize")
            K = np.zeros((n + m, n + m))
            K[:n, :n] = W
            if delta_w:
                K[:n, :n] += delta_w * np.eye(n)
            if m:
                K[:n, n:] = J.T
                K[n:, :n] = J
                if delta_c:
                    K[n:, n:] = -delta_c * np.eye(m)
            for i in np.flatnonzero(self.fixed):
                K[i, :] = 0.0
                K[:, i] = 0.0
                K[i, i] = 1.0
            rhs = np.concatenate([np.where(self.fixed, 0.0, rhs_x), rhs_c])

            if self.use_dense:
                try:
                    sol, (pos, neg, zero) = _ldl_inertia_solve(K, rhs)
                except (scipy.linalg.LinAlgError, ValueError):
                    sol, zero = None, n + m
                    pos = neg = 0
                if sol is not None and pos == n and neg == m:
                    if float(np.max(np.abs(sol[:n]), initial=0.0)) <= step_cap:
                        return sol[:n], -sol[n:], delta_w
                elif zero > 0 and m:
                    delta_c = max(10.0 * delta_c, 1e-8)
                    continue
            else:
                # the sparse LU itself exposes no inertia; at desk scale
                # borrow the LDL^T inertia, beyond it fall back to a
                # conservative positive definite Hessian block
                if n + m <= o.dense_limit:
                    try:
                        _, (pos, neg, zero) = _ldl_inertia_solve(
                            K, np.zeros(n + m))
                        ok = (pos == n and neg == m)
                    except (scipy.linalg.LinAlgError, ValueError):
                        ok, zero = False, 1
                    if not ok and zero > 0 and m:
                        delta_c = max(10.0 * delta_c, 1e-8)
                        continue
                else:
                    try:
                        np.linalg.cholesky(K[:n, :n] + 1e-12 * np.eye(n))
                        ok = True
                    except np.linalg.LinAlgError:
                        ok = False
                if ok:
                    try:
                        lu = spla.splu(sp.csc_matrix(K))
                        sol = lu.solve(rhs)
                        ok = np.all(np.isfinite(sol))
                    except RuntimeError:
                        ok = False
                        if m and delta_c == 0.0:
                            delta_c = 1e-8
                if ok and float(np.max(np.abs(sol[:n]), initial=0.0)) <= step_cap:
                    return sol[:n], -sol[n:], delta_w

            if delta_w == 0.0:
                delta_w = (1e-4 if self.delta_w_last == 0.0
                           else max(1e-20, self.delta_w_last / 3.0))
            else:
                delta_w *= 8.0 if self.delta_w_last else 100.0
            if attempts > 5 and m:
                delta_c = max(10.0 * delta_c, 1e-8)
            if delta_w > 1e20:
                raise SolverError("KKT matrix could not be regularized")

    def record(self, **kv):
        if self.trace is not None:
            self.trace.append(kv)


def solve(problem: OpfProblem, options: SolverOptions | None = None
          ) -> OpfSolution:
    """Solve the NLP; always returns a solution object with a status.

    ``converged`` guarantees ``max|c| <= tol_feas`` and KKT stationarity
    and complementarity below ``tol_opt``.  ``infeasible`` carries the
    least-violating certificate point found before the restoration
    phase stalled.
    """
    o = options or SolverOptions()
    ws = _Workspace(problem, o)
    p = problem
    mu_min = o.resolved_mu_min(problem)
    message = ""

    while ws.iters < o.max_iter:
        ws.iters += 1
        c = p.residual(ws.x)
        _check_finite(c, "residual", p.residual_labels)
        J = np.asarray(p.jacobian(ws.x)) if ws.m else np.zeros((0, p.n))
        _check_finite(J, "jacobian", None)

        viol = float(np.max(np.abs(c))) if c.size else 0.0
        if viol < ws.best_viol:
            ws.best_viol = viol
            ws.best_x = ws.x.copy()

        feas, stat, comp0 = ws._errors(ws.x, ws.lam, ws.z_l, ws.z_u, 0.0)
        score = max(feas / o.tol_feas, stat / o.tol_opt, comp0 / o.tol_opt)
        if ws.best_kkt is None or score < ws.best_kkt[0]:
            ws.best_kkt = (score, ws.x.copy(), ws.lam.copy(), ws.z_l.copy(),
                           ws.z_u.copy(), feas, stat, comp0)
        ws.record(iter=ws.iters, mu=ws.mu, feas=feas, stat=stat, comp=comp0,
                  x=ws.x.copy(), nu=ws.nu, delta_w_last=ws.delta_w_last)
        if feas <= o.tol_feas and stat <= o.tol_opt and comp0 <= o.tol_opt:
            return _finish(ws, SolveStatus.CONVERGED, feas, stat, comp0,
                           "optimality conditions satisfied")

        # barrier decrease test
        while ws.mu > mu_min:
            _, stat_mu, comp_mu = ws._errors(ws.x, ws.lam, ws.z_l, ws.z_u,
                                             ws.mu)
            if max(feas, stat_mu, comp_mu) > o.kappa_eps * ws.mu:
                break
            ws.mu = max(mu_min, min(o.kappa_mu * ws.mu,
                                    ws.mu ** o.theta_mu))

        W = ws._lagrangian_hessian(ws.x, J, ws.lam)
        sigma = np.zeros(p.n)
        sl = np.where(ws.has_lb, ws.x - p.lb, 1.0)
        su = np.where(ws.has_ub, p.ub - ws.x, 1.0)
        sigma[ws.has_lb] += (ws.z_l / sl)[ws.has_lb]
        sigma[ws.has_ub] += (ws.z_u / su)[ws.has_ub]
        W[np.diag_indices_from(W)] += sigma

        rhs_x = -(ws._barrier_gradient(ws.x, ws.mu))
        if ws.m:
            rhs_x += J.T @ ws.lam
        rhs_c = -c if ws.m else np.zeros(0)
        # flat-manifold wandering only manifests once mu sits at its floor
        # and the complementarity is centered there; capping earlier would
        # strangle legitimate re-centering steps
        step_cap = np.inf
        if ws.mu <= mu_min:
            f_mu, s_mu, c_mu = ws._errors(ws.x, ws.lam, ws.z_l, ws.z_u, ws.mu)
            if c_mu <= o.kappa_eps * ws.mu:
                step_cap = 100.0 * max(f_mu, s_mu, c_mu, ws.mu)
        try:
            dx, dlam, delta_w = ws._solve_kkt(W, J, rhs_x, rhs_c, step_cap)
        except SolverError:
            ok = _enter_restoration(ws, viol)
            if ok is not None:
                return ok
            continue
        if delta_w:
            ws.delta_w_last = delta_w

        # safeguard the dual step: one heavily regularized solve must not
        # inject multipliers that poison later Hessians and penalties
        dual_cap = max(1e4, 10.0 * float(np.max(np.abs(ws.lam),
                                                initial=0.0)))
        dlam_inf = float(np.max(np.abs(dlam), initial=0.0))
        if dlam_inf > dual_cap:
            dlam = dlam * (dual_cap / dlam_inf)

        dz_l = np.zeros(p.n)
        dz_u = np.zeros(p.n)
        dz_l[ws.has_lb] = (ws.mu / sl - ws.z_l - (ws.z_l / sl) * dx)[ws.has_lb]
        dz_u[ws.has_ub] = (ws.mu / su - ws.z_u + (ws.z_u / su) * dx)[ws.has_ub]

        alpha_max = ws._fraction_to_boundary(ws.x, dx)
        alpha_z = min(ws._dual_fraction(ws.z_l, dz_l, ws.has_lb),
                      ws._dual_fraction(ws.z_u, dz_u, ws.has_ub))

        # Byrd-Nocedal penalty update: large enough that the step's model
        # decrease covers its linearized constraint gain; keyed to step
        # quantities so degenerate multiplier directions cannot inflate it
        c_l1 = float(np.sum(np.abs(c))) if c.size else 0.0
        if c_l1 > 1e-12:
            grad_term = float(np.dot(ws._barrier_gradient(ws.x, ws.mu), dx))
            curv_term = 0.5 * max(float(dx @ (W @ dx)), 0.0)
            nu_req = (grad_term + curv_term) / (0.5 * c_l1) + 0.1
        else:
            nu_req = 0.1
        nu_req = max(nu_req, 0.1)
        if ws.nu < nu_req:
            ws.nu = nu_req
        elif ws.nu > 10.0 * nu_req:
            ws.nu = max(2.0 * nu_req, 0.1)
        phi0 = ws._merit(ws.x, ws.mu, ws.nu)
        dphi = float(np.dot(ws._barrier_gradient(ws.x, ws.mu), dx))
        if c.size:
            dphi -= ws.nu * c_l1

        if dphi >= 0.0 and np.max(np.abs(dx), initial=0.0) > 1e-14:
            outcome = _enter_restoration(ws, viol)
            if outcome is not None:
                return outcome
            continue

        alpha = alpha_max
        accepted = False
        for _ in range(o.max_backtracks):
            # progress smaller than float precision of the merit cannot be
            # verified; take the step rather than aborting the search
            if abs(alpha * dphi) <= 10.0 * np.finfo(float).eps * max(
                    1.0, abs(phi0)):
                accepted = True
                break
            trial = ws.x + alpha * dx
            phi = ws._merit(trial, ws.mu, ws.nu)
            if phi <= phi0 + o.armijo_eta * alpha * dphi:
                accepted = True
                break
            alpha *= 0.5

        if not accepted:
            # merit progress unverifiable near a solution; Newton still
            # contracts the KKT error, so accept on that evidence
            err0 = max(ws._errors(ws.x, ws.lam, ws.z_l, ws.z_u, ws.mu))
            alpha = alpha_max
            for _ in range(4):
                xt = ws.x + alpha * dx
                lt = ws.lam + alpha * dlam
                zlt = np.maximum(ws.z_l + alpha * dz_l, 0.0)
                zut = np.maximum(ws.z_u + alpha * dz_u, 0.0)
                if max(ws._errors(xt, lt, zlt, zut, ws.mu)) <= 0.9 * err0:
                    ws.x, ws.lam, ws.z_l, ws.z_u = xt, lt, zlt, zut
                    _clip_duals(ws)
                    accepted = True
                    ws.reset_pending = False
                    break
                alpha *= 0.5
            if accepted:
                continue
            outcome = _enter_restoration(ws, viol)
            if outcome is not None:
                return outcome
            continue

        ws.reset_pending = False
        ws.record(step=ws.iters, alpha=alpha, alpha_max=alpha_max,
                  dw=delta_w, ndx=float(np.max(np.abs(dx))))
        ws.x = ws.x + alpha * dx
        ws.lam = ws.lam + alpha * dlam
        ws.z_l = ws.z_l + alpha_z * dz_l
        ws.z_u = ws.z_u + alpha_z * dz_u
        _clip_duals(ws)

    feas = ws._violation(ws.x)
    if feas > o.cap_violation:
        return _finish(ws, SolveStatus.INFEASIBLE, feas, np.inf, np.inf,
                       f"iteration cap with violation {feas:.3e}")
    f2, s2, c2 = ws._errors(ws.x, ws.lam, ws.z_l, ws.z_u, 0.0)
    return _finish(ws, SolveStatus.ITERATION_LIMIT, f2, s2, c2,
                   "iteration limit reached")


def _clip_duals(ws):
    """Ipopt's kappa-sigma safeguard keeping duals near mu/slack."""
    kap = 1e10
    p = ws.p
    for mask, z, slack in ((ws.has_lb, ws.z_l, ws.x - p.lb),
                           (ws.has_ub, ws.z_u, p.ub - ws.x)):
        idx = np.flatnonzero(mask)
        lo = ws.mu / (kap * slack[idx])
        hi = kap * ws.mu / slack[idx]
        z[idx] = np.minimum(np.maximum(z[idx], lo), hi)


def _enter_restoration(ws: _Workspace, viol):
    """Gate into restoration; near-feasible stalls re-centre duals once.

    A failed search at a nearly feasible point is a sign of merit
    round-off, not of infeasibility, so restoration (which would climb
    away from active bounds) is skipped and the multipliers re-centred.
    If that was already tried without any accepted step since, the
    solver is deadlocked and stops at the current (feasible) point.
    """
    if viol > max(10.0 * ws.o.tol_feas, 1e-8):
        return _restoration(ws)
    if ws.reset_pending:
        feas, stat, comp = ws._errors(ws.x, ws.lam, ws.z_l, ws.z_u, 0.0)
        return _finish(ws, SolveStatus.ITERATION_LIMIT, feas, stat, comp,
                       "search stalled at a feasible point")
    ws.reset_pending = True
    ws.z_l[ws.has_lb] = ws.mu / (ws.x - ws.p.lb)[ws.has_lb]
    ws.z_u[ws.has_ub] = ws.mu / (ws.p.ub - ws.x)[ws.has_ub]
    ws._init_multipliers()
    return None


def _restoration(ws: _Workspace):
    """Gauss-Newton feasibility restoration inside the bounds.

    Returns an OpfSolution when the phase reaches a verdict (stall =>
    infeasible, budget exhausted => cap statuses) or None to resume the
    main loop after the violation has been meaningfully reduced.
    """
    p, o = ws.p, ws.o
    if ws.m == 0:
        # no equalities: a failed search on a bound-constrained problem
        # cannot be restored, treat as iteration limit at current point
        feas, stat, comp = ws._errors(ws.x, ws.lam, ws.z_l, ws.z_u, 0.0)
        return _finish(ws, SolveStatus.ITERATION_LIMIT, feas, stat, comp,
                       "line search failed on bound-constrained problem")

    entry_viol = ws._violation(ws.x)
    resume_at = max(o.tol_feas, 1e-2 * entry_viol)
    best = ws.best_viol
    stall = 0
    damping = 1e-8      # Levenberg-Marquardt parameter, adapted per step

    while ws.iters < o.max_iter:
        ws.iters += 1
        c = p.residual(ws.x)
        J = np.asarray(p.jacobian(ws.x))
        viol = float(np.max(np.abs(c))) if c.size else 0.0
        # the interior push must stay far below the feasibility force or
        # the two reach a standoff above the feasibility tolerance
        mu_r = min(1e-8, 1e-3 * viol * viol)
        if viol < ws.best_viol:
            ws.best_viol = viol
            ws.best_x = ws.x.copy()
        ws.record(iter=ws.iters, restoration=True, viol=viol,
                  damping=damping)

        if viol <= resume_at:
            ws.z_l[ws.has_lb] = ws.mu / (ws.x - p.lb)[ws.has_lb]
            ws.z_u[ws.has_ub] = ws.mu / (p.ub - ws.x)[ws.has_ub]
            ws._init_multipliers()
            return None

        if ws.best_viol > best - o.stall_tol:
            stall += 1
            if stall >= o.stall_window:
                ws.x = ws.best_x.copy()
                feas = ws.best_viol
                return _finish(
                    ws, SolveStatus.INFEASIBLE, feas, np.inf, np.inf,
                    f"restoration stalled: violation {feas:.6e} did not "
                    f"improve by {o.stall_tol:g} over {o.stall_window} "
                    f"iterations")
        else:
            stall = 0
            best = ws.best_viol

        sl = np.where(ws.has_lb, ws.x - p.lb, 1.0)
        su = np.where(ws.has_ub, p.ub - ws.x, 1.0)
        grad = J.T @ c
        grad[ws.has_lb] -= mu_r / sl[ws.has_lb]
        grad[ws.has_ub] += mu_r / su[ws.has_ub]
        base_H = J.T @ J
        diag = np.zeros(p.n)
        diag[ws.has_lb] += mu_r / sl[ws.has_lb] ** 2
        diag[ws.has_ub] += mu_r / su[ws.has_ub] ** 2

        accepted = False
        theta0 = 0.5 * float(np.dot(c, c)) - mu_r * (
            float(np.sum(np.log(sl[ws.has_lb]))) +
            float(np.sum(np.log(su[ws.has_ub]))))
        for _ in range(12):
            H = base_H.copy()
            H[np.diag_indices_from(H)] += diag + damping
            for i in np.flatnonzero(ws.fixed):
                H[i, :] = 0.0
                H[:, i] = 0.0
                H[i, i] = 1.0
            grad_eff = np.where(ws.fixed, 0.0, grad)
            try:
                d = np.linalg.solve(H, -grad_eff)
            except np.linalg.LinAlgError:
                damping = max(10.0 * damping, 1e-6)
                continue
            alpha = ws._fraction_to_boundary(ws.x, d)
            dtheta = float(np.dot(grad_eff, d))
            for _ in range(o.max_backtracks):
                trial = ws.x + alpha * d
                slt = np.where(ws.has_lb, trial - p.lb, 1.0)
                sut = np.where(ws.has_ub, p.ub - trial, 1.0)
                if np.any(slt[ws.has_lb] <= 0) or np.any(sut[ws.has_ub] <= 0):
                    alpha *= 0.5
                    continue
                ct = p.residual(trial)
                theta = 0.5 * float(np.dot(ct, ct)) - mu_r * (
                    float(np.sum(np.log(slt[ws.has_lb]))) +
                    float(np.sum(np.log(sut[ws.has_ub]))))
                if theta <= theta0 + o.armijo_eta * alpha * min(dtheta, 0.0):
                    accepted = True
                    break
                alpha *= 0.5
            if accepted and alpha >= 0.5:
                damping = max(damping / 3.0, 1e-10)
                break
            if accepted:
                break
            damping = max(10.0 * damping, 1e-6)
        if accepted:
            ws.x = ws.x + alpha * d
        # an unaccepted step counts toward the stall window via best_viol

    feas = ws._violation(ws.x)
    if feas > o.cap_violation:
        return _finish(ws, SolveStatus.INFEASIBLE, feas, np.inf, np.inf,
                       f"iteration cap in restoration, violation {feas:.3e}")
    f2, s2, c2 = ws._errors(ws.x, ws.lam, ws.z_l, ws.z_u, 0.0)
    return _finish(ws, SolveStatus.ITERATION_LIMIT, f2, s2, c2,
                   "iteration limit during restoration")


def _finish(ws: _Workspace, status, feas, stat, comp, message) -> OpfSolution:
    p = ws.p
    x, lam, z_l, z_u = ws.x, ws.lam, ws.z_l, ws.z_u
    if status == SolveStatus.INFEASIBLE:
        x = ws.best_x
        feas = ws.best_viol
    elif status == SolveStatus.ITERATION_LIMIT and ws.best_kkt is not None:
        # report the best KKT point seen, not a post-stall wreck
        o = ws.o
        score = max(feas / o.tol_feas, stat / o.tol_opt, comp / o.tol_opt)
        if ws.best_kkt[0] < score:
            _, x, lam, z_l, z_u, feas, stat, comp = ws.best_kkt
    return OpfSolution(
        x=x.copy(),
        lam=lam.copy(),
        z_lower=z_l.copy(),
        z_upper=z_u.copy(),
        objective_value=float(p.objective(x)),
        max_residual=float(feas),
        kkt_stationarity=float(stat),
        kkt_complementarity=float(comp),
        status=status,
        iterations=ws.iters,
        mu_final=ws.mu,
        message=message,
        trace=ws.trace,
    )
