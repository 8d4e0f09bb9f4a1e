"""Inequality-constrained NLP: PHR augmented Lagrangian around bound-constrained L-BFGS.

Solves  min f(x)  s.t.  c(x) >= 0,  lo <= x <= hi.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize


@dataclass
class SolverOptions:
    max_outer: int = 12
    max_inner: int = 60
    rho0: float = 10.0
    rho_growth: float = 10.0
    rho_max: float = 1e8
    feas_tol: float = 1e-6
    kkt_tol: float = 1e-4
    repair_iters: int = 50


@dataclass
class NlpResult:
    x: np.ndarray
    f: float
    c: np.ndarray
    multipliers: np.ndarray
    kkt: float
    violation: float
    iterations: int
    evaluations: int
    status: str
    history: list = field(default_factory=list)


def projected_gradient(x, g, lo, hi, tol=1e-10):
    """Gradient with components that push against an active bound removed."""
    pg = g.copy()
    at_lo = x <= lo + tol
    at_hi = x >= hi - tol
    pg[at_lo] = np.minimum(pg[at_lo], 0.0)
    pg[at_hi] = np.maximum(pg[at_hi], 0.0)
    pg[lo == hi] = 0.0
    return pg


def kkt_residual(x, grad_f, c, jac_c, lam, lo, hi):
    """max of projected Lagrangian gradient, complementarity and violation."""
    gl = grad_f - (jac_c.T @ lam if len(c) else 0.0)
    stat = np.max(np.abs(projected_gradient(x, gl, lo, hi))) if len(x) else 0.0
    comp = np.max(np.abs(lam * c)) if len(c) else 0.0
    viol = np.max(np.maximum(-c, 0.0)) if len(c) else 0.0
    return float(max(stat, comp, viol))


def solve_nlp(fun, cons, x0, lo, hi, options=None):
    """``fun(x) -> (f, grad)``; ``cons(x) -> (c, jac)`` with jac of shape (m, n).

    Status is ``converged`` (feasible and KKT residual below tolerance),
    ``max-iter`` (feasible, tolerance not reached) or ``infeasible``.
    """
    opt = options or SolverOptions()
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    x = np.clip(np.asarray(x0, dtype=float), lo, hi)
    bounds = list(zip(lo, hi))
    c0, _ = cons(x)
    lam = np.zeros(len(c0))
    rho = opt.rho0
    evals = [0]
    history = []

    def lagrangian(xx, lam, rho):
        evals[0] += 1
        f, g = fun(xx)
        c, J = cons(xx)
        if len(c) == 0:
            return f, g
        shifted = np.maximum(lam - rho * c, 0.0)
        val = f + (np.sum(shifted ** 2) - np.sum(lam ** 2)) / (2 * rho)
        grad = g - J.T @ shifted
        return val, grad

    prev_viol = np.inf
    iterations = 0
    for outer in range(opt.max_outer):
        res = minimize(lagrangian, x, args=(lam, rho), jac=True, method="L-BFGS-B", bounds=bounds,
                       options={"maxiter": opt.max_inner, "gtol": opt.kkt_tol * 0.1, "ftol": 1e-15})
        x = np.clip(res.x, lo, hi)
        iterations += int(res.nit)
        c, J = cons(x)
        f, g = fun(x)
        lam = np.maximum(lam - rho * c, 0.0) if len(c) else lam
        viol = float(np.max(np.maximum(-c, 0.0))) if len(c) else 0.0
        kkt = kkt_residual(x, g, c, J, lam, lo, hi)
        history.append({"outer": outer, "f": float(f), "violation": viol, "kkt": kkt, "rho": rho})
        if viol <= opt.feas_tol and kkt <= opt.kkt_tol:
            break
        if viol > 0.25 * prev_viol:
            rho = min(rho * opt.rho_growth, opt.rho_max)
        prev_viol = viol
    f, g = fun(x)
    c, J = cons(x)
    viol = float(np.max(np.maximum(-c, 0.0))) if len(c) else 0.0
    kkt = kkt_residual(x, g, c, J, lam, lo, hi)
    if viol > opt.feas_tol:
        status = "infeasible"
    elif kkt <= opt.kkt_tol:
        status = "converged"
    else:
        status = "max-iter"
    return NlpResult(x, float(f), c, lam, kkt, viol, iterations, evals[0], status, history)
