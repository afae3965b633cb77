"""Regret, constraint violation, offline comparators, problem constants and theoretical bounds."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

from .geometry import Box, Simplex
from .problem import OnlineProblem

__all__ = [
    "ComparatorSequence",
    "OracleError",
    "TheoreticalConstants",
    "round_losses",
    "regret",
    "constraint_values",
    "constraint_violation",
    "stationarity_residual",
    "dynamic_optimum",
    "dynamic_comparator",
    "static_optimum",
    "accumulated_variation",
    "accumulated_variation_identity",
    "estimate_constants",
    "slater_margin",
    "theoretical_bounds",
]

logger = logging.getLogger(__name__)

FEAS_TOL = 1e-9


class OracleError(RuntimeError):
    """The offline comparator solver did not reach its accuracy contract."""


# -- performance measures ------------------------------------------------------

def round_losses(problem: OnlineProblem, xs) -> np.ndarray:
    """``f_t(x_t) = sum_i f_it(x_it) + r_it(x_it)`` for ``t = 1..len(xs)``."""
    return np.array([problem.round_objective(t, x)[0] for t, x in enumerate(xs, start=1)])


def constraint_values(problem: OnlineProblem, xs) -> np.ndarray:
    """``g_t(x_t)`` for every round, shape (T, m)."""
    return np.array([problem.round_constraint(t, x)[0] for t, x in enumerate(xs, start=1)])


@dataclass
class ComparatorSequence:
    """A comparator ``y_1..y_T``; ``points[t - 1]`` holds every agent's component."""

    points: np.ndarray
    kind: str = "custom"

    def __post_init__(self):
        if self.kind not in ("dynamic", "static", "reference", "custom"):
            raise ValueError(f"unknown comparator kind {self.kind!r}")
        self.points = np.asarray(self.points, dtype=float)

    @property
    def T(self) -> int:
        return len(self.points)

    def feasibility_gap(self, problem: OnlineProblem) -> float:
        """Largest coupled-constraint value over all rounds (``<= 0`` when feasible)."""
        return float(constraint_values(problem, self.points).max())

    def check_feasible(self, problem: OnlineProblem, tol: float = FEAS_TOL):
        gap = self.feasibility_gap(problem)
        if gap > tol:
            raise ValueError(f"{self.kind} comparator violates a coupled constraint by {gap:.3e}")


def regret(problem: OnlineProblem, xs, comparator, check_feasible: bool = True) -> float:
    """``sum_t f_t(x_t) - f_t(y_t)``."""
    if not isinstance(comparator, ComparatorSequence):
        comparator = ComparatorSequence(comparator)
    if len(xs) != comparator.T:
        raise ValueError(f"horizon mismatch: {len(xs)} decisions vs {comparator.T} comparator rounds")
    if check_feasible:
        comparator.check_feasible(problem)
    return float(round_losses(problem, xs).sum() - round_losses(problem, comparator.points).sum())


def constraint_violation(g_sums) -> float:
    """``||[sum_t g_t]_+||`` from the per-round constraint sums (shape (T, m))."""
    g = np.atleast_2d(np.asarray(g_sums, dtype=float))
    return float(np.linalg.norm(np.maximum(g.sum(axis=0), 0.0)))


# -- offline solver ------------------------------------------------------------

def _bounds(domains):
    out = []
    for dom in domains:
        if isinstance(dom, Box):
            out.extend(zip(dom.lower.tolist(), dom.upper.tolist()))
        elif isinstance(dom, Simplex):
            out.extend([(0.0, 1.0)] * dom.dim)
        else:
            raise ValueError(f"unsupported domain {dom!r}")
    return out


def _simplex_rows(domains):
    """Equality constraints ``sum x = 1`` for simplex blocks."""
    rows, offset = [], 0
    total = sum(d.dim for d in domains)
    for dom in domains:
        if isinstance(dom, Simplex):
            row = np.zeros(total)
            row[offset:offset + dom.dim] = 1.0
            rows.append(row)
        offset += dom.dim
    return np.array(rows)


def _slsqp(objective, constraint, domains, z0, ftol, maxiter):
    from scipy.optimize import minimize

    # normalize the objective and each constraint row at the start point; unscaled
    # problems (objective ~1e6, rows ~1) make the line search stall
    scale = max(1.0, abs(objective(z0)[0]))
    rows = np.linalg.norm(np.atleast_2d(constraint(z0)[1]), axis=1)
    rows = np.where(rows > 1e-12, rows, 1.0)
    cons = [{"type": "ineq", "fun": lambda z: -constraint(z)[0] / rows,
             "jac": lambda z: -constraint(z)[1] / rows[:, None]}]
    E = _simplex_rows(domains)
    if E.size:
        cons.append({"type": "eq", "fun": lambda z: E @ z - 1.0, "jac": lambda z: E})
    res = minimize(lambda z: objective(z)[0] / scale, z0, jac=lambda z: objective(z)[1] / scale,
                   method="SLSQP", bounds=_bounds(domains), constraints=cons,
                   options={"ftol": ftol, "maxiter": maxiter})
    lo, hi = np.array(_bounds(domains)).T
    return np.clip(res.x, lo, hi), res


def _solve_checked(objective, constraint, domains, z0, label, obj_tol=1e-4, viol_tol=1e-6):
    """SQP solve followed by a tighter refinement run started at the first answer.

    The answer is accepted when the two objective values agree within
    ``obj_tol`` and the refined point violates no constraint by more than
    ``viol_tol``.
    """
    z, first = _slsqp(objective, constraint, domains, np.asarray(z0, dtype=float), 1e-10, 500)
    z_ref, res = _slsqp(objective, constraint, domains, z, 1e-14, 500)
    f1, f2 = objective(z)[0], objective(z_ref)[0]
    viol = float(np.maximum(constraint(z_ref)[0], 0.0).max(initial=0.0))
    if viol > 1e-4:
        raise OracleError(f"{label}: no feasible point found (worst violation {viol:.3e})")
    if abs(f1 - f2) > obj_tol * max(1.0, abs(f2)) or viol > viol_tol:
        raise OracleError(f"{label}: objective drift {abs(f1 - f2):.3e}, violation {viol:.3e} "
                          f"({res.message})")
    return z_ref


def _split(problem, z):
    return np.split(z, np.cumsum(problem.dims)[:-1])


def _stack_like(problem, parts):
    dims = problem.dims
    if len(set(dims)) == 1:
        return np.array(parts)
    return parts


def stationarity_residual(problem, t: int, X) -> float:
    """Projected-gradient residual of the round-t objective at ``X`` over the boxes."""
    grad = problem.smooth_gradient(t, X)
    X = np.asarray(X, dtype=float)
    dom = problem.domains[0]
    return float(np.linalg.norm(X - np.clip(X - grad, dom.lower, dom.upper)))


def dynamic_optimum(problem: OnlineProblem, t: int, stationarity_tol: float = 1e-6):
    """Minimizer of ``f_t`` subject to ``g_t <= 0`` (offline).

    For the tracking benchmark the reference point ``x0_t`` is audited first:
    it is returned when it is feasible and first-order stationary within
    ``stationarity_tol``; otherwise the general solver runs.
    """
    inst = getattr(problem, "instance", None)
    if inst is not None and hasattr(problem, "smooth_gradient") and inst.lower >= 0:
        X0 = inst.x0[t - 1]
        feasible = problem.round_constraint(t, X0)[0].max() <= FEAS_TOL
        resid = stationarity_residual(problem, t, X0)
        if feasible and resid <= stationarity_tol:
            return X0.copy()
        logger.info("round %d: reference point fails the audit (residual %.2e, feasible=%s)",
                    t, resid, feasible)

    def objective(z):
        v, g = problem.round_objective(t, _stack_like(problem, _split(problem, z)))
        return v, np.concatenate([np.ravel(gi) for gi in g])

    def constraint(z):
        c, jacs = problem.round_constraint(t, _stack_like(problem, _split(problem, z)))
        return c, np.hstack([np.asarray(j).reshape(problem.m, -1) for j in jacs])

    z0 = np.concatenate([dom.midpoint() for dom in problem.domains])
    z = _solve_checked(objective, constraint, problem.domains, z0, f"dynamic optimum t={t}")
    return _stack_like(problem, _split(problem, z))


def dynamic_comparator(problem: OnlineProblem, T: int | None = None) -> ComparatorSequence:
    T = problem.T if T is None else T
    return ComparatorSequence(np.array([dynamic_optimum(problem, t) for t in range(1, T + 1)]), "dynamic")


def static_optimum(problem: OnlineProblem, T: int | None = None):
    """Best single decision for rounds ``1..T`` that is feasible in every one of them."""
    T = problem.T if T is None else T
    ts = range(1, T + 1)
    m = problem.m

    def objective(z):
        v, g = problem.static_objective(ts, _stack_like(problem, _split(problem, z)))
        return v, np.concatenate([np.ravel(gi) for gi in g])

    def constraint(z):
        vals, jacs = problem.static_constraint(ts, _stack_like(problem, _split(problem, z)))
        return vals.ravel(), np.hstack([np.asarray(j).reshape(T * m, -1) for j in jacs])

    # start from the most interior point of the (linearized) static feasible set
    eps, z0 = _margin_lp(problem, T)
    if eps < -1e-4:
        raise OracleError(f"static optimum T={T}: no decision is feasible in every round (margin {eps:.3e})")
    z = _solve_checked(objective, constraint, problem.domains, z0, f"static optimum T={T}")
    return _stack_like(problem, _split(problem, z))


def accumulated_variation(points, mapping) -> float:
    """``sum_{t=1}^{T-1} sum_i ||y_{i,t+1} - Phi_{i,t+1}(y_{i,t})||``."""
    points = np.asarray(points.points if isinstance(points, ComparatorSequence) else points, dtype=float)
    total = 0.0
    for t in range(1, len(points)):
        for i, y in enumerate(points[t - 1]):
            total += float(np.linalg.norm(points[t][i] - mapping(i, t + 1, y)))
    return total


def accumulated_variation_identity(points) -> float:
    """``sum_t ||y_{t+1} - y_t||`` on the stacked decision."""
    points = np.asarray(points.points if isinstance(points, ComparatorSequence) else points, dtype=float)
    if len(points) < 2:
        return 0.0
    steps = points[1:] - points[:-1]
    return float(np.linalg.norm(steps.reshape(len(steps), -1), axis=1).sum())


# -- constants and bounds ------------------------------------------------------

@dataclass(frozen=True)
class TheoreticalConstants:
    """Problem and network constants entering the regret and violation bounds."""

    F: float
    G: float
    K: float
    d_X: float
    sigma_min: float
    n: int
    m: int
    w: float
    iota: int
    mu_min: float | None = None

    def __post_init__(self):
        for name in ("F", "G", "K", "d_X", "sigma_min", "w"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.w <= 1:
            raise ValueError("w must lie in (0, 1]")

    @property
    def tau(self) -> float:
        return (1.0 - self.w / (2.0 * self.n ** 2)) ** -2

    @property
    def lam(self) -> float:
        return (1.0 - self.w / (2.0 * self.n ** 2)) ** (1.0 / self.iota)

    @property
    def B1(self) -> float:
        return 2.0 * self.F + self.G * self.d_X

    @property
    def C11(self) -> float:
        n = self.n
        return 3.0 * n * n * self.tau * self.B1 * self.F / (1.0 - self.lam) + n * self.B1 ** 2 / 2.0

    @property
    def C12(self) -> float:
        return 4.0 * self.n * self.G ** 2 / self.sigma_min

    @property
    def B3(self) -> float:
        return 2.0 * self.F + self.C11

    def C1(self, c: float, kappa: float) -> float:
        return self.C11 / kappa + self.C12 / (1.0 - c) + 2.0 * self.n * self.d_X * self.K

    def C21(self, c: float, kappa: float) -> float:
        return 2.0 * self.n * (2.0 * self.G ** 2 / ((1.0 - c) * self.sigma_min) + 1.0 / (1.0 - kappa) + 2.0)

    def C2(self, c: float, kappa: float) -> float:
        return self.C21(c, kappa) * (2.0 * self.n * self.F + self.C1(c, kappa))

    def B2(self, epsilon: float) -> float:
        e = epsilon
        return max(2.0 * e + 2.0 * math.sqrt(e * e + self.n * self.d_X * self.K), 2.0 * self.B3 / e)

    def C3(self, kappa: float, epsilon: float) -> float:
        B2 = self.B2(epsilon)
        return self.n * (2.0 * B2 + B2 / (1.0 - kappa)
                         + self.G ** 2 * (B2 + 2.0) * math.sqrt(self.m) / (self.sigma_min * kappa))

    def B4(self, kappa: float) -> int:
        if self.mu_min is None:
            raise ValueError("strong convexity modulus mu is unknown")
        return math.ceil((1.0 / self.mu_min) ** (1.0 / kappa))

    def C4(self, kappa: float) -> float:
        n = self.n
        return (n * self.B1 ** 2 / (2.0 * kappa) + self.B1 * self.C11 / kappa + self.C12 / kappa
                + 2.0 * n * self.d_X * self.K * self.B4(kappa) ** (1.0 - kappa))

    def summary(self, schedule=None, epsilon: float | None = None) -> dict:
        out = asdict(self)
        out.update(tau=self.tau, lam=self.lam, B1=self.B1, C11=self.C11, C12=self.C12, B3=self.B3)
        if schedule is not None and schedule.kind != "custom":
            c, kappa = schedule.primal_exponent, schedule.kappa
            out.update(C1=self.C1(c, kappa), C21=self.C21(c, kappa), C2=self.C2(c, kappa))
            if epsilon is not None:
                out.update(epsilon=epsilon, B2=self.B2(epsilon), C3=self.C3(kappa, epsilon))
            if self.mu_min is not None:
                out.update(B4=self.B4(kappa), C4=self.C4(kappa))
        return out


def estimate_constants(problem, geoms, graphs=None, mu: float | None = None) -> TheoreticalConstants:
    """Constants for a problem with compact box or simplex domains.

    ``F`` and ``G`` come from the problem's analytic ``bounds()``; ``d(X)`` is
    the diameter of the product domain; ``K`` and ``sigma`` come from the
    geometries.  ``mu`` (strong convexity of the costs relative to the mirror
    map) is derived from ``problem.strong_convexity()`` for Euclidean
    geometries when not given.
    """
    if not hasattr(problem, "bounds"):
        raise TypeError("the problem does not provide analytic bounds F, G")
    for dom in problem.domains:
        if not isinstance(dom, (Box, Simplex)):
            raise ValueError("constants need compact box or simplex domains")
    if not isinstance(geoms, (list, tuple)):
        geoms = [geoms] * problem.n
    F, G = problem.bounds()
    d_X = math.sqrt(sum(dom.diameter ** 2 for dom in problem.domains))
    K = max(g.lipschitz_K for g in geoms)
    sigma = min(g.strong_convexity for g in geoms)
    if mu is None and hasattr(problem, "strong_convexity") and all(g.kind == "euclidean" for g in geoms):
        mu = problem.strong_convexity() / max(g.scale for g in geoms)
    if graphs is None:
        w, iota = 1.0, 1
    else:
        w, iota = graphs.w, graphs.iota
    return TheoreticalConstants(F, G, K, d_X, sigma, problem.n, problem.m, w, iota, mu)


def _margin_lp(problem, T: int):
    """Solve ``max eps`` s.t. ``g_t(z) + eps <= 0`` for ``t <= T`` with the constraints linearized at the midpoint."""
    from scipy.optimize import linprog

    ts = range(1, T + 1)
    probe = [dom.midpoint() for dom in problem.domains]
    vals, jacs = problem.static_constraint(ts, _stack_like(problem, probe))
    J = np.hstack([np.asarray(j).reshape(T * problem.m, -1) for j in jacs])
    offset = vals.ravel() - J @ np.concatenate(probe)
    A_ub = np.hstack([J, np.ones((J.shape[0], 1))])
    bounds = _bounds(problem.domains) + [(None, None)]
    cost = np.zeros(A_ub.shape[1])
    cost[-1] = -1.0
    E = _simplex_rows(problem.domains)
    A_eq = np.hstack([E, np.zeros((len(E), 1))]) if E.size else None
    b_eq = np.ones(len(E)) if E.size else None
    res = linprog(cost, A_ub=A_ub, b_ub=-offset, A_eq=A_eq, b_eq=b_eq, bounds=bounds, method="highs")
    if res.status != 0:
        raise OracleError(f"margin LP failed: {res.message}")
    return float(res.x[-1]), res.x[:-1]


def slater_margin(problem, T: int | None = None) -> float:
    """Largest ``eps`` with a single ``x`` satisfying ``g_t(x) <= -eps`` for all ``t <= T``.

    Solved exactly as a linear program, so it is exact for affine
    constraints.  A negative result means no static decision is feasible in
    every round; zero means feasible without an interior.
    """
    return _margin_lp(problem, problem.T if T is None else T)[0]


def theoretical_bounds(constants: TheoreticalConstants, schedule, T: int, V: float = 0.0,
                       comparator: str = "dynamic", epsilon: float | None = None,
                       V_star: float | None = None) -> dict:
    """Right-hand sides of the regret and constraint-violation bounds at horizon ``T``.

    ``V`` is the comparator's accumulated variation (with respect to the
    mapping for the general regime, plain successive differences for the
    Slater regime); ``V_star`` bounds the minimal variation over feasible
    sequences and defaults to ``V``.  The Slater regime needs ``epsilon``.
    """
    if schedule.kind == "custom":
        raise ValueError("no closed-form bound for a custom schedule")
    if comparator not in ("dynamic", "static"):
        raise ValueError("comparator must be 'dynamic' or 'static'")
    V_star = V if V_star is None else V_star
    kappa = schedule.kappa
    c = schedule.primal_exponent
    K = constants.K
    C1 = constants.C1(c, kappa)
    C2 = constants.C2(c, kappa)
    C21 = constants.C21(c, kappa)
    T = float(T)

    if schedule.kind == "slater":
        if epsilon is None or not epsilon > 0:
            raise ValueError("the Slater regime needs a positive epsilon")
        e = max(1.0 - kappa, kappa)
        C3 = constants.C3(kappa, epsilon)
        if comparator == "static":
            reg = C1 * T ** e
            if constants.mu_min is not None:
                reg = min(reg, constants.C4(kappa) * T ** kappa)
            return {"regime": "slater-static", "regret_bound": reg, "violation_bound": C3 * T ** e}
        return {"regime": "slater-dynamic", "regret_bound": C1 * T ** e + 2.0 * K * T ** (1.0 - kappa) * V,
                "violation_bound": C3 * T ** e}

    violation_sq = C2 * T ** max(2.0 - c, 2.0 - kappa) + K * C21 * T ** max(1.0, 1.0 + c - kappa) * V_star
    violation = math.sqrt(violation_sq)
    if schedule.kind == "strongly_convex" and comparator == "static":
        reg = max(C1, constants.C4(kappa)) * T ** kappa
        return {"regime": "strongly-convex-static", "regret_bound": reg, "violation_bound": violation}
    reg = C1 * T ** max(1.0 - c, c, kappa) + 2.0 * K * T ** c * V
    return {"regime": f"{schedule.kind}-{comparator}", "regret_bound": reg, "violation_bound": violation}
