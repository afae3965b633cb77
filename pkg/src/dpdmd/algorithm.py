"""Distributed online primal-dual dynamic mirror descent.

Each agent keeps a primal decision ``x_i`` and a nonnegative dual ``q_i``.
One synchronous round ``t`` runs, for every agent,

    q_tilde = sum_j W_{t-1}[i, j] q_j                    (consensus on duals)
    a       = grad f(x_prev) + J_g(x_prev)^T q_tilde
    x_tilde = argmin_x  alpha <x, a> + alpha r(x) + D(x, x_prev)
    b       = J_g(x_prev) (x_tilde - x_prev) + g(x_prev)
    q       = [q_tilde + gamma (b - beta q_tilde)]_+
    x       = Phi(x_tilde)

where ``f, r, g`` are the previous round's functions, revealed after the
previous decision.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator

from ._validation import check_random_state, check_unit_interval, check_vector
from .geometry import (
    BregmanGeometry,
    RegularizerSpec,
    Subgradients,
    bregman_divergence,
    deviation_bound,
    mirror_step,
    mirror_step_deviation,
    nonneg_project,
)
from .network import CommGraphSequence, mix_duals

__all__ = [
    "StepsizeSchedule",
    "DynamicMapping",
    "AgentState",
    "AgentRecord",
    "RoundTrace",
    "RunTrace",
    "InvariantViolation",
    "stepsizes",
    "agent_round",
    "run",
    "DistributedMirrorDescent",
]

logger = logging.getLogger(__name__)


class InvariantViolation(RuntimeError):
    def __init__(self, t, i, detail):
        super().__init__(f"round {t}, agent {i}: {detail}")
        self.t, self.i, self.detail = t, i, detail


@dataclass(frozen=True)
class StepsizeSchedule:
    """Primal stepsize ``alpha_t``, dual penalty ``beta_t`` and dual stepsize ``gamma_t``.

    ``general``          alpha = t^-c,               beta = t^-kappa, gamma = t^-(1-kappa)
    ``slater``           alpha = t^-(1-kappa),       beta = t^-kappa, gamma = t^-(1-kappa)
    ``strongly_convex``  alpha = t^-max(kappa, 1-kappa), beta and gamma as above
    ``custom``           user supplied sequences (callables of t, or 1-indexed sequences)
    """

    kind: str
    c: float | None = None
    kappa: float | None = None
    custom: tuple | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.kind not in ("general", "slater", "strongly_convex", "custom"):
            raise ValueError(f"unknown schedule {self.kind!r}")
        if self.kind == "custom":
            if self.custom is None or len(self.custom) != 3:
                raise ValueError("a custom schedule needs (alpha, beta, gamma) sequences")
            return
        check_unit_interval(self.kappa, "kappa")
        if self.kind == "general":
            check_unit_interval(self.c, "c")

    @classmethod
    def general(cls, c: float, kappa: float) -> "StepsizeSchedule":
        return cls("general", c=c, kappa=kappa)

    @classmethod
    def slater(cls, kappa: float) -> "StepsizeSchedule":
        return cls("slater", kappa=kappa)

    @classmethod
    def strongly_convex(cls, kappa: float) -> "StepsizeSchedule":
        return cls("strongly_convex", kappa=kappa)

    @classmethod
    def from_sequences(cls, alpha, beta, gamma) -> "StepsizeSchedule":
        return cls("custom", custom=(alpha, beta, gamma))

    @property
    def primal_exponent(self) -> float:
        """The exponent c in ``alpha_t = t^-c``."""
        if self.kind == "general":
            return self.c
        if self.kind == "slater":
            return 1.0 - self.kappa
        if self.kind == "strongly_convex":
            return max(self.kappa, 1.0 - self.kappa)
        raise ValueError("a custom schedule has no closed-form exponent")

    def __call__(self, t: int) -> tuple[float, float, float]:
        if t < 1:
            raise ValueError("stepsizes are defined for t >= 1")
        if self.kind == "custom":
            vals = tuple(float(s(t) if callable(s) else s[t - 1]) for s in self.custom)
            if min(vals) <= 0:
                raise ValueError(f"custom stepsizes must be positive, got {vals} at t={t}")
            return vals
        ft = float(t)
        return ft ** -self.primal_exponent, ft ** -self.kappa, ft ** -(1.0 - self.kappa)


def stepsizes(schedule: StepsizeSchedule, t: int) -> tuple[float, float, float]:
    return schedule(t)


class DynamicMapping:
    """Each agent's estimate ``Phi_{i,t}`` of how the optimal sequence moves.

    ``linear(A)`` takes ``A[t - 1, i]`` as the map from round t to round t + 1,
    so ``Phi_{i,t} = A[t - 2, i]`` for ``t >= 2`` and the identity at ``t = 1``.
    """

    def __init__(self, kind: str = "identity", matrices=None, func: Callable | None = None):
        if kind not in ("identity", "linear", "custom"):
            raise ValueError(f"unknown mapping kind {kind!r}")
        if kind == "linear" and matrices is None:
            raise ValueError("a linear mapping needs its matrices")
        if kind == "custom" and func is None:
            raise ValueError("a custom mapping needs a callable")
        self.kind = kind
        self.matrices = None if matrices is None else np.asarray(matrices, dtype=float)
        self.func = func

    @classmethod
    def identity(cls) -> "DynamicMapping":
        return cls("identity")

    @classmethod
    def linear(cls, matrices) -> "DynamicMapping":
        return cls("linear", matrices=matrices)

    @classmethod
    def custom(cls, func: Callable) -> "DynamicMapping":
        return cls("custom", func=func)

    def __call__(self, i: int, t: int, x) -> np.ndarray:
        if self.kind == "identity":
            return x
        if self.kind == "linear":
            if t < 2:
                return x
            return self.matrices[t - 2, i] @ x
        return np.asarray(self.func(i, t, x), dtype=float)

    def __repr__(self):
        return f"DynamicMapping({self.kind!r})"

    def contractivity_violations(self, geom: BregmanGeometry, i: int, t: int, rng=None,
                                 pairs: int = 1000, tol: float = 1e-10) -> int:
        """Count sampled pairs with ``D(Phi x, Phi y) > D(x, y)``."""
        rng = check_random_state(rng)
        xs = geom.domain.sample(rng, pairs)
        ys = geom.domain.sample(rng, pairs)
        bad = 0
        for x, y in zip(xs, ys):
            before = bregman_divergence(geom, x, y)
            after = bregman_divergence(geom, self(i, t, x), self(i, t, y))
            bad += after > before + tol * max(1.0, before)
        return bad


@dataclass
class AgentState:
    x: np.ndarray
    q: np.ndarray


@dataclass
class AgentRecord:
    """One agent's intermediates in one round."""

    q_tilde: np.ndarray
    a: np.ndarray
    x_tilde: np.ndarray
    b: np.ndarray
    q: np.ndarray
    x: np.ndarray


@dataclass
class RoundTrace:
    t: int
    alpha: float
    beta: float
    gamma: float
    edges: tuple
    agents: list
    cost: np.ndarray = None        # f_it + r_it at x_it, revealed after the round
    constraint: np.ndarray = None  # g_it(x_it), shape (n, m)


@dataclass
class RunTrace:
    rounds: list = field(default_factory=list)
    warnings: list = field(default_factory=list)
    violations: list = field(default_factory=list)

    @property
    def T(self) -> int:
        return len(self.rounds)

    def stack(self, name: str) -> np.ndarray:
        """Array of shape (T, n, ...) for an agent-level field (``x``, ``q``, ``x_tilde``...)."""
        return np.array([[getattr(a, name) for a in r.agents] for r in self.rounds])

    @property
    def decisions(self) -> np.ndarray:
        return self.stack("x")

    @property
    def costs(self) -> np.ndarray:
        """Per-round objective ``f_t(x_t)`` summed over agents, shape (T,)."""
        return np.array([r.cost.sum() for r in self.rounds])

    @property
    def constraint_sums(self) -> np.ndarray:
        """Per-round ``g_t(x_t) = sum_i g_it(x_it)``, shape (T, m)."""
        return np.array([r.constraint.sum(axis=0) for r in self.rounds])

    def stepsizes(self) -> np.ndarray:
        return np.array([(r.alpha, r.beta, r.gamma) for r in self.rounds])


def agent_round(state: AgentState, revealed: Subgradients, q_tilde, steps, geom: BregmanGeometry,
                phi: Callable | None = None, reg: RegularizerSpec = RegularizerSpec()):
    """One agent's primal-dual update.

    Parameters
    ----------
    state : AgentState
        Decision ``x_{i,t-1}`` and dual ``q_{i,t-1}``.
    revealed : Subgradients
        ``grad f``, ``g`` and its Jacobian of round ``t - 1``, evaluated at ``x_{i,t-1}``.
    q_tilde : array
        Output of the consensus step for this agent.
    steps : tuple
        ``(alpha_t, beta_t, gamma_t)``.
    phi : callable, optional
        ``x -> Phi_{i,t}(x)``; identity when omitted.
    reg : RegularizerSpec
        The previous round's regularizer, kept un-linearized in the mirror step.

    Returns
    -------
    (AgentState, AgentRecord)
    """
    alpha, beta, gamma = steps
    x_prev = state.x
    q_tilde = np.asarray(q_tilde, dtype=float)
    jac = revealed.constraint_jacobian
    if jac.shape != (q_tilde.size, x_prev.size):
        raise ValueError(f"Jacobian shape {jac.shape} does not match m={q_tilde.size}, p={x_prev.size}")
    if np.any(q_tilde < 0):
        raise ValueError("mixed duals must be nonnegative")
    a = revealed.cost_grad + jac.T @ q_tilde
    x_tilde = mirror_step(geom, x_prev, a, reg, alpha)
    b = jac @ (x_tilde - x_prev) + revealed.constraint_value
    q = nonneg_project(q_tilde + gamma * (b - beta * q_tilde))
    x = x_tilde if phi is None else np.asarray(phi(x_tilde), dtype=float)
    return AgentState(x, q), AgentRecord(q_tilde, a, x_tilde, b, q, x)


def _reveal(problem, t, i, x) -> tuple[Subgradients, float, np.ndarray]:
    fv, fg = problem.cost(i, t, x)
    rv, _ = problem.regularizer(i, t, x)
    gv, gj = problem.constraint(i, t, x)
    return Subgradients(fg, gv, gj), fv + rv, gv


def _as_geometries(problem, geoms):
    if geoms is None:
        return [BregmanGeometry.euclidean(dom, 1.0) for dom in problem.domains]
    if isinstance(geoms, BregmanGeometry):
        return [geoms] * problem.n
    geoms = list(geoms)
    if len(geoms) != problem.n:
        raise ValueError("one geometry per agent is required")
    return geoms


def run(problem, graphs: CommGraphSequence | None, schedule: StepsizeSchedule,
        mapping: DynamicMapping | None = None, geoms=None, T: int | None = None, x0=None, *,
        dual_bound_F: float | None = None, check_invariants: bool = True,
        halt_on_violation: bool = True, agent_order: Sequence[int] | None = None,
        contractivity_seed=0) -> RunTrace:
    """Run the algorithm for ``T`` synchronous rounds and record everything.

    ``x0`` defaults to each domain's midpoint.  With ``check_invariants`` the
    dual bound ``||q|| <= F / beta_t`` (F from ``problem.bounds()`` unless
    given), nonnegativity, domain membership and the mirror-step deviation
    bound are checked every round; the first violation raises
    :class:`InvariantViolation` unless ``halt_on_violation`` is False, in which
    case violations are collected on the trace.
    """
    n, m = problem.n, problem.m
    T = problem.T if T is None else int(T)
    if T > problem.T:
        raise ValueError(f"the problem only has {problem.T} rounds")
    if graphs is None:
        if n != 1:
            raise ValueError("a graph sequence is required for more than one agent")
    elif graphs.n != n:
        raise ValueError(f"graph sequence has {graphs.n} agents, problem has {n}")
    elif graphs.T < T - 1:
        raise ValueError(f"graph sequence covers {graphs.T} rounds, {T - 1} are needed")
    mapping = DynamicMapping.identity() if mapping is None else mapping
    geoms = _as_geometries(problem, geoms)
    order = range(n) if agent_order is None else list(agent_order)
    if sorted(order) != list(range(n)):
        raise ValueError("agent_order must be a permutation of the agents")
    if check_invariants and dual_bound_F is None and hasattr(problem, "bounds"):
        dual_bound_F = problem.bounds()[0]

    if x0 is None:
        xs = [dom.midpoint() for dom in problem.domains]
    else:
        xs = [check_vector(x, dom.dim, "x0") for x, dom in zip(x0, problem.domains)]
        for i, (x, dom) in enumerate(zip(xs, problem.domains)):
            if not dom.contains(x):
                raise ValueError(f"x0 of agent {i} is outside its domain")
    states = [AgentState(x, np.zeros(m)) for x in xs]
    revealed = [Subgradients.zeros(dom.dim, m) for dom in problem.domains]
    regs = [RegularizerSpec()] * n
    trace = RunTrace()
    rng = check_random_state(contractivity_seed)
    check_rounds = {1} | {2 ** k for k in range(1, int(math.log2(max(T, 1))) + 1)}
    prev_steps = None

    def fail(t, i, detail):
        if halt_on_violation:
            raise InvariantViolation(t, i, detail)
        trace.violations.append((t, i, detail))

    for t in range(1, T + 1):
        steps = schedule(t)
        if schedule.kind == "custom" and prev_steps is not None and any(
                s > p for s, p in zip(steps, prev_steps)):
            raise ValueError(f"custom stepsizes increase at t={t}")
        prev_steps = steps
        W = np.eye(1) if graphs is None else graphs.weight(t - 1)
        Q_tilde = mix_duals(W, np.array([s.q for s in states]))
        records = [None] * n
        new_states = [None] * n
        for i in order:
            phi = None if mapping.kind == "identity" else (lambda x, i=i: mapping(i, t, x))
            new_states[i], records[i] = agent_round(states[i], revealed[i], Q_tilde[i], steps,
                                                    geoms[i], phi, regs[i])
        if mapping.kind == "custom" and t in check_rounds:
            for i in range(n):
                bad = mapping.contractivity_violations(geoms[i], i, t, rng)
                if bad:
                    msg = f"round {t}, agent {i}: mapping expanded the divergence on {bad} sampled pairs"
                    trace.warnings.append(msg)
                    logger.warning(msg)

        if check_invariants:
            beta = steps[1]
            for i in range(n):
                rec = records[i]
                dom = geoms[i].domain
                if np.any(rec.q < 0):
                    fail(t, i, f"negative dual {rec.q}")
                if not dom.contains(rec.x_tilde):
                    fail(t, i, "x_tilde left the domain")
                if not dom.contains(rec.x):
                    fail(t, i, "x left the domain (mapping does not preserve it)")
                if dual_bound_F is not None:
                    cap = dual_bound_F / beta
                    for name in ("q_tilde", "q"):
                        norm = float(np.linalg.norm(getattr(rec, name)))
                        if not norm <= cap:
                            fail(t, i, f"||{name}|| = {norm!r} exceeds F/beta = {cap!r}")
                g_h = deviation_bound(geoms[i], rec.a, regs[i], steps[0])
                if not mirror_step_deviation(geoms[i], states[i].x, rec.x_tilde, g_h):
                    fail(t, i, "mirror step moved farther than G_h / sigma")

        states = new_states
        costs = np.empty(n)
        gvals = np.empty((n, m))
        for i in range(n):
            revealed[i], costs[i], gvals[i] = _reveal(problem, t, i, states[i].x)
            regs[i] = problem.reg_spec(i, t)
        edges = () if graphs is None or t - 1 < 1 else graphs.rounds[t - 2]
        trace.rounds.append(RoundTrace(t, *steps, edges, records, costs, gvals))
    return trace


class DistributedMirrorDescent(BaseEstimator):
    """Estimator-style front end to :func:`run`.

    Parameters
    ----------
    schedule : {"general", "slater", "strongly_convex"} or StepsizeSchedule
    c, kappa : float
        Schedule exponents, both in (0, 1); ``c`` is used by ``"general"`` only.
    geometry : {"euclidean", "kl"}
    sigma : float
        Scale of the Euclidean mirror map, ``D(x, y) = sigma ||x - y||^2``.
    mapping : {"identity", "linear"}, DynamicMapping or callable
        ``"linear"`` uses the problem's ``dynamics`` matrices.
    x0 : array-like, optional
        Initial decisions, one row per agent.
    check_invariants, halt_on_violation : bool
        Forwarded to :func:`run`.

    Attributes
    ----------
    trace_ : RunTrace
    x_ : ndarray of shape (n, p)
        Last decisions.
    q_ : ndarray of shape (n, m)
        Last duals.
    schedule_ : StepsizeSchedule
    """

    def __init__(self, schedule="strongly_convex", c=0.5, kappa=0.5, geometry="euclidean", sigma=10.0,
                 mapping="identity", x0=None, check_invariants=True, halt_on_violation=True):
        self.schedule = schedule
        self.c = c
        self.kappa = kappa
        self.geometry = geometry
        self.sigma = sigma
        self.mapping = mapping
        self.x0 = x0
        self.check_invariants = check_invariants
        self.halt_on_violation = halt_on_violation

    def _resolve_schedule(self):
        if isinstance(self.schedule, StepsizeSchedule):
            return self.schedule
        if self.schedule == "general":
            return StepsizeSchedule.general(self.c, self.kappa)
        if self.schedule == "slater":
            return StepsizeSchedule.slater(self.kappa)
        if self.schedule == "strongly_convex":
            return StepsizeSchedule.strongly_convex(self.kappa)
        raise ValueError(f"unknown schedule {self.schedule!r}")

    def _resolve_mapping(self, problem):
        if isinstance(self.mapping, DynamicMapping):
            return self.mapping
        if callable(self.mapping):
            return DynamicMapping.custom(self.mapping)
        if self.mapping == "identity":
            return DynamicMapping.identity()
        if self.mapping == "linear":
            if not hasattr(problem, "dynamics"):
                raise ValueError("mapping='linear' needs a problem exposing dynamics matrices")
            return DynamicMapping.linear(problem.dynamics)
        raise ValueError(f"unknown mapping {self.mapping!r}")

    def _resolve_geometries(self, problem):
        if self.geometry == "euclidean":
            return [BregmanGeometry.euclidean(dom, self.sigma) for dom in problem.domains]
        if self.geometry == "kl":
            return [BregmanGeometry.kl(dom.dim) for dom in problem.domains]
        raise ValueError(f"unknown geometry {self.geometry!r}")

    def fit(self, problem, graphs=None, T=None):
        self.schedule_ = self._resolve_schedule()
        self.geometries_ = self._resolve_geometries(problem)
        self.trace_ = run(problem, graphs, self.schedule_, self._resolve_mapping(problem),
                          self.geometries_, T=T, x0=self.x0, check_invariants=self.check_invariants,
                          halt_on_violation=self.halt_on_violation)
        last = self.trace_.rounds[-1].agents
        self.x_ = np.array([rec.x for rec in last])
        self.q_ = np.array([rec.q for rec in last])
        self.n_rounds_ = self.trace_.T
        return self
