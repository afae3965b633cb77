"""Online problems with reveal-after-decision data, and the multi-target tracking benchmark.

Rounds are 1-based (``t = 1..T``) and agents 0-based, everywhere in this
package.
"""

from __future__ import annotations

import itertools
import math
import os
from abc import ABC, abstractmethod
from dataclasses import dataclass, fields
from functools import cached_property

import numpy as np

from ._validation import TraceFormatError, check_random_state, check_vector
from .geometry import Box, DomainError, RegularizerSpec

__all__ = [
    "OnlineProblem",
    "TrackingInstance",
    "TrackingProblem",
    "TraceFormatError",
    "generate_instance",
    "random_doubly_stochastic",
    "tracking_cost",
    "regularizer",
    "tracking_constraint",
    "save_trace",
    "load_trace",
    "TRACE_HEADER",
]

TRACE_HEADER = "dpdmd-instance v1"


class OnlineProblem(ABC):
    """Distributed online problem ``min sum_i f_it + r_it  s.t.  sum_i g_it <= 0``.

    Subclasses provide per-agent oracles.  The engine only queries round
    ``t`` data after the round-``t`` decisions exist; offline tools
    (comparators, constants) may look at every round.
    """

    n: int
    m: int
    T: int
    domains: list

    @property
    def dims(self) -> list[int]:
        return [d.dim for d in self.domains]

    @abstractmethod
    def cost(self, i: int, t: int, x) -> tuple[float, np.ndarray]:
        """Value and (sub)gradient of ``f_{i,t}`` at ``x``."""

    def regularizer(self, i: int, t: int, x) -> tuple[float, np.ndarray]:
        spec = self.reg_spec(i, t)
        return spec.value(x), spec.subgradient(x)

    def reg_spec(self, i: int, t: int) -> RegularizerSpec:
        return RegularizerSpec()

    @abstractmethod
    def constraint(self, i: int, t: int, x) -> tuple[np.ndarray, np.ndarray]:
        """Value (length m) and Jacobian (m x p_i) of ``g_{i,t}`` at ``x``."""

    # Batch helpers used by the offline oracles; the defaults loop over agents.

    def round_objective(self, t: int, xs) -> tuple[float, list]:
        """``sum_i (f_it + r_it)(x_i)`` and the per-agent gradients."""
        total, grads = 0.0, []
        for i, x in enumerate(xs):
            fv, fg = self.cost(i, t, x)
            rv, rg = self.regularizer(i, t, x)
            total += fv + rv
            grads.append(fg + rg)
        return total, grads

    def round_constraint(self, t: int, xs) -> tuple[np.ndarray, list]:
        """``sum_i g_it(x_i)`` and the per-agent Jacobians."""
        total, jacs = np.zeros(self.m), []
        for i, x in enumerate(xs):
            gv, gj = self.constraint(i, t, x)
            total += gv
            jacs.append(gj)
        return total, jacs

    def static_objective(self, ts, xs) -> tuple[float, list]:
        total, grads = 0.0, [np.zeros(p) for p in self.dims]
        for t in ts:
            v, g = self.round_objective(t, xs)
            total += v
            for acc, gi in zip(grads, g):
                acc += gi
        return total, grads

    def static_constraint(self, ts, xs) -> tuple[np.ndarray, list]:
        """Stacked constraint sums, shape (len(ts), m), with Jacobian blocks of shape (len(ts), m, p_i)."""
        vals, jacs = [], [[] for _ in range(self.n)]
        for t in ts:
            v, js = self.round_constraint(t, xs)
            vals.append(v)
            for acc, j in zip(jacs, js):
                acc.append(j)
        return np.array(vals), [np.array(j) for j in jacs]


@dataclass(frozen=True, eq=False)
class TrackingInstance:
    """Data of the multi-target tracking benchmark.

    Arrays are indexed ``[t - 1, i, ...]``: ``pi`` (T, n, p), ``D`` (T, n, m, p),
    ``d`` (T, n, m), ``x0`` (T, n, p), ``y`` (T, n, p) and ``A`` (T, n, p, p),
    with ``x0[t] = A[t - 1] @ x0[t - 1]``.
    """

    zeta1: float
    zeta2: float
    lambda1: float
    lambda2: float
    lower: float
    upper: float
    slack: float
    seed: int | None
    pi: np.ndarray
    D: np.ndarray
    d: np.ndarray
    x0: np.ndarray
    y: np.ndarray
    A: np.ndarray

    @property
    def T(self) -> int:
        return self.pi.shape[0]

    @property
    def n(self) -> int:
        return self.pi.shape[1]

    @property
    def p(self) -> int:
        return self.pi.shape[2]

    @property
    def m(self) -> int:
        return self.D.shape[2]

    @cached_property
    def box(self) -> Box:
        return Box.uniform(self.p, self.lower, self.upper)

    def __eq__(self, other):
        if not isinstance(other, TrackingInstance):
            return NotImplemented
        for f in fields(self):
            a, b = getattr(self, f.name), getattr(other, f.name)
            if isinstance(a, np.ndarray):
                if a.shape != b.shape or not np.array_equal(a, b):
                    return False
            elif a != b:
                return False
        return True

    __hash__ = None


def random_doubly_stochastic(rng, p: int, size=(), k: int = 3) -> np.ndarray:
    """Convex combinations of ``k`` random permutation matrices, weights uniform on the simplex."""
    size = (size,) if isinstance(size, (int, np.integer)) else tuple(size)
    weights = rng.dirichlet(np.ones(k), size=size)
    perms = np.argsort(rng.random(size + (k, p)), axis=-1)
    eye = np.eye(p)
    # P[r, perm[r]] = 1
    mats = eye[perms]
    return np.einsum("...k,...krc->...rc", weights, mats)


def generate_instance(n: int = 10, m: int = 3, p: int = 4, T: int = 2000, zeta1: float = 1.0,
                      zeta2: float = 30.0, lambda1: float = 1.0, lambda2: float = 30.0,
                      seed=None, lower: float = 0.0, upper: float = 5.0,
                      slack: float = 0.0) -> TrackingInstance:
    """Draw a tracking instance.

    Prices are integers uniform on {0..10}, constraint coefficients integers
    uniform on {-5..5}, and the initial reference point is uniform on the box.
    ``slack`` shifts every offset, ``d = D x0 + slack``; a positive slack
    gives the coupled constraint a strict interior, a negative one makes the
    reference point infeasible.
    """
    if min(n, m, p, T) < 1:
        raise ValueError("dimensions must be positive")
    if zeta2 <= 0:
        raise ValueError("zeta2 must be positive")
    rng = check_random_state(seed)
    x_start = rng.uniform(lower, upper, size=(n, p))
    pi = rng.integers(0, 11, size=(T, n, p)).astype(float)
    D = rng.integers(-5, 6, size=(T, n, m, p)).astype(float)
    A = random_doubly_stochastic(rng, p, size=(T, n))
    x0 = np.empty((T, n, p))
    x0[0] = x_start
    for k in range(1, T):
        x0[k] = np.einsum("irc,ic->ir", A[k - 1], x0[k - 1])
    d = np.einsum("timp,tip->tim", D, x0) + slack
    y = (2.0 * (zeta2 + lambda2) * x0 + zeta1 * pi + lambda1) / (2.0 * zeta2)
    seed_val = int(seed) if isinstance(seed, (int, np.integer)) else None
    return TrackingInstance(float(zeta1), float(zeta2), float(lambda1), float(lambda2),
                            float(lower), float(upper), float(slack), seed_val,
                            pi, D, d, x0, y, A)


def _check_point(inst: TrackingInstance, x) -> np.ndarray:
    x = check_vector(x, inst.p, "x")
    if not inst.box.contains(x, atol=1e-9):
        raise DomainError("x lies outside the agent's box")
    return x


def tracking_cost(inst: TrackingInstance, i: int, t: int, x) -> tuple[float, np.ndarray]:
    """``zeta1 <pi, x> + zeta2 ||x - y||^2`` and its gradient."""
    x = _check_point(inst, x)
    pi, y = inst.pi[t - 1, i], inst.y[t - 1, i]
    diff = x - y
    return float(inst.zeta1 * (pi @ x) + inst.zeta2 * (diff @ diff)), inst.zeta1 * pi + 2.0 * inst.zeta2 * diff


def regularizer(inst: TrackingInstance, x) -> tuple[float, np.ndarray]:
    spec = RegularizerSpec(inst.lambda1, inst.lambda2)
    return spec.value(x), spec.subgradient(x)


def tracking_constraint(inst: TrackingInstance, i: int, t: int, x) -> tuple[np.ndarray, np.ndarray]:
    """``D x - d`` and its Jacobian ``D``."""
    x = _check_point(inst, x)
    D = inst.D[t - 1, i]
    return D @ x - inst.d[t - 1, i], D


class TrackingProblem(OnlineProblem):
    """The tracking benchmark seen as an online problem.

    ``placement="explicit"`` keeps the l1 + l2 term as the regularizer handled
    inside the mirror step; ``"folded"`` moves it into the cost and leaves the
    regularizer at zero.  The total objective is the same either way.
    """

    def __init__(self, instance: TrackingInstance, placement: str = "explicit"):
        if placement not in ("explicit", "folded"):
            raise ValueError(f"unknown regularization placement {placement!r}")
        self.instance = instance
        self.placement = placement
        self.n, self.m, self.T = instance.n, instance.m, instance.T
        self.domains = [instance.box] * instance.n
        self._reg = RegularizerSpec(instance.lambda1, instance.lambda2)

    def cost(self, i, t, x):
        fv, fg = tracking_cost(self.instance, i, t, x)
        if self.placement == "folded":
            fv += self._reg.value(x)
            fg = fg + self._reg.subgradient(x)
        return fv, fg

    def reg_spec(self, i, t):
        return self._reg if self.placement == "explicit" else RegularizerSpec()

    def constraint(self, i, t, x):
        return tracking_constraint(self.instance, i, t, x)

    @property
    def dynamics(self) -> np.ndarray:
        """``A[t - 1, i]`` maps agent i's reference point at round t to round t + 1."""
        return self.instance.A

    # Vectorized oracles.  xs may be a list of vectors or an (n, p) array.

    def _l1_grad(self, X):
        # on a nonnegative box ||x||_1 = sum x, and 1 is a valid subgradient at 0 too
        return np.ones_like(X) if self.instance.lower >= 0 else np.sign(X)

    def round_objective(self, t, xs):
        X = np.asarray(xs, dtype=float)
        inst = self.instance
        diff = X - inst.y[t - 1]
        val = inst.zeta1 * np.sum(inst.pi[t - 1] * X) + inst.zeta2 * np.sum(diff * diff)
        val += inst.lambda1 * np.abs(X).sum() + inst.lambda2 * np.sum(X * X)
        grad = inst.zeta1 * inst.pi[t - 1] + 2.0 * inst.zeta2 * diff
        grad += inst.lambda1 * self._l1_grad(X) + 2.0 * inst.lambda2 * X
        return float(val), grad

    def agent_objective_values(self, t, X) -> np.ndarray:
        """Per-agent ``f_it + r_it`` at the rows of ``X``."""
        inst = self.instance
        X = np.asarray(X, dtype=float)
        diff = X - inst.y[t - 1]
        return (inst.zeta1 * np.sum(inst.pi[t - 1] * X, axis=1) + inst.zeta2 * np.sum(diff * diff, axis=1)
                + inst.lambda1 * np.abs(X).sum(axis=1) + inst.lambda2 * np.sum(X * X, axis=1))

    def agent_constraint_values(self, t, X) -> np.ndarray:
        inst = self.instance
        return np.einsum("imp,ip->im", inst.D[t - 1], np.asarray(X, dtype=float)) - inst.d[t - 1]

    def round_constraint(self, t, xs):
        vals = self.agent_constraint_values(t, xs)
        return vals.sum(axis=0), self.instance.D[t - 1]

    def static_objective(self, ts, xs):
        idx = np.asarray(list(ts)) - 1
        X = np.asarray(xs, dtype=float)
        inst = self.instance
        diff = X[None] - inst.y[idx]
        k = idx.size
        val = inst.zeta1 * np.sum(inst.pi[idx] * X[None]) + inst.zeta2 * np.sum(diff * diff)
        val += k * (inst.lambda1 * np.abs(X).sum() + inst.lambda2 * np.sum(X * X))
        grad = inst.zeta1 * inst.pi[idx].sum(axis=0) + 2.0 * inst.zeta2 * diff.sum(axis=0)
        grad += k * (inst.lambda1 * self._l1_grad(X) + 2.0 * inst.lambda2 * X)
        return float(val), grad

    def static_constraint(self, ts, xs):
        idx = np.asarray(list(ts)) - 1
        X = np.asarray(xs, dtype=float)
        inst = self.instance
        vals = np.einsum("timp,ip->tm", inst.D[idx], X) - inst.d[idx].sum(axis=1)
        return vals, inst.D[idx].transpose(1, 0, 2, 3)

    def smooth_gradient(self, t, X) -> np.ndarray:
        """Gradient of the total objective on a nonnegative box, where ``||x||_1 = sum x``."""
        inst = self.instance
        if inst.lower < 0:
            raise ValueError("the l1 term is only smooth on a nonnegative box")
        X = np.asarray(X, dtype=float)
        return (inst.zeta1 * inst.pi[t - 1] + 2.0 * inst.zeta2 * (X - inst.y[t - 1])
                + inst.lambda1 + 2.0 * inst.lambda2 * X)

    def bounds(self) -> tuple[float, float]:
        """Analytic ``(F, G)``: uniform bounds on |f|, |r|, ||g|| and on their subgradient norms over the box."""
        inst = self.instance
        lo, hi = inst.lower, inst.upper
        folded = self.placement == "folded"
        ends = np.array([lo, hi])

        # f is separable and convex per coordinate: extremes at the ends or the clipped stationary point
        def f_coord(v):
            val = inst.zeta1 * inst.pi * v + inst.zeta2 * (v - inst.y) ** 2
            if folded:
                val = val + inst.lambda1 * abs(v) + inst.lambda2 * v * v
            return val

        f_max = np.maximum(f_coord(lo), f_coord(hi)).sum(axis=-1)
        # every term except the price term is nonnegative
        f_min_lb = np.minimum(inst.zeta1 * inst.pi * lo, inst.zeta1 * inst.pi * hi).sum(axis=-1)
        f_abs = float(max(np.abs(f_max).max(), np.abs(np.minimum(f_min_lb, 0.0)).max()))
        r_coord = inst.lambda1 * np.abs(ends) + inst.lambda2 * ends ** 2
        r_abs = 0.0 if folded else float(inst.p * r_coord.max())

        verts = np.array(list(itertools.product((lo, hi), repeat=inst.p)))
        g_vals = np.einsum("timp,vp->timv", inst.D, verts) - inst.d[..., None]
        g_abs = float(np.sqrt((g_vals ** 2).sum(axis=2)).max())
        F = max(f_abs, r_abs, g_abs)

        reg_coord = inst.lambda1 + 2.0 * inst.lambda2 * max(abs(lo), abs(hi))
        aff_lo = np.abs(inst.zeta1 * inst.pi + 2.0 * inst.zeta2 * (lo - inst.y) + (2.0 * inst.lambda2 * lo if folded else 0.0))
        aff_hi = np.abs(inst.zeta1 * inst.pi + 2.0 * inst.zeta2 * (hi - inst.y) + (2.0 * inst.lambda2 * hi if folded else 0.0))
        comp = np.maximum(aff_lo, aff_hi) + (inst.lambda1 if folded else 0.0)
        grad_f = float(np.sqrt((comp ** 2).sum(axis=-1)).max())
        grad_r = 0.0 if folded else math.sqrt(inst.p) * reg_coord
        grad_g = float(np.linalg.norm(inst.D, ord=2, axis=(-2, -1)).max())
        G = max(grad_f, grad_r, grad_g)
        return F, G

    def strong_convexity(self) -> float:
        """Modulus c with ``f(x) >= f(y) + <grad f(y), x - y> + c ||x - y||^2`` for every cost."""
        inst = self.instance
        return inst.zeta2 + (inst.lambda2 if self.placement == "folded" else 0.0)


# Trace file -----------------------------------------------------------------

_ROW_LABELS = ("pi", "D", "d", "x0", "y", "A")


def _fmt(values) -> str:
    return " ".join(repr(float(v)) for v in np.ravel(values))


def save_trace(inst: TrackingInstance, path) -> None:
    """Write an instance in the line-oriented trace format (see README)."""
    lines = [
        TRACE_HEADER,
        f"n {inst.n} m {inst.m} p {inst.p} T {inst.T}",
        f"zeta1 {inst.zeta1!r} zeta2 {inst.zeta2!r} lambda1 {inst.lambda1!r} lambda2 {inst.lambda2!r}",
        f"box {inst.lower!r} {inst.upper!r}",
        f"slack {inst.slack!r}",
        f"seed {'none' if inst.seed is None else inst.seed}",
    ]
    for k in range(inst.T):
        lines.append(f"round {k + 1}")
        for i in range(inst.n):
            lines.append(f"agent {i}")
            for label in _ROW_LABELS:
                lines.append(f"{label} {_fmt(getattr(inst, label)[k, i])}")
    lines.append("end")
    with open(os.fspath(path), "w", encoding="ascii", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def load_trace(path) -> TrackingInstance:
    """Parse a trace written by :func:`save_trace`; errors carry the line number."""
    with open(os.fspath(path), encoding="ascii") as fh:
        lines = fh.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    pos = 0

    def take(expected_key=None):
        nonlocal pos
        if pos >= len(lines):
            raise TraceFormatError(path, pos + 1, "unexpected end of file")
        parts = lines[pos].split(" ")
        pos += 1
        if expected_key is not None and parts[0] != expected_key:
            raise TraceFormatError(path, pos, f"expected {expected_key!r}, found {parts[0]!r}")
        return parts

    def numbers(parts, count):
        if len(parts) - 1 != count:
            raise TraceFormatError(path, pos, f"{parts[0]}: expected {count} values, found {len(parts) - 1}")
        try:
            return [float(v) for v in parts[1:]]
        except ValueError as exc:
            raise TraceFormatError(path, pos, str(exc)) from None

    if take()[0:2] != TRACE_HEADER.split(" "):
        raise TraceFormatError(path, 1, f"missing header {TRACE_HEADER!r}")
    try:
        dims = take("n")
        n, m, p, T = (int(dims[k]) for k in (1, 3, 5, 7))
        coef = take("zeta1")
        zeta1, zeta2, lambda1, lambda2 = (float(coef[k]) for k in (1, 3, 5, 7))
        box = take("box")
        lower, upper = float(box[1]), float(box[2])
        slack = float(take("slack")[1])
        seed_tok = take("seed")[1]
    except (IndexError, ValueError) as exc:
        if isinstance(exc, TraceFormatError):
            raise
        raise TraceFormatError(path, pos, f"malformed header line ({exc})") from None
    seed = None if seed_tok == "none" else int(seed_tok)

    shapes = {"pi": (p,), "D": (m, p), "d": (m,), "x0": (p,), "y": (p,), "A": (p, p)}
    arrays = {k: np.empty((T, n) + s) for k, s in shapes.items()}
    for k in range(T):
        parts = take("round")
        if len(parts) != 2 or parts[1] != str(k + 1):
            raise TraceFormatError(path, pos, f"expected round {k + 1}")
        for i in range(n):
            parts = take("agent")
            if len(parts) != 2 or parts[1] != str(i):
                raise TraceFormatError(path, pos, f"expected agent {i}")
            for label in _ROW_LABELS:
                vals = numbers(take(label), int(np.prod(shapes[label])))
                arrays[label][k, i] = np.reshape(vals, shapes[label])
    take("end")
    if pos != len(lines):
        raise TraceFormatError(path, pos + 1, "trailing content after 'end'")
    return TrackingInstance(zeta1, zeta2, lambda1, lambda2, lower, upper, slack, seed,
                            arrays["pi"], arrays["D"], arrays["d"], arrays["x0"], arrays["y"], arrays["A"])
