"""Bregman geometries, projections and the composite mirror-descent step."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ._validation import check_vector

__all__ = [
    "Box",
    "Simplex",
    "BregmanGeometry",
    "RegularizerSpec",
    "Subgradients",
    "DomainError",
    "bregman_divergence",
    "mirror_map_gradient",
    "nonneg_project",
    "soft_threshold",
    "project_simplex",
    "mirror_step",
    "mirror_step_iterative",
    "composite_objective",
    "mirror_step_deviation",
    "deviation_bound",
]

INNER_TOL = 1e-10
INNER_MAX_ITER = 100_000
_DOMAIN_ATOL = 1e-12


class DomainError(ValueError):
    """A point lies outside the domain a geometry or problem is defined on."""


@dataclass(frozen=True)
class Box:
    """Axis-aligned box ``[lower, upper]``."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=float).reshape(-1)
        hi = np.asarray(self.upper, dtype=float).reshape(-1)
        if lo.shape != hi.shape:
            raise ValueError("box bounds must have the same shape")
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise ValueError("box bounds must be finite (compact domains only)")
        if np.any(lo > hi):
            raise ValueError("box lower bound exceeds upper bound")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def uniform(cls, dim: int, lo: float, hi: float) -> "Box":
        return cls(np.full(dim, float(lo)), np.full(dim, float(hi)))

    @property
    def dim(self) -> int:
        return self.lower.size

    @property
    def diameter(self) -> float:
        return float(np.linalg.norm(self.upper - self.lower))

    @property
    def max_norm(self) -> float:
        """Largest Euclidean norm of a point in the box."""
        return float(np.linalg.norm(np.maximum(np.abs(self.lower), np.abs(self.upper))))

    def contains(self, x, atol: float = _DOMAIN_ATOL) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(np.all(x >= self.lower - atol) and np.all(x <= self.upper + atol))

    def project(self, x) -> np.ndarray:
        return np.clip(x, self.lower, self.upper)

    def midpoint(self) -> np.ndarray:
        return 0.5 * (self.lower + self.upper)

    def sample(self, rng, size=None) -> np.ndarray:
        shape = (self.dim,) if size is None else (size, self.dim)
        return rng.uniform(self.lower, self.upper, size=shape)

    def __eq__(self, other):
        return (
            isinstance(other, Box)
            and np.array_equal(self.lower, other.lower)
            and np.array_equal(self.upper, other.upper)
        )

    def __hash__(self):
        return hash((self.lower.tobytes(), self.upper.tobytes()))


@dataclass(frozen=True)
class Simplex:
    """Probability simplex in ``R^dim``."""

    dim: int

    @property
    def diameter(self) -> float:
        return math.sqrt(2.0) if self.dim > 1 else 0.0

    @property
    def max_norm(self) -> float:
        return 1.0

    def contains(self, x, atol: float = 1e-9) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(x.shape == (self.dim,) and np.all(x >= -atol) and abs(x.sum() - 1.0) <= atol)

    def project(self, x) -> np.ndarray:
        return project_simplex(x)

    def midpoint(self) -> np.ndarray:
        return np.full(self.dim, 1.0 / self.dim)

    def sample(self, rng, size=None) -> np.ndarray:
        return rng.dirichlet(np.ones(self.dim), size=size)


@dataclass(frozen=True)
class BregmanGeometry:
    """A mirror map together with the domain it lives on.

    ``kind="euclidean"`` is ``psi(x) = scale * ||x||^2`` so that
    ``D(x, y) = scale * ||x - y||^2``; ``kind="kl"`` is the negative entropy on
    the simplex.
    """

    kind: str
    domain: Box | Simplex
    scale: float = 1.0

    def __post_init__(self):
        if self.kind not in ("euclidean", "kl"):
            raise ValueError(f"unknown geometry kind {self.kind!r}")
        if self.kind == "euclidean" and not self.scale > 0:
            raise ValueError("scale must be positive")
        if self.kind == "kl" and not isinstance(self.domain, Simplex):
            raise ValueError("the KL geometry is only defined on the simplex")

    @classmethod
    def euclidean(cls, domain, scale: float = 1.0) -> "BregmanGeometry":
        return cls("euclidean", domain, float(scale))

    @classmethod
    def kl(cls, dim: int) -> "BregmanGeometry":
        return cls("kl", Simplex(dim), 1.0)

    @property
    def dim(self) -> int:
        return self.domain.dim

    @property
    def strong_convexity(self) -> float:
        """Strong convexity modulus of psi with respect to the 2-norm."""
        return 2.0 * self.scale if self.kind == "euclidean" else 1.0

    @property
    def lipschitz_K(self) -> float:
        # sup ||grad_x D(x, y)|| = 2 * scale * diam; KL has unbounded gradient at the boundary
        if self.kind == "euclidean":
            return 2.0 * self.scale * self.domain.diameter
        return math.inf


@dataclass(frozen=True)
class RegularizerSpec:
    """``l1 * ||x||_1 + l2 * ||x||^2`` with nonnegative weights."""

    l1: float = 0.0
    l2: float = 0.0

    def __post_init__(self):
        if self.l1 < 0 or self.l2 < 0:
            raise ValueError("regularizer weights must be nonnegative")

    @property
    def is_zero(self) -> bool:
        return self.l1 == 0.0 and self.l2 == 0.0

    def value(self, x) -> float:
        x = np.asarray(x, dtype=float)
        return float(self.l1 * np.abs(x).sum() + self.l2 * x @ x)

    def subgradient(self, x) -> np.ndarray:
        # np.sign(0) == 0 picks the zero subgradient of |.| at the kink
        x = np.asarray(x, dtype=float)
        return self.l1 * np.sign(x) + 2.0 * self.l2 * x


ZERO_REG = RegularizerSpec()


@dataclass
class Subgradients:
    """Revealed first-order data of one agent at its previous decision."""

    cost_grad: np.ndarray
    constraint_value: np.ndarray
    constraint_jacobian: np.ndarray
    reg_grad: np.ndarray | None = field(default=None)

    def __post_init__(self):
        self.cost_grad = np.asarray(self.cost_grad, dtype=float).reshape(-1)
        self.constraint_value = np.asarray(self.constraint_value, dtype=float).reshape(-1)
        self.constraint_jacobian = np.asarray(self.constraint_jacobian, dtype=float).reshape(
            self.constraint_value.size, self.cost_grad.size
        )
        arrays = [self.cost_grad, self.constraint_value, self.constraint_jacobian]
        if self.reg_grad is not None:
            self.reg_grad = np.asarray(self.reg_grad, dtype=float).reshape(-1)
            arrays.append(self.reg_grad)
        if not all(np.all(np.isfinite(a)) for a in arrays):
            raise ValueError("revealed subgradient data must be finite")

    @classmethod
    def zeros(cls, p: int, m: int) -> "Subgradients":
        return cls(np.zeros(p), np.zeros(m), np.zeros((m, p)))


def _check_in_domain(geom: BregmanGeometry, x: np.ndarray, name: str):
    if not geom.domain.contains(x):
        raise DomainError(f"{name} lies outside the geometry's domain")


def bregman_divergence(geom: BregmanGeometry, x, y) -> float:
    """Bregman divergence ``D_psi(x, y)``.

    For the KL geometry ``0 * log 0`` is taken as 0 and the second argument
    must be strictly positive wherever the first one is.
    """
    x = check_vector(x, geom.dim, "x")
    y = check_vector(y, geom.dim, "y")
    if geom.kind == "euclidean":
        diff = x - y
        return float(geom.scale * (diff @ diff))
    if np.any(x < 0) or np.any(y < 0):
        raise DomainError("KL divergence needs nonnegative arguments")
    support = x > 0
    if np.any(y[support] <= 0):
        raise DomainError("KL divergence is infinite: y_j = 0 where x_j > 0")
    xs, ys = x[support], y[support]
    # generated by psi(x) = sum x log x - x, so the mass terms stay in
    val = float(np.sum(xs * np.log(xs / ys)) - x.sum() + y.sum())
    return max(val, 0.0)


def mirror_map_gradient(geom: BregmanGeometry, x) -> np.ndarray:
    """Gradient of the mirror map psi."""
    x = np.asarray(x, dtype=float)
    if geom.kind == "euclidean":
        return 2.0 * geom.scale * x
    if np.any(x <= 0):
        raise DomainError("grad psi of the entropy needs strictly positive entries")
    return np.log(x)


def nonneg_project(z) -> np.ndarray:
    """Componentwise projection onto the nonnegative orthant."""
    return np.maximum(np.asarray(z, dtype=float), 0.0)


def soft_threshold(z, thresh):
    return np.sign(z) * np.maximum(np.abs(z) - thresh, 0.0)


def project_simplex(v) -> np.ndarray:
    """Euclidean projection onto the probability simplex (sort based)."""
    v = np.asarray(v, dtype=float)
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    idx = np.arange(1, v.size + 1)
    rho = np.nonzero(u - css / idx > 0)[0][-1]
    theta = css[rho] / (rho + 1.0)
    return np.maximum(v - theta, 0.0)


def composite_objective(geom, x_prev, a, reg: RegularizerSpec, alpha: float, x) -> float:
    """``alpha <x, a> + alpha r(x) + D(x, x_prev)``, the function the mirror step minimizes."""
    x = np.asarray(x, dtype=float)
    return float(alpha * (x @ a) + alpha * reg.value(x) + bregman_divergence(geom, x, x_prev))


def _validate_step(geom, x_prev, a, alpha):
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    x_prev = check_vector(x_prev, geom.dim, "x_prev")
    a = check_vector(a, geom.dim, "a")
    _check_in_domain(geom, x_prev, "x_prev")
    if geom.kind == "kl" and np.any(x_prev <= 0):
        raise DomainError("KL mirror step needs a strictly positive x_prev")
    return x_prev, a


def mirror_step(geom: BregmanGeometry, x_prev, a, reg: RegularizerSpec = ZERO_REG, alpha: float = 1.0):
    """Composite mirror-descent step.

    Returns the minimizer over the geometry's domain of
    ``alpha <x, a> + alpha r(x) + D(x, x_prev)``.  Closed forms are used for
    the scaled Euclidean geometry on a box and for the unregularized KL
    geometry on the simplex; other combinations fall back to
    :func:`mirror_step_iterative`.
    """
    x_prev, a = _validate_step(geom, x_prev, a, alpha)
    if geom.kind == "euclidean" and isinstance(geom.domain, Box):
        s2 = 2.0 * geom.scale
        num = soft_threshold(s2 * x_prev - alpha * a, alpha * reg.l1)
        return geom.domain.project(num / (s2 + 2.0 * alpha * reg.l2))
    if geom.kind == "kl" and reg.is_zero:
        logits = np.log(x_prev) - alpha * a
        w = np.exp(logits - logits.max())
        return w / w.sum()
    return _mirror_step_iterative(geom, x_prev, a, reg, alpha)


def mirror_step_iterative(geom, x_prev, a, reg: RegularizerSpec = ZERO_REG, alpha: float = 1.0,
                          tol: float = INNER_TOL, max_iter: int = INNER_MAX_ITER):
    """Iterative solve of the mirror step, for any geometry/domain pair."""
    x_prev, a = _validate_step(geom, x_prev, a, alpha)
    return _mirror_step_iterative(geom, x_prev, a, reg, alpha, tol, max_iter)


def _mirror_step_iterative(geom, x_prev, a, reg, alpha, tol=INNER_TOL, max_iter=INNER_MAX_ITER):
    if geom.kind == "euclidean":
        return _proximal_gradient(geom, x_prev, a, reg, alpha, tol, max_iter)
    return _entropic_fixed_point(x_prev, a, reg, alpha, tol, max_iter)


def _proximal_gradient(geom, x_prev, a, reg, alpha, tol, max_iter):
    # smooth part: alpha <x,a> + alpha l2 ||x||^2 + scale ||x - x_prev||^2;
    # prox part: alpha l1 ||x||_1 + indicator of the domain
    s2 = 2.0 * geom.scale
    lip = s2 + 2.0 * alpha * reg.l2
    step = 1.0 / lip
    dom = geom.domain
    box = isinstance(dom, Box)
    if not box and reg.l1:
        # ||x||_1 == 1 on the simplex, so the l1 term only shifts the objective
        reg = RegularizerSpec(0.0, reg.l2)

    def prox(z):
        if box:
            return dom.project(soft_threshold(z, step * alpha * reg.l1))
        return project_simplex(z)

    def smooth_grad(x):
        return alpha * a + 2.0 * alpha * reg.l2 * x + s2 * (x - x_prev)

    x = x_prev.copy()
    y = x.copy()
    t_k = 1.0
    for _ in range(max_iter):
        x_new = prox(y - step * smooth_grad(y))
        t_next = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t_k * t_k))
        y = x_new + ((t_k - 1.0) / t_next) * (x_new - x)
        x, t_k = x_new, t_next
        residual = np.linalg.norm(x - prox(x - step * smooth_grad(x))) / step
        if residual <= tol:
            break
    return x


def _entropic_fixed_point(x_prev, a, reg, alpha, tol, max_iter):
    # alpha * l2 * ||x||^2 is (2 alpha l2)-smooth relative to the entropy,
    # so the damped exponentiated update x <- argmin <grad h(x_k), x> + D(x, x_prev) + L D(x, x_k)
    # converges linearly
    lip = 2.0 * alpha * reg.l2
    log_prev = np.log(x_prev)
    x = x_prev.copy()
    for _ in range(max_iter):
        grad_h = alpha * a + 2.0 * alpha * reg.l2 * x
        logits = (log_prev + lip * np.log(x) - grad_h) / (1.0 + lip)
        w = np.exp(logits - logits.max())
        x_new = w / w.sum()
        done = np.max(np.abs(x_new - x)) <= tol
        x = x_new
        if done:
            break
    return x


def deviation_bound(geom: BregmanGeometry, a, reg: RegularizerSpec, alpha: float) -> float:
    """Upper bound ``G_h`` on the subgradient norm of ``alpha <x, a> + alpha r(x)`` over the domain."""
    a = np.asarray(a, dtype=float)
    p = geom.dim
    reg_bound = reg.l1 * math.sqrt(p) + 2.0 * reg.l2 * geom.domain.max_norm
    return float(np.linalg.norm(alpha * a) + alpha * reg_bound)


def mirror_step_deviation(geom: BregmanGeometry, x_prev, x_new, g_h: float) -> bool:
    """True iff ``||x_new - x_prev|| <= g_h / sigma`` (up to 1e-12)."""
    dist = float(np.linalg.norm(np.asarray(x_new, dtype=float) - np.asarray(x_prev, dtype=float)))
    return dist <= g_h / geom.strong_convexity + 1e-12
