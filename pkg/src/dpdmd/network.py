"""Time-varying communication graphs and dual consensus mixing."""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from scipy.sparse.csgraph import connected_components

from ._validation import TraceFormatError, check_random_state

__all__ = [
    "CommGraphSequence",
    "Assumption1Report",
    "GraphConstructionError",
    "build_weights",
    "generate_graph_sequence",
    "check_assumption1",
    "mix_duals",
    "save_graphs",
    "load_graphs",
]

STOCHASTIC_TOL = 1e-12


class GraphConstructionError(ValueError):
    pass


def build_weights(edges, n: int) -> np.ndarray:
    """Doubly stochastic weights for an undirected edge set.

    Every listed pair ``(j, i)`` gets weight ``1/n`` at entry ``[i, j]``; the
    diagonal takes the remainder of the row.  Agents are 0-based.
    """
    W = np.zeros((n, n))
    for j, i in edges:
        if i == j:
            raise GraphConstructionError(f"self-loop ({i}, {i}) must not be listed")
        if not (0 <= i < n and 0 <= j < n):
            raise GraphConstructionError(f"edge ({j}, {i}) out of range for n={n}")
        W[i, j] = 1.0 / n
    if not np.array_equal(W > 0, (W > 0).T):
        raise GraphConstructionError("edge set is not symmetric")
    degree = np.count_nonzero(W, axis=1)
    if np.any(degree >= n):
        bad = int(np.argmax(degree >= n))
        raise GraphConstructionError(f"agent {bad} has {degree[bad]} neighbours, diagonal would vanish")
    np.fill_diagonal(W, 1.0 - W.sum(axis=1))
    return W


@dataclass(frozen=True)
class CommGraphSequence:
    """Per-round directed edge sets ``E_1..E_T`` with their weight matrices.

    ``rounds[k]`` and ``weights[k]`` belong to round ``t = k + 1``.  An edge
    ``(j, i)`` means agent ``i`` receives from agent ``j``.
    """

    n: int
    rounds: tuple
    weights: tuple
    w: float
    iota: int = 1

    def __post_init__(self):
        if len(self.rounds) != len(self.weights):
            raise ValueError("one weight matrix per round is required")
        object.__setattr__(self, "rounds", tuple(tuple(sorted(map(tuple, e))) for e in self.rounds))
        object.__setattr__(self, "weights", tuple(np.asarray(W, dtype=float) for W in self.weights))

    @classmethod
    def from_edges(cls, rounds, n: int, iota: int = 1) -> "CommGraphSequence":
        return cls(n, tuple(rounds), tuple(build_weights(e, n) for e in rounds), 1.0 / n, iota)

    @property
    def T(self) -> int:
        return len(self.rounds)

    def weight(self, t: int) -> np.ndarray:
        """``W_t`` for ``t >= 1``; ``W_0`` is the identity."""
        if t == 0:
            return np.eye(self.n)
        return self.weights[t - 1]

    def __eq__(self, other):
        return (
            isinstance(other, CommGraphSequence)
            and self.n == other.n
            and self.rounds == other.rounds
            and all(np.array_equal(a, b) for a, b in zip(self.weights, other.weights))
        )

    __hash__ = None


def generate_graph_sequence(n: int, rho: float, T: int, rng_seed=None) -> CommGraphSequence:
    """Random undirected graphs on top of the path ``0-1-...-(n-1)``.

    Each unordered pair is connected independently with probability ``rho``.
    The path backbone keeps every round strongly connected.
    """
    if not 0.0 <= rho <= 1.0:
        raise ValueError("rho must lie in [0, 1]")
    if n < 1:
        raise ValueError("n must be positive")
    rng = check_random_state(rng_seed)
    iu, ju = np.triu_indices(n, k=1)
    backbone = ju == iu + 1
    rounds = []
    for _ in range(T):
        keep = (rng.random(iu.size) < rho) | backbone
        pairs = list(zip(iu[keep].tolist(), ju[keep].tolist()))
        rounds.append(pairs + [(j, i) for i, j in pairs])
    return CommGraphSequence.from_edges(rounds, n, iota=1)


@dataclass
class Assumption1Report:
    passed: bool
    violation: str | None = None
    round: int | None = None
    entry: tuple | None = None

    def __bool__(self):
        return self.passed

    def __str__(self):
        if self.passed:
            return "graph check: pass"
        return f"graph check: FAIL at round {self.round}: {self.violation}"


def _strongly_connected(adj: np.ndarray) -> bool:
    n_comp, _ = connected_components(adj, directed=True, connection="strong")
    return n_comp == 1


def check_assumption1(seq: CommGraphSequence, w: float | None = None, iota: int | None = None,
                      tol: float = STOCHASTIC_TOL) -> Assumption1Report:
    """Check double stochasticity, the weight floor and windowed strong connectivity."""
    w = seq.w if w is None else w
    iota = seq.iota if iota is None else iota
    n = seq.n
    for k, W in enumerate(seq.weights):
        t = k + 1
        if W.shape != (n, n):
            return Assumption1Report(False, f"weight matrix has shape {W.shape}", t)
        if np.any(W < 0):
            i, j = map(int, np.argwhere(W < 0)[0])
            return Assumption1Report(False, f"negative weight {W[i, j]!r}", t, (i, j))
        rows = np.abs(W.sum(axis=1) - 1.0)
        if rows.max() > tol:
            i = int(rows.argmax())
            return Assumption1Report(False, f"row {i} sums to {W[i].sum()!r}", t, (i, None))
        cols = np.abs(W.sum(axis=0) - 1.0)
        if cols.max() > tol:
            j = int(cols.argmax())
            return Assumption1Report(False, f"column {j} sums to {W[:, j].sum()!r}", t, (None, j))
        diag = np.diag(W)
        # the diagonal is a computed remainder, so allow rounding at the floor
        if np.any(diag < w - tol):
            i = int(np.argmin(diag))
            return Assumption1Report(False, f"diagonal weight {diag[i]!r} below floor {w!r}", t, (i, i))
        low = (W > 0) & (W < w - tol)
        if np.any(low):
            i, j = map(int, np.argwhere(low)[0])
            return Assumption1Report(False, f"weight {W[i, j]!r} below floor {w!r}", t, (i, j))
        expected = np.zeros((n, n), dtype=bool)
        for j, i in seq.rounds[k]:
            expected[i, j] = True
        off = ~np.eye(n, dtype=bool)
        mismatch = off & ((W > 0) != expected)
        if np.any(mismatch):
            i, j = map(int, np.argwhere(mismatch)[0])
            return Assumption1Report(False, "weight support disagrees with the edge set", t, (i, j))
    for start in range(max(seq.T - iota + 1, 0)):
        union = np.zeros((n, n), dtype=bool)
        for W in seq.weights[start:start + iota]:
            union |= W > 0
        if not _strongly_connected(union):
            return Assumption1Report(
                False, f"union of rounds {start + 1}..{start + iota} is not strongly connected", start + 1
            )
    return Assumption1Report(True)


def mix_duals(W, duals) -> np.ndarray:
    """Consensus step ``q_tilde_i = sum_j W_ij q_j`` for stacked duals of shape (n, m)."""
    W = np.asarray(W, dtype=float)
    Q = np.asarray(duals, dtype=float)
    if Q.ndim == 1:
        Q = Q[:, None]
    if W.shape != (Q.shape[0], Q.shape[0]):
        raise ValueError(f"weight matrix {W.shape} does not match {Q.shape[0]} duals")
    return W @ Q


def save_graphs(seq: CommGraphSequence, path) -> None:
    """Write the line format: ``n N`` then ``round t`` blocks of ``i j`` lines."""
    lines = [f"n {seq.n}"]
    for t, edges in enumerate(seq.rounds, start=1):
        lines.append(f"round {t}")
        lines.extend(f"{i} {j}" for i, j in edges)
    with open(os.fspath(path), "w", encoding="ascii", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def load_graphs(path) -> CommGraphSequence:
    """Parse a file written by :func:`save_graphs`; errors carry the line number."""
    with open(os.fspath(path), encoding="ascii") as fh:
        raw = fh.read().splitlines()
    head = raw[0].split() if raw else []
    if len(head) != 2 or head[0] != "n" or not head[1].isdigit():
        raise TraceFormatError(path, 1, "expected header 'n <agents>'")
    n = int(head[1])
    rounds = []
    for lineno, line in enumerate(raw[1:], start=2):
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "round":
            if len(parts) != 2 or parts[1] != str(len(rounds) + 1):
                raise TraceFormatError(path, lineno, "rounds must be numbered consecutively from 1")
            rounds.append([])
        elif len(parts) == 2 and rounds and all(v.isdigit() for v in parts):
            rounds[-1].append((int(parts[0]), int(parts[1])))
        else:
            raise TraceFormatError(path, lineno, f"cannot parse {line!r}")
    try:
        return CommGraphSequence.from_edges(rounds, n)
    except GraphConstructionError as exc:
        raise TraceFormatError(path, len(raw), str(exc)) from None
