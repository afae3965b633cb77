"""Seeded experiment runner: configs, output bundles, replay and parameter sweeps."""

from __future__ import annotations

import configparser
import csv
import dataclasses
import io
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .algorithm import DynamicMapping, RunTrace, StepsizeSchedule, run
from .geometry import BregmanGeometry
from .metrics import (
    ComparatorSequence,
    accumulated_variation,
    accumulated_variation_identity,
    constraint_violation,
    dynamic_optimum,
    estimate_constants,
    slater_margin,
    static_optimum,
    stationarity_residual,
    theoretical_bounds,
)
from .network import CommGraphSequence, generate_graph_sequence, load_graphs, save_graphs
from .problem import TrackingProblem, generate_instance, load_trace, save_trace

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "ExperimentResult",
    "ReplayReport",
    "build_problem",
    "build_graphs",
    "default_checkpoints",
    "run_experiment",
    "replay",
    "sweep",
    "TRACE_CSV",
    "METRICS_CSV",
    "SUMMARY_FILE",
    "INSTANCE_FILE",
    "GRAPHS_FILE",
]

TRACE_CSV = "trace.csv"
METRICS_CSV = "metrics.csv"
SUMMARY_FILE = "summary.txt"
INSTANCE_FILE = "instance.trace"
GRAPHS_FILE = "graphs.txt"
SWEEP_SLICES = (100, 500, 1000)
REPLAY_TOL = 1e-12


class ConfigError(ValueError):
    pass


# -- configuration -------------------------------------------------------------

def _choice(value, options, key):
    if value not in options:
        raise ConfigError(f"{key} must be one of {', '.join(options)}; got {value!r}")
    return value


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything needed to reproduce one run.

    Loaded from an INI file with the sections ``[instance]``,
    ``[algorithm]``, ``[output]`` and an optional ``[sweep]``; every key is
    optional and unknown keys are rejected.
    """

    # [instance]
    n: int = 10
    m: int = 3
    p: int = 4
    T: int = 2000
    zeta1: float = 1.0
    zeta2: float = 30.0
    lambda1: float = 1.0
    lambda2: float = 30.0
    lower: float = 0.0
    upper: float = 5.0
    slack: float = 0.0
    rho: float = 0.2
    seed: int = 1
    # [algorithm]
    schedule: str = "strongly_convex"
    c: float = 0.5
    kappa: float = 0.5
    geometry: str = "euclidean"
    sigma: float = 10.0
    mapping: str = "true_dynamics"
    regularization: str = "explicit"
    epsilon: float | None = None
    # [output]
    out_dir: str = "out"
    comparators: tuple = ("dynamic",)
    checkpoints: tuple | None = None
    # [sweep]
    sweep_param: str | None = None
    sweep_values: tuple = ()

    _SECTIONS = {
        "instance": {"n": int, "m": int, "p": int, "T": int, "zeta1": float, "zeta2": float,
                     "lambda1": float, "lambda2": float, "lower": float, "upper": float,
                     "slack": float, "rho": float, "seed": int},
        "algorithm": {"schedule": str, "c": float, "kappa": float, "geometry": str, "sigma": float,
                      "mapping": str, "regularization": str, "epsilon": float},
        "output": {"dir": str, "comparators": str, "checkpoints": str},
        "sweep": {"param": str, "values": str},
    }

    def __post_init__(self):
        for key in ("n", "m", "p", "T"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be a positive integer")
        if self.zeta2 <= 0:
            raise ConfigError("zeta2 must be positive")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError("lambda1 and lambda2 must be nonnegative")
        if not self.lower < self.upper:
            raise ConfigError("lower must be below upper")
        if not 0.0 <= self.rho <= 1.0:
            raise ConfigError("rho must lie in [0, 1]")
        _choice(self.schedule, ("general", "slater", "strongly_convex"), "schedule")
        _choice(self.geometry, ("euclidean",), "geometry")
        _choice(self.mapping, ("identity", "true_dynamics"), "mapping")
        _choice(self.regularization, ("explicit", "folded"), "regularization")
        for key in ("c", "kappa"):
            if not 0.0 < getattr(self, key) < 1.0:
                raise ConfigError(f"{key} must lie in (0, 1)")
        if self.sigma <= 0:
            raise ConfigError("sigma must be positive")
        if self.epsilon is not None and self.epsilon <= 0:
            raise ConfigError("epsilon must be positive")
        if not self.comparators or any(c not in ("dynamic", "static") for c in self.comparators):
            raise ConfigError("comparators must be a nonempty list from {dynamic, static}")
        if "dynamic" not in self.comparators:
            raise ConfigError("the dynamic comparator is always required")
        if self.checkpoints is not None:
            cps = self.checkpoints
            if not cps or any(b <= a for a, b in zip(cps, cps[1:])) or cps[0] < 1 or cps[-1] > self.T:
                raise ConfigError("checkpoints must be strictly increasing within 1..T")
        if self.sweep_param is not None:
            if self.sweep_param not in _SWEEPABLE:
                raise ConfigError(f"cannot sweep {self.sweep_param!r}; choose from {', '.join(_SWEEPABLE)}")
            if not self.sweep_values:
                raise ConfigError("sweep needs at least one value")

    # -- io --

    @classmethod
    def from_string(cls, text: str) -> "ExperimentConfig":
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"unparseable config: {exc}") from None
        kwargs = {}
        for section in parser.sections():
            if section not in cls._SECTIONS:
                raise ConfigError(f"unknown section [{section}]")
            spec = cls._SECTIONS[section]
            for key, raw in parser.items(section):
                if key not in spec:
                    raise ConfigError(f"unknown key {key!r} in [{section}]")
                raw = raw.strip()
                try:
                    value = spec[key](raw)
                except ValueError:
                    raise ConfigError(f"[{section}] {key}: cannot parse {raw!r}") from None
                kwargs.update(_map_key(section, key, value))
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.from_string(text)

    def to_string(self) -> str:
        """Resolved config in the same INI format (round-trips through :meth:`from_string`)."""
        out = io.StringIO()
        out.write("[instance]\n")
        for key in self._SECTIONS["instance"]:
            out.write(f"{key} = {_fmt_value(getattr(self, key))}\n")
        out.write("\n[algorithm]\n")
        for key in self._SECTIONS["algorithm"]:
            val = getattr(self, key)
            if val is not None:
                out.write(f"{key} = {_fmt_value(val)}\n")
        out.write("\n[output]\n")
        out.write(f"dir = {self.out_dir}\n")
        out.write(f"comparators = {', '.join(self.comparators)}\n")
        cps = "auto" if self.checkpoints is None else ", ".join(map(str, self.checkpoints))
        out.write(f"checkpoints = {cps}\n")
        if self.sweep_param is not None:
            out.write("\n[sweep]\n")
            out.write(f"param = {self.sweep_param}\n")
            out.write(f"values = {', '.join(_fmt_value(v) for v in self.sweep_values)}\n")
        return out.getvalue()

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def resolved_checkpoints(self) -> tuple:
        return self.checkpoints if self.checkpoints is not None else default_checkpoints(self.T)

    def schedule_obj(self) -> StepsizeSchedule:
        if self.schedule == "general":
            return StepsizeSchedule.general(self.c, self.kappa)
        if self.schedule == "slater":
            return StepsizeSchedule.slater(self.kappa)
        return StepsizeSchedule.strongly_convex(self.kappa)


_SWEEPABLE = ("kappa", "c", "sigma", "rho", "seed", "slack")


def _split_list(raw):
    return [v.strip() for v in raw.replace(";", ",").split(",") if v.strip()]


def _map_key(section, key, value):
    if section == "output":
        if key == "dir":
            return {"out_dir": value}
        if key == "comparators":
            return {"comparators": tuple(_split_list(value))}
        if value.lower() == "auto":
            return {"checkpoints": None}
        try:
            return {"checkpoints": tuple(int(v) for v in _split_list(value))}
        except ValueError:
            raise ConfigError(f"[output] checkpoints: cannot parse {value!r}") from None
    if section == "sweep":
        if key == "param":
            return {"sweep_param": value}
        try:
            return {"sweep_values": tuple(float(v) for v in _split_list(value))}
        except ValueError:
            raise ConfigError(f"[sweep] values: cannot parse {value!r}") from None
    return {key: value}


def _fmt_value(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def default_checkpoints(T: int) -> tuple:
    """About four log-spaced points per decade, plus 100, 200, 500, 1000 and ``T``."""
    pts = {int(round(v)) for v in np.logspace(1, math.log10(T), num=max(2, int(4 * math.log10(T)))) if T >= 10}
    pts |= {v for v in (100, 200, 500, 1000) if v <= T}
    pts.add(T)
    return tuple(sorted(v for v in pts if 1 <= v <= T))


# -- building blocks -----------------------------------------------------------

def _graph_seed(seed: int):
    # independent stream for the graphs so instance draws do not depend on rho
    return np.random.default_rng([int(seed), 1])


def build_problem(cfg: ExperimentConfig) -> TrackingProblem:
    inst = generate_instance(cfg.n, cfg.m, cfg.p, cfg.T, cfg.zeta1, cfg.zeta2, cfg.lambda1, cfg.lambda2,
                             seed=cfg.seed, lower=cfg.lower, upper=cfg.upper, slack=cfg.slack)
    return TrackingProblem(inst, "folded" if cfg.regularization == "folded" else "explicit")


def build_graphs(cfg: ExperimentConfig) -> CommGraphSequence:
    return generate_graph_sequence(cfg.n, cfg.rho, max(cfg.T - 1, 1), _graph_seed(cfg.seed))


def _mapping(cfg, problem):
    if cfg.mapping == "true_dynamics":
        return DynamicMapping.linear(problem.dynamics)
    return DynamicMapping.identity()


def _geoms(cfg, problem):
    return [BregmanGeometry.euclidean(dom, cfg.sigma) for dom in problem.domains]


def _trace_header(p, m):
    return (["t", "i", "alpha", "beta", "gamma"] + [f"x_{k}" for k in range(p)]
            + [f"q_{k}" for k in range(m)] + ["cost"] + [f"g_{k}" for k in range(m)])


def _trace_rows(trace: RunTrace):
    for r in trace.rounds:
        for i, rec in enumerate(r.agents):
            yield [r.t, i, r.alpha, r.beta, r.gamma, *rec.x, *rec.q, r.cost[i], *r.constraint[i]]


def _fmt_cell(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    if not math.isfinite(v):
        raise ValueError(f"non-finite value {v!r} in output")
    return repr(v)


def _write_csv(path, header, rows):
    with open(path, "w", encoding="ascii", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt_cell(v) for v in row])


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    out_dir: Path
    trace: RunTrace
    metrics: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def column(self, name) -> np.ndarray:
        return np.array([row[name] for row in self.metrics])


def _resolve_epsilon(cfg, problem):
    if cfg.schedule != "slater":
        return cfg.epsilon
    if cfg.epsilon is not None:
        return cfg.epsilon
    eps = slater_margin(problem)
    if eps <= 0:
        raise ConfigError(f"the slater schedule needs an interior point, but the best margin is {eps:.3e}; "
                          "raise [instance] slack or set [algorithm] epsilon")
    return eps


def run_experiment(cfg: ExperimentConfig, out_dir=None) -> ExperimentResult:
    """Generate data, run the engine, evaluate metrics at the checkpoints and write the bundle.

    Files written to ``out_dir`` (default ``cfg.out_dir``): ``instance.trace``,
    ``graphs.txt``, ``trace.csv``, ``metrics.csv`` and ``summary.txt``.
    """
    out = Path(cfg.out_dir if out_dir is None else out_dir)
    problem = build_problem(cfg)
    graphs = build_graphs(cfg)
    schedule = cfg.schedule_obj()
    mapping = _mapping(cfg, problem)
    geoms = _geoms(cfg, problem)
    epsilon = _resolve_epsilon(cfg, problem)
    trace = run(problem, graphs, schedule, mapping, geoms, dual_bound_F=problem.bounds()[0])

    inst = problem.instance
    T = cfg.T
    X = trace.decisions
    f_alg = trace.costs
    gsum = trace.constraint_sums

    # dynamic comparator: x0 after the audit, one round at a time
    dyn = np.array([dynamic_optimum(problem, t) for t in range(1, T + 1)])
    dyn_seq = ComparatorSequence(dyn, "dynamic")
    dyn_seq.check_feasible(problem)
    f_dyn = np.array([problem.round_objective(t, dyn[t - 1])[0] for t in range(1, T + 1)])
    audit = max(stationarity_residual(problem, t, dyn[t - 1]) for t in range(1, T + 1))

    constants = estimate_constants(problem, geoms, graphs)
    checkpoints = cfg.resolved_checkpoints()
    with_static = "static" in cfg.comparators

    # running variation of the comparator, with respect to the mapping in use and to the identity
    var_map = np.zeros(T)
    var_id = np.zeros(T)
    for t in range(2, T + 1):
        var_id[t - 1] = var_id[t - 2] + np.linalg.norm(dyn[t - 1] - dyn[t - 2])
        var_map[t - 1] = var_map[t - 2] + sum(
            np.linalg.norm(dyn[t - 1][i] - mapping(i, t, dyn[t - 2][i])) for i in range(cfg.n))

    rows = []
    cum_alg = np.cumsum(f_alg)
    cum_dyn = np.cumsum(f_dyn)
    for tp in checkpoints:
        row = {"t": tp, "reg_dyn_over_t": (cum_alg[tp - 1] - cum_dyn[tp - 1]) / tp}
        if with_static:
            xs = static_optimum(problem, tp)
            f_static = problem.static_objective(range(1, tp + 1), xs)[0]
            row["reg_static_over_t"] = (cum_alg[tp - 1] - f_static) / tp
        row["violation_over_t"] = constraint_violation(gsum[:tp]) / tp
        V = var_id[tp - 1] if cfg.schedule == "slater" else var_map[tp - 1]
        bnd = theoretical_bounds(constants, schedule, tp, V=V, comparator="dynamic", epsilon=epsilon)
        row["regret_bound"] = bnd["regret_bound"]
        row["violation_bound"] = bnd["violation_bound"]
        rows.append(row)

    final_static = None
    if with_static:
        final_static = rows[-1]["reg_static_over_t"] * T if checkpoints[-1] == T else None

    summary = {f"config.{k}": v for k, v in _flat_config(cfg).items()}
    summary.update({f"constants.{k}": v for k, v in constants.summary(schedule, epsilon).items()
                    if v is not None})
    summary.update({
        "result.rounds": T,
        "result.reg_dyn": float(cum_alg[-1] - cum_dyn[-1]),
        "result.violation": constraint_violation(gsum),
        "result.variation_mapping": float(var_map[-1]),
        "result.variation_identity": float(var_id[-1]),
        "result.max_dual_norm": float(np.linalg.norm(trace.stack("q"), axis=-1).max()),
        "result.invariant_violations": len(trace.violations),
        "result.mapping_warnings": len(trace.warnings),
        "oracle.stationarity_max": audit,
        "regime": theoretical_bounds(constants, schedule, T, epsilon=epsilon)["regime"],
    })
    if final_static is not None:
        summary["result.reg_static"] = final_static

    out.mkdir(parents=True, exist_ok=True)
    save_trace(inst, out / INSTANCE_FILE)
    save_graphs(graphs, out / GRAPHS_FILE)
    _write_csv(out / TRACE_CSV, _trace_header(cfg.p, cfg.m), _trace_rows(trace))
    header = ["t", "reg_dyn_over_t"] + (["reg_static_over_t"] if with_static else []) + [
        "violation_over_t", "regret_bound", "violation_bound"]
    _write_csv(out / METRICS_CSV, header, ([row[h] for h in header] for row in rows))
    _write_summary(out / SUMMARY_FILE, summary)
    return ExperimentResult(cfg, out, trace, rows, summary)


def _flat_config(cfg):
    out = {}
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if f.name == "checkpoints":
            v = cfg.resolved_checkpoints()
        if isinstance(v, tuple):
            v = ",".join(_fmt_value(x) for x in v)
        if v is None or v == "":
            v = "none"
        out[f.name] = v
    return out


def _write_summary(path, summary: dict):
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        for key, value in summary.items():
            fh.write(f"{key} = {_fmt_value(value) if not isinstance(value, (int, np.integer)) else int(value)}\n")


def read_summary(path) -> dict:
    out = {}
    for line in Path(path).read_text(encoding="ascii").splitlines():
        key, _, value = line.partition(" = ")
        out[key] = value
    return out


# -- replay --------------------------------------------------------------------

@dataclass
class ReplayReport:
    passed: bool
    rows_checked: int = 0
    t: int | None = None
    i: int | None = None
    column: str | None = None
    expected: float | None = None
    found: float | None = None
    message: str = ""

    def __bool__(self):
        return self.passed

    def __str__(self):
        if self.passed:
            return f"replay: pass ({self.rows_checked} rows)"
        where = f" at t={self.t}, i={self.i}" if self.t is not None else ""
        col = f", column {self.column}: recorded {self.found!r}, recomputed {self.expected!r}" if self.column else ""
        return f"replay: FAIL{where}{col}. {self.message}".rstrip()


def _first_instance_mismatch(a, b):
    if (a.n, a.m, a.p) != (b.n, b.m, b.p) or a.T != b.T:
        return 1, 0, "instance dimensions differ"
    for k in range(a.T):
        for i in range(a.n):
            for name in ("pi", "D", "d", "x0", "y", "A"):
                if not np.array_equal(getattr(a, name)[k, i], getattr(b, name)[k, i]):
                    return k + 1, i, f"recorded instance field {name} differs from the config's"
    for name in ("zeta1", "zeta2", "lambda1", "lambda2", "lower", "upper", "slack"):
        if getattr(a, name) != getattr(b, name):
            return 1, 0, f"recorded instance parameter {name} differs from the config's"
    return None


def replay(trace_path, cfg: ExperimentConfig, tol: float = REPLAY_TOL) -> ReplayReport:
    """Re-run the engine and compare every row of a recorded ``trace.csv``.

    The recorded instance and graphs are read from ``instance.trace`` and
    ``graphs.txt`` next to the trace when present and must coincide with what
    the config regenerates.  Values must agree within ``tol`` (relative for
    magnitudes above one).
    """
    trace_path = Path(trace_path)
    base = trace_path.parent
    problem = build_problem(cfg)
    graphs = build_graphs(cfg)
    if (base / INSTANCE_FILE).exists():
        mismatch = _first_instance_mismatch(load_trace(base / INSTANCE_FILE), problem.instance)
        if mismatch:
            t, i, msg = mismatch
            return ReplayReport(False, 0, t, i, message=msg)
    if (base / GRAPHS_FILE).exists():
        recorded = load_graphs(base / GRAPHS_FILE)
        if recorded.n != graphs.n or recorded.T != graphs.T:
            return ReplayReport(False, 0, 1, 0, message="recorded graph sequence has a different size")
        for k, (e1, e2) in enumerate(zip(recorded.rounds, graphs.rounds)):
            if e1 != e2:
                return ReplayReport(False, 0, k + 2, 0, message=f"graph of round {k + 1} differs")

    trace = run(problem, graphs, cfg.schedule_obj(), _mapping(cfg, problem), _geoms(cfg, problem),
                dual_bound_F=problem.bounds()[0])
    header = _trace_header(cfg.p, cfg.m)
    with open(trace_path, encoding="ascii", newline="") as fh:
        reader = csv.reader(fh)
        recorded_header = next(reader, None)
        if recorded_header != header:
            return ReplayReport(False, 0, message=f"trace columns {recorded_header} differ from {header}")
        checked = 0
        expected_rows = _trace_rows(trace)
        for lineno, rec in enumerate(reader, start=2):
            exp = next(expected_rows, None)
            if exp is None:
                return ReplayReport(False, checked, message=f"trace has extra rows from line {lineno}")
            t, i = int(exp[0]), int(exp[1])
            if len(rec) != len(header):
                return ReplayReport(False, checked, t, i, message=f"line {lineno} has {len(rec)} fields")
            for col, r, e in zip(header, rec, exp):
                try:
                    val = float(r)
                except ValueError:
                    return ReplayReport(False, checked, t, i, col, float(e), None, f"unparseable value {r!r}")
                e = float(e)
                if not abs(val - e) <= tol * max(1.0, abs(e)):
                    return ReplayReport(False, checked, t, i, col, e, val, "value diverges")
            checked += 1
        if next(expected_rows, None) is not None:
            return ReplayReport(False, checked, message="trace ends before the last round")
    return ReplayReport(True, checked)


# -- sweeps --------------------------------------------------------------------

def _sweep_job(args):
    cfg, out_dir = args
    res = run_experiment(cfg, out_dir)
    return res.metrics


def sweep(cfg: ExperimentConfig, param: str | None = None, values=None, out_dir=None,
          max_workers: int | None = None) -> Path:
    """Run one experiment per parameter value in parallel and write a combined table.

    Each run lands in ``<out>/<param>_<value>/``; the combined
    ``sweep_<param>.csv`` lists ``reg_dyn_over_t`` and ``violation_over_t`` at
    T' in {100, 500, 1000} (those not exceeding T).
    """
    param = param or cfg.sweep_param
    values = tuple(values) if values is not None else cfg.sweep_values
    if param is None or not values:
        raise ConfigError("a sweep needs a parameter and at least one value")
    if param not in _SWEEPABLE:
        raise ConfigError(f"cannot sweep {param!r}; choose from {', '.join(_SWEEPABLE)}")
    out = Path(cfg.out_dir if out_dir is None else out_dir)
    slices = tuple(v for v in SWEEP_SLICES if v <= cfg.T)
    jobs = []
    for v in values:
        value = int(v) if param == "seed" else float(v)
        cps = tuple(sorted(set(cfg.resolved_checkpoints()) | set(slices)))
        sub = cfg.replace(**{param: value}, checkpoints=cps, sweep_param=None, sweep_values=())
        jobs.append((sub, str(out / f"{param}_{_fmt_value(value)}")))
    if max_workers == 1 or len(jobs) == 1:
        results = [_sweep_job(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=max_workers) as pool:
            results = list(pool.map(_sweep_job, jobs))
    rows = []
    for (sub, _), metrics in zip(jobs, results):
        by_t = {row["t"]: row for row in metrics}
        for s in slices:
            rows.append([getattr(sub, param), s, by_t[s]["reg_dyn_over_t"], by_t[s]["violation_over_t"]])
    table = out / f"sweep_{param}.csv"
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(table, [param, "T", "reg_dyn_over_t", "violation_over_t"], rows)
    return table
