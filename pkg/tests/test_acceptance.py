"""Acceptance suite.

Each test carries a ``criterion`` marker; the terminal summary prints one
pass/fail line per criterion (see ``conftest.py``).  Runtime limits are part
of the criteria and are asserted.
"""

import itertools
import math
import time

import numpy as np
import pytest

from _problems import ScalarProblem, lattice_argmin, pair_instance
from dpdmd.algorithm import AgentState, DynamicMapping, StepsizeSchedule, agent_round, run
from dpdmd.experiment import ExperimentConfig, build_graphs, build_problem, replay, run_experiment
from dpdmd.geometry import (
    Box,
    BregmanGeometry,
    RegularizerSpec,
    Simplex,
    Subgradients,
    composite_objective,
    deviation_bound,
    mirror_step,
    mirror_step_deviation,
    mirror_step_iterative,
)
from dpdmd.metrics import dynamic_optimum, estimate_constants, static_optimum
from dpdmd.network import check_assumption1, generate_graph_sequence, load_graphs, save_graphs
from dpdmd.problem import load_trace, save_trace

DESK = ExperimentConfig(n=10, m=3, p=4, T=2000, rho=0.2, kappa=0.5, sigma=10.0, mapping="true_dynamics")
SCHEDULES = {
    "general": dict(schedule="general", c=0.6, kappa=0.5),
    "slater": dict(schedule="slater", kappa=0.5),
    "strongly_convex": dict(schedule="strongly_convex", kappa=0.5),
}


def criterion(number, title):
    return pytest.mark.criterion(number, title)


def geometries(cfg, problem):
    return [BregmanGeometry.euclidean(dom, cfg.sigma) for dom in problem.domains]


def final_metrics(cfg, tmp_path):
    res = run_experiment(cfg.replace(checkpoints=(cfg.T,)), tmp_path / f"{cfg.seed}_{cfg.mapping}_"
                         f"{cfg.regularization}_{cfg.kappa}")
    return res.metrics[-1]


# 1 ---------------------------------------------------------------------------

@criterion(1, "dual boundedness ||q_it|| <= F/beta_t over 20 desk-scale runs, three schedules, < 2 min")
def test_dual_boundedness():
    start = time.perf_counter()
    names = itertools.cycle(SCHEDULES)
    checked = 0
    for seed in range(1, 21):
        cfg = DESK.replace(seed=seed, **SCHEDULES[next(names)])
        problem = build_problem(cfg)
        graphs = build_graphs(cfg)
        geoms = geometries(cfg, problem)
        F = estimate_constants(problem, geoms, graphs).F
        trace = run(problem, graphs, cfg.schedule_obj(), DynamicMapping.linear(problem.instance.A), geoms,
                    dual_bound_F=F)
        assert trace.violations == [], (cfg.schedule, seed, trace.violations[:3])
        # independent check of the bound on the recorded duals
        q_norm = np.linalg.norm(trace.stack("q"), axis=-1)
        q_tilde_norm = np.linalg.norm(trace.stack("q_tilde"), axis=-1)
        caps = F / trace.stepsizes()[:, 1]
        assert np.all(q_norm <= caps[:, None]) and np.all(q_tilde_norm <= caps[:, None])
        checked += q_norm.size
    elapsed = time.perf_counter() - start
    print(f"\n[1] {checked} (i, t) pairs checked, 0 violations, {elapsed:.1f} s")
    assert checked == 20 * 2000 * 10
    assert elapsed < 120


# 2 ---------------------------------------------------------------------------

def _draw_step(rng, k):
    """Instance k of the randomized mirror-step family."""
    p = int(rng.integers(1, 6))
    kind = ("box", "box", "box", "box", "box", "box", "kl", "kl", "kl_reg", "simplex")[k % 10]
    if kind == "box":
        lo = float(rng.uniform(-3, 1))
        geom = BregmanGeometry.euclidean(Box.uniform(p, lo, lo + rng.uniform(0.5, 6)), float(rng.uniform(0.5, 20)))
        reg = RegularizerSpec(float(rng.uniform(0, 3)), float(rng.uniform(0, 40)))
        a = rng.normal(0, 30, p)
    else:
        p = max(p, 2)
        geom = (BregmanGeometry.euclidean(Simplex(p), float(rng.uniform(0.5, 10))) if kind == "simplex"
                else BregmanGeometry.kl(p))
        reg = RegularizerSpec() if kind == "kl" else RegularizerSpec(float(rng.uniform(0, 2)),
                                                                     float(rng.uniform(0, 5)))
        a = rng.normal(0, 3, p)
    x_prev = rng.dirichlet(np.ones(p)) if kind != "box" else geom.domain.sample(rng)
    return kind, geom, reg, x_prev, a, float(rng.uniform(0.01, 1.0))


def _objective_many(geom, x_prev, a, reg, alpha, X):
    lin = alpha * (X @ a) + alpha * (reg.l1 * np.abs(X).sum(1) + reg.l2 * (X * X).sum(1))
    if geom.kind == "euclidean":
        diff = X - x_prev
        return lin + geom.scale * (diff * diff).sum(1)
    with np.errstate(divide="ignore", invalid="ignore"):
        ent = np.where(X > 0, X * np.log(X / x_prev), 0.0)
    return lin + ent.sum(1) - X.sum(1) + x_prev.sum()


@criterion(2, "mirror-step optimality, deviation bound and closed form vs inner solver on 1e4 instances, < 1 min")
def test_mirror_step_contracts():
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst_gap = worst_closed = 0.0
    closed_count = 0
    for k in range(10_000):
        kind, geom, reg, x_prev, a, alpha = _draw_step(rng, k)
        xt = mirror_step(geom, x_prev, a, reg, alpha)
        assert geom.domain.contains(xt, atol=1e-12)
        best = composite_objective(geom, x_prev, a, reg, alpha, xt)
        pts = geom.domain.sample(rng, 1000) if kind == "box" else rng.dirichlet(np.ones(geom.dim), 1000)
        others = _objective_many(geom, x_prev, a, reg, alpha, pts)
        worst_gap = max(worst_gap, float(best - others.min()))
        assert best <= others.min() + 1e-9, (k, kind)
        g_h = deviation_bound(geom, a, reg, alpha)
        assert mirror_step_deviation(geom, x_prev, xt, g_h), (k, kind)
        if kind in ("box", "kl"):
            closed_count += 1
            diff = float(np.max(np.abs(xt - mirror_step_iterative(geom, x_prev, a, reg, alpha))))
            worst_closed = max(worst_closed, diff)
            assert diff <= 1e-8, (k, kind, diff)
    elapsed = time.perf_counter() - start
    print(f"\n[2] worst optimality gap {worst_gap:.2e}, worst closed-vs-inner {worst_closed:.2e} "
          f"over {closed_count} closed-form steps, {elapsed:.1f} s")
    assert elapsed < 60


# 3 ---------------------------------------------------------------------------

@criterion(3, "generated weights doubly stochastic to 1e-12, floor 1/n, windowed connectivity, 100 seeds x 9 cells, < 1 min")
def test_network_contracts():
    start = time.perf_counter()
    cells = 0
    for n, rho, seed in itertools.product((3, 10, 50), (0.0, 0.2, 1.0), range(100)):
        seq = generate_graph_sequence(n, rho, 20, seed)
        for W in seq.weights:
            assert np.abs(W.sum(axis=0) - 1).max() <= 1e-12
            assert np.abs(W.sum(axis=1) - 1).max() <= 1e-12
            assert np.allclose(W, W.T, atol=0)
        assert seq.w == pytest.approx(1.0 / n)
        report = check_assumption1(seq, w=1.0 / n)
        assert report, (n, rho, seed, report)
        cells += 1
    elapsed = time.perf_counter() - start
    print(f"\n[3] {cells} sequences checked, {elapsed:.1f} s")
    assert elapsed < 60


# 4 ---------------------------------------------------------------------------

@criterion(4, "golden agent_round values and the 100-round scalar oracle match to 1e-12")
@pytest.mark.parametrize("g, q_expected", [(0.0, 0.0), (1.0, 0.25)])
def test_golden_agent_round(g, q_expected):
    # psi = x^2 on [0, 5], alpha = beta = gamma = 1/2, x_prev = 1, grad f = 2, J = 1, q_tilde = 0
    geom = BregmanGeometry.euclidean(Box([0.0], [5.0]), 1.0)
    new, rec = agent_round(AgentState(np.array([1.0]), np.array([0.0])), Subgradients([2.0], [g], [[1.0]]),
                           np.array([0.0]), (0.5, 0.5, 0.5), geom)
    assert abs(rec.x_tilde[0] - 0.5) <= 1e-12
    assert abs(new.q[0] - q_expected) <= 1e-12
    assert abs(new.x[0] - 0.5) <= 1e-12


@criterion(4, "golden agent_round values and the 100-round scalar oracle match to 1e-12")
@pytest.mark.parametrize("seed", range(5))
def test_scalar_oracle(seed):
    rng = np.random.default_rng(seed)
    T, sigma, l1, l2, cexp, kappa = 100, 2.5, 0.7, 0.4, 0.6, 0.3
    c, w, s = rng.uniform(-1, 6, T), rng.uniform(0.1, 3, T), rng.uniform(-2, 2, T)
    e, b = rng.uniform(-2, 2, T), rng.uniform(-3, 3, T)
    prob = ScalarProblem(c, w, s, e, b, l1, l2)
    geom = BregmanGeometry.euclidean(Box([0.0], [5.0]), sigma)
    trace = run(prob, None, StepsizeSchedule.general(cexp, kappa), geoms=geom, x0=[[1.0]])
    # round 1 reveals nothing, so gradient, constraint and regularizer all start at zero
    x, q = 1.0, 0.0
    grad = gval = jac = rl1 = rl2 = 0.0
    for t in range(1, T + 1):
        alpha, beta, gamma = t ** -cexp, t ** -kappa, t ** -(1 - kappa)
        z = 2 * sigma * x - alpha * (grad + jac * q)
        z = math.copysign(max(abs(z) - alpha * rl1, 0.0), z)
        xt = min(max(z / (2 * sigma + 2 * alpha * rl2), 0.0), 5.0)
        q = max(q + gamma * (jac * (xt - x) + gval - beta * q), 0.0)
        x = xt
        rec = trace.rounds[t - 1].agents[0]
        assert abs(rec.x[0] - x) <= 1e-12 and abs(rec.q[0] - q) <= 1e-12
        k = t - 1
        grad, gval, jac = 2 * w[k] * (x - c[k]) + s[k], e[k] * x - b[k], e[k]
        rl1, rl2 = l1, l2


# 5 ---------------------------------------------------------------------------

@criterion(5, "desk run: Reg/T and Violation/T shrink from T=200 to T=2000, log-log slopes < 0.95, < 1 min")
def test_sublinearity(tmp_path):
    start = time.perf_counter()
    res = run_experiment(DESK, tmp_path)
    elapsed = time.perf_counter() - start
    ts = res.column("t")
    reg, viol = res.column("reg_dyn_over_t"), res.column("violation_over_t")
    at = {int(t): k for k, t in enumerate(ts)}
    assert reg[at[2000]] < reg[at[200]]
    assert viol[at[2000]] < viol[at[200]]
    cum_reg, cum_viol = reg * ts, viol * ts
    assert np.all(cum_reg > 0) and np.all(cum_viol > 0)
    slope_reg = np.polyfit(np.log(ts), np.log(cum_reg), 1)[0]
    slope_viol = np.polyfit(np.log(ts), np.log(cum_viol), 1)[0]
    print(f"\n[5] Reg/T {reg[at[200]]:.3f} -> {reg[at[2000]]:.3f}, Viol/T {viol[at[200]]:.4f} -> "
          f"{viol[at[2000]]:.4f}, slopes {slope_reg:.3f} / {slope_viol:.3f}, {elapsed:.1f} s")
    assert slope_reg < 0.95 and slope_viol < 0.95
    assert elapsed < 60


# 6 ---------------------------------------------------------------------------

def _audit_constants(problem, X, rng):
    """Check F and G against the realized decisions and random box points."""
    inst = problem.instance
    F, G = problem.bounds()
    pts = np.vstack([X.reshape(-1, inst.p), rng.uniform(inst.lower, inst.upper, (2000, inst.p))])
    ts = rng.integers(0, inst.T, len(pts))
    ag = rng.integers(0, inst.n, len(pts))
    diff = pts - inst.y[ts, ag]
    f = inst.zeta1 * (inst.pi[ts, ag] * pts).sum(1) + inst.zeta2 * (diff * diff).sum(1)
    gf = inst.zeta1 * inst.pi[ts, ag] + 2 * inst.zeta2 * diff
    r = inst.lambda1 * np.abs(pts).sum(1) + inst.lambda2 * (pts * pts).sum(1)
    gr = inst.lambda1 * np.sign(pts) + 2 * inst.lambda2 * pts
    g = np.einsum("kmp,kp->km", inst.D[ts, ag], pts) - inst.d[ts, ag]
    assert max(np.abs(f).max(), np.abs(r).max(), np.linalg.norm(g, axis=1).max()) <= F
    assert max(np.linalg.norm(gf, axis=1).max(), np.linalg.norm(gr, axis=1).max()) <= G


@criterion(6, "empirical regret and violation below the theoretical bounds on 5 tiny runs, every schedule")
@pytest.mark.parametrize("seed", range(1, 6))
def test_bound_domination(seed, tmp_path):
    rng = np.random.default_rng(seed)
    tiny = ExperimentConfig(n=3, m=2, p=2, T=500, seed=seed, checkpoints=(50, 100, 200, 500))
    runs = [
        tiny.replace(**SCHEDULES["strongly_convex"]),
        tiny.replace(**SCHEDULES["general"]),
        # the slater regime needs an interior point; epsilon comes from the margin LP
        tiny.replace(slack=5.0, **SCHEDULES["slater"]),
        tiny.replace(slack=5.0, comparators=("dynamic", "static"), **SCHEDULES["strongly_convex"]),
    ]
    for cfg in runs:
        res = run_experiment(cfg, tmp_path / f"{cfg.schedule}_{cfg.slack}")
        _audit_constants(build_problem(cfg), res.trace.decisions, rng)
        for row in res.metrics:
            t = row["t"]
            assert row["reg_dyn_over_t"] * t <= row["regret_bound"], (cfg.schedule, row)
            assert row["violation_over_t"] * t <= row["violation_bound"], (cfg.schedule, row)
            if "reg_static_over_t" in row:
                # the static comparator is one feasible sequence, so its regret is dominated as well
                assert row["reg_static_over_t"] * t <= row["regret_bound"]
        last = res.metrics[-1]
        print(f"\n[6] seed {seed} {cfg.schedule}: Reg {last['reg_dyn_over_t'] * 500:.1f} <= "
              f"{last['regret_bound']:.3g}, Viol {last['violation_over_t'] * 500:.2f} <= {last['violation_bound']:.3g}")


# 7 - 9 -----------------------------------------------------------------------

SEEDS = range(1, 6)
MID = DESK.replace(T=1000)


@criterion(7, "knowing the dynamics (Linear(A)) beats the identity mapping in mean regret and violation")
def test_mapping_knowledge(tmp_path):
    known = [final_metrics(MID.replace(seed=s), tmp_path) for s in SEEDS]
    blind = [final_metrics(MID.replace(seed=s, mapping="identity"), tmp_path) for s in SEEDS]
    r_known = np.mean([m["reg_dyn_over_t"] for m in known])
    r_blind = np.mean([m["reg_dyn_over_t"] for m in blind])
    v_known = np.mean([m["violation_over_t"] for m in known])
    v_blind = np.mean([m["violation_over_t"] for m in blind])
    print(f"\n[7] Reg/T {r_known:.3f} (Linear(A)) vs {r_blind:.3f} (identity); "
          f"Viol/T {v_known:.4f} vs {v_blind:.4f}")
    assert r_known < r_blind
    assert v_known < v_blind


@criterion(8, "explicit regularization gives Reg/T no larger than folding it into the cost")
def test_regularization_placement(tmp_path):
    explicit = np.mean([final_metrics(MID.replace(seed=s), tmp_path)["reg_dyn_over_t"] for s in SEEDS])
    folded = np.mean([final_metrics(MID.replace(seed=s, regularization="folded"), tmp_path)["reg_dyn_over_t"]
                      for s in SEEDS])
    print(f"\n[8] Reg/T explicit {explicit:.3f} vs folded {folded:.3f}")
    assert explicit <= folded


@criterion(9, "Reg/T spread across kappa in {0.1..0.9} within 25% of its mean at T=1000")
def test_kappa_insensitivity(tmp_path):
    kappas = np.round(np.arange(1, 10) / 10, 1)
    regs = np.array([final_metrics(MID.replace(kappa=float(k)), tmp_path)["reg_dyn_over_t"] for k in kappas])
    spread = (regs.max() - regs.min()) / regs.mean()
    print(f"\n[9] Reg/T over kappa: {np.array2string(regs, precision=3)}, spread/mean {spread:.3f}")
    assert spread <= 0.25


# 10 --------------------------------------------------------------------------

@criterion(10, "dynamic and static optima match lattice brute force within 2e-3; static regret <= dynamic regret")
@pytest.mark.parametrize("seed", range(4))
def test_oracles_match_lattice(seed):
    one = pair_instance(seed)
    err_dyn = np.max(np.abs(dynamic_optimum(one, 1).ravel() - lattice_argmin(one, [1])))
    several = pair_instance(100 + seed, T=6)
    err_static = np.max(np.abs(static_optimum(several).ravel() - lattice_argmin(several, range(1, 7))))
    print(f"\n[10] seed {seed}: dynamic error {err_dyn:.1e}, static error {err_static:.1e}")
    assert err_dyn <= 2e-3 and err_static <= 2e-3


@criterion(10, "dynamic and static optima match lattice brute force within 2e-3; static regret <= dynamic regret")
@pytest.mark.parametrize("seed", range(1, 4))
def test_regret_ordering(seed, tmp_path):
    cfg = ExperimentConfig(n=4, m=2, p=3, T=300, seed=seed, slack=4.0, comparators=("dynamic", "static"),
                           checkpoints=(50, 100, 300))
    for row in run_experiment(cfg, tmp_path).metrics:
        assert row["reg_static_over_t"] <= row["reg_dyn_over_t"], row


# 11 --------------------------------------------------------------------------

@criterion(11, "byte-identical repeated runs, replay passes, instance and graph files round-trip exactly")
def test_determinism_and_replay(tmp_path):
    cfg = DESK.replace(T=300, seed=7)
    a = run_experiment(cfg, tmp_path / "a")
    b = run_experiment(cfg, tmp_path / "b")
    for name in ("trace.csv", "metrics.csv", "instance.trace", "graphs.txt"):
        assert (a.out_dir / name).read_bytes() == (b.out_dir / name).read_bytes(), name
    report = replay(a.out_dir / "trace.csv", cfg)
    assert report, str(report)

    inst = load_trace(a.out_dir / "instance.trace")
    original = build_problem(cfg).instance
    for field in ("pi", "D", "d", "x0", "y", "A"):
        assert np.array_equal(getattr(inst, field), getattr(original, field)), field
    save_trace(inst, tmp_path / "again.trace")
    assert (tmp_path / "again.trace").read_bytes() == (a.out_dir / "instance.trace").read_bytes()

    graphs = load_graphs(a.out_dir / "graphs.txt")
    assert graphs.rounds == build_graphs(cfg).rounds
    assert all(np.array_equal(x, y) for x, y in zip(graphs.weights, build_graphs(cfg).weights))
    save_graphs(graphs, tmp_path / "again.txt")
    assert (tmp_path / "again.txt").read_bytes() == (a.out_dir / "graphs.txt").read_bytes()
    print(f"\n[11] {report.rows_checked} trace rows replayed, bundles byte-identical")
