"""Acceptance gate: one pass/fail line per criterion.

Each test appends ``CRITERION <n>: PASS|FAIL <detail>`` to the session log
(printed in the terminal summary) before asserting.
"""

import filecmp
import os
import time
from itertools import combinations

import numpy as np
import pytest
from scipy.stats import chi2_contingency, chisquare

from fedpow.engine import LRSchedule, RunConfig, run_training
from fedpow.harness import bundled_spec_path, load_spec, run_experiment
from fedpow.selection import (
    SelectionConfig,
    SelectionState,
    report_round_loss,
    select_pow_d,
    select_rand,
    select_rpow_d,
)
from fedpow.skew import (
    BoundInputs,
    GridSpec,
    estimate_rho_bounds,
    estimate_theory_params,
    selection_skew_at,
    theorem1_bound,
)
from fedpow.tasks import QuadraticTask, generate_quadratic, generate_synthetic
from oracles import central_difference, exact_skew, subset_distribution

K, M = 30, 3
DRAWS = 10000
GRID = 1000

pytestmark = pytest.mark.slow


def verdict(log, n, ok, detail):
    log.append(f"CRITERION {n}: {'PASS' if ok else 'FAIL'} {detail}")
    assert ok, detail


def quad30(seed=0):
    return generate_quadratic(K, 5, power_law_a=3.0, seed=seed)


def rho_estimate(cfg, task, seed):
    return estimate_rho_bounds(cfg, task, GridSpec(n_samples=GRID, seed=seed), draws=DRAWS)


# ---------------------------------------------------------------------------


def test_criterion_1_skew_invariants(acceptance_log):
    start = time.perf_counter()
    task = quad30()
    rand = rho_estimate(SelectionConfig("rand", M), task, 0)
    pow_d = {d: rho_estimate(SelectionConfig("pow_d", M, d), task, 0).rho_bar for d in (6, 9, 15, 30)}
    elapsed = time.perf_counter() - start
    ok = (0.95 <= rand.rho_bar <= 1.05 and 0.95 <= rand.ratio <= 1.05
          and all(v > 1.05 for v in pow_d.values()) and elapsed < 120)
    detail = (f"rand rho_bar={rand.rho_bar:.4f} ratio={rand.ratio:.4f}; pow_d rho_bar "
              + ", ".join(f"d={d}:{v:.3f}" for d, v in pow_d.items()) + f"; {elapsed:.0f}s")
    verdict(acceptance_log, 1, ok, detail)


def test_criterion_2_monotone_skew_in_d(acceptance_log):
    task = quad30()
    ds = (M, 2 * M, 3 * M, K)
    reps = np.array([[rho_estimate(SelectionConfig("pow_d", M, d), task, 100 + r).rho_bar
                      for d in ds] for r in range(3)])
    mean = reps.mean(axis=0)
    ups = int(np.sum(np.diff(mean) >= 0))
    detail = ("mean rho_bar " + ", ".join(f"d={d}:{v:.3f}" for d, v in zip(ds, mean))
              + f"; nondecreasing {ups}/3")
    verdict(acceptance_log, 2, ups == 3, detail)


def test_criterion_3_quadratic_ordering(acceptance_log):
    start = time.perf_counter()
    strategies = {"rand": SelectionConfig("rand", M), "pow_d3": SelectionConfig("pow_d", M, 3),
                  "pow_d9": SelectionConfig("pow_d", M, 9), "pow_d30": SelectionConfig("pow_d", M, K)}
    curves = {name: [] for name in strategies}
    for seed in range(10):
        task = quad30(seed)
        for name, sel in strategies.items():
            cfg = RunConfig(task=task, selection=sel, tau=2, rounds=500,
                            lr=LRSchedule(eta=1e-3), seed=seed)
            curves[name].append([r.global_loss for r in run_training(cfg)])
    mean = {n: np.mean(c, axis=0) for n, c in curves.items()}
    elapsed = time.perf_counter() - start
    at = lambda n, rnd: mean[n][rnd - 1]  # noqa: E731  (1-based round number)
    faster = at("pow_d9", 25) < at("rand", 25) and at("pow_d9", 50) < at("rand", 50)
    early_lowest = all(at("pow_d30", 25) <= at(n, 25) for n in mean)
    floor = at("pow_d30", 500) >= at("pow_d3", 500)
    ok = faster and early_lowest and floor and elapsed < 180
    detail = (f"round25 rand={at('rand', 25):.4g} pow_d9={at('pow_d9', 25):.4g} "
              f"pow_d30={at('pow_d30', 25):.4g}; round50 rand={at('rand', 50):.4g} "
              f"pow_d9={at('pow_d9', 50):.4g}; round500 pow_d30={at('pow_d30', 500):.4g} "
              f"pow_d3={at('pow_d3', 500):.4g}; {elapsed:.0f}s")
    verdict(acceptance_log, 3, ok, detail)


def test_criterion_4_synthetic_speedup(acceptance_log):
    start = time.perf_counter()
    target, horizon = 0.5, 800
    strategies = {"rand": SelectionConfig("rand", M), "pow_d6": SelectionConfig("pow_d", M, 2 * M),
                  "pow_d30": SelectionConfig("pow_d", M, 10 * M)}
    hits = {n: [] for n in strategies}
    for seed in range(5):
        data = generate_synthetic(alpha=1.0, beta=1.0, n_clients=K, seed=seed)
        sched = LRSchedule(kind="step", eta=0.05, milestones=(300, 600))
        for name, sel in strategies.items():
            cfg = RunConfig(task=data, selection=sel, tau=30, rounds=horizon, batch_size=50,
                            lr=sched, seed=seed)
            recs = run_training(cfg, callback=lambda rec, w: rec.global_loss <= target)
            last = recs[-1]
            hits[name].append(last.round + 1 if last.global_loss <= target else np.inf)
    R = {n: float(np.mean(v)) for n, v in hits.items()}
    elapsed = time.perf_counter() - start
    ok = R["pow_d30"] <= 0.5 * R["rand"] and R["pow_d6"] <= 0.75 * R["rand"] and elapsed < 600
    detail = ("rounds to loss<=0.5 (inf = not within 800) "
              + "; ".join(f"{n}={hits[n]} mean={R[n]:.1f}" for n in strategies) + f"; {elapsed:.0f}s")
    verdict(acceptance_log, 4, ok, detail)


def test_criterion_5_theorem1_bound_holds(acceptance_log):
    task = quad30()
    tau, T_checks = 2, (100, 1000, 10000)
    L, mu = float(task.h.max()), float(task.h.min())
    w_star, _, f_star = task.optima()
    worst = {}
    ok = True
    for name, sel in (("rand", SelectionConfig("rand", M)), ("pow_d9", SelectionConfig("pow_d", M, 9))):
        gaps, traj = [], [np.zeros(task.dim)]
        for seed in range(10):
            cfg = RunConfig(task=task, selection=sel, tau=tau, rounds=max(T_checks) // tau,
                            lr=LRSchedule.theorem(L, mu), seed=seed)
            recs = run_training(cfg, callback=lambda rec, w: traj.append(w))
            gaps.append([recs[T // tau - 1].global_loss - f_star for T in T_checks])
        est = rho_estimate(sel, task, 0)
        params = estimate_theory_params(task, tau=tau, m=M, trajectory=np.array(traj))
        inputs = BoundInputs(params, gap=est.gamma, rho_bar=est.rho_bar, rho_tilde=est.rho_tilde,
                             init_dist_sq=float(w_star @ w_star))
        bounds = [theorem1_bound(inputs, T).total for T in T_checks]
        measured = np.max(gaps, axis=0)
        ok &= bool(np.all(measured <= bounds))
        worst[name] = ", ".join(f"T={T}: {g:.3g}<={b:.3g}" for T, g, b in zip(T_checks, measured, bounds))
    verdict(acceptance_log, 5, ok, "max over seeds " + " | ".join(f"{n} {v}" for n, v in worst.items()))


def test_criterion_6_oracle_equivalences(acceptance_log):
    rng = np.random.default_rng(6)
    n = 100000
    # (a) pow-d with d=m against rand without replacement, K=5
    task = generate_quadratic(5, 2, seed=6)
    w = np.array([0.5, 0.5])
    cfg = SelectionConfig("pow_d", 2, 2)
    subsets = list(combinations(range(5), 2))
    index = {s: i for i, s in enumerate(subsets)}
    table = np.zeros((2, len(subsets)))
    for _ in range(n):
        table[0, index[tuple(select_pow_d(task, w, cfg, None, rng))]] += 1
        table[1, index[tuple(select_rand(task.p, 2, False, None, rng))]] += 1
    p_a = chi2_contingency(table)[1]

    # (b) Monte-Carlo rho against enumeration, K=4 (last pair has exact loss ties)
    tasks = [generate_quadratic(4, 3, seed=s) for s in (1, 2)]
    tasks.append(QuadraticTask(h=[2.0, 2.0, 5.0, 1.0], e=[[1.0, 0.0], [1.0, 0.0], [0.5, 2.0], [0.0, 0.0]],
                               p=[0.1, 0.2, 0.3, 0.4]))
    z_max = 0.0
    for t in tasks:
        w1, w2 = rng.uniform(-1, 1, (2, t.dim))
        if t.dim == 2:
            w1 = np.zeros(2)
        for d in (2, 3):
            c = SelectionConfig("pow_d", 2, d)
            exact = exact_skew(t.p, 2, d, t.local_losses(w1), t.local_losses(w2))
            rho, se = selection_skew_at(c, t, w1, w2, draws=n, rng=rng, return_stderr=True)
            z_max = max(z_max, abs(rho - exact) / se)

    # (c) gradients against central differences at 50 random points
    quad = generate_quadratic(10, 5, seed=3)
    synth = generate_synthetic(n_clients=4, total_samples=200, seed=3)
    rel = 0.0
    for i in range(50):
        if i % 2 == 0:
            k = int(rng.integers(10))
            x = rng.normal(size=5) * 2
            pairs = [(quad.gradient(k, x), central_difference(lambda v: quad.loss(k, v), x)),
                     (quad.global_gradient(x), central_difference(quad.global_loss, x))]
        else:
            k = int(rng.integers(4))
            x = rng.normal(size=synth.dim) * 0.1
            pairs = [(synth.gradient(k, x), central_difference(lambda v: synth.loss(k, v), x))]
        for g, fd in pairs:
            rel = max(rel, float(np.linalg.norm(g - fd) / max(np.linalg.norm(g), 1e-12)))
    ok = p_a > 0.01 and z_max < 3 and rel < 1e-5
    verdict(acceptance_log, 6, ok,
            f"(a) chi2 p={p_a:.3f}; (b) max |MC-exact|/se={z_max:.2f}; (c) max rel err={rel:.2e}")


def test_criterion_7_rpow_d_bookkeeping(acceptance_log):
    rng = np.random.default_rng(7)
    # never-reported clients (+inf) always win the ranking
    task = quad30()
    recs = run_training(RunConfig(task=task, selection=SelectionConfig("rpow_d", M, K), tau=2,
                                  rounds=K // M, lr=LRSchedule(eta=1e-3), seed=1))
    seen = [k for r in recs for k in r.selected]
    fresh = len(set(seen)) == K
    state = SelectionState.initial(6)
    for k, loss in ((0, 5.0), (1, 9.0), (2, 7.0)):
        report_round_loss(state, k, loss)
    sentinel = np.isinf(state.last_reported_loss[3:]).all() and all(
        set(select_rpow_d(state, np.full(6, 1 / 6), SelectionConfig("rpow_d", 3, 6), None, rng)) == {3, 4, 5}
        for _ in range(200))

    # round 0: uniform over m-subsets of the candidate set
    n = 100000
    p = np.array([0.05, 0.1, 0.15, 0.2, 0.22, 0.28])
    cfg = SelectionConfig("rpow_d", 2, 4)
    init = SelectionState.initial(6)
    law = subset_distribution(p, 2, d=4, scores=np.full(6, np.inf))
    keys = sorted(law, key=sorted)
    counts = dict.fromkeys(keys, 0)
    for _ in range(n):
        counts[frozenset(select_rpow_d(init, p, cfg, None, rng).tolist())] += 1
    p_cand = chisquare([counts[s] for s in keys], [n * law[s] for s in keys])[1]
    full = SelectionConfig("rpow_d", 2, 6)
    full_counts = dict.fromkeys(combinations(range(6), 2), 0)
    for _ in range(n):
        full_counts[tuple(select_rpow_d(init, p, full, None, rng))] += 1
    p_full = chisquare(list(full_counts.values()))[1]
    ok = fresh and sentinel and p_cand > 0.01 and p_full > 0.01
    verdict(acceptance_log, 7, ok,
            f"fresh-first={fresh}; sentinel dominance={sentinel}; round-0 chi2 p={p_cand:.3f} "
            f"(d=4), p={p_full:.3f} (d=K)")


def test_criterion_8_determinism(acceptance_log, tmp_path):
    workers = max(2, os.cpu_count() or 1)
    same, total = 0, 0
    for name in ("quadratic_k30.spec", "synthetic11.spec"):
        spec = load_spec(bundled_spec_path(name))
        a, b = tmp_path / f"{name}-serial", tmp_path / f"{name}-parallel"
        run_experiment(spec, a, parallelism=1)
        run_experiment(spec, b, parallelism=workers)
        files = sorted(p.name for p in (a / "metrics").iterdir())
        total += len(files)
        same += sum(filecmp.cmp(a / "metrics" / f, b / "metrics" / f, shallow=False) for f in files)
        assert sorted(p.name for p in (b / "metrics").iterdir()) == files
    verdict(acceptance_log, 8, same == total,
            f"{same}/{total} metrics files byte-identical (serial vs {workers} worker processes)")
