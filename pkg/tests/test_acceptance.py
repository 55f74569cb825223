"""Exit criteria for the build, each at its stated tolerance.

Training benchmarks run once per session through the real harness (config
file -> per-cell JSONL -> merged CSV -> report) and are shared between the
criteria that read them.
"""

import json
import statistics
import time
from pathlib import Path

import numpy as np
import pytest

from pglab import advantage as adv
from pglab.approximator import PolicyDistribution
from pglab.envs import NoisyGrid, PointMass1D, SparseChain, value_iteration
from pglab.harness import metrics as M
from pglab.harness.config import load_config, parse_config
from pglab.harness.plot import plot_curves
from pglab.harness.runner import run_experiment
from pglab.oracles import exhaustive_group_check, fd_gradient, gradients_agree, random_record
from pglab.optimizer import (
    OptimizerConfig,
    RolloutState,
    build_networks,
    clipped_surrogate_loss,
    collect_rollout,
    estimate_advantages,
    train,
    value_guided_sample,
)

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
SEEDS_SC = (1, 2, 3)
SEEDS_NG = (1, 2, 3, 4, 5)

pytestmark = pytest.mark.slow


def _by_cell(rows):
    cells = {}
    for r in rows:
        cells.setdefault((r["algorithm"], r["seed"]), []).append(r)
    return cells


@pytest.fixture(scope="session")
def chain_benchmark(tmp_path_factory):
    out = tmp_path_factory.mktemp("sparse_chain")
    cfg = load_config(CONFIGS / "sparse_chain.json")
    t0 = time.perf_counter()
    code = run_experiment(cfg, out)
    elapsed = time.perf_counter() - t0
    rows = M.read_csv(out / M.CSV_NAME)
    return {"out": out, "code": code, "elapsed": elapsed, "cells": _by_cell(rows), "config": cfg}


@pytest.fixture(scope="session")
def grid_benchmark(tmp_path_factory):
    out = tmp_path_factory.mktemp("noisy_grid")
    cfg = load_config(CONFIGS / "noisy_grid.json")
    code = run_experiment(cfg, out)
    return {"out": out, "code": code, "cells": _by_cell(M.read_csv(out / M.CSV_NAME))}


# 1 ---------------------------------------------------------------------------


def _gradient_cases(algorithm, env, rng):
    cfg = OptimizerConfig(algorithm=algorithm, macro_steps=64, hidden_layers=(8, 8), seed=0)
    nets = build_networks(env, cfg, rng)
    batch = collect_rollout(env, nets, cfg, rng, RolloutState(env.reset(seed=3)),
                            adv.RewardNormalizer(cfg.normalizer_window))
    entries, _, _ = estimate_advantages(batch, cfg)
    # move the policy away from the collection point so ratios leave 1 and some clip
    params = nets.policy + rng.normal(0.0, 0.15, nets.policy.size)
    obs = np.array([e.observation for e in entries])
    acts = np.array([e.action for e in entries])
    old = np.array([e.old_log_prob for e in entries])
    A = np.array([e.advantage for e in entries])
    for _ in range(20):
        idx = rng.choice(len(entries), size=16, replace=False)
        yield nets.policy_spec, params, obs[idx], acts[idx], old[idx], A[idx]


def test_c1_gradient_suite(acceptance_log):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst, failures, clipped = 0.0, 0, 0
    for algorithm in ("ppo", "grpo", "hybrid"):
        for env in (NoisyGrid(), PointMass1D()):
            for spec, p, obs, acts, old, A in _gradient_cases(algorithm, env, rng):
                loss, grad, info = clipped_surrogate_loss(p, spec, obs, acts, old, A, 0.2, 0.05)
                num = fd_gradient(lambda q: clipped_surrogate_loss(q, spec, obs, acts, old, A, 0.2, 0.05)[0], p)
                ok, rel = gradients_agree(grad, num, rtol=1e-4, atol=1e-7)
                failures += not ok
                worst = max(worst, rel)
                clipped += info["clip_fraction"] > 0
    elapsed = time.perf_counter() - t0
    ok = failures == 0 and elapsed < 30.0
    acceptance_log("1 gradient suite", ok,
                   f"120 minibatches (3 algorithms x 2 heads x 20), {failures} mismatches, "
                   f"{clipped} with active clipping, worst rel err {worst:.1e}, {elapsed:.1f}s")
    assert failures == 0
    assert elapsed < 30.0


# 2 ---------------------------------------------------------------------------


def test_c2_reduction_identity(acceptance_log):
    common = dict(macro_steps=64, n_batches=50, seed=7)
    hyb = train(OptimizerConfig(algorithm="hybrid", group_size=1, transform="identity", **common), SparseChain())
    ppo = train(OptimizerConfig(algorithm="ppo", **common), SparseChain())
    diffs = [max(abs(h.policy_loss - p.policy_loss), abs(h.value_loss - p.value_loss))
             for h, p in zip(hyb.stats, ppo.stats)]
    worst = max(diffs)
    ok = len(diffs) == 50 and worst <= 1e-12
    acceptance_log("2 reduction identity", ok, f"50 batches, max per-batch loss difference {worst:.1e}")
    assert len(diffs) == 50
    assert worst <= 1e-12


# 3 ---------------------------------------------------------------------------


def test_c3_group_zero_sum(acceptance_log):
    rng = np.random.default_rng(3)
    worst, literal_nonzero = 0.0, 0
    for _ in range(10_000):
        rec = random_record(rng, int(rng.integers(2, 9)))
        worst = max(worst, abs(sum(e.advantage for e in adv.grpo_advantages(rec))))
        literal_nonzero += adv.literal_group_advantage([b.transformed_reward for b in rec.branches]) != 0.0
    ok = worst <= 1e-9 and literal_nonzero == 0
    acceptance_log("3 group zero-sum", ok,
                   f"10^4 groups, worst |sum| {worst:.1e}, literal formula nonzero on {literal_nonzero}")
    assert worst <= 1e-9
    assert literal_nonzero == 0


# 4 ---------------------------------------------------------------------------


def test_c4_group_mean_consistency(acceptance_log):
    rng = np.random.default_rng(4)
    worst, oracle_failures = 0.0, 0
    for _ in range(10_000):
        rec = random_record(rng, int(rng.integers(1, 9)))
        entries, mean = adv.hybrid_advantages(rec, 0.99)
        worst = max(worst, abs(mean - sum(e.advantage for e in entries) / len(entries)))
        oracle_failures += not all(exhaustive_group_check(rec, 0.99).values())
    ok = worst <= 1e-12 and oracle_failures == 0
    acceptance_log("4 group-mean consistency", ok,
                   f"10^4 records, worst mean gap {worst:.1e}, oracle disagreements {oracle_failures}")
    assert worst <= 1e-12
    assert oracle_failures == 0


# 5 ---------------------------------------------------------------------------


def test_c5_convergence_benchmark(chain_benchmark, acceptance_log):
    V, _ = value_iteration(SparseChain().to_mdp(0.9), 1e-12)
    assert abs(V[0] - 0.729) <= 1e-12
    threshold = chain_benchmark["config"].resolved_threshold()
    assert threshold == pytest.approx(0.9)
    cells = chain_benchmark["cells"]
    hits = {}
    for alg in ("ppo", "grpo", "hybrid"):
        hits[alg] = [
            any(r["mean_return"] is not None and r["mean_return"] >= threshold and r["batch"] <= 500
                for r in cells.get((alg, s), []))
            for s in SEEDS_SC
        ]
    elapsed = chain_benchmark["elapsed"]
    ok = all(sum(h) >= 2 for h in hits.values()) and elapsed < 300.0 and chain_benchmark["code"] == 0
    summary = ", ".join(f"{a} {sum(h)}/3" for a, h in hits.items())
    acceptance_log("5 convergence benchmark", ok, f"seeds reaching >= 0.9: {summary}; {elapsed:.0f}s")
    assert chain_benchmark["code"] == 0
    for alg, h in hits.items():
        assert sum(h) >= 2, alg
    assert elapsed < 300.0


# 6 ---------------------------------------------------------------------------


def _first_hit(rows, threshold, key):
    for r in rows:
        if r["mean_return"] is not None and r["mean_return"] >= threshold:
            return r[key]
    return float("inf")


def test_c6_sample_efficiency_direction(chain_benchmark, acceptance_log):
    cells = chain_benchmark["cells"]
    threshold = chain_benchmark["config"].resolved_threshold()
    wins, detail = 0, []
    for s in SEEDS_SC:
        h = _first_hit(cells[("hybrid", s)], threshold, "macro_steps")
        p = _first_hit(cells[("ppo", s)], threshold, "macro_steps")
        wins += h < p
        detail.append(f"seed {s}: hybrid {h} vs ppo {p}")
    text = (chain_benchmark["out"] / "report.txt").read_text()
    report = json.loads((chain_benchmark["out"] / "report.json").read_text())
    raw = report["algorithms"]["hybrid"]["raw_steps_to_threshold"]
    raw_printed = "raw-steps" in text and isinstance(raw, (int, float)) and f"{raw:.0f}" in text
    ok = wins >= 2 and raw_printed
    acceptance_log("6 sample-efficiency direction", ok,
                   f"hybrid fewer macro-steps on {wins}/3 seeds ({'; '.join(detail)}); "
                   f"hybrid median raw steps {raw} printed alongside")
    assert raw_printed
    assert wins >= 2


# 7 ---------------------------------------------------------------------------


def test_c7_advantage_variance(grid_benchmark, acceptance_log):
    cells = grid_benchmark["cells"]

    def seed_medians(alg):
        return [statistics.median(r["adv_var"] for r in cells[(alg, s)] if r["batch"] <= 100) for s in SEEDS_NG]

    grpo, hybrid = seed_medians("grpo"), seed_medians("hybrid")
    g, h = statistics.median(grpo), statistics.median(hybrid)
    ok = h < g
    acceptance_log("7 advantage variance", ok,
                   f"seed-median of per-batch advantage variance: hybrid {h:.3e} vs grpo {g:.3e} "
                   f"(per seed hybrid {[f'{v:.1e}' for v in hybrid]}, grpo {[f'{v:.1e}' for v in grpo]})")
    assert h < g


# 8 ---------------------------------------------------------------------------


def test_c8a_entropy_bonus(grid_benchmark, acceptance_log):
    cells = grid_benchmark["cells"]

    def entropy_at_100(alg):
        return statistics.fmean(next(r["entropy"] for r in cells[(alg, s)] if r["batch"] == 100) for s in SEEDS_NG)

    with_bonus, without = entropy_at_100("hybrid_entropy"), entropy_at_100("hybrid")
    ok = with_bonus > without
    acceptance_log("8a entropy bonus", ok,
                   f"seed-mean policy entropy at batch 100: alpha 0.05 -> {with_bonus:.4f}, alpha 0 -> {without:.4f}")
    assert with_bonus > without


def test_c8b_nstep(acceptance_log):
    rng = np.random.default_rng(8)
    env = NoisyGrid()
    cfg = OptimizerConfig(algorithm="hybrid", macro_steps=256, hidden_layers=(16,))
    nets = build_networks(env, cfg, rng)
    batch = collect_rollout(env, nets, cfg, rng, RolloutState(env.reset(seed=1)))
    flat = [e.advantage for r in batch.records for e in adv.hybrid_advantages(r, cfg.gamma)[0]]
    equal = all(
        [e.advantage for e in adv.hybrid_nstep_advantages(batch.records, cfg.gamma, 1, mode)] == flat
        for mode in (False, True)
    )

    env = PointMass1D()
    n, N, macro = 3, 4, 64
    cfg3 = OptimizerConfig(algorithm="hybrid", group_size=N, n_step=n, nstep_exhaustive=True,
                           macro_steps=macro, hidden_layers=(16,))
    nets = build_networks(env, cfg3, rng)
    batch3 = collect_rollout(env, nets, cfg3, rng, RolloutState(env.reset(seed=2)))
    per_macro = {sum(b.raw_steps for b in r.branches) for r in batch3.records}
    exact = per_macro == {N * n} and batch3.raw_steps == N * n * macro
    ok = equal and exact
    acceptance_log("8b n-step", ok, f"n=1 bit-equal to one-step hybrid: {equal}; "
                   f"n=3 exhaustive raw steps per macro-step {sorted(per_macro)} (N*n = {N * n})")
    assert equal
    assert exact


def test_c8c_rolling_normalization(acceptance_log):
    rng = np.random.default_rng(9)
    worst_mean, worst_std = 0.0, 0.0
    for _ in range(1000):
        capacity = int(rng.integers(2, 513))
        norm = adv.RewardNormalizer(capacity, 1e-8)
        for r in rng.normal(rng.uniform(-50, 50), rng.uniform(0.1, 20.0), size=capacity + int(rng.integers(0, 64))):
            norm.push(float(r))
        z = norm.normalize(norm.window())
        worst_mean = max(worst_mean, abs(z.mean()))
        worst_std = max(worst_std, abs(z.std() - 1.0))
    ok = worst_mean <= 1e-9 and worst_std <= 1e-6
    acceptance_log("8c rolling normalization", ok,
                   f"1000 full windows, worst |mean| {worst_mean:.1e}, worst |std - 1| {worst_std:.1e}")
    assert worst_mean <= 1e-9
    assert worst_std <= 1e-6


def test_c8d_value_guided_sampling(acceptance_log):
    rng = np.random.default_rng(10)
    mismatches = 0
    for _ in range(1000):
        k = int(rng.integers(2, 9))
        dist = PolicyDistribution("categorical", logits=rng.normal(0.0, 2.0, size=k))
        q = rng.normal(size=k)
        beta, shift = float(rng.uniform(0.0, 3.0)), float(rng.normal(0.0, 100.0))
        a = value_guided_sample(dist, lambda c: q[c], beta, rng)
        b = value_guided_sample(dist, lambda c: q[c] + shift, beta, rng)
        mismatches += a != b
    dist = PolicyDistribution("categorical", logits=np.log(np.array([0.9, 0.1])))
    scores = np.array([0.0, 1.0]) + 0.3 * dist.log_probs
    hand = value_guided_sample(dist, lambda c: np.array([0.0, 1.0])[c], 0.3, rng)
    ok = mismatches == 0 and hand == 1 and np.allclose(scores, [-0.0316, 0.3092], atol=5e-5)
    acceptance_log("8d value-guided sampling", ok,
                   f"shift invariance broken on {mismatches}/1000; hand example scores "
                   f"[{scores[0]:.4f}, {scores[1]:.4f}] -> action {hand}")
    assert mismatches == 0
    assert hand == 1


# 9 ---------------------------------------------------------------------------


def test_c9_determinism(chain_benchmark, tmp_path, acceptance_log):
    src = chain_benchmark["out"]
    cfg = parse_config((CONFIGS / "sparse_chain.json").read_text())
    cfg.seeds = [2]
    cfg.algorithms = [a for a in cfg.algorithms if a.name == "hybrid"]
    run_experiment(cfg, tmp_path)
    name = f"{M.CELLS_DIR}/{M.cell_id('hybrid', 2)}.jsonl"
    same_jsonl = (src / name).read_bytes() == (tmp_path / name).read_bytes()

    (svg,) = plot_curves(src)
    first = svg.read_bytes()
    plot_curves(src)
    same_svg = svg.read_bytes() == first
    ok = same_jsonl and same_svg
    acceptance_log("9 determinism", ok, f"cell rerun JSONL identical: {same_jsonl}; SVG regeneration identical: {same_svg}")
    assert same_jsonl
    assert same_svg
