"""Quick invariant suite behind the ``selftest`` subcommand (seconds, not minutes)."""

from __future__ import annotations

import numpy as np

from .. import advantage as adv
from .. import oracles
from ..approximator import NetworkSpec, PolicyDistribution, backward, forward, init_params
from ..envs import NoisyGrid, PointMass1D, SparseChain, value_iteration
from ..optimizer import clipped_surrogate_loss, value_guided_sample


def _check_backprop():
    rng = np.random.default_rng(0)
    worst = 0.0
    for head, out_dim in (("linear", 3), ("categorical-logits", 4), ("gaussian-mean-logstd", 4)):
        spec = NetworkSpec(5, (7, 6), out_dim, "tanh", head)
        p = init_params(spec, rng)
        x, g = rng.normal(size=(3, 5)), rng.normal(size=(3, out_dim))
        num = oracles.fd_gradient(lambda q: float(np.sum(forward(q, spec, x) * g)), p)
        ok, rel = oracles.gradients_agree(backward(p, spec, x, g), num)
        worst = max(worst, rel)
        if not ok:
            return False, f"{head} head: max relative error {rel:.2e}"
    return True, f"max relative error {worst:.2e}"


def _check_surrogate():
    rng = np.random.default_rng(1)
    spec = NetworkSpec(4, (8,), 3, "tanh", "categorical-logits")
    p = init_params(spec, rng)
    obs = rng.normal(size=(16, 4))
    acts = rng.integers(3, size=16)
    old = rng.normal(-1.1, 0.3, size=16)
    A = rng.normal(size=16)
    _, grad, _ = clipped_surrogate_loss(p, spec, obs, acts, old, A, 0.2, 0.05)
    num = oracles.fd_gradient(lambda q: clipped_surrogate_loss(q, spec, obs, acts, old, A, 0.2, 0.05)[0], p)
    ok, rel = oracles.gradients_agree(grad, num)
    return ok, f"max relative error {rel:.2e}"


def _check_groups():
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(1000):
        rec = oracles.random_record(rng, int(rng.integers(2, 9)))
        worst = max(worst, abs(sum(e.advantage for e in adv.grpo_advantages(rec))))
        if not all(oracles.exhaustive_group_check(rec, 0.9).values()):
            return False, "library and scalar recomputation disagree"
    return worst <= 1e-9, f"worst group sum {worst:.1e}"


def _check_reduction():
    rng = np.random.default_rng(3)
    for _ in range(1000):
        rec = oracles.random_record(rng, 1, transform="identity")
        if adv.hybrid_advantages(rec, 0.95)[0][0].advantage != adv.ppo_advantage(rec, 0.95).advantage:
            return False, "hybrid(N=1, identity) differs from ppo"
    return True, "bit-identical on 1000 records"


def _check_tabular():
    mdp = SparseChain().to_mdp(0.9)
    V, pi = value_iteration(mdp, 1e-12)
    V_pi = oracles.exact_policy_return(mdp, pi)
    ok = abs(V[0] - 0.729) < 1e-9 and abs(V_pi[0] - 0.729) < 1e-9
    return ok, f"V(s0) = {V[0]:.6f}"


def _check_snapshots():
    rng = np.random.default_rng(4)
    for env in (SparseChain(), NoisyGrid(), PointMass1D()):
        for _ in range(100):
            env.reset(seed=int(rng.integers(1 << 30)))
            for _ in range(int(rng.integers(0, 3))):
                if env.done:
                    break
                env.step(_random_action(env, rng))
            if env.done:
                continue
            snap = env.snapshot()
            a = _random_action(env, rng)
            first = env.step(a)
            env.restore(snap)
            second = env.step(a)
            if (first.reward != second.reward or first.terminal != second.terminal
                    or not np.array_equal(first.observation, second.observation)):
                return False, f"{env.name}: replay diverged"
    return True, "100 replays per environment"


def _random_action(env, rng):
    return int(rng.integers(env.n_actions)) if env.discrete else rng.normal(size=env.action_dim)


def _check_normalizer():
    rng = np.random.default_rng(5)
    norm = adv.RewardNormalizer(256)
    for r in rng.normal(3.0, 2.0, size=300):
        norm.push(r)
    z = norm.normalize(norm.window())
    return abs(z.mean()) <= 1e-9 and abs(z.std() - 1.0) <= 1e-6, f"mean {z.mean():.1e}, std {z.std():.8f}"


def _check_guidance():
    dist = PolicyDistribution("categorical", logits=np.log(np.array([0.9, 0.1])))
    a = value_guided_sample(dist, lambda c: np.array([0.0, 1.0])[c], 0.3, np.random.default_rng(0))
    return a == 1, f"selected action {a}"


CHECKS = [
    ("backprop matches finite differences", _check_backprop),
    ("clipped surrogate + entropy gradient", _check_surrogate),
    ("group zero-sum and scalar recomputation", _check_groups),
    ("hybrid(N=1) reduces to ppo", _check_reduction),
    ("value iteration on the chain", _check_tabular),
    ("snapshot/restore replay", _check_snapshots),
    ("rolling reward normalization", _check_normalizer),
    ("value-guided selection example", _check_guidance),
]


def run_selftest(echo=print) -> int:
    failures = 0
    for name, fn in CHECKS:
        try:
            ok, detail = fn()
        except Exception as exc:  # report and continue
            ok, detail = False, repr(exc)
        failures += not ok
        echo(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    echo(f"{len(CHECKS) - failures}/{len(CHECKS)} checks passed")
    return 0 if failures == 0 else 1


if __name__ == "__main__":
    raise SystemExit(run_selftest())

