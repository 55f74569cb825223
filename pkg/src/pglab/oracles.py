"""Brute-force verifiers: finite differences, exact tabular evaluation, scalar recomputation.

Nothing here reuses arithmetic from :mod:`pglab.advantage` or
:mod:`pglab.approximator`; the duplication is what makes these independent
checks.  Loops are plain Python on purpose.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import advantage as lib
from .advantage import MacroStepRecord


@dataclass(frozen=True)
class FiniteDiffSpec:
    h: float = 1e-5
    scheme: str = "central"

    def __post_init__(self):
        if self.h <= 0:
            raise ValueError("finite-difference step must be positive")
        if self.scheme != "central":
            raise ValueError("only central differences are supported")


def fd_gradient(loss_fn, params, spec: FiniteDiffSpec = FiniteDiffSpec()) -> np.ndarray:
    """Central-difference gradient of ``loss_fn(params) -> float``."""
    p = np.array(params, dtype=np.float64)
    grad = np.zeros_like(p)
    for i in range(p.size):
        orig = p[i]
        p[i] = orig + spec.h
        up = loss_fn(p.copy())
        p[i] = orig - spec.h
        down = loss_fn(p.copy())
        p[i] = orig
        if not (math.isfinite(up) and math.isfinite(down)):
            raise FloatingPointError(f"non-finite loss when probing coordinate {i}")
        grad[i] = (up - down) / (2.0 * spec.h)
    return grad


def gradients_agree(analytic, numeric, rtol: float = 1e-4, atol: float = 1e-7) -> tuple[bool, float]:
    """Per-coordinate check ``|a - n| <= atol + rtol * max(|a|, |n|)``; also the worst relative error."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    err = np.abs(a - n)
    ok = bool(np.all(err <= atol + rtol * np.maximum(np.abs(a), np.abs(n))))
    rel = err / np.maximum(np.maximum(np.abs(a), np.abs(n)), atol)
    return ok, float(rel.max()) if rel.size else 0.0


# ---------------------------------------------------------------------------
# networks, recomputed with scalar loops


def scalar_forward(params, x, input_dim: int, hidden_layers, output_dim: int,
                   activation: str = "tanh", head: str = "linear") -> list[float]:
    """Layer-by-layer scalar evaluation of the flat layout (row-major W, then b, per layer)."""
    if len(x) != input_dim:
        raise ValueError("input length mismatch")
    gaussian = head == "gaussian-mean-logstd"
    out_width = output_dim // 2 if gaussian else output_dim
    sizes = [input_dim, *hidden_layers, out_width]
    p = [float(v) for v in params]
    h = [float(v) for v in x]
    pos = 0
    for layer in range(len(sizes) - 1):
        n_in, n_out = sizes[layer], sizes[layer + 1]
        weights = p[pos:pos + n_in * n_out]
        pos += n_in * n_out
        bias = p[pos:pos + n_out]
        pos += n_out
        nxt = []
        for o in range(n_out):
            acc = bias[o]
            for i in range(n_in):
                acc += weights[o * n_in + i] * h[i]
            if layer < len(sizes) - 2:
                acc = math.tanh(acc) if activation == "tanh" else (acc if acc > 0.0 else 0.0)
            nxt.append(acc)
        h = nxt
    if gaussian:
        h = h + [min(max(v, -5.0), 2.0) for v in p[pos:pos + out_width]]
    return h


# ---------------------------------------------------------------------------
# tabular evaluation


def exact_policy_return(mdp, policy, gamma: float | None = None, tol: float = 1e-12,
                        max_iter: int = 1_000_000) -> np.ndarray:
    """Values of a (possibly stochastic) policy by iterating V = R_pi + gamma P_pi V.

    ``policy`` is an (S, A) table of action probabilities or an int vector of actions.
    Terminal states are pinned to zero.
    """
    g = mdp.gamma if gamma is None else gamma
    S, A = mdp.n_states, mdp.n_actions
    pol = np.asarray(policy)
    if pol.ndim == 1:
        table = [[1.0 if a == int(pol[s]) else 0.0 for a in range(A)] for s in range(S)]
    else:
        table = pol.tolist()
    P = mdp.transition.tolist()
    R = mdp.reward.tolist()
    V = [0.0] * S
    for _ in range(max_iter):
        new = [0.0] * S
        for s in range(S):
            if s in mdp.terminal:
                continue
            total = 0.0
            for a in range(A):
                pa = table[s][a]
                if pa == 0.0:
                    continue
                nxt = 0.0
                for s2 in range(S):
                    nxt += P[s][a][s2] * V[s2]
                total += pa * (R[s][a] + g * nxt)
            new[s] = total
        resid = max(abs(x - y) for x, y in zip(new, V))
        V = new
        if resid <= tol:
            break
    return np.array(V)


# ---------------------------------------------------------------------------
# advantage recomputation


def _scalar_estimates(record: MacroStepRecord, gamma: float):
    n = len(record.branches)
    base = float(record.base_value)
    hyb = []
    for br in record.branches:
        boot = 0.0 if br.terminal else gamma * float(br.next_value)
        hyb.append(float(br.transformed_reward) + boot - base)
    mean_hyb = 0.0
    for a in hyb:
        mean_hyb += a
    mean_hyb /= n
    total = 0.0
    for br in record.branches:
        total += float(br.transformed_reward)
    grp = [float(br.transformed_reward) - total / n for br in record.branches]
    cont = record.branches[record.continuation_index]
    boot = 0.0 if cont.terminal else gamma * float(cont.next_value)
    ppo = float(cont.raw_reward) + boot - base
    return ppo, grp, hyb, mean_hyb


def exhaustive_group_check(record: MacroStepRecord, gamma: float, tol: float = 1e-12) -> dict:
    """Recompute PPO/GRPO/Hybrid advantages by hand and compare with the library.

    Returns a dict of booleans; keys that do not apply to the record's group
    size are omitted (``ppo`` needs N = 1, ``grpo`` needs N >= 2).
    """
    ppo, grp, hyb, mean_hyb = _scalar_estimates(record, gamma)
    out = {}
    entries, mean = lib.hybrid_advantages(record, gamma)
    out["hybrid"] = all(abs(e.advantage - h) <= tol for e, h in zip(entries, hyb))
    out["hybrid_mean"] = abs(mean - mean_hyb) <= tol
    if len(record.branches) == 1:
        out["ppo"] = abs(lib.ppo_advantage(record, gamma).advantage - ppo) <= tol
        br = record.branches[0]
        if br.raw_reward == br.transformed_reward:
            out["ppo_equals_hybrid"] = abs(ppo - hyb[0]) <= tol
    else:
        out["grpo"] = all(abs(e.advantage - g) <= tol for e, g in zip(lib.grpo_advantages(record), grp))
    return out


def random_record(rng: np.random.Generator, n: int, transform: str = "tanh",
                  terminal_prob: float = 0.2, obs_dim: int = 3) -> MacroStepRecord:
    """A synthetic macro-step with random rewards, values and terminal flags."""
    branches = []
    for _ in range(n):
        raw = float(rng.normal(0.0, 2.0))
        shaped = math.tanh(raw) if transform == "tanh" else raw
        branches.append(lib.SampleBranch(
            action=int(rng.integers(4)),
            raw_reward=raw,
            transformed_reward=shaped,
            next_observation=rng.normal(size=obs_dim),
            next_value=float(rng.normal()),
            terminal=bool(rng.random() < terminal_prob),
            old_log_prob=float(np.log(rng.uniform(0.05, 1.0))),
        ))
    return MacroStepRecord(rng.normal(size=obs_dim), float(rng.normal()), branches, 0)
