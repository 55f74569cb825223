"""Advantage estimators and reward transforms for the three algorithms.

All estimators work on :class:`MacroStepRecord` objects: one base state, the N
branches evaluated from it, and which branch the trajectory continued along.

* PPO: one-step TD error of the single branch, on raw rewards.
* GRPO: transformed reward minus the group mean, no critic involved.
* Hybrid: per-branch ``f(R) + gamma * V(s') - V(s)``; the group mean of those
  is the macro-step advantage and is returned alongside for diagnostics.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any

import numpy as np

TRANSFORMS = ("tanh", "identity", "rolling_norm")


@dataclass
class SampleBranch:
    action: Any
    raw_reward: float
    transformed_reward: float
    next_observation: np.ndarray
    next_value: float = 0.0
    terminal: bool = False
    truncated: bool = False
    old_log_prob: float = 0.0
    # filled only by exhaustive n-step collection: transformed rewards for k >= 1
    tail_rewards: tuple = ()
    tail_observation: np.ndarray | None = None
    tail_value: float = 0.0
    tail_terminal: bool = False

    @property
    def done(self) -> bool:
        return self.terminal or self.truncated

    @property
    def raw_steps(self) -> int:
        return 1 + len(self.tail_rewards)


@dataclass
class MacroStepRecord:
    observation: np.ndarray
    base_value: float
    branches: list
    continuation_index: int = 0

    def __post_init__(self):
        if not self.branches:
            raise ValueError("a macro-step needs at least one branch")
        if not 0 <= self.continuation_index < len(self.branches):
            raise ValueError(f"continuation_index {self.continuation_index} outside [0, {len(self.branches)})")

    @property
    def group_size(self) -> int:
        return len(self.branches)

    @property
    def continuation(self) -> SampleBranch:
        return self.branches[self.continuation_index]


@dataclass
class AdvantageEntry:
    observation: np.ndarray
    action: Any
    old_log_prob: float
    advantage: float
    value_target: float | None = None


# ---------------------------------------------------------------------------
# reward transforms


class RewardNormalizer:
    """Ring buffer of recent raw rewards with population mean/std over its contents."""

    def __init__(self, capacity: int = 256, eps: float = 1e-8):
        if capacity < 1:
            raise ValueError("normalizer window must hold at least one reward")
        self.capacity = int(capacity)
        self.eps = float(eps)
        self._buf = np.zeros(self.capacity)
        self._n = 0
        self._head = 0

    def __len__(self) -> int:
        return self._n

    def push(self, r: float) -> None:
        self._buf[self._head] = r
        self._head = (self._head + 1) % self.capacity
        self._n = min(self._n + 1, self.capacity)

    def window(self) -> np.ndarray:
        """Contents in insertion order, oldest first."""
        if self._n < self.capacity:
            return self._buf[:self._n].copy()
        return np.roll(self._buf, -self._head)

    @property
    def mean(self) -> float:
        return float(np.mean(self._buf[:self._n])) if self._n else math.nan

    @property
    def std(self) -> float:
        return float(np.std(self._buf[:self._n])) if self._n else math.nan

    def normalize(self, r):
        """(r - mean) / (std + eps) against the current window, without recording r."""
        if self._n == 0:
            raise ValueError("rolling_norm needs at least one reward in the window")
        return (r - self.mean) / (self.std + self.eps)


def transform_reward(transform: str, r: float, state: RewardNormalizer | None = None) -> float:
    if transform == "tanh":
        return math.tanh(r)
    if transform == "identity":
        return float(r)
    if transform == "rolling_norm":
        if state is None:
            raise ValueError("rolling_norm requires a RewardNormalizer")
        out = float(state.normalize(r))
        state.push(r)
        return out
    raise ValueError(f"unknown reward transform {transform!r}; choose from {TRANSFORMS}")


# ---------------------------------------------------------------------------
# estimators


def _bootstrap(ret: float, discount: float, value: float, terminal: bool, gamma: float) -> float:
    # ret + gamma^m * V(s_end), with the bootstrap dropped at a true terminal
    return ret + discount * gamma * value * (1.0 - float(terminal))


def ppo_advantage(record: MacroStepRecord, gamma: float) -> AdvantageEntry:
    if record.group_size != 1:
        raise ValueError(f"PPO advantage expects a single branch, got {record.group_size}")
    b = record.branches[0]
    target = _bootstrap(b.raw_reward, 1.0, b.next_value, b.terminal, gamma)
    return AdvantageEntry(record.observation, b.action, b.old_log_prob, target - record.base_value, target)


def grpo_advantages(record: MacroStepRecord, normalize_std: bool = False, eps: float = 1e-8) -> list[AdvantageEntry]:
    if record.group_size < 2:
        raise ValueError("GRPO group size must exceed 1")
    rewards = np.array([b.transformed_reward for b in record.branches])
    adv = rewards - rewards.mean()
    if normalize_std:
        adv = adv / (rewards.std() + eps)
    return [
        AdvantageEntry(record.observation, b.action, b.old_log_prob, float(a))
        for b, a in zip(record.branches, adv)
    ]


def literal_group_advantage(rewards) -> float:
    """The group formula read literally: mean of the rewards minus their mean (always zero)."""
    r = np.asarray(rewards, dtype=np.float64)
    empirical_mean = r.sum() / r.shape[0]
    expectation = r.sum() / r.shape[0]
    return float(empirical_mean - expectation)


def hybrid_advantages(record: MacroStepRecord, gamma: float) -> tuple[list[AdvantageEntry], float]:
    """Per-branch entries plus the group-mean macro-step advantage."""
    entries = []
    for b in record.branches:
        target = _bootstrap(b.transformed_reward, 1.0, b.next_value, b.terminal, gamma)
        entries.append(AdvantageEntry(record.observation, b.action, b.old_log_prob,
                                      target - record.base_value, target))
    mean_adv = sum(e.advantage for e in entries) / len(entries)
    return entries, mean_adv


def _cheap_path_target(records, i, b, gamma, n):
    ret = b.transformed_reward
    discount = 1.0
    value, terminal = b.next_value, b.terminal
    stopped = b.done
    j = i
    for _ in range(1, n):
        if stopped:
            break
        cont = records[j].continuation
        if cont.done or j + 1 >= len(records):
            break
        j += 1
        nxt = records[j].continuation
        discount *= gamma
        ret += discount * nxt.transformed_reward
        value, terminal = nxt.next_value, nxt.terminal
        stopped = nxt.done
    return _bootstrap(ret, discount, value, terminal, gamma)


def _exhaustive_target(b, gamma, n):
    if len(b.tail_rewards) > n - 1:
        raise ValueError(f"branch carries {len(b.tail_rewards)} tail rewards, more than n-1 = {n - 1}")
    ret = b.transformed_reward
    discount = 1.0
    for r in b.tail_rewards:
        discount *= gamma
        ret += discount * r
    if b.tail_rewards:
        return _bootstrap(ret, discount, b.tail_value, b.tail_terminal, gamma)
    return _bootstrap(ret, discount, b.next_value, b.terminal, gamma)


def hybrid_nstep_advantages(records: list[MacroStepRecord], gamma: float, n: int,
                            exhaustive: bool = False) -> list[AdvantageEntry]:
    """n-step hybrid advantages for every branch of every record, in order.

    Cheap mode follows the branch's own first reward, then the continuation
    path through later records.  Exhaustive mode uses the per-branch
    sub-trajectory stored on each branch at collection time.  Either way the
    sum stops at episode or batch end; only a true terminal drops the bootstrap.
    """
    if n < 1:
        raise ValueError(f"n-step horizon must be >= 1, got {n}")
    out = []
    for i, rec in enumerate(records):
        for b in rec.branches:
            if exhaustive:
                target = _exhaustive_target(b, gamma, n)
            else:
                target = _cheap_path_target(records, i, b, gamma, n)
            out.append(AdvantageEntry(rec.observation, b.action, b.old_log_prob,
                                      target - rec.base_value, target))
    return out
