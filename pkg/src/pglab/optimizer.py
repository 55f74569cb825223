"""Rollout collection, clipped-surrogate and critic losses, and the training loop.

PPO, GRPO and Hybrid GRPO share this kernel and differ only in group size,
reward transform, which advantage estimator runs, and whether the critic is
trained.  Gradients are exact (see :mod:`pglab.approximator`); parameters are
updated with bias-corrected Adam.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import advantage as adv
from .approximator import (
    NetworkSpec,
    PolicyDistribution,
    backward,
    entropy,
    entropy_grad,
    forward,
    init_params,
    log_prob,
    log_prob_grad,
    sample_action,
    save_checkpoint,
)
from .envs import Env

ALGORITHMS = ("ppo", "grpo", "hybrid")
DEFAULT_TRANSFORM = {"ppo": "identity", "grpo": "tanh", "hybrid": "tanh"}
RATIO_LOG_CLAMP = 30.0
RETURN_WINDOW = 20


class TrainingDiverged(RuntimeError):
    """A loss became non-finite; ``state`` holds a diagnostic dump."""

    def __init__(self, message: str, state: dict):
        super().__init__(message)
        self.state = state


class CriticFreeError(ValueError):
    """The critic was asked for a loss on entries that carry no value targets (GRPO)."""


@dataclass
class OptimizerConfig:
    algorithm: str = "hybrid"
    gamma: float = 0.99
    clip_eps: float = 0.2
    group_size: int = 4
    n_step: int = 1
    nstep_exhaustive: bool = False
    entropy_coef: float = 0.0
    guidance_beta: float = 0.0
    guidance_candidates: int = 16
    lr_policy: float = 3e-4
    lr_value: float = 1e-3
    epochs: int = 4
    minibatch_size: int = 64
    macro_steps: int = 512
    n_batches: int = 100
    transform: str | None = None
    normalizer_window: int = 256
    normalizer_eps: float = 1e-8
    grpo_std_normalize: bool = False
    hidden_layers: tuple = (32, 32)
    activation: str = "tanh"
    seed: int = 0
    checkpoint_interval: int = 0

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}")
        if self.algorithm == "ppo":
            self.group_size = 1
        if self.transform is None:
            self.transform = DEFAULT_TRANSFORM[self.algorithm]
        self.hidden_layers = tuple(self.hidden_layers)
        self.validate()

    def validate(self) -> None:
        if self.transform not in adv.TRANSFORMS:
            raise ValueError(f"transform must be one of {adv.TRANSFORMS}, got {self.transform!r}")
        if self.algorithm == "grpo" and self.group_size < 2:
            raise ValueError("GRPO group size must exceed 1")
        if self.group_size < 1 or self.n_step < 1 or self.epochs < 1 or self.minibatch_size < 1:
            raise ValueError("group_size, n_step, epochs and minibatch_size must be >= 1")
        if self.macro_steps < 1 or self.n_batches < 0:
            raise ValueError("macro_steps must be >= 1 and n_batches >= 0")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if self.clip_eps <= 0.0:
            raise ValueError("clip_eps must be positive")
        if self.lr_policy < 0.0 or self.lr_value < 0.0:
            raise ValueError("learning rates must be non-negative")
        if self.entropy_coef < 0.0 or self.guidance_beta < 0.0:
            raise ValueError("entropy_coef and guidance_beta must be non-negative")
        if self.n_step > 1 and self.algorithm != "hybrid":
            raise ValueError("n-step returns are a hybrid extension; set algorithm='hybrid'")
        if self.guidance_beta > 0.0 and self.algorithm == "grpo":
            raise ValueError("value-guided sampling needs a critic; GRPO has none")
        if self.guidance_candidates < 1:
            raise ValueError("guidance_candidates must be >= 1")

    @property
    def uses_critic(self) -> bool:
        return self.algorithm != "grpo"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_layers"] = list(self.hidden_layers)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "OptimizerConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown optimizer fields: {sorted(unknown)}")
        return cls(**d)


class Adam:
    """Bias-corrected first/second-moment step: ``lr * m_hat / (sqrt(v_hat) + eps)``."""

    def __init__(self, n: int, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> None:
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1 ** self.t)
        v_hat = self.v / (1.0 - self.beta2 ** self.t)
        params -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


# ---------------------------------------------------------------------------
# networks


@dataclass
class Networks:
    policy_spec: NetworkSpec
    policy: np.ndarray
    value_spec: NetworkSpec
    value: np.ndarray
    guidance_spec: NetworkSpec | None = None
    guidance: np.ndarray | None = None

    def policy_dist(self, obs) -> PolicyDistribution:
        return PolicyDistribution.from_output(self.policy_spec, forward(self.policy, self.policy_spec, obs))

    def values(self, obs) -> np.ndarray:
        return forward(self.value, self.value_spec, obs)[..., 0]


def build_networks(env: Env, config: OptimizerConfig, rng: np.random.Generator,
                   guidance_rng: np.random.Generator | None = None) -> Networks:
    hidden, act = config.hidden_layers, config.activation
    if env.discrete:
        pspec = NetworkSpec(env.observation_dim, hidden, env.n_actions, act, "categorical-logits")
    else:
        pspec = NetworkSpec(env.observation_dim, hidden, 2 * env.action_dim, act, "gaussian-mean-logstd")
    vspec = NetworkSpec(env.observation_dim, hidden, 1, act, "linear")
    nets = Networks(pspec, init_params(pspec, rng), vspec, init_params(vspec, rng))
    if config.guidance_beta > 0.0:
        gspec = NetworkSpec(env.observation_dim + action_encoding_dim(env), hidden, 1, act, "linear")
        nets.guidance_spec = gspec
        nets.guidance = init_params(gspec, guidance_rng if guidance_rng is not None else rng)
    return nets


def action_encoding_dim(env: Env) -> int:
    return env.n_actions if env.discrete else env.action_dim


def encode_actions(env: Env, actions) -> np.ndarray:
    a = np.asarray(actions)
    if env.discrete:
        return np.eye(env.n_actions)[a.astype(int).reshape(-1)]
    return a.astype(np.float64).reshape(-1, env.action_dim)


def guidance_q(nets: Networks, env: Env, obs: np.ndarray, actions) -> np.ndarray:
    enc = encode_actions(env, actions)
    x = np.concatenate([np.broadcast_to(obs, (enc.shape[0], obs.shape[-1])), enc], axis=1)
    return forward(nets.guidance, nets.guidance_spec, x)[:, 0]


# ---------------------------------------------------------------------------
# action selection


def value_guided_sample(dist: PolicyDistribution, q_fn, beta: float, rng: np.random.Generator,
                        n_candidates: int = 16):
    """Argmax of ``Q(s, a) + beta * log pi(a|s)`` over a candidate set.

    Discrete policies score every action (ties go to the lowest index);
    continuous policies score ``n_candidates`` draws from ``dist``.
    ``q_fn`` maps an array of candidate actions to their Q values.
    """
    if beta < 0.0:
        raise ValueError("beta must be non-negative")
    if dist.kind == "categorical":
        candidates = np.arange(dist.logits.shape[-1])
        logp = dist.log_probs
    else:
        if n_candidates < 1:
            raise ValueError("value-guided sampling needs at least one candidate")
        candidates = np.stack([sample_action(dist, rng) for _ in range(n_candidates)])
        logp = np.array([log_prob(dist, c) for c in candidates])
    if len(candidates) == 0:
        raise ValueError("value-guided sampling needs at least one candidate")
    scores = np.asarray(q_fn(candidates), dtype=np.float64) + beta * logp
    best = int(np.argmax(scores))
    return int(candidates[best]) if dist.kind == "categorical" else candidates[best]


def probability_ratio(new_log_prob, old_log_prob):
    """exp(new - old) with the exponent clamped to +-30."""
    return np.exp(np.clip(np.subtract(new_log_prob, old_log_prob), -RATIO_LOG_CLAMP, RATIO_LOG_CLAMP))


# ---------------------------------------------------------------------------
# rollouts


@dataclass
class RolloutState:
    """Trajectory bookkeeping carried between batches."""

    observation: np.ndarray
    episode_return: float = 0.0
    recent_returns: list = field(default_factory=list)
    episodes: int = 0


@dataclass
class RolloutBatch:
    records: list
    episode_ends: list  # record indices whose continuation ended an episode
    episode_returns: list
    macro_steps: int
    raw_steps: int


def collect_rollout(env: Env, nets: Networks, config: OptimizerConfig, rng: np.random.Generator,
                    state: RolloutState, normalizer: adv.RewardNormalizer | None = None,
                    noise_rng: np.random.Generator | None = None) -> RolloutBatch:
    """Multi-sample rollout of ``config.macro_steps`` macro-steps.

    At each macro-step the env is snapshotted, every branch is evaluated from
    that snapshot, and the trajectory continues from branch 0's outcome.
    Branch 0 uses the env's own noise stream; the other branches get fresh
    transition noise seeded from ``noise_rng`` (default ``rng``), so branches
    of a stochastic env are independent draws.  Old log-probs are frozen here;
    state values are filled in afterwards with one batched critic pass.
    """
    if noise_rng is None:
        noise_rng = rng
    N = config.group_size
    guided = config.guidance_beta > 0.0
    exhaustive_tail = config.nstep_exhaustive and config.n_step > 1

    def shape(r):
        if config.transform == "rolling_norm" and len(normalizer) == 0:
            normalizer.push(r)
        return adv.transform_reward(config.transform, r, normalizer)

    records, ends, returns = [], [], []
    raw_steps = 0
    obs = state.observation
    for _ in range(config.macro_steps):
        dist = nets.policy_dist(obs)
        base = env.snapshot()
        branches = []
        post = None
        for t in range(N):
            if t > 0:
                env.restore(base)
                env.reseed_noise(int(noise_rng.integers(1 << 63)))
            if guided and t == 0:
                a = value_guided_sample(dist, lambda c: guidance_q(nets, env, obs, c),
                                        config.guidance_beta, rng, config.guidance_candidates)
            else:
                a = sample_action(dist, rng)
            res = env.step(a)
            raw_steps += 1
            if t == 0:
                post = env.snapshot()
            br = adv.SampleBranch(a, res.reward, shape(res.reward), res.observation,
                                  terminal=res.terminal, truncated=res.truncated,
                                  old_log_prob=log_prob(dist, a))
            if exhaustive_tail and not res.done:
                tail, last = [], res
                while len(tail) < config.n_step - 1 and not last.done:
                    last = env.step(sample_action(nets.policy_dist(last.observation), rng))
                    raw_steps += 1
                    tail.append(shape(last.reward))
                br.tail_rewards = tuple(tail)
                br.tail_observation = last.observation
                br.tail_terminal = last.terminal
            branches.append(br)
        if N > 1 or exhaustive_tail:
            env.restore(post)

        rec = adv.MacroStepRecord(obs, 0.0, branches, 0)
        records.append(rec)
        cont = rec.continuation
        state.episode_return += cont.raw_reward
        if cont.done:
            ends.append(len(records) - 1)
            returns.append(state.episode_return)
            state.recent_returns = (state.recent_returns + [state.episode_return])[-RETURN_WINDOW:]
            state.episodes += 1
            state.episode_return = 0.0
            obs = env.reset()
        else:
            obs = cont.next_observation
    state.observation = obs

    if config.uses_critic:
        _fill_values(records, nets)
    return RolloutBatch(records, ends, returns, len(records), raw_steps)


def _fill_values(records, nets: Networks) -> None:
    obs = [r.observation for r in records]
    nxt = [b.next_observation for r in records for b in r.branches]
    tails = [b.tail_observation for r in records for b in r.branches if b.tail_observation is not None]
    v = nets.values(np.array(obs + nxt + tails))
    i = len(obs)
    j = i + len(nxt)
    for k, r in enumerate(records):
        r.base_value = float(v[k])
        for b in r.branches:
            b.next_value = float(v[i])
            i += 1
            if b.tail_observation is not None:
                b.tail_value = float(v[j])
                j += 1


# ---------------------------------------------------------------------------
# losses


def clipped_surrogate_loss(params: np.ndarray, spec: NetworkSpec, observations, actions, old_log_probs,
                           advantages, clip_eps: float, entropy_coef: float = 0.0):
    """Negative clipped surrogate minus the entropy bonus, and its exact gradient.

    Returns ``(loss, grad, info)``; advantages are constants.
    """
    A = np.asarray(advantages, dtype=np.float64)
    if A.size == 0:
        raise ValueError("empty minibatch")
    if not np.all(np.isfinite(A)):
        raise ValueError("non-finite advantage in batch")
    obs = np.asarray(observations, dtype=np.float64)
    dist = PolicyDistribution.from_output(spec, forward(params, spec, obs))
    new_lp = log_prob(dist, actions)
    log_ratio = np.asarray(new_lp) - np.asarray(old_log_probs)
    ratio = probability_ratio(new_lp, old_log_probs)
    clipped = np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps)
    unclipped_term = ratio * A
    surrogate = np.minimum(unclipped_term, clipped * A)
    ent = entropy(dist)
    B = A.shape[0]
    loss = -surrogate.mean() - entropy_coef * np.mean(ent)

    # gradient flows only where min() selects the unclipped term inside the exponent clamp
    active = (unclipped_term <= clipped * A) & (np.abs(log_ratio) < RATIO_LOG_CLAMP)
    d_logp = -(unclipped_term * active) / B
    g_out = d_logp[:, None] * log_prob_grad(dist, actions)
    if entropy_coef:
        g_out -= (entropy_coef / B) * entropy_grad(dist)
    grad = backward(params, spec, obs, g_out)
    info = {
        "ratio_mean": float(ratio.mean()),
        "clip_fraction": float(np.mean(np.abs(ratio - 1.0) > clip_eps)),
        "entropy": float(np.mean(ent)),
    }
    return float(loss), grad, info


def value_loss(params: np.ndarray, spec: NetworkSpec, observations, targets):
    """0.5 * mean squared error of the critic and its gradient."""
    if targets is None or any(t is None for t in targets):
        raise CriticFreeError("value targets are absent (GRPO is critic-free)")
    y = np.asarray(targets, dtype=np.float64)
    obs = np.asarray(observations, dtype=np.float64)
    v = forward(params, spec, obs)[:, 0]
    diff = v - y
    loss = 0.5 * np.mean(diff * diff)
    grad = backward(params, spec, obs, (diff / y.shape[0])[:, None])
    return float(loss), grad


# ---------------------------------------------------------------------------
# training


def estimate_advantages(batch: RolloutBatch, config: OptimizerConfig):
    """Flat policy entries and one critic target per macro-step (None for GRPO)."""
    if config.algorithm == "ppo":
        entries = [adv.ppo_advantage(r, config.gamma) for r in batch.records]
        return entries, [e.value_target for e in entries], []
    if config.algorithm == "grpo":
        entries = []
        for r in batch.records:
            entries.extend(adv.grpo_advantages(r, config.grpo_std_normalize))
        return entries, None, []
    if config.n_step == 1:
        entries, macro = [], []
        for r in batch.records:
            e, m = adv.hybrid_advantages(r, config.gamma)
            entries.extend(e)
            macro.append(m)
    else:
        entries = adv.hybrid_nstep_advantages(batch.records, config.gamma, config.n_step,
                                              config.nstep_exhaustive)
        macro = []
    targets, pos = [], 0
    for r in batch.records:
        group = entries[pos:pos + r.group_size]
        targets.append(sum(e.value_target for e in group) / len(group))
        pos += r.group_size
    return entries, targets, macro


@dataclass
class UpdateStats:
    policy_loss: float
    value_loss: float
    adv_mean: float
    adv_var: float
    ratio_mean: float
    clip_fraction: float
    entropy: float
    grad_norm: float
    macro_adv_mean: float = 0.0


@dataclass
class TrainResult:
    nets: Networks
    stats: list
    metrics: list
    wall_clock: list


def _minibatches(n: int, size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    return [perm[i:i + size] for i in range(0, n, size)]


def train(config: OptimizerConfig, env: Env, on_batch=None, checkpoint_dir=None) -> TrainResult:
    """Run ``config.n_batches`` collect/estimate/update rounds.

    ``on_batch(metrics_dict)`` is called after every batch; returning True
    stops training early.  Deterministic for a fixed config and seed.
    """
    seeds = np.random.SeedSequence(config.seed).spawn(6)
    init_rng, act_rng, upd_rng, guide_rng = (np.random.default_rng(s) for s in seeds[:4])
    env_seed = int(seeds[4].generate_state(1)[0])
    noise_rng = np.random.default_rng(seeds[5])

    nets = build_networks(env, config, init_rng, guide_rng)
    opt_pi = Adam(nets.policy.size, config.lr_policy)
    opt_v = Adam(nets.value.size, config.lr_value)
    opt_q = Adam(nets.guidance.size, config.lr_value) if nets.guidance is not None else None
    normalizer = adv.RewardNormalizer(config.normalizer_window, config.normalizer_eps)
    state = RolloutState(env.reset(seed=env_seed))

    stats_list, metrics, clock = [], [], []
    macro_total = raw_total = 0
    t0 = time.perf_counter()
    for batch_idx in range(1, config.n_batches + 1):
        batch = collect_rollout(env, nets, config, act_rng, state, normalizer, noise_rng)
        macro_total += batch.macro_steps
        raw_total += batch.raw_steps
        entries, targets, macro_adv = estimate_advantages(batch, config)

        obs = np.array([e.observation for e in entries])
        acts = np.array([e.action for e in entries])
        old_lp = np.array([e.old_log_prob for e in entries])
        A = np.array([e.advantage for e in entries])
        if not np.all(np.isfinite(A)):
            raise TrainingDiverged(f"non-finite advantage at batch {batch_idx}",
                                   _dump(batch_idx, nets, A, math.nan))
        if opt_q is not None:
            q_x = np.concatenate([obs, encode_actions(env, acts)], axis=1)
            q_y = np.array([e.value_target for e in entries])
        if targets is not None:
            v_obs = np.array([r.observation for r in batch.records])
            v_y = np.array(targets)

        p_losses, v_losses, infos, norms = [], [], [], []
        for _ in range(config.epochs):
            for idx in _minibatches(len(entries), config.minibatch_size, upd_rng):
                loss, grad, info = clipped_surrogate_loss(
                    nets.policy, nets.policy_spec, obs[idx], acts[idx], old_lp[idx], A[idx],
                    config.clip_eps, config.entropy_coef)
                if not math.isfinite(loss) or not np.all(np.isfinite(grad)):
                    raise TrainingDiverged(f"non-finite policy loss at batch {batch_idx}",
                                           _dump(batch_idx, nets, A, loss))
                opt_pi.step(nets.policy, grad)
                p_losses.append(loss)
                infos.append(info)
                norms.append(float(np.linalg.norm(grad)))
            if targets is not None:
                for idx in _minibatches(len(v_y), config.minibatch_size, upd_rng):
                    loss, grad = value_loss(nets.value, nets.value_spec, v_obs[idx], v_y[idx])
                    if not math.isfinite(loss):
                        raise TrainingDiverged(f"non-finite value loss at batch {batch_idx}",
                                               _dump(batch_idx, nets, A, loss))
                    opt_v.step(nets.value, grad)
                    v_losses.append(loss)
            if opt_q is not None:
                for idx in _minibatches(len(q_y), config.minibatch_size, upd_rng):
                    _, grad = value_loss(nets.guidance, nets.guidance_spec, q_x[idx], q_y[idx])
                    opt_q.step(nets.guidance, grad)

        st = UpdateStats(
            policy_loss=float(np.mean(p_losses)),
            value_loss=float(np.mean(v_losses)) if v_losses else 0.0,
            adv_mean=float(A.mean()),
            adv_var=float(A.var()),
            ratio_mean=float(np.mean([i["ratio_mean"] for i in infos])),
            clip_fraction=float(np.mean([i["clip_fraction"] for i in infos])),
            entropy=float(np.mean([i["entropy"] for i in infos])),
            grad_norm=float(np.mean(norms)),
            macro_adv_mean=float(np.mean(macro_adv)) if macro_adv else float(A.mean()),
        )
        stats_list.append(st)
        recent = state.recent_returns
        row = {
            "batch": batch_idx,
            "macro_steps": macro_total,
            "raw_steps": raw_total,
            "episodes": state.episodes,
            "mean_return": float(np.mean(recent)) if recent else None,
            **asdict(st),
        }
        metrics.append(row)
        clock.append(time.perf_counter() - t0)
        if checkpoint_dir is not None and config.checkpoint_interval and batch_idx % config.checkpoint_interval == 0:
            save_checkpoint(f"{checkpoint_dir}/policy_{batch_idx:05d}.bin", nets.policy, nets.policy_spec)
            if config.uses_critic:
                save_checkpoint(f"{checkpoint_dir}/value_{batch_idx:05d}.bin", nets.value, nets.value_spec)
        if on_batch is not None and on_batch(row):
            break
    return TrainResult(nets, stats_list, metrics, clock)


def _dump(batch_idx, nets, A, loss) -> dict:
    return {
        "batch": batch_idx,
        "loss": loss,
        "advantage_min": float(np.min(A)),
        "advantage_max": float(np.max(A)),
        "policy_param_absmax": float(np.max(np.abs(nets.policy))),
        "policy_params_finite": bool(np.all(np.isfinite(nets.policy))),
        "value_param_absmax": float(np.max(np.abs(nets.value))),
    }
