"""D3QN, A2C and PPO on top of :mod:`lanebench.nn`.

The loss functions take explicit batches and parameter dicts so they can be
tested in isolation; :func:`train` wires them into the usual loops. Every
random draw comes from a seeded stream, so a config plus seed fixes the
learning curve and the final weights bit for bit.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from lanebench import nn
from lanebench.scenarios import make_rng

ALGORITHMS = ("d3qn", "a2c", "ppo")

# seed streams; the scenario streams in lanebench.scenarios use 0 and 1
STREAM_INIT = 10
STREAM_EXPLORE = 11
STREAM_REPLAY = 12
STREAM_EPISODES = 13

_ALGO_DEFAULTS = {
    "d3qn": {"lr": 1e-4, "max_grad_norm": 10.0},
    "a2c": {"lr": 7e-4, "max_grad_norm": 0.5},
    "ppo": {"lr": 2.5e-4, "max_grad_norm": 0.5},
}


class NumericalError(RuntimeError):
    """Training produced a non-finite loss or gradient.

    ``diagnostic`` holds a JSON-serialisable snapshot of the failing update.
    """

    def __init__(self, message: str, diagnostic: dict):
        super().__init__(message)
        self.diagnostic = diagnostic


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters for all three trainers.

    ``lr`` and ``max_grad_norm`` default per algorithm when left as None.
    ``workers`` and ``n_steps`` shape the A2C rollouts; PPO uses
    ``workers`` and ``ppo_n_steps``.
    """

    algo: str = "ppo"
    total_steps: int = 100_000
    seed: int = 0
    gamma: float = 0.99
    lr: Optional[float] = None
    max_grad_norm: Optional[float] = None
    # D3QN
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_fraction: float = 0.3
    target_sync: int = 1000
    batch_size: int = 32
    buffer_capacity: int = 50_000
    learning_starts: int = 1000
    train_freq: int = 4
    # A2C
    workers: int = 8
    n_steps: int = 5
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    # PPO
    clip: float = 0.2
    epochs: int = 4
    minibatch_size: int = 256
    ppo_n_steps: int = 128
    gae: bool = False
    gae_lambda: float = 0.95
    # bookkeeping
    hidden: Tuple[int, ...] = (64,)
    smoothing_window: int = 20
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.algo not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algo!r}; expected one of {ALGORITHMS}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if not self.clip > 0:
            raise ValueError("clip must be positive")
        if self.total_steps < 0:
            raise ValueError("total_steps must be >= 0")
        if self.lr is not None and not self.lr > 0:
            raise ValueError("lr must be positive")
        for name in ("batch_size", "buffer_capacity", "target_sync", "train_freq", "workers",
                     "n_steps", "epochs", "minibatch_size", "ppo_n_steps", "smoothing_window"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0.0 <= self.eps_end <= self.eps_start <= 1.0 or not 0.0 < self.eps_fraction <= 1.0:
            raise ValueError("epsilon schedule must satisfy 0 <= eps_end <= eps_start <= 1, 0 < fraction <= 1")
        if not 0.0 <= self.gae_lambda <= 1.0:
            raise ValueError("gae_lambda must lie in [0, 1]")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    @property
    def learning_rate(self) -> float:
        return self.lr if self.lr is not None else _ALGO_DEFAULTS[self.algo]["lr"]

    @property
    def grad_clip(self) -> Optional[float]:
        return self.max_grad_norm if self.max_grad_norm is not None else _ALGO_DEFAULTS[self.algo]["max_grad_norm"]

    def epsilon(self, step: int) -> float:
        """Linear decay from eps_start to eps_end over the first eps_fraction of training."""
        span = max(1.0, self.eps_fraction * self.total_steps)
        frac = min(1.0, step / span)
        return self.eps_start + frac * (self.eps_end - self.eps_start)


# -- networks -----------------------------------------------------------------

def head_sizes(algo: str, n_actions: int) -> Dict[str, int]:
    if algo == "d3qn":
        return {"value": 1, "advantage": n_actions}
    return {"policy": n_actions, "value": 1}


def network_for(algo: str, observation_shape, n_actions: int, hidden=(64,)) -> nn.NetworkSpec:
    """Default conv network for image observations, a small MLP for flat ones."""
    heads = head_sizes(algo, n_actions)
    if len(observation_shape) == 3:
        return nn.conv_network(heads, tuple(observation_shape))
    if len(observation_shape) == 1:
        return nn.mlp_network(heads, observation_shape[0], hidden)
    raise ValueError(f"unsupported observation shape {observation_shape}")


def dueling_q(outputs: Dict[str, np.ndarray]) -> np.ndarray:
    """``Q = V + (A - mean_a A)``."""
    adv = outputs["advantage"]
    return outputs["value"] + adv - adv.mean(axis=1, keepdims=True)


def q_values(spec, params, obs) -> np.ndarray:
    return dueling_q(nn.forward(spec, params, obs)[0])


def policy_values(spec, params, obs) -> Tuple[np.ndarray, np.ndarray]:
    """``(logits, values)`` for actor-critic networks."""
    out, _ = nn.forward(spec, params, obs)
    return out["policy"], out["value"][:, 0]


def entropy(logits: np.ndarray) -> np.ndarray:
    logp = nn.log_softmax(logits)
    return -(np.exp(logp) * logp).sum(axis=1)


def _entropy_grad(logits):
    # dH/dz_j = -pi_j (log pi_j + H)
    logp = nn.log_softmax(logits)
    pi = np.exp(logp)
    h = -(pi * logp).sum(axis=1, keepdims=True)
    return -pi * (logp + h)


def _one_hot(actions, n):
    out = np.zeros((len(actions), n))
    out[np.arange(len(actions)), actions] = 1.0
    return out


# -- storage ----------------------------------------------------------------------

@dataclass(frozen=True)
class TransitionBatch:
    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_obs: np.ndarray
    dones: np.ndarray

    def __len__(self):
        return len(self.actions)


class ReplayBuffer:
    """Fixed-capacity FIFO of transitions with uniform sampling."""

    def __init__(self, capacity: int, obs_shape, obs_dtype=np.uint8):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.obs = np.zeros((capacity,) + tuple(obs_shape), dtype=obs_dtype)
        self.next_obs = np.zeros_like(self.obs)
        self.actions = np.zeros(capacity, dtype=np.int64)
        self.rewards = np.zeros(capacity)
        self.dones = np.zeros(capacity, dtype=bool)
        self.size = 0
        self.pos = 0

    def __len__(self):
        return self.size

    def add(self, obs, action, reward, next_obs, done):
        i = self.pos
        self.obs[i] = obs
        self.next_obs[i] = next_obs
        self.actions[i] = action
        self.rewards[i] = reward
        self.dones[i] = done
        self.pos = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample_indices(self, batch_size: int, rng: np.random.Generator) -> np.ndarray:
        if self.size == 0:
            raise ValueError("cannot sample from an empty buffer")
        return rng.integers(0, self.size, size=batch_size)

    def sample(self, batch_size: int, rng: np.random.Generator) -> TransitionBatch:
        idx = self.sample_indices(batch_size, rng)
        return TransitionBatch(self.obs[idx], self.actions[idx], self.rewards[idx],
                               self.next_obs[idx], self.dones[idx])


@dataclass(frozen=True)
class RolloutBatch:
    """``T`` steps from ``K`` workers; arrays are time-major ``(T, K, ...)``.

    ``bootstrap_values`` are the value estimates of the observations that
    follow the last step of each worker.
    """

    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    log_probs: np.ndarray
    dones: np.ndarray
    bootstrap_values: np.ndarray

    @property
    def n_steps(self) -> int:
        return self.actions.shape[0]

    @property
    def n_workers(self) -> int:
        return self.actions.shape[1]

    def next_values(self) -> np.ndarray:
        """``V(s')`` for every step, zero where the step ended an episode."""
        nxt = np.concatenate([self.values[1:], self.bootstrap_values[None]], axis=0)
        return np.where(self.dones, 0.0, nxt)

    def flat(self, name: str) -> np.ndarray:
        a = getattr(self, name)
        return a.reshape((-1,) + a.shape[2:])


def td_advantages(batch: RolloutBatch, gamma: float) -> Tuple[np.ndarray, np.ndarray]:
    """One-step ``(advantage, target)`` with ``target = r + gamma V(s')``."""
    target = batch.rewards + gamma * batch.next_values()
    return target - batch.values, target


def discounted_returns(batch: RolloutBatch, gamma: float) -> np.ndarray:
    """n-step returns bootstrapped from ``bootstrap_values``, cut at episode ends."""
    out = np.zeros_like(batch.rewards)
    running = batch.bootstrap_values.astype(float).copy()
    for t in range(batch.n_steps - 1, -1, -1):
        running = batch.rewards[t] + gamma * np.where(batch.dones[t], 0.0, running)
        out[t] = running
    return out


def gae_advantages(batch: RolloutBatch, gamma: float, lam: float) -> np.ndarray:
    delta, _ = td_advantages(batch, gamma)
    out = np.zeros_like(delta)
    running = np.zeros(batch.n_workers)
    for t in range(batch.n_steps - 1, -1, -1):
        running = delta[t] + gamma * lam * np.where(batch.dones[t], 0.0, running)
        out[t] = running
    return out


# -- D3QN ----------------------------------------------------------------------------

def d3qn_target(batch: TransitionBatch, spec, params, target_params, gamma: float) -> np.ndarray:
    """Double-DQN targets: the online net picks ``a*``, the target net scores it."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    rewards = np.asarray(batch.rewards, dtype=float)
    if gamma == 0.0:
        return rewards.copy()
    a_star = q_values(spec, params, batch.next_obs).argmax(axis=1)
    q_next = q_values(spec, target_params, batch.next_obs)[np.arange(len(batch)), a_star]
    return rewards + gamma * np.where(batch.dones, 0.0, q_next)


def d3qn_loss(batch: TransitionBatch, spec, params, target_params, gamma: float):
    """``mean(0.5 (y - Q(s, a))**2)`` and its gradient; targets are constants."""
    y = d3qn_target(batch, spec, params, target_params, gamma)
    out, cache = nn.forward(spec, params, batch.obs)
    q = dueling_q(out)
    n, k = q.shape
    rows = np.arange(n)
    td = q[rows, batch.actions] - y
    loss = float(0.5 * np.mean(td * td))
    dq = td / n
    grad_adv = dq[:, None] * (_one_hot(batch.actions, k) - 1.0 / k)
    grads = nn.backward(spec, params, cache, {"value": dq[:, None], "advantage": grad_adv})
    return loss, grads, {"td_abs_mean": float(np.mean(np.abs(td))), "q_mean": float(q.mean())}


# -- actor-critic losses --------------------------------------------------------------

def actor_critic_grads(spec, params, obs, actions, policy_weight, value_target, value_coef,
                       entropy_coef):
    """Shared backward pass for A2C: ``-policy_weight * log pi(a|s)`` plus value
    regression and an entropy bonus, all averaged over the batch."""
    out, cache = nn.forward(spec, params, obs)
    logits, v = out["policy"], out["value"][:, 0]
    n, k = logits.shape
    logp = nn.log_softmax(logits)
    pi = np.exp(logp)
    logp_a = logp[np.arange(n), actions]
    ent = -(pi * logp).sum(axis=1)
    pg_loss = -float(np.mean(policy_weight * logp_a))
    v_err = v - value_target
    v_loss = float(0.5 * np.mean(v_err * v_err))
    loss = pg_loss + value_coef * v_loss - entropy_coef * float(np.mean(ent))
    d_logits = -(policy_weight[:, None] * (_one_hot(actions, k) - pi)) / n
    d_logits -= entropy_coef * _entropy_grad(logits) / n
    d_value = (value_coef * v_err / n)[:, None]
    grads = nn.backward(spec, params, cache, {"policy": d_logits, "value": d_value})
    info = {"policy_loss": pg_loss, "value_loss": v_loss, "entropy": float(np.mean(ent))}
    return loss, grads, info


def a2c_update(batch: RolloutBatch, spec, params, opt_state, rule, gamma: float,
               value_coef: float = 0.5, entropy_coef: float = 0.01, max_grad_norm=None):
    """One synchronous update over every worker's rollout.

    Returns ``(params, opt_state, diagnostics)``.
    """
    adv, target = td_advantages(batch, gamma)
    loss, grads, info = actor_critic_grads(
        spec, params, batch.flat("obs"), batch.flat("actions"), adv.reshape(-1), target.reshape(-1),
        value_coef, entropy_coef)
    _check_finite("a2c", loss, grads, params)
    grads, norm = nn.clip_by_global_norm(grads, max_grad_norm)
    params, opt_state = nn.apply_update(params, grads, opt_state, rule)
    info.update(loss=loss, grad_norm=norm, advantage_mean=float(adv.mean()))
    return params, opt_state, info


def clipped_surrogate(ratio, advantage, eps: float):
    """Per-sample ``min(ratio * A, clip(ratio, 1 - eps, 1 + eps) * A)``."""
    ratio = np.asarray(ratio, dtype=float)
    advantage = np.asarray(advantage, dtype=float)
    return np.minimum(ratio * advantage, np.clip(ratio, 1.0 - eps, 1.0 + eps) * advantage)


@dataclass(frozen=True)
class PPOBatch:
    obs: np.ndarray
    actions: np.ndarray
    old_log_probs: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray

    def __len__(self):
        return len(self.actions)

    def take(self, idx) -> "PPOBatch":
        return PPOBatch(self.obs[idx], self.actions[idx], self.old_log_probs[idx],
                        self.advantages[idx], self.returns[idx])


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    std = adv.std()
    return (adv - adv.mean()) / (std + 1e-8)


def ppo_loss(batch: PPOBatch, spec, params, eps: float, value_coef: float = 0.5,
             entropy_coef: float = 0.01):
    """Negated clipped surrogate plus value and entropy terms; returns
    ``(loss, grads, diagnostics)``. Advantages are used as given."""
    out, cache = nn.forward(spec, params, batch.obs)
    logits, v = out["policy"], out["value"][:, 0]
    n, k = logits.shape
    logp = nn.log_softmax(logits)
    pi = np.exp(logp)
    logp_a = logp[np.arange(n), batch.actions]
    ratio = np.exp(logp_a - batch.old_log_probs)
    adv = batch.advantages
    unclipped = ratio * adv
    surrogate = clipped_surrogate(ratio, adv, eps)
    ent = -(pi * logp).sum(axis=1)
    v_err = v - batch.returns
    v_loss = float(0.5 * np.mean(v_err * v_err))
    loss = -float(np.mean(surrogate)) + value_coef * v_loss - entropy_coef * float(np.mean(ent))
    # gradient flows only where the unclipped term is the minimum
    active = unclipped <= np.clip(ratio, 1.0 - eps, 1.0 + eps) * adv
    d_logp = np.where(active, unclipped, 0.0)
    d_logits = -(d_logp[:, None] * (_one_hot(batch.actions, k) - pi)) / n
    d_logits -= entropy_coef * _entropy_grad(logits) / n
    d_value = (value_coef * v_err / n)[:, None]
    grads = nn.backward(spec, params, cache, {"policy": d_logits, "value": d_value})
    info = {"surrogate": float(np.mean(surrogate)), "value_loss": v_loss,
            "entropy": float(np.mean(ent)), "clip_fraction": float(np.mean(np.abs(ratio - 1.0) > eps)),
            "approx_kl": float(np.mean(batch.old_log_probs - logp_a))}
    return loss, grads, info


def _check_finite(algo, loss, grads, params, step=None, extra=None):
    if math.isfinite(loss) and nn.all_finite(grads):
        return
    diag = {"algo": algo, "step": step, "loss": repr(loss),
            "nonfinite_grads": sorted(k for k, g in grads.items() if not np.isfinite(g).all()),
            "param_abs_max": {k: float(np.nanmax(np.abs(p))) for k, p in params.items()}}
    if extra:
        diag.update(extra)
    raise NumericalError(f"{algo}: non-finite loss or gradient at step {step}", diag)


# -- learning curve ------------------------------------------------------------------

@dataclass
class LearningCurve:
    """One row per finished episode: env steps so far, raw and smoothed return.

    The smoothed value is the mean over the last ``window`` episodes.
    """

    window: int = 20
    steps: List[int] = field(default_factory=list)
    raw: List[float] = field(default_factory=list)
    smoothed: List[float] = field(default_factory=list)

    def add(self, step: int, episode_return: float):
        self.steps.append(int(step))
        self.raw.append(float(episode_return))
        self.smoothed.append(float(np.mean(self.raw[-self.window:])))

    def __len__(self):
        return len(self.steps)

    def first_full_window(self) -> Optional[float]:
        """Smoothed value once the window first fills (None if it never does)."""
        if len(self.raw) < self.window:
            return None
        return self.smoothed[self.window - 1]

    def final(self) -> Optional[float]:
        return self.smoothed[-1] if self.smoothed else None

    def to_text(self) -> str:
        lines = ["step\traw_return\tsmoothed_return"]
        lines += [f"{s}\t{r!r}\t{m!r}" for s, r, m in zip(self.steps, self.raw, self.smoothed)]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, window: int = 20) -> "LearningCurve":
        curve = cls(window)
        for line in text.strip().splitlines()[1:]:
            s, r, m = line.split("\t")
            curve.steps.append(int(s))
            curve.raw.append(float(r))
            curve.smoothed.append(float(m))
        return curve


@dataclass
class TrainResult:
    spec: nn.NetworkSpec
    params: nn.Params
    curve: LearningCurve
    config: TrainConfig
    updates: int = 0

    def meta(self) -> dict:
        return {"algo": self.config.algo, "total_steps": self.config.total_steps,
                "seed": self.config.seed, "updates": self.updates}


# -- training loops --------------------------------------------------------------------

def _reward(outcome) -> float:
    r = outcome.reward
    return float(getattr(r, "total", r))


def _sample_actions(logits, rng):
    pi = nn.softmax(logits)
    cdf = np.cumsum(pi, axis=1)
    cdf[:, -1] = 1.0
    u = rng.random(len(pi))
    return (u[:, None] < cdf).argmax(axis=1), np.log(np.maximum(pi, 1e-300))


class _Episodes:
    """Hands out episode seeds and tracks running returns per worker."""

    def __init__(self, seed, n_workers, curve):
        self.rng = make_rng(seed, STREAM_EPISODES)
        self.returns = np.zeros(n_workers)
        self.curve = curve

    def next_seed(self) -> int:
        return int(self.rng.integers(0, 2**31 - 1))

    def record(self, k, reward, done, step):
        self.returns[k] += reward
        if done:
            self.curve.add(step, self.returns[k])
            self.returns[k] = 0.0


def train(algo: str, env_factory: Callable[[int], object], cfg: TrainConfig,
          spec: Optional[nn.NetworkSpec] = None,
          on_checkpoint: Optional[Callable[[int, nn.NetworkSpec, nn.Params], None]] = None,
          progress: Optional[Callable[[int, dict], None]] = None) -> TrainResult:
    """Train ``algo`` for ``cfg.total_steps`` environment steps.

    Parameters
    ----------
    env_factory : called with a worker index; must return an env with
        ``reset(seed)``, ``step(action)``, ``n_actions`` and ``observation_shape``.
    spec : network to train; defaults to :func:`network_for`.
    on_checkpoint : called with ``(step, spec, params)`` every
        ``cfg.checkpoint_every`` env steps.
    """
    if algo != cfg.algo:
        cfg = replace(cfg, algo=algo)
    probe = env_factory(0)
    if spec is None:
        spec = network_for(algo, probe.observation_shape, probe.n_actions, cfg.hidden)
    params = nn.init_params(spec, make_rng(cfg.seed, STREAM_INIT))
    curve = LearningCurve(cfg.smoothing_window)
    result = TrainResult(spec, params, curve, cfg)
    if cfg.total_steps == 0:
        return result
    loop = {"d3qn": _train_d3qn, "a2c": _train_a2c, "ppo": _train_ppo}[algo]
    return loop(probe, env_factory, cfg, result, on_checkpoint, progress)


def _maybe_checkpoint(cfg, before, after, result, on_checkpoint):
    if on_checkpoint is None or cfg.checkpoint_every <= 0:
        return
    if after // cfg.checkpoint_every > before // cfg.checkpoint_every:
        on_checkpoint(after, result.spec, result.params)


def _train_d3qn(env, env_factory, cfg, result, on_checkpoint, progress):
    spec = result.spec
    rule = nn.Adam(cfg.learning_rate)
    opt = nn.init_optimizer(rule, result.params)
    target = result.params
    explore = make_rng(cfg.seed, STREAM_EXPLORE)
    replay_rng = make_rng(cfg.seed, STREAM_REPLAY)
    episodes = _Episodes(cfg.seed, 1, result.curve)
    obs = env.reset(episodes.next_seed())
    buffer = ReplayBuffer(cfg.buffer_capacity, np.shape(obs), np.asarray(obs).dtype)
    n_actions = env.n_actions
    for step in range(cfg.total_steps):
        # both draws every step keep the stream independent of the policy
        u = explore.random()
        rand_a = int(explore.integers(n_actions))
        if u < cfg.epsilon(step):
            a = rand_a
        else:
            a = int(q_values(spec, result.params, np.asarray(obs)[None]).argmax())
        out = env.step(a)
        r = _reward(out)
        buffer.add(obs, a, r, out.observation, out.done)
        episodes.record(0, r, out.done, step + 1)
        obs = env.reset(episodes.next_seed()) if out.done else out.observation

        if step + 1 >= cfg.learning_starts and (step + 1) % cfg.train_freq == 0:
            batch = buffer.sample(cfg.batch_size, replay_rng)
            loss, grads, info = d3qn_loss(batch, spec, result.params, target, cfg.gamma)
            _check_finite("d3qn", loss, grads, result.params, step + 1)
            grads, norm = nn.clip_by_global_norm(grads, cfg.grad_clip)
            result.params, opt = nn.apply_update(result.params, grads, opt, rule)
            result.updates += 1
            if result.updates % cfg.target_sync == 0:
                target = result.params
            if progress is not None:
                progress(step + 1, dict(info, loss=loss, grad_norm=norm))
        _maybe_checkpoint(cfg, step, step + 1, result, on_checkpoint)
    return result


def _collect(envs, obs, spec, params, n_steps, rng, episodes, step0):
    """Run every worker for ``n_steps``; returns the rollout and the new observations."""
    k = len(envs)
    o_buf, a_buf, r_buf, v_buf, lp_buf, d_buf = [], [], [], [], [], []
    step = step0
    for _ in range(n_steps):
        batch_obs = np.stack(obs)
        logits, values = policy_values(spec, params, batch_obs)
        actions, logp = _sample_actions(logits, rng)
        rewards = np.zeros(k)
        dones = np.zeros(k, dtype=bool)
        for i, env in enumerate(envs):
            out = env.step(int(actions[i]))
            step += 1
            rewards[i] = _reward(out)
            dones[i] = out.done
            episodes.record(i, rewards[i], out.done, step)
            obs[i] = env.reset(episodes.next_seed()) if out.done else out.observation
        o_buf.append(batch_obs)
        a_buf.append(actions)
        r_buf.append(rewards)
        v_buf.append(values)
        lp_buf.append(logp[np.arange(k), actions])
        d_buf.append(dones)
    _, boot = policy_values(spec, params, np.stack(obs))
    batch = RolloutBatch(np.stack(o_buf), np.stack(a_buf), np.stack(r_buf), np.stack(v_buf),
                         np.stack(lp_buf), np.stack(d_buf), boot)
    return batch, step


def _start_workers(env, env_factory, cfg, episodes):
    envs = [env] + [env_factory(i) for i in range(1, cfg.workers)]
    obs = [e.reset(episodes.next_seed()) for e in envs]
    return envs, obs


def _train_a2c(env, env_factory, cfg, result, on_checkpoint, progress):
    rule = nn.Adam(cfg.learning_rate)
    opt = nn.init_optimizer(rule, result.params)
    rng = make_rng(cfg.seed, STREAM_EXPLORE)
    episodes = _Episodes(cfg.seed, cfg.workers, result.curve)
    envs, obs = _start_workers(env, env_factory, cfg, episodes)
    step = 0
    while True:
        t = min(cfg.n_steps, (cfg.total_steps - step) // cfg.workers)
        if t < 1:
            break
        batch, new_step = _collect(envs, obs, result.spec, result.params, t, rng, episodes, step)
        result.params, opt, info = a2c_update(batch, result.spec, result.params, opt, rule, cfg.gamma,
                                              cfg.value_coef, cfg.entropy_coef, cfg.grad_clip)
        result.updates += 1
        if progress is not None:
            progress(new_step, info)
        _maybe_checkpoint(cfg, step, new_step, result, on_checkpoint)
        step = new_step
    return result


def _train_ppo(env, env_factory, cfg, result, on_checkpoint, progress):
    spec = result.spec
    rule = nn.Adam(cfg.learning_rate)
    opt = nn.init_optimizer(rule, result.params)
    rng = make_rng(cfg.seed, STREAM_EXPLORE)
    shuffle = make_rng(cfg.seed, STREAM_REPLAY)
    episodes = _Episodes(cfg.seed, cfg.workers, result.curve)
    envs, obs = _start_workers(env, env_factory, cfg, episodes)
    step = 0
    while True:
        t = min(cfg.ppo_n_steps, (cfg.total_steps - step) // cfg.workers)
        if t < 1:
            break
        batch, new_step = _collect(envs, obs, spec, result.params, t, rng, episodes, step)
        if cfg.gae:
            adv = gae_advantages(batch, cfg.gamma, cfg.gae_lambda)
            returns = adv + batch.values
        else:
            returns = discounted_returns(batch, cfg.gamma)
            adv = returns - batch.values
        data = PPOBatch(batch.flat("obs"), batch.flat("actions"), batch.flat("log_probs"),
                        normalize_advantages(adv.reshape(-1)), returns.reshape(-1))
        n = len(data)
        for _ in range(cfg.epochs):
            order = shuffle.permutation(n)
            for lo in range(0, n, cfg.minibatch_size):
                mb = data.take(order[lo:lo + cfg.minibatch_size])
                loss, grads, info = ppo_loss(mb, spec, result.params, cfg.clip, cfg.value_coef,
                                             cfg.entropy_coef)
                _check_finite("ppo", loss, grads, result.params, new_step)
                grads, norm = nn.clip_by_global_norm(grads, cfg.grad_clip)
                result.params, opt = nn.apply_update(result.params, grads, opt, rule)
                result.updates += 1
        if progress is not None:
            progress(new_step, dict(info, loss=loss, grad_norm=norm))
        _maybe_checkpoint(cfg, step, new_step, result, on_checkpoint)
        step = new_step
    return result


# -- policies ------------------------------------------------------------------------

class NetworkPolicy:
    """Greedy policy from a trained network: argmax Q for D3QN, argmax logits otherwise."""

    uses_observation = True

    def __init__(self, spec: nn.NetworkSpec, params: nn.Params, algo: str):
        if algo not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {algo!r}")
        nn.check_params(spec, params)
        self.spec = spec
        self.params = params
        self.algo = algo

    @classmethod
    def from_checkpoint(cls, path) -> "NetworkPolicy":
        spec, params, meta = nn.load_checkpoint(path)
        return cls(spec, params, meta.get("algo", "ppo"))

    def reset(self, instance=None):
        pass

    def action_scores(self, observation) -> np.ndarray:
        obs = np.asarray(observation)[None]
        if self.algo == "d3qn":
            return q_values(self.spec, self.params, obs)[0]
        return policy_values(self.spec, self.params, obs)[0][0]

    def __call__(self, world=None, observation=None) -> int:
        return int(np.argmax(self.action_scores(observation)))


def greedy_table(policy: NetworkPolicy, observations: Sequence[np.ndarray]) -> np.ndarray:
    return np.array([policy(None, o) for o in observations])


def random_policy_return(env_factory, n_episodes: int, seed: int) -> float:
    """Mean episodic return of the uniform random policy."""
    rng = make_rng(seed, STREAM_EXPLORE)
    env = env_factory(0)
    seeds = make_rng(seed, STREAM_EPISODES)
    total = 0.0
    for _ in range(n_episodes):
        env.reset(int(seeds.integers(0, 2**31 - 1)))
        done = False
        while not done:
            out = env.step(int(rng.integers(env.n_actions)))
            total += _reward(out)
            done = out.done
    return total / n_episodes


def write_diagnostic(path: str, err: NumericalError):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w") as fh:
        json.dump(err.diagnostic, fh, indent=2, sort_keys=True)


def config_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d["hidden"] = list(cfg.hidden)
    return d
