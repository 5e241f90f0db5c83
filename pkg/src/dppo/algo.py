"""GAE, the clipped PPO loss, action distillation and the combined update."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .net import ParamStore, PolicyNet, ValueNet, gaussian_logprob_entropy, logprob_grads
from .terrain import ConfigError


@dataclass(frozen=True)
class PPOConfig:
    gamma: float = 0.99
    lam: float = 0.95
    clip: float = 0.2
    c1: float = 0.5
    c2: float = 0.01
    epochs: int = 4
    minibatch: int = 512
    lr: float = 3e-4
    max_grad_norm: float = 1.0
    normalize_advantages: bool = True
    reward_scale: float = 0.05
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        for name in ("gamma", "lam"):
            if not 0 <= getattr(self, name) <= 1:
                raise ConfigError(f"ppo {name} must be in [0, 1]")
        if not self.clip > 0:
            raise ConfigError("ppo clip must be > 0")
        if self.c1 < 0 or self.c2 < 0:
            raise ConfigError("ppo c1 and c2 must be >= 0")
        if self.epochs < 1 or self.minibatch < 1:
            raise ConfigError("ppo epochs and minibatch must be >= 1")
        if not self.lr > 0:
            raise ConfigError("ppo lr must be > 0")


@dataclass(frozen=True)
class DPPOConfig:
    alpha: float = 0.5  # distillation weight
    beta: float = 0.5  # PPO weight

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("dppo alpha and beta must be >= 0")
        if self.alpha == 0 and self.beta == 0:
            raise ConfigError("dppo alpha and beta cannot both be 0")


@dataclass
class RolloutBuffer:
    """Arrays shaped (steps, envs, ...). ``critic_obs`` is None when the
    critic sees the same observation as the actor. Distillation targets come
    from ``teacher_obs`` when set (relabeled per minibatch, so teacher and
    student run on identically shaped batches), else from ``teacher_mean``."""

    obs: np.ndarray
    actions: np.ndarray
    logp: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    dones: np.ndarray
    timeouts: np.ndarray
    terminal_values: np.ndarray
    critic_obs: np.ndarray | None = None
    teacher_mean: np.ndarray | None = None
    teacher_obs: np.ndarray | None = None  # clean observations the frozen teacher labels at update time
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None

    @classmethod
    def allocate(cls, steps, envs, obs_dim, action_dim, separate_critic=False, teacher=False):
        return cls(
            obs=np.zeros((steps, envs, obs_dim)),
            actions=np.zeros((steps, envs, action_dim)),
            logp=np.zeros((steps, envs)),
            rewards=np.zeros((steps, envs)),
            values=np.zeros((steps, envs)),
            dones=np.zeros((steps, envs), dtype=bool),
            timeouts=np.zeros((steps, envs), dtype=bool),
            terminal_values=np.zeros((steps, envs)),
            critic_obs=np.zeros((steps, envs, obs_dim)) if separate_critic else None,
            teacher_mean=np.zeros((steps, envs, action_dim)) if teacher else None,
        )

    @property
    def size(self) -> int:
        return self.rewards.size

    def flat(self, name):
        arr = getattr(self, name)
        if arr is None:
            return None
        return arr.reshape((self.size,) + arr.shape[2:])


def compute_gae(rewards, values, dones, timeouts, bootstrap_value, gamma, lam, terminal_values=None):
    """Generalized advantage estimation over (steps, envs) arrays.

    ``dones`` are failure terminations (no bootstrap). ``timeouts`` cut the
    trace but bootstrap from the value of the state reached at the cutoff:
    ``terminal_values`` when given (auto-reset rollouts), otherwise the next
    row of ``values``.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=bool)
    timeouts = np.asarray(timeouts, dtype=bool)
    steps = rewards.shape[0]
    adv = np.zeros_like(rewards)
    last = np.zeros_like(rewards[0])
    for t in reversed(range(steps)):
        next_v = np.asarray(bootstrap_value, dtype=np.float64) if t == steps - 1 else values[t + 1]
        if terminal_values is not None:
            next_v = np.where(timeouts[t], terminal_values[t], next_v)
        not_done = 1.0 - dones[t]
        delta = rewards[t] + gamma * next_v * not_done - values[t]
        cont = not_done * (1.0 - (timeouts[t] & (terminal_values is not None)))
        last = delta + gamma * lam * cont * last
        adv[t] = last
    return adv, adv + values


@dataclass
class PPOTerms:
    loss: float
    surrogate: float
    value_loss: float
    entropy: float
    clip_frac: float
    approx_kl: float
    d_mean: np.ndarray
    d_log_std: np.ndarray
    d_value: np.ndarray
    finite: bool = True


def surrogate_terms(ratio, adv, clip):
    """Per-sample clipped surrogate and whether the unclipped branch carries
    the gradient."""
    clipped = np.clip(ratio, 1.0 - clip, 1.0 + clip)
    s1 = ratio * adv
    s2 = clipped * adv
    surr = np.minimum(s1, s2)
    active = s1 <= s2
    return surr, active


def ppo_terms(mean, log_std, values, actions, old_logp, advantages, returns, cfg: PPOConfig) -> PPOTerms:
    """Negated clipped-PPO objective and its gradients w.r.t. the policy mean,
    log_std and the value predictions."""
    b = mean.shape[0]
    adv = np.asarray(advantages, dtype=np.float64)
    if cfg.normalize_advantages and b > 1:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    logp, ent = gaussian_logprob_entropy(mean, log_std, actions)
    log_ratio = logp - old_logp
    with np.errstate(over="ignore", invalid="ignore"):
        ratio = np.exp(log_ratio)
    if not np.all(np.isfinite(ratio)):
        z = np.zeros(1)
        return PPOTerms(np.nan, np.nan, np.nan, np.nan, np.nan, np.nan, z, z, z, finite=False)
    surr, active = surrogate_terms(ratio, adv, cfg.clip)
    v_err = values - returns
    value_loss = float(np.mean(v_err * v_err))
    entropy = float(np.mean(ent))
    loss = -float(np.mean(surr)) + cfg.c1 * value_loss - cfg.c2 * entropy

    d_logp = -(adv * ratio * active) / b
    g_mean, g_log_std = logprob_grads(mean, log_std, actions)
    d_mean = d_logp[:, None] * g_mean
    d_log_std = (d_logp[:, None] * g_log_std).sum(axis=0) - cfg.c2
    d_value = 2.0 * cfg.c1 * v_err / b
    clip_frac = float(np.mean(np.abs(ratio - 1.0) > cfg.clip))
    approx_kl = float(np.mean(ratio - 1.0 - log_ratio))
    return PPOTerms(loss, float(np.mean(surr)), value_loss, entropy, clip_frac, approx_kl,
                    d_mean, d_log_std, d_value)


def ppo_loss(batch: dict, policy: PolicyNet, value: ValueNet, old_logp, cfg: PPOConfig):
    """Forward both nets on a minibatch; returns (loss, stats, terms, caches)."""
    mean, log_std, pcache = policy.forward(batch["obs"])
    v, vcache = value.forward(batch["critic_obs"])
    t = ppo_terms(mean, log_std, v, batch["actions"], old_logp, batch["advantages"], batch["returns"], cfg)
    stats = {"clip_frac": t.clip_frac, "approx_kl": t.approx_kl, "entropy": t.entropy,
             "skipped": 0 if t.finite else 1}
    return t.loss, stats, t, (mean, pcache, vcache)


def distillation_loss(student_mean, teacher_mean):
    """Mean over the batch of the squared L2 gap between mean actions.
    Returns (loss, d loss / d student_mean)."""
    diff = np.asarray(student_mean, dtype=np.float64) - np.asarray(teacher_mean, dtype=np.float64)
    b = diff.shape[0]
    return float(np.sum(diff * diff) / b), 2.0 * diff / b


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0

    @classmethod
    def for_store(cls, store: ParamStore) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in store.params.items()},
                   {k: np.zeros_like(p) for k, p in store.params.items()}, 0)


def adam_step(store: ParamStore, state: AdamState, lr, beta1=0.9, beta2=0.999, eps=1e-8) -> None:
    state.t += 1
    c1 = 1.0 - beta1**state.t
    c2 = 1.0 - beta2**state.t
    for k, p in store.params.items():
        g = store.grads[k]
        m, v = state.m[k], state.v[k]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def clip_grad_norm(store: ParamStore, max_norm: float) -> float:
    norm = store.grad_norm()
    if max_norm > 0 and norm > max_norm:
        store.scale_grads(max_norm / (norm + 1e-12))
    return norm


@dataclass
class Optimizers:
    policy: AdamState
    value: AdamState

    @classmethod
    def create(cls, policy: PolicyNet, value: ValueNet) -> "Optimizers":
        return cls(AdamState.for_store(policy.store), AdamState.for_store(value.store))


def _apply(store, state, cfg: PPOConfig) -> float:
    norm = clip_grad_norm(store, cfg.max_grad_norm)
    adam_step(store, state, cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    return norm


def _minibatches(n, size, rng):
    perm = rng.permutation(n)
    return [perm[i:i + size] for i in range(0, n, size)]


def _batch(buf: RolloutBuffer, idx) -> dict:
    obs = buf.flat("obs")[idx]
    critic = buf.flat("critic_obs")
    return {"obs": obs, "critic_obs": obs if critic is None else critic[idx],
            "actions": buf.flat("actions")[idx], "logp": buf.flat("logp")[idx],
            "advantages": buf.flat("advantages")[idx], "returns": buf.flat("returns")[idx],
            "teacher_mean": None if buf.teacher_mean is None else buf.flat("teacher_mean")[idx],
            "teacher_obs": None if buf.teacher_obs is None else buf.flat("teacher_obs")[idx]}


def _labels(mb: dict, teacher: PolicyNet | None) -> np.ndarray:
    if mb["teacher_obs"] is not None and teacher is not None:
        return teacher.forward(mb["teacher_obs"])[0]
    if mb["teacher_mean"] is None:
        raise ValueError("buffer has no teacher labels")
    return mb["teacher_mean"]


def _summary(rows) -> dict:
    keys = ("L_dist", "L_PPO", "value_loss", "clip_frac", "approx_kl", "entropy", "grad_norm")
    ok = [r for r in rows if not r.get("skip")]
    out = {k: float(np.mean([r[k] for r in ok])) if ok else 0.0 for k in keys}
    out["skipped"] = len(rows) - len(ok)
    out["L_total"] = float(np.mean([r["L_total"] for r in ok])) if ok else 0.0
    return out


def ppo_update(buf: RolloutBuffer, policy: PolicyNet, value: ValueNet, opt: Optimizers,
               cfg: PPOConfig, rng) -> dict:
    """Plain PPO optimization phase."""
    rows = []
    for _ in range(cfg.epochs):
        for idx in _minibatches(buf.size, cfg.minibatch, rng):
            mb = _batch(buf, idx)
            policy.store.zero_grad()
            value.store.zero_grad()
            loss, st, t, (mean, pcache, vcache) = ppo_loss(mb, policy, value, mb["logp"], cfg)
            if not t.finite:
                rows.append({"skip": True})
                continue
            policy.backward(pcache, t.d_mean, t.d_log_std)
            value.backward(vcache, t.d_value)
            gn = _apply(policy.store, opt.policy, cfg)
            _apply(value.store, opt.value, cfg)
            rows.append({"L_dist": 0.0, "L_PPO": loss, "L_total": loss, "value_loss": t.value_loss,
                         "clip_frac": t.clip_frac, "approx_kl": t.approx_kl, "entropy": t.entropy,
                         "grad_norm": gn})
    return _summary(rows)


def distill_update(buf: RolloutBuffer, policy: PolicyNet, opt: Optimizers, cfg: PPOConfig, rng,
                   alpha: float = 1.0, teacher: PolicyNet | None = None) -> dict:
    """Pure behavior cloning on teacher labels."""
    if buf.teacher_mean is None and (buf.teacher_obs is None or teacher is None):
        raise ValueError("buffer has no teacher labels")
    rows = []
    for _ in range(cfg.epochs):
        for idx in _minibatches(buf.size, cfg.minibatch, rng):
            mb = _batch(buf, idx)
            policy.store.zero_grad()
            mean, _, pcache = policy.forward(mb["obs"])
            l_dist, d_dist = distillation_loss(mean, _labels(mb, teacher))
            policy.backward(pcache, alpha * d_dist)
            gn = _apply(policy.store, opt.policy, cfg)
            rows.append({"L_dist": l_dist, "L_PPO": 0.0, "L_total": alpha * l_dist, "value_loss": 0.0,
                         "clip_frac": 0.0, "approx_kl": 0.0, "entropy": 0.0, "grad_norm": gn})
    return _summary(rows)


def check_same_architecture(student: PolicyNet, teacher: PolicyNet) -> None:
    s = [(n.split(".", 1)[1], p.shape) for n, p in student.store.params.items()]
    t = [(n.split(".", 1)[1], p.shape) for n, p in teacher.store.params.items()]
    if s != t:
        diff = next(((a, b) for a, b in zip(s, t) if a != b), (len(s), len(t)))
        raise ConfigError(f"teacher/student architecture mismatch at {diff}")


def dppo_update(buf: RolloutBuffer, student: PolicyNet, value: ValueNet, teacher: PolicyNet,
                opt: Optimizers, ppo_cfg: PPOConfig, dppo_cfg: DPPOConfig, rng) -> dict:
    """Combined update: total = alpha * L_dist + beta * L_PPO (minimization form)."""
    check_same_architecture(student, teacher)
    if buf.teacher_mean is None and buf.teacher_obs is None:
        raise ValueError("buffer has no teacher labels")
    alpha, beta = dppo_cfg.alpha, dppo_cfg.beta
    teacher_before = teacher.store.flat()
    rows = []
    for _ in range(ppo_cfg.epochs):
        for idx in _minibatches(buf.size, ppo_cfg.minibatch, rng):
            mb = _batch(buf, idx)
            student.store.zero_grad()
            value.store.zero_grad()
            loss_ppo, st, t, (mean, pcache, vcache) = ppo_loss(mb, student, value, mb["logp"], ppo_cfg)
            if not t.finite:
                rows.append({"skip": True})
                continue
            l_dist, d_dist = distillation_loss(mean, _labels(mb, teacher))
            total = alpha * l_dist + beta * loss_ppo
            student.backward(pcache, alpha * d_dist + beta * t.d_mean, beta * t.d_log_std)
            value.backward(vcache, beta * t.d_value)
            gn = _apply(student.store, opt.policy, ppo_cfg)
            _apply(value.store, opt.value, ppo_cfg)
            rows.append({"L_dist": l_dist, "L_PPO": loss_ppo, "L_total": total,
                         "value_loss": t.value_loss, "clip_frac": t.clip_frac,
                         "approx_kl": t.approx_kl, "entropy": t.entropy, "grad_norm": gn})
    if not np.array_equal(teacher_before, teacher.store.flat()):
        raise RuntimeError("teacher parameters changed during the student update")
    return _summary(rows)
