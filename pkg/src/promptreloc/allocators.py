"""Allocation policies: PPO actor-critic, Thompson-sampling bandit, naive joint RL.

All allocators share ``choose(state, rng) -> (action, log_prob)`` and
``observe(transition)``.  Actions are 1-based block numbers, except for the
naive joint policy whose action indexes the L*L (source, target) grid.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tensor
from .prompts import Distribution, IdlenessReport


# ---------------------------------------------------------------------------
# state / transition
# ---------------------------------------------------------------------------

@dataclass
class PolicyState:
    block_scores: np.ndarray
    block_counts: np.ndarray
    pruned_onehot: np.ndarray
    encoded: np.ndarray
    mask: np.ndarray | None = None     # allowed actions, None = all


def encode_state(report: IdlenessReport, dist: Distribution, source_block: int) -> PolicyState:
    """[per-block idleness | counts of D- / N | one-hot of the source block], 3L long."""
    L = dist.num_blocks
    if report.per_block.shape != (L,) or report.per_prompt.shape != (len(dist),):
        raise ContractError("idleness report does not match the distribution")
    if not 1 <= source_block <= L:
        raise ContractError(f"source block {source_block} outside [1, {L}]")
    scores = np.asarray(report.per_block, dtype=np.float64).copy()
    counts = dist.counts()
    onehot = np.zeros(L)
    onehot[source_block - 1] = 1.0
    enc = np.concatenate([scores, counts / len(dist), onehot])
    return PolicyState(scores, counts, onehot, enc)


def encode_joint_state(report: IdlenessReport, dist: Distribution) -> PolicyState:
    """State for the naive joint policy: per-block idleness and counts of D (2L).

    Source blocks without prompts are masked out of the L*L action grid.
    """
    L = dist.num_blocks
    counts = dist.counts()
    enc = np.concatenate([np.asarray(report.per_block, dtype=np.float64), counts / len(dist)])
    mask = np.repeat(counts > 0, L)
    return PolicyState(enc[:L].copy(), counts, np.zeros(L), enc, mask)


def encode_count_state(dist: Distribution, cap: int) -> PolicyState:
    """State for the adding policy: the distribution alone, counts / cap."""
    counts = dist.counts()
    enc = counts / max(cap, 1)
    return PolicyState(np.zeros(dist.num_blocks), counts, np.zeros(dist.num_blocks), enc)


@dataclass
class Transition:
    state: PolicyState
    action: int          # 1-based
    log_prob: float
    reward: float
    next_state: PolicyState | None
    value_estimate: float = 0.0
    terminal: bool = False

    def __post_init__(self):
        if self.action < 1:
            raise ContractError("actions are 1-based")
        if self.log_prob > 0:
            raise ContractError("log_prob must be <= 0")


@dataclass
class PpoConfig:
    actor_lr: float = 3e-4
    critic_lr: float = 1e-3
    gamma: float = 1.0
    clip_eps: float = 0.2
    hidden_units: int = 64
    hidden_layers: int = 2
    update_epochs: int = 10
    minibatch: int = 0      # 0 = whole batch

    def __post_init__(self):
        if not 0.0 < self.clip_eps < 1.0:
            raise ContractError("clip_eps must lie in (0, 1)")
        if not 0.0 <= self.gamma <= 1.0:
            raise ContractError("gamma must lie in [0, 1]")
        if self.update_epochs < 1 or self.hidden_units < 1 or self.hidden_layers < 1 or self.minibatch < 0:
            raise ContractError("update_epochs, hidden_units and hidden_layers must be positive")
        if self.actor_lr <= 0 or self.critic_lr <= 0:
            raise ContractError("learning rates must be positive")


# ---------------------------------------------------------------------------
# networks
# ---------------------------------------------------------------------------

class Mlp:
    """tanh MLP, Xavier-uniform weights and zero biases."""

    def __init__(self, sizes: list[int], rng: np.random.Generator):
        self.sizes = list(sizes)
        self.params: list[Tensor] = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            r = np.sqrt(6.0 / (fan_in + fan_out))
            self.params.append(Tensor(rng.uniform(-r, r, (fan_in, fan_out)), requires_grad=True))
            self.params.append(Tensor(np.zeros(fan_out), requires_grad=True))

    def __call__(self, x) -> Tensor:
        h = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
        n = len(self.params) // 2
        for i in range(n):
            h = h @ self.params[2 * i] + self.params[2 * i + 1]
            if i < n - 1:
                h = h.tanh()
        return h

    def num_params(self) -> int:
        return sum(p.data.size for p in self.params)

    def to_arrays(self, prefix: str) -> dict[str, np.ndarray]:
        return {f"{prefix}.{i}": p.data.copy() for i, p in enumerate(self.params)}

    def load_arrays(self, arrays: dict, prefix: str) -> None:
        for i, p in enumerate(self.params):
            a = np.asarray(arrays[f"{prefix}.{i}"], dtype=np.float64)
            if a.shape != p.data.shape:
                raise ContractError(f"{prefix}.{i}: shape {a.shape} != {p.data.shape}")
            p.data = a.copy()


def mlp_param_count(sizes: list[int]) -> int:
    return sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))


def policy_param_count(num_blocks: int, hidden: int = 64, layers: int = 2) -> int:
    """Actor (3L -> h.. -> L) plus critic (3L -> h.. -> 1)."""
    s = 3 * num_blocks
    body = [s] + [hidden] * layers
    return mlp_param_count(body + [num_blocks]) + mlp_param_count(body + [1])


def _masked_logits(logits: Tensor, mask) -> Tensor:
    if mask is None:
        return logits
    m = np.asarray(mask, dtype=bool)
    if not m.any():
        raise ContractError("every action is masked")
    return logits + Tensor(np.where(m, 0.0, -1e30))


def _set_grads(params, grads) -> None:
    for p in params:
        p.grad = grads.get(p)


class PpoAgent:
    """Clipped-surrogate PPO over a categorical action head."""

    def __init__(self, state_dim: int, num_actions: int, cfg: PpoConfig | None = None,
                 rng: np.random.Generator | None = None):
        self.cfg = cfg or PpoConfig()
        rng = rng if rng is not None else np.random.default_rng(0)
        hid = [self.cfg.hidden_units] * self.cfg.hidden_layers
        self.state_dim, self.num_actions = state_dim, num_actions
        self.actor = Mlp([state_dim] + hid + [num_actions], rng)
        self.critic = Mlp([state_dim] + hid + [1], rng)
        self.actor_opt = ad.Adam(self.actor.params, self.cfg.actor_lr)
        self.critic_opt = ad.Adam(self.critic.params, self.cfg.critic_lr)

    def num_params(self) -> int:
        return self.actor.num_params() + self.critic.num_params()

    def probs(self, state: PolicyState) -> np.ndarray:
        with ad.no_grad():
            z = _masked_logits(self.actor(state.encoded[None]), state.mask)
            return ad.softmax(z, axis=-1).data[0]

    def value(self, state: PolicyState | None) -> float:
        if state is None:
            return 0.0
        with ad.no_grad():
            return float(self.critic(state.encoded[None]).data[0, 0])

    def sample_action(self, state: PolicyState, rng: np.random.Generator) -> tuple[int, float]:
        p = self.probs(state)
        a = int(rng.choice(p.size, p=p / p.sum()))
        return a + 1, float(np.log(p[a]))

    # -- update ---------------------------------------------------------
    def targets(self, batch: list[Transition]) -> tuple[np.ndarray, np.ndarray]:
        """Single-step targets r + gamma V(s') and advantages target - V(s)."""
        g = self.cfg.gamma
        tgt = np.array([t.reward + (0.0 if t.terminal else g * self.value(t.next_state)) for t in batch])
        adv = tgt - np.array([self.value(t.state) for t in batch])
        return tgt, adv

    def surrogate(self, batch: list[Transition], adv: np.ndarray) -> Tensor:
        """Mean over the batch of min(ratio*A, clip(ratio, 1-eps, 1+eps)*A)."""
        eps = self.cfg.clip_eps
        S = np.stack([t.state.encoded for t in batch])
        z = self.actor(S)
        masks = [t.state.mask for t in batch]
        if any(m is not None for m in masks):
            M = np.stack([np.ones(self.num_actions, bool) if m is None else np.asarray(m, bool) for m in masks])
            z = _masked_logits(z, M)
        logp = ad.log_softmax(z, axis=-1)
        idx = np.array([t.action - 1 for t in batch])
        onehot = np.zeros((len(batch), self.num_actions))
        onehot[np.arange(len(batch)), idx] = 1.0
        lp = (logp * onehot).sum(axis=-1)
        ratio = (lp - Tensor(np.array([t.log_prob for t in batch]))).exp()
        A = Tensor(np.asarray(adv, dtype=np.float64))
        return ad.minimum(ratio * A, ratio.clip(1.0 - eps, 1.0 + eps) * A).mean()

    def update(self, batch: list[Transition]) -> dict:
        if not batch:
            raise ContractError("ppo_update needs at least one transition")
        tgt, adv = self.targets(batch)
        for t, v in zip(batch, tgt - adv):
            t.value_estimate = float(v)
        n = len(batch)
        mb = self.cfg.minibatch or n
        info = {}
        for _ in range(self.cfg.update_epochs):
            for lo in range(0, n, mb):
                sl = slice(lo, lo + mb)
                sub = batch[sl]
                obj = self.surrogate(sub, adv[sl])
                S = np.stack([t.state.encoded for t in sub])
                err = self.critic(S).reshape(-1) - Tensor(tgt[sl])
                closs = (err * err).mean()
                # actor and critic share no parameters, so one pass serves both
                total = closs - obj
                info["surrogate"] = float(obj.data)
                info["critic_loss"] = float(closs.data)
                grads = ad.backward(total)
                _set_grads(self.actor.params, grads)
                _set_grads(self.critic.params, grads)
                self.actor_opt.step()
                self.critic_opt.step()
        return info

    def to_arrays(self, prefix: str = "policy") -> dict[str, np.ndarray]:
        out = self.actor.to_arrays(prefix + ".actor")
        out.update(self.critic.to_arrays(prefix + ".critic"))
        return out

    def load_arrays(self, arrays: dict, prefix: str = "policy") -> None:
        self.actor.load_arrays(arrays, prefix + ".actor")
        self.critic.load_arrays(arrays, prefix + ".critic")


def ppo_update(agent: PpoAgent, transitions: list[Transition]) -> dict:
    return agent.update(list(transitions))


# ---------------------------------------------------------------------------
# allocators
# ---------------------------------------------------------------------------

class RewardNormalizer:
    """Running mean/std (Welford) used to standardize rewards before PPO sees them.

    Raw loss-difference rewards are ~1e-2, far below the drift of a freshly
    initialized critic, so unscaled advantages are mostly critic noise.
    """

    def __init__(self):
        self.n, self.mean, self.m2 = 0, 0.0, 0.0

    def __call__(self, r: float) -> float:
        self.n += 1
        d = r - self.mean
        self.mean += d / self.n
        self.m2 += d * (r - self.mean)
        if self.n < 2:
            return 0.0
        std = np.sqrt(self.m2 / (self.n - 1))
        return float((r - self.mean) / std) if std > 0 else 0.0


class PpoAllocator:
    """Chooses the target block of a pruned prompt from the 3L state."""

    kind = "ppo"

    def __init__(self, num_blocks: int, cfg: PpoConfig | None = None, rng=None, update_every: int = 1,
                 normalize_rewards: bool = False):
        self.num_blocks = num_blocks
        self.agent = self._make_agent(num_blocks, cfg, rng)
        self.update_every = max(1, int(update_every))
        self.pending: list[Transition] = []
        self.normalizer = RewardNormalizer() if normalize_rewards else None

    @staticmethod
    def _make_agent(L, cfg, rng) -> PpoAgent:
        return PpoAgent(3 * L, L, cfg, rng)

    def choose(self, state: PolicyState, rng) -> tuple[int, float]:
        return self.agent.sample_action(state, rng)

    def observe(self, tr: Transition) -> None:
        if self.normalizer is not None:
            tr = replace(tr, reward=self.normalizer(tr.reward))
        self.pending.append(tr)
        if len(self.pending) >= self.update_every:
            self.agent.update(self.pending)
            self.pending = []

    def value(self, state) -> float:
        return self.agent.value(state)

    def to_arrays(self) -> dict[str, np.ndarray]:
        return self.agent.to_arrays()

    def load_arrays(self, arrays) -> None:
        self.agent.load_arrays(arrays)


class NaiveRlAllocator(PpoAllocator):
    """PPO over all L*L (source block, target block) pairs."""

    kind = "naive"

    @staticmethod
    def _make_agent(L, cfg, rng) -> PpoAgent:
        return PpoAgent(2 * L, L * L, cfg, rng)

    def split(self, action: int) -> tuple[int, int]:
        """1-based joint action -> (source, target) blocks."""
        j = action - 1
        return j // self.num_blocks + 1, j % self.num_blocks + 1

    @property
    def action_space(self) -> int:
        return self.num_blocks * self.num_blocks


def naive_rl_step(alloc: NaiveRlAllocator, state: PolicyState, rng) -> tuple[int, int, float]:
    """Sample a joint action; returns (source block, target block, log_prob)."""
    a, lp = alloc.choose(state, rng)
    s, t = alloc.split(a)
    return s, t, lp


@dataclass
class BanditConfig:
    prior_std: float = 0.1     # tau
    noise_std: float = 0.1     # sigma


class ThompsonBandit:
    """Independent Gaussian arms, known noise variance, N(0, tau^2) prior on the mean."""

    kind = "bandit"

    def __init__(self, num_blocks: int, cfg: BanditConfig | None = None):
        self.cfg = cfg or BanditConfig()
        if self.cfg.prior_std <= 0 or self.cfg.noise_std <= 0:
            raise ContractError("bandit variances must be positive")
        self.num_blocks = num_blocks
        self.n = np.zeros(num_blocks)
        self.s = np.zeros(num_blocks)

    def posterior(self) -> tuple[np.ndarray, np.ndarray]:
        t2, s2 = self.cfg.prior_std ** 2, self.cfg.noise_std ** 2
        prec = 1.0 / t2 + self.n / s2
        return (self.s / s2) / prec, 1.0 / prec

    def sample(self, rng) -> int:
        mean, var = self.posterior()
        draw = mean + np.sqrt(var) * rng.standard_normal(self.num_blocks)
        return int(np.argmax(draw)) + 1

    def update(self, action: int, reward: float) -> None:
        self.n[action - 1] += 1
        self.s[action - 1] += reward

    def choose(self, state, rng) -> tuple[int, float]:
        return self.sample(rng), 0.0

    def observe(self, tr: Transition) -> None:
        self.update(tr.action, tr.reward)

    def value(self, state) -> float:
        return 0.0

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {"bandit.n": self.n.copy(), "bandit.s": self.s.copy()}

    def load_arrays(self, arrays) -> None:
        self.n = np.asarray(arrays["bandit.n"], dtype=np.float64).copy()
        self.s = np.asarray(arrays["bandit.s"], dtype=np.float64).copy()


def bandit_sample(bandit: ThompsonBandit, rng) -> int:
    return bandit.sample(rng)


def bandit_update(bandit: ThompsonBandit, action: int, reward: float) -> None:
    bandit.update(action, reward)
