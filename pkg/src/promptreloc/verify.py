"""Oracle and invariant checks, shared by the ``verify`` verb and the test-suite.

Each ``check_*`` returns a :class:`CheckResult`; ``run_checks`` collects the
fast ones.  ``quick=True`` shrinks the seed counts for a smoke run, the full
sizes are the ones the acceptance tests use.
"""
from __future__ import annotations

import os
import tempfile
import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .allocators import PolicyState, PpoAgent, PpoConfig, Transition, policy_param_count
from .autodiff import ContractError, Tensor
from .prompts import (Distribution, allocate, idleness_exact, prompt_gradient, prune, reward_approx,
                      reward_exact)
from .vit import PromptedViT, VitConfig, VitWeights, prompt_init

# policy size quoted for L = 12 by the method's authors (0.0136M)
REPORTED_POLICY_PARAMS = 13_600
RELOCATING_GUARDED = ("provpt", "random_prune", "bandit_alloc")


@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: str
    seconds: float = 0.0

    def line(self) -> str:
        return f"{'PASS' if self.ok else 'FAIL'}  {self.name}: {self.detail} ({self.seconds:.1f}s)"


def _timed(fn):
    def wrapper(*args, **kwargs):
        t = time.perf_counter()
        res = fn(*args, **kwargs)
        res.seconds = time.perf_counter() - t
        return res
    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


# ---------------------------------------------------------------------------
# toy models
# ---------------------------------------------------------------------------

def toy_model(rng, num_blocks: int = 2, embed_dim: int = 8, num_classes: int = 3,
              all_trainable: bool = False) -> PromptedViT:
    cfg = VitConfig(num_blocks=num_blocks, embed_dim=embed_dim, num_heads=2, patch_size=4, image_size=8,
                    channels=1, num_classes=num_classes)
    w = VitWeights.init(cfg, rng)
    # Xavier init leaves biases and norms at 0/1; perturb them so every path is exercised
    for name, t in w.params.items():
        if name.endswith((".b", "bqkv", ".bo", ".b1", ".b2", ".g")) or name in ("cls",):
            t.data = t.data + 0.1 * rng.standard_normal(t.shape)
        t.requires_grad = all_trainable or name.startswith("head.")
    return PromptedViT(cfg, w)


def toy_batch(rng, model: PromptedViT, batch: int = 4):
    c = model.cfg
    x = rng.standard_normal((batch, c.image_size, c.image_size, c.channels))
    y = rng.integers(0, c.num_classes, batch)
    return x, y


def random_distribution(rng, n: int, L: int, allow_inactive: bool = True) -> Distribution:
    lo = 0 if allow_inactive else 1
    a = rng.integers(lo, L + 1, n)
    if not a.any():
        a[0] = 1
    return Distribution(a, L)


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------

def _fd_directional(f, t: Tensor, direction: np.ndarray, h: float) -> float:
    orig = t.data.copy()
    try:
        t.data = orig + h * direction
        up = f()
        t.data = orig - h * direction
        dn = f()
    finally:
        t.data = orig
    return (up - dn) / (2 * h)


def gradient_error(seed: int, h: float = 1e-5) -> float:
    """Largest relative gap between backprop and central differences for one toy model.

    Prompts are checked coordinate by coordinate, every backbone tensor along
    one random direction.  Odd seeds use the shallow (outputs kept) path.
    """
    rng = np.random.default_rng(seed)
    model = toy_model(rng, all_trainable=True)
    x, y = toy_batch(rng, model)
    n = int(rng.integers(2, 6))
    P = Tensor(prompt_init(n, model.cfg.embed_dim, rng), requires_grad=True)
    D = random_distribution(rng, n, model.cfg.num_blocks)
    shallow = seed % 2 == 1

    def loss_tensor():
        if shallow:
            return ad.cross_entropy(model.forward_shallow(x, P), y)
        return model.loss(x, y, P, D)

    def f():
        with ad.no_grad():
            return loss_tensor().item()

    grads = ad.backward(loss_tensor())
    worst = 0.0
    g = grads.get(P, np.zeros_like(P.data))
    fd = np.zeros_like(P.data)
    for idx in np.ndindex(*P.shape):
        e = np.zeros_like(P.data)
        e[idx] = 1.0
        fd[idx] = _fd_directional(f, P, e, h)
    worst = max(worst, np.linalg.norm(g - fd) / max(np.linalg.norm(fd), 1e-8))
    for t in model.w.params.values():
        u = rng.standard_normal(t.shape)
        num = _fd_directional(f, t, u, h)
        ana = float(np.sum(grads.get(t, np.zeros_like(t.data)) * u))
        worst = max(worst, abs(ana - num) / max(abs(num), 1e-8))
    return float(worst)


@_timed
def check_gradients(n_seeds: int = 100, rtol: float = 1e-4) -> CheckResult:
    errs = np.array([gradient_error(s) for s in range(n_seeds)])
    ok = bool(np.all(errs <= rtol))
    return CheckResult("gradient fidelity", ok,
                       f"max rel err {errs.max():.2e} over {n_seeds} seeds (tol {rtol:g})")


# ---------------------------------------------------------------------------
# first-order idleness
# ---------------------------------------------------------------------------

def taylor_config(seed: int, eps_values: Sequence[float]) -> tuple[dict, dict]:
    """Approximate and exact idleness of every active prompt at each prompt scale."""
    rng = np.random.default_rng(10_000 + seed)
    model = toy_model(rng, num_blocks=3)
    x, y = toy_batch(rng, model, batch=8)
    n = int(rng.integers(3, 7))
    P0 = prompt_init(n, model.cfg.embed_dim, rng)
    D = random_distribution(rng, n, model.cfg.num_blocks)
    approx, exact = {}, {}
    for eps in eps_values:
        P = eps * P0
        _, g = prompt_gradient(model, x, y, P, D)
        act = D.active()
        approx[eps] = np.einsum("kd,kd->k", g[act], P[act])
        exact[eps] = np.array([idleness_exact(model, x, y, P, D, int(k)) for k in act])
    return approx, exact


@_timed
def check_taylor(n_configs: int = 200, eps_values=(1e-1, 1e-2, 1e-3), sign_eps: float = 1e-2,
                 min_agreement: float = 0.95) -> CheckResult:
    gaps = {e: 0.0 for e in eps_values}
    agree = total = 0
    for s in range(n_configs):
        approx, exact = taylor_config(s, eps_values)
        for e in eps_values:
            gaps[e] = max(gaps[e], float(np.max(np.abs(approx[e] - exact[e]))))
        a, x = approx[sign_eps], exact[sign_eps]
        agree += int(np.sum(np.sign(a) == np.sign(x)))
        total += a.size
    seq = [gaps[e] for e in sorted(eps_values, reverse=True)]
    decreasing = all(b < a for a, b in zip(seq, seq[1:]))
    frac = agree / max(total, 1)
    ok = decreasing and frac >= min_agreement
    detail = ("max gap " + ", ".join(f"eps={e:g}: {gaps[e]:.2e}" for e in sorted(eps_values, reverse=True))
              + f"; sign agreement {frac:.3f} at eps={sign_eps:g} ({total} prompts)")
    return CheckResult("first-order idleness fidelity", ok, detail)


# ---------------------------------------------------------------------------
# reward identity
# ---------------------------------------------------------------------------

def reward_snapshot(seed: int, lr: float = 0.1) -> tuple[float, float]:
    """(reward_approx with the exact score, reward_exact) for one relocation + one SGD step."""
    rng = np.random.default_rng(20_000 + seed)
    model = toy_model(rng, num_blocks=3)
    x, y = toy_batch(rng, model, batch=8)
    n = int(rng.integers(2, 7))
    P = prompt_init(n, model.cfg.embed_dim, rng)
    D = random_distribution(rng, n, model.cfg.num_blocks, allow_inactive=False)
    k = int(rng.integers(n))
    Dm = prune(D, k)
    Dp = allocate(Dm, k, int(rng.integers(1, model.cfg.num_blocks + 1)))
    _, g = prompt_gradient(model, x, y, P, Dp)
    P2 = P - lr * g
    with ad.no_grad():
        before = model.loss(x, y, Tensor(P), D).item()
        after = model.loss(x, y, Tensor(P2), Dp).item()
    I = idleness_exact(model, x, y, P, D, k)
    return reward_approx(before, after, I), reward_exact(model, x, y, (P, Dm), (P2, Dp))


@_timed
def check_reward_identity(n: int = 50, tol: float = 1e-12) -> CheckResult:
    gaps = np.array([abs(a - b) for a, b in (reward_snapshot(s) for s in range(n))])
    return CheckResult("reward identity", bool(np.all(gaps <= tol)),
                       f"max |approx - exact| {gaps.max():.1e} over {n} snapshots (tol {tol:g})")


# ---------------------------------------------------------------------------
# relocation guard on a history file
# ---------------------------------------------------------------------------

def history_violations(history: Sequence[dict], strategy: str = "provpt") -> list[str]:
    """Guard and conservation violations in a distribution history.

    Relocation must happen exactly in the epochs whose largest score is
    positive, at most once per epoch, and leave N and the active count alone.
    prune_only instead drops one active prompt per event and may skip a
    positive epoch once it sits at its floor.  adding is not scored at all:
    each event activates one inactive prompt and grows the active count.
    """
    out = []
    if not history:
        return ["empty history"]
    N = len(history[0]["assignments"])
    active = sum(1 for a in history[0]["assignments"] if a > 0)
    epochs = [rec["epoch"] for rec in history]
    if epochs != list(range(1, len(history) + 1)):
        out.append("epochs are not 1..E with one record each")
    pruning = strategy == "prune_only"
    adding = strategy == "adding"
    picks_max = strategy not in ("random_prune", "naive_rl")
    prev = None
    for rec in history:
        e, ev, mx = rec["epoch"], rec["event"], rec["max_idleness"]
        a = rec["assignments"]
        if len(a) != N:
            out.append(f"epoch {e}: prompt count {len(a)} != {N}")
        if pruning and ev is not None:
            active -= 1
        if adding and ev is not None:
            active += 1
        if sum(1 for v in a if v > 0) != active:
            out.append(f"epoch {e}: active count changed")
        positive = mx is not None and mx > 0
        if e == 1 and (ev is not None or mx is not None):
            out.append("epoch 1 must not be scored")
        if adding:
            if mx is not None:
                out.append(f"epoch {e}: adding run carries a score")
            if ev is not None and ev["source_block"] != 0:
                out.append(f"epoch {e}: added prompt was already active")
        elif ev is not None and not positive or (positive and ev is None and not pruning):
            out.append(f"epoch {e}: max score {mx} but relocated={ev is not None}")
        if ev is not None:
            if picks_max and not adding and ev["idleness"] != mx:
                out.append(f"epoch {e}: pruned score {ev['idleness']} is not the maximum {mx}")
            if pruning and ev["target_block"] != 0:
                out.append(f"epoch {e}: prune_only event has a target block")
            if prev is not None:
                k = ev["pruned_index"]
                if prev[k] != ev["source_block"] or a[k] != ev["target_block"]:
                    out.append(f"epoch {e}: event does not match the assignment change")
                moved = [i for i in range(N) if prev[i] != a[i]]
                if moved not in ([], [k]):
                    out.append(f"epoch {e}: prompts {moved} moved")
        elif prev is not None and prev != a:
            out.append(f"epoch {e}: distribution changed without an event")
        prev = a
    return out


@_timed
def check_guard(history: Sequence[dict] | None = None, strategy: str = "provpt", epochs: int = 12) -> CheckResult:
    if history is None:
        history = _small_run(strategy, 0, epochs).history
    bad = history_violations(history, strategy)
    n_ev = sum(rec["event"] is not None for rec in history)
    return CheckResult("relocation guard", not bad,
                       f"{len(history)} epochs, {n_ev} relocations" + (f"; {bad[:3]}" if bad else ""))


# ---------------------------------------------------------------------------
# PPO
# ---------------------------------------------------------------------------

def clipped_actor_gradient(seed: int) -> float:
    """Largest |actor gradient| for a batch whose ratios all sit in the clipped regime."""
    rng = np.random.default_rng(30_000 + seed)
    L = 4
    agent = PpoAgent(3 * L, L, PpoConfig(), rng)
    batch, adv = [], []
    for i in range(6):
        s = PolicyState(np.zeros(L), np.zeros(L), np.zeros(L), rng.standard_normal(3 * L))
        a = int(rng.integers(1, L + 1))
        logp = float(np.log(agent.probs(s)[a - 1]))
        A = float(rng.uniform(0.5, 2.0))
        if i % 2:
            # ratio 1.5 > 1 + eps with A > 0
            batch.append(Transition(s, a, logp - np.log(1.5), 0.0, None, terminal=True))
            adv.append(A)
        else:
            # ratio 0.5 < 1 - eps with A < 0
            batch.append(Transition(s, a, min(logp - np.log(0.5), 0.0), 0.0, None, terminal=True))
            adv.append(-A)
    # the second kind needs logp + log 2 <= 0, i.e. p <= 0.5, which holds with L = 4 near init
    grads = ad.backward(agent.surrogate(batch, np.array(adv)))
    return max(float(np.max(np.abs(grads.get(p, np.zeros(1))))) for p in agent.actor.params)


def bandit_improves(seed: int, updates: int = 200) -> tuple[float, float]:
    """Expected reward of a fresh PPO policy on a 2-arm bandit, before and after ``updates`` updates."""
    rng = np.random.default_rng(40_000 + seed)
    agent = PpoAgent(2, 2, PpoConfig(), rng)
    s = PolicyState(np.zeros(1), np.zeros(1), np.zeros(1), np.array([1.0, 0.0]))
    means = np.array([0.0, 1.0])
    before = float(agent.probs(s) @ means)
    for _ in range(updates):
        a, logp = agent.sample_action(s, rng)
        r = means[a - 1] + rng.standard_normal()
        agent.update([Transition(s, a, min(logp, 0.0), float(r), None, terminal=True)])
    return before, float(agent.probs(s) @ means)


@_timed
def check_ppo(n_seeds: int = 100, updates: int = 200, clip_seeds: int = 20) -> CheckResult:
    clip = max(clipped_actor_gradient(s) for s in range(clip_seeds))
    wins = sum(a > b for b, a in (bandit_improves(s, updates) for s in range(n_seeds)))
    count = PpoAgent(36, 12).num_params()
    closed = policy_param_count(12)
    rel = abs(count - REPORTED_POLICY_PARAMS) / REPORTED_POLICY_PARAMS
    ok = clip == 0.0 and wins >= 0.95 * n_seeds and count == closed == 13_901 and rel <= 0.03
    return CheckResult("ppo", ok, f"clipped actor grad {clip:g}; bandit improved in {wins}/{n_seeds}; "
                                  f"params {count} (closed form {closed}, {100 * rel:.1f}% from 13.6k)")


# ---------------------------------------------------------------------------
# reproducibility
# ---------------------------------------------------------------------------

def _small_task(b: int = 2, seed: int = 0):
    from .data import make_block_sensitive_task
    return make_block_sensitive_task(seed=seed, sensitive_block=b, n_train=128, n_test=128)


def _small_run(strategy: str, seed: int, epochs: int, out_dir: str | None = None):
    from .trainer import TrainConfig, run_training
    w, ds = _small_task(seed=seed)
    cfg = TrainConfig(total_epochs=epochs, strategy=strategy, seed=seed, batch_size=32, probe_size=64)
    return run_training(cfg, ds, w, out_dir=out_dir)


@_timed
def check_reproducibility(strategy: str = "provpt", epochs: int = 6, seed: int = 0) -> CheckResult:
    blobs = []
    with tempfile.TemporaryDirectory() as tmp:
        for i in range(2):
            d = os.path.join(tmp, f"run{i}")
            res = _small_run(strategy, seed, epochs, out_dir=d)
            with open(res.paths["metrics"], "rb") as fh:
                m = fh.read()
            with open(res.paths["distribution"], "rb") as fh:
                h = fh.read()
            blobs.append((m, h))
    same = blobs[0] == blobs[1]
    return CheckResult("reproducibility", same,
                       f"{strategy}, {epochs} epochs: metrics and history "
                       + ("byte-identical" if same else "differ"))


def run_checks(quick: bool = True) -> list[CheckResult]:
    """The fast oracle/invariant checks; ``quick`` uses reduced seed counts."""
    if quick:
        return [check_gradients(10), check_taylor(30), check_reward_identity(20), check_guard(epochs=8),
                check_ppo(n_seeds=10, clip_seeds=5), check_reproducibility(epochs=3)]
    return [check_gradients(), check_taylor(), check_reward_identity(), check_guard(),
            check_ppo(), check_reproducibility()]


__all__ = ["CheckResult", "run_checks", "check_gradients", "check_taylor", "check_reward_identity",
           "check_guard", "check_ppo", "check_reproducibility", "history_violations", "gradient_error",
           "taylor_config", "reward_snapshot", "clipped_actor_gradient", "bandit_improves", "toy_model",
           "ContractError"]
