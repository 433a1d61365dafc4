"""Nested training loop: relocation, prompt tuning, reward, policy update.

Strategies
----------
provpt        idleness pruning + PPO allocation
random_prune  random pruning (same trigger) + PPO allocation
bandit_alloc  idleness pruning + Thompson-sampling allocation
prune_only    idleness pruning, never reallocates, floor on the active count
naive_rl      one PPO policy over all (source block, target block) pairs
adding        PPO adds a fresh prompt to a block every few epochs
vpt_deep      fixed uniform distribution
vpt_shallow   all prompts at the input, outputs kept through every block
"""
from __future__ import annotations

import csv
import io
import os
import time
from dataclasses import dataclass, field, asdict, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .allocators import (BanditConfig, NaiveRlAllocator, PpoAgent, PpoAllocator, PpoConfig, ThompsonBandit,
                         Transition, encode_count_state, encode_joint_state, encode_state)
from .autodiff import ContractError, Tensor
from .checkpoint import save_arrays
from .data import Dataset, normalize, preset
from .prompts import (Distribution, IdlenessReport, PromptSet, RelocationEvent, allocate, dumps_record,
                      history_record, idleness_approx, prune, reward_approx, select_prune)
from .vit import PromptedViT, VitWeights

STRATEGIES = ("provpt", "prune_only", "random_prune", "bandit_alloc", "naive_rl", "adding",
              "vpt_deep", "vpt_shallow")
RELOCATING = ("provpt", "random_prune", "bandit_alloc", "naive_rl")
GRAD_SOURCES = ("last_batch", "epoch_mean", "probe")
METRICS_HEADER = ["epoch", "train_loss", "probe_loss", "eval_acc", "relocated", "k_star", "source",
                  "target", "reward"]


@dataclass
class TrainConfig:
    total_epochs: int = 100
    batch_size: int = 64
    learning_rate: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0
    strategy: str = "provpt"
    prompts_total: int = 12
    initial_distribution: str | list = "uniform"
    idleness_source: str = "last_batch"
    rewind: bool = True            # clear the moved prompt's momentum
    train_head: bool = True
    probe_size: int = 256
    normalization: str = "inception"
    prune_floor: float = 0.5
    adding_initial: int = 0        # 0 -> prompts_total // 2
    drop_rate: float = 0.0
    actor_lr: float = 3e-4
    critic_lr: float = 1e-3
    gamma: float = 1.0
    clip_eps: float = 0.2
    update_epochs: int = 10
    update_every: int = 1
    reward_norm: bool = False      # standardize rewards with running statistics before PPO
    bandit_prior_std: float = 0.1
    bandit_noise_std: float = 0.1

    def __post_init__(self):
        self.validate()

    def validate(self, num_blocks: int | None = None) -> None:
        if self.strategy not in STRATEGIES:
            raise ContractError(f"unknown strategy {self.strategy!r}; choose from {', '.join(STRATEGIES)}")
        for name in ("total_epochs", "batch_size", "prompts_total", "probe_size", "update_epochs", "update_every"):
            if int(getattr(self, name)) <= 0:
                raise ContractError(f"{name} must be a positive integer")
        if self.learning_rate <= 0:
            raise ContractError("learning_rate must be positive")
        if self.idleness_source not in GRAD_SOURCES:
            raise ContractError(f"idleness_source must be one of {GRAD_SOURCES}")
        if not 0.0 <= self.prune_floor <= 1.0:
            raise ContractError("prune_floor must lie in [0, 1]")
        if not 0.0 <= self.drop_rate < 1.0:
            raise ContractError("drop_rate must lie in [0, 1)")
        if isinstance(self.initial_distribution, str) and self.initial_distribution != "uniform":
            raise ContractError("initial_distribution must be 'uniform' or an explicit list")
        if not isinstance(self.initial_distribution, str) and len(self.initial_distribution) != self.prompts_total:
            raise ContractError("explicit initial_distribution needs one entry per prompt")
        if (num_blocks is not None and self.strategy in RELOCATING + ("prune_only", "vpt_deep")
                and self.initial_distribution == "uniform" and self.prompts_total < num_blocks):
            raise ContractError(f"uniform initialization needs prompts_total >= {num_blocks}")

    def ppo(self) -> PpoConfig:
        return PpoConfig(actor_lr=self.actor_lr, critic_lr=self.critic_lr, gamma=self.gamma,
                         clip_eps=self.clip_eps, update_epochs=self.update_epochs)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    probe_loss: float
    eval_accuracy: float
    relocation: RelocationEvent | None
    distribution: list
    learning_rate: float
    max_idleness: float = float("nan")
    reward: float = float("nan")
    phases: list = field(default_factory=list)

    def csv_row(self) -> list[str]:
        ev = self.relocation
        if ev is None:
            tail = ["0", "", "", "", ""]
        else:
            tail = ["1", str(ev.pruned_index), str(ev.source_block), str(ev.target_block), _fmt(self.reward)]
        return [str(self.epoch), _fmt(self.train_loss), _fmt(self.probe_loss), _fmt(self.eval_accuracy)] + tail


def _fmt(x: float) -> str:
    return f"{float(x):.9g}"


@dataclass
class RunResult:
    config: TrainConfig
    records: list[EpochRecord]
    history: list[dict]
    prompts: PromptSet
    distribution: Distribution
    model: PromptedViT
    allocator: object
    timings: dict
    wall_time: float
    paths: dict = field(default_factory=dict)

    @property
    def final_accuracy(self) -> float:
        return self.records[-1].eval_accuracy

    def metrics_csv(self) -> str:
        return metrics_csv(self.records)

    def history_jsonl(self) -> str:
        return "".join(dumps_record(r) + "\n" for r in self.history)


def metrics_csv(records: Sequence[EpochRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_HEADER)
    for r in records:
        w.writerow(r.csv_row())
    return buf.getvalue()


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != METRICS_HEADER:
        raise ContractError(f"{path}: metrics header mismatch")
    out = []
    for i, row in enumerate(rows[1:], start=2):
        if len(row) != len(METRICS_HEADER):
            raise ContractError(f"{path}:{i}: expected {len(METRICS_HEADER)} fields, got {len(row)}")
        rec = dict(zip(METRICS_HEADER, row))
        try:
            out.append({
                "epoch": int(rec["epoch"]), "train_loss": float(rec["train_loss"]),
                "probe_loss": float(rec["probe_loss"]), "eval_acc": float(rec["eval_acc"]),
                "relocated": int(rec["relocated"]),
                "k_star": int(rec["k_star"]) if rec["k_star"] else None,
                "source": int(rec["source"]) if rec["source"] else None,
                "target": int(rec["target"]) if rec["target"] else None,
                "reward": float(rec["reward"]) if rec["reward"] else None,
            })
        except ValueError as exc:
            raise ContractError(f"{path}:{i}: {exc}") from None
    return out


# ---------------------------------------------------------------------------
# the run
# ---------------------------------------------------------------------------

class _Timer:
    def __init__(self):
        self.totals = {k: 0.0 for k in ("score", "prune", "allocate", "tune", "reward", "eval")}

    def __call__(self, name):
        timer = self

        class _Ctx:
            def __enter__(self):
                self.t = time.perf_counter()

            def __exit__(self, *exc):
                timer.totals[name] += time.perf_counter() - self.t
        return _Ctx()


class Run:
    """Mutable state of one training run.  ``step()`` executes one epoch."""

    def __init__(self, cfg: TrainConfig, dataset: Dataset, weights: VitWeights):
        vcfg = weights.cfg
        cfg.validate(vcfg.num_blocks)
        if cfg.drop_rate != vcfg.drop_rate:
            vcfg = replace(vcfg, drop_rate=cfg.drop_rate)
            weights = VitWeights.from_arrays(vcfg, weights.to_arrays())
        else:
            weights = weights.copy()
        for name, t in weights.params.items():
            t.requires_grad = cfg.train_head and name.startswith("head.")
        self.cfg = cfg
        self.L = vcfg.num_blocks
        self.model = PromptedViT(vcfg, weights)
        streams = np.random.SeedSequence(cfg.seed).spawn(6)
        self.rng_init, self.rng_data, self.rng_probe, self.rng_policy, self.rng_act, self.rng_drop = (
            np.random.default_rng(s) for s in streams)

        norm = preset(cfg.normalization, vcfg.channels)
        xtr, self.ytr = dataset.subset("train")
        xte, self.yte = dataset.subset("test")
        if self.ytr.size == 0:
            raise ContractError("dataset has no training samples")
        if self.yte.size == 0:
            xte, self.yte = dataset.subset("val")
        self.xtr = normalize(xtr, norm)
        self.xte = normalize(xte, norm)
        n_probe = min(cfg.probe_size, self.ytr.size)
        pidx = np.sort(self.rng_probe.choice(self.ytr.size, n_probe, replace=False))
        self.xprobe, self.yprobe = self.xtr[pidx], self.ytr[pidx]

        N = cfg.prompts_total
        self.prompts = PromptSet.init(N, vcfg.embed_dim, self.rng_init)
        self.dist = self._initial_distribution()
        self.opt = ad.SGD([self.prompts.tensor] + self.model.w.trainable(),
                          ad.SgdConfig(cfg.learning_rate, cfg.momentum, cfg.weight_decay))
        self.allocator = self._make_allocator()
        self.last_grad: np.ndarray | None = None
        self.next_state = None
        self.epoch = 0
        self.records: list[EpochRecord] = []
        self.history: list[dict] = []
        self.timer = _Timer()
        if cfg.strategy == "adding":
            self.cap = N
            self.add_every = max(1, (cfg.total_epochs - 1) // max(1, self.cap - self.dist.active_count))

    # -- setup ---------------------------------------------------------------
    def _initial_distribution(self) -> Distribution:
        cfg, L, N = self.cfg, self.L, self.cfg.prompts_total
        if cfg.strategy == "vpt_shallow":
            return Distribution.concentrated(N, L, 1)
        if not isinstance(cfg.initial_distribution, str):
            return Distribution(cfg.initial_distribution, L)
        if cfg.strategy == "adding":
            n0 = cfg.adding_initial or N // 2
            if not 0 < n0 <= N:
                raise ContractError("adding_initial must lie in [1, prompts_total]")
            return Distribution.uniform(N, L, active=n0)
        return Distribution.uniform(N, L)

    def _make_allocator(self):
        cfg, L = self.cfg, self.L
        if cfg.strategy in ("provpt", "random_prune", "adding"):
            alloc = PpoAllocator(L, cfg.ppo(), self.rng_policy, cfg.update_every, cfg.reward_norm)
            if cfg.strategy == "adding":
                # the adding policy sees the distribution only (L inputs)
                alloc.agent = PpoAgent(L, L, cfg.ppo(), self.rng_policy)
            return alloc
        if cfg.strategy == "naive_rl":
            return NaiveRlAllocator(L, cfg.ppo(), self.rng_policy, cfg.update_every, cfg.reward_norm)
        if cfg.strategy == "bandit_alloc":
            return ThompsonBandit(L, BanditConfig(cfg.bandit_prior_std, cfg.bandit_noise_std))
        return None

    # -- model helpers -------------------------------------------------------
    def loss(self, x, y, P, D, rng=None) -> Tensor:
        if self.cfg.strategy == "vpt_shallow":
            return ad.cross_entropy(self.model.forward_shallow(x, P, rng=rng), y)
        return self.model.loss(x, y, P, D, rng=rng)

    def probe_loss(self, D: Distribution | None = None) -> float:
        with ad.no_grad():
            return self.loss(self.xprobe, self.yprobe, Tensor(self.prompts.values),
                             self.dist if D is None else D).item()

    def accuracy(self) -> float:
        P = Tensor(self.prompts.values)
        correct = 0
        with ad.no_grad():
            for s in range(0, self.yte.size, 256):
                x = self.xte[s:s + 256]
                if self.cfg.strategy == "vpt_shallow":
                    z = self.model.forward_shallow(x, P)
                else:
                    z = self.model.forward(x, P, self.dist)
                correct += int((z.data.argmax(axis=1) == self.yte[s:s + 256]).sum())
        return correct / self.yte.size

    def probe_gradient(self) -> np.ndarray:
        P = Tensor(self.prompts.values.copy(), requires_grad=True)
        loss = self.loss(self.xprobe, self.yprobe, P, self.dist)
        return ad.backward(loss).get(P, np.zeros_like(P.data))

    def report(self) -> IdlenessReport | None:
        if self.cfg.idleness_source == "probe":
            return idleness_approx(self.probe_gradient(), self.prompts, self.dist)
        if self.last_grad is None:
            return None
        return idleness_approx(self.last_grad, self.prompts, self.dist)

    # -- one epoch -----------------------------------------------------------
    def step(self) -> EpochRecord:
        cfg = self.cfg
        self.epoch += 1
        phases: list[str] = []
        event = None
        pending = None
        max_idle = float("nan")
        strat = cfg.strategy

        if strat in RELOCATING + ("prune_only",) and self.epoch > 1:
            with self.timer("score"):
                rep = self.report()
            phases.append("score")
            if rep is not None and rep.argmax is not None:
                max_idle = rep.max_value
                event, pending = self._relocate(rep, phases)
        elif strat == "adding" and self.epoch > 1 and (self.epoch - 2) % self.add_every == 0:
            event, pending = self._add(phases)

        with self.timer("tune"):
            train_loss = self._tune_epoch()
        phases.append("tune")

        reward = float("nan")
        with self.timer("reward"):
            probe = self.probe_loss()
            if event is not None and pending is not None:
                event.loss_after_tuning = probe
                if strat == "adding":
                    reward = event.loss_before - probe
                else:
                    reward = reward_approx(event.loss_before, probe, event.idleness)
                event.approx_reward = reward
                self._learn(pending, reward)
                phases.append("reward")
            elif event is not None:
                event.loss_after_tuning = probe
        with self.timer("eval"):
            acc = self.accuracy()
        rec = EpochRecord(self.epoch, train_loss, probe, acc, event, self.dist.to_list(), cfg.learning_rate,
                          max_idle, reward, phases)
        self.records.append(rec)
        self.history.append(history_record(self.epoch, self.dist, event, max_idle))
        return rec

    def _relocate(self, rep: IdlenessReport, phases: list) -> tuple:
        cfg, strat = self.cfg, self.cfg.strategy
        with self.timer("prune"):
            k = select_prune(rep)
            if k is None:
                return None, None
            if strat == "random_prune":
                k = int(self.rng_act.choice(self.dist.active()))
            elif strat == "prune_only":
                floor = int(np.ceil(cfg.prune_floor * cfg.prompts_total))
                if self.dist.active_count <= floor:
                    return None, None
            loss_before = self.probe_loss()
            if strat == "naive_rl":
                state = encode_joint_state(rep, self.dist)
                a, logp = self.allocator.choose(state, self.rng_act)
                src, target = self.allocator.split(a)
                k = int(self.rng_act.choice(np.flatnonzero(self.dist.assignments == src)))
            source = self.dist[k]
            d_minus = prune(self.dist, k)
        phases.append("prune")
        event = RelocationEvent(k, source, 0, float(rep.per_prompt[k]), loss_before)
        if strat == "prune_only":
            self.dist = d_minus
            return event, None
        with self.timer("allocate"):
            if strat != "naive_rl":
                state = encode_state(rep, d_minus, source)
                a, logp = self.allocator.choose(state, self.rng_act)
                target = a
            self.dist = allocate(d_minus, k, target)
            if cfg.rewind:
                self.opt.reset_rows(self.prompts.tensor, [k])
        phases.append("allocate")
        event.target_block = int(target)
        return event, (state, a, logp)

    def _add(self, phases: list) -> tuple:
        inactive = np.flatnonzero(self.dist.assignments == 0)
        if inactive.size == 0:
            return None, None
        with self.timer("allocate"):
            loss_before = self.probe_loss()
            state = encode_count_state(self.dist, self.cap)
            a, logp = self.allocator.choose(state, self.rng_act)
            k = int(inactive[0])
            self.prompts.reinit(k, self.rng_init)
            self.opt.reset_rows(self.prompts.tensor, [k])
            self.dist = allocate(self.dist, k, a)
        phases.append("allocate")
        return RelocationEvent(k, 0, int(a), 0.0, loss_before), (state, a, logp)

    def _next_state(self):
        strat = self.cfg.strategy
        if strat == "adding":
            return encode_count_state(self.dist, self.cap)
        rep = idleness_approx(self.last_grad, self.prompts, self.dist) if self.last_grad is not None else None
        if rep is None or rep.argmax is None:
            return None
        if strat == "naive_rl":
            return encode_joint_state(rep, self.dist)
        k = rep.argmax
        return encode_state(rep, prune(self.dist, k), self.dist[k])

    def _learn(self, pending, reward: float) -> None:
        state, a, logp = pending
        nxt = self._next_state() if self.cfg.strategy != "bandit_alloc" else None
        tr = Transition(state, int(a), min(float(logp), 0.0), float(reward), nxt,
                        terminal=nxt is None or self.epoch >= self.cfg.total_epochs)
        self.allocator.observe(tr)

    def _tune_epoch(self) -> float:
        cfg = self.cfg
        P = self.prompts.tensor
        order = self.rng_data.permutation(self.ytr.size)
        losses, gsum, nb = [], None, 0
        drop_rng = self.rng_drop if cfg.drop_rate > 0 else None
        for s in range(0, order.size, cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            loss = self.loss(self.xtr[idx], self.ytr[idx], P, self.dist, rng=drop_rng)
            losses.append(ad.forward_scalar(loss))
            grads = ad.backward(loss)
            g = grads.get(P)
            if g is None:
                g = np.zeros_like(P.data)
            P.grad = g
            if cfg.idleness_source == "epoch_mean":
                gsum = g.copy() if gsum is None else gsum + g
                nb += 1
            self.last_grad = g.copy()
            self.opt.step(grads)
        if cfg.idleness_source == "epoch_mean" and nb:
            self.last_grad = gsum / nb
        if not self.prompts.is_finite():
            raise FloatingPointError(f"prompts became non-finite in epoch {self.epoch}")
        return float(np.mean(losses))

    # -- artifacts ------------------------------------------------------------
    def checkpoint_arrays(self) -> dict[str, np.ndarray]:
        out = {f"model.{k}": v for k, v in self.model.w.to_arrays().items()}
        out["prompts"] = self.prompts.values.copy()
        out["assignments"] = self.dist.assignments.astype(np.float64)
        if self.allocator is not None:
            out.update(self.allocator.to_arrays())
        return out


def run_training(cfg: TrainConfig, dataset: Dataset, weights: VitWeights, out_dir: str | None = None,
                 callback=None) -> RunResult:
    """Run ``cfg.total_epochs`` epochs; with ``out_dir`` write metrics, history and checkpoint."""
    t0 = time.perf_counter()
    run = Run(cfg, dataset, weights)
    paths = {}
    metrics_fh = None
    try:
        if out_dir is not None:
            os.makedirs(out_dir, exist_ok=True)
            paths = {"metrics": os.path.join(out_dir, "metrics.csv"),
                     "distribution": os.path.join(out_dir, "distribution.jsonl"),
                     "checkpoint": os.path.join(out_dir, "checkpoint.pvpt")}
            metrics_fh = open(paths["metrics"], "w", newline="")
            metrics_fh.write(",".join(METRICS_HEADER) + "\n")
            hist_fh = open(paths["distribution"], "w", encoding="utf-8")
        for _ in range(cfg.total_epochs):
            rec = run.step()
            if metrics_fh is not None:
                metrics_fh.write(",".join(rec.csv_row()) + "\n")
                metrics_fh.flush()
                hist_fh.write(dumps_record(run.history[-1]) + "\n")
                hist_fh.flush()
            if callback is not None:
                callback(run, rec)
        if out_dir is not None:
            save_arrays(paths["checkpoint"], run.checkpoint_arrays())
    except OSError as exc:
        raise OSError(f"writing run artifacts under {out_dir}: {exc}") from exc
    finally:
        if metrics_fh is not None:
            metrics_fh.close()
            hist_fh.close()
    return RunResult(cfg, run.records, run.history, run.prompts, run.dist, run.model, run.allocator,
                     dict(run.timer.totals), time.perf_counter() - t0, paths)


# ---------------------------------------------------------------------------
# analysis helpers
# ---------------------------------------------------------------------------

def loss_jitter(records: Sequence[EpochRecord], lo: float = 0.2, hi: float = 0.6) -> float:
    """Variance of epoch-to-epoch probe-loss changes over the [lo, hi] fraction of the run."""
    E = len(records)
    a, b = max(1, int(round(lo * E))), max(2, int(round(hi * E)))
    losses = np.array([r.probe_loss for r in records[a - 1:b]])
    if losses.size < 3:
        raise ContractError("run too short for the jitter window")
    return float(np.var(np.diff(losses)))


def placement_sweep(dataset: Dataset, weights: VitWeights, cfg: TrainConfig) -> dict:
    """Tune the same prompt budget concentrated at each block and spread uniformly.

    Returns final test accuracies keyed by block number and ``"uniform"``.
    """
    L = weights.cfg.num_blocks
    out = {}
    for key in list(range(1, L + 1)) + ["uniform"]:
        dist = "uniform" if key == "uniform" else [key] * cfg.prompts_total
        c = TrainConfig(**{**cfg.to_dict(), "strategy": "vpt_deep", "initial_distribution": dist})
        out[key] = run_training(c, dataset, weights).final_accuracy
    return out
