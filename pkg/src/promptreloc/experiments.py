"""Multi-seed experiments on the block-sensitive task.

Runs are memoized per (strategy, sensitive block, seed, epochs) inside the
process so that comparisons sharing a strategy reuse the same runs.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from .data import make_block_sensitive_task
from .trainer import TrainConfig, loss_jitter, run_training
from .verify import history_violations

EPOCHS = 40
SEEDS = tuple(range(10))

_cache: dict = {}


@dataclass
class Cell:
    strategy: str
    block: int
    seed: int
    counts: list
    final_accuracy: float
    jitter: float
    seconds: float
    violations: list      # guard violations found in the run's distribution history

    @property
    def concentrated(self) -> bool:
        """Strictly more prompts at the sensitive block than at any other block."""
        c = np.asarray(self.counts)
        return bool(c[self.block - 1] > np.delete(c, self.block - 1).max())


def run_cell(strategy: str, block: int, seed: int, epochs: int = EPOCHS, **overrides) -> Cell:
    key = (strategy, block, seed, epochs, tuple(sorted(overrides.items())))
    if key not in _cache:
        t = time.perf_counter()
        w, ds = make_block_sensitive_task(seed=seed, sensitive_block=block)
        cfg = TrainConfig(**{"total_epochs": epochs, "strategy": strategy, "seed": seed, **overrides})
        res = run_training(cfg, ds, w)
        _cache[key] = Cell(strategy, block, seed, res.distribution.counts().tolist(), res.final_accuracy,
                           loss_jitter(res.records), time.perf_counter() - t,
                           history_violations(res.history, strategy))
    return _cache[key]


def run_cells(strategy: str, block: int, seeds=SEEDS, epochs: int = EPOCHS, **overrides) -> list[Cell]:
    return [run_cell(strategy, block, s, epochs, **overrides) for s in seeds]


def sign_test(wins: int, losses: int) -> float:
    """One-sided sign-test p-value P(X >= wins), X ~ Bin(wins + losses, 1/2); ties are dropped."""
    n = wins + losses
    if n == 0:
        return 1.0
    return sum(math.comb(n, i) for i in range(wins, n + 1)) / 2.0 ** n


def paired_comparison(a: list[Cell], b: list[Cell]) -> dict:
    """Mean accuracies and the sign test for ``a`` beating ``b`` seed by seed."""
    if [c.seed for c in a] != [c.seed for c in b]:
        raise ValueError("comparison needs the same seeds on both sides")
    diff = np.array([x.final_accuracy - y.final_accuracy for x, y in zip(a, b)])
    wins, losses = int((diff > 0).sum()), int((diff < 0).sum())
    return {"mean_a": float(np.mean([c.final_accuracy for c in a])),
            "mean_b": float(np.mean([c.final_accuracy for c in b])),
            "wins": wins, "losses": losses, "ties": diff.size - wins - losses,
            "p": sign_test(wins, losses)}


def median_accuracy(cells: list[Cell]) -> float:
    return float(np.median([c.final_accuracy for c in cells]))


def cached_cells() -> list[Cell]:
    return list(_cache.values())


def elapsed(cells: list[Cell]) -> float:
    return float(sum(c.seconds for c in cells))
