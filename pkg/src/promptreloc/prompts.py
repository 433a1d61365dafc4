"""Prompt set, prompt distribution, idleness scores and relocation.

Block indices are 1-based (0 marks an inactive prompt); prompt indices are
0-based.  The exact quantities here (``idleness_exact``, ``reward_exact``) are
two-forward-pass oracles for the first-order estimates used in training.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, asdict
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tensor
from .vit import prompt_init


class PromptSet:
    """N trainable prompt vectors of dimension d held in one (N, d) tensor."""

    def __init__(self, values):
        values = np.array(values, dtype=np.float64)
        if values.ndim != 2:
            raise ContractError(f"prompt values must be (N, d), got {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ContractError("prompt values must be finite")
        self.tensor = Tensor(values, requires_grad=True, name="prompts")

    @classmethod
    def init(cls, n: int, d: int, rng: np.random.Generator) -> "PromptSet":
        return cls(prompt_init(n, d, rng))

    @property
    def values(self) -> np.ndarray:
        return self.tensor.data

    @property
    def N(self) -> int:
        return self.tensor.shape[0]

    @property
    def d(self) -> int:
        return self.tensor.shape[1]

    def copy(self) -> "PromptSet":
        return PromptSet(self.values.copy())

    def reinit(self, k: int, rng: np.random.Generator) -> None:
        self.tensor.data[k] = prompt_init(1, self.d, rng)[0]

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.values)))


class Distribution:
    """Assignment d_k in {0..L} of every prompt to a block (0 = inactive)."""

    __slots__ = ("assignments", "num_blocks")

    def __init__(self, assignments: Iterable[int], num_blocks: int):
        a = np.array(list(assignments), dtype=np.int64)
        if num_blocks <= 0:
            raise ContractError("num_blocks must be positive")
        if a.ndim != 1:
            raise ContractError("assignments must be a flat list")
        if a.size and (a.min() < 0 or a.max() > num_blocks):
            raise ContractError(f"assignments must lie in [0, {num_blocks}], got {a.tolist()}")
        self.assignments = a
        self.num_blocks = int(num_blocks)

    @classmethod
    def uniform(cls, n: int, num_blocks: int, active: int | None = None) -> "Distribution":
        """Spread the first ``active`` prompts (default all) evenly, in order."""
        active = n if active is None else active
        a = np.zeros(n, dtype=np.int64)
        a[:active] = np.arange(active) * num_blocks // max(active, 1) + 1
        return cls(a, num_blocks)

    @classmethod
    def concentrated(cls, n: int, num_blocks: int, block: int) -> "Distribution":
        return cls([block] * n, num_blocks)

    def __len__(self) -> int:
        return self.assignments.size

    def __getitem__(self, k: int) -> int:
        return int(self.assignments[k])

    def __eq__(self, other) -> bool:
        return (isinstance(other, Distribution) and self.num_blocks == other.num_blocks
                and np.array_equal(self.assignments, other.assignments))

    def __repr__(self) -> str:
        return f"Distribution({self.assignments.tolist()}, L={self.num_blocks})"

    def copy(self) -> "Distribution":
        return Distribution(self.assignments.copy(), self.num_blocks)

    def counts(self) -> np.ndarray:
        """Prompt count per block 1..L."""
        return np.bincount(self.assignments, minlength=self.num_blocks + 1)[1:]

    @property
    def active_count(self) -> int:
        return int(np.count_nonzero(self.assignments))

    def active(self) -> np.ndarray:
        return np.flatnonzero(self.assignments)

    def to_list(self) -> list[int]:
        return [int(v) for v in self.assignments]

    def digest(self) -> str:
        return hashlib.sha1(self.assignments.tobytes() + bytes([self.num_blocks])).hexdigest()


@dataclass
class IdlenessReport:
    per_prompt: np.ndarray
    per_block: np.ndarray
    active: np.ndarray
    argmax: int | None
    max_value: float

    @classmethod
    def from_scores(cls, scores: Sequence[float], dist: Distribution | None = None,
                    num_blocks: int | None = None) -> "IdlenessReport":
        s = np.asarray(scores, dtype=np.float64)
        if dist is None:
            L = num_blocks or 1
            dist = Distribution(np.ones(s.size, dtype=np.int64), L)
        if s.shape != (len(dist),):
            raise ContractError(f"{s.size} scores for {len(dist)} prompts")
        active = dist.assignments > 0
        s = np.where(active, s, 0.0)
        per_block = np.zeros(dist.num_blocks)
        np.add.at(per_block, dist.assignments[active] - 1, s[active])
        if active.any():
            masked = np.where(active, s, -np.inf)
            k = int(np.argmax(masked))   # first index on ties
            mx = float(masked[k])
        else:
            k, mx = None, float("-inf")
        return cls(per_prompt=s, per_block=per_block, active=active, argmax=k, max_value=mx)


@dataclass
class RelocationEvent:
    pruned_index: int
    source_block: int
    target_block: int
    idleness: float
    loss_before: float
    loss_after_tuning: float = float("nan")
    approx_reward: float = float("nan")

    def to_dict(self) -> dict:
        return {k: (float(v) if isinstance(v, (float, np.floating)) else int(v)) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "RelocationEvent":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__})


# ---------------------------------------------------------------------------
# scores
# ---------------------------------------------------------------------------

def _values(prompts) -> np.ndarray:
    return np.asarray(getattr(prompts, "values", prompts), dtype=np.float64)


def batch_loss(model, images, labels, prompts, dist: Distribution) -> float:
    with ad.no_grad():
        return model.loss(images, labels, Tensor(_values(prompts)), dist).item()


def idleness_exact(model, images, labels, prompts, dist: Distribution, k: int) -> float:
    """I_k = L(P, D) - L(P, D | d_k = 0) on one batch."""
    if dist[k] < 1:
        raise ContractError(f"prompt {k} is inactive")
    off = dist.copy()
    off.assignments[k] = 0
    return batch_loss(model, images, labels, prompts, dist) - batch_loss(model, images, labels, prompts, off)


def prompt_gradient(model, images, labels, prompts, dist: Distribution) -> tuple[float, np.ndarray]:
    """Loss and dL/dP at the current prompts on one batch."""
    P = Tensor(_values(prompts).copy(), requires_grad=True)
    loss = model.loss(images, labels, P, dist)
    value = ad.forward_scalar(loss)
    grads = ad.backward(loss)
    return value, grads.get(P, np.zeros_like(P.data))


def idleness_approx(grad, prompts, dist: Distribution) -> IdlenessReport:
    """First-order scores: I_hat_k = g_k . p_k for every active prompt."""
    P = _values(prompts)
    if grad is None:
        if dist.active_count:
            raise ContractError("no gradient available for the active prompts")
        grad = np.zeros_like(P)
    g = np.asarray(grad, dtype=np.float64)
    if g.shape != P.shape:
        raise ContractError(f"gradient shape {g.shape} does not match prompts {P.shape}")
    act = dist.assignments > 0
    if not np.all(np.isfinite(g[act])):
        raise ContractError("missing (non-finite) gradient for an active prompt")
    scores = np.einsum("kd,kd->k", g, P)
    return IdlenessReport.from_scores(scores, dist)


def select_prune(report: IdlenessReport) -> int | None:
    """argmax_k of the scores if it is strictly positive, else None."""
    if report.argmax is None or not report.max_value > 0.0:
        return None
    if not report.active[report.argmax]:
        return None
    return report.argmax


# ---------------------------------------------------------------------------
# relocation
# ---------------------------------------------------------------------------

def prune(dist: Distribution, k: int) -> Distribution:
    if not 0 <= k < len(dist):
        raise ContractError(f"prompt index {k} out of range")
    if dist[k] < 1:
        raise ContractError(f"prompt {k} is already inactive")
    out = dist.copy()
    out.assignments[k] = 0
    return out


def allocate(dist: Distribution, k: int, block: int) -> Distribution:
    if not 0 <= k < len(dist):
        raise ContractError(f"prompt index {k} out of range")
    if dist[k] != 0:
        raise ContractError(f"prompt {k} must be pruned before allocation")
    if not 1 <= block <= dist.num_blocks:
        raise ContractError(f"block {block} outside [1, {dist.num_blocks}]")
    out = dist.copy()
    out.assignments[k] = block
    return out


def reward_exact(model, images, labels, before: tuple, after: tuple) -> float:
    """r = L(P, D-) - L(P', D+), ``before``/``after`` being (prompts, dist) snapshots."""
    (P, Dm), (P2, Dp) = before, after
    if _values(P).shape != _values(P2).shape or len(Dm) != len(Dp):
        raise ContractError("snapshots disagree in shape")
    return batch_loss(model, images, labels, P, Dm) - batch_loss(model, images, labels, P2, Dp)


def reward_approx(loss_before: float, loss_after_tuning: float, idleness: float) -> float:
    return float(loss_before) - float(loss_after_tuning) - float(idleness)


# ---------------------------------------------------------------------------
# distribution history (JSON lines)
# ---------------------------------------------------------------------------

_EVENT_KEYS = set(RelocationEvent.__dataclass_fields__)


def history_record(epoch: int, dist: Distribution, event: RelocationEvent | None,
                   max_idleness: float | None = None) -> dict:
    """One JSON-lines row: the distribution after the epoch, the relocation (if
    any) and the largest score seen at the start of the epoch (None if not scored)."""
    mx = None if max_idleness is None or not np.isfinite(max_idleness) else float(max_idleness)
    rec = {"epoch": int(epoch), "assignments": dist.to_list(),
           "event": None if event is None else event.to_dict(), "max_idleness": mx}
    validate_history_record(rec, dist.num_blocks)
    return rec


def validate_history_record(rec: dict, num_blocks: int | None = None) -> None:
    if set(rec) != {"epoch", "assignments", "event", "max_idleness"}:
        raise ContractError(f"history record has keys {sorted(rec)}")
    if not isinstance(rec["epoch"], int) or not isinstance(rec["assignments"], list):
        raise ContractError("history record has wrong field types")
    if not all(isinstance(v, int) and v >= 0 for v in rec["assignments"]):
        raise ContractError("assignments must be nonnegative integers")
    if num_blocks is not None and any(v > num_blocks for v in rec["assignments"]):
        raise ContractError("assignment exceeds the block count")
    if rec["max_idleness"] is not None and not isinstance(rec["max_idleness"], (int, float)):
        raise ContractError("max_idleness must be a number or null")
    ev = rec["event"]
    if ev is not None and set(ev) != _EVENT_KEYS:
        raise ContractError(f"event has keys {sorted(ev)}")


def dumps_record(rec: dict) -> str:
    return json.dumps(rec, sort_keys=True, separators=(",", ":"), allow_nan=True)


def write_history(path, records: Sequence[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            validate_history_record(rec)
            fh.write(dumps_record(rec) + "\n")


def read_history(path) -> list[dict]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ContractError(f"{path}:{lineno}: {exc}") from None
            validate_history_record(rec)
            out.append(rec)
    return out
