"""Acceptance criteria at full size.

Each test prints one ``criterion NN: PASS|FAIL ...`` line (also collected in
the terminal summary) and then asserts.  The experiment criteria share runs
through the in-process cache in ``promptreloc.experiments``, so provpt at a
given block and seed is trained once.  Slow: roughly 40 minutes on one core.
"""
import time

import numpy as np
import pytest

from promptreloc import experiments as ex
from promptreloc import verify

from conftest import ACCEPTANCE_LINES

BLOCKS = (2, 5)
PAIRED_BLOCK = 5


def report(n: int, ok: bool, detail: str, seconds: float) -> None:
    line = f"criterion {n:02d}: {'PASS' if ok else 'FAIL'}  {detail}  [{seconds:.1f}s]"
    ACCEPTANCE_LINES.append(line)
    print(line)


def check(n: int, result: verify.CheckResult, limit: float | None) -> None:
    ok = result.ok and (limit is None or result.seconds < limit)
    report(n, ok, result.detail + ("" if limit is None else f"; limit {limit:.0f}s"), result.seconds)
    assert result.ok, result.detail
    if limit is not None:
        assert result.seconds < limit


def test_criterion_01_gradient_fidelity():
    check(1, verify.check_gradients(n_seeds=100, rtol=1e-4), 120)


def test_criterion_02_taylor_fidelity():
    check(2, verify.check_taylor(n_configs=200), 300)


def test_criterion_03_reward_identity():
    check(3, verify.check_reward_identity(n=50, tol=1e-12), 60)


def test_criterion_05_ppo():
    check(5, verify.check_ppo(n_seeds=100, updates=200), 180)


def test_criterion_10_reproducibility():
    check(10, verify.check_reproducibility(epochs=6), None)


@pytest.mark.parametrize("block", BLOCKS)
def test_criterion_06_distribution_learning(block):
    t = time.perf_counter()
    cells = ex.run_cells("provpt", block)
    secs = time.perf_counter() - t
    hits = sum(c.concentrated for c in cells)
    at_b = [c.counts[block - 1] for c in cells]
    ok = hits >= 8 and ex.elapsed(cells) < 900
    report(6, ok, f"b={block}: count strictly maximal at b in {hits}/10 seeds (need 8); "
                  f"prompts at b per seed {at_b}; limit 900s", secs)
    assert hits >= 8, [c.counts for c in cells]
    assert ex.elapsed(cells) < 900


def test_criterion_07_directional_gain():
    t = time.perf_counter()
    a = ex.run_cells("provpt", PAIRED_BLOCK)
    b = ex.run_cells("vpt_deep", PAIRED_BLOCK)
    cmp = ex.paired_comparison(a, b)
    secs = time.perf_counter() - t
    ok = cmp["mean_a"] >= cmp["mean_b"] and cmp["p"] < 0.1 and ex.elapsed(a + b) < 1200
    report(7, ok, f"b={PAIRED_BLOCK}: mean acc provpt {cmp['mean_a']:.4f} vs vpt_deep {cmp['mean_b']:.4f}; "
                  f"wins/losses/ties {cmp['wins']}/{cmp['losses']}/{cmp['ties']}; sign-test p={cmp['p']:.3g}",
           secs)
    assert cmp["mean_a"] >= cmp["mean_b"]
    assert cmp["p"] < 0.1
    assert ex.elapsed(a + b) < 1200


def test_criterion_08_ablation_ordering():
    t = time.perf_counter()
    med = {s: ex.median_accuracy(ex.run_cells(s, PAIRED_BLOCK))
           for s in ("provpt", "random_prune", "bandit_alloc", "naive_rl")}
    secs = time.perf_counter() - t
    cells = [c for s in med for c in ex.run_cells(s, PAIRED_BLOCK)]
    orders = {"provpt >= random_prune": med["provpt"] >= med["random_prune"],
              "provpt >= bandit_alloc": med["provpt"] >= med["bandit_alloc"],
              "provpt >= naive_rl": med["provpt"] >= med["naive_rl"]}
    ok = all(orders.values()) and ex.elapsed(cells) < 2700
    detail = ", ".join(f"{s} {m:.4f}" for s, m in med.items())
    detail += "; " + ", ".join(f"{k}: {'yes' if v else 'no'}" for k, v in orders.items())
    report(8, ok, f"b={PAIRED_BLOCK} medians: {detail}", secs)
    assert all(orders.values()), med
    assert ex.elapsed(cells) < 2700


def test_criterion_09_adding_instability():
    t = time.perf_counter()
    add = ex.run_cells("adding", PAIRED_BLOCK)
    pro = ex.run_cells("provpt", PAIRED_BLOCK)
    wins = sum(a.jitter > p.jitter for a, p in zip(add, pro))
    secs = time.perf_counter() - t
    ratio = np.median([a.jitter / p.jitter for a, p in zip(add, pro)])
    report(9, wins >= 7, f"b={PAIRED_BLOCK}: adding jitter > provpt jitter in {wins}/10 seeds (need 7); "
                         f"median ratio {ratio:.3g}", secs)
    assert wins >= 7


def test_criterion_04_relocation_guard():
    # runs last so that every history produced above is audited as well
    res = verify.check_guard(epochs=12)
    cells = ex.cached_cells()
    bad = [(c.strategy, c.block, c.seed, c.violations[:2]) for c in cells if c.violations]
    ok = res.ok and not bad
    report(4, ok, f"{res.detail}; {len(cells)} experiment histories audited, {len(bad)} with violations",
           res.seconds)
    assert res.ok, res.detail
    assert not bad, bad
