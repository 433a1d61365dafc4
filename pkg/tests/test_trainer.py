import numpy as np
import pytest

from promptreloc.autodiff import ContractError
from promptreloc.data import make_block_sensitive_task
from promptreloc.trainer import (METRICS_HEADER, EpochRecord, Run, TrainConfig, loss_jitter, metrics_csv,
                                 read_metrics, run_training)
from promptreloc.prompts import RelocationEvent
from promptreloc.verify import history_violations


@pytest.fixture(scope="module")
def task():
    return make_block_sensitive_task(seed=0, sensitive_block=2, n_train=32, n_test=32)


def make_run(task, **kw):
    w, ds = task
    return Run(TrainConfig(**{"total_epochs": 200, "batch_size": 16, **kw}), ds, w)


def force_scores(run, scores):
    """Make the next report's Taylor scores equal ``scores`` (one per prompt)."""
    P = run.prompts.values
    run.last_grad = np.asarray(scores, dtype=np.float64)[:, None] * P / np.sum(P * P, axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# config
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("kw", [dict(strategy="greedy"), dict(total_epochs=0), dict(learning_rate=0.0),
                                dict(idleness_source="oracle"), dict(prune_floor=1.5),
                                dict(initial_distribution="random"), dict(initial_distribution=[1, 2])])
def test_config_contract(kw):
    with pytest.raises(ContractError):
        TrainConfig(**kw)


def test_uniform_start_needs_a_prompt_per_block(task):
    with pytest.raises(ContractError):
        make_run(task, prompts_total=4)


# ---------------------------------------------------------------------------
# relocation behaviour
# ---------------------------------------------------------------------------

def test_first_epoch_only_tunes(task):
    rec = make_run(task).step()
    assert rec.phases == ["tune"] and rec.relocation is None


def test_no_positive_score_means_no_relocation(task):
    run = make_run(task)
    run.step()
    before = run.dist.to_list()
    force_scores(run, -np.arange(1.0, 13.0))
    rec = run.step()
    assert rec.relocation is None and run.dist.to_list() == before
    assert rec.phases == ["score", "tune"]
    assert rec.max_idleness == pytest.approx(-1.0)


def test_positive_score_relocates_the_argmax(task):
    run = make_run(task)
    run.step()
    before = run.dist.to_list()
    scores = -np.ones(12)
    scores[7] = 0.3
    force_scores(run, scores)
    rec = run.step()
    ev = rec.relocation
    assert ev.pruned_index == 7 and ev.source_block == before[7]
    assert ev.idleness == pytest.approx(0.3)
    assert rec.phases == ["score", "prune", "allocate", "tune", "reward"]
    assert run.dist.to_list()[:7] == before[:7] and run.dist.to_list()[8:] == before[8:]
    assert run.dist[7] == ev.target_block
    assert rec.reward == pytest.approx(ev.loss_before - ev.loss_after_tuning - ev.idleness)
    assert run.history[-1]["event"]["pruned_index"] == 7


def test_moved_prompt_momentum_is_cleared(task):
    run = make_run(task)
    run.step()
    scores = -np.ones(12)
    scores[3] = 1.0
    force_scores(run, scores)
    buf = run.opt.buffers[0]
    seen = {}
    orig = run._tune_epoch

    def spy():
        seen["row"] = run.opt.buffers[0][3].copy()
        seen["other"] = run.opt.buffers[0][4].copy()
        return orig()

    run._tune_epoch = spy
    run.step()
    assert np.all(seen["row"] == 0) and np.any(seen["other"] != 0)
    assert buf is run.opt.buffers[0]


def test_vpt_deep_distribution_is_fixed(task):
    w, ds = task
    res = run_training(TrainConfig(total_epochs=4, batch_size=16, strategy="vpt_deep"), ds, w)
    assert all(r.relocation is None for r in res.records)
    assert {tuple(h["assignments"]) for h in res.history} == {(1, 1, 2, 2, 3, 3, 4, 4, 5, 5, 6, 6)}


def test_vpt_shallow_puts_everything_at_the_input(task):
    w, ds = task
    res = run_training(TrainConfig(total_epochs=2, batch_size=16, strategy="vpt_shallow"), ds, w)
    assert set(res.distribution.to_list()) == {1}


def test_prune_only_stops_at_the_floor(task):
    run = make_run(task, strategy="prune_only", prompts_total=20, prune_floor=0.5)
    run.step()
    pruned = 0
    for _ in range(14):
        force_scores(run, np.linspace(0.1, 1.0, 20))
        rec = run.step()
        pruned += rec.relocation is not None
        assert rec.reward != rec.reward     # nan: nothing to learn
    assert run.dist.active_count == 10 and pruned == 10


def test_random_prune_is_uniform_over_active_prompts(task):
    run = make_run(task, strategy="random_prune", idleness_source="last_batch", total_epochs=400)
    run._tune_epoch = lambda: 0.0            # the pruning draw does not depend on tuning
    picks = []
    for _ in range(240):
        force_scores(run, np.full(12, 0.5))
        rec = run.step()
        if rec.relocation is not None:
            picks.append(rec.relocation.pruned_index)
    counts = np.bincount(picks, minlength=12)
    assert len(picks) == 239
    expected = len(picks) / 12
    # chi-square upper 0.1% point for 11 degrees of freedom
    assert np.sum((counts - expected) ** 2 / expected) < 31.264


def test_adding_grows_to_the_cap(task):
    w, ds = task
    cfg = TrainConfig(total_epochs=13, batch_size=16, strategy="adding", prompts_total=12)
    res = run_training(cfg, ds, w)
    active = [sum(1 for a in h["assignments"] if a) for h in res.history]
    assert active[0] == 6 and active[-1] == 12
    assert all(b - a in (0, 1) for a, b in zip(active, active[1:]))
    adds = [r for r in res.records if r.relocation is not None]
    assert all(r.relocation.source_block == 0 for r in adds)
    assert history_violations(res.history, "adding") == []
    # the relocation checks must still see a growing active count as a violation
    assert any("active count" in v for v in history_violations(res.history, "provpt"))
    # and an addition that takes an already active prompt is flagged
    i = next(j for j, h in enumerate(res.history) if h["event"])
    tampered = [dict(h) for h in res.history]
    tampered[i] = {**tampered[i], "event": {**tampered[i]["event"], "source_block": 3}}
    assert any("already active" in v for v in history_violations(tampered, "adding"))


def test_naive_rl_moves_a_prompt_from_the_chosen_source(task):
    w, ds = task
    res = run_training(TrainConfig(total_epochs=6, batch_size=16, strategy="naive_rl"), ds, w)
    assert history_violations(res.history, "naive_rl") == []


@pytest.mark.parametrize("strategy", ["provpt", "bandit_alloc", "random_prune", "prune_only"])
def test_history_obeys_the_guard(task, strategy):
    w, ds = task
    res = run_training(TrainConfig(total_epochs=8, batch_size=16, strategy=strategy), ds, w)
    assert history_violations(res.history, strategy) == []


def test_epoch_mean_gradient_source(task):
    w, ds = task
    res = run_training(TrainConfig(total_epochs=3, batch_size=16, idleness_source="epoch_mean"), ds, w)
    assert history_violations(res.history, "provpt") == []


# ---------------------------------------------------------------------------
# records and determinism
# ---------------------------------------------------------------------------

def test_learning_rate_is_fixed(task):
    w, ds = task
    res = run_training(TrainConfig(total_epochs=3, batch_size=16, learning_rate=0.07), ds, w)
    assert [r.learning_rate for r in res.records] == [0.07] * 3


def test_metrics_format_and_round_trip(tmp_path):
    recs = [EpochRecord(1, 0.1, 2 / 3, 0.5, None, [1, 2], 0.1),
            EpochRecord(2, 0.123456789012, 0.25, 0.75, RelocationEvent(1, 2, 1, 0.1, 1.0, 0.9, -0.2), [1, 1], 0.1,
                        0.1, -0.2)]
    text = metrics_csv(recs)
    lines = text.splitlines()
    assert lines[0] == ",".join(METRICS_HEADER)
    assert lines[1] == "1,0.1,0.666666667,0.5,0,,,,"
    assert lines[2] == "2,0.123456789,0.25,0.75,1,1,2,1,-0.2"
    path = tmp_path / "m.csv"
    path.write_text(text)
    back = read_metrics(path)
    assert back[0]["k_star"] is None and back[1]["target"] == 1 and back[1]["reward"] == -0.2
    path.write_text("epoch,loss\n")
    with pytest.raises(ContractError):
        read_metrics(path)


def test_runs_are_deterministic(task, tmp_path):
    w, ds = task
    cfg = TrainConfig(total_epochs=4, batch_size=16, seed=3)
    a = run_training(cfg, ds, w, out_dir=str(tmp_path / "a"))
    b = run_training(TrainConfig(**cfg.to_dict()), ds, w, out_dir=str(tmp_path / "b"))
    assert a.metrics_csv() == b.metrics_csv() and a.history_jsonl() == b.history_jsonl()
    assert (tmp_path / "a" / "metrics.csv").read_text() == a.metrics_csv()
    c = run_training(TrainConfig(**{**cfg.to_dict(), "seed": 4}), ds, w)
    assert c.metrics_csv() != a.metrics_csv()


def test_backbone_stays_frozen(task):
    w, ds = task
    res = run_training(TrainConfig(total_epochs=2, batch_size=16), ds, w)
    after = res.model.w.to_arrays()
    for k, v in w.to_arrays().items():
        if not k.startswith("head."):
            np.testing.assert_array_equal(after[k], v)
    assert not np.array_equal(after["head.W"], w.to_arrays()["head.W"])


def test_loss_jitter_window():
    recs = [EpochRecord(e, 0, float(l), 0, None, [], 0.1) for e, l in enumerate([5, 1, 2, 4, 7, 11, 0, 0, 0, 0], 1)]
    # window covers epochs 2..6 -> diffs 1, 2, 3, 4
    assert loss_jitter(recs) == pytest.approx(np.var([1, 2, 3, 4]))
    with pytest.raises(ContractError):
        loss_jitter(recs[:3])
