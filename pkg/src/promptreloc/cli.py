"""Command line: train, sweep, plot, gen-data, verify.

Artifacts go under ``$PROMPT_RELOC_OUT`` (default ``./runs``).  Exit codes:
0 success, 1 runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .autodiff import ContractError
from .checkpoint import load_arrays, save_arrays
from .data import SyntheticSpec, make_block_sensitive_task, normalize, preset, save_dataset
from .plotting import accuracy_curves, attention_heatmap, attention_matrix, distribution_bars
from .prompts import Distribution, read_history
from .trainer import STRATEGIES, TrainConfig, read_metrics, run_training
from .vit import PromptedViT, VitConfig, VitWeights

OUT_ENV = "PROMPT_RELOC_OUT"
EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
PHASES = ("score", "prune", "allocate", "tune", "reward")

# short task keys -> SyntheticSpec fields
_TASK_ALIASES = {"b": "sensitive_block", "L": "num_blocks", "d": "embed_dim", "K": "num_classes",
                 "J": "num_factors"}
# CLI flag names -> TrainConfig fields
_FLAG_FIELDS = {"epochs": "total_epochs", "lr": "learning_rate", "prompts": "prompts_total",
                "batch_size": "batch_size", "strategy": "strategy", "seed": "seed"}


class UsageError(Exception):
    pass


def out_root() -> str:
    return os.environ.get(OUT_ENV, "./runs")


def code_version() -> str:
    """Package version plus a digest of the module sources."""
    h = hashlib.sha256()
    here = os.path.dirname(__file__)
    for name in sorted(os.listdir(here)):
        if name.endswith(".py"):
            with open(os.path.join(here, name), "rb") as fh:
                h.update(name.encode() + fh.read())
    return f"{__version__}+{h.hexdigest()[:12]}"


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

def _coerce(value: str, default):
    if isinstance(default, bool):
        v = value.strip().lower()
        if v in ("1", "true", "yes", "on"):
            return True
        if v in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    return value


def parse_task(task: str) -> tuple[SyntheticSpec, int | None]:
    """``synthetic:b=3,L=6,seed=1`` -> (spec, task seed or None)."""
    kind, _, rest = task.partition(":")
    if kind != "synthetic":
        raise UsageError(f"unknown task kind {kind!r} (only 'synthetic' is available)")
    defaults = {f.name: f.default for f in dataclasses.fields(SyntheticSpec)}
    kw, seed = {}, None
    for item in filter(None, (s.strip() for s in rest.split(","))):
        key, eq, val = item.partition("=")
        if not eq:
            raise UsageError(f"task option {item!r} is not key=value")
        if key == "seed":
            seed = int(val)
            continue
        name = _TASK_ALIASES.get(key, key)
        if name not in defaults:
            raise UsageError(f"unknown task option {key!r}")
        try:
            kw[name] = _coerce(val, defaults[name])
        except ValueError as exc:
            raise UsageError(f"task option {key}: {exc}") from None
    try:
        return SyntheticSpec(**kw), seed
    except ContractError as exc:
        raise UsageError(str(exc)) from None


def read_config_file(path: str) -> dict[str, str]:
    """key=value lines; blank lines and ``#`` comments ignored."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, eq, val = line.partition("=")
            if not eq:
                raise UsageError(f"{path}:{lineno}: expected key=value")
            out[key.strip().replace("-", "_")] = val.strip()
    return out


def build_config(file_values: dict[str, str], flag_values: dict[str, object]) -> tuple[TrainConfig, str]:
    """Defaults < config file < flags.  Returns the config and the task string."""
    defaults = {f.name: f.default for f in dataclasses.fields(TrainConfig)}
    task = "synthetic:b=3"
    kw = {}
    for source in (file_values, flag_values):
        for key, val in source.items():
            if val is None:
                continue
            if key == "task":
                task = str(val)
                continue
            name = _FLAG_FIELDS.get(key, key)
            if name not in defaults:
                raise UsageError(f"unknown configuration key {key!r}")
            if isinstance(val, str):
                if name == "initial_distribution" and val != "uniform":
                    val = [int(v) for v in val.split(",")]
                else:
                    try:
                        val = _coerce(val, defaults[name])
                    except ValueError as exc:
                        raise UsageError(f"{key}: {exc}") from None
            kw[name] = val
    try:
        return TrainConfig(**kw), task
    except ContractError as exc:
        raise UsageError(str(exc)) from None


def load_task(task: str, seed: int):
    spec, task_seed = parse_task(task)
    return make_block_sensitive_task(spec, seed=seed if task_seed is None else task_seed)


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------

@dataclass
class RunManifest:
    config: dict
    task: str
    code_version: str
    seed: int
    artifacts: dict
    timings: dict
    wall_time: float
    final_accuracy: float
    vit: dict = field(default_factory=dict)

    def validate(self) -> None:
        missing = [p for p in self.artifacts.values() if not os.path.exists(p)]
        if missing:
            raise ContractError(f"manifest references missing artifacts: {missing}")
        if sum(self.timings.get(k, 0.0) for k in PHASES) > self.wall_time + 1e-9:
            raise ContractError("phase timings exceed the wall time")

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(dataclasses.asdict(self), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path: str) -> "RunManifest":
        with open(path, encoding="utf-8") as fh:
            d = json.load(fh)
        names = {f.name for f in dataclasses.fields(cls)}
        if not names.issuperset(d) or not {"config", "task", "artifacts", "timings"} <= set(d):
            raise ContractError(f"{path}: not a run manifest")
        return cls(**d)


def train_one(cfg: TrainConfig, task: str, out_dir: str) -> RunManifest:
    weights, ds = load_task(task, cfg.seed)
    res = run_training(cfg, ds, weights, out_dir=out_dir)
    paths = dict(res.paths)
    paths["manifest"] = os.path.join(out_dir, "manifest.json")
    man = RunManifest(config=cfg.to_dict(), task=task, code_version=code_version(), seed=cfg.seed,
                      artifacts=paths, timings={k: res.timings.get(k, 0.0) for k in PHASES},
                      wall_time=res.wall_time, final_accuracy=res.final_accuracy,
                      vit=weights.cfg.to_dict())
    man.save(paths["manifest"])
    man.validate()
    return man


# ---------------------------------------------------------------------------
# verbs
# ---------------------------------------------------------------------------

def _train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value configuration file")
    p.add_argument("--task", help="task string, e.g. synthetic:b=3,L=6")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--prompts", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any training field (repeatable)")


def _flag_values(args, keys) -> dict:
    vals = {k: getattr(args, k) for k in keys}
    for item in args.set:
        key, eq, val = item.partition("=")
        if not eq:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        vals[key.replace("-", "_")] = val
    return vals


def cmd_train(args) -> int:
    file_values = read_config_file(args.config) if args.config else {}
    cfg, task = build_config(file_values, _flag_values(
        args, ("strategy", "seed", "epochs", "lr", "prompts", "batch_size", "task")))
    parse_task(task)
    name = args.name or f"{cfg.strategy}-seed{cfg.seed}"
    out_dir = os.path.join(out_root(), name)
    man = train_one(cfg, task, out_dir)
    print(f"{name}: final accuracy {man.final_accuracy:.4f}, artifacts in {out_dir}")
    return EXIT_OK


def _parse_seeds(text: str) -> list[int]:
    seeds = []
    for part in text.split(","):
        lo, dash, hi = part.partition("-")
        try:
            seeds.extend(range(int(lo), int(hi) + 1) if dash else [int(lo)])
        except ValueError:
            raise UsageError(f"bad seed list {text!r}") from None
    return seeds


def _sweep_job(cfg_dict: dict, task: str, out_dir: str) -> float:
    return train_one(TrainConfig(**cfg_dict), task, out_dir).final_accuracy


SWEEP_HEADER = ["strategy", "seed", "final_accuracy"]


def summarize(rows: list[dict], strategies: list[str], expected: int) -> list[list[str]]:
    """Median/IQR of final accuracy per strategy; ``complete`` says whether every seed finished."""
    table = [["strategy", "runs", "median", "q25", "q75", "complete"]]
    for s in strategies:
        acc = np.array([r["final_accuracy"] for r in rows if r["strategy"] == s])
        if acc.size:
            q25, med, q75 = np.percentile(acc, [25, 50, 75])
            stats = [f"{med:.6f}", f"{q25:.6f}", f"{q75:.6f}"]
        else:
            stats = ["", "", ""]
        table.append([s, str(acc.size), *stats, "yes" if acc.size == expected else "no"])
    return table


def cmd_sweep(args) -> int:
    strategies = [s.strip() for s in args.strategies.split(",") if s.strip()]
    bad = [s for s in strategies if s not in STRATEGIES]
    if bad or not strategies:
        raise UsageError(f"unknown strategies {bad}; choose from {', '.join(STRATEGIES)}")
    seeds = _parse_seeds(args.seeds)
    file_values = read_config_file(args.config) if args.config else {}
    base, task = build_config(file_values, _flag_values(args, ("epochs", "lr", "prompts", "batch_size", "task")))
    parse_task(task)
    root = os.path.join(out_root(), args.name)
    os.makedirs(root, exist_ok=True)
    jobs = []
    for s in strategies:
        for seed in seeds:
            cfg = TrainConfig(**{**base.to_dict(), "strategy": s, "seed": seed})
            jobs.append((s, seed, cfg.to_dict(), os.path.join(root, f"{s}-seed{seed}")))
    rows: list[dict] = []
    rows_path = os.path.join(root, "summary.csv")
    failed = False
    with open(rows_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_HEADER)
        fh.flush()

        def record(s, seed, acc):
            rows.append({"strategy": s, "seed": seed, "final_accuracy": acc})
            w.writerow([s, seed, f"{acc:.9g}"])
            fh.flush()

        try:
            if args.jobs > 1:
                with ProcessPoolExecutor(args.jobs) as pool:
                    futs = {pool.submit(_sweep_job, c, task, d): (s, seed) for s, seed, c, d in jobs}
                    for fut in as_completed(futs):
                        s, seed = futs[fut]
                        try:
                            record(s, seed, fut.result())
                        except Exception as exc:        # keep the other runs going
                            failed = True
                            print(f"{s} seed {seed} failed: {exc}", file=sys.stderr)
            else:
                for s, seed, c, d in jobs:
                    try:
                        record(s, seed, _sweep_job(c, task, d))
                    except Exception as exc:
                        failed = True
                        print(f"{s} seed {seed} failed: {exc}", file=sys.stderr)
        except KeyboardInterrupt:
            failed = True
            print("interrupted; writing partial summary", file=sys.stderr)
        finally:
            table = summarize(rows, strategies, len(seeds))
            with open(os.path.join(root, "summary_table.csv"), "w", newline="") as th:
                csv.writer(th, lineterminator="\n").writerows(table)
    for line in table:
        print("  ".join(f"{c:>12}" for c in line))
    return EXIT_FAIL if failed else EXIT_OK


def _run_dir_artifacts(path: str) -> RunManifest:
    man_path = os.path.join(path, "manifest.json")
    if not os.path.exists(man_path):
        raise FileNotFoundError(f"{path}: no manifest.json")
    man = RunManifest.load(man_path)
    for key in ("metrics", "distribution", "checkpoint"):
        if not os.path.exists(man.artifacts.get(key, "")):
            raise FileNotFoundError(f"{path}: missing {key} artifact")
    return man


def cmd_plot(args) -> int:
    out = args.out or os.path.join(out_root(), "plots")
    os.makedirs(out, exist_ok=True)
    curves = {}
    written = []
    for path in args.runs:
        man = _run_dir_artifacts(path)
        label = os.path.basename(os.path.normpath(path))
        metrics = read_metrics(man.artifacts["metrics"])
        curves[label] = ([m["epoch"] for m in metrics], [m["eval_acc"] for m in metrics])
        hist = read_history(man.artifacts["distribution"])
        L = int(man.vit["num_blocks"])
        bars = os.path.join(out, f"{label}-distribution.svg")
        distribution_bars(hist, L, title=f"{label}: prompts per block").save(bars)
        written.append(bars)
        heat = os.path.join(out, f"{label}-attention.svg")
        arrays = load_arrays(man.artifacts["checkpoint"])
        M = checkpoint_attention(man, arrays, n_images=args.images)
        attention_heatmap(M, title=f"{label}: cls -> prompt attention").save(heat)
        written.append(heat)
    acc = os.path.join(out, "accuracy.svg")
    accuracy_curves(curves, title="test accuracy").save(acc)
    written.append(acc)
    for p in written:
        print(p)
    return EXIT_OK


def checkpoint_attention(man: RunManifest, arrays: dict, n_images: int = 64) -> np.ndarray:
    """Rebuild the tuned model from a checkpoint and average cls->prompt attention over test images."""
    vcfg = VitConfig(**man.vit)
    weights = VitWeights.from_arrays(vcfg, {k[6:]: v for k, v in arrays.items() if k.startswith("model.")})
    model = PromptedViT(vcfg, weights)
    dist = Distribution(arrays["assignments"].astype(np.int64), vcfg.num_blocks)
    _, ds = load_task(man.task, man.seed)
    x, _ = ds.subset("test")
    x = normalize(x[:n_images], preset(man.config.get("normalization", "inception"), vcfg.channels))
    return attention_matrix(model, x, arrays["prompts"], dist)


def cmd_gen_data(args) -> int:
    spec, task_seed = parse_task(args.task)
    seed = args.seed if task_seed is None else task_seed
    weights, ds = make_block_sensitive_task(spec, seed=seed)
    out = args.out or os.path.join(out_root(), "data", f"synthetic-b{spec.sensitive_block}-seed{seed}.pvds")
    os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
    save_dataset(out, ds)
    print(f"wrote {len(ds)} samples to {out}")
    if args.weights:
        save_arrays(args.weights, weights.to_arrays())
        print(f"wrote backbone to {args.weights}")
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verify import run_checks
    results = run_checks(quick=not args.full)
    for r in results:
        print(r.line())
    n_ok = sum(r.ok for r in results)
    print(f"{n_ok}/{len(results)} checks passed")
    return EXIT_OK if n_ok == len(results) else EXIT_FAIL


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="promptreloc", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="verb", parser_class=_Parser)

    t = sub.add_parser("train", help="one training run")
    t.add_argument("--strategy")
    t.add_argument("--seed", type=int)
    t.add_argument("--name", help="run directory name under the artifact root")
    _train_flags(t)
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sweep", help="strategies x seeds, with a summary table")
    s.add_argument("--strategies", required=True, help="comma separated")
    s.add_argument("--seeds", default="0-2", help="e.g. 0-9 or 0,3,5")
    s.add_argument("--jobs", type=int, default=1, help="concurrent runs")
    s.add_argument("--name", default="sweep")
    _train_flags(s)
    s.set_defaults(func=cmd_sweep)

    pl = sub.add_parser("plot", help="SVG figures from run directories")
    pl.add_argument("runs", nargs="+")
    pl.add_argument("--out")
    pl.add_argument("--images", type=int, default=64, help="test images averaged in the heatmap")
    pl.set_defaults(func=cmd_plot)

    g = sub.add_parser("gen-data", help="write a synthetic dataset in the binary format")
    g.add_argument("--task", default="synthetic:b=3")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out")
    g.add_argument("--weights", help="also write the frozen backbone checkpoint here")
    g.set_defaults(func=cmd_gen_data)

    v = sub.add_parser("verify", help="oracle and invariant checks with a pass/fail report")
    v.add_argument("--full", action="store_true", help="acceptance-size checks (slow)")
    v.set_defaults(func=cmd_verify)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.verb is None:
            raise UsageError("missing command")
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"promptreloc: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ContractError, FloatingPointError, ValueError) as exc:
        print(f"promptreloc: {args.verb} failed: {exc}", file=sys.stderr)
        return EXIT_FAIL
