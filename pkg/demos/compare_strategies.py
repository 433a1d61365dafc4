"""Paired comparison of allocation strategies over a few seeds.

A scaled-down version of the acceptance experiments.

    python demos/compare_strategies.py [n_seeds] [epochs]

The jitter statistic needs at least 10 epochs.
"""
import sys

import numpy as np

from promptreloc import experiments as ex

n = int(sys.argv[1]) if len(sys.argv) > 1 else 3
epochs = int(sys.argv[2]) if len(sys.argv) > 2 else 15
block = 5

base = ex.run_cells("provpt", block, seeds=range(n), epochs=epochs)
print(f"{'strategy':<14}{'median acc':>11}{'jitter':>11}  counts at block {block}")
for s in ("provpt", "vpt_deep", "random_prune", "bandit_alloc", "naive_rl", "adding"):
    cells = ex.run_cells(s, block, seeds=range(n), epochs=epochs)
    jit = np.median([c.jitter for c in cells])
    print(f"{s:<14}{ex.median_accuracy(cells):>11.3f}{jit:>11.2e}  {[c.counts[block - 1] for c in cells]}")
    if s != "provpt":
        cmp = ex.paired_comparison(base, cells)
        print(f"{'':<14}provpt wins/losses/ties {cmp['wins']}/{cmp['losses']}/{cmp['ties']}, sign-test p={cmp['p']:.3g}")
