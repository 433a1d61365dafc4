"""Accuracy of a single fixed prompt block as its position moves.

Shows why placement matters on the synthetic task: the prompt only helps when
it sits at the block that carries the signal.

    python demos/placement_sweep.py [sensitive_block]
"""
import sys

import numpy as np

from promptreloc.data import make_block_sensitive_task
from promptreloc.trainer import TrainConfig, run_training

b = int(sys.argv[1]) if len(sys.argv) > 1 else 3
weights, ds = make_block_sensitive_task(seed=0, sensitive_block=b, n_train=128, n_test=128)

print(f"sensitive block {b}")
for block in range(1, 7):
    accs = []
    for seed in range(3):
        cfg = TrainConfig(total_epochs=15, batch_size=32, strategy="vpt_deep", seed=seed,
                          prompts_total=6, initial_distribution=[block] * 6)
        accs.append(run_training(cfg, ds, weights).records[-1].eval_accuracy)
    print(f"  prompts at block {block}: mean acc {np.mean(accs):.3f}")
