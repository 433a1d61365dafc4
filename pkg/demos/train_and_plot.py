"""Train one provpt run on the block-5 task and render its figures.

    python demos/train_and_plot.py [out_dir]
"""
import os
import sys

from promptreloc import cli

out = sys.argv[1] if len(sys.argv) > 1 else "demo-runs"
os.environ["PROMPT_RELOC_OUT"] = out
task = "synthetic:b=5"

for strategy in ("provpt", "vpt_deep"):
    code = cli.main(["train", "--strategy", strategy, "--seed", "0", "--epochs", "20",
                     "--task", task, "--name", strategy])
    if code:
        sys.exit(code)

sys.exit(cli.main(["plot", os.path.join(out, "provpt"), os.path.join(out, "vpt_deep"),
                   "--out", os.path.join(out, "figures")]))
