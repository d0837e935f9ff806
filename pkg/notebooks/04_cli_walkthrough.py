# %% [markdown]
# # Command-line pipeline
#
# The same steps as the library walkthrough, driven through the CLI
# entry point. Each command writes a directory of artifacts and prints a
# one-line JSON summary.

# %%
import csv
import tempfile
from pathlib import Path

from voxelnext.cli import run

root = Path(tempfile.mkdtemp())
fast = ["--threads", "1", "--seed", "0", "--set", "train.batches_per_epoch=5", "--set", "train.batch_size=2"]

# %%
run(["gen-data", "--out", str(root / "data"), "--seed", "0", "--set", "data.n_cases=8", "--set", "data.n_train=6"])
run(["pretrain", "--out", str(root / "pre"), "--data", str(root / "data"), "--epochs", "3", *fast])
run(["finetune", "--out", str(root / "ft"), "--data", str(root / "data"), "--ckpt", str(root / "pre"),
     "--epochs", "3", "--set", "train.warmup_epochs=1", *fast])

# %%
run(["infer", "--out", str(root / "inf"), "--data", str(root / "data"), "--ckpt", str(root / "ft"), "--set", "data.split=test"])
run(["eval", "--out", str(root / "ev"), "--data", str(root / "data"), "--pred", str(root / "inf")])
with open(root / "ev" / "aggregate.csv", newline="") as fh:
    for row in csv.DictReader(fh):
        print(row)
