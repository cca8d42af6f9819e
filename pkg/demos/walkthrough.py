# %% [markdown]
# Walk a synthetic fleet through the whole CLI: prep, train, eval, export.
# The fleet uses the benchmark text layout, so pointing `--data_dir` at the
# real C-MAPSS directory runs the same steps on real engines.

# %%
import json
import sys
import tempfile
from pathlib import Path

import numpy as np

from stagnn import cli
from stagnn.synthetic import write_fleet

root = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="stagnn-demo-"))
data, out = root / "data", root / "run"
write_fleet(data, "FD001", n_train=30, n_test=10, seed=0)

# small widths so this finishes in well under a minute
args = [
    "--data_dir", str(data), "--output_dir", str(out),
    "--window", "30", "--model.gcn_dims", "[16,16]", "--model.tcn_dims", "[16,4]",
    "--model.dropout", "0.1", "--train.epochs", "15", "--train.trials", "2", "--train.lr", "0.01",
]

# %%
for command in ("prep", "train"):
    assert cli.main([command, *args]) == 0, command
print((out / cli.REPORT_FILE).read_text().splitlines()[-2:])

# %%
ckpt = out / "checkpoints" / "trial_00.ckpt"
assert cli.main(["eval", *args, "--checkpoint", str(ckpt)]) == 0
print((out / "eval" / "predictions.csv").read_text())

# %% [markdown]
# Export keeps every attention matrix of a window. Rows of each spatial
# matrix are a distribution over that sensor's graph neighbours.

# %%
assert cli.main(["export", *args, "--checkpoint", str(ckpt), "--units", "1"]) == 0
rec = cli.load_export(next((out / "export").glob("test_unit001_*.json")))
for name, alpha in rec["spatial"].items():
    strongest = np.unravel_index(np.argmax(alpha.mean(axis=0) - np.eye(24)), (24, 24))
    print(name, alpha.shape, "strongest off-diagonal pair", strongest)
for name, beta in rec["temporal"].items():
    print(name, beta.shape, "peak step per head", beta.argmax(axis=1))
print(json.dumps({k: rec[k] for k in ("unit_id", "label", "prediction")}))
