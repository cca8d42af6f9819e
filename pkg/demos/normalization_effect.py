# %% [markdown]
# On a six-regime fleet, raw sensor levels mostly encode the operating
# condition. Scaling each regime with its own min/max removes that offset and
# leaves the degradation trend. This compares the two scalings with the same
# model and seeds.

# %%
import sys
import tempfile
from pathlib import Path

from stagnn import cli
from stagnn import tensor as T
from stagnn.config import RunConfig
from stagnn.model import ModelConfig
from stagnn.synthetic import write_fleet
from stagnn.training import TrainConfig

root = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="stagnn-norm-"))
write_fleet(root / "data", "FD002", n_train=30, n_test=30, n_conditions=6, seed=2)

# %%
results = {}
for mode in ("unified", "clustered"):
    cfg = RunConfig(
        subset="FD002",
        data_dir=str(root / "data"),
        normalization=mode,
        window=30,
        output_dir=str(root / mode),
        model=ModelConfig(variant="ATCN", tcn_dims=(16, 4), dropout=0.1),
        train=TrainConfig(epochs=10, batch_size=32, trials=2),
    )
    with T.deterministic():
        cli.cmd_prep(cfg)
        results[mode] = cli.cmd_train(cfg)

# %%
u, c = results["unified"].rmse_mean, results["clustered"].rmse_mean
print(f"unified {u:.2f}  clustered {c:.2f}  ({100 * (1 - c / u):.0f}% lower)")
