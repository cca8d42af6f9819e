import numpy as np
import pytest

from stagnn.synthetic import write_fleet


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def fleet_dir(tmp_path_factory):
    """Small single-regime fleet in the benchmark text layout."""
    d = tmp_path_factory.mktemp("fleet")
    write_fleet(d, "FD001", n_train=8, n_test=6, seed=3, min_life=40, max_life=70)
    write_fleet(d, "FD002", n_train=10, n_test=6, n_conditions=6, seed=4, min_life=40, max_life=70)
    return d


@pytest.fixture(scope="session")
def toy_run_args(fleet_dir):
    """CLI flags for a run that trains in about a second."""
    return [
        "--data_dir", str(fleet_dir),
        "--window", "12",
        "--model.gcn_dims", "[6,6]",
        "--model.tcn_dims", "[6,3]",
        "--model.heads_spatial", "2",
        "--model.heads_temporal", "2",
        "--train.epochs", "2",
        "--train.trials", "2",
        "--train.batch_size", "64",
    ]
