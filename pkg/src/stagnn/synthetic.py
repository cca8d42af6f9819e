"""Synthetic run-to-failure fleets in the C-MAPSS file layout.

Useful for demos and tests when the benchmark files are not at hand.  Each
cycle's operating regime sets large per-sensor offsets; a slowly accelerating
health index adds a small degradation trend on top.  With several regimes the
offsets dwarf the trend unless each regime is normalized on its own, which
mirrors the situation in the multi-condition benchmark subsets.
"""

from __future__ import annotations

import numpy as np

from .dataset import N_SENSORS, EngineTrajectory, write_subset

SINGLE_REGIME = np.array([[0.0, 0.0, 100.0]])
SIX_REGIMES = np.array(
    [
        [0.0, 0.0, 100.0],
        [10.0, 0.25, 100.0],
        [20.0, 0.7, 100.0],
        [25.0, 0.62, 60.0],
        [35.0, 0.84, 100.0],
        [42.0, 0.84, 100.0],
    ]
)
# sensors that never move within a regime (1-based, as in the benchmark)
FLAT_SENSORS = (1, 5, 6, 10, 16, 18, 19)
# absolute jitter around each regime's nominal settings
SETTING_NOISE = np.array([0.003, 0.0003, 0.0])


class _Plant:
    def __init__(self, n_conditions: int, rng: np.random.Generator):
        self.regimes = SINGLE_REGIME if n_conditions == 1 else SIX_REGIMES[:n_conditions]
        self.base = rng.uniform(10.0, 2000.0, size=N_SENSORS)
        self.regime_shift = rng.uniform(-0.2, 0.2, size=(len(self.regimes), N_SENSORS))
        self.regime_shift[0] = 0.0
        self.trend = rng.choice([-1.0, 1.0], size=N_SENSORS) * rng.uniform(0.004, 0.012, size=N_SENSORS)
        self.noise = rng.uniform(0.0005, 0.0015, size=N_SENSORS)
        flat = np.array(FLAT_SENSORS) - 1
        self.trend[flat] = 0.0
        self.noise[flat] = 0.0

    def run(self, rng, unit_id, life, observed, true_final_rul):
        t = np.arange(1, observed + 1)
        rate = rng.uniform(3.0, 6.0)
        wear0 = rng.uniform(0.0, 0.1)
        health = wear0 + (1 - wear0) * np.expm1(rate * t / life) / np.expm1(rate)

        regime = rng.integers(len(self.regimes), size=observed)
        settings = self.regimes[regime] + rng.normal(size=(observed, 3)) * SETTING_NOISE
        level = self.base * (1.0 + self.regime_shift[regime])
        sensors = level * (1.0 + self.trend * health[:, None] + self.noise * rng.normal(size=(observed, N_SENSORS)))
        return EngineTrajectory(
            unit_id=unit_id,
            cycles=t,
            op_settings=np.round(settings, 4),
            sensors=np.round(sensors, 4),
            true_final_rul=true_final_rul,
        )


def make_fleet(n_train: int = 100, n_test: int = 100, n_conditions: int = 1, seed: int = 0, min_life: int = 128, max_life: int = 320):
    """Return ``(train, test)`` trajectories; test units are cut before failure."""
    rng = np.random.default_rng(seed)
    plant = _Plant(n_conditions, rng)
    train = []
    for uid in range(1, n_train + 1):
        life = int(rng.integers(min_life, max_life + 1))
        train.append(plant.run(rng, uid, life, life, 0))
    test = []
    for uid in range(1, n_test + 1):
        life = int(rng.integers(min_life, max_life + 1))
        observed = int(rng.integers(max(2, life // 8), life))
        test.append(plant.run(rng, uid, life, observed, life - observed))
    return train, test


def write_fleet(directory, subset: str = "FD001", **kwargs) -> None:
    """Write ``train_<subset>.txt``, ``test_<subset>.txt`` and ``RUL_<subset>.txt``."""
    train, test = make_fleet(**kwargs)
    write_subset(directory, subset, train, test)
