"""C-MAPSS parsing, piecewise-linear RUL labels and sliding windows."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from .errors import FormatError, ParameterError

logger = logging.getLogger(__name__)

N_COLUMNS = 26
N_SETTINGS = 3
N_SENSORS = 21
N_FEATURES = N_SETTINGS + N_SENSORS
R_MAX = 125

SUBSETS = ("FD001", "FD002", "FD003", "FD004")
# number of operating conditions per sub-dataset
N_CONDITIONS = {"FD001": 1, "FD002": 6, "FD003": 1, "FD004": 6}

CHANNEL_NAMES = [f"setting_{i}" for i in range(1, N_SETTINGS + 1)] + [
    f"sensor_{i}" for i in range(1, N_SENSORS + 1)
]


@dataclass(frozen=True)
class EngineTrajectory:
    """One engine unit: per-cycle operating settings and sensor readings."""

    unit_id: int
    cycles: np.ndarray
    op_settings: np.ndarray
    sensors: np.ndarray
    true_final_rul: int = 0

    def __post_init__(self):
        t = len(self.cycles)
        if t < 1:
            raise FormatError(f"unit {self.unit_id}: empty trajectory")
        if self.op_settings.shape != (t, N_SETTINGS) or self.sensors.shape != (t, N_SENSORS):
            raise FormatError(f"unit {self.unit_id}: per-cycle arrays disagree in length")
        if not np.array_equal(self.cycles, np.arange(1, t + 1)):
            raise FormatError(f"unit {self.unit_id}: cycles must run 1..{t} in order")
        if self.true_final_rul < 0:
            raise FormatError(f"unit {self.unit_id}: negative ground-truth RUL")

    @property
    def length(self) -> int:
        return len(self.cycles)

    @property
    def features(self) -> np.ndarray:
        """``(T, 24)`` matrix: 3 operating settings followed by 21 sensors."""
        return np.concatenate([self.op_settings, self.sensors], axis=1)

    def with_features(self, features: np.ndarray) -> "EngineTrajectory":
        return replace(self, op_settings=features[:, :N_SETTINGS], sensors=features[:, N_SETTINGS:])


def _read_rows(path) -> np.ndarray:
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != N_COLUMNS:
                raise FormatError(f"{path}:{lineno}: expected {N_COLUMNS} columns, got {len(parts)}")
            try:
                rows.append([float(p) for p in parts])
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
    if not rows:
        return np.empty((0, N_COLUMNS))
    return np.asarray(rows, dtype=np.float64)


def _group_units(table: np.ndarray, path, final_ruls: Optional[Sequence[int]] = None) -> list[EngineTrajectory]:
    units: dict[int, list[int]] = {}
    for i, uid in enumerate(table[:, 0]):
        if uid != int(uid) or uid < 1:
            raise FormatError(f"{path}: unit id {uid} is not a positive integer")
        units.setdefault(int(uid), []).append(i)

    ids = sorted(units)
    if final_ruls is not None and len(final_ruls) != len(ids):
        raise FormatError(f"RUL file lists {len(final_ruls)} values for {len(ids)} test units")

    trajs = []
    for pos, uid in enumerate(ids):
        block = table[units[uid]]
        cycles = block[:, 1]
        if np.any(np.diff(cycles) <= 0):
            raise FormatError(f"{path}: cycles of unit {uid} are not increasing")
        try:
            traj = EngineTrajectory(
                unit_id=uid,
                cycles=cycles.astype(np.int64),
                op_settings=block[:, 2 : 2 + N_SETTINGS].copy(),
                sensors=block[:, 2 + N_SETTINGS :].copy(),
                true_final_rul=0 if final_ruls is None else int(final_ruls[pos]),
            )
        except FormatError as exc:
            raise FormatError(f"{path}: {exc}") from None
        trajs.append(traj)
    return trajs


def read_rul_file(path) -> list[int]:
    values = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            text = line.strip()
            if not text:
                continue
            try:
                value = float(text)
            except ValueError:
                raise FormatError(f"{path}:{lineno}: not a number: {text!r}") from None
            if value < 0 or value != int(value):
                raise FormatError(f"{path}:{lineno}: RUL must be a non-negative integer")
            values.append(int(value))
    return values


def parse_cmapss(train_path, test_path, rul_path) -> tuple[list[EngineTrajectory], list[EngineTrajectory]]:
    """Parse one C-MAPSS sub-dataset into training and test trajectories."""
    train = _group_units(_read_rows(train_path), train_path)
    test = _group_units(_read_rows(test_path), test_path, read_rul_file(rul_path))
    return train, test


def subset_paths(data_dir, subset: str) -> tuple[Path, Path, Path]:
    data_dir = Path(data_dir)
    return (
        data_dir / f"train_{subset}.txt",
        data_dir / f"test_{subset}.txt",
        data_dir / f"RUL_{subset}.txt",
    )


def load_subset(data_dir, subset: str):
    if subset not in SUBSETS:
        raise ParameterError(f"unknown sub-dataset {subset!r}; expected one of {SUBSETS}")
    return parse_cmapss(*subset_paths(data_dir, subset))


def format_rows(trajs: Sequence[EngineTrajectory]) -> str:
    """Serialize trajectories back into the 26-column text layout."""
    lines = []
    for traj in trajs:
        for i, cycle in enumerate(traj.cycles):
            values = [repr(float(v)) for v in traj.features[i]]
            lines.append(" ".join([str(traj.unit_id), str(int(cycle))] + values))
    return "\n".join(lines) + "\n"


def write_subset(directory, subset: str, train, test) -> None:
    train_path, test_path, rul_path = subset_paths(directory, subset)
    Path(directory).mkdir(parents=True, exist_ok=True)
    train_path.write_text(format_rows(train))
    test_path.write_text(format_rows(test))
    rul_path.write_text("".join(f"{t.true_final_rul}\n" for t in test))


# -- labelling and windows -------------------------------------------------------


def label_rul(traj: EngineTrajectory, w: int, k: int = 1, r_max: int = R_MAX, pad: bool = False):
    """Window end cycles and capped RUL labels for one trajectory.

    Window ``m`` (1-based) covers cycles ``(m-1)k+1 .. (m-1)k+w`` and is
    labelled ``min(T - w - (m-1)k + true_final_rul, r_max)``.  A trajectory
    shorter than ``w`` yields nothing unless ``pad`` is set, in which case it
    yields a single window ending at its last cycle.
    """
    if w < 1 or k < 1:
        raise ParameterError("window length and stride must be >= 1")
    t = traj.length
    if t < w:
        if pad:
            return [(t, min(traj.true_final_rul, r_max))]
        return []
    count = (t - w) // k + 1
    out = []
    for m in range(1, count + 1):
        end = (m - 1) * k + w
        out.append((end, min(t - end + traj.true_final_rul, r_max)))
    return out


@dataclass(frozen=True)
class WindowSample:
    features: np.ndarray
    label: float
    unit_id: int
    window_index: int


@dataclass
class WindowSet:
    """Windows gathered lazily from a flat row store.

    Window ``i`` is ``rows[starts[i] : starts[i] + window]``; trajectories are
    stacked into ``rows`` once so batches never copy more than they need.
    """

    rows: np.ndarray
    starts: np.ndarray
    labels: np.ndarray
    unit_ids: np.ndarray
    window_index: np.ndarray
    end_cycles: np.ndarray
    window: int
    skipped_units: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.starts)

    def __getitem__(self, i: int) -> WindowSample:
        s = self.starts[i]
        return WindowSample(
            features=self.rows[s : s + self.window],
            label=float(self.labels[i]),
            unit_id=int(self.unit_ids[i]),
            window_index=int(self.window_index[i]),
        )

    def __iter__(self) -> Iterator[WindowSample]:
        for i in range(len(self)):
            yield self[i]

    @property
    def n_features(self) -> int:
        return self.rows.shape[1]

    def batch(self, idx) -> np.ndarray:
        """Features of the selected windows, shape ``(B, window, F)``."""
        idx = np.asarray(idx, dtype=np.int64)
        return self.rows[self.starts[idx, None] + np.arange(self.window)]

    @property
    def features(self) -> np.ndarray:
        return self.batch(np.arange(len(self)))

    def subset(self, idx) -> "WindowSet":
        idx = np.asarray(idx, dtype=np.int64)
        return replace(
            self,
            starts=self.starts[idx],
            labels=self.labels[idx],
            unit_ids=self.unit_ids[idx],
            window_index=self.window_index[idx],
            end_cycles=self.end_cycles[idx],
        )


def make_windows(trajs: Sequence[EngineTrajectory], w: int, k: int = 1, r_max: int = R_MAX, mode: str = "train") -> WindowSet:
    """Segment trajectories into labelled windows.

    ``train`` emits every stride-``k`` window and skips units shorter than
    ``w``.  ``test`` emits only the window ending at each unit's last cycle,
    left-padding short units by repeating their first row.
    """
    if mode not in ("train", "test"):
        raise ParameterError(f"mode must be 'train' or 'test', got {mode!r}")
    blocks, starts, labels, units, index, ends, skipped = [], [], [], [], [], [], []
    offset = 0
    n_feat = N_FEATURES
    for traj in trajs:
        feats = traj.features
        n_feat = feats.shape[1]
        if mode == "train":
            windows = label_rul(traj, w, k, r_max)
            if not windows:
                skipped.append(traj.unit_id)
                continue
            for m, (end, label) in enumerate(windows, 1):
                starts.append(offset + end - w)
                labels.append(label)
                units.append(traj.unit_id)
                index.append(m)
                ends.append(end)
        else:
            if traj.length < w:
                feats = np.concatenate([np.repeat(feats[:1], w - traj.length, axis=0), feats])
                m = 1
            else:
                m = (traj.length - w) // k + 1
            starts.append(offset + len(feats) - w)
            labels.append(min(traj.true_final_rul, r_max))
            units.append(traj.unit_id)
            index.append(m)
            ends.append(traj.length)
        blocks.append(feats)
        offset += len(feats)

    if skipped:
        logger.warning("skipped %d unit(s) shorter than the window: %s", len(skipped), skipped)
    rows = np.concatenate(blocks) if blocks else np.empty((0, n_feat))
    return WindowSet(
        rows=rows,
        starts=np.asarray(starts, dtype=np.int64),
        labels=np.asarray(labels, dtype=np.float64),
        unit_ids=np.asarray(units, dtype=np.int64),
        window_index=np.asarray(index, dtype=np.int64),
        end_cycles=np.asarray(ends, dtype=np.int64),
        window=w,
        skipped_units=skipped,
    )


def select_units(trajs: Sequence[EngineTrajectory], max_units: Optional[int]) -> list[EngineTrajectory]:
    """Keep the units with id ``<= max_units`` (all when ``None``)."""
    if max_units is None:
        return list(trajs)
    return [t for t in trajs if t.unit_id <= max_units]
