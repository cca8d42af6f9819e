"""Adam, mini-batch training and multi-trial orchestration."""

from __future__ import annotations

import csv
import io
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np

from . import tensor as T
from .dataset import WindowSet
from .errors import ConfigError, NonFiniteError, TrainingDiverged, UsageError
from .evaluation import evaluate
from .graph import AdjacencyMatrix
from .model import Model, ModelConfig, ModelState

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 0.001
    batch_size: int = 100
    epochs: int = 100
    trials: int = 10
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    # base seed; trial t seeds initialization, shuffling and dropout with seed + t
    seed: int = 0
    loss: str = "mse"

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        if not self.lr > 0:
            raise ConfigError("lr must be > 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.trials < 1:
            raise ConfigError("trials must be >= 1")
        if len(self.betas) != 2 or not all(0.0 <= b < 1.0 for b in self.betas):
            raise ConfigError("betas must be two values in [0, 1)")
        if self.loss != "mse":
            raise ConfigError("only the 'mse' loss is supported")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, t: int, lr: float = 0.001, betas=(0.9, 0.999), eps: float = 1e-8) -> None:
    """One bias-corrected Adam update, in place on ``params`` and ``state``.

    A missing gradient counts as zero.
    """
    if t < 1:
        raise UsageError("Adam step counter starts at 1")
    b1, b2 = betas
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise UsageError(f"gradient for {name} has shape {g.shape}, parameter has {p.data.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        state.m[name] = m
        state.v[name] = v
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)
    state.t = t


@dataclass
class TrialResult:
    trial: int
    seed: int
    epoch_losses: list  # index 0 is the loss before any update
    rmse: float = float("nan")
    score: float = float("nan")
    seconds: float = 0.0


@dataclass
class TrainReport:
    trials: list = field(default_factory=list)

    def _metric(self, name):
        return np.array([getattr(t, name) for t in self.trials], dtype=np.float64)

    @property
    def rmse_mean(self) -> float:
        return float(self._metric("rmse").mean())

    @property
    def rmse_std(self) -> float:
        return float(self._metric("rmse").std())

    @property
    def score_mean(self) -> float:
        return float(self._metric("score").mean())

    @property
    def score_std(self) -> float:
        return float(self._metric("score").std())

    def to_csv(self) -> str:
        """Epoch rows, one row per trial, then mean and std rows.

        Wall-clock times are left out so identical runs give identical bytes.
        """
        buf = io.StringIO()
        out = csv.writer(buf, lineterminator="\n")
        out.writerow(["row", "trial", "epoch", "loss", "rmse", "score"])
        for t in self.trials:
            for e, loss in enumerate(t.epoch_losses):
                out.writerow(["epoch", t.trial, e, repr(float(loss)), "", ""])
        for t in self.trials:
            out.writerow(["trial", t.trial, len(t.epoch_losses) - 1, repr(float(t.epoch_losses[-1])), repr(t.rmse), repr(t.score)])
        out.writerow(["mean", "", "", "", repr(self.rmse_mean), repr(self.score_mean)])
        out.writerow(["std", "", "", "", repr(self.rmse_std), repr(self.score_std)])
        return buf.getvalue()


def _mse(pred: T.Tensor, target: np.ndarray) -> T.Tensor:
    diff = pred - target
    return T.mean(diff * diff)


def _batches(n: int, batch_size: int, order: np.ndarray):
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def train(model: Model, windows: WindowSet, config: TrainConfig, seed: int = 0, trial: int = 0):
    """Fit ``model`` in place and return its final state with the trial record.

    Every epoch reshuffles with a generator keyed on ``(seed, epoch)``, trains
    on all batches including a final partial one, and records the mean batch
    loss.  ``epoch_losses[0]`` is the eval-mode loss before training.
    """
    if len(windows) == 0:
        raise UsageError("no training windows")
    n = len(windows)
    dropout_rng = np.random.default_rng([seed, 2])
    state = AdamState()
    step = 0
    started = time.perf_counter()

    def diverged(epoch, why):
        return TrainingDiverged(f"trial {trial}, epoch {epoch}: {why}", trial, epoch)

    # overflow is reported through NonFiniteError, not numpy warnings
    with np.errstate(over="ignore", invalid="ignore"):
        baseline = []
        try:
            for idx in _batches(n, config.batch_size, np.arange(n)):
                out = model.forward(windows.batch(idx), training=False)
                baseline.append(_mse(out.prediction, windows.labels[idx]).item())
        except NonFiniteError as exc:
            raise diverged(0, exc) from exc
        losses = [float(np.mean(baseline))]

        for epoch in range(1, config.epochs + 1):
            order = np.random.default_rng([seed, 1, epoch]).permutation(n)
            batch_losses = []
            for idx in _batches(n, config.batch_size, order):
                model.zero_grad()
                try:
                    with T.Tape() as tape:
                        out = model.forward(windows.batch(idx), training=True, rng=dropout_rng)
                        loss = _mse(out.prediction, windows.labels[idx])
                    tape.backward(loss)
                except NonFiniteError as exc:
                    raise diverged(epoch, exc) from exc
                value = loss.item()
                if not np.isfinite(value):
                    raise diverged(epoch, f"loss is {value}")
                step += 1
                grads = {k: p.grad for k, p in model.params.items()}
                adam_step(model.params, grads, state, step, config.lr, config.betas, config.eps)
                batch_losses.append(value)
            losses.append(float(np.mean(batch_losses)))
            logger.debug("trial %d epoch %d loss %.6f", trial, epoch, losses[-1])

    result = TrialResult(trial=trial, seed=seed, epoch_losses=losses, seconds=time.perf_counter() - started)
    return model.state(), result


@dataclass
class DatasetBundle:
    train: WindowSet
    test: WindowSet
    adjacency: Optional[AdjacencyMatrix] = None
    r_max: float = 125.0


def run_trial(bundle: DatasetBundle, model_config: ModelConfig, train_config: TrainConfig, trial: int):
    seed = train_config.seed + trial
    model = Model(replace(model_config, seed=seed), bundle.adjacency)
    state, result = train(model, bundle.train, train_config, seed=seed, trial=trial)
    _, result.rmse, result.score = evaluate(model, bundle.test, bundle.r_max)
    logger.info("trial %d: rmse %.4f score %.4f (%.1fs)", trial, result.rmse, result.score, result.seconds)
    return state, result


def _run_trial_pinned(args):
    with T.deterministic():
        return run_trial(*args)


def run_trials(bundle: DatasetBundle, model_config: ModelConfig, train_config: TrainConfig, jobs: int = 1, deterministic: bool = True):
    """Train and evaluate ``train_config.trials`` independent models.

    Returns ``(report, states)``.  ``jobs > 1`` runs trials in worker processes
    and is refused in deterministic mode.
    """
    if jobs > 1 and deterministic:
        raise ConfigError("parallel trials are disabled in deterministic mode")
    args = [(bundle, model_config, train_config, t) for t in range(train_config.trials)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(run_trial, *zip(*args)))
    elif deterministic:
        outcomes = [_run_trial_pinned(a) for a in args]
    else:
        outcomes = [run_trial(*a) for a in args]
    states = [s for s, _ in outcomes]
    report = TrainReport(trials=[r for _, r in outcomes])
    return report, states
