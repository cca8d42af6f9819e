import numpy as np
import pytest

from stagnn import tensor as T
from stagnn.dataset import WindowSet
from stagnn.errors import ConfigError, TrainingDiverged, UsageError
from stagnn.model import Model, ModelConfig
from stagnn.tensor import Tensor
from stagnn.training import (
    AdamState,
    DatasetBundle,
    TrainConfig,
    TrainReport,
    TrialResult,
    adam_step,
    run_trials,
    train,
)


def window_set(x, labels):
    """Independent windows ``x`` of shape (N, w, F) as a WindowSet."""
    n, w, f = x.shape
    return WindowSet(
        rows=x.reshape(n * w, f),
        starts=np.arange(n) * w,
        labels=np.asarray(labels, dtype=np.float64),
        unit_ids=np.arange(1, n + 1),
        window_index=np.ones(n, dtype=np.int64),
        end_cycles=np.full(n, w),
        window=w,
    )


def linear_toy(n=120, w=6, f=3, noise=0.01, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.random(size=(n, w, f))
    coef = np.array([2.0, -1.0, 3.0])[:f]
    y = x.mean(axis=1) @ coef + noise * rng.normal(size=n)
    return window_set(x, y)


def tcn_config(**kw):
    base = dict(variant="TCN", n_nodes=3, window=6, tcn_dims=(4, 2), dropout=0.0, seed=0)
    base.update(kw)
    return ModelConfig(**base)


# -- Adam -------------------------------------------------------------------------


def test_first_adam_step_moves_by_lr():
    p = {"x": Tensor([0.5])}
    adam_step(p, {"x": np.array([1.0])}, AdamState(), t=1, lr=0.001)
    # m_hat = v_hat = 1, so the step is lr / (1 + eps)
    assert p["x"].data[0] == pytest.approx(0.5 - 0.001, abs=1e-10)


def test_zero_gradient_from_fresh_state_leaves_params_unchanged():
    p = {"w": Tensor(np.arange(4.0))}
    state = AdamState()
    for t in range(1, 4):
        adam_step(p, {"w": np.zeros(4)}, state, t)
    np.testing.assert_array_equal(p["w"].data, np.arange(4.0))
    np.testing.assert_array_equal(state.m["w"], 0.0)


def test_moments_decay_under_zero_gradient():
    p = {"w": Tensor([1.0])}
    state = AdamState()
    adam_step(p, {"w": np.array([2.0])}, state, 1)
    m1, v1 = state.m["w"].copy(), state.v["w"].copy()
    adam_step(p, {"w": np.array([0.0])}, state, 2)
    np.testing.assert_allclose(state.m["w"], 0.9 * m1)
    np.testing.assert_allclose(state.v["w"], 0.999 * v1)


def test_adam_contract_errors():
    p = {"w": Tensor([1.0, 2.0])}
    with pytest.raises(UsageError):
        adam_step(p, {"w": np.zeros(2)}, AdamState(), t=0)
    with pytest.raises(UsageError):
        adam_step(p, {"w": np.zeros(3)}, AdamState(), t=1)


def test_adam_is_deterministic():
    def run():
        rng = np.random.default_rng(0)
        p = {"w": Tensor(rng.normal(size=5))}
        state = AdamState()
        for t in range(1, 20):
            adam_step(p, {"w": rng.normal(size=5)}, state, t)
        return p["w"].data.tobytes()

    assert run() == run()


# -- configs ----------------------------------------------------------------------


@pytest.mark.parametrize(
    "bad", [dict(epochs=0), dict(lr=0.0), dict(batch_size=0), dict(trials=0), dict(betas=(1.0, 0.9)), dict(loss="mae")]
)
def test_train_config_validation(bad):
    with pytest.raises(ConfigError):
        TrainConfig(**bad)


def test_train_config_round_trip():
    cfg = TrainConfig(lr=0.01, epochs=3)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"lr": 0.1, "momentum": 0.9})


# -- training loop ----------------------------------------------------------------


def test_one_epoch_beats_the_untrained_baseline():
    ws = linear_toy(n=10)
    ws.labels[:] = 1.5
    model = Model(tcn_config())
    _, result = train(model, ws, TrainConfig(epochs=1, batch_size=2, lr=0.01), seed=0)
    assert result.epoch_losses[1] < result.epoch_losses[0]


def test_linear_toy_reaches_a_tenth_of_label_variance():
    ws = linear_toy()
    model = Model(tcn_config())
    train(model, ws, TrainConfig(epochs=200, batch_size=20, lr=0.001), seed=0)
    mse = np.mean((model.predict(ws.features) - ws.labels) ** 2)
    assert mse < 0.1 * ws.labels.var()


def test_epoch_loss_is_the_mean_of_batch_losses():
    """Recompute epoch 1 by replaying the shuffle, dropout and Adam by hand."""
    ws = linear_toy(n=13)
    cfg = TrainConfig(epochs=1, batch_size=5, lr=0.01)
    config = tcn_config(dropout=0.3)
    _, result = train(Model(config), ws, cfg, seed=4)

    replay = Model(config)
    order = np.random.default_rng([4, 1, 1]).permutation(len(ws))
    dropout_rng = np.random.default_rng([4, 2])
    state, losses = AdamState(), []
    for step, start in enumerate(range(0, len(ws), cfg.batch_size), 1):
        idx = order[start : start + cfg.batch_size]
        replay.zero_grad()
        with T.Tape() as tape:
            d = replay.forward(ws.batch(idx), training=True, rng=dropout_rng).prediction - ws.labels[idx]
            loss = T.mean(d * d)
        tape.backward(loss)
        adam_step(replay.params, {k: p.grad for k, p in replay.params.items()}, state, step, cfg.lr)
        losses.append(loss.item())
    assert len(losses) == 3  # last partial batch of 3 is kept
    assert result.epoch_losses[1] == np.mean(losses)


def test_training_is_bitwise_deterministic():
    def run():
        model = Model(tcn_config(dropout=0.2))
        state, result = train(model, linear_toy(n=30), TrainConfig(epochs=3, batch_size=7), seed=11)
        return [a.tobytes() for a in state.arrays.values()], result.epoch_losses

    assert run() == run()


def test_diverging_loss_aborts_with_trial_index():
    ws = linear_toy(n=10)
    ws.labels[:] = 1e300
    with pytest.raises(TrainingDiverged) as info:
        train(Model(tcn_config()), ws, TrainConfig(epochs=2, batch_size=5), seed=0, trial=3)
    assert info.value.trial == 3


def test_empty_training_set():
    ws = linear_toy(n=4).subset([])
    with pytest.raises(UsageError):
        train(Model(tcn_config()), ws, TrainConfig(epochs=1))


# -- trials -------------------------------------------------------------------------


def bundle():
    ws = linear_toy(n=24)
    ws.labels[:] = np.clip(ws.labels * 20, 0, 125)
    return DatasetBundle(train=ws, test=ws.subset(np.arange(6)), r_max=125.0)


def test_trials_use_distinct_seeds_and_aggregate():
    report, states = run_trials(bundle(), tcn_config(), TrainConfig(epochs=2, trials=2, batch_size=8))
    assert [t.seed for t in report.trials] == [0, 1]
    assert len(states) == 2
    assert states[0].arrays["fc.weight"].tobytes() != states[1].arrays["fc.weight"].tobytes()
    assert report.rmse_mean == pytest.approx(np.mean([t.rmse for t in report.trials]), abs=0)
    assert report.rmse_std == pytest.approx(np.std([t.rmse for t in report.trials]), abs=0)


def test_single_trial_aggregate_is_that_trial():
    report, _ = run_trials(bundle(), tcn_config(), TrainConfig(epochs=1, trials=1, batch_size=8))
    t = report.trials[0]
    assert report.rmse_mean == t.rmse and report.score_mean == t.score
    assert report.rmse_std == 0.0


def test_same_base_seed_gives_identical_report():
    cfg = TrainConfig(epochs=2, trials=2, batch_size=8, seed=5)
    a, _ = run_trials(bundle(), tcn_config(), cfg)
    b, _ = run_trials(bundle(), tcn_config(), cfg)
    assert a.to_csv() == b.to_csv()


def test_report_mean_of_two_trials():
    report = TrainReport([TrialResult(0, 0, [1.0], rmse=10.0, score=1.0), TrialResult(1, 1, [1.0], rmse=14.0, score=3.0)])
    assert report.rmse_mean == 12.0 and report.score_mean == 2.0
    lines = report.to_csv().splitlines()
    assert lines[0] == "row,trial,epoch,loss,rmse,score"
    assert lines[-2] == "mean,,,,12.0,2.0"


def test_parallel_trials_refused_in_deterministic_mode():
    with pytest.raises(ConfigError):
        run_trials(bundle(), tcn_config(), TrainConfig(epochs=1, trials=2), jobs=2, deterministic=True)
