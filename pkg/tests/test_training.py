import math

import numpy as np
import pytest
from toy import LinearModel, MLPModel

from sonetlab import functional as F
from sonetlab.blocks import Context, NetworkSpec, Parameter, assemble_network
from sonetlab.data import Dataset, make_synthetic
from sonetlab.solvers import SolverConfig
from sonetlab.training import (TrainConfig, TrainingDiverged, lr_at, natural_train,
                               sgd_momentum_step, trades_inner_max, trades_loss,
                               trades_train)


def _sonet(classes=2, in_channels=2, seed=0):
    return assemble_network(NetworkSpec("sonet", channels=4, layers=1, in_channels=in_channels,
                                        classes=classes, solver=SolverConfig("euler"),
                                        activation="tanh", seed=seed))


def _params(model):
    return {k: v.copy() for k, v in model.state().items()}


def test_sgd_examples():
    p = Parameter("p", np.array([1.0]))
    state = {}
    sgd_momentum_step([p], [np.zeros(1)], 0.1, state)
    assert p.value[0] == 1.0
    sgd_momentum_step([p], [np.ones(1)], 0.1, state)
    assert p.value[0] == pytest.approx(0.9)
    sgd_momentum_step([p], [np.ones(1)], 0.1, state)
    assert p.value[0] == pytest.approx(1.0 - 0.29)
    assert state["p"][0] == pytest.approx(1.9)


def test_sgd_rejects_nonfinite():
    p = Parameter("p", np.array([1.0]))
    with pytest.raises(TrainingDiverged):
        sgd_momentum_step([p], [np.array([np.nan])], 0.1, {})
    assert p.value[0] == 1.0


def test_lr_schedule():
    cfg = TrainConfig()
    assert cfg.epochs == 350 and cfg.batch_size == 100 and cfg.milestones == (150, 300)
    assert [lr_at(e, cfg) for e in (0, 149, 150, 299, 300)] == pytest.approx(
        [0.01, 0.01, 0.001, 0.001, 0.0001])


def test_natural_train_separates_blobs():
    data = make_synthetic("blobs", 200, seed=0)
    model = _sonet()
    res = natural_train(model, data, TrainConfig(epochs=50, batch_size=20, lr=0.1,
                                                 milestones=()))
    assert abs(res.history[0].loss - math.log(2)) < 0.05
    assert (model.predict(data.images) == data.labels).mean() > 0.95


def test_initial_loss_is_log_classes():
    # label-blind logits on balanced labels cannot beat ln C; fresh models sit just above it
    data = Dataset(np.random.default_rng(0).uniform(size=(300, 1, 3, 3)), np.arange(300) % 3)
    losses = [F.cross_entropy_logits(_sonet(3, 1, seed).logits(data.images), data.labels)
              .data.mean() for seed in range(5)]
    assert min(losses) >= math.log(3) - 1e-3
    assert abs(np.median(losses) - math.log(3)) < 0.05 * math.log(3)


def test_zero_lr_keeps_parameters():
    data = make_synthetic("rings", 40, seed=1)
    model = _sonet()
    before = _params(model)
    natural_train(model, data, TrainConfig(epochs=2, batch_size=10, lr=0.0))
    assert all(np.array_equal(before[k], v) for k, v in model.state().items())


def test_training_is_reproducible():
    data = make_synthetic("blobs", 60, seed=2)
    cfg = TrainConfig(epochs=3, batch_size=16, lr=0.05, seed=5)
    a, b = _sonet(seed=3), _sonet(seed=3)
    natural_train(a, data, cfg)
    natural_train(b, data, cfg)
    assert all(np.array_equal(v, b.state()[k]) for k, v in a.state().items())


def test_divergence_restores_last_finite_state():
    data = make_synthetic("blobs", 40, seed=3)
    model = MLPModel(2, 4, 2, seed=1)
    before = _params(model)
    with np.errstate(all="ignore"), pytest.raises(TrainingDiverged) as info:
        natural_train(model, Dataset(data.images[:, :, 0, 0], data.labels),
                      TrainConfig(epochs=2, batch_size=10, lr=1e308))
    assert info.value.epoch == 0
    assert all(np.array_equal(before[k], v) for k, v in model.state().items())


def test_trades_inner_max_constant_model():
    x = np.random.default_rng(0).uniform(size=(4, 3))
    model = LinearModel(np.zeros((2, 3)), [0.1, 0.4])
    assert np.array_equal(trades_inner_max(model, x, TrainConfig()), x)


def test_trades_inner_max_contract_and_ascent():
    model = MLPModel(6, 8, 3, seed=4)
    x = np.random.default_rng(1).uniform(size=(20, 6))
    cfg = TrainConfig(trades_eps=0.05, trades_step=0.002, trades_steps=10)
    hist = []
    xa = trades_inner_max(model, x, cfg, np.random.default_rng(2), hist)
    assert np.abs(xa - x).max() <= cfg.trades_eps + 1e-12
    assert xa.min() >= 0 and xa.max() <= 1
    assert all(b >= a - 1e-6 for a, b in zip(hist, hist[1:]))
    assert hist[-1] > 0


def test_trades_loss_dominates_ce():
    model = MLPModel(4, 6, 3, seed=5)
    rng = np.random.default_rng(3)
    x = rng.uniform(size=(10, 4))
    y = rng.integers(0, 3, 10)
    xa = np.clip(x + rng.uniform(-0.1, 0.1, x.shape), 0, 1)
    ce, _ = trades_loss(model, x, xa, y, 0.0, Context())
    full, _ = trades_loss(model, x, xa, y, 6.0, Context())
    kl = F.kl_consistency(model.logits(xa), model.logits(x)).data
    assert np.all(kl >= 0)
    assert full.item() >= ce.item()
    assert full.item() == pytest.approx(ce.item() + 6.0 * kl.mean())


def test_trades_with_zero_radius_is_natural_training():
    data = make_synthetic("blobs", 40, seed=4, image=True)
    kw = dict(epochs=2, batch_size=10, lr=0.05, trades_eps=0.0, seed=1)
    a, b = _sonet(in_channels=1, seed=6), _sonet(in_channels=1, seed=6)
    natural_train(a, data, TrainConfig(**kw))
    trades_train(b, data, TrainConfig(beta=6.0, **kw))
    assert all(np.array_equal(v, b.state()[k]) for k, v in a.state().items())


def test_trades_beta_zero_is_adversarial_ce():
    # the cross-entropy sits at x', so beta = 0 trains on x' rather than x
    model = MLPModel(4, 6, 3, seed=6)
    rng = np.random.default_rng(5)
    x, y = rng.uniform(size=(8, 4)), rng.integers(0, 3, 8)
    xa = np.clip(x + 0.05, 0, 1)
    loss, _ = trades_loss(model, x, xa, y, 0.0, Context())
    assert loss.item() == pytest.approx(F.cross_entropy_logits(model.logits(xa), y).data.mean())


def test_train_log_csv(tmp_path):
    data = make_synthetic("blobs", 20, seed=5)
    res = natural_train(_sonet(), data, TrainConfig(epochs=2, batch_size=10, lr=0.05))
    res.write_csv(tmp_path / "log.csv")
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0] == "epoch,lr,loss,acc" and len(lines) == 3
    assert res.losses == [h.loss for h in res.history]
