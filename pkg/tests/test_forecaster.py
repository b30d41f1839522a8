import numpy as np
import pytest

from undercali.diffkit import Param, ShapeError, grad_check
from undercali.forecaster import (FrozenError, LinearGridForecaster, LocfForecaster, TrainConfig,
                                  evaluate_mse, load_forecaster, train_offline)
from undercali.imts import GridSpec, MaskedBatch

from conftest import philox, random_batch

GRID = GridSpec(l_in=6, l_out=3, n_vars=2, lookback=6.0, horizon=3.0)


def test_locf_carries_last_observation():
    xv = np.zeros((1, 6, 2))
    xm = np.zeros((1, 6, 2))
    xv[0, [1, 3], 0] = [9.0, 3.7]
    xm[0, [1, 3], 0] = 1.0
    pred = LocfForecaster(GRID).predict(xv, xm, np.ones((1, 3, 2)))
    assert np.all(pred[0, :, 0] == 3.7)
    assert np.all(pred[0, :, 1] == 0.0)  # no lookback data for variable 1


def test_locf_input_gradient():
    rng = philox(0)
    b = random_batch(rng, GRID)
    f = LocfForecaster(GRID)
    x = Param(b.x_values.copy(), "x")
    r = rng.standard_normal(b.q_mask.shape)

    def loss():
        x.grad += f.input_grad(x.value, b.x_mask, b.q_mask, r)
        return float(np.sum(r * f.predict(x.value, b.x_mask, b.q_mask)))

    assert grad_check(loss, [x]) < 1e-7


def test_linear_zero_parameters_predict_zero():
    b = random_batch(philox(1), GRID)
    assert not LinearGridForecaster(GRID).predict(b.x_values, b.x_mask, b.q_mask).any()


def test_linear_input_gradient():
    rng = philox(2)
    f = LinearGridForecaster(GRID, rng.standard_normal((2, 3, 12)), rng.standard_normal((2, 3)))
    b = random_batch(rng, GRID)
    x = Param(b.x_values.copy(), "x")
    r = rng.standard_normal(b.q_mask.shape)

    def loss():
        x.grad += f.input_grad(x.value, b.x_mask, b.q_mask, r)
        return float(np.sum(r * f.predict(x.value, b.x_mask, b.q_mask)))

    assert grad_check(loss, [x]) < 1e-7


def test_shape_errors():
    with pytest.raises(ShapeError):
        LinearGridForecaster(GRID).predict(np.zeros((1, 5, 2)), np.zeros((1, 5, 2)), np.zeros((1, 3, 2)))
    with pytest.raises(ShapeError):
        LinearGridForecaster(GRID, np.zeros((2, 3, 5)))


def linear_generable(seed, n):
    rng = philox(seed)
    teacher = LinearGridForecaster(GRID, 0.3 * rng.standard_normal((2, 3, 12)), rng.standard_normal((2, 3)))
    b = random_batch(rng, GRID, b=n, targets=False)
    y = teacher.predict(b.x_values, b.x_mask, b.q_mask) * b.q_mask
    return MaskedBatch(b.x_values, b.x_mask, b.q_mask, y)


def test_training_recovers_affine_map():
    train, valid = linear_generable(3, 400), linear_generable(3, 400).subset(np.arange(300, 400))
    train = train.subset(np.arange(300))
    f = LinearGridForecaster(GRID)
    hist = train_offline(f, train, valid, TrainConfig(epochs=300, patience=20, lr=0.02))
    assert evaluate_mse(f, valid) < 1e-4
    assert f.frozen and hist.best_epoch >= 0


def test_early_stopping_keeps_best_epoch():
    data = linear_generable(4, 120)
    rng = philox(5)
    noisy = MaskedBatch(data.x_values, data.x_mask, data.q_mask,
                        (data.y_values + 3 * rng.standard_normal(data.q_mask.shape)) * data.q_mask)
    f = LinearGridForecaster(GRID)
    hist = train_offline(f, noisy.subset(np.arange(40)), noisy.subset(np.arange(40, 120)),
                         TrainConfig(epochs=300, patience=3, lr=0.05))
    assert hist.stopped_early
    assert len(hist.valid_loss) == hist.best_epoch + 4
    assert evaluate_mse(f, noisy.subset(np.arange(40, 120))) == min(hist.valid_loss)


def test_training_is_deterministic_and_refuses_frozen():
    data = linear_generable(6, 100)
    runs = []
    for _ in range(2):
        f = LinearGridForecaster(GRID)
        train_offline(f, data.subset(np.arange(80)), data.subset(np.arange(80, 100)), TrainConfig(epochs=5))
        runs.append(f)
    assert runs[0].checksum() == runs[1].checksum()
    with pytest.raises(FrozenError):
        train_offline(runs[0], data, data)


def test_save_load_round_trip(tmp_path):
    rng = philox(7)
    f = LinearGridForecaster(GRID, rng.standard_normal((2, 3, 12)), rng.standard_normal((2, 3)))
    f.save(tmp_path / "f.json")
    g = load_forecaster(tmp_path / "f.json")
    assert g.checksum() == f.checksum() and g.frozen
    LocfForecaster(GRID).save(tmp_path / "l.json")
    assert load_forecaster(tmp_path / "l.json").kind == "locf"
