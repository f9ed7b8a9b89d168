import csv

import numpy as np
import pytest

from channelkan.channel import WindowDataset, build_dataset
from channelkan.errors import DimensionError, DivergenceError, EmptyDatasetError, UndefinedNormalizationError
from channelkan.evaluate import desk_system
from channelkan.model import ModelConfig, ModelParams, init_params
from channelkan.train import (
    Adam,
    TrainConfig,
    batch_loss_and_grads,
    dataset_nmse,
    nmse_loss,
    predict_batch,
    train,
)

SYS = desk_system()
TOY = ModelConfig(T=8, P=2, K=SYS.K, n_pairs=SYS.n_pairs, scales=(1, 3), conv_channels=(4,), order=3)


@pytest.fixture(scope="module")
def data():
    return build_dataset(12, 30.0, None, SYS, 8, 2, seed=11)


def test_nmse_exact_values(rng):
    h = rng.standard_normal((3, 2, 4, 2)) + 1j * rng.standard_normal((3, 2, 4, 2))
    assert nmse_loss(h, h) == 0.0
    assert nmse_loss(np.zeros_like(h), h) == 1.0
    assert nmse_loss(2 * h[0], h[0]) == pytest.approx(1.0)


def test_nmse_is_mean_of_ratios():
    truth = np.ones((2, 1, 1, 1), complex) * np.array([1.0, 10.0])[:, None, None, None]
    pred = truth + 1.0
    assert nmse_loss(pred, truth) == pytest.approx((1.0 + 0.01) / 2)


def test_nmse_rejects_zero_truth():
    with pytest.raises(UndefinedNormalizationError):
        nmse_loss(np.ones((1, 1, 1)), np.zeros((1, 1, 1)))


def test_nmse_shape_mismatch():
    with pytest.raises(DimensionError):
        nmse_loss(np.ones((2, 1, 1)), np.ones((1, 1, 1)))


def test_batch_nmse_equal_norms_is_mean_of_samples(rng, data):
    params = init_params(TOY, 0)
    h = data.history[:4]
    f = data.future[:4]
    f = f / np.linalg.norm(f.reshape(4, -1), axis=1)[:, None, None, None]
    pred = predict_batch(params, TOY, h)
    per = [nmse_loss(pred[i], f[i]) for i in range(4)]
    assert nmse_loss(pred, f) == pytest.approx(np.mean(per), rel=1e-12)


def test_gradient_is_mean_of_per_sample_gradients(data):
    params = init_params(TOY, 0)
    h, f = data.history[:2], data.future[:2]
    _, g_both = batch_loss_and_grads(params, TOY, h, f)
    _, g0 = batch_loss_and_grads(params, TOY, h[:1], f[:1])
    _, g1 = batch_loss_and_grads(params, TOY, h[1:], f[1:])
    for k in g_both:
        np.testing.assert_allclose(g_both[k], (g0[k] + g1[k]) / 2, atol=1e-12)


def test_adam_first_step_is_signed_lr():
    params = ModelParams({"w": np.array([1.0, -2.0, 3.0])})
    opt = Adam(params)
    opt.step(params, {"w": np.array([0.5, -4.0, 1e-3])}, lr=0.1)
    np.testing.assert_allclose(params["w"], [0.9, -1.9, 2.9], atol=1e-6)


def test_adam_matches_reference_two_steps():
    b1, b2, eps, lr = 0.9, 0.999, 1e-8, 0.01
    g1, g2 = np.array([0.3]), np.array([-0.1])
    m1 = (1 - b1) * g1
    v1 = (1 - b2) * g1**2
    x1 = 1.0 - lr * (m1 / (1 - b1)) / (np.sqrt(v1 / (1 - b2)) + eps)
    m2 = b1 * m1 + (1 - b1) * g2
    v2 = b2 * v1 + (1 - b2) * g2**2
    x2 = x1 - lr * (m2 / (1 - b1**2)) / (np.sqrt(v2 / (1 - b2**2)) + eps)
    params = ModelParams({"w": np.array([1.0])})
    opt = Adam(params, b1, b2, eps)
    opt.step(params, {"w": g1}, lr)
    opt.step(params, {"w": g2}, lr)
    np.testing.assert_allclose(params["w"], x2, rtol=1e-14)


def test_zero_lr_leaves_params_bit_exact(data):
    params = init_params(TOY, 0)
    best, report, _, last = train(TOY, params, data, None, TrainConfig(epochs=1, lr0=0.0, batch_size=4))
    for k in params:
        np.testing.assert_array_equal(last[k], params[k])
        np.testing.assert_array_equal(best[k], params[k])
    assert report.epochs_run == 1


def test_lr_schedule_and_report_lengths(data):
    tcfg = TrainConfig(epochs=3, lr0=1e-3, decay=0.5, batch_size=6)
    _, report, _, _ = train(TOY, init_params(TOY), data, data, tcfg)
    assert report.lr == [1e-3, 5e-4, 2.5e-4]
    assert len(report.train_loss) == len(report.val_nmse) == len(report.seconds) == 3


def test_training_is_deterministic(data):
    tcfg = TrainConfig(epochs=2, batch_size=4, seed=3)
    a = train(TOY, init_params(TOY, 1), data, data, tcfg)
    b = train(TOY, init_params(TOY, 1), data, data, tcfg)
    assert a[1].train_loss == b[1].train_loss
    for k in a[0]:
        np.testing.assert_array_equal(a[0][k], b[0][k])


def test_resume_matches_uninterrupted(data):
    tcfg = TrainConfig(epochs=4, batch_size=4, seed=2)
    _, full_rep, full_opt, full_last = train(TOY, init_params(TOY, 1), data, data, tcfg)
    _, rep1, opt1, last1 = train(TOY, init_params(TOY, 1), data, data, TrainConfig(epochs=2, batch_size=4, seed=2))
    _, rep2, _, last2 = train(TOY, last1, data, data, TrainConfig(epochs=2, batch_size=4, seed=2),
                              start_epoch=2, optimizer_state=opt1.state(), best_score=rep1.best_score)
    assert rep2.first_epoch == 2
    assert rep1.train_loss + rep2.train_loss == full_rep.train_loss
    for k in full_last:
        np.testing.assert_array_equal(last2[k], full_last[k])


def test_early_stopping(data):
    tcfg = TrainConfig(epochs=50, lr0=0.0, batch_size=6, patience=3)
    _, report, _, _ = train(TOY, init_params(TOY), data, data, tcfg)
    assert report.epochs_run == 4
    assert report.best_epoch == 0


def test_divergence_names_epoch_and_batch(data):
    bad = WindowDataset(data.history.copy(), data.future, SYS)
    bad.history[5, 0, 0, 0] = np.nan
    with pytest.raises(DivergenceError) as info:
        train(TOY, init_params(TOY), bad, None, TrainConfig(epochs=1, batch_size=4, seed=0))
    order = np.random.default_rng([0, 0]).permutation(len(bad))
    assert info.value.epoch == 0
    assert info.value.batch == int(np.where(order == 5)[0][0]) // 4


def test_empty_and_mismatched_datasets(data):
    with pytest.raises(EmptyDatasetError):
        train(TOY, init_params(TOY), data.subset([]), None, TrainConfig(epochs=1))
    other = ModelConfig(T=6, P=2, K=SYS.K, n_pairs=SYS.n_pairs, scales=(1,), conv_channels=(4,))
    with pytest.raises(DimensionError):
        train(other, init_params(other), data, None, TrainConfig(epochs=1))


def test_checkpoint_written_for_zero_epochs(tmp_path, data):
    path = tmp_path / "b.ckpt"
    _, report, _, _ = train(TOY, init_params(TOY), data, None, TrainConfig(epochs=0), checkpoint_path=path)
    assert path.exists() and report.epochs_run == 0


def test_report_csv(tmp_path, data):
    _, report, _, _ = train(TOY, init_params(TOY), data, data, TrainConfig(epochs=2, batch_size=6))
    report.write_csv(tmp_path / "log.csv", tmp_path / "t.csv")
    rows = list(csv.DictReader(open(tmp_path / "log.csv")))
    assert [r["epoch"] for r in rows] == ["0", "1"]
    assert set(rows[0]) == {"epoch", "train_loss", "val_nmse", "lr"}
    assert len(list(csv.reader(open(tmp_path / "t.csv")))) == 3


def test_small_lr_loss_does_not_increase():
    """Epoch 0 -> 1 train loss is non-increasing in at least 95 of 100 seeds."""
    cfg = ModelConfig(T=4, P=1, K=SYS.K, n_pairs=SYS.n_pairs, scales=(1, 2), conv_channels=(2,), order=2)
    ok = 0
    for seed in range(100):
        ds = build_dataset(4, 30.0, None, SYS, 4, 1, seed=seed)
        _, rep, _, _ = train(cfg, init_params(cfg, seed), ds, None,
                             TrainConfig(epochs=2, lr0=1e-4, batch_size=4, seed=seed))
        ok += rep.train_loss[1] <= rep.train_loss[0]
    assert ok >= 95


def test_dataset_nmse_matches_predict(data):
    params = init_params(TOY, 5)
    assert dataset_nmse(params, TOY, data) == nmse_loss(predict_batch(params, TOY, data.history), data.future)
