import math

import numpy as np
import pytest
import torch
from sklearn.base import clone

from artery_surrogate.surrogate import (
    CGANRegressor, DiscriminatorConfig, FingerprintMismatch, MeanImageBaseline, UNetConfig,
    UNetRegressor, build_discriminator, build_unet, count_parameters, discriminator_loss,
    generator_loss, l1_loss, load_checkpoint, load_estimator, mse_loss, transfer_init,
)

TINY = dict(depth=2, base_channels=8, batch_size=4)


def blob_data(n, size, seed=0):
    """Random disk label maps with a target that is a fixed blend of the channels."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[:size, :size] + 0.5
    X = np.zeros((n, size, size, 3), np.float32)
    for i in range(n):
        cx, cy = rng.uniform(0.3, 0.7, 2) * size
        r1, r2 = sorted(rng.uniform(0.1, 0.45, 2) * size)
        d = np.hypot(xx - cx, yy - cy)
        X[i, ..., 0] = d < r1
        X[i, ..., 1] = (d >= r1) & (d < r2)
        X[i, ..., 2] = d >= r2
    y = (0.7 * X[..., 0] + 0.2 * X[..., 1]).astype(np.float32)
    return X, y


@pytest.mark.parametrize("depth,size", [(6, 256), (2, 64)])
def test_unet_output_shape(depth, size):
    net = build_unet(UNetConfig(depth=depth, base_channels=8 if depth == 2 else 4))
    with torch.no_grad():
        out = net.eval()(torch.zeros(1, 3, size, size))
    assert out.shape == (1, 1, size, size)


def test_unet_rejects_indivisible_size():
    est = UNetRegressor(**TINY, epochs=1)
    with pytest.raises(ValueError):
        est.fit(np.zeros((2, 30, 30, 3)), np.zeros((2, 30, 30)))


def test_zero_head_gives_constant_map(rng):
    est = UNetRegressor(**TINY, epochs=1).fit(*blob_data(4, 16))
    with torch.no_grad():
        est.net_.head.weight.zero_()
        est.net_.head.bias.fill_(0.25)
    pred = est.predict(rng.random((3, 16, 16, 3)))
    assert np.all(pred == np.float32(0.25))


def test_mse_loss_examples(rng):
    t = torch.from_numpy(rng.random((2, 1, 4, 4)))
    assert mse_loss(t, t).item() == 0.0
    assert mse_loss(t + 0.1, t).item() == pytest.approx(0.01)
    a, b = rng.random((2, 2)), rng.random((2, 2))
    loop = sum((a[i, j] - b[i, j]) ** 2 for i in range(2) for j in range(2)) / 4
    assert abs(mse_loss(torch.from_numpy(a), torch.from_numpy(b)).item() - loop) < 1e-12


def test_discriminator_shape_and_size():
    disc = build_discriminator()
    n = count_parameters(disc)
    assert n == 11_163_585
    assert 10_500_000 <= n <= 11_800_000
    with torch.no_grad():
        out = disc(torch.zeros(1, 3, 256, 256), torch.zeros(1, 1, 256, 256))
    assert out.shape == (1, 1, 8, 8)


def test_zero_discriminator_is_undecided(rng):
    disc = build_discriminator(DiscriminatorConfig(filters=(8, 16, 16, 16, 16)))
    with torch.no_grad():
        for p in disc.parameters():
            p.zero_()
        logits = disc(torch.from_numpy(rng.random((2, 3, 64, 64), np.float32)),
                      torch.from_numpy(rng.random((2, 1, 64, 64), np.float32)))
    assert torch.all(logits == 0)
    assert torch.all(torch.sigmoid(logits) == 0.5)


def test_generator_loss_cases(rng):
    g = torch.from_numpy(rng.random((2, 1, 8, 8)))
    t = torch.from_numpy(rng.random((2, 1, 8, 8)))
    logits = torch.from_numpy(rng.standard_normal((2, 1, 2, 2)))
    total, _, l1 = generator_loss(logits, g, t, 0.0)
    assert total.item() == torch.mean(torch.abs(g - t)).item() == l1.item()

    zero = torch.zeros(2, 1, 2, 2, dtype=torch.float64)
    total, gan, _ = generator_loss(zero, t, t, 0.3)
    assert gan.item() == pytest.approx(math.log(2), rel=1e-12)
    assert total.item() == pytest.approx(0.3 * math.log(2), rel=1e-12)

    total, _, _ = generator_loss(zero + 50.0, t, t, 1.0)
    assert total.item() < 1e-20


def test_discriminator_loss_cases():
    zero = torch.zeros(4, 1, 3, 3, dtype=torch.float64)
    assert discriminator_loss(zero, zero).item() == pytest.approx(2 * math.log(2), rel=1e-12)
    assert discriminator_loss(zero + 50, zero - 50).item() < 1e-20
    swapped = [discriminator_loss(zero - s, zero + s).item() for s in (1, 5, 20, 50)]
    assert swapped == sorted(swapped) and swapped[-1] > 99


def test_constant_target_fits():
    X, _ = blob_data(8, 16)
    y = np.full((8, 16, 16), 0.37, np.float32)
    # 8 samples at batch 4 give 2 steps per epoch, so 100 epochs is 200 steps
    est = UNetRegressor(**TINY, epochs=100, learning_rate=1e-2).fit(X, y)
    assert est.history_[-1]["train_loss"] < 1e-4
    assert np.mean((est.predict(X[:1]) - y[:1]) ** 2) < 1e-3


def test_identity_fit_validation_decreases():
    X, _ = blob_data(40, 16, seed=3)
    y = X[..., 0].copy()
    est = UNetRegressor(**TINY, epochs=5, learning_rate=1e-3)
    est.fit(X[:32], y[:32], validation_data=(X[32:], y[32:]))
    val = [r["val_loss"] for r in est.history_]
    assert all(b < a for a, b in zip(val, val[1:])), val


def test_seed_determinism():
    X, y = blob_data(8, 16)
    runs = [UNetRegressor(**TINY, epochs=1, seed=5).fit(X, y).history_[0]["train_loss"]
            for _ in range(2)]
    assert runs[0] == runs[1]


def test_lambda_zero_cgan_matches_l1_regression():
    X, y = blob_data(8, 16)
    common = dict(**TINY, dropout=0.0, epochs=2, learning_rate=2e-4, beta1=0.5, seed=2)
    gan = CGANRegressor(**common, lam=0.0, disc_filters=(4, 4, 4),
                        stochastic_inference=False).fit(X, y)
    reg = UNetRegressor(**common, loss="l1").fit(X, y)
    np.testing.assert_array_equal(gan.predict(X), reg.predict(X))


def test_small_cgan_run_improves_and_stays_finite():
    X, y = blob_data(64, 64, seed=7)
    est = CGANRegressor(**TINY, epochs=30, disc_filters=(8, 16, 32, 32, 32), seed=1).fit(X, y)
    hist = est.history_
    assert len(hist) == 30
    assert all(np.isfinite(r[k]) for r in hist for k in ("gan_loss", "l1_loss", "disc_loss"))
    assert hist[-1]["l1_loss"] <= 0.7 * hist[0]["l1_loss"]


def test_checkpoint_round_trip_and_transfer(tmp_path):
    X, y = blob_data(8, 16)
    donor = UNetRegressor(**TINY, epochs=2).fit(X, y)
    path = donor.save(tmp_path / "donor.ckpt")
    back = load_estimator(path)
    np.testing.assert_array_equal(back.predict(X), donor.predict(X))
    assert back.history_ == donor.history_

    net = build_unet(UNetConfig(depth=2, base_channels=8))
    transfer_init(net, load_checkpoint(path), UNetConfig(depth=2, base_channels=8).fingerprint)
    for name, t in net.state_dict().items():
        assert torch.equal(t, donor.net_.state_dict()[name]), name

    other = UNetConfig(depth=3, base_channels=8)
    with pytest.raises(FingerprintMismatch):
        transfer_init(build_unet(other), load_checkpoint(path), other.fingerprint)
    with pytest.raises(FingerprintMismatch):
        UNetRegressor(depth=3, base_channels=8, epochs=1, init_checkpoint=path).fit(X, y)


def test_cgan_checkpoint_round_trip(tmp_path):
    X, y = blob_data(8, 16)
    est = CGANRegressor(**TINY, epochs=1, disc_filters=(4, 4, 4),
                        stochastic_inference=False).fit(X, y)
    back = load_estimator(est.save(tmp_path / "g.ckpt"))
    assert isinstance(back, CGANRegressor)
    np.testing.assert_array_equal(back.predict(X), est.predict(X))


def test_batched_prediction_matches_single(rng):
    X, y = blob_data(6, 16)
    est = UNetRegressor(**TINY, epochs=1).fit(X, y)
    batched = est.predict(X)
    single = np.concatenate([est.predict(X[i:i + 1]) for i in range(6)])
    np.testing.assert_array_equal(batched, single)
    wild = est.predict(rng.normal(0, 50, (2, 16, 16, 3)))
    assert wild.min() >= 0 and wild.max() <= 1 and wild.shape == (2, 16, 16)


def test_batch_permutation_leaves_loss_unchanged(rng):
    net = build_unet(UNetConfig(depth=2, base_channels=4)).double().train()
    x = torch.from_numpy(rng.random((4, 3, 8, 8)))
    t = torch.from_numpy(rng.random((4, 1, 8, 8)))
    perm = torch.tensor([2, 0, 3, 1])
    a = mse_loss(net(x), t).item()
    b = mse_loss(net(x[perm]), t[perm]).item()
    assert a == pytest.approx(b, rel=1e-12)


def test_gradient_matches_finite_differences(rng):
    torch.manual_seed(0)
    net = build_unet(UNetConfig(depth=2, base_channels=4)).double().train()
    x = torch.from_numpy(rng.random((2, 3, 8, 8)))
    t = torch.from_numpy(rng.random((2, 1, 8, 8)))
    loss = mse_loss(net(x), t)
    net.zero_grad()
    loss.backward()
    params = [p for p in net.parameters()]
    h = 1e-6
    for _ in range(20):
        p = params[rng.integers(len(params))]
        flat = p.data.view(-1)
        i = int(rng.integers(flat.numel()))
        analytic = p.grad.view(-1)[i].item()
        with torch.no_grad():
            flat[i] += h
            up = mse_loss(net(x), t).item()
            flat[i] -= 2 * h
            down = mse_loss(net(x), t).item()
            flat[i] += h
        numeric = (up - down) / (2 * h)
        assert abs(analytic - numeric) <= 1e-3 * max(abs(numeric), 1e-6), (analytic, numeric)


def test_non_finite_loss_raises():
    X, _ = blob_data(4, 16)
    y = np.full((4, 16, 16), 3e38, np.float32)  # squared error overflows float32
    with pytest.raises(FloatingPointError, match="epoch 1"):
        UNetRegressor(**TINY, epochs=1).fit(X, y)


def test_mean_image_baseline(rng):
    y = rng.random((5, 8, 8)).astype(np.float32)
    base = MeanImageBaseline().fit(np.zeros((5, 8, 8, 3)), y)
    pred = base.predict(np.ones((2, 8, 8, 3)))
    assert pred.shape == (2, 8, 8)
    np.testing.assert_allclose(pred[1], y.mean(axis=0), rtol=1e-6)


def test_sklearn_params_and_clone():
    est = UNetRegressor(**TINY, epochs=3)
    params = est.get_params()
    assert params["depth"] == 2 and params["epochs"] == 3
    copy = clone(est).set_params(dropout=0.3)
    assert copy.dropout == 0.3 and est.dropout == 0.0
    assert "lam" in CGANRegressor().get_params()


def test_validation_fraction_tracks_best_epoch():
    X, y = blob_data(10, 16)
    est = UNetRegressor(**TINY, epochs=3, validation_fraction=0.2).fit(X, y)
    val = [r["val_loss"] for r in est.history_]
    assert est.best_epoch_ == 1 + int(np.argmin(val))


def test_target_scaling_gain_and_units():
    X, y = blob_data(8, 16, seed=3)
    y = y * np.float32(0.02)
    est = UNetRegressor(**TINY, epochs=2, target_scaling="p99").fit(X, y)
    assert est.target_gain_ == pytest.approx(1.0 / np.percentile(y, 99))
    pred = est.predict(X)
    assert pred.min() >= 0.0 and pred.max() <= 1.0
    # logged losses are in original units, on the scale of y**2 not 1
    assert est.history_[0]["train_loss"] < 10 * 0.02 ** 2


def test_target_scaling_checkpoint_round_trip(tmp_path):
    X, y = blob_data(4, 16, seed=4)
    y = y * np.float32(0.05)
    est = UNetRegressor(**TINY, epochs=1, target_scaling="p99").fit(X, y)
    loaded = load_estimator(est.save(tmp_path / "m.ckpt"))
    assert loaded.target_gain_ == est.target_gain_
    np.testing.assert_array_equal(loaded.predict(X), est.predict(X))


def test_target_scaling_unknown():
    X, y = blob_data(4, 16, seed=4)
    with pytest.raises(ValueError, match="target_scaling"):
        UNetRegressor(**TINY, epochs=1, target_scaling="std").fit(X, y)
