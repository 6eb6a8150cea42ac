import math

import numpy as np
import pytest

from timae.data import make_windows
from timae.errors import ConfigError, ContractError, InvariantViolation, NumericError
from timae.model import MaskSpec, ModelConfig, TiMaeModel, make_mask
from timae.tensor import Tensor
from timae.training import (
    AdamState,
    FinetuneConfig,
    LinearHead,
    TrainConfig,
    adam_step,
    clip_by_global_norm,
    cosine_lr,
    finetune,
    forecast_with_head,
    masked_loss_and_grad,
    masked_mse,
    params_crc,
    pretrain,
)


def tiny(**kw):
    base = dict(window_len=12, d_model=8, d_decoder=4, n_heads=2, enc_layers=1, dec_layers=1)
    base.update(kw)
    return ModelConfig(**base)


def mask_at(L, masked):
    flags = np.zeros(L, bool)
    flags[list(masked)] = True
    return MaskSpec("random", len(masked) / L, L, np.flatnonzero(~flags), np.flatnonzero(flags))


# ------------------------------------------------------------ masked mse
def test_masked_mse_zero_for_perfect_reconstruction():
    x = np.random.default_rng(0).normal(size=(2, 5, 3))
    assert masked_mse(Tensor(x), x, mask_at(5, [1, 3])).item() == 0.0


def test_masked_mse_hand_value():
    pred = Tensor(np.array([[[0.0, 0.0], [1.0, 2.0]]]))
    assert masked_mse(pred, np.zeros((1, 2, 2)), mask_at(2, [1])).item() == 2.5


def test_masked_mse_ignores_visible_positions():
    x = np.zeros((1, 4, 1))
    pred = np.random.default_rng(1).normal(size=(1, 4, 1))
    m = mask_at(4, [2])
    a = masked_mse(Tensor(pred), x, m).item()
    pred[0, 0, 0] += 100.0
    assert masked_mse(Tensor(pred), x, m).item() == a


def test_masked_mse_empty_mask():
    with pytest.raises(ContractError):
        masked_mse(Tensor(np.zeros((1, 3, 1))), np.zeros((1, 3, 1)), mask_at(3, []))


# ------------------------------------------------------------------ adam
def test_adam_zero_gradient_keeps_params():
    p = {"w": np.array([1.0, -2.0])}
    adam_step(p, {"w": np.zeros(2)}, AdamState(), 0.1)
    assert np.array_equal(p["w"], [1.0, -2.0])


def test_adam_first_step_magnitude():
    p = {"w": np.array([0.0])}
    adam_step(p, {"w": np.array([1.0])}, AdamState(), 0.1)
    assert p["w"][0] == pytest.approx(-0.1, rel=1e-6)


def test_adam_matches_reference_trajectory():
    # oracle: textbook Adam written out by hand
    rng = np.random.default_rng(0)
    grads = rng.normal(size=(5, 3))
    p = {"w": np.zeros(3)}
    state = AdamState()
    w, m, v = np.zeros(3), np.zeros(3), np.zeros(3)
    for t, g in enumerate(grads, 1):
        adam_step(p, {"w": g}, state, 0.01)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        w = w - 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    assert np.allclose(p["w"], w, rtol=1e-12)


# -------------------------------------------------------------- schedule
def test_cosine_schedule_points():
    assert cosine_lr(0, 100, 1e-3) == 1e-3
    assert cosine_lr(100, 100, 1e-3, 1e-5) == pytest.approx(1e-5)
    assert cosine_lr(50, 100, 1e-3, 1e-5) == pytest.approx((1e-3 + 1e-5) / 2)


def test_clip_by_global_norm():
    g = {"a": np.array([3.0]), "b": np.array([4.0])}
    assert clip_by_global_norm(g, 1.0) == pytest.approx(5.0)
    assert math.hypot(g["a"][0], g["b"][0]) == pytest.approx(1.0)


# ------------------------------------------------------------ pretraining
def test_micro_batching_matches_full_batch_gradient():
    x = np.random.default_rng(0).normal(size=(6, 12, 1))
    masks = [make_mask(12, "random", 0.5, np.random.default_rng(i)) for i in range(6)]
    grads = []
    for mb in (6, 2):
        model = TiMaeModel(tiny(dropout_p=0.0), np.random.default_rng(0), dtype=np.float64)
        loss = masked_loss_and_grad(model, x, masks, None, mb)
        grads.append((loss, np.concatenate([p.grad.ravel() for p in model.params.values()])))
    assert grads[0][0] == pytest.approx(grads[1][0], rel=1e-12)
    assert np.allclose(grads[0][1], grads[1][1], rtol=1e-10, atol=1e-14)


def test_zero_learning_rate_keeps_parameters():
    model = TiMaeModel(tiny(), np.random.default_rng(0))
    before = params_crc(model)
    pretrain(model, np.random.default_rng(1).normal(size=(60, 1)), TrainConfig(lr=0.0, epochs=1, sampling_time=2, batch_size=8))
    assert params_crc(model) == before


def test_pretrain_is_deterministic():
    series = np.random.default_rng(1).normal(size=(60, 1))
    crcs = []
    for _ in range(2):
        model = TiMaeModel(tiny(), np.random.default_rng(0))
        pretrain(model, series, TrainConfig(epochs=1, sampling_time=2, batch_size=8, seed=3))
        crcs.append(params_crc(model))
    assert crcs[0] == crcs[1]


def test_pretrain_logs_steps_and_epochs():
    model = TiMaeModel(tiny(), np.random.default_rng(0))
    series = np.sin(np.arange(80.0) / 3)[:, None]
    _, log = pretrain(model, series, TrainConfig(epochs=2, sampling_time=1, batch_size=16), val=series[:30])
    assert len(log.steps) == 2 * math.ceil(69 / 16)
    assert [e["epoch"] for e in log.epochs] == [1, 2]
    assert all(e["val_loss"] is not None for e in log.epochs)


def test_pretrain_divergence_guard():
    model = TiMaeModel(tiny(), np.random.default_rng(0))
    with pytest.raises(NumericError), np.errstate(all="ignore"):
        pretrain(model, np.full((40, 1), 1e30), TrainConfig(epochs=1, sampling_time=1, batch_size=8))


def test_pretrain_learns_simple_signal():
    series = np.sin(np.arange(400.0) / 4)[:, None]
    model = TiMaeModel(tiny(window_len=24, d_model=32, d_decoder=16, dropout_p=0.0), np.random.default_rng(0))
    _, log = pretrain(model, series, TrainConfig(epochs=10, sampling_time=1, batch_size=16, lr=3e-3), val=series[:100])
    assert log.epochs[-1]["val_loss"] < 0.5 * log.epochs[0]["val_loss"]


@pytest.mark.parametrize("kw", [dict(epochs=0), dict(sampling_time=0), dict(mask_strategy="blocky"), dict(augmentation="warp")])
def test_invalid_train_config(kw):
    with pytest.raises(ConfigError):
        TrainConfig(**kw)


# ------------------------------------------------------------ fine-tuning
def _trend_windows(h, k, noise=0.0):
    t = np.linspace(0, 1, 300)
    y = 2 * t + noise * np.random.default_rng(0).normal(size=t.shape)
    wb = make_windows((y - y.mean()) / y.std(), h, 1, k)
    return wb.inputs, wb.targets


def test_finetune_keeps_encoder_bytes():
    model = TiMaeModel(tiny(), np.random.default_rng(0))
    x, y = _trend_windows(12, 2)
    enc = model.encoder_parameter_names()
    before = params_crc(model, enc)
    finetune(model, x, y, FinetuneConfig(epochs=2))
    assert params_crc(model, enc) == before


def test_finetune_detects_encoder_mutation(monkeypatch):
    import timae.training as tr

    model = TiMaeModel(tiny(), np.random.default_rng(0))
    x, y = _trend_windows(12, 2)
    real = tr.encoder_features

    def sneaky(m, *a, **kw):
        m.params["embed.bias"].data += 1.0
        return real(m, *a, **kw)

    monkeypatch.setattr(tr, "encoder_features", sneaky)
    with pytest.raises(InvariantViolation):
        finetune(model, x, y, FinetuneConfig(epochs=1))


def test_finetune_beats_last_value_on_trend():
    model = TiMaeModel(tiny(dropout_p=0.0), np.random.default_rng(0))
    x, y = _trend_windows(12, 1)
    head = finetune(model, x, y, FinetuneConfig(solver="lstsq"))
    pred = forecast_with_head(model, head, x)
    assert np.mean((pred - y) ** 2) < np.mean((x[:, -1:, :] - y) ** 2)


def test_flatten_head_parameter_count():
    L, d, k, n = 12, 8, 5, 2
    head = LinearHead.create(L * d, k, n, "flatten", np.random.default_rng(0))
    assert head.num_parameters == (L * d) * (k * n) + k * n


def test_finetune_rejects_mismatched_rows():
    model = TiMaeModel(tiny(), np.random.default_rng(0))
    with pytest.raises(ConfigError):
        finetune(model, np.zeros((3, 12, 1)), np.zeros((2, 1, 1)))


def test_windows_sampling_mode_steps():
    model = TiMaeModel(tiny(), np.random.default_rng(0))
    series = np.sin(np.arange(80.0) / 3)[:, None]
    _, log = pretrain(model, series, TrainConfig(epochs=1, sampling_time=10, sampling_mode="windows"))
    assert len(log.steps) == math.ceil(69 / 10)
