"""Masked-reconstruction pretraining and frozen-encoder fine-tuning."""

from __future__ import annotations

import csv
import json
import logging
import math
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import AUGMENTATIONS, augment, iter_batches, make_windows
from .errors import ConfigError, ContractError, InvariantViolation, NumericError
from .model import MASK_STRATEGIES, MaskSpec, TiMaeModel, make_mask, xavier_uniform
from .tensor import Tensor

log = logging.getLogger(__name__)


# ------------------------------------------------------------------- loss
def mask_indicator(mask, batch: int, length: int) -> np.ndarray:
    """[B, L] float indicator of masked positions."""
    if isinstance(mask, np.ndarray):
        ind = mask.astype(np.float64)
        return np.broadcast_to(ind, (batch, length)) if ind.ndim == 1 else ind
    if isinstance(mask, MaskSpec):
        return np.broadcast_to(mask.indicator().astype(np.float64), (batch, length))
    masks = list(mask)
    return np.stack([m.indicator() for m in masks]).astype(np.float64)


def masked_mse(pred: Tensor, target, mask) -> Tensor:
    """Squared error averaged over masked timesteps, channels and batch only."""
    target = T.as_tensor(target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise ConfigError(f"masked_mse: prediction {pred.shape} vs target {target.shape}")
    B, L, n = pred.shape
    ind = mask_indicator(mask, B, L)
    count = ind.sum()
    if count == 0:
        raise ContractError("masked_mse needs at least one masked position")
    w = (ind / (count * n)).astype(pred.dtype)[:, :, None]
    diff = T.sub(pred, target)
    return T.reduce_sum(T.mul(T.mul(diff, diff), Tensor(w)))


# -------------------------------------------------------------- optimiser
@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update, in place on ``params``."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)


def cosine_lr(step: int, total_steps: int, lr0: float, floor: float = 0.0) -> float:
    if total_steps <= 0:
        return lr0
    step = min(max(step, 0), total_steps)
    return floor + (lr0 - floor) * (1.0 + math.cos(math.pi * step / total_steps)) / 2.0


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
    if total > max_norm:
        s = max_norm / (total + 1e-12)
        for g in grads.values():
            g *= s
    return total


# ----------------------------------------------------------------- config
@dataclass
class TrainConfig:
    lr: float = 1e-3
    lr_floor: float = 0.0
    epochs: int = 10
    batch_size: int = 64
    sampling_time: int = 30
    sampling_mode: str = "masks"
    mask_strategy: str = "random"
    augmentation: str = "none"
    window_stride: int = 1
    val_stride: int | None = None
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float | None = None
    micro_batch: int = 256
    val_mask_seed: int = 2024

    def __post_init__(self):
        if self.sampling_time < 1:
            raise ConfigError("sampling_time must be >= 1")
        if self.sampling_mode not in ("masks", "windows"):
            raise ConfigError(f"sampling_mode must be 'masks' or 'windows', got {self.sampling_mode!r}")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1 or self.micro_batch < 1 or self.window_stride < 1:
            raise ConfigError("batch_size, micro_batch and window_stride must be >= 1")
        if self.mask_strategy not in MASK_STRATEGIES:
            raise ConfigError(f"unknown mask strategy {self.mask_strategy!r}")
        if self.augmentation not in AUGMENTATIONS:
            raise ConfigError(f"unknown augmentation {self.augmentation!r}")
        if self.lr < 0 or self.lr_floor < 0:
            raise ConfigError("learning rates must be non-negative")


@dataclass
class TrainLog:
    steps: list[dict] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)
    seconds: float = 0.0

    def write_csv(self, path: str | Path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "epoch", "lr", "loss"])
            for s in self.steps:
                w.writerow([s["step"], s["epoch"], repr(s["lr"]), repr(s["loss"])])

    def summary(self) -> dict:
        return {
            "n_steps": len(self.steps),
            "epochs": self.epochs,
            "final_train_loss": self.epochs[-1]["train_loss"] if self.epochs else None,
            "final_val_loss": self.epochs[-1]["val_loss"] if self.epochs else None,
        }

    def write_summary(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")


# ------------------------------------------------------------ pretraining
def _reconstruction_target(x: np.ndarray, model: TiMaeModel) -> np.ndarray:
    n = model.cfg.out_channels
    if n == x.shape[-1]:
        return x
    if n < x.shape[-1]:
        return x[..., :n]
    raise ConfigError(f"cannot reconstruct {n} channels from {x.shape[-1]} inputs")


def masked_loss_and_grad(
    model: TiMaeModel,
    x: np.ndarray,
    masks: Sequence[MaskSpec],
    rng: np.random.Generator | None,
    micro_batch: int,
    training: bool = True,
) -> float:
    """Mean masked MSE over all (window, mask) rows; gradients accumulate into the params.

    Rows are processed in chunks of ``micro_batch``; chunk losses are
    weighted by their masked-element share so the sum equals the full-batch
    loss and the accumulated gradient equals its gradient.
    """
    target = _reconstruction_target(x, model)
    counts = np.array([m.n_masked for m in masks], dtype=np.float64)
    total = counts.sum()
    loss = 0.0
    for lo in range(0, x.shape[0], micro_batch):
        sl = slice(lo, lo + micro_batch)
        chunk_masks = masks[sl]
        out = model.reconstruct(x[sl], chunk_masks, training=training, rng=rng)
        part = T.scale(masked_mse(out, target[sl], chunk_masks), counts[sl].sum() / total)
        loss += part.item()
        part.backward()
    return loss


def evaluate_masked(model: TiMaeModel, windows: np.ndarray, strategy: str, seed: int, micro_batch: int = 256) -> float:
    """Masked MSE under one fixed mask per window (inference mode)."""
    rng = np.random.default_rng(seed)
    L = windows.shape[1]
    masks = [make_mask(L, strategy, model.cfg.mask_ratio, rng, draw=i) for i in range(windows.shape[0])]
    target = _reconstruction_target(windows, model)
    num = den = 0.0
    with T.no_grad():
        for lo in range(0, windows.shape[0], micro_batch):
            sl = slice(lo, lo + micro_batch)
            out = model.reconstruct(windows[sl], masks[sl])
            c = sum(m.n_masked for m in masks[sl])
            num += masked_mse(out, target[sl], masks[sl]).item() * c
            den += c
    return num / den


def pretrain(
    model: TiMaeModel,
    train: np.ndarray,
    cfg: TrainConfig,
    val: np.ndarray | None = None,
    log_every: int = 0,
) -> tuple[TiMaeModel, TrainLog]:
    """Masked-autoencoder pretraining on one normalised split.

    Every window in a batch gets ``sampling_time`` independent masks; the
    loss is the masked MSE averaged over all of them, followed by one Adam
    step. The learning rate follows a per-step cosine decay.

    With ``sampling_mode="windows"`` the other reading applies instead: each
    step draws ``sampling_time`` windows with one mask each, and
    ``batch_size`` is unused.
    """
    import time

    t0 = time.perf_counter()
    L = model.cfg.window_len
    windows = make_windows(train, L, cfg.window_stride).inputs.astype(model.dtype)
    val_windows = None
    if val is not None:
        val_windows = make_windows(val, L, cfg.val_stride or cfg.window_stride).inputs.astype(model.dtype)

    rng = np.random.default_rng(cfg.seed)
    state = AdamState(cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    per_mask = cfg.sampling_mode == "masks"
    batch_size = cfg.batch_size if per_mask else cfg.sampling_time
    S = cfg.sampling_time if per_mask else 1
    steps_per_epoch = math.ceil(windows.shape[0] / batch_size)
    total = cfg.epochs * steps_per_epoch
    params = model.parameters()
    trainlog = TrainLog()
    step = 0
    ratio = model.cfg.mask_ratio
    for epoch in range(1, cfg.epochs + 1):
        epoch_losses = []
        for idx in iter_batches(windows.shape[0], batch_size, rng):
            x = windows[idx]
            if cfg.augmentation != "none":
                x = augment(x, cfg.augmentation, rng).astype(model.dtype)
            xs = np.repeat(x, S, axis=0)
            masks = [make_mask(L, cfg.mask_strategy, ratio, rng, draw=s) for _ in range(len(idx)) for s in range(S)]
            model.zero_grad()
            loss = masked_loss_and_grad(model, xs, masks, rng, cfg.micro_batch)
            if not math.isfinite(loss):
                raise NumericError(f"loss became non-finite ({loss}) at epoch {epoch}, step {step}")
            grads = {n: p.grad for n, p in params.items() if p.grad is not None}
            if cfg.grad_clip is not None:
                clip_by_global_norm(grads, cfg.grad_clip)
            lr = cosine_lr(step, total, cfg.lr, cfg.lr_floor)
            adam_step({n: p.data for n, p in params.items()}, grads, state, lr)
            trainlog.steps.append({"step": step, "epoch": epoch, "lr": lr, "loss": loss})
            epoch_losses.append(loss)
            if log_every and step % log_every == 0:
                log.info("epoch %d step %d lr %.3g loss %.5f", epoch, step, lr, loss)
            step += 1
        model.zero_grad()
        val_loss = None
        if val_windows is not None:
            val_loss = evaluate_masked(model, val_windows, cfg.mask_strategy, cfg.val_mask_seed, cfg.micro_batch)
        trainlog.epochs.append({"epoch": epoch, "train_loss": float(np.mean(epoch_losses)), "val_loss": val_loss})
        log.info("epoch %d train %.5f val %s", epoch, trainlog.epochs[-1]["train_loss"], val_loss)
    trainlog.seconds = time.perf_counter() - t0
    return model, trainlog


# ------------------------------------------------------------ fine-tuning
def params_crc(model: TiMaeModel, names: Sequence[str] | None = None) -> int:
    names = list(model.params) if names is None else list(names)
    crc = 0
    for n in names:
        crc = zlib.crc32(n.encode(), crc)
        crc = zlib.crc32(np.ascontiguousarray(model.params[n].data).tobytes(), crc)
    return crc


@dataclass
class LinearHead:
    """Linear regressor from encoder features to a [k, n] forecast."""

    weight: np.ndarray
    bias: np.ndarray
    horizon: int
    out_channels: int
    pooling: str = "flatten"

    @classmethod
    def create(cls, in_dim: int, horizon: int, out_channels: int, pooling: str, rng: np.random.Generator) -> LinearHead:
        out = horizon * out_channels
        return cls(xavier_uniform(rng, in_dim, out, (in_dim, out), np.float64), np.zeros(out), horizon, out_channels, pooling)

    @property
    def num_parameters(self) -> int:
        return self.weight.size + self.bias.size

    def predict(self, feats: np.ndarray) -> np.ndarray:
        y = feats @ self.weight + self.bias
        return y.reshape(-1, self.horizon, self.out_channels)


@dataclass
class FinetuneConfig:
    epochs: int = 10
    lr: float = 1e-3
    batch_size: int = 64
    pooling: str = "flatten"
    seed: int = 0
    solver: str = "adam"

    def __post_init__(self):
        if self.pooling not in ("flatten", "mean"):
            raise ConfigError(f"pooling must be 'flatten' or 'mean', got {self.pooling!r}")
        if self.solver not in ("adam", "lstsq"):
            raise ConfigError(f"solver must be 'adam' or 'lstsq', got {self.solver!r}")


def encoder_features(model: TiMaeModel, windows: np.ndarray, pooling: str = "flatten", micro_batch: int = 256) -> np.ndarray:
    """Frozen encoder outputs of full (unmasked) windows, pooled or flattened."""
    feats = []
    with T.no_grad():
        for lo in range(0, windows.shape[0], micro_batch):
            z = model.encode_full(windows[lo : lo + micro_batch].astype(model.dtype)).data.astype(np.float64)
            if pooling == "mean":
                feats.append(z.mean(axis=1))
            elif pooling == "max":
                feats.append(z.max(axis=1))
            else:
                feats.append(z.reshape(z.shape[0], -1))
    return np.concatenate(feats, axis=0)


def finetune(
    model: TiMaeModel,
    inputs: np.ndarray,
    targets: np.ndarray,
    cfg: FinetuneConfig = FinetuneConfig(),
    head: LinearHead | None = None,
) -> LinearHead:
    """Fit a linear head on frozen encoder features; the encoder must not move."""
    if inputs.shape[0] != targets.shape[0]:
        raise ConfigError("inputs and targets disagree on the number of windows")
    _, k, n = targets.shape
    enc_names = model.encoder_parameter_names()
    before = params_crc(model, enc_names)

    feats = encoder_features(model, inputs, cfg.pooling)
    rng = np.random.default_rng(cfg.seed)
    if head is None:
        head = LinearHead.create(feats.shape[1], k, n, cfg.pooling, rng)
    y = targets.reshape(targets.shape[0], -1).astype(np.float64)

    if cfg.solver == "lstsq":
        design = np.hstack([feats, np.ones((feats.shape[0], 1))])
        sol, *_ = np.linalg.lstsq(design, y, rcond=None)
        head.weight, head.bias = sol[:-1], sol[-1]
    else:
        state = AdamState()
        steps_per_epoch = math.ceil(feats.shape[0] / cfg.batch_size)
        total = cfg.epochs * steps_per_epoch
        step = 0
        for _ in range(cfg.epochs):
            for idx in iter_batches(feats.shape[0], cfg.batch_size, rng):
                f, t = feats[idx], y[idx]
                resid = f @ head.weight + head.bias - t
                scale = 2.0 / resid.size
                grads = {"weight": f.T @ resid * scale, "bias": resid.sum(axis=0) * scale}
                adam_step({"weight": head.weight, "bias": head.bias}, grads, state, cosine_lr(step, total, cfg.lr))
                step += 1

    if params_crc(model, enc_names) != before:
        raise InvariantViolation("encoder parameters changed during fine-tuning")
    return head


def forecast_with_head(model: TiMaeModel, head: LinearHead, inputs: np.ndarray) -> np.ndarray:
    return head.predict(encoder_features(model, inputs, head.pooling))


def run_summary(cfg: TrainConfig, trainlog: TrainLog) -> dict:
    return {"train_config": asdict(cfg), **trainlog.summary(), "seconds": trainlog.seconds}
