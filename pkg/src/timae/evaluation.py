"""Downstream protocols: forecasting, probes, metrics and reports."""

from __future__ import annotations

import csv
import io
import itertools
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .data import Normalizer, SplitSpec, SyntheticSpec, generate_synthetic, make_windows, prepare
from .errors import ConfigError, ContractError, ParameterError, ShapeError
from .model import MASK_STRATEGIES, MaskSpec, ModelConfig, TiMaeModel, make_mask
from .training import TrainConfig, encoder_features, pretrain

log = logging.getLogger(__name__)

RIDGE_ALPHAS = (0.1, 0.2, 0.5, 1, 2, 5, 10, 20, 50, 100, 200, 500, 1000)


# ----------------------------------------------------------------- metrics
def _pair(pred, target) -> tuple[np.ndarray, np.ndarray]:
    p, t = np.asarray(pred, dtype=np.float64), np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise ShapeError(f"prediction {p.shape} and target {t.shape} differ in shape")
    return p, t


def mse(pred, target) -> float:
    p, t = _pair(pred, target)
    return float(np.mean((p - t) ** 2))


def mae(pred, target) -> float:
    p, t = _pair(pred, target)
    return float(np.mean(np.abs(p - t)))


# ------------------------------------------------------------- baselines
def last_value_forecast(history: np.ndarray, k: int) -> np.ndarray:
    """Repeat the final observation: history [..., h, m] -> [..., k, m]."""
    last = history[..., -1:, :]
    return np.repeat(last, k, axis=-2)


def seasonal_naive_forecast(context: np.ndarray, k: int, period: int) -> np.ndarray:
    """Repeat the last full season: y[t] = y[t - period * ceil((t - origin + 1) / period)].

    ``context`` [..., c, m] must hold at least ``period`` steps before the origin.
    """
    if context.shape[-2] < period:
        raise ConfigError(f"seasonal naive needs {period} context steps, got {context.shape[-2]}")
    season = context[..., -period:, :]
    reps = -(-k // period)
    return np.concatenate([season] * reps, axis=-2)[..., :k, :]


# --------------------------------------------------------- direct forecast
def forecast_mask(h: int, k: int) -> MaskSpec:
    """Continuous mask over the final ``k`` of ``h + k`` positions."""
    flags = np.zeros(h + k, dtype=bool)
    flags[h:] = True
    return MaskSpec("continuous", k / (h + k), h + k, np.flatnonzero(~flags), np.flatnonzero(flags))


def direct_forecast(model: TiMaeModel, history: np.ndarray, k: int, micro_batch: int = 256) -> np.ndarray:
    """Forecast ``k`` steps by masking the tail of an (h + k)-long window.

    ``history`` is [h, m] or [B, h, m]. The unknown future inputs are filled
    with the last observed value before embedding (the convolution looks one
    step ahead of the last visible token).
    """
    if k < 1:
        raise ParameterError("forecast horizon k must be >= 1")
    hist = np.asarray(history, dtype=model.dtype)
    single = hist.ndim == 2
    if single:
        hist = hist[None]
    B, h, m = hist.shape
    if h < 1:
        raise ParameterError("history must hold at least one step")
    if m != model.cfg.in_channels:
        raise ShapeError(f"history has {m} channels, model expects {model.cfg.in_channels}")
    window = np.concatenate([hist, np.repeat(hist[:, -1:, :], k, axis=1)], axis=1)
    mask = forecast_mask(h, k)
    outs = []
    with T.no_grad():
        for lo in range(0, B, micro_batch):
            outs.append(model.reconstruct(window[lo : lo + micro_batch], mask).data[:, h:, :])
    out = np.concatenate(outs, axis=0).astype(np.float64)
    return out[0] if single else out


# ------------------------------------------------------------ ridge probe
@dataclass
class RidgeProbe:
    alpha: float
    weight: np.ndarray
    intercept: np.ndarray
    fitted: bool = True
    val_mse: dict[float, float] = field(default_factory=dict)

    def predict(self, reps: np.ndarray) -> np.ndarray:
        return np.asarray(reps) @ self.weight + self.intercept


def ridge_solve(X: np.ndarray, Y: np.ndarray, alpha: float, fit_intercept: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Closed-form solution of (X'X + alpha I) W = X'Y, with an unpenalised intercept via centring."""
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if fit_intercept:
        xm, ym = X.mean(axis=0), Y.mean(axis=0)
    else:
        xm, ym = np.zeros(X.shape[1]), np.zeros(Y.shape[1])
    Xc, Yc = X - xm, Y - ym
    A = Xc.T @ Xc + alpha * np.eye(X.shape[1])
    try:
        W = np.linalg.solve(A, Xc.T @ Yc)
    except np.linalg.LinAlgError as exc:
        raise ConfigError(f"ridge solve failed: {exc}") from None
    return W, ym - xm @ W


def ridge_fit(
    train_reps: np.ndarray,
    train_targets: np.ndarray,
    val_reps: np.ndarray | None = None,
    val_targets: np.ndarray | None = None,
    alphas: Sequence[float] = RIDGE_ALPHAS,
    fit_intercept: bool = True,
) -> RidgeProbe:
    """Grid-search alpha on validation MSE (ties go to the smaller alpha), then refit on train.

    Without a validation set the last fifth of the training rows is held out.
    """
    X = np.asarray(train_reps, dtype=np.float64)
    Y = np.asarray(train_targets, dtype=np.float64).reshape(X.shape[0], -1)
    if X.shape[0] < 2:
        raise ConfigError("ridge_fit needs at least two training rows")
    if not alphas:
        raise ConfigError("alpha grid is empty")
    if val_reps is None:
        cut = max(1, int(0.8 * X.shape[0]))
        Xt, Yt, Xv, Yv = X[:cut], Y[:cut], X[cut:], Y[cut:]
        if Xv.shape[0] == 0:
            Xt, Xv, Yt, Yv = X, X, Y, Y
    else:
        Xt, Yt = X, Y
        Xv = np.asarray(val_reps, dtype=np.float64)
        Yv = np.asarray(val_targets, dtype=np.float64).reshape(Xv.shape[0], -1)
    scores = {}
    for a in sorted(alphas):
        W, b = ridge_solve(Xt, Yt, a, fit_intercept)
        scores[a] = mse(Xv @ W + b, Yv)
    best = min(scores, key=lambda a: (scores[a], a))
    W, b = ridge_solve(X, Y, best, fit_intercept)
    return RidgeProbe(best, W, b, True, scores)


# ---------------------------------------------------------- representations
def extract_representations(model: TiMaeModel, windows: np.ndarray, pooling: str = "mean") -> np.ndarray:
    """Instance-level encoder representations of fully visible windows."""
    if pooling not in ("mean", "max", "none"):
        raise ParameterError(f"pooling must be mean, max or none; got {pooling!r}")
    return encoder_features(model, np.asarray(windows), "flatten" if pooling == "none" else pooling)


# ---------------------------------------------------------- classification
@dataclass
class LogisticProbe:
    weight: np.ndarray
    bias: np.ndarray
    mean: np.ndarray
    scale: np.ndarray
    l2: float

    def decision(self, reps: np.ndarray) -> np.ndarray:
        return ((np.asarray(reps) - self.mean) / self.scale) @ self.weight + self.bias

    def predict(self, reps: np.ndarray) -> np.ndarray:
        return self.decision(reps).argmax(axis=1)


def _softmax_rows(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def fit_logistic(X: np.ndarray, y: np.ndarray, n_classes: int, l2: float, iters: int = 500, lr: float = 0.5) -> LogisticProbe:
    """Multinomial logistic regression by full-batch gradient descent on standardised features."""
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    scale = np.where(scale > 1e-12, scale, 1.0)
    Z = (X - mean) / scale
    onehot = np.eye(n_classes)[y]
    W = np.zeros((X.shape[1], n_classes))
    b = np.zeros(n_classes)
    n = X.shape[0]
    for _ in range(iters):
        P = _softmax_rows(Z @ W + b)
        G = (P - onehot) / n
        W -= lr * (Z.T @ G + 2 * l2 * W)
        b -= lr * G.sum(axis=0)
    return LogisticProbe(W, b, mean, scale, l2)


def classify_probe(
    train_reps: np.ndarray,
    train_labels: np.ndarray,
    test_reps: np.ndarray,
    test_labels: np.ndarray | None = None,
    l2_grid: Sequence[float] = (1e-4, 1e-3, 1e-2, 1e-1),
    l2: float | None = None,
    seed: int = 0,
) -> tuple[np.ndarray, float | None, LogisticProbe]:
    """Linear probe standing in for an RBF-SVM; returns (predictions, accuracy, probe).

    With ``l2`` unset, the penalty is chosen on a random 20% validation split
    of the training rows.
    """
    X = np.asarray(train_reps, dtype=np.float64)
    y = np.asarray(train_labels).astype(int)
    if y.min(initial=0) < 0:
        raise ConfigError("labels must be non-negative integers")
    n_classes = int(y.max()) + 1
    if len(np.unique(y)) < 2:
        raise ConfigError("classification probe needs at least two classes in the training set")
    if l2 is None:
        order = np.random.default_rng(seed).permutation(X.shape[0])
        cut = max(1, int(0.8 * X.shape[0]))
        tr, va = order[:cut], order[cut:]
        if va.size == 0:
            l2 = l2_grid[0]
        else:
            accs = {}
            for lam in sorted(l2_grid, reverse=True):
                probe = fit_logistic(X[tr], y[tr], n_classes, lam)
                accs[lam] = float(np.mean(probe.predict(X[va]) == y[va]))
            l2 = max(accs, key=lambda lam: (accs[lam], lam))
    probe = fit_logistic(X, y, n_classes, l2)
    pred = probe.predict(np.asarray(test_reps, dtype=np.float64))
    acc = None if test_labels is None else float(np.mean(pred == np.asarray(test_labels).astype(int)))
    return pred, acc, probe


# ---------------------------------------------------------------- reports
REPORT_FIELDS = ("task", "mode", "horizon", "strategy", "ratio", "mse", "mae", "scale", "seed")


@dataclass
class EvalReport:
    title: str = ""
    note: str = ""
    rows: list[dict] = field(default_factory=list)

    def add(self, **row) -> None:
        key = tuple(row.get(f) for f in REPORT_FIELDS if f not in ("mse", "mae"))
        if any(tuple(r.get(f) for f in REPORT_FIELDS if f not in ("mse", "mae")) == key for r in self.rows):
            raise ContractError(f"duplicate report row {key}")
        if row["mse"] < 0 or row["mae"] < 0:
            raise ContractError("metrics must be non-negative")
        self.rows.append(row)

    def extend(self, other: EvalReport) -> None:
        for r in other.rows:
            self.add(**r)

    def columns(self) -> list[str]:
        extra = sorted({k for r in self.rows for k in r} - set(REPORT_FIELDS))
        return list(REPORT_FIELDS) + extra

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=self.columns(), lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow({k: _fmt(r.get(k)) for k in self.columns()})
        return buf.getvalue()

    def to_long_csv(self, x_field: str) -> str:
        """Plot-ready long format: one row per (x, metric, scale, seed)."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([x_field, "metric", "value", "scale", "seed", "task"])
        for r in self.rows:
            for metric in ("mse", "mae"):
                w.writerow([_fmt(r.get(x_field)), metric, _fmt(r[metric]), r.get("scale"), r.get("seed"), r.get("task")])
        return buf.getvalue()

    def to_markdown(self, x_field: str | None = None) -> str:
        """Pivot by ``x_field`` (mean over seeds) in the MSE/MAE layout, or a flat table."""
        lines = []
        if self.title:
            lines += [f"### {self.title}", ""]
        if self.note:
            lines += [self.note, ""]
        if x_field is None:
            cols = self.columns()
            lines.append("| " + " | ".join(cols) + " |")
            lines.append("|" + "---|" * len(cols))
            for r in self.rows:
                lines.append("| " + " | ".join(_fmt(r.get(c)) for c in cols) + " |")
            return "\n".join(lines) + "\n"
        groups: dict = {}
        for r in self.rows:
            groups.setdefault((r.get("scale"), r.get(x_field)), []).append(r)
        lines.append(f"| {x_field} | scale | MSE | MAE | seeds |")
        lines.append("|---|---|---|---|---|")
        for (scale, x), rs in groups.items():
            lines.append(
                f"| {_fmt(x)} | {scale} | {np.mean([r['mse'] for r in rs]):.4f} | {np.mean([r['mae'] for r in rs]):.4f} | {len(rs)} |"
            )
        return "\n".join(lines) + "\n"

    def write(self, out_dir: str | Path, stem: str, x_field: str | None = None) -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = [out / f"{stem}.csv", out / f"{stem}.md"]
        paths[0].write_text(self.to_csv())
        paths[1].write_text(self.to_markdown(x_field))
        if x_field is not None:
            paths.append(out / f"{stem}_long.csv")
            paths[2].write_text(self.to_long_csv(x_field))
        return paths


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


# -------------------------------------------------- synthetic benchmark
@dataclass
class Benchmark:
    """A pretrain-then-direct-forecast experiment on one synthetic series.

    Forecast windows of ``history + horizon`` steps are drawn from the test
    split only, at ``eval_stride``.
    """

    series: SyntheticSpec = field(default_factory=SyntheticSpec)
    split: SplitSpec = field(default_factory=lambda: SplitSpec(0.6, 0.2, 0.2))
    model: ModelConfig = field(default_factory=lambda: ModelConfig(window_len=200))
    train: TrainConfig = field(default_factory=TrainConfig)
    history: int = 100
    horizon: int = 100
    eval_stride: int = 10
    data_seed: int = 0


def desk_benchmark(strategy: str = "random") -> Benchmark:
    """Benchmark trained with one mask per window per step, sized for a single CPU core."""
    return Benchmark(train=TrainConfig(sampling_time=1, val_stride=10, micro_batch=64, mask_strategy=strategy))


@dataclass
class BenchmarkResult:
    model: TiMaeModel
    trainlog: object
    normalizer: Normalizer
    metrics: dict


def eval_windows(test: np.ndarray, context: int, horizon: int, stride: int) -> tuple[np.ndarray, np.ndarray]:
    wb = make_windows(test, context, stride, horizon)
    return wb.inputs, wb.targets


def forecast_metrics(
    model: TiMaeModel,
    test: np.ndarray,
    history: int,
    horizon: int,
    stride: int,
    norm: Normalizer,
    period: int | None = None,
    slow_period: int | None = None,
) -> dict:
    """Direct-forecast metrics on one split, with naive baselines, normalised and raw.

    Windows hold enough context for every seasonal baseline to see a full
    season; the model only sees the last ``history`` steps.
    """
    context = max(history, period or 0, slow_period or 0)
    ctx, fut = eval_windows(test, context, horizon, stride)
    hist = ctx[:, -history:]
    pred = direct_forecast(model, hist, horizon)
    n = model.cfg.out_channels
    fut = fut[..., :n]
    ch = range(n)
    out = {
        "mse": mse(pred, fut),
        "mae": mae(pred, fut),
        "mse_raw": mse(norm.inverse(pred, ch), norm.inverse(fut, ch)),
        "mae_raw": mae(norm.inverse(pred, ch), norm.inverse(fut, ch)),
        "naive_last_mse": mse(last_value_forecast(hist, horizon)[..., :n], fut),
        "n_windows": int(fut.shape[0]),
    }
    if period is not None:
        out["naive_seasonal_mse"] = mse(seasonal_naive_forecast(ctx, horizon, period)[..., :n], fut)
    if slow_period is not None:
        out["naive_seasonal_slow_mse"] = mse(seasonal_naive_forecast(ctx, horizon, slow_period)[..., :n], fut)
    return out


def run_benchmark(bench: Benchmark, seed: int, test_series: SyntheticSpec | None = None) -> BenchmarkResult:
    ts = generate_synthetic(bench.series, seed=bench.data_seed + seed)
    data = prepare(ts, bench.split)
    model = TiMaeModel(bench.model, rng=np.random.default_rng(seed))
    tcfg = replace(bench.train, seed=seed)
    model, trainlog = pretrain(model, data.train, tcfg, val=data.val)
    period = round(bench.series.dominant_period_steps())
    slow = round(bench.series.slowest_period_steps())
    metrics = forecast_metrics(
        model, data.test, bench.history, bench.horizon, bench.eval_stride, data.normalizer, period, slow
    )
    return BenchmarkResult(model, trainlog, data.normalizer, metrics)


PROGRESS_STRIDE = 15


def training_progress(
    seed: int, sampling_mode: str = "masks", window_stride: int = PROGRESS_STRIDE, micro_batch: int = 64
) -> dict:
    """Ten epochs of default pretraining at L=300; validation masked-MSE per epoch.

    Every other ``TrainConfig`` default is kept. With the default ``"masks"``
    reading and windows thinned to stride 15, each epoch is one step of
    64 windows with 30 masks each. ``"windows"`` at stride 1 draws 30 windows
    with one mask each per step instead.
    """
    import time

    data = prepare(generate_synthetic(SyntheticSpec(), seed=seed), SplitSpec(0.6, 0.2, 0.2))
    model = TiMaeModel(ModelConfig(window_len=300), rng=np.random.default_rng(seed))
    cfg = TrainConfig(
        seed=seed, sampling_mode=sampling_mode, window_stride=window_stride, val_stride=1, micro_batch=micro_batch
    )
    t0 = time.perf_counter()
    _, trainlog = pretrain(model, data.train, cfg, val=data.val)
    val = [e["val_loss"] for e in trainlog.epochs]
    return {"seed": seed, "val": val, "ratio": val[-1] / val[0], "steps": len(trainlog.steps), "seconds": time.perf_counter() - t0}


# ----------------------------------------------------------- ablations
ABLATION_AXES: dict[str, tuple] = {
    "mask_ratio": (0.30, 0.45, 0.60, 0.75, 0.90),
    "strategy": MASK_STRATEGIES,
    "sampling_time": (20, 25, 30, 35),
    "augmentation": ("none", "scaling", "shifting", "jittering"),
    "norm": ("pre", "post"),
    "encoder_pe": ("on", "off"),
    "decoder_pe": ("on", "off"),
}


def apply_axis(bench: Benchmark, axis: str, value) -> Benchmark:
    if axis not in ABLATION_AXES:
        raise ParameterError(f"unknown ablation axis {axis!r}; expected one of {sorted(ABLATION_AXES)}")
    if value not in ABLATION_AXES[axis]:
        raise ParameterError(f"value {value!r} is not on the {axis} axis {ABLATION_AXES[axis]}")
    if axis == "mask_ratio":
        return replace(bench, model=replace(bench.model, mask_ratio=float(value)))
    if axis == "strategy":
        return replace(bench, train=replace(bench.train, mask_strategy=value))
    if axis == "sampling_time":
        return replace(bench, train=replace(bench.train, sampling_time=int(value)))
    if axis == "augmentation":
        return replace(bench, train=replace(bench.train, augmentation=value))
    if axis == "norm":
        return replace(bench, model=replace(bench.model, norm=value))
    if axis == "encoder_pe":
        return replace(bench, model=replace(bench.model, use_encoder_pe=value == "on"))
    return replace(bench, model=replace(bench.model, use_decoder_pe=value == "on"))


def _cell_metrics(task: tuple[Benchmark, int]) -> dict:
    bench, seed = task
    return run_benchmark(bench, seed).metrics


def ablation_matrix(
    bench: Benchmark,
    axes: dict[str, Sequence],
    seeds: Sequence[int] = (0,),
    factorial: bool = True,
    jobs: int = 1,
) -> EvalReport:
    """One pretrained model per cell and seed; rows in deterministic cell order.

    ``factorial`` crosses all axes; otherwise each axis is varied alone
    around the base configuration (the named-slice layout of an ablation table).
    With ``jobs > 1`` cells run in worker processes; row order is unchanged.
    """
    for axis, values in axes.items():
        for v in values:
            apply_axis(bench, axis, v)
    if factorial:
        names = list(axes)
        cells = [dict(zip(names, combo)) for combo in itertools.product(*(axes[n] for n in names))]
    else:
        cells = [{a: v} for a, vals in axes.items() for v in vals]
    report = EvalReport(
        title="Ablation on the synthetic benchmark",
        note=(
            f"Series alpha={bench.series.alpha}, beta={bench.series.beta}, sigma={bench.series.noise_sigma}; "
            f"direct forecast {bench.history}->{bench.horizon} on the test split. "
            "The synthetic series substitutes for the Weather dataset."
        ),
    )
    tasks = []
    for cell in cells:
        cb = bench
        for axis, v in cell.items():
            cb = apply_axis(cb, axis, v)
        tasks.extend((cell, cb, seed) for seed in seeds)
    work = [(cb, seed) for _, cb, seed in tasks]
    if jobs > 1 and len(work) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_cell_metrics, work))
    else:
        results = [_cell_metrics(w) for w in work]
    for (cell, cb, seed), m in zip(tasks, results):
        label = ",".join(f"{a}={v}" for a, v in cell.items())
        base = {
            "task": f"synthetic:{label}",
            "mode": "direct",
            "horizon": bench.horizon,
            "strategy": cb.train.mask_strategy,
            "ratio": cb.model.mask_ratio,
            "seed": seed,
            **{a: v for a, v in cell.items() if a not in ("strategy",)},
        }
        report.add(**base, mse=m["mse"], mae=m["mae"], scale="normalized")
        report.add(**base, mse=m["mse_raw"], mae=m["mae_raw"], scale="raw")
        log.info("cell %s seed %d mse %.4f", label, seed, m["mse"])
    return report


# ------------------------------------------------------- transferability
TRANSFER_CELLS = ((300.0, 3.0), (600.0, 3.0), (300.0, 100.0), (600.0, 100.0))
REFERENCE_TRANSFER_MSE = {(300.0, 3.0): 0.0134, (600.0, 3.0): 0.0596, (300.0, 100.0): 0.0089, (600.0, 100.0): 0.0232}


def transferability_study(
    bench: Benchmark,
    test_cells: Sequence[tuple[float, float]] = TRANSFER_CELLS,
    seeds: Sequence[int] = (0,),
    pretrained: dict[int, BenchmarkResult] | None = None,
) -> EvalReport:
    """Pretrain once per seed on ``bench.series``; direct-forecast the test split of each (alpha, beta) series.

    Each test series is normalised with its own train-split statistics.
    ``pretrained`` maps seeds to finished ``run_benchmark`` results to reuse.
    """
    report = EvalReport(
        title="Transferability across trend/seasonality settings",
        note=f"Trained on alpha={bench.series.alpha}, beta={bench.series.beta}; forecasting {bench.horizon} steps from {bench.history}.",
    )
    for seed in seeds:
        res = (pretrained or {}).get(seed) or run_benchmark(bench, seed)
        for alpha, beta in test_cells:
            spec = replace(bench.series, alpha=alpha, beta=beta)
            data = prepare(generate_synthetic(spec, seed=bench.data_seed + seed + 1000), bench.split)
            m = forecast_metrics(res.model, data.test, bench.history, bench.horizon, bench.eval_stride, data.normalizer)
            base = {"task": f"alpha={alpha:g},beta={beta:g}", "mode": "direct", "horizon": bench.horizon,
                    "strategy": bench.train.mask_strategy, "ratio": bench.model.mask_ratio, "seed": seed,
                    "alpha": alpha, "beta": beta}
            report.add(**base, mse=m["mse"], mae=m["mae"], scale="normalized")
            report.add(**base, mse=m["mse_raw"], mae=m["mae_raw"], scale="raw")
    return report
