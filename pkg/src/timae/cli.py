"""Command-line entry point: ``timae <command> [flags]``.

Every run directory receives ``config.txt`` (the echoed configuration),
``run.log``, the command's artifacts and ``manifest.json`` with SHA-256
hashes of the config and artifacts. The log holds wall times, so it is
left out of the manifest. Exit codes: 0 ok, 2 usage/config, 3 numeric, 4 I/O.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import checkpoint, config
from .config import RunConfig
from .data import (
    Normalizer,
    TimeSeries,
    equidistant_subsample,
    generate_synthetic,
    load_csv,
    make_windows,
    prepare,
)
from .errors import ConfigError, ParseError, TiMaeError
from .evaluation import (
    ABLATION_AXES,
    Benchmark,
    EvalReport,
    ablation_matrix,
    classify_probe,
    direct_forecast,
    extract_representations,
    last_value_forecast,
    mae,
    mse,
    ridge_fit,
    transferability_study,
)
from .gradcheck import model_check, op_suite
from .model import TiMaeModel
from .training import FinetuneConfig, encoder_features, finetune, params_crc, pretrain

log = logging.getLogger("timae")

COMMANDS = ("pretrain", "finetune", "forecast", "classify", "ablate", "transfer", "gradcheck")

# flag name -> config key; every default hyperparameter has one
FLAG_KEYS = {
    "epochs": "train.epochs",
    "batch_size": "train.batch_size",
    "lr": "train.lr",
    "sampling_time": "train.sampling_time",
    "mask_strategy": "train.mask_strategy",
    "augmentation": "train.augmentation",
    "window_stride": "train.window_stride",
    "micro_batch": "train.micro_batch",
    "mask_ratio": "model.mask_ratio",
    "window_len": "model.window_len",
    "d_model": "model.d_model",
    "d_decoder": "model.d_decoder",
    "n_heads": "model.n_heads",
    "enc_layers": "model.enc_layers",
    "dec_layers": "model.dec_layers",
    "dropout": "model.dropout_p",
    "out_channels": "model.out_channels",
    "norm": "model.norm",
    "csv": "data.csv",
    "synthetic": "data.synthetic",
    "split": "data.split",
    "mode": "eval.mode",
    "history": "eval.history",
    "horizon": "eval.horizon",
    "eval_stride": "eval.stride",
    "pooling": "eval.pooling",
    "axis": "eval.axes",
    "seeds": "eval.seeds",
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="timae", description="Masked time-series autoencoder experiments.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="flat key=value config file; flags override it")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="run directory")
    p.add_argument("--jobs", type=int, default=1, help="worker processes for ablate")
    p.add_argument("--timestamp-col", action="store_true", default=None, help="first CSV column is a timestamp")
    p.add_argument("--no-normalize", action="store_true", default=None, help="skip train-split z-scoring")
    p.add_argument("--checkpoint", help="checkpoint for finetune/forecast/classify")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="any config key, e.g. model.ffn_mult=2")
    p.add_argument("-v", "--verbose", action="store_true")
    for flag, key in FLAG_KEYS.items():
        p.add_argument("--" + flag.replace("_", "-"), dest=flag, help=f"sets {key}")
    return p


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig(command=args.command)
    if args.config:
        cfg = config.load(args.config, cfg)
    pairs = {"command": args.command}
    for flag, key in FLAG_KEYS.items():
        val = getattr(args, flag)
        if val is not None:
            pairs[key] = val
    if args.seed is not None:
        pairs["seed"] = str(args.seed)
    if args.out is not None:
        pairs["out"] = args.out
    if args.timestamp_col:
        pairs["data.timestamp_col"] = "true"
    if args.no_normalize:
        pairs["data.normalize"] = "false"
    for item in args.set:
        key, sep, val = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        pairs[key.strip()] = val
    return config.apply_overrides(cfg, pairs)


# --------------------------------------------------------------- run dir
class RunDir:
    def __init__(self, cfg: RunConfig):
        self.path = Path(cfg.out)
        try:
            self.path.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise ParseError(f"cannot create output directory {self.path}: {exc}") from None
        self.files: list[str] = []
        self.write_text("config.txt", config.dump(cfg))

    def file(self, name: str) -> Path:
        if name not in self.files:
            self.files.append(name)
        return self.path / name

    def write_text(self, name: str, text: str) -> Path:
        path = self.file(name)
        path.write_text(text)
        return path

    def write_json(self, name: str, obj) -> Path:
        return self.write_text(name, json.dumps(obj, indent=2, sort_keys=True) + "\n")

    def finish(self) -> Path:
        hashes = {n: hashlib.sha256((self.path / n).read_bytes()).hexdigest() for n in sorted(self.files)}
        path = self.path / "manifest.json"
        path.write_text(json.dumps({"files": hashes}, indent=2, sort_keys=True) + "\n")
        return path


def _attach_log(run: RunDir, verbose: bool) -> logging.Handler:
    handler = logging.FileHandler(run.path / "run.log", mode="w")
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger("timae")
    root.addHandler(handler)
    root.setLevel(logging.DEBUG if verbose else logging.INFO)
    return handler


# ------------------------------------------------------------------ data
def load_series(cfg: RunConfig) -> TimeSeries:
    d = cfg.data
    if d.csv and d.synthetic:
        raise ConfigError("give either data.csv or data.synthetic, not both")
    if d.csv:
        try:
            return load_csv(d.csv, timestamp_col=d.timestamp_col, forward_fill=d.forward_fill)
        except OSError as exc:
            raise ParseError(f"cannot read {d.csv}: {exc}") from None
    return generate_synthetic(d.synthetic_spec(), seed=cfg.derived_seed("data"))


def _model_config(cfg: RunConfig, n_channels: int):
    mc = replace(cfg.model, in_channels=n_channels)
    if mc.out_channels > n_channels:
        raise ConfigError(f"model.out_channels={mc.out_channels} exceeds the {n_channels} data channels")
    return mc


def _load_model(path: str | None, n_channels: int) -> tuple[TiMaeModel, dict]:
    if not path:
        raise ConfigError("this command needs --checkpoint")
    try:
        model, extra = checkpoint.load(path)
    except OSError as exc:
        raise ParseError(f"cannot read checkpoint {path}: {exc}") from None
    if model.cfg.in_channels != n_channels:
        raise ConfigError(f"checkpoint expects {model.cfg.in_channels} channels, data has {n_channels}")
    return model, extra


def _prepare_with(ts: TimeSeries, cfg: RunConfig, extra: dict):
    """Split and scale with the normaliser stored at pretraining time, if any."""
    data = prepare(ts, cfg.data.split_spec(), normalize=False)
    if not cfg.data.normalize:
        return data
    if "norm_mean" in extra:
        norm = Normalizer(np.asarray(extra["norm_mean"]), np.asarray(extra["norm_std"]))
    else:
        norm = Normalizer.fit(data.train)
    t = lambda part: None if part is None else norm.transform(part)
    return replace(data, train=t(data.train), val=t(data.val), test=t(data.test), normalizer=norm)


def _fmt_row(values) -> list[str]:
    return [f"{v:.8g}" for v in values]


# -------------------------------------------------------------- commands
def cmd_pretrain(cfg: RunConfig, run: RunDir, args) -> int:
    ts = load_series(cfg)
    data = prepare(ts, cfg.data.split_spec(), normalize=cfg.data.normalize)
    model = TiMaeModel(_model_config(cfg, ts.n_channels), rng=np.random.default_rng(cfg.derived_seed("init")))
    tcfg = replace(cfg.train, seed=cfg.derived_seed("train"))
    model, trainlog = pretrain(model, data.train, tcfg, val=data.val)
    extra = {
        "channel_names": data.channel_names,
        "norm_mean": data.normalizer.mean.tolist(),
        "norm_std": data.normalizer.std.tolist(),
        "seed": cfg.seed,
    }
    crc = checkpoint.save(model, run.file("model.ckpt"), extra)
    trainlog.write_csv(run.file("train_log.csv"))
    summary = trainlog.summary()
    summary["checkpoint_crc"] = f"{crc:08x}"
    summary["num_parameters"] = model.num_parameters()
    run.write_json("summary.json", summary)
    log.info("pretrained in %.1fs, checkpoint crc %08x", trainlog.seconds, crc)
    print(f"checkpoint {run.path / 'model.ckpt'} crc {crc:08x}")
    return 0


def _forecast_windows(part: np.ndarray | None, h: int, k: int, stride: int, name: str):
    if part is None or part.shape[0] < h + k:
        raise ConfigError(f"{name} split is shorter than history + horizon = {h + k}")
    wb = make_windows(part, h, stride, k)
    return wb.inputs, wb.targets


def _head_forecast(cfg, model, data, h, k):
    n = model.cfg.out_channels
    x_tr, y_tr = _forecast_windows(data.train, h, k, 1, "train")
    ft = FinetuneConfig(epochs=cfg.eval.finetune_epochs, lr=cfg.eval.finetune_lr, seed=cfg.derived_seed("finetune"))
    before = params_crc(model, model.encoder_parameter_names())
    head = finetune(model, x_tr, y_tr[..., :n], ft)
    after = params_crc(model, model.encoder_parameter_names())
    return head, before, after


def _metrics(pred, fut, hist, norm, n) -> dict:
    ch = range(n)
    return {
        "normalized": {"mse": mse(pred, fut), "mae": mae(pred, fut)},
        "raw": {"mse": mse(norm.inverse(pred, ch), norm.inverse(fut, ch)), "mae": mae(norm.inverse(pred, ch), norm.inverse(fut, ch))},
        "naive_last_mse": mse(last_value_forecast(hist, fut.shape[1])[..., :n], fut),
        "n_windows": int(fut.shape[0]),
    }


def cmd_forecast(cfg: RunConfig, run: RunDir, args) -> int:
    ts = load_series(cfg)
    model, extra = _load_model(args.checkpoint, ts.n_channels)
    data = _prepare_with(ts, cfg, extra)
    norm = data.normalizer
    h, k, n = cfg.eval.history, cfg.eval.horizon, model.cfg.out_channels
    hist, fut = _forecast_windows(data.test, h, k, cfg.eval.stride, "test")
    fut = fut[..., :n]
    mode = cfg.eval.mode
    info: dict = {"mode": mode, "history": h, "horizon": k}
    if mode == "direct":
        pred = direct_forecast(model, hist, k)
    elif mode == "finetune":
        head, before, after = _head_forecast(cfg, model, data, h, k)
        pred = head.predict(encoder_features(model, hist, head.pooling))
        info["encoder_crc_before"], info["encoder_crc_after"] = f"{before:08x}", f"{after:08x}"
    elif mode == "ridge":
        x_tr, y_tr = _forecast_windows(data.train, h, k, 1, "train")
        x_va, y_va = _forecast_windows(data.val, h, k, 1, "val")
        rep = lambda w: extract_representations(model, w, cfg.eval.pooling)
        probe = ridge_fit(rep(x_tr), y_tr[..., :n].reshape(len(x_tr), -1), rep(x_va), y_va[..., :n].reshape(len(x_va), -1))
        pred = probe.predict(rep(hist)).reshape(-1, k, n)
        info["ridge_alpha"] = probe.alpha
        print(f"ridge alpha {probe.alpha:g}")
    else:
        raise ConfigError(f"eval.mode must be direct, finetune or ridge; got {mode!r}")
    info.update(_metrics(pred, fut, hist, norm, n))
    raw = norm.inverse(pred, range(n))
    names = (extra.get("channel_names") or data.channel_names)[:n]
    lines = ["window,step," + ",".join(names)]
    for w in range(raw.shape[0]):
        for s in range(k):
            lines.append(f"{w},{s}," + ",".join(_fmt_row(raw[w, s])))
    run.write_text("predictions.csv", "\n".join(lines) + "\n")
    run.write_json("metrics.json", info)
    print(f"{mode} forecast mse {info['normalized']['mse']:.6f} (normalized), {info['raw']['mse']:.6f} (raw)")
    return 0


def cmd_finetune(cfg: RunConfig, run: RunDir, args) -> int:
    ts = load_series(cfg)
    model, extra = _load_model(args.checkpoint, ts.n_channels)
    data = _prepare_with(ts, cfg, extra)
    h, k, n = cfg.eval.history, cfg.eval.horizon, model.cfg.out_channels
    head, before, after = _head_forecast(cfg, model, data, h, k)
    with run.file("head.npz").open("wb") as fh:
        np.savez(fh, weight=head.weight, bias=head.bias, horizon=k, out_channels=n)
    out = {"encoder_crc_before": f"{before:08x}", "encoder_crc_after": f"{after:08x}", "head_parameters": head.num_parameters}
    if data.test is not None and data.test.shape[0] >= h + k:
        hist, fut = _forecast_windows(data.test, h, k, cfg.eval.stride, "test")
        pred = head.predict(encoder_features(model, hist, head.pooling))
        out.update(_metrics(pred, fut[..., :n], hist, data.normalizer, n))
    run.write_json("metrics.json", out)
    print(f"encoder crc {before:08x} -> {after:08x}")
    return 0


def trend_sign_dataset(n_per_class: int, length: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Noisy seasonal series whose label is the sign of a linear trend."""
    rng = np.random.default_rng(seed)
    t = np.linspace(0.0, 1.0, length)
    xs, ys = [], []
    for label in (0, 1):
        for _ in range(n_per_class):
            beta = rng.uniform(1.0, 3.0) * (1 if label else -1)
            alpha = rng.uniform(20.0, 60.0)
            phase = rng.uniform(0, 2 * np.pi)
            xs.append(0.5 * np.cos(alpha * t + phase) + beta * t + rng.normal(0, 0.1, length))
            ys.append(label)
    x = np.asarray(xs)[..., None]
    return x, np.asarray(ys)


def _classification_data(cfg: RunConfig, length: int) -> tuple[np.ndarray, np.ndarray]:
    if not cfg.data.csv:
        return trend_sign_dataset(100, length, cfg.derived_seed("classify-data"))
    try:
        ts = load_csv(cfg.data.csv)
    except OSError as exc:
        raise ParseError(f"cannot read {cfg.data.csv}: {exc}") from None
    if cfg.data.label_col not in ts.channel_names:
        raise ConfigError(f"label column {cfg.data.label_col!r} not in {cfg.data.csv}")
    j = ts.channel_names.index(cfg.data.label_col)
    labels = ts.values[:, j].astype(int)
    series = np.delete(ts.values, j, axis=1)
    if series.shape[1] > length:
        series = np.asarray([equidistant_subsample(row, length) for row in series])
    return series[..., None], labels


def cmd_classify(cfg: RunConfig, run: RunDir, args) -> int:
    if args.checkpoint:
        model, _ = checkpoint.load(args.checkpoint)
    else:
        model = TiMaeModel(replace(cfg.model, in_channels=1, out_channels=1), rng=np.random.default_rng(cfg.derived_seed("init")))
    x, y = _classification_data(cfg, model.cfg.window_len)
    order = np.random.default_rng(cfg.derived_seed("classify-split")).permutation(len(y))
    cut = int(0.7 * len(y))
    tr, te = order[:cut], order[cut:]
    mean = x[tr].mean(axis=(0, 1))
    std = x[tr].std(axis=(0, 1)) + 1e-12
    reps = extract_representations(model, (x - mean) / std, cfg.eval.pooling)
    pred, acc, probe = classify_probe(reps[tr], y[tr], reps[te], y[te], seed=cfg.derived_seed("probe"))
    run.write_text("predictions.csv", "index,label,pred\n" + "".join(f"{i},{y[i]},{p}\n" for i, p in zip(te, pred)))
    run.write_json("metrics.json", {"accuracy": acc, "l2": probe.l2, "n_train": int(tr.size), "n_test": int(te.size)})
    print(f"probe accuracy {acc:.4f}")
    return 0


def _benchmark(cfg: RunConfig) -> Benchmark:
    return Benchmark(
        series=cfg.data.synthetic_spec(),
        split=cfg.data.split_spec(),
        model=cfg.model,
        train=cfg.train,
        history=cfg.eval.history,
        horizon=cfg.eval.horizon,
        eval_stride=cfg.eval.stride,
        data_seed=cfg.derived_seed("data"),
    )


def _write_report(run: RunDir, report: EvalReport, stem: str, x_field: str | None) -> None:
    for path in report.write(run.path, stem, x_field):
        run.file(path.name)


def cmd_ablate(cfg: RunConfig, run: RunDir, args) -> int:
    names = [a.strip() for a in cfg.eval.axes.split(",") if a.strip()]
    unknown = [a for a in names if a not in ABLATION_AXES]
    if unknown:
        raise ConfigError(f"unknown ablation axes {unknown}; choose from {sorted(ABLATION_AXES)}")
    axes = {a: ABLATION_AXES[a] for a in names}
    report = ablation_matrix(_benchmark(cfg), axes, cfg.eval.seed_list(), cfg.eval.factorial, jobs=args.jobs)
    _write_report(run, report, "ablation", names[0] if len(names) == 1 else None)
    print(report.to_markdown(names[0] if len(names) == 1 else None))
    return 0


def cmd_transfer(cfg: RunConfig, run: RunDir, args) -> int:
    report = transferability_study(_benchmark(cfg), seeds=cfg.eval.seed_list())
    _write_report(run, report, "transfer", None)
    print(report.to_markdown())
    return 0


def cmd_gradcheck(cfg: RunConfig, run: RunDir, args) -> int:
    results = op_suite(trials=20, seed=cfg.seed) + [model_check(seed=cfg.seed)]
    lines = ["name,max_rel_err,tol,passed"]
    for r in results:
        lines.append(f"{r.name},{r.max_rel_err:.3e},{r.tol:g},{int(r.passed)}")
        print(f"{'ok  ' if r.passed else 'FAIL'} {r.name:16s} {r.max_rel_err:.2e} (tol {r.tol:g})")
    run.write_text("gradcheck.csv", "\n".join(lines) + "\n")
    return 0 if all(r.passed for r in results) else 3


HANDLERS = {
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "forecast": cmd_forecast,
    "classify": cmd_classify,
    "ablate": cmd_ablate,
    "transfer": cmd_transfer,
    "gradcheck": cmd_gradcheck,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 2
    handler = None
    try:
        cfg = resolve_config(args)
        run = RunDir(cfg)
        handler = _attach_log(run, args.verbose)
        t0 = time.perf_counter()
        code = HANDLERS[cfg.command](cfg, run, args)
        log.info("%s finished with exit code %d in %.1fs", cfg.command, code, time.perf_counter() - t0)
        handler.flush()
        run.finish()
        return code
    except TiMaeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code if exc.exit_code != 1 else 2
    except FloatingPointError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 4
    finally:
        if handler is not None:
            logging.getLogger("timae").removeHandler(handler)
            handler.close()


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
