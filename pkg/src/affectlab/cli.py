"""``affectlab`` command line.

Every subcommand reads one flat ``key = value`` namespace: defaults, then
``--config FILE``, then explicit flags. Unknown keys are errors; keys a
subcommand does not use are logged as warnings.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from . import engine
from .backbone import load_checkpoint
from .data import read_dataset, stack_images, synth_dataset, write_dataset
from .errors import ConfigError, DataError, IncompatibleCheckpointError
from .formats import read_config_file, read_label_table, read_predictions, write_predictions
from .metrics import eval_lsd, eval_mtl
from .predictions import average

log = logging.getLogger("affectlab")

TRAIN_KEYS = set(engine.TrainConfig.field_types())
PATH_KEYS = {"data", "val_data", "init", "run_dir", "out", "task", "pred", "labels", "checkpoint", "epochs", "n"}
ALIASES = {"lambda": "lam"}

_COMMON_TRAIN = {"base_lr", "weight_decay", "batch_size", "clip_grad", "warmup_epochs", "total_epochs", "accum_iters", "drop_path", "seed", "preset", "scale_lr", "n_samples", "data", "run_dir"}
USED_KEYS = {
    "gen-data": {"task", "n", "seed", "out"},
    "pretrain-mae": _COMMON_TRAIN | {"mask_ratio"},
    "train-mtl": _COMMON_TRAIN | {"layer_decay", "exp_sum_variant", "cnn_samples", "cnn_epochs", "val_data", "init"},
    "train-lsd": _COMMON_TRAIN | {"layer_decay", "mask_ratio", "lam", "val_data", "init"},
    "predict": {"checkpoint", "data", "out"},
    "evaluate": {"task", "pred", "labels", "out"},
    "ensemble": {"ensemble_mode", "run_dir", "checkpoint", "epochs", "data", "out"},
}


def _bool(text: str) -> bool:
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _convert(key: str, value):
    kind = engine.TrainConfig.field_types().get(key)
    if kind is None or not isinstance(value, str):
        return value
    try:
        return _bool(value) if kind is bool else kind(value)
    except (ValueError, ConfigError) as exc:
        raise ConfigError(f"{key}: cannot parse {value!r} as {kind.__name__}") from exc


def resolve_options(command: str, args: argparse.Namespace) -> dict:
    """Merge config file values with explicit flags (flags win)."""
    opts: dict = {}
    if getattr(args, "config", None):
        raw = read_config_file(args.config)
        raw = {ALIASES.get(k, k): v for k, v in raw.items()}
        unknown = sorted(k for k in raw if k not in TRAIN_KEYS | PATH_KEYS)
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        unused = sorted(k for k in raw if k not in USED_KEYS[command])
        if unused:
            log.warning("config key(s) not used by %s: %s", command, ", ".join(unused))
        opts.update(raw)
    for key, value in vars(args).items():
        if key in ("config", "command", "func") or value is None:
            continue
        if isinstance(value, list) and not value:
            continue
        opts[key] = value
    return {k: _convert(k, v) for k, v in opts.items()}


def train_config(command: str, opts: dict) -> engine.TrainConfig:
    fields = {k: v for k, v in opts.items() if k in TRAIN_KEYS}
    if command == "train-lsd":
        return engine.TrainConfig.cotex(**fields)
    return engine.TrainConfig.emma(**fields)


def runs_root() -> Path:
    return Path(os.environ.get("AFFECTLAB_RUNS", "runs"))


def _run_dir(command: str, opts: dict, cfg: engine.TrainConfig) -> Path:
    if opts.get("run_dir"):
        return Path(opts["run_dir"])
    return runs_root() / f"{command}-seed{cfg.seed}"


def _samples(opts: dict, key: str, task: str, n: int, seed: int):
    if opts.get(key):
        return read_dataset(opts[key])
    if key == "val_data":
        return None
    log.info("no --data given; using %d synthetic %s samples (seed %d)", n, task, seed)
    return synth_dataset(n, task, seed)


# --------------------------------------------------------------------------
# subcommands


def cmd_gen_data(opts):
    if not opts.get("out"):
        raise ConfigError("gen-data needs --out")
    task = opts.get("task", "mtl")
    if task not in ("mtl", "lsd"):
        raise ConfigError(f"task must be mtl or lsd, got {task!r}")
    n, seed = int(opts.get("n", 512)), int(opts.get("seed", 0))
    if n <= 0:
        raise ConfigError("--n must be positive")
    out = write_dataset(synth_dataset(n, task, seed), opts["out"])
    print(f"wrote {n} {task} samples to {out}")


def cmd_pretrain_mae(opts):
    cfg = train_config("pretrain-mae", opts)
    samples = _samples(opts, "data", "mtl", cfg.n_samples, cfg.seed)
    run = _run_dir("pretrain-mae", opts, cfg)
    engine.fit_mae(cfg, samples, run)
    print(f"pretrained encoder: {run / 'checkpoints' / f'epoch_{cfg.total_epochs:03d}'}")


def _cmd_train(command, task, fit, opts):
    cfg = train_config(command, opts)
    samples = _samples(opts, "data", task, cfg.n_samples, cfg.seed)
    val = _samples(opts, "val_data", task, cfg.n_samples, cfg.seed)
    run = _run_dir(command, opts, cfg)
    result = fit(cfg, samples, val_samples=val, run_dir=run, init=opts.get("init"))
    print(f"run directory: {run}")
    print(f"best epoch: {result.best_epoch}")
    print(_last_summary(result.history[-1]))


def _last_summary(row: dict) -> str:
    return "  ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items() if k != "seconds")


def cmd_train_mtl(opts):
    _cmd_train("train-mtl", "mtl", engine.fit_emma, opts)


def cmd_train_lsd(opts):
    _cmd_train("train-lsd", "lsd", engine.fit_cotex, opts)


def _write_preds(preds, ids, out):
    task = "mtl" if preds.au_probs is not None else "lsd"
    write_predictions(out, preds.table(ids), task)
    print(f"wrote {len(ids)} {task} predictions to {out}")


def cmd_predict(opts):
    for key in ("checkpoint", "data", "out"):
        if not opts.get(key):
            raise ConfigError(f"predict needs --{key}")
    samples = read_dataset(opts["data"])
    model = engine.load_model(opts["checkpoint"])
    preds = engine.soft_predict(model, stack_images(samples))
    _write_preds(preds, [s.id for s in samples], opts["out"])


def cmd_evaluate(opts):
    for key in ("pred", "labels"):
        if not opts.get(key):
            raise ConfigError(f"evaluate needs --{key}")
    pred, file_task = read_predictions(opts["pred"])
    task = opts.get("task") or file_task
    labels_path = Path(opts["labels"])
    if labels_path.is_dir():
        labels_path = labels_path / "labels.csv"
    labels = read_label_table(labels_path)
    if task == "mtl":
        if file_task != "mtl":
            raise DataError(f"{opts['pred']}: MTL evaluation needs valence/arousal/AU columns")
        rep = eval_mtl(pred, labels)
    elif task == "lsd":
        rep = eval_lsd(pred, labels)
    else:
        raise ConfigError(f"task must be mtl or lsd, got {task!r}")
    text = rep.to_text()
    sys.stdout.write(text)
    if opts.get("out"):
        Path(opts["out"]).write_text(text)


def _best_checkpoint(run_dir: Path) -> Path:
    report = run_dir / "report.txt"
    if report.exists():
        for line in report.read_text().splitlines():
            if line.startswith("best_checkpoint"):
                return run_dir / line.partition("=")[2].strip()
    return engine.CheckpointSet.from_run_dir(run_dir).entries[-1][1]


def cmd_ensemble(opts):
    for key in ("data", "out"):
        if not opts.get(key):
            raise ConfigError(f"ensemble needs --{key}")
    mode = opts.get("ensemble_mode", "epochs")
    run_dirs = [Path(p) for p in _as_list(opts.get("run_dir"))]
    paths = [Path(p) for p in _as_list(opts.get("checkpoint"))]
    samples = read_dataset(opts["data"])
    images = stack_images(samples)
    if mode == "epochs":
        if len(run_dirs) > 1:
            raise ConfigError("epochs ensemble takes a single --run-dir")
        if run_dirs:
            ckpts = engine.CheckpointSet.from_run_dir(run_dirs[0])
            if opts.get("epochs"):
                wanted = {int(e) for e in str(opts["epochs"]).split(",")}
                missing = wanted - {e for e, _ in ckpts.entries}
                if missing:
                    raise ConfigError(f"no checkpoint for epoch(s) {sorted(missing)}")
                ckpts = engine.CheckpointSet.of([(e, p) for e, p in ckpts.entries if e in wanted])
        else:
            ckpts = engine.CheckpointSet.of([(int(load_checkpoint(p)[1].get("epoch", i)), p) for i, p in enumerate(paths)])
        preds = engine.ensemble_epochs(ckpts, images)
    elif mode == "params":
        paths = paths + [_best_checkpoint(r) for r in run_dirs]
        if not paths:
            raise ConfigError("params ensemble needs --run-dir or --checkpoint")
        preds = average([engine.soft_predict(engine.load_model(p), images) for p in paths])
    else:
        raise ConfigError(f"ensemble_mode must be 'epochs' or 'params', got {mode!r}")
    _write_preds(preds, [s.id for s in samples], opts["out"])


def _as_list(value):
    if value is None:
        return []
    if isinstance(value, (list, tuple)):
        return list(value)
    return [v.strip() for v in str(value).split(",") if v.strip()]


# --------------------------------------------------------------------------
# parser


def _add_train_flags(p: argparse.ArgumentParser, keys):
    for key in sorted(keys & TRAIN_KEYS):
        kind = engine.TrainConfig.field_types()[key]
        flag = "--" + key.replace("_", "-")
        names = [flag, "--lambda"] if key == "lam" else [flag]
        p.add_argument(*names, dest=key, type=str if kind is bool else kind, default=None, metavar=kind.__name__.upper())


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="affectlab", description="Affective behaviour analysis toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", metavar="PATH")
        _add_train_flags(p, USED_KEYS[name])
        p.set_defaults(func=func)
        return p

    p = add("gen-data", cmd_gen_data, "write a synthetic dataset")
    p.add_argument("--task", choices=("mtl", "lsd"))
    p.add_argument("--n", type=int)
    p.add_argument("--out")

    p = add("pretrain-mae", cmd_pretrain_mae, "masked-autoencoder pretraining")
    p.add_argument("--data")
    p.add_argument("--run-dir", dest="run_dir")

    for name, func, text in (
        ("train-mtl", cmd_train_mtl, "train EMMA on the multi-task data"),
        ("train-lsd", cmd_train_lsd, "train Masked CoTEX on the six-class data"),
    ):
        p = add(name, func, text)
        p.add_argument("--data")
        p.add_argument("--val-data", dest="val_data")
        p.add_argument("--init", help="pretrained encoder or MAE checkpoint")
        p.add_argument("--run-dir", dest="run_dir")

    p = add("predict", cmd_predict, "write predictions for a dataset")
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--out")

    p = add("evaluate", cmd_evaluate, "score a prediction file")
    p.add_argument("--task", choices=("mtl", "lsd"))
    p.add_argument("--pred")
    p.add_argument("--labels")
    p.add_argument("--out")

    p = add("ensemble", cmd_ensemble, "average predictions of several checkpoints")
    p.add_argument("--run-dir", dest="run_dir", action="append", default=[])
    p.add_argument("--checkpoint", action="append", default=[])
    p.add_argument("--epochs", help="comma-separated epochs to include")
    p.add_argument("--data")
    p.add_argument("--out")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        opts = resolve_options(args.command, args)
        args.func(opts)
    except (ConfigError, IncompatibleCheckpointError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except Exception as exc:  # noqa: BLE001
        log.debug("unhandled error", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
