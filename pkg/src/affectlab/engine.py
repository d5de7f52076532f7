"""Training recipe, run directories, checkpoints and ensembles."""
from __future__ import annotations

import csv
import dataclasses
import logging
import math
import re
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, NamedTuple, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import (
    CNNScorer,
    EncoderConfig,
    MaskedAutoencoder,
    ViTEncoder,
    load_checkpoint,
    load_pretrained,
    preset,
    save_checkpoint,
    save_pretrained,
)
from .cotex import TwinViT, cotex_losses, cotex_predict, make_twin
from .data import IMAGE_SIZE, FaceSample, LabelBatch, augment_batch, stack_images
from .emma import EmmaModel, emma_losses, emma_soft_predict
from .errors import ConfigError, IncompatibleCheckpointError, NonFiniteGradientError
from .formats import LabelTable
from .metrics import MetricReport, eval_lsd, eval_mtl
from .predictions import Predictions, average

log = logging.getLogger(__name__)

NO_DECAY_NAMES = ("cls_token", "mask_token", "pos_embed")


@dataclass
class TrainConfig:
    base_lr: float = 5e-4
    weight_decay: float = 0.05
    batch_size: int = 100
    clip_grad: float = 0.05
    layer_decay: float = 0.65
    warmup_epochs: int = 5
    total_epochs: int = 30
    accum_iters: int = 4
    drop_path: float = 0.1
    mask_ratio: float = 0.75
    lam: float = 1.0
    seed: int = 0
    preset: str = "tiny"
    # lr = base_lr * effective_batch / 256
    scale_lr: bool = True
    exp_sum_variant: bool = False
    # synthetic data size when no dataset directory is given
    n_samples: int = 512
    cnn_samples: int = 2048
    cnn_epochs: int = 8
    ensemble_mode: str = "epochs"

    def __post_init__(self):
        self.validate()

    @classmethod
    def emma(cls, **overrides) -> "TrainConfig":
        return cls(**overrides)

    @classmethod
    def cotex(cls, **overrides) -> "TrainConfig":
        base = dict(weight_decay=0.15, batch_size=1024, total_epochs=6)
        base.update(overrides)
        return cls(**base)

    def validate(self):
        positive = ("base_lr", "batch_size", "total_epochs", "accum_iters", "n_samples", "cnn_samples")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("weight_decay", "clip_grad", "warmup_epochs", "lam", "cnn_epochs"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        if not 0.0 < self.layer_decay <= 1.0:
            raise ConfigError(f"layer_decay must be in (0, 1], got {self.layer_decay}")
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ConfigError(f"mask_ratio must be in [0, 1), got {self.mask_ratio}")
        if not 0.0 <= self.drop_path < 1.0:
            raise ConfigError(f"drop_path must be in [0, 1), got {self.drop_path}")
        if self.warmup_epochs > self.total_epochs:
            raise ConfigError("warmup_epochs exceeds total_epochs")
        if self.ensemble_mode not in ("epochs", "params"):
            raise ConfigError(f"ensemble_mode must be 'epochs' or 'params', got {self.ensemble_mode!r}")

    @property
    def effective_batch(self) -> int:
        return self.batch_size * self.accum_iters

    @property
    def lr(self) -> float:
        return self.base_lr * self.effective_batch / 256 if self.scale_lr else self.base_lr

    @classmethod
    def field_types(cls) -> dict[str, type]:
        kinds = {"float": float, "int": int, "bool": bool, "str": str}
        return {f.name: kinds[f.type] for f in dataclasses.fields(cls)}

    def as_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


# --------------------------------------------------------------------------
# learning rates and the optimizer step


def layer_lrs(base_lr: float, layer_decay: float, depth: int) -> list[float]:
    """Group 0 = patch embedding, 1..depth = blocks, depth+1 = heads."""
    if depth < 1:
        raise ConfigError(f"depth must be >= 1, got {depth}")
    return [base_lr * layer_decay ** (depth + 1 - g) for g in range(depth + 2)]


_BLOCK = re.compile(r"(?:^|\.)encoder\.blocks\.(\d+)\.")
_EMBED = re.compile(r"(?:^|\.)encoder\.(?:patch_embed|cls_token)")


def layer_id(name: str, depth: int) -> int:
    m = _BLOCK.search(name)
    if m:
        return int(m.group(1)) + 1
    if _EMBED.search(name):
        return 0
    return depth + 1


def uses_weight_decay(name: str, param: torch.Tensor) -> bool:
    return param.ndim >= 2 and not name.split(".")[-1] in NO_DECAY_NAMES


def param_groups(model: nn.Module, lr: float, layer_decay: float, depth: int, weight_decay: float) -> list[dict]:
    lrs = layer_lrs(lr, layer_decay, depth)
    groups: dict[tuple[int, bool], dict] = {}
    for name, p in model.named_parameters():
        if not p.requires_grad:
            continue
        lid, decay = layer_id(name, depth), uses_weight_decay(name, p)
        g = groups.setdefault(
            (lid, decay),
            {"params": [], "names": [], "layer_lr": lrs[lid], "lr": lrs[lid], "weight_decay": weight_decay if decay else 0.0},
        )
        g["params"].append(p)
        g["names"].append(name)
    return [groups[k] for k in sorted(groups)]


def lr_schedule(step: int, cfg: TrainConfig, steps_per_epoch: int = 1) -> float:
    """Linear warmup to 1 over ``warmup_epochs``, then half-cosine to 0 at ``total_epochs``."""
    epoch = step / steps_per_epoch
    if epoch < cfg.warmup_epochs:
        return epoch / cfg.warmup_epochs
    span = cfg.total_epochs - cfg.warmup_epochs
    progress = 1.0 if span <= 0 else min(1.0, (epoch - cfg.warmup_epochs) / span)
    return 0.5 * (1.0 + math.cos(math.pi * progress))


def global_grad_norm(params: Sequence[torch.Tensor]) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(p.grad.detach().double().pow(2).sum())
    return math.sqrt(total)


def clip_gradients(params: Sequence[torch.Tensor], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    norm = global_grad_norm(params)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad.mul_(scale)
    return norm


def optim_step(optimizer: torch.optim.Optimizer, named_params, clip_grad: float, lr_mult: float = 1.0) -> float:
    """Finite check, global-norm clipping, per-group lr, then one AdamW update."""
    named_params = list(named_params)
    bad = [n for n, p in named_params if p.grad is not None and not bool(torch.isfinite(p.grad).all())]
    if bad:
        raise NonFiniteGradientError(bad)
    norm = clip_gradients([p for _, p in named_params], clip_grad)
    for g in optimizer.param_groups:
        g["lr"] = g["layer_lr"] * lr_mult
    optimizer.step()
    return norm


class RecipeOptimizer:
    """AdamW with layer-wise lr decay, decoupled decay on weight matrices only,
    warmup + cosine schedule and global-norm clipping."""

    def __init__(self, model: nn.Module, cfg: TrainConfig, steps_per_epoch: int = 1, depth: int | None = None, layer_decay: float | None = None):
        if depth is None:
            depth = _find_depth(model)
        self.cfg = cfg
        self.steps_per_epoch = steps_per_epoch
        self.named = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
        groups = param_groups(model, cfg.lr, cfg.layer_decay if layer_decay is None else layer_decay, depth, cfg.weight_decay)
        self.optimizer = torch.optim.AdamW(groups, lr=cfg.lr, betas=(0.9, 0.999), eps=1e-8)
        self.step_count = 0
        self.last_grad_norm = 0.0

    @property
    def lr_mult(self) -> float:
        return lr_schedule(self.step_count, self.cfg, self.steps_per_epoch)

    def zero_grad(self):
        for _, p in self.named:
            p.grad = None

    def step(self) -> float:
        self.last_grad_norm = optim_step(self.optimizer, self.named, self.cfg.clip_grad, self.lr_mult)
        self.step_count += 1
        return self.last_grad_norm


def _find_depth(model: nn.Module) -> int:
    for m in model.modules():
        if isinstance(m, ViTEncoder):
            return m.cfg.depth
    return 1


def accumulate(micro_batches: Sequence, loss_fn: Callable[[Any], torch.Tensor], *optimizers) -> float:
    """Average gradients over the micro-batches, then take exactly one step.

    Matches one step on the concatenated batch for per-sample losses (equal
    micro-batch sizes). Batch-statistic losses such as CCC differ by design.
    """
    if not micro_batches:
        raise ConfigError("accumulate needs at least one micro-batch")
    for opt in optimizers:
        opt.zero_grad()
    n = len(micro_batches)
    total = 0.0
    for mb in micro_batches:
        loss = loss_fn(mb)
        (loss / n).backward()
        total += float(loss.detach())
    for opt in optimizers:
        opt.step()
    return total / n


def epoch_schedule(n: int, cfg: TrainConfig, rng: np.random.Generator) -> list[list[np.ndarray]]:
    """Shuffled micro-batch indices grouped into optimizer steps."""
    perm = rng.permutation(n)
    micro = [perm[i : i + cfg.batch_size] for i in range(0, n, cfg.batch_size)]
    return [micro[j : j + cfg.accum_iters] for j in range(0, len(micro), cfg.accum_iters)]


def steps_per_epoch(n: int, cfg: TrainConfig) -> int:
    return math.ceil(math.ceil(n / cfg.batch_size) / cfg.accum_iters)


# --------------------------------------------------------------------------
# run directory: config.txt, checkpoints/epoch_%03d, log.csv, report.txt


class RunDir:
    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.mkdir(parents=True, exist_ok=True)
        (self.path / "checkpoints").mkdir(exist_ok=True)
        self._log_header: list[str] | None = None

    def write_config(self, values: dict[str, Any]) -> None:
        with open(self.path / "config.txt", "w") as fh:
            for k, v in values.items():
                fh.write(f"{k} = {v}\n")

    def checkpoint(self, epoch: int) -> Path:
        return self.path / "checkpoints" / f"epoch_{epoch:03d}"

    def log(self, row: dict[str, Any]) -> None:
        fresh = self._log_header is None
        if fresh:
            self._log_header = list(row)
        with open(self.path / "log.csv", "w" if fresh else "a", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            if fresh:
                w.writerow(self._log_header)
            w.writerow([_fmt(row[k]) for k in self._log_header])

    def write_report(self, text: str) -> None:
        (self.path / "report.txt").write_text(text)


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.8g}"
    return str(v)


# --------------------------------------------------------------------------
# whole-model checkpoints


def save_model(model: nn.Module, path, epoch: int = 0, seed: int = 0, step: int = 0) -> Path:
    if isinstance(model, EmmaModel):
        meta = {"kind": "emma", **model.cfg.to_meta(), "n_exp": model.n_exp, "n_exp_cnn": model.n_exp_cnn, "va_hidden": model.va_hidden}
        if not isinstance(model.cnn, CNNScorer):
            raise ConfigError("only the built-in CNNScorer can be checkpointed")
    elif isinstance(model, TwinViT):
        meta = {"kind": "cotex", **model.cfg.to_meta(), "n_classes": model.n_classes}
    else:
        raise ConfigError(f"cannot checkpoint {type(model).__name__}")
    meta.update(epoch=epoch, step=step, seed=seed)
    return save_checkpoint(path, model.state_dict(), meta)


def load_model(path) -> EmmaModel | TwinViT:
    state, meta = load_checkpoint(path)
    cfg = EncoderConfig.from_meta(meta)
    kind = meta.get("kind")
    if kind == "emma":
        model = EmmaModel(cfg, int(meta["n_exp"]), int(meta["n_exp_cnn"]), int(meta["va_hidden"]))
    elif kind == "cotex":
        model = TwinViT(cfg, int(meta["n_classes"]))
    else:
        raise IncompatibleCheckpointError(f"{path}: not a model checkpoint (kind={kind!r})")
    missing, unexpected = model.load_state_dict(state, strict=False)
    if missing or unexpected:
        raise IncompatibleCheckpointError(f"{path}: missing {missing}, unexpected {unexpected}")
    model.eval()
    return model


# --------------------------------------------------------------------------
# prediction and ensembles


def eval_images(raw: torch.Tensor, chunk: int = 128):
    for start in range(0, raw.shape[0], chunk):
        yield augment_batch(raw[start : start + chunk], "eval")


def soft_predict(model: nn.Module, raw_images: torch.Tensor, chunk: int = 128) -> Predictions:
    """Eval-mode soft predictions on raw (un-resized) images."""
    parts = []
    for imgs in eval_images(raw_images, chunk):
        if isinstance(model, EmmaModel):
            parts.append(emma_soft_predict(model, imgs))
        elif isinstance(model, TwinViT):
            parts.append(cotex_predict(model, imgs))
        else:
            raise ConfigError(f"no prediction rule for {type(model).__name__}")
    cat = lambda f: None if getattr(parts[0], f) is None else np.concatenate([getattr(p, f) for p in parts])
    return Predictions(exp_probs=cat("exp_probs"), va=cat("va"), au_probs=cat("au_probs"))


class CheckpointSet(NamedTuple):
    entries: list[tuple[int, Path]]

    @classmethod
    def of(cls, entries) -> "CheckpointSet":
        entries = [(int(e), Path(p)) for e, p in entries]
        if not entries:
            raise ConfigError("empty checkpoint set")
        epochs = [e for e, _ in entries]
        if any(b <= a for a, b in zip(epochs, epochs[1:])):
            raise ConfigError(f"checkpoint epochs must be strictly increasing, got {epochs}")
        return cls(entries)

    @classmethod
    def from_run_dir(cls, run_dir) -> "CheckpointSet":
        found = sorted((Path(run_dir) / "checkpoints").glob("epoch_*"))
        return cls.of([(int(p.name.split("_")[1]), p) for p in found])


def ensemble_models(models: Sequence[nn.Module], raw_images: torch.Tensor) -> Predictions:
    if not models:
        raise ConfigError("empty ensemble")
    return average([soft_predict(m, raw_images) for m in models])


def ensemble_epochs(checkpoints: CheckpointSet | Sequence, raw_images: torch.Tensor) -> Predictions:
    """Average soft predictions of one run's checkpoints from different epochs."""
    if not isinstance(checkpoints, CheckpointSet):
        checkpoints = CheckpointSet.of(checkpoints)
    return average([soft_predict(load_model(p), raw_images) for _, p in checkpoints.entries])


def ensemble_params(run_configs: Sequence[TrainConfig], train_samples: Sequence[FaceSample], raw_images: torch.Tensor, task: str = "mtl", **fit_kwargs) -> Predictions:
    """Train one model per hyperparameter variant and average their soft predictions."""
    if not run_configs:
        raise ConfigError("empty ensemble")
    fit = fit_emma if task == "mtl" else fit_cotex
    models = [fit(cfg, train_samples, **fit_kwargs).model for cfg in run_configs]
    return ensemble_models(models, raw_images)


# --------------------------------------------------------------------------
# training loops


class FitResult(NamedTuple):
    model: nn.Module
    history: list[dict]
    best_epoch: int


def _seed_everything(seed: int) -> np.random.Generator:
    torch.manual_seed(seed)
    return np.random.default_rng(seed)


def train_cnn_scorer(samples: Sequence[FaceSample], n_classes: int = 8, epochs: int = 8, seed: int = 0, lr: float = 1e-3, batch_size: int = 64) -> CNNScorer:
    """Fit the stand-in expression CNN on expression-labelled samples."""
    rng = _seed_everything(seed)
    keep = [s for s in samples if s.labels.expression >= 0]
    images = stack_images(keep)
    labels = torch.tensor([s.labels.expression for s in keep])
    model = CNNScorer(n_classes)
    opt = torch.optim.AdamW(model.parameters(), lr=lr, weight_decay=0.05)
    model.train()
    for _ in range(epochs):
        perm = rng.permutation(len(keep))
        for i in range(0, len(keep), batch_size):
            idx = perm[i : i + batch_size]
            x = augment_batch(images[idx], "train_mtl", rng)
            loss = F.cross_entropy(model(x), labels[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
    model.eval()
    return model


def _encoder_cfg(cfg: TrainConfig) -> EncoderConfig:
    return preset(cfg.preset, drop_path_rate=cfg.drop_path)


def _mtl_tables(ids, scores_va, scores_exp, scores_au, labels: LabelBatch):
    from .formats import PredictionTable

    pred = PredictionTable(ids, scores_va, scores_exp, scores_au)
    lab = LabelTable(
        ids,
        labels.va.double().numpy(),
        labels.expression.numpy(),
        labels.au.long().numpy(),
        labels.au_valid.numpy(),
    )
    return pred, lab


def fit_emma(
    cfg: TrainConfig,
    samples: Sequence[FaceSample],
    val_samples: Sequence[FaceSample] | None = None,
    run_dir: str | Path | None = None,
    init: str | Path | None = None,
    cnn: nn.Module | None = None,
    on_epoch: Callable[[dict], None] | None = None,
) -> FitResult:
    """Train EMMA with the multi-task objective.

    The logged training score is computed from the in-epoch (augmented,
    train-mode) outputs; ``val_*`` columns come from an eval pass when a
    validation set is given and drive the best-epoch choice.
    """
    if cnn is None:
        from .data import synth_dataset

        cnn = train_cnn_scorer(synth_dataset(cfg.cnn_samples, "mtl", cfg.seed + 1), epochs=cfg.cnn_epochs, seed=cfg.seed)
    rng = _seed_everything(cfg.seed)
    model = EmmaModel(_encoder_cfg(cfg), cnn=cnn)
    if init is not None:
        load_pretrained(init, model.encoder)
    images = stack_images(samples)
    labels = LabelBatch.from_labels([s.labels for s in samples])
    ids = [s.id for s in samples]
    n = len(samples)
    opt = RecipeOptimizer(model, cfg, steps_per_epoch(n, cfg))
    run = _open_run(run_dir, cfg, "train-mtl")

    history, best_epoch, best_score = [], 0, -math.inf
    for epoch in range(1, cfg.total_epochs + 1):
        t0 = time.perf_counter()
        model.train()
        seen, va_out, exp_out, au_out = [], [], [], []
        sums = {"total": 0.0, "au": 0.0, "va": 0.0, "exp": 0.0}
        lr_at_start = cfg.lr * opt.lr_mult
        for group in epoch_schedule(n, cfg, rng):
            micro = [(augment_batch(images[idx], "train_mtl", rng), labels.index(torch.from_numpy(idx)), idx) for idx in group]

            def loss_fn(mb):
                x, y, idx = mb
                total, br, scores = emma_losses(model, x, y, cfg.exp_sum_variant)
                seen.append(idx)
                va_out.append(scores.va.detach().double())
                exp_out.append(scores.exp_logits.detach().argmax(1))
                au_out.append((scores.au_logits.detach() > 0).long())
                w = len(idx)
                sums["total"] += float(total.detach()) * w
                for k in ("au", "va", "exp"):
                    sums[k] += float(br[k]) * w
                return total

            accumulate(micro, loss_fn, opt)
        order = np.concatenate(seen)
        pred, lab = _mtl_tables(
            [ids[i] for i in order],
            torch.cat(va_out).clamp(-1, 1).numpy(),
            torch.cat(exp_out).numpy(),
            torch.cat(au_out).numpy(),
            labels.index(torch.from_numpy(order)),
        )
        train_rep = eval_mtl(pred, lab)
        row = {
            "epoch": epoch,
            "lr": lr_at_start,
            "loss_total": sums["total"] / n,
            "loss_au": sums["au"] / n,
            "loss_va": sums["va"] / n,
            "loss_exp": sums["exp"] / n,
            **_report_cols("train", train_rep),
        }
        score = train_rep.p_mtl
        if val_samples:
            val_rep = evaluate_model(model, val_samples, "mtl")
            row.update(_report_cols("val", val_rep))
            score = val_rep.p_mtl
        if score > best_score:
            best_epoch, best_score = epoch, score
        if run is not None:
            run.log(row)
            save_model(model, run.checkpoint(epoch), epoch, cfg.seed, opt.step_count)
        history.append({**row, "seconds": time.perf_counter() - t0})
        log.info("epoch %d  loss %.4f  %s", epoch, row["loss_total"], train_rep.summary())
        if on_epoch:
            on_epoch(history[-1])
    if run is not None:
        _final_report(run, model, samples, val_samples, "mtl", best_epoch)
    return FitResult(model, history, best_epoch)


def fit_cotex(
    cfg: TrainConfig,
    samples: Sequence[FaceSample],
    val_samples: Sequence[FaceSample] | None = None,
    run_dir: str | Path | None = None,
    init: str | Path | None = None,
    on_epoch: Callable[[dict], None] | None = None,
) -> FitResult:
    """Train the twin masked views with ``lam * JS + CE_1 + CE_2``."""
    rng = _seed_everything(cfg.seed)
    enc_cfg = _encoder_cfg(cfg)
    encoder_state = None
    if init is not None:
        encoder_state = load_pretrained(init, ViTEncoder(enc_cfg)).state_dict()
    twin = make_twin(enc_cfg, 6, encoder_state, cfg.seed)
    mask_gen = torch.Generator().manual_seed(cfg.seed)
    images = stack_images(samples)
    labels = torch.tensor([s.labels.expression for s in samples])
    n = len(samples)
    spe = steps_per_epoch(n, cfg)
    opts = (RecipeOptimizer(twin.view1, cfg, spe), RecipeOptimizer(twin.view2, cfg, spe))
    run = _open_run(run_dir, cfg, "train-lsd")

    history, best_epoch, best_score = [], 0, -math.inf
    for epoch in range(1, cfg.total_epochs + 1):
        t0 = time.perf_counter()
        twin.train()
        seen, probs = [], []
        sums = {"total": 0.0, "js": 0.0, "ce1": 0.0, "ce2": 0.0}
        lr_at_start = cfg.lr * opts[0].lr_mult
        for group in epoch_schedule(n, cfg, rng):
            micro = [(augment_batch(images[idx], "train_lsd", rng), labels[idx], idx) for idx in group]

            def loss_fn(mb):
                x, y, idx = mb
                total, comps, (l1, l2) = cotex_losses(twin, x, y, cfg.lam, cfg.mask_ratio, mask_gen)
                seen.append(idx)
                probs.append(((F.softmax(l1.detach(), 1) + F.softmax(l2.detach(), 1)) / 2).argmax(1))
                w = len(idx)
                sums["total"] += float(total.detach()) * w
                for k in ("js", "ce1", "ce2"):
                    sums[k] += float(comps[k]) * w
                return total

            accumulate(micro, loss_fn, *opts)
        order = np.concatenate(seen)
        train_rep = eval_lsd(torch.cat(probs).numpy(), labels[order].numpy())
        row = {
            "epoch": epoch,
            "lr": lr_at_start,
            "loss_total": sums["total"] / n,
            "loss_js": sums["js"] / n,
            "loss_ce1": sums["ce1"] / n,
            "loss_ce2": sums["ce2"] / n,
            **_report_cols("train", train_rep),
        }
        score = train_rep.p_lsd
        if val_samples:
            val_rep = evaluate_model(twin, val_samples, "lsd")
            row.update(_report_cols("val", val_rep))
            score = val_rep.p_lsd
        if score > best_score:
            best_epoch, best_score = epoch, score
        if run is not None:
            run.log(row)
            save_model(twin, run.checkpoint(epoch), epoch, cfg.seed, opts[0].step_count)
        history.append({**row, "seconds": time.perf_counter() - t0})
        log.info("epoch %d  loss %.4f  %s", epoch, row["loss_total"], train_rep.summary())
        if on_epoch:
            on_epoch(history[-1])
    if run is not None:
        _final_report(run, twin, samples, val_samples, "lsd", best_epoch)
    return FitResult(twin, history, best_epoch)


def fit_mae(cfg: TrainConfig, samples: Sequence[FaceSample], run_dir: str | Path | None = None) -> FitResult:
    """Toy masked-autoencoder pretraining on face crops (no layer decay)."""
    rng = _seed_everything(cfg.seed)
    model = MaskedAutoencoder(_encoder_cfg(cfg))
    mask_gen = torch.Generator().manual_seed(cfg.seed)
    images = stack_images(samples)
    n = len(samples)
    opt = RecipeOptimizer(model, cfg, steps_per_epoch(n, cfg), layer_decay=1.0)
    run = _open_run(run_dir, cfg, "pretrain-mae")
    history = []
    for epoch in range(1, cfg.total_epochs + 1):
        model.train()
        total = 0.0
        lr_at_start = cfg.lr * opt.lr_mult
        for group in epoch_schedule(n, cfg, rng):
            micro = [augment_batch(images[idx], "train_mtl", rng) for idx in group]
            loss = accumulate(micro, lambda x: model(x, cfg.mask_ratio, mask_gen)[0], opt)
            total += loss * sum(len(idx) for idx in group)
        row = {"epoch": epoch, "lr": lr_at_start, "loss_mae": total / n}
        history.append(row)
        if run is not None:
            run.log(row)
            save_pretrained(model, run.checkpoint(epoch), step=opt.step_count, seed=cfg.seed)
        log.info("epoch %d  mae loss %.4f", epoch, row["loss_mae"])
    if run is not None:
        run.write_report(f"final_loss_mae = {history[-1]['loss_mae']:.6f}\nepochs = {cfg.total_epochs}\n")
    return FitResult(model, history, cfg.total_epochs)


def evaluate_model(model: nn.Module, samples: Sequence[FaceSample], task: str) -> MetricReport:
    preds = soft_predict(model, stack_images(samples))
    ids = [s.id for s in samples]
    if task == "lsd":
        return eval_lsd(preds.expression, np.array([s.labels.expression for s in samples]))
    return eval_mtl(preds.table(ids), LabelTable.from_labels(ids, [s.labels for s in samples]))


def _report_cols(prefix: str, rep: MetricReport) -> dict[str, float]:
    if rep.task == "mtl":
        return {
            f"{prefix}_p_mtl": rep.p_mtl,
            f"{prefix}_ccc_v": rep.ccc_v,
            f"{prefix}_ccc_a": rep.ccc_a,
            f"{prefix}_f1_exp": float(np.mean(rep.f1_exp)),
            f"{prefix}_f1_au": float(np.mean(rep.f1_au)),
        }
    return {f"{prefix}_p_lsd": rep.p_lsd, f"{prefix}_acc": rep.acc}


def _open_run(run_dir, cfg: TrainConfig, command: str) -> RunDir | None:
    if run_dir is None:
        return None
    run = RunDir(run_dir)
    run.write_config({"command": command, **cfg.as_dict()})
    return run


def _final_report(run: RunDir, model, samples, val_samples, task: str, best_epoch: int) -> None:
    lines = [f"best_epoch = {best_epoch}\n", f"best_checkpoint = {run.checkpoint(best_epoch).relative_to(run.path)}\n"]
    lines.append("# final model on training data\n")
    lines.append(evaluate_model(model, samples, task).to_text())
    if val_samples:
        lines.append("# final model on validation data\n")
        lines.append(evaluate_model(model, val_samples, task).to_text())
    run.write_report("".join(lines))
