"""EMMA: transformer AU/expression scores plus a CNN expression score,
concatenated and detached to feed a small valence/arousal regressor."""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import CNNScorer, EncoderConfig, ViTEncoder
from .data import N_AUS, LabelBatch
from .objectives import TaskScores, loss_mtl
from .predictions import Predictions


class EmmaModel(nn.Module):
    def __init__(
        self,
        encoder_cfg: EncoderConfig,
        n_exp: int = 8,
        n_exp_cnn: int = 8,
        va_hidden: int = 32,
        cnn: nn.Module | None = None,
    ):
        super().__init__()
        self.cfg = encoder_cfg
        self.n_exp = n_exp
        self.n_exp_cnn = n_exp_cnn
        self.va_hidden = va_hidden
        self.encoder = ViTEncoder(encoder_cfg)
        self.head = nn.Linear(encoder_cfg.embed_dim, N_AUS + n_exp)
        self.cnn = cnn if cnn is not None else CNNScorer(n_exp_cnn, encoder_cfg.img_size)
        self.va_head = nn.Sequential(
            nn.Linear(N_AUS + n_exp + n_exp_cnn, va_hidden),
            nn.ReLU(),
            nn.Linear(va_hidden, 2),
        )
        nn.init.trunc_normal_(self.head.weight, std=2e-5)
        nn.init.zeros_(self.head.bias)
        # Only the summed-logits ablation sends gradient into the CNN; otherwise
        # it runs without autograd bookkeeping.
        self.cnn_trainable = False

    def va_feature(self, au_logits, exp_logits, exp_logits_cnn) -> torch.Tensor:
        return torch.cat([au_logits, exp_logits, exp_logits_cnn], dim=1).detach()

    def forward(self, images: torch.Tensor) -> TaskScores:
        pooled = self.encoder.forward_images(images, pooled_only=True).pooled
        out = self.head(pooled)
        au_logits, exp_logits = out[:, :N_AUS], out[:, N_AUS:]
        with torch.set_grad_enabled(torch.is_grad_enabled() and self.cnn_trainable):
            exp_logits_cnn = self.cnn(images)
        va = self.va_head(self.va_feature(au_logits, exp_logits, exp_logits_cnn))
        return TaskScores(au_logits, exp_logits, va, exp_logits_cnn)


def emma_forward(images: torch.Tensor, model: EmmaModel) -> TaskScores:
    return model(images)


def emma_losses(model: EmmaModel, images: torch.Tensor, labels: LabelBatch, exp_sum_variant: bool = False):
    """Forward pass plus the multi-task objective; returns (total, breakdown, scores)."""
    model.cnn_trainable = exp_sum_variant
    scores = model(images)
    exp_logits = scores.exp_logits + scores.exp_logits_cnn if exp_sum_variant else None
    total, breakdown = loss_mtl(scores, labels, exp_logits=exp_logits)
    return total, breakdown, scores


def emma_train_step(model: EmmaModel, images: torch.Tensor, labels: LabelBatch, optimizer, exp_sum_variant: bool = False):
    """One optimizer step on a single (already augmented) batch.

    ``optimizer`` is anything with ``zero_grad()`` and ``step()``, normally
    :class:`affectlab.engine.RecipeOptimizer`.
    """
    model.train()
    optimizer.zero_grad()
    total, breakdown, _ = emma_losses(model, images, labels, exp_sum_variant)
    total.backward()
    optimizer.step()
    breakdown["total"] = total.detach()
    return breakdown


@torch.no_grad()
def emma_soft_predict(model: EmmaModel, images: torch.Tensor, batch_size: int = 64) -> Predictions:
    """Eval-mode soft outputs: softmax over transformer expression logits,
    sigmoid AU probabilities and raw VA."""
    was_training = model.training
    model.eval()
    exp, au, va = [], [], []
    for start in range(0, images.shape[0], batch_size):
        s = model(images[start : start + batch_size])
        exp.append(F.softmax(s.exp_logits.double(), dim=1))
        au.append(torch.sigmoid(s.au_logits).double())
        va.append(s.va.double())
    model.train(was_training)
    return Predictions(torch.cat(exp).numpy(), torch.cat(va).numpy(), torch.cat(au).numpy())


def emma_predict(model: EmmaModel, images: torch.Tensor, batch_size: int = 64):
    """Hard decisions: VA clamped to [-1, 1], expression argmax, AU sigmoid > 0.5.

    Returns (va, expression, au) arrays.
    """
    p = emma_soft_predict(model, images, batch_size)
    return p.va_clamped, p.expression, p.au

