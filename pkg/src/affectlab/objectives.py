"""Training losses. Natural logarithms throughout.

Every loss masks out sentinel-labelled samples; a batch with no valid
sample for a task contributes exactly zero (with a zero gradient).
"""
from __future__ import annotations

import math
from typing import NamedTuple

import torch
import torch.nn.functional as F

from .data import N_AUS, LabelBatch
from .errors import ConfigError, InvalidLabelError, ShapeError

CCC_EPS = 1e-12


class TaskScores(NamedTuple):
    au_logits: torch.Tensor  # (B, 12)
    exp_logits: torch.Tensor  # (B, K1), transformer branch
    va: torch.Tensor  # (B, 2), unconstrained at loss time
    exp_logits_cnn: torch.Tensor | None = None  # (B, K2), convolutional branch


def _zero_like(t: torch.Tensor) -> torch.Tensor:
    # keeps the graph connected so backward() works on an all-invalid batch
    return t.sum() * 0.0


def _masked_mean(per_sample: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
    if not bool(valid.any()):
        return _zero_like(per_sample)
    return per_sample[valid].mean()


def loss_au(au_logits: torch.Tensor, au_labels: torch.Tensor, valid: torch.Tensor, n_aus: int = N_AUS) -> torch.Tensor:
    """Per-sample mean binary cross-entropy over AUs, averaged over valid samples."""
    if au_logits.ndim != 2 or au_logits.shape[1] != n_aus:
        raise ShapeError(f"expected (B, {n_aus}) AU logits, got {tuple(au_logits.shape)}")
    labels = au_labels.to(au_logits.dtype)
    # log-sum-exp form inside binary_cross_entropy_with_logits
    per_sample = F.binary_cross_entropy_with_logits(au_logits, labels, reduction="none").mean(dim=1)
    return _masked_mean(per_sample, valid.bool())


def loss_exp(exp_logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Cross-entropy ``-log softmax(logits)[label]`` over samples with label >= 0."""
    k = exp_logits.shape[-1]
    labels = labels.long()
    if bool((labels >= k).any()) or bool((labels < -1).any()):
        raise InvalidLabelError(f"expression labels must lie in [-1, {k - 1}], got {labels.tolist()}")
    valid = labels >= 0
    if not bool(valid.any()):
        return _zero_like(exp_logits)
    logp = F.log_softmax(exp_logits[valid], dim=-1)
    return -logp.gather(1, labels[valid].unsqueeze(1)).mean()


def ccc(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Concordance correlation with population statistics.

    ``2 cov(x, y) / (var x + var y + (mean x - mean y)^2)``, defined as 0 when
    the denominator falls below 1e-12.
    """
    x = torch.as_tensor(x)
    y = torch.as_tensor(y)
    if x.shape != y.shape or x.ndim != 1:
        raise ShapeError(f"ccc needs two equal-length vectors, got {tuple(x.shape)} and {tuple(y.shape)}")
    if x.shape[0] < 2:
        raise ShapeError("ccc needs at least 2 samples")
    mx, my = x.mean(), y.mean()
    dx, dy = x - mx, y - my
    cov = (dx * dy).mean()
    den = (dx * dx).mean() + (dy * dy).mean() + (mx - my) ** 2
    degenerate = den < CCC_EPS
    safe_den = torch.where(degenerate, torch.ones_like(den), den)
    return torch.where(degenerate, torch.zeros_like(den), 2 * cov / safe_den)


def loss_va(va_pred: torch.Tensor, va_labels: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
    """``1 - (CCC_arousal + CCC_valence)`` over the valid rows of the batch.

    Fewer than two valid rows make CCC undefined; the batch is then skipped
    and contributes 0 (see :func:`va_skipped`).
    """
    valid = valid.bool()
    if int(valid.sum()) < 2:
        return _zero_like(va_pred)
    p, t = va_pred[valid], va_labels[valid].to(va_pred.dtype)
    return 1.0 - (ccc(p[:, 1], t[:, 1]) + ccc(p[:, 0], t[:, 0]))


def va_skipped(valid: torch.Tensor) -> bool:
    return int(valid.bool().sum()) < 2


def loss_mtl(scores: TaskScores, labels: LabelBatch, exp_logits: torch.Tensor | None = None):
    """Unweighted sum ``L_AU + L_VA + L_EXP``; returns (total, breakdown).

    ``exp_logits`` overrides the logits fed to the expression loss (used by
    the summed-logits ablation).
    """
    l_au = loss_au(scores.au_logits, labels.au, labels.au_valid)
    l_va = loss_va(scores.va, labels.va, labels.va_valid)
    l_exp = loss_exp(scores.exp_logits if exp_logits is None else exp_logits, labels.expression)
    total = l_au + l_va + l_exp
    breakdown = {
        "au": l_au.detach(),
        "va": l_va.detach(),
        "exp": l_exp.detach(),
        "va_skipped": va_skipped(labels.va_valid),
    }
    return total, breakdown


def entropy(p: torch.Tensor) -> torch.Tensor:
    return -torch.special.xlogy(p, p).sum(dim=-1)


def js_divergence(p1: torch.Tensor, p2: torch.Tensor) -> torch.Tensor:
    """Jensen-Shannon divergence ``H(m) - (H(p1) + H(p2)) / 2`` along the last axis, in nats."""
    p1, p2 = torch.as_tensor(p1), torch.as_tensor(p2)
    if p1.shape != p2.shape:
        raise ShapeError(f"js_divergence shape mismatch: {tuple(p1.shape)} vs {tuple(p2.shape)}")
    m = 0.5 * (p1 + p2)
    # rounding can push near-disjoint pairs a few ulps past ln 2 (or equal ones below 0)
    return (entropy(m) - 0.5 * (entropy(p1) + entropy(p2))).clamp(0.0, math.log(2.0))


def loss_cotex(logits1: torch.Tensor, logits2: torch.Tensor, labels: torch.Tensor, lam: float):
    """``lam * mean JS(softmax 1, softmax 2) + CE_1 + CE_2``; returns (total, components)."""
    if lam < 0:
        raise ConfigError(f"lambda must be >= 0, got {lam}")
    js = js_divergence(F.softmax(logits1, dim=-1), F.softmax(logits2, dim=-1)).mean()
    ce1 = loss_exp(logits1, labels)
    ce2 = loss_exp(logits2, labels)
    total = lam * js + ce1 + ce2
    return total, {"js": js.detach(), "ce1": ce1.detach(), "ce2": ce2.detach()}
