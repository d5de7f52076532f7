"""Masked co-training for expression recognition.

Two transformers each see an independently masked view of the same image;
their softmax outputs are tied together with a JS-divergence penalty. At
inference both see the full image and their probabilities are averaged.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import EncoderConfig, ViTEncoder, gather_tokens, random_masks
from .data import kept_count, patch_tokens
from .errors import ConfigError
from .objectives import js_divergence, loss_cotex
from .predictions import Predictions


@dataclass(frozen=True)
class MaskSpec:
    ratio: float
    n_patches: int

    def __post_init__(self):
        if not 0.0 <= self.ratio < 1.0:
            raise ConfigError(f"mask ratio must be in [0, 1), got {self.ratio}")
        if self.kept_count < 1:
            raise ConfigError(f"mask ratio {self.ratio} leaves no visible patch out of {self.n_patches}")

    @property
    def kept_count(self) -> int:
        return kept_count(self.n_patches, self.ratio)


def sample_mask(spec: MaskSpec, generator: torch.Generator | None = None) -> torch.Tensor:
    """Sorted indices of a uniformly random subset of ``spec.kept_count`` patches."""
    return random_masks(1, spec.n_patches, spec.kept_count, generator)[0]


def sample_masks(spec: MaskSpec, batch: int, generator: torch.Generator | None = None) -> torch.Tensor:
    return random_masks(batch, spec.n_patches, spec.kept_count, generator)


class ExpressionViT(nn.Module):
    def __init__(self, cfg: EncoderConfig, n_classes: int = 6):
        super().__init__()
        self.encoder = ViTEncoder(cfg)
        self.head = nn.Linear(cfg.embed_dim, n_classes)

    def forward(self, tokens: torch.Tensor, kept_idx: torch.Tensor | None = None) -> torch.Tensor:
        return self.head(self.encoder(tokens, kept_idx, pooled_only=True).pooled)


class TwinViT(nn.Module):
    def __init__(self, cfg: EncoderConfig, n_classes: int = 6):
        super().__init__()
        self.cfg = cfg
        self.n_classes = n_classes
        self.view1 = ExpressionViT(cfg, n_classes)
        self.view2 = ExpressionViT(cfg, n_classes)

    @property
    def views(self) -> tuple[ExpressionViT, ExpressionViT]:
        return self.view1, self.view2


def make_twin(cfg: EncoderConfig, n_classes: int = 6, encoder_state: dict | None = None, seed: int = 0) -> TwinViT:
    """Both views start from the same encoder weights (``encoder_state`` or a
    seeded random init) with independently seeded heads."""
    torch.manual_seed(seed)
    twin = TwinViT(cfg, n_classes)
    if encoder_state is None:
        encoder_state = twin.view1.encoder.state_dict()
    for t, view in enumerate(twin.views):
        view.encoder.load_state_dict(encoder_state)
        g = torch.Generator().manual_seed(seed * 1000 + t + 1)
        nn.init.trunc_normal_(view.head.weight, std=0.02, generator=g)
        nn.init.zeros_(view.head.bias)
    return twin


def view_logits(twin: TwinViT, images: torch.Tensor, mask_ratio: float, generator: torch.Generator | None = None):
    """Logits of both views, each on its own random mask; returns (logits1, logits2, kept1, kept2)."""
    tokens = patch_tokens(images, twin.cfg.patch_size)
    spec = MaskSpec(mask_ratio, tokens.shape[1])
    out = []
    for view in twin.views:
        kept = sample_masks(spec, tokens.shape[0], generator)
        out.append((view(gather_tokens(tokens, kept), kept), kept))
    (l1, k1), (l2, k2) = out
    return l1, l2, k1, k2


def cotex_losses(twin: TwinViT, images, labels, lam: float, mask_ratio: float, generator=None):
    l1, l2, k1, _ = view_logits(twin, images, mask_ratio, generator)
    total, comps = loss_cotex(l1, l2, labels, lam)
    comps["tokens_per_view"] = k1.shape[1]
    return total, comps, (l1, l2)


def cotex_train_step(twin: TwinViT, images, labels, lam: float, mask_ratio: float, optimizers, generator=None):
    """One simultaneous update of both views; ``optimizers`` is a (view1, view2) pair."""
    twin.train()
    for opt in optimizers:
        opt.zero_grad()
    total, comps, _ = cotex_losses(twin, images, labels, lam, mask_ratio, generator)
    total.backward()
    for opt in optimizers:
        opt.step()
    comps["total"] = total.detach()
    return comps


@torch.no_grad()
def view_probs(twin: TwinViT, images: torch.Tensor, batch_size: int = 64) -> tuple[torch.Tensor, torch.Tensor]:
    """Unmasked softmax outputs of each view, float64."""
    was_training = twin.training
    twin.eval()
    p1, p2 = [], []
    for start in range(0, images.shape[0], batch_size):
        tokens = patch_tokens(images[start : start + batch_size], twin.cfg.patch_size)
        p1.append(F.softmax(twin.view1(tokens).double(), dim=1))
        p2.append(F.softmax(twin.view2(tokens).double(), dim=1))
    twin.train(was_training)
    return torch.cat(p1), torch.cat(p2)


def cotex_predict(twin: TwinViT, images: torch.Tensor, batch_size: int = 64) -> Predictions:
    p1, p2 = view_probs(twin, images, batch_size)
    return Predictions(exp_probs=((p1 + p2) / 2).numpy())


@torch.no_grad()
def masked_view_js(twin: TwinViT, images: torch.Tensor, mask_ratio: float, generator=None, batch_size: int = 64) -> float:
    """Mean JS divergence between the two views' masked predictions (eval mode)."""
    was_training = twin.training
    twin.eval()
    total, n = 0.0, 0
    for start in range(0, images.shape[0], batch_size):
        l1, l2, _, _ = view_logits(twin, images[start : start + batch_size], mask_ratio, generator)
        js = js_divergence(F.softmax(l1.double(), dim=1), F.softmax(l2.double(), dim=1))
        total += float(js.sum())
        n += js.shape[0]
    twin.train(was_training)
    return total / n
