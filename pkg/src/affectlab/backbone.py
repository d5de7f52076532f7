"""Maskable ViT encoder, convolutional expression scorer, MAE pretraining.

The encoder consumes an explicit set of kept patch indices: masked patches
are dropped before the first layer, so their pixels cannot influence the
output. Positional embeddings are fixed 2-D sin-cos tables indexed by the
kept indices.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Any, NamedTuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from safetensors.torch import load_file, save_file

from .data import kept_count, patch_tokens
from .errors import ConfigError, IncompatibleCheckpointError, ShapeError


@dataclass(frozen=True)
class EncoderConfig:
    patch_size: int = 16
    embed_dim: int = 192
    depth: int = 4
    heads: int = 3
    mlp_ratio: float = 4.0
    drop_path_rate: float = 0.1
    class_token: bool = True
    img_size: int = 224

    def __post_init__(self):
        if self.embed_dim % self.heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.embed_dim % 4:
            raise ConfigError("embed_dim must be divisible by 4 for 2-D sin-cos positions")
        if self.depth < 1:
            raise ConfigError("depth must be >= 1")
        if not 0.0 <= self.drop_path_rate < 1.0:
            raise ConfigError(f"drop_path_rate must be in [0, 1), got {self.drop_path_rate}")
        if self.img_size % self.patch_size:
            raise ConfigError(f"patch size {self.patch_size} does not divide image size {self.img_size}")

    @property
    def grid(self) -> tuple[int, int]:
        g = self.img_size // self.patch_size
        return g, g

    @property
    def n_patches(self) -> int:
        return self.grid[0] * self.grid[1]

    @property
    def token_dim(self) -> int:
        return self.patch_size * self.patch_size * 3

    def to_meta(self, prefix: str = "encoder.") -> dict[str, Any]:
        return {prefix + k: v for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_meta(cls, meta: dict[str, str], prefix: str = "encoder.") -> "EncoderConfig":
        kwargs = {}
        for f in dataclasses.fields(cls):
            raw = meta[prefix + f.name]
            kwargs[f.name] = _parse_meta_value(raw, f.type)
        return cls(**kwargs)


PRESETS = {
    "tiny": EncoderConfig(patch_size=16, embed_dim=192, depth=4, heads=3),
    "base": EncoderConfig(patch_size=16, embed_dim=768, depth=12, heads=12),
}


def preset(name: str, **overrides) -> EncoderConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown encoder preset {name!r}; known: {sorted(PRESETS)}")
    return dataclasses.replace(PRESETS[name], **overrides)


def sincos_2d(embed_dim: int, grid: tuple[int, int]) -> torch.Tensor:
    """Fixed (rows*cols, embed_dim) table; half the channels encode rows, half columns."""
    def axis(dim, pos):
        omega = 1.0 / 10000 ** (np.arange(dim // 2, dtype=np.float64) / (dim / 2.0))
        out = np.outer(pos, omega)
        return np.concatenate([np.sin(out), np.cos(out)], axis=1)

    rows, cols = np.meshgrid(np.arange(grid[0]), np.arange(grid[1]), indexing="ij")
    table = np.concatenate([axis(embed_dim // 2, rows.ravel()), axis(embed_dim // 2, cols.ravel())], axis=1)
    return torch.from_numpy(table).float()


class DropPath(nn.Module):
    """Per-sample stochastic depth; identity outside training."""

    def __init__(self, p: float = 0.0):
        super().__init__()
        self.p = p

    def forward(self, x):
        if self.p == 0.0 or not self.training:
            return x
        keep = 1.0 - self.p
        mask = x.new_empty((x.shape[0],) + (1,) * (x.ndim - 1)).bernoulli_(keep)
        return x * mask / keep


class Attention(nn.Module):
    def __init__(self, dim, heads):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x, n_queries: int | None = None):
        """Self-attention; with ``n_queries`` only the first rows attend (to all keys)."""
        B, N, C = x.shape
        if n_queries is None:
            q, k, v = self.qkv(x).reshape(B, N, 3, self.heads, C // self.heads).permute(2, 0, 3, 1, 4)
        else:
            w_q, w_kv = self.qkv.weight.split([C, 2 * C])
            b_q, b_kv = self.qkv.bias.split([C, 2 * C])
            q = F.linear(x[:, :n_queries], w_q, b_q).reshape(B, n_queries, self.heads, C // self.heads).transpose(1, 2)
            k, v = F.linear(x, w_kv, b_kv).reshape(B, N, 2, self.heads, C // self.heads).permute(2, 0, 3, 1, 4)
        x = F.scaled_dot_product_attention(q, k, v)
        return self.proj(x.transpose(1, 2).reshape(B, q.shape[2], C))


class Block(nn.Module):
    def __init__(self, dim, heads, mlp_ratio=4.0, drop_path=0.0):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim, eps=1e-6)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim, eps=1e-6)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))
        self.drop_path = DropPath(drop_path)

    def forward(self, x, n_queries: int | None = None):
        h = self.attn(self.norm1(x), n_queries)
        if n_queries is not None:
            x = x[:, :n_queries]
        x = x + self.drop_path(h)
        return x + self.drop_path(self.mlp(self.norm2(x)))


class EncoderOutput(NamedTuple):
    pooled: torch.Tensor  # (B, D)
    per_token: torch.Tensor | None  # (B, n_kept, D); None when only the class token was computed


class ViTEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        D = cfg.embed_dim
        self.patch_embed = nn.Linear(cfg.token_dim, D)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, D)) if cfg.class_token else None
        self.register_buffer("pos_embed", sincos_2d(D, cfg.grid), persistent=False)
        rates = np.linspace(0.0, cfg.drop_path_rate, cfg.depth)
        self.blocks = nn.ModuleList(Block(D, cfg.heads, cfg.mlp_ratio, float(r)) for r in rates)
        self.norm = nn.LayerNorm(D, eps=1e-6)
        self._init_weights()

    def _init_weights(self):
        if self.cls_token is not None:
            nn.init.normal_(self.cls_token, std=0.02)
        for m in self.modules():
            if isinstance(m, nn.Linear):
                nn.init.xavier_uniform_(m.weight)
                nn.init.zeros_(m.bias)

    def forward(self, tokens: torch.Tensor, kept_idx: torch.Tensor | None = None, pooled_only: bool = False) -> EncoderOutput:
        """``tokens`` is (B, n, P*P*3); ``kept_idx`` (B, n) gives each token's grid position.

        With ``pooled_only`` and a class token, the last block updates only the
        class token (nothing downstream reads the others), which skips about a
        fifth of the work; ``per_token`` is then None.
        """
        if tokens.ndim != 3 or tokens.shape[-1] != self.cfg.token_dim:
            raise ShapeError(f"expected tokens of length {self.cfg.token_dim}, got shape {tuple(tokens.shape)}")
        B, n, _ = tokens.shape
        if n < 1:
            raise ShapeError("at least one kept token is required")
        if kept_idx is None:
            if n != self.cfg.n_patches:
                raise ShapeError(f"{n} tokens given without kept indices; expected all {self.cfg.n_patches}")
            pos = self.pos_embed.to(tokens.dtype).expand(B, -1, -1)
        else:
            if kept_idx.shape != (B, n):
                raise ShapeError(f"kept_idx shape {tuple(kept_idx.shape)} does not match tokens {(B, n)}")
            pos = self.pos_embed.to(tokens.dtype)[kept_idx]
        x = self.patch_embed(tokens) + pos
        if self.cls_token is not None:
            x = torch.cat([self.cls_token.expand(B, -1, -1), x], dim=1)
        cls_only = pooled_only and self.cls_token is not None
        for i, blk in enumerate(self.blocks):
            x = blk(x, 1 if cls_only and i == len(self.blocks) - 1 else None)
        x = self.norm(x)
        if cls_only:
            return EncoderOutput(x[:, 0], None)
        if self.cls_token is not None:
            return EncoderOutput(x[:, 0], x[:, 1:])
        return EncoderOutput(x.mean(dim=1), x)

    def forward_images(self, images: torch.Tensor, pooled_only: bool = False) -> EncoderOutput:
        return self(patch_tokens(images, self.cfg.patch_size), pooled_only=pooled_only)


def encode(seq, encoder: ViTEncoder) -> EncoderOutput:
    """Encode one :class:`~affectlab.data.PatchSequence` (batch of one)."""
    return encoder(seq.tokens.unsqueeze(0), seq.kept_indices.unsqueeze(0))


class CNNScorer(nn.Module):
    """Four strided conv blocks and a position-aware linear readout.

    Stand-in for an expression-pretrained CNN: any module mapping
    (B, 3, H, W) images to (B, K) logits can take its place.
    """

    def __init__(self, n_classes: int = 8, img_size: int = 224, widths=(16, 32, 64, 64)):
        super().__init__()
        self.n_classes = n_classes
        self.img_size = img_size
        # 2x average pool first: the scorer only needs coarse layout
        layers, c_in = [nn.AvgPool2d(2)], 3
        for w in widths:
            layers += [nn.Conv2d(c_in, w, 3, stride=2, padding=1), nn.GELU()]
            c_in = w
        self.features = nn.Sequential(*layers)
        self.pool = nn.AdaptiveAvgPool2d(7)
        self.fc = nn.Linear(c_in * 49, n_classes)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        if images.ndim != 4 or images.shape[1:] != (3, self.img_size, self.img_size):
            raise ShapeError(f"expected (B, 3, {self.img_size}, {self.img_size}) images, got {tuple(images.shape)}")
        x = self.pool(self.features(images - 0.5))
        return self.fc(x.flatten(1))


def cnn_score(images: torch.Tensor, scorer: nn.Module) -> torch.Tensor:
    single = images.ndim == 3
    out = scorer(images.unsqueeze(0) if single else images)
    return out[0] if single else out


# --------------------------------------------------------------------------
# masked autoencoder


def random_masks(batch: int, n_patches: int, n_keep: int, generator: torch.Generator | None = None) -> torch.Tensor:
    """(batch, n_keep) sorted kept indices, an independent uniform subset per row."""
    if n_keep < 1 or n_keep > n_patches:
        raise ConfigError(f"cannot keep {n_keep} of {n_patches} patches")
    noise = torch.rand(batch, n_patches, generator=generator)
    return noise.argsort(dim=1)[:, :n_keep].sort(dim=1).values


def gather_tokens(tokens: torch.Tensor, kept_idx: torch.Tensor) -> torch.Tensor:
    return torch.gather(tokens, 1, kept_idx.unsqueeze(-1).expand(-1, -1, tokens.shape[-1]))


def normalized_patches(tokens: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    mean = tokens.mean(dim=-1, keepdim=True)
    std = tokens.std(dim=-1, keepdim=True, correction=0)
    return (tokens - mean) / (std + eps)


def mae_loss(pred: torch.Tensor, target_tokens: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean squared error over masked patches against per-patch-normalized pixels.

    ``mask`` is (B, N) with 1 on masked (reconstructed) patches.
    """
    per_patch = ((pred - normalized_patches(target_tokens)) ** 2).mean(dim=-1)
    mask = mask.to(per_patch.dtype)
    return (per_patch * mask).sum() / mask.sum()


class MaskedAutoencoder(nn.Module):
    def __init__(self, encoder_cfg: EncoderConfig, decoder_dim: int = 128, decoder_depth: int = 2, decoder_heads: int = 4):
        super().__init__()
        self.cfg = encoder_cfg
        self.encoder = ViTEncoder(encoder_cfg)
        self.decoder_embed = nn.Linear(encoder_cfg.embed_dim, decoder_dim)
        self.mask_token = nn.Parameter(torch.zeros(1, 1, decoder_dim))
        self.register_buffer("decoder_pos_embed", sincos_2d(decoder_dim, encoder_cfg.grid), persistent=False)
        self.decoder_blocks = nn.ModuleList(Block(decoder_dim, decoder_heads) for _ in range(decoder_depth))
        self.decoder_norm = nn.LayerNorm(decoder_dim, eps=1e-6)
        self.decoder_pred = nn.Linear(decoder_dim, encoder_cfg.token_dim)
        nn.init.normal_(self.mask_token, std=0.02)
        for m in [self.decoder_embed, self.decoder_pred, *self.decoder_blocks.modules()]:
            if isinstance(m, nn.Linear):
                nn.init.xavier_uniform_(m.weight)
                nn.init.zeros_(m.bias)

    def decode(self, latent: torch.Tensor, kept_idx: torch.Tensor) -> torch.Tensor:
        B = latent.shape[0]
        x = self.decoder_embed(latent)
        full = self.mask_token.to(x.dtype).expand(B, self.cfg.n_patches, -1)
        full = full.scatter(1, kept_idx.unsqueeze(-1).expand(-1, -1, x.shape[-1]), x)
        full = full + self.decoder_pos_embed.to(x.dtype)
        for blk in self.decoder_blocks:
            full = blk(full)
        return self.decoder_pred(self.decoder_norm(full))

    def forward(self, images, mask_ratio=0.75, generator=None, kept_idx=None):
        """Returns (loss, per-patch predictions, mask with 1 = masked)."""
        if not 0.0 <= mask_ratio < 1.0:
            raise ConfigError(f"mask_ratio must be in [0, 1), got {mask_ratio}")
        tokens = patch_tokens(images, self.cfg.patch_size)
        B, N, _ = tokens.shape
        if kept_idx is None:
            kept_idx = random_masks(B, N, kept_count(N, mask_ratio), generator)
        latent = self.encoder(gather_tokens(tokens, kept_idx), kept_idx).per_token
        pred = self.decode(latent, kept_idx)
        mask = torch.ones(B, N, dtype=pred.dtype)
        mask.scatter_(1, kept_idx, 0.0)
        if mask.sum() == 0:
            # mask_ratio small enough that nothing is reconstructed
            return pred.sum() * 0.0, pred, mask
        return mae_loss(pred, tokens, mask), pred, mask


def mae_pretrain_step(model: MaskedAutoencoder, images: torch.Tensor, mask_ratio: float, generator=None):
    """One forward/backward pass; returns (loss, {param name: grad}).

    Gradients are left in ``.grad`` for the caller's optimizer.
    """
    if not 0.0 <= mask_ratio < 1.0:
        raise ConfigError(f"mask_ratio must be in [0, 1) so some patches stay visible, got {mask_ratio}")
    model.zero_grad(set_to_none=True)
    loss, _, _ = model(images, mask_ratio, generator)
    loss.backward()
    grads = {n: p.grad for n, p in model.named_parameters() if p.grad is not None}
    return loss.detach(), grads


# --------------------------------------------------------------------------
# checkpoints: weights.safetensors + meta.txt (key = value)

WEIGHTS_FILE = "weights.safetensors"
META_FILE = "meta.txt"


def _parse_meta_value(raw: str, kind):
    kind = getattr(kind, "__name__", kind)
    if kind in ("bool", bool):
        return raw == "True"
    if kind in ("int", int):
        return int(raw)
    if kind in ("float", float):
        return float(raw)
    return raw


def write_meta(path: str | Path, meta: dict[str, Any]) -> None:
    with open(path, "w") as fh:
        for k, v in meta.items():
            fh.write(f"{k} = {v}\n")


def read_meta(path: str | Path) -> dict[str, str]:
    meta = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        meta[key.strip()] = value.strip()
    return meta


def save_checkpoint(path: str | Path, state: dict[str, torch.Tensor], meta: dict[str, Any]) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    save_file({k: v.detach().contiguous() for k, v in state.items()}, str(path / WEIGHTS_FILE))
    write_meta(path / META_FILE, meta)
    return path


def load_checkpoint(path: str | Path) -> tuple[dict[str, torch.Tensor], dict[str, str]]:
    path = Path(path)
    if not (path / WEIGHTS_FILE).exists() or not (path / META_FILE).exists():
        raise IncompatibleCheckpointError(f"{path} is not a checkpoint directory")
    return load_file(str(path / WEIGHTS_FILE)), read_meta(path / META_FILE)


def save_pretrained(model: ViTEncoder | MaskedAutoencoder, path, step: int = 0, seed: int = 0) -> Path:
    kind = "mae" if isinstance(model, MaskedAutoencoder) else "encoder"
    meta = {"kind": kind, **model.cfg.to_meta(), "step": step, "seed": seed}
    return save_checkpoint(path, model.state_dict(), meta)


def load_pretrained(path, model: ViTEncoder | MaskedAutoencoder) -> ViTEncoder | MaskedAutoencoder:
    """Load weights into ``model``, checking the recorded encoder config.

    An MAE checkpoint can be loaded into a bare encoder: the decoder weights
    are dropped and every encoder parameter must be present.
    """
    state, meta = load_checkpoint(path)
    try:
        saved_cfg = EncoderConfig.from_meta(meta)
    except KeyError as exc:
        raise IncompatibleCheckpointError(f"{path}: meta.txt lacks {exc.args[0]}") from None
    if _arch(saved_cfg) != _arch(model.cfg):
        raise IncompatibleCheckpointError(f"{path}: checkpoint encoder {saved_cfg} does not match model {model.cfg}")
    if isinstance(model, ViTEncoder) and meta.get("kind") == "mae":
        state = {k[len("encoder."):]: v for k, v in state.items() if k.startswith("encoder.")}
    missing, unexpected = model.load_state_dict(state, strict=False)
    if missing or unexpected:
        raise IncompatibleCheckpointError(f"{path}: missing {missing}, unexpected {unexpected}")
    return model


def _arch(cfg: EncoderConfig) -> tuple:
    # drop path is a training-time knob and may differ between pretraining and finetuning
    return dataclasses.replace(cfg, drop_path_rate=0.0)
