"""Sample/label model, augmentation, patch tokenization and synthetic faces.

Label sentinels follow the challenge convention: valence/arousal ``-5`` and
expression ``-1`` mark an invalid annotation. Invalid AU vectors carry an
explicit ``valid`` flag because the challenge's AU sentinel (``0``) collides
with a genuine "absent" label.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
import torchvision.transforms.v2.functional as TF
from PIL import Image

from .errors import ConfigError, DataError, InvalidLabelError, MalformedImageError

AU_NAMES = ("AU1", "AU2", "AU4", "AU6", "AU7", "AU10", "AU12", "AU15", "AU23", "AU24", "AU25", "AU26")
N_AUS = len(AU_NAMES)
MTL_EXPRESSIONS = ("neutral", "anger", "disgust", "fear", "happiness", "sadness", "surprise", "other")
LSD_EXPRESSIONS = ("anger", "disgust", "fear", "happiness", "sadness", "surprise")
VA_SENTINEL = -5.0
EXP_SENTINEL = -1

IMAGE_SIZE = 224
SOURCE_SIZE = 112
# resize target before the random 224 crop
TRAIN_RESIZE = {"train_mtl": 232, "train_lsd": 228}
AUG_MODES = ("train_mtl", "train_lsd", "eval")
JITTER_RANGE = (0.6, 1.4)

LABELS_HEADER = ("id", "valence", "arousal", "expression", *AU_NAMES, "au_valid")


@dataclass(frozen=True)
class VAPair:
    valence: float
    arousal: float

    @property
    def valid(self) -> bool:
        return self.valence != VA_SENTINEL and self.arousal != VA_SENTINEL


@dataclass(frozen=True)
class AULabels:
    values: tuple[int, ...]
    valid: bool = True

    def __post_init__(self):
        if len(self.values) != N_AUS:
            raise InvalidLabelError(f"expected {N_AUS} AU flags, got {len(self.values)}")
        if any(v not in (0, 1) for v in self.values):
            raise InvalidLabelError(f"AU flags must be 0/1, got {self.values}")


@dataclass(frozen=True)
class Labels:
    va: VAPair
    expression: int
    au: AULabels


@dataclass
class FaceSample:
    image: torch.Tensor  # (3, H, W) in [0, 1]
    labels: Labels
    id: str


@dataclass
class PatchSequence:
    tokens: torch.Tensor  # (n_kept, P*P*3)
    kept_indices: torch.Tensor  # sorted int64
    grid: tuple[int, int]
    patch_size: int

    @property
    def n_patches(self) -> int:
        return self.grid[0] * self.grid[1]


def label_validity(labels: Labels) -> tuple[bool, bool, bool]:
    return labels.va.valid, labels.expression >= 0, labels.au.valid


@dataclass
class LabelBatch:
    """Stacked labels for a mini-batch; sentinels are kept verbatim."""

    va: torch.Tensor  # (B, 2) float
    expression: torch.Tensor  # (B,) int64
    au: torch.Tensor  # (B, 12) float
    au_valid: torch.Tensor  # (B,) bool

    @classmethod
    def from_labels(cls, labels: Sequence[Labels], dtype=torch.float32) -> "LabelBatch":
        return cls(
            va=torch.tensor([[l.va.valence, l.va.arousal] for l in labels], dtype=dtype).reshape(-1, 2),
            expression=torch.tensor([l.expression for l in labels], dtype=torch.long),
            au=torch.tensor([l.au.values for l in labels], dtype=dtype).reshape(-1, N_AUS),
            au_valid=torch.tensor([l.au.valid for l in labels], dtype=torch.bool),
        )

    @property
    def va_valid(self) -> torch.Tensor:
        return (self.va != VA_SENTINEL).all(dim=1)

    @property
    def exp_valid(self) -> torch.Tensor:
        return self.expression >= 0

    def __len__(self):
        return self.expression.shape[0]

    def index(self, idx) -> "LabelBatch":
        return LabelBatch(self.va[idx], self.expression[idx], self.au[idx], self.au_valid[idx])


# --------------------------------------------------------------------------
# augmentation


def _check_image(image: torch.Tensor) -> None:
    if image.ndim != 3 or image.shape[0] != 3:
        raise MalformedImageError(f"expected a 3-channel (3, H, W) image, got shape {tuple(image.shape)}")
    if image.shape[1] != image.shape[2] or image.shape[1] < SOURCE_SIZE:
        raise MalformedImageError(f"expected a square image of side >= {SOURCE_SIZE}, got {tuple(image.shape[1:])}")


def _color_jitter(images: torch.Tensor, factors: torch.Tensor) -> torch.Tensor:
    """Per-sample brightness, contrast, saturation using torchvision's blend
    formulas; works in place on ``images``."""
    b, c, s = (factors[:, i].to(images.dtype).view(-1, 1, 1, 1) for i in range(3))
    images.mul_(b).clamp_(0.0, 1.0)
    mean = TF.rgb_to_grayscale(images).mean(dim=(-3, -2, -1), keepdim=True)
    images.mul_(c).add_((1.0 - c) * mean).clamp_(0.0, 1.0)
    gray = TF.rgb_to_grayscale(images).mul_(1.0 - s)
    return images.mul_(s).add_(gray).clamp_(0.0, 1.0)


def _train_views(resized: torch.Tensor, rng: np.random.Generator) -> torch.Tensor:
    # per sample, in row order: crop origin, flip, jitter factors
    slack = resized.shape[-1] - IMAGE_SIZE
    crops, factors = [], []
    for r in resized:
        top, left = (int(v) for v in rng.integers(0, slack + 1, size=2))
        flip = rng.random() < 0.5
        factors.append(rng.uniform(*JITTER_RANGE, size=3))
        out = TF.crop(r, top, left, IMAGE_SIZE, IMAGE_SIZE)
        crops.append(TF.horizontal_flip(out) if flip else out)
    return _color_jitter(torch.stack(crops), torch.from_numpy(np.stack(factors)))


def augment(image: torch.Tensor, mode: str, rng: np.random.Generator | None = None) -> torch.Tensor:
    """Map a raw square face crop to a 3x224x224 network input.

    ``train_mtl`` resizes to 232 and ``train_lsd`` to 228 before a random
    224 crop, horizontal flip (p=0.5) and color jitter; ``eval`` is a plain
    deterministic resize.
    """
    _check_image(image)
    if mode not in AUG_MODES:
        raise ConfigError(f"unknown augmentation mode {mode!r}; expected one of {AUG_MODES}")
    if mode == "eval":
        return TF.resize(image, [IMAGE_SIZE, IMAGE_SIZE], antialias=True).clamp_(0.0, 1.0)
    if rng is None:
        raise ConfigError("training augmentation needs an explicit rng")
    side = TRAIN_RESIZE[mode]
    resized = TF.resize(image, [side, side], antialias=True)
    return _train_views(resized.unsqueeze(0), rng)[0]


def augment_batch(images: torch.Tensor, mode: str, rng: np.random.Generator | None = None) -> torch.Tensor:
    """Batched :func:`augment`; draws per-sample parameters in row order."""
    if images.ndim != 4:
        raise MalformedImageError(f"expected (B, 3, H, W), got {tuple(images.shape)}")
    _check_image(images[0])
    if mode not in AUG_MODES:
        raise ConfigError(f"unknown augmentation mode {mode!r}; expected one of {AUG_MODES}")
    if mode == "eval":
        return TF.resize(images, [IMAGE_SIZE, IMAGE_SIZE], antialias=True).clamp_(0.0, 1.0)
    if rng is None:
        raise ConfigError("training augmentation needs an explicit rng")
    side = TRAIN_RESIZE[mode]
    resized = TF.resize(images, [side, side], antialias=True)
    return _train_views(resized, rng)


# --------------------------------------------------------------------------
# patches


def patch_tokens(images: torch.Tensor, patch_size: int) -> torch.Tensor:
    """(..., 3, H, W) -> (..., N, P*P*3), row-major patches, (row, col, channel) inside a patch."""
    *lead, c, h, w = images.shape
    p = patch_size
    if h % p or w % p:
        raise ConfigError(f"patch size {p} does not divide image size {h}x{w}")
    gh, gw = h // p, w // p
    x = images.reshape(*lead, c, gh, p, gw, p)
    x = x.movedim(-5, -1)  # (..., gh, p, gw, p, c)
    x = x.transpose(-3, -4)  # (..., gh, gw, p, p, c)
    return x.reshape(*lead, gh * gw, p * p * c)


def tokens_to_image(tokens: torch.Tensor, patch_size: int, grid: tuple[int, int]) -> torch.Tensor:
    """Inverse of :func:`patch_tokens` for a full (unmasked) token set."""
    *lead, n, d = tokens.shape
    p = patch_size
    gh, gw = grid
    c = d // (p * p)
    if n != gh * gw or c * p * p != d:
        raise ConfigError(f"cannot reassemble {n} tokens of length {d} into a {gh}x{gw} grid of {p}px patches")
    x = tokens.reshape(*lead, gh, gw, p, p, c)
    x = x.transpose(-3, -4)  # (..., gh, p, gw, p, c)
    x = x.movedim(-1, -5)
    return x.reshape(*lead, c, gh * p, gw * p)


def patchify(image: torch.Tensor, patch_size: int) -> PatchSequence:
    if image.ndim != 3:
        raise MalformedImageError(f"patchify takes one (3, H, W) image, got {tuple(image.shape)}")
    tokens = patch_tokens(image, patch_size)
    grid = (image.shape[1] // patch_size, image.shape[2] // patch_size)
    return PatchSequence(tokens, torch.arange(tokens.shape[0]), grid, patch_size)


def depatchify(seq: PatchSequence) -> torch.Tensor:
    if seq.kept_indices.numel() != seq.n_patches:
        raise ConfigError("depatchify needs the full, unmasked token sequence")
    return tokens_to_image(seq.tokens, seq.patch_size, seq.grid)


# --------------------------------------------------------------------------
# synthetic faces

# Layout on the 112x112 source canvas. Everything is mirror-symmetric about
# the vertical center line so that horizontal flips never change the label.
_BLOB_COLS = (40, 72)  # inclusive start, exclusive end; mirrors onto itself
_BLOB_CELL = 14  # 8 expression cells stacked vertically
_AU_BAND = 18  # 6 bands x (outer, inner) sub-columns = 12 AU regions
_AU_COLS = ((2, 17), (19, 34))
STRIPE_LEVEL = 0.7
NOISE_AMPLITUDE = 0.05
SENTINEL_RATE = 0.1

# class-conditional valence/arousal centers, indexed by the 8-class MTL space
_VA_CENTERS = np.array(
    [
        [0.0, 0.0],  # neutral
        [-0.5, 0.6],  # anger
        [-0.6, 0.2],  # disgust
        [-0.3, 0.7],  # fear
        [0.7, 0.4],  # happiness
        [-0.6, -0.5],  # sadness
        [0.3, 0.8],  # surprise
        [0.2, -0.4],  # other
    ]
)
_VA_SPREAD = 0.3
_LSD_TO_MTL = np.array([1, 2, 3, 4, 5, 6])


def va_gains(valence: float, arousal: float) -> tuple[float, float, float]:
    """Per-channel (R, G, B) gains; valence drives red, arousal blue."""
    return (valence + 1) / 2 * 0.5 + 0.25, 0.5, (arousal + 1) / 2 * 0.5 + 0.25


def structure_map(expression_cell: int, au: Sequence[int], size: int = SOURCE_SIZE) -> np.ndarray:
    """Noise-free luminance structure in [0, 1]: one blob plus active AU stripes."""
    s = np.zeros((size, size))
    r0 = expression_cell * _BLOB_CELL
    s[r0 + 2 : r0 + _BLOB_CELL - 2, _BLOB_COLS[0] : _BLOB_COLS[1]] = 1.0
    for j, on in enumerate(au):
        if not on:
            continue
        band, sub = divmod(j, 2)
        top = band * _AU_BAND + 1
        rows = np.arange(top, top + _AU_BAND - 2)
        rows = rows[((rows - top) // 2) % 2 == 0]
        c0, c1 = _AU_COLS[sub]
        s[rows[:, None], np.arange(c0, c1)] = STRIPE_LEVEL
        s[rows[:, None], np.arange(size - c1, size - c0)] = STRIPE_LEVEL
    return s


def render_face(expression_cell: int, valence: float, arousal: float, au: Sequence[int], rng: np.random.Generator) -> torch.Tensor:
    s = structure_map(expression_cell, au)
    base = 0.4 + 0.6 * s
    gains = np.array(va_gains(valence, arousal))[:, None, None]
    img = gains * base[None] + rng.uniform(-NOISE_AMPLITUDE, NOISE_AMPLITUDE, size=(3, *s.shape))
    return torch.from_numpy(np.clip(img, 0.0, 1.0).astype(np.float32))


def synth_dataset(n: int, task: str = "mtl", seed: int = 0) -> list[FaceSample]:
    """Deterministic synthetic faces whose labels are recoverable from pixels.

    The expression index picks which of 8 vertically stacked cells holds a
    bright blob, valence/arousal set the red/blue gains, and each AU toggles
    a stripe patch. Valence/arousal are drawn around class-specific centers,
    so expression scores carry affect information as they do on real faces.
    For ``mtl``, 10% of samples independently lose each label type.
    """
    if n < 1:
        raise ConfigError(f"n must be >= 1, got {n}")
    if task not in ("mtl", "lsd"):
        raise ConfigError(f"unknown task {task!r}")
    rng = np.random.default_rng(seed)
    k = 8 if task == "mtl" else 6
    exp = rng.integers(0, k, size=n)
    cell = exp if task == "mtl" else _LSD_TO_MTL[exp]
    va = np.clip(_VA_CENTERS[cell] + rng.uniform(-_VA_SPREAD, _VA_SPREAD, size=(n, 2)), -1.0, 1.0)
    au = (rng.random((n, N_AUS)) < 0.5).astype(int)
    if task == "mtl":
        drop_va, drop_exp, drop_au = rng.random((3, n)) < SENTINEL_RATE
    else:
        drop_va = drop_exp = drop_au = np.zeros(n, dtype=bool)

    samples = []
    for i in range(n):
        image = render_face(int(cell[i]), va[i, 0], va[i, 1], au[i], rng)
        v, a = (VA_SENTINEL, VA_SENTINEL) if drop_va[i] else (float(va[i, 0]), float(va[i, 1]))
        labels = Labels(
            VAPair(v, a),
            EXP_SENTINEL if drop_exp[i] else int(exp[i]),
            AULabels(tuple(int(x) for x in au[i]), valid=not drop_au[i]),
        )
        samples.append(FaceSample(image, labels, f"{task}{seed}_{i:05d}"))
    return samples


def stack_images(samples: Iterable[FaceSample]) -> torch.Tensor:
    return torch.stack([s.image for s in samples])


# --------------------------------------------------------------------------
# on-disk dataset: PNG images + labels.csv


def _fmt_va(x: float) -> str:
    return "-5" if x == VA_SENTINEL else f"{x:.6f}"


def write_labels_csv(path: str | Path, ids: Sequence[str], labels: Sequence[Labels]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LABELS_HEADER)
        for sid, l in zip(ids, labels):
            w.writerow([sid, _fmt_va(l.va.valence), _fmt_va(l.va.arousal), l.expression, *l.au.values, int(l.au.valid)])


def _parse(value: str, kind, column: str, lineno: int, path):
    try:
        return kind(value)
    except ValueError:
        raise DataError(f"{path}:{lineno}: malformed {column} value {value!r}") from None


def read_labels_csv(path: str | Path) -> tuple[list[str], list[Labels]]:
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader, ()))
        missing = [c for c in LABELS_HEADER if c not in header]
        if missing:
            raise DataError(f"{path}: missing column(s) {', '.join(missing)}")
        extra = [c for c in header if c not in LABELS_HEADER]
        if extra:
            raise DataError(f"{path}: unknown column(s) {', '.join(extra)}")
        col = {name: header.index(name) for name in LABELS_HEADER}
        ids, out = [], []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            v = _parse(row[col["valence"]], float, "valence", lineno, path)
            a = _parse(row[col["arousal"]], float, "arousal", lineno, path)
            e = _parse(row[col["expression"]], int, "expression", lineno, path)
            flags = tuple(_parse(row[col[n]], int, n, lineno, path) for n in AU_NAMES)
            au_valid = _parse(row[col["au_valid"]], int, "au_valid", lineno, path)
            if au_valid not in (0, 1) or any(f not in (0, 1) for f in flags):
                raise DataError(f"{path}:{lineno}: AU flags and au_valid must be 0 or 1")
            if e < EXP_SENTINEL:
                raise DataError(f"{path}:{lineno}: expression {e} below the -1 sentinel")
            ids.append(row[col["id"]])
            out.append(Labels(VAPair(v, a), e, AULabels(flags, bool(au_valid))))
    return ids, out


def write_dataset(samples: Sequence[FaceSample], directory: str | Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for s in samples:
        arr = (s.image.clamp(0, 1).permute(1, 2, 0).numpy() * 255).round().astype(np.uint8)
        Image.fromarray(arr, mode="RGB").save(directory / f"{s.id}.png")
    write_labels_csv(directory / "labels.csv", [s.id for s in samples], [s.labels for s in samples])
    return directory


def read_dataset(directory: str | Path) -> list[FaceSample]:
    directory = Path(directory)
    if not (directory / "labels.csv").exists():
        raise DataError(f"{directory}: no labels.csv")
    ids, labels = read_labels_csv(directory / "labels.csv")
    samples = []
    for sid, lab in zip(ids, labels):
        png = directory / f"{sid}.png"
        if not png.exists():
            raise DataError(f"{directory}: image {png.name} listed in labels.csv is missing")
        with Image.open(png) as im:
            if im.mode != "RGB":
                raise MalformedImageError(f"{png}: expected 8-bit RGB, got mode {im.mode}")
            arr = np.asarray(im, dtype=np.float32) / 255.0
        samples.append(FaceSample(torch.from_numpy(arr).permute(2, 0, 1).contiguous(), lab, sid))
    return samples


def kept_count(n_patches: int, mask_ratio: float) -> int:
    """N - floor(r*N), with the product rounded first so 0.29*100 floors to 29."""
    return n_patches - math.floor(round(mask_ratio * n_patches, 9))
