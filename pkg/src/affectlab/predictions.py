"""Soft predictions, their averaging, and the decision rules applied after."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError
from .formats import PredictionTable

AU_THRESHOLD = 0.5


@dataclass
class Predictions:
    """Per-image soft outputs in float64.

    ``va`` holds raw regressor outputs (clamped only by :meth:`decide`);
    ``au_probs`` is None for expression-only models.
    """

    exp_probs: np.ndarray  # (n, K)
    va: np.ndarray | None = None  # (n, 2)
    au_probs: np.ndarray | None = None  # (n, 12)

    def __len__(self):
        return self.exp_probs.shape[0]

    @property
    def expression(self) -> np.ndarray:
        return self.exp_probs.argmax(axis=1)

    @property
    def au(self) -> np.ndarray:
        return (self.au_probs > AU_THRESHOLD).astype(np.int64)

    @property
    def va_clamped(self) -> np.ndarray:
        return np.clip(self.va, -1.0, 1.0)

    def table(self, ids: Sequence[str]) -> PredictionTable:
        if self.au_probs is None:
            return PredictionTable.lsd(ids, self.expression)
        return PredictionTable(list(ids), self.va_clamped, self.expression, self.au)


def average(preds: Sequence[Predictions]) -> Predictions:
    """Element-wise mean of soft outputs across models.

    Inputs are float64 copies of float32 model outputs, so the mean of k
    identical predictions reproduces them exactly.
    """
    if not preds:
        raise ConfigError("cannot average an empty set of predictions")

    def mean(field):
        vals = [getattr(p, field) for p in preds]
        if any(v is None for v in vals):
            return None
        return np.mean(np.stack(vals), axis=0)

    return Predictions(exp_probs=mean("exp_probs"), va=mean("va"), au_probs=mean("au_probs"))

