"""Prediction files, label tables and ``key = value`` config files."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import AU_NAMES, N_AUS, Labels, read_labels_csv
from .errors import ConfigError, DataError

PREDICTION_HEADER = ("id", "valence", "arousal", "expression", *AU_NAMES)
LSD_PREDICTION_HEADER = ("id", "expression")


@dataclass
class PredictionTable:
    ids: list[str]
    va: np.ndarray  # (n, 2)
    expression: np.ndarray  # (n,)
    au: np.ndarray  # (n, 12)

    def __len__(self):
        return len(self.ids)

    @classmethod
    def lsd(cls, ids, expression) -> "PredictionTable":
        n = len(ids)
        return cls(list(ids), np.zeros((n, 2)), np.asarray(expression, dtype=np.int64), np.zeros((n, N_AUS), dtype=np.int64))


@dataclass
class LabelTable:
    ids: list[str]
    va: np.ndarray
    expression: np.ndarray
    au: np.ndarray
    au_valid: np.ndarray

    def __len__(self):
        return len(self.ids)

    @classmethod
    def from_labels(cls, ids, labels: list[Labels]) -> "LabelTable":
        return cls(
            list(ids),
            np.array([[l.va.valence, l.va.arousal] for l in labels], dtype=np.float64).reshape(-1, 2),
            np.array([l.expression for l in labels], dtype=np.int64),
            np.array([l.au.values for l in labels], dtype=np.int64).reshape(-1, N_AUS),
            np.array([l.au.valid for l in labels], dtype=bool),
        )


def read_label_table(path: str | Path) -> LabelTable:
    ids, labels = read_labels_csv(path)
    return LabelTable.from_labels(ids, labels)


def write_predictions(path: str | Path, table: PredictionTable, task: str = "mtl") -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if task == "lsd":
            w.writerow(LSD_PREDICTION_HEADER)
            for i, sid in enumerate(table.ids):
                w.writerow([sid, int(table.expression[i])])
            return
        w.writerow(PREDICTION_HEADER)
        for i, sid in enumerate(table.ids):
            v, a = table.va[i]
            w.writerow([sid, f"{v:.6f}", f"{a:.6f}", int(table.expression[i]), *(int(x) for x in table.au[i])])


def read_predictions(path: str | Path) -> tuple[PredictionTable, str]:
    """Returns the table and the task inferred from the header (``mtl`` or ``lsd``)."""
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader, ()))
        if header == LSD_PREDICTION_HEADER:
            task, expected = "lsd", LSD_PREDICTION_HEADER
        else:
            task, expected = "mtl", PREDICTION_HEADER
            missing = [c for c in expected if c not in header]
            if missing:
                raise DataError(f"{path}: missing column(s) {', '.join(missing)}")
            extra = [c for c in header if c not in expected]
            if extra:
                raise DataError(f"{path}: unknown column(s) {', '.join(extra)}")
        col = {c: header.index(c) for c in expected}
        ids, va, exp, au = [], [], [], []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                exp.append(int(row[col["expression"]]))
                if task == "mtl":
                    pair = (float(row[col["valence"]]), float(row[col["arousal"]]))
                    if not all(-1.0 <= x <= 1.0 for x in pair):
                        raise ValueError(f"valence/arousal {pair} outside [-1, 1]")
                    flags = [int(row[col[n]]) for n in AU_NAMES]
                    if any(f not in (0, 1) for f in flags):
                        raise ValueError(f"AU flags must be 0 or 1, got {flags}")
                    va.append(pair)
                    au.append(flags)
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            ids.append(row[col["id"]])
    if task == "lsd":
        return PredictionTable.lsd(ids, exp), task
    return (
        PredictionTable(ids, np.array(va, dtype=np.float64).reshape(-1, 2), np.array(exp, dtype=np.int64), np.array(au, dtype=np.int64).reshape(-1, N_AUS)),
        task,
    )


def read_config_file(path: str | Path) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        out[key.strip().replace("-", "_")] = value.strip()
    return out
