"""Dataset-level challenge metrics: CCC, per-class F1, P_MTL and P_LSD."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import AU_NAMES, N_AUS, VA_SENTINEL
from .errors import AlignmentError, DataError, InvalidLabelError


def f1_binary(tp: int, fp: int, fn: int) -> float:
    """F1 from confusion counts; 0 whenever precision or recall is undefined."""
    if tp + fp == 0 or tp + fn == 0:
        return 0.0
    p = tp / (tp + fp)
    r = tp / (tp + fn)
    if p + r == 0:
        return 0.0
    return 2 * p * r / (p + r)


def per_class_f1(pred: np.ndarray, true: np.ndarray, n_classes: int) -> np.ndarray:
    """One-vs-rest F1 for each class index in ``range(n_classes)``."""
    pred = np.asarray(pred)
    true = np.asarray(true)
    out = np.empty(n_classes)
    for c in range(n_classes):
        tp = int(np.sum((pred == c) & (true == c)))
        fp = int(np.sum((pred == c) & (true != c)))
        fn = int(np.sum((pred != c) & (true == c)))
        out[c] = f1_binary(tp, fp, fn)
    return out


def per_class_recall(pred: np.ndarray, true: np.ndarray, n_classes: int) -> np.ndarray:
    out = np.zeros(n_classes)
    for c in range(n_classes):
        support = np.sum(true == c)
        if support:
            out[c] = np.sum((pred == c) & (true == c)) / support
    return out


def dataset_ccc(x: np.ndarray, y: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    mx, my = x.mean(), y.mean()
    vx, vy = x.var(), y.var()
    cov = np.mean((x - mx) * (y - my))
    den = vx + vy + (mx - my) ** 2
    return 0.0 if den < 1e-12 else float(2 * cov / den)


def combine_mtl(ccc_v: float, ccc_a: float, f1_exp, f1_au) -> float:
    """P_MTL = mean VA CCC + macro expression F1 + macro AU F1."""
    return 0.5 * (ccc_v + ccc_a) + float(np.mean(f1_exp)) + float(np.mean(f1_au))


@dataclass
class MetricReport:
    task: str
    ccc_v: float = 0.0
    ccc_a: float = 0.0
    f1_exp: np.ndarray = field(default_factory=lambda: np.zeros(0))
    f1_au: np.ndarray = field(default_factory=lambda: np.zeros(0))
    p_mtl: float | None = None
    p_lsd: float | None = None
    acc: float | None = None
    counts: dict[str, int] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)

    @property
    def score(self) -> float:
        return self.p_mtl if self.task == "mtl" else self.p_lsd

    def to_kv(self) -> dict[str, str]:
        kv = {"task": self.task}
        if self.task == "mtl":
            kv["P_MTL"] = f"{self.p_mtl:.6f}"
            kv["CCC_V"] = f"{self.ccc_v:.6f}"
            kv["CCC_A"] = f"{self.ccc_a:.6f}"
            kv["F1_AU_macro"] = f"{np.mean(self.f1_au):.6f}"
            for name, v in zip(AU_NAMES, self.f1_au):
                kv[f"F1_{name}"] = f"{v:.6f}"
        else:
            kv["P_LSD"] = f"{self.p_lsd:.6f}"
            kv["ACC"] = f"{self.acc:.6f}"
        kv["F1_EXP_macro"] = f"{np.mean(self.f1_exp):.6f}"
        for i, v in enumerate(self.f1_exp):
            kv[f"F1_EXP{i}"] = f"{v:.6f}"
        for k, v in self.counts.items():
            kv[f"n_{k}"] = str(v)
        if self.warnings:
            kv["warnings"] = ";".join(self.warnings)
        return kv

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.to_kv().items())

    @classmethod
    def from_kv(cls, kv: dict[str, str]) -> "MetricReport":
        task = kv["task"]
        n_exp = sum(1 for k in kv if k.startswith("F1_EXP") and k != "F1_EXP_macro")
        rep = cls(task=task, f1_exp=np.array([float(kv[f"F1_EXP{i}"]) for i in range(n_exp)]))
        if task == "mtl":
            rep.p_mtl = float(kv["P_MTL"])
            rep.ccc_v = float(kv["CCC_V"])
            rep.ccc_a = float(kv["CCC_A"])
            rep.f1_au = np.array([float(kv[f"F1_{n}"]) for n in AU_NAMES])
        else:
            rep.p_lsd = float(kv["P_LSD"])
            rep.acc = float(kv["ACC"])
        rep.counts = {k[2:]: int(v) for k, v in kv.items() if k.startswith("n_")}
        if kv.get("warnings"):
            rep.warnings = kv["warnings"].split(";")
        return rep

    @classmethod
    def parse(cls, text: str) -> "MetricReport":
        kv = {}
        for line in text.splitlines():
            if "=" in line:
                k, _, v = line.partition("=")
                kv[k.strip()] = v.strip()
        return cls.from_kv(kv)

    def summary(self) -> str:
        if self.task == "mtl":
            return (
                f"P_MTL {self.p_mtl:.4f} | CCC V {self.ccc_v:.4f} A {self.ccc_a:.4f} | "
                f"EXPR F1 {np.mean(self.f1_exp):.4f} | AU F1 {np.mean(self.f1_au):.4f}"
            )
        return f"P_LSD {self.p_lsd:.4f} | macro acc {self.acc:.4f}"


def _check_alignment(pred_ids, label_ids):
    if list(pred_ids) != list(label_ids):
        if sorted(pred_ids) != sorted(label_ids):
            missing = set(label_ids) - set(pred_ids)
            extra = set(pred_ids) - set(label_ids)
            raise AlignmentError(f"prediction/label ids differ: {len(missing)} missing, {len(extra)} unexpected")
        raise AlignmentError("prediction rows are not in label order")


def eval_mtl(pred, labels, n_exp: int = 8) -> MetricReport:
    """Score MTL predictions against labels; both are id-aligned tables.

    ``pred`` needs ``ids``, ``va`` (n, 2), ``expression`` (n,), ``au`` (n, 12);
    ``labels`` additionally needs ``au_valid`` (n,). Sentinel rows are
    excluded per task.
    """
    _check_alignment(pred.ids, labels.ids)
    rep = MetricReport(task="mtl")
    lva = np.asarray(labels.va, dtype=np.float64)
    pva = np.asarray(pred.va, dtype=np.float64)
    va_ok = np.all(lva != VA_SENTINEL, axis=1)
    rep.counts["va"] = int(va_ok.sum())
    if va_ok.sum() >= 2:
        rep.ccc_v = dataset_ccc(pva[va_ok, 0], lva[va_ok, 0])
        rep.ccc_a = dataset_ccc(pva[va_ok, 1], lva[va_ok, 1])
    else:
        rep.warnings.append("va: fewer than 2 valid rows, CCC reported as 0")

    lexp = np.asarray(labels.expression)
    if np.any(lexp >= n_exp) or np.any(lexp < -1):
        raise InvalidLabelError(f"expression labels must be in [-1, {n_exp - 1}]")
    exp_ok = lexp >= 0
    rep.counts["exp"] = int(exp_ok.sum())
    if exp_ok.any():
        rep.f1_exp = per_class_f1(np.asarray(pred.expression)[exp_ok], lexp[exp_ok], n_exp)
    else:
        rep.f1_exp = np.zeros(n_exp)
        rep.warnings.append("exp: no valid rows, F1 reported as 0")

    au_ok = np.asarray(labels.au_valid, dtype=bool)
    rep.counts["au"] = int(au_ok.sum())
    pau = np.asarray(pred.au)[au_ok]
    lau = np.asarray(labels.au)[au_ok]
    if au_ok.any():
        rep.f1_au = np.array([per_class_f1(pau[:, j], lau[:, j], 2)[1] for j in range(N_AUS)])
    else:
        rep.f1_au = np.zeros(N_AUS)
        rep.warnings.append("au: no valid rows, F1 reported as 0")

    rep.p_mtl = combine_mtl(rep.ccc_v, rep.ccc_a, rep.f1_exp, rep.f1_au)
    return rep


def eval_lsd(pred, labels, n_classes: int = 6) -> MetricReport:
    """Mean of per-class F1 over the six basic expressions, plus macro accuracy.

    Accepts id-aligned tables (``ids``, ``expression``) or plain index arrays.
    """
    if hasattr(pred, "ids"):
        _check_alignment(pred.ids, labels.ids)
        p, t = np.asarray(pred.expression), np.asarray(labels.expression)
    else:
        p, t = np.asarray(pred), np.asarray(labels)
    if p.shape != t.shape:
        raise DataError(f"{p.shape[0]} predictions for {t.shape[0]} labels")
    for name, arr in (("label", t), ("prediction", p)):
        if np.any((arr < 0) | (arr >= n_classes)):
            raise InvalidLabelError(f"{name} outside the {n_classes} LSD classes")
    rep = MetricReport(task="lsd")
    rep.f1_exp = per_class_f1(p, t, n_classes)
    rep.p_lsd = float(np.mean(rep.f1_exp))
    rep.acc = float(np.mean(per_class_recall(p, t, n_classes)))
    rep.counts["exp"] = int(t.shape[0])
    return rep
