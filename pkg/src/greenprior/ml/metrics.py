from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import DataError, LengthMismatch


@dataclass
class MetricsReport:
    """Binary classification scores with support-weighted class averages.

    ``confusion[i][j]`` counts rows with true class ``i`` predicted as ``j``.
    """

    oa: float
    precision_w: float
    recall_w: float
    f1_w: float
    confusion: list[list[int]]
    per_class: dict[str, dict[str, float]] = field(default_factory=dict)
    flags: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "oa": self.oa,
            "precision_w": self.precision_w,
            "recall_w": self.recall_w,
            "f1_w": self.f1_w,
            "confusion": self.confusion,
            "per_class": self.per_class,
            "flags": self.flags,
        }


def classification_metrics(y_true, y_pred) -> MetricsReport:
    t = np.asarray(y_true, dtype=np.int64).ravel()
    p = np.asarray(y_pred, dtype=np.int64).ravel()
    if t.shape != p.shape:
        raise LengthMismatch(f"{len(t)} true labels vs {len(p)} predictions")
    if t.size == 0:
        raise DataError("cannot score an empty prediction set")
    if not (np.isin(t, (0, 1)).all() and np.isin(p, (0, 1)).all()):
        raise DataError("labels must be 0 or 1")
    conf = np.zeros((2, 2), dtype=np.int64)
    np.add.at(conf, (t, p), 1)
    n = int(t.size)
    tp = np.diag(conf)
    support = conf.sum(axis=1)
    predicted = conf.sum(axis=0)
    flags = []
    per_class = {}
    prec_w = f1_w = 0.0
    for c in (0, 1):
        if predicted[c] == 0:
            flags.append(f"class {c} never predicted; precision set to 0")
        prec = tp[c] / predicted[c] if predicted[c] else 0.0
        rec = tp[c] / support[c] if support[c] else 0.0
        f1 = 2 * prec * rec / (prec + rec) if prec + rec > 0 else 0.0
        per_class[str(c)] = {"precision": float(prec), "recall": float(rec), "f1": float(f1), "support": int(support[c])}
        prec_w += support[c] * prec
        f1_w += support[c] * f1
    oa = int(tp.sum()) / n
    # sum_c (s_c / n) * (tp_c / s_c) collapses to sum_c tp_c / n
    recall_w = int(tp.sum()) / n
    return MetricsReport(
        oa=float(oa),
        precision_w=float(prec_w / n),
        recall_w=float(recall_w),
        f1_w=float(f1_w / n),
        confusion=conf.tolist(),
        per_class=per_class,
        flags=flags,
    )
