"""Classification metrics (accuracy, P/R/F1, confusion, ROC/AUC) and train/test splitting."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.stats import rankdata


class LengthMismatch(ValueError):
    pass


class SingleClassAUC(ValueError):
    pass


def auc_score(y_true: Sequence[bool], scores: Sequence[float]) -> float:
    """Probability that a random positive outscores a random negative, ties counting 1/2."""
    y = np.asarray(y_true, dtype=bool)
    s = np.asarray(scores, dtype=float)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SingleClassAUC("AUC needs both positive and negative examples")
    ranks = rankdata(s)  # average ranks handle ties
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def roc_points(y_true: Sequence[bool], scores: Sequence[float]) -> list[tuple[float, float]]:
    """(fpr, tpr) at every distinct score threshold, from (0, 0) to (1, 1)."""
    y = np.asarray(y_true, dtype=bool)
    s = np.asarray(scores, dtype=float)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise SingleClassAUC("ROC needs both positive and negative examples")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    last = np.r_[np.nonzero(np.diff(s))[0], len(s) - 1]
    tps = np.cumsum(y)[last]
    fps = np.cumsum(~y)[last]
    pts = [(0.0, 0.0)] + [(float(f / n_neg), float(t / n_pos)) for f, t in zip(fps, tps)]
    return pts


@dataclass
class EvalReport:
    classes: list[str]
    accuracy: float
    precision: dict[str, float]
    recall: dict[str, float]
    f1: dict[str, float]
    support: dict[str, int]
    weighted_precision: float
    weighted_recall: float
    weighted_f1: float
    confusion: list[list[int]]
    auc: Optional[float] = None
    roc: dict[str, list[tuple[float, float]]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "classes": self.classes,
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "support": self.support,
            "weighted": {"precision": self.weighted_precision, "recall": self.weighted_recall, "f1": self.weighted_f1},
            "confusion": self.confusion,
            "auc": self.auc,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def table(self) -> str:
        width = max([len(c) for c in self.classes] + [12])
        lines = [f"{'class':<{width}}  precision  recall     f1-score   support"]
        for c in self.classes:
            lines.append(
                f"{c:<{width}}  {self.precision[c]:<9.6f}  {self.recall[c]:<9.6f}  {self.f1[c]:<9.6f}  {self.support[c]}"
            )
        total = sum(self.support.values())
        lines.append(
            f"{'weighted avg':<{width}}  {self.weighted_precision:<9.6f}  {self.weighted_recall:<9.6f}  "
            f"{self.weighted_f1:<9.6f}  {total}"
        )
        lines.append(f"accuracy {self.accuracy:.6f}")
        lines.append("AUC " + ("n/a" if self.auc is None else f"{self.auc:.6f}"))
        return "\n".join(lines)

    def roc_text(self, cls: str, delimiter: str = ",") -> str:
        return "fpr{0}tpr\n".format(delimiter) + "".join(f"{f:.6f}{delimiter}{t:.6f}\n" for f, t in self.roc[cls])


def _safe_div(a: float, b: float) -> float:
    return a / b if b else 0.0


def evaluate(
    y_true: Sequence[str],
    y_pred: Sequence[str],
    y_scores: Optional[np.ndarray] = None,
    classes: Optional[Sequence[str]] = None,
    pos_label: Optional[str] = None,
) -> EvalReport:
    """Metrics of predicted labels against truth.

    ``y_scores`` has one column per entry of ``classes``. With two classes the
    AUC is that of ``pos_label`` (default: the second class); otherwise it is the
    support-weighted one-vs-rest mean over classes present in ``y_true``.
    """
    if len(y_true) != len(y_pred):
        raise LengthMismatch(f"{len(y_true)} truths vs {len(y_pred)} predictions")
    if classes is None:
        classes = sorted(set(y_true) | set(y_pred))
    classes = list(classes)
    idx = {c: i for i, c in enumerate(classes)}
    k = len(classes)
    t = np.array([idx[v] for v in y_true], dtype=np.int64)
    p = np.array([idx[v] for v in y_pred], dtype=np.int64)
    cm = np.zeros((k, k), dtype=np.int64)
    np.add.at(cm, (t, p), 1)

    tp = np.diag(cm).astype(float)
    support = cm.sum(axis=1)
    predicted = cm.sum(axis=0)
    prec = {c: _safe_div(tp[i], predicted[i]) for i, c in enumerate(classes)}
    rec = {c: _safe_div(tp[i], support[i]) for i, c in enumerate(classes)}
    f1 = {c: _safe_div(2 * prec[c] * rec[c], prec[c] + rec[c]) for c in classes}
    n = max(len(t), 1)
    w = support / n

    report = EvalReport(
        classes=classes,
        accuracy=float(tp.sum() / n) if len(t) else 0.0,
        precision=prec,
        recall=rec,
        f1=f1,
        support={c: int(support[i]) for i, c in enumerate(classes)},
        weighted_precision=float(sum(w[i] * prec[c] for i, c in enumerate(classes))),
        weighted_recall=float(sum(w[i] * rec[c] for i, c in enumerate(classes))),
        weighted_f1=float(sum(w[i] * f1[c] for i, c in enumerate(classes))),
        confusion=cm.tolist(),
    )

    if y_scores is not None:
        scores = np.asarray(y_scores, dtype=float)
        if scores.shape != (len(t), k):
            raise LengthMismatch(f"scores shape {scores.shape} != ({len(t)}, {k})")
        present = [i for i in range(k) if 0 < support[i] < len(t)]
        for i in present:
            report.roc[classes[i]] = roc_points(t == i, scores[:, i])
        if k == 2 and len(present) == 2:
            pos = idx[pos_label] if pos_label is not None else 1
            report.auc = auc_score(t == pos, scores[:, pos])
        elif present:
            aucs = [auc_score(t == i, scores[:, i]) for i in present]
            wts = support[present].astype(float)
            report.auc = float(np.dot(aucs, wts) / wts.sum())
    return report


def split_train_test(
    n_rows: int,
    ratio: float = 0.8,
    seed: int = 0,
    stratify: Optional[Sequence] = None,
    chronological: bool = False,
) -> tuple[np.ndarray, np.ndarray]:
    """Index arrays (train, test) for an ``ratio`` : ``1 - ratio`` split."""
    if n_rows < 2:
        raise ValueError("need at least 2 rows to split")
    if not 0 < ratio < 1:
        raise ValueError("ratio must be in (0, 1)")
    n_train = min(max(int(round(ratio * n_rows)), 1), n_rows - 1)
    if chronological:
        idx = np.arange(n_rows)
        return idx[:n_train], idx[n_train:]
    rng = np.random.default_rng(seed)
    if stratify is None:
        perm = rng.permutation(n_rows)
        return np.sort(perm[:n_train]), np.sort(perm[n_train:])
    labels = np.asarray(stratify)
    if len(labels) != n_rows:
        raise LengthMismatch("stratify labels do not match row count")
    train, test = [], []
    for c in sorted(set(labels.tolist())):
        members = np.nonzero(labels == c)[0]
        members = members[rng.permutation(len(members))]
        k = int(round(ratio * len(members)))
        train.extend(members[:k])
        test.extend(members[k:])
    return np.sort(np.array(train, dtype=np.int64)), np.sort(np.array(test, dtype=np.int64))
