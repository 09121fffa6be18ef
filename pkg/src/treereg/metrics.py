"""Binary classification scores, macro-averaged over label columns."""

import numpy as np
from scipy.stats import rankdata


def f1_score(y_true, y_pred) -> float:
    y_true = np.asarray(y_true).astype(bool)
    y_pred = np.asarray(y_pred).astype(bool)
    tp = np.sum(y_true & y_pred)
    fp = np.sum(~y_true & y_pred)
    fn = np.sum(y_true & ~y_pred)
    if tp + fp + fn == 0:
        return 1.0
    return float(2 * tp / (2 * tp + fp + fn))


def roc_auc(y_true, scores) -> float:
    """Mann-Whitney form of the ROC AUC with midranks for ties; NaN if one class only."""
    y_true = np.asarray(y_true).astype(bool)
    scores = np.asarray(scores, dtype=float)
    n_pos = int(y_true.sum())
    n_neg = len(y_true) - n_pos
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    ranks = rankdata(scores)
    return float((ranks[y_true].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def _columns(a):
    a = np.asarray(a)
    return a[:, None] if a.ndim == 1 else a


def macro_scores(Y, probs, threshold: float = 0.5) -> dict:
    Y = _columns(Y)
    probs = _columns(probs)
    pred = probs >= threshold
    f1s = [f1_score(Y[:, q], pred[:, q]) for q in range(Y.shape[1])]
    aucs = [roc_auc(Y[:, q], probs[:, q]) for q in range(Y.shape[1])]
    aucs = [a for a in aucs if not np.isnan(a)]
    return {
        "f1": float(np.mean(f1s)),
        "auc": float(np.mean(aucs)) if aucs else float("nan"),
        "accuracy": float(np.mean(pred == Y.astype(bool))),
    }
