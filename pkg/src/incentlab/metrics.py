"""Evaluation: AUC, price calibration error, response curves, report tables."""

import csv
import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np


class UndefinedAucError(ValueError):
    """AUC needs at least one positive and one negative label."""


def auc(labels, scores) -> float:
    """Probability a random positive outscores a random negative (ties 0.5).

    Computed with midranks in O(n log n); equivalent to exhaustive pair
    counting, which the tests check it against.
    """
    y = np.asarray(labels)
    s = np.asarray(scores, dtype=float)
    if y.shape != s.shape or y.ndim != 1:
        raise ValueError("labels and scores must be equal-length vectors")
    n_pos = int(np.sum(y == 1))
    n_neg = int(np.sum(y == 0))
    if n_pos + n_neg != len(y):
        raise ValueError("labels must be 0/1")
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAucError("need both classes to define AUC")
    order = np.argsort(s, kind="mergesort")
    ranks = np.empty(len(s))
    ranks[order] = np.arange(1, len(s) + 1)
    # midranks for tie groups
    sorted_s = s[order]
    i = 0
    while i < len(s):
        j = i
        while j + 1 < len(s) and sorted_s[j + 1] == sorted_s[i]:
            j += 1
        if j > i:
            ranks[order[i:j + 1]] = 0.5 * (i + 1 + j + 1)
        i = j + 1
    rank_sum = float(ranks[y == 1].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def pce(treatments_per_sample, labels, predictions,
        levels: Optional[Sequence[float]] = None) -> float:
    """Price calibration error: mean over incentive levels of
    |mean label - mean prediction| within the level.

    Levels with no samples are dropped with a warning and the averaging
    count adjusted accordingly.
    """
    t = np.asarray(treatments_per_sample, dtype=float)
    y = np.asarray(labels, dtype=float)
    p = np.asarray(predictions, dtype=float)
    if not (t.shape == y.shape == p.shape) or t.ndim != 1:
        raise ValueError("treatments, labels and predictions must align")
    if levels is None:
        use = np.unique(t)
    else:
        use = np.asarray(list(levels), dtype=float)
    gaps = []
    empty = []
    for lv in use:
        mask = t == lv
        if not mask.any():
            empty.append(float(lv))
            continue
        gaps.append(abs(float(y[mask].mean()) - float(p[mask].mean())))
    if empty:
        warnings.warn(f"no samples at treatment level(s) {empty}; "
                      f"averaging over {len(gaps)} level(s)")
    if not gaps:
        raise ValueError("no treatment level has any samples")
    return float(np.mean(gaps))


def response_curve(model, users, treatments) -> List[Tuple[float, float]]:
    """Mean predicted payment probability per raw treatment level.

    `model` is anything with predict_raw(users, t) -- a trained response
    model or the campaign oracle -- and `users` whatever it accepts (a user
    pool, a logged dataset, or a bare feature matrix).
    """
    fn = model.predict_raw if hasattr(model, "predict_raw") else model
    vals = getattr(treatments, "values", treatments)
    return [(float(t), float(np.mean(fn(users, float(t))))) for t in vals]


def relative_improvement(value: float, baseline: float,
                         higher_is_better: bool = True) -> float:
    """Signed percentage improvement over a baseline.

    Higher-is-better metrics use (v - base) / base; lower-is-better use
    (base - v) / base, so a genuine improvement is positive either way.
    """
    if baseline == 0:
        raise ValueError("relative improvement undefined for zero baseline")
    if higher_is_better:
        return 100.0 * (value - baseline) / baseline
    return 100.0 * (baseline - value) / baseline


@dataclass
class CurveRow:
    t: float
    mean_label: float
    mean_prediction: float
    n: int


@dataclass
class EvalReport:
    """One method's evaluation on the random test set."""

    method: str
    auc: float
    pce: float
    curve: List[CurveRow] = field(default_factory=list)
    baseline: Optional[str] = None
    auc_improvement_pct: Optional[float] = None
    pce_improvement_pct: Optional[float] = None


def evaluate_predictions(method: str, t, y, preds) -> EvalReport:
    """Score one method's per-sample predictions (AUC, PCE, level table)."""
    t = np.asarray(t, dtype=float)
    y = np.asarray(y)
    preds = np.asarray(preds, dtype=float)
    curve = []
    for lv in np.unique(t):
        mask = t == lv
        curve.append(CurveRow(float(lv), float(y[mask].mean()),
                              float(preds[mask].mean()), int(mask.sum())))
    return EvalReport(method=method, auc=auc(y, preds),
                      pce=pce(t, y, preds), curve=curve)


def attach_improvements(reports: Sequence[EvalReport], baseline: str
                        ) -> List[EvalReport]:
    """Fill the relative-improvement fields of every report in place."""
    base = next((r for r in reports if r.method == baseline), None)
    if base is None:
        raise ValueError(f"baseline {baseline!r} not among reports")
    for r in reports:
        r.baseline = baseline
        r.auc_improvement_pct = relative_improvement(r.auc, base.auc, True)
        r.pce_improvement_pct = relative_improvement(r.pce, base.pce, False)
    return list(reports)


def render_improvement_table(reports: Sequence[EvalReport],
                             names: Optional[Dict[str, str]] = None) -> str:
    """Text table of relative improvements over the baseline, per metric."""
    names = names or {}
    baseline = reports[0].baseline
    disp = [names.get(r.method, r.method) for r in reports]
    width = max(8, *(len(d) for d in disp))

    def cell(r, pct):
        if r.method == baseline:
            return "-".rjust(width)
        return f"{pct:+.2f}%".rjust(width)

    lines = [f"Relative improvement over {names.get(baseline, baseline)}",
             " | ".join(["Metric"] + [d.rjust(width) for d in disp])]
    lines.append(" | ".join(["AUC   "] +
                            [cell(r, r.auc_improvement_pct) for r in reports]))
    lines.append(" | ".join(["PCE   "] +
                            [cell(r, r.pce_improvement_pct) for r in reports]))
    return "\n".join(lines) + "\n"


def reports_to_csv(reports: Sequence[EvalReport], metrics_path, curves_path) -> None:
    """CSV blocks: one row per method, plus the per-level curve table."""
    with open(metrics_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "auc", "pce", "baseline",
                    "auc_improvement_pct", "pce_improvement_pct"])
        for r in reports:
            w.writerow([r.method, "%.9g" % r.auc, "%.9g" % r.pce,
                        r.baseline or "",
                        "" if r.auc_improvement_pct is None else "%.9g" % r.auc_improvement_pct,
                        "" if r.pce_improvement_pct is None else "%.9g" % r.pce_improvement_pct])
    with open(curves_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "t", "mean_label", "mean_prediction", "n"])
        for r in reports:
            for row in r.curve:
                w.writerow([r.method, "%.9g" % row.t, "%.9g" % row.mean_label,
                            "%.9g" % row.mean_prediction, row.n])
