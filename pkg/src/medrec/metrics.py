"""Multi-label evaluation metrics: Jaccard, F1, and precision-recall AUC."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

AGGREGATION_MODES = ("patient-mean", "visit-mean")


def jaccard(pred: set[int] | frozenset[int], target: set[int] | frozenset[int]) -> float:
    """Intersection over union; two empty sets count as a perfect match."""
    pred, target = set(pred), set(target)
    if not pred and not target:
        return 1.0
    return len(pred & target) / len(pred | target)


def f1(pred: set[int] | frozenset[int], target: set[int] | frozenset[int]) -> float:
    """Harmonic mean of precision and recall over index sets.

    Zero denominators yield 0, except the both-empty case which is 1.
    """
    pred, target = set(pred), set(target)
    if not pred and not target:
        return 1.0
    hits = len(pred & target)
    if hits == 0:
        return 0.0
    precision = hits / len(pred)
    recall = hits / len(target)
    return 2.0 * precision * recall / (precision + recall)


def prauc(probs: np.ndarray, target: np.ndarray) -> float:
    """Average precision: precision at each positive's rank, weighted by the
    recall increment. Ties are broken by ascending index, deterministically.
    """
    probs = np.asarray(probs, dtype=np.float64)
    target = np.asarray(target)
    if probs.shape != target.shape or probs.ndim != 1:
        raise ValueError(f"probs/target shape mismatch: {probs.shape} vs {target.shape}")
    positives = int((target > 0.5).sum())
    if positives == 0:
        raise ValueError("prauc requires at least one positive label")
    order = np.lexsort((np.arange(probs.size), -probs))
    hits = 0
    ap = 0.0
    for rank, idx in enumerate(order, start=1):
        if target[idx] > 0.5:
            hits += 1
            ap += hits / rank
    return ap / positives


@dataclass
class PatientEval:
    patient_id: str
    jaccard: float
    f1: float
    prauc: float | None
    visits: int

    def to_obj(self) -> dict:
        return {"patient_id": self.patient_id, "jaccard": self.jaccard, "f1": self.f1,
                "prauc": self.prauc, "visits": self.visits}


@dataclass
class EvalReport:
    """Aggregated metrics plus per-patient means.

    ``by_mode`` carries both aggregations (patient-mean averages visits
    within each patient first; visit-mean pools all visits); the headline
    jaccard/f1/prauc fields come from ``aggregation_mode``. Visits without
    any positive label are skipped for prauc and counted in
    ``prauc_visits_skipped``.
    """

    jaccard: float
    f1: float
    prauc: float
    per_patient: list[PatientEval]
    visits_evaluated: int
    aggregation_mode: str
    by_mode: dict[str, dict[str, float]] = field(default_factory=dict)
    prauc_visits_skipped: int = 0

    def to_obj(self) -> dict:
        return {
            "jaccard": self.jaccard,
            "f1": self.f1,
            "prauc": self.prauc,
            "aggregation_mode": self.aggregation_mode,
            "visits_evaluated": self.visits_evaluated,
            "prauc_visits_skipped": self.prauc_visits_skipped,
            "by_mode": self.by_mode,
            "per_patient": [p.to_obj() for p in self.per_patient],
        }


def evaluate(records: Sequence, predict_fn: Callable[[object], Iterable],
             mode: str = "patient-mean") -> EvalReport:
    """Run a predictor over records and aggregate per-visit metrics.

    ``predict_fn`` maps a record to per-visit predictions exposing
    ``probs`` (array), ``predicted_set`` and ``target_set``. Records are
    processed in input order and aggregation is order-independent.
    """
    if mode not in AGGREGATION_MODES:
        raise ValueError(f"unknown aggregation mode {mode!r}")
    per_patient: list[PatientEval] = []
    all_j: list[float] = []
    all_f: list[float] = []
    all_p: list[float] = []
    skipped = 0
    visits_total = 0
    for record in records:
        js, fs, ps = [], [], []
        for pred in predict_fn(record):
            target = set(pred.target_set)
            js.append(jaccard(set(pred.predicted_set), target))
            fs.append(f1(set(pred.predicted_set), target))
            if target:
                multi_hot = np.zeros(len(pred.probs))
                multi_hot[sorted(target)] = 1.0
                ps.append(prauc(pred.probs, multi_hot))
            else:
                skipped += 1
        visits_total += len(js)
        all_j.extend(js)
        all_f.extend(fs)
        all_p.extend(ps)
        per_patient.append(PatientEval(
            patient_id=getattr(record, "patient_id", str(len(per_patient))),
            jaccard=float(np.mean(js)) if js else 0.0,
            f1=float(np.mean(fs)) if fs else 0.0,
            prauc=float(np.mean(ps)) if ps else None,
            visits=len(js),
        ))
    prauc_patients = [p.prauc for p in per_patient if p.prauc is not None]
    by_mode = {
        "patient-mean": {
            "jaccard": float(np.mean([p.jaccard for p in per_patient])) if per_patient else 0.0,
            "f1": float(np.mean([p.f1 for p in per_patient])) if per_patient else 0.0,
            "prauc": float(np.mean(prauc_patients)) if prauc_patients else 0.0,
        },
        "visit-mean": {
            "jaccard": float(np.mean(all_j)) if all_j else 0.0,
            "f1": float(np.mean(all_f)) if all_f else 0.0,
            "prauc": float(np.mean(all_p)) if all_p else 0.0,
        },
    }
    headline = by_mode[mode]
    return EvalReport(
        jaccard=headline["jaccard"],
        f1=headline["f1"],
        prauc=headline["prauc"],
        per_patient=per_patient,
        visits_evaluated=visits_total,
        aggregation_mode=mode,
        by_mode=by_mode,
        prauc_visits_skipped=skipped,
    )
