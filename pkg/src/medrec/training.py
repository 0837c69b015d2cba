"""Per-patient training loop with an Adam optimizer.

The loss is aggregated across all visits of one patient and one optimizer
step is taken per patient. Everything is deterministic under the run seed:
patient order comes from a per-epoch named substream and the optimizer
state is part of the checkpoint, so a resumed run continues exactly where
an unbroken one would be.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .data import PatientRecord
from .metrics import evaluate
from .model import ModelState, multi_hot, patient_loss, predict
from .rng import substream


class TrainingDiverged(RuntimeError):
    """Raised when a patient produces a non-finite loss."""


@dataclass
class TrainConfig:
    epochs: int = 30
    lr: float = 1e-3
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    shuffle: bool = True


class Adam:
    """Standard Adam with bias correction; no weight decay."""

    def __init__(self, params: dict[str, ad.Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.step_count += 1
        bc1 = 1.0 - self.beta1 ** self.step_count
        bc2 = 1.0 - self.beta2 ** self.step_count
        for name, p in self.params.items():
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data = np.asarray(p.data - self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps))

    def state_arrays(self) -> dict[str, np.ndarray]:
        arrays = {"optim/step": np.array(float(self.step_count))}
        for name in self.params:
            arrays[f"optim/m/{name}"] = self.m[name].copy()
            arrays[f"optim/v/{name}"] = self.v[name].copy()
        return arrays

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.step_count = int(arrays["optim/step"])
        for name in self.params:
            self.m[name] = np.asarray(arrays[f"optim/m/{name}"], dtype=np.float64).copy()
            self.v[name] = np.asarray(arrays[f"optim/v/{name}"], dtype=np.float64).copy()


@dataclass
class TrainResult:
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_val_jaccard: float = 0.0
    best_state: dict[str, np.ndarray] = field(default_factory=dict)
    epochs_done: int = 0


def _epoch_metrics(per_patient_j, per_patient_f, per_patient_p, losses) -> dict:
    return {
        "jaccard": float(np.mean(per_patient_j)) if per_patient_j else 0.0,
        "f1": float(np.mean(per_patient_f)) if per_patient_f else 0.0,
        "prauc": float(np.mean(per_patient_p)) if per_patient_p else 0.0,
        "loss": float(np.mean(losses)) if losses else 0.0,
    }


def _train_visit_metrics(record: PatientRecord, probs_seen, delta: float, num_meds: int):
    from .metrics import f1 as f1_score
    from .metrics import jaccard as jaccard_score
    from .metrics import prauc as prauc_score
    js, fs, ps = [], [], []
    for t, probs in enumerate(probs_seen, start=1):
        target = set(record.visits[t - 1].medications)
        pred = set(int(j) for j in np.flatnonzero(probs > delta))
        js.append(jaccard_score(pred, target))
        fs.append(f1_score(pred, target))
        if target:
            ps.append(prauc_score(probs, multi_hot(target, num_meds)))
    return js, fs, ps


def train(model: ModelState, train_records: Sequence[PatientRecord],
          config: TrainConfig, val_records: Sequence[PatientRecord] | None = None,
          optimizer: Adam | None = None, start_epoch: int = 1,
          log_fn=None) -> tuple[TrainResult, Adam]:
    """Train in place; returns the history plus the live optimizer.

    Train-split metrics are computed from the probabilities already produced
    during the pass (under the moving parameters); validation metrics come
    from a separate forward-only pass. The best epoch is the one with the
    highest validation Jaccard (train Jaccard when no validation split is
    given).
    """
    if not train_records:
        raise ValueError("train requires a non-empty dataset")
    opt = optimizer or Adam(model.named_parameters(), lr=config.lr,
                            beta1=config.beta1, beta2=config.beta2, eps=config.eps)
    params = model.named_parameters()
    result = TrainResult(best_epoch=0, best_val_jaccard=-1.0)
    num_meds = model.vocab.num_medications
    delta = model.hyper.delta

    for epoch in range(start_epoch, config.epochs + 1):
        if config.shuffle:
            order = substream(config.seed, f"shuffle/{epoch}").permutation(len(train_records))
        else:
            order = np.arange(len(train_records))
        ep_j, ep_f, ep_p, ep_loss = [], [], [], []
        for idx in order:
            record = train_records[int(idx)]
            loss, probs_seen = patient_loss(model, record)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDiverged(
                    f"non-finite loss for patient {record.patient_id} at epoch {epoch}")
            grads = ad.grad(loss, params)
            opt.step(grads)
            js, fs, ps = _train_visit_metrics(record, probs_seen, delta, num_meds)
            ep_j.append(float(np.mean(js)))
            ep_f.append(float(np.mean(fs)))
            if ps:
                ep_p.append(float(np.mean(ps)))
            ep_loss.append(value)

        train_row = {"epoch": epoch, "split": "train",
                     **_epoch_metrics(ep_j, ep_f, ep_p, ep_loss)}
        result.history.append(train_row)
        if log_fn:
            log_fn(train_row)

        select_jaccard = train_row["jaccard"]
        if val_records:
            val_report = evaluate(val_records, lambda r: predict(model, r),
                                  mode="patient-mean")
            with ad.no_grad():
                val_losses = [patient_loss(model, r)[0].item() for r in val_records]
            val_row = {"epoch": epoch, "split": "validation",
                       "jaccard": val_report.jaccard, "f1": val_report.f1,
                       "prauc": val_report.prauc,
                       "loss": float(np.mean(val_losses))}
            result.history.append(val_row)
            if log_fn:
                log_fn(val_row)
            select_jaccard = val_report.jaccard

        if select_jaccard > result.best_val_jaccard:
            result.best_val_jaccard = select_jaccard
            result.best_epoch = epoch
            result.best_state = model.state_dict()
        result.epochs_done = epoch

    if not result.best_state:
        result.best_state = model.state_dict()
    return result, opt
