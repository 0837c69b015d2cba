"""Full recommendation model: dual-head scoring, losses, and thresholded inference.

One forward pass scores every medication for one visit: the encoded patient
history is mapped directly to per-drug logits (head 1) and projected into
the medication embedding space for cosine matching against the adapted
per-drug embeddings (head 2); a learned weighted sum of the two goes
through a sigmoid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import PatientRecord, Vocab
from .medications import ArmState, SimpleMedState, responsive_embedding, simple_med_embedding
from .patients import EncoderState, encode_patient
from .rng import substream
from .temporal import FeedForward

VARIANTS = ("full", "no-ptl", "no-ptl-l", "no-ptl-n", "no-arm")

# Temporal-encoder mode per model variant ("no-ptl" swaps the encoder class
# instead, so the mode is ignored there).
_PTL_MODE = {
    "full": "full",
    "no-ptl": "full",
    "no-ptl-l": "near-only",
    "no-ptl-n": "far-all",
    "no-arm": "full",
}

PROB_EPS = 1e-12


class InvalidVisitError(ValueError):
    """Raised when a visit index is outside 1..T."""


@dataclass
class Hyper:
    dim: int = 64
    split_n: int = 2
    state_size: int = 16
    alpha_loss: float = 0.7
    delta: float = 0.5
    variant: str = "full"

    def validate(self) -> None:
        if self.dim < 1 or self.split_n < 1 or self.state_size < 1:
            raise ValueError(f"dim/split_n/state_size must be >= 1: {self}")
        if not 0.0 <= self.alpha_loss <= 1.0:
            raise ValueError(f"alpha_loss must be in [0, 1], got {self.alpha_loss}")
        if not 0.0 < self.delta < 1.0:
            raise ValueError(f"delta must be in (0, 1), got {self.delta}")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")

    def to_obj(self) -> dict:
        return {"dim": self.dim, "split_n": self.split_n, "state_size": self.state_size,
                "alpha_loss": self.alpha_loss, "delta": self.delta, "variant": self.variant}

    @classmethod
    def from_obj(cls, obj: dict) -> "Hyper":
        hyper = cls(dim=int(obj["dim"]), split_n=int(obj["split_n"]),
                    state_size=int(obj["state_size"]), alpha_loss=float(obj["alpha_loss"]),
                    delta=float(obj["delta"]), variant=str(obj["variant"]))
        hyper.validate()
        return hyper


@dataclass
class ModelState:
    hyper: Hyper
    vocab: Vocab
    encoder: EncoderState
    med: ArmState | SimpleMedState
    ff_o1: FeedForward
    ff_o2: FeedForward
    w1: Tensor
    w2: Tensor

    def named_parameters(self) -> dict[str, Tensor]:
        params = {}
        params.update(self.encoder.named_parameters("encoder"))
        params.update(self.med.named_parameters("med"))
        params.update(self.ff_o1.named_parameters("ff_o1"))
        params.update(self.ff_o2.named_parameters("ff_o2"))
        params["w1"] = self.w1
        params["w2"] = self.w2
        return params

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters().items()}

    def load_state_dict(self, arrays: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = sorted(set(params) - set(arrays))
        if missing:
            raise KeyError(f"checkpoint missing parameters: {missing[:5]}{'...' if len(missing) > 5 else ''}")
        for name, p in params.items():
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ad.ShapeError(f"parameter {name}: shape {arr.shape} != expected {p.shape}")
            p.data = arr.copy()

    def meta(self) -> dict:
        return {
            "hyper": self.hyper.to_obj(),
            "vocab": {"num_diagnoses": self.vocab.num_diagnoses,
                      "num_procedures": self.vocab.num_procedures,
                      "num_medications": self.vocab.num_medications},
        }


def build_model(hyper: Hyper, vocab: Vocab, seed: int) -> ModelState:
    """Initialize all parameters from named substreams of ``seed``."""
    hyper.validate()
    recurrent = hyper.variant == "no-ptl"
    stream = lambda prefix: (lambda label: substream(seed, f"init/{prefix}.{label}"))
    encoder = EncoderState.init(stream("encoder"), vocab.num_diagnoses, vocab.num_procedures,
                                hyper.dim, hyper.split_n, hyper.state_size, recurrent)
    med: ArmState | SimpleMedState
    if hyper.variant == "no-arm":
        med = SimpleMedState.init(stream("med"), vocab.num_medications, hyper.dim,
                                  hyper.split_n, hyper.state_size, recurrent)
    else:
        med = ArmState.init(stream("med"), vocab.num_medications, hyper.dim,
                            hyper.split_n, hyper.state_size, recurrent)
    flat = 4 * hyper.split_n * hyper.dim
    return ModelState(
        hyper=hyper,
        vocab=vocab,
        encoder=encoder,
        med=med,
        ff_o1=FeedForward.init(stream("ff_o1"), flat, 2 * hyper.dim, vocab.num_medications),
        ff_o2=FeedForward.init(stream("ff_o2"), flat, 2 * hyper.dim, hyper.dim),
        w1=Tensor(1.0, requires_grad=True),
        w2=Tensor(1.0, requires_grad=True),
    )


def build_like(model: ModelState, variant: str, seed: int) -> ModelState:
    """Fresh model with the same hyperparameters but a different variant."""
    hyper = replace(model.hyper, variant=variant)
    return build_model(hyper, model.vocab, seed)


def cosine_rows(matrix: Tensor, vector: Tensor) -> Tensor:
    """Cosine similarity of each matrix row against a vector.

    The denominator is clamped below at 1e-12 so an exactly zero row yields
    0 rather than a NaN.
    """
    rows, dim = matrix.shape
    if vector.shape != (dim,):
        raise ad.ShapeError(f"cosine_rows shapes {matrix.shape} vs {vector.shape}")
    dots = ad.reshape(matrix @ ad.reshape(vector, (dim, 1)), (rows,))
    row_norms = ad.sqrt(ad.tsum(matrix * matrix, axis=1))
    vec_norm = ad.sqrt(ad.tsum(vector * vector))
    return dots / ad.clip(row_norms * vec_norm, 1e-12, math.inf)


def forward_visit(model: ModelState, record: PatientRecord, t: int) -> Tensor:
    """Per-medication probabilities for visit ``t`` (1-based).

    Uses diagnoses/procedures of visits 1..t and medications of visits
    1..t-1, mirroring what is known when the prescription is written.
    """
    total = len(record.visits)
    if not 1 <= t <= total:
        raise InvalidVisitError(f"visit index {t} outside 1..{total} for patient {record.patient_id}")
    mode = _PTL_MODE[model.hyper.variant]
    diag_seq = [v.diagnoses for v in record.visits[:t]]
    proc_seq = [v.procedures for v in record.visits[:t]]
    med_hist = [v.medications for v in record.visits[:t - 1]]

    h_patient = encode_patient(model.encoder, diag_seq, proc_seq, mode)
    if isinstance(model.med, SimpleMedState):
        e_m = simple_med_embedding(model.med, med_hist, mode)
    else:
        e_m = responsive_embedding(model.med, med_hist, mode)

    flat = ad.reshape(h_patient, (1, h_patient.shape[0] * h_patient.shape[1]))
    o1 = ad.reshape(model.ff_o1(flat), (model.vocab.num_medications,))
    z = ad.reshape(model.ff_o2(flat), (model.hyper.dim,))
    o2 = cosine_rows(e_m, z)
    return ad.sigmoid(model.w1 * o1 + model.w2 * o2)


def multi_hot(targets, num_medications: int) -> np.ndarray:
    out = np.zeros(num_medications)
    idx = sorted(set(int(m) for m in targets))
    if idx:
        if idx[0] < 0 or idx[-1] >= num_medications:
            raise InvalidVisitError(f"target medication index out of range: {idx}")
        out[idx] = 1.0
    return out


def loss_bce(probs: Tensor, target: np.ndarray) -> Tensor:
    """Summed binary cross-entropy, one independent term per medication."""
    target = np.asarray(target, dtype=np.float64)
    if probs.shape != target.shape:
        raise ad.ShapeError(f"loss_bce shape mismatch: {probs.shape} vs {target.shape}")
    p = ad.clip(probs, PROB_EPS, 1.0 - PROB_EPS)
    pos = Tensor(target) * ad.log(p)
    negs = Tensor(1.0 - target) * ad.log(1.0 - p)
    return ad.neg(ad.tsum(pos + negs))


def loss_multi(probs: Tensor, target: np.ndarray) -> Tensor:
    """Pairwise hinge pushing every positive's score a margin of 1 above
    every negative's, averaged by vocabulary size."""
    target = np.asarray(target, dtype=np.float64)
    if probs.shape != target.shape:
        raise ad.ShapeError(f"loss_multi shape mismatch: {probs.shape} vs {target.shape}")
    pos = np.flatnonzero(target > 0.5)
    neg = np.flatnonzero(target <= 0.5)
    if pos.size == 0 or neg.size == 0:
        return Tensor(0.0)
    p_pos = ad.reshape(ad.gather_rows(probs, pos), (pos.size, 1))
    p_neg = ad.reshape(ad.gather_rows(probs, neg), (1, neg.size))
    hinge = ad.relu(1.0 - (p_pos - p_neg))
    return ad.tsum(hinge) * (1.0 / probs.shape[0])


def loss_total(probs: Tensor, target: np.ndarray, alpha_loss: float) -> Tensor:
    """Convex mix of the two losses: alpha_loss weights the BCE term."""
    if not 0.0 <= alpha_loss <= 1.0:
        raise ValueError(f"alpha_loss must be in [0, 1], got {alpha_loss}")
    return alpha_loss * loss_bce(probs, target) + (1.0 - alpha_loss) * loss_multi(probs, target)


@dataclass
class VisitPrediction:
    probs: np.ndarray
    predicted_set: frozenset[int]
    target_set: frozenset[int]


def predict(model: ModelState, record: PatientRecord) -> list[VisitPrediction]:
    """Thresholded predictions for every visit; strictly greater than delta."""
    delta = model.hyper.delta
    preds = []
    with ad.no_grad():
        for t in range(1, len(record.visits) + 1):
            probs = forward_visit(model, record, t).data
            predicted = frozenset(int(j) for j in np.flatnonzero(probs > delta))
            preds.append(VisitPrediction(
                probs=probs,
                predicted_set=predicted,
                target_set=frozenset(record.visits[t - 1].medications),
            ))
    return preds


def patient_loss(model: ModelState, record: PatientRecord) -> tuple[Tensor, list[np.ndarray]]:
    """Sum of per-visit losses over the whole record, plus captured probs."""
    loss: Tensor | None = None
    probs_seen = []
    for t in range(1, len(record.visits) + 1):
        probs = forward_visit(model, record, t)
        target = multi_hot(record.visits[t - 1].medications, model.vocab.num_medications)
        visit_loss = loss_total(probs, target, model.hyper.alpha_loss)
        loss = visit_loss if loss is None else loss + visit_loss
        probs_seen.append(probs.data)
    assert loss is not None  # records always have >= 1 visit
    return loss, probs_seen
