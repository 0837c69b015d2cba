"""Adaptive medication response: old/new drug split, decay masks, gated embedding.

A visit's prescription divides into drugs seen in any earlier visit (old)
and drugs never prescribed before (new). The two subsequences are encoded
separately, and a pair of per-drug masks — an exponentially time-decayed
usage mask and a complementary never-used indicator — gates how much each
branch contributes to the final per-medication embedding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .patients import CodeRangeError, embed_sequence
from .temporal import PtlState, RnnState, Stream, TemporalEncoder, encode_sequence

History = Sequence[Iterable[int]]


@dataclass
class MedSplit:
    """Per-visit partition of prescriptions into reused and newly seen drugs."""

    old_seq: list[frozenset[int]]
    new_seq: list[frozenset[int]]


def split_medications(history: History, num_medications: int) -> MedSplit:
    """Split each visit's drugs into previously-seen and first-time sets.

    ``history`` is chronological (visit 1 first). The first visit is all
    new; afterwards a drug is old iff it appeared in any earlier visit.
    """
    old_seq: list[frozenset[int]] = []
    new_seq: list[frozenset[int]] = []
    seen: set[int] = set()
    for i, visit in enumerate(history):
        meds = set(int(m) for m in visit)
        for m in meds:
            if m < 0 or m >= num_medications:
                raise CodeRangeError(
                    f"medication index {m} at visit {i + 1} out of range [0, {num_medications})"
                )
        old = meds & seen
        old_seq.append(frozenset(old))
        new_seq.append(frozenset(meds - old))
        seen |= meds
    return MedSplit(old_seq, new_seq)


def usage_masks(history: History, alpha: Tensor, beta: Tensor,
                num_medications: int) -> tuple[Tensor, Tensor]:
    """Time-decayed used-drug mask and binary never-used mask.

    For T - 1 history visits (current visit is T), drug j accumulates
    softplus(alpha) * exp(-softplus(beta) * (T - i)) for every visit i that
    prescribed it, so frequency and recency both raise the mask. The
    never-used mask is 1 exactly where no history visit prescribed the drug.
    Both masks stay in the graph, so gradients reach alpha and beta.
    """
    h_n = np.ones(num_medications)
    for visit in history:
        for m in visit:
            h_n[m] = 0.0
    history = list(history)
    t = len(history) + 1
    if not history:
        return Tensor(np.zeros(num_medications)), Tensor(h_n)
    sp_alpha = ad.softplus(alpha)
    sp_beta = ad.softplus(beta)
    h_o: Tensor | None = None
    for i, visit in enumerate(history, start=1):
        indicator = np.zeros(num_medications)
        indicator[list(visit)] = 1.0
        decay = ad.exp(ad.neg(sp_beta * float(t - i)))
        term = sp_alpha * decay * Tensor(indicator)
        h_o = term if h_o is None else h_o + term
    return h_o, Tensor(h_n)


@dataclass
class ArmState:
    """Parameters of the adaptive medication-response path."""

    e_m: Tensor
    ptl_old: TemporalEncoder
    ptl_new: TemporalEncoder
    alpha: Tensor
    beta: Tensor
    w_o: Tensor
    w_n: Tensor

    @classmethod
    def init(cls, stream: Stream, num_medications: int, dim: int, n: int,
             state_size: int, recurrent: bool = False) -> "ArmState":
        bound = 1.0 / math.sqrt(dim)
        sub = lambda label: (lambda inner: stream(f"{label}.{inner}"))
        if recurrent:
            ptl_old: TemporalEncoder = RnnState.init(sub("ptl_old"), dim, n)
            ptl_new: TemporalEncoder = RnnState.init(sub("ptl_new"), dim, n)
        else:
            ptl_old = PtlState.init(sub("ptl_old"), dim, n, state_size)
            ptl_new = PtlState.init(sub("ptl_new"), dim, n, state_size)
        return cls(
            e_m=Tensor(stream("e_m").uniform(-bound, bound, (num_medications, dim)), requires_grad=True),
            ptl_old=ptl_old,
            ptl_new=ptl_new,
            # Raw values; positivity comes from softplus at use. softplus(alpha)=1,
            # softplus(beta)=0.1 at initialization.
            alpha=Tensor(math.log(math.expm1(1.0)), requires_grad=True),
            beta=Tensor(math.log(math.expm1(0.1)), requires_grad=True),
            w_o=Tensor(_gate_init(stream("w_o"), 2 * n, dim), requires_grad=True),
            w_n=Tensor(_gate_init(stream("w_n"), 2 * n, dim), requires_grad=True),
        )

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        params = {f"{prefix}.e_m": self.e_m}
        params.update(self.ptl_old.named_parameters(f"{prefix}.ptl_old"))
        params.update(self.ptl_new.named_parameters(f"{prefix}.ptl_new"))
        params[f"{prefix}.alpha"] = self.alpha
        params[f"{prefix}.beta"] = self.beta
        params[f"{prefix}.w_o"] = self.w_o
        params[f"{prefix}.w_n"] = self.w_n
        return params


def _gate_init(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(rows)
    return rng.uniform(-bound, bound, size=(rows, cols))


def _branch_attention(e_m: Tensor, h: Tensor, w: Tensor, dim: int) -> Tensor:
    """Scaled attention of each medication over the encoded branch.

    Rows are softmax-normalized over the embedding axis, producing one
    per-dimension weight distribution per medication.
    """
    scores = (e_m @ ad.transpose(h)) @ w
    return ad.softmax(scores * (1.0 / math.sqrt(dim)), axis=-1)


def responsive_embedding(state: ArmState, history: History, mode: str = "full") -> Tensor:
    """Per-medication embedding adapted to the patient's usage history.

    The old/new subsequences are embedded (multi-hot sums), encoded
    most-recent-first, and turned into per-drug attention gates; the decayed
    usage mask routes previously used drugs through the old branch and the
    never-used mask routes the rest through the new branch.
    """
    num_meds, dim = state.e_m.shape
    split = split_medications(history, num_meds)
    old_rows = embed_sequence(list(reversed(split.old_seq)), state.e_m)
    new_rows = embed_sequence(list(reversed(split.new_seq)), state.e_m)
    h_old = encode_sequence(state.ptl_old, old_rows, mode)
    h_new = encode_sequence(state.ptl_new, new_rows, mode)
    q_o = _branch_attention(state.e_m, h_old, state.w_o, dim)
    q_n = _branch_attention(state.e_m, h_new, state.w_n, dim)
    h_o, h_n = usage_masks(history, state.alpha, state.beta, num_meds)
    gate = ad.reshape(h_o, (num_meds, 1)) * q_o + ad.reshape(h_n, (num_meds, 1)) * q_n
    return state.e_m * gate


@dataclass
class SimpleMedState:
    """Medication path with the adaptive response ablated.

    One temporal encoder sees the raw prescription sequence and a single
    attention gate modulates the base embedding; no split, no usage masks.
    """

    e_m: Tensor
    ptl_med: TemporalEncoder
    w_q: Tensor

    @classmethod
    def init(cls, stream: Stream, num_medications: int, dim: int, n: int,
             state_size: int, recurrent: bool = False) -> "SimpleMedState":
        bound = 1.0 / math.sqrt(dim)
        sub = lambda label: (lambda inner: stream(f"{label}.{inner}"))
        if recurrent:
            ptl_med: TemporalEncoder = RnnState.init(sub("ptl_med"), dim, n)
        else:
            ptl_med = PtlState.init(sub("ptl_med"), dim, n, state_size)
        return cls(
            e_m=Tensor(stream("e_m").uniform(-bound, bound, (num_medications, dim)), requires_grad=True),
            ptl_med=ptl_med,
            w_q=Tensor(_gate_init(stream("w_q"), 2 * n, dim), requires_grad=True),
        )

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        params = {f"{prefix}.e_m": self.e_m}
        params.update(self.ptl_med.named_parameters(f"{prefix}.ptl_med"))
        params[f"{prefix}.w_q"] = self.w_q
        return params


def simple_med_embedding(state: SimpleMedState, history: History, mode: str = "full") -> Tensor:
    """Ablated medication embedding: attention gate over the raw sequence."""
    num_meds, dim = state.e_m.shape
    for i, visit in enumerate(history):
        for m in visit:
            if m < 0 or m >= num_meds:
                raise CodeRangeError(
                    f"medication index {m} at visit {i + 1} out of range [0, {num_meds})"
                )
    rows = embed_sequence(list(reversed(list(history))), state.e_m)
    h_med = encode_sequence(state.ptl_med, rows, mode)
    q = _branch_attention(state.e_m, h_med, state.w_q, dim)
    return state.e_m * q
