"""Longitudinal patient representation from diagnosis and procedure codes."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .temporal import PtlState, RnnState, Stream, TemporalEncoder, encode_sequence


class CodeRangeError(ValueError):
    """Raised when a code index falls outside its vocabulary."""


def _check_codes(codes: Iterable[int], height: int, what: str) -> list[int]:
    out = sorted(set(int(c) for c in codes))
    for c in out:
        if c < 0 or c >= height:
            raise CodeRangeError(f"{what} index {c} out of range [0, {height})")
    return out


def embed_visit(codes: Iterable[int], table: Tensor) -> Tensor:
    """Sum of the table rows selected by a code set; empty set gives zeros.

    Equivalent to multiplying the multi-hot indicator of ``codes`` with the
    table, but computed by gathering only the active rows.
    """
    idx = _check_codes(codes, table.shape[0], "code")
    if not idx:
        return Tensor(np.zeros(table.shape[1]))
    return ad.tsum(ad.gather_rows(table, idx), axis=0)


def embed_sequence(code_sets: Sequence[Iterable[int]], table: Tensor) -> Tensor:
    """Embed a most-recent-first list of code sets into a T x dim matrix."""
    dim = table.shape[1]
    if not code_sets:
        return Tensor(np.zeros((0, dim)))
    rows = [ad.reshape(embed_visit(s, table), (1, dim)) for s in code_sets]
    return ad.concat(rows)


@dataclass
class EncoderState:
    """Embedding tables plus one temporal encoder per code family."""

    e_d: Tensor
    e_p: Tensor
    ptl_d: TemporalEncoder
    ptl_p: TemporalEncoder

    @classmethod
    def init(cls, stream: Stream, num_diagnoses: int, num_procedures: int,
             dim: int, n: int, state_size: int, recurrent: bool = False) -> "EncoderState":
        bound = 1.0 / np.sqrt(dim)
        sub = lambda label: (lambda inner: stream(f"{label}.{inner}"))
        if recurrent:
            ptl_d: TemporalEncoder = RnnState.init(sub("ptl_d"), dim, n)
            ptl_p: TemporalEncoder = RnnState.init(sub("ptl_p"), dim, n)
        else:
            ptl_d = PtlState.init(sub("ptl_d"), dim, n, state_size)
            ptl_p = PtlState.init(sub("ptl_p"), dim, n, state_size)
        return cls(
            e_d=Tensor(stream("e_d").uniform(-bound, bound, (num_diagnoses, dim)), requires_grad=True),
            e_p=Tensor(stream("e_p").uniform(-bound, bound, (num_procedures, dim)), requires_grad=True),
            ptl_d=ptl_d,
            ptl_p=ptl_p,
        )

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        params = {f"{prefix}.e_d": self.e_d, f"{prefix}.e_p": self.e_p}
        params.update(self.ptl_d.named_parameters(f"{prefix}.ptl_d"))
        params.update(self.ptl_p.named_parameters(f"{prefix}.ptl_p"))
        return params


def encode_patient(state: EncoderState, diag_seq: Sequence[Iterable[int]],
                   proc_seq: Sequence[Iterable[int]], mode: str = "full") -> Tensor:
    """Encode chronological diagnosis/procedure histories into 4N x dim.

    Both sequences cover visits 1..t in chronological order (current visit
    last) and must have equal length >= 1. They are reversed to
    most-recent-first before entering the temporal encoders.
    """
    if len(diag_seq) != len(proc_seq):
        raise ad.ShapeError(
            f"diagnosis/procedure sequence lengths differ: {len(diag_seq)} vs {len(proc_seq)}"
        )
    if not diag_seq:
        raise ad.ShapeError("encode_patient requires at least one visit")
    d_rows = embed_sequence(list(reversed(diag_seq)), state.e_d)
    p_rows = embed_sequence(list(reversed(proc_seq)), state.e_p)
    d_h = encode_sequence(state.ptl_d, d_rows, mode)
    p_h = encode_sequence(state.ptl_p, p_rows, mode)
    return ad.concat([d_h, p_h])
