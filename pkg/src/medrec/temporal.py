"""Sequence encoders over visit embeddings.

The piecewise encoder splits a most-recent-first sequence into the N newest
visits (near segment) and everything older (far segment). The near segment
goes through a residual feedforward block; the far segment through a
selective state-space scan whose step size and input/output maps depend on
the current input. The two are fused by attention with the near rows as
queries, and the output is always 2N x dim regardless of input length.

Input ordering contract: row 0 is the most recent visit. The far segment is
re-reversed internally so the recurrence runs forward in time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

Stream = Callable[[str], np.random.Generator]


def _linear(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


@dataclass
class FeedForward:
    """Two-layer feedforward block with ReLU in between."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @classmethod
    def init(cls, stream: Stream, d_in: int, d_hidden: int, d_out: int) -> "FeedForward":
        return cls(
            w1=Tensor(_linear(stream("w1"), d_in, d_hidden), requires_grad=True),
            b1=ad.zeros((d_hidden,), requires_grad=True),
            w2=Tensor(_linear(stream("w2"), d_hidden, d_out), requires_grad=True),
            b2=ad.zeros((d_out,), requires_grad=True),
        )

    def __call__(self, x: Tensor) -> Tensor:
        return ad.relu(x @ self.w1 + self.b1) @ self.w2 + self.b2

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        return {
            f"{prefix}.w1": self.w1,
            f"{prefix}.b1": self.b1,
            f"{prefix}.w2": self.w2,
            f"{prefix}.b2": self.b2,
        }


@dataclass
class SelectiveSsmParams:
    """Diagonal selective state-space layer.

    The effective per-channel transition is a = -exp(A_log), strictly
    negative, so the discretized factor exp(delta * a) stays in (0, 1) for
    any positive step size.
    """

    state_size: int
    A_log: Tensor          # dim x state_size
    w_delta: Tensor        # dim x dim
    b_delta: Tensor        # dim
    w_B: Tensor            # dim x state_size
    b_B: Tensor            # state_size
    w_C: Tensor            # dim x state_size
    b_C: Tensor            # state_size
    D: Tensor              # dim, skip gain

    @classmethod
    def init(cls, stream: Stream, dim: int, state_size: int) -> "SelectiveSsmParams":
        # Transition magnitudes start in [0.1, 1]; step-size bias starts at
        # softplus^-1(0.5) so initial steps are moderate. B/C biases stay
        # zero so an all-zero input is a fixed point of the scan.
        a_init = stream("a_log").uniform(0.1, 1.0, size=(dim, state_size))
        return cls(
            state_size=state_size,
            A_log=Tensor(np.log(a_init), requires_grad=True),
            w_delta=Tensor(_linear(stream("w_delta"), dim, dim), requires_grad=True),
            b_delta=Tensor(np.full(dim, math.log(math.expm1(0.5))), requires_grad=True),
            w_B=Tensor(_linear(stream("w_b"), dim, state_size), requires_grad=True),
            b_B=ad.zeros((state_size,), requires_grad=True),
            w_C=Tensor(_linear(stream("w_c"), dim, state_size), requires_grad=True),
            b_C=ad.zeros((state_size,), requires_grad=True),
            D=Tensor(np.ones(dim), requires_grad=True),
        )

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        return {
            f"{prefix}.a_log": self.A_log,
            f"{prefix}.w_delta": self.w_delta,
            f"{prefix}.b_delta": self.b_delta,
            f"{prefix}.w_b": self.w_B,
            f"{prefix}.b_b": self.b_B,
            f"{prefix}.w_c": self.w_C,
            f"{prefix}.b_c": self.b_C,
            f"{prefix}.d": self.D,
        }


def ssm_scan(params: SelectiveSsmParams, x: Tensor) -> Tensor:
    """Run the selective recurrence over ``x`` (L x dim, ordered by time).

    Per channel c and step t:

        delta_t = softplus(x_t W_delta + b_delta)            (dim)
        abar    = exp(delta_t,c * a_c)       a = -exp(A_log)  (dim x state)
        s_t     = abar * s_{t-1} + (delta_t,c * x_t,c) B(x_t)
        y_t,c   = <C(x_t), s_t,c> + D_c * x_t,c

    with s_0 = 0. An empty input yields an empty 0 x dim output.
    """
    length, dim = x.shape
    if dim != params.w_delta.shape[0]:
        raise ad.ShapeError(f"ssm_scan width {dim} does not match parameters {params.w_delta.shape[0]}")
    if length == 0:
        return Tensor(np.zeros((0, dim)))
    a = ad.neg(ad.exp(params.A_log))  # dim x state, strictly negative
    state: Tensor | None = None
    rows = []
    for t in range(length):
        xt = ad.gather_rows(x, [t])                       # 1 x dim
        xt_flat = ad.reshape(xt, (dim,))
        delta = ad.softplus(xt @ params.w_delta + params.b_delta)   # 1 x dim
        b_t = xt @ params.w_B + params.b_B                # 1 x state
        c_t = xt @ params.w_C + params.b_C                # 1 x state
        delta_col = ad.reshape(delta, (dim, 1))
        abar = ad.exp(delta_col * a)                      # dim x state
        drive = ad.reshape(delta * xt, (dim, 1)) * b_t    # dim x state
        state = drive if state is None else abar * state + drive
        y = ad.tsum(state * c_t, axis=1) + params.D * xt_flat
        rows.append(ad.reshape(y, (1, dim)))
    return ad.concat(rows)


@dataclass
class PtlState:
    """Parameters of one piecewise temporal encoder instance."""

    n: int
    dim: int
    ff: FeedForward
    ssm: SelectiveSsmParams
    ln_near_gain: Tensor
    ln_near_bias: Tensor
    ln_fuse_gain: Tensor
    ln_fuse_bias: Tensor

    @classmethod
    def init(cls, stream: Stream, dim: int, n: int, state_size: int) -> "PtlState":
        sub = lambda label: (lambda inner: stream(f"{label}.{inner}"))
        return cls(
            n=n,
            dim=dim,
            ff=FeedForward.init(sub("ff"), dim, 4 * dim, dim),
            ssm=SelectiveSsmParams.init(sub("ssm"), dim, state_size),
            ln_near_gain=Tensor(np.ones(dim), requires_grad=True),
            ln_near_bias=ad.zeros((dim,), requires_grad=True),
            ln_fuse_gain=Tensor(np.ones(dim), requires_grad=True),
            ln_fuse_bias=ad.zeros((dim,), requires_grad=True),
        )

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        params = {}
        params.update(self.ff.named_parameters(f"{prefix}.ff"))
        params.update(self.ssm.named_parameters(f"{prefix}.ssm"))
        params[f"{prefix}.ln_near_gain"] = self.ln_near_gain
        params[f"{prefix}.ln_near_bias"] = self.ln_near_bias
        params[f"{prefix}.ln_fuse_gain"] = self.ln_fuse_gain
        params[f"{prefix}.ln_fuse_bias"] = self.ln_fuse_bias
        return params


def _padded_near(s: Tensor, n: int, dim: int) -> Tensor:
    """First min(T, n) rows of ``s``, zero-padded to exactly n rows."""
    t = s.shape[0]
    k = min(t, n)
    if k == 0:
        return Tensor(np.zeros((n, dim)))
    head = ad.gather_rows(s, list(range(k)))
    if k == n:
        return head
    return ad.concat([head, Tensor(np.zeros((n - k, dim)))])


def _fuse(query: Tensor, far: Tensor | None, gain: Tensor, bias: Tensor) -> Tensor:
    """Attention over far rows with ``query`` rows as queries, then layer norm.

    With no far rows the fused half is just the normed query, mirroring an
    empty distant history.
    """
    if far is None:
        return ad.layer_norm(query, gain, bias)
    attn = ad.softmax(query @ ad.transpose(far), axis=-1)
    return ad.layer_norm(query + attn @ far, gain, bias)


def ptl_forward(state: PtlState, s: Tensor, mode: str = "full") -> Tensor:
    """Encode a most-recent-first sequence into a 2N x dim representation.

    Modes:
      * ``full``: near rows through the residual feedforward, far rows
        through the selective scan, fused by attention.
      * ``near-only``: far segment forced empty.
      * ``far-all``: the whole sequence feeds the scan and the near rows are
        passed through raw (no feedforward processing).
    """
    t, dim = s.shape
    if dim != state.dim:
        raise ad.ShapeError(f"ptl_forward width {dim} does not match state dim {state.dim}")
    n = state.n

    if mode == "far-all":
        near = _padded_near(s, n, dim)
        far_idx = list(range(t - 1, -1, -1))  # oldest first
        far = ssm_scan(state.ssm, ad.gather_rows(s, far_idx)) if t > 0 else None
        fused = _fuse(near, far, state.ln_fuse_gain, state.ln_fuse_bias)
        return ad.concat([near, fused])

    if mode not in ("full", "near-only"):
        raise ValueError(f"unknown ptl mode {mode!r}")

    s_near = _padded_near(s, n, dim)
    h_near = ad.layer_norm(s_near + state.ff(s_near), state.ln_near_gain, state.ln_near_bias)
    far = None
    if mode == "full" and t > n:
        far_idx = list(range(t - 1, n - 1, -1))  # rows n..t-1, oldest first
        far = ssm_scan(state.ssm, ad.gather_rows(s, far_idx))
    fused = _fuse(h_near, far, state.ln_fuse_gain, state.ln_fuse_bias)
    return ad.concat([h_near, fused])


@dataclass
class RnnState:
    """Plain tanh recurrence used when the piecewise encoder is ablated.

    Emits the hidden states of the last 2N steps (most recent first),
    zero-padded to 2N rows, so downstream shapes are unchanged.
    """

    n: int
    dim: int
    w_x: Tensor
    w_h: Tensor
    b: Tensor

    @classmethod
    def init(cls, stream: Stream, dim: int, n: int) -> "RnnState":
        return cls(
            n=n,
            dim=dim,
            w_x=Tensor(_linear(stream("w_x"), dim, dim), requires_grad=True),
            w_h=Tensor(_linear(stream("w_h"), dim, dim), requires_grad=True),
            b=ad.zeros((dim,), requires_grad=True),
        )

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        return {
            f"{prefix}.w_x": self.w_x,
            f"{prefix}.w_h": self.w_h,
            f"{prefix}.b": self.b,
        }


def rnn_forward(state: RnnState, s: Tensor) -> Tensor:
    """Run the tanh recurrence over a most-recent-first sequence."""
    t, dim = s.shape
    if dim != state.dim:
        raise ad.ShapeError(f"rnn_forward width {dim} does not match state dim {state.dim}")
    out_rows = 2 * state.n
    h = Tensor(np.zeros((1, dim)))
    hidden = []
    for i in range(t - 1, -1, -1):  # oldest first
        xt = ad.gather_rows(s, [i])
        h = ad.tanh(xt @ state.w_x + h @ state.w_h + state.b)
        hidden.append(h)
    kept = hidden[-out_rows:][::-1]  # most recent first
    if len(kept) < out_rows:
        kept.append(Tensor(np.zeros((out_rows - len(kept), dim))))
    return ad.concat(kept) if kept else Tensor(np.zeros((out_rows, dim)))


TemporalEncoder = PtlState | RnnState


def encode_sequence(encoder: TemporalEncoder, s: Tensor, mode: str = "full") -> Tensor:
    """Dispatch to the piecewise encoder or its recurrent replacement."""
    if isinstance(encoder, RnnState):
        return rnn_forward(encoder, s)
    return ptl_forward(encoder, s, mode=mode)
