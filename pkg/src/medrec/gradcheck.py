"""Finite-difference gradient checks for every primitive and the full model.

Central differences at h=1e-5 on float64, compared by relative error with
the denominator clamped at 1e-4 (so gradients below ~1e-4 are effectively
compared with an absolute tolerance of 1e-8, which sits above the
cancellation noise of the difference quotient).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import PatientRecord, Visit, Vocab
from .model import Hyper, build_model, patient_loss
from .rng import substream

FD_STEP = 1e-5
REL_TOL = 1e-4
_REL_FLOOR = 1e-4


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """Max elementwise |a-b| / max(|a|, |b|, floor)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), _REL_FLOOR)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - b) / denom))


def fd_gradient(f: Callable[[], float], tensor: Tensor, h: float = FD_STEP) -> np.ndarray:
    """Central finite-difference gradient of ``f`` w.r.t. one tensor."""
    grad = np.zeros_like(tensor.data)
    flat = tensor.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        f_plus = f()
        flat[i] = orig - h
        f_minus = f()
        flat[i] = orig
        gflat[i] = (f_plus - f_minus) / (2.0 * h)
    return grad


def check_gradients(make_loss: Callable[[], Tensor], params: dict[str, Tensor],
                    h: float = FD_STEP) -> dict[str, float]:
    """Relative error between reverse-mode and finite-difference gradients."""
    loss = make_loss()
    analytic = ad.grad(loss, params)

    def value() -> float:
        with ad.no_grad():
            return make_loss().item()

    errors = {}
    for name, p in params.items():
        numeric = fd_gradient(value, p, h)
        errors[name] = relative_error(analytic[name], numeric)
    return errors


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    passed: bool
    worst_param: str = ""


def _readout(x: Tensor, rng: np.random.Generator) -> tuple[Callable[[Tensor], Tensor], np.ndarray]:
    w = rng.uniform(-1.0, 1.0, size=x.shape)
    return (lambda out: ad.tsum(out * Tensor(w))), w


def _rand(rng, shape, lo=-2.0, hi=2.0) -> Tensor:
    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True)


def _primitive_cases(rng: np.random.Generator) -> dict[str, tuple[Callable[[], Tensor], dict[str, Tensor]]]:
    """One randomized scenario per primitive; losses project through a fixed
    random weighting so every output element influences the scalar."""
    cases: dict[str, tuple[Callable[[], Tensor], dict[str, Tensor]]] = {}

    def add_case(name, params, build):
        w = Tensor(rng.uniform(-1.0, 1.0, size=build(params).shape))
        cases[name] = ((lambda: ad.tsum(build(params) * w)), params)

    add_case("matmul", {"a": _rand(rng, (3, 4)), "b": _rand(rng, (4, 2))},
             lambda p: p["a"] @ p["b"])
    add_case("softmax", {"x": _rand(rng, (3, 5))}, lambda p: ad.softmax(p["x"], axis=1))
    add_case("layer_norm",
             {"x": _rand(rng, (4, 6)), "g": _rand(rng, (6,)), "b": _rand(rng, (6,))},
             lambda p: ad.layer_norm(p["x"], p["g"], p["b"]))
    add_case("sigmoid", {"x": _rand(rng, (3, 4))}, lambda p: ad.sigmoid(p["x"]))
    add_case("exp", {"x": _rand(rng, (3, 4))}, lambda p: ad.exp(p["x"]))
    add_case("add", {"a": _rand(rng, (3, 4)), "b": _rand(rng, (3, 4))},
             lambda p: p["a"] + p["b"])
    add_case("add_row_broadcast", {"a": _rand(rng, (3, 4)), "b": _rand(rng, (4,))},
             lambda p: p["a"] + p["b"])
    add_case("mul", {"a": _rand(rng, (3, 4)), "b": _rand(rng, (3, 4))},
             lambda p: p["a"] * p["b"])
    add_case("mul_col_broadcast", {"a": _rand(rng, (3, 4)), "b": _rand(rng, (3, 1))},
             lambda p: p["a"] * p["b"])
    add_case("concat",
             {"a": _rand(rng, (2, 3)), "b": _rand(rng, (3, 3)), "c": _rand(rng, (1, 3))},
             lambda p: ad.concat([p["a"], p["b"], p["c"]]))
    add_case("mask_select", {"x": _rand(rng, (6, 3))},
             lambda p: ad.gather_rows(p["x"], [5, 0, 3, 3]))
    add_case("mean", {"x": _rand(rng, (3, 4))},
             lambda p: ad.tmean(p["x"], axis=0))
    add_case("sum", {"x": _rand(rng, (3, 4))}, lambda p: ad.tsum(p["x"], axis=1))
    add_case("sub", {"a": _rand(rng, (3, 4)), "b": _rand(rng, (3, 4))},
             lambda p: p["a"] - p["b"])

    sign = np.where(rng.random((3, 4)) < 0.5, -1.0, 1.0)
    denom = Tensor(sign * rng.uniform(0.5, 2.0, size=(3, 4)), requires_grad=True)
    add_case("div", {"a": _rand(rng, (3, 4)), "b": denom}, lambda p: p["a"] / p["b"])

    add_case("relu", {"x": _rand(rng, (3, 4))}, lambda p: ad.relu(p["x"]))
    add_case("softplus", {"x": _rand(rng, (3, 4))}, lambda p: ad.softplus(p["x"]))
    add_case("tanh", {"x": _rand(rng, (3, 4))}, lambda p: ad.tanh(p["x"]))
    add_case("sqrt", {"x": _rand(rng, (3, 4), lo=0.1, hi=4.0)}, lambda p: ad.sqrt(p["x"]))
    add_case("log", {"x": _rand(rng, (3, 4), lo=0.1, hi=4.0)}, lambda p: ad.log(p["x"]))
    add_case("clip", {"x": _rand(rng, (3, 4))}, lambda p: ad.clip(p["x"], -1.5, 1.5))
    add_case("transpose", {"x": _rand(rng, (3, 4))}, lambda p: ad.transpose(p["x"]))
    add_case("reshape", {"x": _rand(rng, (3, 4))}, lambda p: ad.reshape(p["x"], (2, 6)))
    return cases


def check_primitives(seed: int = 0, trials: int = 100) -> list[CheckResult]:
    """Randomized finite-difference check for every primitive."""
    worst: dict[str, tuple[float, str]] = {}
    for trial in range(trials):
        rng = substream(seed, f"gradcheck/primitives/{trial}")
        for name, (make_loss, params) in _primitive_cases(rng).items():
            errors = check_gradients(make_loss, params)
            bad = max(errors, key=lambda k: errors[k])
            prev = worst.get(name, (-1.0, ""))
            if errors[bad] > prev[0]:
                worst[name] = (errors[bad], bad)
    return [CheckResult(name, err, err < REL_TOL, param)
            for name, (err, param) in sorted(worst.items())]


def tiny_fixture(seed: int = 0, variant: str = "full"):
    """Small model plus a two-visit patient for end-to-end checks.

    Parameters are jittered off their initial values so the check runs at a
    generic point: zero-initialized biases fed by zero padding rows would
    otherwise sit exactly on the ReLU kink, where one-sided and
    finite-difference slopes legitimately disagree.
    """
    vocab = Vocab(num_diagnoses=7, num_procedures=5, num_medications=6)
    hyper = Hyper(dim=4, split_n=2, state_size=2, variant=variant)
    model = build_model(hyper, vocab, seed)
    jitter = substream(seed, "gradcheck/jitter")
    for p in model.named_parameters().values():
        p.data = np.asarray(p.data + jitter.uniform(-0.05, 0.05, size=p.shape))
    record = PatientRecord("fd-patient", [
        Visit(diagnoses=(0, 2), procedures=(1,), medications=(0, 3), admit_day=0),
        Visit(diagnoses=(1, 2, 4), procedures=(0, 3), medications=(0, 2, 5), admit_day=40),
    ])
    return model, record


def check_end_to_end(seed: int = 0, variant: str = "full") -> CheckResult:
    """Full-model loss gradient vs finite differences for every parameter."""
    model, record = tiny_fixture(seed, variant)
    params = model.named_parameters()
    errors = check_gradients(lambda: patient_loss(model, record)[0], params)
    worst = max(errors, key=lambda k: errors[k])
    return CheckResult(f"end_to_end[{variant}]", errors[worst],
                       errors[worst] < REL_TOL, worst)


def run_suite(seed: int = 0, trials: int = 100,
              variants: Sequence[str] = ("full",)) -> list[CheckResult]:
    results = check_primitives(seed, trials)
    for variant in variants:
        results.append(check_end_to_end(seed, variant))
    return results
