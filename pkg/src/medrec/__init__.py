"""Sequential medication recommendation at desk scale.

Core pieces: a numpy-backed reverse-mode autodiff engine, a piecewise
temporal encoder over visit sequences (recent visits through a residual
feedforward, older ones through a selective state-space scan), an adaptive
medication-response path that splits reused from newly introduced drugs,
a dual-head recommender, and the training/evaluation/statistics tooling
around them.
"""

__version__ = "0.1.0"

from .autodiff import ComputationGraph, Tensor, grad, no_grad
from .data import GeneratorConfig, PatientRecord, Visit, Vocab
from .metrics import EvalReport, evaluate, f1, jaccard, prauc
from .model import Hyper, ModelState, VisitPrediction, build_model, forward_visit, predict
from .training import Adam, TrainConfig, train

__all__ = [
    "__version__",
    "Adam",
    "ComputationGraph",
    "EvalReport",
    "GeneratorConfig",
    "Hyper",
    "ModelState",
    "PatientRecord",
    "Tensor",
    "TrainConfig",
    "Visit",
    "VisitPrediction",
    "Vocab",
    "build_model",
    "evaluate",
    "f1",
    "forward_visit",
    "grad",
    "jaccard",
    "no_grad",
    "prauc",
    "predict",
    "train",
]
