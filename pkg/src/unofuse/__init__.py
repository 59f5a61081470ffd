"""Uncertainty-aware noisy-or fusion of per-pixel classifiers.

Building blocks: small hand-differentiated conv nets (`nnet`), per-modality
experts with stochastic-dropout sampling (`experts`), entropy-family
uncertainty metrics (`uncertainty`), a spatial temperature network
(`tempnet`), deviation-ratio calibration (`calibration`), noisy-or and
multiplicative fusion (`fusion`), a procedural two-modality benchmark with
a degradation suite (`scenegen`), and the experiment harness (`bench`).
The `uno` CLI drives the whole pipeline.
"""

from .exceptions import NumericalError, ValidationError
from .fields import (
    Image,
    LabelMap,
    LogitMap,
    ProbMap,
    TemperatureMap,
    UncertaintyMap,
    argmax_labels,
    softmax,
)
from .uncertainty import Metric
from .fusion import FusionMethod

__version__ = "0.1.0"

__all__ = [
    "Image",
    "LabelMap",
    "LogitMap",
    "ProbMap",
    "TemperatureMap",
    "UncertaintyMap",
    "Metric",
    "FusionMethod",
    "NumericalError",
    "ValidationError",
    "argmax_labels",
    "softmax",
    "__version__",
]
