"""Bayesian CNNs trained by Bayes by Backprop with Softplus-normalized uncertainty estimates."""

__version__ = "0.1.0"

from .estimator import BayesianCNNClassifier
from .models import build
from .tensor import Tensor
from .uncertainty import decompose, mc_predict

__all__ = ["BayesianCNNClassifier", "Tensor", "build", "decompose", "mc_predict"]
