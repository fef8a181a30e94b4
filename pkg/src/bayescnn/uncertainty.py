"""Monte-Carlo predictive probabilities and their aleatoric/epistemic split.

For T stochastic forward passes with normalized outputs p_t (rows of a T x C
matrix) the predictive covariance splits into

    aleatoric = mean_t [diag(p_t) - p_t p_t^T]
    epistemic = mean_t [(p_t - p_bar)(p_t - p_bar)^T]

The outputs are normalized either by dividing Softplus outputs by their sum
(``"softplus_n"``) or with a Softmax (``"softmax"``, the baseline).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .exceptions import ContractError
from .tensor import Tensor

NORMALIZERS = ("softplus_n", "softmax")
SIMPLEX_TOL = 1e-6


def _softplus(x, beta=1.0):
    return np.maximum(x, 0) + np.log1p(np.exp(-beta * np.abs(x))) / beta


def softplus_normalize(logits, beta=1.0):
    """Softplus outputs divided by their sum along the last axis."""
    if beta <= 0:
        raise ContractError(f"beta must be positive, got {beta}")
    logits = np.asarray(logits, dtype=np.float64)
    if logits.shape[-1] < 2:
        raise ContractError("need at least two classes")
    s = _softplus(logits, beta)
    return s / s.sum(axis=-1, keepdims=True)


def softmax(logits):
    logits = np.asarray(logits, dtype=np.float64)
    if logits.shape[-1] < 2:
        raise ContractError("need at least two classes")
    z = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def normalize(logits, kind="softplus_n", beta=1.0):
    """Differentiable row normalization of an (N, C) logit tensor."""
    if kind == "softplus_n":
        s = T.softplus(logits, beta)
        return s / T.sum_(s, axis=1, keepdims=True)
    if kind == "softmax":
        shifted = logits - Tensor(logits.data.max(axis=1, keepdims=True))
        e = T.exp(shifted)
        return e / T.sum_(e, axis=1, keepdims=True)
    raise ContractError(f"unknown normalizer {kind!r}; expected one of {NORMALIZERS}")


def normalize_array(logits, kind="softplus_n", beta=1.0):
    if kind == "softplus_n":
        return softplus_normalize(logits, beta)
    if kind == "softmax":
        return softmax(logits)
    raise ContractError(f"unknown normalizer {kind!r}; expected one of {NORMALIZERS}")


@dataclass
class PredictiveSamples:
    """T x C matrix whose row t is the normalized output of pass t."""

    probs: np.ndarray

    def __post_init__(self):
        probs = np.atleast_2d(np.asarray(self.probs, dtype=np.float64))
        if probs.ndim != 2 or probs.shape[1] < 2:
            raise ContractError(f"expected a T x C matrix with C >= 2, got {probs.shape}")
        if probs.min() < 0 or np.abs(probs.sum(axis=1) - 1).max() > SIMPLEX_TOL:
            raise ContractError("predictive samples must lie on the probability simplex")
        self.probs = probs

    @property
    def T(self):
        return self.probs.shape[0]

    @property
    def C(self):
        return self.probs.shape[1]


@dataclass
class UncertaintyReport:
    aleatoric: np.ndarray
    epistemic: np.ndarray
    mean_probs: np.ndarray
    scalar_aleatoric: float
    scalar_epistemic: float
    predicted_class: int

    # recorded with every report: how the C x C matrices become scalars
    reduction = "trace/C"


def decompose(samples):
    """Split the predictive covariance of ``samples`` into its two parts."""
    if not isinstance(samples, PredictiveSamples):
        samples = PredictiveSamples(samples)
    p = samples.probs
    n_samples, n_classes = p.shape
    # shifted mean: identical rows give exactly zero spread
    p_bar = p[0] + (p - p[0]).mean(axis=0)
    aleatoric = np.diag(p_bar) - p.T @ p / n_samples
    centered = p - p_bar
    epistemic = centered.T @ centered / n_samples
    return UncertaintyReport(
        aleatoric=aleatoric,
        epistemic=epistemic,
        mean_probs=p_bar,
        scalar_aleatoric=float(np.trace(aleatoric) / n_classes),
        scalar_epistemic=float(np.trace(epistemic) / n_classes),
        predicted_class=int(np.argmax(p_bar)),
    )


def _sample_probs(model, images, T_samples, normalizer, noise, chunk, stochastic=True):
    """Return (T, N, C) normalized outputs of T forward passes per image."""
    images = np.asarray(images)
    passes = T_samples if stochastic else 1  # deterministic passes are all identical
    out = []
    per_chunk = max(1, chunk // passes)
    with T.no_grad():
        for start in range(0, len(images), per_chunk):
            part = images[start : start + per_chunk]
            stacked = np.tile(part, (passes, 1, 1, 1))
            logits = model.forward(stacked, noise=noise, stochastic=stochastic).data
            probs = normalize_array(logits.astype(np.float64), normalizer)
            out.append(probs.reshape(passes, len(part), -1))
    probs = np.concatenate(out, axis=1)
    return probs if stochastic else np.repeat(probs, T_samples, axis=0)


def mc_predict(model, x, T=25, normalizer="softplus_n", noise=None, stochastic=True):
    """T stochastic forward passes for one input image."""
    if T < 1:
        raise ContractError(f"T must be >= 1, got {T}")
    x = np.asarray(x)
    if x.ndim == 3:
        x = x[None]
    probs = _sample_probs(model, x[:1], T, normalizer, noise, chunk=T, stochastic=stochastic)
    return PredictiveSamples(probs[:, 0, :])


@dataclass
class BatchUncertainty:
    aleatoric: float
    epistemic: float
    accuracy: float | None
    per_image_aleatoric: np.ndarray
    per_image_epistemic: np.ndarray
    predicted: np.ndarray


def batch_uncertainty(model, images, T=25, normalizer="softplus_n", noise=None, labels=None, chunk=1280, stochastic=True):
    """Average the per-image scalar uncertainties over an image set.

    ``stochastic=False`` evaluates the posterior-mean network T times, which
    makes every epistemic term zero.
    """
    if len(images) == 0:
        raise ContractError("batch_uncertainty needs at least one image")
    if T < 1:
        raise ContractError(f"T must be >= 1, got {T}")
    probs = _sample_probs(model, images, T, normalizer, noise, chunk, stochastic)
    reports = [decompose(PredictiveSamples(probs[:, j, :])) for j in range(probs.shape[1])]
    ale = np.array([r.scalar_aleatoric for r in reports])
    epi = np.array([r.scalar_epistemic for r in reports])
    pred = np.array([r.predicted_class for r in reports])
    acc = None if labels is None else float(np.mean(pred == np.asarray(labels)))
    return BatchUncertainty(float(ale.mean()), float(epi.mean()), acc, ale, epi, pred)
