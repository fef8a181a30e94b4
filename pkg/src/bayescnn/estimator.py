"""scikit-learn style wrapper around training and Monte-Carlo prediction."""

from __future__ import annotations


import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_is_fitted

from .data import Dataset, adapt_input
from .exceptions import ContractError
from .layers import INIT_GAIN, NoiseStream
from .trainer import _EVAL_NOISE, TrainConfig, derive_seed, make_model, make_optimizer, train_epoch
from .uncertainty import NORMALIZERS, _sample_probs, decompose


def _as_images(X):
    """Coerce X to a float (N, C, H, W) array; (N, H, W) gains a channel axis."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 3:
        X = X[:, None]
    if X.ndim != 4:
        raise ValueError(f"expected images shaped (N, H, W) or (N, C, H, W), got {X.shape}")
    if len(X) == 0:
        raise ValueError("found array with 0 samples")
    if not np.all(np.isfinite(X)):
        raise ValueError("input contains NaN or infinity")
    return X


class BayesianCNNClassifier(ClassifierMixin, BaseEstimator):
    """Bayesian CNN classifier with a Gaussian posterior over every weight.

    Parameters
    ----------
    arch : {"lenet5", "alexnet", "vgg"}
    epochs, batch_size, learning_rate, mc_samples, weight_decay
        Training hyperparameters; ``mc_samples`` is the number of stochastic
        passes averaged in each minibatch objective.
    eval_T : int
        Stochastic passes used by ``predict_proba`` and ``predict_uncertainty``.
    normalizer : {"softplus_n", "softmax"}
        Output normalization used at prediction time.
    mode : {"bayesian", "frequentist"}
        ``"frequentist"`` trains the posterior means only, without the KL term.
    init_gain : float
        Mean initialization is ``N(0, gain**2 / fan_in)``.
    random_state : int
        Seeds initialization, shuffling and activation noise.

    Examples
    --------
    >>> clf = BayesianCNNClassifier(epochs=1).fit(X, y)   # doctest: +SKIP
    >>> clf.predict_uncertainty(X[:5])                    # doctest: +SKIP
    """

    def __init__(
        self,
        arch="lenet5",
        epochs=3,
        batch_size=128,
        learning_rate=0.001,
        mc_samples=10,
        weight_decay=0.0005,
        eval_T=25,
        normalizer="softplus_n",
        mode="bayesian",
        init_gain=INIT_GAIN,
        dtype="float32",
        random_state=0,
    ):
        self.arch = arch
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.mc_samples = mc_samples
        self.weight_decay = weight_decay
        self.eval_T = eval_T
        self.normalizer = normalizer
        self.mode = mode
        self.init_gain = init_gain
        self.dtype = dtype
        self.random_state = random_state

    def _config(self):
        if self.normalizer not in NORMALIZERS:
            raise ContractError(f"normalizer must be one of {NORMALIZERS}, got {self.normalizer!r}")
        return TrainConfig(
            arch=self.arch,
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            mc_samples=self.mc_samples,
            weight_decay=self.weight_decay,
            seed=int(self.random_state or 0),
            eval_T=self.eval_T,
            mode=self.mode,
            dtype=self.dtype,
            init_gain=self.init_gain,
        )

    def _adapt(self, X):
        images = _as_images(X)
        if images.shape[1:] != self.input_shape_:
            raise ValueError(f"X has image shape {images.shape[1:]}, estimator was fitted on {self.input_shape_}")
        ds = Dataset(images, np.zeros(len(images), dtype=np.int64), len(self.classes_), "X")
        return adapt_input(ds, self.model_.spec.input_shape).images

    def fit(self, X, y):
        images = _as_images(X)
        y = np.asarray(y)
        if y.ndim != 1 or len(y) != len(images):
            raise ValueError(f"y must be 1-D with {len(images)} entries, got shape {y.shape}")
        check_classification_targets(y)
        self.classes_, encoded = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need samples of at least two classes")
        config = self._config()
        in_channels = images.shape[1] if self.arch == "lenet5" else 3
        self.model_ = make_model(config, len(self.classes_), in_channels)
        self.input_shape_ = images.shape[1:]
        self.n_features_in_ = int(np.prod(self.input_shape_))
        ds = adapt_input(Dataset(images, encoded, len(self.classes_), "X"), self.model_.spec.input_shape)
        optimizer = make_optimizer(self.model_, config)
        self.history_ = []
        for epoch in range(1, config.epochs + 1):
            self.history_.append(train_epoch(self.model_, optimizer, ds, epoch, config))
        return self

    def _probs(self, X):
        """(T, N, C) normalized outputs of ``eval_T`` passes."""
        check_is_fitted(self, "model_")
        images = self._adapt(X)
        stochastic = self.mode == "bayesian"
        noise = NoiseStream(derive_seed(int(self.random_state or 0), _EVAL_NOISE))
        return _sample_probs(self.model_, images, self.eval_T, self.normalizer, noise, 1280, stochastic)

    def predict_proba(self, X):
        """Mean of the normalized outputs over ``eval_T`` stochastic passes."""
        return self._probs(X).mean(axis=0)

    def predict(self, X):
        proba = self.predict_proba(X)
        return self.classes_[np.argmax(proba, axis=1)]

    def predict_uncertainty(self, X):
        """Per-image scalar ``(aleatoric, epistemic)`` arrays (trace of each matrix over C)."""
        probs = self._probs(X)
        reports = [decompose(probs[:, j, :]) for j in range(probs.shape[1])]
        return (
            np.array([r.scalar_aleatoric for r in reports]),
            np.array([r.scalar_epistemic for r in reports]),
        )
