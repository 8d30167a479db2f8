"""Scikit-learn estimator facade over the DP quantized-training loop.

``DPQuantClassifier`` exposes fit/predict/predict_proba/score plus the usual
get_params/set_params machinery, so runs compose with pipelines, grid search
and cross-validation.  All substance lives in the library modules; fit wires
them together exactly like the CLI harness does.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .accounting import analysis_fraction, ledger_epsilon
from .data import DatasetHandle, split_holdout
from .errors import ConfigError
from .network import build_network, softmax
from .optim import DpSgdConfig
from .quantize import QuantizerSpec, build_grid
from .scheduling import SchedulerConfig
from .training import MODES, train_loop


def _default_arch(n_features: int, n_classes: int) -> str:
    hidden = max(16, min(64, n_features))
    return (
        f"dense in={n_features} out={hidden}\n"
        f"relu\n"
        f"dense in={hidden} out={n_classes}\n"
    )


class DPQuantClassifier(ClassifierMixin, BaseEstimator):
    """Classifier trained with DP-SGD under a dynamic quantization schedule.

    Parameters mirror the run configuration: optimizer settings (learning
    rate, clip norm, noise multiplier, batch sizes), scheduler settings
    (layers to quantize per epoch, softmax temperature, measurement cadence
    and privatization scales), the quantizer mode, and the privacy budget.
    ``arch=None`` builds a two-layer dense network sized from the data.

    After ``fit`` the model exposes ``network_``, ``ledger_``, ``history_``
    (per-epoch metrics records), and ``epsilon_`` (total privacy spent).
    """

    def __init__(
        self,
        arch: str | None = None,
        input_shape: tuple | None = None,
        epochs: int = 10,
        learning_rate: float = 0.5,
        clip_norm: float = 1.0,
        noise_multiplier: float = 1.0,
        logical_batch: int = 256,
        physical_batch: int = 128,
        mode: str = "full_scheduler",
        k: int | None = None,
        temperature: float = 8.0,
        n_interval: int = 2,
        repetitions: int = 2,
        n_sample: int = 1,
        sigma_measure: float = 0.5,
        clip_measure: float = 0.01,
        ema_decay: float = 0.5,
        quantizer_mode: str = "stochastic",
        eps_target: float = np.inf,
        delta: float = 1e-5,
        val_fraction: float = 0.1,
        collect_stats: bool = False,
        random_state: int = 0,
    ):
        self.arch = arch
        self.input_shape = input_shape
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.clip_norm = clip_norm
        self.noise_multiplier = noise_multiplier
        self.logical_batch = logical_batch
        self.physical_batch = physical_batch
        self.mode = mode
        self.k = k
        self.temperature = temperature
        self.n_interval = n_interval
        self.repetitions = repetitions
        self.n_sample = n_sample
        self.sigma_measure = sigma_measure
        self.clip_measure = clip_measure
        self.ema_decay = ema_decay
        self.quantizer_mode = quantizer_mode
        self.eps_target = eps_target
        self.delta = delta
        self.val_fraction = val_fraction
        self.collect_stats = collect_stats
        self.random_state = random_state

    # -- sklearn API --------------------------------------------------------

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_, y_enc = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ConfigError("need at least two classes")
        self.n_features_in_ = X.shape[1]

        input_shape = (
            tuple(self.input_shape)
            if self.input_shape is not None
            else (self.n_features_in_,)
        )
        if int(np.prod(input_shape)) != self.n_features_in_:
            raise ConfigError(
                f"input_shape {input_shape} does not hold "
                f"{self.n_features_in_} features"
            )
        arch = self.arch or _default_arch(self.n_features_in_,
                                          len(self.classes_))
        net = build_network(arch, input_shape, seed=self.random_state)
        if net.n_classes != len(self.classes_):
            raise ConfigError(
                f"architecture emits {net.n_classes} logits but data has "
                f"{len(self.classes_)} classes"
            )

        batch = min(self.logical_batch, max(1, X.shape[0] - 1))
        dp_cfg = DpSgdConfig(
            eta=self.learning_rate,
            clip_norm=self.clip_norm,
            sigma=self.noise_multiplier,
            logical_batch=batch,
            physical_batch=min(self.physical_batch, batch),
        )
        n_quant = len(net.quantizable_ids)
        k = self.k if self.k is not None else max(1, n_quant // 2)
        sched_cfg = SchedulerConfig(
            k=k,
            temperature=self.temperature,
            n_sample=self.n_sample,
            n_interval=self.n_interval,
            repetitions=self.repetitions,
            sigma_measure=self.sigma_measure,
            clip_measure=self.clip_measure,
            ema_decay=self.ema_decay,
        )
        grid = build_grid(QuantizerSpec(mode=self.quantizer_mode))

        handle = DatasetHandle(X=X, y=y_enc, n_classes=len(self.classes_))
        train, val = split_holdout(handle, self.val_fraction,
                                   seed=self.random_state)
        result = train_loop(
            net, train.X, train.y, val.X, val.y, dp_cfg, sched_cfg, grid,
            mode=self.mode, epochs=self.epochs, eps_target=self.eps_target,
            delta=self.delta, seed=self.random_state,
            collect_stats=self.collect_stats,
        )
        self.network_ = result.net
        self.history_ = result.history
        self.ledger_ = result.ledger
        self.step_stats_ = result.step_stats
        self.epsilon_ = (
            ledger_epsilon(result.ledger) if result.ledger.events else 0.0
        )
        self.analysis_fraction_ = analysis_fraction(result.ledger)
        self.truncated_at_epoch_ = result.truncated_at_epoch
        return self

    def decision_function(self, X):
        check_is_fitted(self, "network_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ConfigError(
                f"X has {X.shape[1]} features; expected {self.n_features_in_}"
            )
        return self.network_.forward_plain(
            X.reshape(-1, *self.network_.input_shape)
        )

    def predict_proba(self, X):
        return softmax(self.decision_function(X))

    def predict(self, X):
        logits = self.decision_function(X)
        return self.classes_[np.argmax(logits, axis=1)]
