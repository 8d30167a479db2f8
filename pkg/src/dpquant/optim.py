"""DP-SGD step: per-example clipping, Gaussian noising, weight update.

The update applied to the weights is

    w <- w - eta * (mean_clipped + noise / B)

where ``mean_clipped`` is the sum of clipped per-example gradients divided by
the configured logical batch size B, and ``noise`` is a single N(0, (sigma*C)^2)
vector drawn per logical batch.  Micro-batch accumulation sums clipped rows
sequentially in example order, so splitting a batch into micro-batches is
bit-identical to processing it whole.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BatchAccountingError, ConfigError
from .network import Network


@dataclass(frozen=True)
class DpSgdConfig:
    eta: float = 0.5
    clip_norm: float = 1.0
    sigma: float = 1.0
    logical_batch: int = 1024
    physical_batch: int = 128

    def __post_init__(self):
        if self.eta <= 0:
            raise ConfigError(f"eta must be > 0, got {self.eta}")
        if self.clip_norm <= 0:
            raise ConfigError(f"clip_norm must be > 0, got {self.clip_norm}")
        if self.sigma < 0:
            raise ConfigError(f"sigma must be >= 0, got {self.sigma}")
        if self.logical_batch < 1 or self.physical_batch < 1:
            raise ConfigError("batch sizes must be >= 1")
        if self.physical_batch > self.logical_batch:
            raise ConfigError(
                f"physical_batch {self.physical_batch} exceeds logical_batch "
                f"{self.logical_batch}"
            )


def clip_per_example(grads: np.ndarray, clip_norm: float) -> np.ndarray:
    """Scale each row to l2 norm at most ``clip_norm``.

    The norm is taken over the full flattened per-example gradient, all
    layers jointly.  ``clip_norm=inf`` returns the rows untouched.
    """
    if clip_norm <= 0:
        raise ConfigError(f"clip norm must be > 0, got {clip_norm}")
    g = np.asarray(grads, dtype=np.float64)
    if np.isinf(clip_norm):
        return g.copy()
    norms = np.linalg.norm(g, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    factors = np.minimum(1.0, clip_norm / safe)
    return g * factors[:, None]


def noise_vector(dim: int, scale: float, rng) -> np.ndarray:
    """IID Gaussian vector with standard deviation ``scale``.

    Scale 0 returns zeros without consuming the random stream, which keeps
    sigma=0 runs aligned with noiseless baselines.
    """
    if scale < 0:
        raise ConfigError(f"noise scale must be >= 0, got {scale}")
    if scale == 0.0:
        return np.zeros(dim)
    return rng.standard_normal(dim) * scale


class GradAccumulator:
    """Sequential sum of clipped per-example gradients across micro-batches."""

    def __init__(self, dim: int, clip_norm: float):
        self.dim = dim
        self.clip_norm = clip_norm
        self.total = np.zeros(dim)
        self.count = 0

    def add(self, grads: np.ndarray) -> None:
        g = np.asarray(grads, dtype=np.float64)
        if g.ndim != 2 or g.shape[1] != self.dim:
            raise ConfigError(
                f"gradient block shape {g.shape} does not match dim {self.dim}"
            )
        clipped = clip_per_example(g, self.clip_norm)
        for row in clipped:  # fixed order => micro-batching is bit-exact
            self.total += row
        self.count += g.shape[0]


def dp_step(net: Network, grads, cfg: DpSgdConfig, rng,
            expected_count: int | None = None):
    """One DP-SGD update from per-example gradients.

    ``grads`` is a (B, P) matrix or a list of micro-batch matrices whose rows
    concatenate to the logical batch.  Noise is drawn once, at scale
    sigma * clip_norm, after all micro-batches are accumulated.  Returns
    ``(mean_clipped, noise)`` for diagnostics; ``noise`` is the full-scale
    draw before the 1/B division used in the update.
    """
    blocks = grads if isinstance(grads, (list, tuple)) else [grads]
    acc = GradAccumulator(net.n_params, cfg.clip_norm)
    for block in blocks:
        acc.add(block)
    if expected_count is not None and acc.count != expected_count:
        raise BatchAccountingError(
            f"accumulated {acc.count} examples but the logical batch "
            f"declared {expected_count}"
        )
    mean_clipped = acc.total / cfg.logical_batch
    if cfg.sigma > 0.0 and np.isinf(cfg.clip_norm):
        raise ConfigError("sigma > 0 requires a finite clip norm")
    scale = 0.0 if cfg.sigma == 0.0 else cfg.sigma * cfg.clip_norm
    noise = noise_vector(net.n_params, scale, rng)
    if cfg.sigma == 0.0:
        direction = mean_clipped
    else:
        direction = mean_clipped + noise / cfg.logical_batch
    net.apply_update(direction, cfg.eta)
    return mean_clipped, noise


def sgd_step(net: Network, mean_grad: np.ndarray, eta: float) -> None:
    """Plain SGD update, the non-private baseline."""
    net.apply_update(np.asarray(mean_grad, dtype=np.float64), eta)
