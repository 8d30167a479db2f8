"""Loss-aware dynamic selection of the layers to quantize each epoch.

The measurement routine replays a short stretch of DP-SGD training from a
snapshot, once in full precision and once per candidate policy, and takes
the difference of post-update losses as that policy's impact.  The impact
vector is clipped, noised, charged to the privacy ledger as one sampled
Gaussian event, and folded into an exponential moving average.  Selection
min-max normalizes the averaged impacts, applies a softmax with a negative
temperature so low-impact layers are preferred, and samples policies
sequentially without replacement.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .accounting import PrivacyLedger, SgmEvent
from .errors import ConfigError
from .network import Network, loss_batch, restore, snapshot
from .optim import DpSgdConfig, dp_step
from .quantize import QuantGrid


@dataclass(frozen=True)
class SchedulerConfig:
    k: int = 1
    temperature: float = 8.0
    n_sample: int = 1
    n_interval: int = 2
    repetitions: int = 2
    sigma_measure: float = 0.5
    clip_measure: float = 0.01
    ema_decay: float = 0.5

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")
        if self.n_sample < 1:
            raise ConfigError(f"n_sample must be >= 1, got {self.n_sample}")
        if self.n_interval < 1:
            raise ConfigError(f"n_interval must be >= 1, got {self.n_interval}")
        if self.repetitions < 1:
            raise ConfigError(f"repetitions must be >= 1, got {self.repetitions}")
        if self.sigma_measure < 0:
            raise ConfigError(
                f"sigma_measure must be >= 0, got {self.sigma_measure}"
            )
        if self.clip_measure <= 0:
            raise ConfigError(
                f"clip_measure must be > 0, got {self.clip_measure}"
            )
        if not 0.0 < self.ema_decay <= 1.0:
            raise ConfigError(
                f"ema_decay must be in (0, 1], got {self.ema_decay}"
            )


@dataclass(frozen=True)
class ImpactTable:
    """Per-policy exponential moving average of privatized loss differences."""

    policies: tuple[tuple[int, ...], ...]
    values: np.ndarray
    ema_decay: float = 0.5

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", v)
        if len(self.policies) != v.shape[0]:
            raise ConfigError("one impact value per policy required")
        if not np.all(np.isfinite(v)):
            raise ConfigError("impact values must be finite")

    def updated(self, privatized: np.ndarray) -> "ImpactTable":
        new = (1.0 - self.ema_decay) * self.values + self.ema_decay * privatized
        return replace(self, values=new)


def singleton_policies(net: Network) -> tuple[tuple[int, ...], ...]:
    """The canonical policy space: one single-layer policy per quantizable layer."""
    return tuple((lid,) for lid in net.quantizable_ids)


def uniform_table(policies, ema_decay: float = 0.5) -> ImpactTable:
    """No-prior-knowledge table; selection from it is uniform."""
    return ImpactTable(
        policies=tuple(tuple(p) for p in policies),
        values=np.zeros(len(policies)),
        ema_decay=ema_decay,
    )


def layer_probabilities(table: ImpactTable, temperature: float) -> np.ndarray:
    """Softmax selection weights over min-max normalized impacts.

    Identical impacts (or temperature 0) give the uniform distribution.
    """
    v = table.values
    n = v.shape[0]
    if n < 2:
        raise ConfigError("need at least 2 policies to form a distribution")
    lo, hi = float(v.min()), float(v.max())
    if hi == lo or temperature == 0.0:
        return np.full(n, 1.0 / n)
    norm = (v - lo) / (hi - lo)
    logits = -temperature * norm
    logits = logits - logits.max()
    e = np.exp(logits)
    return e / e.sum()


def select_targets(table: ImpactTable, temperature: float, m: int,
                   rng) -> frozenset:
    """Sample m policies without replacement; return the union of their layers.

    Each draw picks a remaining policy with probability proportional to its
    softmax weight among the remaining mass.
    """
    n = len(table.policies)
    if m > n:
        raise ConfigError(f"cannot sample {m} policies from {n}")
    probs = layer_probabilities(table, temperature).copy()
    chosen = []
    for _ in range(m):
        p = probs / probs.sum()
        idx = int(rng.choice(n, p=p))
        chosen.append(idx)
        probs[idx] = 0.0
    layers: set[int] = set()
    for idx in chosen:
        layers.update(table.policies[idx])
    return frozenset(layers)


def measurement_due(epoch: int, cfg: SchedulerConfig) -> bool:
    return epoch % cfg.n_interval == 0


def epoch_schedule(epoch: int, cfg: SchedulerConfig, table: ImpactTable,
                   rng) -> frozenset:
    """Quantization policy for one epoch: k layers sampled from the table.

    Callers run :func:`compute_loss_impact` first on epochs where
    :func:`measurement_due` holds; on other epochs the existing table is
    reused and the layer subset is merely resampled.
    """
    return select_targets(table, cfg.temperature, cfg.k, rng)


@dataclass(frozen=True)
class MeasurementRound:
    table: ImpactTable
    raw: np.ndarray
    privatized: np.ndarray


def compute_loss_impact(
    net: Network,
    table: ImpactTable,
    batches: list[tuple[np.ndarray, np.ndarray]],
    sample_rate: float,
    dp_cfg: DpSgdConfig,
    cfg: SchedulerConfig,
    grid: QuantGrid,
    ledger: PrivacyLedger,
    rng,
) -> MeasurementRound:
    """Measure per-policy loss impacts and fold them into the table.

    For each repetition the model is restored to the entry snapshot (weights
    and RNG state), trained with one DP-SGD update per batch, and scored by
    the mean full-precision loss over the batch examples.  The baseline run
    quantizes nothing; each policy run quantizes its layers.  Restoring the
    RNG state per replay makes all replays share noise draws, so with an
    identity quantizer every impact is exactly zero.

    The raw impact vector is clipped to l2 norm ``cfg.clip_measure``, noised
    with scale ``cfg.sigma_measure * cfg.clip_measure``, and recorded in the
    ledger as a single SGM event at ``sample_rate``.  Model parameters are
    restored before returning.
    """
    if not table.policies:
        raise ConfigError("policy set is empty")
    if not batches:
        raise ConfigError("no measurement batches supplied")
    for xb, yb in batches:
        if xb.shape[0] == 0:
            raise ConfigError("measurement batches must be non-empty")

    snap = snapshot(net, rng)

    def replay(policy: frozenset) -> float:
        restore(net, snap, rng)
        for xb, yb in batches:
            _, trace = net.forward(xb, policy, grid, rng)
            grads = net.backward_per_example(trace, yb, policy, grid, rng)
            dp_step(net, grads, dp_cfg, rng)
        total, count = 0.0, 0
        for xb, yb in batches:
            total += loss_batch(net, xb, yb) * xb.shape[0]
            count += xb.shape[0]
        return total / count

    reps = cfg.repetitions
    baseline = 0.0
    for _ in range(reps):
        baseline += replay(frozenset())
    per_policy = np.zeros(len(table.policies))
    for j, policy in enumerate(table.policies):
        acc = 0.0
        for _ in range(reps):
            acc += replay(frozenset(policy))
        per_policy[j] = acc
    restore(net, snap, rng)

    raw = per_policy / reps - baseline / reps
    norm = float(np.linalg.norm(raw))
    factor = min(1.0, cfg.clip_measure / norm) if norm > 0 else 1.0
    clipped = raw * factor
    noise_scale = cfg.sigma_measure * cfg.clip_measure
    noise = (
        rng.standard_normal(raw.shape[0]) * noise_scale
        if noise_scale > 0
        else np.zeros(raw.shape[0])
    )
    privatized = clipped + noise

    ledger.record(
        SgmEvent(q=sample_rate, sigma=cfg.sigma_measure, steps=1, tag="measure")
    )
    return MeasurementRound(
        table=table.updated(privatized), raw=raw, privatized=privatized
    )


# -- persistence -----------------------------------------------------------
# One line per (round, policy): ``epoch layer_id raw_impact privatized_impact ema``.


def append_impact_records(path, epoch: int, table: ImpactTable,
                          round_: MeasurementRound) -> None:
    with open(path, "a") as fh:
        for j, policy in enumerate(table.policies):
            lid = policy[0] if len(policy) == 1 else ",".join(map(str, policy))
            fh.write(
                f"{epoch} {lid} {round_.raw[j]!r} {round_.privatized[j]!r} "
                f"{round_.table.values[j]!r}\n"
            )
