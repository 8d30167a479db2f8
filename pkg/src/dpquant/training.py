"""End-to-end training loop wiring network, optimizer, scheduler, accountant.

Modes:
    baseline_fp      full-precision training (DP-SGD per the optimizer config)
    static_random_k  one random k-layer subset drawn at start, quantized in
                     every epoch
    pls_only         a fresh uniformly random k-layer subset every epoch
    full_scheduler   loss-impact measurement every n_interval epochs plus
                     impact-weighted sampling of the k-layer subset per epoch

Three independent seeded streams drive a run: one for batch sampling, one
for training-time randomness (quantization draws and DP noise), and one for
the scheduler (measurement replays, privatization noise, subset sampling).
Training halts before any epoch whose privacy events would push the total
epsilon past the configured budget.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .accounting import (PrivacyLedger, SgmEvent, analysis_fraction,
                         ledger_epsilon)
from .diagnostics import StepStats, record_step_stats
from .errors import BudgetError, ConfigError
from .network import Network, cross_entropy
from .optim import DpSgdConfig, dp_step
from .quantize import QuantGrid
from .scheduling import (ImpactTable, MeasurementRound, SchedulerConfig,
                         compute_loss_impact, measurement_due,
                         select_targets, singleton_policies, uniform_table)

MODES = ("baseline_fp", "static_random_k", "pls_only", "full_scheduler")


@dataclass(frozen=True)
class MetricsRecord:
    epoch: int
    train_loss: float
    val_accuracy: float
    eps_total: float
    eps_measure: float
    selected_layers: tuple[int, ...]
    wall_time_s: float


@dataclass
class TrainResult:
    net: Network
    history: list[MetricsRecord]
    ledger: PrivacyLedger
    step_stats: list[StepStats]
    impact_rounds: list[tuple[int, MeasurementRound]]
    skipped_batches: int = 0
    truncated_at_epoch: int | None = None


def _chunk_rows(grads: np.ndarray, physical: int) -> list[np.ndarray]:
    return [grads[i:i + physical] for i in range(0, grads.shape[0], physical)]


def validation_accuracy(net: Network, X: np.ndarray, y: np.ndarray) -> float:
    logits = net.forward_plain(X.reshape(-1, *net.input_shape))
    return float(np.mean(np.argmax(logits, axis=1) == y))


def train_loop(
    net: Network,
    train_X: np.ndarray,
    train_y: np.ndarray,
    val_X: np.ndarray,
    val_y: np.ndarray,
    dp_cfg: DpSgdConfig,
    sched_cfg: SchedulerConfig,
    grid: QuantGrid,
    mode: str,
    epochs: int,
    eps_target: float,
    delta: float,
    seed: int,
    collect_stats: bool = True,
) -> TrainResult:
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
    n_train = train_X.shape[0]
    if n_train == 0:
        raise ConfigError("training split is empty")
    q = dp_cfg.logical_batch / n_train
    if q > 1.0:
        q = 1.0
    steps_per_epoch = max(1, int(round(n_train / dp_cfg.logical_batch)))

    ss = np.random.SeedSequence(seed)
    data_key, train_key, sched_key = ss.spawn(3)
    data_rng = np.random.default_rng(data_key)
    train_rng = np.random.default_rng(train_key)
    sched_rng = np.random.default_rng(sched_key)

    ledger = PrivacyLedger(delta=delta)
    policies = singleton_policies(net)
    quantized_mode = mode != "baseline_fp"
    if quantized_mode and sched_cfg.k > len(policies):
        raise ConfigError(
            f"k={sched_cfg.k} exceeds the {len(policies)} quantizable layers"
        )
    table = uniform_table(policies, sched_cfg.ema_decay)
    static_policy: frozenset = frozenset()
    if mode == "static_random_k":
        ids = sched_rng.choice(len(policies), size=sched_cfg.k, replace=False)
        static_policy = frozenset(
            lid for j in sorted(ids) for lid in policies[j]
        )

    result = TrainResult(net=net, history=[], ledger=ledger, step_stats=[],
                         impact_rounds=[])
    global_step = 0
    shaped = lambda arr: arr.reshape(-1, *net.input_shape)

    for epoch in range(epochs):
        will_measure = (
            mode == "full_scheduler" and measurement_due(epoch, sched_cfg)
        )
        if dp_cfg.sigma > 0:  # sigma=0 runs are non-private lab baselines
            prospective = PrivacyLedger(delta=delta,
                                        events=list(ledger.events))
            prospective.record(
                SgmEvent(q=q, sigma=dp_cfg.sigma, steps=steps_per_epoch,
                         tag="train")
            )
            if will_measure and sched_cfg.sigma_measure > 0:
                prospective.record(
                    SgmEvent(q=q, sigma=sched_cfg.sigma_measure, steps=1,
                             tag="measure")
                )
            if ledger_epsilon(prospective) > eps_target:
                if epoch == 0:
                    raise BudgetError(
                        f"privacy budget {eps_target} exhausted before the "
                        f"first epoch could run"
                    )
                result.truncated_at_epoch = epoch
                break

        t0 = time.perf_counter()
        if will_measure:
            batches = []
            for _ in range(sched_cfg.n_sample):
                idx = np.flatnonzero(sched_rng.random(n_train) < q)
                if idx.size:
                    batches.append((shaped(train_X[idx]), train_y[idx]))
            if batches:
                round_ = compute_loss_impact(
                    net, table, batches, q, dp_cfg, sched_cfg, grid, ledger,
                    sched_rng,
                )
                table = round_.table
                result.impact_rounds.append((epoch, round_))

        if mode == "baseline_fp":
            policy = frozenset()
        elif mode == "static_random_k":
            policy = static_policy
        elif mode == "pls_only":
            policy = select_targets(
                uniform_table(policies, sched_cfg.ema_decay),
                sched_cfg.temperature, sched_cfg.k, sched_rng,
            )
        else:
            policy = select_targets(
                table, sched_cfg.temperature, sched_cfg.k, sched_rng
            )

        loss_sum, loss_batches = 0.0, 0
        for _ in range(steps_per_epoch):
            idx = np.flatnonzero(data_rng.random(n_train) < q)
            if idx.size == 0:
                result.skipped_batches += 1
                global_step += 1
                continue
            xb, yb = shaped(train_X[idx]), train_y[idx]
            logits, trace = net.forward(xb, policy, grid, train_rng)
            loss_sum += float(np.mean(cross_entropy(logits, yb)))
            loss_batches += 1
            grads = net.backward_per_example(trace, yb, policy, grid,
                                             train_rng)
            mean_clipped, noise = dp_step(
                net, _chunk_rows(grads, dp_cfg.physical_batch), dp_cfg,
                train_rng, expected_count=idx.size,
            )
            if collect_stats:
                result.step_stats.append(
                    record_step_stats(global_step, grads, mean_clipped, noise)
                )
            global_step += 1

        if dp_cfg.sigma > 0:
            ledger.record(
                SgmEvent(q=q, sigma=dp_cfg.sigma, steps=steps_per_epoch,
                         tag="train")
            )
        eps_total = ledger_epsilon(ledger) if ledger.events else 0.0
        measure_only = ledger.filtered("measure")
        eps_measure = (
            ledger_epsilon(measure_only) if measure_only.events else 0.0
        )
        result.history.append(
            MetricsRecord(
                epoch=epoch,
                train_loss=loss_sum / max(loss_batches, 1),
                val_accuracy=validation_accuracy(net, val_X, val_y),
                eps_total=eps_total,
                eps_measure=eps_measure,
                selected_layers=tuple(sorted(policy)),
                wall_time_s=time.perf_counter() - t0,
            )
        )
    return result


METRICS_HEADER = (
    "# dpquant-metrics v1: epoch train_loss val_accuracy eps_total "
    "eps_measure selected_layers wall_time_s"
)


def emit_metrics(records: list[MetricsRecord], path) -> str:
    """Write the line-delimited metrics file; schema named in the header."""
    try:
        fh = open(path, "w")
    except OSError as exc:
        raise ConfigError(f"cannot write metrics to {path}: {exc}") from exc
    with fh:
        fh.write(METRICS_HEADER + "\n")
        for r in records:
            layers = ",".join(map(str, r.selected_layers)) or "-"
            fh.write(
                f"{r.epoch} {r.train_loss!r} {r.val_accuracy!r} "
                f"{r.eps_total!r} {r.eps_measure!r} {layers} "
                f"{r.wall_time_s:.3f}\n"
            )
    return str(path)
