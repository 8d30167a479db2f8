"""Training-step statistics and the linear compute cost model.

Step statistics capture how the injected DP noise compares with the clipped
gradient signal: norms of the raw (pre-clip) mean gradient, the post-clip
mean, the realized noise draw, and a histogram of elementwise
log2(|signal| / |noise|) ratios.  The cost model estimates wall-clock
speedup when a fraction of the accelerable compute runs in low precision.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

# log2-ratio histogram bins; the outermost bins catch +/- infinity.
RATIO_BIN_EDGES = np.concatenate(([-np.inf], np.arange(-16, 17, 1.0), [np.inf]))


@dataclass(frozen=True)
class StepStats:
    step: int
    norm_inf_raw: float
    norm_2_raw: float
    norm_inf_clip: float
    norm_inf_noise: float
    median_log2_ratio: float
    hist_counts: np.ndarray

    def __post_init__(self):
        if min(self.norm_inf_raw, self.norm_2_raw, self.norm_inf_clip,
               self.norm_inf_noise) < 0:
            raise ConfigError("norms must be nonnegative")


def record_step_stats(step: int, raw_grads: np.ndarray,
                      clipped_mean: np.ndarray,
                      noise: np.ndarray) -> StepStats:
    """Summarize one optimizer step.

    ``raw_grads`` may be the (B, P) per-example matrix (reduced to its mean
    row here) or an already-averaged (P,) vector.  ``noise`` is the
    full-scale draw, before any batch-size division.
    """
    raw = np.asarray(raw_grads, dtype=np.float64)
    if raw.ndim == 2:
        raw = raw.mean(axis=0)
    g = np.asarray(clipped_mean, dtype=np.float64).ravel()
    n = np.asarray(noise, dtype=np.float64).ravel()
    if g.shape != n.shape:
        raise ConfigError(
            f"clipped mean shape {g.shape} does not match noise {n.shape}"
        )

    abs_g = np.abs(g)
    abs_n = np.abs(n)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.log2(abs_g / abs_n)
    ratio = np.where((abs_g == 0) & (abs_n == 0), 0.0, ratio)
    ratio = np.where((abs_n == 0) & (abs_g > 0), np.inf, ratio)
    ratio = np.where((abs_g == 0) & (abs_n > 0), -np.inf, ratio)

    counts, _ = np.histogram(ratio, bins=RATIO_BIN_EDGES)
    finite = ratio[np.isfinite(ratio)]
    if finite.size == ratio.size:
        median = float(np.median(ratio))
    elif np.all(np.isposinf(ratio)):
        median = np.inf
    else:
        median = float(np.median(ratio))

    return StepStats(
        step=step,
        norm_inf_raw=float(np.max(np.abs(raw))) if raw.size else 0.0,
        norm_2_raw=float(np.linalg.norm(raw)),
        norm_inf_clip=float(np.max(abs_g)) if g.size else 0.0,
        norm_inf_noise=float(np.max(abs_n)) if n.size else 0.0,
        median_log2_ratio=median,
        hist_counts=counts,
    )


@dataclass(frozen=True)
class NormAmplificationReport:
    mean_inf_ratio: float
    max_inf_ratio: float
    mean_l2_ratio: float
    max_l2_ratio: float


def norm_amplification_report(stats_num: list[StepStats],
                              stats_den: list[StepStats]
                              ) -> NormAmplificationReport:
    """Ratios of mean/max raw-gradient norms between two matched runs."""
    if len(stats_num) != len(stats_den):
        raise ConfigError(
            f"run lengths differ: {len(stats_num)} vs {len(stats_den)}"
        )
    if not stats_num:
        raise ConfigError("empty runs")
    inf_a = np.array([s.norm_inf_raw for s in stats_num])
    inf_b = np.array([s.norm_inf_raw for s in stats_den])
    l2_a = np.array([s.norm_2_raw for s in stats_num])
    l2_b = np.array([s.norm_2_raw for s in stats_den])
    return NormAmplificationReport(
        mean_inf_ratio=float(inf_a.mean() / inf_b.mean()),
        max_inf_ratio=float(inf_a.max() / inf_b.max()),
        mean_l2_ratio=float(l2_a.mean() / l2_b.mean()),
        max_l2_ratio=float(l2_a.max() / l2_b.max()),
    )


@dataclass(frozen=True)
class CostModelInput:
    t_train_baseline: float
    t_overhead: float
    t_analysis: float
    quantized_fraction: float
    speedup_factor: float = 4.0

    def __post_init__(self):
        if not 0.0 <= self.quantized_fraction <= 1.0:
            raise ConfigError(
                f"quantized fraction must be in [0, 1], got "
                f"{self.quantized_fraction}"
            )
        if min(self.t_train_baseline, self.t_overhead, self.t_analysis) < 0:
            raise ConfigError("times must be >= 0")
        if self.t_overhead > self.t_train_baseline:
            raise ConfigError(
                f"overhead {self.t_overhead} exceeds baseline "
                f"{self.t_train_baseline}"
            )
        if self.speedup_factor < 1.0:
            raise ConfigError("speedup factor must be >= 1")


def speedup_estimate(inp: CostModelInput) -> tuple[float, float]:
    """Linear cost model: runtime with partial low-precision execution.

    t_ours = t_analysis
             + (1 - p + p / factor) * (t_train_baseline - t_overhead)
             + t_overhead

    Returns ``(t_ours, t_train_baseline / t_ours)``.
    """
    p = inp.quantized_fraction
    accelerable = inp.t_train_baseline - inp.t_overhead
    t_ours = (
        inp.t_analysis
        + (1.0 - p + p / inp.speedup_factor) * accelerable
        + inp.t_overhead
    )
    return t_ours, inp.t_train_baseline / t_ours


# -- persistence -----------------------------------------------------------


def write_step_stats(path, stats: list[StepStats]) -> None:
    """One line per step: ``step norm_inf_raw norm_2_raw norm_inf_clip norm_inf_noise``."""
    with open(path, "w") as fh:
        for s in stats:
            fh.write(
                f"{s.step} {s.norm_inf_raw!r} {s.norm_2_raw!r} "
                f"{s.norm_inf_clip!r} {s.norm_inf_noise!r}\n"
            )


def write_ratio_histogram(path, stats: list[StepStats]) -> None:
    """Aggregated histogram, one line per bin: ``bin_low bin_high count``."""
    total = np.zeros(len(RATIO_BIN_EDGES) - 1, dtype=np.int64)
    for s in stats:
        total += s.hist_counts
    with open(path, "w") as fh:
        for lo, hi, count in zip(RATIO_BIN_EDGES[:-1], RATIO_BIN_EDGES[1:],
                                 total):
            fh.write(f"{lo!r} {hi!r} {int(count)}\n")
