"""Unbiased stochastic 4-bit quantization, simulated on float64 values.

The format has 1 sign bit and 3 exponent bits.  The 8 magnitude codes map to
{0} union {2**-j for j in 0..6}, so the signed level set holds 15 distinct
reals (16 codepoints counting the signed zero).  A tensor is normalized by
its max absolute value, each normalized entry is stochastically rounded to
one of its two adjacent grid levels with probabilities proportional to the
opposite gap, and the result is rescaled.  This makes the quantizer unbiased
elementwise and exactly scale invariant for power-of-two scalings under a
shared random stream.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import QuantizationError

SIGN_BITS = 1
EXPONENT_BITS = 3
MIN_POSITIVE_EXPONENT = -6


@dataclass(frozen=True)
class QuantizerSpec:
    """Bit layout plus operating mode of the quantizer.

    mode "identity" turns quantization into a pass-through; it consumes no
    random draws and is used to isolate quantization effects in experiments.
    """

    sign_bits: int = SIGN_BITS
    exponent_bits: int = EXPONENT_BITS
    mode: str = "stochastic"

    def __post_init__(self):
        if self.sign_bits != 1 or self.exponent_bits != 3:
            raise QuantizationError(
                f"unsupported bit layout: {self.sign_bits} sign + "
                f"{self.exponent_bits} exponent bits (need 1 + 3)"
            )
        if self.mode not in ("stochastic", "identity"):
            raise QuantizationError(f"unknown quantizer mode {self.mode!r}")


@dataclass(frozen=True)
class QuantGrid:
    """Sorted level set in [-1, 1], symmetric about 0, containing 0 and +/-1."""

    levels: np.ndarray
    identity: bool = False

    def __post_init__(self):
        lev = np.asarray(self.levels, dtype=np.float64)
        object.__setattr__(self, "levels", lev)
        if not np.all(np.diff(lev) > 0):
            raise QuantizationError("grid levels must be strictly increasing")


def build_grid(spec: QuantizerSpec) -> QuantGrid:
    """Materialize the level set for a quantizer spec."""
    magnitudes = [2.0**-j for j in range(0, -MIN_POSITIVE_EXPONENT + 1)]
    levels = sorted({0.0} | {m for m in magnitudes} | {-m for m in magnitudes})
    return QuantGrid(
        levels=np.array(levels, dtype=np.float64),
        identity=(spec.mode == "identity"),
    )


def _check_finite(arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise QuantizationError("input contains NaN or Inf")


_MIN_LEVEL = 2.0**MIN_POSITIVE_EXPONENT

try:
    import numba as _numba
except ImportError:  # pragma: no cover - numba is a hard dep, but degrade
    _numba = None


def _round_unit_numpy(v: np.ndarray, rng) -> np.ndarray:
    av = np.abs(v)
    _, e = np.frexp(av)
    b = np.ldexp(1.0, e)
    a = 0.5 * b
    sub = av < _MIN_LEVEL
    if np.any(sub):
        a = np.where(sub, 0.0, a)
        b = np.where(sub, _MIN_LEVEL, b)
    exact = av == a
    out = v.copy()
    off = ~exact
    if np.any(off):
        a_off = a[off]
        p_up = (av[off] - a_off) / (b[off] - a_off)
        u = rng.random(p_up.shape[0])
        mag = np.where(u < p_up, b[off], a_off)
        out[off] = np.copysign(mag, v[off])
    return out


if _numba is not None:
    import math as _math

    @_numba.njit(cache=True)
    def _count_off_grid(av, min_level):
        n_off = 0
        for i in range(av.size):
            x = av[i]
            if x < min_level:
                a = 0.0
            else:
                _, e = _math.frexp(x)
                a = _math.ldexp(0.5, e)
            if x != a:
                n_off += 1
        return n_off

    @_numba.njit(cache=True)
    def _fill_rounded(v, av, u, out, min_level):
        j = 0
        for i in range(v.size):
            x = av[i]
            if x < min_level:
                a = 0.0
                b = min_level
            else:
                _, e = _math.frexp(x)
                b = _math.ldexp(1.0, e)
                a = 0.5 * b
            if x == a:
                out[i] = v[i]
            else:
                p_up = (x - a) / (b - a)
                mag = b if u[j] < p_up else a
                j += 1
                out[i] = mag if v[i] > 0.0 else -mag

    def _round_unit_fast(v: np.ndarray, rng) -> np.ndarray:
        av = np.abs(v)
        n_off = _count_off_grid(av, _MIN_LEVEL)
        u = rng.random(n_off)
        out = np.empty_like(v)
        _fill_rounded(v, av, u, out, _MIN_LEVEL)
        return out
else:  # pragma: no cover
    _round_unit_fast = _round_unit_numpy


def _stochastic_round_unit(v: np.ndarray, rng) -> np.ndarray:
    """Round a flat array of normalized values in [-1, 1] onto the grid.

    Adjacent levels come from the binary exponent: |v| in [2^(e-1), 2^e)
    rounds between those powers, and |v| below the smallest positive level
    rounds between 0 and that level.  Entries that sit exactly on a level
    are returned as-is and consume no random draws, which keeps coupled-seed
    runs aligned across rescalings.  The compiled and the numpy
    implementations are drop-in equivalents; both consume one uniform per
    off-grid entry in flat order.
    """
    return _round_unit_fast(v, rng)


def quantize(x: np.ndarray, grid: QuantGrid, rng) -> np.ndarray:
    """Stochastically quantize a tensor with per-tensor max-abs scaling.

    Returns an array of the same shape whose entries are grid levels scaled
    by ``max(abs(x))``.  Expectation over the random stream equals ``x``.
    """
    arr = np.asarray(x, dtype=np.float64)
    _check_finite(arr)
    if grid.identity:
        return arr.copy()
    scale = np.max(np.abs(arr)) if arr.size else 0.0
    if scale == 0.0:
        return arr.copy()
    v = (arr / scale).ravel()
    q = _stochastic_round_unit(v, rng)
    return scale * q.reshape(arr.shape)


def empirical_moments(
    x: np.ndarray, grid: QuantGrid, trials: int, rng
) -> tuple[np.ndarray, float]:
    """Monte-Carlo mean of quantize(x) and the summed elementwise variance.

    Trials are vectorized: replicating the normalized tensor row-per-trial
    and rounding the flattened block consumes the random stream exactly as
    ``trials`` sequential quantize calls would.
    """
    if trials < 2:
        raise QuantizationError("trials must be >= 2")
    arr = np.asarray(x, dtype=np.float64)
    _check_finite(arr)
    flat = arr.ravel()
    n = flat.size
    if grid.identity:
        return arr.copy(), 0.0

    scale = np.max(np.abs(flat)) if n else 0.0
    if scale == 0.0:
        return arr.copy(), 0.0
    v = flat / scale

    s1 = np.zeros(n)
    s2 = np.zeros(n)
    chunk = max(1, int(2e7) // max(n, 1))
    done = 0
    while done < trials:
        t = min(chunk, trials - done)
        block = np.tile(v, t)
        q = scale * _stochastic_round_unit(block, rng).reshape(t, n)
        s1 += q.sum(axis=0)
        s2 += np.square(q).sum(axis=0)
        done += t
    mean = s1 / trials
    var = (s2 - trials * np.square(mean)) / (trials - 1)
    total_variance = float(np.sum(np.maximum(var, 0.0)))
    return mean.reshape(arr.shape), total_variance


def rounding_variance(x: np.ndarray, grid: QuantGrid) -> float:
    """Exact summed variance of quantize(x): sum of per-entry gap products."""
    arr = np.asarray(x, dtype=np.float64)
    _check_finite(arr)
    if grid.identity or arr.size == 0:
        return 0.0
    scale = np.max(np.abs(arr))
    if scale == 0.0:
        return 0.0
    v = arr.ravel() / scale
    levels = grid.levels
    hi = np.minimum(np.searchsorted(levels, v, side="left"), len(levels) - 1)
    exact = levels[hi] == v
    lo = np.maximum(hi - 1, 0)
    a = levels[lo]
    b = levels[hi]
    per_entry = np.where(exact, 0.0, (v - a) * (b - v))
    return float(scale**2 * np.sum(per_entry))
