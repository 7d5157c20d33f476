"""Error metrics, SNR measurement and Monte Carlo aggregation.

Sequences are ``(n_t, n_channels)`` arrays; a 1-D array is one channel.

MAPE is the per-channel ratio of summed absolute error to summed absolute
truth, averaged over channels, in percent. NRMSE divides each channel's
summed squared error by ``n_t`` times the channel's (unsquared) range,
averages over channels and takes the square root. ``nrmse_range_squared``
is the conventional variant with the squared range, reported alongside but
never in place of :func:`nrmse`.
"""

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from hybridckf.errors import DegenerateChannel, TooManyFailures

logger = logging.getLogger(__name__)

Z95 = 1.96
MAX_FAILURE_FRACTION = 0.2


def _as_channels(pred, truth):
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    if pred.ndim == 1:
        pred, truth = pred[:, None], truth[:, None]
    return pred, truth


def _ranges(truth):
    span = truth.max(axis=0) - truth.min(axis=0)
    if np.any(span == 0):
        raise DegenerateChannel("a truth channel has zero range")
    return span


def mape(pred, truth):
    pred, truth = _as_channels(pred, truth)
    denom = np.abs(truth).sum(axis=0)
    if np.any(denom == 0):
        raise DegenerateChannel("a truth channel is identically zero")
    return float(100.0 * np.mean(np.abs(pred - truth).sum(axis=0) / denom))


def nrmse(pred, truth, ranges=None):
    """NRMSE with the unsquared per-channel range; ``ranges`` overrides the spans."""
    pred, truth = _as_channels(pred, truth)
    span = _ranges(truth) if ranges is None else np.asarray(ranges, dtype=np.float64)
    n_t = truth.shape[0]
    per_channel = ((pred - truth) ** 2).sum(axis=0) / (n_t * span)
    return float(np.sqrt(per_channel.mean()))


def nrmse_range_squared(pred, truth):
    pred, truth = _as_channels(pred, truth)
    span = _ranges(truth)
    per_channel = ((pred - truth) ** 2).mean(axis=0) / span**2
    return float(np.sqrt(per_channel.mean()))


def per_channel_report(pred, truth, labels):
    """Dict ``label -> (mape, nrmse)`` for one channel at a time."""
    pred, truth = _as_channels(pred, truth)
    return {
        label: (mape(pred[:, i], truth[:, i]), nrmse(pred[:, i], truth[:, i]))
        for i, label in enumerate(labels)
    }


def windowed_nrmse(pred, truth, window):
    """NRMSE over the trailing ``window`` samples at every step.

    Ranges come from the full truth series so values are comparable with a
    whole-series noise floor. Early steps use the samples available so far.
    """
    pred, truth = _as_channels(pred, truth)
    span = _ranges(truth)
    sq = ((pred - truth) ** 2) / span
    csum = np.vstack([np.zeros(sq.shape[1]), np.cumsum(sq, axis=0)])
    k = np.arange(1, len(sq) + 1)
    lo = np.maximum(k - window, 0)
    counts = (k - lo)[:, None]
    return np.sqrt(((csum[k] - csum[lo]) / counts).mean(axis=1))


def snr_db(clean, noisy):
    """Ratio of AC power of ``clean`` to the power of ``noisy - clean``, in dB."""
    clean = np.asarray(clean, dtype=np.float64)
    noisy = np.asarray(noisy, dtype=np.float64)
    if clean.shape != noisy.shape:
        raise ValueError("clean and noisy lengths differ")
    signal = np.mean((clean - clean.mean()) ** 2)
    if signal == 0:
        raise DegenerateChannel("clean signal has no AC power")
    noise = np.mean((noisy - clean) ** 2)
    if noise == 0:
        return math.inf
    return float(10.0 * np.log10(signal / noise))


@dataclass(frozen=True)
class MetricsReport:
    mape: float
    nrmse: float
    nrmse_range_squared: float
    per_channel: dict
    n_t: int
    channels: tuple


def evaluate(pred, truth, labels=("p1", "p2", "p4", "p5")):
    return MetricsReport(
        mape=mape(pred, truth),
        nrmse=nrmse(pred, truth),
        nrmse_range_squared=nrmse_range_squared(pred, truth),
        per_channel=per_channel_report(pred, truth, labels),
        n_t=len(np.asarray(truth)),
        channels=tuple(labels),
    )


@dataclass(frozen=True)
class RunOutcome:
    """What one Monte Carlo run returns: scalar metrics and named trajectories."""

    seed: int
    metrics: dict
    trajectories: dict = field(default_factory=dict)
    extras: dict = field(default_factory=dict)


@dataclass
class MonteCarloSummary:
    n_runs: int
    seeds: list
    metric_mean: dict
    metric_ci95: dict  # name -> (low, high), mean +- 1.96 sd / sqrt(n)
    band_mean: dict
    band_low: dict  # name -> array, mean - 1.96 sd across runs
    band_high: dict
    band_sd: dict
    outcomes: list
    failures: list  # (seed, message)


def _sd(values, axis=0):
    values = np.asarray(values, dtype=np.float64)
    if values.shape[axis] < 2:
        return np.zeros_like(np.take(values, 0, axis=axis))
    return values.std(axis=axis, ddof=1)


def aggregate(outcomes, failures=()):
    """Summary statistics of successful runs, independent of run order."""
    outcomes = sorted(outcomes, key=lambda o: o.seed)
    if not outcomes:
        raise TooManyFailures("every run failed", list(failures))
    n = len(outcomes)
    metric_mean, metric_ci = {}, {}
    for name in outcomes[0].metrics:
        vals = np.array([o.metrics[name] for o in outcomes])
        mean = float(vals.mean())
        half = float(Z95 * _sd(vals) / math.sqrt(n))
        metric_mean[name] = mean
        metric_ci[name] = (mean - half, mean + half)
    band_mean, band_low, band_high, band_sd = {}, {}, {}, {}
    for name in outcomes[0].trajectories:
        stack = np.stack([o.trajectories[name] for o in outcomes])
        mean = stack.mean(axis=0)
        sd = _sd(stack)
        band_mean[name] = mean
        band_sd[name] = sd
        band_low[name] = mean - Z95 * sd
        band_high[name] = mean + Z95 * sd
    return MonteCarloSummary(
        n_runs=n,
        seeds=[o.seed for o in outcomes],
        metric_mean=metric_mean,
        metric_ci95=metric_ci,
        band_mean=band_mean,
        band_low=band_low,
        band_high=band_high,
        band_sd=band_sd,
        outcomes=outcomes,
        failures=sorted(failures),
    )


def _guarded(run, seed):
    try:
        return seed, run(seed), None
    except Exception as exc:  # failures are reported, not fatal, up to the threshold
        return seed, None, f"{type(exc).__name__}: {exc}"


def monte_carlo(run, seeds, jobs=1):
    """Execute ``run(seed) -> RunOutcome`` for every seed and aggregate.

    With ``jobs > 1`` runs go to a process pool (``run`` must be picklable).
    Raises :class:`TooManyFailures` when more than 20% of the runs raise.
    """
    seeds = list(seeds)
    if len(seeds) < 1:
        raise ValueError("need at least one seed")
    if jobs > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_guarded, [run] * len(seeds), seeds))
    else:
        results = [_guarded(run, s) for s in seeds]
    outcomes = [res for _, res, err in results if err is None]
    failures = [(seed, err) for seed, _, err in results if err is not None]
    for seed, err in failures:
        logger.warning("run with seed %d failed: %s", seed, err)
    if len(failures) > MAX_FAILURE_FRACTION * len(seeds):
        raise TooManyFailures(f"{len(failures)} of {len(seeds)} runs failed", failures)
    return aggregate(outcomes, failures)
