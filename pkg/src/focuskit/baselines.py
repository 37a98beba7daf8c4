"""Contrast-maximization autofocus baselines: Tenengrad metric plus
Fibonacci and rule-based searches.

Both searches count time steps as metric evaluations at new motor positions;
revisited positions are served from a cache and cost nothing, matching a
motor that does not move.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import convolve2d

_SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
_SOBEL_Y = _SOBEL_X.T


def sobel_energy(patch: np.ndarray) -> np.ndarray:
    """Squared Sobel gradient magnitude on the interior (valid) pixels."""
    patch = np.asarray(patch, dtype=np.float64)
    if patch.ndim != 2 or min(patch.shape) < 3:
        raise ValueError(f"patch must be 2-D and at least 3x3, got {patch.shape}")
    gx = convolve2d(patch, _SOBEL_X, mode="valid")
    gy = convolve2d(patch, _SOBEL_Y, mode="valid")
    return gx * gx + gy * gy


def tenengrad(patch: np.ndarray) -> float:
    """Sum of squared Sobel gradient magnitudes; zero for constant patches."""
    return float(sobel_energy(patch).sum())


class _Evaluator:
    """Caches metric values by position and counts first-time evaluations."""

    def __init__(self, capture, metric):
        self.capture = capture
        self.metric = metric
        self.cache: dict[float, float] = {}
        self.new_evaluations = 0

    def __call__(self, z: float) -> float:
        key = float(z)
        if key not in self.cache:
            self.cache[key] = float(self.metric(self.capture(key)))
            self.new_evaluations += 1
        return self.cache[key]

    def best_seen(self) -> float:
        return max(self.cache, key=lambda k: (self.cache[k], -k))


def fibonacci_search(capture, metric, z_min: float, z_max: float,
                     resolution: float) -> tuple[float, int]:
    """Fibonacci interval reduction assuming a unimodal metric.

    The order n is the smallest with F(n) >= width / resolution; the search
    then performs exactly n - 1 evaluations (two initial probes plus one per
    reduction), a count independent of the metric.  Probe positions are kept
    continuous so the count depends only on (width, resolution); the returned
    position is the midpoint of the final interval, rounded to a motor step.
    """
    if resolution < 1:
        raise ValueError("resolution must be >= 1 motor step")
    width = z_max - z_min
    if width <= resolution:
        return round((z_min + z_max) / 2.0), 0
    fib = [1.0, 1.0]
    while fib[-1] < width / resolution:
        fib.append(fib[-1] + fib[-2])
    m = len(fib) - 1  # fib[m] is the first Fibonacci number >= width/resolution
    ev = _Evaluator(capture, metric)
    a, b = float(z_min), float(z_max)
    x1 = a + (b - a) * fib[m - 2] / fib[m]
    x2 = a + (b - a) * fib[m - 1] / fib[m]
    f1, f2 = ev(x1), ev(x2)
    for _ in range(m - 2):
        if b - a <= resolution:
            break
        if f1 > f2:
            b, x2, f2 = x2, x1, f1
            x1 = a + b - x2
            f1 = ev(x1)
        else:
            a, x1, f1 = x1, x2, f2
            x2 = a + b - x1
            f2 = ev(x2)
    return round((a + b) / 2.0), ev.new_evaluations


@dataclass(frozen=True)
class RuleParams:
    """Step sizes of the staged rule-based sweep, in motor steps."""

    initial: float = 10.0
    coarse: float = 40.0
    fine: float = 10.0
    mid: float = 30.0

    def __post_init__(self):
        if min(self.initial, self.coarse, self.fine, self.mid) <= 0:
            raise ValueError("all step sizes must be positive")
        if self.fine > self.coarse:
            raise ValueError("fine step must not exceed the coarse step")


def rule_based_search(capture, metric, params: RuleParams, z_min: float,
                      z_max: float, z_start: float | None = None) -> tuple[float, int]:
    """Staged sweep: pick a direction with +-initial probes, march in coarse
    steps while the metric strictly rises, back up by mid on the first drop,
    then march in fine steps while it still rises.  Returns the best-seen
    position.  This is one consistent reading of the classic rule-based
    scheme; the exact historical procedure is not recoverable, so the staged
    sweep is documented behavior rather than a reproduction.
    """
    z = float(z_min if z_start is None else z_start)
    if not (z_min <= z <= z_max):
        raise ValueError(f"start {z} outside [{z_min}, {z_max}]")
    clamp = lambda v: float(min(max(v, z_min), z_max))
    ev = _Evaluator(capture, metric)

    s0 = ev(z)
    s_up = ev(clamp(z + params.initial))
    s_down = ev(clamp(z - params.initial))
    if s_up > s0 and s_up >= s_down:
        direction = 1.0
        pos, score = clamp(z + params.initial), s_up
    elif s_down > s0:
        direction = -1.0
        pos, score = clamp(z - params.initial), s_down
    else:
        # Both probes fall off: already at (or on a plateau around) the peak.
        return ev.best_seen(), ev.new_evaluations

    def march(start, start_score, step):
        pos, score = start, start_score
        while True:
            nxt = clamp(pos + direction * step)
            if nxt == pos:
                return pos, score  # pinned at a range limit
            s = ev(nxt)
            if s > score:
                pos, score = nxt, s
            else:
                return nxt, s  # first decrease (or plateau)

    stop, stop_score = march(pos, score, params.coarse)
    back = clamp(stop - direction * params.mid)
    back_score = ev(back)
    march(back, back_score, params.fine)
    return ev.best_seen(), ev.new_evaluations
