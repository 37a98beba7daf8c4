"""Adaptive focus strategy for all-in-focus capture.

Each capture is scored into a per-patch deviation matrix (unsigned distances
from optimal focus).  From the second frame on, signs are recovered by
checking which signed hypothesis is consistent with the previous magnitudes
and the motor move between the frames; a deviation's resolved sign is
positive when the current position sits above the patch optimum.  Patches
within the depth-of-focus threshold form the in-focus mask, masks accumulate
into the activation matrix (logical OR over all history in static mode, over
a sliding window of k+1 frames in dynamic mode), and the next move is the
densest histogram bin of the still-pending signed deviations.  Because a
positive deviation means "the optimum is below", the loop moves by the
negated bin center.

At t=0 no sign information exists, so that first move's direction is a
convention: downward, flipped upward if that would leave the focus range.

Static capture terminates when every patch has been covered, when the next
position would leave the range, or when it would land within the depth of
focus of an already-visited position.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nets import NetworkWeights, global_forward
from .scene import Camera, Frame, Scene, advance, capture


class StrategyConfigError(ValueError):
    """Raised for unusable strategy settings (missing sigma, bad window)."""


@dataclass(frozen=True)
class DeviationMatrix:
    """Per-patch distances from optimal focus, in motor steps."""

    values: np.ndarray
    z: float
    t: int
    stride_out: int = 1

    def magnitudes(self) -> np.ndarray:
        return np.abs(self.values)


@dataclass(frozen=True)
class InFocusMask:
    bits: np.ndarray


@dataclass(frozen=True)
class ActivationMatrix:
    bits: np.ndarray


class SigmaMap:
    """In-focus threshold as a function of focus position.

    Built from a constant or from (z, sigma) breakpoints with linear
    interpolation; queries outside the breakpoint range are an error.
    """

    def __init__(self, zs=None, sigmas=None, constant=None):
        if constant is not None:
            self._constant = float(constant)
            self._zs = self._sigmas = None
        else:
            self._constant = None
            self._zs = np.asarray(zs, dtype=np.float64)
            self._sigmas = np.asarray(sigmas, dtype=np.float64)
            if self._zs.size < 2 or np.any(np.diff(self._zs) <= 0):
                raise StrategyConfigError("sigma breakpoints must be increasing")

    @classmethod
    def constant(cls, sigma: float) -> "SigmaMap":
        return cls(constant=sigma)

    @classmethod
    def from_pairs(cls, pairs) -> "SigmaMap":
        zs, sigmas = zip(*pairs)
        return cls(zs=zs, sigmas=sigmas)

    def __call__(self, z: float) -> float:
        if self._constant is not None:
            return self._constant
        if not (self._zs[0] <= z <= self._zs[-1]):
            raise StrategyConfigError(
                f"no in-focus threshold defined at z={z} "
                f"(covered: [{self._zs[0]}, {self._zs[-1]}])"
            )
        return float(np.interp(z, self._zs, self._sigmas))


@dataclass(frozen=True)
class StrategyConfig:
    sigma_of_z: SigmaMap | float = 20.0
    bin_width: float = 40.0
    k: int = 0
    mode: str = "static"
    max_frames: int = 32

    def __post_init__(self):
        if self.bin_width <= 0:
            raise StrategyConfigError("bin_width must be positive")
        if self.k < 0:
            raise StrategyConfigError("k must be >= 0")
        if self.mode not in ("static", "dynamic"):
            raise StrategyConfigError(f"unknown mode {self.mode!r}")

    def sigma(self, z: float) -> float:
        if isinstance(self.sigma_of_z, SigmaMap):
            return self.sigma_of_z(z)
        return float(self.sigma_of_z)


# ---------------------------------------------------------------------------
# Matrix operations
# ---------------------------------------------------------------------------

def deviation_map(global_weights: NetworkWeights, frame: Frame,
                  stride_out: int = 1) -> DeviationMatrix:
    """Unsigned deviation matrix from the sliding-window estimator."""
    values = global_forward(global_weights, frame.pixels, stride_out)
    return DeviationMatrix(values=values, z=frame.z, t=frame.t, stride_out=stride_out)


def resolve_signs(abs_p_t: DeviationMatrix, p_prev, z_prev: float,
                  z_t: float) -> DeviationMatrix:
    """Assign signs to the current magnitudes using the previous frame.

    Elementwise, keep the positive branch iff

        | ||p| - dz| - |p_prev| |  <=  | ||p| + dz| - |p_prev| |

    with dz = z_t - z_prev; otherwise negate.  Ties (including dz = 0) keep
    the positive sign.  The resolved value is positive when the current
    position is above the patch optimum.
    """
    mags = abs_p_t.magnitudes()
    prev = np.abs(p_prev.values if isinstance(p_prev, DeviationMatrix) else np.asarray(p_prev))
    if prev.shape != mags.shape:
        raise ValueError(f"shape mismatch: {prev.shape} vs {mags.shape}")
    dz = z_t - z_prev
    keep_positive = (
        np.abs(np.abs(mags - dz) - prev) <= np.abs(np.abs(mags + dz) - prev)
    )
    values = np.where(keep_positive, mags, -mags)
    return DeviationMatrix(values=values, z=z_t, t=abs_p_t.t,
                           stride_out=abs_p_t.stride_out)


def in_focus_mask(p: DeviationMatrix, sigma_of_z) -> InFocusMask:
    """Patches whose unsigned deviation is within the threshold at p.z."""
    sigma = sigma_of_z(p.z) if callable(sigma_of_z) else float(sigma_of_z)
    return InFocusMask(bits=p.magnitudes() <= sigma)


def update_activation_static(u_prev: ActivationMatrix, m_t: InFocusMask) -> ActivationMatrix:
    if u_prev.bits.shape != m_t.bits.shape:
        raise ValueError("activation and mask shapes differ")
    return ActivationMatrix(bits=u_prev.bits | m_t.bits)


def update_activation_dynamic(masks) -> ActivationMatrix:
    """OR over the supplied mask window (callers pass the last k+1 masks;
    early in a run fewer may exist and all available are used)."""
    masks = list(masks)
    if not masks:
        raise ValueError("need at least one mask")
    bits = masks[0].bits.copy()
    for m in masks[1:]:
        if m.bits.shape != bits.shape:
            raise ValueError("mask shapes differ")
        bits |= m.bits
    return ActivationMatrix(bits=bits)


def next_focus(p: DeviationMatrix, u: ActivationMatrix, bin_width: float):
    """Densest-bin center of the pending signed deviations, or None.

    Bins are centered on integer multiples of ``bin_width`` (boundary values
    round away from zero).  Ties prefer the smaller move, then the positive
    one.  Returns None when every patch is already active.
    """
    if u.bits.shape != p.values.shape:
        raise ValueError("activation shape does not match the deviation matrix")
    pending = p.values[~u.bits]
    if pending.size == 0:
        return None
    idx = (np.sign(pending) * np.floor(np.abs(pending) / bin_width + 0.5)).astype(np.int64)
    bins, counts = np.unique(idx, return_counts=True)
    order = sorted(
        range(bins.size),
        key=lambda i: (-counts[i], abs(bins[i]), 0 if bins[i] > 0 else 1),
    )
    return float(bins[order[0]] * bin_width)


def should_terminate_static(visited, next_z: float, bounds: tuple[float, float],
                            dof: float) -> bool:
    """Stop when the next position leaves the range or revisits known focus."""
    z_min, z_max = bounds
    if not (z_min <= next_z <= z_max):
        return True
    return any(abs(next_z - v) <= dof for v in visited)


# ---------------------------------------------------------------------------
# Deviation sources
# ---------------------------------------------------------------------------

class NetworkDeviationSource:
    """Sliding-window estimator as the loop's deviation source."""

    def __init__(self, global_weights: NetworkWeights, stride_out: int = 64):
        self.weights = global_weights
        self.stride_out = stride_out

    def abs_map(self, frame: Frame, scene: Scene) -> DeviationMatrix:
        return deviation_map(self.weights, frame, self.stride_out)


class OracleDeviationSource:
    """Ground-truth deviation source: per-patch majority depth from the scene.

    Used to test the strategy independently of network accuracy; patch side
    and grid stride are free so small scenes stay cheap.
    """

    def __init__(self, patch_side: int = 512, stride_out: int = 64):
        self.patch_side = patch_side
        self.stride_out = stride_out
        self._cache: dict[int, np.ndarray] = {}

    def _majority_grid(self, scene: Scene, t: int):
        snap = advance(scene, t)
        depth = snap.depth_map
        h, w = depth.shape
        side = self.patch_side
        if h < side or w < side:
            raise ValueError(f"scene {h}x{w} smaller than patch {side}")
        ys = np.arange(0, h - side + 1, self.stride_out)
        xs = np.arange(0, w - side + 1, self.stride_out)
        values = np.unique(depth)
        counts = np.zeros((values.size, ys.size, xs.size))
        for vi, val in enumerate(values):
            ii = np.pad((depth == val).astype(np.float64), ((1, 0), (1, 0)))
            ii = ii.cumsum(axis=0).cumsum(axis=1)
            counts[vi] = (
                ii[np.ix_(ys + side, xs + side)]
                - ii[np.ix_(ys, xs + side)]
                - ii[np.ix_(ys + side, xs)]
                + ii[np.ix_(ys, xs)]
            )
        self._cache[t] = (values, counts)
        return self._cache[t]

    def abs_map(self, frame: Frame, scene: Scene) -> DeviationMatrix:
        if frame.t not in self._cache:
            self._majority_grid(scene, frame.t)
        values, counts = self._cache[frame.t]
        top = counts == counts.max(axis=0, keepdims=True)
        # Majority depth; ties resolved toward the depth nearest the current z.
        dist = np.abs(values - frame.z)
        pref = np.lexsort((values, dist))
        best = np.full(counts.shape[1:], np.nan)
        for vi in pref[::-1]:
            best = np.where(top[vi], values[vi], best)
        return DeviationMatrix(
            values=np.abs(frame.z - best), z=frame.z, t=frame.t,
            stride_out=self.stride_out,
        )


# ---------------------------------------------------------------------------
# Capture loops
# ---------------------------------------------------------------------------

@dataclass
class StrategyStep:
    t: int
    z: float
    delta: float | None       # selected bin center, None when exhausted
    next_z: float | None


@dataclass
class StrategyResult:
    frames: list[Frame]
    trajectory: list[StrategyStep]
    masks: list[InFocusMask]
    activations: list[ActivationMatrix]
    deviations: list[DeviationMatrix]
    truncated: bool = False
    reason: str = ""


def _first_move(z: float, delta: float, bounds) -> float:
    """Direction convention for the sign-less first move; see module docs."""
    z_min, z_max = bounds
    down, up = z - delta, z + delta
    if z_min <= down <= z_max:
        return down
    return up


def run_static(camera: Camera, scene: Scene, z_init: float, cfg: StrategyConfig,
               source) -> StrategyResult:
    """Static all-in-focus capture: accumulate coverage until done."""
    if not scene.is_static:
        raise ValueError("run_static expects a static scene")
    return _run_strategy(camera, scene, z_init, cfg, source, n_frames=None)


def run_dynamic(camera: Camera, scene: Scene, z_init: float, cfg: StrategyConfig,
                n_frames: int, source) -> StrategyResult:
    """Dynamic capture: fixed frame budget, sliding-window activation."""
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    return _run_strategy(camera, scene, z_init, cfg, source, n_frames=n_frames)


def _run_strategy(camera, scene, z_init, cfg, source, n_frames):
    dynamic = n_frames is not None
    bounds = (camera.model.z_min, camera.model.z_max)
    dof = camera.dof_steps
    result = StrategyResult([], [], [], [], [])
    z = float(z_init)
    visited: list[float] = []
    prev_abs: DeviationMatrix | None = None
    u: ActivationMatrix | None = None
    budget = n_frames if dynamic else cfg.max_frames
    t = 0
    while t < budget:
        frame = capture(camera, scene, z, t)
        visited.append(z)
        abs_dev = source.abs_map(frame, scene)
        if t == 0:
            p = abs_dev
        else:
            p = resolve_signs(abs_dev, prev_abs, visited[-2], z)
        mask = in_focus_mask(abs_dev, cfg.sigma)
        if dynamic:
            window = result.masks[-cfg.k:] + [mask] if cfg.k > 0 else [mask]
            u = update_activation_dynamic(window)
        else:
            u = mask_to_activation(mask) if u is None else update_activation_static(u, mask)
        result.frames.append(frame)
        result.deviations.append(p)
        result.masks.append(mask)
        result.activations.append(u)

        delta = next_focus(p, u, cfg.bin_width)
        step = StrategyStep(t=t, z=z, delta=delta, next_z=None)
        result.trajectory.append(step)
        if delta is None:
            if dynamic:
                next_z = z
            else:
                result.reason = "covered"
                break
        else:
            # Positive deviation = optimum below the current position.
            next_z = z - delta if t > 0 else _first_move(z, abs(delta), bounds)
        if dynamic:
            next_z = float(np.clip(next_z, *bounds))
            step.next_z = next_z
        else:
            if should_terminate_static(visited, next_z, bounds, dof):
                result.reason = (
                    "out-of-range" if not bounds[0] <= next_z <= bounds[1]
                    else "revisit-within-dof"
                )
                break
            step.next_z = next_z
        prev_abs = abs_dev
        z = next_z
        t += 1
    else:
        if not dynamic:
            result.truncated = True
            result.reason = "frame-budget"
    return result


def mask_to_activation(mask: InFocusMask) -> ActivationMatrix:
    return ActivationMatrix(bits=mask.bits.copy())
