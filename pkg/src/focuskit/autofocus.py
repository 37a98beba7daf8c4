"""Learning-based autofocus control loop.

The loop holds a current position Z and a distance estimate Zd.  While the
position is unverified, the discriminator is consulted first (terminating on
an in-focus verdict) and the estimator refreshes Zd.  The two candidates
Z +- Zd are then handled by range:

* both out of range: restart at a uniformly random in-range position;
* exactly one in range: move there, unverified;
* both in range: capture both, keep the one with the smaller estimated
  distance, return it if the discriminator accepts, otherwise adopt it with
  its cached estimate and mark the state verified (its discriminator verdict
  is already known, so the next iteration skips straight to the candidates).

Time-step accounting: every capture follows a motor move (including the move
to the starting position), so time steps == captures == trajectory length.
An immediate accept is 1 time step, a one-sided move that lands in focus is
2, and a full two-candidate probe is 3.  The count is never 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class CaptureError(RuntimeError):
    """Capture failure, carrying the trajectory recorded so far."""

    def __init__(self, message, trajectory):
        super().__init__(message)
        self.trajectory = trajectory


@dataclass(frozen=True)
class AfConfig:
    z_min: float
    z_max: float
    max_iterations: int = 50
    rng_seed: int = 0

    def __post_init__(self):
        if not self.z_min < self.z_max:
            raise ValueError("z_min must be below z_max")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")


@dataclass
class AfStep:
    z: float
    verdict: bool | None      # discriminator outcome, if consulted
    estimate: float | None    # estimated distance, if consulted


@dataclass
class AfResult:
    final_z: float
    time_steps: int
    trajectory: list[AfStep]
    converged: bool

    def to_jsonable(self) -> dict:
        return {
            "final_z": self.final_z,
            "time_steps": self.time_steps,
            "converged": self.converged,
            "trajectory": [
                {"z": s.z, "verdict": s.verdict, "estimate": s.estimate}
                for s in self.trajectory
            ],
        }


def count_time_steps(result: AfResult) -> int:
    """Number of capture events; equals the trajectory length by contract."""
    return len(result.trajectory)


def run_autofocus(capture, f_e, f_d, z_init: float, cfg: AfConfig) -> AfResult:
    """Drive the focus motor until the discriminator accepts a capture.

    ``capture(z)`` returns a frame, ``f_e(frame)`` a nonnegative distance in
    motor steps, ``f_d(frame)`` an in-focus boolean.  The iteration cap turns
    a pathological estimator into a non-converged result instead of a hang.
    """
    if not (cfg.z_min <= z_init <= cfg.z_max):
        raise ValueError(f"z_init {z_init} outside [{cfg.z_min}, {cfg.z_max}]")
    rng = np.random.default_rng(cfg.rng_seed)
    trajectory: list[AfStep] = []

    def grab(z):
        try:
            return capture(z)
        except Exception as err:
            raise CaptureError(f"capture failed at z={z}: {err}", trajectory) from err

    def in_range(z):
        return cfg.z_min <= z <= cfg.z_max

    z = float(z_init)
    zd = 0.0
    verified = False
    for _ in range(cfg.max_iterations):
        if not verified:
            frame = grab(z)
            step = AfStep(z=z, verdict=None, estimate=None)
            trajectory.append(step)
            step.verdict = bool(f_d(frame))
            if step.verdict:
                return AfResult(z, len(trajectory), trajectory, converged=True)
            step.estimate = float(f_e(frame))
            zd = step.estimate
        up, down = z + zd, z - zd
        if not in_range(up) and not in_range(down):
            z = float(rng.uniform(cfg.z_min, cfg.z_max))
            verified = False
        elif in_range(up) and not in_range(down):
            z = up
            verified = False
        elif in_range(down) and not in_range(up):
            z = down
            verified = False
        else:
            cands = []
            for pos in (up, down):
                frame = grab(pos)
                step = AfStep(z=pos, verdict=None, estimate=float(f_e(frame)))
                trajectory.append(step)
                cands.append((pos, step, frame))
            if cands[0][1].estimate < cands[1][1].estimate:
                pos, step, frame = cands[0]
            else:
                pos, step, frame = cands[1]
            step.verdict = bool(f_d(frame))
            if step.verdict:
                return AfResult(pos, len(trajectory), trajectory, converged=True)
            z, zd = pos, step.estimate
            verified = True
    return AfResult(z, len(trajectory), trajectory, converged=False)
