"""Focus-stack fusion by local-sharpness selection.

Frames are first brought to a common magnification by inverting each one's
known scale factor relative to a reference frame (the simulator's scale
model makes this exact, so no feature-based alignment is needed).  Fusion
then picks, per pixel, the frame with the highest Tenengrad energy in a
surrounding window; an optional short-range feather blends the seams.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import uniform_filter

from .baselines import sobel_energy
from .defocus import DefocusModel, imscale
from .scene import Frame

DEFAULT_WINDOW = 32
FEATHER_PX = 3


@dataclass(frozen=True)
class FocusStack:
    """Frames of one scene captured at different focus positions."""

    frames: tuple
    model: DefocusModel

    def __post_init__(self):
        if len(self.frames) < 1:
            raise ValueError("a focus stack needs at least one frame")
        shape = self.frames[0].pixels.shape
        if any(f.pixels.shape != shape for f in self.frames):
            raise ValueError("stack frames must share dimensions")


def align(stack: FocusStack, reference: int = 0) -> list[Frame]:
    """Undo per-frame magnification relative to the reference frame.

    A frame captured at z carries scale factor alpha(z_ref, z); resampling by
    its inverse restores the reference magnification.  Positions outside the
    model range are a configuration error surfaced by the model lookup.
    """
    ref_z = stack.frames[reference].z
    out = []
    for f in stack.frames:
        _, alpha = stack.model.lookup(ref_z, f.z)
        if alpha == 1.0:
            out.append(f)
        else:
            out.append(Frame(pixels=imscale(f.pixels, 1.0 / alpha), z=f.z, t=f.t))
    return out


def local_sharpness(image: np.ndarray, window: int) -> np.ndarray:
    """Windowed Tenengrad energy per pixel (sum over a window x window box)."""
    energy = np.zeros(image.shape)
    energy[1:-1, 1:-1] = sobel_energy(image)
    return uniform_filter(energy, size=window, mode="nearest") * (window * window)


def fuse(stack: FocusStack, window: int = DEFAULT_WINDOW, feather: bool = True,
         return_selection: bool = False):
    """All-in-focus image from an aligned stack.

    Each output pixel comes from the frame with the maximum local sharpness
    at that pixel (ties go to the earlier frame).  With ``feather`` the
    per-frame selection masks are box-blurred over a few pixels and the
    frames are blended by the normalized masks, which hides hard seams.
    """
    frames = [np.asarray(f.pixels, dtype=np.float64) for f in stack.frames]
    if len(frames) == 1:
        fused = frames[0].copy()
        return (fused, np.zeros(fused.shape, dtype=np.int64)) if return_selection else fused
    scores = np.stack([local_sharpness(f, window) for f in frames])
    selection = np.argmax(scores, axis=0)  # first maximum wins
    if not feather:
        fused = np.take_along_axis(np.stack(frames), selection[None], axis=0)[0]
    else:
        total = np.zeros_like(frames[0])
        fused = np.zeros_like(frames[0])
        for i, f in enumerate(frames):
            w = uniform_filter((selection == i).astype(np.float64),
                               size=FEATHER_PX, mode="nearest")
            fused += w * f
            total += w
        fused /= total
    if return_selection:
        return fused, selection
    return fused
