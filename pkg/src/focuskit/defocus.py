"""Defocus optics model.

A defocused capture is modelled as the in-focus image, linearized by undoing
gamma correction, convolved with a blur kernel, rescaled about the image
center (focus breathing), and re-encoded:

    linear(defocused) = imscale(linear(sharp) * h, alpha)

The blur kernel h (disk or Gaussian) and the magnification alpha both depend
on the pair (optimal focus position Z0, sensor position Zi), so the model is
represented as a calibrated 2-D grid over those motor-step axes.  Calibration
recovers (h, alpha) per grid node by brute-force sweep: blur a known in-focus
patch with each candidate kernel, trim the convolution-contaminated border,
rescale with each candidate alpha, and score the result by its best
zero-normalized cross-correlation against the defocused frame.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import map_coordinates
from scipy.signal import fftconvolve


class CalibrationError(RuntimeError):
    """Raised when a blur/scale calibration cannot be scored."""


# ---------------------------------------------------------------------------
# Gamma handling
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GammaCurve:
    """Power-law transfer curve of the camera ISP; exponent must be positive."""

    gamma: float = 2.2

    def __post_init__(self):
        if not (self.gamma > 0 and math.isfinite(self.gamma)):
            raise ValueError(f"gamma must be a positive finite number, got {self.gamma}")


def _check_unit_range(image: np.ndarray, name: str) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    bad = ~((image >= 0.0) & (image <= 1.0))
    if bad.any():
        y, x = np.argwhere(bad)[0]
        raise ValueError(
            f"{name} pixel out of [0, 1] at (y={y}, x={x}): {image[y, x]!r}"
        )
    return image


def gamma_inverse(image: np.ndarray, curve: GammaCurve) -> np.ndarray:
    """Undo gamma correction: display-light [0,1] to linear light."""
    image = _check_unit_range(image, "image")
    return np.power(image, curve.gamma)


def gamma_forward(image: np.ndarray, curve: GammaCurve) -> np.ndarray:
    """Apply gamma correction: linear light [0,1] to display light."""
    image = _check_unit_range(image, "image")
    return np.power(image, 1.0 / curve.gamma)


# ---------------------------------------------------------------------------
# Blur kernels
# ---------------------------------------------------------------------------

# Subpixel grid used to rasterize the disk indicator; 4x4 area samples per
# pixel give a smooth radius-to-kernel map for sub-pixel radii.
_DISK_SUBSAMPLES = 4


@dataclass(frozen=True)
class BlurKernel:
    """Normalized 2-D blur kernel with odd, centered support."""

    kind: str          # "disk" or "gaussian"
    parameter: float   # defocus radius r or standard deviation sigma, pixels
    taps: np.ndarray = field(repr=False)

    @property
    def radius(self) -> int:
        return (self.taps.shape[0] - 1) // 2

    @property
    def is_identity(self) -> bool:
        return self.taps.shape == (1, 1)


def _identity_kernel(kind: str, parameter: float) -> BlurKernel:
    return BlurKernel(kind=kind, parameter=parameter, taps=np.ones((1, 1)))


def make_disk_kernel(r: float) -> BlurKernel:
    """Rasterize a uniform disk of radius ``r`` pixels.

    Each tap is the fraction of its 4x4 subpixel area samples falling inside
    the disk, then the kernel is normalized to unit sum.  Radii below half a
    pixel collapse to the identity kernel.
    """
    if r < 0 or not math.isfinite(r):
        raise ValueError(f"disk radius must be >= 0, got {r}")
    if r < 0.5:
        return _identity_kernel("disk", r)
    half = math.ceil(r)
    axis = np.arange(-half, half + 1, dtype=np.float64)
    sub = (np.arange(_DISK_SUBSAMPLES) + 0.5) / _DISK_SUBSAMPLES - 0.5
    # Coordinates of every subsample center along one axis: (taps, sub)
    coords = axis[:, None] + sub[None, :]
    d2 = coords[:, None, :, None] ** 2 + coords[None, :, None, :] ** 2
    taps = (d2 <= r * r).mean(axis=(2, 3))
    total = taps.sum()
    if total <= 0:
        return _identity_kernel("disk", r)
    return BlurKernel(kind="disk", parameter=r, taps=taps / total)


def make_gaussian_kernel(sigma: float) -> BlurKernel:
    """Sampled isotropic Gaussian, truncated at 3*sigma and renormalized."""
    if sigma < 0 or not math.isfinite(sigma):
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    half = math.ceil(3.0 * sigma)
    if sigma == 0 or half == 0:
        return _identity_kernel("gaussian", sigma)
    axis = np.arange(-half, half + 1, dtype=np.float64)
    g = np.exp(-(axis[:, None] ** 2 + axis[None, :] ** 2) / (2.0 * sigma * sigma))
    return BlurKernel(kind="gaussian", parameter=sigma, taps=g / g.sum())


def make_kernel(kind: str, parameter: float) -> BlurKernel:
    if kind == "disk":
        return make_disk_kernel(parameter)
    if kind == "gaussian":
        return make_gaussian_kernel(parameter)
    raise ValueError(f"unknown kernel kind {kind!r}")


def convolve_replicate(image: np.ndarray, kernel: BlurKernel) -> np.ndarray:
    """Convolve with replicate-edge padding, preserving the image size.

    Replicate padding avoids the dark frame a zero pad would introduce, which
    would otherwise bias correlation scores near the borders.
    """
    image = np.asarray(image, dtype=np.float64)
    if kernel.is_identity:
        return image.copy()
    m = kernel.radius
    padded = np.pad(image, m, mode="edge")
    return fftconvolve(padded, kernel.taps, mode="valid")


def imscale(image: np.ndarray, alpha: float) -> np.ndarray:
    """Rescale by ``alpha`` about the image center, keeping the frame size.

    Implemented as inverse-mapped bilinear sampling; samples falling outside
    the frame (alpha < 1) clamp to the nearest edge pixel.
    """
    if alpha <= 0 or not math.isfinite(alpha):
        raise ValueError(f"scale factor must be > 0, got {alpha}")
    image = np.asarray(image, dtype=np.float64)
    if alpha == 1.0:
        return image.copy()
    h, w = image.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy = cy + (np.arange(h) - cy) / alpha
    xx = cx + (np.arange(w) - cx) / alpha
    grid = np.meshgrid(yy, xx, indexing="ij")
    return map_coordinates(image, grid, order=1, mode="nearest")


def synthesize_defocus(
    sharp: np.ndarray,
    kernel: BlurKernel,
    alpha: float,
    curve: GammaCurve,
) -> np.ndarray:
    """Render a defocused view of a sharp display-light image.

    The blur and the magnification act in linear light; the result is
    re-encoded through the gamma curve and has the input dimensions.
    """
    if alpha <= 0 or not math.isfinite(alpha):
        raise ValueError(f"scale factor must be > 0, got {alpha}")
    sharp = np.asarray(sharp, dtype=np.float64)
    if sharp.size == 0:
        raise ValueError("empty image")
    linear = gamma_inverse(sharp, curve)
    blurred = convolve_replicate(linear, kernel)
    scaled = imscale(blurred, alpha)
    # FFT round-off can leave values epsilon outside [0, 1].
    return gamma_forward(np.clip(scaled, 0.0, 1.0), curve)


# ---------------------------------------------------------------------------
# Calibration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CalibrationConfig:
    """Sweep grids and patch geometry for the brute-force calibration."""

    r_candidates: tuple[float, ...]
    alpha_candidates: tuple[float, ...]
    outer_patch: int = 256
    inner_margin: int = 32
    search_window: int | None = None   # max NCC translation; None = full frame
    patch_origin: tuple[int, int] | None = None  # (row, col); None = centered

    def __post_init__(self):
        if not self.r_candidates or not self.alpha_candidates:
            raise ValueError("candidate grids must be non-empty")
        if min(self.r_candidates) < 0:
            raise ValueError("blur parameters must be >= 0")
        if min(self.alpha_candidates) <= 0:
            raise ValueError("scale factors must be > 0")
        inner = self.outer_patch - 2 * self.inner_margin
        if inner < 64:
            raise ValueError("inner patch must be at least 64 px per side")
        need = math.ceil(max(self.r_candidates))
        a_min = min(self.alpha_candidates)
        if a_min < 1.0:
            # Minification samples beyond the inner patch; the margin must
            # still keep those samples inside the uncontaminated interior.
            need += math.ceil((inner / 2.0) * (1.0 / a_min - 1.0))
        if self.inner_margin < need:
            raise ValueError(
                f"inner_margin {self.inner_margin} too small for the sweep; "
                f"need at least {need}"
            )

    @property
    def inner_patch(self) -> int:
        return self.outer_patch - 2 * self.inner_margin


def _scaled_inner_template(blurred_outer: np.ndarray, margin: int, alpha: float) -> np.ndarray:
    """Sample the rescaled blurred patch on the inner-patch pixel grid.

    Scaling is anchored at the inner-patch center so that, when the patch is
    centered in the frame, the template aligns with the frame-centered
    magnification of the capture path sample for sample.
    """
    side = blurred_outer.shape[0] - 2 * margin
    c = margin + (side - 1) / 2.0
    q = np.arange(side, dtype=np.float64)
    coords = c + (q - (side - 1) / 2.0) / alpha
    grid = np.meshgrid(coords, coords, indexing="ij")
    return map_coordinates(blurred_outer, grid, order=1, mode="nearest")


def zncc_best_match(
    search: np.ndarray,
    template: np.ndarray,
    origin_hint: tuple[int, int] | None = None,
    window: int | None = None,
) -> tuple[float, tuple[int, int]]:
    """Maximum zero-normalized cross-correlation over all template placements.

    Returns (best score, (row, col) of the best window origin).  ``window``
    limits the search to origins within that many pixels of ``origin_hint``.
    Constant windows score 0; a constant template is an error.
    """
    search = np.asarray(search, dtype=np.float64)
    template = np.asarray(template, dtype=np.float64)
    th, tw = template.shape
    t0 = template - template.mean()
    t_norm = np.sqrt((t0 * t0).sum())
    if t_norm == 0:
        raise CalibrationError("constant template: correlation undefined")
    cross = fftconvolve(search, t0[::-1, ::-1], mode="valid")
    ii = np.cumsum(np.cumsum(np.pad(search, ((1, 0), (1, 0))), axis=0), axis=1)
    ii2 = np.cumsum(np.cumsum(np.pad(search * search, ((1, 0), (1, 0))), axis=0), axis=1)

    def window_sums(table):
        return (
            table[th:, tw:]
            - table[:-th, tw:]
            - table[th:, :-tw]
            + table[:-th, :-tw]
        )

    s1 = window_sums(ii)
    s2 = window_sums(ii2)
    var = np.maximum(s2 - s1 * s1 / (th * tw), 0.0)
    denom = np.sqrt(var) * t_norm
    with np.errstate(divide="ignore", invalid="ignore"):
        scores = np.where(denom > 0, cross / denom, 0.0)
    if window is not None and origin_hint is not None:
        mask = np.full(scores.shape, -np.inf)
        y0 = max(0, origin_hint[0] - window)
        x0 = max(0, origin_hint[1] - window)
        y1 = min(scores.shape[0], origin_hint[0] + window + 1)
        x1 = min(scores.shape[1], origin_hint[1] + window + 1)
        if y0 >= y1 or x0 >= x1:
            raise CalibrationError("search window excludes every placement")
        mask[y0:y1, x0:x1] = scores[y0:y1, x0:x1]
        scores = mask
    flat = int(np.argmax(scores))
    loc = np.unravel_index(flat, scores.shape)
    return float(scores[loc]), (int(loc[0]), int(loc[1]))


def calibrate_pair(
    frame_at_z0: np.ndarray,
    frame_at_zi: np.ndarray,
    cfg: CalibrationConfig,
    curve: GammaCurve,
    kernel_kind: str = "disk",
) -> tuple[float, float, float]:
    """Recover (blur parameter, alpha, score) explaining frame_at_zi.

    Every candidate pair is scored; ties prefer the smaller blur parameter,
    then the scale factor closest to 1, so the least-blurred explanation wins.
    """
    frame_at_z0 = np.asarray(frame_at_z0, dtype=np.float64)
    frame_at_zi = np.asarray(frame_at_zi, dtype=np.float64)
    if frame_at_z0.shape != frame_at_zi.shape:
        raise ValueError("frames must share dimensions")
    lin0 = gamma_inverse(frame_at_z0, curve)
    lini = gamma_inverse(frame_at_zi, curve)
    h, w = lin0.shape
    outer = cfg.outer_patch
    if cfg.patch_origin is None:
        oy, ox = (h - outer) // 2, (w - outer) // 2
    else:
        oy, ox = cfg.patch_origin
    if oy < 0 or ox < 0 or oy + outer > h or ox + outer > w:
        raise ValueError("outer patch does not fit in the frame")
    patch = lin0[oy : oy + outer, ox : ox + outer]
    inner = patch[cfg.inner_margin : -cfg.inner_margin, cfg.inner_margin : -cfg.inner_margin]
    if np.ptp(inner) == 0:
        raise CalibrationError("constant inner patch: correlation undefined")
    hint = (oy + cfg.inner_margin, ox + cfg.inner_margin)

    best = None  # (score, r, alpha)
    # Candidate order implements the tie-breaking: strict score improvement
    # is required to displace an earlier candidate.
    alphas = sorted(cfg.alpha_candidates, key=lambda a: (abs(a - 1.0), -a))
    for r in sorted(cfg.r_candidates):
        blurred = convolve_replicate(patch, make_kernel(kernel_kind, r))
        for alpha in alphas:
            template = _scaled_inner_template(blurred, cfg.inner_margin, alpha)
            score, _ = zncc_best_match(lini, template, hint, cfg.search_window)
            if best is None or score > best[0]:
                best = (score, r, alpha)
    score, r, alpha = best
    return r, alpha, score


def calibrate_model(
    capture_source,
    z0_list,
    zi_list,
    cfg: CalibrationConfig,
    curve: GammaCurve,
    kernel_kind: str = "disk",
    z_min: float | None = None,
    z_max: float | None = None,
) -> "DefocusModel":
    """Fill the (Z0, Zi) blur/scale grids by calibrating every frame pair.

    ``capture_source(z0, zi)`` must yield the display-light frame observed at
    sensor position zi while the scene's optimal focus is z0.  Diagonal
    entries are pinned to (0, 1) by definition.
    """
    z0_axis = np.asarray(sorted(z0_list), dtype=np.float64)
    zi_axis = np.asarray(sorted(zi_list), dtype=np.float64)
    if z0_axis.size == 0 or zi_axis.size == 0:
        raise ValueError("focus axes must be non-empty")
    r_grid = np.zeros((z0_axis.size, zi_axis.size))
    alpha_grid = np.ones_like(r_grid)
    for i, z0 in enumerate(z0_axis):
        reference = capture_source(z0, z0)
        for j, zi in enumerate(zi_axis):
            if zi == z0:
                continue
            frame = capture_source(z0, zi)
            try:
                r, alpha, _ = calibrate_pair(reference, frame, cfg, curve, kernel_kind)
            except CalibrationError as err:
                raise CalibrationError(f"(z0={z0}, zi={zi}): {err}") from err
            r_grid[i, j] = r
            alpha_grid[i, j] = alpha
    return DefocusModel(
        z0_axis=z0_axis,
        zi_axis=zi_axis,
        r_grid=r_grid,
        alpha_grid=alpha_grid,
        gamma=curve,
        z_min=float(z0_axis[0] if z_min is None else z_min),
        z_max=float(z0_axis[-1] if z_max is None else z_max),
        kernel_kind=kernel_kind,
    )


# ---------------------------------------------------------------------------
# Calibrated model
# ---------------------------------------------------------------------------

@dataclass
class DefocusModel:
    """Blur parameter and magnification grids over (Z0, Zi) motor steps."""

    z0_axis: np.ndarray
    zi_axis: np.ndarray
    r_grid: np.ndarray
    alpha_grid: np.ndarray
    gamma: GammaCurve
    z_min: float
    z_max: float
    kernel_kind: str = "disk"

    def __post_init__(self):
        self.z0_axis = np.asarray(self.z0_axis, dtype=np.float64)
        self.zi_axis = np.asarray(self.zi_axis, dtype=np.float64)
        self.r_grid = np.asarray(self.r_grid, dtype=np.float64)
        self.alpha_grid = np.asarray(self.alpha_grid, dtype=np.float64)
        if self.r_grid.shape != (self.z0_axis.size, self.zi_axis.size):
            raise ValueError("r grid shape does not match the axes")
        if self.alpha_grid.shape != self.r_grid.shape:
            raise ValueError("alpha grid shape does not match the r grid")
        if np.any(np.diff(self.z0_axis) <= 0) or np.any(np.diff(self.zi_axis) <= 0):
            raise ValueError("axes must be strictly increasing")
        if np.any(self.alpha_grid <= 0):
            raise ValueError("scale factors must be positive")
        if self.kernel_kind not in ("disk", "gaussian"):
            raise ValueError(f"unknown kernel kind {self.kernel_kind!r}")
        same = self.z0_axis[:, None] == self.zi_axis[None, :]
        if np.any(np.abs(self.r_grid[same]) > 1e-9):
            raise ValueError("blur parameter must be 0 where z0 == zi")
        if np.any(np.abs(self.alpha_grid[same] - 1.0) > 1e-9):
            raise ValueError("scale factor must be 1 where z0 == zi")

    @property
    def grid_spacing(self) -> float:
        if self.z0_axis.size < 2:
            return 1.0
        return float(np.min(np.diff(self.z0_axis)))

    def lookup(self, z0: float, zi: float) -> tuple[float, float]:
        """Bilinear interpolation of (r, alpha); exact at grid nodes."""
        r = _bilinear(self.z0_axis, self.zi_axis, self.r_grid, z0, zi)
        a = _bilinear(self.z0_axis, self.zi_axis, self.alpha_grid, z0, zi)
        return r, a

    def kernel_for(self, r: float) -> BlurKernel:
        return make_kernel(self.kernel_kind, r)

    def save(self, path) -> None:
        doc = {
            "gamma": self.gamma.gamma,
            "z_min": self.z_min,
            "z_max": self.z_max,
            "kernel": self.kernel_kind,
            "z0_axis": self.z0_axis.tolist(),
            "zi_axis": self.zi_axis.tolist(),
            "r_grid": self.r_grid.tolist(),
            "alpha_grid": self.alpha_grid.tolist(),
        }
        tmp = Path(str(path) + ".tmp")
        tmp.write_text(json.dumps(doc, indent=2))
        os.replace(tmp, path)

    @classmethod
    def load(cls, path) -> "DefocusModel":
        doc = json.loads(Path(path).read_text())
        return cls(
            z0_axis=np.asarray(doc["z0_axis"]),
            zi_axis=np.asarray(doc["zi_axis"]),
            r_grid=np.asarray(doc["r_grid"]),
            alpha_grid=np.asarray(doc["alpha_grid"]),
            gamma=GammaCurve(doc["gamma"]),
            z_min=float(doc["z_min"]),
            z_max=float(doc["z_max"]),
            kernel_kind=doc.get("kernel", "disk"),
        )


def _bilinear(ax0: np.ndarray, ax1: np.ndarray, grid: np.ndarray, u: float, v: float) -> float:
    if not (ax0[0] <= u <= ax0[-1]) or not (ax1[0] <= v <= ax1[-1]):
        raise ValueError(
            f"query ({u}, {v}) outside the calibrated grid "
            f"[{ax0[0]}, {ax0[-1]}] x [{ax1[0]}, {ax1[-1]}]"
        )
    i = int(np.clip(np.searchsorted(ax0, u, side="right") - 1, 0, max(ax0.size - 2, 0)))
    j = int(np.clip(np.searchsorted(ax1, v, side="right") - 1, 0, max(ax1.size - 2, 0)))
    if ax0.size == 1:
        fy, i1 = 0.0, i
    else:
        i1 = i + 1
        fy = (u - ax0[i]) / (ax0[i1] - ax0[i])
    if ax1.size == 1:
        fx, j1 = 0.0, j
    else:
        j1 = j + 1
        fx = (v - ax1[j]) / (ax1[j1] - ax1[j])
    top = grid[i, j] * (1 - fx) + grid[i, j1] * fx
    bot = grid[i1, j] * (1 - fx) + grid[i1, j1] * fx
    return float(top * (1 - fy) + bot * fy)


def make_synthetic_model(
    z_min: float = 1050,
    z_max: float = 2100,
    spacing: float = 50,
    r_per_step: float = 0.12,
    mag_slope: float = 0.0,
    gamma: float = 2.2,
    kernel_kind: str = "disk",
) -> DefocusModel:
    """Analytic stand-in for a calibrated camera.

    Blur grows linearly with the focus error, and magnification follows
    m(z) = 1 + mag_slope * (z - midrange) so that the relative scale between
    any two sensor positions is consistent across scene depths.
    """
    axis = np.arange(z_min, z_max + spacing / 2, spacing, dtype=np.float64)
    mid = 0.5 * (z_min + z_max)
    m = 1.0 + mag_slope * (axis - mid)
    if np.any(m <= 0):
        raise ValueError("mag_slope too steep: magnification must stay positive")
    r_grid = r_per_step * np.abs(axis[:, None] - axis[None, :])
    alpha_grid = m[None, :] / m[:, None]
    return DefocusModel(
        z0_axis=axis,
        zi_axis=axis.copy(),
        r_grid=r_grid,
        alpha_grid=alpha_grid,
        gamma=GammaCurve(gamma),
        z_min=float(z_min),
        z_max=float(z_max),
        kernel_kind=kernel_kind,
    )
