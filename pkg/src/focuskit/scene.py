"""Virtual camera: depth-structured scenes rendered at any focus position.

Pixels are partitioned into depth layers (quantized to the model grid), each
layer is rendered with the blur/scale pair the model predicts for (layer
depth, sensor position), and layers are composited far to near with masks
that undergo the same blur and magnification.  The result is exact away from
depth boundaries, which is all the rest of the toolkit relies on.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .defocus import DefocusModel, convolve_replicate, gamma_inverse, gamma_forward, imscale
from .pgm import read_pgm


class SceneConfigError(ValueError):
    """Raised for inconsistent scene descriptions (overlapping regions, ...)."""


@dataclass(frozen=True)
class Frame:
    """A captured image with the focus position and time step it was taken at."""

    pixels: np.ndarray
    z: float
    t: int = 0


@dataclass(frozen=True)
class RegionMotion:
    """Piecewise-linear depth and translation keyframes for one region.

    ``z0_keyframes`` is a list of (t, z0); ``translation_keyframes`` a list of
    (t, (dy, dx)) with offsets in pixels.  Values clamp outside the keyframe
    range, and translations are rounded to whole pixels.
    """

    region_id: int
    z0_keyframes: tuple = ()
    translation_keyframes: tuple = ()


@dataclass(frozen=True)
class SceneRegion:
    mask: np.ndarray   # boolean, scene-sized
    z0: float


@dataclass(frozen=True)
class Scene:
    """Sharp image plus a per-pixel optimal-focus map, optionally moving."""

    sharp: np.ndarray
    depth_map: np.ndarray
    regions: tuple = ()
    motion: tuple = ()

    def __post_init__(self):
        if self.sharp.shape != self.depth_map.shape:
            raise SceneConfigError("depth map dimensions must match the image")

    @property
    def is_static(self) -> bool:
        return len(self.motion) == 0


@dataclass(frozen=True)
class Camera:
    """Simulated focus-actuated camera backed by a calibrated model."""

    model: DefocusModel
    dof_steps: float = 20.0
    noise_sigma: float = 0.0
    rng_seed: int = 0

    def __post_init__(self):
        if self.dof_steps <= 0:
            raise ValueError("dof_steps must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")


def _interp_keyframes(keyframes, t: float):
    ts = np.asarray([k[0] for k in keyframes], dtype=np.float64)
    if np.any(np.diff(ts) <= 0):
        raise SceneConfigError("keyframe times must be strictly increasing")
    vals = np.asarray([np.atleast_1d(k[1]) for k in keyframes], dtype=np.float64)
    out = [np.interp(t, ts, vals[:, d]) for d in range(vals.shape[1])]
    return out[0] if len(out) == 1 else out


def _shift_replicate(arr: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """Translate by whole pixels, replicating edge content into vacated space."""
    h, w = arr.shape
    ys = np.clip(np.arange(h) - dy, 0, h - 1)
    xs = np.clip(np.arange(w) - dx, 0, w - 1)
    return arr[np.ix_(ys, xs)]


def advance(scene: Scene, t: float) -> Scene:
    """Snapshot of the scene at time ``t`` with all region motion applied."""
    if scene.is_static or t == 0 and not any(
        m.z0_keyframes or m.translation_keyframes for m in scene.motion
    ):
        if scene.is_static:
            return scene
    sharp = scene.sharp.copy()
    depth = scene.depth_map.copy()
    placed = np.zeros(scene.sharp.shape, dtype=bool)
    for mot in scene.motion:
        try:
            region = scene.regions[mot.region_id]
        except IndexError:
            raise SceneConfigError(f"motion references unknown region {mot.region_id}")
        z0 = region.z0
        if mot.z0_keyframes:
            z0 = float(_interp_keyframes(mot.z0_keyframes, t))
        dy = dx = 0
        if mot.translation_keyframes:
            off = _interp_keyframes(mot.translation_keyframes, t)
            dy, dx = int(round(off[0])), int(round(off[1]))
        mask = _shift_replicate(region.mask.astype(np.float64), dy, dx) > 0.5
        if np.any(placed & mask):
            raise SceneConfigError("moving regions overlap")
        placed |= mask
        sharp[mask] = _shift_replicate(scene.sharp, dy, dx)[mask]
        depth[mask] = z0
    return Scene(sharp=sharp, depth_map=depth, regions=scene.regions, motion=())


def _snap_to_axis(values: np.ndarray, axis: np.ndarray) -> np.ndarray:
    idx = np.clip(np.searchsorted(axis, values), 0, axis.size - 1)
    lower = np.clip(idx - 1, 0, axis.size - 1)
    pick_lower = np.abs(values - axis[lower]) <= np.abs(axis[idx] - values)
    return np.where(pick_lower, axis[lower], axis[idx])


def capture(camera: Camera, scene: Scene, z: float, t: int = 0) -> Frame:
    """Render the frame observed at focus position ``z`` and time ``t``.

    Depths are quantized to the calibration grid, layers composited far to
    near (descending motor step), and seeded Gaussian noise is added last.
    Identical (camera, scene, z, t) always produce identical bytes.
    """
    model = camera.model
    if not (model.z_min <= z <= model.z_max):
        raise ValueError(f"focus position {z} outside [{model.z_min}, {model.z_max}]")
    snap = advance(scene, t)
    depths = _snap_to_axis(snap.depth_map.ravel(), model.z0_axis).reshape(snap.depth_map.shape)
    layers = np.unique(depths)[::-1]  # far-to-near: larger step treated as farther
    curve = model.gamma
    linear_sharp = gamma_inverse(snap.sharp, curve)
    out = None
    for z0 in layers:
        r, alpha = model.lookup(float(z0), z)
        kern = model.kernel_for(r)
        rendered = imscale(convolve_replicate(linear_sharp, kern), alpha)
        if out is None:
            out = rendered
            continue
        mask = imscale(convolve_replicate((depths == z0).astype(np.float64), kern), alpha)
        mask = np.clip(mask, 0.0, 1.0)
        out = mask * rendered + (1.0 - mask) * out
    frame = gamma_forward(np.clip(out, 0.0, 1.0), curve)
    if camera.noise_sigma > 0:
        rng = np.random.default_rng(
            (camera.rng_seed, int(t), int(round(z * 1024.0)) & 0x7FFFFFFF)
        )
        frame = frame + rng.normal(0.0, camera.noise_sigma, size=frame.shape)
    return Frame(pixels=np.clip(frame, 0.0, 1.0), z=float(z), t=int(t))


def patch_majority_depth(
    scene: Scene, z: float, patch_origin: tuple[int, int] = (0, 0),
    t: float = 0, patch_side: int = 512,
) -> float:
    """Area-majority optimal focus of a patch; ties go to the depth nearer z."""
    snap = advance(scene, t)
    y, x = patch_origin
    h, w = snap.depth_map.shape
    if y < 0 or x < 0 or y + patch_side > h or x + patch_side > w:
        raise ValueError("patch does not fit in the frame")
    window = snap.depth_map[y : y + patch_side, x : x + patch_side]
    values, counts = np.unique(window, return_counts=True)
    top = counts == counts.max()
    cands = values[top]
    order = np.lexsort((cands, np.abs(cands - z)))
    return float(cands[order[0]])


def oracle_steps(
    scene: Scene, z: float, patch_origin: tuple[int, int] = (0, 0),
    t: float = 0, patch_side: int = 512,
) -> float:
    """Ground-truth distance from optimal focus for a patch: |z - Z0_patch|."""
    return abs(z - patch_majority_depth(scene, z, patch_origin, t, patch_side))


# ---------------------------------------------------------------------------
# Oracle evaluators for the control loops
# ---------------------------------------------------------------------------

def oracle_estimator(scene: Scene, patch_origin=(0, 0), patch_side: int | None = None):
    """Distance estimator that reads the scene truth instead of the pixels."""

    def estimate(frame: Frame) -> float:
        side = patch_side or min(frame.pixels.shape)
        return oracle_steps(scene, frame.z, patch_origin, frame.t, side)

    return estimate


def oracle_discriminator(scene: Scene, dof_steps: float, patch_origin=(0, 0),
                         patch_side: int | None = None):
    """In-focus test that reads the scene truth instead of the pixels."""

    def verdict(frame: Frame) -> bool:
        side = patch_side or min(frame.pixels.shape)
        return oracle_steps(scene, frame.z, patch_origin, frame.t, side) <= dof_steps

    return verdict


# ---------------------------------------------------------------------------
# Procedural textures and scene factories
# ---------------------------------------------------------------------------

def make_texture(side: int, seed: int, octaves: int = 4) -> np.ndarray:
    """Multi-octave value noise in [0.05, 0.95] with pixel-level detail.

    The fine detail matters: blur estimation needs energy at high spatial
    frequencies to sense small focus errors.
    """
    from scipy.ndimage import zoom

    rng = np.random.default_rng(seed)
    img = np.zeros((side, side))
    for o in range(octaves):
        cells = min(side, 4 * 2 ** o)
        coarse = rng.random((cells, cells))
        img += zoom(coarse, side / cells, order=1)[:side, :side] / (2.0 ** o)
    img += 0.35 * rng.random((side, side))
    lo, hi = img.min(), img.max()
    return 0.05 + 0.9 * (img - lo) / (hi - lo)


def single_depth_scene(side: int, depth: float, texture_seed: int = 0) -> Scene:
    tex = make_texture(side, texture_seed)
    return Scene(sharp=tex, depth_map=np.full((side, side), float(depth)))


def banded_scene(side: int, depths, texture_seed: int = 0) -> Scene:
    """Vertical bands of equal width, one depth per band, distinct textures."""
    depths = list(depths)
    rng = np.random.default_rng(texture_seed)
    sharp = np.zeros((side, side))
    depth = np.zeros((side, side))
    edges = np.linspace(0, side, len(depths) + 1).astype(int)
    regions = []
    for i, d in enumerate(depths):
        tex = make_texture(side, int(rng.integers(0, 2**31)))
        mask = np.zeros((side, side), dtype=bool)
        mask[:, edges[i] : edges[i + 1]] = True
        sharp[mask] = tex[mask]
        depth[mask] = d
        regions.append(SceneRegion(mask=mask, z0=float(d)))
    return Scene(sharp=sharp, depth_map=depth, regions=tuple(regions))


# ---------------------------------------------------------------------------
# Scene configuration files
# ---------------------------------------------------------------------------

def _rasterize_region(entry: dict, shape) -> np.ndarray:
    if "rect" in entry:
        top, left, height, width = entry["rect"]
        mask = np.zeros(shape, dtype=bool)
        mask[top : top + height, left : left + width] = True
        return mask
    if "polygon" in entry:
        from PIL import Image, ImageDraw

        img = Image.new("1", (shape[1], shape[0]), 0)
        draw = ImageDraw.Draw(img)
        draw.polygon([(float(x), float(y)) for y, x in entry["polygon"]], fill=1)
        return np.asarray(img, dtype=bool)
    raise SceneConfigError("region needs a 'rect' or 'polygon' key")


def scene_from_config(config, base_dir=None) -> Scene:
    """Build a scene from a JSON document (path, str, or parsed dict).

    Layout::

        {"image": "sharp.pgm",
         "depth": "depth.pgm" | [{"rect": [top, left, h, w], "z0": 1500}, ...],
         "background_z0": 1300,
         "motion": [{"region_id": 0,
                     "z0_keyframes": [[0, 1300], [10, 1400]],
                     "translation_keyframes": [[0, [0, 0]], [10, [0, 20]]]}]}

    Depth-map PGMs hold motor steps as raw 16-bit integers.  Region lists
    must cover the frame unless ``background_z0`` is given.
    """
    if isinstance(config, (str, Path)):
        base_dir = Path(config).parent if base_dir is None else Path(base_dir)
        config = json.loads(Path(config).read_text())
    base_dir = Path(base_dir or ".")
    sharp = read_pgm(base_dir / config["image"])
    depth_spec = config["depth"]
    regions: list[SceneRegion] = []
    if isinstance(depth_spec, (str, Path)):
        depth = read_pgm(base_dir / depth_spec, normalize=False).astype(np.float64)
    else:
        covered = np.zeros(sharp.shape, dtype=bool)
        if "background_z0" in config:
            depth = np.full(sharp.shape, float(config["background_z0"]))
            covered[:] = True
        else:
            depth = np.zeros(sharp.shape)
        for entry in depth_spec:
            mask = _rasterize_region(entry, sharp.shape)
            if not regions_disjoint(regions, mask):
                raise SceneConfigError("depth regions overlap")
            depth[mask] = float(entry["z0"])
            covered |= mask
            regions.append(SceneRegion(mask=mask, z0=float(entry["z0"])))
        if not covered.all():
            raise SceneConfigError("regions do not cover the frame and no background_z0 given")
    motion = tuple(
        RegionMotion(
            region_id=int(m["region_id"]),
            z0_keyframes=tuple((float(t), float(v)) for t, v in m.get("z0_keyframes", [])),
            translation_keyframes=tuple(
                (float(t), (float(d[0]), float(d[1])))
                for t, d in m.get("translation_keyframes", [])
            ),
        )
        for m in config.get("motion", [])
    )
    for m in motion:
        if m.region_id >= len(regions):
            raise SceneConfigError(f"motion references unknown region {m.region_id}")
    return Scene(sharp=sharp, depth_map=depth, regions=tuple(regions), motion=motion)


def regions_disjoint(regions, new_mask) -> bool:
    return not any(np.any(r.mask & new_mask) for r in regions)
