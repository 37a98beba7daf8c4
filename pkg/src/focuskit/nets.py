"""Small convolutional networks with hand-rolled forward and backward passes.

Two patch networks operate on 512x512 grayscale inputs:

* step estimator: three strided conv layers, then fully-connected layers of
  width 1024/512/10/1, absolute-value output head (distance in motor steps
  is nonnegative by construction);
* focus discriminator: two strided conv layers, dropout, fully-connected
  10/1, logistic output head (in focus iff output > 0.5).

The trained estimator converts without retraining into a sliding-window
"global" form: strided convolutions become dilated stride-1 convolutions and
fully-connected layers become 1x1 (or dilated 4x4) convolutions, so one pass
scores every 512x512 patch of a larger image.

All feature maps are float64 arrays laid out (N, C, H, W).  Convolutions are
valid (no padding): the layer arithmetic only closes without it.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, asdict, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

ESTIMATOR_INPUT_SIDE = 512
DISCRIMINATOR_THRESHOLD = 0.5

_WEIGHTS_MAGIC = b"FKW1"


class ConversionError(ValueError):
    """Raised when a network cannot be converted to sliding-window form."""


@dataclass(frozen=True)
class LayerSpec:
    kind: str                 # conv | fully_connected | flatten | dropout
    filters: int = 0
    filter_size: int = 0
    stride: int = 1
    dilation: int = 1
    out_dim: int = 0
    rate: float = 0.0

    def __post_init__(self):
        if self.kind not in ("conv", "fully_connected", "flatten", "dropout"):
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind == "conv" and (self.stride < 1 or self.dilation < 1):
            raise ValueError("conv stride and dilation must be positive")
        if self.kind == "dropout" and not (0.0 <= self.rate < 1.0):
            raise ValueError("dropout rate must be in [0, 1)")


def conv(filters: int, size: int, stride: int = 1, dilation: int = 1) -> LayerSpec:
    return LayerSpec(kind="conv", filters=filters, filter_size=size,
                     stride=stride, dilation=dilation)


def fc(out_dim: int) -> LayerSpec:
    return LayerSpec(kind="fully_connected", out_dim=out_dim)


def build_estimator_spec() -> list[LayerSpec]:
    """512 -> 64 -> 16 -> 4 spatially; flatten yields a 128-vector."""
    return [
        conv(4, 8, stride=8),
        conv(8, 4, stride=4),
        conv(8, 4, stride=4),
        LayerSpec(kind="flatten"),
        fc(1024),
        fc(512),
        fc(10),
        fc(1),
    ]


def build_discriminator_spec() -> list[LayerSpec]:
    """512 -> 64 -> 8 spatially; flatten yields a 64-vector."""
    return [
        conv(1, 8, stride=8),
        conv(1, 8, stride=8),
        LayerSpec(kind="flatten"),
        LayerSpec(kind="dropout", rate=0.5),
        fc(10),
        fc(1),
    ]


@dataclass
class NetworkWeights:
    specs: list[LayerSpec]
    tensors: list[dict | None]      # {"w", "b"} for conv/fc layers, else None
    input_side: int | None
    output: str                     # "abs" | "sigmoid" | "linear"
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.output not in ("abs", "sigmoid", "linear"):
            raise ValueError(f"unknown output head {self.output!r}")
        for spec, t in zip(self.specs, self.tensors):
            needs = spec.kind in ("conv", "fully_connected")
            if needs != (t is not None):
                raise ValueError(f"tensor/spec mismatch for {spec.kind}")
            if t is not None and not (
                np.all(np.isfinite(t["w"])) and np.all(np.isfinite(t["b"]))
            ):
                raise ValueError("weights must be finite")

    def parameter_count(self) -> int:
        return sum(t["w"].size + t["b"].size for t in self.tensors if t is not None)


def trace_shapes(specs: list[LayerSpec], input_side: int) -> list[tuple]:
    """Per-layer output shapes, (C, H, W) or (dim,), for a single sample."""
    shape: tuple = (1, input_side, input_side)
    out = []
    for spec in specs:
        if spec.kind == "conv":
            if len(shape) != 3:
                raise ValueError("conv after flatten is not part of the patch layout")
            c, h, w = shape
            span = (spec.filter_size - 1) * spec.dilation + 1
            if span > h or span > w:
                raise ValueError(f"conv window {span} exceeds input {h}x{w}")
            shape = (
                spec.filters,
                (h - span) // spec.stride + 1,
                (w - span) // spec.stride + 1,
            )
        elif spec.kind == "flatten":
            shape = (int(np.prod(shape)),)
        elif spec.kind == "fully_connected":
            if len(shape) != 1:
                raise ValueError("fully-connected layers expect a flattened input")
            shape = (spec.out_dim,)
        out.append(shape)
    return out


def init_weights(
    specs: list[LayerSpec],
    input_side: int,
    output: str,
    seed: int = 0,
) -> NetworkWeights:
    """Seeded uniform init with fan-in scaling, biases at zero."""
    rng = np.random.default_rng(seed)
    shapes = trace_shapes(specs, input_side)
    tensors: list[dict | None] = []
    prev: tuple = (1, input_side, input_side)
    for spec, shape in zip(specs, shapes):
        if spec.kind == "conv":
            fan_in = prev[0] * spec.filter_size ** 2
            bound = np.sqrt(6.0 / fan_in)
            w = rng.uniform(-bound, bound,
                            (spec.filters, prev[0], spec.filter_size, spec.filter_size))
            tensors.append({"w": w, "b": np.zeros(spec.filters)})
        elif spec.kind == "fully_connected":
            fan_in = prev[0]
            bound = np.sqrt(6.0 / fan_in)
            w = rng.uniform(-bound, bound, (fan_in, spec.out_dim))
            tensors.append({"w": w, "b": np.zeros(spec.out_dim)})
        else:
            tensors.append(None)
        prev = shape
    return NetworkWeights(
        specs=list(specs), tensors=tensors, input_side=input_side,
        output=output, metadata={"seed": seed},
    )


# ---------------------------------------------------------------------------
# Layer primitives
# ---------------------------------------------------------------------------

def _is_tiled(h, w, k, stride, dilation):
    return stride == k and dilation == 1 and h % k == 0 and w % k == 0


def _conv_forward(x, w, b, stride, dilation, want_cache):
    n, c, h, wid = x.shape
    f, _, k, _ = w.shape
    if _is_tiled(h, wid, k, stride, dilation):
        # Non-overlapping windows: im2col is a pure reshape.
        ho, wo = h // k, wid // k
        cols = (
            x.reshape(n, c, ho, k, wo, k)
            .transpose(0, 2, 4, 1, 3, 5)
            .reshape(n * ho * wo, c * k * k)
        )
    else:
        span = (k - 1) * dilation + 1
        win = sliding_window_view(x, (span, span), axis=(2, 3))
        win = win[:, :, ::stride, ::stride, ::dilation, ::dilation]
        _, _, ho, wo, _, _ = win.shape
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    y = cols @ w.reshape(f, -1).T + b
    y = y.reshape(n, ho, wo, f).transpose(0, 3, 1, 2)
    cache = (x.shape, cols, stride, dilation, (ho, wo)) if want_cache else None
    return y, cache


def _conv_backward(dy, w, cache, need_dx=True):
    x_shape, cols, stride, dilation, (ho, wo) = cache
    n, c, h, wid = x_shape
    f, _, k, _ = w.shape
    dflat = dy.transpose(0, 2, 3, 1).reshape(n * ho * wo, f)
    dw = (dflat.T @ cols).reshape(w.shape)
    db = dflat.sum(axis=0)
    if not need_dx:
        return None, dw, db
    dcols = (dflat @ w.reshape(f, -1)).reshape(n, ho, wo, c, k, k)
    if _is_tiled(h, wid, k, stride, dilation):
        dx = (
            dcols.transpose(0, 3, 1, 4, 2, 5)
            .reshape(x_shape)
        )
    else:
        dx = np.zeros(x_shape)
        for i in range(k):
            for j in range(k):
                ys = slice(i * dilation, i * dilation + (ho - 1) * stride + 1, stride)
                xs = slice(j * dilation, j * dilation + (wo - 1) * stride + 1, stride)
                dx[:, :, ys, xs] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return dx, dw, db


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _apply_head(z, head):
    if head == "abs":
        return np.abs(z)
    if head == "sigmoid":
        return _sigmoid(z)
    return z


def _head_grad(z, head):
    if head == "abs":
        return np.sign(z)
    if head == "sigmoid":
        s = _sigmoid(z)
        return s * (1.0 - s)
    return np.ones_like(z)


def _last_param_index(specs) -> int:
    return max(i for i, s in enumerate(specs) if s.kind in ("conv", "fully_connected"))


def _forward_pass(weights, x, training=False, rng=None, want_cache=False):
    """Run the layer stack; returns (pre-head outputs (N,), caches)."""
    specs, tensors = weights.specs, weights.tensors
    last_param = _last_param_index(specs)
    caches = []
    for i, (spec, t) in enumerate(zip(specs, tensors)):
        if spec.kind == "conv":
            x, cache = _conv_forward(x, t["w"], t["b"], spec.stride, spec.dilation,
                                     want_cache)
        elif spec.kind == "fully_connected":
            cache = x if want_cache else None
            x = x @ t["w"] + t["b"]
        elif spec.kind == "flatten":
            cache = x.shape if want_cache else None
            x = x.reshape(x.shape[0], -1)
        elif spec.kind == "dropout":
            if training and spec.rate > 0:
                if rng is None:
                    raise ValueError("dropout in training mode needs an rng")
                mask = (rng.random(x.shape) >= spec.rate) / (1.0 - spec.rate)
                x = x * mask
                cache = mask if want_cache else None
            else:
                cache = None
        if spec.kind in ("conv", "fully_connected") and i != last_param:
            relu_mask = x > 0
            x = x * relu_mask
            caches.append((cache, relu_mask))
        else:
            caches.append((cache, None))
    return x.reshape(x.shape[0]), caches


def forward_batch(weights, patches, training=False, rng=None) -> np.ndarray:
    """Network outputs for a batch of patches shaped (N, H, W)."""
    x = np.asarray(patches, dtype=np.float64)
    if x.ndim == 3:
        x = x[:, None]
    if weights.input_side is not None and x.shape[-1] != weights.input_side:
        raise ValueError(
            f"expected {weights.input_side}x{weights.input_side} patches, "
            f"got {x.shape[-2]}x{x.shape[-1]}"
        )
    z, _ = _forward_pass(weights, x, training=training, rng=rng)
    return _apply_head(z, weights.output)


def forward(weights, patch) -> float:
    """Scalar network output for one 2-D patch."""
    patch = np.asarray(patch, dtype=np.float64)
    if patch.ndim != 2:
        raise ValueError("expected a single 2-D patch")
    return float(forward_batch(weights, patch[None])[0])


def backward(weights, patches, labels, training=True, rng=None):
    """Mean-squared-error loss and its gradient for every parameter.

    Returns (loss, grads) where grads mirrors ``weights.tensors`` (None for
    parameter-free layers).
    """
    x = np.asarray(patches, dtype=np.float64)
    if x.ndim == 3:
        x = x[:, None]
    y = np.asarray(labels, dtype=np.float64)
    if x.shape[0] == 0:
        raise ValueError("batch must be non-empty")
    z, caches = _forward_pass(weights, x, training=training, rng=rng, want_cache=True)
    pred = _apply_head(z, weights.output)
    err = pred - y
    loss = float(np.mean(err * err))
    dz = (2.0 / y.size) * err * _head_grad(z, weights.output)

    grads: list[dict | None] = [None] * len(weights.specs)
    dx = dz.reshape(-1, 1)
    for i in range(len(weights.specs) - 1, -1, -1):
        spec, t = weights.specs[i], weights.tensors[i]
        cache, relu_mask = caches[i]
        if relu_mask is not None:
            dx = dx * relu_mask
        if spec.kind == "fully_connected":
            grads[i] = {"w": cache.T @ dx, "b": dx.sum(axis=0)}
            dx = dx @ t["w"].T
        elif spec.kind == "flatten":
            dx = dx.reshape(cache)
        elif spec.kind == "dropout":
            if cache is not None:
                dx = dx * cache
        elif spec.kind == "conv":
            # The first layer's input gradient is never consumed.
            dx, dw, db = _conv_backward(dx, t["w"], cache, need_dx=i > 0)
            grads[i] = {"w": dw, "b": db}
    if not np.isfinite(loss):
        raise FloatingPointError("non-finite loss")
    return loss, grads


# ---------------------------------------------------------------------------
# Sliding-window (global) form
# ---------------------------------------------------------------------------

def to_global(weights: NetworkWeights) -> NetworkWeights:
    """Convert a trained patch estimator into its sliding-window form.

    Strided convolutions become stride-1 dilated convolutions and the
    fully-connected stack becomes 1x1 convolutions (the first one a dilated
    4x4 that absorbs the flatten), reusing the trained tensors unchanged up
    to layout.  Only the stock estimator layout is convertible; converting a
    converted network is rejected.
    """
    if weights.specs != build_estimator_spec():
        raise ConversionError("expected the stock patch-estimator layout")
    t = weights.tensors
    # Flatten ordering is (channel, row, col) over the 8 x 4 x 4 conv output.
    fc1 = t[4]["w"].T.reshape(1024, 8, 4, 4)
    specs = [
        conv(4, 8, stride=1),
        conv(8, 4, stride=1, dilation=8),
        conv(8, 4, stride=1, dilation=32),
        conv(1024, 4, stride=1, dilation=128),
        conv(512, 1),
        conv(10, 1),
        conv(1, 1),
    ]
    tensors = [
        {"w": t[0]["w"].copy(), "b": t[0]["b"].copy()},
        {"w": t[1]["w"].copy(), "b": t[1]["b"].copy()},
        {"w": t[2]["w"].copy(), "b": t[2]["b"].copy()},
        {"w": fc1, "b": t[4]["b"].copy()},
        {"w": t[5]["w"].T.reshape(512, 1024, 1, 1), "b": t[5]["b"].copy()},
        {"w": t[6]["w"].T.reshape(10, 512, 1, 1), "b": t[6]["b"].copy()},
        {"w": t[7]["w"].T.reshape(1, 10, 1, 1), "b": t[7]["b"].copy()},
    ]
    meta = dict(weights.metadata)
    meta["converted_from"] = "estimator"
    return NetworkWeights(specs=specs, tensors=tensors, input_side=None,
                          output=weights.output, metadata=meta)


def receptive_field(specs: list[LayerSpec]) -> int:
    side = 1
    for spec in reversed(specs):
        if spec.kind == "conv":
            side = (side - 1) * spec.stride + (spec.filter_size - 1) * spec.dilation + 1
    return side


def global_forward(global_weights: NetworkWeights, image, stride_out: int = 1) -> np.ndarray:
    """Patch scores for every placement, subsampled by ``stride_out``.

    Entry (i, j) equals the patch network applied at window origin
    (i * stride_out, j * stride_out).  The subsampling stride is injected at
    the first former fully-connected layer, after which all convolutions are
    pointwise, so sparser grids cost proportionally less.
    """
    if global_weights.input_side is not None:
        raise ConversionError("run to_global() before sliding-window inference")
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ValueError("expected a 2-D grayscale image")
    need = receptive_field(global_weights.specs)
    if image.shape[0] < need or image.shape[1] < need:
        raise ValueError(f"image must be at least {need}x{need}, got {image.shape}")
    if stride_out < 1:
        raise ValueError("stride_out must be >= 1")
    x = image[None, None]
    specs, tensors = global_weights.specs, global_weights.tensors
    last = _last_param_index(specs)
    # The converted layout puts the former first fully-connected layer at
    # index 3; everything after it is pointwise, so injecting the output
    # stride there subsamples the patch grid without changing any value.
    stride_layer = 3
    for i, (spec, t) in enumerate(zip(specs, tensors)):
        stride = stride_out if i == stride_layer else spec.stride
        x, _ = _conv_forward(x, t["w"], t["b"], stride, spec.dilation, False)
        if i != last:
            x = np.maximum(x, 0.0)
    return _apply_head(x[0, 0], global_weights.output)


# ---------------------------------------------------------------------------
# Serialization: JSON header + little-endian float32 blob + checksum
# ---------------------------------------------------------------------------

def spec_to_dict(spec: LayerSpec) -> dict:
    return asdict(spec)


def spec_from_dict(d: dict) -> LayerSpec:
    return LayerSpec(**d)


def save_weights(weights: NetworkWeights, path) -> None:
    blob = bytearray()
    manifest = []
    for i, t in enumerate(weights.tensors):
        if t is None:
            continue
        manifest.append({
            "layer": i,
            "w_shape": list(t["w"].shape),
            "b_shape": list(t["b"].shape),
        })
        blob += t["w"].astype("<f4").tobytes()
        blob += t["b"].astype("<f4").tobytes()
    header = {
        "format": "focuskit-weights",
        "specs": [spec_to_dict(s) for s in weights.specs],
        "input_side": weights.input_side,
        "output": weights.output,
        "metadata": weights.metadata,
        "tensors": manifest,
        "checksum": hashlib.sha256(bytes(blob)).hexdigest(),
    }
    payload = json.dumps(header).encode("utf-8")
    with open(str(path) + ".tmp", "wb") as fh:
        fh.write(_WEIGHTS_MAGIC)
        fh.write(struct.pack("<I", len(payload)))
        fh.write(payload)
        fh.write(bytes(blob))
    import os

    os.replace(str(path) + ".tmp", path)


def load_weights(path) -> NetworkWeights:
    with open(path, "rb") as fh:
        if fh.read(4) != _WEIGHTS_MAGIC:
            raise ValueError(f"{path}: not a weights file")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        blob = fh.read()
    if hashlib.sha256(blob).hexdigest() != header["checksum"]:
        raise ValueError(f"{path}: checksum mismatch")
    specs = [spec_from_dict(d) for d in header["specs"]]
    tensors: list[dict | None] = [None] * len(specs)
    offset = 0
    for entry in header["tensors"]:
        w_n = int(np.prod(entry["w_shape"]))
        b_n = int(np.prod(entry["b_shape"]))
        w = np.frombuffer(blob, dtype="<f4", count=w_n, offset=offset)
        offset += 4 * w_n
        b = np.frombuffer(blob, dtype="<f4", count=b_n, offset=offset)
        offset += 4 * b_n
        tensors[entry["layer"]] = {
            "w": w.astype(np.float64).reshape(entry["w_shape"]),
            "b": b.astype(np.float64).reshape(entry["b_shape"]),
        }
    return NetworkWeights(
        specs=specs,
        tensors=tensors,
        input_side=header["input_side"],
        output=header["output"],
        metadata=header.get("metadata", {}),
    )


def network_estimator(weights: NetworkWeights, patch_origin=None):
    """Adapt estimator weights to the control-loop interface (Frame -> steps)."""

    def estimate(frame) -> float:
        return forward(weights, _crop(frame.pixels, weights.input_side, patch_origin))

    return estimate


def network_discriminator(weights: NetworkWeights, patch_origin=None,
                          threshold: float = DISCRIMINATOR_THRESHOLD):
    """Adapt discriminator weights to the control-loop interface (Frame -> bool)."""

    def verdict(frame) -> bool:
        p = forward(weights, _crop(frame.pixels, weights.input_side, patch_origin))
        return p > threshold

    return verdict


def _crop(pixels, side, origin):
    h, w = pixels.shape
    if side is None or (h, w) == (side, side):
        return pixels
    if h < side or w < side:
        raise ValueError(f"frame {h}x{w} smaller than network input {side}")
    if origin is None:
        origin = ((h - side) // 2, (w - side) // 2)
    y, x = origin
    return pixels[y : y + side, x : x + side]
