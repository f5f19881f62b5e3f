"""Small multi-class segmentation U-Net built on the autodiff core.

The network follows the classic encoder/decoder shape with two departures
that matter for receptive-field analysis: downsampling happens inside each
encoder level via a stride-2 convolution (no pooling), and upsampling uses a
2x2/stride-2 transposed convolution. Channel widths double per level starting
at ``base_features``. A final 1x1 convolution produces class logits which are
mapped to per-pixel probabilities by a channel softmax.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, asdict

import numpy as np

from .autodiff import (
    Tensor,
    ShapeError,
    batchnorm2d,
    channel_softmax,
    concat_channels,
    conv2d,
    relu,
    transposed_conv2d,
)

WEIGHTS_MAGIC = b"SEGW0001"


@dataclass(frozen=True)
class UNetSpec:
    """Architecture hyperparameters for a square-input segmentation U-Net."""

    depth: int = 4
    base_features: int = 8
    num_classes: int = 6
    input_size: int = 64
    kernel_size: int = 3

    def validate(self) -> None:
        if self.depth < 2:
            raise ValueError(f"depth must be >= 2, got {self.depth}")
        if self.base_features < 1:
            raise ValueError(f"base_features must be >= 1, got {self.base_features}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.kernel_size < 3 or self.kernel_size % 2 == 0:
            raise ValueError(f"kernel_size must be odd and >= 3, got {self.kernel_size}")
        down = 2 ** (self.depth - 1)
        if self.input_size < down or self.input_size % down != 0:
            raise ValueError(
                f"input_size {self.input_size} must be a positive multiple of "
                f"2^(depth-1) = {down}"
            )

    def features(self, level: int) -> int:
        """Channel width at 1-indexed level (level depth is the bottleneck)."""
        return self.base_features * (2 ** (level - 1))


# full-scale architecture for 512x512 radiographs (receptive field commonly
# quoted as 184; the exact layer walk gives 185, see receptive_field) and the
# downscaled variant everything in this repository trains and attacks
REFERENCE_SPEC = UNetSpec(depth=5, base_features=16, num_classes=6, input_size=512)
DESK_SPEC = UNetSpec(depth=4, base_features=8, num_classes=6, input_size=64)


class Network:
    """A built U-Net: spec, named parameters, batchnorm buffers, mode flag."""

    def __init__(self, spec: UNetSpec, seed: int):
        self.spec = spec
        self.seed = seed
        self.training = False
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def set_requires_grad(self, flag: bool) -> None:
        for p in self.params.values():
            p.requires_grad = flag

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()


def _conv_block_names(prefix: str):
    return (f"{prefix}_w", f"{prefix}_b")


def _bn_names(prefix: str):
    return (f"{prefix}_gamma", f"{prefix}_beta", f"{prefix}_mean", f"{prefix}_var")


def parameter_shapes(spec: UNetSpec) -> tuple[dict[str, tuple], dict[str, tuple]]:
    """Named parameter and buffer shapes, in construction order."""
    spec.validate()
    k = spec.kernel_size
    params: dict[str, tuple] = {}
    buffers: dict[str, tuple] = {}

    def conv(prefix, cin, cout, ksize):
        w, b = _conv_block_names(prefix)
        params[w] = (cout, cin, ksize, ksize)
        params[b] = (cout,)

    def bn(prefix, c):
        g, be, m, v = _bn_names(prefix)
        params[g] = (c,)
        params[be] = (c,)
        buffers[m] = (c,)
        buffers[v] = (c,)

    cin = 1
    for level in range(1, spec.depth):
        f = spec.features(level)
        conv(f"enc{level}_conv1", cin, f, k)
        bn(f"enc{level}_bn1", f)
        conv(f"enc{level}_conv2", f, f, k)  # stride-2 downsampler
        bn(f"enc{level}_bn2", f)
        cin = f
    fb = spec.features(spec.depth)
    conv("mid_conv1", cin, fb, k)
    bn("mid_bn1", fb)
    conv("mid_conv2", fb, fb, k)
    bn("mid_bn2", fb)
    for level in range(spec.depth - 1, 0, -1):
        f = spec.features(level)
        f_below = spec.features(level + 1)
        params[f"dec{level}_up_w"] = (f_below, f, 2, 2)
        params[f"dec{level}_up_b"] = (f,)
        conv(f"dec{level}_conv1", 2 * f, f, k)
        bn(f"dec{level}_bn1", f)
        conv(f"dec{level}_conv2", f, f, k)
        bn(f"dec{level}_bn2", f)
    conv("head", spec.base_features, spec.num_classes, 1)
    return params, buffers


def build_unet(spec: UNetSpec, seed: int) -> Network:
    """Construct a network with seeded fan-in-scaled uniform weights.

    Convolution weights draw from U(-1/sqrt(fan_in), 1/sqrt(fan_in)) with
    fan_in = in_channels * k * k; biases start at zero, batchnorm at identity.
    The same (spec, seed) always yields bitwise-identical parameters.
    """
    param_shapes, buffer_shapes = parameter_shapes(spec)
    net = Network(spec, seed)
    rng = np.random.default_rng(seed)
    for name, shape in param_shapes.items():
        if name.endswith("_w"):
            fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
            if name.endswith("_up_w"):
                fan_in = shape[0] * shape[2] * shape[3]
            limit = 1.0 / np.sqrt(fan_in)
            data = rng.uniform(-limit, limit, size=shape)
        elif name.endswith("_gamma"):
            data = np.ones(shape)
        else:  # biases and beta
            data = np.zeros(shape)
        net.params[name] = Tensor(data, requires_grad=True)
    for name, shape in buffer_shapes.items():
        net.buffers[name] = np.zeros(shape) if name.endswith("_mean") else np.ones(shape)
    return net


def _apply_block(net: Network, x: Tensor, conv_prefix: str, bn_prefix: str, stride: int) -> Tensor:
    k = net.spec.kernel_size
    pad = k // 2
    w, b = (net.params[n] for n in _conv_block_names(conv_prefix))
    x = conv2d(x, w, b, stride=stride, padding=pad)
    g, be, m, v = _bn_names(bn_prefix)
    x = batchnorm2d(x, net.params[g], net.params[be], net.buffers[m], net.buffers[v],
                    training=net.training)
    return relu(x)


def forward(net: Network, x: Tensor) -> Tensor:
    """Full forward pass: NCHW image batch to per-pixel class probabilities."""
    spec = net.spec
    if x.data.ndim != 4 or x.shape[1] != 1:
        raise ShapeError(f"expected input of shape (N, 1, H, W), got {x.shape}")
    if x.shape[2] != spec.input_size or x.shape[3] != spec.input_size:
        raise ShapeError(
            f"input spatial size {x.shape[2]}x{x.shape[3]} does not match "
            f"spec input_size {spec.input_size}"
        )
    skips: list[Tensor] = []
    for level in range(1, spec.depth):
        x = _apply_block(net, x, f"enc{level}_conv1", f"enc{level}_bn1", stride=1)
        skips.append(x)
        x = _apply_block(net, x, f"enc{level}_conv2", f"enc{level}_bn2", stride=2)
    x = _apply_block(net, x, "mid_conv1", "mid_bn1", stride=1)
    x = _apply_block(net, x, "mid_conv2", "mid_bn2", stride=1)
    for level in range(spec.depth - 1, 0, -1):
        up_w = net.params[f"dec{level}_up_w"]
        up_b = net.params[f"dec{level}_up_b"]
        x = transposed_conv2d(x, up_w, up_b)
        x = concat_channels(x, skips[level - 1])
        x = _apply_block(net, x, f"dec{level}_conv1", f"dec{level}_bn1", stride=1)
        x = _apply_block(net, x, f"dec{level}_conv2", f"dec{level}_bn2", stride=1)
    w, b = (net.params[n] for n in _conv_block_names("head"))
    logits = conv2d(x, w, b, stride=1, padding=0)
    return channel_softmax(logits)


def predict(net: Network, image: Tensor) -> Tensor:
    """Eval-mode inference; pure (no state is touched, repeat calls agree)."""
    was_training = net.training
    net.training = False
    try:
        return forward(net, image)
    finally:
        net.training = was_training


def argmax_labels(probs) -> np.ndarray:
    """Per-pixel argmax over the channel axis; ties go to the lowest index."""
    data = probs.data if isinstance(probs, Tensor) else np.asarray(probs)
    if data.ndim == 4:
        return np.argmax(data, axis=1).astype(np.int64)
    if data.ndim == 3:
        return np.argmax(data, axis=0).astype(np.int64)
    raise ShapeError(f"expected (N,C,H,W) or (C,H,W) probabilities, got {data.shape}")


def layer_plan(spec: UNetSpec) -> list[tuple[str, int, int]]:
    """(kind, kernel, stride) along the input-to-output chain through the
    bottleneck; the receptive field of the whole network is governed by this
    path since skip connections only shortcut earlier (smaller-field) layers.
    """
    spec.validate()
    k = spec.kernel_size
    plan: list[tuple[str, int, int]] = []
    for _ in range(1, spec.depth):
        plan.append(("conv", k, 1))
        plan.append(("conv", k, 2))
    plan.append(("conv", k, 1))
    plan.append(("conv", k, 1))
    for _ in range(spec.depth - 1, 0, -1):
        plan.append(("tconv", 2, 2))
        plan.append(("conv", k, 1))
        plan.append(("conv", k, 1))
    plan.append(("conv", 1, 1))
    return plan


def field_of_plan(plan) -> int:
    """Receptive field of a layer sequence (square side, in input pixels).

    Standard jump/size recurrence: a conv with kernel k and stride s grows the
    field by (k-1)*jump and multiplies the jump by s. The 2x2/stride-2
    transposed conv maps each output pixel to exactly one input pixel (the
    blocks tile without overlap), so it halves the jump and adds nothing.
    """
    r = 1
    jump = 1
    for kind, k, s in plan:
        if kind == "conv":
            r += (k - 1) * jump
            jump *= s
        elif kind == "tconv":
            if jump % 2 != 0:
                raise ValueError("transposed conv below stride-1 resolution")
            jump //= 2
        else:
            raise ValueError(f"unknown layer kind {kind!r}")
    return r


def receptive_field(spec: UNetSpec) -> int:
    """Theoretical receptive field of the full network."""
    return field_of_plan(layer_plan(spec))


# -- persistence ------------------------------------------------------------


def save_weights(net: Network, path) -> None:
    """Write magic, manifest length, JSON manifest, then raw little-endian
    float64 buffers in manifest order."""
    entries = []
    blobs = []
    for name, p in net.params.items():
        entries.append({"name": name, "shape": list(p.shape), "kind": "param"})
        blobs.append(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    for name, b in net.buffers.items():
        entries.append({"name": name, "shape": list(b.shape), "kind": "buffer"})
        blobs.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    manifest = {
        "format": 1,
        "spec": asdict(net.spec),
        "seed": net.seed,
        "tensors": entries,
    }
    header = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(WEIGHTS_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_weights(path) -> Network:
    """Rebuild a network from a weights file, validating every tensor shape
    against the layout the restored UNetSpec prescribes."""
    with open(path, "rb") as fh:
        magic = fh.read(len(WEIGHTS_MAGIC))
        if magic != WEIGHTS_MAGIC:
            raise ValueError(f"not a weights file: bad magic {magic!r}")
        (header_len,) = struct.unpack("<Q", fh.read(8))
        manifest = json.loads(fh.read(header_len).decode("utf-8"))
        spec = UNetSpec(**manifest["spec"])
        expected_params, expected_buffers = parameter_shapes(spec)
        net = Network(spec, manifest["seed"])
        seen: set[str] = set()
        for entry in manifest["tensors"]:
            name = entry["name"]
            shape = tuple(entry["shape"])
            kind = entry["kind"]
            expected = expected_params if kind == "param" else expected_buffers
            if name not in expected:
                raise ValueError(f"unexpected tensor {name!r} in weights file")
            if shape != expected[name]:
                raise ValueError(
                    f"shape mismatch for {name!r}: file has {shape}, "
                    f"spec requires {expected[name]}"
                )
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(count * 8)
            if len(raw) != count * 8:
                raise ValueError(f"truncated weights file while reading {name!r}")
            data = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)
            if kind == "param":
                net.params[name] = Tensor(data, requires_grad=True)
            else:
                net.buffers[name] = data
            seen.add(f"{kind}:{name}")
        missing = (
            {f"param:{n}" for n in expected_params}
            | {f"buffer:{n}" for n in expected_buffers}
        ) - seen
        if missing:
            raise ValueError(f"weights file missing tensors: {sorted(missing)}")
    return net
