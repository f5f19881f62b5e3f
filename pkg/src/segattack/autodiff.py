"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Graphs are built define-by-run: every operation returns a new ``Tensor`` that
remembers its parents and a closure computing parent gradients. Calling
``backward()`` on a scalar result walks the recorded graph once in reverse
topological order and accumulates gradients (summed over all paths) into every
tensor that has ``requires_grad`` set.

Only the operations needed by a small segmentation network and its input-space
attacks are provided: 2-d (strided) convolution, 2x2/stride-2 transposed
convolution, batch normalization, ReLU, per-pixel channel softmax, channel
concatenation, and basic elementwise/reduction arithmetic.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with an operation."""


class GraphError(RuntimeError):
    """Raised when backward is requested on an invalid or missing graph."""


class Tensor:
    """A dense float64 array participating in a differentiable computation.

    ``grad`` is populated (same shape as ``data``) by ``backward()`` for every
    tensor on the path to the loss that has ``requires_grad=True``. Leaf
    tensors keep accumulating until ``zero_grad()``.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn", "_op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: Callable[[np.ndarray], None] | None = None
        self._op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def backward(self) -> None:
        """Backpropagate from this scalar through the recorded graph.

        Gradients sum over all paths; each graph node is visited exactly once.
        """
        if not self._parents:
            raise GraphError("backward() before any forward pass was recorded")
        if self.data.size != 1:
            raise ShapeError(f"backward() requires a scalar loss, got shape {self.shape}")
        order = topological_order(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)

    # -- arithmetic sugar -------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -float(other))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def sum(self) -> "Tensor":
        return tensor_sum(self)

    def mean(self) -> "Tensor":
        return mul(tensor_sum(self), 1.0 / self.data.size)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op!r}, requires_grad={self.requires_grad})"


def topological_order(root: Tensor) -> list[Tensor]:
    """Return the recorded graph below ``root`` in topological order.

    Iterative post-order so deep attack/training graphs never hit the Python
    recursion limit. The result lists parents before children.
    """
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def make_node(
    data: np.ndarray,
    parents: Sequence[Tensor],
    backward_fn: Callable[[np.ndarray], None],
    op: str,
) -> Tensor:
    """Create a graph node; ``backward_fn`` receives d(loss)/d(node)."""
    out = Tensor(data)
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
        out._op = op
    return out


def accumulate_grad(t: Tensor, g: np.ndarray) -> None:
    if t.requires_grad:
        t.grad = g if t.grad is None else t.grad + g


def _as_operand(x) -> Tensor | float:
    if isinstance(x, Tensor):
        return x
    if np.ndim(x) == 0:
        return float(x)
    raise TypeError(f"expected Tensor or scalar, got {type(x).__name__}")


# -- elementwise and reduction ops ----------------------------------------


def add(a: Tensor, b) -> Tensor:
    b = _as_operand(b)
    if isinstance(b, float):
        out_data = a.data + b

        def bw(g):
            accumulate_grad(a, g)

        return make_node(out_data, (a,), bw, "add")
    if a.shape != b.shape:
        raise ShapeError(f"add shape mismatch: {a.shape} vs {b.shape}")

    def bw2(g):
        accumulate_grad(a, g)
        accumulate_grad(b, g)

    return make_node(a.data + b.data, (a, b), bw2, "add")


def mul(a: Tensor, b) -> Tensor:
    b = _as_operand(b)
    if isinstance(b, float):

        def bw(g):
            accumulate_grad(a, g * b)

        return make_node(a.data * b, (a,), bw, "mul")
    if a.shape != b.shape:
        raise ShapeError(f"mul shape mismatch: {a.shape} vs {b.shape}")

    def bw2(g):
        accumulate_grad(a, g * b.data)
        accumulate_grad(b, g * a.data)

    return make_node(a.data * b.data, (a, b), bw2, "mul")


def tensor_sum(x: Tensor) -> Tensor:
    def bw(g):
        accumulate_grad(x, np.broadcast_to(g, x.shape).copy() if g.shape != x.shape else g)

    return make_node(np.sum(x.data, keepdims=False), (x,), bw, "sum")


def relu(x: Tensor) -> Tensor:
    """Rectifier with subgradient 0 at exactly 0."""
    mask = x.data > 0
    out_data = np.where(mask, x.data, 0.0)

    def bw(g):
        accumulate_grad(x, g * mask)

    return make_node(out_data, (x,), bw, "relu")


# -- convolution -----------------------------------------------------------


def _im2col(xp: np.ndarray, k: int, stride: int) -> np.ndarray:
    """Gather k x k patches of padded input into columns (N, C*k*k, Ho*Wo)."""
    n, c, hp, wp = xp.shape
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    cols = np.empty((n, c, k, k, ho, wo), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols.reshape(n, c * k * k, ho * wo)


def _col2im(gcols: np.ndarray, xp_shape, k: int, stride: int) -> np.ndarray:
    """Scatter-add column gradients back onto the padded input layout."""
    n, c, hp, wp = xp_shape
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    g = gcols.reshape(n, c, k, k, ho, wo)
    gx = np.zeros(xp_shape, dtype=gcols.dtype)
    for i in range(k):
        for j in range(k):
            gx[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += g[:, :, i, j]
    return gx


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of NCHW input with OIkk kernel, zero padding.

    Output extent follows floor((H + 2*padding - k)/stride) + 1; gradients are
    produced for input, kernel, and bias.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d input must be NCHW, got shape {x.shape}")
    if kernel.data.ndim != 4 or kernel.shape[2] != kernel.shape[3]:
        raise ShapeError(f"conv2d kernel must be (Cout, Cin, k, k), got {kernel.shape}")
    n, cin, h, w = x.shape
    cout, cin_k, k, _ = kernel.shape
    if cin_k != cin:
        raise ShapeError(
            f"conv2d channel mismatch: input has {cin} channels, kernel expects {cin_k}"
        )
    if k % 2 == 0:
        raise ValueError(f"conv2d kernel size must be odd, got {k}")
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d needs stride >= 1 and padding >= 0, got {stride}, {padding}")
    if bias.shape != (cout,):
        raise ShapeError(f"conv2d bias must have shape ({cout},), got {bias.shape}")
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d output would be empty: input {h}x{w}, k={k}, stride={stride}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(xp, k, stride)
    wm = kernel.data.reshape(cout, -1)
    out = np.matmul(wm[None], cols)
    out += bias.data.reshape(1, cout, 1)
    out_data = out.reshape(n, cout, ho, wo)

    # columns are only needed for the kernel gradient; drop them otherwise
    saved_cols = cols if kernel.requires_grad else None
    xp_shape = xp.shape

    def bw(g):
        if x.requires_grad:
            if stride == 1:
                # input gradient of a stride-1 conv is a full correlation of
                # the output gradient with the flipped, channel-swapped kernel
                gop = np.pad(g, ((0, 0), (0, 0), (k - 1, k - 1), (k - 1, k - 1)))
                gcols = _im2col(gop, k, 1)
                wf = kernel.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(cin, -1)
                gxp = np.matmul(wf[None], gcols).reshape(n, cin, *xp_shape[2:])
            else:
                gcols = np.matmul(wm.T[None], g.reshape(n, cout, ho * wo))
                gxp = _col2im(gcols, xp_shape, k, stride)
            if padding:
                gxp = gxp[:, :, padding : padding + h, padding : padding + w]
            accumulate_grad(x, gxp)
        if kernel.requires_grad or bias.requires_grad:
            go = g.reshape(n, cout, ho * wo)
            if kernel.requires_grad:
                gw = np.matmul(go, saved_cols.transpose(0, 2, 1)).sum(axis=0)
                accumulate_grad(kernel, gw.reshape(kernel.shape))
            if bias.requires_grad:
                accumulate_grad(bias, go.sum(axis=(0, 2)))

    return make_node(out_data, (x, kernel, bias), bw, "conv2d")


def transposed_conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 2) -> Tensor:
    """2x upsampling via transposed convolution with a 2x2 kernel, stride 2.

    Kernel layout is (Cin, Cout, 2, 2); each input pixel spreads into a 2x2
    output block, so output extents are exactly stride times the input's.
    """
    if stride != 2:
        raise ValueError(f"transposed_conv2d supports stride 2 only, got {stride}")
    if x.data.ndim != 4:
        raise ShapeError(f"transposed_conv2d input must be NCHW, got shape {x.shape}")
    n, cin, h, w = x.shape
    if h < 1 or w < 1:
        raise ShapeError(f"transposed_conv2d needs positive extents, got {h}x{w}")
    if kernel.data.ndim != 4 or kernel.shape[2:] != (2, 2):
        raise ShapeError(f"transposed_conv2d kernel must be (Cin, Cout, 2, 2), got {kernel.shape}")
    if kernel.shape[0] != cin:
        raise ShapeError(
            f"transposed_conv2d channel mismatch: input has {cin}, kernel expects {kernel.shape[0]}"
        )
    cout = kernel.shape[1]
    if bias.shape != (cout,):
        raise ShapeError(f"transposed_conv2d bias must have shape ({cout},), got {bias.shape}")

    xf = x.data.reshape(n, cin, h * w)
    wm = kernel.data.reshape(cin, cout * 4)
    blocks = np.matmul(wm.T[None], xf).reshape(n, cout, 2, 2, h, w)
    out_data = np.empty((n, cout, 2 * h, 2 * w), dtype=x.data.dtype)
    for di in range(2):
        for dj in range(2):
            out_data[:, :, di::2, dj::2] = blocks[:, :, di, dj]
    out_data += bias.data.reshape(1, cout, 1, 1)

    def bw(g):
        gblocks = np.empty((n, cout, 2, 2, h, w), dtype=g.dtype)
        for di in range(2):
            for dj in range(2):
                gblocks[:, :, di, dj] = g[:, :, di::2, dj::2]
        gflat = gblocks.reshape(n, cout * 4, h * w)
        if x.requires_grad:
            accumulate_grad(x, np.matmul(wm[None], gflat).reshape(n, cin, h, w))
        if kernel.requires_grad:
            gw = np.matmul(xf, gflat.transpose(0, 2, 1)).sum(axis=0)
            accumulate_grad(kernel, gw.reshape(kernel.shape))
        if bias.requires_grad:
            accumulate_grad(bias, g.sum(axis=(0, 2, 3)))

    return make_node(out_data, (x, kernel, bias), bw, "transposed_conv2d")


# -- normalization and activations -----------------------------------------


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization over NCHW input.

    Training mode normalizes by batch statistics and updates the running
    buffers in place (``running <- (1-momentum)*running + momentum*batch``).
    Eval mode is a fixed per-channel affine map of the running statistics, so
    its backward is affine as well.
    """
    if eps <= 0:
        raise ValueError(f"batchnorm eps must be > 0, got {eps}")
    if x.data.ndim != 4:
        raise ShapeError(f"batchnorm input must be NCHW, got shape {x.shape}")
    n, c, h, w = x.shape
    for name, v in (("gamma", gamma.data), ("beta", beta.data),
                    ("running_mean", running_mean), ("running_var", running_var)):
        if v.shape != (c,):
            raise ShapeError(f"batchnorm {name} must have shape ({c},), got {v.shape}")
    if np.any(running_var < 0):
        raise ValueError("batchnorm running_var must be non-negative")

    if training:
        axes = (0, 2, 3)
        m = n * h * w
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)  # biased, matches the backward formula
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mean.reshape(1, c, 1, 1)) * inv_std.reshape(1, c, 1, 1)
        out_data = xhat * gamma.data.reshape(1, c, 1, 1) + beta.data.reshape(1, c, 1, 1)

        def bw(g):
            if beta.requires_grad:
                accumulate_grad(beta, g.sum(axis=axes))
            gxhat_sum = (g * xhat).sum(axis=axes)
            if gamma.requires_grad:
                accumulate_grad(gamma, gxhat_sum)
            if x.requires_grad:
                gscaled = g * gamma.data.reshape(1, c, 1, 1)
                s1 = gscaled.sum(axis=axes, keepdims=True)
                s2 = ((gscaled * xhat).sum(axis=axes) * inv_std).reshape(1, c, 1, 1)
                gx = gscaled * inv_std.reshape(1, c, 1, 1)
                gx -= s1 * (inv_std.reshape(1, c, 1, 1) / m)
                gx -= xhat * (s2 / m)
                accumulate_grad(x, gx)

        return make_node(out_data, (x, gamma, beta), bw, "batchnorm-train")

    inv_std = 1.0 / np.sqrt(running_var + eps)
    scale = (gamma.data * inv_std).reshape(1, c, 1, 1)
    shift = (beta.data - gamma.data * running_mean * inv_std).reshape(1, c, 1, 1)
    out_data = x.data * scale + shift
    xhat_mean = running_mean.copy()
    inv_std_c = inv_std.copy()

    def bw_eval(g):
        if x.requires_grad:
            accumulate_grad(x, g * scale)
        if gamma.requires_grad:
            xhat = (x.data - xhat_mean.reshape(1, c, 1, 1)) * inv_std_c.reshape(1, c, 1, 1)
            accumulate_grad(gamma, (g * xhat).sum(axis=(0, 2, 3)))
        if beta.requires_grad:
            accumulate_grad(beta, g.sum(axis=(0, 2, 3)))

    return make_node(out_data, (x, gamma, beta), bw_eval, "batchnorm-eval")


def channel_softmax(x: Tensor) -> Tensor:
    """Softmax across the channel axis, per pixel; numerically stabilized."""
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    out_data = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        if x.requires_grad:
            dot = (g * out_data).sum(axis=1, keepdims=True)
            accumulate_grad(x, out_data * (g - dot))

    return make_node(out_data, (x,), bw, "channel_softmax")


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise ShapeError("concat_channels expects NCHW tensors")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat_channels spatial/batch mismatch: {a.shape} vs {b.shape}")
    ca = a.shape[1]
    out_data = np.concatenate([a.data, b.data], axis=1)

    def bw(g):
        accumulate_grad(a, g[:, :ca])
        accumulate_grad(b, g[:, ca:])

    return make_node(out_data, (a, b), bw, "concat_channels")


# -- gradient checking ------------------------------------------------------


@dataclass
class FiniteDiffReport:
    """Outcome of comparing an analytic gradient with central differences."""

    max_rel_error: float
    passed: bool
    worst_index: tuple[int, ...] | None
    note: str = ""


def finite_diff_check(
    op_closure: Callable[[Tensor], Tensor],
    point: np.ndarray,
    step: float = 1e-6,
    tolerance: float = 1e-4,
) -> FiniteDiffReport:
    """Compare the analytic gradient of a scalar-valued closure at ``point``
    against central finite differences, elementwise.

    The relative error is normalized by the largest gradient magnitude seen in
    either gradient, so near-zero entries do not inflate the ratio. Non-finite
    values anywhere fail the check with the offending location.
    """
    if step <= 0:
        raise ValueError(f"finite_diff_check step must be > 0, got {step}")
    point = np.asarray(point, dtype=np.float64)

    x = Tensor(point.copy(), requires_grad=True)
    out = op_closure(x)
    if out.data.size != 1:
        raise ShapeError("op_closure must produce a scalar")
    out.backward()
    analytic = x.grad.copy() if x.grad is not None else np.zeros_like(point)

    numeric = np.empty_like(point)
    flat = point.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        f_plus = op_closure(Tensor(point)).item()
        flat[i] = orig - step
        f_minus = op_closure(Tensor(point)).item()
        flat[i] = orig
        num_flat[i] = (f_plus - f_minus) / (2.0 * step)

    bad = ~np.isfinite(analytic) | ~np.isfinite(numeric)
    if np.any(bad):
        idx = tuple(int(v) for v in np.argwhere(bad)[0])
        return FiniteDiffReport(float("inf"), False, idx, note=f"non-finite value at {idx}")

    diff = np.abs(analytic - numeric)
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    if scale == 0.0:
        return FiniteDiffReport(0.0, True, None)
    max_rel = float(diff.max() / scale)
    worst = tuple(int(v) for v in np.unravel_index(int(diff.argmax()), diff.shape))
    return FiniteDiffReport(max_rel, max_rel < tolerance, worst)
