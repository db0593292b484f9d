"""Dense tensors and a reverse-mode autodiff tape for 3D segmentation networks.

The op set is deliberately small: dilated 3D convolution (cross-correlation,
"same" zero padding, stride 1), element-wise addition, ReLU, voxel-wise
softmax cross-entropy, and momentum SGD updates.

Layout contract: buffers are C-contiguous with the last axis fastest;
activations are [channels, depth, height, width]. Convolution accumulates
tap products in a fixed (kz, ky, kx) order, so a dilated kernel and its
zero-inserted equivalent produce identical results, bit for bit: the extra
taps of the zero-inserted kernel contribute exact zeros and the surviving
taps are the same GEMMs in the same order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .errors import ConfigError, DataError, NumericError, ShapeError

FLOAT_DTYPES = (np.float32, np.float64)


class Tensor:
    """N-dimensional float array; thin wrapper enforcing the layout contract."""

    __slots__ = ("data",)

    def __init__(self, data, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = np.ascontiguousarray(arr)

    @classmethod
    def zeros(cls, shape, dtype=np.float32) -> "Tensor":
        return cls(np.zeros(shape, dtype=dtype))

    @classmethod
    def full(cls, shape, value, dtype=np.float32) -> "Tensor":
        return cls(np.full(shape, value, dtype=dtype))

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy())

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype})"


def effective_extent(kernel: int, dilation: int) -> int:
    """Span of a dilated kernel along one axis: k + (k-1)(d-1)."""
    if kernel < 1 or dilation < 1:
        raise ConfigError(
            f"kernel and dilation must be >= 1, got kernel={kernel} dilation={dilation}"
        )
    return kernel + (kernel - 1) * (dilation - 1)


@dataclass
class ConvKernel:
    """Weights [out_ch, in_ch, k, k, k] plus bias [out_ch] for one conv layer."""

    weights: Tensor
    bias: Tensor
    stride: int = 1
    dilation: int = 1

    def __post_init__(self):
        w = self.weights.data
        if w.ndim != 5:
            raise ShapeError(f"conv weights must be 5-d [out,in,k,k,k], got {w.shape}")
        if not (w.shape[2] == w.shape[3] == w.shape[4]):
            raise ShapeError(f"conv kernels must be cubic, got {w.shape[2:]}")
        if self.bias.data.shape != (w.shape[0],):
            raise ShapeError(
                f"bias shape {self.bias.data.shape} does not match out_ch {w.shape[0]}"
            )
        if self.stride < 1 or self.dilation < 1:
            raise ConfigError(
                f"stride and dilation must be >= 1, got stride={self.stride} "
                f"dilation={self.dilation}"
            )

    @property
    def out_channels(self) -> int:
        return self.weights.data.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.data.shape[1]

    @property
    def kernel_size(self) -> int:
        return self.weights.data.shape[2]

    @property
    def effective_extent(self) -> int:
        return effective_extent(self.kernel_size, self.dilation)


# ---------------------------------------------------------------------------
# raw array kernels
# ---------------------------------------------------------------------------


def _pad_amounts(kernel: int, dilation: int) -> tuple[int, int]:
    eff = effective_extent(kernel, dilation)
    lo = (eff - 1) // 2
    return lo, eff - 1 - lo


def _conv3d_arrays(x: np.ndarray, w: np.ndarray, b: np.ndarray, dilation: int) -> np.ndarray:
    """Dilated cross-correlation with same padding; x [in,D,H,W] -> [out,D,H,W].

    Inner compute hops to channels-last so each tap is one contiguous GEMM:
    out[N, out_ch] += patch_t[N, in_ch] @ w_t[in_ch, out_ch], taps iterated in
    ascending (kz, ky, kx) order. That ordering is a correctness contract, not
    an optimisation: it is what makes zero-inserted kernels bit-equivalent.
    """
    out_ch, in_ch, k = w.shape[0], w.shape[1], w.shape[2]
    d_sp, h_sp, w_sp = x.shape[1:]
    lo, hi = _pad_amounts(k, dilation)
    xl = np.ascontiguousarray(x.transpose(1, 2, 3, 0))
    if lo or hi:
        xl = np.pad(xl, ((lo, hi), (lo, hi), (lo, hi), (0, 0)))
    wt = np.ascontiguousarray(w.transpose(2, 3, 4, 1, 0)).reshape(k * k * k, in_ch, out_ch)
    n = d_sp * h_sp * w_sp
    acc = np.zeros((n, out_ch), dtype=x.dtype)
    buf = np.empty_like(acc)
    t = 0
    for kz in range(k):
        z0 = kz * dilation
        for ky in range(k):
            y0 = ky * dilation
            for kx in range(k):
                x0 = kx * dilation
                patch = xl[z0 : z0 + d_sp, y0 : y0 + h_sp, x0 : x0 + w_sp, :].reshape(n, in_ch)
                np.matmul(patch, wt[t], out=buf)
                acc += buf
                t += 1
    acc += b
    return np.ascontiguousarray(acc.reshape(d_sp, h_sp, w_sp, out_ch).transpose(3, 0, 1, 2))


def _conv3d_backward_arrays(
    g: np.ndarray,
    x: np.ndarray,
    w: np.ndarray,
    dilation: int,
    need_grad_input: bool = True,
) -> tuple[np.ndarray | None, np.ndarray, np.ndarray]:
    """Gradients of _conv3d_arrays w.r.t. input, weights, and bias."""
    out_ch, in_ch, k = w.shape[0], w.shape[1], w.shape[2]
    d_sp, h_sp, w_sp = x.shape[1:]
    lo, hi = _pad_amounts(k, dilation)
    n = d_sp * h_sp * w_sp
    gl = np.ascontiguousarray(g.transpose(1, 2, 3, 0)).reshape(n, out_ch)
    xl = np.ascontiguousarray(x.transpose(1, 2, 3, 0))
    if lo or hi:
        xl = np.pad(xl, ((lo, hi), (lo, hi), (lo, hi), (0, 0)))
    wt = np.ascontiguousarray(w.transpose(2, 3, 4, 1, 0)).reshape(k * k * k, in_ch, out_ch)
    gw_t = np.empty_like(wt)
    gxp = np.zeros_like(xl) if need_grad_input else None
    t = 0
    for kz in range(k):
        z0 = kz * dilation
        for ky in range(k):
            y0 = ky * dilation
            for kx in range(k):
                x0 = kx * dilation
                patch = xl[z0 : z0 + d_sp, y0 : y0 + h_sp, x0 : x0 + w_sp, :].reshape(n, in_ch)
                np.matmul(patch.T, gl, out=gw_t[t])
                if need_grad_input:
                    gpatch = gl @ wt[t].T
                    gxp[z0 : z0 + d_sp, y0 : y0 + h_sp, x0 : x0 + w_sp, :] += gpatch.reshape(
                        d_sp, h_sp, w_sp, in_ch
                    )
                t += 1
    gw = np.ascontiguousarray(
        gw_t.reshape(k, k, k, in_ch, out_ch).transpose(4, 3, 0, 1, 2)
    )
    gb = gl.sum(axis=0)
    gx = None
    if need_grad_input:
        core = gxp[lo : lo + d_sp, lo : lo + h_sp, lo : lo + w_sp, :]
        gx = np.ascontiguousarray(core.transpose(3, 0, 1, 2))
    return gx, gw, gb


def _softmax_ce_arrays(logits: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean voxel-wise cross-entropy; returns (scalar loss, softmax [C, N])."""
    c = logits.shape[0]
    lf = logits.reshape(c, -1)
    lab = labels.reshape(-1)
    bad = (lab < 0) | (lab >= c)
    if bad.any():
        flat = int(np.argmax(bad))
        voxel = tuple(int(v) for v in np.unravel_index(flat, labels.shape))
        raise DataError(f"label {int(lab[flat])} at voxel {voxel} outside [0, {c - 1}]")
    m = lf.max(axis=0)
    z = lf - m
    e = np.exp(z)
    s = e.sum(axis=0)
    idx = np.arange(lab.size)
    logp = z[lab, idx] - np.log(s)
    loss = np.asarray(-logp.mean(), dtype=logits.dtype)
    return loss, e / s


def _softmax_ce_backward_arrays(
    softmax: np.ndarray, labels: np.ndarray, upstream: float, out_shape
) -> np.ndarray:
    lab = labels.reshape(-1)
    gl = softmax.copy()
    gl[lab, np.arange(lab.size)] -= 1.0
    gl *= upstream / lab.size
    return gl.reshape(out_shape).astype(softmax.dtype, copy=False)


# ---------------------------------------------------------------------------
# functional op surface
# ---------------------------------------------------------------------------


def _check_conv_operands(x: Tensor, kernel: ConvKernel):
    if x.ndim != 4:
        raise ShapeError(f"conv input must be [in_ch,D,H,W], got {x.shape}")
    if x.shape[0] != kernel.in_channels:
        raise ShapeError(
            f"input channels {x.shape} do not match kernel "
            f"[out,in,k,k,k]={kernel.weights.shape}"
        )
    if kernel.stride != 1:
        raise ConfigError("only stride 1 is supported (same-padding networks)")
    if x.dtype != kernel.weights.dtype:
        raise ConfigError(
            f"dtype mismatch: input {x.dtype} vs kernel {kernel.weights.dtype}"
        )


def conv3d(x: Tensor, kernel: ConvKernel) -> Tensor:
    """Same-padded dilated convolution; spatial dims are preserved."""
    _check_conv_operands(x, kernel)
    return Tensor(_conv3d_arrays(x.data, kernel.weights.data, kernel.bias.data, kernel.dilation))


def conv3d_backward(grad_out: Tensor, x: Tensor, kernel: ConvKernel) -> tuple[Tensor, Tensor, Tensor]:
    """Gradients (d input, d weights, d bias) for conv3d."""
    _check_conv_operands(x, kernel)
    expected = (kernel.out_channels,) + x.shape[1:]
    if grad_out.shape != expected:
        raise ShapeError(f"grad_out shape {grad_out.shape} does not match output {expected}")
    gx, gw, gb = _conv3d_backward_arrays(
        grad_out.data, x.data, kernel.weights.data, kernel.dilation
    )
    return Tensor(gx), Tensor(gw), Tensor(gb)


def elementwise_add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add operands differ: {a.shape} vs {b.shape}")
    return Tensor(a.data + b.data)


def relu(x: Tensor) -> Tensor:
    return Tensor(np.maximum(x.data, 0))


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> float:
    """Mean over voxels of -log softmax(logits)[label]; labels int [D,H,W]."""
    if logits.ndim != 4:
        raise ShapeError(f"logits must be [C,D,H,W], got {logits.shape}")
    if logits.shape[1:] != labels.shape:
        raise ShapeError(
            f"labels shape {labels.shape} does not match logits {logits.shape}"
        )
    loss, _ = _softmax_ce_arrays(logits.data, labels)
    return float(loss)


def zero_insert_kernel(kernel: ConvKernel) -> ConvKernel:
    """Expand a dilated kernel into its explicit zero-inserted d=1 equivalent."""
    w = kernel.weights.data
    k, d = kernel.kernel_size, kernel.dilation
    eff = effective_extent(k, d)
    out = np.zeros(w.shape[:2] + (eff, eff, eff), dtype=w.dtype)
    out[:, :, ::d, ::d, ::d] = w
    return ConvKernel(Tensor(out), kernel.bias.copy(), stride=kernel.stride, dilation=1)


# ---------------------------------------------------------------------------
# autodiff tape
# ---------------------------------------------------------------------------


@dataclass
class Node:
    index: int
    op: str  # input | param | conv3d | add | relu | softmax_ce
    inputs: tuple[int, ...]
    value: np.ndarray
    grad: np.ndarray | None = None
    name: str | None = None
    attrs: dict = field(default_factory=dict)

    @property
    def shape(self):
        return self.value.shape


class Graph:
    """Append-only tape of operations, re-runnable and differentiable.

    Nodes always reference earlier nodes, so a single forward sweep of the
    list is a valid evaluation order and the reverse sweep backpropagates.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    # -- construction -------------------------------------------------------

    def _append(self, op, inputs, value, name=None, **attrs) -> Node:
        node = Node(len(self.nodes), op, tuple(n.index for n in inputs), value, name=name, attrs=attrs)
        self.nodes.append(node)
        return node

    def tensor_input(self, t: Tensor, name: str | None = None) -> Node:
        return self._append("input", (), t.data, name=name)

    def parameter(self, t: Tensor, name: str) -> Node:
        # shares the Tensor's buffer so optimizer updates are visible on recompute
        return self._append("param", (), t.data, name=name)

    def conv3d(self, x: Node, weights: Node, bias: Node, dilation: int = 1) -> Node:
        if x.value.shape[0] != weights.value.shape[1]:
            raise ShapeError(
                f"input channels {x.value.shape} do not match kernel {weights.value.shape}"
            )
        value = _conv3d_arrays(x.value, weights.value, bias.value, dilation)
        return self._append("conv3d", (x, weights, bias), value, dilation=dilation)

    def add(self, a: Node, b: Node, tag: str | None = None) -> Node:
        if a.value.shape != b.value.shape:
            raise ShapeError(f"add operands differ: {a.value.shape} vs {b.value.shape}")
        return self._append("add", (a, b), a.value + b.value, tag=tag)

    def relu(self, x: Node) -> Node:
        return self._append("relu", (x,), np.maximum(x.value, 0))

    def softmax_cross_entropy(self, logits: Node, labels: np.ndarray) -> Node:
        if logits.value.shape[1:] != labels.shape:
            raise ShapeError(
                f"labels shape {labels.shape} does not match logits {logits.value.shape}"
            )
        loss, softmax = _softmax_ce_arrays(logits.value, labels)
        return self._append("softmax_ce", (logits,), loss, labels=labels, softmax=softmax)

    # -- execution ----------------------------------------------------------

    @property
    def output(self) -> Node:
        if not self.nodes:
            raise ConfigError("empty graph has no output")
        return self.nodes[-1]

    def parameters(self) -> list[Node]:
        return [n for n in self.nodes if n.op == "param"]

    def recompute(self) -> None:
        """Re-evaluate every non-leaf node from current leaf values, in order."""
        for node in self.nodes:
            ins = [self.nodes[i].value for i in node.inputs]
            if node.op in ("input", "param"):
                continue
            if node.op == "conv3d":
                node.value = _conv3d_arrays(ins[0], ins[1], ins[2], node.attrs["dilation"])
            elif node.op == "add":
                node.value = ins[0] + ins[1]
            elif node.op == "relu":
                node.value = np.maximum(ins[0], 0)
            elif node.op == "softmax_ce":
                node.value, node.attrs["softmax"] = _softmax_ce_arrays(
                    ins[0], node.attrs["labels"]
                )
            else:  # pragma: no cover
                raise AssertionError(f"unknown op {node.op}")

    def backward(self, loss: Node | None = None) -> None:
        """Fill .grad on every node reachable from the scalar loss node."""
        loss = loss or self.output
        if loss.value.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.value.shape}")
        for node in self.nodes:
            node.grad = None
        loss.grad = np.ones_like(loss.value)

        def accumulate(idx: int, g: np.ndarray):
            node = self.nodes[idx]
            if node.grad is None:
                node.grad = g.copy()
            else:
                node.grad += g

        for node in reversed(self.nodes[: loss.index + 1]):
            if node.grad is None or node.op in ("input", "param"):
                continue
            g = node.grad
            ins = node.inputs
            if node.op == "conv3d":
                x_node = self.nodes[ins[0]]
                need_gx = x_node.op != "input"
                gx, gw, gb = _conv3d_backward_arrays(
                    g,
                    x_node.value,
                    self.nodes[ins[1]].value,
                    node.attrs["dilation"],
                    need_grad_input=need_gx,
                )
                if need_gx:
                    accumulate(ins[0], gx)
                accumulate(ins[1], gw)
                accumulate(ins[2], gb)
            elif node.op == "add":
                accumulate(ins[0], g)
                accumulate(ins[1], g)
            elif node.op == "relu":
                accumulate(ins[0], g * (self.nodes[ins[0]].value > 0))
            elif node.op == "softmax_ce":
                gl = _softmax_ce_backward_arrays(
                    node.attrs["softmax"],
                    node.attrs["labels"],
                    float(g),
                    self.nodes[ins[0]].value.shape,
                )
                accumulate(ins[0], gl)

    def count_nodes(self, op: str, tag: str | None = None) -> int:
        return sum(
            1
            for n in self.nodes
            if n.op == op and (tag is None or n.attrs.get("tag") == tag)
        )


# ---------------------------------------------------------------------------
# optimizer and gradient checking
# ---------------------------------------------------------------------------


class MomentumSGD:
    """SGD with classical momentum; velocity buffers persist across steps."""

    def __init__(self, lr: float, momentum: float = 0.9):
        if lr <= 0:
            raise ConfigError(f"learning rate must be > 0, got {lr}")
        if not 0 <= momentum < 1:
            raise ConfigError(f"momentum must be in [0, 1), got {momentum}")
        self.lr = lr
        self.momentum = momentum
        self.velocities: dict[str, np.ndarray] = {}

    def step(self, params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray]) -> None:
        for name, p in params.items():
            g = grads[name]
            g = g.data if isinstance(g, Tensor) else g
            if g.shape != p.shape:
                raise ShapeError(
                    f"gradient shape {g.shape} does not match parameter "
                    f"'{name}' shape {p.shape}"
                )
            if not np.isfinite(g).all():
                raise NumericError(f"non-finite gradient for parameter '{name}'")
            v = self.velocities.get(name)
            if v is None:
                v = np.zeros_like(p.data)
                self.velocities[name] = v
            v *= self.momentum
            v += g
            p.data -= self.lr * v


def finite_difference_check(
    graph: Graph,
    param: Node,
    eps: float,
    max_entries: int = 24,
    seed: int = 0,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Requires a float64 graph whose output is scalar; samples up to
    ``max_entries`` coordinates of ``param``.
    """
    if eps <= 0:
        raise ConfigError(f"finite-difference step must be > 0, got {eps}")
    out = graph.output
    if out.value.size != 1:
        raise ShapeError(f"graph output must be scalar, got shape {out.value.shape}")
    if param.value.dtype != np.float64:
        raise ConfigError("finite-difference checks require a float64 graph")

    graph.recompute()
    graph.backward()
    analytic = param.grad.reshape(-1).copy()

    rng = np.random.default_rng(seed)
    size = param.value.size
    if size <= max_entries:
        idxs = np.arange(size)
    else:
        idxs = rng.choice(size, size=max_entries, replace=False)

    flat = param.value.reshape(-1)
    worst = 0.0
    for i in idxs:
        orig = flat[i]
        flat[i] = orig + eps
        graph.recompute()
        lp = graph.output.value.item()
        flat[i] = orig - eps
        graph.recompute()
        lm = graph.output.value.item()
        flat[i] = orig
        numeric = (lp - lm) / (2 * eps)
        a = analytic[i]
        rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, rel)
    graph.recompute()
    return worst
