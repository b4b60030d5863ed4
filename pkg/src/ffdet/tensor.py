"""Dense tensors with reverse-mode automatic differentiation.

Only the operations the detector needs are provided. Every differentiable
operation records a :class:`Node` on its output; :func:`backward` collects
the nodes reachable from a scalar loss into a :class:`ComputationTape`
(topologically ordered) and replays it in reverse.

Binary elementwise operations never broadcast. Channel bias addition is
handled inside the convolution operators.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    """N-dimensional float array with an optional gradient accumulator."""

    __slots__ = ("data", "requires_grad", "grad", "_node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._node: Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> "ComputationTape":
        return backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # arithmetic sugar; shapes must match exactly
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)


@dataclass
class Node:
    """One recorded operation: inputs, output, and a backward rule.

    ``backward_fn`` maps the output gradient to one gradient (or None) per
    input, in input order.
    """

    op: str
    inputs: tuple[Tensor, ...]
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class ComputationTape:
    """Nodes in topological order: every node's inputs precede it."""

    nodes: list[tuple[Node, Tensor]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.nodes)

    def ops(self) -> list[str]:
        return [node.op for node, _ in self.nodes]


def _needs_grad(*tensors: Tensor) -> bool:
    return any(t.requires_grad for t in tensors)


def _make(data: np.ndarray, op: str, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor(data)
    if _needs_grad(*inputs):
        out.requires_grad = True
        out._node = Node(op, inputs, backward_fn)
    return out


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or np.float64))


def build_tape(loss: Tensor) -> ComputationTape:
    """Topologically sort the nodes reachable from ``loss``."""
    order: list[tuple[Node, Tensor]] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        t, expanded = stack.pop()
        if t._node is None:
            continue
        if expanded:
            order.append((t._node, t))
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        for inp in reversed(t._node.inputs):
            if inp._node is not None and id(inp) not in seen:
                stack.append((inp, False))
    return ComputationTape(order)


def backward(loss: Tensor, tape: ComputationTape | None = None) -> ComputationTape:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape is None:
        tape = build_tape(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node, out in reversed(tape.nodes):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        in_grads = node.backward_fn(g)
        for inp, ig in zip(node.inputs, in_grads):
            if ig is None or not inp.requires_grad:
                continue
            if inp._node is None:
                inp.grad = ig.astype(inp.data.dtype, copy=True) if inp.grad is None else inp.grad + ig
            else:
                prev = grads.get(id(inp))
                grads[id(inp)] = ig if prev is None else prev + ig
    if loss._node is None and loss.requires_grad:
        loss.grad = loss.grad + 1.0
    return tape


# ---------------------------------------------------------------- elementwise


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape} (no broadcasting)")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "add")
    return _make(a.data + b.data, "add", (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, "mul", (a, b), lambda g: (g * bd, g * ad))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    # np.maximum keeps NaN visible downstream
    return _make(np.maximum(x.data, 0).astype(x.dtype), "relu", (x,), lambda g: (g * mask,))


def stable_sigmoid(z: np.ndarray) -> np.ndarray:
    """1/(1+exp(-z)) without overflow for large |z|."""
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(z.dtype, copy=False)


def sigmoid(x: Tensor) -> Tensor:
    s = stable_sigmoid(x.data)
    return _make(s, "sigmoid", (x,), lambda g: (g * s * (1.0 - s),))


def elementwise(op: str, a: Tensor, b: Tensor | None = None) -> Tensor:
    """Dispatch by name: add, mul, relu, sigmoid."""
    if op == "add":
        return add(a, b)
    if op == "mul":
        return mul(a, b)
    if op == "relu":
        return relu(a)
    if op == "sigmoid":
        return sigmoid(a)
    raise ValueError(f"unknown elementwise op {op!r}")


def sum_all(x: Tensor) -> Tensor:
    shape, dt = x.shape, x.dtype
    return _make(np.asarray(x.data.sum(), dtype=dt), "sum", (x,), lambda g: (np.full(shape, g, dtype=dt),))


def scale(x: Tensor, c: float) -> Tensor:
    return _make(x.data * c, "scale", (x,), lambda g: (g * c,))


def add_scalars(terms: Sequence[Tensor], coeffs: Sequence[float] | None = None) -> Tensor:
    """Weighted sum of scalar tensors: sum_i c_i * t_i."""
    if coeffs is None:
        coeffs = [1.0] * len(terms)
    val = sum(float(c) * t.data for c, t in zip(coeffs, terms))
    dt = terms[0].dtype if terms else np.float64
    out = np.asarray(val, dtype=dt)
    return _make(out, "add_scalars", tuple(terms), lambda g: tuple(g * c for c in coeffs))


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(shape), "reshape", (x,), lambda g: (g.reshape(old),))


def stack(tensors: Sequence[Tensor]) -> Tensor:
    """Stack equally shaped tensors along a new leading axis."""
    for t in tensors[1:]:
        _check_same(tensors[0], t, "stack")
    data = np.stack([t.data for t in tensors])
    return _make(data, "stack", tuple(tensors), lambda g: tuple(g[i] for i in range(len(tensors))))


# --------------------------------------------------------------- convolution


def _batched(x: np.ndarray) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"expected (C,H,W) or (N,C,H,W), got shape {x.shape}")


def _correlate(xp: np.ndarray, w: np.ndarray, stride: int) -> np.ndarray:
    """Valid cross-correlation of padded input (N,C,Hp,Wp) with w (O,C,k,k)."""
    k = w.shape[-1]
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, ho, wo = win.shape[:4]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * k * k)
    out = cols @ w.reshape(w.shape[0], -1).T
    return out.reshape(n, ho, wo, -1).transpose(0, 3, 1, 2)


def _weight_grad(xp: np.ndarray, g: np.ndarray, k: int, stride: int) -> np.ndarray:
    """d/dw of sum(g * correlate(xp, w)) for w of shape (O,C,k,k)."""
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = g.shape[2], g.shape[3]
    win = win[:, :, :ho, :wo]
    n, c = win.shape[:2]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * k * k)
    gm = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, -1)
    return (gm.T @ cols).reshape(g.shape[1], c, k, k)


def _dilate(x: np.ndarray, stride: int) -> np.ndarray:
    if stride == 1:
        return x
    n, c, h, w = x.shape
    out = np.zeros((n, c, (h - 1) * stride + 1, (w - 1) * stride + 1), dtype=x.dtype)
    out[:, :, ::stride, ::stride] = x
    return out


def _pad(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _pad_or_crop(x: np.ndarray, pad: int) -> np.ndarray:
    if pad >= 0:
        return _pad(x, pad)
    return x[:, :, -pad:pad, -pad:pad]


def _conv2d_input_grad(g: np.ndarray, w: np.ndarray, in_hw: tuple[int, int], stride: int, pad: int) -> np.ndarray:
    k = w.shape[-1]
    hp, wp = in_hw[0] + 2 * pad, in_hw[1] + 2 * pad
    full = _correlate(_pad(_dilate(g, stride), k - 1), np.flip(w, (2, 3)).transpose(1, 0, 2, 3), 1)
    gx = np.zeros((g.shape[0], w.shape[1], hp, wp), dtype=g.dtype)
    gx[:, :, : full.shape[2], : full.shape[3]] = full
    return gx[:, :, pad : hp - pad, pad : wp - pad]


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation with per-output-channel bias.

    ``x`` is (C_in,H,W) or (N,C_in,H,W); ``w`` is (C_out,C_in,k,k).
    """
    xd, squeeze = _batched(x.data)
    if w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise ShapeError(f"conv2d: weight must be (C_out,C_in,k,k), got {w.shape}")
    c_out, c_in, k, _ = w.shape
    if xd.shape[1] != c_in:
        raise ShapeError(f"conv2d: input has {xd.shape[1]} channels but weight expects {c_in} (weight {w.shape}, input {x.shape})")
    if b.shape != (c_out,):
        raise ShapeError(f"conv2d: bias shape {b.shape} != ({c_out},)")
    if stride < 1 or k < 1:
        raise ShapeError("conv2d: stride and kernel must be >= 1")
    h, wd = xd.shape[2], xd.shape[3]
    if h + 2 * pad < k or wd + 2 * pad < k:
        raise ShapeError(f"conv2d: kernel {k} larger than padded input {h + 2 * pad}x{wd + 2 * pad}")
    xp = _pad(xd, pad)
    wdata = w.data
    out = _correlate(xp, wdata, stride) + b.data[None, :, None, None]
    if squeeze:
        out = out[0]

    def bw(g):
        gb, _ = _batched(g)
        gx = _conv2d_input_grad(gb, wdata, (h, wd), stride, pad) if x.requires_grad else None
        gw = _weight_grad(xp, gb, k, stride) if w.requires_grad else None
        gbias = gb.sum(axis=(0, 2, 3)) if b.requires_grad else None
        if gx is not None and squeeze:
            gx = gx[0]
        return gx, gw, gbias

    return _make(np.ascontiguousarray(out), "conv2d", (x, w, b), bw)


def conv_transpose2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Transposed convolution, the adjoint of :func:`conv2d` plus bias.

    ``x`` is (C_in,H,W) or batched; ``w`` is (C_in,C_out,k,k). Output side is
    (H-1)*stride - 2*pad + k.
    """
    xd, squeeze = _batched(x.data)
    if stride < 1:
        raise ShapeError("conv_transpose2d: stride must be >= 1")
    if w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise ShapeError(f"conv_transpose2d: weight must be (C_in,C_out,k,k), got {w.shape}")
    c_in, c_out, k, _ = w.shape
    if xd.shape[1] != c_in:
        raise ShapeError(f"conv_transpose2d: input has {xd.shape[1]} channels but weight expects {c_in}")
    if b.shape != (c_out,):
        raise ShapeError(f"conv_transpose2d: bias shape {b.shape} != ({c_out},)")
    h, wd = xd.shape[2], xd.shape[3]
    ho, wo = (h - 1) * stride - 2 * pad + k, (wd - 1) * stride - 2 * pad + k
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv_transpose2d: non-positive output size {ho}x{wo}")
    wdata = w.data
    z = _pad_or_crop(_dilate(xd, stride), k - 1 - pad)
    out = _correlate(z, np.flip(wdata, (2, 3)).transpose(1, 0, 2, 3), 1) + b.data[None, :, None, None]
    if squeeze:
        out = out[0]

    def bw(g):
        gb, _ = _batched(g)
        gp = _pad(gb, pad)
        gx = _correlate(gp, wdata, stride)[:, :, :h, :wd] if x.requires_grad else None
        # adjoint identity: <conv_T(x, w), g> = <x, conv2d(g, w)>
        gw = _weight_grad(gp, xd, k, stride) if w.requires_grad else None
        gbias = gb.sum(axis=(0, 2, 3)) if b.requires_grad else None
        if gx is not None and squeeze:
            gx = gx[0]
        return gx, gw, gbias

    return _make(np.ascontiguousarray(out), "conv_transpose2d", (x, w, b), bw)


def maxpool2d(x: Tensor, k: int, stride: int) -> Tensor:
    """Max pooling without padding; ties route gradient to the lowest flat index."""
    xd, squeeze = _batched(x.data)
    n, c, h, wd = xd.shape
    if k > h or k > wd:
        raise ShapeError(f"maxpool2d: kernel {k} larger than input {h}x{wd}")
    win = sliding_window_view(xd, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    flat = win.reshape(n, c, ho, wo, k * k)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    if squeeze:
        out = out[0]

    def bw(g):
        gb, _ = _batched(g)
        rows = (np.arange(ho) * stride)[None, None, :, None] + arg // k
        cols = (np.arange(wo) * stride)[None, None, None, :] + arg % k
        gx = np.zeros((n, c, h, wd), dtype=gb.dtype)
        ni = np.arange(n)[:, None, None, None]
        ci = np.arange(c)[None, :, None, None]
        np.add.at(gx, (ni, ci, rows, cols), gb)
        return (gx[0] if squeeze else gx,)

    return _make(np.ascontiguousarray(out), "maxpool2d", (x,), bw)


# ----------------------------------------------------------------- optimizer


@dataclass
class OptimizerState:
    lr: float
    momentum: float = 0.9
    weight_decay: float = 1e-4
    velocity: dict[str, np.ndarray] = field(default_factory=dict)


def sgd_step(params: dict[str, Tensor], state: OptimizerState, grads: dict[str, np.ndarray] | None = None) -> None:
    """In-place SGD with momentum; weight decay enters the velocity as an L2 gradient.

    v <- momentum * v + grad + wd * param;  param <- param - lr * v
    """
    for name, p in params.items():
        g = p.grad if grads is None else grads[name]
        if g is None:
            continue
        if g.shape != p.shape:
            raise ShapeError(f"sgd_step: grad shape {g.shape} != param {name} shape {p.shape}")
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(p.data)
        v = state.momentum * v + g + state.weight_decay * p.data
        state.velocity[name] = v.astype(p.dtype, copy=False)
        if state.lr != 0.0:
            p.data = (p.data - state.lr * v).astype(p.dtype, copy=False)


# ------------------------------------------------------------ finite differences


def finite_diff_check(
    fn: Callable[[Tensor], Tensor],
    x: np.ndarray,
    eps: float = 1e-5,
    exclude: np.ndarray | None = None,
) -> float:
    """Max relative error between the analytic gradient of ``fn`` and central differences.

    ``fn`` maps a tensor to a scalar tensor. Coordinates flagged in
    ``exclude`` (non-differentiable points such as maxpool ties) are skipped.
    """
    x = np.array(x, dtype=np.float64)
    leaf = Tensor(x.copy(), requires_grad=True)
    out = fn(leaf)
    backward(out)
    analytic = leaf.grad.reshape(-1)
    numeric = np.empty_like(analytic)
    flat = x.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = fn(Tensor(x)).item()
        flat[i] = orig - eps
        fm = fn(Tensor(x)).item()
        flat[i] = orig
        numeric[i] = (fp - fm) / (2 * eps)
    err = np.abs(analytic - numeric) / np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    if exclude is not None:
        err = np.where(np.asarray(exclude).reshape(-1), 0.0, err)
    return float(err.max()) if err.size else 0.0


def finite_diff_check_params(fn: Callable[[], Tensor], params: dict[str, Tensor], eps: float = 1e-5) -> float:
    """Like :func:`finite_diff_check` but perturbs every entry of ``params`` in place."""
    for p in params.values():
        p.zero_grad()
    backward(fn())
    worst = 0.0
    for p in params.values():
        analytic = p.grad.reshape(-1).copy()
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = fn().item()
            flat[i] = orig - eps
            fm = fn().item()
            flat[i] = orig
            num = (fp - fm) / (2 * eps)
            err = abs(analytic[i] - num) / max(1e-8, abs(analytic[i]) + abs(num))
            worst = max(worst, err)
    return worst


def maxpool_tie_mask(x: np.ndarray, k: int, stride: int, tol: float = 1e-4) -> np.ndarray:
    """Flag input coordinates whose pooling window has a near-tie for the max."""
    xd, squeeze = _batched(np.asarray(x))
    win = sliding_window_view(xd, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, ho, wo = win.shape[:4]
    srt = np.sort(win.reshape(n, c, ho, wo, -1), axis=-1)
    tied = (srt[..., -1] - srt[..., -2]) < tol if k * k > 1 else np.zeros((n, c, ho, wo), bool)
    mask = np.zeros(xd.shape, bool)
    for r in range(ho):
        for q in range(wo):
            sel = tied[:, :, r, q]
            mask[:, :, r * stride : r * stride + k, q * stride : q * stride + k] |= sel[:, :, None, None]
    return mask[0] if squeeze else mask


def xavier_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int, dtype=np.float64) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)
