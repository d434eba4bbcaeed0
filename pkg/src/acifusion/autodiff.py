"""Dense float64 tensors with reverse-mode automatic differentiation.

The op set is exactly what the diagnosis network needs: conv2d, relu,
elementwise add/multiply, matmul, channel concatenation, axis softmax,
mean pooling, layer norm, affine, and cross-entropy, plus the
reshape/transpose/slice plumbing those ops are built from.  Gradients
are accumulated by a single reverse topological sweep over the recorded
graph; ``grad_check`` is the central-difference oracle used to verify
every backward rule.
"""

from __future__ import annotations

import logging
from typing import Callable, Iterable, Iterator, Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)


class ShapeError(ValueError):
    """Raised when an op receives shape-incompatible inputs."""


def _guard_finite(data: np.ndarray, op: str) -> None:
    # forward ops must never emit NaN/Inf silently
    if not np.all(np.isfinite(data)):
        raise FloatingPointError(f"{op} produced non-finite values")


class Tensor:
    """A float64 array plus the graph edge that produced it.

    ``requires_grad`` is sticky: any op with a grad-requiring input
    produces a grad-requiring output.  Gradients accumulate into
    ``grad`` during ``backward`` for every node on the path, so
    intermediate activations (needed e.g. for saliency maps) keep
    their gradients too.
    """

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: Optional[Callable[[np.ndarray], None]] = None
        self._op = "leaf"
        self._backward_ran = False

    # -- graph construction -------------------------------------------------

    @staticmethod
    def _node(data: np.ndarray, parents: Sequence["Tensor"], backward_fn, op: str) -> "Tensor":
        _guard_finite(data, op)
        out = Tensor(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward_fn = backward_fn
            out._op = op
        else:
            out._op = op
        return out

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self._op!r}, requires_grad={self.requires_grad}{tag})"

    # -- autodiff -------------------------------------------------------------

    def backward(self) -> None:
        """Reverse sweep from a scalar root, accumulating into ``grad``."""
        if self.data.size != 1:
            raise ValueError(f"backward requires a scalar loss, got shape {self.shape}")
        if self._backward_ran:
            raise RuntimeError("backward already ran for this graph; rebuild the forward pass first")
        self._backward_ran = True
        self.grad = np.ones_like(self.data)
        for node in reversed(topo_order(self)):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)

    def zero_grad(self) -> None:
        self.grad = None

    # -- operator sugar --------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take(self, key)

    def sum(self, axis=None):
        return sum_(self, axis=axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: Optional[str] = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def topo_order(root: Tensor) -> list[Tensor]:
    """Ancestors of ``root`` ordered parents-before-children (iterative DFS)."""
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
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    return order


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out_data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: operands not broadcast-compatible: {a.shape} vs {b.shape}") from None

    def backward(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return Tensor._node(out_data, (a, b), backward, "add")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out_data = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: operands not broadcast-compatible: {a.shape} vs {b.shape}") from None

    def backward(g):
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))

    return Tensor._node(out_data, (a, b), backward, "mul")


def relu(x) -> Tensor:
    x = as_tensor(x)
    out_data = np.maximum(x.data, 0.0)

    def backward(g):
        _accum(x, g * (x.data > 0.0))

    return Tensor._node(out_data, (x,), backward, "relu")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ: {a.shape} vs {b.shape}")
    out_data = a.data @ b.data

    def backward(g):
        _accum(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        _accum(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return Tensor._node(out_data, (a, b), backward, "matmul")


def affine(x, w, b) -> Tensor:
    """Fully connected layer ``x @ w.T + b`` with ``w`` shaped (out, in)."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if w.ndim != 2 or x.shape[-1] != w.shape[1]:
        raise ShapeError(f"affine: input {x.shape} incompatible with weight {w.shape}")
    if b.shape != (w.shape[0],):
        raise ShapeError(f"affine: bias {b.shape} incompatible with weight {w.shape}")
    out_data = x.data @ w.data.T + b.data

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        x2 = x.data.reshape(-1, x.shape[-1])
        _accum(x, (g @ w.data).reshape(x.shape))
        _accum(w, g2.T @ x2)
        _accum(b, g2.sum(axis=0))

    return Tensor._node(out_data, (x, w, b), backward, "affine")


# ---------------------------------------------------------------------------
# shape plumbing
# ---------------------------------------------------------------------------


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    out_data = x.data.reshape(shape)

    def backward(g):
        _accum(x, g.reshape(x.shape))

    return Tensor._node(out_data, (x,), backward, "reshape")


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    out_data = np.transpose(x.data, axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        _accum(x, np.transpose(g, inverse))

    return Tensor._node(out_data, (x,), backward, "transpose")


def take(x, key) -> Tensor:
    """Basic slicing/indexing as a graph op (no advanced indexing)."""
    x = as_tensor(x)
    out_data = np.array(x.data[key])

    def backward(g):
        if x.grad is None:
            x.grad = np.zeros_like(x.data) if x.requires_grad else None
        if x.requires_grad:
            x.grad[key] += g

    return Tensor._node(out_data, (x,), backward, "take")


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat: need at least one input")
    first = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(
            i != (axis % t.ndim) and t.shape[i] != first[i] for i in range(t.ndim)
        ):
            raise ShapeError(
                f"concat: shapes {[t.shape for t in tensors]} differ off axis {axis}"
            )
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis % t.ndim] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis % g.ndim] = slice(lo, hi)
            _accum(t, g[tuple(idx)])

    return Tensor._node(out_data, tuple(tensors), backward, "concat")


# ---------------------------------------------------------------------------
# reductions and normalisation
# ---------------------------------------------------------------------------


def sum_(x, axis=None) -> Tensor:
    x = as_tensor(x)
    out_data = x.data.sum(axis=axis)

    def backward(g):
        if axis is None:
            _accum(x, np.broadcast_to(g, x.shape).copy())
        else:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            g_exp = np.expand_dims(g, tuple(a % x.ndim for a in axes))
            _accum(x, np.broadcast_to(g_exp, x.shape).copy())

    return Tensor._node(out_data, (x,), backward, "sum")


def mean_pool(x, axes) -> Tensor:
    """Mean over ``axes``, anchored at the first element so pooling a
    constant tensor returns that constant exactly."""
    x = as_tensor(x)
    axes = tuple(a % x.ndim for a in ((axes,) if isinstance(axes, int) else tuple(axes)))
    count = 1
    for a in axes:
        count *= x.shape[a]
    if count == 0:
        raise ShapeError(f"mean_pool: empty reduction axes {axes} on shape {x.shape}")
    anchor_idx = tuple(slice(0, 1) if i in axes else slice(None) for i in range(x.ndim))
    anchor = x.data[anchor_idx]
    out_data = anchor.reshape([s for i, s in enumerate(x.shape) if i not in axes]) + (
        x.data - anchor
    ).mean(axis=axes)

    def backward(g):
        g_exp = np.expand_dims(g, axes)
        _accum(x, np.broadcast_to(g_exp / count, x.shape).copy())

    return Tensor._node(out_data, (x,), backward, "mean_pool")


def softmax(x, axis: int) -> Tensor:
    """Numerically safe softmax (max-subtracted) along ``axis``."""
    x = as_tensor(x)
    ax = axis % x.ndim
    if x.shape[ax] == 0:
        raise ShapeError(f"softmax: axis {axis} of shape {x.shape} has extent 0")
    shifted = x.data - x.data.max(axis=ax, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=ax, keepdims=True)

    def backward(g):
        s = out_data
        _accum(x, s * (g - (g * s).sum(axis=ax, keepdims=True)))

    return Tensor._node(out_data, (x,), backward, "softmax")


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Layer normalisation over the last axis with learnable scale/shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: scale {gamma.shape}/shift {beta.shape} do not match width {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_data = gamma.data * xhat + beta.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        _accum(gamma, (g * xhat).sum(axis=lead))
        _accum(beta, g.sum(axis=lead))
        gx = g * gamma.data
        _accum(
            x,
            inv
            * (
                gx
                - gx.mean(axis=-1, keepdims=True)
                - xhat * (gx * xhat).mean(axis=-1, keepdims=True)
            ),
        )

    return Tensor._node(out_data, (x, gamma, beta), backward, "layer_norm")


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def _pair(v) -> tuple[int, int]:
    return (v, v) if isinstance(v, int) else (int(v[0]), int(v[1]))


def conv2d(x, w, b=None, stride=1, padding=0) -> Tensor:
    """2-D convolution (cross-correlation) on (B, C, H, W) inputs.

    Implemented directly as a kernel-offset loop; each offset contributes
    one channel contraction over a strided view of the padded input.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input and kernel, got {x.shape} and {w.shape}")
    bsz, cin, h, wdt = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise ShapeError(f"conv2d: input channels {x.shape} do not match kernel {w.shape}")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    hp, wp = h + 2 * ph, wdt + 2 * pw
    if kh > hp or kw > wp:
        raise ShapeError(f"conv2d: kernel {w.shape} exceeds padded input {(bsz, cin, hp, wp)}")
    ho = (hp - kh) // sh + 1
    wo = (wp - kw) // sw + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    out_data = np.zeros((bsz, cout, ho, wo))
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i : i + sh * ho : sh, j : j + sw * wo : sw]
            out_data += np.einsum("oc,bchw->bohw", w.data[:, :, i, j], patch, optimize=True)
    if b is not None:
        b = as_tensor(b)
        if b.shape != (cout,):
            raise ShapeError(f"conv2d: bias {b.shape} does not match output channels {cout}")
        out_data += b.data[:, None, None]
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        if x.requires_grad:
            gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                patch = xp[:, :, i : i + sh * ho : sh, j : j + sw * wo : sw]
                if w.requires_grad:
                    gw_ij = np.einsum("bohw,bchw->oc", g, patch, optimize=True)
                    if w.grad is None:
                        w.grad = np.zeros_like(w.data)
                    w.grad[:, :, i, j] += gw_ij
                if x.requires_grad:
                    gxp[:, :, i : i + sh * ho : sh, j : j + sw * wo : sw] += np.einsum(
                        "bohw,oc->bchw", g, w.data[:, :, i, j], optimize=True
                    )
        if x.requires_grad:
            _accum(x, gxp[:, :, ph : ph + h, pw : pw + wdt])
        if b is not None:
            _accum(b, g.sum(axis=(0, 2, 3)))

    return Tensor._node(out_data, parents, backward, "conv2d")


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

CE_CLAMP = 1e-12


def cross_entropy(probs, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under ``probs`` (B, n).

    Probabilities are clamped below at ``CE_CLAMP`` so the log never hits
    -inf; clamp events are logged and counted on the returned tensor's
    ``ce_clamped`` attribute so training can record them.
    """
    probs = as_tensor(probs)
    if probs.ndim != 2:
        raise ShapeError(f"cross_entropy: expected (batch, classes) probabilities, got {probs.shape}")
    labels = np.asarray(labels)
    bsz, n = probs.shape
    if labels.shape != (bsz,):
        raise ShapeError(f"cross_entropy: labels {labels.shape} do not match batch {bsz}")
    if labels.min() < 0 or labels.max() >= n:
        raise ValueError(f"cross_entropy: label outside [0, {n})")
    picked = probs.data[np.arange(bsz), labels]
    clamped = picked < CE_CLAMP
    n_clamped = int(clamped.sum())
    if n_clamped:
        logger.warning("cross_entropy clamped %d probabilities below %g", n_clamped, CE_CLAMP)
    safe = np.maximum(picked, CE_CLAMP)
    out_data = np.array(-np.log(safe).mean())

    def backward(g):
        d = np.zeros_like(probs.data)
        rows = np.arange(bsz)[~clamped]
        d[rows, labels[~clamped]] = -1.0 / (bsz * safe[~clamped])
        _accum(probs, g * d)

    out = Tensor._node(out_data, (probs,), backward, "cross_entropy")
    out.ce_clamped = n_clamped
    return out


# ---------------------------------------------------------------------------
# parameters and verification
# ---------------------------------------------------------------------------


class Parameters:
    """Ordered, named set of trainable tensors shared across forward passes."""

    def __init__(self):
        self._items: dict[str, Tensor] = {}

    def add(self, name: str, data) -> Tensor:
        if name in self._items:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = data if isinstance(data, Tensor) else parameter(data, name=name)
        t.requires_grad = True
        t.name = name
        self._items[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._items[name]

    def __contains__(self, name: str) -> bool:
        return name in self._items

    def __len__(self) -> int:
        return len(self._items)

    def __iter__(self) -> Iterator[str]:
        return iter(self._items)

    def items(self):
        return self._items.items()

    def tensors(self) -> list[Tensor]:
        return list(self._items.values())

    def zero_grad(self) -> None:
        for t in self._items.values():
            t.grad = None

    def count(self) -> int:
        return sum(t.size for t in self._items.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self._items.items()}

    def load_state_dict(self, state: dict) -> None:
        missing = set(self._items) - set(state)
        if missing:
            raise ValueError(f"missing parameters in state: {sorted(missing)}")
        for k, t in self._items.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != t.shape:
                raise ShapeError(f"parameter {k!r}: saved shape {arr.shape} != {t.shape}")
            t.data = arr.copy()


def grad_check(fn: Callable[..., Tensor], tensors: Iterable[Tensor], h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn(*tensors)`` must be a pure scalar-valued graph builder; the error
    at each coordinate is |analytic - numeric| / max(1, |numeric|).
    """
    tensors = list(tensors)
    if h <= 0:
        raise ValueError("grad_check: step h must be positive")
    out = fn(*tensors)
    if out.data.size != 1:
        raise ValueError(f"grad_check: function output must be scalar, got shape {out.shape}")
    for t in tensors:
        t.grad = None
    out.backward()
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in tensors]
    max_err = 0.0
    for t, ga in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        ga_flat = ga.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = fn(*tensors).item()
            flat[i] = orig - h
            f_minus = fn(*tensors).item()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            err = abs(ga_flat[i] - numeric) / max(1.0, abs(numeric))
            if err > max_err:
                max_err = err
    return max_err
