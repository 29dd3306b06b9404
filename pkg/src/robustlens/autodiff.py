"""Minimal reverse-mode automatic differentiation on a recorded tape.

Every primitive call made on a :class:`Tensor` that belongs to a :class:`Tape`
is evaluated eagerly and appended to the tape.  ``Tape.backward`` walks the
nodes in exact reverse recording order.  ``Tape.forward`` replays the recorded
topology on new leaf values, which is how a graph is re-evaluated without
rebuilding it.

ReLU is the only primitive whose backward rule depends on the
:class:`GradientMode`; guided mode additionally gates on the sign of the
incoming gradient.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Any, Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class GradientMode(enum.Enum):
    STANDARD = "standard"
    GUIDED = "guided"


class AutodiffError(Exception):
    """Base class for tape errors."""


class ShapeMismatchError(AutodiffError):
    def __init__(self, node_id: int, message: str):
        super().__init__(f"node {node_id}: {message}")
        self.node_id = node_id


class TapeStateError(AutodiffError):
    """Raised when backward is requested without a live forward pass."""


class NonFiniteError(AutodiffError):
    pass


# --------------------------------------------------------------------------
# primitives


class Primitive:
    """A differentiable operation.

    ``forward`` returns ``(output, saved)``; ``backward`` receives ``saved``
    and the output gradient and returns one gradient (or None) per input.
    """

    name = "primitive"

    def forward(self, *xs: np.ndarray, **attrs):
        raise NotImplementedError

    def backward(self, saved, g: np.ndarray, needs: Sequence[bool], mode: GradientMode, **attrs):
        raise NotImplementedError


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


class Add(Primitive):
    name = "add"

    def forward(self, a, b):
        return a + b, (a.shape, b.shape)

    def backward(self, saved, g, needs, mode):
        sa, sb = saved
        return (_unbroadcast(g, sa) if needs[0] else None, _unbroadcast(g, sb) if needs[1] else None)


class Sub(Primitive):
    name = "sub"

    def forward(self, a, b):
        return a - b, (a.shape, b.shape)

    def backward(self, saved, g, needs, mode):
        sa, sb = saved
        return (_unbroadcast(g, sa) if needs[0] else None, _unbroadcast(-g, sb) if needs[1] else None)


class Mul(Primitive):
    name = "mul"

    def forward(self, a, b):
        return a * b, (a, b)

    def backward(self, saved, g, needs, mode):
        a, b = saved
        return (
            _unbroadcast(g * b, a.shape) if needs[0] else None,
            _unbroadcast(g * a, b.shape) if needs[1] else None,
        )


class Scale(Primitive):
    name = "scale"

    def forward(self, a, factor):
        return a * factor, None

    def backward(self, saved, g, needs, mode, factor):
        return (g * factor,)


class AddConst(Primitive):
    name = "add_const"

    def forward(self, a, value):
        return a + value, None

    def backward(self, saved, g, needs, mode, value):
        return (g,)


class ChannelAffine(Primitive):
    """``(x - shift[c]) * scale[c]`` over axis 1 with constant per-channel values."""

    name = "channel_affine"

    def forward(self, x, shift, scale):
        shape = (1, -1) + (1,) * (x.ndim - 2)
        return (x - np.reshape(shift, shape)) * np.reshape(scale, shape), None

    def backward(self, saved, g, needs, mode, shift, scale):
        shape = (1, -1) + (1,) * (g.ndim - 2)
        return (g * np.reshape(scale, shape),)


class Square(Primitive):
    name = "square"

    def forward(self, a):
        return a * a, a

    def backward(self, saved, g, needs, mode):
        return (2.0 * saved * g,)


class Exp(Primitive):
    name = "exp"

    def forward(self, a):
        out = np.exp(a)
        return out, out

    def backward(self, saved, g, needs, mode):
        return (saved * g,)


class Tanh(Primitive):
    name = "tanh"

    def forward(self, a):
        out = np.tanh(a)
        return out, out

    def backward(self, saved, g, needs, mode):
        return ((1.0 - saved * saved) * g,)


class MatMul(Primitive):
    name = "matmul"

    def forward(self, a, b):
        return a @ b, (a, b)

    def backward(self, saved, g, needs, mode):
        a, b = saved
        return (g @ b.T if needs[0] else None, a.T @ g if needs[1] else None)


class Relu(Primitive):
    name = "relu"

    def forward(self, a):
        mask = a > 0
        return np.where(mask, a, 0.0), mask

    def backward(self, saved, g, needs, mode):
        if mode is GradientMode.GUIDED:
            return (np.where(saved & (g > 0), g, 0.0),)
        return (np.where(saved, g, 0.0),)


class Sum(Primitive):
    name = "sum"

    def forward(self, a, axis=None):
        return np.sum(a, axis=axis), a.shape

    def backward(self, saved, g, needs, mode, axis=None):
        shape = saved
        if axis is None:
            return (np.full(shape, g, dtype=np.float64),)
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        return (np.broadcast_to(np.expand_dims(g, axes), shape).copy(),)


class Reshape(Primitive):
    name = "reshape"

    def forward(self, a, shape):
        return a.reshape(shape), a.shape

    def backward(self, saved, g, needs, mode, shape):
        return (g.reshape(saved),)


class Concat(Primitive):
    name = "concat"

    def forward(self, *xs, axis=1):
        return np.concatenate(xs, axis=axis), [x.shape[axis] for x in xs]

    def backward(self, saved, g, needs, mode, axis=1):
        splits = np.cumsum(saved)[:-1]
        parts = np.split(g, splits, axis=axis)
        return tuple(p if n else None for p, n in zip(parts, needs))


class Linear(Primitive):
    """``x @ W.T + b`` with ``W`` shaped (out, in)."""

    name = "linear"

    def forward(self, x, w, b):
        return x @ w.T + b, (x, w)

    def backward(self, saved, g, needs, mode):
        x, w = saved
        return (
            g @ w if needs[0] else None,
            g.T @ x if needs[1] else None,
            g.sum(axis=0) if needs[2] else None,
        )


def _pad(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def _correlate(xp: np.ndarray, w: np.ndarray, stride: int):
    """Valid cross-correlation of an already padded batch; returns (out, cols)."""
    n, c = xp.shape[:2]
    o, _, kh, kw = w.shape
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    # (n, ho, wo, c, kh, kw) -> rows of receptive fields
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * kh * kw)
    out = (cols @ w.reshape(o, -1).T).reshape(n, ho, wo, o)
    return out, cols


class Conv2d(Primitive):
    """NCHW cross-correlation, weight shaped (out, in, kh, kw)."""

    name = "conv2d"

    def forward(self, x, w, b, stride=1, padding=0):
        if w.shape[1] != x.shape[1]:
            raise ValueError(f"conv2d expects {w.shape[1]} input channels, got {x.shape[1]}")
        out, cols = _correlate(_pad(x, padding), w, stride)
        out = np.ascontiguousarray((out + b).transpose(0, 3, 1, 2))
        return out, (cols, x.shape, w)

    def backward(self, saved, g, needs, mode, stride=1, padding=0):
        cols, xshape, w = saved
        n, c, h, wd = xshape
        o, _, kh, kw = w.shape
        ho, wo = g.shape[2], g.shape[3]
        gx = gw = gb = None
        if needs[1] or needs[2]:
            gm = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
            if needs[1]:
                gw = (gm.T @ cols).reshape(w.shape)
            if needs[2]:
                gb = gm.sum(axis=0)
        if needs[0]:
            if stride == 1 and kh == kw and padding <= kh - 1:
                # input gradient = correlation of the padded output gradient with the flipped kernel
                q = kh - 1 - padding
                gp = np.pad(g, ((0, 0), (0, 0), (q, q), (q, q)))
                wf = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
                out, _ = _correlate(gp, wf, 1)
                gx = out.transpose(0, 3, 1, 2)[:, :, :h, :wd]
                if gx.shape[2:] != (h, wd):
                    gx = np.pad(gx, ((0, 0), (0, 0), (0, h - gx.shape[2]), (0, wd - gx.shape[3])))
                gx = np.ascontiguousarray(gx)
            else:
                gm = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
                dcols = (gm @ w.reshape(o, -1)).reshape(n, ho, wo, c, kh, kw)
                gxp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding))
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[
                            :, :, :, :, i, j
                        ].transpose(0, 3, 1, 2)
                gx = gxp[:, :, padding : padding + h, padding : padding + wd] if padding else gxp
        return gx, gw, gb


class MaxPool2d(Primitive):
    """Max pooling; ties go to the first position in row-major scan order."""

    name = "maxpool2d"

    def forward(self, x, kernel=2, stride=2):
        n, c, h, w = x.shape
        ho = (h - kernel) // stride + 1
        wo = (w - kernel) // stride + 1
        if kernel == stride:
            crop = x[:, :, : ho * kernel, : wo * kernel]
            flat = crop.reshape(n, c, ho, kernel, wo, kernel).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, -1)
        else:
            win = sliding_window_view(x, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride]
            flat = win.reshape(n, c, ho, wo, kernel * kernel)
        arg = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
        return out, (arg, x.shape)

    def backward(self, saved, g, needs, mode, kernel=2, stride=2):
        arg, shape = saved
        n, c, ho, wo = arg.shape
        if kernel == stride:
            onehot = arg[..., None] == np.arange(kernel * kernel)
            blocks = np.where(onehot, g[..., None], 0.0).reshape(n, c, ho, wo, kernel, kernel)
            gx = np.zeros(shape)
            gx[:, :, : ho * kernel, : wo * kernel] = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(
                n, c, ho * kernel, wo * kernel
            )
            return (gx,)
        gx = np.zeros(shape)
        for idx in range(kernel * kernel):
            i, j = divmod(idx, kernel)
            gx[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += np.where(arg == idx, g, 0.0)
        return (gx,)


class BatchNorm2d(Primitive):
    """Per-channel normalization.

    With ``mean``/``var`` attrs given the op is a fixed affine map (evaluation
    mode); otherwise batch statistics are used and differentiated through.
    """

    name = "batchnorm2d"

    def forward(self, x, gamma, beta, mean=None, var=None, eps=1e-5):
        if mean is None:
            mu = x.mean(axis=(0, 2, 3))
            v = x.var(axis=(0, 2, 3))
            batch = True
        else:
            mu, v, batch = np.asarray(mean), np.asarray(var), False
        inv = 1.0 / np.sqrt(v + eps)
        xhat = (x - mu[None, :, None, None]) * inv[None, :, None, None]
        out = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
        return out, (xhat, inv, gamma, batch, mu, v)

    def backward(self, saved, g, needs, mode, mean=None, var=None, eps=1e-5):
        xhat, inv, gamma, batch, _, _ = saved
        gg = (g * xhat).sum(axis=(0, 2, 3)) if needs[1] else None
        gbeta = g.sum(axis=(0, 2, 3)) if needs[2] else None
        gx = None
        if needs[0]:
            gxhat = g * gamma[None, :, None, None]
            if batch:
                m = g.shape[0] * g.shape[2] * g.shape[3]
                gx = (
                    inv[None, :, None, None]
                    / m
                    * (
                        m * gxhat
                        - gxhat.sum(axis=(0, 2, 3))[None, :, None, None]
                        - xhat * (gxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
                    )
                )
            else:
                gx = gxhat * inv[None, :, None, None]
        return gx, gg, gbeta


def log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


class SoftmaxCrossEntropy(Primitive):
    """Cross-entropy of row-wise softmax against integer labels.

    ``reduction`` is one of ``"none"`` (per-row losses), ``"sum"``, ``"mean"``.
    """

    name = "softmax_cross_entropy"

    def forward(self, z, labels, reduction="mean"):
        lp = log_softmax(z)
        losses = -lp[np.arange(z.shape[0]), labels]
        if reduction == "none":
            out = losses
        elif reduction == "sum":
            out = np.asarray(losses.sum())
        else:
            out = np.asarray(losses.mean())
        return out, lp

    def backward(self, saved, g, needs, mode, labels, reduction="mean"):
        lp = saved
        grad = np.exp(lp)
        grad[np.arange(lp.shape[0]), labels] -= 1.0
        if reduction == "none":
            grad *= g[:, None]
        elif reduction == "sum":
            grad *= g
        else:
            grad *= g / lp.shape[0]
        return (grad,)


# --------------------------------------------------------------------------
# tape


@dataclass
class Node:
    op: Primitive
    inputs: tuple[int, ...]
    output: int
    attrs: dict
    saved: Any = None


class Tensor:
    """Handle to a value stored on a tape (or a free-standing constant)."""

    __array_priority__ = 100

    def __init__(self, tape: "Tape", tid: int):
        self.tape = tape
        self.id = tid

    @property
    def data(self) -> np.ndarray:
        return self.tape.values[self.id]

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def requires_grad(self) -> bool:
        return self.tape.requires[self.id]

    def __repr__(self):
        return f"Tensor(id={self.id}, shape={self.shape})"

    def _lift(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return self.tape.constant(other)

    def __add__(self, other):
        if np.isscalar(other):
            return self.tape.apply(AddConst(), self, value=float(other))
        return self.tape.apply(Add(), self, self._lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        if np.isscalar(other):
            return self.tape.apply(AddConst(), self, value=-float(other))
        return self.tape.apply(Sub(), self, self._lift(other))

    def __rsub__(self, other):
        return self.tape.apply(Sub(), self._lift(other), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return self.tape.apply(Scale(), self, factor=float(other))
        return self.tape.apply(Mul(), self, self._lift(other))

    __rmul__ = __mul__

    def __neg__(self):
        return self.tape.apply(Scale(), self, factor=-1.0)

    def __matmul__(self, other):
        return self.tape.apply(MatMul(), self, self._lift(other))

    def sum(self, axis=None):
        return self.tape.apply(Sum(), self, axis=axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return self.tape.apply(Reshape(), self, shape=tuple(shape))


class Tape:
    """Define-by-run record of primitive applications.

    Leaves are created with :meth:`variable` (differentiable) or
    :meth:`constant`.  Named variables can be re-bound by :meth:`forward`.
    """

    def __init__(self):
        self.values: list[np.ndarray | None] = []
        self.requires: list[bool] = []
        self.nodes: list[Node] = []
        self.leaf_names: dict[str, int] = {}
        self._producer: dict[int, int] = {}
        self._live = True

    def _new(self, value: np.ndarray, requires: bool) -> Tensor:
        self.values.append(value)
        self.requires.append(requires)
        return Tensor(self, len(self.values) - 1)

    def variable(self, value, name: str | None = None) -> Tensor:
        t = self._new(np.asarray(value, dtype=np.float64), True)
        if name is not None:
            self.leaf_names[name] = t.id
        return t

    def constant(self, value, name: str | None = None) -> Tensor:
        t = self._new(np.asarray(value, dtype=np.float64), False)
        if name is not None:
            self.leaf_names[name] = t.id
        return t

    def apply(self, op: Primitive, *inputs: Tensor, **attrs) -> Tensor:
        for t in inputs:
            if t.tape is not self:
                raise AutodiffError("tensor belongs to a different tape")
        out, saved = op.forward(*(t.data for t in inputs), **attrs)
        requires = any(self.requires[t.id] for t in inputs)
        res = self._new(np.asarray(out, dtype=np.float64), requires)
        node = Node(op, tuple(t.id for t in inputs), res.id, attrs, saved)
        self._producer[res.id] = len(self.nodes)
        self.nodes.append(node)
        self._live = True
        return res

    def forward(self, inputs: dict | None = None, outputs: Sequence[Tensor] = ()) -> list[np.ndarray]:
        """Replay every node with new leaf values.

        ``inputs`` maps leaf names (or Tensors) to arrays whose shapes must
        match the recorded ones.
        """
        for key, value in (inputs or {}).items():
            tid = key.id if isinstance(key, Tensor) else self.leaf_names[key]
            value = np.asarray(value, dtype=np.float64)
            if value.shape != self.values[tid].shape:
                raise ShapeMismatchError(tid, f"expected shape {self.values[tid].shape}, got {value.shape}")
            self.values[tid] = value
        for idx, node in enumerate(self.nodes):
            args = [self.values[i] for i in node.inputs]
            expected = self.values[node.output]
            try:
                out, saved = node.op.forward(*args, **node.attrs)
            except ValueError as exc:
                raise ShapeMismatchError(idx, str(exc)) from exc
            out = np.asarray(out, dtype=np.float64)
            if expected is not None and out.shape != expected.shape:
                raise ShapeMismatchError(idx, f"{node.op.name} produced {out.shape}, recorded {expected.shape}")
            self.values[node.output] = out
            node.saved = saved
        self._live = True
        return [self.values[t.id] for t in outputs]

    def backward(
        self,
        output: Tensor,
        seed=None,
        mode: GradientMode = GradientMode.STANDARD,
        wrt: Sequence[Tensor] | None = None,
        retain: bool = True,
    ) -> list[np.ndarray]:
        """Gradients of ``sum(seed * output)`` with respect to ``wrt``.

        ``wrt`` defaults to every differentiable leaf.  With ``retain=False``
        the saved activations are released, and a further backward call
        requires another forward pass.
        """
        if not self._live or not self.nodes:
            raise TapeStateError("backward requested before forward")
        if output.tape is not self:
            raise AutodiffError("output tensor belongs to a different tape")
        if seed is None:
            seed = np.ones_like(output.data)
        seed = np.asarray(seed, dtype=np.float64)
        if seed.shape != output.shape:
            raise ShapeMismatchError(output.id, f"seed shape {seed.shape} does not match output {output.shape}")
        if wrt is None:
            wrt = [Tensor(self, i) for i in range(len(self.values)) if self.requires[i] and i not in self._producer]
        grads: dict[int, np.ndarray] = {output.id: seed}
        last = self._producer.get(output.id, -1)
        for node in reversed(self.nodes[: last + 1]):
            g = grads.pop(node.output, None)
            if g is None or not self.requires[node.output]:
                continue
            needs = [self.requires[i] for i in node.inputs]
            in_grads = node.op.backward(node.saved, g, needs, mode, **node.attrs)
            for i, gi in zip(node.inputs, in_grads):
                if gi is None or not self.requires[i]:
                    continue
                if i in grads:
                    grads[i] = grads[i] + gi
                else:
                    grads[i] = gi
        if not retain:
            for node in self.nodes:
                node.saved = None
            self._live = False
        return [np.asarray(grads.get(t.id, np.zeros(t.shape)), dtype=np.float64) for t in wrt]


# --------------------------------------------------------------------------
# functional helpers


def relu(x: Tensor) -> Tensor:
    return x.tape.apply(Relu(), x)


def channel_affine(x: Tensor, shift, scale) -> Tensor:
    return x.tape.apply(ChannelAffine(), x, shift=np.asarray(shift, float), scale=np.asarray(scale, float))


def square(x: Tensor) -> Tensor:
    return x.tape.apply(Square(), x)


def exp(x: Tensor) -> Tensor:
    return x.tape.apply(Exp(), x)


def tanh(x: Tensor) -> Tensor:
    return x.tape.apply(Tanh(), x)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return x.tape.apply(Linear(), x, w, b)


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    return x.tape.apply(Conv2d(), x, w, b, stride=stride, padding=padding)


def max_pool2d(x: Tensor, kernel: int = 2, stride: int = 2) -> Tensor:
    return x.tape.apply(MaxPool2d(), x, kernel=kernel, stride=stride)


def batch_norm2d(x: Tensor, gamma: Tensor, beta: Tensor, mean=None, var=None, eps: float = 1e-5) -> Tensor:
    return x.tape.apply(BatchNorm2d(), x, gamma, beta, mean=mean, var=var, eps=eps)


def concat(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    return xs[0].tape.apply(Concat(), *xs, axis=axis)


def softmax_cross_entropy(logits: Tensor, labels, reduction: str = "mean") -> Tensor:
    labels = np.asarray(labels, dtype=np.int64)
    return logits.tape.apply(SoftmaxCrossEntropy(), logits, labels=labels, reduction=reduction)


def grad(fn: Callable[[Tensor], Tensor], x, mode: GradientMode = GradientMode.STANDARD, seed=None):
    """Value and gradient of ``fn`` at ``x`` on a fresh tape."""
    tape = Tape()
    xt = tape.variable(x, name="x")
    out = fn(xt)
    (g,) = tape.backward(out, seed=seed, mode=mode, wrt=[xt])
    return out.data, g


def finite_difference_gradient(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference estimate of the gradient of scalar ``f`` at ``x``."""
    x = np.array(x, dtype=np.float64)
    out = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError(f"non-finite function value near coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return out
