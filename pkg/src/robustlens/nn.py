"""Sequential convolutional classifiers built on the autodiff tape.

A :class:`ModelSpec` is an ordered list of :class:`LayerSpec`.  Its text form
is one layer per line, ``kind key=value ...``, preceded by an ``input C H W``
(or ``input D``) line and a ``classes K`` line::

    input 3 32 32
    classes 10
    normalize mean=0.5,0.5,0.5 std=0.25,0.25,0.25
    conv out=16 kernel=3 stride=1 padding=1
    relu
    maxpool kernel=2 stride=2
    flatten
    linear out=10

Supported kinds: ``conv``, ``batchnorm``, ``relu``, ``maxpool``, ``flatten``,
``linear``.  The last layer must be ``linear`` with ``out`` equal to the
class count.  The optional ``normalize`` line is a fixed per-channel
standardization applied to the raw [0, 1] input inside the model, so attacks
and saliency maps live in pixel space.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import GradientMode, Tape, Tensor

KINDS = ("conv", "batchnorm", "relu", "maxpool", "flatten", "linear")
REGIMES = ("STD", "ADV", "RANDOM")


class SpecError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    out: int = 0
    kernel: int = 0
    stride: int = 1
    padding: int = 0

    def to_text(self) -> str:
        if self.kind == "conv":
            return f"conv out={self.out} kernel={self.kernel} stride={self.stride} padding={self.padding}"
        if self.kind == "maxpool":
            return f"maxpool kernel={self.kernel} stride={self.stride}"
        if self.kind == "linear":
            return f"linear out={self.out}"
        return self.kind


@dataclass(frozen=True)
class ModelSpec:
    input_shape: tuple[int, ...]
    layers: tuple[LayerSpec, ...]
    n_classes: int
    mean: tuple[float, ...] | None = None
    std: tuple[float, ...] | None = None

    def __post_init__(self):
        if (self.mean is None) != (self.std is None):
            raise SpecError("normalize needs both mean and std")
        if self.mean is not None:
            object.__setattr__(self, "mean", tuple(float(v) for v in self.mean))
            object.__setattr__(self, "std", tuple(float(v) for v in self.std))
            if len(self.mean) != self.input_shape[0] or len(self.std) != self.input_shape[0]:
                raise SpecError("normalize needs one mean/std per input channel")
            if min(self.std) <= 0:
                raise SpecError("normalize std must be positive")
        self.shapes()  # validates chaining

    def shapes(self) -> list[tuple[int, ...]]:
        """Per-sample output shape of every layer (validates the chain)."""
        if not self.layers:
            raise SpecError("model has no layers")
        shape = tuple(self.input_shape)
        out = []
        for i, layer in enumerate(self.layers):
            k = layer.kind
            if k not in KINDS:
                raise SpecError(f"layer {i}: unknown kind {k!r}")
            if k == "conv":
                if len(shape) != 3:
                    raise SpecError(f"layer {i}: conv needs a (C,H,W) input, got {shape}")
                c, h, w = shape
                ho = (h + 2 * layer.padding - layer.kernel) // layer.stride + 1
                wo = (w + 2 * layer.padding - layer.kernel) // layer.stride + 1
                if layer.out < 1 or layer.kernel < 1 or ho < 1 or wo < 1:
                    raise SpecError(f"layer {i}: invalid conv geometry for input {shape}")
                shape = (layer.out, ho, wo)
            elif k == "maxpool":
                if len(shape) != 3:
                    raise SpecError(f"layer {i}: maxpool needs a (C,H,W) input, got {shape}")
                c, h, w = shape
                ho = (h - layer.kernel) // layer.stride + 1
                wo = (w - layer.kernel) // layer.stride + 1
                if layer.kernel < 1 or ho < 1 or wo < 1:
                    raise SpecError(f"layer {i}: invalid maxpool geometry for input {shape}")
                shape = (c, ho, wo)
            elif k == "batchnorm":
                if len(shape) != 3:
                    raise SpecError(f"layer {i}: batchnorm needs a (C,H,W) input")
            elif k == "flatten":
                shape = (int(np.prod(shape)),)
            elif k == "linear":
                if len(shape) != 1:
                    raise SpecError(f"layer {i}: linear needs a flat input, got {shape}")
                if layer.out < 1:
                    raise SpecError(f"layer {i}: linear width must be positive")
                shape = (layer.out,)
            out.append(shape)
        last = self.layers[-1]
        if last.kind != "linear" or last.out != self.n_classes:
            raise SpecError(f"terminal layer must be linear with out={self.n_classes}")
        return out

    @property
    def feature_width(self) -> int:
        """Width of the input to the terminal linear layer."""
        shapes = [tuple(self.input_shape)] + self.shapes()
        return int(np.prod(shapes[-2]))

    def conv_indices(self) -> list[int]:
        return [i for i, layer in enumerate(self.layers) if layer.kind == "conv"]

    def to_text(self) -> str:
        lines = ["input " + " ".join(str(d) for d in self.input_shape), f"classes {self.n_classes}"]
        if self.mean is not None:
            lines.append(
                "normalize mean=" + ",".join(repr(v) for v in self.mean) + " std=" + ",".join(repr(v) for v in self.std)
            )
        lines += [layer.to_text() for layer in self.layers]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ModelSpec":
        input_shape = None
        n_classes = None
        mean = std = None
        layers = []
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            head, *rest = line.split()
            try:
                if head == "input":
                    input_shape = tuple(int(v) for v in rest)
                elif head == "classes":
                    n_classes = int(rest[0])
                elif head == "normalize":
                    kv = dict(item.split("=", 1) for item in rest)
                    mean = tuple(float(v) for v in kv["mean"].split(","))
                    std = tuple(float(v) for v in kv["std"].split(","))
                else:
                    kw = {}
                    for item in rest:
                        key, value = item.split("=", 1)
                        if key not in ("out", "kernel", "stride", "padding"):
                            raise SpecError(f"line {lineno}: unknown key {key!r}")
                        kw[key] = int(value)
                    if head not in KINDS:
                        raise SpecError(f"line {lineno}: unknown layer kind {head!r}")
                    layers.append(LayerSpec(head, **kw))
            except (ValueError, IndexError, KeyError) as exc:
                if isinstance(exc, SpecError):
                    raise
                raise SpecError(f"line {lineno}: cannot parse {raw!r}") from exc
        if input_shape is None or n_classes is None:
            raise SpecError("spec text needs 'input' and 'classes' lines")
        return cls(input_shape, tuple(layers), n_classes, mean, std)


def small_convnet_spec(
    input_shape=(3, 32, 32),
    n_classes: int = 10,
    channels=(16, 32),
    hidden: int = 128,
    batchnorm: bool = False,
    mean=None,
    std=None,
) -> ModelSpec:
    """conv3x3-ReLU-pool2 blocks, then fc(hidden)-ReLU and fc(n_classes)."""
    layers = []
    for c in channels:
        layers.append(LayerSpec("conv", out=c, kernel=3, stride=1, padding=1))
        if batchnorm:
            layers.append(LayerSpec("batchnorm"))
        layers.append(LayerSpec("relu"))
        layers.append(LayerSpec("maxpool", kernel=2, stride=2))
    layers.append(LayerSpec("flatten"))
    if hidden:
        layers.append(LayerSpec("linear", out=hidden))
        layers.append(LayerSpec("relu"))
    layers.append(LayerSpec("linear", out=n_classes))
    return ModelSpec(tuple(input_shape), tuple(layers), n_classes, mean, std)


def linear_spec(n_features: int, n_classes: int) -> ModelSpec:
    return ModelSpec((n_features,), (LayerSpec("linear", out=n_classes),), n_classes)


@dataclass
class ModelState:
    """Parameters and batch-norm statistics of a :class:`ModelSpec`.

    Parameter names are ``"{layer_index}.weight"`` / ``"{layer_index}.bias"``
    (``gamma``/``beta`` for batch-norm); running statistics live in
    ``buffers`` as ``"{i}.running_mean"`` / ``"{i}.running_var"``.
    """

    spec: ModelSpec
    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray] = field(default_factory=dict)
    regime: str = "RANDOM"
    training: bool = False

    def __post_init__(self):
        expected = param_shapes(self.spec)
        if set(expected) != set(self.params):
            raise SpecError(f"parameter names {sorted(self.params)} do not match spec {sorted(expected)}")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise SpecError(f"parameter {name} has shape {self.params[name].shape}, expected {shape}")
        for name, shape in buffer_shapes(self.spec).items():
            if name not in self.buffers:
                self.buffers[name] = np.ones(shape) if name.endswith("var") else np.zeros(shape)
            if name.endswith("var") and np.any(self.buffers[name] <= 0):
                raise SpecError(f"{name} must be strictly positive")

    def copy(self) -> "ModelState":
        return ModelState(
            self.spec,
            {k: v.copy() for k, v in self.params.items()},
            {k: v.copy() for k, v in self.buffers.items()},
            self.regime,
            self.training,
        )

    def fingerprint(self) -> str:
        h = hashlib.sha1(self.spec.to_text().encode())
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name]).tobytes())
        return h.hexdigest()[:12]

    @property
    def model_id(self) -> str:
        return f"{self.regime}-{self.fingerprint()}"

    @property
    def input_shape(self) -> tuple[int, ...]:
        return tuple(self.spec.input_shape)

    @property
    def n_classes(self) -> int:
        return self.spec.n_classes

    def named_parameters(self) -> Iterator[tuple[str, np.ndarray]]:
        yield from self.params.items()

    def logits_tensor(self, tape: Tape, x: Tensor, param_tensors: dict | None = None, training: bool | None = None):
        return forward(self, tape, x, param_tensors=param_tensors, training=training)

    def feature_tensor(self, tape: Tape, x: Tensor, param_tensors: dict | None = None, training: bool | None = None):
        return forward(self, tape, x, param_tensors=param_tensors, training=training, stop=len(self.spec.layers) - 1)


def param_shapes(spec: ModelSpec) -> dict[str, tuple[int, ...]]:
    shapes = {}
    prev = tuple(spec.input_shape)
    for i, (layer, out) in enumerate(zip(spec.layers, spec.shapes())):
        if layer.kind == "conv":
            shapes[f"{i}.weight"] = (layer.out, prev[0], layer.kernel, layer.kernel)
            shapes[f"{i}.bias"] = (layer.out,)
        elif layer.kind == "linear":
            shapes[f"{i}.weight"] = (layer.out, prev[0])
            shapes[f"{i}.bias"] = (layer.out,)
        elif layer.kind == "batchnorm":
            shapes[f"{i}.gamma"] = (prev[0],)
            shapes[f"{i}.beta"] = (prev[0],)
        prev = out
    return shapes


def buffer_shapes(spec: ModelSpec) -> dict[str, tuple[int, ...]]:
    shapes = {}
    prev = tuple(spec.input_shape)
    for i, (layer, out) in enumerate(zip(spec.layers, spec.shapes())):
        if layer.kind == "batchnorm":
            shapes[f"{i}.running_mean"] = (prev[0],)
            shapes[f"{i}.running_var"] = (prev[0],)
        prev = out
    return shapes


def init_state(spec: ModelSpec, rng: np.random.Generator | int = 0, regime: str = "RANDOM") -> ModelState:
    """He (fan-in) normal initialization; zero biases, unit batch-norm scale."""
    rng = np.random.default_rng(rng)
    params = {}
    for name, shape in param_shapes(spec).items():
        if name.endswith("weight"):
            fan_in = int(np.prod(shape[1:]))
            params[name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        elif name.endswith("gamma"):
            params[name] = np.ones(shape)
        else:
            params[name] = np.zeros(shape)
    return ModelState(spec, params, regime=regime)


def zero_state(spec: ModelSpec, regime: str = "RANDOM") -> ModelState:
    params = {name: np.zeros(shape) for name, shape in param_shapes(spec).items()}
    for name in params:
        if name.endswith("gamma"):
            params[name][:] = 1.0
    return ModelState(spec, params, regime=regime)


BN_MOMENTUM = 0.1


def forward(
    state: ModelState,
    tape: Tape,
    x: Tensor,
    param_tensors: dict | None = None,
    training: bool | None = None,
    stop: int | None = None,
    capture: dict | None = None,
) -> Tensor:
    """Record the model on ``tape`` and return the logits tensor.

    ``param_tensors`` supplies tape tensors for parameters that should be
    differentiated; others enter as constants.  ``stop`` truncates before
    layer ``stop``.  ``capture`` (a dict) receives every layer output keyed by
    layer index.  In training mode batch-norm uses batch statistics and the
    running estimates in ``state.buffers`` are updated.
    """
    training = state.training if training is None else training
    spec = state.spec
    batch = x.shape[0]
    if tuple(x.shape[1:]) != tuple(spec.input_shape):
        raise ad.ShapeMismatchError(x.id, f"input shape {tuple(x.shape[1:])} does not match spec {spec.input_shape}")
    param_tensors = param_tensors or {}

    def p(name):
        t = param_tensors.get(name)
        return t if t is not None else tape.constant(state.params[name])

    h = x if spec.mean is None else ad.channel_affine(x, spec.mean, 1.0 / np.asarray(spec.std))
    layers = spec.layers if stop is None else spec.layers[:stop]
    for i, layer in enumerate(layers):
        k = layer.kind
        if k == "conv":
            h = ad.conv2d(h, p(f"{i}.weight"), p(f"{i}.bias"), stride=layer.stride, padding=layer.padding)
        elif k == "relu":
            h = ad.relu(h)
        elif k == "maxpool":
            h = ad.max_pool2d(h, kernel=layer.kernel, stride=layer.stride)
        elif k == "flatten":
            h = h.reshape(batch, -1)
        elif k == "linear":
            h = ad.linear(h, p(f"{i}.weight"), p(f"{i}.bias"))
        elif k == "batchnorm":
            if training:
                data = h.data
                mu = data.mean(axis=(0, 2, 3))
                m = data.shape[0] * data.shape[2] * data.shape[3]
                var_unbiased = data.var(axis=(0, 2, 3)) * m / max(m - 1, 1)
                h = ad.batch_norm2d(h, p(f"{i}.gamma"), p(f"{i}.beta"))
                rm, rv = f"{i}.running_mean", f"{i}.running_var"
                state.buffers[rm] = (1 - BN_MOMENTUM) * state.buffers[rm] + BN_MOMENTUM * mu
                state.buffers[rv] = (1 - BN_MOMENTUM) * state.buffers[rv] + BN_MOMENTUM * var_unbiased
            else:
                h = ad.batch_norm2d(
                    h,
                    p(f"{i}.gamma"),
                    p(f"{i}.beta"),
                    mean=state.buffers[f"{i}.running_mean"],
                    var=state.buffers[f"{i}.running_var"],
                )
        if capture is not None:
            capture[i] = h
    return h


def _as_batch(state_shape, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.shape == tuple(state_shape):
        return x[None], True
    return x, False


def classify(state, x, chunk: int = 256) -> np.ndarray:
    """Logits for one sample ``(C,H,W)`` or a batch ``(N,C,H,W)``.

    Evaluation is done in fixed-size chunks so results do not depend on how
    the caller batches its data.
    """
    xb, single = _as_batch(state.input_shape, x)
    if tuple(xb.shape[1:]) != tuple(state.input_shape):
        raise ad.ShapeMismatchError(-1, f"input shape {xb.shape[1:]} does not match model input {state.input_shape}")
    outs = []
    for start in range(0, xb.shape[0], chunk):
        tape = Tape()
        xt = tape.constant(xb[start : start + chunk])
        outs.append(state.logits_tensor(tape, xt, training=False).data)
    logits = np.concatenate(outs, axis=0) if outs else np.zeros((0, state.n_classes))
    return logits[0] if single else logits


def predict(state, x, chunk: int = 256) -> np.ndarray:
    return np.argmax(classify(state, x, chunk=chunk), axis=-1)


def softmax(z: np.ndarray) -> np.ndarray:
    return np.exp(ad.log_softmax(np.asarray(z, dtype=np.float64)))


def softmax_cross_entropy(logits, t: int) -> tuple[float, np.ndarray]:
    """Loss ``-log softmax(logits)[t]`` and its gradient ``softmax - onehot``."""
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 1:
        raise ValueError("expected a logit vector")
    if not 0 <= int(t) < z.shape[0]:
        raise ValueError(f"label {t} out of range for {z.shape[0]} classes")
    lp = ad.log_softmax(z)
    g = np.exp(lp)
    g[int(t)] -= 1.0
    return float(-lp[int(t)]), g


def input_gradient(
    model,
    x: np.ndarray,
    seed_fn,
    mode: GradientMode = GradientMode.STANDARD,
) -> tuple[np.ndarray, np.ndarray]:
    """Logits and the gradient of ``sum(seed * logits)`` w.r.t. a batch ``x``.

    ``seed_fn(logits) -> seed`` picks the output cotangent.
    """
    tape = Tape()
    xt = tape.variable(x)
    logits = model.logits_tensor(tape, xt, training=False)
    seed = seed_fn(logits.data)
    (g,) = tape.backward(logits, seed=seed, mode=mode, wrt=[xt])
    return logits.data, g


def loss_and_input_gradient(model, x: np.ndarray, labels, mode: GradientMode = GradientMode.STANDARD):
    """Per-sample cross-entropy losses and their input gradients."""
    tape = Tape()
    xt = tape.variable(x)
    logits = model.logits_tensor(tape, xt, training=False)
    losses = ad.softmax_cross_entropy(logits, labels, reduction="none")
    (g,) = tape.backward(losses, seed=np.ones(losses.shape), mode=mode, wrt=[xt])
    return losses.data, g
