"""Gradient sensitivity maps and activation maximization.

Every map method takes one input ``x`` shaped like the model input (or a
batch with one label per sample) and returns a :class:`SaliencyMap` whose
values have exactly the shape of ``x``.  Maps are raw input gradients; no
input product or grayscale conversion is applied here.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from ._random import substream
from .autodiff import GradientMode, Tape
from .nn import input_gradient, loss_and_input_gradient

log = logging.getLogger(__name__)

METHODS = ("vanilla", "loss", "guided", "smoothgrad", "integrated")


class SaliencyError(ValueError):
    pass


@dataclass
class SaliencyMap:
    values: np.ndarray
    method: str
    model_id: str
    label: int | list
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if not np.all(np.isfinite(self.values)):
            raise SaliencyError(f"{self.method} map has non-finite values")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def metadata(self) -> str:
        lines = [f"method={self.method}", f"model_id={self.model_id}", f"label={_fmt_label(self.label)}"]
        lines += [f"shape={','.join(map(str, self.values.shape))}"]
        lines += [f"param.{k}={v}" for k, v in sorted(self.params.items())]
        return "\n".join(lines) + "\n"


def _fmt_label(label) -> str:
    return ",".join(map(str, label)) if isinstance(label, (list, tuple)) else str(label)


class FunctionModel:
    """Adapter giving a plain tape function the model interface.

    ``fn(tape, x) -> Tensor`` must map an ``(N, *input_shape)`` tensor to
    ``(N, n_classes)`` outputs.
    """

    def __init__(self, fn, input_shape, n_classes: int, name: str = "function", regime: str = "RANDOM"):
        self.fn = fn
        self.input_shape = tuple(input_shape)
        self.n_classes = int(n_classes)
        self.name = name
        self.regime = regime
        self.training = False

    @property
    def model_id(self) -> str:
        return self.name

    def logits_tensor(self, tape, x, param_tensors=None, training=None):
        return self.fn(tape, x)


# --------------------------------------------------------------------------
# helpers


def _batch(model, x, t):
    x = np.asarray(x, dtype=np.float64)
    single = x.shape == tuple(model.input_shape)
    xb = x[None] if single else x
    if tuple(xb.shape[1:]) != tuple(model.input_shape):
        raise SaliencyError(f"input shape {x.shape} does not match model input {model.input_shape}")
    tb = np.atleast_1d(np.asarray(t, dtype=np.int64))
    if tb.shape[0] == 1 and xb.shape[0] > 1:
        tb = np.repeat(tb, xb.shape[0])
    if tb.shape[0] != xb.shape[0]:
        raise SaliencyError("one label per sample required")
    if np.any(tb < 0) or np.any(tb >= model.n_classes):
        raise SaliencyError(f"label out of range for {model.n_classes} classes")
    return xb, tb, single


def _label(tb, single):
    return int(tb[0]) if single else [int(v) for v in tb]


def _model_id(model) -> str:
    return getattr(model, "model_id", type(model).__name__)


def _logit_grad(model, xb, tb, mode=GradientMode.STANDARD, chunk: int = 64) -> np.ndarray:
    out = np.empty_like(xb)
    for s in range(0, xb.shape[0], chunk):
        part = tb[s : s + chunk]

        def seed(z, part=part):
            e = np.zeros_like(z)
            e[np.arange(len(part)), part] = 1.0
            return e

        _, g = input_gradient(model, xb[s : s + chunk], seed, mode=mode)
        out[s : s + chunk] = g
    if not np.all(np.isfinite(out)):
        raise SaliencyError("non-finite gradient")
    return out


def _wrap(values, single, method, model, tb, params):
    return SaliencyMap(values[0] if single else values, method, _model_id(model), _label(tb, single), params)


# --------------------------------------------------------------------------
# map methods


def vanilla_grad(model, x, t) -> SaliencyMap:
    """Gradient of logit ``t`` with respect to the input."""
    xb, tb, single = _batch(model, x, t)
    return _wrap(_logit_grad(model, xb, tb), single, "vanilla", model, tb, {})


def loss_grad(model, x, t) -> SaliencyMap:
    """Gradient of the cross-entropy loss at label ``t``."""
    xb, tb, single = _batch(model, x, t)
    _, g = loss_and_input_gradient(model, xb, tb)
    if not np.all(np.isfinite(g)):
        raise SaliencyError("non-finite gradient")
    return _wrap(g, single, "loss", model, tb, {})


def softmax_weighted_grad(model, x) -> np.ndarray:
    """``sum_k softmax_k(x) * grad f_k(x)``, the second term of the loss gradient."""
    x = np.asarray(x, dtype=np.float64)
    single = x.shape == tuple(model.input_shape)
    xb = x[None] if single else x
    _, g = input_gradient(model, xb, lambda z: np.exp(ad.log_softmax(z)))
    return g[0] if single else g


def guided_backprop(model, x, t) -> SaliencyMap:
    """Logit gradient with the guided backward rule at every ReLU."""
    xb, tb, single = _batch(model, x, t)
    return _wrap(_logit_grad(model, xb, tb, GradientMode.GUIDED), single, "guided", model, tb, {})


DEFAULT_SMOOTHGRAD_SIGMA = 0.15
DEFAULT_SMOOTHGRAD_SAMPLES = 32


def smoothgrad(model, x, t, sigma: float | None = None, n: int = DEFAULT_SMOOTHGRAD_SAMPLES, seed: int = 0):
    """Mean logit gradient over ``n`` Gaussian-noised copies of ``x``.

    ``sigma`` defaults to 0.15 times the [0, 1] pixel range.  With ``sigma=0``
    the result is the vanilla gradient itself.
    """
    sigma = DEFAULT_SMOOTHGRAD_SIGMA if sigma is None else float(sigma)
    if sigma < 0 or n < 1:
        raise SaliencyError("need sigma >= 0 and n >= 1")
    xb, tb, single = _batch(model, x, t)
    params = {"sigma": sigma, "n": n, "seed": seed}
    if sigma == 0:
        return _wrap(_logit_grad(model, xb, tb), single, "smoothgrad", model, tb, params)
    rng = substream(seed, "smoothgrad")
    out = np.empty_like(xb)
    for i in range(xb.shape[0]):
        noisy = xb[i][None] + rng.normal(0.0, sigma, size=(n,) + xb.shape[1:])
        g = _logit_grad(model, noisy, np.full(n, tb[i]))
        out[i] = g.mean(axis=0)
    return _wrap(out, single, "smoothgrad", model, tb, params)


def integrated_gradient(model, x, t, baseline=None, steps: int = 64, variant: str = "scaled") -> SaliencyMap:
    """Left-Riemann path integral of logit gradients from ``baseline`` to ``x``.

    ``variant="raw"`` returns the averaged path gradient; ``"scaled"``
    multiplies it elementwise by ``x - baseline``.  The baseline defaults to
    the all-zeros image.
    """
    if steps < 1:
        raise SaliencyError("steps must be >= 1")
    if variant not in ("raw", "scaled"):
        raise SaliencyError(f"unknown variant {variant!r}")
    xb, tb, single = _batch(model, x, t)
    base = np.zeros_like(xb) if baseline is None else np.broadcast_to(np.asarray(baseline, dtype=np.float64), xb.shape)
    if base.shape != xb.shape:
        raise SaliencyError("baseline shape differs from input")
    params = {"steps": steps, "variant": variant, "baseline": "zeros" if baseline is None else "custom"}
    alphas = np.arange(steps, dtype=np.float64) / steps
    out = np.empty_like(xb)
    for i in range(xb.shape[0]):
        diff = xb[i] - base[i]
        if not np.any(diff):
            g = _logit_grad(model, base[i][None], tb[i : i + 1])[0]
        else:
            path = base[i][None] + alphas.reshape((-1,) + (1,) * diff.ndim) * diff[None]
            g = _logit_grad(model, path, np.full(steps, tb[i])).mean(axis=0)
        out[i] = g * diff if variant == "scaled" else g
    return _wrap(out, single, "integrated", model, tb, params)


def compute_map(method: str, model, x, t, **kw) -> SaliencyMap:
    fn = {
        "vanilla": vanilla_grad,
        "loss": loss_grad,
        "guided": guided_backprop,
        "smoothgrad": smoothgrad,
        "integrated": integrated_gradient,
    }.get(method)
    if fn is None:
        raise SaliencyError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")
    return fn(model, x, t, **kw)


# --------------------------------------------------------------------------
# activation maximization


@dataclass(frozen=True)
class AscentConfig:
    layer: int
    filter: int
    step_size: float = 0.01
    iterations: int = 100
    start: str = "zeros"
    clamp: tuple[float, float] | None = (0.0, 1.0)
    l2: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.start not in ("zeros", "noise"):
            raise ValueError(f"start must be zeros or noise, got {self.start!r}")
        if self.step_size < 0 or self.l2 < 0:
            raise ValueError("step_size and l2 must be nonnegative")


@dataclass
class AscentResult:
    x: np.ndarray
    trajectory: np.ndarray
    restarted: bool = False


def gradient_ascent(objective, x0, step_size: float, iterations: int, clamp=(0.0, 1.0), l2: float = 0.0):
    """Maximize ``objective(tape, x) -> scalar Tensor`` by projected ascent.

    The step is ``x <- clamp(x + step * (grad - 2 * l2 * x))``.  Returns the
    final point and the objective value before each step plus the final one.
    """
    x = np.array(x0, dtype=np.float64)
    traj = []
    for _ in range(iterations + 1):
        tape = Tape()
        xt = tape.variable(x)
        out = objective(tape, xt)
        traj.append(float(out.data) - l2 * float(np.sum(x * x)))
        if len(traj) > iterations:
            break
        (g,) = tape.backward(out, wrt=[xt], retain=False)
        if not np.all(np.isfinite(g)):
            raise SaliencyError("non-finite gradient during ascent")
        x = x + step_size * (g - 2.0 * l2 * x)
        if clamp is not None:
            x = np.clip(x, clamp[0], clamp[1])
    return x, np.asarray(traj)


def filter_objective(model, layer: int, filt: int):
    """``a(x)``: spatial sum of channel ``filt`` of the layer's activation.

    A conv layer directly followed by a ReLU is read after that ReLU.
    """
    from .nn import forward

    layers = model.spec.layers
    if not 0 <= layer < len(layers):
        raise ValueError(f"layer {layer} out of range")
    read = layer + 1 if layer + 1 < len(layers) and layers[layer + 1].kind == "relu" else layer
    width = model.spec.shapes()[read][0]
    if not 0 <= filt < width:
        raise ValueError(f"filter {filt} out of range for layer {layer} with {width} channels")

    def objective(tape, xt):
        cap: dict = {}
        forward(model, tape, xt.reshape((1,) + tuple(model.input_shape)), training=False, stop=read + 1, capture=cap)
        return _channel_sum(cap[read], filt)

    return objective


def _channel_sum(act, filt):
    mask = np.zeros(act.shape)
    mask[:, filt] = 1.0
    return (act * act.tape.constant(mask)).sum()


def activation_maximization(model, cfg: AscentConfig) -> AscentResult:
    """Synthesize an input that maximizes one filter's summed activation."""
    objective = filter_objective(model, cfg.layer, cfg.filter)
    shape = tuple(model.input_shape)
    rng = substream(cfg.seed, "ascent")
    restarted = False
    if cfg.start == "zeros":
        x0 = np.zeros(shape)
        tape = Tape()
        xt = tape.variable(x0)
        (g,) = tape.backward(objective(tape, xt), wrt=[xt])
        if not np.any(g):
            warnings.warn("zero gradient at the zero image; restarting from noise", RuntimeWarning, stacklevel=2)
            restarted = True
            x0 = rng.uniform(0.0, 1.0, size=shape)
    else:
        x0 = rng.uniform(0.0, 1.0, size=shape)
    x, traj = gradient_ascent(objective, x0, cfg.step_size, cfg.iterations, cfg.clamp, cfg.l2)
    return AscentResult(x, traj, restarted)


# --------------------------------------------------------------------------
# rendering and persistence


def render_map(smap, mode: str = "signed") -> np.ndarray:
    """8-bit rendering of a ``(C, H, W)`` (or ``(H, W)``) map.

    ``signed``: values are divided by ``max|v|``; each channel becomes an RGB
    tile (zero is mid-gray 128, positive goes to red, negative to blue) and
    tiles are laid side by side.  ``absolute``: ``max_c |v| / max|v|`` as an
    0-255 grayscale image.
    """
    v = np.asarray(smap.values if isinstance(smap, SaliencyMap) else smap, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise SaliencyError("cannot render a non-finite map")
    if v.ndim == 2:
        v = v[None]
    if v.ndim != 3:
        raise SaliencyError(f"expected a (C,H,W) map, got shape {v.shape}")
    m = float(np.max(np.abs(v))) if v.size else 0.0
    s = v / m if m > 0 else np.zeros_like(v)
    if mode == "signed":
        pos = np.rint(128.0 + 127.0 * s)
        neg = np.rint(128.0 - 127.0 * s)
        mid = np.rint(128.0 * (1.0 - np.abs(s)))
        rgb = np.stack([pos, mid, neg], axis=-1)
        return np.concatenate(list(rgb), axis=1).astype(np.uint8)
    if mode == "absolute":
        return np.rint(255.0 * np.max(np.abs(s), axis=0)).astype(np.uint8)
    raise SaliencyError(f"unknown render mode {mode!r}")


def write_image(pixels: np.ndarray, path) -> Path:
    """Write 8-bit pixels as PNG; fall back to PPM/PGM without Pillow."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pixels = np.asarray(pixels, dtype=np.uint8)
    try:
        from PIL import Image
    except ImportError:
        path = path.with_suffix(".ppm" if pixels.ndim == 3 else ".pgm")
        magic = b"P6" if pixels.ndim == 3 else b"P5"
        h, w = pixels.shape[:2]
        path.write_bytes(magic + f"\n{w} {h}\n255\n".encode() + pixels.tobytes())
        return path
    Image.fromarray(pixels).save(path, format="PNG")
    return path


def image_from_input(x) -> np.ndarray:
    """(C, H, W) image in [0, 1] to 8-bit (H, W[, 3]) pixels."""
    x = np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0)
    px = np.rint(255.0 * x).astype(np.uint8)
    if px.shape[0] == 1:
        return px[0]
    return np.moveaxis(px, 0, -1)


def save_map(smap: SaliencyMap, path) -> Path:
    """Map tensor in the checkpoint container plus a ``.meta`` sidecar."""
    from .checkpoint import write_container

    path = write_container(path, "saliency\n" + smap.method + "\n", "NONE", {"values": smap.values})
    Path(str(path) + ".meta").write_text(smap.metadata())
    return path


def load_map(path) -> SaliencyMap:
    from .checkpoint import CheckpointError, read_container

    spec_text, _, arrays = read_container(path)
    if not spec_text.startswith("saliency\n") or "values" not in arrays:
        raise CheckpointError(f"{path} does not hold a saliency map")
    meta = {}
    for line in Path(str(path) + ".meta").read_text().splitlines():
        key, _, value = line.partition("=")
        meta[key] = value
    label = meta.get("label", "")
    label = [int(v) for v in label.split(",")] if "," in label else int(label)
    params = {k[6:]: v for k, v in meta.items() if k.startswith("param.")}
    return SaliencyMap(arrays["values"], meta["method"], meta["model_id"], label, params)
