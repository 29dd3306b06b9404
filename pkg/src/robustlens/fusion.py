"""Late fusion of two classifiers through a shared linear head."""

from __future__ import annotations

import hashlib

import numpy as np

from . import autodiff as ad
from ._random import substream
from .nn import ModelSpec, ModelState, SpecError


class FusionModel:
    """Penultimate features of ``a`` and ``b`` concatenated into a new head.

    ``params`` is a flat view (``a.*``, ``b.*``, ``head.*``) sharing storage
    with the backbones, so in-place optimizer updates reach them directly.
    """

    training = False

    def __init__(self, a: ModelState, b: ModelState, weight: np.ndarray, bias: np.ndarray, freeze: bool = False):
        if tuple(a.input_shape) != tuple(b.input_shape):
            raise ValueError(f"backbone input shapes differ: {a.input_shape} vs {b.input_shape}")
        width = a.spec.feature_width + b.spec.feature_width
        weight = np.asarray(weight, dtype=np.float64)
        bias = np.asarray(bias, dtype=np.float64)
        if weight.ndim != 2 or weight.shape[1] != width or bias.shape != (weight.shape[0],):
            raise SpecError(f"head must be (K, {width}) with a length-K bias, got {weight.shape} and {bias.shape}")
        self.a, self.b, self.freeze = a, b, bool(freeze)
        self.params = {f"a.{k}": v for k, v in a.params.items()}
        self.params.update({f"b.{k}": v for k, v in b.params.items()})
        self.params["head.weight"] = weight
        self.params["head.bias"] = bias

    @property
    def input_shape(self) -> tuple[int, ...]:
        return tuple(self.a.input_shape)

    @property
    def n_classes(self) -> int:
        return self.params["head.weight"].shape[0]

    @property
    def regime(self) -> str:
        return f"{self.a.regime}+{self.b.regime}"

    @property
    def trainable(self) -> list[str]:
        if self.freeze:
            return ["head.weight", "head.bias"]
        return list(self.params)

    def fingerprint(self) -> str:
        h = hashlib.sha1(self.spec_text().encode())
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name]).tobytes())
        return h.hexdigest()[:12]

    @property
    def model_id(self) -> str:
        return f"{self.regime}-{self.fingerprint()}"

    def copy(self) -> "FusionModel":
        return FusionModel(
            self.a.copy(), self.b.copy(), self.params["head.weight"].copy(), self.params["head.bias"].copy(), self.freeze
        )

    def features_tensor(self, tape, x, param_tensors=None, training=None):
        pt = param_tensors or {}
        pa = {k[2:]: v for k, v in pt.items() if k.startswith("a.")}
        pb = {k[2:]: v for k, v in pt.items() if k.startswith("b.")}
        fa = self.a.feature_tensor(tape, x, param_tensors=pa, training=training)
        fb = self.b.feature_tensor(tape, x, param_tensors=pb, training=training)
        return ad.concat([fa, fb], axis=1)

    def logits_tensor(self, tape, x, param_tensors=None, training=None):
        pt = param_tensors or {}
        h = self.features_tensor(tape, x, pt, training)
        w, b = (pt.get(n) for n in ("head.weight", "head.bias"))
        w = tape.constant(self.params["head.weight"]) if w is None else w
        b = tape.constant(self.params["head.bias"]) if b is None else b
        return ad.linear(h, w, b)

    # serialization -------------------------------------------------------

    def spec_text(self) -> str:
        return (
            "fusion\n"
            f"freeze {int(self.freeze)}\n"
            f"regime_a {self.a.regime}\n"
            f"regime_b {self.b.regime}\n"
            "[a]\n" + self.a.spec.to_text() + "[b]\n" + self.b.spec.to_text()
        )

    def arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for tag, m in (("a", self.a), ("b", self.b)):
            out.update({f"{tag}.param:{k}": v for k, v in m.params.items()})
            out.update({f"{tag}.buffer:{k}": v for k, v in m.buffers.items()})
        out["head.weight"] = self.params["head.weight"]
        out["head.bias"] = self.params["head.bias"]
        return out

    @classmethod
    def from_container(cls, text: str, regime: str, arrays: dict[str, np.ndarray]) -> "FusionModel":
        lines = text.splitlines()
        try:
            header = dict(line.split(" ", 1) for line in lines[:3])
            ia, ib = lines.index("[a]"), lines.index("[b]")
            spec_a = ModelSpec.from_text("\n".join(lines[ia + 1 : ib]) + "\n")
            spec_b = ModelSpec.from_text("\n".join(lines[ib + 1 :]) + "\n")
        except (ValueError, KeyError) as exc:
            raise SpecError(f"malformed fusion spec: {exc}") from exc

        def part(tag, spec, reg):
            params = {k.split(":", 1)[1]: v for k, v in arrays.items() if k.startswith(f"{tag}.param:")}
            buffers = {k.split(":", 1)[1]: v for k, v in arrays.items() if k.startswith(f"{tag}.buffer:")}
            return ModelState(spec, params, buffers, regime=reg)

        a = part("a", spec_a, header["regime_a"])
        b = part("b", spec_b, header["regime_b"])
        if "head.weight" not in arrays or "head.bias" not in arrays:
            raise SpecError("fusion checkpoint lacks head parameters")
        return cls(a, b, arrays["head.weight"], arrays["head.bias"], freeze=header["freeze"] == "1")


def build_fusion(
    a: ModelState, b: ModelState, n_classes: int | None = None, seed: int = 0, init: str = "uniform", freeze: bool = False
) -> FusionModel:
    """Drop both terminal layers and attach a fresh head over ``[feat_a, feat_b]``.

    ``init="uniform"`` draws from U(-1/sqrt(width), 1/sqrt(width)); ``"zeros"``
    gives a head whose softmax is uniform everywhere.
    """
    if tuple(a.input_shape) != tuple(b.input_shape):
        raise ValueError(f"backbone input shapes differ: {a.input_shape} vs {b.input_shape}")
    k = a.n_classes if n_classes is None else int(n_classes)
    width = a.spec.feature_width + b.spec.feature_width
    if init == "uniform":
        bound = 1.0 / np.sqrt(width)
        weight = substream(seed, "fusion-head").uniform(-bound, bound, size=(k, width))
    elif init == "zeros":
        weight = np.zeros((k, width))
    else:
        raise ValueError(f"unknown head init {init!r}")
    return FusionModel(a.copy(), b.copy(), weight, np.zeros(k), freeze=freeze)


def finetune_fusion(model: FusionModel, config=None, data=None, val=None):
    """Fine-tune with the shared SGD loop; returns ``(model, history)``."""
    from .training import TrainConfig, fit_model

    if data is None or len(data) == 0:
        raise ValueError("empty training set")
    if tuple(data.input_shape) != model.input_shape:
        raise ValueError(f"data shape {data.input_shape} does not match model input {model.input_shape}")
    config = TrainConfig.profile("fusion") if config is None else config
    return fit_model(model, config, data, val, trainable=model.trainable)
