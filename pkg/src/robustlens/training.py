"""Standard and adversarial training with momentum SGD and step decay."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from ._random import substream
from .attacks import PerturbationBudget, fgsm_delta, pgd_delta
from .datasets import LabeledDataset
from .nn import ModelSpec, ModelState, init_state, predict

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("epoch", "lr", "trainLoss", "trainAcc", "valAcc", "valRobustAcc")


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite; ``last_good`` holds the state before that step."""

    def __init__(self, message, last_good, history):
        super().__init__(message)
        self.last_good = last_good
        self.history = history


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    lr: float = 0.01
    momentum: float = 0.9
    decay_factor: float = 0.1
    decay_every: int = 30
    seed: int = 0
    regime: str = "STD"
    epsilon: float = 0.005
    attack: str = "fgsm"
    attack_alpha: float | None = None
    attack_steps: int = 10
    flip: bool = False
    eval_robust: bool = True
    eval_epsilon: float | None = None
    eval_samples: int = 200
    batchnorm: bool = False

    def __post_init__(self):
        if not self.lr >= 0 or not 0 <= self.momentum < 1 or not 0 < self.decay_factor <= 1:
            raise ValueError("need lr >= 0, 0 <= momentum < 1, 0 < decay_factor <= 1")
        if self.epochs < 0 or self.batch_size < 1 or self.decay_every < 1:
            raise ValueError("epochs, batch_size and decay_every must be positive")
        if self.regime not in ("STD", "ADV"):
            raise ValueError(f"regime must be STD or ADV, got {self.regime!r}")
        if self.attack not in ("fgsm", "pgd"):
            raise ValueError(f"attack must be fgsm or pgd, got {self.attack!r}")

    @property
    def budget(self) -> PerturbationBudget:
        return PerturbationBudget(self.epsilon, self.attack_alpha, self.attack_steps, random_init=True)

    @classmethod
    def profile(cls, name: str, **overrides) -> "TrainConfig":
        return replace(PROFILES[name], **overrides)

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        """Parse ``key=value`` lines; an optional ``profile=`` sets the base."""
        pairs = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"line {lineno}: expected key=value, got {raw!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            pairs[key] = value
        base = PROFILES[pairs.pop("profile", "desk")]
        types = {f.name: f.type for f in fields(cls)}
        kw = {}
        for key, value in pairs.items():
            if key not in types:
                raise ValueError(f"unknown config key {key!r}")
            kw[key] = _coerce(value, getattr(base, key), types[key])
        return replace(base, **kw)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        return cls.from_text(Path(path).read_text())

    def to_text(self) -> str:
        return "".join(f"{k}={'' if v is None else v}\n" for k, v in asdict(self).items())


def _coerce(value: str, default, annotation: str):
    if value == "" or value.lower() == "none":
        return None
    if isinstance(default, bool) or "bool" in str(annotation):
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if isinstance(default, int) or str(annotation) == "int":
        return int(value)
    if isinstance(default, float) or "float" in str(annotation):
        return float(value)
    return value


PROFILES = {
    "desk": TrainConfig(),
    "paper": TrainConfig(epochs=90, batch_size=256, lr=0.1, momentum=0.9, decay_factor=0.1, decay_every=30),
    "fusion": TrainConfig(epochs=30, batch_size=64, lr=0.001, momentum=0.9, decay_factor=0.1, decay_every=30),
}


# --------------------------------------------------------------------------
# optimizer


def scheduled_lr(initial_lr: float, decay_factor: float, decay_every: int, epoch: int) -> float:
    return initial_lr * decay_factor ** (epoch // decay_every)


@dataclass
class OptimizerState:
    velocity: dict[str, np.ndarray]
    lr: float
    epoch: int = 0
    skipped: int = 0

    @classmethod
    def for_params(cls, params: dict[str, np.ndarray], lr: float) -> "OptimizerState":
        return cls({k: np.zeros_like(v) for k, v in params.items()}, lr)


def sgd_momentum_step(opt: OptimizerState, params: dict, grads: dict, momentum: float) -> bool:
    """``v <- momentum * v + g``; ``p <- p - lr * v``, in place.

    Returns False (and counts a skip) when any gradient is non-finite.
    """
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {params[name].shape}")
    if not all(np.all(np.isfinite(g)) for g in grads.values()):
        opt.skipped += 1
        log.warning("non-finite gradient, step skipped (%d so far)", opt.skipped)
        return False
    for name, g in grads.items():
        v = opt.velocity[name]
        v *= momentum
        v += g
        params[name] -= opt.lr * v
    return True


# --------------------------------------------------------------------------
# loop


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    train_acc: float
    val_acc: float = math.nan
    val_robust_acc: float = math.nan

    def row(self) -> list:
        return [self.epoch, self.lr, self.train_loss, self.train_acc, self.val_acc, self.val_robust_acc]


def write_history(history: list[EpochRecord], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_COLUMNS)
        for rec in history:
            w.writerow([_fmt(v) for v in rec.row()])
    return path


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def _flip(x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    mask = rng.random(x.shape[0]) < 0.5
    out = x.copy()
    out[mask] = out[mask][..., ::-1]
    return out


def fit_model(model, config: TrainConfig, data: LabeledDataset, val: LabeledDataset | None = None, trainable=None):
    """Shared SGD loop for anything exposing ``params`` and ``logits_tensor``.

    ``trainable`` restricts which parameter names are updated.
    """
    params = model.params
    names = [n for n in params if trainable is None or n in trainable]
    opt = OptimizerState.for_params({n: params[n] for n in names}, config.lr)
    history: list[EpochRecord] = []
    order_rng = substream(config.seed, "data-order")
    flip_rng = substream(config.seed, "augment")
    attack_rng = substream(config.seed, "attack")
    n = len(data)
    eval_eps = config.epsilon if config.eval_epsilon is None else config.eval_epsilon
    for epoch in range(config.epochs):
        opt.epoch = epoch
        opt.lr = scheduled_lr(config.lr, config.decay_factor, config.decay_every, epoch)
        order = order_rng.permutation(n)
        total_loss, correct = 0.0, 0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            x, y = data.images[idx], data.labels[idx]
            if config.flip:
                x = _flip(x, flip_rng)
            if config.regime == "ADV":
                if config.attack == "fgsm":
                    x = x + fgsm_delta(model, x, y, config.epsilon)
                else:
                    x = x + pgd_delta(model, x, y, config.budget, rng=attack_rng)
            tape = ad.Tape()
            xt = tape.constant(x)
            ptensors = {k: tape.variable(params[k]) for k in names}
            logits = model.logits_tensor(tape, xt, param_tensors=ptensors, training=True)
            loss = ad.softmax_cross_entropy(logits, y, reduction="mean")
            lval = float(loss.data)
            if not math.isfinite(lval):
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}", model.copy(), history)
            grads = tape.backward(loss, wrt=list(ptensors.values()), retain=False)
            sgd_momentum_step(opt, params, dict(zip(names, grads)), config.momentum)
            total_loss += lval * len(idx)
            correct += int(np.sum(np.argmax(logits.data, axis=1) == y))
        rec = EpochRecord(epoch, opt.lr, total_loss / max(n, 1), correct / max(n, 1))
        if val is not None and len(val):
            rec.val_acc = float(np.mean(predict(model, val.images) == val.labels))
            if config.eval_robust and eval_eps > 0:
                from .harness import evaluate_robustness

                budget = PerturbationBudget(eval_eps, eval_eps / 4, 10, random_init=True)
                rec.val_robust_acc = evaluate_robustness(model, val.head(config.eval_samples), budget, seed=config.seed)
        log.info("epoch %d lr %.4g loss %.4f acc %.4f val %.4f", epoch, opt.lr, rec.train_loss, rec.train_acc, rec.val_acc)
        history.append(rec)
    return model, history


def channel_stats(data: LabeledDataset) -> tuple[tuple[float, ...], tuple[float, ...]]:
    """Per-channel mean/std of the training images (std floored at 1e-3)."""
    mean = data.images.mean(axis=(0, 2, 3))
    std = np.maximum(data.images.std(axis=(0, 2, 3)), 1e-3)
    return tuple(round(float(v), 6) for v in mean), tuple(round(float(v), 6) for v in std)


def train(
    config: TrainConfig,
    data: LabeledDataset,
    spec: ModelSpec | None = None,
    val: LabeledDataset | None = None,
    init: ModelState | None = None,
) -> tuple[ModelState, list[EpochRecord]]:
    """Train a fresh (or given) model under the configured regime."""
    if len(data) == 0:
        raise ValueError("empty training set")
    if spec is None:
        from .nn import small_convnet_spec

        mean, std = channel_stats(data)
        spec = small_convnet_spec(data.input_shape, data.n_classes, batchnorm=config.batchnorm, mean=mean, std=std)
    if tuple(spec.input_shape) != data.input_shape:
        raise ValueError(f"data shape {data.input_shape} does not match spec input {spec.input_shape}")
    state = init.copy() if init is not None else init_state(spec, substream(config.seed, "init"))
    if config.epochs == 0:
        return state, []
    state.regime = config.regime
    return fit_model(state, config, data, val)
