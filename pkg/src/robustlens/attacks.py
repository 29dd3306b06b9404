"""L-infinity FGSM and PGD attacks in raw [0, 1] pixel space."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import log_softmax
from .nn import classify, loss_and_input_gradient


class AttackError(RuntimeError):
    pass


@dataclass(frozen=True)
class PerturbationBudget:
    epsilon: float
    alpha: float | None = None
    steps: int = 10
    random_init: bool = True
    norm: str = "linf"

    def __post_init__(self):
        if self.norm != "linf":
            raise ValueError(f"unsupported norm {self.norm!r}")
        if self.alpha is None:
            object.__setattr__(self, "alpha", self.epsilon / 4.0)
        if not (self.epsilon >= 0 and self.alpha >= 0 and self.steps >= 1):
            raise ValueError(f"invalid budget: eps={self.epsilon}, alpha={self.alpha}, steps={self.steps}")


@dataclass
class AttackResult:
    delta: np.ndarray
    succeeded: np.ndarray
    final_loss: np.ndarray
    loss_history: list = field(default_factory=list)


def sign(g: np.ndarray) -> np.ndarray:
    # np.sign already maps 0 -> 0
    return np.sign(g)


def project_linf(delta, epsilon: float) -> np.ndarray:
    return np.clip(np.asarray(delta, dtype=np.float64), -epsilon, epsilon)


def fit_box(x: np.ndarray, delta: np.ndarray, epsilon: float) -> np.ndarray:
    """Clamp ``delta`` to the eps-ball and to ``[-x, 1 - x]``.

    Clamping the perturbation (rather than ``x + delta``) keeps both
    ``|delta| <= eps`` and ``0 <= x + delta <= 1`` exact in floating point,
    since float addition is monotone and ``x + fl(1 - x)`` never exceeds 1.
    """
    delta = np.clip(delta, -epsilon, epsilon)
    return np.minimum(np.maximum(delta, -x), 1.0 - x)


def _prepare(state, x, t):
    x = np.asarray(x, dtype=np.float64)
    single = x.shape == tuple(state.input_shape)
    xb = x[None] if single else x
    tb = np.atleast_1d(np.asarray(t, dtype=np.int64))
    if tb.shape[0] != xb.shape[0]:
        raise ValueError("one label per sample required")
    if np.any(tb < 0) or np.any(tb >= state.n_classes):
        raise ValueError("label out of range")
    return xb, tb, single


def _grad(state, x, t):
    losses, g = loss_and_input_gradient(state, x, t)
    if not (np.all(np.isfinite(g)) and np.all(np.isfinite(losses))):
        bad = int(np.flatnonzero(~np.isfinite(losses) | ~np.isfinite(g).reshape(len(g), -1).all(axis=1))[0])
        raise AttackError(f"non-finite loss or gradient at sample {bad}")
    return losses, g


def _finish(state, xb, tb, delta, single, history):
    logits = classify(state, xb + delta)
    losses = -log_softmax(logits)[np.arange(len(tb)), tb]
    succeeded = np.argmax(logits, axis=-1) != tb
    history = history + [losses]
    if single:
        return AttackResult(delta[0], succeeded[0], losses[0], [h[0] for h in history])
    return AttackResult(delta, succeeded, losses, history)


def fgsm(state, x, t, epsilon: float) -> AttackResult:
    """``delta = eps * sign(grad_x L)`` followed by the pixel-range clamp."""
    if epsilon < 0:
        raise ValueError("epsilon must be nonnegative")
    xb, tb, single = _prepare(state, x, t)
    _, g = _grad(state, xb, tb)
    delta = fit_box(xb, epsilon * sign(g), epsilon)
    return _finish(state, xb, tb, delta, single, [])


def fgsm_delta(state, x: np.ndarray, t: np.ndarray, epsilon: float) -> np.ndarray:
    """Batch FGSM perturbation only (one forward/backward, no bookkeeping)."""
    _, g = _grad(state, x, t)
    return fit_box(x, epsilon * sign(g), epsilon)


def pgd_delta(state, x: np.ndarray, t: np.ndarray, budget: PerturbationBudget, rng=None, history=None):
    eps, alpha = budget.epsilon, budget.alpha
    if budget.random_init:
        rng = np.random.default_rng(rng)
        delta = fit_box(x, rng.uniform(-eps, eps, size=x.shape), eps)
    else:
        delta = np.zeros_like(x)
    for _ in range(budget.steps):
        losses, g = _grad(state, x + delta, t)
        if history is not None:
            history.append(losses)
        delta = fit_box(x, project_linf(delta + alpha * sign(g), eps), eps)
    return delta


def pgd(state, x, t, budget: PerturbationBudget, rng=None) -> AttackResult:
    """Iterated signed-gradient ascent projected onto the eps-ball and [0, 1]."""
    xb, tb, single = _prepare(state, x, t)
    history: list = []
    delta = pgd_delta(state, xb, tb, budget, rng=rng, history=history)
    return _finish(state, xb, tb, delta, single, history)


def is_adversarial(state, x, delta, t) -> np.ndarray | bool:
    x = np.asarray(x, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    if x.shape != delta.shape:
        raise ValueError("x and delta shapes differ")
    pred = np.argmax(classify(state, x + delta), axis=-1)
    out = pred != np.asarray(t)
    return bool(out) if np.ndim(out) == 0 else out
