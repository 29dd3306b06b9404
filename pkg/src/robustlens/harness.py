"""Accuracy and robustness metrics, transform sweeps and saliency sanity checks.

Reports are flat ``(config_id, metric, value, n)`` rows.  Metric names:

``top{k}_acc``
    clean top-k accuracy.
``robust_acc;eps=E;alpha=A;steps=S;init=random|zero;count=all|clean_correct``
    accuracy under L-infinity PGD.
``acc;blur=SIGMA`` / ``acc;median=TIMES`` / ``acc;reverse``
    clean top-1 accuracy on transformed images.
``diff;...``
    the same settings, value is accuracy(first model) - accuracy(second).
``spearman;image=I`` / ``sign_agreement;image=I``
    per-image map similarity between two checkpoints.
``spearman_mean`` / ``sign_agreement_mean`` / ``repeat_spearman`` / ``pass``
    sanity-check summaries; ``pass`` is 1 or 0.

An undefined correlation is written as ``NA``.
"""

from __future__ import annotations

import csv
import io
import itertools
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from ._random import substream
from .attacks import PerturbationBudget, pgd_delta
from .datasets import LabeledDataset
from .nn import REGIMES, classify, predict

REPORT_COLUMNS = ("config_id", "metric", "value", "n")
CHUNK = 256


def n_threads() -> int:
    try:
        return max(1, int(os.environ.get("ROBUSTLENS_THREADS", "1")))
    except ValueError:
        return 1


def parallel_map(fn, items) -> list:
    """Order-preserving map over at most ``ROBUSTLENS_THREADS`` workers."""
    items = list(items)
    workers = min(n_threads(), len(items))
    if workers <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


# --------------------------------------------------------------------------
# report


def format_value(value) -> str:
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return "NA"
    if isinstance(value, (int, np.integer)) and not isinstance(value, bool):
        return str(int(value))
    return repr(float(value))


@dataclass
class EvalReport:
    rows: list[tuple] = field(default_factory=list)

    def add(self, config_id: str, metric: str, value, n: int) -> None:
        if int(n) <= 0:
            raise ValueError("sample counts must be positive")
        if value is not None and not isinstance(value, (int, float, np.integer, np.floating)):
            raise TypeError(f"report value must be numeric or None, got {type(value).__name__}")
        self.rows.append((str(config_id), str(metric), None if value is None else float(value), int(n)))

    def extend(self, other: "EvalReport") -> "EvalReport":
        self.rows.extend(other.rows)
        return self

    def __len__(self):
        return len(self.rows)

    def __iter__(self):
        return iter(self.rows)

    def value(self, config_id: str, metric: str):
        for c, m, v, _ in self.rows:
            if c == config_id and m == metric:
                return v
        raise KeyError((config_id, metric))

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for c, m, v, n in self.rows:
            w.writerow([c, m, format_value(v), n])
        text = buf.getvalue()
        if path is not None:
            path = Path(path)
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(text)
        return text

    @classmethod
    def from_csv(cls, path) -> "EvalReport":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if tuple(header) != REPORT_COLUMNS:
                raise ValueError(f"unexpected report header {header}")
            rep = cls()
            for c, m, v, n in reader:
                rep.rows.append((c, m, None if v == "NA" else float(v), int(n)))
        return rep


# --------------------------------------------------------------------------
# accuracy


def _require(data: LabeledDataset):
    if len(data) == 0:
        raise ValueError("empty dataset")


def topk_correct(logits: np.ndarray, labels: np.ndarray, k: int) -> np.ndarray:
    """Per-sample hit within the top k; ties go to the lower class index."""
    order = np.argsort(-logits, axis=1, kind="stable")[:, :k]
    return np.any(order == np.asarray(labels)[:, None], axis=1)


def evaluate_accuracy(model, data: LabeledDataset, k: int = 1) -> float:
    _require(data)
    if not 1 <= k <= model.n_classes:
        raise ValueError(f"k must be in [1, {model.n_classes}]")
    return float(np.mean(topk_correct(classify(model, data.images), data.labels, k)))


def robust_metric(budget: PerturbationBudget, convention: str = "all") -> str:
    init = "random" if budget.random_init else "zero"
    return f"robust_acc;eps={budget.epsilon:g};alpha={budget.alpha:g};steps={budget.steps};init={init};count={convention}"


def attacked_predictions(model, data: LabeledDataset, budget: PerturbationBudget, seed: int = 0) -> np.ndarray:
    """Predictions on PGD-perturbed inputs, attacked in fixed chunks.

    Each chunk draws from its own labeled substream, so results do not depend
    on the number of worker threads.
    """
    starts = list(range(0, len(data), CHUNK))

    def run(start):
        x = data.images[start : start + CHUNK]
        y = data.labels[start : start + CHUNK]
        if budget.epsilon == 0:
            return predict(model, x)
        delta = pgd_delta(model, x, y, budget, rng=substream(seed, "eval-attack", start))
        return predict(model, x + delta)

    parts = parallel_map(run, starts)
    return np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)


def evaluate_robustness(
    model, data: LabeledDataset, budget: PerturbationBudget, seed: int = 0, convention: str = "all"
) -> float:
    """Fraction still correctly classified under attack.

    ``convention="all"`` counts clean mistakes as failures; ``"clean_correct"``
    restricts the denominator to samples the model gets right without attack.
    """
    _require(data)
    if convention not in ("all", "clean_correct"):
        raise ValueError(f"unknown convention {convention!r}")
    survived = attacked_predictions(model, data, budget, seed) == data.labels
    if convention == "all":
        return float(np.mean(survived))
    clean = predict(model, data.images) == data.labels
    if not clean.any():
        return 0.0
    return float(np.mean(survived[clean]))


def evaluation_report(model, data: LabeledDataset, epsilons=(0.005, 0.01), seed: int = 0, convention: str = "all",
                      config_id: str | None = None, topk=(1,)) -> EvalReport:
    """Clean accuracy rows plus one robustness row per epsilon."""
    cid = config_id or model.model_id
    rep = EvalReport()
    for k in topk:
        rep.add(cid, f"top{k}_acc", evaluate_accuracy(model, data, k), len(data))
    for eps in epsilons:
        budget = PerturbationBudget(float(eps))
        rep.add(cid, robust_metric(budget, convention), evaluate_robustness(model, data, budget, seed, convention), len(data))
    return rep


# --------------------------------------------------------------------------
# transform sweeps


def transform_sweep(models: dict, data: LabeledDataset, grid) -> EvalReport:
    """Clean top-1 accuracy of every model on every transformed copy of ``data``.

    ``models`` maps a configuration id to a model; rows come out grouped by
    model in insertion order, settings in grid order.
    """
    _require(data)
    grid = list(grid)
    transformed = parallel_map(lambda spec: spec.apply(data.images), grid)
    rep = EvalReport()
    for cid, model in models.items():
        for spec, images in zip(grid, transformed):
            acc = float(np.mean(predict(model, images) == data.labels))
            rep.add(cid, f"acc;{spec.label}", acc, len(data))
    return rep


def sweep_difference(report: EvalReport, first: str, second: str) -> EvalReport:
    """Per-setting ``accuracy(first) - accuracy(second)``."""
    a = {m: (v, n) for c, m, v, n in report if c == first}
    b = {m: v for c, m, v, _ in report if c == second}
    out = EvalReport()
    for metric, (va, n) in a.items():
        if metric in b:
            out.add(f"{first}-{second}", "diff;" + metric.split(";", 1)[1], va - b[metric], n)
    return out


# --------------------------------------------------------------------------
# saliency similarity and sanity checks


@dataclass(frozen=True)
class SimilarityScore:
    spearman: float | None
    sign_agreement: float

    def __post_init__(self):
        if self.spearman is not None and not -1.0 <= self.spearman <= 1.0:
            raise ValueError("correlation outside [-1, 1]")
        if not 0.0 <= self.sign_agreement <= 1.0:
            raise ValueError("agreement outside [0, 1]")


def _values(m) -> np.ndarray:
    return np.asarray(getattr(m, "values", m), dtype=np.float64)


def saliency_similarity(a, b) -> SimilarityScore:
    """Spearman correlation of ``|a|`` vs ``|b|`` (average ranks on ties) and
    the fraction of entries whose signs agree.

    A map with constant magnitude has no rank variance; its correlation is
    reported as ``None``.
    """
    va, vb = _values(a).ravel(), _values(b).ravel()
    if va.shape != vb.shape:
        raise ValueError(f"map shapes differ: {_values(a).shape} vs {_values(b).shape}")
    agree = float(np.mean(np.sign(va) == np.sign(vb))) if va.size else 1.0
    aa, ab = np.abs(va), np.abs(vb)
    if va.size < 2 or np.all(aa == aa[0]) or np.all(ab == ab[0]):
        return SimilarityScore(None, agree)
    if np.array_equal(aa, ab):
        return SimilarityScore(1.0, agree)
    ra, rb = rankdata(aa), rankdata(ab)
    da, db = ra - ra.mean(), rb - rb.mean()
    rho = float(np.sum(da * db) / (np.sqrt(np.sum(da * da)) * np.sqrt(np.sum(db * db))))
    return SimilarityScore(min(1.0, max(-1.0, rho)), agree)


def regime_tags(models) -> list[str]:
    """Regime tag of each model; repeated tags get ``#2``, ``#3``... suffixes."""
    tags, seen = [], {}
    for m in models:
        tag = getattr(m, "regime", None)
        if not tag or tag.split("+")[0] not in REGIMES:
            raise ValueError(f"model without a regime tag (got {tag!r})")
        seen[tag] = seen.get(tag, 0) + 1
        tags.append(tag if seen[tag] == 1 else f"{tag}#{seen[tag]}")
    return tags


@dataclass
class SanityResult:
    report: EvalReport
    passed: dict
    mean_correlation: dict
    repeat_correlation: dict


def _mean(values):
    vals = [v for v in values if v is not None]
    return (float(np.mean(vals)) if vals else None), len(vals)


def sanity_check(models, images, labels, methods=("vanilla", "loss", "guided", "smoothgrad", "integrated"),
                 threshold: float = 0.8, method_kwargs: dict | None = None) -> SanityResult:
    """Compare every method's maps across checkpoints and against a repeat run.

    A method passes when its mean cross-checkpoint correlation is below
    ``threshold`` and recomputing a map on the same checkpoint gives
    correlation exactly 1.  All per-image raw scores are kept in the report.
    """
    from .saliency import compute_map

    models = list(models)
    if len(models) < 2:
        raise ValueError("need at least two checkpoints")
    tags = regime_tags(models)
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if images.shape[0] != labels.shape[0] or images.shape[0] == 0:
        raise ValueError("need one label per image and at least one image")
    method_kwargs = method_kwargs or {}
    rep = EvalReport()
    passed, means, repeats = {}, {}, {}
    n_img = images.shape[0]
    for method in methods:
        kw = method_kwargs.get(method, {})
        maps = {tag: compute_map(method, m, images, labels, **kw).values for tag, m in zip(tags, models)}
        again = compute_map(method, models[0], images, labels, **kw).values
        rep_scores = [saliency_similarity(maps[tags[0]][i], again[i]).spearman for i in range(n_img)]
        rep_mean, rep_n = _mean(rep_scores)
        repeats[method] = rep_mean
        rep.add(f"{method}:{tags[0]}~{tags[0]}", "repeat_spearman", rep_mean, max(rep_n, 1))
        cross = []
        for ta, tb in itertools.combinations(tags, 2):
            cid = f"{method}:{ta}~{tb}"
            scores = [saliency_similarity(maps[ta][i], maps[tb][i]) for i in range(n_img)]
            for i, s in enumerate(scores):
                rep.add(cid, f"spearman;image={i}", s.spearman, 1)
                rep.add(cid, f"sign_agreement;image={i}", s.sign_agreement, 1)
            mean, n = _mean([s.spearman for s in scores])
            rep.add(cid, "spearman_mean", mean, max(n, 1))
            rep.add(cid, "sign_agreement_mean", float(np.mean([s.sign_agreement for s in scores])), n_img)
            cross.append(mean)
        overall, _ = _mean(cross)
        means[method] = overall
        ok = overall is not None and overall < threshold and rep_mean == 1.0
        passed[method] = ok
        rep.add(f"{method}:all", "pass", 1 if ok else 0, n_img)
    return SanityResult(rep, passed, means, repeats)
