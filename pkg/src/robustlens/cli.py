"""Command-line entry point: ``robustlens <subcommand> ... --out DIR``.

Failures print a single ``error: <kind>: <message>`` line on stderr and exit
with status 1; usage errors exit with status 2.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import datasets
from .attacks import PerturbationBudget, fgsm, pgd
from .checkpoint import load_checkpoint, save_checkpoint, write_container
from .fusion import build_fusion, finetune_fusion
from .nn import classify
from .harness import evaluation_report, sanity_check, sweep_difference, transform_sweep
from .saliency import (
    METHODS,
    AscentConfig,
    activation_maximization,
    compute_map,
    image_from_input,
    render_map,
    save_map,
    write_image,
)
from .training import TrainConfig, train, write_history
from .transforms import TransformSpec, blur_grid, median_grid

log = logging.getLogger("robustlens")


def _load(path, split, n=None):
    data = datasets.load_dataset(path, split=split)
    return data.head(n) if n else data


def _write_rows(path: Path, header, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _f(v) -> str:
    return repr(float(v))


# --------------------------------------------------------------------------
# subcommands


def cmd_make_data(args) -> None:
    for split, n in (("train", args.n_train), ("val", args.n_val)):
        if args.kind == "texture-shapes":
            data = datasets.make_texture_shapes(n, size=args.size, seed=args.seed, split=split)
        else:
            data = datasets.make_digits(size=args.size, split=split, seed=args.seed)
        datasets.save_dataset(data, args.out)
        print(f"{split}: {len(data)} images {data.input_shape} -> {args.out / (split + '.rlns')}")


def cmd_train(args) -> None:
    config = TrainConfig.from_file(args.config) if args.config else TrainConfig()
    overrides = {k: getattr(args, k) for k in ("epochs", "seed", "regime", "lr") if getattr(args, k) is not None}
    if args.random:
        overrides["epochs"] = 0
    config = replace(config, **overrides)
    data = _load(args.data, "train", args.n)
    try:
        val = _load(args.data, "val", args.n_val)
    except datasets.DatasetError:
        val = None
    state, history = train(config, data, val=val)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "train.cfg").write_text(config.to_text())
    save_checkpoint(state, args.out / "model.ckpt")
    write_history(history, args.out / "history.csv")
    print(f"{state.model_id} -> {args.out / 'model.ckpt'}")


def cmd_attack(args) -> None:
    model = load_checkpoint(args.model)
    data = _load(args.data, args.split, args.n)
    if args.method == "fgsm":
        res = fgsm(model, data.images, data.labels, args.eps)
    else:
        budget = PerturbationBudget(args.eps, args.alpha, args.steps, not args.no_random_init)
        res = pgd(model, data.images, data.labels, budget, rng=args.seed)
    clean = np.argmax(classify(model, data.images), axis=1)
    adv = np.argmax(classify(model, data.images + res.delta), axis=1)
    linf = np.abs(res.delta).reshape(len(data), -1).max(axis=1)
    rows = [
        [i, int(data.labels[i]), int(clean[i]), int(adv[i]), int(res.succeeded[i]), _f(res.final_loss[i]), _f(linf[i])]
        for i in range(len(data))
    ]
    _write_rows(args.out / "attack.csv", ("index", "label", "clean_pred", "adv_pred", "succeeded", "final_loss", "linf"), rows)
    write_container(args.out / "delta.rlns", f"delta\n{args.method}\n", model.regime, {"delta": res.delta})
    print(f"success rate {np.mean(res.succeeded):.4f} over {len(data)} samples")


def cmd_eval(args) -> None:
    model = load_checkpoint(args.model)
    data = _load(args.data, args.split, args.n)
    eps = args.eps if args.eps is not None else [0.005, 0.01]
    rep = evaluation_report(model, data, eps, seed=args.seed, convention=args.count, config_id=args.id or model.regime,
                            topk=args.topk or [1])
    rep.to_csv(args.out / "report.csv")
    sys.stdout.write(rep.to_csv())


def _named_models(specs) -> dict:
    out = {}
    for item in specs:
        name, sep, path = item.partition("=")
        model = load_checkpoint(path if sep else item)
        name = name if sep else model.regime
        if name in out:
            raise ValueError(f"duplicate model name {name!r}")
        out[name] = model
    return out


def cmd_sweep(args) -> None:
    models = _named_models(args.models)
    data = _load(args.data, args.split, args.n)
    grid = []
    if args.transform in ("blur", "all"):
        grid += blur_grid()
    if args.transform in ("median", "all"):
        grid += median_grid()
    if args.transform in ("reverse", "all"):
        grid += [TransformSpec("reverse", means=tuple(args.means))]
    rep = transform_sweep(models, data, grid)
    rep.to_csv(args.out / "sweep.csv")
    names = list(models)
    if len(names) >= 2:
        sweep_difference(rep, names[0], names[1]).to_csv(args.out / "sweep_diff.csv")
    print(f"{len(rep)} rows -> {args.out / 'sweep.csv'}")


def _method_list(method: str) -> list[str]:
    return list(METHODS) if method == "all" else [method]


def _method_kwargs(args) -> dict:
    return {
        "smoothgrad": {"sigma": args.sigma, "n": args.samples, "seed": args.seed},
        "integrated": {"steps": args.ig_steps, "variant": args.ig_variant},
    }


def cmd_saliency(args) -> None:
    model = load_checkpoint(args.model)
    data = _load(args.data, args.split)
    kwargs = _method_kwargs(args)
    for index in args.index:
        x, y = data.images[index], int(data.labels[index])
        t = y if args.label is None else args.label
        write_image(image_from_input(x), args.out / f"input_{index}.png")
        for method in _method_list(args.method):
            smap = compute_map(method, model, x, t, **kwargs.get(method, {}))
            stem = args.out / f"{method}_{index}"
            save_map(smap, stem.with_suffix(".rlns"))
            write_image(render_map(smap, "signed"), args.out / f"{method}_{index}_signed.png")
            write_image(render_map(smap, "absolute"), args.out / f"{method}_{index}_abs.png")
    print(f"maps -> {args.out}")


def cmd_maximize(args) -> None:
    model = load_checkpoint(args.model)
    filters = args.filter if args.filter else [0]
    rows = []
    for f in filters:
        cfg = AscentConfig(args.layer, f, args.step_size, args.iterations, args.start, (0.0, 1.0), args.l2, args.seed)
        res = activation_maximization(model, cfg)
        write_image(image_from_input(res.x), args.out / f"layer{args.layer}_filter{f}.png")
        rows += [[args.layer, f, i, _f(v)] for i, v in enumerate(res.trajectory)]
    _write_rows(args.out / "trajectory.csv", ("layer", "filter", "iteration", "objective"), rows)
    print(f"{len(filters)} filters -> {args.out}")


def cmd_fuse(args) -> None:
    a, b = load_checkpoint(args.a), load_checkpoint(args.b)
    data = _load(args.data, "train", args.n)
    try:
        val = _load(args.data, "val", args.n_val)
    except datasets.DatasetError:
        val = None
    config = TrainConfig.from_file(args.config) if args.config else TrainConfig.profile("fusion")
    config = replace(config, seed=args.seed, **({"epochs": args.epochs} if args.epochs is not None else {}))
    fused = build_fusion(a, b, seed=args.seed, freeze=args.freeze)
    fused, history = finetune_fusion(fused, config, data, val)
    save_checkpoint(fused, args.out / "fused.ckpt")
    write_history(history, args.out / "history.csv")
    print(f"{fused.model_id} -> {args.out / 'fused.ckpt'}")


def cmd_sanity(args) -> None:
    models = [load_checkpoint(p) for p in args.models]
    data = _load(args.data, args.split, args.n)
    result = sanity_check(models, data.images, data.labels, _method_list(args.method), args.threshold,
                          _method_kwargs(args))
    result.report.to_csv(args.out / "sanity.csv")
    for method, ok in result.passed.items():
        mean = result.mean_correlation[method]
        print(f"{method}: mean cross correlation {'NA' if mean is None else f'{mean:.4f}'} pass={int(ok)}")


# --------------------------------------------------------------------------
# parser


def _common(p: argparse.ArgumentParser, data=True, split=True) -> None:
    p.add_argument("--out", type=Path, required=True, help="artifact directory")
    p.add_argument("--seed", type=int, default=0)
    if data:
        p.add_argument("--data", type=Path, required=True, help="dataset directory")
        p.add_argument("--n", type=int, default=None, help="use only the first N samples")
    if split:
        p.add_argument("--split", default="val", choices=("train", "val"))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="robustlens", description=__doc__.splitlines()[0])
    parser.add_argument("--log-level", default="WARNING")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-data", help="write a synthetic dataset in tensor format")
    p.add_argument("--kind", default="texture-shapes", choices=("texture-shapes", "digits"))
    p.add_argument("--n-train", type=int, default=1000)
    p.add_argument("--n-val", type=int, default=500)
    p.add_argument("--size", type=int, default=28)
    _common(p, data=False, split=False)
    p.set_defaults(func=cmd_make_data)

    p = sub.add_parser("train", help="train a SmallConvNet (STD or ADV)")
    p.add_argument("--config", type=Path, help="key=value training config")
    p.add_argument("--regime", choices=("STD", "ADV"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--n-val", type=int, default=None)
    p.add_argument("--random", action="store_true", help="save the untrained initialization (regime RANDOM)")
    _common(p, split=False)
    p.set_defaults(func=cmd_train, seed=None)

    p = sub.add_parser("attack", help="FGSM or PGD against a checkpoint")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--method", default="pgd", choices=("fgsm", "pgd"))
    p.add_argument("--eps", type=float, default=0.005)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--steps", type=int, default=10)
    p.add_argument("--no-random-init", action="store_true")
    _common(p)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("eval", help="clean and robust accuracy report")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--eps", type=float, action="append")
    p.add_argument("--topk", type=int, action="append")
    p.add_argument("--count", default="all", choices=("all", "clean_correct"))
    p.add_argument("--id", default=None, help="config id used in the report")
    _common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="accuracy under blur / median / color reversal")
    p.add_argument("--models", nargs="+", required=True, help="checkpoints, optionally NAME=PATH")
    p.add_argument("--transform", default="all", choices=("blur", "median", "reverse", "all"))
    p.add_argument("--means", type=float, nargs="+", default=[0.485, 0.456, 0.406])
    _common(p)
    p.set_defaults(func=cmd_sweep)

    for name, helptext in (("saliency", "sensitivity maps for chosen images"), ("sanity", "parameter-dependence check")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--method", default="all", choices=("all",) + METHODS)
        p.add_argument("--sigma", type=float, default=None, help="SmoothGrad noise level")
        p.add_argument("--samples", type=int, default=32, help="SmoothGrad sample count")
        p.add_argument("--ig-steps", type=int, default=64)
        p.add_argument("--ig-variant", default="scaled", choices=("raw", "scaled"))
        if name == "saliency":
            p.add_argument("--model", type=Path, required=True)
            p.add_argument("--index", type=int, nargs="+", default=[0])
            p.add_argument("--label", type=int, default=None, help="target logit (default: true label)")
            p.set_defaults(func=cmd_saliency)
        else:
            p.add_argument("--models", type=Path, nargs="+", required=True)
            p.add_argument("--threshold", type=float, default=0.8)
            p.set_defaults(func=cmd_sanity)
        _common(p)

    p = sub.add_parser("maximize", help="activation maximization for a layer's filters")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--layer", type=int, required=True)
    p.add_argument("--filter", type=int, nargs="+")
    p.add_argument("--step-size", type=float, default=AscentConfig.step_size)
    p.add_argument("--iterations", type=int, default=AscentConfig.iterations)
    p.add_argument("--start", default="zeros", choices=("zeros", "noise"))
    p.add_argument("--l2", type=float, default=0.0)
    _common(p, data=False, split=False)
    p.set_defaults(func=cmd_maximize)

    p = sub.add_parser("fuse", help="late-fuse two checkpoints and fine-tune")
    p.add_argument("--a", type=Path, required=True)
    p.add_argument("--b", type=Path, required=True)
    p.add_argument("--config", type=Path)
    p.add_argument("--epochs", type=int)
    p.add_argument("--freeze", action="store_true")
    p.add_argument("--n-val", type=int, default=None)
    _common(p, split=False)
    p.set_defaults(func=cmd_fuse)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except KeyboardInterrupt:
        print("error: interrupted", file=sys.stderr)
        return 130
    except Exception as exc:  # noqa: BLE001 - reported as one line
        msg = " ".join(str(exc).split())
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
