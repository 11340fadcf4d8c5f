"""Command-line entry point: ``ssmaf {synth,train,eval,infer,gradcheck,ablate}``.

Settings come from defaults, then ``--config`` (INI sections ``[synth]``,
``[model]``, ``[train]``, ``[cbce]``, ``[rmi]``), then positional
``section.key=value`` overrides, then the dedicated flags.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError
from .config import ExperimentConfig, load_config
from .metrics import MetricsReport
from .model import Variant, build_model
from .netpbm import NetPBMError, write_netpbm
from .synth import generate_dataset, load_dataset, write_dataset

RED, GREEN, YELLOW = (1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (1.0, 1.0, 0.0)


class CLIError(Exception):
    pass


def _experiment(args) -> ExperimentConfig:
    cfg = load_config(args.config, args.overrides)
    if getattr(args, "variant", None):
        cfg.model = replace(cfg.model, variant=Variant.parse(args.variant))
    if getattr(args, "seed", None) is not None:
        cfg.train = replace(cfg.train, seed=args.seed)
        cfg.synth = replace(cfg.synth, seed=args.seed)
    if getattr(args, "epochs", None) is not None:
        cfg.train = replace(cfg.train, epochs=args.epochs)
    if getattr(args, "threshold", None) is not None:
        cfg.train = replace(cfg.train, threshold=args.threshold)
    return cfg


def _require(path, what: str) -> Path:
    if path is None:
        raise CLIError(f"{what} is required")
    p = Path(path)
    if not p.exists():
        raise CLIError(f"{what} not found: {p}")
    return p


def _dataset(args):
    root = _require(args.data, "--data directory")
    _require(root / "manifest.txt", "dataset manifest")
    return load_dataset(root)


def _print_report(report: MetricsReport, out_dir: Path | None, name: str) -> None:
    lines = report.to_records()
    print("\n".join(lines))
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / name).write_text("\n".join(lines) + "\n")


def overlay(base: np.ndarray, pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Paint prediction-only pixels red, ground-truth-only green and the overlap yellow."""
    img = np.array(base, dtype=float, copy=True)
    pred, gt = pred.astype(bool), gt.astype(bool)
    for mask, color in ((pred & ~gt, RED), (~pred & gt, GREEN), (pred & gt, YELLOW)):
        for c in range(3):
            img[c][mask] = color[c]
    return img


# -- subcommands -----------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = _experiment(args)
    cfg.synth.check_encoder_compatible(cfg.model.depth)
    data = generate_dataset(cfg.synth, args.n_train, args.n_test)
    out = Path(args.out)
    try:
        write_dataset(out, data)
    except OSError as exc:
        raise CLIError(f"cannot write dataset to {out}: {exc.strerror or exc}") from None
    print(f"train={len(data.train)} test={len(data.test)} out={out}")
    return 0


def cmd_train(args) -> int:
    from .trainer import train

    cfg = _experiment(args)
    data = _dataset(args)
    resume = _require(args.checkpoint, "checkpoint") if args.checkpoint else None
    _, net = build_model(cfg.model, cfg.train.seed)
    result = train(net, data, cfg.train, cfg.cbce, cfg.rmi, out_dir=args.out, resume=resume)
    last = result.history[-1] if result.history else {}
    print(f"iterations={result.iteration}/{result.max_iter} loss_total={last.get('loss_total')} "
          f"checkpoint={result.checkpoint}")
    if result.report is not None:
        _print_report(result.report, Path(args.out), "report.txt")
    return 0


def _load_for_eval(args):
    from .trainer import load_model

    ckpt = _require(args.checkpoint, "--checkpoint")
    net, state = load_model(ckpt)
    if args.variant and Variant.parse(args.variant) is not net.variant:
        raise CLIError(f"checkpoint {ckpt} holds variant {net.variant.value}, not {Variant.parse(args.variant).value}")
    threshold = state.train_cfg.threshold if args.threshold is None else args.threshold
    if not 0 <= threshold <= 1:
        raise CLIError(f"threshold must lie in [0, 1], got {threshold}")
    return net, threshold


def cmd_eval(args) -> int:
    from .trainer import evaluate

    net, threshold = _load_for_eval(args)
    samples = _dataset(args).split(args.split)
    if not samples:
        raise CLIError(f"split {args.split!r} is empty")
    report = evaluate(net, samples, threshold)
    _print_report(report, Path(args.out) if args.out else None, f"eval_{args.split}.txt")
    return 0


def cmd_infer(args) -> int:
    from .trainer import predict, target_mask

    net, threshold = _load_for_eval(args)
    samples = _dataset(args).split(args.split)
    out = Path(args.out)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    (out / "overlays").mkdir(parents=True, exist_ok=True)
    for s in samples:
        pred = predict(net, s) >= threshold
        gt = target_mask(s, net.variant)
        base = s.hr_image if net.variant.upsamples else s.lr_image
        write_netpbm(out / "masks" / f"{s.name}.pgm", pred.astype(float))
        write_netpbm(out / "overlays" / f"{s.name}.ppm", overlay(base, pred, gt))
    print(f"wrote {len(samples)} masks and overlays to {out}")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_gradcheck

    report = run_gradcheck(trials=args.trials, seed=args.seed, model_samples=args.model_samples)
    print("\n".join(report.lines()))
    return 0 if report.passed else 1


def cmd_ablate(args) -> int:
    from .ablation import run_ablation

    cfg = _experiment(args)
    data = _dataset(args)
    seeds = tuple(int(s) for s in args.seeds.split(",") if s.strip())
    threads = int(os.environ.get("SSMAF_THREADS", "1") or 1)
    table = run_ablation(data, seeds, cfg.model, cfg.train, cfg.cbce, cfg.rmi,
                         out_dir=args.out, threads=max(1, threads))
    lines = table.lines()
    print("\n".join(lines))
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "ablation.txt").write_text("\n".join(lines) + "\n")
    return 0


# -- parser ----------------------------------------------------------------

def _common(p: argparse.ArgumentParser, out_required: bool = False) -> None:
    p.add_argument("--config", help="INI configuration file")
    p.add_argument("--seed", type=int, help="seed for data generation, initialisation and shuffling")
    p.add_argument("--out", required=out_required, help="output directory")
    p.add_argument("overrides", nargs="*", metavar="section.key=value", help="configuration overrides")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ssmaf", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    variants = [v.value for v in Variant]

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    _common(p, out_required=True)
    p.add_argument("--n-train", type=int, default=16)
    p.add_argument("--n-test", type=int, default=8)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model")
    _common(p, out_required=True)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--variant", choices=variants)
    p.add_argument("--epochs", type=int)
    p.add_argument("--threshold", type=float)
    p.add_argument("--checkpoint", help="resume from this checkpoint")
    p.set_defaults(func=cmd_train)

    for name, func, helptext in (("eval", cmd_eval, "evaluate a checkpoint"),
                                 ("infer", cmd_infer, "write predicted masks and overlays")):
        p = sub.add_parser(name, help=helptext)
        _common(p, out_required=(name == "infer"))
        p.add_argument("--data", required=True, help="dataset directory")
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--variant", choices=variants, help="expected variant of the checkpoint")
        p.add_argument("--threshold", type=float)
        p.add_argument("--split", choices=("train", "test"), default="test")
        p.set_defaults(func=func)

    p = sub.add_parser("gradcheck", help="finite-difference check of all differentiable ops")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--model-samples", type=int, default=50)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="train all variants over several seeds")
    _common(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--seeds", default="0,1,2", help="comma-separated seeds")
    p.add_argument("--epochs", type=int)
    p.add_argument("--threshold", type=float)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (CLIError, OSError, ValueError, KeyError, NetPBMError, CheckpointError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
