"""``imponderous`` command line: train, eval, bench, ablate and toy.

Every command prints JSON on stdout (one object, or one object per line for
``train``) and human-readable logs on stderr.  Exit codes: 0 success,
2 usage error, 3 data error, 4 checkpoint error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .bench import REFERENCE_FPS, run_bench
from .checkpoint import CheckpointError, infer_config, load_checkpoint, read_checkpoint, save_checkpoint
from .data import DataError, ImageSet, write_toy_dataset
from .model import ECA_PLACEMENTS, ModelConfig, build, count_params, forward
from .tensor import InvalidArgumentError, Variable
from .training import MIRROR_TRAIN_MODES, AdamaxState, TrainConfig, evaluate, train_epoch

log = logging.getLogger("imponderous")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CHECKPOINT = 0, 2, 3, 4

ABLATIONS = {
    "default": {},
    "no-eca": {"eca_enabled": False},
    "no-ensemble": {"ensemble": False},
    "no-global": {"global_head": False},
    "eca-before-partition": {"eca_placement": "before_partition"},
}


class UsageError(Exception):
    pass


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj) + "\n")
    sys.stdout.flush()


def _load_set(manifest, root, num_classes: int) -> ImageSet:
    manifest = Path(manifest)
    if not manifest.is_file():
        raise DataError(f"{manifest}: manifest not found")
    root = Path(root) if root is not None else manifest.parent
    return ImageSet.from_manifest(manifest, root, num_classes)


def _checkpoint_arrays(path) -> dict:
    if not Path(path).is_file():
        raise CheckpointError(f"{path}: checkpoint not found")
    return read_checkpoint(path)


def _model_config(args) -> ModelConfig:
    return ModelConfig(
        num_classes=args.num_classes,
        eca_enabled=not args.no_eca,
        eca_placement=args.eca_placement,
        global_head=not args.no_global,
        ensemble=not args.no_ensemble,
        head_activation=args.head_activation,
    )


def _train_config(args) -> TrainConfig:
    return TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        seed=args.seed,
        lr_base=args.lr_base,
        lr_rest=args.lr_head,
        weight_decay=args.weight_decay,
        oversample=args.oversample,
        mirror_train=args.mirror_train,
        micro_batch=args.micro_batch,
    )


def _fit(params, model_cfg, train_cfg, train_set, val_set=None, on_epoch=None):
    state = AdamaxState()
    for epoch in range(train_cfg.epochs):
        loss = train_epoch(params, state, train_set, model_cfg, train_cfg, epoch=epoch)
        record = {"event": "epoch", "epoch": epoch + 1, "loss": loss}
        if val_set is not None:
            record["val_accuracy"] = evaluate(params, model_cfg, val_set).accuracy
        log.info("epoch %d loss %.5f", epoch + 1, loss)
        if on_epoch is not None:
            on_epoch(record)
    return params


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    model_cfg = _model_config(args)
    train_cfg = _train_config(args)
    _emit({"event": "config", "batch_size": train_cfg.batch_size, "lr_base": train_cfg.lr_base,
           "lr_head": train_cfg.lr_rest, "weight_decay": train_cfg.weight_decay,
           "epochs": train_cfg.epochs, "seed": train_cfg.seed, "oversample": train_cfg.oversample,
           "mirror_train": train_cfg.mirror_train, "model": model_cfg.to_dict()})
    train_set = _load_set(args.manifest, args.root, args.num_classes)
    val_set = _load_set(args.val_manifest, args.val_root, args.num_classes) if args.val_manifest else None
    if args.init_checkpoint:
        _checkpoint_arrays(args.init_checkpoint)
        params = load_checkpoint(args.init_checkpoint, model_cfg, partial=True, seed=args.seed)
    else:
        params = build(model_cfg, seed=args.seed)
    log.info("training %d samples, %d parameters", len(train_set), count_params(params).total)
    _fit(params, model_cfg, train_cfg, train_set, val_set, on_epoch=_emit)
    save_checkpoint(params, args.checkpoint)
    _emit({"event": "done", "checkpoint": str(args.checkpoint), "epochs": train_cfg.epochs,
           "param_count": count_params(params).total})
    return EXIT_OK


def cmd_eval(args) -> int:
    config = infer_config(_checkpoint_arrays(args.checkpoint), eca_placement=args.eca_placement)
    if args.num_classes is not None and args.num_classes != config.num_classes:
        raise CheckpointError(
            f"{args.checkpoint}: checkpoint has {config.num_classes} classes, --num-classes is {args.num_classes}")
    params = load_checkpoint(args.checkpoint, config)
    dataset = _load_set(args.manifest, args.root, config.num_classes)
    report = evaluate(params, config, dataset, mirror=args.mirror)
    out = report.to_dict()
    out["mirror"] = args.mirror
    _emit(out)
    return EXIT_OK


def cmd_bench(args) -> int:
    if args.checkpoint:
        config = infer_config(_checkpoint_arrays(args.checkpoint))
        params = load_checkpoint(args.checkpoint, config)
    else:
        config = ModelConfig(num_classes=args.num_classes)
        params = build(config, seed=args.seed)
    report = run_bench(params, config, iterations=args.iterations, lanes=args.lanes,
                       warmup=args.warmup, mirror=args.mirror, seed=args.seed)
    log.info("%.1f fps single lane (reference %.0f fps on an i7)", report.fps_single_lane, REFERENCE_FPS)
    _emit(report.to_dict())
    return EXIT_OK


def cmd_ablate(args) -> int:
    train_set = _load_set(args.manifest, args.root, args.num_classes)
    eval_manifest = args.eval_manifest or args.manifest
    eval_root = args.eval_root if args.eval_manifest else args.root
    eval_set = _load_set(eval_manifest, eval_root, args.num_classes)
    train_cfg = _train_config(args)
    probe = Variable(train_set.get_batch([0]))

    rows, probes = [], {}
    for name, switches in ABLATIONS.items():
        cfg = ModelConfig(num_classes=args.num_classes, **switches)
        params = _fit(build(cfg, seed=args.seed), cfg, train_cfg, train_set)
        acc = evaluate(params, cfg, eval_set).accuracy
        logits = forward(params, cfg, probe, strict=False).per_head_logits
        probes[name] = np.concatenate([np.asarray(v.value).ravel() for v in logits])
        log.info("%s: accuracy %.4f", name, acc)
        rows.append({"variant": name, "accuracy": acc, "param_count": count_params(params).total,
                     "has_eca": any(k.startswith("eca.") for k in params), "heads": cfg.head_slots})
    default = probes["default"]
    for row in rows:
        p = probes[row["variant"]]
        row["probe_differs_from_default"] = bool(p.shape != default.shape or not np.array_equal(p, default))
    _emit({"epochs": train_cfg.epochs, "seed": args.seed, "rows": rows})
    return EXIT_OK


def cmd_toy(args) -> int:
    manifest = write_toy_dataset(args.directory, args.n, args.num_classes, seed=args.seed,
                                 symmetric=args.symmetric)
    _emit({"manifest": str(manifest), "n": args.n, "num_classes": args.num_classes})
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _add_model_flags(p) -> None:
    p.add_argument("--no-eca", action="store_true", help="drop the ECA attention")
    p.add_argument("--eca-placement", choices=ECA_PLACEMENTS, default="after_partition")
    p.add_argument("--no-global", action="store_true", help="drop the global head")
    p.add_argument("--no-ensemble", action="store_true", help="keep only the global head")
    p.add_argument("--head-activation", choices=("identity", "mfm"), default="identity")


def _add_train_flags(p) -> None:
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch-size", type=_positive, default=64)
    p.add_argument("--micro-batch", type=_positive, default=16, help="memory knob; gradients are accumulated")
    p.add_argument("--lr-base", type=float, default=1e-3)
    p.add_argument("--lr-head", type=float, default=1e-2, help="learning rate for attention and heads")
    p.add_argument("--weight-decay", type=float, default=4e-5)
    p.add_argument("--oversample", action="store_true", help="class-balanced epochs")
    p.add_argument("--mirror-train", choices=MIRROR_TRAIN_MODES, default="augment")
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="imponderous", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train and write a checkpoint")
    p.add_argument("manifest")
    p.add_argument("--root", help="image directory (default: the manifest's directory)")
    p.add_argument("--num-classes", "-K", type=int, default=7)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--init-checkpoint", help="start from these weights; missing names are initialized")
    p.add_argument("--val-manifest")
    p.add_argument("--val-root")
    _add_model_flags(p)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="accuracy and confusion matrix of a checkpoint")
    p.add_argument("manifest")
    p.add_argument("--root")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--num-classes", "-K", type=int)
    p.add_argument("--eca-placement", choices=ECA_PLACEMENTS, default="after_partition",
                   help="not recorded in checkpoints")
    p.add_argument("--mirror", dest="mirror", action="store_true", default=True)
    p.add_argument("--no-mirror", dest="mirror", action="store_false")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="single-frame CPU throughput")
    p.add_argument("--checkpoint")
    p.add_argument("--num-classes", "-K", type=int, default=7)
    p.add_argument("--iterations", type=_positive, default=50)
    p.add_argument("--lanes", type=_positive, default=1)
    p.add_argument("--warmup", type=int, default=5)
    p.add_argument("--no-mirror", dest="mirror", action="store_false", default=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("ablate", help="train and evaluate the ablation variants")
    p.add_argument("manifest")
    p.add_argument("--root")
    p.add_argument("--eval-manifest")
    p.add_argument("--eval-root")
    p.add_argument("--num-classes", "-K", type=int, default=7)
    _add_train_flags(p)
    p.set_defaults(func=cmd_ablate, epochs=1)

    p = sub.add_parser("toy", help="write a synthetic stripe dataset")
    p.add_argument("directory")
    p.add_argument("--n", type=_positive, default=32)
    p.add_argument("--num-classes", "-K", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--symmetric", action="store_true", help="every image equals its mirror")
    p.set_defaults(func=cmd_toy)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s", force=True)
    try:
        return args.func(args)
    except (InvalidArgumentError, ValueError) as e:
        log.error("%s", e)
        return EXIT_USAGE
    except DataError as e:
        log.error("data error: %s", e)
        return EXIT_DATA
    except CheckpointError as e:
        log.error("checkpoint error: %s", e)
        return EXIT_CHECKPOINT


if __name__ == "__main__":
    sys.exit(main())
