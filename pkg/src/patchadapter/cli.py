"""Command-line surface wiring the engine into reproducible jobs.

Exit codes: 0 success, 1 verification failure, 2 usage error, 3 data error.
Every artifact-writing command also writes a ``manifest.json`` holding the
fully resolved configuration and input digests, and accepts
``--from-manifest`` to replay a recorded run byte for byte.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import sys
from dataclasses import asdict
from pathlib import Path

from . import __version__, dataio, metrics
from .adapter import (
    attention_salience,
    bottleneck_mlp,
    count_trainable_params,
    layer_norm,
    mhsa,
)
from .errors import EngineError, UnknownImageId
from .gradcheck import run_gradcheck
from .seeding import derive_seed
from .training import TrainConfig, fit, load_preset

EXIT_OK = 0
EXIT_VERIFY = 1
EXIT_USAGE = 2
EXIT_DATA = 3

CHECKPOINT_NAME = "checkpoint.mhc1"
TRAIN_LOG_NAME = "train.log"
METRICS_NAME = "metrics.json"
CONFUSION_NAME = "confusion.csv"
PER_CLASS_NAME = "per_class.csv"
ATTENTION_NAME = "attention.csv"
MANIFEST_NAME = "manifest.json"


def _sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _write_manifest(out_dir: Path, command: str, seed: int, config: dict,
                    inputs: dict[str, str]) -> None:
    manifest = {
        "artifact_version": __version__,
        "command": command,
        "seed": seed,
        "config": config,
        "inputs": {name: {"path": str(Path(p).resolve()), "sha256": _sha256(p)}
                   for name, p in inputs.items()},
    }
    (out_dir / MANIFEST_NAME).write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _verify_manifest_inputs(manifest: dict) -> None:
    for name, entry in manifest["inputs"].items():
        if _sha256(entry["path"]) != entry["sha256"]:
            raise EngineError(
                f"input {name} at {entry['path']} no longer matches the manifest digest")


def _load_labeled_inputs(embeddings_path, weights_path, labels_path):
    embeddings = dataio.read_embedding_container(embeddings_path)
    weights = dataio.read_classifier_weights(weights_path)
    labels = dataio.read_labels(labels_path, weights.class_names)
    for image_id in labels.entries:
        embeddings.index_of(image_id)  # raises KeyError on unresolvable ids
    return embeddings, weights, labels


def cmd_train(args) -> int:
    if args.from_manifest:
        manifest = json.loads(Path(args.from_manifest).read_text(encoding="utf-8"))
        _verify_manifest_inputs(manifest)
        stored = manifest["config"]
        args.embeddings = manifest["inputs"]["embeddings"]["path"]
        args.class_weights = manifest["inputs"]["class_weights"]["path"]
        args.labels = manifest["inputs"]["labels"]["path"]
        args.seed = manifest["seed"]
        args.val_fraction = stored["val_fraction"]
        config = TrainConfig(**{k: v for k, v in stored.items() if k != "val_fraction"})
    else:
        if not (args.embeddings and args.labels and args.class_weights):
            raise ValueError("--embeddings, --labels and --class-weights are required")
        config = TrainConfig(seed=args.seed)
        if args.attribute:
            for key, value in load_preset(args.attribute).items():
                setattr(config, key, value)
        overrides = {"alpha": args.alpha, "heads": args.heads,
                     "bottleneck": args.bottleneck, "dropout_p": args.dropout,
                     "weighting_mode": args.weighting,
                     "max_epochs": args.max_epochs, "batch_size": args.batch_size,
                     "patience": args.patience}
        for key, value in overrides.items():
            if value is not None:
                setattr(config, key, value)
        config.use_bias = args.use_bias
        config.cosine_mode = not args.no_cosine
    config.validate()
    if not 0.0 <= args.val_fraction < 1.0:
        raise ValueError(f"--val-fraction {args.val_fraction} outside [0, 1)")

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    embeddings, weights, labels = _load_labeled_inputs(
        args.embeddings, args.class_weights, args.labels)
    split = dataio.stratified_split(labels, args.val_fraction,
                                    derive_seed(config.seed, "split"))
    best_params, history = fit(embeddings, labels, weights, split, config)

    best_epochs = [h.epoch for h in history if h.is_best]
    best = history[best_epochs[-1]]
    dataio.save_checkpoint(best_params,
                           dataio.CheckpointMeta(epoch=best.epoch,
                                                 val_accuracy=best.val_accuracy),
                           out_dir / CHECKPOINT_NAME)
    with open(out_dir / TRAIN_LOG_NAME, "w", encoding="utf-8") as log:
        for h in history:
            log.write(f"{h.epoch},{h.lr:.10e},{h.train_loss:.10e},"
                      f"{h.val_accuracy:.10e},{int(h.is_best)}\n")
    config_dict = asdict(config)
    config_dict["val_fraction"] = args.val_fraction
    _write_manifest(out_dir, "train", config.seed, config_dict,
                    {"embeddings": args.embeddings,
                     "class_weights": args.class_weights,
                     "labels": args.labels})
    print(f"best epoch {best.epoch} val_accuracy {best.val_accuracy:.4f} "
          f"({len(history)} epochs run)")
    return EXIT_OK


def cmd_eval(args) -> int:
    if args.from_manifest:
        manifest = json.loads(Path(args.from_manifest).read_text(encoding="utf-8"))
        _verify_manifest_inputs(manifest)
        args.checkpoint = manifest["inputs"]["checkpoint"]["path"]
        args.embeddings = manifest["inputs"]["embeddings"]["path"]
        args.class_weights = manifest["inputs"]["class_weights"]["path"]
        args.labels = manifest["inputs"]["labels"]["path"]
        args.alpha_override = manifest["config"]["alpha_override"]
        args.no_cosine = not manifest["config"]["cosine_mode"]
    if not (args.checkpoint and args.embeddings and args.labels
            and args.class_weights):
        raise ValueError("--checkpoint, --embeddings, --labels and "
                         "--class-weights are required")
    embeddings, weights, labels = _load_labeled_inputs(
        args.embeddings, args.class_weights, args.labels)
    params, _ = dataio.load_checkpoint(args.checkpoint, dim=embeddings.dim)
    if params.dim != weights.dim:
        raise EngineError(
            f"checkpoint dim {params.dim} vs classifier dim {weights.dim}")
    if args.alpha_override is not None:
        if not 0.0 <= args.alpha_override <= 1.0:
            raise ValueError("--alpha-override outside [0, 1]")
        params.alpha = args.alpha_override
    report = metrics.evaluate(params, weights, embeddings, labels,
                              cosine_mode=not args.no_cosine)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics.write_metrics_json(report, out_dir / METRICS_NAME)
    metrics.write_confusion_csv(report.confusion, out_dir / CONFUSION_NAME)
    metrics.write_per_class_csv(report, out_dir / PER_CLASS_NAME)
    _write_manifest(out_dir, "eval", 0,
                    {"alpha_override": args.alpha_override,
                     "cosine_mode": not args.no_cosine},
                    {"checkpoint": args.checkpoint,
                     "embeddings": args.embeddings,
                     "class_weights": args.class_weights,
                     "labels": args.labels})
    for name, value in report.metrics_dict().items():
        print(f"{name} {100.0 * value:.2f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    dims = None
    if args.dims:
        parts = [int(p) for p in args.dims.split(",")]
        if len(parts) != 4:
            raise ValueError("--dims expects N,D,H,db")
        dims = tuple(parts)
    results = run_gradcheck(trials=args.trials, dims=dims,
                            tolerance=args.tolerance, base_seed=args.seed)
    for r in results:
        status = "ok" if r.passed else "FAIL"
        print(f"seed={r.seed} n={r.n_patches} dim={r.dim} heads={r.heads} "
              f"d_b={r.bottleneck} bias={int(r.use_bias)} cosine={int(r.cosine_mode)} "
              f"worst={r.worst_tensor} rel_err={r.worst_error:.3e} {status}")
    failures = [r for r in results if not r.passed]
    if failures:
        worst = max(failures, key=lambda r: r.worst_error)
        print(f"gradcheck FAIL: tensor {worst.worst_tensor} rel_err "
              f"{worst.worst_error:.3e} exceeds {args.tolerance:.1e} "
              f"(seed {worst.seed})", file=sys.stderr)
        return EXIT_VERIFY
    print(f"gradcheck PASS ({len(results)} configurations within {args.tolerance:.1e})")
    return EXIT_OK


def cmd_attention(args) -> int:
    if args.from_manifest:
        manifest = json.loads(Path(args.from_manifest).read_text(encoding="utf-8"))
        _verify_manifest_inputs(manifest)
        args.checkpoint = manifest["inputs"]["checkpoint"]["path"]
        args.embeddings = manifest["inputs"]["embeddings"]["path"]
        args.image_id = manifest["config"]["image_id"]
    if not (args.checkpoint and args.embeddings and args.image_id):
        raise ValueError("--checkpoint, --embeddings and --image-id are required")
    embeddings = dataio.read_embedding_container(args.embeddings)
    params, _ = dataio.load_checkpoint(args.checkpoint, dim=embeddings.dim)
    try:
        tokens = embeddings.view(args.image_id, 0)
    except KeyError:
        raise UnknownImageId(args.image_id) from None
    x_av = bottleneck_mlp(tokens[1:], params)
    x_ln, _, _ = layer_norm(x_av, params.gamma, params.beta, params.ln_eps)
    _, attn = mhsa(x_ln, params)
    salience = attention_salience(attn)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    n = salience.shape[0]
    side = math.isqrt(n)
    with open(out_dir / ATTENTION_NAME, "w", encoding="utf-8") as handle:
        if side * side == n:
            for row in salience.reshape(side, side):
                handle.write(",".join(repr(float(v)) for v in row) + "\n")
        else:
            for v in salience:
                handle.write(repr(float(v)) + "\n")
    _write_manifest(out_dir, "attention", 0, {"image_id": args.image_id},
                    {"checkpoint": args.checkpoint, "embeddings": args.embeddings})
    shape = f"{side}x{side} grid" if side * side == n else f"flat, {n} values"
    print(f"wrote {out_dir / ATTENTION_NAME} ({shape})")
    return EXIT_OK


def cmd_params(args) -> int:
    bottleneck = args.bottleneck if args.bottleneck else args.dim // 4
    if args.heads < 1 or args.dim % args.heads != 0:
        raise ValueError(f"dim {args.dim} not divisible by heads {args.heads}")
    if bottleneck < 1:
        raise ValueError("bottleneck width must be >= 1")
    count = count_trainable_params(args.dim, bottleneck, args.heads, args.bias)
    print(f"{count:,}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="patchadapter",
        description="Train and evaluate an attention-adapter head on "
                    "precomputed patch-token embeddings.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="train the head and keep the best checkpoint")
    train.add_argument("--embeddings")
    train.add_argument("--labels")
    train.add_argument("--class-weights", dest="class_weights")
    train.add_argument("--attribute", help="hyperparameter preset name")
    train.add_argument("--alpha", type=float)
    train.add_argument("--heads", type=int)
    train.add_argument("--bottleneck", type=int)
    train.add_argument("--dropout", type=float)
    train.add_argument("--weighting", choices=["uniform", "inverse"])
    train.add_argument("--seed", type=int, default=42)
    train.add_argument("--val-fraction", dest="val_fraction", type=float, default=0.2)
    train.add_argument("--max-epochs", dest="max_epochs", type=int)
    train.add_argument("--batch-size", dest="batch_size", type=int)
    train.add_argument("--patience", type=int)
    train.add_argument("--use-bias", dest="use_bias", action="store_true")
    train.add_argument("--no-cosine", dest="no_cosine", action="store_true")
    train.add_argument("--from-manifest", dest="from_manifest")
    train.add_argument("--out", required=True)
    train.set_defaults(handler=cmd_train)

    ev = sub.add_parser("eval", help="evaluate a checkpoint and export the report")
    ev.add_argument("--checkpoint")
    ev.add_argument("--embeddings")
    ev.add_argument("--labels")
    ev.add_argument("--class-weights", dest="class_weights")
    ev.add_argument("--alpha-override", dest="alpha_override", type=float)
    ev.add_argument("--no-cosine", dest="no_cosine", action="store_true")
    ev.add_argument("--from-manifest", dest="from_manifest")
    ev.add_argument("--out", required=True)
    ev.set_defaults(handler=cmd_eval)

    gc = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    gc.add_argument("--dims", help="fix the configuration as N,D,H,db")
    gc.add_argument("--trials", type=int, default=20)
    gc.add_argument("--tolerance", type=float, default=1e-4)
    gc.add_argument("--seed", type=int, default=0)
    gc.set_defaults(handler=cmd_gradcheck)

    at = sub.add_parser("attention", help="export the per-patch salience map")
    at.add_argument("--checkpoint")
    at.add_argument("--embeddings")
    at.add_argument("--image-id", dest="image_id")
    at.add_argument("--from-manifest", dest="from_manifest")
    at.add_argument("--out", required=True)
    at.set_defaults(handler=cmd_attention)

    pc = sub.add_parser("params", help="print the trainable-parameter count")
    pc.add_argument("--dim", type=int, default=512)
    pc.add_argument("--bottleneck", type=int)
    pc.add_argument("--heads", type=int, default=4)
    pc.add_argument("--bias", dest="bias", action=argparse.BooleanOptionalAction,
                    default=False)
    pc.set_defaults(handler=cmd_params)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.handler(args)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (EngineError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
