"""Export command line.

Example:
    patchexport export --images manifest.csv --attribute platform \\
        --classes classes.txt --template "a photo taken on {CLASS}" \\
        --views 3 --seed 42 --backbone vit-b-16 --weights clip.pt --out out/
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import torch

from .backbone import PROFILES, load_backbone
from .errors import ExportError
from .export import DEFAULT_TEMPLATES, ExportSpec, export, read_image_manifest

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3


def cmd_export(args) -> int:
    classes = [line.strip() for line in
               Path(args.classes).read_text(encoding="utf-8").splitlines()
               if line.strip()]
    template = args.template or DEFAULT_TEMPLATES.get(
        args.attribute.strip().lower().replace("-", "_").replace(" ", "_"))
    if template is None:
        raise ValueError(
            f"no default template for attribute {args.attribute!r}; pass --template")
    spec = ExportSpec(
        images=read_image_manifest(args.images),
        attribute=args.attribute,
        class_names=classes,
        prompt_template=template,
        n_views=args.views,
        seed=args.seed,
        out_dir=Path(args.out),
    )
    backbone = load_backbone(args.backbone, weights_path=args.weights,
                             seed=args.backbone_seed)
    result = export(spec, backbone)
    print(f"wrote {result['embeddings']} "
          f"({result['n_images']}, {result['n_views']}, "
          f"{result['n_tokens']}, {result['dim']}) "
          f"sha256 {result['embeddings_sha256'][:12]}")
    print(f"wrote {result['class_weights']} ({len(classes)} classes) "
          f"sha256 {result['class_weights_sha256'][:12]}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="patchexport",
        description="Extract frozen backbone embeddings and prompt-derived "
                    "classifier weights into binary containers.")
    sub = parser.add_subparsers(dest="command", required=True)
    ex = sub.add_parser("export", help="run a one-shot export")
    ex.add_argument("--images", required=True, help="CSV manifest: image_id,path")
    ex.add_argument("--attribute", required=True)
    ex.add_argument("--classes", required=True, help="one class name per line")
    ex.add_argument("--template", help="prompt template with a {CLASS} placeholder")
    ex.add_argument("--views", type=int, default=3)
    ex.add_argument("--seed", type=int, default=42)
    ex.add_argument("--backbone", choices=sorted(PROFILES), default="vit-b-16")
    ex.add_argument("--weights", help="state-dict path for pretrained profiles")
    ex.add_argument("--backbone-seed", dest="backbone_seed", type=int, default=0)
    ex.add_argument("--out", required=True)
    ex.set_defaults(handler=cmd_export)
    return parser


def main(argv=None) -> int:
    # single-threaded so exported bytes are stable across machines with
    # different core counts
    torch.set_num_threads(1)
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ExportError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
