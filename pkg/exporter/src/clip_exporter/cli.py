"""Command-line export driver."""

from __future__ import annotations

import argparse
import sys

from .export import ExportSpec, SetupError, export


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="clip-mmeb-export",
        description="Export frozen dual-encoder embeddings to an MMEB-v1 directory.",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    p.add_argument("--dataset", default="cifar10", help="'cifar10' or 'imagefolder:<path>'")
    p.add_argument("--backbone", default="openai/clip-vit-base-patch32", help="pretrained checkpoint id (512-wide joint space)")
    p.add_argument("--template", default="a photo of a {}.", help="prompt template; {} receives the class name")
    p.add_argument("--splits", default="train,test", help="comma-separated splits to export")
    p.add_argument("--sigma", type=float, default=0.0, help="gaussian pixel-noise stddev applied before encoding")
    p.add_argument("--noise-splits", default="train", help="splits the noise applies to")
    p.add_argument("--out", default="exports/cifar10", help="output directory")
    p.add_argument("--seed", type=int, default=0, help="noise seed")
    p.add_argument("--batch-size", type=int, default=256, help="encoder batch size")
    p.add_argument("--limit-per-split", type=int, default=None, help="cap images per split (smoke tests)")
    p.add_argument("--data-root", default="data", help="dataset cache directory")
    p.add_argument("--download", action="store_true", help="allow the dataset provider to download")
    p.add_argument("--device", default="cpu", help="torch device for the backbone")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    spec = ExportSpec(
        dataset=args.dataset,
        backbone=args.backbone,
        prompt_template=args.template,
        splits=tuple(s for s in args.splits.split(",") if s),
        noise_sigma=args.sigma,
        noise_splits=tuple(s for s in args.noise_splits.split(",") if s),
        out=args.out,
        seed=args.seed,
        batch_size=args.batch_size,
        limit_per_split=args.limit_per_split,
        data_root=args.data_root,
        download=args.download,
        device=args.device,
    )
    try:
        reference = export(spec)
    except SetupError as exc:
        print(f"ERROR setup: {exc}", file=sys.stderr)
        return 2
    summary = ", ".join(
        f"{name}: {v['n_correct']}/{v['n_total']}" for name, v in reference["zero_shot"].items()
    )
    print(f"exported {reference['dataset_id']} to {spec.out} (zero-shot {summary})")
    return 0


if __name__ == "__main__":
    sys.exit(main())
