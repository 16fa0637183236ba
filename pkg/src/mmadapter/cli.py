"""Command-line entry point.

Commands: synth, validate-store, train, eval, base-new, sweep-share,
ablate, noise. Every run writes its fully-resolved configuration next to
its outputs under <out>/<run-id>/, where the run id is derived from the
command and a hash of that configuration, so identical invocations
produce byte-identical artifacts. All randomness flows from --seed.

A JSON config file may supply any flag's value by its destination name;
explicitly-passed flags win over the file, the file wins over defaults.
On failure the process prints one line, "ERROR <category>: <message>",
and exits 2 for usage problems or 1 for runtime ones.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from .adapters import (
    ADAPTER_KINDS,
    ATTENTION_VARIANTS,
    UPDOWN_VARIANTS,
    MMAConfig,
    build_adapter,
    config_hash,
    load_checkpoint,
    parameter_count,
    save_checkpoint,
)
from .errors import ConfigError, MMAdapterError
from .evaluation import (
    evaluate,
    run_ablation_grid,
    run_base_new_experiment,
    run_class_share_sweep,
    run_noise_experiment,
    split_classes,
)
from .reporting import (
    write_history_jsonl,
    write_predictions_csv,
    write_report_csv,
    write_report_table,
    write_series_csv,
)
from .store import add_gaussian_noise, generate_synthetic, load_store, save_store
from .trainer import MONITORS, TrainConfig, sample_few_shot, train

CLI_ADAPTER_NAMES = {"none": "identity_clip", "clip-adapter": "clip_adapter", "mma": "mma"}


def _add_common_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0, help="master seed; every random draw derives from it")
    p.add_argument("--out", type=str, default="runs", help="output directory; artifacts land under <out>/<run-id>/")
    p.add_argument("--config", type=str, default=None, help="JSON file supplying flag values (flags win on conflict)")


def _add_adapter_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("adapter")
    g.add_argument("--adapter", choices=sorted(CLI_ADAPTER_NAMES), default="mma", help="adapter architecture; 'none' is the frozen zero-shot classifier")
    g.add_argument("--lambda", dest="lambda_blend", type=float, default=0.2, help="residual blend weight on the original embeddings; 1.0 is pure zero-shot")
    g.add_argument("--lambda-text", type=float, default=None, help="text-side override of --lambda")
    g.add_argument("--lambda-image", type=float, default=None, help="image-side override of --lambda")
    g.add_argument("--heads", type=int, default=4, help="attention heads in the cross-modal mixer")
    g.add_argument("--down-factor", type=int, default=4, help="embedding-to-attention width reduction")
    g.add_argument("--mid-factor", type=int, default=16, help="embedding-to-bottleneck width reduction between the upsampling layers")
    g.add_argument("--adapt-text", action=argparse.BooleanOptionalAction, default=True, help="blend adapted text embeddings (off keeps raw prompts while text still feeds the mixer)")
    g.add_argument("--variant-attention", choices=ATTENTION_VARIANTS, default="mha", help="cross-modal mixer: bare masked attention or a full encoder block")
    g.add_argument("--variant-updown", choices=UPDOWN_VARIANTS, default="linear", help="downsampler style: single linear layer or 2-layer MLP")
    g.add_argument("--logit-scale", type=float, default=100.0, help="temperature multiplying cosine similarities")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training")
    g.add_argument("--lr", type=float, default=0.005, help="Adam learning rate")
    g.add_argument("--batch-size", type=int, default=256, help="mini-batch size (an incomplete final batch is kept)")
    g.add_argument("--beta1", type=float, default=0.5, help="Adam first-moment decay (the momentum knob)")
    g.add_argument("--beta2", type=float, default=0.999, help="Adam second-moment decay")
    g.add_argument("--eps", type=float, default=1e-8, help="Adam denominator epsilon")
    g.add_argument("--patience", type=int, default=10, help="epochs without monitored improvement before stopping")
    g.add_argument("--max-epochs", type=int, default=200, help="hard epoch cap")
    g.add_argument("--shots", type=int, default=16, help="training images drawn per class")
    g.add_argument("--val-shots", type=int, default=4, help="per-class shots held out for early stopping")
    g.add_argument("--monitor", choices=MONITORS, default="val_acc", help="early-stopping metric")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mmadapter",
        description="Train and evaluate cross-modal adapters over frozen text/image embeddings.",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name: str, help_text: str, store: bool = True, adapter: bool = False, training: bool = False):
        p = sub.add_parser(name, help=help_text, formatter_class=argparse.ArgumentDefaultsHelpFormatter)
        if store:
            p.add_argument("--store", type=str, required=True, help="embedding store directory (MMEB-v1)")
        if adapter:
            _add_adapter_flags(p)
        if training:
            _add_train_flags(p)
        _add_common_flags(p)
        return p

    p = command("synth", "generate a synthetic embedding store", store=False)
    p.add_argument("--classes", type=int, default=10, help="number of classes")
    p.add_argument("--per-class", type=int, default=40, help="train images per class")
    p.add_argument("--test-per-class", type=int, default=None, help="test images per class (defaults to --per-class)")
    p.add_argument("--dim", type=int, default=64, help="embedding width")
    p.add_argument("--separation", type=float, default=4.0, help="cluster tightness; images = normalize(prototype + gaussian/separation)")
    p.add_argument("--prompt-offset", type=float, default=0.0, help="text prompts become normalize(prototype + offset*gaussian) instead of the prototypes")

    command("validate-store", "load a store and check every format invariant", store=True)

    command("train", "few-shot-train an adapter on all classes and checkpoint it", adapter=True, training=True)

    p = command("eval", "evaluate a checkpoint (or the zero-shot classifier) on a store", adapter=True)
    p.add_argument("--checkpoint", type=str, default=None, help="checkpoint directory written by train/base-new")
    p.add_argument("--classes", choices=("all", "base", "new"), default="all", help="class subset to evaluate")
    p.add_argument("--share", type=float, default=0.5, help="base-class share defining the base/new split")

    p = command("base-new", "full protocol: split, train on base, report base/new/all", adapter=True, training=True)
    p.add_argument("--share", type=float, default=0.5, help="base-class share")
    p.add_argument("--new-vs-full-prompts", action="store_true", help="score new-class images against the full prompt set instead of new-only")

    p = command("sweep-share", "repeat base-new across several base-class shares", adapter=True, training=True)
    p.add_argument("--shares", type=str, default="0.3,0.5,0.7,0.9", help="comma-separated base shares in (0,1)")
    p.add_argument("--jobs", type=int, default=1, help="parallel experiment processes")

    p = command("ablate", "architecture grid + baselines + text-adaptation pair", adapter=True, training=True)
    p.add_argument("--share", type=float, default=0.5, help="base-class share")
    p.add_argument("--jobs", type=int, default=1, help="parallel experiment processes")

    p = command("noise", "train on a noised store, evaluate on the clean test set", adapter=True, training=True)
    p.add_argument("--share", type=float, default=0.5, help="base-class share")
    p.add_argument("--sigma", type=float, default=None, help="embedding-space gaussian noise stddev applied to the train split")
    p.add_argument("--noisy-store", type=str, default=None, help="pre-noised store directory (alternative to --sigma)")
    p.add_argument("--kinds", type=str, default="none,clip-adapter,mma", help="comma-separated adapter kinds to pair")
    p.add_argument("--jobs", type=int, default=1, help="parallel experiment processes")

    return parser


def _all_actions(parser: argparse.ArgumentParser):
    for action in parser._actions:
        yield action
        if isinstance(action, argparse._SubParsersAction):
            for sub in action.choices.values():
                yield from _all_actions(sub)


def _explicit_dests(parser: argparse.ArgumentParser, argv: list[str]) -> set[str]:
    """Destinations the user actually passed on the command line."""
    tokens = set()
    for raw in argv:
        tokens.add(raw.split("=", 1)[0] if raw.startswith("--") else raw)
    dests = set()
    for action in _all_actions(parser):
        if any(opt in tokens for opt in action.option_strings):
            dests.add(action.dest)
    return dests


def _apply_config_file(args: argparse.Namespace, parser, argv: list[str]) -> None:
    if not getattr(args, "config", None):
        return
    path = Path(args.config)
    if not path.exists():
        raise FileNotFoundError(f"config file {path} does not exist")
    overrides = json.loads(path.read_text())
    if not isinstance(overrides, dict):
        raise ConfigError("config file must hold a JSON object of flag values")
    explicit = _explicit_dests(parser, argv)
    for key, value in overrides.items():
        if not hasattr(args, key):
            raise ConfigError(f"config file sets unknown key {key!r}")
        if key not in explicit:
            setattr(args, key, value)


def _adapter_config(args, emb_dim: int) -> MMAConfig:
    return MMAConfig(
        emb_dim=emb_dim,
        down_factor=args.down_factor,
        mid_factor=args.mid_factor,
        heads=args.heads,
        lambda_blend=args.lambda_blend,
        lambda_text=args.lambda_text,
        lambda_image=args.lambda_image,
        adapt_text=args.adapt_text,
        variant_attention=args.variant_attention,
        variant_updown=args.variant_updown,
        logit_scale=args.logit_scale,
    )


def _train_config(args) -> TrainConfig:
    return TrainConfig(
        lr=args.lr,
        batch_size=args.batch_size,
        beta1=args.beta1,
        beta2=args.beta2,
        eps=args.eps,
        patience=args.patience,
        max_epochs=args.max_epochs,
        shots=args.shots,
        val_shots=args.val_shots,
        seed=args.seed,
        monitor=args.monitor,
    )


def _load_store_arg(path_str: str):
    path = Path(path_str)
    if not path.exists():
        raise FileNotFoundError(f"store directory {path} does not exist")
    return load_store(path)


def _run_dir(args, resolved: dict) -> Path:
    run_id = f"{resolved['command']}-{config_hash(resolved)[:12]}"
    out = Path(args.out) / run_id
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.json").write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n")
    return out


def _resolved(args, command: str, **extra) -> dict:
    payload = {"command": command, "seed": args.seed}
    payload.update(extra)
    return payload


def _write_experiment(out: Path, result, label: str | None = None) -> None:
    write_report_csv([result.report], out / "report.csv", labels=[label] if label else None)
    write_report_table([result.report], out / "report.txt", labels=[label] if label else None)
    write_history_jsonl(result.history, out / "history.jsonl")
    pred_dir = out / "predictions"
    pred_dir.mkdir(exist_ok=True)
    for name, records in result.predictions.items():
        write_predictions_csv(records, pred_dir / f"{name}.csv")
    if result.model is not None and result.model.parameters():
        save_checkpoint(result.model, out / "checkpoint")


# ---------------------------------------------------------------------------
# command implementations


def _cmd_synth(args) -> int:
    store = generate_synthetic(
        n_classes=args.classes,
        per_class=args.per_class,
        emb_dim=args.dim,
        separation=args.separation,
        seed=args.seed,
        test_per_class=args.test_per_class,
        prompt_offset=args.prompt_offset,
    )
    out = Path(args.out)
    save_store(store, out)
    resolved = _resolved(
        args, "synth", classes=args.classes, per_class=args.per_class,
        test_per_class=args.test_per_class, dim=args.dim, separation=args.separation,
        prompt_offset=args.prompt_offset, dataset_id=store.dataset_id,
    )
    (out / "resolved_config.json").write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n")
    print(f"wrote store {store.dataset_id} to {out}")
    return 0


def _cmd_validate_store(args) -> int:
    store = _load_store_arg(args.store)
    counts = {name: split.count for name, split in store.splits.items()}
    print(f"ok dataset_id={store.dataset_id} emb_dim={store.emb_dim} classes={store.n_classes} counts={counts}")
    return 0


def _cmd_train(args) -> int:
    store = _load_store_arg(args.store)
    adapter_kind = CLI_ADAPTER_NAMES[args.adapter]
    acfg = _adapter_config(args, store.emb_dim)
    tcfg = _train_config(args)
    acfg.validate()
    tcfg.validate()
    resolved = _resolved(
        args, "train", store=str(args.store), dataset_id=store.dataset_id,
        adapter_kind=adapter_kind, adapter=acfg.to_dict(), train=tcfg.to_dict(),
    )
    out = _run_dir(args, resolved)
    model = build_adapter(adapter_kind, acfg, seed=args.seed)
    history = []
    if model.parameters():
        episode = sample_few_shot(store, range(store.n_classes), tcfg.shots, args.seed, tcfg.val_shots)
        model, history = train(model, store, episode, tcfg)
        save_checkpoint(model, out / "checkpoint")
    write_history_jsonl(history, out / "history.jsonl")
    acc, records = evaluate(model, store, range(store.n_classes))
    (out / "predictions").mkdir(exist_ok=True)
    write_predictions_csv(records, out / "predictions" / "all.csv")
    print(f"trained {adapter_kind} ({parameter_count(model)} params), test accuracy {acc:.2f}; artifacts in {out}")
    return 0


def _cmd_eval(args) -> int:
    store = _load_store_arg(args.store)
    if args.checkpoint:
        model = load_checkpoint(Path(args.checkpoint))
        adapter_kind = model.kind
        acfg = model.config
    else:
        adapter_kind = CLI_ADAPTER_NAMES[args.adapter]
        acfg = _adapter_config(args, store.emb_dim)
        model = build_adapter(adapter_kind, acfg, seed=args.seed)
    if args.classes == "all":
        class_ids = list(range(store.n_classes))
    else:
        split = split_classes(store, args.share)
        class_ids = split.base if args.classes == "base" else split.new
        if not class_ids:
            raise ConfigError(f"the {args.classes!r} side of a share-{args.share} split is empty")
    resolved = _resolved(
        args, "eval", store=str(args.store), dataset_id=store.dataset_id,
        adapter_kind=adapter_kind, adapter=acfg.to_dict(),
        checkpoint=str(args.checkpoint) if args.checkpoint else None,
        classes=args.classes, share=args.share,
    )
    out = _run_dir(args, resolved)
    acc, records = evaluate(model, store, class_ids)
    n_correct = sum(r["correct"] for r in records)
    rows = [
        {
            "dataset_id": store.dataset_id,
            "adapter_kind": adapter_kind,
            "classes": args.classes,
            "accuracy": acc,
            "n_correct": n_correct,
            "n_total": len(records),
            "param_count": parameter_count(model),
            "config_hash": config_hash(resolved),
        }
    ]
    write_series_csv(
        rows,
        ["dataset_id", "adapter_kind", "classes", "accuracy", "n_correct", "n_total", "param_count", "config_hash"],
        out / "report.csv",
    )
    (out / "predictions").mkdir(exist_ok=True)
    write_predictions_csv(records, out / "predictions" / f"{args.classes}.csv")
    print(f"accuracy {acc:.4f} ({n_correct}/{len(records)}) on {args.classes} classes; artifacts in {out}")
    return 0


def _cmd_base_new(args) -> int:
    store = _load_store_arg(args.store)
    adapter_kind = CLI_ADAPTER_NAMES[args.adapter]
    acfg = _adapter_config(args, store.emb_dim)
    tcfg = _train_config(args)
    resolved = _resolved(
        args, "base-new", store=str(args.store), dataset_id=store.dataset_id,
        adapter_kind=adapter_kind, adapter=acfg.to_dict(), train=tcfg.to_dict(),
        share=args.share, new_vs_full_prompts=args.new_vs_full_prompts,
    )
    out = _run_dir(args, resolved)
    result = run_base_new_experiment(
        store, adapter_kind, acfg, tcfg, base_share=args.share,
        new_against_full_prompts=args.new_vs_full_prompts,
    )
    _write_experiment(out, result)
    r = result.report
    print(
        f"base {r.base_acc:.2f}  new {('%.2f' % r.new_acc) if r.new_acc is not None else '-'}  "
        f"H {('%.2f' % r.harmonic_mean) if r.harmonic_mean is not None else '-'}  "
        f"all {r.all_acc:.2f}; artifacts in {out}"
    )
    return 0


def _cmd_sweep_share(args) -> int:
    store = _load_store_arg(args.store)
    adapter_kind = CLI_ADAPTER_NAMES[args.adapter]
    acfg = _adapter_config(args, store.emb_dim)
    tcfg = _train_config(args)
    shares = [float(s) for s in args.shares.split(",") if s]
    resolved = _resolved(
        args, "sweep-share", store=str(args.store), dataset_id=store.dataset_id,
        adapter_kind=adapter_kind, adapter=acfg.to_dict(), train=tcfg.to_dict(), shares=shares,
    )
    out = _run_dir(args, resolved)
    results = run_class_share_sweep(store, adapter_kind, acfg, tcfg, shares=shares, jobs=args.jobs)
    labels = [f"share={s:g}" for s in shares]
    write_report_csv([r.report for r in results], out / "report.csv", labels=labels)
    write_report_table([r.report for r in results], out / "report.txt", labels=labels)
    series = [
        {
            "share": share,
            "base_acc": r.report.base_acc,
            "new_acc": r.report.new_acc,
            "harmonic_mean": r.report.harmonic_mean,
        }
        for share, r in zip(shares, results)
    ]
    write_series_csv(series, ["share", "base_acc", "new_acc", "harmonic_mean"], out / "series.csv")
    print(f"swept {len(shares)} shares; series in {out / 'series.csv'}")
    return 0


def _cmd_ablate(args) -> int:
    store = _load_store_arg(args.store)
    acfg = _adapter_config(args, store.emb_dim)
    tcfg = _train_config(args)
    resolved = _resolved(
        args, "ablate", store=str(args.store), dataset_id=store.dataset_id,
        adapter=acfg.to_dict(), train=tcfg.to_dict(), share=args.share,
    )
    out = _run_dir(args, resolved)
    grid = run_ablation_grid(store, acfg, tcfg, base_share=args.share, jobs=args.jobs)
    for section, rows in grid.items():
        labels = [label for label, _ in rows]
        reports = [r.report for _, r in rows]
        write_report_csv(reports, out / f"ablation_{section}.csv", labels=labels)
        write_report_table(reports, out / f"ablation_{section}.txt", labels=labels)
    print(f"ablation grid written to {out}")
    return 0


def _cmd_noise(args) -> int:
    store = _load_store_arg(args.store)
    if (args.sigma is None) == (args.noisy_store is None):
        raise ConfigError("noise needs exactly one of --sigma or --noisy-store")
    if args.noisy_store:
        noisy = _load_store_arg(args.noisy_store)
        tag = f"train:{noisy.dataset_id}"
    else:
        noisy = add_gaussian_noise(store, sigma=args.sigma, seed=args.seed)
        tag = f"embedding_space:sigma={args.sigma:g}"
    kinds = []
    for name in (k.strip() for k in args.kinds.split(",") if k.strip()):
        if name not in CLI_ADAPTER_NAMES:
            raise ConfigError(f"unknown adapter kind {name!r} in --kinds; expected {sorted(CLI_ADAPTER_NAMES)}")
        kinds.append(CLI_ADAPTER_NAMES[name])
    acfg = _adapter_config(args, store.emb_dim)
    tcfg = _train_config(args)
    resolved = _resolved(
        args, "noise", store=str(args.store), dataset_id=store.dataset_id,
        noisy_dataset_id=noisy.dataset_id, sigma=args.sigma, kinds=kinds,
        adapter=acfg.to_dict(), train=tcfg.to_dict(), share=args.share, noise_tag=tag,
    )
    out = _run_dir(args, resolved)
    pairs = run_noise_experiment(store, noisy, kinds, acfg, tcfg, base_share=args.share, noise_tag=tag, jobs=args.jobs)
    labels, reports = [], []
    for kind, clean_result, noisy_result in pairs:
        labels += [f"{kind}/clean-train", f"{kind}/noisy-train"]
        reports += [clean_result.report, noisy_result.report]
    write_report_csv(reports, out / "report.csv", labels=labels)
    write_report_table(reports, out / "report.txt", labels=labels)
    print(f"noise pairs written to {out}")
    return 0


_COMMANDS = {
    "synth": _cmd_synth,
    "validate-store": _cmd_validate_store,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "base-new": _cmd_base_new,
    "sweep-share": _cmd_sweep_share,
    "ablate": _cmd_ablate,
    "noise": _cmd_noise,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        _apply_config_file(args, parser, argv)
        return _COMMANDS[args.command](args)
    except FileNotFoundError as exc:
        print(f"ERROR file-not-found: {exc}", file=sys.stderr)
        return 2
    except ConfigError as exc:
        print(f"ERROR {exc.category}: {exc}", file=sys.stderr)
        return 2
    except MMAdapterError as exc:
        print(f"ERROR {exc.category}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
