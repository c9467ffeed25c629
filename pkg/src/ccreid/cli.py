"""Command-line entry point: synth / train / extract / eval / ablate.

Configuration comes from (in increasing precedence) built-in defaults, a
JSON config file (--config), flat --section.key=value overrides, and the
convenience flags of each subcommand. Exit codes: 0 success, 1 runtime
failure, 2 validation or usage error.
"""

from __future__ import annotations

import argparse
import copy
import json
import re
import sys
from pathlib import Path

from . import evaluator as ev
from . import trainer as tr
from .config import (RunConfig, apply_override, default_key_listing,
                     load_config)
from .data import generate_synthetic_dataset, load_manifest

_OVERRIDE_RE = re.compile(r"^--([a-z_]+\.[a-z_0-9]+)=(.*)$")


def build_parser() -> argparse.ArgumentParser:
    epilog = ("configuration keys and defaults "
              "(override with --section.key=value):\n  "
              + "\n  ".join(default_key_listing()))
    parser = argparse.ArgumentParser(
        prog="ccreid",
        description="cloth-changing person re-identification pipeline",
        epilog=epilog, allow_abbrev=False,
        formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render a synthetic dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--ids", type=int, help="number of identities")
    p.add_argument("--clothes", type=int, help="outfits per identity")
    p.add_argument("--per", type=int, help="images per (identity, outfit)")
    p.add_argument("--height", type=int, help="image height")
    p.add_argument("--width", type=int, help="image width")
    p.add_argument("--seed", type=int, help="generator seed")
    p.add_argument("--force", action="store_true",
                   help="allow writing into an existing directory")
    p.add_argument("--config", help="JSON config file")

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="checkpoint/log directory")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--ablation",
                   help="comma list of mgr,cdn,psa ('none' for the baseline)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--resume", help="checkpoint to continue from")

    p = sub.add_parser("extract", help="extract descriptors for a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="query",
                   choices=["train", "query", "gallery"])
    p.add_argument("--out", required=True, help="descriptor file")

    p = sub.add_parser("eval", help="evaluate query against gallery")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", help="write the JSON report here")
    p.add_argument("--cloth-change-only", action="store_true",
                   help="drop same-clothes matches of the query identity")
    p.add_argument("--config", help="JSON config file")

    p = sub.add_parser("ablate", help="train and evaluate all four variants")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--cloth-change-only", action="store_true")
    return parser


def resolve_config(args, overrides: list[str]) -> RunConfig:
    config = load_config(args.config) if getattr(args, "config", None) \
        else RunConfig()
    for item in overrides:
        m = _OVERRIDE_RE.match(item)
        if not m:
            raise ValueError(f"unrecognized argument {item!r} "
                             "(overrides look like --section.key=value)")
        apply_override(config, m.group(1), m.group(2))
    if getattr(args, "epochs", None) is not None:
        config.trainer.epochs = args.epochs
    if getattr(args, "seed", None) is not None:
        config.trainer.seed = args.seed
    if getattr(args, "ablation", None) is not None:
        flags = [] if args.ablation in ("", "none") \
            else args.ablation.split(",")
        config.trainer.ablation = flags
    if getattr(args, "cloth_change_only", False):
        config.evaluator.cloth_change_only = True
    return config.validate()


def cmd_synth(args, config: RunConfig) -> int:
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise ValueError(f"output directory {out} exists; pass --force to reuse")
    d = config.dataset
    manifest = generate_synthetic_dataset(
        out,
        num_ids=args.ids if args.ids is not None else d.num_ids,
        clothes_per_id=args.clothes if args.clothes is not None else d.clothes_per_id,
        images_per_combo=args.per if args.per is not None else d.images_per_combo,
        image_size=(args.height or d.image_height, args.width or d.image_width),
        rng_seed=args.seed if args.seed is not None else config.trainer.seed,
        num_cameras=d.num_cameras, palette_size=d.palette_size,
        hue_jitter=d.hue_jitter)
    with open(out / "synth_config.json", "w", encoding="utf-8") as f:
        json.dump({"config": config.to_dict(),
                   "config_fingerprint": config.fingerprint(),
                   "seed": args.seed if args.seed is not None
                   else config.trainer.seed},
                  f, indent=1, sort_keys=True)
    print(f"wrote {len(manifest.records)} records to {out}")
    return 0


def cmd_train(args, config: RunConfig) -> int:
    manifest = load_manifest(args.manifest)
    result = tr.train(manifest, config, out_dir=args.out,
                      resume_from=args.resume)
    last = result.log[-1] if result.log else {}
    print(f"trained {config.trainer.epochs} epochs; "
          f"final loss {last.get('L', float('nan')):.6f}; "
          f"checkpoint {result.checkpoint_path}")
    return 0


def cmd_extract(args, config: RunConfig) -> int:
    model, _, _, saved_config = tr.load_training_checkpoint(args.checkpoint)
    manifest = load_manifest(args.manifest)
    dset = ev.extract_descriptors(model, manifest, args.split,
                                  saved_config.evaluator.batch_size)
    ev.save_descriptors(args.out, dset)
    print(f"wrote {dset.features.shape[0]} descriptors "
          f"(D={dset.features.shape[1]}) to {args.out}")
    return 0


def _evaluate_checkpoint(checkpoint: str, manifest_path: str,
                         config: RunConfig):
    model, _, _, saved_config = tr.load_training_checkpoint(checkpoint)
    manifest = load_manifest(manifest_path)
    query = ev.extract_descriptors(model, manifest, "query",
                                   config.evaluator.batch_size)
    gallery = ev.extract_descriptors(model, manifest, "gallery",
                                     config.evaluator.batch_size)
    return ev.evaluate(query, gallery, config.evaluator), saved_config


def cmd_eval(args, config: RunConfig) -> int:
    result, saved_config = _evaluate_checkpoint(args.checkpoint,
                                                args.manifest, config)
    report = {"mAP": result.mean_ap, "rank1": result.rank1,
              "cmc": result.cmc.tolist(),
              "num_queries": result.num_queries,
              "num_dropped": result.num_dropped,
              "cloth_change_only": config.evaluator.cloth_change_only,
              "checkpoint_config_fingerprint": saved_config.fingerprint()}
    for k in (5, 10):
        if len(result.cmc) >= k:
            report[f"rank{k}"] = float(result.cmc[k - 1])
    text = json.dumps(report, indent=1, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    print(text)
    return 0


def cmd_ablate(args, config: RunConfig) -> int:
    manifest = load_manifest(args.manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    results = {}
    for variant in ev.VARIANT_ORDER:
        vconfig = copy.deepcopy(config)
        vconfig.trainer.ablation = list(ev.VARIANT_FLAGS[variant])
        run_dir = out / variant.replace("+", "_")
        tr.train(manifest, vconfig, out_dir=str(run_dir))
        results[variant], _ = _evaluate_checkpoint(
            str(run_dir / "checkpoint.ckpt"), args.manifest, vconfig)
        print(f"{variant}: rank1={results[variant].rank1:.4f} "
              f"mAP={results[variant].mean_ap:.4f}")
    report = ev.ablation_report(results)
    with open(out / "ablation_report.json", "w", encoding="utf-8") as f:
        json.dump(report, f, indent=1, sort_keys=True)
    print(ev.format_report(report))
    return 0


_COMMANDS = {"synth": cmd_synth, "train": cmd_train, "extract": cmd_extract,
             "eval": cmd_eval, "ablate": cmd_ablate}


def main(argv=None) -> int:
    parser = build_parser()
    args, extras = parser.parse_known_args(argv)
    try:
        config = resolve_config(args, extras)
        return _COMMANDS[args.command](args, config)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - runtime failures exit 1
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
