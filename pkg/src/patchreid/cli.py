"""Command-line front end: train, eval, augment, visualize-selection, ablate."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .augment import EraseParams, RoaParams, cut_paste, load_mask_bank, random_erase, roa, synth_masks
from .config import RunConfig, apply_overrides, load_config, toy_config
from .data import load_image, save_image, synth_dataset
from .evaluate import evaluate, selection_quality
from .selection import dump_traces, render_selection, select, trace_of
from .train import Trainer, build_dataset, resolve_mask_bank, train_run


def _load_cfg(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else toy_config()
    overrides = list(getattr(args, "set", None) or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(f"seed={args.seed}")
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    return cfg


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    out = Path(args.out)
    result = train_run(cfg, out_dir=out, verbose=not args.quiet)
    report = evaluate(result.trainer.model, result.dataset.query, result.dataset.gallery)
    metrics = report.to_dict()
    metrics["train_seconds"] = result.seconds
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2) + "\n")
    print(
        f"trained {cfg.epochs} epochs in {result.seconds:.1f}s | "
        f"Rank-1 {report.rank_1:.3f} mAP {report.mAP:.3f} -> {out}"
    )
    return 0


def cmd_eval(args) -> int:
    cfg = _load_cfg(args)
    dataset = build_dataset(cfg)
    trainer = Trainer(cfg, dataset.num_identities)
    trainer.load(args.checkpoint)
    report = evaluate(
        trainer.model, dataset.query, dataset.gallery, pre_dpsm=args.pre_dpsm
    )
    doc = report.to_dict()
    if any(s.truth_body_mask is not None for s in dataset.query):
        doc["selection_quality"] = selection_quality(trainer.model, dataset.query).to_dict()
    text = json.dumps(doc, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


def cmd_augment(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.mask_bank.startswith("synthetic:"):
        bank = synth_masks(seed=args.seed, count=int(args.mask_bank.split(":", 1)[1]))
    else:
        bank = load_mask_bank(args.mask_bank)
    files = sorted(p for p in Path(args.infolder).iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg"))
    if not files:
        print(f"no images found in {args.infolder}", file=sys.stderr)
        return 1
    params = RoaParams()
    for i, file in enumerate(files):
        image = load_image(file)
        rng = np.random.default_rng([args.seed, i])
        if args.method == "roa":
            result, _ = roa(image, bank, params, rng)
        elif args.method == "cutpaste":
            result, _ = cut_paste(image, bank, params, rng)
        else:
            result, _ = random_erase(image, rng, EraseParams())
        save_image(out / file.name, result)
        if args.preview:
            side = np.concatenate([image, result], axis=2)
            save_image(out / f"preview_{file.name}", side)
    print(f"augmented {len(files)} images with {args.method} -> {out}")
    return 0


def cmd_visualize(args) -> int:
    cfg = _load_cfg(args)
    trainer = Trainer(cfg, args.num_identities)
    trainer.load(args.checkpoint)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files = sorted(p for p in Path(args.images).iterdir() if p.suffix.lower() == ".png")
    if not files:
        print(f"no PNG images found in {args.images}", file=sys.stderr)
        return 1
    from .encoder import encode

    traces = []
    for file in files:
        image = load_image(file)
        tokens = encode(trainer.model.encoder, image)
        sel = select(tokens, cfg.selection)
        overlay = render_selection(image, sel, tokens, cfg.encoder.patch)
        save_image(out / f"overlay_{file.name}", overlay)
        traces.append({"image": file.name, **trace_of(sel)})
    if args.trace:
        dump_traces(args.trace, traces)
    print(f"wrote {len(files)} overlays -> {out}")
    return 0


def cmd_ablate(args) -> int:
    config_files = sorted(Path(args.configs).glob("*.json"))
    if not config_files:
        print(f"no config JSON files in {args.configs}", file=sys.stderr)
        return 1
    rows = []
    for file in config_files:
        base = load_config(file)
        r1s, maps = [], []
        for seed in range(args.seeds):
            cfg = apply_overrides(base, [f"seed={seed}"])
            result = train_run(cfg)
            report = evaluate(result.trainer.model, result.dataset.query, result.dataset.gallery)
            r1s.append(report.rank_1)
            maps.append(report.mAP)
        rows.append((file.stem, float(np.mean(r1s)), float(np.mean(maps))))
        print(f"{file.stem}: Rank-1 {rows[-1][1]:.3f} mAP {rows[-1][2]:.3f}")
    lines = [
        "| config | mean Rank-1 | mean mAP |",
        "|---|---|---|",
    ]
    for name, r1, m in rows:
        lines.append(f"| {name} | {r1:.3f} | {m:.3f} |")
    table = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(table)
    print(table)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="patchreid")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and write run artifacts")
    p.add_argument("--config", help="run config JSON (defaults to the toy config)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override, repeatable")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint (CMC/mAP, single query)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", help="run config JSON (defaults to the toy config)")
    p.add_argument("--pre-dpsm", action="store_true", dest="pre_dpsm",
                   help="use pooled pre-selection features as descriptors")
    p.add_argument("--out", help="write metrics JSON here as well")
    p.add_argument("--seed", type=int)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("augment", help="apply occlusion augmentation to a folder of images")
    p.add_argument("--in", dest="infolder", required=True)
    p.add_argument("--mask-bank", default="synthetic:200",
                   help="directory of RGBA PNGs or 'synthetic:<count>'")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--method", choices=("roa", "re", "cutpaste"), default="roa")
    p.add_argument("--preview", action="store_true", help="also write side-by-side composites")
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("visualize-selection", help="overlay selected patch cells on images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--images", required=True, help="directory of PNG images at the model resolution")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--num-identities", type=int, default=20,
                   help="identity count the checkpoint was trained with")
    p.add_argument("--trace", help="also dump selection traces as JSON lines")
    p.add_argument("--seed", type=int)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_visualize)

    p = sub.add_parser("ablate", help="train a grid of configs and tabulate the results")
    p.add_argument("--configs", required=True, help="directory of run config JSON files")
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--out", help="write the markdown table here")
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
