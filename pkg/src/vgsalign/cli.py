"""Command-line entry point: ``vgsalign {synth,preprocess,train,eval,query,plot-data}``."""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import config as cfgmod
from .dataset import (
    PairDataset,
    SyntheticSpec,
    build_mfcc_cache,
    generate_synthetic,
    read_image,
    read_wav,
    scan_manifest,
)
from .dsp import mfcc
from .evaluation import embed_pairs, evaluate, query
from .image import preprocess_eval
from .objective import HingeConfig
from .training import (
    LOG_COLUMNS,
    ScheduleConfig,
    TrainConfig,
    checkpoint_name,
    load_checkpoint,
    read_log,
    train,
    warm_restart_run,
)

log = logging.getLogger("vgsalign")

AUDIO_SUFFIXES = {".wav"}
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg"}


class CliError(Exception):
    pass


def _cache_root(arg: str | None, cfg: cfgmod.RunConfig | None = None) -> str | None:
    root = arg or (cfg.data.cache_root if cfg else "") or os.environ.get("VGSALIGN_CACHE_ROOT", "")
    return root or None


def _overrides(args) -> dict[str, str]:
    items: dict[str, str] = {}
    for item in args.set or []:
        if "=" not in item:
            raise CliError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        items[k.strip()] = v.strip()
    for flag, key in (
        ("seed", "optim.seed"),
        ("epochs", "optim.epochs"),
        ("lr", "optim.lr"),
        ("batch_size", "optim.batch_size"),
        ("schedule", "optim.schedule"),
        ("manifest", "data.manifest"),
        ("cache_root", "data.cache_root"),
        ("out", "out.checkpoint_dir"),
        ("log", "out.log_path"),
    ):
        value = getattr(args, flag, None)
        if value is not None:
            items[key] = str(value)
    return items


def _load_run_config(args) -> cfgmod.RunConfig:
    return cfgmod.load_config(args.config, args.preset, _overrides(args))


def cmd_synth(args) -> int:
    spec = SyntheticSpec(n_classes=args.classes, pairs_per_class=args.per_class)
    manifest = generate_synthetic(spec, args.root, seed=args.seed)
    print(f"wrote {spec.n_classes * spec.pairs_per_class} pairs; manifest {manifest}")
    return 0


def cmd_preprocess(args) -> int:
    manifest = Path(args.manifest)
    cache_root = _cache_root(args.cache_root)
    if cache_root is None:
        raise CliError("preprocess needs --cache-root (or VGSALIGN_CACHE_ROOT)")
    pairs = scan_manifest(manifest)
    report = build_mfcc_cache(pairs, cache_root, manifest.parent)
    print(report)
    return 0


def cmd_train(args) -> int:
    cfg = _load_run_config(args)
    if not cfg.data.manifest:
        raise CliError("train needs a manifest (--manifest or data.manifest)")
    if not Path(cfg.data.manifest).is_file():
        raise CliError(f"manifest not found: {cfg.data.manifest}")
    if cfg.optim.epochs == 0:
        print("configuration valid; nothing to train (epochs = 0)")
        return 0
    o = cfg.optim
    train_cfg = TrainConfig(
        epochs=o.epochs,
        batch_size=o.batch_size,
        schedule=ScheduleConfig(o.schedule, o.lr, o.eta_min, o.T0, o.mult),
        hinge=HingeConfig(o.beta),
        seed=o.seed,
        eval_split=args.eval_split,
    )
    dataset = PairDataset.from_manifest(cfg.data.manifest, _cache_root(None, cfg))
    out_dir = Path(cfg.out.checkpoint_dir)
    if args.resume:
        ckpt = load_checkpoint(args.resume)
        result = warm_restart_run(ckpt, dataset, o.epochs, args.lr_scale, train_cfg, out_dir, cfg.out.log_path)
    else:
        result = train(dataset, cfg.model, train_cfg, out_dir, cfg.out.log_path)
    print(f"trained {len(result.epoch_losses)} epochs; final loss {result.epoch_losses[-1]:.6f}")
    print(f"last checkpoint {result.checkpoints[-1]}")
    return 0


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    audio, image = ckpt.build_models()
    dataset = PairDataset.from_manifest(args.manifest, _cache_root(args.cache_root))
    report = evaluate(dataset, dataset.split(args.split), audio, image, args.k)
    print(report.table())
    if args.csv:
        Path(args.csv).write_text(report.to_csv())
    if args.ranks:
        with open(args.ranks, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["query", "s2i_rank", "i2s_rank"])
            for q, (a, b) in enumerate(zip(report.s2i_ranks, report.i2s_ranks)):
                writer.writerow([q, int(a), int(b)])
    return 0


def cmd_query(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    audio, image = ckpt.build_models()
    audio.eval()
    image.eval()
    probe = Path(args.probe)
    suffix = probe.suffix.lower()
    with torch.no_grad():
        if suffix in AUDIO_SUFFIXES:
            probe_kind = "audio"
            frames = torch.from_numpy(mfcc(read_wav(probe)).frames.astype(np.float32)).unsqueeze(0)
            vec = audio(frames)[0].numpy()
        elif suffix in IMAGE_SUFFIXES:
            probe_kind = "image"
            crop = preprocess_eval(read_image(probe)).astype(np.float32) / 255.0
            vec = image(torch.from_numpy(crop).unsqueeze(0))[0].numpy()
        else:
            raise CliError(f"cannot tell the modality of probe {probe}")
    target = args.target or ("image" if probe_kind == "audio" else "audio")
    dataset = PairDataset.from_manifest(args.gallery, _cache_root(args.cache_root))
    pairs = dataset.pairs if args.split == "all" else dataset.split(args.split)
    pairs = dataset.usable(pairs)
    if not pairs:
        raise CliError("empty gallery")
    A, I = embed_pairs(dataset, pairs, audio, image)
    gallery = I if target == "image" else A
    k = args.k
    if k > len(pairs):
        log.warning("k=%d exceeds gallery size %d; clamping", k, len(pairs))
        k = len(pairs)
    print(f"{probe_kind} probe {probe.name} -> {target} gallery ({len(pairs)} items)")
    for rank, (idx, score) in enumerate(query(vec, gallery, k), start=1):
        print(f"{rank}\t{pairs[idx].pair_id}\t{score:.6f}")
    return 0


def cmd_plot_data(args) -> int:
    rows = read_log(args.log)
    if args.checkpoints:
        if not args.manifest:
            raise CliError("--checkpoints needs --manifest for post-hoc evaluation")
        dataset = PairDataset.from_manifest(args.manifest, _cache_root(args.cache_root))
        test_pairs = dataset.split(args.split)
        for row in rows:
            path = Path(args.checkpoints) / checkpoint_name(row["epoch"])
            if not path.is_file():
                log.warning("no checkpoint for epoch %d", row["epoch"])
                continue
            audio, image = load_checkpoint(path).build_models()
            report = evaluate(dataset, test_pairs, audio, image, (10,))
            row["r_at_10_s2i"], row["r_at_10_i2s"] = report.r_at_k[max(report.r_at_k)]
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(LOG_COLUMNS)
        for row in rows:
            writer.writerow(
                [
                    row["epoch"],
                    f"{row['loss']:.8g}",
                    f"{row['lr']:.8g}",
                    "" if row["r_at_10_s2i"] is None else f"{row['r_at_10_s2i']:.6f}",
                    "" if row["r_at_10_i2s"] is None else f"{row['r_at_10_i2s']:.6f}",
                ]
            )
    finally:
        if out is not sys.stdout:
            out.close()
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vgsalign", description="Speech-image co-embedding without transfer learning.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic aligned-pair dataset")
    p.add_argument("root")
    p.add_argument("--classes", type=int, default=16)
    p.add_argument("--per-class", type=int, default=25)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", help="precompute the MFCC cache")
    p.add_argument("--manifest", required=True)
    p.add_argument("--cache-root")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train both embedders")
    p.add_argument("--config", help="flat 'section.key = value' file")
    p.add_argument("--preset", choices=sorted(cfgmod.PRESETS))
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--schedule", choices=("CALR", "CALWR"))
    p.add_argument("--manifest")
    p.add_argument("--cache-root")
    p.add_argument("--out", help="checkpoint directory")
    p.add_argument("--log", help="metric log CSV")
    p.add_argument("--resume", help="checkpoint for a warm-restart run")
    p.add_argument("--lr-scale", type=float, default=0.5)
    p.add_argument("--eval-split", choices=("train", "val", "test"))
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="recall@K on a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--cache-root")
    p.add_argument("--split", default="test")
    p.add_argument("--k", type=int, nargs="+", default=[1, 5, 10])
    p.add_argument("--csv")
    p.add_argument("--ranks")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("query", help="rank a gallery for one audio or image probe")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--probe", required=True)
    p.add_argument("--gallery", required=True, help="gallery manifest")
    p.add_argument("--cache-root")
    p.add_argument("--split", default="all")
    p.add_argument("--target", choices=("audio", "image"))
    p.add_argument("--k", type=int, default=10)
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("plot-data", help="per-epoch R@10 CSV for plotting")
    p.add_argument("--log", required=True)
    p.add_argument("--out")
    p.add_argument("--checkpoints", help="fill R@10 post hoc from this checkpoint directory")
    p.add_argument("--manifest")
    p.add_argument("--cache-root")
    p.add_argument("--split", default="test")
    p.set_defaults(func=cmd_plot_data)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (CliError, cfgmod.ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
