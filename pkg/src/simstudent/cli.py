"""Experiment driver.

Subcommands: generate (dataset synthesis), train (selfsim or a baseline
preset), eval (DSC/FROC reports from a checkpoint), export-embeddings,
report (merge metrics files from finished runs). All runs are deterministic
for a fixed (config, seed, inputs).
"""

import argparse
import csv
import json
import sys
from pathlib import Path

from . import backbone, trainer
from .config import ConfigError, config_hash, default_config_doc, load_config
from .dataio import build_dataset, load_dataset, save_dataset
from .trainer import NanLossError

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_NAN = 3


def _load(args):
    cfg, doc = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.master_seed = args.seed
        cfg.train.seed = args.seed
        doc = dict(doc)
        doc["master_seed"] = args.seed
        doc.setdefault("train", {})
        doc["train"] = dict(doc["train"])
        doc["train"]["seed"] = args.seed
    if getattr(args, "epochs", None) is not None:
        cfg.train.epochs = args.epochs
        doc = dict(doc)
        doc["train"] = dict(doc.get("train", {}))
        doc["train"]["epochs"] = args.epochs
    if getattr(args, "preset", None) is not None:
        cfg.preset = args.preset
        doc = dict(doc)
        doc["preset"] = args.preset
    return cfg, doc


def cmd_generate(args) -> int:
    cfg, doc = _load(args)
    ds_block = cfg.dataset
    dataset, stats = build_dataset(
        slide_count=ds_block.slide_count,
        slide_cfg=ds_block.slide_config(),
        noise=ds_block.noise_spec(),
        split_fractions=ds_block.split_fractions,
        master_seed=cfg.master_seed,
    )
    save_dataset(args.out, dataset, stats, config_echo=doc)
    print(f"wrote {dataset.n_patches} patches over "
          f"{len(dataset.slides)} slides to {args.out}")
    for split in ("train", "val", "test"):
        noisiness = stats[split]["noisiness_ratio"]
        shown = "n/a" if noisiness is None else f"{100 * noisiness:.2f}%"
        print(f"  {split}: {stats[split]['benign_patches']} benign, "
              f"{stats[split]['cancer_patches']} cancer, noisiness {shown}")
    return EXIT_OK


def _resume_hash(doc: dict) -> str:
    # epochs is a stopping point, not a dynamics parameter: a run may be
    # resumed to train further without invalidating finished epochs
    trimmed = json.loads(json.dumps(doc))
    trimmed.get("train", {}).pop("epochs", None)
    return config_hash(trimmed)


def cmd_train(args) -> int:
    cfg, doc = _load(args)
    dataset = load_dataset(args.dataset)
    out = Path(args.out)
    run_meta = {"config_hash": config_hash(doc),
                "resume_hash": _resume_hash(doc), "preset": cfg.preset}

    resume_from = None
    if args.resume:
        candidates = sorted(out.glob("epoch_*.ssck"))
        if candidates:
            resume_from = backbone.load_checkpoint(candidates[-1])
        elif (out / "final.ssck").exists():
            resume_from = backbone.load_checkpoint(out / "final.ssck")
        if resume_from is not None and (
            resume_from["meta"].get("resume_hash") != run_meta["resume_hash"]
        ):
            print("refusing to resume: config hash differs", file=sys.stderr)
            return EXIT_CONFIG

    if cfg.preset == "selfsim":
        index = trainer.build_train_index(dataset, cfg.train.similar_radius_mm)
        result = trainer.train_selfsim(dataset, index, cfg.train,
                                       out_dir=out, run_meta=run_meta,
                                       resume_from=resume_from)
    else:
        result = trainer.train_variant(dataset, cfg.train, cfg.preset,
                                       out_dir=out, run_meta=run_meta,
                                       resume_from=resume_from)
    last = result.history[-1]
    print(f"trained {cfg.train.epochs} epochs; final val DSC "
          f"{last.val_dsc:.2f}, best {result.best_val_dsc:.2f} "
          f"(epoch {result.best_epoch})")
    return EXIT_OK


def cmd_eval(args) -> int:
    dataset = load_dataset(args.dataset)
    loaded = backbone.load_checkpoint(args.checkpoint)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report, masks = trainer.evaluate_checkpoint(
        loaded["student"], dataset, split=args.split,
        mask_threshold=args.threshold, candidate_threshold=args.threshold,
    )
    report.write_json(out / "metrics.json")
    if report.curve is not None:
        report.curve.write_csv(out / "froc.csv")
    from .evaluation import write_mask_pgm
    for slide_id, mask in sorted(masks.items()):
        write_mask_pgm(mask, out / f"mask_{slide_id}.pgm")
    froc_text = ("n/a" if report.froc_score is None
                 else f"{report.froc_score:.4f}")
    print(f"split {args.split}: DSC {report.dsc:.2f}, FROC {froc_text}")
    return EXIT_OK


def cmd_export_embeddings(args) -> int:
    dataset = load_dataset(args.dataset)
    loaded = backbone.load_checkpoint(args.checkpoint)
    ids, clean, embed = trainer.export_embeddings(loaded["student"], dataset,
                                                  split=args.split)
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["patch_id", "clean_label"]
                        + [f"z{i:02d}" for i in range(embed.shape[1])])
        for pid, label, row in zip(ids, clean, embed):
            writer.writerow([pid, int(label)] + [repr(float(v)) for v in row])
    print(f"wrote {len(ids)} embedding rows to {args.out}")
    return EXIT_OK


def cmd_report(args) -> int:
    merged = {}
    for run_dir in args.runs:
        path = Path(run_dir) / "metrics.json"
        if not path.exists():
            print(f"no metrics.json under {run_dir}", file=sys.stderr)
            return EXIT_ERROR
        with open(path) as fh:
            doc = json.load(fh)
        merged[str(run_dir)] = {
            "dsc": doc["dsc"],
            "froc_score": doc["froc_score"],
        }
    text = json.dumps(merged, sort_keys=True, indent=1)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="simstudent",
        description="Noise-robust patch classifier training on synthetic "
                    "partially labeled slides",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", help="synthesize a dataset")
    gen.add_argument("--config", required=True)
    gen.add_argument("--out", required=True)
    gen.add_argument("--seed", type=int)
    gen.set_defaults(func=cmd_generate)

    tr = sub.add_parser("train", help="train a model")
    tr.add_argument("--config", required=True)
    tr.add_argument("--dataset", required=True)
    tr.add_argument("--out", required=True)
    tr.add_argument("--preset",
                    choices=["selfsim"] + sorted(trainer.PRESETS))
    tr.add_argument("--seed", type=int)
    tr.add_argument("--epochs", type=int)
    tr.add_argument("--resume", action="store_true")
    tr.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="evaluate a checkpoint")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--dataset", required=True)
    ev.add_argument("--out", required=True)
    ev.add_argument("--split", default="test")
    ev.add_argument("--threshold", type=float, default=0.5)
    ev.set_defaults(func=cmd_eval)

    ex = sub.add_parser("export-embeddings",
                        help="dump eval-mode embeddings to CSV")
    ex.add_argument("--checkpoint", required=True)
    ex.add_argument("--dataset", required=True)
    ex.add_argument("--out", required=True)
    ex.add_argument("--split", default="test")
    ex.set_defaults(func=cmd_export_embeddings)

    rep = sub.add_parser("report", help="merge metrics from finished runs")
    rep.add_argument("--runs", nargs="+", required=True)
    rep.add_argument("--out")
    rep.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    from .util import tune_performance
    tune_performance()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NanLossError as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return EXIT_NAN
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
