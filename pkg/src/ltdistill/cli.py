"""Command-line interface.

Subcommands mirror the pipeline stages; `run` executes the whole chain with
provenance caching, `report` renders summaries. Exit codes: 0 success,
2 configuration error, 3 stage failure.
"""

from __future__ import annotations

import argparse
import contextlib
import sys

import numpy as np

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_STAGE = 3


def _add_config(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, help="flat key=value configuration file")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="ltdistill",
        description="Distill a long-tailed image dataset into a small class-balanced synthetic set",
    )
    p.add_argument(
        "--deterministic",
        action="store_true",
        help="single-threaded bit-exact mode",
    )
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("gen-blobs", help="render the balanced synthetic source dataset")
    _add_config(sp)
    sp.add_argument("--out", required=True, help="output dataset .bin")

    sp = sub.add_parser("make-lt", help="subsample a balanced dataset into a long-tailed one")
    _add_config(sp)
    sp.add_argument("--source", required=True, help="balanced source dataset .bin")
    sp.add_argument("--out", required=True, help="output long-tailed dataset .bin")

    sp = sub.add_parser("train-expert", help="train the observer or teacher expert")
    _add_config(sp)
    sp.add_argument("--dataset", required=True, help="training dataset .bin")
    sp.add_argument("--role", choices=("observer", "teacher"), required=True)
    sp.add_argument("--out", required=True, help="output checkpoint file")
    sp.add_argument("--log", default=None, help="optional training-log CSV path")

    sp = sub.add_parser("recalibrate", help="rebuild fair BN statistics for the observer")
    _add_config(sp)
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--checkpoint", required=True, help="observer checkpoint")
    sp.add_argument("--out", required=True, help="output stats bundle .bin")

    sp = sub.add_parser("init", help="confidence-guided initialization of distilled images")
    _add_config(sp)
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--teacher", required=True, help="teacher checkpoint")
    sp.add_argument("--out-dir", required=True, help="directory for images/labels/selection")

    sp = sub.add_parser("recover", help="optimize pixels against the statistics bundle")
    _add_config(sp)
    sp.add_argument("--init-dir", required=True, help="directory from the init stage")
    sp.add_argument("--observer", required=True, help="observer checkpoint")
    sp.add_argument("--stats", required=True, help="statistics bundle .bin")
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--log", default=None, help="optional alignment-report CSV path")

    sp = sub.add_parser("relabel", help="attach teacher soft labels to recovered images")
    _add_config(sp)
    sp.add_argument("--images-dir", required=True, help="directory with recovered images")
    sp.add_argument("--teacher", required=True)
    sp.add_argument("--out-dir", required=True, help="distilled artifact directory")

    sp = sub.add_parser("eval", help="train students on a distilled set and evaluate")
    _add_config(sp)
    sp.add_argument("--distilled", required=True, help="distilled artifact directory")
    sp.add_argument("--test", required=True, help="balanced test dataset .bin")
    sp.add_argument("--out", required=True, help="output results CSV")

    sp = sub.add_parser("run", help="run the full pipeline with caching")
    _add_config(sp)
    sp.add_argument("--out", required=True, help="artifact directory")

    sp = sub.add_parser("report", help="render summary.csv, per_class.csv and the chart")
    sp.add_argument("--artifacts", required=True, help="pipeline artifact directory")
    sp.add_argument("--out-dir", default=None, help="where to write summaries (default: artifacts)")

    return p


def _dispatch(args) -> int:
    from . import pipeline as pl
    from .data import load_dataset, make_long_tail, save_dataset
    from .experts import ExpertCheckpoint, train_expert
    from .recalib import load_bundle, recalibrate, save_bundle
    from .recovery import recover
    from .students import (
        load_distilled,
        load_image_set,
        relabel,
        save_distilled,
        save_image_set,
        DistilledSet,
    )

    if args.command == "report":
        paths = pl.render_report(args.artifacts, args.out_dir)
        for name, path in paths.items():
            print(f"{name}: {path}")
        return EXIT_OK

    config = pl.PipelineConfig.from_file(args.config)

    if args.command == "gen-blobs":
        ds = pl.build_source_dataset(config)
        save_dataset(args.out, ds)
        print(f"wrote {args.out} ({ds.images.shape[0]} samples)")
    elif args.command == "make-lt":
        source = load_dataset(args.source)
        ds = make_long_tail(source, config.longtail_spec())
        save_dataset(args.out, ds)
        print(f"wrote {args.out} with class counts {ds.class_counts().tolist()}")
    elif args.command == "train-expert":
        ds = load_dataset(args.dataset)
        ck = train_expert(ds, config.model_spec(), config.expert_config(args.role), log_path=args.log)
        ck.meta["role"] = args.role
        digest = ck.save(args.out)
        print(f"wrote {args.out} ({digest[:12]})")
    elif args.command == "recalibrate":
        ds = load_dataset(args.dataset)
        observer = ExpertCheckpoint.load(args.checkpoint)
        bundle = recalibrate(observer, ds, config["recalib.batch_size"])
        save_bundle(args.out, bundle)
        print(f"wrote {args.out}")
    elif args.command == "init":
        ds = load_dataset(args.dataset)
        teacher = ExpertCheckpoint.load(args.teacher)
        images, labels, selections = pl.run_init_stage(config, ds, teacher)
        save_image_set(args.out_dir, images, labels)
        if selections is not None:
            from .initsel import write_selection_csv
            import os

            write_selection_csv(os.path.join(args.out_dir, "selection.csv"), selections)
        print(f"wrote {args.out_dir} ({images.shape[0]} images)")
    elif args.command == "recover":
        observer = ExpertCheckpoint.load(args.observer)
        bundle = load_bundle(args.stats)
        images, labels = load_image_set(args.init_dir)
        recovered, report = recover(images, observer, bundle, config.recovery_config(), labels=labels)
        save_image_set(args.out_dir, recovered, labels)
        if args.log:
            report.to_csv(args.log)
        print(
            f"wrote {args.out_dir} (loss {report.initial_loss:.4f} -> {report.final_loss:.4f})"
        )
    elif args.command == "relabel":
        teacher = ExpertCheckpoint.load(args.teacher)
        images, labels = load_image_set(args.images_dir)
        soft = relabel(teacher, images)
        distilled = DistilledSet(
            images=images,
            hard_labels=labels,
            soft_labels=soft,
            ipc=config["distill.ipc"],
            provenance={"teacher": teacher.content_hash()},
        )
        save_distilled(args.out_dir, distilled)
        print(f"wrote {args.out_dir}")
    elif args.command == "eval":
        distilled = load_distilled(args.distilled)
        test = load_dataset(args.test)
        reports = pl.run_eval_stage(config, distilled, test)
        pl.write_eval_csv(args.out, reports)
        balanced = np.mean([r.balanced for r in reports])
        print(f"wrote {args.out} (mean balanced accuracy {balanced:.4f})")
    elif args.command == "run":
        def log(msg):
            print(msg, flush=True)

        pl.run_pipeline(config, args.out, deterministic=args.deterministic, log=log)
        print(f"pipeline complete: {args.out}")
    else:  # pragma: no cover
        raise AssertionError(args.command)
    return EXIT_OK


def main(argv=None) -> int:
    from .pipeline import ConfigError, StageError

    args = build_parser().parse_args(argv)
    limiter = contextlib.nullcontext()
    if args.deterministic:
        from threadpoolctl import threadpool_limits

        limiter = threadpool_limits(limits=1)
    try:
        with limiter:
            return _dispatch(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        print(f"stage failure: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
