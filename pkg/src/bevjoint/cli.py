"""Command-line entry points: train, eval, bench, ablate, gen-data, export-occ.

Exit codes: 0 success, 1 runtime failure, 2 config error, 3 data error.
UDO_THREADS caps numpy/BLAS worker threads and the optional parallel splat.
"""

import argparse
import logging
import os
import sys

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2
EXIT_DATA = 3


def _apply_thread_cap():
    cap = os.environ.get("UDO_THREADS")
    if cap:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
            os.environ.setdefault(var, cap)
    return int(cap) if cap else 0


def build_parser():
    p = argparse.ArgumentParser(prog="bevjoint",
                                description="joint BEV detection + occupancy engine")
    sub = p.add_subparsers(dest="verb", required=True)

    def common(sp, checkpoint=False, dataset=False, out=False):
        sp.add_argument("--config", required=True, help="flat text config file")
        sp.add_argument("--seed", type=int, default=None, help="override config seed")
        if checkpoint:
            sp.add_argument("--checkpoint", required=True)
        if dataset:
            sp.add_argument("--dataset", default=None)
        if out:
            sp.add_argument("--out", default=None)

    sp = sub.add_parser("train", help="train per the config; writes checkpoints and logs")
    common(sp, dataset=True, out=True)
    sp.add_argument("--eval-dataset", default=None)

    sp = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    common(sp, checkpoint=True, dataset=True, out=True)

    sp = sub.add_parser("bench", help="per-stage latency over graft variants")
    common(sp, out=True)
    sp.add_argument("--reps", type=int, default=50)
    sp.add_argument("--warmup", type=int, default=5)
    sp.add_argument("--parallel-splat", action="store_true",
                    help="partition lift-splat across worker threads")

    sp = sub.add_parser("ablate", help="run the configured sweep")
    common(sp, dataset=True, out=True)
    sp.add_argument("--eval-dataset", default=None)

    sp = sub.add_parser("gen-data", help="generate a synthetic dataset file")
    common(sp, out=True)
    sp.add_argument("--samples", type=int, default=None)
    sp.add_argument("--start", type=int, default=0,
                    help="first sample index (distinct eval splits)")

    sp = sub.add_parser("export-occ", help="write per-z-slice PGMs and voxel counts")
    common(sp, checkpoint=True, dataset=True, out=True)
    sp.add_argument("--sample", type=int, default=0)
    return p


def main(argv=None):
    workers = _apply_thread_cap()
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")

    from .checkpoint import CheckpointDigestMismatch, CheckpointError
    from .dataset_io import DataFormatError
    from .tensor import ConfigurationError, DataError

    try:
        return _dispatch(args, workers)
    except ConfigurationError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataFormatError, DataError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except CheckpointError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except FileNotFoundError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except Exception as e:  # anything else is a runtime failure
        logging.getLogger(__name__).exception("runtime failure")
        print(f"runtime failure: {e}", file=sys.stderr)
        return EXIT_RUNTIME


def _dispatch(args, workers):
    from . import config as config_mod

    cfg = config_mod.load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_train(seed=args.seed)
    handler = {
        "train": _cmd_train,
        "eval": _cmd_eval,
        "bench": _cmd_bench,
        "ablate": _cmd_ablate,
        "gen-data": _cmd_gen_data,
        "export-occ": _cmd_export_occ,
    }[args.verb]
    return handler(args, cfg, workers)


def _load_samples(path, stride):
    from .dataset_io import read_dataset

    return read_dataset(path, feature_stride=stride)


def _cmd_gen_data(args, cfg, workers):
    from dataclasses import replace

    from .dataset_io import write_dataset
    from .synth import build_dataset_samples

    data_cfg = cfg.data
    if args.samples is not None:
        data_cfg = replace(data_cfg, samples=args.samples)
    if args.seed is not None:
        data_cfg = replace(data_cfg, seed=args.seed)
    out = args.out or data_cfg.train_path
    if not out:
        from .tensor import ConfigurationError

        raise ConfigurationError("gen-data: need --out or data.train_path")
    samples = build_dataset_samples(data_cfg, image_size=cfg.model.image_size,
                                    stride=cfg.model.feature_stride,
                                    image_channels=cfg.model.image_channels,
                                    start=args.start)
    n = write_dataset(samples, out)
    print(f"wrote {len(samples)} samples ({n} bytes) to {out}")
    return EXIT_OK


def _cmd_train(args, cfg, workers):
    import numpy as np

    from .checkpoint import save_checkpoint
    from .evaluate import evaluate_model
    from .metrics import render_detection_report, render_miou_table
    from .tensor import ConfigurationError
    from .train import Trainer

    train_path = args.dataset or cfg.data.train_path
    if not train_path:
        raise ConfigurationError("train: need --dataset or data.train_path")
    samples = _load_samples(train_path, cfg.model.feature_stride)
    eval_path = getattr(args, "eval_dataset", None) or cfg.data.eval_path
    if eval_path:
        eval_samples = _load_samples(eval_path, cfg.model.feature_stride)
    else:
        held = max(1, len(samples) // 8)
        eval_samples, samples = samples[-held:], samples[:-held]

    out_dir = args.out or "."
    os.makedirs(out_dir, exist_ok=True)
    log_path = os.path.join(out_dir, "steps.log")
    trainer = Trainer(cfg)
    digest = cfg.digest()

    epoch_counter = {"n": 0}
    with open(log_path, "w", encoding="utf-8") as log_fh:
        def on_report(report):
            log_fh.write(report.line() + "\n")

        tc = cfg.train
        if tc.steps > 0:
            trainer.fit(samples, on_report=on_report)
            save_checkpoint(trainer.model, digest,
                            os.path.join(out_dir, "checkpoint_final.udow"))
        else:
            per_epoch = cfg.with_train(epochs=1, steps=0)
            for epoch in range(tc.epochs):
                trainer.cfg = per_epoch
                trainer.fit(samples, on_report=on_report)
                epoch_counter["n"] += 1
                save_checkpoint(trainer.model, digest,
                                os.path.join(out_dir, f"checkpoint_epoch{epoch + 1}.udow"))
            save_checkpoint(trainer.model, digest,
                            os.path.join(out_dir, "checkpoint_final.udow"))

    metrics = evaluate_model(trainer.model, eval_samples, mode=cfg.train.mode,
                             batch_size=cfg.train.batch_size, workers=workers or 1)
    report_lines = [f"mode = {cfg.train.mode}", f"eval_samples = {len(eval_samples)}"]
    if "miou" in metrics:
        report_lines.append(render_miou_table(metrics["miou_per_class"], metrics["miou"]))
    if "detection" in metrics:
        report_lines.append(render_detection_report(metrics["detection"]))
    report = "\n".join(report_lines)
    with open(os.path.join(out_dir, "metrics.txt"), "w", encoding="utf-8") as fh:
        fh.write(report + "\n")
    print(report)
    return EXIT_OK


def _cmd_eval(args, cfg, workers):
    from .checkpoint import load_checkpoint
    from .evaluate import evaluate_model
    from .metrics import render_detection_report, render_miou_table
    from .network import PerceptionModel

    samples = _load_samples(args.dataset, cfg.model.feature_stride) if args.dataset else []
    model = PerceptionModel(cfg.model, seed=cfg.train.seed)
    load_checkpoint(model, cfg.digest(), args.checkpoint)
    mode = cfg.train.mode
    lines = [f"checkpoint = {args.checkpoint}", f"mode = {mode}",
             f"samples = {len(samples)}"]
    if not samples:
        lines.append("empty dataset: nothing to evaluate")
        print("\n".join(lines))
        return EXIT_OK
    metrics = evaluate_model(model, samples, mode=mode,
                             batch_size=cfg.train.batch_size, workers=workers or 1)
    if "miou" in metrics:
        lines.append(render_miou_table(metrics["miou_per_class"], metrics["miou"]))
    else:
        lines.append("occupancy: head disabled")
    if "detection" in metrics:
        lines.append(render_detection_report(metrics["detection"]))
    else:
        lines.append("detection: head disabled")
    report = "\n".join(lines)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(report + "\n")
    print(report)
    return EXIT_OK


def _cmd_bench(args, cfg, workers):
    from .bench import render_bench_table, run_graft_bench

    splat_workers = 1
    if args.parallel_splat:
        splat_workers = max(2, workers or 2)
    results = run_graft_bench(cfg, reps=args.reps, warmup=args.warmup,
                              seed=cfg.train.seed, workers=splat_workers)
    table = render_bench_table(results)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(table + "\n")
    print(table)
    return EXIT_OK


def _cmd_ablate(args, cfg, workers):
    from .ablate import render_ablation_table, run_ablation
    from .tensor import ConfigurationError

    train_path = args.dataset or cfg.data.train_path
    eval_path = getattr(args, "eval_dataset", None) or cfg.data.eval_path
    if not train_path:
        raise ConfigurationError("ablate: need --dataset or data.train_path")
    samples = _load_samples(train_path, cfg.model.feature_stride)
    if eval_path:
        eval_samples = _load_samples(eval_path, cfg.model.feature_stride)
    else:
        held = max(1, len(samples) // 8)
        eval_samples, samples = samples[-held:], samples[:-held]
    rows = run_ablation(cfg, samples, eval_samples)
    table = render_ablation_table(rows)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(table + "\n")
    print(table)
    return EXIT_OK


def _cmd_export_occ(args, cfg, workers):
    import csv

    import numpy as np

    from .checkpoint import load_checkpoint
    from .evaluate import predict
    from .network import PerceptionModel
    from .palette import OCC_CLASS_NAMES

    samples = _load_samples(args.dataset, cfg.model.feature_stride)
    if not 0 <= args.sample < len(samples):
        from .dataset_io import DataFormatError

        raise DataFormatError(f"sample index {args.sample} outside dataset "
                              f"of {len(samples)} records")
    model = PerceptionModel(cfg.model, seed=cfg.train.seed)
    load_checkpoint(model, cfg.digest(), args.checkpoint)
    _, occ_grids = predict(model, [samples[args.sample]], mode="occOnly",
                           batch_size=1)
    grid = occ_grids[0]  # (X, Y, Z)
    out_dir = args.out or "."
    os.makedirs(out_dir, exist_ok=True)
    for z in range(grid.shape[2]):
        _write_pgm(os.path.join(out_dir, f"occ_z{z:02d}.pgm"), grid[:, :, z].T)
    counts = np.bincount(grid.reshape(-1), minlength=len(OCC_CLASS_NAMES))
    csv_path = os.path.join(out_dir, "class_counts.csv")
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class_id", "class_name", "voxels"])
        for cid, name in enumerate(OCC_CLASS_NAMES):
            writer.writerow([cid, name, int(counts[cid])])
    print(f"wrote {grid.shape[2]} PGM slices and {csv_path}")
    return EXIT_OK


def _write_pgm(path, img):
    import numpy as np

    arr = np.asarray(img, dtype=np.uint8)
    header = f"P5 {arr.shape[1]} {arr.shape[0]} 255\n".encode()
    with open(path, "wb") as fh:
        fh.write(header + arr.tobytes())


if __name__ == "__main__":
    sys.exit(main())
