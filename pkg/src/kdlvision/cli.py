"""Command-line entry point: ``kdlvision <command> [flags]``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 training divergence.
Diagnostics go to stderr prefixed with ``error:`` or ``warning:``.
"""

import argparse
import csv
import dataclasses
import logging
import os
import statistics
import sys
from pathlib import Path

import numpy as np

from . import _kernels
from .checkpoint import read_config, save_parameters, sidecar_path, write_config
from .dataset import (
    Preprocessor,
    SyntheticSpec,
    class_names,
    generate_synthetic,
    load_manifest,
    make_batches,
    num_classes,
    select_split,
)
from .errors import ClassOutOfRange, DataError, Diverged, EmptySplit, KdlError
from .evaluation import confusion, per_class_report, render_confusion, write_report_csv
from .explain import grad_cam, render_heatmap
from .imageproc import Image, preprocess_image, read_netpbm, resize_nearest, to_grayscale, write_olt
from .model import EXPERT_WIDTHS, FUSION_B_INPUTS, ModelConfig, build_baseline, build_kdl, load_expert, load_model
from .model import pretrain_expert
from .training import BackboneCache, TrainConfig, evaluate_accuracy, train

log = logging.getLogger("kdlvision")

PRETEXT_SEED = 1007
PRETEXT_PER_CLASS = 100
PRETRAIN_EPOCHS = 8
# pretext classes sit halfway between the benchmark's orientations
PRETEXT_ORIENTATION_OFFSET = 0.5


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _csv_list(text):
    return [t for t in text.split(",") if t]


def _int_list(text):
    try:
        return [int(t) for t in _csv_list(text)]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


# ------------------------------------------------------------------ configuration

def load_settings(path, overrides):
    """Merge a flat key=value config file with flag overrides.

    Returns ``(TrainConfig, model keys dict)``; unknown keys are usage errors.
    """
    raw = read_config(path) if path else {}
    raw.update({k: str(v) for k, v in overrides.items() if v is not None})
    train_keys = {f.name for f in dataclasses.fields(TrainConfig)}
    model_keys = set(ModelConfig.keys()) - {"num_classes"}
    unknown = sorted(set(raw) - train_keys - model_keys - {"pretrain_epochs", "pretext_per_class"})
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(unknown)}")
    try:
        tcfg = TrainConfig.from_mapping({k: v for k, v in raw.items() if k in train_keys})
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad training config: {exc}") from None
    extra = {k: raw[k] for k in ("pretrain_epochs", "pretext_per_class") if k in raw}
    return tcfg, {k: v for k, v in raw.items() if k in model_keys}, extra


def model_config(model_keys, n_classes):
    try:
        return ModelConfig.from_mapping({**model_keys, "num_classes": n_classes})
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad model config: {exc}") from None


def set_threads(n):
    n = n or os.cpu_count() or 1
    if _kernels.USE_NUMBA:
        import numba

        numba.set_num_threads(max(1, min(n, numba.config.NUMBA_NUM_THREADS)))
    return n


def _load_records(manifest):
    records = load_manifest(manifest)
    if not records:
        raise EmptySplit(f"{manifest}: manifest has no records")
    return records


def _preprocessor(manifest, size, args):
    return Preprocessor(Path(manifest).parent, size, getattr(args, "cache_dir", None), args.threads)


def _experts_for(paths, n_classes, seed):
    experts = []
    for i, p in enumerate(paths):
        e = load_expert(p)
        experts.append(e.reset_head(n_classes, np.random.default_rng([seed, 10 + i])))
    return experts


def _build(arch, mcfg, expert_paths, seed):
    if arch == "baseline":
        return build_baseline(mcfg, seed)
    if not expert_paths or len(expert_paths) != 3:
        raise UsageError("--arch kdl needs --experts with exactly three checkpoints")
    return build_kdl(mcfg, _experts_for(expert_paths, mcfg.num_classes, seed), seed)


def _write_run_config(path, tcfg, mcfg):
    write_config(path, {**tcfg.to_mapping(), **{k: v for k, v in dataclasses.asdict(mcfg).items()}})


def _train_one(arch, records, pp, tcfg, mcfg, expert_paths, out_dir):
    tr, va = select_split(records, "train"), select_split(records, "val")
    if not tr:
        raise EmptySplit("manifest has no train records")
    model = _build(arch, mcfg, expert_paths, tcfg.seed)
    model.class_names = class_names(records)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_run_config(out_dir / "run.cfg", tcfg, mcfg)
    result = train(model, tr, va, tcfg, pp, out_dir=out_dir)
    return model, result


# ------------------------------------------------------------------ commands

def cmd_synth(args):
    spec = SyntheticSpec(
        num_classes=args.classes,
        images_per_class=args.per_class,
        image_size=args.size,
        seed=args.seed,
        noise_sigma=args.noise_sigma,
    )
    manifest = generate_synthetic(spec, args.out)
    print(manifest)
    return 0


def cmd_preprocess(args):
    records = _load_records(args.manifest)
    pp = Preprocessor(Path(args.manifest).parent, args.size, None, args.threads)
    out = Path(args.out_cache)

    def one(r):
        target = out / Path(r.relative_path).with_suffix(".olt")
        target.parent.mkdir(parents=True, exist_ok=True)
        write_olt(target, pp.compute(r))

    if args.threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(args.threads) as pool:
            list(pool.map(one, records))
    else:
        for r in records:
            one(r)
    print(f"wrote {len(records)} samples to {out}")
    return 0


def cmd_pretrain(args):
    records = _load_records(args.pretext_manifest)
    tcfg, model_keys, _ = load_settings(args.config, {"seed": args.seed, "lr": args.lr, "batch_size": args.batch_size})
    size = int(model_keys.get("image_size", 64))
    pp = _preprocessor(args.pretext_manifest, size, args)
    tr, va = select_split(records, "train"), select_split(records, "val")
    if not tr:
        raise EmptySplit("pretext manifest has no train records")
    expert = pretrain_expert(args.variant, tr, va, pp, args.epochs, num_classes(records), config=tcfg, seed=tcfg.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_parameters(out, expert.parameters())
    write_config(sidecar_path(out), {**expert.config_dict(), "pretext_accuracy": repr(expert.pretext_accuracy)})
    print(f"expert {args.variant}: pretext val accuracy {expert.pretext_accuracy:.4f} -> {out}")
    return 0


def cmd_train(args):
    records = _load_records(args.manifest)
    tcfg, model_keys, _ = load_settings(
        args.config,
        {"seed": args.seed, "epochs": args.epochs, "lr": args.lr, "batch_size": args.batch_size,
         "fusion_b_input": args.fusion_b_input},
    )
    mcfg = model_config(model_keys, num_classes(records))
    pp = _preprocessor(args.manifest, mcfg.image_size, args)
    pp.load_many([r for r in records if r.split in ("train", "val")])
    _, result = _train_one(args.arch, records, pp, tcfg, mcfg, args.experts, Path(args.out_dir))
    last = result.curve.records[-1]
    print(
        f"{args.arch}: final train_loss {last.train_loss:.4f} val_accuracy {last.val_accuracy:.4f} "
        f"(best {result.best_val_accuracy:.4f} at epoch {result.best_epoch})"
    )
    return 0


def cmd_eval(args):
    model = load_model(args.checkpoint)
    records = _load_records(args.manifest)
    split = select_split(records, args.split)
    if not split:
        raise EmptySplit(f"split {args.split!r} is empty")
    size = model.config.image_size
    pp = _preprocessor(args.manifest, size, args)
    pp.load_many(split)
    c = model.config.num_classes
    if num_classes(records) > c:
        raise DataError(f"manifest has {num_classes(records)} classes, checkpoint has {c}")
    names = model.class_names or class_names(records)
    cache = BackboneCache(model, pp) if hasattr(model, "backbone_features") else None
    if cache:
        cache.ensure(split)
    cm = confusion(model, make_batches(split, 64, None, 0, pp), c, names, cache)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    render_confusion(cm, out / "confusion.ppm", out / "confusion.csv")
    write_report_csv(per_class_report(cm), out / "report.csv")
    print(f"{args.split} accuracy {cm.accuracy():.4f} over {cm.total} samples")
    return 0


def _parse_class(text):
    if text in ("pred", "true"):
        return text
    try:
        return int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"--class must be pred, true or an integer, got {text!r}") from None


def cmd_gradcam(args):
    model = load_model(args.checkpoint)
    size = model.config.image_size
    label = None
    if args.image:
        img = read_netpbm(args.image)
    else:
        if args.manifest is None or args.index is None:
            raise UsageError("gradcam needs --image or both --manifest and --index")
        records = _load_records(args.manifest)
        if not 0 <= args.index < len(records):
            raise UsageError(f"--index {args.index} outside [0, {len(records)})")
        rec = records[args.index]
        label = rec.class_id
        img = read_netpbm(Path(args.manifest).parent / rec.relative_path)
    if args.target == "true":
        if label is None:
            raise UsageError("--class true needs --manifest/--index")
        target = label
    else:
        target = None if args.target == "pred" else args.target
    sample = preprocess_image(img, size)
    hm = grad_cam(model, sample, target)
    gray = to_grayscale(img) if img.channels == 3 else img
    if (gray.width, gray.height) != (size, size):
        gray = resize_nearest(gray, size, size)
    gray_path, color_path = render_heatmap(hm, gray, args.out_prefix)
    print(f"class {hm.target_class}: wrote {gray_path} and {color_path}")
    return 0


COMPARE_HEADER = ["seed", "arch", "epoch", "train_loss", "val_accuracy", "wall_seconds"]
SUMMARY_HEADER = ["seed", "arch", "final_val_accuracy", "best_val_accuracy", "test_accuracy", "wall_seconds"]


def pretrain_default_experts(out_dir, image_size, seed, epochs, per_class, threads=None):
    """Generate a pretext texture set and pretrain variants A, B and C on it.

    The pretext classes are orientations the benchmark never uses, so the
    experts transfer texture features but not the target label space.
    """
    spec = SyntheticSpec(num_classes=10, images_per_class=per_class, image_size=image_size, seed=seed,
                         orientation_offset=PRETEXT_ORIENTATION_OFFSET)
    manifest = generate_synthetic(spec, out_dir / "pretext")
    records = load_manifest(manifest)
    pp = Preprocessor(manifest.parent, image_size, None, threads)
    tr, va = select_split(records, "train"), select_split(records, "val")
    paths = []
    for variant in EXPERT_WIDTHS:
        expert = pretrain_expert(variant, tr, va, pp, epochs, spec.num_classes, seed=seed)
        path = out_dir / f"expert_{variant}.kdlw"
        save_parameters(path, expert.parameters())
        write_config(sidecar_path(path), {**expert.config_dict(), "pretext_accuracy": repr(expert.pretext_accuracy)})
        log.info("expert %s pretext accuracy %.4f", variant, expert.pretext_accuracy)
        paths.append(path)
    return paths


def run_compare(manifest, tcfg, model_keys, seeds, out_dir, expert_paths=None, pretrain_epochs=PRETRAIN_EPOCHS,
                pretext_per_class=PRETEXT_PER_CLASS, threads=None):
    """Train kdl and baseline under each seed; returns the summary rows."""
    records = _load_records(manifest)
    mcfg = model_config(model_keys, num_classes(records))
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if not expert_paths:
        expert_paths = pretrain_default_experts(
            out_dir / "experts", mcfg.image_size, PRETEXT_SEED, pretrain_epochs, pretext_per_class, threads
        )
    pp = Preprocessor(Path(manifest).parent, mcfg.image_size, None, threads)
    pp.load_many(records)
    test = select_split(records, "test")
    rows, summary = [], []
    for seed in seeds:
        cfg = dataclasses.replace(tcfg, seed=seed)
        for arch in ("kdl", "baseline"):
            model, result = _train_one(arch, records, pp, cfg, mcfg, expert_paths, out_dir / f"{arch}_seed{seed}")
            for r in result.curve:
                rows.append([seed, arch, r.epoch, repr(r.train_loss), repr(r.val_accuracy), f"{r.wall_seconds:.3f}"])
            test_acc = ""
            if test:
                cache = BackboneCache(model, pp) if hasattr(model, "backbone_features") else None
                if cache:
                    cache.ensure(test)
                test_acc = repr(evaluate_accuracy(model, make_batches(test, 64, None, 0, pp), cache))
            last = result.curve.records[-1]
            summary.append([seed, arch, repr(last.val_accuracy), repr(result.best_val_accuracy), test_acc,
                            f"{last.wall_seconds:.3f}"])
            log.info("seed %d %s final val %.4f", seed, arch, last.val_accuracy)
    for name, header, body in (("compare.csv", COMPARE_HEADER, rows), ("summary.csv", SUMMARY_HEADER, summary)):
        with open(out_dir / name, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(body)
    return summary


def cmd_compare(args):
    tcfg, model_keys, extra = load_settings(args.config, {"epochs": args.epochs})
    summary = run_compare(
        args.manifest, tcfg, model_keys, args.seeds, args.out_dir, args.experts,
        int(extra.get("pretrain_epochs", PRETRAIN_EPOCHS)), int(extra.get("pretext_per_class", PRETEXT_PER_CLASS)),
        args.threads,
    )
    for arch in ("kdl", "baseline"):
        finals = [float(r[2]) for r in summary if r[1] == arch]
        print(f"{arch}: median final val accuracy {statistics.median(finals):.4f} over seeds {args.seeds}")
    return 0


# ------------------------------------------------------------------ parser

def build_parser():
    p = _Parser(prog="kdlvision", description="Knowledge-driven texture classification toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--threads", type=int, default=None, help="cap on preprocessing threads")
        return sp

    s = common(sub.add_parser("synth", help="generate the synthetic texture dataset"))
    s.add_argument("--classes", type=int, default=10)
    s.add_argument("--per-class", type=int, default=150)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--seed", type=int, default=7)
    s.add_argument("--noise-sigma", type=float, default=SyntheticSpec.noise_sigma)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = common(sub.add_parser("preprocess", help="write .olt sample caches"))
    s.add_argument("--manifest", required=True)
    s.add_argument("--out-cache", required=True)
    s.add_argument("--size", type=int, default=64)
    s.set_defaults(func=cmd_preprocess)

    s = common(sub.add_parser("pretrain", help="pretrain one expert on a pretext set"))
    s.add_argument("--variant", choices=sorted(EXPERT_WIDTHS), required=True)
    s.add_argument("--pretext-manifest", required=True)
    s.add_argument("--epochs", type=int, default=PRETRAIN_EPOCHS)
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--cache-dir")
    s.set_defaults(func=cmd_pretrain)

    s = common(sub.add_parser("train", help="train a kdl or baseline model"))
    s.add_argument("--manifest", required=True)
    s.add_argument("--experts", type=_csv_list)
    s.add_argument("--config")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--arch", choices=("kdl", "baseline"), default="kdl")
    s.add_argument("--fusion-b-input", choices=FUSION_B_INPUTS)
    s.add_argument("--seed", type=int)
    s.add_argument("--epochs", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--cache-dir")
    s.set_defaults(func=cmd_train)

    s = common(sub.add_parser("eval", help="confusion matrix and per-class report"))
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--split", choices=("train", "val", "test"), default="test")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--cache-dir")
    s.set_defaults(func=cmd_eval)

    s = common(sub.add_parser("gradcam", help="Grad-CAM heatmap for one image"))
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--image")
    s.add_argument("--manifest")
    s.add_argument("--index", type=int)
    s.add_argument("--class", dest="target", type=_parse_class, default="pred")
    s.add_argument("--out-prefix", required=True)
    s.set_defaults(func=cmd_gradcam)

    s = common(sub.add_parser("compare", help="kdl vs baseline over several seeds"))
    s.add_argument("--manifest", required=True)
    s.add_argument("--config")
    s.add_argument("--seeds", type=_int_list, default=[0, 1, 2])
    s.add_argument("--experts", type=_csv_list)
    s.add_argument("--epochs", type=int)
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_compare)
    return p


class _PrefixFormatter(logging.Formatter):
    """One line per record, prefixed ``error:``/``warning:``/``info:``."""

    def format(self, record):
        msg = record.getMessage().strip().splitlines()
        return f"{record.levelname.lower()}: {msg[0] if msg else ''}"


def _fail(code, message):
    print(f"error: {message}", file=sys.stderr)
    return code


def run(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        return _fail(1, exc)
    except SystemExit as exc:  # --help
        return exc.code or 0
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(_PrefixFormatter())
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, handlers=[handler], force=True)
    logging.captureWarnings(True)
    args.threads = set_threads(args.threads)
    try:
        return args.func(args)
    except UsageError as exc:
        return _fail(1, exc)
    except ClassOutOfRange as exc:
        return _fail(1, exc)
    except Diverged as exc:
        return _fail(3, exc)
    except (DataError, KdlError, OSError, ValueError) as exc:
        return _fail(2, exc)


def main():
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
