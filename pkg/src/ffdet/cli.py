"""``ffdet`` command line: synth, train, detect, eval, ablate, gradcheck.

Exit codes: 0 ok, 1 usage error, 2 data/input error, 3 numeric failure.
Flags override config-file fields, which override built-in defaults.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .checkpoint import Checkpoint, CheckpointError
from .config import ConfigError, RunConfig, dumps, load_config
from .data import DataError, SynthConfig, load_dataset, load_image, synth_generate

log = logging.getLogger("ffdet")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


class _Help(argparse.ArgumentDefaultsHelpFormatter):
    """Append defaults, except where the help text already states one."""

    def _get_help_string(self, action):
        text = action.help or ""
        if "default" in text or not action.option_strings or action.default is argparse.SUPPRESS:
            return text
        if action.required:
            return text + " (required)"
        return text + " (default: %(default)s)"


def _int_list(text: str) -> tuple[int, ...]:
    try:
        values = tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values:
        raise argparse.ArgumentTypeError("empty list")
    return values


def _str_list(text: str) -> tuple[str, ...]:
    values = tuple(v.strip() for v in text.split(",") if v.strip())
    if not values:
        raise argparse.ArgumentTypeError("empty list")
    return values


def _write_config(cfg: RunConfig, path: Path) -> Path:
    path.write_text(dumps(cfg) + "\n")
    return path


def _sidecar(path, suffix: str) -> Path:
    p = Path(path)
    return p.with_name(p.stem + suffix)


# ------------------------------------------------------------- config merge


def _add_train_overrides(p):
    d = RunConfig()
    g = p.add_argument_group("config overrides (flag > config file > default)")
    g.add_argument("--seed", type=int, help=f"training seed (default: config, else {d.train.seed})")
    g.add_argument("--epochs", type=int, help=f"epochs (default: config, else {d.train.epochs})")
    g.add_argument("--max-steps", type=int, help=f"step cap (default: config, else {d.train.max_steps})")
    g.add_argument("--batch-size", type=int, help=f"images per step (default: config, else {d.train.batch_size})")
    g.add_argument("--lr", type=float, help=f"base learning rate (default: config, else {d.train.base_lr})")
    g.add_argument("--lambda2", type=float, help=f"segmentation loss weight (default: config, else {d.loss.lambda2})")
    g.add_argument("--fusion", choices=("multiplicative", "additive"),
                   help=f"pyramid fusion (default: config, else {d.model.fusion})")
    g.add_argument("--augment", choices=("on", "off"), help="random crop augmentation (default: config, else on)")


def _add_detect_overrides(p):
    d = RunConfig().detect
    g = p.add_argument_group("detection overrides (flag > checkpoint config > default)")
    g.add_argument("--scales", type=_int_list, help=f"shorter-side test scales, comma separated (default: config, else {','.join(map(str, d.scales))})")
    g.add_argument("--score", type=float, help=f"score threshold before NMS (default: config, else {d.score_thresh})")
    g.add_argument("--nms", type=float, help=f"NMS IoU threshold (default: config, else {d.nms_thresh})")
    g.add_argument("--workers", type=int, default=1, help="images processed concurrently")


def _base_config(args) -> RunConfig:
    return load_config(args.config) if getattr(args, "config", None) else RunConfig()


def _apply_train_overrides(cfg: RunConfig, args) -> RunConfig:
    t = {k: v for k, v in {
        "seed": args.seed, "epochs": args.epochs, "max_steps": args.max_steps,
        "batch_size": args.batch_size, "base_lr": args.lr,
        "augment": None if args.augment is None else args.augment == "on",
    }.items() if v is not None}
    try:
        if t:
            cfg = cfg.replace(train=dataclasses.replace(cfg.train, **t))
        if args.lambda2 is not None:
            cfg = cfg.replace(loss=dataclasses.replace(cfg.loss, lambda2=args.lambda2))
        if args.fusion is not None:
            cfg = cfg.replace(model=dataclasses.replace(cfg.model, fusion=args.fusion))
    except ValueError as e:
        raise UsageError(str(e)) from e
    return cfg


def _check_detect_flags(args) -> None:
    if args.nms is not None and not 0.0 < args.nms < 1.0:
        raise UsageError("--nms must lie in (0, 1)")
    if args.workers < 1:
        raise UsageError("--workers must be >= 1")


def _apply_detect_overrides(cfg: RunConfig, args) -> RunConfig:
    _check_detect_flags(args)
    d = {k: v for k, v in {"scales": args.scales, "score_thresh": args.score, "nms_thresh": args.nms}.items()
         if v is not None}
    try:
        return cfg.replace(detect=dataclasses.replace(cfg.detect, **d)) if d else cfg
    except ValueError as e:
        raise UsageError(str(e)) from e


def _load_model(path):
    from .train import from_checkpoint

    try:
        return from_checkpoint(Checkpoint.load(path))
    except ValueError as e:  # config or tensor mismatch inside the file
        raise CheckpointError(f"{path}: {e}") from e


# ---------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    try:
        cfg = SynthConfig(n=args.n, seed=args.seed, occlusion=args.occlusion, image_size=args.size,
                          start=args.start, channels=args.channels, face_size=tuple(map(float, args.face_size)))
    except ValueError as e:
        raise UsageError(str(e)) from e
    out = synth_generate(cfg, args.out)
    print(f"wrote {cfg.n} images to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .train import loss_summary, to_checkpoint, train

    cfg = _apply_train_overrides(_base_config(args), args)
    samples = load_dataset(args.data)
    res = train(cfg, samples, log_path=args.log)
    to_checkpoint(res.model, cfg, res.step).save(args.out)
    if args.log:
        _write_config(cfg, _sidecar(args.log, ".config.json"))
    s = loss_summary(res.history)
    print(f"trained {res.step} steps in {res.seconds:.1f}s: loss {s['loss_initial']:.4f} -> {s['loss_final']:.4f}; "
          f"checkpoint {args.out}")
    return EXIT_OK


def cmd_detect(args) -> int:
    from .inference import detect_many

    _check_detect_flags(args)
    model, cfg = _load_model(args.ckpt)
    cfg = _apply_detect_overrides(cfg, args)
    images = [load_image(p) for p in args.image]
    d = cfg.detect
    results = detect_many(images, model, d.scales, d.score_thresh, d.nms_thresh, d.max_per_level, args.workers)
    lines = []
    for path, (boxes, scores) in zip(args.image, results):
        dets = [{"box": [float(v) for v in b], "score": float(s)} for b, s in zip(boxes, scores)]
        lines.append(json.dumps({"image": str(path), "detections": dets}))
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
        _write_config(cfg, _sidecar(args.out, ".config.json"))
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_eval(args) -> int:
    from .evaluation import evaluate
    from .inference import detect_many
    from .report import plot_pr_curve, write_pr_csv

    _check_detect_flags(args)
    model, cfg = _load_model(args.ckpt)
    cfg = _apply_detect_overrides(cfg, args)
    samples = load_dataset(args.data)
    d = cfg.detect
    dets = detect_many([s.image for s in samples], model, d.scales, d.score_thresh, d.nms_thresh,
                       d.max_per_level, args.workers)
    rep = evaluate(dets, [s.boxes for s in samples])
    report = Path(args.report)
    body = {"ap": rep.ap, "ap_small": rep.ap_small, "ap_medium": rep.ap_medium, "ap_large": rep.ap_large,
            "iou_thresh": rep.iou_thresh, "n_images": len(samples), "n_det": rep.n_det, "n_gt": rep.n_gt,
            "n_gt_bucket": rep.n_gt_bucket, "pr_curve": rep.pr_curve, "config": cfg.to_dict()}
    report.write_text(json.dumps(body, indent=1, sort_keys=True) + "\n")
    write_pr_csv(rep, _sidecar(report, ".pr.csv"))
    plot_pr_curve(rep, _sidecar(report, ".pr.png"))
    print(f"AP@0.5 {rep.ap:.4f} (small {rep.ap_small:.4f}, medium {rep.ap_medium:.4f}, large {rep.ap_large:.4f}) "
          f"on {len(samples)} images -> {report}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .ablation import ablation_run, apply_variant, summarize, write_summary, write_table
    from .report import plot_ablation

    _check_detect_flags(args)
    cfg = _apply_train_overrides(_base_config(args), args)
    cfg = _apply_detect_overrides(cfg, args)
    for v in args.variants:
        try:
            apply_variant(cfg, v)
        except ConfigError as e:
            raise UsageError(str(e)) from e
    train_set = load_dataset(args.data)
    test_set = load_dataset(args.test) if args.test else train_set
    if not args.test:
        log.warning("no --test set given; evaluating on the training data")
    rows = ablation_run(cfg, args.variants, train_set, test_set, args.seeds, cache_dir=args.cache,
                        workers=args.workers)
    out = Path(args.out)
    write_table(rows, out)
    summary = summarize(rows)
    write_summary(summary, _sidecar(out, ".summary.csv"))
    plot_ablation(summary, _sidecar(out, ".png"))
    _write_config(cfg, _sidecar(out, ".config.json"))
    for s in summary:
        print(f"{s['variant']:>16}  AP {s['ap']:.4f}  small {s['ap_small']:.4f}  medium {s['ap_medium']:.4f}  "
              f"large {s['ap_large']:.4f}  ({s['seeds']} seeds)")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import TOLERANCE, run_suite

    seeds = (args.seed,) if args.seed is not None else (0, 1, 2, 3, 4)
    worst = run_suite(seeds)
    for name, err in worst.items():
        print(f"{name:<18} {err:.3e}  {'ok' if err < TOLERANCE else 'FAIL'}")
    failed = [n for n, e in worst.items() if not e < TOLERANCE]
    if failed:
        print(f"gradient check failed for: {', '.join(failed)}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ffdet", description=__doc__.splitlines()[0], formatter_class=_Help)
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("synth", help="generate a synthetic face dataset", formatter_class=_Help)
    s.add_argument("--out", required=True, help="output dataset directory")
    s.add_argument("--n", type=int, default=300, help="number of images")
    s.add_argument("--seed", type=int, default=7, help="generator seed")
    s.add_argument("--occlusion", type=float, default=0.3, help="probability a face gets an occluder")
    s.add_argument("--size", type=int, default=128, help="image side in pixels")
    s.add_argument("--face-size", type=_int_list, default=(12, 96), metavar="MIN,MAX",
                   help="face side range in pixels (default: 12,96)")
    s.add_argument("--start", type=int, default=0, help="index of the first image")
    s.add_argument("--channels", type=int, choices=(1, 3), default=1, help="1 = PGM grayscale, 3 = PPM colour")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a detector", formatter_class=_Help)
    t.add_argument("--config", help="JSON run config (default: built-in defaults)")
    t.add_argument("--data", required=True, help="training dataset directory")
    t.add_argument("--out", required=True, help="checkpoint path to write")
    t.add_argument("--log", help="per-step CSV loss log (default: none)")
    _add_train_overrides(t)
    t.set_defaults(func=cmd_train)

    d = sub.add_parser("detect", help="detect faces in images", formatter_class=_Help)
    d.add_argument("--ckpt", required=True, help="checkpoint file")
    d.add_argument("--image", required=True, nargs="+", help="image file(s) (PGM/PPM/PNG)")
    d.add_argument("--out", help="JSONL output path (default: stdout)")
    _add_detect_overrides(d)
    d.set_defaults(func=cmd_detect)

    e = sub.add_parser("eval", help="AP@0.5 on a dataset, with PR curve figure", formatter_class=_Help)
    e.add_argument("--ckpt", required=True, help="checkpoint file")
    e.add_argument("--data", required=True, help="evaluation dataset directory")
    e.add_argument("--report", required=True, help="JSON report path; .pr.csv and .pr.png are written beside it")
    _add_detect_overrides(e)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train and compare variants over seeds", formatter_class=_Help)
    a.add_argument("--config", help="JSON base config (default: built-in defaults)")
    a.add_argument("--data", required=True, help="training dataset directory")
    a.add_argument("--test", help="evaluation dataset directory (default: the training set)")
    a.add_argument("--variants", type=_str_list, default=("eq1", "fpn", "seg-off"),
                   help="comma-separated variants; modifiers eq1, fpn, seg-off, lambda2=F, aug-off joined by '+'")
    a.add_argument("--seeds", type=_int_list, default=(7, 8, 9), help="comma-separated seeds")
    a.add_argument("--out", required=True, help="CSV table; .summary.csv, .png and .config.json are written beside it")
    a.add_argument("--cache", help="directory for reusable trained checkpoints (default: no cache)")
    _add_train_overrides(a)
    _add_detect_overrides(a)
    a.set_defaults(func=cmd_ablate)

    g = sub.add_parser("gradcheck", help="finite-difference gradient suite", formatter_class=_Help)
    g.add_argument("--seed", type=int, help="single seed (default: seeds 0-4)")
    g.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    from .train import NumericError

    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:  # --help / --version
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        print(f"ffdet {args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as e:
        print(f"ffdet {args.command}: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, ConfigError, CheckpointError, FileNotFoundError) as e:
        print(f"ffdet {args.command}: {e}", file=sys.stderr)
        return EXIT_DATA
    except OSError as e:
        print(f"ffdet {args.command}: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
