"""Command line entry point: ``pdfnet {summarize,gradcheck,train,eval,predict}``.

Exit codes are 0 on success, 1 on a runtime failure and 2 on a usage or
configuration error.  Every command prints its resolved configuration as
``key=value`` lines before doing any work.
"""
from __future__ import annotations

import argparse
import contextlib
import os
import sys
import time

import numpy as np

from . import cost as C
from .data import LabelError, ParseError, normalize, read_manifest, read_pgm, write_pgm
from .gradcheck import gradcheck_variant
from .layers import load_checkpoint
from .metrics import (
    CITYSCAPES_CLASSES, CITYSCAPES_SCORED, ConfusionMatrix, category_iou, cityscapes_category_map,
    iou_table, parse_category_map, pixel_accuracy,
)
from .network import (
    build_network, config_text, parse_config_text,
    spec_from_config, stage_channel_table, variant_names,
)
from .tensor import ConfigurationError, DimensionError
from .training import TrainConfig, evaluate, train

THREADS_ENV = "PDFNET_NUM_THREADS"
ARCH_KEYS = {"variant", "family", "depth", "two_stride", "num_classes", "in_channels",
             "decoder_width", "bn_after", "stem_2s", "residual", "preact_add"}
MAX_GRADCHECK = (64, 128)


class UsageError(Exception):
    """Bad flags or configuration; reported with exit code 2."""


def fmt(value):
    if isinstance(value, float):
        return f"{value:.6g}"
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, tuple):
        return "x".join(str(v) for v in value)
    return str(value)


def parse_hw(text):
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise UsageError(f"expected HxW, got {text!r}") from None
    if h < 1 or w < 1:
        raise UsageError(f"size must be positive, got {text!r}")
    return h, w


def print_config(command, items):
    print(f"# {command}")
    for key, value in items:
        print(f"{key}={fmt(value)}")
    sys.stdout.flush()


# ----------------------------------------------------------------- resolving

def read_config(path):
    if path is None:
        return {}, {}
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = parse_config_text(fh.read())
    except FileNotFoundError:
        raise UsageError(f"config file {path} not found") from None
    arch = {k: v for k, v in cfg.items() if k in ARCH_KEYS}
    run = {k: v for k, v in cfg.items() if k not in ARCH_KEYS}
    return arch, run


def resolve_model(args, arch):
    """Variant flag, then config file, then defaults."""
    arch = dict(arch)
    if getattr(args, "variant", None):
        arch["variant"] = args.variant
    if getattr(args, "num_classes", None) is not None:
        arch["num_classes"] = str(args.num_classes)
    if "variant" in arch:
        name = arch["variant"].strip().lower()
        if name not in variant_names():
            raise UsageError(f"unknown variant {arch['variant']!r}; valid: {', '.join(variant_names())}")
    return spec_from_config(arch)


def arch_items(spec, options):
    return [("variant", spec.name)] + [tuple(line.split("=", 1)) for line in config_text(spec, options).split()]


def _run_value(run, key, flag, cast, default):
    if flag is not None:
        return flag
    if key in run:
        try:
            return cast(run[key])
        except ValueError:
            raise UsageError(f"config key {key}: bad value {run[key]!r}") from None
    return default


def _bool(text):
    if str(text).lower() in ("1", "true", "yes", "on"):
        return True
    if str(text).lower() in ("0", "false", "no", "off"):
        return False
    raise ValueError(text)


def class_names(num_classes):
    if num_classes == len(CITYSCAPES_CLASSES):
        return list(CITYSCAPES_CLASSES)
    return [f"class{k}" for k in range(num_classes)]


def scored_classes(num_classes, text):
    if text == "auto":
        # the 20-class Cityscapes layout trains on background but does not score it
        return list(CITYSCAPES_SCORED) if num_classes == len(CITYSCAPES_CLASSES) else list(range(num_classes))
    if text == "all":
        return list(range(num_classes))
    picks = [int(v) for v in text.split(",")]
    if any(not 0 <= k < num_classes for k in picks):
        raise UsageError(f"scored classes must lie in 0..{num_classes - 1}")
    return picks


def load_model(path, num_classes=None):
    ckpt = load_checkpoint(path)
    spec, options = spec_from_config(parse_config_text(ckpt.metadata))
    if num_classes is not None and num_classes != spec.num_classes:
        raise UsageError(f"checkpoint has {spec.num_classes} classes but {num_classes} were requested")
    net = build_network(spec, rng=0, options=options)
    net.load_arrays(ckpt.params, ckpt.buffers)
    return net


def load_samples(manifest, num_classes, target):
    m = read_manifest(manifest, num_classes, target)
    try:
        return [m.load(i) for i in range(len(m))], m
    except LabelError as exc:
        raise UsageError(f"{manifest}: {exc} (network has {num_classes} classes)") from None


# ------------------------------------------------------------------ commands

def cmd_summarize(args, arch, run):
    if args.calibrate:
        print_config("summarize --calibrate", [("rows", "cityscapes"), ("grid", "bn_after,stem_2s,convention,scope")])
        cal = C.calibrate()
        print(f"selected bn_after={cal.options.bn_after} stem_2s={cal.options.stem_2s} "
              f"convention={cal.convention} scope={cal.scope} max_error={cal.max_error:.6g} ok={fmt(cal.ok)}")
        for r in cal.residuals:
            print(f"{r.row.variant},{r.params},{r.gflops:.6g},{r.params_rel:.6g},{r.gflops_rel:.6g}")
        return 0 if cal.ok else 1
    names = variant_names() if args.all else [None]
    hw = parse_hw(args.input)
    convention = args.convention or run.get("convention", C.CALIBRATED_CONVENTION)
    scope = args.scope or run.get("scope", C.CALIBRATED_SCOPE)
    if convention not in C.CONVENTIONS:
        raise UsageError(f"convention must be one of {', '.join(C.CONVENTIONS)}")
    if scope not in C.SCOPES:
        raise UsageError(f"scope must be one of {', '.join(C.SCOPES)}")
    for name in names:
        if name is not None:
            args.variant = name
        spec, options = resolve_model(args, arch)
        print_config("summarize", arch_items(spec, options) + [
            ("input", hw), ("convention", convention), ("scope", scope)])
        net = build_network(spec, options=options)
        report = C.cost_report(net, (1, spec.in_channels) + hw, convention, scope)
        print(C.format_report(report, stage_channel_table(spec, options)))
        print(f"fusion_width={net.fusion_width}")
        print(C.report_line(report))
    return 0


def cmd_gradcheck(args, arch, run):
    spec, options = resolve_model(args, arch)
    size = parse_hw(args.size)
    if size[0] > MAX_GRADCHECK[0] or size[1] > MAX_GRADCHECK[1]:
        raise UsageError(f"gradcheck size is limited to {MAX_GRADCHECK[0]}x{MAX_GRADCHECK[1]}")
    if args.precision != 64:
        raise UsageError("gradcheck runs in 64-bit precision only")
    if (size[0] // 16) * (size[1] // 16) < 4:
        # batchnorm over a handful of values is too curved for central differences
        print(f"warning: the last stage is only {size[0] // 16}x{size[1] // 16} at {size[0]}x{size[1]}; "
              "finite differences may disagree with exact gradients", file=sys.stderr)
    seed = _run_value(run, "seed", args.seed, int, 0)
    print_config("gradcheck", arch_items(spec, options) + [
        ("size", size), ("precision", args.precision), ("samples", args.samples), ("seed", seed),
        ("step", args.step), ("tolerance", args.tolerance), ("freeze_relu", not args.no_freeze_relu),
        ("detach_tap", "none" if args.detach_tap is None else args.detach_tap)])
    res = gradcheck_variant(spec, size, args.samples, seed, options, args.detach_tap,
                            step=args.step, freeze_relu=not args.no_freeze_relu)
    res.tolerance = args.tolerance
    print(f"checked={res.checked}")
    print(f"max_rel_error={res.max_rel_error:.6g}")
    print(f"worst={res.worst}")
    print(f"finite_diff_ok={fmt(res.finite_diff_ok)}")
    print(f"all_nonzero={fmt(res.all_nonzero)}")
    for name in res.zero_grad_params:
        print(f"zero_gradient={name}")
    print("PASS" if res.passed else "FAIL")
    return 0 if res.passed else 1


def train_config(args, run):
    """Training settings: explicit flags, then the config file, then the published recipe."""
    def pick(key, cast, default):
        return _run_value(run, key, getattr(args, key, None), cast, default)

    return TrainConfig(
        epochs=pick("epochs", int, 180),
        batch_size=pick("batch_size", int, 2),
        lr=pick("lr", float, 1e-6),
        momentum=pick("momentum", float, 0.7),
        seed=pick("seed", int, 42),
        eval_every=pick("eval_every", int, 1),
        normalize_inputs=pick("normalize_inputs", _bool, True),
        max_steps=pick("max_steps", int, None),
    )


def cmd_train(args, arch, run):
    spec, options = resolve_model(args, arch)
    cfg = train_config(args, run)
    target = parse_hw(args.input) if args.input else (parse_hw(run["input"]) if "input" in run else None)
    train_manifest = args.train or run.get("train")
    val_manifest = args.val or run.get("val")
    out_dir = args.out or run.get("out", "run")
    if not train_manifest:
        raise UsageError("train needs --train MANIFEST")
    cfg.log_path = os.path.join(out_dir, "log.csv")
    cfg.checkpoint_path = os.path.join(out_dir, "best.ckpt")
    print_config("train", arch_items(spec, options) + [
        ("train", train_manifest), ("val", val_manifest or "none"), ("input", target or "native"),
        ("epochs", cfg.epochs), ("batch_size", cfg.batch_size), ("lr", cfg.lr),
        ("momentum", cfg.momentum), ("seed", cfg.seed), ("eval_every", cfg.eval_every),
        ("normalize_inputs", cfg.normalize_inputs),
        ("max_steps", "none" if cfg.max_steps is None else cfg.max_steps), ("out", out_dir)])
    train_samples, _ = load_samples(train_manifest, spec.num_classes, target)
    val_samples = load_samples(val_manifest, spec.num_classes, target)[0] if val_manifest else []
    os.makedirs(out_dir, exist_ok=True)
    net = build_network(spec, rng=cfg.seed, options=options)
    history = train(net, train_samples, val_samples, cfg, scored_classes(spec.num_classes, args.scored))
    last = history[-1]
    print(f"epochs_run={len(history)}")
    print(f"final_train_loss={last.train_loss:.6g}")
    print(f"final_val_loss={last.val_loss:.6g}")
    print(f"log={cfg.log_path}")
    print(f"checkpoint={cfg.checkpoint_path}")
    return 0


def _prediction_path(pred_dir, image_path):
    stem = os.path.splitext(os.path.basename(image_path))[0]
    return os.path.join(pred_dir, stem + ".pgm")


def cmd_eval(args, arch, run):
    if (args.checkpoint is None) == (args.pred_dir is None):
        raise UsageError("eval needs exactly one of --checkpoint or --pred-dir")
    target = parse_hw(args.input) if args.input else None
    if args.checkpoint:
        net = load_model(args.checkpoint, args.num_classes)
        num_classes, label = net.spec.num_classes, net.spec.name
    else:
        net, label = None, "predictions"
        num_classes = args.num_classes or int(arch.get("num_classes", 20))
    scored = scored_classes(num_classes, args.scored)
    print_config("eval", [("source", args.checkpoint or args.pred_dir), ("manifest", args.manifest),
                          ("num_classes", num_classes), ("input", target or "native"),
                          ("scored", ",".join(map(str, scored))),
                          ("categories", args.categories or "none"), ("format", args.format)])
    samples, manifest = load_samples(args.manifest, num_classes, target)
    if net is not None:
        _, cm, _ = evaluate(net, samples, num_classes, batch_size=1, scored=scored)
    else:
        cm = ConfusionMatrix(num_classes)
        for (img, _), s in zip(manifest.entries, samples):
            pred, _ = read_pgm(_prediction_path(args.pred_dir, img))
            if pred.shape != s.label.shape:
                raise UsageError(f"prediction for {s.name} is {pred.shape}, label is {s.label.shape}")
            if pred.max(initial=0) >= num_classes:
                raise UsageError(f"prediction for {s.name} has values >= {num_classes}")
            cm.accumulate(pred, s.label)
    names = class_names(num_classes)
    text = iou_table([(label, cm)], names, scored, args.format)
    print(text, end="")
    print(f"pixel_accuracy={pixel_accuracy(cm):.6g}")
    if args.categories:
        if args.categories == "cityscapes":
            mapping = cityscapes_category_map(names)
        else:
            with open(args.categories, encoding="utf-8") as fh:
                mapping = parse_category_map(fh.read(), names)
        per, mean = category_iou(cm, mapping, scored)
        for cat, v in per.items():
            print(f"category {cat}={v:.6g}")
        print(f"category_mean={mean:.6g}")
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    return 0


def cmd_predict(args, arch, run):
    net = load_model(args.checkpoint, args.num_classes)
    target = parse_hw(args.input) if args.input else None
    print_config("predict", arch_items(net.spec, net.options) + [
        ("checkpoint", args.checkpoint), ("manifest", args.manifest), ("input", target or "native"),
        ("out_dir", args.out_dir)])
    samples, manifest = load_samples(args.manifest, net.spec.num_classes, target)
    os.makedirs(args.out_dir, exist_ok=True)
    for (img, _), s in zip(manifest.entries, samples):
        logits = net(normalize(s.image).astype(np.float32), train=False)
        pred = logits.data[0].argmax(axis=0).astype(np.uint8)
        path = _prediction_path(args.out_dir, img)
        write_pgm(path, pred)
        print(f"wrote {path}")
    return 0


# -------------------------------------------------------------------- parser

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        if "invalid choice" in message and "variant" in message:
            message += f"\nvalid variants: {', '.join(variant_names())}"
        self.exit(2, f"{self.prog}: error: {message}\n")


def build_parser():
    p = _Parser(prog="pdfnet", description="Build, cost, check, train and evaluate segmentation networks.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, variant=True):
        sp.add_argument("--config", help="key=value file; explicit flags take precedence")
        if variant:
            sp.add_argument("--variant", help=f"one of: {', '.join(variant_names())}")
        sp.add_argument("--num-classes", type=int)

    s = sub.add_parser("summarize", help="stage channels, parameters and FLOPs")
    common(s)
    s.add_argument("--input", default="512x1024", help="HxW (default 512x1024)")
    s.add_argument("--convention", choices=C.CONVENTIONS)
    s.add_argument("--scope", choices=C.SCOPES)
    s.add_argument("--all", action="store_true", help="report every variant")
    s.add_argument("--calibrate", action="store_true", help="rerun the counting-convention search")

    g = sub.add_parser("gradcheck", help="finite-difference gradient check")
    common(g)
    g.add_argument("--size", default="32x64")
    g.add_argument("--precision", type=int, default=64, choices=(32, 64))
    g.add_argument("--samples", type=int, default=200)
    g.add_argument("--seed", type=int)
    g.add_argument("--step", type=float, default=1e-5)
    g.add_argument("--tolerance", type=float, default=1e-4)
    g.add_argument("--no-freeze-relu", action="store_true",
                   help="let perturbed passes re-decide ReLU on/off states")
    g.add_argument("--detach-tap", type=int, metavar="K",
                   help="test hook: cut the gradient through decoder branch K")

    t = sub.add_parser("train", help="train from a manifest")
    common(t)
    t.add_argument("--train")
    t.add_argument("--val")
    t.add_argument("--out", help="output folder for log.csv and best.ckpt")
    t.add_argument("--input", help="resize samples to HxW")
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--momentum", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--eval-every", type=int)
    t.add_argument("--max-steps", type=int)
    t.add_argument("--scored", default="auto", help="auto, all, or comma-separated class indices")

    e = sub.add_parser("eval", help="class-wise IoU table")
    common(e, variant=False)
    e.add_argument("--manifest", required=True)
    e.add_argument("--checkpoint")
    e.add_argument("--pred-dir", help="folder of PGM predictions named after the images")
    e.add_argument("--input")
    e.add_argument("--scored", default="auto")
    e.add_argument("--categories", help="'cityscapes' or a class=category file")
    e.add_argument("--format", choices=("text", "csv"), default="text")
    e.add_argument("--out", help="also write the IoU table here")

    r = sub.add_parser("predict", help="write PGM label maps")
    common(r, variant=False)
    r.add_argument("--manifest", required=True)
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--out-dir", required=True)
    r.add_argument("--input")
    return p


COMMANDS = {"summarize": cmd_summarize, "gradcheck": cmd_gradcheck, "train": cmd_train,
            "eval": cmd_eval, "predict": cmd_predict}


def _thread_limit():
    value = os.environ.get(THREADS_ENV)
    if not value:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=int(value))


def main(argv=None):
    args = build_parser().parse_args(argv)
    start = time.perf_counter()
    try:
        arch, run = read_config(args.config)
        with _thread_limit():
            code = COMMANDS[args.command](args, arch, run)
    except (UsageError, ConfigurationError, ParseError, LabelError, DimensionError) as exc:
        print(f"pdfnet: error: {exc}", file=sys.stderr)
        return 2
    except (FloatingPointError, OSError, ValueError, KeyError) as exc:
        print(f"pdfnet: failed: {exc}", file=sys.stderr)
        return 1
    print(f"elapsed_s={time.perf_counter() - start:.6g}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
