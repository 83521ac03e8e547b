"""Batch command-line front end.

Exit codes: 0 on success, 1 on a domain error raised while computing, 2 on a
usage error (bad flags, unknown preset/plan/format, missing input file).
Nothing is written on error paths: every subcommand renders its full output
in memory before the file is created.  Outputs carry no timestamps, so the
same invocation with the same seed produces byte-identical files.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import analysis, arch, trainer
from .errors import QmixError
from .layers import VARIANT_KINDS
from .tensor import Tensor, finite_diff_check, resolve_dtype

USAGE_EXIT = 2
DOMAIN_EXIT = 1


class UsageError(Exception):
    pass


def _load_spec(args) -> arch.ArchSpec:
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        return arch.load_arch(path.read_text(encoding="utf-8"))
    return arch.load_bundled()


def _build(args, plan_text: str | None = None):
    spec = _load_spec(args)
    if args.preset not in spec.scales:
        raise UsageError(f"unknown preset {args.preset!r}; available: {sorted(spec.scales)}")
    resolved = arch.resolve_scaling(spec, args.preset)
    dtype = resolve_dtype(args.precision)
    graph = arch.build_model(resolved, nc=args.nc, seed=args.seed, dtype=dtype)
    if plan_text:
        try:
            targets = arch.parse_plan(plan_text)
        except QmixError as exc:
            raise UsageError(str(exc))
        plan = arch.SurgeryPlan(targets=targets, reduction=args.reduction, variant=args.variant)
        return graph, arch.apply_surgery(graph, plan)
    return graph, None


def _emit(obj, args) -> None:
    fmt = args.format
    if fmt not in analysis.RENDERERS:
        raise UsageError(f"unknown format {fmt!r}; use json, csv, or md")
    if args.out:
        analysis.emit_report(obj, fmt, args.out)
    else:
        sys.stdout.write(analysis.RENDERERS[fmt](obj))


def cmd_analyze(args) -> int:
    base, surgered = _build(args, args.plan)
    target = surgered if surgered is not None else base
    report = analysis.param_report(target, baseline=base if surgered is not None else None)
    freport = analysis.flop_report(target, args.img_size,
                                   baseline=base if surgered is not None else None)
    payload = {
        "schema_version": 1,
        "params": report.to_dict(),
        "flops": freport.to_dict(),
    }
    _emit(payload if args.format == "json" else freport, args)
    return 0


def cmd_surgery(args) -> int:
    if not args.plan:
        raise UsageError("surgery requires --plan")
    _, surgered = _build(args, args.plan)
    payload = arch.graph_dump(surgered)
    if args.out:
        text = json.dumps(payload, indent=2) + "\n"
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(json.dumps(payload, indent=2) + "\n")
    return 0


def cmd_gradcheck(args) -> int:
    import numpy as np

    from . import layers, ops

    rng = np.random.default_rng(args.seed)
    rows = []

    def check(kind, layer, xs, tensors):
        proj = [Tensor(rng.standard_normal(1)) for _ in range(8)]  # lazily sized below

        def f(tape):
            out = layer.forward(xs, tape, training=True)
            outs = out if isinstance(out, list) else [out]
            total = None
            for i, o in enumerate(outs):
                if proj[i].shape != o.shape:
                    proj[i] = Tensor(rng.standard_normal(o.shape))
                term = ops.reduce_sum(ops.mul(o, proj[i], tape=tape), tape=tape)
                total = term if total is None else ops.add(total, term, tape=tape)
            return total

        err = finite_diff_check(f, tensors, coords_per_tensor=max(1, args.coords // max(1, len(tensors))))
        rows.append({"kind": kind, "max_rel_err": err})

    def rand(*shape):
        return Tensor(rng.standard_normal(shape))

    x8 = rand(2, 8, 8, 8)
    conv = layers.ConvBlock("gc.conv", 8, 8, 3, 1, rng)
    check("Conv", conv, [x8], conv.params() + [x8])
    c2f = layers.C2fBlock("gc.c2f", 8, 8, 2, True, rng)
    check("C2f", c2f, [x8], c2f.params() + [x8])
    sppf = layers.SppfBlock("gc.sppf", 8, 8, 5, rng)
    check("SPPF", sppf, [x8], sppf.params() + [x8])
    det = layers.DetectHead("gc.det", 4, [8, 8, 8], rng=rng)
    xs = [rand(1, 8, 8, 8), rand(1, 8, 4, 4), rand(1, 8, 2, 2)]
    check("Detect", det, xs, [p for p in det.params() if p.trainable] + xs)
    ups = layers.Upsample(8)
    check("Upsample", ups, [x8], [x8])
    cat = layers.Concat([8, 8])
    xa, xb = rand(2, 8, 4, 4), rand(2, 8, 4, 4)
    check("Concat", cat, [xa, xb], [xa, xb])
    for variant in VARIANT_KINDS:
        mixer = layers.SharedMixer(f"gc.{variant}", rng, with_theta=variant != "QMixSin",
                                   with_alpha=variant == "QMixScaled")
        block = layers.QMixBlock(f"gc.{variant}", 16, 16, 4, mixer, variant, rng)
        xv = rand(2, 16, 6, 6)
        check(variant, block, [xv], block.params() + mixer.params() + [xv])

    payload = {"schema_version": 1, "seed": args.seed, "rows": rows}
    text = json.dumps(payload, indent=2) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    for r in rows:
        sys.stdout.write(f"{r['kind']:<12} max_rel_err={r['max_rel_err']:.3e}\n")
    return 0


def cmd_train(args) -> int:
    _, surgered = _build(args, args.plan) if args.plan else (None, None)
    graph = surgered if surgered is not None else _build(args)[0]
    task = trainer.gen_synthetic(args.seed, args.samples, classes=args.classes,
                                 size=args.task_size, precision=args.precision)
    config = trainer.TrainConfig(epochs=args.epochs, batch_size=args.batch_size,
                                 seed=args.seed, precision=args.precision)
    curve = trainer.train(graph, task, config)
    text = trainer.loss_curve_csv(curve)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8", newline="")
    else:
        sys.stdout.write(text)
    return 0


def cmd_ablate(args) -> int:
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    for v in variants:
        if v not in VARIANT_KINDS:
            raise UsageError(f"unknown variant {v!r}; choose from {VARIANT_KINDS}")
    task = trainer.gen_synthetic(args.seed, args.samples, classes=args.classes,
                                 size=args.task_size, precision=args.precision)
    config = trainer.TrainConfig(epochs=args.epochs, batch_size=args.batch_size,
                                 seed=args.seed, precision=args.precision)
    results = trainer.run_ablation(variants, task, config, preset=args.preset)
    payload = {"schema_version": 1, "rows": results}
    text = json.dumps(payload, indent=2) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    for r in results:
        sys.stdout.write(f"{r['variant']:<12} params={r['params']:>9} "
                         f"final_loss={r['final_loss']:.4f}\n")
    return 0


def cmd_compare(args) -> int:
    rows = []
    for preset in ("n", "s"):
        ns = argparse.Namespace(**{**vars(args), "preset": preset})
        base, surgered = _build(ns, "final")
        base_params = base.param_total()
        fb = analysis.flop_report(base, args.img_size)
        fs = analysis.flop_report(surgered, args.img_size)
        rows.append(analysis.comparison_row(f"YOLOv8{preset}", base_params, None, fb.gflops))
        rows.append(analysis.comparison_row(f"QYOLOv8{preset}", surgered.param_total(),
                                            base_params, fs.gflops))
    _emit(analysis.ComparisonTable(rows), args)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qmixlab",
                                     description="Channel-mixing compression workbench")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, plan=True):
        p.add_argument("--config", help="architecture file (default: bundled yolov8)")
        p.add_argument("--preset", default="n", help="scale preset letter (default n)")
        p.add_argument("--nc", type=int, default=None, help="class count override")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--precision", default="64", choices=["64", "32"])
        p.add_argument("--out", help="output path (default: stdout)")
        p.add_argument("--format", default="json", help="json, csv, or md")
        if plan:
            p.add_argument("--plan", help="'final', 'v0', or comma-separated layer indices")
            p.add_argument("--reduction", "-R", type=int, default=4)
            p.add_argument("--variant", default="QMixBlock", choices=list(VARIANT_KINDS))

    p = sub.add_parser("analyze", help="parameter and FLOP report")
    common(p)
    p.add_argument("--img-size", type=int, default=640)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("surgery", help="dump the graph after applying a plan")
    common(p)
    p.set_defaults(func=cmd_surgery)

    p = sub.add_parser("gradcheck", help="finite-difference check for every layer kind")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--coords", type=int, default=200, help="sampled coordinates per layer")
    p.add_argument("--out", help="JSON output path")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("train", help="desk-scale training run, emits a loss CSV")
    common(p)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--samples", type=int, default=256)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--task-size", type=int, default=64)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ablate", help="train every design variant and tabulate")
    common(p, plan=False)
    p.add_argument("--variants", default=",".join(VARIANT_KINDS))
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--samples", type=int, default=64)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--task-size", type=int, default=64)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("compare", help="baseline vs surgery rows for n and s presets")
    common(p, plan=False)
    p.add_argument("--img-size", type=int, default=640)
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return USAGE_EXIT
    except QmixError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DOMAIN_EXIT


if __name__ == "__main__":
    sys.exit(main())
