"""Single entry point: every pipeline stage as a subcommand.

Defaults follow the method's constants (alpha=0.99, weight decay 0.03,
base lr 0.001, NMS 0.3, match IoU 0.5, 5% pruning per iteration,
early-stop tolerance 1.03, 100 calibration images, diff stride 5); an
INI-style config file with one section per module can override them,
and explicit flags override the file. Every run writes a manifest with
the resolved config, the seed and content hashes of its inputs.
"""

import argparse
import configparser
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import arena, detect, graph, infer, metrics, pipeline, prune, quantize
from . import thermal_io as tio
from . import train as train_mod
from .errors import ConfigError, FormatError, ThermodetError

EXIT_CODES = {
    "config": 3,
    "format": 4,
    "version": 4,
    "corruption": 4,
    "dimension": 5,
    "validation": 5,
    "structure": 6,
    "coverage": 6,
    "metric": 7,
    "prune": 8,
    "diverged": 9,
    "error": 1,
}


# --- config / manifest helpers ----------------------------------------


def load_config(path):
    if path is None:
        return {}
    cp = configparser.ConfigParser()
    if not cp.read(path):
        raise ConfigError(f"config file not found: {path}")
    return {s: dict(cp.items(s)) for s in cp.sections()}


def _parse_bool(s):
    v = str(s).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {s!r}")


def resolve(flag_value, config, section, key, default, cast=str):
    if flag_value is not None:
        return flag_value
    raw = config.get(section, {}).get(key)
    if raw is None:
        return default
    if cast is bool:
        return _parse_bool(raw)
    try:
        return cast(raw)
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key} = {raw!r}: {exc}") from exc


def _hash_path(path):
    path = Path(path)
    h = hashlib.sha256()
    if path.is_dir():
        for p in sorted(path.rglob("*")):
            if p.is_file():
                h.update(str(p.relative_to(path)).encode())
                h.update(hashlib.sha256(p.read_bytes()).digest())
    else:
        h.update(path.read_bytes())
    return h.hexdigest()


def write_manifest(target, command, settings, seed, inputs):
    manifest = {
        "command": command,
        "settings": settings,
        "seed": seed,
        "inputs": {str(p): _hash_path(p) for p in inputs if Path(p).exists()},
    }
    target = Path(target)
    out = target / "manifest.json" if target.is_dir() else Path(f"{target}.manifest.json")
    out.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_model(path):
    """Sniff the container magic; returns ('f32', graph) or ('int8', qm)."""
    with open(path, "rb") as f:
        magic = f.read(4)
    if magic == graph.MAGIC_F32:
        return "f32", graph.deserialize(path)
    if magic == quantize.MAGIC_INT8:
        return "int8", quantize.quantized_deserialize(path)
    raise FormatError(f"{path}: unknown model container magic {magic!r}")


# --- synth -------------------------------------------------------------


def cmd_synth(args):
    config = load_config(args.config)

    def g(key, default, cast, flag=None):
        return resolve(flag, config, "synth", key, default, cast)

    n_sequences = g("sequences", 1, int, args.sequences)
    seed = g("seed", 0, int, args.seed)
    out = Path(args.out)
    total_frames = total_boxes = 0
    for k in range(n_sequences):
        cfg = tio.SyntheticSceneConfig(
            n_frames=g("frames", 100, int, args.frames),
            n_persons=g("persons", 1, int, args.persons),
            n_imposters=g("imposters", 0, int, args.imposters),
            ambient_c=g("ambient_c", 20.0, float, args.ambient),
            person_c=(
                g("person_lo_c", 28.0, float, args.person_lo),
                g("person_hi_c", 34.0, float, args.person_hi),
            ),
            noise_sigma=g("noise_sigma", 0.15, float, args.noise),
            speed=g("speed", 0.7, float, args.speed),
            seed=seed + k,
            empty_start_frames=g("empty_start_frames", 0, int, args.empty_start),
        )
        frames, boxes = tio.synth_sequence(cfg)
        target = out if n_sequences == 1 else out / f"seq_{k:03d}"
        tio.write_sequence(target, frames, boxes)
        total_frames += len(frames)
        total_boxes += len(boxes)
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(
        out, sys.argv[1:],
        vars(cfg) | {"person_c": list(cfg.person_c), "sequences": n_sequences},
        seed, [],
    )
    print(
        f"wrote {n_sequences} sequence(s), {total_frames} frames, "
        f"{total_boxes} boxes to {out}"
    )
    return 0


# --- train ---------------------------------------------------------------


def _train_config(args, config):
    def g(key, default, cast, flag=None):
        return resolve(flag, config, "train", key, default, cast)

    return train_mod.TrainConfig(
        max_iters=g("max_iters", 50_000, int, args.iters),
        base_lr=g("base_lr", 0.001, float, args.base_lr),
        warmup_iters=g("warmup_iters", 1000, int, None),
        plateau_patience=g("plateau_patience", 5000, int, None),
        lr_decay_factor=g("lr_decay_factor", 10.0, float, None),
        weight_decay=g("weight_decay", 0.03, float, args.weight_decay),
        momentum=g("momentum", 0.9, float, None),
        batch_size=g("batch_size", 32, int, args.batch),
        seed=g("seed", 0, int, args.seed),
        val_cadence=g("val_cadence", 1000, int, args.val_cadence),
        lambda_coord=g("lambda_coord", 5.0, float, None),
        lambda_obj=g("lambda_obj", 1.0, float, None),
        lambda_noobj=g("lambda_noobj", 0.5, float, None),
        ignore_iou=g("ignore_iou", 0.6, float, None),
        augment=g("augment", True, bool, args.augment),
    )


def _data_flags(args, config):
    use_bg_sub = resolve(args.bg_sub, config, "train", "use_bg_sub", True, bool)
    use_diff = resolve(args.diff, config, "train", "use_diff", False, bool)
    lo = resolve(args.normalize_lo, config, "normalize", "lo_c", tio.NORMALIZE_LO_C, float)
    hi = resolve(args.normalize_hi, config, "normalize", "hi_c", tio.NORMALIZE_HI_C, float)
    alpha = resolve(None, config, "background", "alpha", 0.99, float)
    period = resolve(None, config, "background", "update_period", 25, int)
    return use_bg_sub, use_diff, lo, hi, alpha, period


def _read_sequences(directory):
    """One sequence per directory; a directory of subdirectories is a
    multi-sequence dataset (one background history per sequence)."""
    directory = Path(directory)
    subdirs = sorted(d for d in directory.iterdir() if d.is_dir())
    if subdirs and not list(directory.glob("frame_*.tiff")):
        return [tio.read_sequence(d) for d in subdirs]
    return [tio.read_sequence(directory)]


def _load_dataset(directory, args, config):
    use_bg_sub, use_diff, lo, hi, alpha, period = _data_flags(args, config)
    return train_mod.build_multi_dataset(
        _read_sequences(directory),
        use_bg_sub=use_bg_sub,
        use_diff=use_diff,
        lo=lo,
        hi=hi,
        bg_alpha=alpha,
        bg_update_period=period,
    )


def cmd_train(args):
    config = load_config(args.config)
    cfg = _train_config(args, config)
    use_bg_sub, use_diff, *_ = _data_flags(args, config)
    train_ds = _load_dataset(args.data, args, config)
    val_ds = _load_dataset(args.val, args, config)

    widths_raw = resolve(
        args.widths, config, "model", "widths",
        ",".join(map(str, graph.DEFAULT_WIDTHS)), str,
    )
    widths = tuple(int(v) for v in str(widths_raw).split(",") if v.strip())
    input_channels = 2 if use_diff else 1
    anchors = graph.DEFAULT_ANCHORS
    if resolve(args.anchors, config, "model", "anchors", "default", str) == "kmeans":
        boxes = [b for _, ann in _read_sequences(args.data) for b in ann]
        anchors = graph.kmeans_anchors(boxes, seed=cfg.seed)
    model = graph.build_architecture(
        input_channels=input_channels, widths=widths, anchors=anchors, seed=cfg.seed
    )
    best, log = train_mod.train(model, train_ds, val_ds, cfg)
    graph.serialize(best, args.out)
    if args.log:
        train_mod.save_log_csv(log, args.log)
    write_manifest(
        args.out, sys.argv[1:],
        {"train": vars(cfg), "use_bg_sub": use_bg_sub, "use_diff": use_diff,
         "widths": list(widths)},
        cfg.seed, [args.data, args.val],
    )
    final_val = [r["val_loss"] for r in log if r["val_loss"] is not None]
    print(
        f"trained {cfg.max_iters} iters, best val loss "
        f"{min(final_val):.6f}, saved {args.out}"
    )
    return 0


# --- prune ---------------------------------------------------------------


def cmd_prune(args):
    config = load_config(args.config)

    def g(key, default, cast, flag=None):
        return resolve(flag, config, "prune", key, default, cast)

    pcfg = prune.PruneConfig(
        fraction_per_iter=g("fraction_per_iter", 0.05, float, args.fraction),
        loss_tolerance=g("loss_tolerance", 1.03, float, args.tolerance),
        max_iterations=g("max_iterations", 60, int, args.iters),
        finetune_max_iters=g("finetune_max_iters", 10_000, int, args.finetune_iters),
        finetune_lr=g("finetune_lr", 0.0001, float, None),
        finetune_lr_drop_at=g("finetune_lr_drop_at", 5000, int, None),
    )
    kind, model = load_model(args.model)
    if kind != "f32":
        raise ConfigError("pruning operates on f32 models")
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    def checkpoint_fn(iteration, g_):
        graph.serialize(g_, out_dir / f"prune_{iteration:03d}.bin")

    if args.structural_only:
        records, final = prune.prune_campaign(
            model, prune_cfg=pcfg, checkpoint_fn=checkpoint_fn
        )
    else:
        tcfg = _train_config(args, config)
        train_ds = _load_dataset(args.data, args, config)
        val_ds = _load_dataset(args.val, args, config)
        records, final = prune.prune_campaign(
            model,
            train_ds=train_ds,
            val_ds=val_ds,
            prune_cfg=pcfg,
            train_cfg=tcfg,
            checkpoint_fn=checkpoint_fn,
        )
    graph.serialize(final, out_dir / "pruned.bin")
    prune.write_prune_csv(records, out_dir / "ledger.csv")
    write_manifest(
        out_dir, sys.argv[1:], {"prune": vars(pcfg)},
        resolve(args.seed, config, "train", "seed", 0, int),
        [args.model] + ([args.data, args.val] if not args.structural_only else []),
    )
    last = records[-1] if records else None
    print(
        f"pruned {len(records)} iterations"
        + (f", final params {last.params}" if last else "")
        + f", ledger {out_dir / 'ledger.csv'}"
    )
    return 0


# --- quantize --------------------------------------------------------------


def cmd_quantize(args):
    config = load_config(args.config)
    count = resolve(
        args.count, config, "quantize", "calibration_images",
        quantize.CALIBRATION_IMAGES, int,
    )
    kind, model = load_model(args.model)
    if kind != "f32":
        raise ConfigError("model is already quantized")
    folded = infer.fold_batchnorm(model) if model.has_batchnorm() else model
    calib_ds = _load_dataset(args.calib, args, config)
    images = list(calib_ds.inputs[:count])
    if len(images) < count:
        print(
            f"warning: calibration set has only {len(images)} images "
            f"(requested {count})",
            file=sys.stderr,
        )
    ranges = quantize.calibrate(folded, images)
    qm = quantize.quantize_model(folded, ranges)
    quantize.quantized_serialize(qm, args.out)
    write_manifest(
        args.out, sys.argv[1:], {"calibration_images": len(images)},
        0, [args.model, args.calib],
    )
    print(
        f"quantized with {len(images)} calibration images, "
        f"{quantize.weight_bytes(qm)} weight bytes, saved {args.out}"
    )
    return 0


# --- eval -------------------------------------------------------------------


def cmd_eval(args):
    config = load_config(args.config)
    iou = resolve(args.iou, config, "eval", "iou_threshold", metrics.MATCH_IOU, float)
    dets = detect.read_detections(args.dets)
    gts = {}
    for b in tio.read_annotations(args.gt):
        gts.setdefault(b.frame_index, []).append(b)
    result = metrics.evaluate(dets, gts, iou_thresh=iou)
    if args.pr_csv:
        metrics.write_pr_csv(result["curve"], args.pr_csv)
        write_manifest(
            args.pr_csv, sys.argv[1:], {"iou_threshold": iou}, 0,
            [args.dets, args.gt],
        )
    if args.plot:
        _plot_pr(result["curve"], args.plot)
    print(
        f"AP {result['ap'] * 100:.2f}%  F1 {result['f1'] * 100:.2f}% "
        f"@ threshold {result['threshold']:.4f}"
    )
    return 0


def _plot_pr(curve, path):
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError as exc:
        raise ConfigError("--plot needs matplotlib installed") from exc
    recalls = [r for _, _, r in curve.points]
    precisions = [p for _, p, _ in curve.points]
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.plot(recalls, precisions, marker=".")
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.05)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path)


# --- detect -----------------------------------------------------------------


def cmd_detect(args):
    config = load_config(args.config)
    kind, model = load_model(args.model)
    executor = resolve(args.executor, config, "detect", "executor", kind, str)
    if executor != kind:
        raise ConfigError(
            f"--executor {executor} but {args.model} is a {kind} container"
        )
    use_bg_sub, use_diff, lo, hi, alpha, period = _data_flags(args, config)
    cfg = pipeline.PipelineConfig(
        conf_threshold=resolve(
            args.conf, config, "detect", "conf_threshold", 0.5, float
        ),
        nms_threshold=resolve(
            args.nms, config, "detect", "nms_threshold", 0.3, float
        ),
        bg_alpha=alpha,
        bg_update_period=period,
        use_bg_sub=use_bg_sub,
        use_diff=use_diff,
        normalize_lo=lo,
        normalize_hi=hi,
        dump_bg_every=args.dump_bg or 0,
        dump_bg_dir=args.dump_bg_dir,
    )
    frames, _ = tio.read_sequence(args.input)
    result = pipeline.run(iter(frames), model, cfg)
    detect.write_detections(args.out, result.detections)
    if args.timing:
        pipeline.write_timing_csv(result, args.timing)
    write_manifest(
        args.out, sys.argv[1:],
        {"executor": executor, "conf_threshold": cfg.conf_threshold,
         "nms_threshold": cfg.nms_threshold, "use_bg_sub": use_bg_sub,
         "use_diff": use_diff},
        0, [args.model, args.input],
    )
    n_dets = sum(len(d) for d in result.detections)
    print(f"{executor} executor: {n_dets} detections over {len(frames)} frames")
    return 0


# --- report -----------------------------------------------------------------


def _report_rows(kind, model):
    rows = []
    h, w = graph.INPUT_HW
    if kind == "f32":
        descs = model.layers
        per_layer_params = [
            sum(arr.size for _, arr in p.arrays()) for p in model.params
        ]
    else:
        descs = [ql.desc for ql in model.layers]
        per_layer_params = [ql.w.size + ql.bias.size for ql in model.layers]
    for i, desc in enumerate(descs):
        ho, wo = graph._spatial_after(h, w, desc.stride)
        per_out = {
            graph.CONV3X3: desc.in_channels * 9,
            graph.DEPTHWISE3X3: 9,
            graph.POINTWISE1X1: desc.in_channels,
        }[desc.kind]
        rows.append(
            {
                "layer": i,
                "kind": desc.kind,
                "in": desc.in_channels,
                "out": desc.out_channels,
                "stride": desc.stride,
                "params": per_layer_params[i],
                "macs": per_out * desc.out_channels * ho * wo,
            }
        )
        h, w = ho, wo
    return rows


def cmd_report(args):
    kind, model = load_model(args.model)
    rows = _report_rows(kind, model)
    header = f"{'layer':>5} {'kind':<14} {'in':>5} {'out':>5} {'stride':>6} {'params':>9} {'MACs':>10}"
    print(header)
    for r in rows:
        print(
            f"{r['layer']:>5} {r['kind']:<14} {r['in']:>5} {r['out']:>5} "
            f"{r['stride']:>6} {r['params']:>9} {r['macs']:>10}"
        )
    total_params = sum(r["params"] for r in rows)
    total_macs = sum(r["macs"] for r in rows)
    print(f"{'total':>5} {'':<14} {'':>5} {'':>5} {'':>6} {total_params:>9} {total_macs:>10}")
    if kind == "f32":
        plan_f32 = arena.plan_memory(model, 4)
        plan_int8 = arena.plan_memory(model, 1)
        print(f"arena f32: {plan_f32.total_bytes} B   arena int8: {plan_int8.total_bytes} B")
        print(f"weights f32: {plan_f32.weight_bytes} B")
    else:
        plan = arena.plan_memory_quantized(model)
        print(f"arena int8: {plan.total_bytes} B")
        print(f"weights int8 (incl. int32 biases): {plan.weight_bytes} B")
    if args.csv:
        import csv as _csv

        summary = [
            {"layer": "", "kind": "total", "in": "", "out": "", "stride": "",
             "params": total_params, "macs": total_macs},
        ]
        if kind == "f32":
            summary.append(
                {"layer": "", "kind": "arena_f32_bytes", "in": "", "out": "",
                 "stride": "", "params": plan_f32.total_bytes, "macs": ""}
            )
            summary.append(
                {"layer": "", "kind": "arena_int8_bytes", "in": "", "out": "",
                 "stride": "", "params": plan_int8.total_bytes, "macs": ""}
            )
        else:
            summary.append(
                {"layer": "", "kind": "arena_int8_bytes", "in": "", "out": "",
                 "stride": "", "params": plan.total_bytes, "macs": ""}
            )
        with open(args.csv, "w", newline="") as f:
            writer = _csv.DictWriter(
                f, fieldnames=["layer", "kind", "in", "out", "stride", "params", "macs"]
            )
            writer.writeheader()
            writer.writerows(rows + summary)
        write_manifest(args.csv, sys.argv[1:], {"model_kind": kind}, 0, [args.model])
    return 0


# --- argument plumbing --------------------------------------------------------


def _add_data_flags(p):
    p.add_argument("--bg-sub", dest="bg_sub", action="store_true", default=None)
    p.add_argument("--no-bg-sub", dest="bg_sub", action="store_false", default=None)
    p.add_argument("--diff", dest="diff", action="store_true", default=None)
    p.add_argument("--no-diff", dest="diff", action="store_false", default=None)
    p.add_argument("--normalize-lo", type=float, default=None)
    p.add_argument("--normalize-hi", type=float, default=None)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="thermodet",
        description="Tiny thermal person detector: train, compress, run.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic labeled sequence")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--frames", type=int, default=None)
    p.add_argument("--persons", type=int, default=None)
    p.add_argument("--imposters", type=int, default=None)
    p.add_argument("--ambient", type=float, default=None)
    p.add_argument("--person-lo", type=float, default=None)
    p.add_argument("--person-hi", type=float, default=None)
    p.add_argument("--noise", type=float, default=None)
    p.add_argument("--speed", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--empty-start", type=int, default=None)
    p.add_argument("--sequences", type=int, default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a detector from scratch")
    p.add_argument("--data", required=True)
    p.add_argument("--val", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--iters", type=int, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--base-lr", type=float, default=None)
    p.add_argument("--weight-decay", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--val-cadence", type=int, default=None)
    p.add_argument("--widths", default=None)
    p.add_argument("--anchors", choices=["default", "kmeans"], default=None)
    p.add_argument("--augment", dest="augment", action="store_true", default=None)
    p.add_argument("--no-augment", dest="augment", action="store_false", default=None)
    p.add_argument("--log")
    _add_data_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("prune", help="iterative channel-pruning campaign")
    p.add_argument("--model", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--data")
    p.add_argument("--val")
    p.add_argument("--config")
    p.add_argument("--iters", type=int, default=None)
    p.add_argument("--fraction", type=float, default=None)
    p.add_argument("--tolerance", type=float, default=None)
    p.add_argument("--finetune-iters", type=int, default=None)
    p.add_argument("--structural-only", action="store_true")
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--base-lr", type=float, default=None)
    p.add_argument("--weight-decay", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--val-cadence", type=int, default=None)
    p.add_argument("--augment", dest="augment", action="store_true", default=None)
    p.add_argument("--no-augment", dest="augment", action="store_false", default=None)
    _add_data_flags(p)
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("quantize", help="post-training int8 quantization")
    p.add_argument("--model", required=True)
    p.add_argument("--calib", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--count", type=int, default=None)
    _add_data_flags(p)
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("eval", help="AP/F1 against ground truth")
    p.add_argument("--dets", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--config")
    p.add_argument("--iou", type=float, default=None)
    p.add_argument("--pr-csv")
    p.add_argument("--plot")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("detect", help="run the frame loop over a sequence")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--executor", choices=["f32", "int8"], default=None)
    p.add_argument("--conf", type=float, default=None)
    p.add_argument("--nms", type=float, default=None)
    p.add_argument("--timing")
    p.add_argument("--dump-bg", type=int, default=None)
    p.add_argument("--dump-bg-dir")
    _add_data_flags(p)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("report", help="params/MACs/arena accounting")
    p.add_argument("--model", required=True)
    p.add_argument("--csv")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ThermodetError as exc:
        print(
            json.dumps({"error": exc.category, "message": str(exc)}),
            file=sys.stderr,
        )
        return EXIT_CODES.get(exc.category, 1)
    except FileNotFoundError as exc:
        print(
            json.dumps({"error": "missing-file", "message": str(exc)}),
            file=sys.stderr,
        )
        return 2


if __name__ == "__main__":
    sys.exit(main())
