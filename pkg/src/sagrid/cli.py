"""Command-line entry point: synth | train | eval | ablate | visualize.

Every command takes --seed; all randomness flows from it. Outputs land under
--out in a fixed layout (checkpoints/, logs/, reports/, viz/). The SAG_THREADS
environment variable caps worker parallelism for the ablation sweep.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .data import DatasetManifest, SynthSpec, TrainData, generate_synthetic, load_image, load_manifest, save_image
from .model import BackboneConfig, build_model, load_checkpoint, save_checkpoint
from .retrieval import evaluate, extract_embeddings, format_report, save_embeddings
from .tensor import Tensor, no_grad
from .train import TrainConfig, preprocess, train
from .viz import grid_to_gray, overlay_grid

TABLE_CONFIGS = [
    ("Baseline", ()),
    ("D1", (1,)),
    ("D2", (2,)),
    ("D3", (3,)),
    ("D4", (4,)),
    ("D1,2", (1, 2)),
    ("D1,2,3", (1, 2, 3)),
    ("D1,2,3,4", (1, 2, 3, 4)),
]


def _parse_depths(text: str) -> tuple:
    if text.strip().lower() in ("none", ""):
        return ()
    try:
        depths = tuple(sorted({int(tok) for tok in text.split(",")}))
    except ValueError:
        raise ValueError(f"bad --depths value {text!r}; use e.g. '4', '1,2,3,4' or 'none'")
    if not set(depths) <= {1, 2, 3, 4}:
        raise ValueError(f"depths must lie in 1..4, got {text!r}")
    return depths


def _parse_channels(text: str) -> tuple:
    parts = tuple(int(tok) for tok in text.split(","))
    if len(parts) != 4:
        raise ValueError(f"--channels needs 4 comma-separated counts, got {text!r}")
    return parts


def _grid_hw(input_hw, depth: int) -> tuple:
    return input_hw[0] // 2 ** (depth + 1), input_hw[1] // 2 ** (depth + 1)


def _layout(out_dir: str) -> None:
    for sub in ("checkpoints", "logs", "reports", "viz"):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)


def cmd_synth(args) -> int:
    spec = SynthSpec(num_ids=args.ids, cams=args.cams, per_cam=args.per,
                     height=args.height, width=args.width, noise=args.noise,
                     cam_strength=args.cam_strength, clutter=args.clutter, seed=args.seed)
    manifest = generate_synthetic(spec, args.out)
    counts = {name: len(manifest.split(name)) for name in ("train", "query", "gallery")}
    test_ids = len({it.raw_pid for it in manifest.items if it.split != "train"})
    print(f"ids\t{spec.num_ids}")
    print(f"images\t{len(manifest.items)}")
    print(f"cameras\t{spec.cams}")
    print(f"train_ids\t{manifest.num_train_ids}")
    print(f"train_images\t{counts['train']}")
    print(f"test_ids\t{test_ids}")
    print(f"query_images\t{counts['query']}")
    print(f"gallery_images\t{counts['gallery']}")
    print(f"out\t{os.path.abspath(args.out)}")
    return 0


def _read_config_file(path) -> dict:
    values = {}
    with open(path) as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}: bad config line {line!r} (expected key=value)")
            key, val = (part.strip() for part in line.split("=", 1))
            values[key] = val
    return values


_TRAIN_KEYS = {
    "epochs": int, "batch_size": int, "momentum": float, "weight_decay": float,
    "lr_backbone": float, "lr_classifier": float, "gamma": float, "step_size": int,
    "flip_prob": float, "erase_prob": float, "val_fraction": float, "seed": int,
}


def _build_train_config(args) -> TrainConfig:
    file_values = _read_config_file(args.config) if args.config else {}
    kwargs = {}
    for key, cast in _TRAIN_KEYS.items():
        cli_val = getattr(args, key, None)
        if cli_val is not None:
            kwargs[key] = cli_val
        elif key in file_values:
            kwargs[key] = cast(file_values[key])
    unknown = set(file_values) - set(_TRAIN_KEYS)
    if unknown:
        raise ValueError(f"unknown config keys: {', '.join(sorted(unknown))}")
    return TrainConfig(**kwargs)


def _l2_depths_from_flag(text):
    if text is None or text == "auto":
        return None
    if text == "none":
        return frozenset()
    return frozenset(int(tok) for tok in text.split(","))


def cmd_train(args) -> int:
    manifest = load_manifest(args.data)
    depths = _parse_depths(args.depths)
    cfg = _build_train_config(args)
    model_cfg = BackboneConfig(
        stage_channels=_parse_channels(args.channels),
        input_hw=(args.input_h, args.input_w),
        num_classes=max(manifest.num_train_ids, 2),
        l2_depths=_l2_depths_from_flag(args.l2_depths),
    )
    model = build_model(model_cfg, depths, seed=cfg.seed)
    cfg.input_hw = model_cfg.input_hw
    _layout(args.out)
    data = TrainData(manifest)
    log = train(model, data, cfg, out_dir=args.out,
                log_fn=(print if not args.quiet else None))
    print(f"best_epoch\t{log.best_epoch}")
    print(f"best_val_rank1\t{log.best_val_rank1:.4f}")
    return 0


def cmd_eval(args) -> int:
    model, meta = load_checkpoint(args.checkpoint)
    manifest = load_manifest(args.data)
    query = manifest.split("query")
    gallery = manifest.split("gallery")
    mean = meta.get("extra", {}).get("mean_rgb", manifest.mean_rgb)
    report = evaluate(model, query, gallery, manifest.root, mean,
                      rerank=args.rerank, k1=args.k1, k2=args.k2, lam=args.lam,
                      input_hw=tuple(meta["config"]["input_hw"]))
    text = format_report(report)
    print(text)
    if args.out:
        _layout(args.out)
        with open(os.path.join(args.out, "reports", "eval.txt"), "w") as fh:
            fh.write(text + "\n")
    if args.save_embeddings:
        emb = extract_embeddings(model, query + gallery, manifest.root, mean,
                                 input_hw=tuple(meta["config"]["input_hw"]))
        save_embeddings(args.save_embeddings, emb)
    return 0


def _ablate_one(task) -> tuple:
    label, depths, data_dir, out_dir, epochs, seed, channels, input_hw = task
    manifest = load_manifest(data_dir)
    model_cfg = BackboneConfig(stage_channels=channels, input_hw=input_hw,
                               num_classes=max(manifest.num_train_ids, 2))
    model = build_model(model_cfg, depths, seed=seed)
    cfg = TrainConfig(epochs=epochs, seed=seed, input_hw=input_hw)
    run_dir = os.path.join(out_dir, "runs", label.replace(",", "").replace(" ", "_"))
    train(model, TrainData(manifest), cfg, out_dir=run_dir)
    report = evaluate(model, manifest.split("query"), manifest.split("gallery"),
                      manifest.root, manifest.mean_rgb, input_hw=input_hw)
    geom = ";".join(f"(h={_grid_hw(input_hw, d)[0]},w={_grid_hw(input_hw, d)[1]})" for d in depths)
    return (label, geom or "-", report.rank(1), report.rank(5), report.rank(10), report.map)


def cmd_ablate(args) -> int:
    _layout(args.out)
    channels = _parse_channels(args.channels)
    input_hw = (args.input_h, args.input_w)
    tasks = [
        (label, depths, args.data, args.out, args.epochs, args.seed, channels, input_hw)
        for label, depths in TABLE_CONFIGS
    ]
    workers = args.workers
    cap = os.environ.get("SAG_THREADS")
    if cap:
        workers = max(1, min(workers, int(cap)))
    if workers > 1:
        import multiprocessing as mp

        with mp.get_context("spawn").Pool(workers) as pool:
            rows = pool.map(_ablate_one, tasks)
    else:
        rows = [_ablate_one(t) for t in tasks]

    lines = ["config\tgrids\tR1\tR5\tR10\tmAP"]
    for label, geom, r1, r5, r10, ap in rows:
        lines.append(f"{label}\t{geom}\t{100*r1:.2f}\t{100*r5:.2f}\t{100*r10:.2f}\t{100*ap:.2f}")
    text = "\n".join(lines)
    print(text)
    report_path = os.path.join(args.out, "reports", "ablation.tsv")
    with open(report_path, "w") as fh:
        fh.write(text + "\n")
    return 0


def cmd_visualize(args) -> int:
    model, meta = load_checkpoint(args.checkpoint)
    if not model.depths:
        raise ValueError("checkpoint has no attention depths; nothing to visualize")
    mean = meta.get("extra", {}).get("mean_rgb", (0.5, 0.5, 0.5))
    _layout(args.out)
    input_hw = tuple(meta["config"]["input_hw"])
    for path in args.images:
        image = load_image(path)
        batch = preprocess(image, 2.0 * np.asarray(mean) - 1.0, input_hw)[None].astype(np.float32)
        with no_grad():
            _, grids = model.forward(Tensor(batch), train=False)
        stem = os.path.splitext(os.path.basename(path))[0]
        for depth, grid in grids.items():
            native = grid.values.data[0, 0]
            gray = grid_to_gray(native)
            save_image(gray, os.path.join(args.out, "viz", f"{stem}_d{depth}_grid.ppm"))
            overlay = overlay_grid(image, native)
            save_image(overlay, os.path.join(args.out, "viz", f"{stem}_d{depth}_overlay.ppm"))
        print(f"visualized\t{path}\tdepths={sorted(grids)}")
    return 0


def _add_model_flags(p) -> None:
    p.add_argument("--channels", default="16,32,64,128", help="stage channel counts")
    p.add_argument("--input-h", type=int, default=160, dest="input_h")
    p.add_argument("--input-w", type=int, default=64, dest="input_w")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sagrid", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic identity dataset")
    p.add_argument("--out", default="./data/synth")
    p.add_argument("--ids", type=int, default=8)
    p.add_argument("--cams", type=int, default=2)
    p.add_argument("--per", type=int, default=10, help="images per identity per camera")
    p.add_argument("--height", type=int, default=160)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--cam-strength", type=float, default=0.1, dest="cam_strength")
    p.add_argument("--clutter", type=int, default=0, help="distractor rectangles per image")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--depths", default="4", help="comma list of attention depths, or 'none'")
    p.add_argument("--config", default=None, help="key=value config file; flags override it")
    p.add_argument("--l2-depths", default=None, dest="l2_depths",
                   help="'auto' (default rule), 'none', or a comma list")
    _add_model_flags(p)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None, dest="batch_size")
    p.add_argument("--momentum", type=float, default=None)
    p.add_argument("--weight-decay", type=float, default=None, dest="weight_decay")
    p.add_argument("--lr", type=float, default=None, dest="lr_backbone")
    p.add_argument("--lr-classifier", type=float, default=None, dest="lr_classifier")
    p.add_argument("--gamma", type=float, default=None)
    p.add_argument("--step-size", type=int, default=None, dest="step_size")
    p.add_argument("--flip-prob", type=float, default=None, dest="flip_prob")
    p.add_argument("--erase-prob", type=float, default=None, dest="erase_prob")
    p.add_argument("--val-fraction", type=float, default=None, dest="val_fraction")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on query/gallery splits")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--rerank", action="store_true")
    p.add_argument("--k1", type=int, default=20)
    p.add_argument("--k2", type=int, default=6)
    p.add_argument("--lambda", type=float, default=0.3, dest="lam")
    p.add_argument("--save-embeddings", default=None, dest="save_embeddings")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and evaluate the 8 depth configurations")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=60)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    _add_model_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("visualize", help="export attention grids for images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--images", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_visualize)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else 0
    try:
        return args.func(args)
    except Exception as exc:  # one-line diagnostic, nonzero exit
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
