"""Command-line frontend: dataset tooling, training, freezing, inference, serving.

Exit codes: 0 success, 1 runtime error, 2 usage error. Verbosity comes from
the BONNET_LOG environment variable (error, info, or debug).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from . import runtime, server, toydata
from .config import load_config
from .dataset import StandardDataset, import_dataset
from .errors import BonnetError
from .freezer import freeze
from .trainer import fit

log = logging.getLogger("bonnet")

_LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


def _setup_logging():
    level = os.environ.get("BONNET_LOG", "error").lower()
    logging.basicConfig(level=_LOG_LEVELS.get(level, logging.ERROR),
                        format="%(levelname)s %(name)s: %(message)s")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bonnet",
                                     description="semantic segmentation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p_dataset = sub.add_parser("dataset", help="dataset utilities")
    dsub = p_dataset.add_subparsers(dest="dataset_command", required=True)

    p_import = dsub.add_parser("import", help="convert a corpus to the standard layout")
    p_import.add_argument("--images", required=True)
    p_import.add_argument("--labels", required=True)
    p_import.add_argument("--data", required=True, help="data.yaml describing the classes")
    p_import.add_argument("--out", required=True, help="standard dataset root to create")
    p_import.add_argument("--seed", required=True, type=int)

    p_toy = dsub.add_parser("gen-toy", help="generate the synthetic shapes corpus")
    p_toy.add_argument("--out", required=True)
    p_toy.add_argument("--count", required=True, type=int)
    p_toy.add_argument("--size", required=True, type=int)
    p_toy.add_argument("--seed", required=True, type=int)

    p_train = sub.add_parser("train", help="train a model")
    p_train.add_argument("--data", required=True)
    p_train.add_argument("--net", required=True)
    p_train.add_argument("--train", required=True)
    p_train.add_argument("--log", required=True)
    p_train.add_argument("--seed", type=int, default=0)

    p_freeze = sub.add_parser("freeze", help="export deployable frozen models")
    p_freeze.add_argument("--log", required=True)
    p_freeze.add_argument("--which", choices=("iou", "acc"), default="iou")
    p_freeze.add_argument("--out", required=True)

    p_infer = sub.add_parser("infer", help="run inference")
    isub = p_infer.add_subparsers(dest="infer_command", required=True)

    p_img = isub.add_parser("image", help="segment a single image")
    p_img.add_argument("--model", required=True)
    p_img.add_argument("--variant", default="nchw")
    p_img.add_argument("--backend", default="reference_float")
    p_img.add_argument("--device", default="cpu_single")
    p_img.add_argument("--input", required=True)
    p_img.add_argument("--out-mask", required=True)
    p_img.add_argument("--out-overlay")
    p_img.add_argument("--alpha", type=float, default=0.5)

    p_seq = isub.add_parser("seq", help="segment a directory of frames")
    p_seq.add_argument("--model", required=True)
    p_seq.add_argument("--variant", default="nchw")
    p_seq.add_argument("--backend", default="reference_float")
    p_seq.add_argument("--device", default="cpu_single")
    p_seq.add_argument("--input-dir", required=True)
    p_seq.add_argument("--out-dir", required=True)

    p_serve = sub.add_parser("serve", help="run the HTTP inference service")
    p_serve.add_argument("--model", required=True)
    p_serve.add_argument("--variant", default="nchw")
    p_serve.add_argument("--backend", default="reference_float")
    p_serve.add_argument("--port", type=int, default=8080)
    p_serve.add_argument("--bind", default="127.0.0.1")

    p_config = sub.add_parser("config", help="configuration utilities")
    csub = p_config.add_subparsers(dest="config_command", required=True)
    p_rand = csub.add_parser("randomize",
                             help="draw hyper-parameter variations for random search")
    p_rand.add_argument("--net", required=True)
    p_rand.add_argument("--train", required=True)
    p_rand.add_argument("--out-dir", required=True)
    p_rand.add_argument("--count", type=int, default=8)
    p_rand.add_argument("--seed", type=int, default=0)

    return parser


def _cmd_dataset_import(args) -> int:
    data_cfg = load_config(args.data, "data")
    data_cfg = type(data_cfg)(classes=data_cfg.classes,
                              inference_size=data_cfg.inference_size,
                              dataset_location=args.out,
                              split=data_cfg.split)
    ds = import_dataset(args.images, args.labels, data_cfg, args.seed)
    counts = {name: len(ds.split_ids(name)) for name in ("train", "valid", "test")}
    print(f"imported {sum(counts.values())} samples into {args.out}")
    print(f"splits: train={counts['train']} valid={counts['valid']} test={counts['test']}")
    freqs = " ".join(f"{c.name}={ds.frequencies[c.id]:.4f}" for c in data_cfg.classes)
    print(f"train class frequencies: {freqs}")
    return 0


def _cmd_gen_toy(args) -> int:
    cfg = toydata.generate_toy(args.out, args.count, args.size, args.seed)
    print(f"wrote {args.count} samples of size {args.size} under {args.out}")
    print(f"classes: {', '.join(c.name for c in cfg.classes)}")
    return 0


def _cmd_train(args) -> int:
    data_cfg = load_config(args.data, "data")
    net_cfg = load_config(args.net, "net")
    train_cfg = load_config(args.train, "train")
    dataset = StandardDataset.open(data_cfg.dataset_location)
    tlog = fit(dataset, data_cfg, net_cfg, train_cfg, args.log, seed=args.seed)
    print(f"trained {train_cfg.max_epochs} epochs; best mIoU {tlog.best_miou:.4f}, "
          f"best mAcc {tlog.best_macc:.4f}")
    print(f"log directory: {args.log}")
    return 0


def _cmd_freeze(args) -> int:
    which = {"iou": "best_iou", "acc": "best_acc"}[args.which]
    paths = freeze(args.log, which, args.out)
    for name in ("nchw", "nhwc", "optimized", "quantized"):
        print(f"wrote {paths[name]}")
    print(f"wrote {paths['nodes']}")
    return 0


def _load_rgb(path):
    from .imgio import load_image
    return load_image(path)


def _cmd_infer_image(args) -> int:
    from .imgio import encode_mask_png, save_image
    with runtime.open_session(args.model, args.variant, args.backend, args.device) as session:
        image = _load_rgb(args.input)
        mask = runtime.infer(session, image)
        with open(args.out_mask, "wb") as fh:
            fh.write(encode_mask_png(mask.labels))
        if args.out_overlay:
            overlay = runtime.colorize(mask.labels, session.class_colors, image,
                                       alpha=args.alpha)
            save_image(overlay, args.out_overlay)
        timing = " ".join(f"{k}={v:.2f}ms" for k, v in mask.timing.items())
        print(f"mask -> {args.out_mask} ({timing})")
    return 0


def _cmd_infer_seq(args) -> int:
    from .imgio import encode_mask_png
    frames = sorted(f for f in os.listdir(args.input_dir)
                    if f.lower().endswith((".png", ".jpg", ".jpeg")))
    if not frames:
        print(f"no frames under {args.input_dir}", file=sys.stderr)
        return 1
    os.makedirs(args.out_dir, exist_ok=True)
    stage_sums = {"preprocess": 0.0, "inference": 0.0, "postprocess": 0.0}
    with runtime.open_session(args.model, args.variant, args.backend, args.device) as session:
        for frame in frames:
            image = _load_rgb(os.path.join(args.input_dir, frame))
            mask = runtime.infer(session, image)
            stem = os.path.splitext(frame)[0]
            with open(os.path.join(args.out_dir, f"{stem}.png"), "wb") as fh:
                fh.write(encode_mask_png(mask.labels))
            for k in stage_sums:
                stage_sums[k] += mask.timing[k]
    n = len(frames)
    means = " ".join(f"{k}={v / n:.2f}ms" for k, v in stage_sums.items())
    print(f"{n} frames -> {args.out_dir} (mean {means})")
    return 0


def _cmd_serve(args) -> int:
    cfg = server.ServeConfig(model_dir=args.model, variant=args.variant,
                             backend=args.backend, bind=args.bind, port=args.port)
    return server.serve(cfg)


def _cmd_config_randomize(args) -> int:
    from .config import randomize_hyperparams, save_config
    from .seeding import stable_seed
    net = load_config(args.net, "net")
    train = load_config(args.train, "train")
    os.makedirs(args.out_dir, exist_ok=True)
    for i in range(args.count):
        rng = np.random.Generator(np.random.PCG64(
            stable_seed("hp-search", args.seed, i)))
        net_i, train_i = randomize_hyperparams(net, train, rng)
        save_config(net_i, os.path.join(args.out_dir, f"net_{i:03d}.yaml"))
        save_config(train_i, os.path.join(args.out_dir, f"train_{i:03d}.yaml"))
        print(f"draw {i:03d}: lr={train_i.learn_rate:.5f} "
              f"policy={train_i.weighting_policy} gamma={train_i.focal_gamma} "
              f"keep={net_i.dropout_keep}")
    return 0


def main(argv=None) -> int:
    _setup_logging()
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "dataset":
            if args.dataset_command == "import":
                return _cmd_dataset_import(args)
            return _cmd_gen_toy(args)
        if args.command == "train":
            return _cmd_train(args)
        if args.command == "freeze":
            return _cmd_freeze(args)
        if args.command == "infer":
            if args.infer_command == "image":
                return _cmd_infer_image(args)
            return _cmd_infer_seq(args)
        if args.command == "serve":
            return _cmd_serve(args)
        if args.command == "config":
            return _cmd_config_randomize(args)
        parser.error(f"unknown command {args.command!r}")
    except BonnetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 2


if __name__ == "__main__":
    sys.exit(main())
