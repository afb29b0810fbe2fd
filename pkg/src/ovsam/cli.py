"""Command-line entry points for every stage plus inference and serving."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
from PIL import Image

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ovsam")
    parser.add_argument("--config", type=Path, help="run config JSON")
    parser.add_argument("--seed", type=int, help="override run seed")
    parser.add_argument("--out", type=Path, help="override output directory")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-data", help="generate the five dataset splits")
    sub.add_parser("pretrain-clip", help="contrastive pretraining of the frozen backbone")
    sub.add_parser("train-teacher", help="train the teacher encoder + decoder")
    sub.add_parser("distill", help="stage-1 feature distillation")
    sub.add_parser("train", help="stage-2 joint training")

    p_eval = sub.add_parser("eval", help="evaluate on the eval split")
    p_eval.add_argument("--prompt-mode", choices=["gt_box", "center_point"], default="gt_box")
    p_eval.add_argument(
        "--classifier", choices=["ovsam", "image_crop", "feature_crop"], default="ovsam"
    )
    p_eval.add_argument("--no-fusion", action="store_true")
    p_eval.add_argument("--report", action="store_true", help="also write report.md")

    p_infer = sub.add_parser("infer", help="segment + label one image")
    p_infer.add_argument("--image", type=Path, required=True)
    p_infer.add_argument("--point", help="x,y foreground point prompt")
    p_infer.add_argument("--box", help="x1,y1,x2,y2 box prompt")
    p_infer.add_argument("--checkpoint", type=Path)
    p_infer.add_argument("--mask-out", type=Path, help="mask PNG path (default <image>.mask.png)")

    p_serve = sub.add_parser("serve", help="run the HTTP inference service")
    p_serve.add_argument("--host", default="127.0.0.1")
    p_serve.add_argument("--port", type=int, default=8000)
    p_serve.add_argument("--checkpoint", type=Path)
    p_serve.add_argument("--static-dir", type=Path, help="demo UI asset directory")
    return parser


def _load_run_config(args):
    from .pipeline import RunConfig

    if args.config is not None:
        if not args.config.exists():
            raise FileNotFoundError(f"config file not found: {args.config}")
        with open(args.config) as f:
            try:
                cfg = RunConfig.from_json(json.load(f))
            except (json.JSONDecodeError, ValueError, TypeError) as e:
                raise ValueError(f"bad config {args.config}: {e}") from e
    else:
        cfg = RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
        for sub in (cfg.clip, cfg.teacher, cfg.adapter, cfg.train):
            sub.seed = args.seed
    if args.out is not None:
        cfg.out_dir = str(args.out)
    return cfg


def _cmd_infer(args) -> int:
    from .decoder import Prompt
    from .model import OpenVocabSam

    if args.checkpoint is None:
        print("infer needs --checkpoint", file=sys.stderr)
        return EXIT_CONFIG
    if not args.image.exists():
        print(f"image not found: {args.image}", file=sys.stderr)
        return EXIT_CONFIG
    if not (args.point or args.box):
        print("need --point or --box", file=sys.stderr)
        return EXIT_CONFIG
    model = OpenVocabSam.load(args.checkpoint)
    image = np.asarray(Image.open(args.image).convert("RGB"), dtype=np.float32) / 255.0
    prompts = []
    if args.point:
        x, y = (float(v) for v in args.point.split(","))
        prompts.append(Prompt.point(x, y))
    if args.box:
        prompts.append(Prompt.box(*(float(v) for v in args.box.split(","))))
    results = model.segment(image, prompts)
    mask_out = args.mask_out or args.image.with_suffix(".mask.png")
    for i, r in enumerate(results):
        label = model.vocab.names[r.fused.argmax]
        score = float(r.fused.probs[r.fused.argmax])
        print(f"prompt {i}: {label} (score {score:.3f}, iou confidence {r.iou_pred:.3f})")
    Image.fromarray(results[0].mask * 255, mode="L").save(mask_out)
    print(f"mask written to {mask_out}")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)

    try:
        if args.command == "infer":
            return _cmd_infer(args)
        if args.command == "serve":
            from .serve import run_server

            cfg = _load_run_config(args)
            run_server(
                host=args.host,
                port=args.port,
                checkpoint=args.checkpoint,
                data_root=cfg.data_root,
                static_dir=args.static_dir,
            )
            return EXIT_OK

        cfg = _load_run_config(args)
        from . import pipeline

        if args.command == "gen-data":
            manifests = pipeline.stage_gen_data(cfg)
            print(f"built {len(manifests)} splits under {cfg.data_root}")
        elif args.command == "pretrain-clip":
            _, _, history = pipeline.stage_pretrain_clip(cfg)
            print(f"held-out zero-shot accuracy: {history['holdout_accuracy']:.4f}")
        elif args.command == "train-teacher":
            _, _, history = pipeline.stage_train_teacher(cfg)
            print(f"held-out mean IoU: {history['holdout_iou']:.4f}")
        elif args.command == "distill":
            _, history = pipeline.stage_distill(cfg)
            print(
                f"held-out distill loss: {history['heldout_initial']:.5f} -> "
                f"{history['heldout_final']:.5f}"
            )
        elif args.command == "train":
            pipeline.stage_train_joint(cfg)
            print(f"checkpoint written under {cfg.out_dir}")
        elif args.command == "eval":
            metrics = pipeline.stage_eval(
                cfg,
                prompt_mode=args.prompt_mode,
                classifier=args.classifier,
                fusion=not args.no_fusion,
                write_report=args.report,
            )
            print(json.dumps(metrics.to_json(), indent=2, sort_keys=True))
        return EXIT_OK
    except (FileNotFoundError, ValueError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:  # noqa: BLE001 - CLI boundary
        print(f"runtime error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
