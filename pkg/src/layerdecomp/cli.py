"""Command-line entry point: ``layerdecomp <command> [options]``.

Exit codes: 0 success, 1 validation error, 2 IO error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .config import load_run_config
from .dataset import generate_dataset, list_manifests, load_dataset, write_index
from .errors import LayerDecompError, NumericError, StackLoadError, ValidationError
from .flow import DecomposeRequest, SampleConfig, request_from_stack, sample_many
from .imaging import BBox, over_composite
from .metrics import corpus_frechet, evaluate_stack, unified_score
from .model import ModelParams
from .stackio import load_stack, read_png, save_stack, write_png
from .train import train

log = logging.getLogger("layerdecomp")

EXIT_OK, EXIT_VALIDATION, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3

BOXES_HELP = """\
boxes file: a JSON list of foreground boxes, bottom-to-top, each
[x_l, y_l, x_r, y_r] in integer pixels with 0 <= x_l < x_r <= W and
0 <= y_l < y_r <= H, e.g. [[8, 8, 40, 40], [30, 12, 60, 50]].
An empty list requests a background-only decomposition."""


def read_boxes(path, frame: tuple) -> list:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"boxes file {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, list):
        raise ValidationError(f"boxes file {path} must contain a JSON list")
    boxes = []
    for k, entry in enumerate(raw):
        try:
            if not isinstance(entry, list):
                raise ValidationError("not a list")
            boxes.append(BBox.from_list(entry).validate(*frame))
        except ValidationError as exc:
            raise ValidationError(f"box {k} {entry!r} is invalid: {exc}") from None
    return boxes


def _echo_config(config: dict) -> None:
    print("config " + json.dumps(config, sort_keys=True))


def cmd_gen_data(args) -> int:
    config = {"count": args.count, "seed": args.seed, "frame": args.frame, "max_layers": args.max_layers}
    _echo_config(config)
    index = generate_dataset(args.out, args.count, args.seed, args.frame, args.max_layers)
    print(f"wrote {args.count} stacks, index {index}")
    return EXIT_OK


def cmd_train(args) -> int:
    out = Path(args.out)
    log_path = Path(args.log) if args.log else out.with_suffix(".csv")
    if args.resume is not None:
        # the checkpoint carries the schedule, seed and weights of the original run
        ckpt_params, meta, _ = ModelParams.load(args.resume)
        overrides = {"train": dict(meta.get("train_config", {})), "model": {}, "sample": {}}
        overrides["train"].pop("loss_weights", None)
        run = load_run_config(None, overrides)
        run.train.loss_weights = dict(meta.get("train_config", {}).get("loss_weights", run.train.loss_weights))
        run.model = ckpt_params.config
    else:
        overrides = {"train": {k: getattr(args, k) for k in ("seed", "lr", "batch_size")}}
        run = load_run_config(args.config, overrides)
        if log_path.exists():
            log_path.unlink()
    _echo_config(run.to_dict())
    stacks = load_dataset(args.data)
    frame = (run.model.frame, run.model.frame)
    if stacks and stacks[0].frame != frame:
        raise ValidationError(f"dataset frame {stacks[0].frame} differs from model frame {frame}")
    out.parent.mkdir(parents=True, exist_ok=True)
    run.write(out.with_name(out.name + ".config.json"))
    state = train(stacks, run.model, run.train, out=out, log_path=log_path,
                  resume=Path(args.resume) if args.resume else None, steps=args.steps,
                  progress_every=args.progress_every)
    with open(log_path) as fh:
        last = fh.read().strip().splitlines()[-1].split(",")
    print(f"step {state.step} last loss {float(last[1]):.6f}; checkpoint {out}")
    return EXIT_OK


def _write_prediction(result, input_image: np.ndarray, out: Path) -> None:
    stack = result.stack
    save_stack(stack, out)
    write_png(out / "recomposite.png", over_composite(stack))
    write_png(out / "composite_pred.png", stack.composite)
    write_png(out / "input.png", input_image)
    (out / "result.json").write_text(json.dumps({
        "layers": ["background.png"] + [f"layer_{k}.png" for k in range(len(stack.foregrounds))],
        "boxes": [l.bbox.as_list() for l in stack.foregrounds],
        "recomposite": "recomposite.png",
        "composite_pred": "composite_pred.png",
        "prompt": stack.global_prompt,
    }, indent=2) + "\n")


def _sample_config(args, run) -> SampleConfig:
    return SampleConfig(n_steps=args.steps if args.steps is not None else run.sample.n_steps,
                        cfg_scale=args.cfg if args.cfg is not None else run.sample.cfg_scale,
                        seed=args.seed if args.seed is not None else run.sample.seed,
                        uncond_image=not args.drop_uncond_image)


def cmd_decompose(args) -> int:
    params, meta, _ = ModelParams.load(args.ckpt)
    run = load_run_config(None)
    frame = (params.config.frame, params.config.frame)
    image = read_png(args.image, 3)
    if image.shape[:2] != frame:
        raise ValidationError(f"image is {image.shape[:2]}, model frame is {frame}")
    boxes = read_boxes(args.boxes, frame)
    prompt = args.prompt.split() if args.prompt else []
    cfg = _sample_config(args, run)
    _echo_config({"ckpt": str(args.ckpt), "boxes": [b.as_list() for b in boxes], "prompt": prompt, **asdict(cfg)})
    result = sample_many(params, [DecomposeRequest(image, boxes, prompt)], cfg)[0]
    out = Path(args.out)
    _write_prediction(result, image, out)
    (out / "decompose_config.json").write_text(json.dumps(
        {"ckpt": str(args.ckpt), "n_steps": cfg.n_steps, "cfg_scale": cfg.cfg_scale, "seed": cfg.seed,
         "uncond_image": cfg.uncond_image, "boxes": [b.as_list() for b in boxes], "prompt": prompt},
        indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(boxes) + 1} layers to {out}")
    return EXIT_OK


def cmd_decompose_set(args) -> int:
    params, _, _ = ModelParams.load(args.ckpt)
    run = load_run_config(None)
    root = Path(args.data)
    rels = list_manifests(root)
    stacks = [load_stack(root / rel) for rel in rels]
    cfg = _sample_config(args, run)
    _echo_config({"ckpt": str(args.ckpt), "data": str(root), **asdict(cfg)})
    results = sample_many(params, [request_from_stack(s) for s in stacks], cfg)
    out = Path(args.out)
    entries = []
    for rel, stack, result in zip(rels, stacks, results):
        sub = Path(rel).parent
        _write_prediction(result, stack.composite, out / sub)
        entries.append((sub / "manifest.json").as_posix())
    write_index(out, entries, n_steps=cfg.n_steps, cfg_scale=cfg.cfg_scale, seed=cfg.seed)
    print(f"decomposed {len(entries)} stacks into {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    gt_root = Path(args.gt)
    pred_root = Path(args.pred) if args.pred else gt_root
    if args.pred is None and not args.self_check:
        raise ValidationError("--pred is required unless --self-check is given")
    out = Path(args.out) if args.out else pred_root / "reports"
    _echo_config({"pred": str(pred_root), "gt": str(gt_root), "dtw": args.dtw, "out": str(out)})
    out.mkdir(parents=True, exist_ok=True)
    gt_rels = list_manifests(gt_root)
    pred_rels = set(list_manifests(pred_root))
    rows, preds, gts, skipped = [], [], [], []
    for rel in gt_rels:
        if rel not in pred_rels:
            print(f"warning: no prediction for {rel}; skipped", file=sys.stderr)
            skipped.append(rel)
            continue
        gt = load_stack(gt_root / rel)
        pred = load_stack(pred_root / rel)
        report = evaluate_stack(pred, gt, dtw=args.dtw)
        name = Path(rel).parent.as_posix().replace("/", "_") or "stack"
        (out / f"{name}.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n")
        rows.append({"stack": rel, "unified_score": report.unified_score,
                     **{f"mean_{k}": v for k, v in report.mean.items()},
                     "recon_psnr": report.reconstruction["psnr"], "recon_ssim": report.reconstruction["ssim"]})
        preds.append(pred)
        gts.append(gt)
    if not rows:
        print("error: every stack was skipped", file=sys.stderr)
        return EXIT_IO
    with open(out / "summary.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    aggregate = {k: float(np.mean([r[k] for r in rows])) for k in rows[0] if k != "stack"}
    aggregate["n_stacks"] = len(rows)
    aggregate["skipped"] = skipped
    if sum(len(s.layers) for s in preds) >= 2 and sum(len(s.layers) for s in gts) >= 2:
        aggregate["frechet"] = corpus_frechet(preds, gts)
    aggregate["config"] = {"pred": str(pred_root), "gt": str(gt_root), "dtw": args.dtw}
    (out / "aggregate.json").write_text(json.dumps(aggregate, indent=2) + "\n")
    print(f"evaluated {len(rows)} stacks: mean unified score {aggregate['unified_score']:.4f}, "
          f"recon PSNR {aggregate['recon_psnr']:.2f} dB")
    return EXIT_OK


def cmd_composite(args) -> int:
    stack = load_stack(args.manifest)
    write_png(args.out, over_composite(stack))
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_unified(args) -> int:
    print(f"{unified_score(args.rgb_l1, args.soft_iou):.6g}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="layerdecomp", description=__doc__.splitlines()[0],
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="synthesize a layered dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--frame", type=int, default=64)
    p.add_argument("--max-layers", type=int, default=3, help="layers per stack incl. background")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train or resume the model")
    p.add_argument("--data", required=True)
    p.add_argument("--config", help="INI file with [model], [train], [sample] sections")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--steps", type=int,
                   help="steps to run in this call (default: up to the configured schedule length)")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--log", help="CSV loss log (default: checkpoint path with .csv)")
    p.add_argument("--seed", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--progress-every", type=int, default=100)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("decompose", help="split one image into layers",
                       epilog=BOXES_HELP, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--boxes", required=True, help="JSON list of [x_l, y_l, x_r, y_r]")
    p.add_argument("--prompt", default="")
    p.add_argument("--out", required=True)
    _sampling_flags(p)
    p.set_defaults(func=cmd_decompose)

    p = sub.add_parser("decompose-set", help="decompose every stack of a dataset using its boxes and prompt")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _sampling_flags(p)
    p.set_defaults(func=cmd_decompose_set)

    p = sub.add_parser("eval", help="score predicted stacks against ground truth")
    p.add_argument("--pred")
    p.add_argument("--gt", required=True)
    p.add_argument("--out", help="report directory (default: PRED/reports)")
    p.add_argument("--dtw", action="store_true", help="align layers with DTW instead of by position")
    p.add_argument("--self-check", action="store_true", help="evaluate ground truth against itself")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("composite", help="flatten a stack manifest into an RGB PNG")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_composite)

    p = sub.add_parser("unified", help="Unified Score from RGB L1 and alpha soft IoU")
    p.add_argument("--rgb-l1", type=float, required=True)
    p.add_argument("--soft-iou", type=float, required=True)
    p.set_defaults(func=cmd_unified)
    return parser


def _sampling_flags(p) -> None:
    p.add_argument("--steps", type=int, help="Euler steps (default 20)")
    p.add_argument("--cfg", type=float, help="guidance scale s (default 2.0)")
    p.add_argument("--seed", type=int)
    p.add_argument("--drop-uncond-image", action="store_true",
                   help="ablation: drop the image condition from the text-free branch")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.command == "train":
        logging.getLogger("layerdecomp").setLevel(logging.INFO)
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (StackLoadError, OSError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValidationError, LayerDecompError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
