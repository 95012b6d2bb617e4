"""
Command-line entry point for the cascaded segmentation toolkit.

    careseg phantom-gen --count 60 --out runs/corpus --seed 0
    careseg train --config run.json --out runs/checkpoints
    careseg predict --models runs/checkpoints --in case_000_img.mvol --subgroup D8 --out case_000_pred.mvol
    careseg evaluate --pred runs/predictions --gt runs/corpus --report runs/reports --ablate-postproc
"""
import argparse
import logging
import os
import sys
from dataclasses import replace
from typing import List, Optional

from config.settings import (
    DEFAULT_PRESET, LOG_FORMAT, LOG_LEVEL, WORKERS, get_preset, load_config, save_config,
)
from services.evaluation_service import evaluate
from services.inference_service import predict_corpus, predict_file
from services.phantom_service import MANIFEST_NAME, generate_corpus, load_manifest
from services.training_service import train_ensemble
from utils.errors import CareSegError
from utils.hierarchy import Subgroup
from utils.overlay import export_overlays
from utils.postprocess import PostprocessSteps, postprocess_pipeline
from utils.volume import read_meta, read_mvol, write_meta, write_mvol

logger = logging.getLogger("careseg")

BASE_AT_CHOICES = {"zmax": "z_max", "zmin": "z_min", "z_max": "z_max", "z_min": "z_min"}


def _progress() -> bool:
    return sys.stderr.isatty()


def cmd_phantom_gen(args) -> int:
    cfg = load_config(args.config)
    corpus = replace(cfg.corpus, count=args.count, seed=args.seed)
    manifest = generate_corpus(args.out, corpus, progress=_progress())
    print(f"{len(manifest)} phantoms written to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.members is not None:
        cfg = replace(cfg, ensemble=replace(cfg.ensemble, size=args.members))
    corpus_dir = args.corpus or cfg.paths.corpus_dir
    paths = train_ensemble(cfg, corpus_dir, args.out, workers=args.workers)
    save_config(cfg, os.path.join(args.out, "config.json"))
    for path in paths:
        print(path)
    return 0


def cmd_predict(args) -> int:
    cfg = load_config(args.config)
    postprocess = not args.no_postprocess
    if os.path.isdir(args.input):
        if not os.path.exists(os.path.join(args.input, MANIFEST_NAME)):
            raise CareSegError(f"{args.input} is a directory without {MANIFEST_NAME}")
        written = predict_corpus(args.models, args.input, args.out, cfg, args.split, postprocess, args.entropy is not None)
        print(f"{len(written)} predictions written to {args.out}")
        return 0

    subgroup = args.subgroup or read_meta(args.input).get("subgroup")
    if subgroup is None:
        raise CareSegError(f"No --subgroup given and {args.input} has no subgroup in its sidecar")
    prediction = predict_file(args.models, args.input, Subgroup.parse(subgroup), args.out, cfg, postprocess, args.entropy)
    print(f"{args.out} written in {prediction.seconds:.2f}s")
    return 0


def cmd_postprocess(args) -> int:
    cfg = load_config(args.config)
    steps = PostprocessSteps.from_config(cfg.postprocess)
    steps = replace(
        steps,
        outliers=steps.outliers and not args.skip_outliers,
        base_at=BASE_AT_CHOICES[args.base_at] if args.base_at else steps.base_at,
    )
    pred = read_mvol(args.input)
    write_mvol(postprocess_pipeline(pred, steps), args.out)
    meta = read_meta(args.input)
    meta["postprocessed"] = True
    write_meta(args.out, meta)
    print(f"{args.out} written")
    return 0


def cmd_evaluate(args) -> int:
    cfg = load_config(args.config)
    case_ids: Optional[List[str]] = None
    if args.split and os.path.exists(os.path.join(args.gt, MANIFEST_NAME)):
        case_ids = list(load_manifest(args.gt, args.split)["case_id"])
    reports = evaluate(args.pred, args.gt, args.report, cfg, args.ablate_postproc, case_ids, progress=_progress())
    post = reports["post"]
    print(f"{post.num_cases} cases evaluated, reports in {args.report}")
    return 0


def cmd_overlay(args) -> int:
    image = read_mvol(args.img)
    labels = read_mvol(args.labels)
    entropy = read_mvol(args.entropy) if args.entropy else None
    paths = export_overlays(image, labels, args.out, entropy)
    print(f"{len(paths)} slices written to {args.out}")
    return 0


def cmd_config(args) -> int:
    save_config(get_preset(args.preset), args.out)
    print(f"{args.preset} config written to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="careseg", description="Cascaded LGE segmentation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", default=None, help=f"JSON config file (default: the '{DEFAULT_PRESET}' preset)")
        return p

    p = with_config(sub.add_parser("phantom-gen", help="Generate a synthetic phantom corpus"))
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_phantom_gen)

    p = with_config(sub.add_parser("train", help="Train an ensemble of cascades"))
    p.add_argument("--out", required=True, help="Checkpoint directory")
    p.add_argument("--corpus", default=None, help="Corpus directory (default: paths.corpus_dir)")
    p.add_argument("--members", type=int, default=None, help="Override ensemble.size")
    p.add_argument("--workers", type=int, default=WORKERS)
    p.set_defaults(func=cmd_train)

    p = with_config(sub.add_parser("predict", help="Predict one volume or a corpus split"))
    p.add_argument("--models", required=True, help="Directory of member checkpoints")
    p.add_argument("--in", dest="input", required=True, help="Image MVOL, or a corpus directory")
    p.add_argument("--subgroup", choices=[s.value for s in Subgroup], default=None)
    p.add_argument("--no-postprocess", action="store_true")
    p.add_argument("--out", required=True, help="Label MVOL, or an output directory for a corpus")
    p.add_argument("--entropy", nargs="?", const="", default=None,
                   help="Write the entropy map (a path for single volumes)")
    p.add_argument("--split", default="test")
    p.set_defaults(func=cmd_predict)

    p = with_config(sub.add_parser("postprocess", help="Post-process a label volume"))
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--skip-outliers", action="store_true")
    p.add_argument("--base-at", choices=sorted(BASE_AT_CHOICES), default=None)
    p.set_defaults(func=cmd_postprocess)

    p = with_config(sub.add_parser("evaluate", help="Evaluate predictions against ground truth"))
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--ablate-postproc", action="store_true")
    p.add_argument("--split", default="test", help="Manifest split whose cases must all be predicted")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("overlay", help="Export per-slice overlay PNGs")
    p.add_argument("--img", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--entropy", default=None)
    p.set_defaults(func=cmd_overlay)

    p = sub.add_parser("config", help="Write a fully populated config file")
    p.add_argument("--preset", choices=["desk", "full"], default=DEFAULT_PRESET)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_config)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    logging.basicConfig(level=getattr(logging, LOG_LEVEL, logging.INFO), format=LOG_FORMAT)
    args = build_parser().parse_args(argv)
    # a bare --entropy on a single volume has no path to write to
    if getattr(args, "entropy", None) == "" and args.func is cmd_predict and not os.path.isdir(args.input):
        args.entropy = os.path.splitext(args.out)[0] + "_entropy.mvol"
    try:
        return args.func(args)
    except CareSegError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:
        logger.error(f"Unexpected failure in {args.command}: {e}", exc_info=True)
        return 1


if __name__ == "__main__":
    sys.exit(main())
