"""Command-line entry points: prepare, train, eval, score.

Exit codes: 0 success, 1 runtime failure, 2 usage or config error. On
failure a single machine-parseable JSON line is printed to stderr before
any partial output.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

from . import engine
from .config import ConfigError, load_config
from .dataset import (
    ATTRIBUTES,
    MANIFEST_COLUMNS,
    PortraitRecord,
    iter_manifest,
    load_manifest,
    split_records,
)
from .errors import NoFaceFound, PortraitQAError
from .metrics import SceneMetrics, validate_report
from .preprocess import (
    ExternalFaceDetector,
    NullFaceDetector,
    extract_face,
    load_image,
)
from .prompts import PromptFeatures, marginals
from .seeding import seed_everything

USAGE_EXIT = 2
RUNTIME_EXIT = 1


def _fail(code: int, error: str, message: str) -> int:
    print(json.dumps({"error": error, "message": message}), file=sys.stderr)
    return code


def _build_detector(args) -> object:
    if args.detector == "external":
        if not args.detector_cmd:
            raise ConfigError("--detector external requires --detector-cmd")
        return ExternalFaceDetector(args.detector_cmd.split())
    return NullFaceDetector()


def cmd_prepare(args) -> int:
    manifest_in = Path(args.manifest_in)
    detector = _build_detector(args)
    summary = {"images": 0, "faces_manifest": 0, "faces_detected": 0,
               "fallbacks": 0, "errors": 0}
    rows = []
    for row_no, rec, error in iter_manifest(manifest_in, args.attribute,
                                            images_root=args.images_root):
        summary["images"] += 1
        if error is None:
            try:
                image = load_image(rec.image_ref)
                face = extract_face(rec, image, detector)
            except (OSError, PortraitQAError) as exc:
                error = exc
        if error is not None:
            summary["errors"] += 1
            print(json.dumps({"error": type(error).__name__, "row": row_no,
                              "message": str(error)}), file=sys.stderr)
            continue
        if face.source == "manifest":
            summary["faces_manifest"] += 1
        elif face.source == "detector":
            summary["faces_detected"] += 1
        else:
            summary["fallbacks"] += 1
        rows.append([str(rec.image_ref), rec.scene_id, rec.split, rec.attribute,
                     f"{rec.jod:.6f}", *face.box])
    out = Path(args.manifest_out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_COLUMNS)
        writer.writerows(rows)
    print(json.dumps({"summary": summary, "manifest_out": str(out)}))
    return RUNTIME_EXIT if summary["errors"] else 0


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.deterministic:
        cfg.deterministic = True
    if args.output_dir:
        cfg.output_dir = args.output_dir
    cfg.validate()
    run_dir = engine.fit(cfg, resume_from=args.resume)
    print(json.dumps({"run_dir": str(run_dir)}))
    return 0


def cmd_eval(args) -> int:
    bundle = engine.load_checkpoint(args.checkpoint)
    cfg = bundle.cfg
    records = load_manifest(args.manifest, cfg.attribute)
    records = split_records(records, args.split)
    if not records:
        raise ConfigError(f"split {args.split!r} is empty for attribute {cfg.attribute!r}")
    ctx = engine.PipelineContext(cfg=cfg)
    score_fn = engine.model_score_fn(bundle.model, ctx)
    scored = [(r, score_fn(r)) for r in records]
    report = engine.evaluate_scored(scored, cfg)
    report_dict = report.to_dict()
    validate_report(report_dict)

    out_dir = Path(args.output_dir or "eval_out")
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(
        json.dumps(report_dict, indent=2, sort_keys=True), encoding="utf-8")
    _write_scatter(out_dir / "scatter.tsv", scored, report)
    print(json.dumps({"averaged": report.averaged,
                      "n_scenes_used": report.n_scenes_used,
                      "report": str(out_dir / "report.json")}))
    return 0


def _write_scatter(path: Path, scored, report) -> None:
    """Per-record scatter data: raw prediction, per-scene mapped prediction, gt."""
    with path.open("w", encoding="utf-8") as fh:
        fh.write("prediction\tmapped_prediction\tgt\tscene\n")
        for record, pred in scored:
            entry = report.per_scene.get(record.scene_id)
            if isinstance(entry, SceneMetrics):
                mapped = float(entry.fit.predict([pred])[0])
                mapped_cell = f"{mapped:.8g}"
            else:
                mapped_cell = ""
            fh.write(f"{pred:.8g}\t{mapped_cell}\t{record.jod:.8g}\t{record.scene_id}\n")


def cmd_score(args) -> int:
    bundle = engine.load_checkpoint(args.checkpoint)
    cfg = bundle.cfg
    image_path = Path(args.image)
    if not image_path.is_file():
        raise ConfigError(f"image not found: {image_path}")
    face_box = None
    if args.face_box:
        parts = [int(v) for v in args.face_box.replace(",", " ").split()]
        if len(parts) != 4:
            raise ConfigError("--face-box expects x,y,w,h")
        face_box = tuple(parts)

    record = PortraitRecord(
        image_ref=image_path, scene_id="adhoc", jod=0.0,
        attribute=cfg.attribute, split="test", face_box=face_box)
    detector = _build_detector(args)
    if cfg.branches.use_facial and face_box is None:
        image = load_image(image_path)
        try:
            face = extract_face(record, image, detector,
                                allow_fallback=args.allow_fallback)
        except NoFaceFound as exc:
            raise PortraitQAError(
                f"{exc} (pass --allow-fallback to score with a central crop)")
        if face.source == "fallback":
            print(json.dumps({"warning": "no face found; using central fallback crop"}),
                  file=sys.stderr)

    ctx = engine.PipelineContext(cfg=cfg, detector=detector)
    score = engine.model_score_fn(bundle.model, ctx)(record)
    out = {"image": str(image_path), "score": score}
    if args.verbose and cfg.branches.use_liqe:
        probs = ctx.prompt_cache[str(image_path)]
        scene_m, distortion_m, quality_m, expected = marginals(
            PromptFeatures(probs=probs), ctx.grid)
        out["scene_marginal"] = dict(zip(ctx.grid.scenes, scene_m.tolist()))
        out["distortion_marginal"] = dict(
            zip(ctx.grid.distortions, distortion_m.tolist()))
        out["quality_marginal"] = dict(zip(ctx.grid.levels, quality_m.tolist()))
        out["expected_quality_level"] = expected
    print(json.dumps(out, indent=2 if args.verbose else None))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="portraitqa",
        description="Portrait image quality assessment: training, evaluation, scoring.")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override the RNG seed")
    common.add_argument("--deterministic", action="store_true",
                        help="force deterministic kernels and dataloading")

    p = sub.add_parser("prepare", parents=[common],
                       help="materialize face boxes into a manifest")
    p.add_argument("manifest_in")
    p.add_argument("manifest_out")
    p.add_argument("--images-root", default=None,
                   help="root for relative image paths (default: manifest dir)")
    p.add_argument("--attribute", choices=ATTRIBUTES, default="overall")
    p.add_argument("--detector", choices=["passthrough", "external"],
                   default="passthrough",
                   help="passthrough keeps manifest boxes (fallback crop "
                        "otherwise); external runs a detector subprocess")
    p.add_argument("--detector-cmd", default=None,
                   help="command line for --detector external (image PNG on "
                        "stdin, 'x y w h conf' lines on stdout)")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", parents=[common], help="train from a config file")
    p.add_argument("--config", required=True, help="path to the YAML run config")
    p.add_argument("--output-dir", default=None, help="override config output_dir")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common],
                       help="evaluate a checkpoint on a manifest split")
    p.add_argument("checkpoint")
    p.add_argument("manifest")
    p.add_argument("--split", choices=["train", "val", "test"], default="val")
    p.add_argument("--output-dir", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("score", parents=[common], help="score a single image")
    p.add_argument("checkpoint")
    p.add_argument("image")
    p.add_argument("--face-box", default=None, help="x,y,w,h of the face in pixels")
    p.add_argument("--allow-fallback", action="store_true",
                   help="score with a central crop when no face is found")
    p.add_argument("--detector", choices=["passthrough", "external"],
                   default="passthrough")
    p.add_argument("--detector-cmd", default=None)
    p.add_argument("--verbose", action="store_true",
                   help="also print prompt marginals and expected quality level")
    p.set_defaults(func=cmd_score)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.seed is not None or args.deterministic:
        seed_everything(args.seed or 0, args.deterministic)
    try:
        return args.func(args)
    except ConfigError as exc:
        return _fail(USAGE_EXIT, type(exc).__name__, str(exc))
    except PortraitQAError as exc:
        return _fail(RUNTIME_EXIT, type(exc).__name__, str(exc))
    except OSError as exc:
        return _fail(RUNTIME_EXIT, type(exc).__name__, str(exc))


if __name__ == "__main__":
    sys.exit(main())
