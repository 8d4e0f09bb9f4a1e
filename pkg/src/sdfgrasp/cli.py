"""Command line: corpus generation, training, reconstruction evaluation, planning and comparison.

Exit codes: 0 success, 2 planning failure, 3 configuration error or missing input.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .config import ConfigError, load_config

EXIT_OK = 0
EXIT_PLAN_FAILED = 2
EXIT_CONFIG = 3

log = logging.getLogger("sdfgrasp")


class MissingInputError(ConfigError):
    """A stage needs an artifact that an earlier stage has not produced."""


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def write_json(path, payload, cfg):
    """Every artifact carries the seed, the config hash and the package version."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    body = {"provenance": cfg.provenance(), **payload}
    Path(path).write_text(json.dumps(body, indent=2, sort_keys=True, default=_json_default) + "\n")
    return path


def _require(path, what, stage):
    if not Path(path).exists():
        raise MissingInputError(f"{what} not found at {path}; run `sdfgrasp {stage}` first")
    return Path(path)


def format_table(rows, columns):
    """Aligned plain-text table."""
    cells = [[str(c) for c in columns]]
    for r in rows:
        cells.append([f"{r.get(c):.4f}" if isinstance(r.get(c), float) else str(r.get(c, "")) for c in columns])
    widths = [max(len(row[i]) for row in cells) for i in range(len(columns))]
    return "\n".join("  ".join(v.ljust(w) for v, w in zip(row, widths)).rstrip() for row in cells) + "\n"


# --- stages ------------------------------------------------------------------------------------


def cmd_gen_corpus(cfg, args, out):
    from dataclasses import replace

    from .corpus import build_corpus, save_corpus

    ccfg = replace(cfg.corpus, seed=cfg.seed)
    _, views = build_corpus(ccfg)
    manifest = save_corpus(views, ccfg, out / "corpus")
    write_json(out / "corpus" / "summary.json", {"views": len(views), "hash": manifest["hash"]}, cfg)
    print(f"wrote {len(views)} views to {out / 'corpus'}")
    return EXIT_OK


def cmd_train_sdf(cfg, args, out):
    from dataclasses import replace

    from .corpus import build_corpus, corpus_hash
    from .experiment import planning_model
    from .pointsdf import PointSdfModel, train

    if args.target == "planning":
        model, report = planning_model(cfg)
        dest = out / "planning_sdf"
    else:
        ccfg = replace(cfg.corpus, seed=cfg.seed)
        _, views = build_corpus(ccfg)
        model = PointSdfModel(cfg.sdf_model, seed=cfg.seed)
        model.corpus_hash = corpus_hash(views)
        report = train(model, [v.as_training_triple() for v in views], replace(cfg.sdf_train, seed=cfg.seed))
        dest = out / "sdf_model"
    model.save(dest)
    write_json(dest / "training.json", {"target": args.target, "report": report.to_dict()}, cfg)
    print(f"final loss {report.final_loss:.6f}; model saved to {dest}")
    return EXIT_OK


def cmd_eval_recon(cfg, args, out):
    from dataclasses import replace

    from .corpus import build_views, heldout_views
    from .experiment import evaluate_views, summarize_reports
    from .pointsdf import PointSdfModel
    from .scenes import make_shapes

    model = PointSdfModel.load(_require(out / "sdf_model", "trained model", "train-sdf"))
    ccfg = replace(cfg.corpus, seed=cfg.seed)
    ev = cfg.recon_eval
    shapes = make_shapes(ccfg.families, ccfg.shapes_per_family, ccfg.seed)
    train_views = build_views(shapes, cfg.corpus.views_per_shape, ccfg, ccfg.seed)
    pick = np.random.default_rng(cfg.seed).choice(len(train_views), min(ev.train_views, len(train_views)),
                                                  replace=False)
    train_views = [train_views[i] for i in sorted(pick)]
    held = heldout_views(shapes, 1, ccfg)[:ev.heldout_views]
    table = []
    per_view = {}
    for split, views in (("train", train_views), ("heldout", held)):
        reps = evaluate_views(model, views, ev, cfg.seed)
        table.append({"split": split, **summarize_reports(reps)})
        per_view[split] = [None if r is None else json.loads(r.to_json()) for r in reps]
    write_json(out / "recon_report.json", {"summary": table, "views": per_view}, cfg)
    text = format_table(table, ["split", "views", "empty", "iou", "chamfer_l1", "normal_consistency"])
    (out / "recon_report.txt").write_text(text)
    print(text, end="")
    return EXIT_OK


def cmd_gen_grasps(cfg, args, out):
    from .experiment import grasp_dataset
    from .grasp_data import save_dataset

    if args.camera:
        cfg.grasps.camera = args.camera
    scenes, samples = grasp_dataset(cfg)
    save_dataset(samples, out / "grasps", scenes)
    rate = float(np.mean([s.label for s in samples])) if samples else float("nan")
    write_json(out / "grasps" / "summary.json", {"samples": len(samples), "scenes": len(scenes),
                                                 "positive_rate": rate, "camera": cfg.grasps.camera}, cfg)
    print(f"{len(samples)} labelled grasps ({rate:.3f} positive) in {out / 'grasps'}")
    return EXIT_OK


def cmd_train_grasp(cfg, args, out):
    from .experiment import train_grasp_models
    from .grasp_data import load_dataset
    from .pointsdf import PointSdfModel

    samples = load_dataset(_require(out / "grasps", "grasp dataset", "gen-grasps"))
    sdf = PointSdfModel.load(_require(out / "planning_sdf", "planning model", "train-sdf --target planning"))
    models = train_grasp_models(cfg, samples, sdf)
    models.save(out / "grasp_models")
    write_json(out / "grasp_models" / "report.json", models.reports, cfg)
    rows = [{"mode": m, **models.reports[m]} for m in ("scratch", "fixed")]
    print(format_table(rows, ["mode", "train_f1", "test_f1", "encoder_unchanged"]), end="")
    return EXIT_OK


def _load_models(out):
    from .experiment import GraspModels

    _require(out / "grasp_models", "grasp models", "train-grasp")
    return GraspModels.load(out / "grasp_models")


def cmd_plan(cfg, args, out):
    from .experiment import compare_scenes, plan_scene, reconstruction_mesh, strip_timing
    from .grasp_data import observe
    from .mesh import EmptySurfaceError
    from .sdf import PrimitiveScene

    models = _load_models(out)
    if args.scene_file:
        scene = PrimitiveScene.load(_require(args.scene_file, "scene file", "plan"))
    else:
        scenes = compare_scenes(cfg)
        if not 0 <= args.scene < len(scenes):
            raise ConfigError(f"scene index {args.scene} outside 0..{len(scenes) - 1}")
        scene = scenes[args.scene]
    camera = args.camera or "high"
    row, result = plan_scene(cfg, scene, args.method, models, camera, cfg.seed)
    dest = out / "plan"
    write_json(dest / "plan.json", {"scene": args.scene, **strip_timing(row),
                                    "accepted": result.accepted.to_dict() if result and result.success else None},
               cfg)
    if args.method == "recon":
        obs = observe(scene, camera, cfg.grasps.sigma0, cfg.seed)
        try:
            reconstruction_mesh(models.sdf, obs).save_obj(dest / "reconstruction.obj")
        except EmptySurfaceError:
            print("warning: the reconstruction has no surface inside the box; no mesh written", file=sys.stderr)
    if not row["success"]:
        print(f"planning failed after {row.get('attempts', 0)} attempts", file=sys.stderr)
        return EXIT_PLAN_FAILED
    print(f"accepted: h={row['h']:.3f} value={row['value']:.3f} true penetration={row['penetrates']}")
    return EXIT_OK


def cmd_compare(cfg, args, out):
    from dataclasses import replace

    from .experiment import run_compare, strip_timing

    if args.camera:
        cfg.compare = replace(cfg.compare, cameras=(args.camera,))
    models = _load_models(out)
    t0 = time.perf_counter()
    report = run_compare(cfg, models)
    report = strip_timing(report)
    write_json(out / "compare.json", report, cfg)
    cols = ["scene", "camera", "method", "success", "penetrates", "h", "value"]
    text = format_table(report["rows"], cols)
    summary = [{"method": m, **v} for m, v in report["summary"].items()]
    text += "\n" + format_table(summary, ["method", "trials", "accepted", "success_rate", "penetration_rate"])
    (out / "compare.txt").write_text(text)
    print(text, end="")
    log.info("compare took %.1f s", time.perf_counter() - t0)
    return EXIT_OK


COMMANDS = {
    "gen-corpus": cmd_gen_corpus,
    "train-sdf": cmd_train_sdf,
    "eval-recon": cmd_eval_recon,
    "gen-grasps": cmd_gen_grasps,
    "train-grasp": cmd_train_grasp,
    "plan": cmd_plan,
    "compare": cmd_compare,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="sdfgrasp", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON experiment file")
        p.add_argument("--seed", type=int, help="overrides the configured seed")
        p.add_argument("--out", help="output directory (overrides the configured one)")
        p.add_argument("--camera", choices=("high", "low"))
        p.add_argument("--method", choices=("recon", "partial"), default="recon")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "train-sdf":
            p.add_argument("--target", choices=("corpus", "planning"), default="corpus")
        if name == "plan":
            p.add_argument("--scene", type=int, default=0, help="index into the comparison scene suite")
            p.add_argument("--scene-file", help="scene JSON instead of a suite index")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.seed is not None and args.seed < 0:
            raise ConfigError("seed must be nonnegative")
        cfg = load_config(args.config, args.seed, args.out)
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](cfg, args, out)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
