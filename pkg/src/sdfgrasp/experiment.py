"""End-to-end pipeline stages shared by the command line and the acceptance suite."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .camera import NoObservationError
from .corpus import CorpusConfig, tabletop_views
from .grasp_data import generate_dataset, observe, split_by_scene
from .grasp_model import GmmPrior, GraspSuccessModel, evaluate_success, fit_gmm, train_success
from .grasp_opt import GraspProblem, plan_grasp, validate_final
from .kinematics import KinematicChain
from .pointsdf import PointSdfModel, train
from .scenes import OBJECT_TAG, grasp_scenes, make_shapes
from .mesh import EmptySurfaceError, hierarchical_extract, marching_cubes
from .metrics import ReconReport, evaluate_reconstruction
from .sdf import BallUnionField, SdfField

log = logging.getLogger(__name__)

METHODS = ("recon", "partial")


def planning_model(cfg):
    """Implicit-surface model trained on tabletop observations of graspable primitives."""
    pc = cfg.planning_corpus
    shapes = make_shapes(pc.families, pc.shapes_per_family, cfg.seed, graspable=True)
    corpus = CorpusConfig(sigma0=cfg.corpus.sigma0, n_surface=cfg.corpus.n_surface, n_free=cfg.corpus.n_free,
                          free_half_extent=cfg.corpus.free_half_extent)
    views = tabletop_views(shapes, pc.views_per_shape, corpus, cfg.seed, pc.cameras)
    model = PointSdfModel(cfg.sdf_model, seed=cfg.seed)
    hyper = type(cfg.sdf_train)(**{**cfg.sdf_train.__dict__, "epochs": pc.epochs, "seed": cfg.seed})
    report = train(model, [v.as_training_triple() for v in views], hyper)
    return model, report


class NormalizedPrediction(SdfField):
    """Model output for one observation, queried in the normalized frame."""

    def __init__(self, model, emb):
        self.model = model
        self.emb = emb

    def _eval(self, p):
        return self.model.predict_with_gradient(self.emb, p)


class NormalizedTruth(SdfField):
    """Ground-truth scene SDF expressed in an observation's normalized frame."""

    def __init__(self, scene, frame):
        self.scene = scene
        self.frame = frame

    def _eval(self, p):
        v, g = self.scene.value_and_gradient(self.frame.unnormalize(p))
        return v * self.frame.scale, g @ self.frame.frame_pose.rotation


def evaluate_views(model, views, ev, seed=0):
    """Per-view reconstruction metrics in the normalized box [-1, 1]^3."""
    bounds = ((-1.0,) * 3, (1.0,) * 3)
    out = []
    for k, view in enumerate(views):
        pred = NormalizedPrediction(model, model.embed(view.cloud))
        truth = NormalizedTruth(view.scene, view.cloud)
        try:
            pm = marching_cubes(pred, bounds, ev.resolution)
        except EmptySurfaceError:
            out.append(None)
            continue
        tm = marching_cubes(truth, bounds, ev.resolution)
        out.append(evaluate_reconstruction(pred, truth, pm, tm, bounds, ev.iou_samples, ev.surface_samples,
                                           seed + k, {"shape": view.shape_index, "view": view.view_index}))
    return out


def summarize_reports(reports):
    ok = [r for r in reports if r is not None]
    if not ok:
        return {"views": len(reports), "empty": len(reports)}
    return {"views": len(reports), "empty": len(reports) - len(ok),
            "iou": float(np.mean([r.iou for r in ok])),
            "chamfer_l1": float(np.mean([r.chamfer_l1 for r in ok])),
            "normal_consistency": float(np.mean([r.normal_consistency for r in ok]))}


def reconstruction_mesh(model, obs, base_res=32, target_res=128):
    """World-frame mesh of the learned object surface at ``target_res`` cells per axis."""
    field_ = NormalizedPrediction(model, model.embed(obs))
    mesh = hierarchical_extract(field_, ((-1.0,) * 3, (1.0,) * 3), base_res, target_res)
    return mesh.transformed(obs.frame_pose, 1.0 / obs.scale)


def grasp_dataset(cfg, chain=None):
    chain = chain or KinematicChain.default()
    g = cfg.grasps
    scenes = grasp_scenes(g.families, g.scenes_per_family, cfg.seed)
    samples = generate_dataset(scenes, g.grasps_per_scene, cfg.seed, chain, g.camera, cfg.sampler, g.sigma0)
    return scenes, samples


@dataclass
class GraspModels:
    scratch: GraspSuccessModel
    fixed: GraspSuccessModel
    prior: GmmPrior
    sdf: PointSdfModel
    reports: dict = field(default_factory=dict)

    def save(self, directory):
        d = Path(directory)
        self.scratch.save(d / "classifier_scratch")
        self.fixed.save(d / "classifier_fixed")
        self.sdf.save(d / "planning_sdf")
        self.prior.save(d / "prior.json")
        (d / "grasp_training.json").write_text(json.dumps(self.reports, indent=2, sort_keys=True))

    @classmethod
    def load(cls, directory):
        d = Path(directory)
        reports = json.loads((d / "grasp_training.json").read_text()) if (d / "grasp_training.json").exists() else {}
        return cls(GraspSuccessModel.load(d / "classifier_scratch"), GraspSuccessModel.load(d / "classifier_fixed"),
                   GmmPrior.load(d / "prior.json"), PointSdfModel.load(d / "planning_sdf"), reports)


def train_grasp_models(cfg, samples, sdf_model):
    """Scratch and fixed-encoder classifiers on a scene-level split, plus the prior."""
    train_set, test_set = split_by_scene(samples, cfg.grasps.test_fraction, cfg.seed)
    hyper = type(cfg.classifier)(**{**cfg.classifier.__dict__, "seed": cfg.seed})
    reports = {"n_train": len(train_set), "n_test": len(test_set),
               "positive_rate": float(np.mean([s.label for s in samples]))}
    models = {}
    for mode in ("scratch", "fixed"):
        m = GraspSuccessModel.scratch(seed=cfg.seed, head_hidden=hyper.head_hidden) if mode == "scratch" else \
            GraspSuccessModel.fixed(sdf_model, seed=cfg.seed, head_hidden=hyper.head_hidden)
        rep = train_success(m, train_set, hyper, test_set=test_set)
        _, f1_train = evaluate_success(m, train_set)
        reports[mode] = {"train_f1": f1_train, "test_f1": rep.extra["test_f1"], "final_loss": rep.final_loss,
                         "encoder_unchanged": rep.extra["encoder_digest_before"] == rep.extra["encoder_digest_after"]}
        models[mode] = m
    prior = fit_gmm([s.config for s in train_set], [s.approach for s in train_set], seed=cfg.seed)
    return GraspModels(models["scratch"], models["fixed"], prior, sdf_model, reports)


def make_problem(cfg, scene, method, models, camera="high", seed=0, chain=None):
    """Observation, object field and classifier for one scene under a constraint method.

    ``recon`` pairs the learned full-object field with the fixed-encoder
    classifier; ``partial`` pairs a union of balls around the observed points
    with the scratch classifier.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    chain = chain or KinematicChain.default()
    obs = observe(scene, camera, cfg.grasps.sigma0, seed)
    if method == "recon":
        classifier = models.fixed
        object_field = models.sdf.as_field(models.sdf.embed(obs), obs)
    else:
        classifier = models.scratch
        object_field = BallUnionField(obs.unnormalize(obs.points), cfg.planner.partial_radius)
    p = cfg.planner
    return GraspProblem(chain, classifier.embed(obs), obs, obs.size_scalar, classifier, models.prior, object_field,
                        scene.subset(exclude=(OBJECT_TAG,)), p.beta, p.alpha, p.margin, h_accept=p.h_accept,
                        value_accept=p.value_accept, solver=p.solver)


def plan_scene(cfg, scene, method, models, camera="high", seed=0, chain=None):
    """One planning run plus the ground-truth audit of its result."""
    t0 = time.perf_counter()
    try:
        problem = make_problem(cfg, scene, method, models, camera, seed, chain)
    except NoObservationError as exc:
        return {"method": method, "camera": camera, "seed": seed, "success": False, "error": str(exc)}, None
    result = plan_grasp(problem, cfg.planner.max_seeds, seed)
    row = {"method": method, "camera": camera, "seed": seed, "success": result.success,
           "attempts": len(result.attempts), "diagnostics": result.attempts}
    if result.success:
        val = validate_final(problem, result.accepted.q, scene)
        row.update({"h": result.accepted.h, "value": result.accepted.value, "penetrates": val.penetrates,
                    "object_penetration": val.object_penetration, "true_min_sdf": val.min_sdf,
                    "flagged_links": val.flagged, "q": result.accepted.q})
    row["_seconds"] = time.perf_counter() - t0
    return row, result


def compare_scenes(cfg):
    c = cfg.compare
    return grasp_scenes(c.families, c.scenes_per_family, c.seed)


def penetration_rate(rows):
    acc = [r for r in rows if r.get("success")]
    return (sum(r["penetrates"] for r in acc) / len(acc)) if acc else float("nan"), len(acc)


def run_compare(cfg, models, chain=None, scenes=None):
    """Paired trials: every (scene, camera) is planned with both methods from the same seed."""
    chain = chain or KinematicChain.default()
    scenes = scenes if scenes is not None else compare_scenes(cfg)
    rows = []
    for si, scene in enumerate(scenes):
        for cam in cfg.compare.cameras:
            seed = cfg.compare.seed * 1000 + si
            for method in METHODS:
                row, _ = plan_scene(cfg, scene, method, models, cam, seed, chain)
                row["scene"] = si
                rows.append(row)
                log.info("scene %d %s %s success=%s", si, cam, method, row.get("success"))
    summary = {}
    for method in METHODS:
        mine = [r for r in rows if r["method"] == method]
        rate, n_acc = penetration_rate(mine)
        summary[method] = {"trials": len(mine), "accepted": n_acc, "penetration_rate": rate,
                           "success_rate": n_acc / len(mine) if mine else float("nan")}
    return {"rows": rows, "summary": summary}


def strip_timing(obj):
    """Drop wall-clock fields so reports are byte-comparable across runs."""
    if isinstance(obj, dict):
        return {k: strip_timing(v) for k, v in obj.items() if not k.startswith("_")}
    if isinstance(obj, list):
        return [strip_timing(v) for v in obj]
    return obj
