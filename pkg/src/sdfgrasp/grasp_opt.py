"""Constrained grasp synthesis over the full arm-hand configuration.

    minimize    max(s(q) - beta, 0)^2,   s = -log h - alpha log g
    subject to  joint limits
                min_v sdf_env(vertex)    - eps >= 0   per (link, environment object)
                min_v sdf_object(vertex) - eps >= 0   per link

The hinge keeps beta as a floor: scores already below beta cost nothing.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .grasp_model import _frame_pose, frame_id, grasp_config_jacobian, grasp_score, make_grasp_config
from .kinematics import IKFailure, JointConfig, chain_ready, ik_palm_reseeded, limits_satisfied
from .scenes import TABLE_TOP
from .solver import SolverOptions, solve_nlp
from .transforms import RigidTransform

log = logging.getLogger(__name__)

H_ACCEPT = 0.6
VALUE_ACCEPT = 5.0
PENETRATION_FLAG = -1e-4


@dataclass
class GraspProblem:
    chain: object
    embedding: object
    frame: object
    size: float
    success_model: object
    prior: object
    object_field: object
    environment: object
    beta: float = -2.0
    alpha: float = 1.0
    margin: float = 0.005
    table_height: float = TABLE_TOP
    h_accept: float = H_ACCEPT
    value_accept: float = VALUE_ACCEPT
    solver: SolverOptions = field(default_factory=SolverOptions)

    def __post_init__(self):
        if not np.isfinite(self.beta):
            raise ValueError("beta must be finite")
        if self.margin < 0:
            raise ValueError("margin must be nonnegative")
        self.links = list(self.chain.collision_links)
        self._vslot = self.chain.vertex_link_slot
        self.env_tags = [o.tag for o in self.environment.objects]

    def _vertices(self, q):
        kin = self.chain.fk(q)
        return kin, self.chain.vertices_world(kin)

    def _segment_min(self, values):
        """Min per link and the index of the minimizing vertex."""
        n = len(self.links)
        order = np.lexsort((values, self._vslot))
        first = np.searchsorted(self._vslot[order], np.arange(n))
        idx = order[first]
        return values[idx], idx


def objective(problem, q):
    """(value, gradient over all joints) of the hinged grasp score."""
    q = np.asarray(q, dtype=float)
    g = make_grasp_config(problem.chain, q, problem.frame)
    s, ds, h, lg = grasp_score(problem.success_model, problem.prior, problem.embedding, problem.size, g,
                               problem.alpha, with_gradient=True)
    r = s - problem.beta
    if r <= 0:
        return 0.0, np.zeros_like(q)
    J = grasp_config_jacobian(problem.chain, q, problem.frame)
    return r * r, 2 * r * (ds @ J)


def score_terms(problem, q):
    g = make_grasp_config(problem.chain, q, problem.frame)
    s, _, h, lg = grasp_score(problem.success_model, problem.prior, problem.embedding, problem.size, g,
                              problem.alpha, with_gradient=True)
    return {"score": s, "h": h, "log_prior": lg, "value": max(s - problem.beta, 0.0) ** 2}


def _field_constraints(problem, field_, kin, verts):
    vals, grads = field_.value_and_gradient(verts)
    mins, idx = problem._segment_min(vals)
    pts = verts[idx]
    owners = problem.chain.vertex_owner[idx]
    Jp = problem.chain.point_jacobians(kin, pts, owners)
    jac = np.einsum("ki,kin->kn", grads[idx], Jp)
    return mins - problem.margin, jac


def env_constraints(problem, q):
    """Per (link, environment object) min vertex SDF minus the margin, with Jacobian rows."""
    kin, verts = problem._vertices(np.asarray(q, dtype=float))
    vals, jacs = [], []
    for tag in problem.env_tags:
        v, j = _field_constraints(problem, problem.environment.member(tag), kin, verts)
        vals.append(v)
        jacs.append(j)
    if not vals:
        return np.zeros(0), np.zeros((0, problem.chain.n_joints))
    return np.concatenate(vals), np.concatenate(jacs)


def object_constraint(problem, q):
    """Per link min vertex value of the object field minus the margin, with Jacobian rows."""
    kin, verts = problem._vertices(np.asarray(q, dtype=float))
    return _field_constraints(problem, problem.object_field, kin, verts)


def all_constraints(problem, q):
    ce, je = env_constraints(problem, q)
    co, jo = object_constraint(problem, q)
    return np.concatenate([ce, co]), np.concatenate([je, jo])


@dataclass
class SolveReport:
    q: list
    value: float
    h: float
    score: float
    log_prior: float
    env_min: dict
    object_min: dict
    iterations: int
    kkt_residual: float
    status: str
    violation: float = 0.0

    @property
    def joint_config(self):
        return JointConfig.from_array(np.array(self.q))

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _bounds(problem):
    ch = problem.chain
    lo, hi = ch.lower.copy(), ch.upper.copy()
    pinned = np.asarray(ch.inactive_hand, dtype=int)
    lo[pinned] = 0.0
    hi[pinned] = 0.0
    return lo, hi


def make_report(problem, q, iterations=0, kkt=float("nan"), status="converged", violation=0.0):
    """Every reported number is recomputed from ``q``."""
    q = np.asarray(q, dtype=float)
    terms = score_terms(problem, q)
    ce, _ = env_constraints(problem, q)
    co, _ = object_constraint(problem, q)
    n = len(problem.links)
    env_min = {f"{l}|{t}": float(ce[k * n + i] + problem.margin)
               for k, t in enumerate(problem.env_tags) for i, l in enumerate(problem.links)}
    obj_min = {l: float(co[i] + problem.margin) for i, l in enumerate(problem.links)}
    return SolveReport([float(x) for x in q], float(terms["value"]), float(terms["h"]), float(terms["score"]),
                       float(terms["log_prior"]), env_min, obj_min, int(iterations), float(kkt), status,
                       float(violation))


def solve(problem, q_seed):
    """Local solution from ``q_seed`` (must satisfy joint limits)."""
    q_seed = q_seed.as_array() if isinstance(q_seed, JointConfig) else np.asarray(q_seed, dtype=float)
    if not limits_satisfied(problem.chain, q_seed, tol=1e-9):
        raise ValueError("seed violates joint limits")
    lo, hi = _bounds(problem)
    res = solve_nlp(lambda x: objective(problem, x), lambda x: all_constraints(problem, x), q_seed, lo, hi,
                    problem.solver)
    return make_report(problem, res.x, res.iterations, res.kkt, res.status, res.violation)


def audit(problem, report):
    """Independent recomputation of the acceptance conditions for a report."""
    q = np.asarray(report.q, dtype=float)
    ch = problem.chain
    terms = score_terms(problem, q)
    kin = ch.fk(q)
    verts = ch.vertices_world(kin)
    env = min(float(problem.environment.member(t).value(verts).min()) for t in problem.env_tags) \
        if problem.env_tags else np.inf
    obj = float(problem.object_field.value(verts).min())
    checks = {
        "joint_limits": bool(limits_satisfied(ch, q)),
        "env_sdf": env >= 0.0,
        "object_sdf": obj >= 0.0,
        "h": terms["h"] > problem.h_accept,
        "objective": terms["value"] < problem.value_accept,
    }
    return {"checks": checks, "ok": all(checks.values()), "env_min": env, "object_min": obj,
            "h": terms["h"], "value": terms["value"]}


def accept(report, h_accept=H_ACCEPT, value_accept=VALUE_ACCEPT):
    return report.h > h_accept and report.value < value_accept


@dataclass
class PlanResult:
    accepted: SolveReport | None
    attempts: list
    seed: int

    @property
    def success(self):
        return self.accepted is not None

    def to_dict(self):
        return {"seed": self.seed, "success": self.success,
                "accepted": self.accepted.to_dict() if self.accepted else None, "attempts": self.attempts}


def seed_configuration(problem, rng, component="side"):
    """Prior sample -> palm pose in world -> IK above the table. Raises IKFailure."""
    ch = problem.chain
    g = problem.prior.sample(component, rng, frame=frame_id(problem.frame))
    palm_world = _frame_pose(problem.frame) @ RigidTransform.from_vec6(g.palm)
    q_h = np.zeros(len(ch.hand_indices))
    active = np.asarray(ch.active_hand) - len(ch.arm_indices)
    q_h[active] = g.q_h_active
    q_h = np.clip(q_h, ch.lower[ch.hand_indices], ch.upper[ch.hand_indices])
    q_a = ik_palm_reseeded(ch, palm_world, problem.table_height, rng, attempts=3, seed_q_a=chain_ready(ch),
                           q_hand=q_h)
    return np.concatenate([q_a, q_h])


def plan_grasp(problem, max_seeds=5, seed=0, component="side"):
    """Up to ``max_seeds`` prior samples; the first solve passing the acceptance rule
    (h above threshold, objective below threshold, recomputed feasibility) wins."""
    attempts = []
    if problem.prior.labels and component not in problem.prior.labels:
        component = None
    for k in range(max_seeds):
        rng = np.random.default_rng([seed, k])
        try:
            q0 = seed_configuration(problem, rng, component)
        except IKFailure as exc:
            log.info("seed %d: IK failure: %s", k, exc)
            attempts.append({"attempt": k, "status": "ik-failure", "reason": str(exc)})
            continue
        rep = solve(problem, q0)
        check = audit(problem, rep)
        diag = {"attempt": k, "status": rep.status, "h": rep.h, "value": rep.value,
                "kkt": rep.kkt_residual, "violation": rep.violation, "audit": check["checks"]}
        attempts.append(diag)
        if rep.status != "infeasible" and accept(rep, problem.h_accept, problem.value_accept) and check["ok"]:
            diag["accepted"] = True
            return PlanResult(rep, attempts, seed)
    return PlanResult(None, attempts, seed)


@dataclass
class ValidationReport:
    link_min: dict
    flagged: list
    penetrates: bool
    object_penetration: bool
    min_sdf: float


def validate_final(problem, q, truth):
    """Per-link min SDF against the fully known scene; flags links below -1e-4."""
    q = q.as_array() if isinstance(q, JointConfig) else np.asarray(q, dtype=float)
    ch = problem.chain
    kin = ch.fk(q)
    verts = ch.vertices_world(kin)
    vals = truth.value(verts)
    obj_tags = [o.tag for o in truth.objects if o.tag not in problem.env_tags]
    obj_vals = truth.subset(obj_tags).value(verts) if obj_tags else np.full(len(verts), np.inf)
    link_min, flagged, obj_flag = {}, [], False
    for name in ch.collision_links:
        m = ch.vertex_owner == ch.link_index[name]
        link_min[name] = float(vals[m].min())
        if link_min[name] < PENETRATION_FLAG:
            flagged.append(name)
        if obj_vals[m].min() < PENETRATION_FLAG:
            obj_flag = True
    return ValidationReport(link_min, flagged, bool(flagged), obj_flag, float(vals.min()))


def report_digest(obj):
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


def save_report(report, path):
    Path(path).write_text(report.to_json())
