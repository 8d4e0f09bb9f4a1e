import json

import numpy as np
import pytest

from sdfgrasp.grasp_data import generate_dataset
from sdfgrasp.grasp_model import GmmPrior, GraspSuccessModel, fit_gmm
from sdfgrasp.grasp_opt import (
    GraspProblem,
    PlanResult,
    SolveReport,
    accept,
    audit,
    env_constraints,
    make_report,
    object_constraint,
    objective,
    plan_grasp,
    report_digest,
    solve,
    validate_final,
)
from sdfgrasp.kinematics import chain_ready
from sdfgrasp.scenes import OBJECT_TAG
from sdfgrasp.sdf import BallUnionField, Box, PrimitiveScene, Sphere
from sdfgrasp.solver import SolverOptions
from sdfgrasp.transforms import RigidTransform


class _ConstModel:
    def __init__(self, h):
        self.h = h

    def predict(self, emb, size, g):
        return self.h

    def predict_with_gradient(self, emb, size, g):
        return self.h, np.zeros(14)


def _ready(chain, hand=0.2):
    q = np.zeros(chain.n_joints)
    q[chain.arm_indices] = chain_ready(chain)
    q[chain.active_hand] = hand
    return q


def _far_away_field():
    return PrimitiveScene().add(Sphere(0.05), RigidTransform.from_matrix(np.eye(3), [50.0, 0.0, 0.0]), "far")


@pytest.fixture(scope="module")
def prior(chain, box_scene):
    data = generate_dataset([box_scene], 80, 0, chain)
    return fit_gmm([s.config for s in data], [s.approach for s in data], seed=0)


@pytest.fixture(scope="module")
def problem(chain, box_scene, box_obs, prior):
    model = GraspSuccessModel.scratch(seed=4)
    return GraspProblem(chain, model.embed(box_obs), box_obs, box_obs.size_scalar, model, prior,
                        box_scene.member(OBJECT_TAG), box_scene.subset(exclude=(OBJECT_TAG,)))


def _const_problem(problem, h, alpha=0.0, beta=-2.0, **kw):
    return GraspProblem(problem.chain, problem.embedding, problem.frame, problem.size, _ConstModel(h), problem.prior,
                        kw.get("object_field", problem.object_field), kw.get("environment", problem.environment),
                        beta=beta, alpha=alpha)


# --- objective -------------------------------------------------------------------


def test_hinge_root_has_zero_value_and_gradient(chain, problem):
    p = _const_problem(problem, 0.5, beta=np.log(2.0))
    v, g = objective(p, _ready(chain))
    assert v == 0.0 and not np.any(g)


def test_hinge_arithmetic(chain, problem):
    v, _ = objective(_const_problem(problem, 1.0 - 1e-12), _ready(chain))
    assert v == pytest.approx(4.0, abs=1e-9)


def test_problem_validation(problem):
    with pytest.raises(ValueError):
        _const_problem(problem, 0.5, beta=np.inf)


# --- constraints -----------------------------------------------------------------


def test_env_clear_when_high_above_table(chain, problem):
    q = _ready(chain)
    verts = chain.vertices_world(chain.fk(q))
    high = PrimitiveScene().add(Box((2.0, 2.0, 0.05)),
                                RigidTransform.from_matrix(np.eye(3), [0.5, 0.0, verts[:, 2].min() - 0.5]), "table")
    c, _ = env_constraints(_const_problem(problem, 0.5, environment=high), q)
    assert np.all(c > 0)


def test_env_vertex_inside_table(chain, problem):
    q = _ready(chain)
    kin = chain.fk(q)
    verts = chain.vertices_world(kin)
    i = int(np.argmin(verts[:, 2]))
    top = verts[i, 2] + 0.01
    table = PrimitiveScene().add(Box((3.0, 3.0, 0.2)),
                                 RigidTransform.from_matrix(np.eye(3), [verts[i, 0], verts[i, 1], top - 0.2]),
                                 "table")
    p = _const_problem(problem, 0.5, environment=table)
    c, _ = env_constraints(p, q)
    assert c.min() == pytest.approx(-0.01 - p.margin, abs=1e-12)
    assert np.argmin(c) == p.links.index(chain.link_names[chain.vertex_owner[i]])


def test_object_clear_when_retracted(chain, problem):
    c, _ = object_constraint(_const_problem(problem, 0.5, object_field=_far_away_field()), _ready(chain))
    assert np.all(c > 0)


def test_object_fingertip_at_centroid(chain, problem):
    q = _ready(chain)
    kin = chain.fk(q)
    tip_link = chain.link_index["finger1_link3"]
    tip = chain.vertices["finger1_link3"].mean(axis=0) @ kin.rotations[tip_link].T + kin.origins[tip_link]
    ball = PrimitiveScene().add(Sphere(0.03), RigidTransform.from_matrix(np.eye(3), tip), OBJECT_TAG)
    p = _const_problem(problem, 0.5, object_field=ball)
    c, _ = object_constraint(p, q)
    assert c[p.links.index("finger1_link3")] < -0.02
    partial = _const_problem(problem, 0.5, object_field=BallUnionField(tip[None], 0.02))
    assert object_constraint(partial, q)[0][p.links.index("finger1_link3")] < 0


# --- solve -----------------------------------------------------------------------


def test_seed_outside_limits_raises(chain, problem):
    q = _ready(chain)
    q[0] = chain.upper[0] + 0.1
    with pytest.raises(ValueError, match="limits"):
        solve(problem, q)


def test_solve_report_is_recomputed(chain, problem):
    rep = solve(problem, _ready(chain))
    again = make_report(problem, rep.q, rep.iterations, rep.kkt_residual, rep.status, rep.violation)
    assert rep.to_dict() == again.to_dict()
    if rep.status == "converged":
        assert rep.kkt_residual < 1e-4
        assert min(rep.env_min.values()) >= problem.margin - 1e-6
        assert min(rep.object_min.values()) >= problem.margin - 1e-6
        assert audit(problem, rep)["checks"]["joint_limits"]


def test_solve_deterministic(chain, problem):
    a = solve(problem, _ready(chain, 0.4))
    b = solve(problem, _ready(chain, 0.4))
    assert a.to_json() == b.to_json()


def test_seed_inside_table(chain, problem):
    q = _ready(chain)
    verts = chain.vertices_world(chain.fk(q))
    table = PrimitiveScene().add(Box((3.0, 3.0, 0.2)),
                                 RigidTransform.from_matrix(np.eye(3), [0.5, 0.0, verts[:, 2].min() - 0.15]),
                                 "table")
    p = GraspProblem(chain, problem.embedding, problem.frame, problem.size, problem.success_model, problem.prior,
                     _far_away_field(), table, solver=SolverOptions(max_outer=4))
    assert env_constraints(p, q)[0].min() < 0
    rep = solve(p, q)
    assert rep.status == "infeasible" or min(rep.env_min.values()) >= p.margin - 1e-6


# --- acceptance and planning -------------------------------------------------------


def _report(h, value):
    return SolveReport([], value, h, 0.0, 0.0, {}, {}, 0, 0.0, "converged")


@pytest.mark.parametrize("h,value,ok", [(0.7, 4.0, True), (0.59, 1.0, False), (0.7, 5.0, False),
                                        (0.6, 1.0, False)])
def test_acceptance_thresholds(h, value, ok):
    assert accept(_report(h, value)) is ok


def test_five_rejections_give_failure(chain, problem):
    p = GraspProblem(chain, problem.embedding, problem.frame, problem.size, problem.success_model, problem.prior,
                     problem.object_field, problem.environment, h_accept=1.0,
                     solver=SolverOptions(max_outer=2, max_inner=10))
    res = plan_grasp(p, 5, seed=0)
    assert isinstance(res, PlanResult) and not res.success
    assert len(res.attempts) == 5
    assert [a["attempt"] for a in res.attempts] == list(range(5))
    json.dumps(res.to_dict())


def test_plan_deterministic(chain, problem):
    p = GraspProblem(chain, problem.embedding, problem.frame, problem.size, problem.success_model, problem.prior,
                     problem.object_field, problem.environment, solver=SolverOptions(max_outer=3, max_inner=20))
    a, b = plan_grasp(p, 2, seed=3), plan_grasp(p, 2, seed=3)
    assert report_digest(a.to_dict()) == report_digest(b.to_dict())


# --- validation against the true scene -------------------------------------------------


def test_validate_retracted(chain, problem, box_scene):
    far = box_scene.subset(exclude=(OBJECT_TAG,))
    rep = validate_final(problem, _ready(chain), far.add(Sphere(0.03),
                                                         RigidTransform.from_matrix(np.eye(3), [5.0, 0, 0]), "obj"))
    assert rep.flagged == [] and not rep.penetrates and not rep.object_penetration


def test_validate_flags_hidden_penetration(chain, problem):
    q = _ready(chain)
    kin = chain.fk(q)
    li = chain.link_index["finger0_link3"]
    v = chain.vertices["finger0_link3"] @ kin.rotations[li].T + kin.origins[li]
    # a hidden object just touching one vertex from behind
    truth = PrimitiveScene().add(Sphere(0.02), RigidTransform.from_matrix(np.eye(3), v[0] + [0.0, 0.0, -0.019]),
                                 "object")
    p = _const_problem(problem, 0.5, environment=PrimitiveScene())
    rep = validate_final(p, q, truth)
    assert "finger0_link3" in rep.flagged
    assert rep.object_penetration
    verts = chain.vertices_world(kin)
    assert rep.min_sdf == pytest.approx(float(truth.value(verts).min()), abs=1e-12)
    for name, val in rep.link_min.items():
        m = chain.vertex_owner == chain.link_index[name]
        assert abs(val - float(truth.value(verts[m]).min())) <= 1e-12


def test_audit_recomputes(chain, problem):
    rep = make_report(problem, _ready(chain))
    a = audit(problem, rep)
    assert set(a["checks"]) == {"joint_limits", "env_sdf", "object_sdf", "h", "objective"}
    assert a["ok"] == all(a["checks"].values())
    assert a["h"] == pytest.approx(rep.h)


def test_prior_component_fallback(chain, problem):
    unnamed = GmmPrior(problem.prior.weights, problem.prior.means, problem.prior.variances, labels=("a", "b"))
    p = GraspProblem(chain, problem.embedding, problem.frame, problem.size, problem.success_model, unnamed,
                     problem.object_field, problem.environment, solver=SolverOptions(max_outer=1, max_inner=5))
    assert len(plan_grasp(p, 1, seed=0).attempts) == 1
