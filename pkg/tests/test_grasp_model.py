import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fdcheck import central_diff, rel_err
from sdfgrasp.grasp_data import GraspSample
from sdfgrasp.grasp_model import (
    PROB_EPS,
    GmmPrior,
    GraspConfig,
    GraspSuccessModel,
    GraspTrainConfig,
    evaluate_success,
    f1_score,
    fit_gmm,
    frame_id,
    grasp_config_jacobian,
    grasp_score,
    make_grasp_config,
    train_success,
)
from sdfgrasp.transforms import RigidTransform, matrix_to_euler_xyz


def _interior(chain, rng):
    lo, hi = chain.lower, chain.upper
    return lo + (hi - lo) * rng.uniform(0.2, 0.8, size=chain.n_joints)


# --- grasp configuration -------------------------------------------------------


def test_zero_q_identity_frame(chain):
    q = np.zeros(chain.n_joints)
    g = make_grasp_config(chain, q)
    palm = chain.fk(q).pose(chain.palm_index)
    assert g.frame == "world"
    assert np.all(g.q_h_active == 0)
    np.testing.assert_allclose(g.palm[:3], palm.t, atol=1e-12)
    np.testing.assert_allclose(g.palm[3:], matrix_to_euler_xyz(palm.rotation), atol=1e-12)


def test_inactive_joints_do_not_change_config(chain, rng):
    q = _interior(chain, rng)
    q2 = q.copy()
    q2[chain.inactive_hand] += 0.1
    a, b = make_grasp_config(chain, q), make_grasp_config(chain, q2)
    np.testing.assert_array_equal(a.vector, b.vector)


def test_palm_expressed_in_frame(chain, box_obs, rng):
    q = _interior(chain, rng)
    g = make_grasp_config(chain, q, box_obs)
    local = box_obs.frame_pose.inverse() @ chain.fk(q).pose(chain.palm_index)
    back = RigidTransform.from_vec6(g.palm)
    assert back.allclose(local, atol=1e-9)
    assert g.frame == frame_id(box_obs)


def test_config_jacobian_matches_fd(chain, box_obs, rng):
    for _ in range(10):
        q = _interior(chain, rng)
        J = grasp_config_jacobian(chain, q, box_obs)
        fd = central_diff(lambda x: make_grasp_config(chain, x, box_obs).vector, q, h=1e-6)
        assert np.max(np.abs(J - fd)) < 1e-6


def test_config_round_trip():
    g = GraspConfig(np.arange(8) * 0.1, [0.1, 0.2, 0.3, 0.4, 0.5, 0.6], "abc")
    back = GraspConfig.from_dict(g.to_dict())
    np.testing.assert_array_equal(back.vector, g.vector)
    assert back.frame == "abc"
    with pytest.raises(ValueError):
        GraspConfig(np.full(8, np.nan), np.zeros(6))


# --- classifier ------------------------------------------------------------------


def test_head_fan_in():
    m = GraspSuccessModel.scratch(embedding=16, seed=0)
    assert m.head.fan_in == 16 + 14 + 1


def test_zero_head_predicts_half(box_obs):
    m = GraspSuccessModel.scratch(seed=0, zero_head=True)
    emb = m.embed(box_obs)
    g = GraspConfig(np.zeros(8), np.zeros(6), frame_id(box_obs))
    assert m.predict(emb, box_obs.size_scalar, g) == 0.5


def test_frame_mismatch_rejected(box_obs):
    m = GraspSuccessModel.scratch(seed=0)
    with pytest.raises(ValueError, match="frame"):
        m.predict(m.embed(box_obs), 0.1, GraspConfig(np.zeros(8), np.zeros(6), "world"))


def test_prediction_invariant_to_point_order(box_obs, rng):
    m = GraspSuccessModel.scratch(seed=2)
    g = GraspConfig(rng.normal(size=8), rng.normal(size=6), frame_id(box_obs))
    a = m.predict(m.embed(box_obs), 0.1, g)
    shuffled = box_obs.points[rng.permutation(len(box_obs.points))]
    b = m.predict(m.embed(shuffled), 0.1, GraspConfig(g.q_h_active, g.palm))
    assert a == pytest.approx(b, abs=1e-12)


def test_predictions_strictly_inside_unit_interval(box_obs, rng):
    m = GraspSuccessModel.scratch(seed=1)
    emb = m.embed(box_obs)
    out = m.predict(emb, 0.1, rng.normal(scale=50.0, size=(200, 14)))
    assert np.all((out > 0) & (out < 1))


@pytest.mark.parametrize(
    "pred,label,expected",
    [([1, 1, 0, 0], [1, 1, 0, 0], 1.0), ([0, 0, 0], [1, 1, 0], 0.0), ([1, 1, 1, 1], [1, 1, 0, 0], 2 / 3),
     ([1, 0, 1, 0], [1, 1, 0, 0], 0.5)],
)
def test_f1_examples(pred, label, expected):
    assert f1_score(pred, label) == pytest.approx(expected)


def _separable(obs, n, seed):
    """Labels given by the sign of one palm coordinate."""
    rng = np.random.default_rng(seed)
    fid = frame_id(obs)
    out = []
    for i in range(n):
        v = rng.normal(size=14)
        out.append(GraspSample(obs, GraspConfig.from_vector(v, fid), int(v[8] > 0), "side", i % 10,
                               RigidTransform(), np.zeros(16)))
    return out


@pytest.fixture(scope="module")
def separable(box_obs):
    return _separable(box_obs, 400, 0), _separable(box_obs, 200, 1)


def test_separable_dataset_reaches_high_f1(separable):
    train_set, test_set = separable
    hyper = GraspTrainConfig(epochs=40, seed=0, points=64)
    m = GraspSuccessModel.scratch(seed=0)
    rep = train_success(m, train_set, hyper, test_set=test_set)
    assert rep.extra["test_f1"] >= 0.95
    probs, _ = evaluate_success(m, test_set)
    labels = np.array([s.label for s in test_set])
    assert probs[labels == 1].mean() > probs[labels == 0].mean()


def test_frozen_encoder_unchanged(separable):
    train_set, _ = separable
    m = GraspSuccessModel.scratch(seed=0)
    before = [layer.weight.copy() for layer in m.encoder.layers]
    rep = train_success(m, train_set, GraspTrainConfig(epochs=3, points=64), freeze_encoder=True)
    assert rep.extra["encoder_digest_before"] == rep.extra["encoder_digest_after"]
    for a, layer in zip(before, m.encoder.layers):
        np.testing.assert_array_equal(a, layer.weight)


def test_scratch_mode_updates_encoder(separable):
    train_set, _ = separable
    m = GraspSuccessModel.scratch(seed=0)
    rep = train_success(m, train_set, GraspTrainConfig(epochs=2, points=64))
    assert rep.extra["encoder_digest_before"] != rep.extra["encoder_digest_after"]


def test_training_deterministic(separable):
    train_set, test_set = separable
    hyper = GraspTrainConfig(epochs=3, points=64, seed=5)
    f1s = []
    for _ in range(2):
        m = GraspSuccessModel.scratch(seed=0)
        f1s.append(train_success(m, train_set, hyper, test_set=test_set).extra["test_f1"])
    assert f1s[0] == f1s[1]


def test_single_class_rejected(separable):
    train_set, _ = separable
    ones = [s for s in train_set if s.label == 1]
    with pytest.raises(ValueError, match="both labels"):
        train_success(GraspSuccessModel.scratch(seed=0), ones, GraspTrainConfig(epochs=1))


def test_classifier_save_load(tmp_path, box_obs, rng):
    m = GraspSuccessModel.scratch(seed=3)
    m.in_mean = rng.normal(size=15)
    m.save(tmp_path / "c")
    back = GraspSuccessModel.load(tmp_path / "c")
    g = GraspConfig(rng.normal(size=8), rng.normal(size=6), frame_id(box_obs))
    assert back.predict(back.embed(box_obs), 0.1, g) == m.predict(m.embed(box_obs), 0.1, g)


# --- mixture prior ---------------------------------------------------------------


def _mixture(n, seed):
    rng = np.random.default_rng(seed)
    mu = np.zeros((2, 14))
    mu[1] += 3.0
    sd = np.array([0.3, 0.5])
    k = rng.integers(2, size=n)
    return mu[k] + rng.normal(size=(n, 14)) * sd[k][:, None], mu


def test_em_recovers_means_and_is_monotone():
    X, mu = _mixture(2000, 0)
    prior = fit_gmm(X, seed=0)
    order = np.argsort(prior.means[:, 0])
    assert np.max(np.abs(prior.means[order] - mu)) < 0.05
    assert np.all(np.diff(prior.history) >= -1e-12)
    assert len(prior.history) <= 500


def test_em_with_labels_keeps_names():
    X, _ = _mixture(400, 1)
    tags = ["side" if x[0] < 1.5 else "overhead" for x in X]
    prior = fit_gmm(X, tags, seed=0)
    assert prior.means[prior.component_index("overhead"), 0] > prior.means[prior.component_index("side"), 0]


def test_mode_dominates_far_point():
    X, mu = _mixture(400, 2)
    prior = fit_gmm(X, seed=0)
    for m in prior.means:
        assert prior.log_density(m) >= prior.log_density(m + 10.0)


def test_log_density_is_exact_mixture():
    prior = GmmPrior([0.3, 0.7], np.zeros((2, 14)) + [[0.0], [1.0]], np.full((2, 14), 0.5))
    x = np.linspace(-1, 1, 14)
    comp = [w * np.prod(np.exp(-(x - m) ** 2 / (2 * v)) / np.sqrt(2 * np.pi * v))
            for w, m, v in zip(prior.weights, prior.means, prior.variances)]
    assert prior.log_density(x) == pytest.approx(np.log(sum(comp)), rel=1e-12)


def test_log_density_gradient_fd(rng):
    prior = GmmPrior([0.4, 0.6], rng.normal(size=(2, 14)), rng.uniform(0.5, 2.0, size=(2, 14)))
    x = rng.normal(size=14)
    assert rel_err(prior.log_density_gradient(x), central_diff(prior.log_density, x)) < 1e-6


def test_degenerate_covariance_floored():
    X, _ = _mixture(200, 3)
    X[:, 5] = 1.0
    prior = fit_gmm(X, seed=0)
    assert prior.floored > 0
    assert np.all(prior.variances >= 1e-10)


def test_too_few_samples():
    with pytest.raises(ValueError):
        fit_gmm(np.zeros((3, 14)))


def test_sample_named_component():
    prior = GmmPrior([0.5, 0.5], [np.zeros(14), np.full(14, 10.0)], np.full((2, 14), 0.01))
    draws = prior.sample("overhead", np.random.default_rng(0), n=50)
    assert all(np.allclose(d.vector, 10.0, atol=1.0) for d in draws)
    assert np.allclose(prior.sample("side", np.random.default_rng(0)).vector, 0.0, atol=1.0)
    with pytest.raises(KeyError):
        prior.sample("sideways")


def test_prior_save_load(tmp_path):
    X, _ = _mixture(300, 4)
    prior = fit_gmm(X, seed=0)
    prior.save(tmp_path / "p.json")
    back = GmmPrior.load(tmp_path / "p.json")
    np.testing.assert_array_equal(back.means, prior.means)
    assert back.history == prior.history
    assert back.log_density(X[0]) == prior.log_density(X[0])


# --- score -----------------------------------------------------------------------


class _ConstModel:
    def __init__(self, h):
        self.h = h

    def predict(self, emb, size, g):
        return self.h

    def predict_with_gradient(self, emb, size, g):
        return self.h, np.zeros(14)


_PRIOR = GmmPrior([0.5, 0.5], [np.zeros(14), np.ones(14)], np.ones((2, 14)))


def test_score_alpha_zero():
    g = np.zeros(14)
    assert grasp_score(_ConstModel(0.5), _PRIOR, None, 0.1, g, alpha=0.0) == pytest.approx(np.log(2))
    assert grasp_score(_ConstModel(0.3), _PRIOR, None, 0.1, g, alpha=0.0) == -np.log(0.3)


def test_score_clamps_probabilities():
    g = np.full(14, 100.0)
    s = grasp_score(_ConstModel(0.0), _PRIOR, None, 0.1, g, alpha=1.0)
    assert s == pytest.approx(-2 * np.log(PROB_EPS))
    with pytest.raises(ValueError):
        grasp_score(_ConstModel(0.5), _PRIOR, None, 0.1, g, alpha=-1.0)


@settings(max_examples=40, deadline=None)
@given(st.floats(0.01, 0.98), st.floats(0.001, 0.01))
def test_score_decreases_in_h(h, dh):
    g = np.full(14, 3.0)
    lo = grasp_score(_ConstModel(h + dh), _PRIOR, None, 0.1, g)
    hi = grasp_score(_ConstModel(h), _PRIOR, None, 0.1, g)
    assert lo < hi


def test_score_decreases_in_density():
    g_near, g_far = np.full(14, 1.1), np.full(14, 1.5)
    assert _PRIOR.log_density(g_near) > _PRIOR.log_density(g_far) > np.log(PROB_EPS)
    m = _ConstModel(0.7)
    assert grasp_score(m, _PRIOR, None, 0.1, g_near) < grasp_score(m, _PRIOR, None, 0.1, g_far)
