"""Grasp configuration, success classifier h, GMM prior g and the combined score.

A grasp configuration is the 8 active hand joints followed by the palm pose
(position in meters, XYZ Euler angles) expressed in the observation's object
frame: camera-aligned axes with the origin at the cloud centroid, unscaled.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from .camera import NormalizedCloud
from .kinematics import JointConfig
from .nn import AdamState, DenseNetwork, TrainingReport, adam_step, bce_loss
from .pointsdf import CloudEmbedding, canonical_subsample, fixed_size
from .transforms import RigidTransform, euler_rate_matrix, matrix_to_euler_xyz

log = logging.getLogger(__name__)

N_ACTIVE = 8
CONFIG_DIM = 14
PROB_EPS = 1e-7
VAR_FLOOR = 1e-10
COMPONENTS = ("side", "overhead")


def frame_id(frame):
    """Short stable identifier of an object frame; "world" for the identity pose."""
    if frame is None:
        return "world"
    if isinstance(frame, NormalizedCloud):
        pose = frame.frame_pose
    elif isinstance(frame, dict):
        pose = RigidTransform.from_dict(frame["frame_pose"]) if "frame_pose" in frame else None
        if pose is None:
            return "world"
    elif isinstance(frame, RigidTransform):
        pose = frame
    else:
        raise TypeError(f"unsupported frame {type(frame).__name__}")
    if pose.allclose(RigidTransform()):
        return "world"
    blob = json.dumps([np.round(pose.q, 12).tolist(), np.round(pose.t, 12).tolist()])
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _frame_pose(frame):
    if frame is None:
        return RigidTransform()
    if isinstance(frame, NormalizedCloud):
        return frame.frame_pose
    if isinstance(frame, dict):
        return RigidTransform.from_dict(frame["frame_pose"])
    return frame


@dataclass
class GraspConfig:
    q_h_active: np.ndarray
    palm: np.ndarray
    frame: str = "world"

    def __post_init__(self):
        self.q_h_active = np.asarray(self.q_h_active, dtype=float).reshape(N_ACTIVE)
        self.palm = np.asarray(self.palm, dtype=float).reshape(6)
        if not (np.all(np.isfinite(self.q_h_active)) and np.all(np.isfinite(self.palm))):
            raise ValueError("grasp configuration must be finite")

    @property
    def vector(self):
        return np.concatenate([self.q_h_active, self.palm])

    @classmethod
    def from_vector(cls, v, frame="world"):
        v = np.asarray(v, dtype=float)
        return cls(v[:N_ACTIVE], v[N_ACTIVE:], frame)

    def to_dict(self):
        return {"q_h_active": self.q_h_active.tolist(), "palm": self.palm.tolist(), "frame": self.frame}

    @classmethod
    def from_dict(cls, d):
        return cls(d["q_h_active"], d["palm"], d.get("frame", "world"))


def _active_columns(chain):
    """Indices (into q_h, 0..15) of the active hand joints, in chain order."""
    return np.asarray(chain.active_hand) - len(chain.arm_indices)


def make_grasp_config(chain, q, frame=None):
    qa = q.as_array() if isinstance(q, JointConfig) else np.asarray(q, dtype=float)
    if not np.all(np.isfinite(qa)):
        raise ValueError("joint configuration must be finite")
    kin = chain.fk(qa)
    palm = kin.pose(chain.palm_index)
    local = _frame_pose(frame).inverse() @ palm
    vec = np.concatenate([local.t, matrix_to_euler_xyz(local.rotation)])
    return GraspConfig(qa[chain.active_hand], vec, frame_id(frame))


def grasp_config_jacobian(chain, q, frame=None):
    """d(grasp vector)/dq, shape (14, n_joints); Euler rows via the inverse rate matrix."""
    q = np.asarray(q, dtype=float)
    kin = chain.fk(q)
    pi = chain.palm_index
    Rf = _frame_pose(frame).rotation
    m = chain.path_mask[pi]
    lin = np.zeros((3, chain.n_joints))
    ang = np.zeros((3, chain.n_joints))
    lin[:, m] = np.cross(kin.joint_axes[m], kin.origins[pi] - kin.joint_positions[m]).T
    ang[:, m] = kin.joint_axes[m].T
    euler = matrix_to_euler_xyz(Rf.T @ kin.rotations[pi])
    J = np.zeros((CONFIG_DIM, chain.n_joints))
    J[np.arange(N_ACTIVE), chain.active_hand] = 1.0
    J[8:11] = Rf.T @ lin
    J[11:14] = np.linalg.solve(euler_rate_matrix(euler), Rf.T @ ang)
    return J


# --- success classifier --------------------------------------------------------


@dataclass
class GraspTrainConfig:
    epochs: int = 30
    batch: int = 64
    lr: float = 1e-3
    seed: int = 0
    head_hidden: tuple = (64, 32)
    points: int = 256


class GraspSuccessModel:
    """Head over [embedding, grasp config (14), cloud size (1)] with a sigmoid output.

    ``mode`` is ``fixed`` when the encoder belongs to a trained implicit-surface
    model and stays frozen, ``scratch`` when it is trained jointly with the head.
    """

    def __init__(self, encoder, mode="scratch", head_hidden=(64, 32), seed=0, zero_head=False, max_points=256):
        if mode not in ("scratch", "fixed"):
            raise ValueError("mode must be 'scratch' or 'fixed'")
        self.encoder = encoder
        self.mode = mode
        self.max_points = max_points
        E = encoder.fan_out
        rng = np.random.default_rng(seed)
        sizes = [E + CONFIG_DIM + 1, *head_hidden, 1]
        acts = ["relu"] * len(head_hidden) + ["sigmoid"]
        self.head = DenseNetwork.create(sizes, acts, rng, zero_last=zero_head)
        self.in_mean = np.zeros(CONFIG_DIM + 1)
        self.in_std = np.ones(CONFIG_DIM + 1)

    @classmethod
    def scratch(cls, embedding=64, encoder_hidden=(32, 64), seed=0, **kw):
        enc = DenseNetwork.create([3, *encoder_hidden, embedding], "relu", np.random.default_rng(seed + 7919))
        return cls(enc, "scratch", seed=seed, **kw)

    @classmethod
    def fixed(cls, sdf_model, seed=0, **kw):
        return cls(sdf_model.encoder, "fixed", seed=seed, max_points=sdf_model.config.max_points, **kw)

    @property
    def embedding_width(self):
        return self.encoder.fan_out

    def embed(self, cloud):
        pts = cloud.points if isinstance(cloud, NormalizedCloud) else np.asarray(cloud, dtype=float)
        if len(pts) == 0:
            raise ValueError("cannot embed an empty cloud")
        vec = self.encoder.forward(canonical_subsample(pts, self.max_points)).max(axis=0)
        return CloudEmbedding(vec, cloud.metadata() if isinstance(cloud, NormalizedCloud) else {})

    def _input(self, emb, size, gvec):
        e = emb.vector if isinstance(emb, CloudEmbedding) else np.asarray(emb, dtype=float)
        gvec = np.atleast_2d(gvec)
        extra = np.concatenate([gvec, np.full((len(gvec), 1), float(size))], axis=1)
        extra = (extra - self.in_mean) / self.in_std
        return np.concatenate([np.broadcast_to(e, (len(gvec), len(e))), extra], axis=1)

    def predict(self, emb, size, g):
        _check_frame(emb, g)
        gv = g.vector if isinstance(g, GraspConfig) else np.asarray(g, dtype=float)
        # float64 sigmoid saturates to exactly 0 or 1 for large logits
        out = np.clip(self.head.forward(self._input(emb, size, gv))[:, 0], PROB_EPS, 1 - PROB_EPS)
        return float(out[0]) if np.ndim(gv) == 1 else out

    def predict_with_gradient(self, emb, size, g):
        """h and dh/d(grasp vector) (14,)."""
        _check_frame(emb, g)
        gv = g.vector if isinstance(g, GraspConfig) else np.asarray(g, dtype=float)
        out, cache = self.head.forward(self._input(emb, size, gv), keep=True)
        _, dx = self.head.backward_cached(cache, np.ones((1, 1)), need_params=False)
        h = float(out[0, 0])
        if not PROB_EPS < h < 1 - PROB_EPS:
            return float(np.clip(h, PROB_EPS, 1 - PROB_EPS)), np.zeros(CONFIG_DIM)
        E = self.embedding_width
        return h, dx[0, E:E + CONFIG_DIM] / self.in_std[:CONFIG_DIM]

    # persistence
    def save(self, directory):
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        self.head.save(d / "head.sdfg")
        self.encoder.save(d / "encoder.sdfg")
        meta = {"mode": self.mode, "max_points": self.max_points, "in_mean": self.in_mean.tolist(),
                "in_std": self.in_std.tolist(), "encoder_digest": self.encoder.digest()}
        (d / "classifier.json").write_text(json.dumps(meta, indent=2))

    @classmethod
    def load(cls, directory):
        d = Path(directory)
        meta = json.loads((d / "classifier.json").read_text())
        enc = DenseNetwork.load(d / "encoder.sdfg")
        m = cls(enc, meta["mode"], max_points=meta["max_points"])
        m.head = DenseNetwork.load(d / "head.sdfg")
        m.in_mean = np.array(meta["in_mean"])
        m.in_std = np.array(meta["in_std"])
        return m


def _check_frame(emb, g):
    if isinstance(g, GraspConfig) and isinstance(emb, CloudEmbedding) and emb.frame:
        fid = frame_id(emb.frame)
        if g.frame != fid:
            raise ValueError(f"grasp frame {g.frame!r} does not match observation frame {fid!r}")


def predict_success(model, emb, size_scalar, g):
    return model.predict(emb, size_scalar, g)


def f1_score(pred, label):
    pred = np.asarray(pred, dtype=bool)
    label = np.asarray(label, dtype=bool)
    tp = np.sum(pred & label)
    if tp == 0:
        return 0.0
    precision = tp / np.sum(pred)
    recall = tp / np.sum(label)
    return float(2 * precision * recall / (precision + recall))


def _stack_observations(samples, points, rng):
    """Unique observations as fixed-size arrays plus per-sample indices into them."""
    keys, clouds, index = {}, [], []
    for s in samples:
        k = id(s.observation)
        if k not in keys:
            keys[k] = len(clouds)
            clouds.append(fixed_size(s.observation.points, points, rng))
        index.append(keys[k])
    return np.array(clouds), np.array(index)


def _features(samples):
    return np.array([np.concatenate([s.config.vector, [s.observation.size_scalar]]) for s in samples])


def evaluate_success(model, samples, threshold=0.5):
    """Predicted probabilities and F1 at ``threshold``."""
    probs = np.empty(len(samples))
    cache = {}
    for i, s in enumerate(samples):
        k = id(s.observation)
        if k not in cache:
            cache[k] = model.embed(s.observation)
        probs[i] = model.predict(cache[k], s.observation.size_scalar, s.config)
    labels = np.array([s.label for s in samples])
    return probs, f1_score(probs > threshold, labels == 1)


def train_success(model, train_set, hyper=None, freeze_encoder=None, test_set=None):
    """BCE training. The encoder is frozen in ``fixed`` mode (or when asked explicitly).

    Returns the training report; ``report.extra`` holds test-split F1 when a test
    split is given, plus encoder digests before and after.
    """
    hyper = hyper or GraspTrainConfig()
    freeze = model.mode == "fixed" if freeze_encoder is None else freeze_encoder
    labels = np.array([s.label for s in train_set], dtype=float)
    if len(np.unique(labels)) < 2:
        raise ValueError("training set needs both labels")
    rng = np.random.default_rng(hyper.seed)
    feats = _features(train_set)
    model.in_mean = feats.mean(axis=0)
    std = feats.std(axis=0)
    model.in_std = np.where(std > 1e-8, std, 1.0)
    feats = (feats - model.in_mean) / model.in_std
    clouds, obs_index = _stack_observations(train_set, hyper.points, rng)
    digest_before = model.encoder.digest()
    if freeze:
        frozen_emb = model.encoder.forward(clouds.reshape(-1, 3)).reshape(len(clouds), hyper.points, -1).max(axis=1)
    head_state, enc_state = AdamState(lr=hyper.lr), AdamState(lr=hyper.lr)
    losses = []
    t0 = time.perf_counter()
    n = len(train_set)
    for epoch in range(hyper.epochs):
        order = rng.permutation(n)
        tot = 0.0
        for s in range(0, n, hyper.batch):
            idx = order[s:s + hyper.batch]
            obs, inv = np.unique(obs_index[idx], return_inverse=True)
            if freeze:
                emb = frozen_emb[obs]
            else:
                B, P = len(obs), hyper.points
                H, enc_cache = model.encoder.forward(clouds[obs].reshape(B * P, 3), keep=True)
                H = H.reshape(B, P, -1)
                arg = H.argmax(axis=1)
                emb = np.take_along_axis(H, arg[:, None, :], axis=1)[:, 0]
            x = np.concatenate([emb[inv], feats[idx]], axis=1)
            prob, cache = model.head.forward(x, keep=True)
            loss, dprob = bce_loss(prob[:, 0], labels[idx])
            head_g, dx = model.head.backward_cached(cache, dprob[:, None])
            adam_step(model.head, head_g, head_state)
            if not freeze:
                E = emb.shape[1]
                d_emb = np.zeros((len(obs), E))
                np.add.at(d_emb, inv, dx[:, :E])
                dH = np.zeros((len(obs), hyper.points, E))
                np.put_along_axis(dH, arg[:, None, :], d_emb[:, None, :], axis=1)
                enc_g, _ = model.encoder.backward_cached(enc_cache, dH.reshape(-1, E))
                adam_step(model.encoder, enc_g, enc_state)
            if not np.isfinite(loss):
                raise FloatingPointError(f"non-finite loss at epoch {epoch}")
            tot += loss * len(idx)
        losses.append(tot / n)
    report = TrainingReport(losses, time.perf_counter() - t0)
    report.extra["mode"] = model.mode
    report.extra["encoder_digest_before"] = digest_before
    report.extra["encoder_digest_after"] = model.encoder.digest()
    if test_set:
        _, f1 = evaluate_success(model, test_set)
        report.extra["test_f1"] = f1
    return report


# --- GMM prior ---------------------------------------------------------------


@dataclass
class GmmPrior:
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    labels: tuple = COMPONENTS
    history: list = field(default_factory=list)
    floored: int = 0

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        self.means = np.atleast_2d(np.asarray(self.means, dtype=float))
        self.variances = np.atleast_2d(np.asarray(self.variances, dtype=float))
        if np.any(self.weights <= 0) or abs(self.weights.sum() - 1) > 1e-9:
            raise ValueError("weights must be positive and sum to 1")
        if np.any(self.variances < VAR_FLOOR):
            raise ValueError("variances must be at least the floor")
        self.labels = tuple(self.labels)

    @property
    def k(self):
        return len(self.weights)

    def component_log_pdf(self, x):
        x = np.atleast_2d(x)
        diff = x[:, None, :] - self.means[None]
        return (-0.5 * np.sum(diff ** 2 / self.variances[None] + np.log(2 * np.pi * self.variances[None]), axis=2)
                + np.log(self.weights)[None])

    def log_density(self, x):
        x = x.vector if isinstance(x, GraspConfig) else np.asarray(x, dtype=float)
        out = logsumexp(self.component_log_pdf(x), axis=1)
        return float(out[0]) if x.ndim == 1 else out

    def log_density_gradient(self, x):
        x = x.vector if isinstance(x, GraspConfig) else np.asarray(x, dtype=float)
        lp = self.component_log_pdf(x)
        r = np.exp(lp - logsumexp(lp, axis=1, keepdims=True))
        g = np.einsum("nk,nkd->nd", r, -(np.atleast_2d(x)[:, None, :] - self.means[None]) / self.variances[None])
        return g[0] if x.ndim == 1 else g

    def component_index(self, name):
        if isinstance(name, (int, np.integer)):
            return int(name)
        if name not in self.labels:
            raise KeyError(f"no component named {name!r}")
        return self.labels.index(name)

    def sample(self, component=None, rng=None, n=None, frame="world"):
        rng = rng if rng is not None else np.random.default_rng(0)
        m = 1 if n is None else n
        if component is None:
            ks = rng.choice(self.k, size=m, p=self.weights)
        else:
            ks = np.full(m, self.component_index(component))
        x = self.means[ks] + rng.normal(size=(m, self.means.shape[1])) * np.sqrt(self.variances[ks])
        if n is None:
            return GraspConfig.from_vector(x[0], frame)
        return [GraspConfig.from_vector(v, frame) for v in x]

    def to_dict(self):
        return {"weights": self.weights.tolist(), "means": self.means.tolist(), "variances": self.variances.tolist(),
                "labels": list(self.labels), "history": [float(h) for h in self.history], "floored": self.floored}

    @classmethod
    def from_dict(cls, d):
        return cls(d["weights"], d["means"], d["variances"], tuple(d["labels"]), d.get("history", []),
                   d.get("floored", 0))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


def _as_matrix(configs):
    if isinstance(configs, np.ndarray):
        return np.atleast_2d(configs).astype(float)
    return np.array([c.vector if isinstance(c, GraspConfig) else np.asarray(c, dtype=float) for c in configs])


def _farthest_init(X, k, rng):
    idx = [int(rng.integers(len(X)))]
    d = np.sum((X - X[idx[0]]) ** 2, axis=1)
    for _ in range(1, k):
        idx.append(int(d.argmax()))
        d = np.minimum(d, np.sum((X - X[idx[-1]]) ** 2, axis=1))
    centers = X[idx]
    assign = np.argmin(((X[:, None] - centers[None]) ** 2).sum(-1), axis=1)
    return assign


def fit_gmm(configs, labels=None, seed=0, k=2, max_iter=500, tol=1e-8, names=COMPONENTS):
    """Diagonal-covariance EM. Initial responsibilities come from ``labels``
    (component tags) when given, otherwise from a seeded farthest-point split.
    ``history`` holds the mean log-likelihood after every M step."""
    X = _as_matrix(configs)
    n, d = X.shape
    if n < 2 * k:
        raise ValueError(f"need at least {2 * k} samples for {k} components")
    names = tuple(names[:k]) if len(names) >= k else tuple(str(i) for i in range(k))
    rng = np.random.default_rng(seed)
    if labels is not None:
        tags = list(labels)
        assign = np.array([names.index(t) if t in names else int(t) for t in tags])
        for j in range(k):
            if not np.any(assign == j):
                raise ValueError(f"component {names[j]!r} has no labelled samples")
    else:
        assign = _farthest_init(X, k, rng)
    resp = np.eye(k)[assign]
    floored = 0
    history = []
    for _ in range(max_iter):
        nk = resp.sum(axis=0) + 1e-300
        weights = nk / n
        means = resp.T @ X / nk[:, None]
        var = (resp.T @ X ** 2) / nk[:, None] - means ** 2
        low = var < VAR_FLOOR
        if np.any(low):
            floored = max(floored, int(low.sum()))
            var = np.maximum(var, VAR_FLOOR)
        prior = GmmPrior(weights / weights.sum(), means, var, names)
        lp = prior.component_log_pdf(X)
        ll = logsumexp(lp, axis=1)
        history.append(float(ll.mean()))
        resp = np.exp(lp - ll[:, None])
        if len(history) > 1 and abs(history[-1] - history[-2]) < tol:
            break
    if floored:
        log.warning("GMM fit floored %d variance entries at %g", floored, VAR_FLOOR)
    prior.history = history
    prior.floored = floored
    return prior


def log_density(prior, g):
    return prior.log_density(g)


def sample(prior, component=None, seed=0, frame="world"):
    return prior.sample(component, np.random.default_rng(seed), frame=frame)


# --- score -------------------------------------------------------------------


def grasp_score(model, prior, emb, size, g, alpha=1.0, with_gradient=False):
    """s = -log h - alpha log g, lower is better.

    Both terms are treated as probabilities and clamped to [1e-7, 1]. For the
    prior this caps the density at 1: inside the high-density region the prior
    is neutral and only ``h`` drives the score. With ``with_gradient`` returns
    (s, ds/dg, h, log g) where log g is the raw log density.
    """
    if alpha < 0:
        raise ValueError("alpha must be nonnegative")
    gv = g.vector if isinstance(g, GraspConfig) else np.asarray(g, dtype=float)
    if with_gradient:
        h, dh = model.predict_with_gradient(emb, size, g)
    else:
        h, dh = model.predict(emb, size, g), None
    lg = prior.log_density(gv)
    hc = max(h, PROB_EPS)
    lgc = min(max(lg, np.log(PROB_EPS)), 0.0)
    s = -np.log(hc) - alpha * lgc
    if not with_gradient:
        return float(s)
    ds = np.zeros(CONFIG_DIM)
    if h > PROB_EPS:
        ds -= dh / h
    if np.log(PROB_EPS) < lg < 0.0 and alpha:
        ds -= alpha * prior.log_density_gradient(gv)
    return float(s), ds, float(h), float(lg)
