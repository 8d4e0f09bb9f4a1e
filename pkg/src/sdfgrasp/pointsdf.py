"""Learned implicit surface: point-cloud encoder + SDF decoder over (embedding, query).

The encoder is a shared per-point network followed by a max pool, so the
embedding is exactly invariant to point order and duplication. The decoder
ends in tanh, giving values in (-1, 1) in normalized object units.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .camera import NormalizedCloud
from .nn import AdamState, DenseNetwork, TrainingReport, adam_step, mse_loss
from .sdf import SdfField

log = logging.getLogger(__name__)

DEVIATION_NOTES = (
    "encoder is a shared per-point MLP with max pooling in place of PointConv layers; "
    "widths are design choices"
)


@dataclass
class PointSdfConfig:
    embedding: int = 256
    encoder_hidden: tuple = (64, 128)
    decoder_hidden: tuple = (512, 512, 256)
    max_points: int = 1024

    @classmethod
    def lite(cls):
        """Desk-scale variant used by the test suite and default experiments."""
        return cls(embedding=64, encoder_hidden=(32, 64), decoder_hidden=(128, 128), max_points=256)


@dataclass
class SdfTrainConfig:
    epochs: int = 60
    batch_views: int = 16
    points_per_view: int = 256
    queries_per_view: int = 256
    lr: float = 1e-3
    schedule: str = "cosine"
    lr_floor: float = 0.02
    lr_decay_at: tuple = (0.5, 0.75)
    seed: int = 0

    def lr_at(self, epoch):
        """Cosine decay to ``lr_floor * lr``, or halving at the ``lr_decay_at`` fractions."""
        if self.schedule == "cosine":
            frac = 0.5 * (1 + np.cos(np.pi * epoch / max(self.epochs - 1, 1)))
            return self.lr * (self.lr_floor + (1 - self.lr_floor) * frac)
        if self.schedule == "step":
            return self.lr * 0.5 ** sum(epoch >= f * self.epochs for f in self.lr_decay_at)
        raise ValueError(f"unknown schedule {self.schedule!r}")


@dataclass
class CloudEmbedding:
    vector: np.ndarray
    frame: dict = field(default_factory=dict)


def canonical_subsample(points, max_points):
    """Order-independent subsample: sort lexicographically, then take evenly spaced rows."""
    points = np.asarray(points, dtype=float)
    if len(points) <= max_points:
        return points
    order = np.lexsort(points.T[::-1])
    idx = np.linspace(0, len(points) - 1, max_points).round().astype(int)
    return points[order[idx]]


def fixed_size(points, n, rng):
    """Exactly ``n`` rows; padding repeats points, which leaves a max pool unchanged."""
    if len(points) >= n:
        return canonical_subsample(points, n)
    extra = rng.choice(len(points), n - len(points))
    return np.concatenate([points, points[extra]])


class PointSdfModel:
    def __init__(self, config=None, seed=0, zero_decoder=False):
        self.config = config or PointSdfConfig()
        c = self.config
        rng = np.random.default_rng(seed)
        enc_sizes = [3, *c.encoder_hidden, c.embedding]
        self.encoder = DenseNetwork.create(enc_sizes, "relu", rng)
        dec_sizes = [c.embedding + 3, *c.decoder_hidden, 1]
        acts = ["relu"] * len(c.decoder_hidden) + ["tanh"]
        self.decoder = DenseNetwork.create(dec_sizes, acts, rng)
        if zero_decoder:
            for layer in self.decoder.layers:
                layer.weight[:] = 0.0
                layer.bias[:] = 0.0
        self.corpus_hash = ""

    @property
    def embedding_width(self):
        return self.config.embedding

    # --- inference -------------------------------------------------------------

    def embed(self, cloud):
        pts = cloud.points if isinstance(cloud, NormalizedCloud) else np.asarray(cloud, dtype=float)
        if len(pts) == 0:
            raise ValueError("cannot embed an empty cloud")
        pts = canonical_subsample(pts, self.config.max_points)
        vec = self.encoder.forward(pts).max(axis=0)
        meta = cloud.metadata() if isinstance(cloud, NormalizedCloud) else {}
        return CloudEmbedding(vec, meta)

    def _decoder_input(self, emb, x):
        x = np.asarray(x, dtype=float)
        pts = x.reshape(-1, 3)
        e = emb.vector if isinstance(emb, CloudEmbedding) else np.asarray(emb)
        return np.concatenate([np.broadcast_to(e, (len(pts), len(e))), pts], axis=1), x.ndim == 1

    def predict_sdf(self, emb, x):
        inp, single = self._decoder_input(emb, x)
        out = self.decoder.forward(inp)[:, 0]
        return float(out[0]) if single else out

    def query_gradient(self, emb, x):
        inp, single = self._decoder_input(emb, x)
        g = self.decoder.input_gradient(inp)[:, -3:]
        return g[0] if single else g

    def predict_with_gradient(self, emb, x):
        inp, single = self._decoder_input(emb, x)
        out, cache = self.decoder.forward(inp, keep=True)
        _, g = self.decoder.backward_cached(cache, np.ones((len(inp), 1)), need_params=False)
        if single:
            return float(out[0, 0]), g[0, -3:]
        return out[:, 0], g[:, -3:]

    def as_field(self, emb, frame, box_half_extent=1.0):
        return LearnedSdfField(self, emb, frame, box_half_extent)

    # --- persistence -------------------------------------------------------------

    def save(self, directory):
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        self.encoder.save(d / "encoder.sdfg")
        self.decoder.save(d / "decoder.sdfg")
        manifest = {"embedding_width": self.config.embedding, "config": asdict(self.config),
                    "training_corpus_hash": self.corpus_hash, "deviation_notes": DEVIATION_NOTES}
        (d / "manifest.json").write_text(json.dumps(manifest, indent=2))

    @classmethod
    def load(cls, directory):
        d = Path(directory)
        manifest = json.loads((d / "manifest.json").read_text())
        cfg = manifest["config"]
        model = cls(PointSdfConfig(cfg["embedding"], tuple(cfg["encoder_hidden"]), tuple(cfg["decoder_hidden"]),
                                   cfg["max_points"]))
        model.encoder = DenseNetwork.load(d / "encoder.sdfg")
        model.decoder = DenseNetwork.load(d / "decoder.sdfg")
        model.corpus_hash = manifest.get("training_corpus_hash", "")
        return model


def embed(model, cloud):
    return model.embed(cloud)


def predict_sdf(model, emb, x):
    return model.predict_sdf(emb, x)


def query_gradient(model, emb, x):
    return model.query_gradient(emb, x)


def as_field(model, emb, frame, box_half_extent=1.0):
    return model.as_field(emb, frame, box_half_extent)


class LearnedSdfField(SdfField):
    """World-space view of a learned model for one observation.

    Queries inside the normalized box ``[-B, B]^3`` go straight through the
    network; outside it the query is clamped to the box and the world-space
    distance to the box is added (the network is only trained inside).
    """

    def __init__(self, model, emb, frame, box_half_extent=1.0):
        self.model = model
        self.emb = emb
        self.frame = frame
        self.box = float(box_half_extent)

    def _eval(self, p):
        n = self.frame.normalize(p)
        clamped = np.clip(n, -self.box, self.box)
        out = n - clamped
        dist = np.linalg.norm(out, axis=1)
        v, g = self.model.predict_with_gradient(self.emb, clamped)
        g = np.where(out != 0, 0.0, g)
        outside = dist > 0
        if np.any(outside):
            g[outside] += out[outside] / dist[outside, None]
        R = self.frame.frame_pose.rotation
        return (v + dist) / self.frame.scale, g @ R.T


# --- training ----------------------------------------------------------------


def _encode_batch(model, clouds):
    """clouds: (B, P, 3) -> embeddings (B, E) and the cache needed for backward."""
    B, P, _ = clouds.shape
    H, cache = model.encoder.forward(clouds.reshape(B * P, 3), keep=True)
    H = H.reshape(B, P, -1)
    arg = H.argmax(axis=1)
    emb = np.take_along_axis(H, arg[:, None, :], axis=1)[:, 0]
    return emb, (cache, arg, B, P)


def _encoder_backward(model, enc_cache, d_emb):
    cache, arg, B, P = enc_cache
    E = d_emb.shape[1]
    dH = np.zeros((B, P, E))
    np.put_along_axis(dH, arg[:, None, :], d_emb[:, None, :], axis=1)
    grads, _ = model.encoder.backward_cached(cache, dH.reshape(B * P, E))
    return grads


def sdf_batch_step(model, clouds, queries, labels, freeze_encoder=False):
    """Loss and parameter gradients for a batch of views.

    clouds (B, P, 3), queries (B, Q, 3), labels (B, Q).
    """
    B, Q, _ = queries.shape
    emb, enc_cache = _encode_batch(model, clouds)
    inp = np.concatenate([np.repeat(emb[:, None, :], Q, axis=1), queries], axis=2).reshape(B * Q, -1)
    pred, cache = model.decoder.forward(inp, keep=True)
    loss, dpred = mse_loss(pred[:, 0], labels.reshape(-1))
    dec_grads, d_inp = model.decoder.backward_cached(cache, dpred[:, None])
    enc_grads = None
    if not freeze_encoder:
        d_emb = d_inp[:, :-3].reshape(B, Q, -1).sum(axis=1)
        enc_grads = _encoder_backward(model, enc_cache, d_emb)
    return loss, enc_grads, dec_grads


def prepare_views(dataset, cfg, rng):
    """Stack a list of (cloud, queries, labels) into fixed-size arrays."""
    clouds, qs, ls = [], [], []
    for cloud, q, lab in dataset:
        pts = cloud.points if isinstance(cloud, NormalizedCloud) else np.asarray(cloud)
        clouds.append(fixed_size(pts, cfg.points_per_view, rng))
        qs.append(q)
        ls.append(lab)
    return np.array(clouds), qs, ls


def train(model, dataset, hyper=None, callback=None):
    """Adam on MSE; reproducible for a fixed ``hyper.seed``. Mutates ``model``."""
    hyper = hyper or SdfTrainConfig()
    if not dataset:
        raise ValueError("empty training set")
    for _, _, lab in dataset:
        if np.any(np.abs(lab) > 1.0):
            raise ValueError("labels must lie in [-1, 1]")
    rng = np.random.default_rng(hyper.seed)
    clouds, qs, ls = prepare_views(dataset, hyper, rng)
    n = len(clouds)
    enc_state, dec_state = AdamState(lr=hyper.lr), AdamState(lr=hyper.lr)
    losses = []
    t0 = time.perf_counter()
    for epoch in range(hyper.epochs):
        lr = hyper.lr_at(epoch)
        order = rng.permutation(n)
        batch_losses, weights = [], []
        for s in range(0, n, hyper.batch_views):
            idx = order[s:s + hyper.batch_views]
            Q = min(hyper.queries_per_view, min(len(qs[i]) for i in idx))
            qb = np.empty((len(idx), Q, 3))
            lb = np.empty((len(idx), Q))
            for k, i in enumerate(idx):
                pick = rng.choice(len(qs[i]), Q, replace=False) if len(qs[i]) > Q else np.arange(Q)
                qb[k], lb[k] = qs[i][pick], ls[i][pick]
            loss, enc_g, dec_g = sdf_batch_step(model, clouds[idx], qb, lb)
            if not np.isfinite(loss):
                raise FloatingPointError(f"non-finite loss at epoch {epoch}, batch starting {s}")
            adam_step(model.encoder, enc_g, enc_state, lr)
            adam_step(model.decoder, dec_g, dec_state, lr)
            batch_losses.append(loss)
            weights.append(len(idx))
        losses.append(float(np.average(batch_losses, weights=weights)))
        log.debug("epoch %d loss %.6f", epoch, losses[-1])
        if callback is not None:
            callback(epoch, losses[-1])
    return TrainingReport(losses, time.perf_counter() - t0)


def smoothed(values, window=5):
    v = np.asarray(values, dtype=float)
    if len(v) < window:
        return v
    return np.convolve(v, np.ones(window) / window, mode="valid")
