"""First-stage BPR, visually-aware rankers (SimRank, VBPR, DVBPR), AMR training.

Every second-stage model exposes the same scoring surface:

* ``item_scores(ds)`` -> (U, n_items) scores of catalog items,
* ``image_scores(images)`` -> (U, n) scores of never-seen (cold) images,
* ``feature_scores(features)`` -> (U, n) scores from extractor features.
"""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.special import expit, log_softmax, softmax

from aip.diffcore import (
    OptimizerState, extractor_from_bytes, extractor_to_bytes, init_extractor, optimizer_step,
)
from aip.errors import SamplingError, ScoringError, TrainingError

log = logging.getLogger(__name__)

REC_MAGIC = b"REC1"


@dataclass(frozen=True)
class TrainConfig:
    factors: int = 16
    lr: float = 0.01
    reg: float = 1e-4
    epochs: int = 20
    batch_size: int = 64
    seed: int = 0
    optimizer: str = "adam"
    adv_weight: float = 0.0  # AMR lambda_adv
    adv_eps: float = 0.5  # AMR parameter-perturbation magnitude

    def check(self):
        if self.factors <= 0 or self.epochs <= 0 or self.batch_size <= 0:
            raise ValueError("factors, epochs and batch_size must be positive")
        if self.reg < 0 or self.adv_weight < 0 or self.adv_eps < 0:
            raise ValueError("reg, adv_weight and adv_eps must be non-negative")


BPR_DEFAULTS = TrainConfig(factors=16, lr=0.02, reg=0.03, epochs=20, batch_size=64, optimizer="adam")
VBPR_DEFAULTS = TrainConfig(factors=16, lr=0.01, reg=1e-4, epochs=30, batch_size=64, optimizer="adam")
DVBPR_DEFAULTS = TrainConfig(factors=64, lr=2e-3, reg=1e-5, epochs=15, batch_size=64, optimizer="adam")


def softplus(x):
    """ln(1 + e^x), stable for large |x|."""
    return np.logaddexp(0.0, x)


def pairwise_loss(diff):
    """-ln sigma(diff)."""
    return softplus(-np.asarray(diff, dtype=np.float64))


# -- triple sampling -----------------------------------------------------------

def _allowed_negatives(ds):
    return ds.trainable_mask()[None, :] & ~ds.positive_matrix()


def _eligible_users(ds, allowed):
    has_pos = np.array([len(p) > 0 for p in ds.all_positives()])
    return has_pos & allowed.any(axis=1)


def _draw_negatives(rng, users, allowed):
    j = rng.integers(0, allowed.shape[1], size=len(users))
    bad = ~allowed[users, j]
    while bad.any():
        j[bad] = rng.integers(0, allowed.shape[1], size=int(bad.sum()))
        bad = ~allowed[users, j]
    return j


def sample_triples(ds, n, seed=0):
    """Bootstrap ``n`` triples (u, i, j) with i a positive and j a uniform non-positive."""
    if n == 0:
        return []
    allowed = _allowed_negatives(ds)
    eligible = _eligible_users(ds, allowed)
    pairs = ds.training_pairs()
    pairs = pairs[eligible[pairs[:, 0]]]
    if len(pairs) == 0:
        raise SamplingError("no user has both positives and negatives")
    rng = np.random.default_rng(seed)
    picked = pairs[rng.integers(0, len(pairs), size=n)]
    neg = _draw_negatives(rng, picked[:, 0], allowed)
    return [(int(u), int(i), int(j)) for (u, i), j in zip(picked, neg)]


def _epoch_triples(rng, pairs, allowed):
    order = rng.permutation(len(pairs))
    p = pairs[order]
    return np.column_stack([p, _draw_negatives(rng, p[:, 0], allowed)])


# -- generic training loop -----------------------------------------------------

def _flatten(params):
    return np.concatenate([params[k].ravel() for k in params])


def _unflatten(vector, template):
    out, offset = {}, 0
    for k, v in template.items():
        out[k] = vector[offset:offset + v.size].reshape(v.shape)
        offset += v.size
    return out


def _fit(params, grad_fn, ds, cfg, loss_fn):
    """Minibatch training over one sampled negative per positive per epoch.

    ``grad_fn(params, triples)`` returns ``(loss, grads)`` for a batch;
    ``loss_fn(params, triples)`` evaluates the pairwise loss on the probe batch.
    Returns the trained parameter dict and a history dict.
    """
    rng = np.random.default_rng(cfg.seed)
    allowed = _allowed_negatives(ds)
    pairs = ds.training_pairs()
    pairs = pairs[_eligible_users(ds, allowed)[pairs[:, 0]]]
    if len(pairs) == 0:
        raise SamplingError("no trainable interactions")
    probe = np.array(sample_triples(ds, min(512, 4 * len(pairs)), seed=cfg.seed + 7919))
    state = OptimizerState(kind=cfg.optimizer, lr=cfg.lr)
    vector = _flatten(params)
    history = {"probe_loss": [float(loss_fn(params, probe))], "epoch_loss": []}
    for epoch in range(cfg.epochs):
        triples = _epoch_triples(rng, pairs, allowed)
        losses = []
        for b, start in enumerate(range(0, len(triples), cfg.batch_size)):
            batch = triples[start:start + cfg.batch_size]
            loss, grads = grad_fn(_unflatten(vector, params), batch)
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}", epoch=epoch, batch=b)
            vector, state = optimizer_step(state, vector, _flatten(grads), "descend")
            losses.append(loss)
        current = _unflatten(vector, params)
        history["epoch_loss"].append(float(np.mean(losses)))
        history["probe_loss"].append(float(loss_fn(current, probe)))
        log.debug("epoch %d loss %.4f probe %.4f", epoch, history["epoch_loss"][-1], history["probe_loss"][-1])
    return {k: v.copy() for k, v in _unflatten(vector, params).items()}, history


def _scatter(shape, index, values):
    out = np.zeros(shape)
    np.add.at(out, index, values)
    return out


# -- BPR -----------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class BPRModel:
    user_factors: np.ndarray
    item_factors: np.ndarray
    item_bias: np.ndarray
    offset: float = 0.0
    config: TrainConfig = field(default_factory=TrainConfig)
    history: dict = field(default_factory=dict, repr=False)
    kind = "bpr"

    def scores(self, user):
        return self.offset + self.item_bias + self.item_factors @ self.user_factors[user]

    def all_scores(self):
        return self.offset + self.item_bias[None, :] + self.user_factors @ self.item_factors.T

    def param_arrays(self):
        return {"user_factors": self.user_factors, "item_factors": self.item_factors,
                "item_bias": self.item_bias, "offset": np.array([self.offset])}


def _bpr_diff(p, t):
    u, i, j = t[:, 0], t[:, 1], t[:, 2]
    return p["item_bias"][i] - p["item_bias"][j] + np.sum(p["user_factors"][u] * (p["item_factors"][i] - p["item_factors"][j]), axis=1)


def _bpr_loss(p, t):
    return float(np.mean(pairwise_loss(_bpr_diff(p, t))))


def _bpr_grad(reg):
    def grad(p, t):
        u, i, j = t[:, 0], t[:, 1], t[:, 2]
        n = len(t)
        diff = _bpr_diff(p, t)
        loss = float(np.mean(pairwise_loss(diff)))
        d = -expit(-diff) / n
        gu, gi, gj = p["user_factors"][u], p["item_factors"][i], p["item_factors"][j]
        g = {
            "user_factors": _scatter(p["user_factors"].shape, u, d[:, None] * (gi - gj) + 2 * reg * gu / n),
            "item_factors": _scatter(p["item_factors"].shape, i, d[:, None] * gu + 2 * reg * gi / n)
            + _scatter(p["item_factors"].shape, j, -d[:, None] * gu + 2 * reg * gj / n),
            "item_bias": _scatter(p["item_bias"].shape, i, d + 2 * reg * p["item_bias"][i] / n)
            + _scatter(p["item_bias"].shape, j, -d + 2 * reg * p["item_bias"][j] / n),
        }
        return loss, g
    return grad


def bpr_train(ds, cfg=BPR_DEFAULTS):
    cfg.check()
    rng = np.random.default_rng(cfg.seed)
    params = {
        "user_factors": rng.normal(0, 0.1, size=(ds.n_users, cfg.factors)),
        "item_factors": rng.normal(0, 0.1, size=(ds.n_items, cfg.factors)),
        "item_bias": np.zeros(ds.n_items),
    }
    params["item_factors"][list(ds.cold_items)] = 0.0
    trained, history = _fit(params, _bpr_grad(cfg.reg), ds, cfg, _bpr_loss)
    return BPRModel(trained["user_factors"], trained["item_factors"], trained["item_bias"], 0.0, cfg, history)


def rankable_mask(ds, user):
    mask = ds.trainable_mask()
    mask[list(ds.positives(user))] = False
    return mask


def rank_order(scores, ids):
    """Indices sorting by (score descending, id ascending)."""
    return np.lexsort((np.asarray(ids), -np.asarray(scores)))


def bpr_candidates(model, ds, user, k):
    """Top-``k`` BPR items for ``user`` as a frozenset (rank order is discarded)."""
    return frozenset(int(i) for i in candidate_lists(model, ds, k, users=[user])[0])


def candidate_lists(model, ds, k, users=None):
    users = range(ds.n_users) if users is None else users
    out = []
    for u in users:
        ids = np.flatnonzero(rankable_mask(ds, u))
        if k > len(ids) or k < 0:
            raise ValueError(f"K={k} but user {u} has {len(ids)} rankable items")
        scores = model.scores(u)[ids]
        out.append(ids[rank_order(scores, ids)[:k]])
    return out


def auc_leave_one_out(model, ds, n_negatives=100, seed=0):
    """Mean fraction of sampled negatives scored below each user's test item."""
    rng = np.random.default_rng(seed)
    allowed = _allowed_negatives(ds)
    aucs = []
    for u, t in enumerate(ds.test_items):
        pool = np.flatnonzero(allowed[u])
        pool = pool[pool != t]
        negs = rng.choice(pool, size=min(n_negatives, len(pool)), replace=False)
        s = model.scores(u)
        aucs.append(np.mean(s[t] > s[negs]) + 0.5 * np.mean(s[t] == s[negs]))
    return float(np.mean(aucs))


# -- SimRank (feature-similarity ranker) ---------------------------------------

@dataclass(frozen=True, eq=False)
class SimRankModel:
    extractor: object
    item_features: np.ndarray  # (n_items, F) features of catalog items
    profile_weights: np.ndarray  # (U, n_items), row u = indicator(I_u+) / |I_u+|
    kind = "simrank"

    def feature_scores(self, features):
        f = np.atleast_2d(features)
        sq = (np.sum(f ** 2, axis=1)[:, None] + np.sum(self.item_features ** 2, axis=1)[None, :]
              - 2.0 * f @ self.item_features.T)
        return -(self.profile_weights @ np.maximum(sq, 0.0).T)

    def image_scores(self, images):
        return self.feature_scores(self.extractor.forward(np.asarray(images).reshape((-1,) + self.extractor.input_shape)))

    def item_scores(self, ds):
        return self.feature_scores(self.item_features)

    def param_arrays(self):
        return {"item_features": self.item_features, "profile_weights": self.profile_weights}


def build_simrank(extractor, ds):
    weights = ds.positive_matrix().astype(np.float64)
    counts = weights.sum(axis=1, keepdims=True)
    if np.any(counts == 0):
        raise ScoringError(f"user {int(np.flatnonzero(counts[:, 0] == 0)[0])} has no interactions")
    return SimRankModel(extractor, extractor.forward(ds.images), weights / counts)


def simrank_score(extractor, ds, user, image):
    """Negative mean squared feature distance to the user's positives."""
    positives = sorted(ds.positives(user))
    if not positives:
        raise ScoringError(f"user {user} has no interactions")
    f = extractor.forward(image)
    feats = extractor.forward(ds.images[positives])
    return float(sum(-np.sum((f - fj) ** 2) for fj in feats) / len(positives))


# -- VBPR / AMR ----------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class VBPRModel:
    extractor: object
    offset: float
    user_bias: np.ndarray
    item_bias: np.ndarray
    user_factors: np.ndarray
    item_factors: np.ndarray
    user_visual: np.ndarray  # theta_u, (U, F')
    projection: np.ndarray  # E, (F', F)
    config: TrainConfig = field(default_factory=TrainConfig)
    history: dict = field(default_factory=dict, repr=False)
    kind: str = "vbpr"

    def feature_scores(self, features):
        """Cold-item scores: item bias and item factors are zero for unseen items."""
        f = np.atleast_2d(features)
        return self.offset + self.user_bias[:, None] + self.user_visual @ (self.projection @ f.T)

    def image_scores(self, images):
        return self.feature_scores(self.extractor.forward(np.asarray(images).reshape((-1,) + self.extractor.input_shape)))

    def item_scores(self, ds, features=None):
        features = self.extractor.forward(ds.images) if features is None else features
        return (self.feature_scores(features) + self.item_bias[None, :]
                + self.user_factors @ self.item_factors.T)

    def param_arrays(self):
        return {"offset": np.array([self.offset]), "user_bias": self.user_bias, "item_bias": self.item_bias,
                "user_factors": self.user_factors, "item_factors": self.item_factors,
                "user_visual": self.user_visual, "projection": self.projection}


def vbpr_score(model, user, image):
    return float(model.image_scores(image)[user, 0])


def _vbpr_diff(p, t, feats):
    u, i, j = t[:, 0], t[:, 1], t[:, 2]
    df = feats[i] - feats[j]
    return (p["item_bias"][i] - p["item_bias"][j]
            + np.sum(p["user_factors"][u] * (p["item_factors"][i] - p["item_factors"][j]), axis=1)
            + np.sum(p["user_visual"][u] * (df @ p["projection"].T), axis=1))


def _vbpr_data_grad(p, t, feats, scale):
    """Gradient of scale * sum(-ln sigma(diff)) without regularization."""
    u, i, j = t[:, 0], t[:, 1], t[:, 2]
    diff = _vbpr_diff(p, t, feats)
    d = -expit(-diff) * scale
    df = feats[i] - feats[j]
    gu = p["user_factors"][u]
    theta = p["user_visual"][u]
    grads = {
        "user_bias": np.zeros_like(p["user_bias"]),
        "item_bias": _scatter(p["item_bias"].shape, i, d) + _scatter(p["item_bias"].shape, j, -d),
        "user_factors": _scatter(p["user_factors"].shape, u, d[:, None] * (p["item_factors"][i] - p["item_factors"][j])),
        "item_factors": _scatter(p["item_factors"].shape, i, d[:, None] * gu)
        + _scatter(p["item_factors"].shape, j, -d[:, None] * gu),
        "user_visual": _scatter(p["user_visual"].shape, u, d[:, None] * (df @ p["projection"].T)),
        "projection": (d[:, None] * theta).T @ df,
    }
    return diff, grads


VISUAL_KEYS = ("user_visual", "projection")


def _vbpr_grad(feats, cfg):
    reg = cfg.reg

    def grad(p, t):
        u, i, j = t[:, 0], t[:, 1], t[:, 2]
        n = len(t)
        diff, g = _vbpr_data_grad(p, t, feats, 1.0 / n)
        loss = float(np.mean(pairwise_loss(diff)))
        for key, idx in (("user_factors", u), ("user_visual", u), ("item_factors", i), ("item_factors", j),
                         ("item_bias", i), ("item_bias", j)):
            g[key] = g[key] + _scatter(p[key].shape, idx, 2 * reg * p[key][idx] / n)
        g["projection"] = g["projection"] + 2 * reg * p["projection"]
        if cfg.adv_weight > 0:
            adv_loss, adv_grads = _amr_adversarial(p, t, feats, cfg.adv_eps)
            loss += cfg.adv_weight * adv_loss
            for key in g:
                g[key] = g[key] + cfg.adv_weight * adv_grads[key]
        g.pop("offset", None)
        return loss, {k: g[k] if k in g else np.zeros_like(p[k]) for k in p}
    return grad


def amr_perturbation(p, t, feats, eps):
    """Normalized gradient-ascent step on the visual branch for the batch loss."""
    _, g = _vbpr_data_grad(p, t, feats, 1.0 / len(t))
    norm = np.sqrt(sum(np.sum(g[k] ** 2) for k in VISUAL_KEYS))
    if norm == 0:
        return {k: np.zeros_like(p[k]) for k in VISUAL_KEYS}
    return {k: eps * g[k] / norm for k in VISUAL_KEYS}


def _amr_adversarial(p, t, feats, eps):
    delta = amr_perturbation(p, t, feats, eps)
    perturbed = dict(p)
    for k in VISUAL_KEYS:
        perturbed[k] = p[k] + delta[k]
    diff, g = _vbpr_data_grad(perturbed, t, feats, 1.0 / len(t))
    return float(np.mean(pairwise_loss(diff))), g


def _vbpr_init(ds, extractor, cfg):
    rng = np.random.default_rng(cfg.seed)
    f = extractor.out_dim
    params = {
        "user_bias": np.zeros(ds.n_users),
        "item_bias": np.zeros(ds.n_items),
        "user_factors": rng.normal(0, 0.1, size=(ds.n_users, cfg.factors)),
        "item_factors": rng.normal(0, 0.1, size=(ds.n_items, cfg.factors)),
        "user_visual": rng.normal(0, 0.1, size=(ds.n_users, cfg.factors)),
        "projection": rng.normal(0, 0.1 / np.sqrt(f), size=(cfg.factors, f)),
    }
    params["item_factors"][list(ds.cold_items)] = 0.0
    return params


def vbpr_train(ds, extractor, cfg=VBPR_DEFAULTS, kind="vbpr"):
    """VBPR over a fixed extractor; ``cfg.adv_weight > 0`` switches on AMR's adversarial term."""
    cfg.check()
    feats = extractor.forward(ds.images)
    params = _vbpr_init(ds, extractor, cfg)

    def loss_fn(p, t):
        return float(np.mean(pairwise_loss(_vbpr_diff(p, t, feats))))

    trained, history = _fit(params, _vbpr_grad(feats, cfg), ds, cfg, loss_fn)
    trained["item_bias"][list(ds.cold_items)] = 0.0
    trained["item_factors"][list(ds.cold_items)] = 0.0
    return VBPRModel(extractor, 0.0, trained["user_bias"], trained["item_bias"], trained["user_factors"],
                     trained["item_factors"], trained["user_visual"], trained["projection"], cfg, history, kind)


def amr_train(ds, extractor, cfg=replace(VBPR_DEFAULTS, adv_weight=1.0)):
    return vbpr_train(ds, extractor, cfg, kind="amr")


# -- DVBPR ---------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class DVBPRModel:
    extractor: object  # trainable during fitting, frozen afterwards
    user_visual: np.ndarray  # theta_u, (U, F)
    config: TrainConfig = field(default_factory=TrainConfig)
    history: dict = field(default_factory=dict, repr=False)
    kind = "dvbpr"

    def feature_scores(self, features):
        return self.user_visual @ np.atleast_2d(features).T

    def image_scores(self, images):
        return self.feature_scores(self.extractor.forward(np.asarray(images).reshape((-1,) + self.extractor.input_shape)))

    def item_scores(self, ds):
        return self.feature_scores(self.extractor.forward(ds.images))

    def param_arrays(self):
        return {"user_visual": self.user_visual}


def dvbpr_score(model, user, image):
    return float(model.image_scores(image)[user, 0])


def dvbpr_train(ds, cfg=DVBPR_DEFAULTS, arch="conv-small", channels=(8, 16)):
    """Joint pairwise training of user embeddings and a conv extractor."""
    cfg.check()
    rng = np.random.default_rng(cfg.seed)
    extractor = init_extractor(arch, ds.image_shape, cfg.factors, channels=channels, seed=cfg.seed + 1)
    params = {"user_visual": rng.normal(0, 0.1, size=(ds.n_users, cfg.factors)), "extractor": extractor.params.copy()}

    def embed(p, items):
        return extractor.with_params(p["extractor"]).forward(ds.images[items])

    def loss_fn(p, t):
        items, inv = np.unique(t[:, 1:], return_inverse=True)
        e = embed(p, items)[inv.reshape(-1, 2)]
        diff = np.sum(p["user_visual"][t[:, 0]] * (e[:, 0] - e[:, 1]), axis=1)
        return float(np.mean(pairwise_loss(diff)))

    def grad(p, t):
        n = len(t)
        u = t[:, 0]
        items, inv = np.unique(t[:, 1:], return_inverse=True)
        inv = inv.reshape(-1, 2)
        theta = p["user_visual"][u]
        model_x = extractor.with_params(p["extractor"])
        holder = {}

        def upstream(e):
            diff = np.sum(theta * (e[inv[:, 0]] - e[inv[:, 1]]), axis=1)
            d = -expit(-diff) / n
            up = (_scatter(e.shape, inv[:, 0], d[:, None] * theta)
                  + _scatter(e.shape, inv[:, 1], -d[:, None] * theta))
            holder["diff"], holder["d"] = diff, d
            return up, None

        e, _, _, g_ext = model_x.forward_backward(ds.images[items], upstream, want_input=False)
        diff, d = holder["diff"], holder["d"]
        de = e[inv[:, 0]] - e[inv[:, 1]]
        g_theta = _scatter(p["user_visual"].shape, u, d[:, None] * de + 2 * cfg.reg * theta / n)
        g_ext = g_ext + 2 * cfg.reg * p["extractor"]
        return float(np.mean(pairwise_loss(diff))), {"user_visual": g_theta, "extractor": g_ext}

    trained, history = _fit(params, grad, ds, cfg, loss_fn)
    return DVBPRModel(extractor.with_params(trained["extractor"]), trained["user_visual"], cfg, history)


# -- classifier head over the fixed extractor ------------------------------------

@dataclass(frozen=True, eq=False)
class Classifier:
    extractor: object
    weights: np.ndarray  # (n_classes, F)
    bias: np.ndarray
    kind = "classifier"

    @property
    def n_classes(self):
        return self.weights.shape[0]

    def logits(self, images):
        return self.extractor.forward(images) @ self.weights.T + self.bias

    def predict(self, images):
        return np.argmax(self.logits(images), axis=-1)

    def param_arrays(self):
        return {"weights": self.weights, "bias": self.bias}


def pretrain_extractor(ds, out_dim=64, epochs=8, lr=3e-3, batch_size=32, seed=0, arch="conv-small",
                       channels=(8, 16)):
    """Train extractor + softmax head on the synthetic cluster labels.

    Stands in for a pretrained image network: the extractor is frozen
    afterwards and the head doubles as the classifier for class-targeted attacks.
    """
    labels = np.asarray(ds.item_clusters)
    n_classes = int(labels.max()) + 1
    items = np.flatnonzero(ds.trainable_mask())
    rng = np.random.default_rng(seed)
    extractor = init_extractor(arch, ds.image_shape, out_dim, channels=channels, seed=seed)
    w = rng.normal(0, 0.1 / np.sqrt(out_dim), size=(n_classes, out_dim))
    vector = np.concatenate([extractor.params, w.ravel(), np.zeros(n_classes)])
    ne = extractor.n_params
    state = OptimizerState(kind="adam", lr=lr)
    for _ in range(epochs):
        order = rng.permutation(items)
        for start in range(0, len(order), batch_size):
            batch = order[start:start + batch_size]
            ex = extractor.with_params(vector[:ne])
            wm = vector[ne:ne + w.size].reshape(w.shape)
            b = vector[ne + w.size:]
            y = labels[batch]
            held = {}

            def upstream(f):
                probs = softmax(f @ wm.T + b, axis=1)
                probs[np.arange(len(y)), y] -= 1.0
                probs /= len(y)
                held["dz"], held["f"] = probs, f
                return probs @ wm, None

            _, _, _, g_ext = ex.forward_backward(ds.images[batch], upstream, want_input=False)
            dz = held["dz"]
            grad = np.concatenate([g_ext, (dz.T @ held["f"]).ravel(), dz.sum(axis=0)])
            vector, state = optimizer_step(state, vector, grad)
    extractor = extractor.with_params(vector[:ne])
    return extractor, Classifier(extractor, vector[ne:ne + w.size].reshape(w.shape).copy(), vector[ne + w.size:].copy())


def cross_entropy(logits, target):
    return -log_softmax(np.atleast_2d(logits), axis=1)[:, target]


def most_popular_class(ds):
    """Class whose items collect the most training interactions."""
    pop = ds.item_popularity()
    labels = np.asarray(ds.item_clusters)
    return int(np.argmax(np.bincount(labels, weights=pop, minlength=labels.max() + 1)))


# -- checkpoints -----------------------------------------------------------------

def model_to_bytes(model):
    arrays = model.param_arrays()
    header = {
        "kind": model.kind,
        "arrays": [[k, list(np.shape(v))] for k, v in arrays.items()],
        "config": asdict(model.config) if hasattr(model, "config") else None,
        "seed": model.config.seed if hasattr(model, "config") else None,
    }
    fex = extractor_to_bytes(model.extractor) if hasattr(model, "extractor") else b""
    header["fex_bytes"] = len(fex)
    head = json.dumps(header, sort_keys=True).encode()
    body = b"".join(np.asarray(v, dtype="<f8").tobytes() for v in arrays.values())
    return REC_MAGIC + struct.pack("<I", len(head)) + head + body + fex


def model_from_bytes(blob):
    if blob[:4] != REC_MAGIC:
        raise ValueError("not a .rec checkpoint")
    (hlen,) = struct.unpack("<I", blob[4:8])
    header = json.loads(blob[8:8 + hlen])
    offset = 8 + hlen
    arrays = {}
    for name, shape in header["arrays"]:
        size = int(np.prod(shape)) if shape else 1
        arrays[name] = np.frombuffer(blob[offset:offset + 8 * size], dtype="<f8").astype(np.float64).reshape(shape)
        offset += 8 * size
    extractor = extractor_from_bytes(blob[offset:offset + header["fex_bytes"]]) if header["fex_bytes"] else None
    cfg = TrainConfig(**header["config"]) if header.get("config") else None
    kind = header["kind"]
    if kind == "bpr":
        return BPRModel(arrays["user_factors"], arrays["item_factors"], arrays["item_bias"],
                        float(arrays["offset"][0]), cfg)
    if kind == "simrank":
        return SimRankModel(extractor, arrays["item_features"], arrays["profile_weights"])
    if kind in ("vbpr", "amr"):
        return VBPRModel(extractor, float(arrays["offset"][0]), arrays["user_bias"], arrays["item_bias"],
                         arrays["user_factors"], arrays["item_factors"], arrays["user_visual"],
                         arrays["projection"], cfg, {}, kind)
    if kind == "dvbpr":
        return DVBPRModel(extractor, arrays["user_visual"], cfg)
    if kind == "classifier":
        return Classifier(extractor, arrays["weights"], arrays["bias"])
    raise ValueError(f"unknown model kind {kind!r}")


def save_model(model, path):
    Path(path).write_bytes(model_to_bytes(model))


def load_model(path):
    return model_from_bytes(Path(path).read_bytes())
