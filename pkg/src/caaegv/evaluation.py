"""Gender score, FR score and distance statistics for the four-model comparison.

The gender classifier and the identity embedding network are small
convolutional stand-ins trained here; the metric functions themselves only
need something with a ``predict`` / ``transform`` method.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .dataset import GROUP_NAMES, N_GROUPS, SEXES, build_dataset, label_arrays
from .exceptions import EmptyInput, ShapeMismatch, SingleClassDataset, SingleIdentityDataset, TooFewValues
from .nets import ConvHead, init_module, to_nchw
from .trainer import simulate_batch
from .validation import check_groups, check_images, check_sexes

log = logging.getLogger(__name__)

DEFAULT_THRESHOLDS = (1.6, 2.0, 2.5)
PERCENTILES = tuple(range(10, 100, 10))


def _batched(module, X, batch_size=256):
    dtype = next(module.parameters()).dtype
    out = []
    with torch.no_grad():
        for start in range(0, len(X), batch_size):
            out.append(module(to_nchw(X[start:start + batch_size], dtype)))
    return torch.cat(out).numpy() if out else np.zeros((0, module.fc.out_features), np.float32)


class GenderClassifier(ClassifierMixin, BaseEstimator):
    """Small convolutional binary classifier; class 0 = male, 1 = female."""

    def __init__(self, image_size=64, channels=(8, 16, 32), epochs=8, batch_size=64,
                 learning_rate=1e-3, seed=0):
        self.image_size = image_size
        self.channels = channels
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.seed = seed

    def fit(self, X, y):
        X = check_images(X, self.image_size)
        y = check_sexes(y, X.shape[0])
        if len(np.unique(y)) < 2:
            raise SingleClassDataset("gender classifier needs images of both sexes")
        self.classes_ = np.array([0, 1])
        net = init_module(ConvHead(self.image_size, self.channels, 2).double(), self.seed).float()
        opt = torch.optim.Adam(net.parameters(), lr=self.learning_rate)
        rng = np.random.default_rng(self.seed)
        data, target = to_nchw(X), torch.as_tensor(y)
        for _ in range(self.epochs):
            perm = rng.permutation(len(X))
            for start in range(0, len(X), self.batch_size):
                idx = perm[start:start + self.batch_size]
                loss = F.cross_entropy(net(data[idx]), target[idx])
                opt.zero_grad()
                loss.backward()
                opt.step()
        self.net_ = net
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "net_")
        X = check_images(X, self.image_size)
        logits = _batched(self.net_, X)
        logits = logits - logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        return p / p.sum(axis=1, keepdims=True)

    def predict(self, X):
        return np.argmax(self.predict_proba(X), axis=1)


class IdentityEmbedder(TransformerMixin, BaseEstimator):
    """Maps faces to a ``dim``-dimensional Euclidean space with a contrastive loss.

    Same-identity pairs are pulled together (squared distance), different-
    identity pairs pushed beyond ``margin``.
    """

    def __init__(self, image_size=64, dim=32, channels=(16, 32, 64, 64), margin=3.0, epochs=10,
                 batch_size=64, learning_rate=1e-3, seed=0):
        self.image_size = image_size
        self.dim = dim
        self.channels = channels
        self.margin = margin
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.seed = seed

    def fit(self, X, y):
        X = check_images(X, self.image_size)
        ids = np.asarray(y).reshape(-1)
        if ids.shape[0] != X.shape[0]:
            raise ShapeMismatch("one identity label per image is required")
        uniq, inv = np.unique(ids, return_inverse=True)
        if len(uniq) < 2:
            raise SingleIdentityDataset("embedding training needs at least two identities")
        members = [np.flatnonzero(inv == k) for k in range(len(uniq))]
        net = init_module(ConvHead(self.image_size, self.channels, self.dim).double(), self.seed).float()
        opt = torch.optim.Adam(net.parameters(), lr=self.learning_rate)
        rng = np.random.default_rng(self.seed)
        data = to_nchw(X)
        n = len(X)
        for _ in range(self.epochs):
            perm = rng.permutation(n)
            pos = np.array([rng.choice(members[inv[i]]) for i in perm])
            neg_id = (inv[perm] + rng.integers(1, len(uniq), size=n)) % len(uniq)
            neg = np.array([rng.choice(members[k]) for k in neg_id])
            for start in range(0, n, self.batch_size):
                sl = slice(start, start + self.batch_size)
                ea, ep, en = net(data[perm[sl]]), net(data[pos[sl]]), net(data[neg[sl]])
                d_pos = ((ea - ep) ** 2).sum(1)
                d_neg = torch.sqrt(((ea - en) ** 2).sum(1) + 1e-12)
                loss = d_pos.mean() + (F.relu(self.margin - d_neg) ** 2).mean()
                opt.zero_grad()
                loss.backward()
                opt.step()
        self.net_ = net
        return self

    def transform(self, X):
        check_is_fitted(self, "net_")
        return _batched(self.net_, check_images(X, self.image_size, allow_single=True))


# ---------------------------------------------------------------------------
# Metrics


@dataclass
class GenderScoreTable:
    """(correct, total) counts per (sex, age group); empty cells are absent."""

    counts: dict = field(default_factory=dict)

    def accuracy(self, sex: str, group: int) -> float | None:
        cell = self.counts.get((sex, group))
        return None if cell is None else cell[0] / cell[1]

    def average(self, sex: str) -> float | None:
        """Unweighted mean over the populated groups."""
        accs = [self.accuracy(sex, g) for g in range(N_GROUPS) if (sex, g) in self.counts]
        return float(np.mean(accs)) if accs else None

    def overall(self, sex: str) -> float | None:
        cells = [self.counts[(sex, g)] for g in range(N_GROUPS) if (sex, g) in self.counts]
        if not cells:
            return None
        return sum(c for c, _ in cells) / sum(t for _, t in cells)

    def to_dict(self) -> dict:
        out = {}
        for sex in SEXES:
            groups = {str(g): {"correct": c, "total": t, "accuracy": c / t}
                      for (s, g), (c, t) in sorted(self.counts.items()) if s == sex}
            out[sex] = {"groups": groups, "average": self.average(sex), "overall": self.overall(sex)}
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "GenderScoreTable":
        counts = {}
        for sex, block in d.items():
            for g, cell in block["groups"].items():
                counts[(sex, int(g))] = (int(cell["correct"]), int(cell["total"]))
        return cls(counts)


def gender_score_from_predictions(predicted, expected, groups) -> GenderScoreTable:
    predicted = check_sexes(predicted)
    expected = check_sexes(expected, len(predicted))
    groups = check_groups(groups, len(predicted))
    if len(predicted) == 0:
        raise EmptyInput("nothing to score")
    counts = {}
    for s in (0, 1):
        for g in range(N_GROUPS):
            mask = (expected == s) & (groups == g)
            total = int(mask.sum())
            if total:
                counts[(SEXES[s], g)] = (int((predicted[mask] == s).sum()), total)
    return GenderScoreTable(counts)


def gender_score(classifier, images, expected, groups) -> GenderScoreTable:
    """Accuracy of ``classifier`` against the intended sex, per (sex, group)."""
    if len(images) == 0:
        raise EmptyInput("nothing to score")
    return gender_score_from_predictions(classifier.predict(images), expected, groups)


def embedding_distance(e1, e2) -> np.ndarray | float:
    a, b = np.asarray(e1, dtype=np.float64), np.asarray(e2, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"embedding shapes differ: {a.shape} vs {b.shape}")
    d = np.sqrt(np.sum((a - b) ** 2, axis=-1))
    return float(d) if d.ndim == 0 else d


def fr_score(distances, threshold: float) -> float:
    """Fraction of distances strictly below ``threshold``."""
    d = np.asarray(distances, dtype=np.float64).reshape(-1)
    if d.size == 0:
        raise EmptyInput("no distances")
    return float(np.count_nonzero(d < threshold)) / d.size


@dataclass(frozen=True)
class DistanceStats:
    min: float
    max: float
    mean: float
    sd: float
    percentiles: dict

    def to_dict(self) -> dict:
        return {"min": self.min, "max": self.max, "mean": self.mean, "sd": self.sd,
                **{f"p{p}": v for p, v in self.percentiles.items()}}

    @classmethod
    def from_dict(cls, d: dict) -> "DistanceStats":
        return cls(d["min"], d["max"], d["mean"], d["sd"], {p: d[f"p{p}"] for p in PERCENTILES})


def distance_stats(distances) -> DistanceStats:
    """Summary with sample SD (n - 1) and linearly interpolated percentiles."""
    d = np.asarray(distances, dtype=np.float64).reshape(-1)
    if d.size < 2:
        raise TooFewValues("distance statistics need at least two values")
    pct = np.percentile(d, PERCENTILES, method="linear")
    return DistanceStats(min=float(d.min()), max=float(d.max()), mean=float(d.mean()),
                         sd=float(d.std(ddof=1)), percentiles={p: float(v) for p, v in zip(PERCENTILES, pct)})


def percentage_gain(baseline: float, value: float, higher_is_better: bool = True) -> float:
    """Relative improvement over the baseline, in percent."""
    if baseline == 0:
        return float("nan")
    diff = value - baseline if higher_is_better else baseline - value
    return 100.0 * diff / abs(baseline)


def average_gain(group_gains) -> float:
    """Gain shown on an "Average" row: the mean of the per-group gains."""
    vals = [g for g in group_gains if g is not None and np.isfinite(g)]
    return float(np.mean(vals)) if vals else float("nan")


# ---------------------------------------------------------------------------
# Training helpers


def train_gender_classifier(records, images, min_age: int = 21, split=(0.7, 0.15, 0.15), seed: int = 0,
                            **params):
    """Fit the classifier on adult faces; returns ``(classifier, test_table)``.

    The test table has the per-group layout of the classifier performance
    table (correct/total per sex and group) on the held-out split.
    """
    idx = [i for i, r in enumerate(records) if r.age >= min_age]
    adults = [records[i] for i in idx]
    if len({r.sex for r in adults}) < 2:
        raise SingleClassDataset("gender classifier needs adult images of both sexes")
    position = {id(r): i for r, i in zip(adults, idx)}
    train, _val, test = build_dataset(adults, split, seed=seed)
    tr = [position[id(r)] for r in train]
    te = [position[id(r)] for r in test]
    y_train = label_arrays([records[i] for i in tr])[:, 1]
    clf = GenderClassifier(image_size=images.shape[1], seed=seed, **params).fit(images[tr], y_train)
    if not te:
        return clf, None
    y_test = label_arrays([records[i] for i in te])
    table = gender_score(clf, images[te], y_test[:, 1], y_test[:, 0])
    return clf, table


def train_embedding_net(records, images, seed: int = 0, **params) -> IdentityEmbedder:
    ids = [r.identity if r.identity is not None else r.source for r in records]
    return IdentityEmbedder(image_size=images.shape[1], seed=seed, **params).fit(images, np.asarray(ids))


# ---------------------------------------------------------------------------
# Full comparison


def _networks(model):
    return getattr(model, "networks_", model)


def evaluate_model(model, images, sexes, classifier, embedder, thresholds=DEFAULT_THRESHOLDS) -> dict:
    nets = _networks(model)
    images = check_images(images, nets.arch.image_size)
    sexes = check_sexes(sexes, images.shape[0])
    if images.shape[0] == 0:
        raise EmptyInput("no evaluation inputs")
    sims = simulate_batch(nets, images, sexes)
    n = images.shape[0]
    flat = sims.reshape(n * N_GROUPS, *sims.shape[2:])
    expected = np.repeat(sexes, N_GROUPS)
    groups = np.tile(np.arange(N_GROUPS), n)
    table = gender_score(classifier, flat, expected, groups)
    e_in = embedder.transform(images)
    e_sim = embedder.transform(flat).reshape(n, N_GROUPS, -1)
    dists = embedding_distance(np.broadcast_to(e_in[:, None, :], e_sim.shape), e_sim)
    return {
        "gender": table.to_dict(),
        "distance_stats": distance_stats(dists).to_dict(),
        "fr": {f"{t:g}": fr_score(dists, t) for t in thresholds},
        "distances": dists.tolist(),
    }


def _gains(models: dict, baseline: str, thresholds) -> dict:
    base = models[baseline]
    out = {}
    for name, m in models.items():
        g = {"gender": {}, "distance_stats": {}, "fr": {}}
        for sex in SEXES:
            per_group = {}
            for key, cell in m["gender"][sex]["groups"].items():
                b = base["gender"][sex]["groups"].get(key)
                per_group[key] = percentage_gain(b["accuracy"], cell["accuracy"]) if b else None
            g["gender"][sex] = {"groups": per_group, "average": average_gain(per_group.values())}
        for key, v in m["distance_stats"].items():
            g["distance_stats"][key] = percentage_gain(base["distance_stats"][key], v, higher_is_better=False)
        for key, v in m["fr"].items():
            g["fr"][key] = percentage_gain(base["fr"][key], v)
        out[name] = g
    return out


def evaluate_models(models: dict, images, sexes, classifier, embedder, thresholds=DEFAULT_THRESHOLDS,
                    baseline: str | None = None, classifier_table: GenderScoreTable | None = None) -> dict:
    """Evaluate every model on the same young inputs; returns a JSON-ready report.

    ``models`` maps a display name to a fitted FaceAgingCAAE (or bare
    networks). Gains are relative to ``baseline`` (default: first model).
    """
    if not models:
        raise EmptyInput("no models to evaluate")
    archs = {(_networks(m).arch.image_size, _networks(m).arch.n_z) for m in models.values()}
    if len(archs) != 1:
        raise ShapeMismatch(f"models disagree on (image_size, n_z): {sorted(archs)}")
    thresholds = tuple(sorted(float(t) for t in thresholds))
    baseline = baseline or next(iter(models))
    results = {}
    for name, model in models.items():
        log.info("evaluating %s", name)
        results[name] = evaluate_model(model, images, sexes, classifier, embedder, thresholds)
    sexes = check_sexes(sexes)
    return {
        "meta": {
            "baseline": baseline,
            "models": list(models),
            "thresholds": list(thresholds),
            "n_inputs": {sex: int(np.sum(sexes == i)) for i, sex in enumerate(SEXES)},
            "group_names": list(GROUP_NAMES),
            "distance_pooling": "one distance per (input, age group) pair, all ten groups pooled",
        },
        "classifier": classifier_table.to_dict() if classifier_table is not None else None,
        "models": results,
        "gains": _gains(results, baseline, thresholds),
    }
