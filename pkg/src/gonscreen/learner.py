"""Scorer contract, logistic-regression reference model, training loop and SSD/MSD orchestration.

The reference model is logistic regression over an 8x8 grid of block means of
the preprocessed 392x392x3 image (192 features), optionally extended with the
vertical CDR and RDR of the image's mask. Features are standardized with
statistics of the training set before the linear layer.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Protocol

import numpy as np

from . import biometrics, imaging, statlab
from .registry import lodo_partition, stratified_split
from .seeding import derive_seed

log = logging.getLogger(__name__)

GRID = 8
SNAPSHOT_VERSION = 1


class DegenerateSplit(ValueError):
    """A training or validation set contains only one class."""


class Scorer(Protocol):
    model_id: str

    def predict(self, pre: np.ndarray) -> float: ...


@dataclass(frozen=True)
class Prediction:
    record_id: str
    model_id: str
    score: float


def pool_blocks(arr, grid=GRID):
    """Mean over a grid x grid tiling of an (S, S, C) array; S must divide evenly."""
    s = arr.shape[0]
    if s % grid or arr.shape[1] != s:
        raise ValueError(f"cannot pool a {arr.shape} array on a {grid}x{grid} grid")
    k = s // grid
    return arr.reshape(grid, k, grid, k, -1).mean(axis=(1, 3))


def image_features(img, grid=GRID, policy=None, seed=None):
    """Block means of the preprocessed image, flattened (row, col, channel).

    Normalization is affine per channel, so pooling the resized 8-bit image
    and normalizing the block means equals pooling the normalized image; the
    cheaper order is used.
    """
    sq = imaging.pad_to_square(img)
    if policy is not None:
        sq = imaging.augment(sq, policy, seed)
    resized = imaging.resize_bilinear(sq, imaging.SIDE)
    pooled = pool_blocks(resized.astype(np.float64), grid)
    return ((pooled / 255.0 - imaging.IMAGENET_MEAN) / imaging.IMAGENET_STD).ravel()


def biometric_features(mask):
    if mask is None or not np.any(np.asarray(mask) >= 1):
        return np.array([0.0, 1.0])
    bio = biometrics.measure(mask)
    return np.array([bio.vcdr, bio.rdr])


def sigmoid(z):
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def bce_loss(p, y, eps=1e-12):
    p = np.clip(p, eps, 1 - eps)
    return float(-np.mean(y * np.log(p) + (1 - y) * np.log(1 - p)))


class ReferenceModel:
    """Logistic regression scorer over pooled image features."""

    def __init__(self, model_id="reference", grid=GRID, use_biometrics=False):
        self.model_id = model_id
        self.grid = grid
        self.use_biometrics = use_biometrics
        self.n_features = grid * grid * 3 + (2 if use_biometrics else 0)
        self.weights = np.zeros(self.n_features)
        self.bias = 0.0
        self.mean = np.zeros(self.n_features)
        self.scale = np.ones(self.n_features)
        self.config_hash = None

    def features(self, img, mask=None, policy=None, seed=None):
        f = image_features(img, self.grid, policy, seed)
        if self.use_biometrics:
            f = np.concatenate([f, biometric_features(mask)])
        return f

    def fit_standardizer(self, X):
        self.mean = X.mean(axis=0)
        sd = X.std(axis=0)
        self.scale = np.where(sd > 1e-8, sd, 1.0)

    def standardize(self, X):
        return (np.asarray(X) - self.mean) / self.scale

    def decision(self, Z):
        return Z @ self.weights + self.bias

    def predict_features(self, X):
        return sigmoid(self.decision(self.standardize(np.atleast_2d(X))))

    def predict(self, pre, mask=None):
        """Score one preprocessed (392, 392, 3) image."""
        f = pool_blocks(np.asarray(pre), self.grid).ravel()
        if self.use_biometrics:
            f = np.concatenate([f, biometric_features(mask)])
        return float(self.predict_features(f)[0])

    def loss_and_grad(self, Z, y):
        """Mean BCE on standardized features ``Z`` and its gradient (weights, bias)."""
        p = sigmoid(self.decision(Z))
        r = p - y
        return bce_loss(p, y), Z.T @ r / len(y), float(r.mean())

    def get_params(self):
        return np.concatenate([self.weights, [self.bias]])

    def set_params(self, theta):
        theta = np.asarray(theta, dtype=float)
        self.weights = theta[:-1].copy()
        self.bias = float(theta[-1])

    def copy(self):
        m = ReferenceModel(self.model_id, self.grid, self.use_biometrics)
        m.weights, m.bias = self.weights.copy(), self.bias
        m.mean, m.scale = self.mean.copy(), self.scale.copy()
        m.config_hash = self.config_hash
        return m

    def to_dict(self):
        return {
            "version": SNAPSHOT_VERSION,
            "model_id": self.model_id,
            "feature_spec": {"kind": "pooled", "grid": self.grid, "side": imaging.SIDE,
                             "use_biometrics": self.use_biometrics},
            "config_hash": self.config_hash,
            "weights": self.weights.tolist(),
            "bias": self.bias,
            "mean": self.mean.tolist(),
            "scale": self.scale.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("version") != SNAPSHOT_VERSION:
            raise ValueError(f"unsupported snapshot version {d.get('version')}")
        spec = d["feature_spec"]
        m = cls(d["model_id"], spec["grid"], spec["use_biometrics"])
        m.weights = np.asarray(d["weights"], dtype=float)
        m.bias = float(d["bias"])
        m.mean = np.asarray(d["mean"], dtype=float)
        m.scale = np.asarray(d["scale"], dtype=float)
        m.config_hash = d.get("config_hash")
        return m


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 32
    learning_rate: float = 0.05
    seed: int = 0
    early_stop_patience: int = 10
    augment_policy: imaging.AugmentPolicy | None = None
    full_batch: bool = False

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ValueError("epochs must be >= 0, batch_size >= 1 and learning_rate > 0")

    def to_dict(self):
        d = asdict(self)
        d["augment_policy"] = None if self.augment_policy is None else self.augment_policy.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if d.get("augment_policy") is not None:
            d["augment_policy"] = imaging.AugmentPolicy.from_dict(d["augment_policy"])
        return cls(**d)

    def hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


class FeatureStore:
    """Memoized features keyed by record id.

    ``loader(record_id)`` returns ``(image, mask)``; ``featurize(image, mask)``
    returns a 1-D feature vector.
    """

    def __init__(self, loader, featurize):
        self.loader = loader
        self.featurize = featurize
        self._cache = {}

    def __contains__(self, rid):
        return rid in self._cache

    def put(self, rid, vec):
        self._cache[rid] = np.asarray(vec, dtype=float)

    def get(self, rid):
        if rid not in self._cache:
            img, mask = self.loader(rid)
            self._cache[rid] = self.featurize(img, mask)
        return self._cache[rid]

    def matrix(self, ids):
        return np.stack([self.get(i) for i in ids]) if len(ids) else np.zeros((0, 0))

    def items(self):
        return self._cache.items()


@dataclass
class LabeledSet:
    ids: list
    labels: np.ndarray
    store: FeatureStore

    def features(self):
        return self.store.matrix(self.ids)

    def augmented_features(self, model, policy, seed, epoch):
        rows = []
        for rid in self.ids:
            img, mask = self.store.loader(rid)
            rows.append(model.features(img, mask, policy, derive_seed(seed, "augment", epoch, rid)))
        return np.stack(rows)


@dataclass
class TrainedRun:
    model: ReferenceModel
    train_loss: list
    val_auc: list
    best_epoch: int | None
    config: TrainConfig
    train_ids: list = field(default_factory=list)
    val_ids: list = field(default_factory=list)
    target_ids: list = field(default_factory=list)
    domain_histogram: dict = field(default_factory=dict)
    mode: str = ""
    source_domain_id: str | None = None
    target_domain_id: str | None = None

    @property
    def best_val_auc(self):
        return None if self.best_epoch is None else self.val_auc[self.best_epoch]

    def record(self):
        """Run record: curves and provenance, without the parameter dump."""
        return {
            "model_id": self.model.model_id,
            "mode": self.mode,
            "source_domain_id": self.source_domain_id,
            "target_domain_id": self.target_domain_id,
            "config": self.config.to_dict(),
            "config_hash": self.config.hash(),
            "train_loss": self.train_loss,
            "val_auc": self.val_auc,
            "best_epoch": self.best_epoch,
            "domain_histogram": self.domain_histogram,
            "n_train": len(self.train_ids),
            "n_val": len(self.val_ids),
            "train_ids": self.train_ids,
            "val_ids": self.val_ids,
            "target_ids": self.target_ids,
        }

    def to_json(self):
        return json.dumps({"record": self.record(), "model": self.model.to_dict()}, sort_keys=True)


def _check_two_classes(y, name):
    if len(y) == 0 or np.min(y) == np.max(y):
        raise DegenerateSplit(f"{name} set needs both classes")


def train(model, train_set, val_set, config):
    """Mini-batch SGD on binary cross-entropy with early stopping on validation AUC.

    Returns a :class:`TrainedRun` whose model is a snapshot from the epoch with
    the highest validation AUC (earliest on ties).
    """
    y_tr = np.asarray(train_set.labels, dtype=float)
    y_va = np.asarray(val_set.labels, dtype=int)
    _check_two_classes(y_tr, "train")
    _check_two_classes(y_va, "val")

    X_tr = train_set.features()
    X_va = val_set.features()
    model.fit_standardizer(X_tr)
    model.config_hash = config.hash()
    Z_va = model.standardize(X_va)
    Z_clean = model.standardize(X_tr)

    best = model.copy()
    best_epoch, best_auc, stale = None, -np.inf, 0
    losses, aucs = [], []
    n = len(y_tr)
    for epoch in range(config.epochs):
        if config.augment_policy is not None:
            Z = model.standardize(train_set.augmented_features(model, config.augment_policy, config.seed, epoch))
        else:
            Z = Z_clean
        if config.full_batch:
            batches = [np.arange(n)]
        else:
            order = np.random.default_rng(derive_seed(config.seed, "shuffle", epoch)).permutation(n)
            batches = [order[i:i + config.batch_size] for i in range(0, n, config.batch_size)]
        for idx in batches:
            _, gw, gb = model.loss_and_grad(Z[idx], y_tr[idx])
            model.weights -= config.learning_rate * gw
            model.bias -= config.learning_rate * gb
        losses.append(model.loss_and_grad(Z_clean, y_tr)[0])
        aucs.append(statlab.auc(sigmoid(model.decision(Z_va)), y_va))
        if aucs[-1] > best_auc:
            best, best_epoch, best_auc, stale = model.copy(), epoch, aucs[-1], 0
        else:
            stale += 1
            if stale >= config.early_stop_patience:
                break
    return TrainedRun(best, losses, aucs, best_epoch, config,
                      train_ids=list(train_set.ids), val_ids=list(val_set.ids))


def _histogram(registry, ids):
    hist = {}
    for i in ids:
        d = registry[i].domain_id
        hist[d] = hist.get(d, 0) + 1
    return dict(sorted(hist.items()))


def _labeled(registry, store, ids):
    ids = sorted(ids)
    return LabeledSet(ids, registry.labels(ids), store)


def anchor_split(registry, domain_id, seed):
    """The domain's stored train/val/test split, or a fresh stratified one."""
    split = registry.splits.get(domain_id) if hasattr(registry, "splits") else None
    if split is None:
        split = stratified_split(registry.eligible(domain_id), seed=derive_seed(seed, "split", domain_id))
    return split


def train_ssd(registry, source_domain_id, config, store, model=None, split=None):
    """Train on one domain's Train split, early-stopping on its Val split."""
    split = split or anchor_split(registry, source_domain_id, config.seed)
    tr = [i for i, s in split.items() if s == "Train"]
    va = [i for i, s in split.items() if s == "Val"]
    te = [i for i, s in split.items() if s == "Test"]
    model = model or ReferenceModel(f"ssd-{source_domain_id}")
    run = train(model, _labeled(registry, store, tr), _labeled(registry, store, va), config)
    run.mode, run.source_domain_id = "ssd", source_domain_id
    run.target_ids = sorted(te)
    run.domain_histogram = _histogram(registry, run.train_ids)
    return run


def msd_partition(registry, target_domain_id, seed, held_out_splits=None):
    """LODO partition that keeps any held-out Test split out of training.

    ``held_out_splits`` maps domain_id -> split assignment. Test records of
    those domains never enter train/val; if the target domain has a held-out
    split, its Test part is the target and its Train/Val parts act as source.
    """
    held_out_splits = held_out_splits if held_out_splits is not None else getattr(registry, "splits", {})
    exclude = sorted(i for split in held_out_splits.values() for i, s in split.items() if s == "Test")
    target_ids = None
    if target_domain_id in held_out_splits:
        target_ids = sorted(i for i, s in held_out_splits[target_domain_id].items() if s == "Test")
    return lodo_partition(registry.records, registry.domains, target_domain_id, seed=seed,
                          exclude_ids=exclude, target_ids=target_ids)


def train_msd(registry, target_domain_id, config, store, model=None, held_out_splits=None,
              partition=None):
    """Joint training on every source domain; the target never enters train or val.

    A precomputed ``partition`` (e.g. one written by the split stage) is used
    as is; otherwise it is derived from ``config.seed``.
    """
    others = [d for d in registry.domains if d != target_domain_id]
    if len(others) < 2 and target_domain_id not in (held_out_splits or getattr(registry, "splits", {})):
        raise ValueError("MSD needs at least two source domains besides the target")
    part = partition or msd_partition(registry, target_domain_id, derive_seed(config.seed, "lodo"),
                                      held_out_splits)
    model = model or ReferenceModel(f"msd-{target_domain_id}")
    run = train(model, _labeled(registry, store, part.train), _labeled(registry, store, part.val), config)
    run.mode, run.target_domain_id = "msd", target_domain_id
    run.target_ids = list(part.target)
    run.domain_histogram = _histogram(registry, run.train_ids)
    leak = set(run.target_ids) & (set(run.train_ids) | set(run.val_ids))
    if leak:
        raise AssertionError(f"target records leaked into training: {sorted(leak)[:5]}")
    return run


def predict_batch(model, records, loader: Callable):
    """Score records without augmentation.

    ``loader(record)`` returns ``(image, mask)``. A record that fails to load
    is reported in ``errors`` and skipped.

    Returns
    -------
    predictions : list of Prediction
    errors : dict record_id -> message
    """
    preds, errors = [], {}
    for rec in records:
        rid = getattr(rec, "image_id", rec)
        try:
            img, mask = loader(rec)
            f = model.features(img, mask)
        except (OSError, ValueError) as e:
            errors[rid] = str(e)
            continue
        preds.append(Prediction(rid, model.model_id, float(model.predict_features(f)[0])))
    return preds, errors


def predict_store(model, ids, store):
    """Scores for ``ids`` from precomputed features."""
    if not len(ids):
        return np.zeros(0)
    return model.predict_features(store.matrix(list(ids)))
