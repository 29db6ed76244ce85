"""Adaptation on frozen features: multinomial logistic probe, auxiliary-class
augmentation, and transform-copy voting.

The probe minimizes L2-regularized multinomial cross-entropy (mean over rows,
0.5 * l2_coeff * ||W||^2, biases unpenalized) with a deterministic full-batch
quasi-Newton solver from zero initialization. Auxiliary rows extend the logit
space by one class per base class; prediction always argmaxes over the first
n task logits only, so the auxiliary rows influence the result solely through
the shared weights they shaped during fitting.
"""

from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import scipy.optimize

from .errors import (
    IncompatibleScheme,
    InsufficientAux,
    ShapeMismatch,
    SingularFeatures,
)
from .pretext import transform_location5, transform_rotation


class FeatureNorm(Enum):
    NONE = "none"
    UNIT_L2 = "unit_l2"


class AuxMode(Enum):
    NONE = "none"
    RANDOM_TOTAL = "random_total"  # draw total_count rows uniformly from the pool
    PER_CLASS = "per_class"        # draw per_class_count rows from every base class


@dataclass
class ProbeConfig:
    l2_coeff: float = 1e-3
    tol: float = 1e-6        # inf-norm gradient threshold
    max_iters: int = 1000
    feature_norm: FeatureNorm = FeatureNorm.NONE

    def __post_init__(self):
        if self.tol <= 0:
            raise ShapeMismatch("tol must be positive")


@dataclass
class AuxPool:
    """Frozen-backbone features of the inner-train base-class images."""

    features: np.ndarray  # [M, d]
    class_ids: np.ndarray  # [M] original dataset class ids

    def base_classes(self):
        return np.unique(self.class_ids)


@dataclass
class AuxAugmentation:
    mode: AuxMode = AuxMode.NONE
    total_count: int = 0       # RANDOM_TOTAL
    per_class_count: int = 0   # PER_CLASS
    pool: AuxPool = None
    weight: float = 1.0        # relative sample weight of aux rows (default: none)
    fixed_draw: bool = False   # draw once per run instead of per episode

    def describe(self):
        if self.mode is AuxMode.NONE:
            return "none"
        if self.mode is AuxMode.RANDOM_TOTAL:
            return f"random:{self.total_count}"
        return f"per_class:{self.per_class_count}"


def draw_aux_rows(aux, rng):
    """(features, extended class index per row, n_aux_classes) for one draw.

    Extended indices count from 0 here; fit_probe offsets them by the task
    class count. A zero-count draw yields no rows and no auxiliary classes.
    """
    if aux.mode is AuxMode.NONE:
        return np.zeros((0, 0), dtype=np.float64), np.zeros(0, dtype=np.int64), 0
    pool = aux.pool
    if pool is None:
        raise InsufficientAux("auxiliary augmentation requested without a pool")
    base = pool.base_classes()
    rank = {int(c): i for i, c in enumerate(base)}
    if aux.mode is AuxMode.RANDOM_TOTAL:
        count = int(aux.total_count)
        if count == 0:
            return np.zeros((0, 0), dtype=np.float64), np.zeros(0, dtype=np.int64), 0
        if count > len(pool.class_ids):
            raise InsufficientAux(f"pool has {len(pool.class_ids)} rows, need {count}")
        picks = rng.choice(len(pool.class_ids), size=count, replace=False)
    else:
        per = int(aux.per_class_count)
        if per == 0:
            return np.zeros((0, 0), dtype=np.float64), np.zeros(0, dtype=np.int64), 0
        picks = []
        for c in base:
            rows = np.nonzero(pool.class_ids == c)[0]
            if len(rows) < per:
                raise InsufficientAux(f"base class {c} has {len(rows)} rows, need {per}")
            picks.append(rng.choice(rows, size=per, replace=False))
        picks = np.concatenate(picks)
    labels = np.array([rank[int(pool.class_ids[i])] for i in picks], dtype=np.int64)
    return pool.features[picks].astype(np.float64), labels, len(base)


def augment_support(episode, aux, split, dataset, rng, n_task=None):
    """Draw auxiliary IMAGES from the inner-train pool for an episode.

    Returns (images, labels) where labels of aux rows are offset by the task
    class count n. The aux source is the train partition, which is disjoint
    from episode classes by partition construction; this is asserted.
    """
    n = n_task if n_task is not None else episode.n_way
    inner = split.inner_train
    base_classes = np.unique(dataset.labels[inner])
    overlap = set(base_classes.tolist()) & set(episode.class_ids.tolist())
    if overlap:
        raise InsufficientAux(f"episode classes {sorted(overlap)} overlap the aux pool")
    if aux.mode is AuxMode.NONE:
        return [], np.zeros(0, dtype=np.int64)
    rank = {int(c): i for i, c in enumerate(base_classes)}
    if aux.mode is AuxMode.RANDOM_TOTAL:
        count = int(aux.total_count)
        if count == 0:
            return [], np.zeros(0, dtype=np.int64)
        if count > len(inner):
            raise InsufficientAux(f"inner_train has {len(inner)} images, need {count}")
        picks = rng.choice(inner, size=count, replace=False)
    else:
        per = int(aux.per_class_count)
        if per == 0:
            return [], np.zeros(0, dtype=np.int64)
        picks = []
        for c in base_classes:
            rows = inner[dataset.labels[inner] == c]
            if len(rows) < per:
                raise InsufficientAux(f"class {c} has {len(rows)} inner-train images, need {per}")
            picks.append(rng.choice(rows, size=per, replace=False))
        picks = np.concatenate(picks)
    images = [dataset.images[int(i)] for i in picks]
    labels = np.array([n + rank[int(dataset.labels[int(i)])] for i in picks], dtype=np.int64)
    return images, labels


@dataclass
class ProbeModel:
    """Fitted multinomial probe with task/auxiliary logit partitions."""

    weights: np.ndarray  # [(n_task + n_aux), d]
    biases: np.ndarray   # [n_task + n_aux]
    task_class_count: int
    aux_class_count: int
    feature_norm: FeatureNorm
    n_iters: int = 0
    final_objective: float = float("nan")
    objective_history: list = field(default_factory=list)


def probe_objective(packed, X, y, row_weights, n_classes, l2_coeff):
    """Weighted-mean cross-entropy + 0.5 * l2 * ||W||^2, with gradient."""
    d = X.shape[1]
    W = packed[: n_classes * d].reshape(n_classes, d)
    b = packed[n_classes * d :]
    logits = X @ W.T + b
    logits -= logits.max(axis=1, keepdims=True)
    expl = np.exp(logits)
    probs = expl / expl.sum(axis=1, keepdims=True)
    wsum = row_weights.sum()
    ll = -(np.log(probs[np.arange(len(y)), y] + 1e-300) * row_weights).sum() / wsum
    obj = ll + 0.5 * l2_coeff * float((W * W).sum())
    delta = probs
    delta[np.arange(len(y)), y] -= 1.0
    delta *= (row_weights / wsum)[:, None]
    gW = delta.T @ X + l2_coeff * W
    gb = delta.sum(axis=0)
    return obj, np.concatenate([gW.ravel(), gb])


def _apply_norm(X, norm):
    if norm is FeatureNorm.UNIT_L2:
        n = np.linalg.norm(X, axis=1, keepdims=True)
        return X / np.maximum(n, 1e-12)
    return X


def fit_probe(features_s, labels_s, aux, probe_cfg, rng):
    """L2-regularized multinomial logistic regression on support (+ aux) rows.

    Deterministic given (inputs, rng): the solver is full-batch L-BFGS from a
    zero start, stopping when the projected-gradient inf-norm drops below
    probe_cfg.tol or max_iters is reached.
    """
    X_s = np.asarray(features_s, dtype=np.float64)
    y_s = np.asarray(labels_s, dtype=np.int64)
    if X_s.ndim != 2 or len(X_s) != len(y_s):
        raise ShapeMismatch(f"features {X_s.shape} vs labels {y_s.shape}")
    if not np.isfinite(X_s).all():
        raise SingularFeatures("support features contain non-finite values")
    n_task = int(y_s.max()) + 1

    X_a, y_a_rank, n_aux = draw_aux_rows(aux, rng)
    if n_aux:
        if not np.isfinite(X_a).all():
            raise SingularFeatures("aux features contain non-finite values")
        if X_a.shape[1] != X_s.shape[1]:
            raise ShapeMismatch("aux feature width differs from support features")
        X = np.vstack([X_s, X_a])
        y = np.concatenate([y_s, n_task + y_a_rank])
        row_weights = np.concatenate(
            [np.ones(len(y_s)), np.full(len(y_a_rank), float(aux.weight))]
        )
    else:
        X = X_s
        y = y_s
        row_weights = np.ones(len(y_s))

    X = _apply_norm(X, probe_cfg.feature_norm)
    n_classes = n_task + n_aux
    d = X.shape[1]
    x0 = np.zeros(n_classes * d + n_classes)
    history = [probe_objective(x0, X, y, row_weights, n_classes, probe_cfg.l2_coeff)[0]]

    def track(xk):
        history.append(probe_objective(xk, X, y, row_weights, n_classes, probe_cfg.l2_coeff)[0])

    res = scipy.optimize.minimize(
        probe_objective, x0,
        args=(X, y, row_weights, n_classes, probe_cfg.l2_coeff),
        jac=True, method="L-BFGS-B", callback=track,
        options=dict(maxiter=probe_cfg.max_iters, gtol=probe_cfg.tol, ftol=1e-16),
    )
    W = res.x[: n_classes * d].reshape(n_classes, d)
    b = res.x[n_classes * d :]
    return ProbeModel(
        weights=W, biases=b,
        task_class_count=n_task, aux_class_count=n_aux,
        feature_norm=probe_cfg.feature_norm,
        n_iters=int(res.nit), final_objective=float(res.fun),
        objective_history=history,
    )


def task_logits(model, features_q):
    X = np.asarray(features_q, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.weights.shape[1]:
        raise ShapeMismatch(f"query features {X.shape} vs probe dim {model.weights.shape[1]}")
    X = _apply_norm(X, model.feature_norm)
    n = model.task_class_count
    return X @ model.weights[:n].T + model.biases[:n]


def predict_task(model, features_q):
    """argmax over the first n task logits; aux logits never participate."""
    return task_logits(model, features_q).argmax(axis=1)


def predict_proba_task(model, features_q):
    """Softmax over the first n task logits only."""
    lg = task_logits(model, features_q)
    lg -= lg.max(axis=1, keepdims=True)
    e = np.exp(lg)
    return e / e.sum(axis=1, keepdims=True)


# --------------------------------------------------------------------------
# transform-copy voting
# --------------------------------------------------------------------------

class VoteKind(Enum):
    NONE = "none"
    ROT4 = "rot4"
    LOC5 = "loc5"


@dataclass
class VoteScheme:
    """Copy generator for test-time voting.

    generator maps a query batch [B, C, H, W] to a list of copy batches, each
    [B, C, R, R] at the model input size.
    """

    kind: VoteKind
    generator: object = None  # callable; None for VoteKind.NONE

    @property
    def n_copies(self):
        return {VoteKind.NONE: 1, VoteKind.ROT4: 4, VoteKind.LOC5: 5}.get(self.kind)


def vote_none():
    return VoteScheme(VoteKind.NONE)


def vote_rot4():
    def gen(images):
        return [np.stack([transform_rotation(im, r) for im in images]) for r in range(4)]

    return VoteScheme(VoteKind.ROT4, gen)


def vote_loc5():
    def gen(images):
        return [np.stack([transform_location5(im, p) for im in images]) for p in range(5)]

    return VoteScheme(VoteKind.LOC5, gen)


def vote_identity(n_copies):
    """Test scheme: n identical plain copies (must equal plain prediction)."""

    def gen(images):
        return [np.asarray(images).copy() for _ in range(n_copies)]

    return VoteScheme(VoteKind.NONE, gen)


def combine_votes(copy_labels, copy_probs):
    """Majority label per query across copies.

    copy_labels: int [n_copies, B]; copy_probs: float [n_copies, B, n].
    Ties break by the highest summed task-class softmax probability across
    copies, then by the lowest class index.
    """
    copy_labels = np.asarray(copy_labels)
    copy_probs = np.asarray(copy_probs)
    n_copies, n_q = copy_labels.shape
    n = copy_probs.shape[2]
    counts = np.zeros((n_q, n), dtype=np.int64)
    for c in range(n_copies):
        counts[np.arange(n_q), copy_labels[c]] += 1
    summed = copy_probs.sum(axis=0)  # [B, n]
    out = np.empty(n_q, dtype=np.int64)
    for i in range(n_q):
        top = counts[i].max()
        tied = np.nonzero(counts[i] == top)[0]
        if len(tied) == 1:
            out[i] = tied[0]
        else:
            best = summed[i][tied]
            out[i] = tied[best == best.max()][0]
    return out


def predict_vote(model, embedder, query_images, scheme):
    """Majority prediction over the scheme's transform copies.

    query_images are stored-format arrays: model-size for NONE/ROT4, double
    resolution for LOC5 (refused, not upscaled, when the size cannot host the
    crops).
    """
    images = np.asarray(query_images)
    if scheme.kind is VoteKind.NONE and scheme.generator is None:
        return predict_task(model, embedder.embed_images(images))
    if scheme.kind is VoteKind.LOC5:
        want = 2 * embedder.input_size
        if images.shape[2] != want or images.shape[3] != want:
            raise IncompatibleScheme(
                f"LOC5 voting needs {want}px query images, got {images.shape[2]}px; "
                "refusing to upscale"
            )
    labels, probs = [], []
    for copy in scheme.generator(images):
        if copy.shape[2] != embedder.input_size:
            raise IncompatibleScheme(
                f"copy size {copy.shape[2]} != model input {embedder.input_size}"
            )
        feats = embedder.embed_images(copy)
        labels.append(predict_task(model, feats))
        probs.append(predict_proba_task(model, feats))
    return combine_votes(np.stack(labels), np.stack(probs))
