"""Pre-training loops: supervised, pretext, contrastive, and joint multi-task.

One optimization step per composed batch. Joint objectives follow the form
L_cls + lambda_rot * L_rot + lambda_loc * L_loc with mean cross-entropy per
task, computed on the transformed inputs, so classification in joint mode is
trained on the same rotated/cropped copies the pretext heads see.
"""

import csv
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import torch
from torch import nn

from .backbones import build_backbone, save_checkpoint
from .data import ResolutionMode, normalized_views
from .errors import (
    DivergenceDetected,
    EmptyHistory,
    IncompatibleTasks,
    MissingTask,
)
from .imageops import normalize, to_float01
from .pretext import (
    ContrastiveAugment,
    TaskKind,
    TransformedBatch,
    apply_copy,
    make_contrastive_views,
    make_head,
    ntxent_loss,
    task_copy_grid,
)
from .rng import stream


class CopyMode(Enum):
    ALL_COPIES = "all"   # every transform copy of every image in the batch
    SAMPLED = "sampled"  # one uniformly drawn copy per image


@dataclass
class TaskWeights:
    lambda_rot: float = 1.0
    lambda_loc: float = 1.0


@dataclass
class TrainConfig:
    tasks: frozenset  # set of TaskKind
    weights: TaskWeights = field(default_factory=TaskWeights)
    lr: float = 0.05
    epochs: int = 100
    batch_size: int = None  # None -> 64, or 128 for contrastive runs
    decay_epochs: tuple = (60, 80)
    decay_factor: float = 0.1
    copy_mode: CopyMode = CopyMode.ALL_COPIES
    momentum: float = 0.9
    weight_decay: float = 5e-4
    flip_prob: float = 0.5
    temperature: float = 0.5
    contrast_aug: ContrastiveAugment = field(default_factory=ContrastiveAugment)

    def __post_init__(self):
        self.tasks = frozenset(self.tasks)
        self.decay_epochs = tuple(sorted(int(e) for e in self.decay_epochs))
        if any(e >= self.epochs for e in self.decay_epochs):
            raise IncompatibleTasks(f"decay epochs {self.decay_epochs} not < epochs {self.epochs}")
        if TaskKind.CONTRAST in self.tasks and len(self.tasks) > 1:
            raise IncompatibleTasks("CONTRAST cannot be combined with other tasks")
        if self.batch_size is None:
            self.batch_size = 128 if TaskKind.CONTRAST in self.tasks else 64

    @property
    def is_contrastive(self):
        return TaskKind.CONTRAST in self.tasks


@dataclass
class CheckpointRecord:
    epoch: int
    val_loss: float
    holdout_acc: dict  # task name -> accuracy on the 10% holdout
    path: str = None


def lr_schedule(config):
    """Piecewise-constant learning rate per epoch."""
    return [
        config.lr * config.decay_factor ** sum(e >= d for d in config.decay_epochs)
        for e in range(config.epochs)
    ]


def steps_per_epoch(n_images, batch_size):
    """Optimization steps one epoch takes: ceil(n / batch)."""
    return -(-int(n_images) // int(batch_size))


def compose_multitask_batch(images, labels, tasks, copy_mode, rng):
    """Expand source images into transform copies with every needed label.

    images: float32 [B, C, H, W]; when a location task is active H = W = 2R
    and output rows are R x R, otherwise rows keep the input size.
    ALL_COPIES emits the full (part, rotation) grid per image, SAMPLED one
    uniform cell per image.
    """
    tasks = set(tasks)
    if TaskKind.CONTRAST in tasks:
        raise IncompatibleTasks("contrastive batches are composed by their own pipeline")
    grid = task_copy_grid(tasks)
    rows, cls_l, rot_l, loc_l, prov = [], [], [], [], []

    def emit(i, part, r):
        rows.append(apply_copy(images[i], part, r))
        cls_l.append(labels[i])
        rot_l.append(0 if r is None else r)
        loc_l.append(0 if part is None else part)
        prov.append((int(i), part, r))

    if copy_mode is CopyMode.ALL_COPIES:
        for part, r in grid:
            for i in range(len(images)):
                emit(i, part, r)
    else:
        cells = rng.integers(0, len(grid), size=len(images))
        for i, cell in enumerate(cells):
            emit(i, *grid[cell])

    has_rot = TaskKind.ROT in tasks
    has_loc = bool(tasks & {TaskKind.LOC4, TaskKind.LOC5})
    return TransformedBatch(
        images=np.stack(rows).astype(np.float32),
        cls_labels=np.asarray(cls_l, dtype=np.int64),
        rot_labels=np.asarray(rot_l, dtype=np.int64) if has_rot else None,
        loc_labels=np.asarray(loc_l, dtype=np.int64) if has_loc else None,
        provenance=prov,
    )


_LOSS_TASKS = (TaskKind.CLS, TaskKind.ROT, TaskKind.LOC4, TaskKind.LOC5)


def multitask_loss(logits_by_task, labels_by_task, weights):
    """Weighted joint objective and its unweighted per-task terms.

    total = L_cls + lambda_rot * L_rot + lambda_loc * L_loc over whichever
    tasks are present; each term is the mean cross-entropy of that task.
    """
    per_task = {}
    total = None
    for kind in _LOSS_TASKS:
        if kind not in logits_by_task:
            continue
        if kind not in labels_by_task or labels_by_task[kind] is None:
            raise MissingTask(f"labels missing for task {kind}")
        term = torch.nn.functional.cross_entropy(logits_by_task[kind], labels_by_task[kind])
        per_task[kind] = term
        if kind is TaskKind.CLS:
            lam = 1.0
        elif kind is TaskKind.ROT:
            lam = weights.lambda_rot
        else:
            lam = weights.lambda_loc
        total = lam * term if total is None else total + lam * term
    if total is None:
        raise MissingTask("no recognized task in logits")
    return total, per_task


class MultiTaskModel(nn.Module):
    """Shared backbone with one head per training task."""

    def __init__(self, fe, tasks, n_train_classes=None):
        super().__init__()
        self.backbone = fe.module
        self.feature_dim = fe.feature_dim
        heads = {}
        for kind in sorted(tasks, key=lambda k: k.value):
            heads[kind.value] = make_head(kind, fe.feature_dim, n_train_classes).module
        self.heads = nn.ModuleDict(heads)

    def forward(self, x):
        feats = self.backbone(x)
        return {TaskKind(name): head(feats) for name, head in self.heads.items()}


def make_model(backbone_cfg, tasks, n_train_classes, seed):
    """(FeatureExtractor, MultiTaskModel) with all parameters seeded.

    Heads are created in sorted task order after the backbone, so two models
    sharing a seed and a task prefix (e.g. {CLS} vs {CLS, ROT}) start from
    identical backbone and CLS-head weights.
    """
    fe = build_backbone(backbone_cfg, seed)
    with torch.random.fork_rng():
        torch.manual_seed((int(seed) ^ 0x9E3779B9) & 0x7FFFFFFFFFFFFFFF)
        model = MultiTaskModel(fe, tasks, n_train_classes)
    return fe, model


def training_step(model, images, labels_by_task, weights, optimizer):
    """One SGD step on a composed batch; returns (total, per_task) floats."""
    model.train()
    logits = model(images)
    logits = {k: v for k, v in logits.items() if k in labels_by_task}
    total, per_task = multitask_loss(logits, labels_by_task, weights)
    optimizer.zero_grad()
    total.backward()
    optimizer.step()
    return float(total.detach()), {k: float(v.detach()) for k, v in per_task.items()}


def _check_loc_source(config, dataset, input_size):
    if config.tasks & {TaskKind.LOC4, TaskKind.LOC5}:
        want = 2 * input_size
        has_hi = dataset.images_hi is not None and dataset.images_hi[0].shape[1] == want
        original = dataset.spec.resolution_mode is ResolutionMode.RANDOM_CROP_84
        stored_ok = dataset.stored_size == want
        if not (has_hi or original or stored_ok):
            raise IncompatibleTasks(
                f"location tasks need a {want}px source; dataset cannot provide one without upscaling"
            )


def _holdout_eval(model, config, dataset, split, mean, std, input_size, cls_map, seed):
    """Deterministic validation loss and per-task accuracies on the holdout."""
    model.eval()
    idxs = split.inner_holdout
    rng = stream(seed, "holdout")
    if config.is_contrastive:
        src = dataset.views(idxs, _source_size(config, dataset, input_size))
        va, vb = make_contrastive_views(src, input_size, rng, config.contrast_aug)
        with torch.no_grad():
            pa = model(torch.from_numpy(normalize(va, mean, std)))[TaskKind.CONTRAST]
            pb = model(torch.from_numpy(normalize(vb, mean, std)))[TaskKind.CONTRAST]
            loss = float(ntxent_loss(pa, pb, config.temperature))
            za = torch.nn.functional.normalize(pa, dim=1)
            zb = torch.nn.functional.normalize(pb, dim=1)
            retrieval = float((torch.argmax(za @ zb.T, dim=1) == torch.arange(len(za))).float().mean())
        return loss, {"contrast": retrieval}

    src_size = _source_size(config, dataset, input_size)
    views = dataset.views(idxs, src_size)
    labels = np.array([cls_map[int(dataset.labels[i])] for i in idxs], dtype=np.int64)
    tb = compose_multitask_batch(views, labels, config.tasks, CopyMode.ALL_COPIES, rng)
    x = torch.from_numpy(normalize(tb.images, mean, std))
    labels_by_task = _batch_labels(tb, config.tasks)
    with torch.no_grad():
        total, accs = 0.0, {}
        # chunked forward keeps holdout memory flat on wide backbones
        chunks = torch.split(torch.arange(len(x)), 256)
        logits_parts = [model(x[c]) for c in chunks]
        logits = {k: torch.cat([p[k] for p in logits_parts]) for k in logits_parts[0]}
        logits = {k: v for k, v in logits.items() if k in labels_by_task}
        total_t, per_task = multitask_loss(logits, labels_by_task, config.weights)
        total = float(total_t)
        for kind, lg in logits.items():
            accs[kind.value] = float((lg.argmax(dim=1) == labels_by_task[kind]).float().mean())
    return total, accs


def _source_size(config, dataset, input_size):
    if config.tasks & {TaskKind.LOC4, TaskKind.LOC5}:
        return 2 * input_size
    return input_size


def _batch_labels(tb, tasks):
    labels = {}
    if TaskKind.CLS in tasks:
        labels[TaskKind.CLS] = torch.from_numpy(tb.cls_labels)
    if TaskKind.ROT in tasks:
        labels[TaskKind.ROT] = torch.from_numpy(tb.rot_labels)
    if TaskKind.LOC4 in tasks:
        labels[TaskKind.LOC4] = torch.from_numpy(tb.loc_labels)
    if TaskKind.LOC5 in tasks:
        labels[TaskKind.LOC5] = torch.from_numpy(tb.loc_labels)
    return labels


def train_representation(config, dataset, split, backbone_cfg, seed,
                         out_dir=None, log_path=None):
    """SGD pre-training on the inner-train split.

    Returns (FeatureExtractor, [CheckpointRecord...]); the extractor holds the
    final-epoch parameters, records carry per-epoch validation losses for
    select_checkpoint. Raises DivergenceDetected (with the recoverable
    records attached) if the loss goes non-finite, restoring the last
    completed epoch's parameters.
    """
    input_size = backbone_cfg.input_size
    _check_loc_source(config, dataset, input_size)
    train_classes = sorted(dataset.spec.class_partitions["train"])
    cls_map = {c: i for i, c in enumerate(train_classes)}
    fe, model = make_model(backbone_cfg, config.tasks, len(train_classes), seed)
    optimizer = torch.optim.SGD(
        model.parameters(), lr=config.lr,
        momentum=config.momentum, weight_decay=config.weight_decay,
    )
    mean, std = split.mean_rgb, split.std_rgb
    schedule = lr_schedule(config)
    records = []
    log_rows = []
    last_good = {k: v.detach().clone() for k, v in model.state_dict().items()}
    src_size = _source_size(config, dataset, input_size)

    for epoch in range(config.epochs):
        for group in optimizer.param_groups:
            group["lr"] = schedule[epoch]
        order = stream(seed, "order", epoch).permutation(split.inner_train)
        rng_copy = stream(seed, "copy", epoch)
        rng_view = stream(seed, "view", epoch)
        epoch_losses = []
        n_steps = 0
        for start in range(0, len(order), config.batch_size):
            idxs = order[start : start + config.batch_size]
            if config.is_contrastive:
                src = dataset.views(idxs, src_size, train_time=True, rng=rng_view)
                va, vb = make_contrastive_views(src, input_size, rng_copy, config.contrast_aug)
                model.train()
                pa = model(torch.from_numpy(normalize(va, mean, std)))[TaskKind.CONTRAST]
                pb = model(torch.from_numpy(normalize(vb, mean, std)))[TaskKind.CONTRAST]
                total_t = ntxent_loss(pa, pb, config.temperature)
                optimizer.zero_grad()
                total_t.backward()
                optimizer.step()
                total = float(total_t.detach())
            else:
                views = dataset.views(
                    idxs, src_size, train_time=True, rng=rng_view, flip_prob=config.flip_prob
                )
                labels = np.array([cls_map[int(dataset.labels[i])] for i in idxs])
                tb = compose_multitask_batch(views, labels, config.tasks, config.copy_mode, rng_copy)
                x = torch.from_numpy(normalize(tb.images, mean, std))
                total, _ = training_step(
                    model, x, _batch_labels(tb, config.tasks), config.weights, optimizer
                )
            if not math.isfinite(total):
                model.load_state_dict(last_good)
                raise DivergenceDetected(
                    f"non-finite loss at epoch {epoch}; restored epoch {epoch - 1} parameters",
                    records=records,
                )
            epoch_losses.append(total)
            n_steps += 1

        val_loss, accs = _holdout_eval(
            model, config, dataset, split, mean, std, input_size, cls_map, seed
        )
        path = None
        if out_dir is not None:
            path = save_checkpoint(
                fe, out_dir, [k.value for k in sorted(config.tasks, key=lambda t: t.value)],
                epoch, val_loss,
                extra={"mean_rgb": mean.tolist(), "std_rgb": std.tolist(), "seed": int(seed)},
            )
        records.append(CheckpointRecord(epoch, val_loss, accs, path))
        last_good = {k: v.detach().clone() for k, v in model.state_dict().items()}
        log_rows.append(
            dict(epoch=epoch, lr=schedule[epoch], steps=n_steps,
                 train_loss=float(np.mean(epoch_losses)), val_loss=val_loss,
                 **{f"acc_{k}": v for k, v in accs.items()})
        )

    if log_path is not None:
        _write_log(log_path, log_rows)
    return fe, records


def _write_log(path, rows):
    if not rows:
        return
    fields = list(rows[0].keys())
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)


def select_checkpoint(records):
    """Record with minimal validation loss; ties go to the earliest epoch."""
    if not records:
        raise EmptyHistory("no checkpoint records")
    best = records[0]
    for rec in records[1:]:
        if rec.val_loss < best.val_loss:
            best = rec
    return best
