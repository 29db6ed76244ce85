import csv

import numpy as np
import pytest
import scipy.stats
import torch

from fewshotlab.adapt import AuxAugmentation, ProbeConfig, fit_probe, predict_task
from fewshotlab.backbones import Arch, BackboneConfig, extract_features
from fewshotlab.data import (
    DatasetSpec,
    ImageDataset,
    ResolutionMode,
    SyntheticShapesConfig,
    make_splits,
)
from fewshotlab.errors import DivergenceDetected, EmptyHistory, IncompatibleTasks, MissingTask
from fewshotlab.pretext import TaskKind, make_contrastive_views, ntxent_loss
from fewshotlab.rng import stream
from fewshotlab.trainer import (
    CheckpointRecord,
    CopyMode,
    TaskWeights,
    TrainConfig,
    compose_multitask_batch,
    lr_schedule,
    make_model,
    multitask_loss,
    select_checkpoint,
    steps_per_epoch,
    train_representation,
    training_step,
)


def float_batch(seed, n, s=16):
    return stream(seed).random((n, 3, s, s)).astype(np.float32)


# --------------------------------------------------------------------------
# batch composition
# --------------------------------------------------------------------------

def test_compose_all_copies_cls_rot():
    images = float_batch(0, 16)
    labels = np.arange(16, dtype=np.int64)
    tb = compose_multitask_batch(images, labels, {TaskKind.CLS, TaskKind.ROT},
                                 CopyMode.ALL_COPIES, stream(1))
    assert len(tb.images) == 64
    values, counts = np.unique(tb.rot_labels, return_counts=True)
    assert values.tolist() == [0, 1, 2, 3]
    assert counts.tolist() == [16, 16, 16, 16]
    assert np.array_equal(np.unique(tb.cls_labels), labels)


def test_compose_cls_only_is_noop():
    images = float_batch(2, 5)
    labels = np.arange(5, dtype=np.int64)
    for mode in (CopyMode.ALL_COPIES, CopyMode.SAMPLED):
        tb = compose_multitask_batch(images, labels, {TaskKind.CLS}, mode, stream(3))
        assert np.array_equal(tb.images, images)
        assert np.array_equal(tb.cls_labels, labels)
        assert tb.rot_labels is None and tb.loc_labels is None


def test_compose_counts_rot_loc5():
    images = float_batch(4, 3, s=16)
    labels = np.zeros(3, dtype=np.int64)
    tb = compose_multitask_batch(images, labels, {TaskKind.CLS, TaskKind.ROT, TaskKind.LOC5},
                                 CopyMode.ALL_COPIES, stream(5))
    assert len(tb.images) == 60  # 20 copies x 3 images
    assert tb.images.shape[-1] == 8


def test_compose_sampled_uniform_chi_square():
    # 10k draws over the 20 (part, r) cells should look uniform
    images = float_batch(6, 10000, s=8)
    labels = np.zeros(10000, dtype=np.int64)
    tb = compose_multitask_batch(images, labels, {TaskKind.CLS, TaskKind.ROT, TaskKind.LOC5},
                                 CopyMode.SAMPLED, stream(7))
    assert len(tb.images) == 10000
    cells = [(part, r) for (_, part, r) in tb.provenance]
    counts = np.zeros(20)
    for part, r in cells:
        counts[part * 4 + r] += 1
    _, p = scipy.stats.chisquare(counts)
    assert p > 0.01


def test_compose_rejects_contrast_mix():
    with pytest.raises(IncompatibleTasks):
        compose_multitask_batch(
            float_batch(8, 2), np.zeros(2, dtype=np.int64),
            {TaskKind.CLS, TaskKind.CONTRAST}, CopyMode.ALL_COPIES, stream(9),
        )


def test_compose_labels_consistent_with_transform():
    from fewshotlab.pretext import apply_copy

    images = float_batch(10, 4, s=16)
    labels = np.arange(4, dtype=np.int64)
    tb = compose_multitask_batch(images, labels, {TaskKind.CLS, TaskKind.ROT, TaskKind.LOC5},
                                 CopyMode.SAMPLED, stream(11))
    for row, (src, part, r) in enumerate(tb.provenance):
        assert tb.cls_labels[row] == labels[src]
        assert tb.rot_labels[row] == r
        assert tb.loc_labels[row] == part
        assert np.array_equal(tb.images[row], apply_copy(images[src], part, r))


# --------------------------------------------------------------------------
# joint loss
# --------------------------------------------------------------------------

def test_multitask_loss_reduces_to_cls():
    lg = {TaskKind.CLS: torch.randn(6, 5, dtype=torch.float64),
          TaskKind.ROT: torch.randn(6, 4, dtype=torch.float64)}
    lb = {TaskKind.CLS: torch.randint(0, 5, (6,)), TaskKind.ROT: torch.randint(0, 4, (6,))}
    total, per = multitask_loss(lg, lb, TaskWeights(lambda_rot=0.0, lambda_loc=0.0))
    assert float(total) == float(per[TaskKind.CLS])


def test_multitask_loss_uniform_logits():
    for c in (4, 5, 7):
        lg = {TaskKind.CLS: torch.zeros(10, c, dtype=torch.float64)}
        lb = {TaskKind.CLS: torch.randint(0, c, (10,))}
        total, _ = multitask_loss(lg, lb, TaskWeights())
        assert float(total) == pytest.approx(np.log(c), abs=1e-12)


def test_multitask_loss_weight_linearity():
    lg = {TaskKind.CLS: torch.randn(6, 5, dtype=torch.float64),
          TaskKind.ROT: torch.randn(6, 4, dtype=torch.float64)}
    lb = {TaskKind.CLS: torch.randint(0, 5, (6,)), TaskKind.ROT: torch.randint(0, 4, (6,))}
    t0, per = multitask_loss(lg, lb, TaskWeights(lambda_rot=0.0))
    t2, _ = multitask_loss(lg, lb, TaskWeights(lambda_rot=2.0))
    assert float(t2 - t0) == pytest.approx(2.0 * float(per[TaskKind.ROT]), rel=1e-12)


def test_multitask_loss_decomposition():
    lg = {TaskKind.CLS: torch.randn(8, 5, dtype=torch.float64),
          TaskKind.ROT: torch.randn(8, 4, dtype=torch.float64),
          TaskKind.LOC5: torch.randn(8, 5, dtype=torch.float64)}
    lb = {TaskKind.CLS: torch.randint(0, 5, (8,)), TaskKind.ROT: torch.randint(0, 4, (8,)),
          TaskKind.LOC5: torch.randint(0, 5, (8,))}
    w = TaskWeights(lambda_rot=0.7, lambda_loc=1.3)
    total, per = multitask_loss(lg, lb, w)
    recon = float(per[TaskKind.CLS]) + 0.7 * float(per[TaskKind.ROT]) + 1.3 * float(per[TaskKind.LOC5])
    assert float(total) == pytest.approx(recon, abs=1e-9)
    assert all(float(v) >= 0 for v in per.values())


def test_multitask_loss_missing_labels():
    lg = {TaskKind.CLS: torch.randn(4, 3)}
    with pytest.raises(MissingTask):
        multitask_loss(lg, {}, TaskWeights())


# --------------------------------------------------------------------------
# schedule and step arithmetic
# --------------------------------------------------------------------------

def test_lr_schedule_matches_regimen():
    cfg = TrainConfig(tasks={TaskKind.CLS}, lr=0.05, epochs=100, decay_epochs=(60, 80))
    sched = lr_schedule(cfg)
    assert sched[0] == sched[59] == 0.05
    assert sched[60] == sched[79] == pytest.approx(0.005)
    assert sched[80] == sched[99] == pytest.approx(0.0005)
    assert len(set(sched)) == 3


def test_steps_per_epoch_ceiling():
    assert steps_per_epoch(10, 64) == 1
    assert steps_per_epoch(64, 64) == 1
    assert steps_per_epoch(65, 64) == 2
    assert steps_per_epoch(640, 64) == 10


# --------------------------------------------------------------------------
# training behavior
# --------------------------------------------------------------------------

def _solid_color_dataset(n_classes=3, per_class=10, size=16, noise=8):
    """Linearly separable tiny set: class = solid color plus small noise."""
    rng = stream(100)
    palette = [(220, 40, 40), (40, 220, 40), (40, 40, 220)][:n_classes]
    images, labels = [], []
    for c, color in enumerate(palette):
        for _ in range(per_class):
            base = np.array(color, dtype=np.int64).reshape(3, 1, 1)
            img = base + rng.integers(-noise, noise + 1, size=(3, size, size))
            images.append(np.clip(img, 0, 255).astype(np.uint8))
            labels.append(c)
    spec = DatasetSpec(
        name="solid",
        class_partitions={"train": list(range(n_classes)), "val": [], "test": []},
        image_source=None,
        resolution_mode=ResolutionMode.RESIZED_84,
    )
    return ImageDataset(
        spec=spec, images=images, labels=np.array(labels, dtype=np.int64),
        partition_of=np.array(["train"] * len(images)),
        rel_paths=[f"i{i}" for i in range(len(images))],
    )


def test_cls_training_fits_separable_set(tmp_path):
    ds = _solid_color_dataset()
    split = make_splits(ds, 0)
    # oracle: the set is linearly separable from raw pixels
    X = np.stack([ds.images[i].reshape(-1) / 255.0 for i in split.inner_train])
    y = ds.labels[split.inner_train]
    probe = fit_probe(X, y, AuxAugmentation(), ProbeConfig(l2_coeff=0.0), stream(0))
    assert np.mean(predict_task(probe, X) == y) == 1.0

    cfg = TrainConfig(tasks={TaskKind.CLS}, lr=0.05, epochs=30, decay_epochs=(), batch_size=16)
    bc = BackboneConfig(Arch.CONVNET4, input_size=16, widths=(8, 8, 8, 8))
    log = tmp_path / "log.csv"
    fe, records = train_representation(cfg, ds, split, bc, seed=0, log_path=str(log))
    feats = extract_features(fe, np.stack([ds.images[i] for i in split.inner_train]) / 255.0)
    probe2 = fit_probe(feats.astype(np.float64), y, AuxAugmentation(), ProbeConfig(), stream(0))
    assert np.mean(predict_task(probe2, feats) == y) >= 0.99
    with open(log) as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 30
    assert {"epoch", "lr", "steps", "train_loss", "val_loss", "acc_cls"} <= set(rows[0])


def test_one_epoch_ten_images_one_step(tmp_path):
    ds = _solid_color_dataset(n_classes=2, per_class=6)
    split = make_splits(ds, 0)  # 10 inner-train images
    assert len(split.inner_train) == 10
    cfg = TrainConfig(tasks={TaskKind.CLS}, lr=0.01, epochs=1, decay_epochs=(), batch_size=64)
    bc = BackboneConfig(Arch.CONVNET4, input_size=16, widths=(4, 4, 4, 4))
    log = tmp_path / "log.csv"
    train_representation(cfg, ds, split, bc, seed=0, log_path=str(log))
    with open(log) as f:
        rows = list(csv.DictReader(f))
    assert rows[0]["steps"] == "1"


@pytest.mark.parametrize("task", [TaskKind.CLS, TaskKind.ROT, TaskKind.LOC4, TaskKind.LOC5])
def test_descent_on_fixed_batch(task):
    tasks = {task}
    src = 32 if task in (TaskKind.LOC4, TaskKind.LOC5) else 16
    images = float_batch(50, 12, s=src)
    labels = stream(51).integers(0, 3, size=12)
    tb = compose_multitask_batch(images, labels, tasks, CopyMode.ALL_COPIES, stream(52))
    bc = BackboneConfig(Arch.CONVNET4, input_size=16, widths=(8, 8, 8, 8))
    fe, model = make_model(bc, tasks, 3, seed=1)
    opt = torch.optim.SGD(model.parameters(), lr=0.05, momentum=0.9, weight_decay=5e-4)
    x = torch.from_numpy(tb.images)
    lb = {}
    if task is TaskKind.CLS:
        lb[TaskKind.CLS] = torch.from_numpy(tb.cls_labels)
    if task is TaskKind.ROT:
        lb[TaskKind.ROT] = torch.from_numpy(tb.rot_labels)
    if task in (TaskKind.LOC4, TaskKind.LOC5):
        lb[task] = torch.from_numpy(tb.loc_labels)
    losses = [training_step(model, x, lb, TaskWeights(), opt)[0] for _ in range(10)]
    assert losses[-1] < losses[0]


def test_descent_contrastive_fixed_batch():
    batch = float_batch(53, 8, s=16)
    va, vb = make_contrastive_views(batch, 16, stream(54))
    bc = BackboneConfig(Arch.CONVNET4, input_size=16, widths=(8, 8, 8, 8))
    fe, model = make_model(bc, {TaskKind.CONTRAST}, None, seed=2)
    opt = torch.optim.SGD(model.parameters(), lr=0.05, momentum=0.9)
    ta, tb_ = torch.from_numpy(va), torch.from_numpy(vb)
    losses = []
    for _ in range(10):
        model.train()
        loss = ntxent_loss(model(ta)[TaskKind.CONTRAST], model(tb_)[TaskKind.CONTRAST], 0.5)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))
    assert losses[-1] < losses[0]


def test_divergence_detected():
    ds = _solid_color_dataset()
    split = make_splits(ds, 0)
    cfg = TrainConfig(tasks={TaskKind.CLS}, lr=1e14, epochs=3, decay_epochs=(), batch_size=16)
    bc = BackboneConfig(Arch.CONVNET4, input_size=16, widths=(4, 4, 4, 4))
    with pytest.raises(DivergenceDetected) as err:
        train_representation(cfg, ds, split, bc, seed=0)
    assert isinstance(err.value.records, list)


def test_loc_requires_high_res_source():
    ds = _solid_color_dataset()  # 16px stored, no high-res renders
    split = make_splits(ds, 0)
    cfg = TrainConfig(tasks={TaskKind.CLS, TaskKind.LOC4}, lr=0.05, epochs=1, decay_epochs=())
    bc = BackboneConfig(Arch.CONVNET4, input_size=16, widths=(4, 4, 4, 4))
    with pytest.raises(IncompatibleTasks):
        train_representation(cfg, ds, split, bc, seed=0)


# --------------------------------------------------------------------------
# checkpoint selection
# --------------------------------------------------------------------------

def test_select_checkpoint_argmin():
    recs = [CheckpointRecord(0, 2.0, {}), CheckpointRecord(1, 1.5, {}), CheckpointRecord(2, 1.7, {})]
    assert select_checkpoint(recs).epoch == 1


def test_select_checkpoint_single():
    rec = CheckpointRecord(0, 3.0, {})
    assert select_checkpoint([rec]) is rec


def test_select_checkpoint_tie_earliest():
    recs = [CheckpointRecord(0, 1.5, {}), CheckpointRecord(1, 1.5, {})]
    assert select_checkpoint(recs).epoch == 0


def test_select_checkpoint_empty():
    with pytest.raises(EmptyHistory):
        select_checkpoint([])
