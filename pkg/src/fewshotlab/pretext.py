"""Pretext tasks: input transforms, task heads, and losses.

Rotation is an exact index permutation (multiples of 90 degrees), location is
quadrant cropping of a double-resolution source (optionally with the rescaled
whole image as a fifth class), and the contrastive path follows the usual
two-view recipe with a projection head and normalized-temperature
cross-entropy.
"""

from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import torch
from torch import nn

from .errors import DegenerateBatch, NonSquareInput, OddDimensions, ShapeMismatch
from .imageops import resize_bilinear, resize_shorter_and_center_crop


class TaskKind(Enum):
    CLS = "cls"
    ROT = "rot"
    LOC4 = "loc4"
    LOC5 = "loc5"
    CONTRAST = "contrast"


#: Fixed output widths; CLS depends on the dataset and CONTRAST on the
#: projection size, so both are resolved at head-construction time.
TASK_CLASS_COUNTS = {TaskKind.ROT: 4, TaskKind.LOC4: 4, TaskKind.LOC5: 5}

CONTRAST_PROJECTION_DIM = 128
DEFAULT_TEMPERATURE = 0.5


# --------------------------------------------------------------------------
# transforms
# --------------------------------------------------------------------------

def transform_rotation(image, r):
    """Rotate a square [..., H, W] array by 90*r degrees (lossless).

    r composes like the cyclic group C4: rotating by r1 then r2 equals
    rotating by (r1 + r2) mod 4.
    """
    arr = np.asarray(image)
    if arr.shape[-1] != arr.shape[-2]:
        raise NonSquareInput(f"rotation needs a square image, got {arr.shape[-2:]}")
    r = int(r) % 4
    if r == 0:
        return arr.copy()
    return np.ascontiguousarray(np.rot90(arr, k=r, axes=(-2, -1)))


# quadrant order: top-left, top-right, lower-left, lower-right
_QUADRANTS = ((0, 0), (0, 1), (1, 0), (1, 1))


def transform_location(image_hi, part):
    """Crop quadrant `part` (0..3) out of a [C, 2R, 2R] array -> [C, R, R]."""
    arr = np.asarray(image_hi)
    h, w = arr.shape[-2], arr.shape[-1]
    if h % 2 or w % 2:
        raise OddDimensions(f"location crop needs even dims, got {h}x{w}")
    ri, ci = _QUADRANTS[int(part)]
    rh, cw = h // 2, w // 2
    return arr[..., ri * rh : (ri + 1) * rh, ci * cw : (ci + 1) * cw].copy()


def transform_location5(image_hi, part):
    """Parts 0..3 as transform_location; part 4 is the whole image at R x R."""
    part = int(part)
    if part < 4:
        return transform_location(image_hi, part)
    arr = np.asarray(image_hi)
    h, w = arr.shape[-2], arr.shape[-1]
    if h % 2 or w % 2:
        raise OddDimensions(f"location crop needs even dims, got {h}x{w}")
    return resize_bilinear(arr, (h // 2, w // 2))


def transform_loc_rot(image_hi, part, r):
    """Location crop (5-class) followed by rotation, in that order."""
    return transform_rotation(transform_location5(image_hi, part), r)


def task_copy_grid(tasks):
    """All (part, r) combinations the active pretext tasks generate.

    part is None when no location task is active, r is None when rotation is
    not active; the classification-only grid is the single identity copy.
    """
    tasks = set(tasks)
    parts = [None]
    if TaskKind.LOC5 in tasks:
        parts = list(range(5))
    elif TaskKind.LOC4 in tasks:
        parts = list(range(4))
    rots = list(range(4)) if TaskKind.ROT in tasks else [None]
    return [(p, r) for p in parts for r in rots]


def apply_copy(image, part, r):
    """Apply one (part, r) cell of the copy grid to a single image."""
    out = np.asarray(image)
    if part is not None:
        out = transform_location5(out, part)
    if r is not None:
        out = transform_rotation(out, r)
    return out


# --------------------------------------------------------------------------
# contrastive views
# --------------------------------------------------------------------------

@dataclass
class ContrastiveAugment:
    """Knobs for the two-view augmentation pipeline."""

    crop_scale: tuple = (0.2, 1.0)
    flip_prob: float = 0.5
    jitter_prob: float = 0.8
    jitter_strength: float = 0.4
    grayscale_prob: float = 0.2
    enabled: bool = True  # test hook: False degrades to a deterministic center crop


def _luma(img):
    return 0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2]


def _color_jitter(img, rng, strength):
    lo, hi = max(0.0, 1.0 - strength), 1.0 + strength
    out = img * rng.uniform(lo, hi)  # brightness
    m = float(_luma(out).mean())
    out = (out - m) * rng.uniform(lo, hi) + m  # contrast
    l = _luma(out)[None]
    out = (out - l) * rng.uniform(lo, hi) + l  # saturation
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def _one_view(img, out_size, rng, aug):
    from .imageops import random_resized_crop

    view = random_resized_crop(img, out_size, rng, scale=aug.crop_scale)
    if rng.random() < aug.flip_prob:
        view = view[:, :, ::-1]
    if rng.random() < aug.jitter_prob:
        view = _color_jitter(view, rng, aug.jitter_strength)
    if rng.random() < aug.grayscale_prob:
        view = np.repeat(_luma(view)[None], 3, axis=0)
    return np.ascontiguousarray(view, dtype=np.float32)


def make_contrastive_views(batch, out_size, rng, aug=None):
    """Two independently augmented views per image.

    batch: float [B, 3, H, W] in [0, 1]. Returns (views_a, views_b), each
    [B, 3, out_size, out_size]. With aug.enabled=False both views are the
    deterministic center crop of each image.
    """
    aug = aug or ContrastiveAugment()
    if not aug.enabled:
        center = np.stack([resize_shorter_and_center_crop(im, out_size, enlarge=1.0) for im in batch])
        return center, center.copy()
    views_a = np.stack([_one_view(im, out_size, rng, aug) for im in batch])
    views_b = np.stack([_one_view(im, out_size, rng, aug) for im in batch])
    return views_a, views_b


# --------------------------------------------------------------------------
# heads and losses
# --------------------------------------------------------------------------

@dataclass
class TaskHead:
    """A per-task output head attached to a shared backbone."""

    kind: TaskKind
    module: nn.Module
    n_classes: int


def make_head(kind, feature_dim, n_classes=None):
    """Linear head sized for the task; 2-layer projection MLP for CONTRAST."""
    if kind is TaskKind.CONTRAST:
        module = nn.Sequential(
            nn.Linear(feature_dim, feature_dim),
            nn.ReLU(inplace=True),
            nn.Linear(feature_dim, CONTRAST_PROJECTION_DIM),
        )
        return TaskHead(kind, module, CONTRAST_PROJECTION_DIM)
    if kind is TaskKind.CLS:
        if n_classes is None:
            raise ShapeMismatch("CLS head needs the training class count")
        width = int(n_classes)
    else:
        width = TASK_CLASS_COUNTS[kind]
    return TaskHead(kind, nn.Linear(feature_dim, width), width)


def head_logits(head, features):
    """Affine map of [B, feature_dim] features to [B, n_classes] logits."""
    linear = head.module
    if not isinstance(linear, nn.Linear):
        raise ShapeMismatch(f"{head.kind} head has no single linear layer")
    if features.shape[-1] != linear.in_features:
        raise ShapeMismatch(
            f"feature width {features.shape[-1]} != head input {linear.in_features}"
        )
    return linear(features)


def ntxent_loss(proj_a, proj_b, temperature=DEFAULT_TEMPERATURE):
    """Normalized-temperature cross-entropy over 2B paired embeddings.

    Rows are L2-normalized internally; each of the 2B embeddings treats its
    counterpart in the other view as the positive and the remaining 2B-2 as
    negatives.
    """
    b = proj_a.shape[0]
    if b < 2 or proj_b.shape[0] != b:
        raise DegenerateBatch(f"need B >= 2 matched pairs, got {proj_a.shape[0]}/{proj_b.shape[0]}")
    z = torch.cat([proj_a, proj_b], dim=0)
    z = torch.nn.functional.normalize(z, dim=1)
    sim = z @ z.T / temperature
    sim.fill_diagonal_(float("-inf"))
    targets = torch.cat(
        [torch.arange(b, 2 * b), torch.arange(0, b)]
    ).to(z.device)
    return torch.nn.functional.cross_entropy(sim, targets)


# --------------------------------------------------------------------------
# composed batches (constructed by the trainer)
# --------------------------------------------------------------------------

@dataclass
class TransformedBatch:
    """One composed mini-batch with every label its active tasks need."""

    images: np.ndarray  # float32 [N, C, R, R]
    cls_labels: np.ndarray  # int64 [N]
    rot_labels: np.ndarray | None = None  # int64 [N] in 0..3
    loc_labels: np.ndarray | None = None  # int64 [N] in 0..4
    provenance: list = field(default_factory=list)  # (source_row, part, r) per row
