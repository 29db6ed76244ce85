"""Datasets, splits, input pipelines, and episode sampling.

Two stored-image layouts are supported: pre-resized square images (identity
pipeline) and original-resolution images (random resized crop at train time,
center crop at eval time). A deterministic synthetic shapes dataset provides a
desk-scale substrate; it is rendered with integer arithmetic only, so the
generated arrays are bit-identical across platforms.
"""

import math
import os
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import (
    ConfigError,
    DecodeError,
    EmptyPartition,
    IncompatibleTasks,
    InsufficientData,
)
from .imageops import (
    hflip,
    normalize,
    random_resized_crop,
    resize_bilinear,
    resize_shorter_and_center_crop,
    to_float01,
)
from .rng import stream

PARTITIONS = ("train", "val", "test")


class ResolutionMode(Enum):
    RESIZED_84 = "resized"      # stored images already at model resolution
    RANDOM_CROP_84 = "random_crop"  # stored images at original resolution


@dataclass
class SyntheticShapesConfig:
    """Colored parametric shapes on nuisance-texture backgrounds.

    Classes are shape x color combinations. band_prob > 0 adds a bright
    horizontal band to that fraction of images, recorded per image, which is
    the spurious background feature used by the auxiliary-class scenario.
    """

    n_classes: int = 24
    images_per_class: int = 60
    image_size: int = 32
    seed: int = 0
    shapes: tuple = ("circle", "square", "triangle", "cross")
    band_prob: float = 0.0

    def __post_init__(self):
        if self.n_classes < 3:
            raise ConfigError("synthetic dataset needs at least 3 classes")
        if self.image_size % 4:
            raise ConfigError("image_size must be a multiple of 4")


@dataclass
class DatasetSpec:
    """What a dataset is, independent of loaded pixels."""

    name: str
    class_partitions: dict  # partition name -> sorted list of class ids
    image_source: object    # SyntheticShapesConfig | (root_dir, manifest_path)
    resolution_mode: ResolutionMode

    def validate(self):
        seen = set()
        for part in PARTITIONS:
            ids = set(self.class_partitions.get(part, ()))
            if ids & seen:
                raise ConfigError(f"classes {sorted(ids & seen)} appear in two partitions")
            seen |= ids


@dataclass
class ImageDataset:
    """A fully loaded dataset: immutable after construction."""

    spec: DatasetSpec
    images: list            # per image: uint8 [3, H, W] (H, W may vary per image)
    labels: np.ndarray      # int64 class_id per image
    partition_of: np.ndarray  # '<U8' partition name per image
    rel_paths: list
    images_hi: list | None = None  # optional double-resolution renders
    attrs: dict = field(default_factory=dict)  # name -> per-image array

    def __post_init__(self):
        self.spec.validate()
        for i, lab in enumerate(self.labels):
            part = self.partition_of[i]
            if int(lab) not in self.spec.class_partitions.get(part, ()):
                raise ConfigError(f"image {i}: class {lab} not in partition {part!r}")

    @property
    def stored_size(self):
        """Uniform stored side length, or None when images are ragged."""
        sizes = {im.shape[1:] for im in self.images}
        if len(sizes) == 1:
            h, w = next(iter(sizes))
            return h if h == w else None
        return None

    def indices(self, partition):
        """Image indices of one partition (or a tuple of partitions)."""
        parts = (partition,) if isinstance(partition, str) else tuple(partition)
        mask = np.isin(self.partition_of, parts)
        return np.nonzero(mask)[0]

    def class_indices(self, partition):
        """dict class_id -> image indices, restricted to a partition."""
        out = {}
        for i in self.indices(partition):
            out.setdefault(int(self.labels[i]), []).append(int(i))
        return {c: np.array(v) for c, v in out.items()}

    def view(self, idx, out_size, train_time=False, rng=None, flip_prob=0.0):
        """Model-input view of image `idx`: float32 [3, out_size, out_size].

        Picks the stored or high-resolution render when its side matches
        out_size exactly; otherwise applies the resolution-mode pipeline.
        Upscaling a pre-resized image is refused.
        """
        img = self.images[idx]
        if img.shape[1] == img.shape[2] == out_size:
            view = to_float01(img)
        elif self.images_hi is not None and self.images_hi[idx].shape[1] == out_size:
            view = to_float01(self.images_hi[idx])
        else:
            if self.spec.resolution_mode is ResolutionMode.RESIZED_84 and out_size > img.shape[1]:
                raise IncompatibleTasks(
                    f"requested {out_size}px view from {img.shape[1]}px stored image; "
                    "high-resolution source required"
                )
            view = pipeline_view(img, self.spec.resolution_mode, train_time, rng, out_size)
        if train_time and flip_prob > 0.0 and rng.random() < flip_prob:
            view = hflip(view)
        return view

    def views(self, idxs, out_size, train_time=False, rng=None, flip_prob=0.0):
        return np.stack(
            [self.view(int(i), out_size, train_time, rng, flip_prob) for i in idxs]
        )


def pipeline_view(image, mode, train_time, rng, out_size=84):
    """One input-resolution pipeline pass: stored image -> float32 [3, S, S].

    RESIZED_84 is the deterministic full-image resize in both phases.
    RANDOM_CROP_84 takes a random resized crop at train time and the center
    crop of the image resized so the shorter side maps to S/0.875 at eval.
    """
    img = to_float01(image)
    if mode is ResolutionMode.RESIZED_84:
        if img.shape[1] == img.shape[2] == out_size:
            return img
        return resize_bilinear(img, (out_size, out_size))
    if train_time:
        return random_resized_crop(img, out_size, rng)
    return resize_shorter_and_center_crop(img, out_size)


# --------------------------------------------------------------------------
# stratified 90/10 split with frozen normalization statistics
# --------------------------------------------------------------------------

@dataclass
class SplitAssignment:
    """90/10 per-class split of the train partition, plus channel stats."""

    inner_train: np.ndarray   # dataset indices
    inner_holdout: np.ndarray
    seed: int
    mean_rgb: np.ndarray      # float64 [3], computed over inner_train pixels
    std_rgb: np.ndarray


def make_splits(dataset, seed):
    """Stratified 90/10 split of the train partition, deterministic in seed.

    Per class, holdout size is max(1, n/10 rounded half up), so every class
    keeps at least one image on each side.
    """
    by_class = dataset.class_indices("train")
    if not by_class:
        raise EmptyPartition("train partition is empty")
    inner_train, inner_holdout = [], []
    for c in sorted(by_class):
        idxs = by_class[c]
        if len(idxs) < 2:
            raise EmptyPartition(f"class {c} has {len(idxs)} image(s); need >= 2 to split")
        perm = idxs[stream(seed, "split", c).permutation(len(idxs))]
        n_hold = max(1, int(len(idxs) / 10 + 0.5))
        inner_holdout.extend(perm[:n_hold])
        inner_train.extend(perm[n_hold:])
    inner_train = np.sort(np.array(inner_train))
    inner_holdout = np.sort(np.array(inner_holdout))
    mean, std = _channel_stats(dataset, inner_train)
    return SplitAssignment(inner_train, inner_holdout, int(seed), mean, std)


def _channel_stats(dataset, idxs):
    tot = np.zeros(3)
    tot_sq = np.zeros(3)
    count = 0
    for i in idxs:
        x = to_float01(dataset.images[i]).astype(np.float64)
        tot += x.sum(axis=(1, 2))
        tot_sq += (x * x).sum(axis=(1, 2))
        count += x.shape[1] * x.shape[2]
    mean = tot / count
    var = np.maximum(tot_sq / count - mean * mean, 1e-12)
    return mean, np.sqrt(var)


def normalized_views(dataset, idxs, split, out_size, train_time=False, rng=None, flip_prob=0.0):
    """views() followed by the split's frozen per-channel normalization."""
    v = dataset.views(idxs, out_size, train_time, rng, flip_prob)
    return normalize(v, split.mean_rgb, split.std_rgb)


# --------------------------------------------------------------------------
# episodes
# --------------------------------------------------------------------------

@dataclass
class Episode:
    """One n-way k-shot task: stored support/query images plus provenance."""

    n_way: int
    k_shot: int
    support_x: np.ndarray  # [n*k, 3, H, W]
    support_y: np.ndarray  # int64 in 0..n-1
    query_x: np.ndarray    # [n*q, 3, H, W]
    query_y: np.ndarray
    class_ids: np.ndarray  # original dataset class of episode label 0..n-1
    support_idx: np.ndarray  # dataset indices
    query_idx: np.ndarray

    def validate(self):
        n, k = self.n_way, self.k_shot
        q = len(self.query_y) // n
        assert len(self.support_y) == n * k and len(self.query_y) == n * q
        assert set(np.unique(self.support_y)) == set(range(n))
        assert set(np.unique(self.query_y)) == set(range(n))
        for lab in range(n):
            assert int((self.support_y == lab).sum()) == k
            assert int((self.query_y == lab).sum()) == q
        assert not set(self.support_idx.tolist()) & set(self.query_idx.tolist())
        assert len(np.unique(self.class_ids)) == n


def sample_episode(dataset, partition, n, k, q, rng):
    """Draw one n-way k-shot episode with q queries per class.

    Classes are drawn uniformly without replacement from the partition; the n
    drawn classes are relabeled 0..n-1 in draw order.
    """
    by_class = dataset.class_indices(partition)
    eligible = sorted(c for c, v in by_class.items() if len(v) >= k + q)
    short = sorted(set(by_class) - set(eligible))
    if len(eligible) < n:
        raise InsufficientData(
            f"need {n} classes with >= {k + q} images; classes {short} fall short"
        )
    classes = rng.choice(np.array(eligible), size=n, replace=False)
    sup, qry = [], []
    for c in classes:
        picks = rng.choice(by_class[int(c)], size=k + q, replace=False)
        sup.append(picks[:k])
        qry.append(picks[k:])
    return _episode_from_indices(dataset, classes, sup, qry, k)


def sample_spurious_episode(dataset, partition, n, k, q, rng, attr="band"):
    """Episode whose class-0 support is confounded with a background attribute.

    Class 0's support images all carry attr=True while the other classes'
    support images carry attr=False; queries are drawn from the remaining
    images without restriction. This reproduces the
    spurious-background-feature failure mode that auxiliary classes repair.
    """
    flags = np.asarray(dataset.attrs[attr], dtype=bool)
    by_class = dataset.class_indices(partition)
    eligible = sorted(c for c, v in by_class.items() if len(v) >= k + q)
    if len(eligible) < n:
        raise InsufficientData(f"need {n} classes with >= {k + q} images")
    classes = rng.choice(np.array(eligible), size=n, replace=False)
    sup, qry = [], []
    for lab, c in enumerate(classes):
        idxs = by_class[int(c)]
        want = flags[idxs] if lab == 0 else ~flags[idxs]
        pool = idxs[want]
        if len(pool) < k:
            raise InsufficientData(
                f"class {c} has {len(pool)} images with {attr}={lab == 0}; need {k}"
            )
        s = rng.choice(pool, size=k, replace=False)
        rest = np.setdiff1d(idxs, s)
        if len(rest) < q:
            raise InsufficientData(f"class {c} lacks {q} query images")
        qr = rng.choice(rest, size=q, replace=False)
        sup.append(s)
        qry.append(qr)
    return _episode_from_indices(dataset, classes, sup, qry, k)


def _episode_from_indices(dataset, classes, sup, qry, k):
    n = len(classes)
    sup_idx = np.concatenate(sup)
    qry_idx = np.concatenate(qry)
    q = len(qry[0])
    ep = Episode(
        n_way=n,
        k_shot=k,
        support_x=np.stack([dataset.images[int(i)] for i in sup_idx]),
        support_y=np.repeat(np.arange(n), k),
        query_x=np.stack([dataset.images[int(i)] for i in qry_idx]),
        query_y=np.repeat(np.arange(n), q),
        class_ids=np.asarray(classes, dtype=np.int64),
        support_idx=sup_idx,
        query_idx=qry_idx,
    )
    ep.validate()
    return ep


# --------------------------------------------------------------------------
# synthetic shapes
# --------------------------------------------------------------------------

def _hue_rgb(h):
    """Integer HSV(h,255,255) -> RGB; h in degrees."""
    sector = (h // 60) % 6
    f = h % 60
    up = (255 * f) // 60
    down = (255 * (60 - f)) // 60
    return [
        (255, up, 0), (down, 255, 0), (0, 255, up),
        (0, down, 255), (up, 0, 255), (255, 0, down),
    ][sector]


def _palette(k):
    return [_hue_rgb((360 * i) // k) for i in range(k)]


def _shape_mask(kind, size, cy, cx, r):
    ii, jj = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    di, dj = ii - cy, jj - cx
    if kind == "circle":
        return di * di + dj * dj <= r * r
    if kind == "square":
        s = (4 * r) // 5
        return (np.abs(di) <= s) & (np.abs(dj) <= s)
    if kind == "triangle":  # apex up: width grows downward, so rotations differ
        return (di >= -r) & (di <= r) & (np.abs(dj) * 2 <= di + r)
    if kind == "cross":
        arm = max(1, r // 3)
        return ((np.abs(di) <= r) & (np.abs(dj) <= arm)) | (
            (np.abs(dj) <= r) & (np.abs(di) <= arm)
        )
    raise ConfigError(f"unknown shape {kind!r}")


def _render_hi(cfg, class_id, index):
    """One image at double resolution; integer arithmetic throughout."""
    rng = stream(cfg.seed, "img", class_id, index)
    hi = 2 * cfg.image_size
    block = 4
    grid = rng.integers(32, 224, size=(3, hi // block, hi // block), dtype=np.int64)
    img = np.repeat(np.repeat(grid, block, axis=1), block, axis=2)

    band = bool(rng.random() < cfg.band_prob)
    if band:
        y0 = hi // 8
        img[:, y0 : y0 + hi // 8, :] = np.array([235, 235, 245]).reshape(3, 1, 1)

    shape = cfg.shapes[class_id % len(cfg.shapes)]
    color = _palette(-(-cfg.n_classes // len(cfg.shapes)))[class_id // len(cfg.shapes)]
    r = int(rng.integers(hi // 6, hi // 3))
    lo = r + 2
    cy = int(rng.integers(lo, hi - lo))
    cx = int(rng.integers(lo, hi - lo))
    mask = _shape_mask(shape, hi, cy, cx, r)
    for ch in range(3):
        img[ch][mask] = color[ch]
    return img.astype(np.uint8), band


def _downscale2_exact(img):
    """Exact 2x2 integer mean (round half up) of uint8 [3, 2S, 2S]."""
    x = img.astype(np.uint16)
    c, h, w = x.shape
    blocks = x.reshape(c, h // 2, 2, w // 2, 2)
    return ((blocks.sum(axis=(2, 4)) + 2) // 4).astype(np.uint8)


def synthetic_partition_sizes(n_classes):
    """Fixed base/val/novel class counts: 2/3 base, remainder split evenly."""
    n_base = max(1, (2 * n_classes) // 3)
    n_val = (n_classes - n_base) // 2
    return n_base, n_val, n_classes - n_base - n_val


def generate_synthetic(config):
    """DatasetSpec for a synthetic shapes dataset (pixels render lazily)."""
    n_base, n_val, n_novel = synthetic_partition_sizes(config.n_classes)
    parts = {
        "train": list(range(n_base)),
        "val": list(range(n_base, n_base + n_val)),
        "test": list(range(n_base + n_val, config.n_classes)),
    }
    spec = DatasetSpec(
        name=f"synthetic-{config.n_classes}c-s{config.seed}",
        class_partitions=parts,
        image_source=config,
        resolution_mode=ResolutionMode.RESIZED_84,
    )
    spec.validate()
    return spec


def _load_synthetic(spec):
    cfg = spec.image_source
    part_of_class = {}
    for part, ids in spec.class_partitions.items():
        for c in ids:
            part_of_class[c] = part
    images, images_hi, labels, parts, paths, bands = [], [], [], [], [], []
    for c in range(cfg.n_classes):
        for i in range(cfg.images_per_class):
            hi, band = _render_hi(cfg, c, i)
            images_hi.append(hi)
            images.append(_downscale2_exact(hi))
            labels.append(c)
            parts.append(part_of_class[c])
            paths.append(f"cls{c:03d}/img{i:05d}.png")
            bands.append(band)
    return ImageDataset(
        spec=spec,
        images=images,
        labels=np.array(labels, dtype=np.int64),
        partition_of=np.array(parts),
        rel_paths=paths,
        images_hi=images_hi,
        attrs={"band": np.array(bands)},
    )


# --------------------------------------------------------------------------
# manifest / split files
# --------------------------------------------------------------------------

def write_manifest(dataset, path):
    """`<relative_path>\\t<class_id>\\t<partition>` per line, UTF-8, LF."""
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for p, lab, part in zip(dataset.rel_paths, dataset.labels, dataset.partition_of):
            f.write(f"{p}\t{int(lab)}\t{part}\n")


def read_manifest(path, resolution_mode, name=None, root=None):
    """DatasetSpec for a manifest file; images live under `root` (default: manifest dir)."""
    records = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) != 3:
                raise ConfigError(f"{path}:{lineno}: expected 3 tab-separated fields")
            rel, cls, part = fields
            if part not in PARTITIONS:
                raise ConfigError(f"{path}:{lineno}: unknown partition {part!r}")
            records.append((rel, int(cls), part))
    parts = {p: set() for p in PARTITIONS}
    for _, cls, part in records:
        parts[part].add(cls)
    spec = DatasetSpec(
        name=name or os.path.splitext(os.path.basename(path))[0],
        class_partitions={p: sorted(v) for p, v in parts.items()},
        image_source=(root or os.path.dirname(os.path.abspath(path)), records),
        resolution_mode=resolution_mode,
    )
    spec.validate()
    return spec


def _load_manifest(spec):
    from PIL import Image, UnidentifiedImageError

    root, records = spec.image_source
    images, labels, parts, paths = [], [], [], []
    for rel, cls, part in records:
        full = os.path.join(root, rel)
        try:
            with Image.open(full) as im:
                arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
        except (OSError, UnidentifiedImageError) as exc:
            raise DecodeError(f"cannot decode {full}: {exc}") from exc
        images.append(np.ascontiguousarray(arr.transpose(2, 0, 1)))
        labels.append(cls)
        parts.append(part)
        paths.append(rel)
    return ImageDataset(
        spec=spec,
        images=images,
        labels=np.array(labels, dtype=np.int64),
        partition_of=np.array(parts),
        rel_paths=paths,
    )


def load_dataset(spec):
    """Materialize a DatasetSpec into an ImageDataset (validates partitions)."""
    if isinstance(spec.image_source, SyntheticShapesConfig):
        return _load_synthetic(spec)
    return _load_manifest(spec)


def write_split(dataset, split, path):
    """Manifest columns plus the inner_train|inner_holdout assignment."""
    inner = {int(i): "inner_train" for i in split.inner_train}
    inner.update({int(i): "inner_holdout" for i in split.inner_holdout})
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(f"#seed={split.seed}\n")
        f.write(f"#mean_rgb={','.join(repr(float(v)) for v in split.mean_rgb)}\n")
        f.write(f"#std_rgb={','.join(repr(float(v)) for v in split.std_rgb)}\n")
        for i, (p, lab, part) in enumerate(
            zip(dataset.rel_paths, dataset.labels, dataset.partition_of)
        ):
            if i in inner:
                f.write(f"{p}\t{int(lab)}\t{part}\t{inner[i]}\n")


def read_split(dataset, path):
    """Reconstruct a SplitAssignment written by write_split."""
    seed, mean, std = None, None, None
    by_path = {p: i for i, p in enumerate(dataset.rel_paths)}
    inner_train, inner_holdout = [], []
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.rstrip("\n")
            if line.startswith("#seed="):
                seed = int(line.split("=", 1)[1])
            elif line.startswith("#mean_rgb="):
                mean = np.array([float(v) for v in line.split("=", 1)[1].split(",")])
            elif line.startswith("#std_rgb="):
                std = np.array([float(v) for v in line.split("=", 1)[1].split(",")])
            elif line:
                rel, _, _, flag = line.split("\t")
                (inner_train if flag == "inner_train" else inner_holdout).append(by_path[rel])
    if seed is None or mean is None or std is None:
        raise ConfigError(f"{path}: missing #seed / #mean_rgb / #std_rgb header")
    return SplitAssignment(
        np.sort(np.array(inner_train)), np.sort(np.array(inner_holdout)), seed, mean, std
    )
