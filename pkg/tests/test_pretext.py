import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from fewshotlab.errors import DegenerateBatch, NonSquareInput, OddDimensions, ShapeMismatch
from fewshotlab.pretext import (
    ContrastiveAugment,
    TaskKind,
    apply_copy,
    head_logits,
    make_contrastive_views,
    make_head,
    ntxent_loss,
    task_copy_grid,
    transform_loc_rot,
    transform_location,
    transform_location5,
    transform_rotation,
)
from fewshotlab.rng import stream


def rand_img(seed, c=3, s=16, dtype=np.uint8):
    return stream(seed).integers(0, 256, size=(c, s, s)).astype(dtype)


# --------------------------------------------------------------------------
# rotation
# --------------------------------------------------------------------------

def test_rotation_identity():
    img = rand_img(0)
    assert np.array_equal(transform_rotation(img, 0), img)


def test_rotation_inverse():
    img = rand_img(1)
    assert np.array_equal(transform_rotation(transform_rotation(img, 1), 3), img)


def test_rotation_180_index_oracle():
    img = rand_img(2, s=8)
    out = transform_rotation(img, 2)
    h, w = img.shape[1:]
    expected = np.empty_like(img)
    for i in range(h):
        for j in range(w):
            expected[:, h - 1 - i, w - 1 - j] = img[:, i, j]
    assert np.array_equal(out, expected)


@settings(max_examples=50, deadline=None)
@given(r1=st.integers(0, 3), r2=st.integers(0, 3), seed=st.integers(0, 1000))
def test_rotation_c4_group(r1, r2, seed):
    img = rand_img(seed, s=10)
    left = transform_rotation(transform_rotation(img, r1), r2)
    right = transform_rotation(img, (r1 + r2) % 4)
    assert np.array_equal(left, right)


def test_rotation_rejects_non_square():
    img = stream(0).integers(0, 256, size=(3, 8, 10)).astype(np.uint8)
    with pytest.raises(NonSquareInput):
        transform_rotation(img, 1)


# --------------------------------------------------------------------------
# location
# --------------------------------------------------------------------------

def test_location_crops_168_to_84():
    img = stream(3).integers(0, 256, size=(3, 168, 168)).astype(np.uint8)
    crops = [transform_location(img, p) for p in range(4)]
    assert all(c.shape == (3, 84, 84) for c in crops)


def test_location_partition_reassembles():
    img = rand_img(4, s=12)
    p = [transform_location(img, i) for i in range(4)]
    top = np.concatenate([p[0], p[1]], axis=2)
    bottom = np.concatenate([p[2], p[3]], axis=2)
    assert np.array_equal(np.concatenate([top, bottom], axis=1), img)


def test_location_constant_image():
    img = np.full((3, 8, 8), 37, dtype=np.uint8)
    assert np.array_equal(transform_location(img, 0), np.full((3, 4, 4), 37, np.uint8))


def test_location_rejects_odd_dims():
    img = stream(0).integers(0, 256, size=(3, 9, 9)).astype(np.uint8)
    with pytest.raises(OddDimensions):
        transform_location(img, 0)


def test_location5_part4_constant():
    img = np.full((3, 8, 8), 120, dtype=np.uint8)
    out = transform_location5(img, 4)
    assert out.shape == (3, 4, 4)
    assert np.allclose(out, 120.0, atol=1e-5)


def test_location5_delegates_parts_0_to_3():
    img = rand_img(5, s=12)
    for p in range(4):
        assert np.array_equal(transform_location5(img, p), transform_location(img, p))


def test_location5_part4_round_trip():
    # nearest-neighbor upscale then the part-4 downscale recovers the original
    small = stream(6).random((3, 8, 8)).astype(np.float32)
    up = np.repeat(np.repeat(small, 2, axis=1), 2, axis=2)
    back = transform_location5(up, 4)
    assert np.allclose(back, small, atol=1e-6)


# --------------------------------------------------------------------------
# composed location+rotation
# --------------------------------------------------------------------------

def test_loc_rot_identity_cell_is_plain_rescale():
    img = rand_img(7, s=12).astype(np.float32)
    assert np.allclose(transform_loc_rot(img, 4, 0), transform_location5(img, 4))


def test_loc_rot_is_definitional_composition():
    img = rand_img(8, s=12)
    for part in range(5):
        for r in range(4):
            expected = transform_rotation(transform_location5(img, part), r)
            assert np.array_equal(transform_loc_rot(img, part, r), expected)


def test_loc_rot_20_cells_distinct_on_generic_image():
    img = rand_img(9, s=12).astype(np.float32)
    outs = {transform_loc_rot(img, p, r).tobytes() for p in range(5) for r in range(4)}
    assert len(outs) == 20


def test_task_copy_grid_sizes():
    assert len(task_copy_grid({TaskKind.CLS})) == 1
    assert len(task_copy_grid({TaskKind.CLS, TaskKind.ROT})) == 4
    assert len(task_copy_grid({TaskKind.CLS, TaskKind.LOC4})) == 4
    assert len(task_copy_grid({TaskKind.CLS, TaskKind.LOC5})) == 5
    assert len(task_copy_grid({TaskKind.CLS, TaskKind.ROT, TaskKind.LOC5})) == 20


def test_apply_copy_matches_transforms():
    img = rand_img(10, s=12)
    assert np.array_equal(apply_copy(img, None, 2), transform_rotation(img, 2))
    assert np.array_equal(apply_copy(img, 1, None), transform_location5(img, 1))
    assert np.array_equal(apply_copy(img, None, None), img)


# --------------------------------------------------------------------------
# contrastive views
# --------------------------------------------------------------------------

def test_contrastive_views_shape():
    batch = stream(11).random((6, 3, 64, 64)).astype(np.float32)
    va, vb = make_contrastive_views(batch, 32, stream(12))
    assert va.shape == vb.shape == (6, 3, 32, 32)


def test_contrastive_views_disabled_is_center_crop():
    batch = stream(13).random((4, 3, 32, 32)).astype(np.float32)
    va, vb = make_contrastive_views(batch, 32, stream(14), ContrastiveAugment(enabled=False))
    assert np.array_equal(va, vb)
    assert np.array_equal(va, batch)  # square input at target size: identity crop


def test_contrastive_views_deterministic_given_rng():
    batch = stream(15).random((4, 3, 64, 64)).astype(np.float32)
    a1, b1 = make_contrastive_views(batch, 32, stream(16, "aug"))
    a2, b2 = make_contrastive_views(batch, 32, stream(16, "aug"))
    assert np.array_equal(a1, a2) and np.array_equal(b1, b2)


# --------------------------------------------------------------------------
# heads
# --------------------------------------------------------------------------

def test_head_logits_zero_weights():
    head = make_head(TaskKind.ROT, 8)
    with torch.no_grad():
        head.module.weight.zero_()
        head.module.bias.zero_()
    out = head_logits(head, torch.randn(5, 8))
    assert torch.equal(out, torch.zeros(5, 4))


def test_head_logits_affine_arithmetic():
    head = make_head(TaskKind.CLS, 1, n_classes=1)
    with torch.no_grad():
        head.module.weight.fill_(2.0)
        head.module.bias.fill_(1.0)
    out = head_logits(head, torch.tensor([[3.0]])).detach()
    assert float(out) == pytest.approx(7.0, abs=0)


def test_head_logits_linearity():
    head = make_head(TaskKind.LOC5, 16)
    head.module.double()
    with torch.no_grad():
        head.module.bias.zero_()
    x = torch.randn(7, 16, dtype=torch.float64)
    y = torch.randn(7, 16, dtype=torch.float64)
    add = head_logits(head, x + y)
    sep = head_logits(head, x) + head_logits(head, y)
    assert torch.allclose(add, sep, atol=1e-9)
    hom = head_logits(head, 3.0 * x)
    assert torch.allclose(hom, 3.0 * head_logits(head, x), atol=1e-9)


def test_head_logits_shape_mismatch():
    head = make_head(TaskKind.ROT, 8)
    with pytest.raises(ShapeMismatch):
        head_logits(head, torch.randn(2, 9))


def test_contrast_head_projects_to_128():
    head = make_head(TaskKind.CONTRAST, 64)
    out = head.module(torch.randn(3, 64))
    assert out.shape == (3, 128)


# --------------------------------------------------------------------------
# NT-Xent
# --------------------------------------------------------------------------

def ntxent_brute_force(a, b, tau):
    """Independent implementation: materializes the full 2B x 2B matrix."""
    z = np.vstack([a, b]).astype(np.float64)
    z = z / np.linalg.norm(z, axis=1, keepdims=True)
    n = len(z)
    b_sz = n // 2
    sim = z @ z.T / tau
    total = 0.0
    for i in range(n):
        pos = i + b_sz if i < b_sz else i - b_sz
        denom = sum(math.exp(sim[i, j]) for j in range(n) if j != i)
        total += -math.log(math.exp(sim[i, pos]) / denom)
    return total / n


def test_ntxent_analytic_orthogonal_pair():
    a = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
    loss = ntxent_loss(a, a.clone(), temperature=0.5)
    assert float(loss) == pytest.approx(math.log(1 + 2 * math.exp(-2)), abs=1e-12)


@pytest.mark.parametrize("b", [2, 4, 8])
def test_ntxent_matches_brute_force(b):
    rng = stream(20, b)
    a = rng.normal(size=(b, 16))
    v = rng.normal(size=(b, 16))
    loss = ntxent_loss(torch.from_numpy(a), torch.from_numpy(v), temperature=0.5)
    assert float(loss) == pytest.approx(ntxent_brute_force(a, v, 0.5), abs=1e-6)


def test_ntxent_pair_permutation_symmetry():
    rng = stream(21)
    a = torch.from_numpy(rng.normal(size=(5, 8)))
    b = torch.from_numpy(rng.normal(size=(5, 8)))
    perm = torch.tensor([3, 1, 4, 0, 2])
    assert float(ntxent_loss(a, b)) == pytest.approx(float(ntxent_loss(a[perm], b[perm])), abs=1e-12)


def test_ntxent_scale_invariant():
    rng = stream(22)
    a = torch.from_numpy(rng.normal(size=(4, 8)))
    b = torch.from_numpy(rng.normal(size=(4, 8)))
    assert float(ntxent_loss(a, b)) == pytest.approx(float(ntxent_loss(10 * a, 10 * b)), abs=1e-9)


def test_ntxent_degenerate_batch():
    with pytest.raises(DegenerateBatch):
        ntxent_loss(torch.randn(1, 8), torch.randn(1, 8))
