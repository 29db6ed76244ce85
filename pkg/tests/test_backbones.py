import numpy as np
import pytest
import torch

from fewshotlab.backbones import (
    Arch,
    BackboneConfig,
    DEFAULT_WIDTHS,
    build_backbone,
    extract_features,
    feature_dim_for,
    load_checkpoint,
    save_checkpoint,
)
from fewshotlab.errors import ShapeMismatch, UnsupportedArch
from fewshotlab.rng import stream


def test_default_widths_match_architectures():
    assert DEFAULT_WIDTHS[Arch.RESNET12] == (64, 160, 320, 640)
    assert DEFAULT_WIDTHS[Arch.RESNETW12] == (128, 320, 640, 640)
    assert DEFAULT_WIDTHS[Arch.CONVNET4] == (64, 64, 64, 64)


def test_feature_dims():
    assert feature_dim_for(BackboneConfig(Arch.CONVNET4, input_size=84)) == 1600
    assert feature_dim_for(BackboneConfig(Arch.CONVNET4, input_size=32)) == 256
    assert feature_dim_for(BackboneConfig(Arch.RESNET12, input_size=84)) == 640
    assert feature_dim_for(BackboneConfig(Arch.RESNETW12, input_size=84)) == 640
    assert feature_dim_for(BackboneConfig(Arch.RESNETW12, input_size=32)) == 640


def test_convnet4_block_structure():
    fe = build_backbone(BackboneConfig(Arch.CONVNET4, input_size=32), 0)
    block = fe.module.blocks[0]
    kinds = [type(m) for m in block]
    assert kinds == [torch.nn.Conv2d, torch.nn.ReLU, torch.nn.BatchNorm2d, torch.nn.MaxPool2d]
    assert block[0].kernel_size == (3, 3)
    assert block[3].stride == 2
    assert len(fe.module.blocks) == 4


def test_build_is_bitwise_reproducible():
    cfg = BackboneConfig(Arch.CONVNET4, input_size=32, widths=(8, 8, 8, 8))
    a = build_backbone(cfg, 123)
    b = build_backbone(cfg, 123)
    for (ka, va), (kb, vb) in zip(a.module.state_dict().items(), b.module.state_dict().items()):
        assert ka == kb and torch.equal(va, vb)
    c = build_backbone(cfg, 124)
    assert any(
        not torch.equal(v, c.module.state_dict()[k]) for k, v in a.module.state_dict().items()
    )


def test_unsupported_arch():
    with pytest.raises(UnsupportedArch):
        BackboneConfig("vgg")


@pytest.mark.parametrize("arch", [Arch.CONVNET4, Arch.RESNET12, Arch.RESNETW12])
@pytest.mark.parametrize("batch", [1, 2, 5, 64])
def test_shape_contract(arch, batch):
    widths = (8, 8, 8, 8) if arch is Arch.CONVNET4 else (8, 12, 16, 24)
    cfg = BackboneConfig(arch, input_size=32, widths=widths)
    fe = build_backbone(cfg, 0)
    x = stream(batch).random((batch, 3, 32, 32)).astype(np.float32)
    out = extract_features(fe, x)
    assert out.shape == (batch, fe.feature_dim)
    assert np.isfinite(out).all()


def test_extract_rejects_wrong_size():
    fe = build_backbone(BackboneConfig(Arch.CONVNET4, input_size=32, widths=(4, 4, 4, 4)), 0)
    with pytest.raises(ShapeMismatch):
        extract_features(fe, np.zeros((1, 3, 16, 16), dtype=np.float32))
    with pytest.raises(ShapeMismatch):
        extract_features(fe, np.zeros((3, 32, 32), dtype=np.float32))


def test_eval_mode_duplicate_rows_identical():
    fe = build_backbone(BackboneConfig(Arch.CONVNET4, input_size=32, widths=(8, 8, 8, 8)), 1)
    img = stream(5).random((1, 3, 32, 32)).astype(np.float32)
    batch = np.concatenate([img, stream(6).random((3, 3, 32, 32)).astype(np.float32), img])
    out = extract_features(fe, batch)
    assert np.array_equal(out[0], out[4])


@pytest.mark.parametrize("arch", [Arch.CONVNET4, Arch.RESNET12])
def test_eval_mode_permutation_equivariant(arch):
    widths = (8, 8, 8, 8) if arch is Arch.CONVNET4 else (8, 12, 16, 24)
    fe = build_backbone(BackboneConfig(arch, input_size=32, widths=widths), 2)
    x = stream(7).random((9, 3, 32, 32)).astype(np.float32)
    perm = stream(8).permutation(9)
    direct = extract_features(fe, x[perm])
    oracle = extract_features(fe, x)[perm]
    assert np.array_equal(direct, oracle)


def test_gradient_matches_finite_differences():
    # <=1k-parameter shrunken ConvNet4, 64-bit, central differences
    cfg = BackboneConfig(Arch.CONVNET4, input_size=16, widths=(2, 2, 2, 2))
    fe = build_backbone(cfg, 3)
    module = fe.module.double().train()
    for m in module.modules():
        if isinstance(m, torch.nn.BatchNorm2d):
            m.momentum = 0.0  # keep the objective a pure function of params
    head = torch.nn.Linear(fe.feature_dim, 3).double()
    params = list(module.parameters()) + list(head.parameters())
    assert sum(p.numel() for p in params) <= 1000

    x = torch.from_numpy(stream(9).random((4, 3, 16, 16))).double()
    y = torch.tensor([0, 1, 2, 0])

    def objective():
        return torch.nn.functional.cross_entropy(head(module(x)), y)

    loss = objective()
    grads = torch.autograd.grad(loss, params)

    h = 1e-5
    num, ana = [], []
    for p, g in zip(params, grads):
        flat = p.data.view(-1)
        gflat = g.view(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + h
            up = objective().item()
            flat[i] = orig - h
            down = objective().item()
            flat[i] = orig
            num.append((up - down) / (2 * h))
            ana.append(gflat[i].item())
    num, ana = np.array(num), np.array(ana)
    rel = np.linalg.norm(ana - num) / max(np.linalg.norm(num), 1e-12)
    assert rel < 1e-3


def test_checkpoint_round_trip(tmp_path):
    cfg = BackboneConfig(Arch.CONVNET4, input_size=32, widths=(8, 8, 8, 8))
    fe = build_backbone(cfg, 4)
    path = save_checkpoint(
        fe, str(tmp_path), ["cls", "rot"], epoch=7, val_loss=0.4321,
        extra={"mean_rgb": [0.5, 0.5, 0.5], "std_rgb": [0.3, 0.3, 0.3]},
    )
    name = path.rsplit("/", 1)[-1]
    assert name == "convnet4_cls+rot_ep007_vl0.4321.pt"
    back, meta = load_checkpoint(path)
    assert meta["tasks"] == ["cls", "rot"] and meta["epoch"] == 7
    x = stream(10).random((2, 3, 32, 32)).astype(np.float32)
    assert np.array_equal(extract_features(fe, x), extract_features(back, x))
