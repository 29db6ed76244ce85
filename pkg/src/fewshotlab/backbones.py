"""Feature extractors: ConvNet4 and the two ResNet12 variants.

The last layer of activations is the transferable representation: ConvNet4
flattens its final map (1600-d at 84px input), the residual variants global
average pool to a fixed 640-d vector.
"""

import os
import tempfile
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import torch
from torch import nn

from .errors import ShapeMismatch, UnsupportedArch


class Arch(Enum):
    CONVNET4 = "convnet4"
    RESNET12 = "resnet12"
    RESNETW12 = "resnetw12"


DEFAULT_WIDTHS = {
    Arch.CONVNET4: (64, 64, 64, 64),
    Arch.RESNET12: (64, 160, 320, 640),
    Arch.RESNETW12: (128, 320, 640, 640),
}


@dataclass
class BackboneConfig:
    arch: Arch
    input_size: int = 84
    widths: tuple = None  # per-stage channels; None -> the architecture default
    conv_bn_relu: bool = False  # ConvNet4 block order ablation (default conv-relu-bn)

    def __post_init__(self):
        if not isinstance(self.arch, Arch):
            raise UnsupportedArch(f"unknown architecture {self.arch!r}")
        if self.widths is None:
            self.widths = DEFAULT_WIDTHS[self.arch]
        self.widths = tuple(int(w) for w in self.widths)


class _ConvNet4(nn.Module):
    """Four blocks of 3x3 conv -> ReLU -> batchnorm -> 2x2 max-pool (stride 2).

    conv_bn_relu=True swaps to the more common conv -> BN -> ReLU ordering.
    """

    def __init__(self, widths, conv_bn_relu=False):
        super().__init__()
        blocks = []
        cin = 3
        for w in widths:
            layers = [nn.Conv2d(cin, w, 3, padding=1)]
            if conv_bn_relu:
                layers += [nn.BatchNorm2d(w), nn.ReLU(inplace=True)]
            else:
                layers += [nn.ReLU(inplace=True), nn.BatchNorm2d(w)]
            layers.append(nn.MaxPool2d(2))
            blocks.append(nn.Sequential(*layers))
            cin = w
        self.blocks = nn.Sequential(*blocks)

    def forward(self, x):
        x = self.blocks(x)
        return torch.flatten(x, 1)


class _ResBlock(nn.Module):
    """Three conv-BN(-ReLU) layers with a 1x1-projected shortcut, then pooling."""

    def __init__(self, cin, cout, pool=True):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.conv3 = nn.Conv2d(cout, cout, 3, padding=1, bias=False)
        self.bn3 = nn.BatchNorm2d(cout)
        self.shortcut = nn.Sequential(
            nn.Conv2d(cin, cout, 1, bias=False), nn.BatchNorm2d(cout)
        )
        self.pool = nn.MaxPool2d(2) if pool else nn.Identity()
        self.relu = nn.ReLU(inplace=True)

    def forward(self, x):
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.relu(self.bn2(self.conv2(out)))
        out = self.bn3(self.conv3(out))
        out = self.relu(out + self.shortcut(x))
        return self.pool(out)


class _ResNet12(nn.Module):
    """Four residual stages followed by global average pooling."""

    def __init__(self, widths, input_size):
        super().__init__()
        cin = 3
        stages = []
        for i, w in enumerate(widths):
            # small inputs skip the last pool so the final map stays >= 1x1
            pool = not (i == len(widths) - 1 and input_size < 64)
            stages.append(_ResBlock(cin, w, pool=pool))
            cin = w
        self.stages = nn.Sequential(*stages)

    def forward(self, x):
        x = self.stages(x)
        return torch.flatten(x.mean(dim=(2, 3)), 1) if x.ndim == 4 else x


@dataclass
class FeatureExtractor:
    """Backbone module plus the metadata needed to use its features."""

    module: nn.Module
    config: BackboneConfig
    feature_dim: int

    def param_count(self):
        return sum(p.numel() for p in self.module.parameters())


def feature_dim_for(config):
    if config.arch is Arch.CONVNET4:
        s = config.input_size
        for _ in config.widths:
            s //= 2
        if s < 1:
            raise ShapeMismatch(f"input {config.input_size}px collapses below 1x1")
        return config.widths[-1] * s * s
    return config.widths[-1]


def build_backbone(config, seed):
    """Initialized FeatureExtractor; bitwise-reproducible from the seed."""
    if config.arch is Arch.CONVNET4:
        maker = lambda: _ConvNet4(config.widths, config.conv_bn_relu)
    elif config.arch in (Arch.RESNET12, Arch.RESNETW12):
        maker = lambda: _ResNet12(config.widths, config.input_size)
    else:
        raise UnsupportedArch(f"unknown architecture {config.arch!r}")
    with torch.random.fork_rng():
        torch.manual_seed(int(seed) & 0x7FFFFFFFFFFFFFFF)
        module = maker()
    return FeatureExtractor(module, config, feature_dim_for(config))


def extract_features(fe, batch):
    """Frozen eval-mode features: float [B,3,S,S] -> float32 [B, feature_dim]."""
    arr = batch.detach().cpu().numpy() if isinstance(batch, torch.Tensor) else np.asarray(batch)
    if arr.ndim != 4 or arr.shape[1] != 3:
        raise ShapeMismatch(f"expected [B,3,H,W], got {arr.shape}")
    s = fe.config.input_size
    if arr.shape[2] != s or arr.shape[3] != s:
        raise ShapeMismatch(f"backbone expects {s}x{s} inputs, got {arr.shape[2]}x{arr.shape[3]}")
    was_training = fe.module.training
    fe.module.eval()
    try:
        with torch.no_grad():
            dtype = next(fe.module.parameters()).dtype
            out = fe.module(torch.from_numpy(np.ascontiguousarray(arr)).to(dtype))
    finally:
        fe.module.train(was_training)
    feats = out.cpu().numpy().astype(np.float32)
    if not np.isfinite(feats).all():
        raise ShapeMismatch("non-finite features produced")
    return feats


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

def atomic_save(obj, path):
    """torch.save via a temp file in the target directory, then rename."""
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            torch.save(obj, f)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def checkpoint_name(config, tasks, epoch, val_loss):
    task_tag = "+".join(tasks) if not isinstance(tasks, str) else tasks
    return f"{config.arch.value}_{task_tag}_ep{epoch:03d}_vl{val_loss:.4f}.pt"


def save_checkpoint(fe, out_dir, tasks, epoch, val_loss, extra=None):
    """Write the named parameter map with shape metadata; returns the path."""
    payload = {
        "arch": fe.config.arch.value,
        "input_size": fe.config.input_size,
        "widths": list(fe.config.widths),
        "conv_bn_relu": fe.config.conv_bn_relu,
        "feature_dim": fe.feature_dim,
        "state": {k: v.cpu() for k, v in fe.module.state_dict().items()},
        "shapes": {k: list(v.shape) for k, v in fe.module.state_dict().items()},
        "meta": dict(tasks=list(tasks), epoch=int(epoch), val_loss=float(val_loss),
                     **(extra or {})),
    }
    path = os.path.join(out_dir, checkpoint_name(fe.config, payload["meta"]["tasks"], epoch, val_loss))
    atomic_save(payload, path)
    return path


def load_checkpoint(path):
    """Rebuild (FeatureExtractor, meta dict) from a checkpoint file."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    config = BackboneConfig(
        arch=Arch(payload["arch"]),
        input_size=payload["input_size"],
        widths=tuple(payload["widths"]),
        conv_bn_relu=payload.get("conv_bn_relu", False),
    )
    fe = build_backbone(config, seed=0)
    fe.module.load_state_dict(payload["state"])
    return fe, payload["meta"]
