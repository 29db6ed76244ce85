"""Low-level image array primitives.

All functions take channel-first arrays ([C,H,W] or [B,C,H,W]). Resampling is
bilinear with align_corners=False, pinned once so every resize in the package
shares the same convention.
"""

import numpy as np
import torch


def to_float01(img):
    """uint8 [0,255] -> float32 [0,1]; float inputs pass through as float32."""
    arr = np.asarray(img)
    if arr.dtype == np.uint8:
        return arr.astype(np.float32) / 255.0
    return arr.astype(np.float32, copy=False)


def resize_bilinear(img, out_hw):
    """Resize [C,H,W] or [B,C,H,W] float array to out_hw=(H',W')."""
    arr = np.asarray(img)
    squeeze = arr.ndim == 3
    t = torch.from_numpy(np.ascontiguousarray(arr, dtype=arr.dtype))
    if squeeze:
        t = t.unsqueeze(0)
    if not t.is_floating_point():
        t = t.float()
    out = torch.nn.functional.interpolate(
        t, size=tuple(out_hw), mode="bilinear", align_corners=False
    )
    res = out.squeeze(0).numpy() if squeeze else out.numpy()
    return res


def center_crop(img, size):
    """Center size x size crop of [C,H,W]."""
    _, h, w = img.shape
    top = (h - size) // 2
    left = (w - size) // 2
    return img[:, top : top + size, left : left + size]


def hflip(img):
    """Horizontal flip of [C,H,W] (width axis)."""
    return np.ascontiguousarray(img[:, :, ::-1])


def sample_crop_params(h, w, rng, scale=(0.08, 1.0), ratio=(3.0 / 4.0, 4.0 / 3.0), attempts=10):
    """Sample a (top, left, ch, cw) rectangle for a random resized crop.

    Rejection-samples area/aspect like the common ImageNet pipeline and falls
    back to the largest valid center rectangle. Exposed separately so crop
    geometry can be replayed from a recorded stream.
    """
    area = float(h * w)
    log_ratio = (np.log(ratio[0]), np.log(ratio[1]))
    for _ in range(attempts):
        target_area = area * rng.uniform(scale[0], scale[1])
        aspect = float(np.exp(rng.uniform(log_ratio[0], log_ratio[1])))
        cw = int(round(np.sqrt(target_area * aspect)))
        ch = int(round(np.sqrt(target_area / aspect)))
        if 0 < cw <= w and 0 < ch <= h:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            return top, left, ch, cw
    # fallback: clamp aspect, take a center rectangle
    in_ratio = w / h
    if in_ratio < ratio[0]:
        cw, ch = w, min(h, int(round(w / ratio[0])))
    elif in_ratio > ratio[1]:
        ch, cw = h, min(w, int(round(h * ratio[1])))
    else:
        ch, cw = h, w
    return (h - ch) // 2, (w - cw) // 2, ch, cw


def random_resized_crop(img, out_size, rng, scale=(0.08, 1.0)):
    """Random resized crop of [C,H,W] float array to out_size x out_size."""
    _, h, w = img.shape
    top, left, ch, cw = sample_crop_params(h, w, rng, scale=scale)
    patch = img[:, top : top + ch, left : left + cw]
    return resize_bilinear(patch, (out_size, out_size))


def resize_shorter_and_center_crop(img, out_size, enlarge=1.0 / 0.875):
    """Deterministic eval view: shorter side -> out_size*enlarge, center crop."""
    _, h, w = img.shape
    short = round(out_size * enlarge)
    if h <= w:
        nh, nw = short, max(short, int(round(w * short / h)))
    else:
        nh, nw = max(short, int(round(h * short / w))), short
    return center_crop(resize_bilinear(img, (nh, nw)), out_size)


def normalize(img, mean, std):
    """Per-channel (x - mean) / std for [C,H,W] or [B,C,H,W] float arrays."""
    mean = np.asarray(mean, dtype=np.float32).reshape(-1, 1, 1)
    std = np.asarray(std, dtype=np.float32).reshape(-1, 1, 1)
    return (img - mean) / std
