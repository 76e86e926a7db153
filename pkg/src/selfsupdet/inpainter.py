"""Background inpainter: predicts erased rectangles from their surroundings.

The erased region is filled with mid-gray and flagged in a fourth input
channel so the network can tell "erased" from "dark". It trains by
reconstructing random rectangles on clean training frames; overfitting
to the corpus is acceptable since it is never used at inference time.
Downstream, only the pixels inside the erase region are ever consumed.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, no_grad
from .autodiff import functional as F
from .autodiff.nn import Conv2d, Module
from .transformer import BBox

ERASE_SCALE = 1.1
ERASE_FILL = 0.5


def erase_bounds(box: BBox, scale: float, width: int, height: int) -> tuple[int, int, int, int]:
    """Pixel rectangle (x0, x1, y0, y1) of the box scaled about its center.

    Rounding rule: the start edge and the side length are rounded
    separately, so an interior box covers round(scale*w*W) by
    round(scale*h*H) pixels; the result is clipped to the image.
    """
    w = box.w * scale
    h = box.h * scale
    x0 = int(round((box.cx - w / 2.0) * width))
    y0 = int(round((box.cy - h / 2.0) * height))
    x1 = x0 + max(1, int(round(w * width)))
    y1 = y0 + max(1, int(round(h * height)))
    x0, x1 = max(0, x0), min(width, x1)
    y0, y1 = max(0, y0), min(height, y1)
    if x0 >= x1 or y0 >= y1:
        raise ValueError(f"scaled box {box} lies outside the {width}x{height} image")
    return x0, x1, y0, y1


def erase(image: np.ndarray, box: BBox, scale: float = ERASE_SCALE) -> tuple[np.ndarray, np.ndarray]:
    """Blank the scaled box region of a (3, H, W) image.

    Returns (masked image, erase mask): RGB inside the region becomes 0.5,
    the mask is 1 there and 0 elsewhere, shape (1, H, W).
    """
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"erase expects a (3, H, W) image, got {image.shape}")
    height, width = image.shape[1:]
    x0, x1, y0, y1 = erase_bounds(box, scale, width, height)
    masked = image.copy()
    masked[:, y0:y1, x0:x1] = ERASE_FILL
    mask = np.zeros((1, height, width), dtype=image.dtype)
    mask[:, y0:y1, x0:x1] = 1.0
    return masked, mask


class Inpainter(Module):
    """Encoder-decoder over (N, 4, H, W): masked RGB plus erase mask."""

    ENC = (12, 24, 48, 48)
    DEC = (48, 24, 12, 12)

    def __init__(self, rng: np.random.Generator):
        super().__init__()
        cin = 4
        for i, cout in enumerate(self.ENC):
            self.add_module(f"enc{i}", Conv2d(rng, cin, cout, k=3, stride=2, padding=1))
            cin = cout
        self.add_module("mid", Conv2d(rng, cin, cin, k=3, stride=1, padding=1))
        for i, cout in enumerate(self.DEC):
            self.add_module(f"dec{i}", Conv2d(rng, cin, cout, k=3, stride=1, padding=1))
            cin = cout
        self.add_module("head", Conv2d(rng, cin, 3, k=1, stride=1, padding=0))

    def forward(self, x: Tensor) -> Tensor:
        if x.data.ndim != 4 or x.data.shape[1] != 4:
            raise ValueError(f"inpainter expects (N, 4, H, W) input, got {x.shape}")
        if x.data.shape[2] % 16 or x.data.shape[3] % 16:
            raise ValueError(f"inpainter needs sides divisible by 16, got {x.shape}")
        h = x
        for i in range(len(self.ENC)):
            h = self._modules[f"enc{i}"](h).leaky_relu(0.1)
        h = self._modules["mid"](h).leaky_relu(0.1)
        for i in range(len(self.DEC)):
            h = self._modules[f"dec{i}"](F.upsample_nearest2(h)).leaky_relu(0.1)
        return self._modules["head"](h).sigmoid()

    __call__ = forward


def inpaint_image(net: Inpainter, image: np.ndarray, box: BBox,
                  scale: float = ERASE_SCALE) -> tuple[np.ndarray, np.ndarray]:
    """Erase the scaled box from one (3, H, W) image and fill it back in.

    Returns (predicted background, erase mask); runs without gradients.
    """
    masked, mask = erase(image, box, scale)
    with no_grad():
        inp = Tensor(np.concatenate([masked, mask], axis=0)[None])
        out = net(inp).data[0]
    return out, mask


def random_erase_box(rng: np.random.Generator) -> BBox:
    """Rectangle for pretraining: side uniform in [0.1, 0.5], fully inside."""
    w = rng.uniform(0.1, 0.5)
    h = rng.uniform(0.1, 0.5)
    cx = rng.uniform(w / 2.0, 1.0 - w / 2.0)
    cy = rng.uniform(h / 2.0, 1.0 - h / 2.0)
    return BBox(cx, cy, w, h)


def masked_region_error(pred: np.ndarray, target: np.ndarray, mask: np.ndarray) -> float:
    """Mean squared RGB error over the erased pixels only."""
    area = mask.sum()
    if area <= 0:
        raise ValueError("erase mask selects no pixels")
    diff = (pred - target) * mask
    return float((diff * diff).sum() / (area * pred.shape[-3]))


def pretrain_step(net: Inpainter, optimizer, images: np.ndarray,
                  rng: np.random.Generator) -> float:
    """One reconstruction step on a (N, 3, H, W) batch of clean frames.

    Each image gets its own random rectangle (erase scale 1 here: the box
    already is the erase region); the loss averages squared error over
    erased pixels only.
    """
    n = images.shape[0]
    masked = np.empty((n, 4) + images.shape[2:], dtype=np.float32)
    masks = np.empty((n, 1) + images.shape[2:], dtype=np.float32)
    for i in range(n):
        m, em = erase(images[i], random_erase_box(rng), scale=1.0)
        masked[i, :3] = m
        masked[i, 3:] = em
        masks[i] = em
    net.zero_grad()
    pred = net(Tensor(masked))
    mask_t = Tensor(masks)
    diff = (pred - Tensor(images.astype(np.float32))) * mask_t
    loss = diff.square().sum() / float(masks.sum() * 3.0)
    loss.backward()
    optimizer.step()
    return float(loss.data)
