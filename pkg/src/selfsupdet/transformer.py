"""Differentiable crop and inverse composite between image and patch frames.

A box is (cx, cy, w, h) in normalized image coordinates. Cropping samples
the box region onto a square patch grid; compositing resamples a patch and
its mask back into image coordinates and alpha-blends them over a
background. Both directions are bilinear, so localization gradients flow
through the box parameters in either mapping.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, constant
from .autodiff import functional as F

# boxes thinner than this cannot be sampled meaningfully and are rejected
MIN_BOX_SIDE = 1e-4


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box: normalized center (cx, cy) in [0,1], sides (w, h)."""

    cx: float
    cy: float
    w: float
    h: float

    def as_array(self, dtype=np.float32) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h], dtype=dtype)

    def corners(self) -> tuple[float, float, float, float]:
        """(x0, y0, x1, y1) in normalized coordinates."""
        return (self.cx - self.w / 2.0, self.cy - self.h / 2.0,
                self.cx + self.w / 2.0, self.cy + self.h / 2.0)

    def area(self) -> float:
        return self.w * self.h


def _as_box_tensor(box) -> Tensor:
    """Lift a BBox, array, or Tensor to a (K, 4) box tensor, K in {1, N}."""
    if isinstance(box, BBox):
        box = constant(box.as_array())
    elif not isinstance(box, Tensor):
        box = constant(np.asarray(box, dtype=np.float32))
    if box.data.ndim == 1:
        box = box.reshape(1, 4)
    if box.data.ndim != 2 or box.data.shape[1] != 4:
        raise ValueError(f"box must have shape (4,) or (N, 4), got {box.shape}")
    sides = box.data[:, 2:4]
    if np.any(sides <= MIN_BOX_SIDE):
        raise ValueError(f"degenerate box: sides must exceed {MIN_BOX_SIDE}, got {sides.min()}")
    return box


def _columns(bt: Tensor) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    k = bt.data.shape[0]
    cx = bt[:, 0:1].reshape(k, 1, 1)
    cy = bt[:, 1:2].reshape(k, 1, 1)
    w = bt[:, 2:3].reshape(k, 1, 1)
    h = bt[:, 3:4].reshape(k, 1, 1)
    return cx, cy, w, h


def crop(img: Tensor, box, out_res: int = 32) -> Tensor:
    """Bilinear crop of the box region onto an out_res x out_res patch.

    img: (N, C, H, W). box: BBox, array of shape (4,), or Tensor of shape
    (4,) or (N, 4); a single box applies to every image in the batch.
    Sample points beyond the image clamp to the border. Returns
    (N, C, out_res, out_res), differentiable w.r.t. img and box.
    """
    if img.data.ndim != 4:
        raise ValueError(f"crop expects img of shape (N, C, H, W), got {img.shape}")
    bt = _as_box_tensor(box)
    n, _, h, w = img.data.shape
    if bt.data.shape[0] not in (1, n):
        raise ValueError(f"box batch {bt.data.shape[0]} does not match image batch {n}")
    p = int(out_res)
    dt = bt.dtype
    cx, cy, bw, bh = _columns(bt)

    # patch texel centers in box-relative units, then to pixel coordinates
    base = constant((np.arange(p, dtype=dt) + 0.5) / p)
    xs = (cx - bw * 0.5 + base.reshape(1, 1, p) * bw) * w - 0.5
    ys = (cy - bh * 0.5 + base.reshape(1, p, 1) * bh) * h - 0.5
    tile_rows = constant(np.zeros((n, p, 1), dtype=dt))
    tile_cols = constant(np.zeros((n, 1, p), dtype=dt))
    gx = xs + tile_rows
    gy = ys + tile_cols
    return F.grid_sample(img, gx, gy, padding="border")


def composite(fg: Tensor, mask: Tensor, box, background: Tensor) -> Tensor:
    """Paste a patch into the image frame, blending by its mask.

    fg: (N, C, P, P); mask: (N, 1, P, P) valued in [0, 1];
    background: (N, C, H, W). Inside the box the output is
    mask*fg + (1-mask)*background with both patches bilinearly resampled
    to image coordinates; outside the box it equals the background
    exactly. Differentiable w.r.t. every input including the box.
    """
    if fg.data.ndim != 4 or mask.data.ndim != 4:
        raise ValueError(f"composite expects 4-D fg and mask, got {fg.shape} and {mask.shape}")
    if fg.data.shape[2:] != mask.data.shape[2:]:
        raise ValueError(
            f"composite resolution mismatch: fg {fg.shape} vs mask {mask.shape}")
    if background.data.ndim != 4:
        raise ValueError(f"composite expects background (N, C, H, W), got {background.shape}")
    n, _, h, w = background.data.shape
    if fg.data.shape[0] != n or mask.data.shape[0] != n:
        raise ValueError(
            f"composite batch mismatch: fg {fg.shape}, mask {mask.shape}, background {background.shape}")
    p = fg.data.shape[2]
    bt = _as_box_tensor(box)
    if bt.data.shape[0] not in (1, n):
        raise ValueError(f"box batch {bt.data.shape[0]} does not match image batch {n}")
    dt = bt.dtype
    cx, cy, bw, bh = _columns(bt)

    # inverse map: image pixel centers to patch texel coordinates
    xs_img = constant(((np.arange(w, dtype=dt) + 0.5) / w).reshape(1, 1, w))
    ys_img = constant(((np.arange(h, dtype=dt) + 0.5) / h).reshape(1, h, 1))
    u = ((xs_img - (cx - bw * 0.5)) / bw) * p - 0.5
    v = ((ys_img - (cy - bh * 0.5)) / bh) * p - 0.5
    tile_rows = constant(np.zeros((n, h, 1), dtype=dt))
    tile_cols = constant(np.zeros((n, 1, w), dtype=dt))
    gu = u + tile_rows
    gv = v + tile_cols

    # zero padding makes both resampled patches vanish off the box, so the
    # blend reduces to the background there
    fg_img = F.grid_sample(fg, gu, gv, padding="zeros")
    mask_img = F.grid_sample(mask, gu, gv, padding="zeros")
    return mask_img * fg_img + (1.0 - mask_img) * background
