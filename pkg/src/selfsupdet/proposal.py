"""Grid detector: per-cell selection probabilities and box regression.

A shared convolutional backbone maps the image to a G x G feature grid.
Two 1x1 heads read it out: one logit per cell (softmaxed over all cells
into a selection distribution) and four raw box parameters per cell
(offsets from the cell anchor plus log-size terms). Cell offsets are
limited to 1.5 cell widths and decoded centers are clamped into the
image, so every candidate stays a valid box.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, concat
from .autodiff.nn import Conv2d, Module
from .transformer import BBox

OFFSET_LIMIT_CELLS = 1.5
SIZE_MIN = 0.05
SIZE_MAX = 0.9
BACKBONE_STRIDE = 16  # four stride-2 blocks


@dataclass
class ProposalGrid:
    """Single-image detector output: C = grid_size^2 candidate cells."""

    grid_size: int
    probs: Tensor       # (C,), positive, sums to 1
    raw_params: Tensor  # (C, 4): dx, dy, logw, logh per cell
    logits: Tensor | None = None  # (C,) pre-softmax scores; regularizers need them

    @property
    def num_cells(self) -> int:
        return self.grid_size * self.grid_size

    def validate(self):
        c = self.num_cells
        if self.probs.data.shape != (c,) or self.raw_params.data.shape != (c, 4):
            raise ValueError(
                f"grid shapes {self.probs.shape}, {self.raw_params.shape} do not match C={c}")
        total = float(self.probs.data.sum())
        if abs(total - 1.0) > 1e-5 or self.probs.data.min() < 0:
            raise ValueError(f"probs must be a distribution, sum={total}")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-x)), np.exp(x) / (1.0 + np.exp(x)))


def decode_boxes(raw_params: np.ndarray, grid_size: int) -> np.ndarray:
    """Vectorized decode of all C cells; returns (C, 4) rows (cx, cy, w, h)."""
    g = grid_size
    raw = np.asarray(raw_params, dtype=np.float64)
    if raw.shape != (g * g, 4):
        raise ValueError(f"raw_params shape {raw.shape} does not match grid {g}")
    rows, cols = np.divmod(np.arange(g * g), g)
    ax = (cols + 0.5) / g
    ay = (rows + 0.5) / g
    off = np.clip(np.tanh(raw[:, 0:2]) * OFFSET_LIMIT_CELLS, -OFFSET_LIMIT_CELLS, OFFSET_LIMIT_CELLS) / g
    cx = np.clip(ax + off[:, 0], 0.0, 1.0)
    cy = np.clip(ay + off[:, 1], 0.0, 1.0)
    wh = SIZE_MIN + _sigmoid(raw[:, 2:4]) * (SIZE_MAX - SIZE_MIN)
    return np.stack([cx, cy, wh[:, 0], wh[:, 1]], axis=1)


def decode_box(cell_index: int, raw_params: np.ndarray, grid_size: int) -> BBox:
    """Decode one cell's raw parameters (4,) into a BBox."""
    g = grid_size
    if not 0 <= cell_index < g * g:
        raise ValueError(f"cell_index {cell_index} outside [0, {g * g})")
    raw = np.asarray(raw_params, dtype=np.float64).reshape(4)
    r, c = divmod(int(cell_index), g)
    ax, ay = (c + 0.5) / g, (r + 0.5) / g
    offx = float(np.clip(np.tanh(raw[0]) * OFFSET_LIMIT_CELLS, -OFFSET_LIMIT_CELLS, OFFSET_LIMIT_CELLS)) / g
    offy = float(np.clip(np.tanh(raw[1]) * OFFSET_LIMIT_CELLS, -OFFSET_LIMIT_CELLS, OFFSET_LIMIT_CELLS)) / g
    cx = float(np.clip(ax + offx, 0.0, 1.0))
    cy = float(np.clip(ay + offy, 0.0, 1.0))
    w = float(SIZE_MIN + _sigmoid(raw[2]) * (SIZE_MAX - SIZE_MIN))
    h = float(SIZE_MIN + _sigmoid(raw[3]) * (SIZE_MAX - SIZE_MIN))
    return BBox(cx, cy, w, h)


def decode_box_tensor(cell_index: int, raw_params: Tensor, grid_size: int) -> Tensor:
    """Differentiable decode of one cell; returns a (4,) box tensor."""
    g = grid_size
    if not 0 <= cell_index < g * g:
        raise ValueError(f"cell_index {cell_index} outside [0, {g * g})")
    r, c = divmod(int(cell_index), g)
    ax, ay = (c + 0.5) / g, (r + 0.5) / g
    row = raw_params[int(cell_index)]
    offx = (row[0:1].tanh() * OFFSET_LIMIT_CELLS).clip(-OFFSET_LIMIT_CELLS, OFFSET_LIMIT_CELLS) * (1.0 / g)
    offy = (row[1:2].tanh() * OFFSET_LIMIT_CELLS).clip(-OFFSET_LIMIT_CELLS, OFFSET_LIMIT_CELLS) * (1.0 / g)
    cx = (offx + ax).clip(0.0, 1.0)
    cy = (offy + ay).clip(0.0, 1.0)
    w = row[2:3].sigmoid() * (SIZE_MAX - SIZE_MIN) + SIZE_MIN
    h = row[3:4].sigmoid() * (SIZE_MAX - SIZE_MIN) + SIZE_MIN
    return concat([cx, cy, w, h], axis=0)


def select_argmax(grid: ProposalGrid) -> tuple[BBox, float]:
    """Decoded box of the highest-probability cell; ties go to the lowest index."""
    probs = grid.probs.data
    idx = int(np.argmax(probs))
    box = decode_box(idx, grid.raw_params.data[idx], grid.grid_size)
    return box, float(probs[idx])


class Detector(Module):
    """Backbone plus probability and box heads over a G x G cell grid.

    Expects (N, in_channels, S, S) images with S = grid_size * 16. Heads
    start at zero so the initial distribution is uniform and every box
    sits at its anchor with midpoint size.
    """

    CHANNELS = (16, 32, 64, 64)

    def __init__(self, rng: np.random.Generator, grid_size: int = 8, in_channels: int = 3):
        super().__init__()
        self.grid_size = grid_size
        self.in_channels = in_channels
        cin = in_channels
        for i, cout in enumerate(self.CHANNELS):
            self.add_module(f"block{i}", Conv2d(rng, cin, cout, k=3, stride=2, padding=1))
            cin = cout
        prob_head = Conv2d(rng, cin, 1, k=1, stride=1, padding=0)
        box_head = Conv2d(rng, cin, 4, k=1, stride=1, padding=0)
        for head in (prob_head, box_head):
            head.w.data[:] = 0.0
        self.add_module("prob_head", prob_head)
        self.add_module("box_head", box_head)

    @property
    def image_size(self) -> int:
        return self.grid_size * BACKBONE_STRIDE

    def backbone(self, x: Tensor) -> Tensor:
        h = x
        for i in range(len(self.CHANNELS)):
            h = self._modules[f"block{i}"](h).leaky_relu(0.1)
        return h

    def forward(self, images: Tensor) -> list[ProposalGrid]:
        """Run the detector on a batch; returns one ProposalGrid per image."""
        if images.data.ndim != 4 or images.data.shape[1] != self.in_channels:
            raise ValueError(
                f"detector expects (N, {self.in_channels}, S, S) images, got {images.shape}")
        s = images.data.shape[2]
        if images.data.shape[3] != s or s != self.image_size:
            raise ValueError(
                f"detector expects square {self.image_size}px images for grid {self.grid_size}, "
                f"got {images.shape}")
        n = images.data.shape[0]
        c = self.grid_size * self.grid_size
        feat = self.backbone(images)
        logits = self._modules["prob_head"](feat).reshape(n, c)
        probs = logits.softmax(axis=-1)
        raw = self._modules["box_head"](feat).transpose(0, 2, 3, 1).reshape(n, c, 4)
        return [ProposalGrid(self.grid_size, probs[i], raw[i], logits[i]) for i in range(n)]

    __call__ = forward


class SingleBoxDetector(Module):
    """Backbone with one pooled regression head instead of the cell grid.

    Emits four raw parameters per image: the center comes from sigmoids
    over the whole frame, the sides use the usual size range. No selection
    distribution exists, so there is nothing to sample from.
    """

    CHANNELS = Detector.CHANNELS

    def __init__(self, rng: np.random.Generator, grid_size: int = 8, in_channels: int = 3):
        super().__init__()
        self.grid_size = grid_size
        self.in_channels = in_channels
        cin = in_channels
        for i, cout in enumerate(self.CHANNELS):
            self.add_module(f"block{i}", Conv2d(rng, cin, cout, k=3, stride=2, padding=1))
            cin = cout
        head = Conv2d(rng, cin, 4, k=1, stride=1, padding=0)
        head.w.data[:] = 0.0
        self.add_module("box_head", head)

    @property
    def image_size(self) -> int:
        return self.grid_size * BACKBONE_STRIDE

    def forward(self, images: Tensor) -> Tensor:
        """Returns raw box parameters, one (4,) row per image."""
        if images.data.ndim != 4 or images.data.shape[2] != self.image_size:
            raise ValueError(
                f"regressor expects (N, {self.in_channels}, {self.image_size}, "
                f"{self.image_size}) images, got {images.shape}")
        h = images
        for i in range(len(self.CHANNELS)):
            h = self._modules[f"block{i}"](h).leaky_relu(0.1)
        n = h.data.shape[0]
        return self._modules["box_head"](h).mean(axis=(2, 3)).reshape(n, 4)

    __call__ = forward


def decode_direct_tensor(raw_row: Tensor) -> Tensor:
    """Differentiable decode of one (4,) regression row into a box tensor."""
    cx = raw_row[0:1].sigmoid()
    cy = raw_row[1:2].sigmoid()
    w = raw_row[2:3].sigmoid() * (SIZE_MAX - SIZE_MIN) + SIZE_MIN
    h = raw_row[3:4].sigmoid() * (SIZE_MAX - SIZE_MIN) + SIZE_MIN
    return concat([cx, cy, w, h], axis=0)


def decode_direct(raw_row: np.ndarray) -> BBox:
    """Numpy twin of decode_direct_tensor."""
    raw = np.asarray(raw_row, dtype=np.float64).reshape(4)
    return BBox(float(_sigmoid(raw[0])), float(_sigmoid(raw[1])),
                float(SIZE_MIN + _sigmoid(raw[2]) * (SIZE_MAX - SIZE_MIN)),
                float(SIZE_MIN + _sigmoid(raw[3]) * (SIZE_MAX - SIZE_MIN)))
