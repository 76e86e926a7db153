"""Reconstruction loss, the two training objectives, and prior terms.

A training step runs in two phases. The sampling phase needs no gradients:
it draws one candidate cell per image, erases the decoded box, inpaints the
hole, and scores how well the inpainted background explains the erased
pixels. The differentiable phase then assembles the scalar loss so that the
background term can only move the probability head while the foreground
term can only move the box head and the segmenter.
"""

from dataclasses import dataclass

import numpy as np

from .autodiff import functional as F
from .autodiff.nn import he_normal
from .autodiff.tensor import Tensor, constant, no_grad
from .estimator import SampleDraw, distribution_entropy, draw_candidate
from .inpainter import ERASE_SCALE, erase, inpaint_image
from .proposal import ProposalGrid, decode_box, decode_box_tensor
from .transformer import BBox, composite, crop

PIXEL_WEIGHT = 1.0
PERCEPTUAL_WEIGHT = 2.0
# Prior strengths are calibrated against the magnitudes the reconstruction
# terms actually reach on the synthetic corpora (~1e-2). The size prior is
# deliberately strong: it anchors box sides near the decode midpoint, which
# is the only pressure against hole-growth feedback (larger holes inpaint
# worse, so unconstrained sizes inflate). Offsets and cell scores carry only
# a light pull so that localization can actually move them.
PRIOR_LOGITS = 0.001
PRIOR_BOX_OFFSET = 0.01
PRIOR_BOX_SIZE = 1.0
PRIOR_MASK = 0.001

# Transition width of the differentiable scoring region, in 1/pixels.
SOFT_REGION_SHARPNESS = 2.0

MODES = ("default", "uniform-q", "no-routing", "bg-only")

_FEATURE_CHANNELS = 8
_FEATURE_SEED = 91021


class _RandomFeatures:
    """Frozen random conv features scoring image structure at two scales.

    Weights come from a constant seed so the loss is the same function in
    every run; they are never trained. Gradients still flow through to the
    compared images.
    """

    def __init__(self):
        rng = np.random.default_rng(_FEATURE_SEED)
        c = _FEATURE_CHANNELS
        self._w1 = he_normal(rng, (c, 3, 3, 3), fan_in=27, dtype=np.float64)
        self._w2 = he_normal(rng, (c, c, 3, 3), fan_in=c * 9, dtype=np.float64)
        self._cache: dict[str, tuple[np.ndarray, np.ndarray]] = {}

    def _weights(self, dtype) -> tuple[np.ndarray, np.ndarray]:
        key = np.dtype(dtype).str
        if key not in self._cache:
            self._cache[key] = (self._w1.astype(dtype), self._w2.astype(dtype))
        return self._cache[key]

    def __call__(self, x: Tensor) -> tuple[Tensor, Tensor]:
        w1, w2 = self._weights(x.dtype)
        f1 = F.conv2d(x, constant(w1), stride=1, padding=1).leaky_relu(0.2)
        f2 = F.conv2d(_avg_pool2(f1), constant(w2), stride=1, padding=1).leaky_relu(0.2)
        return f1, f2


_features: _RandomFeatures | None = None


def _get_features() -> _RandomFeatures:
    global _features
    if _features is None:
        _features = _RandomFeatures()
    return _features


def _avg_pool2(x: Tensor) -> Tensor:
    n, c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise ValueError(f"pooling needs even sides, got {x.shape}")
    return x.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))


def _lift_region(region, n: int, h: int, w: int, dtype) -> Tensor:
    if not isinstance(region, Tensor):
        region = constant(np.asarray(region, dtype=dtype))
    if region.data.ndim == 3 and n == 1:
        region = region.reshape(1, *region.data.shape)
    if region.data.shape != (n, 1, h, w):
        raise ValueError(
            f"region shape {region.data.shape} does not match images (N={n}, H={h}, W={w})")
    if float(region.data.sum()) <= 0.0:
        raise ValueError("region selects no pixels")
    return region


def _weighted_mse(a: Tensor, b: Tensor, region: Tensor | None) -> Tensor:
    diff = (a - b).square()
    if region is None:
        return diff.mean()
    channels = a.data.shape[1]
    return (diff * region).sum() / (region.sum() * float(channels))


def recon_terms(a: Tensor, b: Tensor, region=None) -> tuple[Tensor, Tensor]:
    """Pixel and perceptual residual terms between (N, 3, H, W) images.

    Both are means over the scoring region (the whole frame when ``region``
    is None), so shrinking the region without changing per-pixel residuals
    leaves them unchanged. ``region`` may be a constant array or a tensor;
    a tensor region stays on the gradient path.
    """
    if a.data.shape != b.data.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.data.ndim != 4 or a.data.shape[1] != 3:
        raise ValueError(f"expected (N, 3, H, W) images, got {a.shape}")
    n, _, h, w = a.data.shape
    if region is not None:
        region = _lift_region(region, n, h, w, a.dtype)
    pixel = _weighted_mse(a, b, region)

    feats = _get_features()
    fa = feats(a)
    fb = feats(b)
    reg = region
    perceptual = None
    for sa, sb in zip(fa, fb):
        if reg is not None and reg.data.shape[2] != sa.data.shape[2]:
            reg = _avg_pool2(reg)
        term = _weighted_mse(sa, sb, reg)
        perceptual = term if perceptual is None else perceptual + term
    perceptual = perceptual * (1.0 / len(fa))
    return pixel, perceptual


def recon_loss(a: Tensor, b: Tensor, region=None) -> Tensor:
    """Scalar reconstruction error: pixel and perceptual terms weighted 1:2."""
    pixel, perceptual = recon_terms(a, b, region)
    return pixel * PIXEL_WEIGHT + perceptual * PERCEPTUAL_WEIGHT


@dataclass
class StepBundle:
    """Per-image constants fixed by the sampling phase.

    Everything here is held at its sampled value during the differentiable
    phase; that freeze is what routes the background term away from the box
    head and the foreground weight away from the probability head.
    """

    draw: SampleDraw
    box: BBox               # decoded box of the drawn cell
    bhat: np.ndarray        # (3, H, W) true pixels outside the hole, inpainted inside
    erase_mask: np.ndarray  # (1, H, W) binary
    loss_bg: float          # reconstruction error of bhat over the erased pixels


def background_estimate(image: np.ndarray, box: BBox, inpainter,
                        override: np.ndarray | None = None
                        ) -> tuple[np.ndarray, np.ndarray, float]:
    """Erase the scaled box, fill the hole, and score the fill.

    Returns (bhat, erase mask, background error): bhat keeps the true
    pixels outside the hole and takes the inpainter's prediction (or the
    ``override`` plate) inside it. The error is the reconstruction loss of
    bhat against the image over the erased pixels only.
    """
    if override is not None:
        _, mask = erase(image, box, ERASE_SCALE)
        pred = override.astype(image.dtype, copy=False)
    else:
        pred, mask = inpaint_image(inpainter, image, box, ERASE_SCALE)
    bhat = (image * (1.0 - mask) + pred * mask).astype(image.dtype, copy=False)
    with no_grad():
        lbg = recon_loss(constant(bhat[None]), constant(image[None]),
                         region=mask[None]).item()
    return bhat, mask, float(lbg)


def prepare_step(images: np.ndarray, grids: list[ProposalGrid], inpainter,
                 epsilon: float, rng: np.random.Generator,
                 uniform_q: bool = False, background_override=None) -> list[StepBundle]:
    """Sampling phase: one draw, erase, inpaint, and background score per image.

    ``background_override`` (N, 3, H, W) substitutes a known clean plate for
    the inpainter's prediction inside the hole; the inpainter may then be
    None.
    """
    if images.ndim != 4 or images.shape[0] != len(grids):
        raise ValueError(
            f"images {images.shape} do not match {len(grids)} proposal grids")
    bundles = []
    for i, grid in enumerate(grids):
        img = images[i]
        draw = draw_candidate(grid.probs.data, epsilon, rng, uniform=uniform_q)
        box = decode_box(draw.index, grid.raw_params.data[draw.index], grid.grid_size)
        plate = None if background_override is None else background_override[i]
        bhat, mask, lbg = background_estimate(img, box, inpainter, override=plate)
        bundles.append(StepBundle(draw, box, bhat, mask, lbg))
    return bundles


def foreground_objective(image: Tensor, grid: ProposalGrid, bundle: StepBundle,
                         seg, crop_res: int = 32,
                         live_ratio: bool = False) -> tuple[Tensor, Tensor]:
    """Autoencoding term for one image; returns (weighted loss, soft mask).

    The drawn cell's box is decoded on the live graph, the crop is encoded
    and decoded by the segmenter, and the composite of foreground over the
    fixed background estimate is compared against the input over the whole
    frame. The importance ratio enters as a plain number, so this term
    reaches only the box head and the segmenter. ``live_ratio`` keeps the
    ratio on the graph instead (the joint-training ablation).
    """
    box_t = decode_box_tensor(bundle.draw.index, grid.raw_params, grid.grid_size)
    patch = crop(image, box_t, out_res=crop_res)
    fg, mask = seg(patch)
    background = constant(bundle.bhat[None])
    out = composite(fg, mask, box_t, background)
    loss = recon_loss(out, image)
    if live_ratio:
        ratio = grid.probs[bundle.draw.index] * (1.0 / bundle.draw.q_prob)
        return ratio * loss, mask
    return loss * bundle.draw.weight, mask


def soft_region(box_t: Tensor, height: int, width: int,
                scale: float = ERASE_SCALE,
                sharpness: float = SOFT_REGION_SHARPNESS) -> Tensor:
    """Differentiable (1, 1, H, W) window over the scaled box.

    Sigmoid edges stand in for the hard erase rectangle when an ablation
    needs gradients from the background score into the box parameters.
    """
    dtype = box_t.dtype
    xs = constant((np.arange(width, dtype=dtype) + 0.5).reshape(1, width))
    ys = constant((np.arange(height, dtype=dtype) + 0.5).reshape(height, 1))
    cx = box_t[0:1] * float(width)
    cy = box_t[1:2] * float(height)
    half_w = box_t[2:3] * (0.5 * scale * width)
    half_h = box_t[3:4] * (0.5 * scale * height)
    rx = ((xs - (cx - half_w)) * sharpness).sigmoid() \
        * (((cx + half_w) - xs) * sharpness).sigmoid()
    ry = ((ys - (cy - half_h)) * sharpness).sigmoid() \
        * (((cy + half_h) - ys) * sharpness).sigmoid()
    return (rx * ry).reshape(1, 1, height, width)


def background_objective(grid: ProposalGrid, bundle: StepBundle,
                         image: Tensor | None = None,
                         soft_box: bool = False) -> Tensor:
    """Negative expected background error for one image.

    The drawn candidate's live probability is reweighted by the fixed
    sampling probability and multiplied by the fixed background score, so
    gradients reach only the probability head. With ``soft_box`` the score
    is recomputed over a differentiable window that follows the live box
    (used by the joint-training and background-only ablations; the
    inpainted canvas itself stays fixed).
    """
    p_live = grid.probs[bundle.draw.index]
    if not soft_box:
        return p_live * (-bundle.loss_bg / bundle.draw.q_prob)
    if image is None:
        raise ValueError("soft_box scoring needs the input image")
    h, w = bundle.bhat.shape[1:]
    box_t = decode_box_tensor(bundle.draw.index, grid.raw_params, grid.grid_size)
    region = soft_region(box_t, h, w)
    lbg = recon_loss(constant(bundle.bhat[None]), image, region=region)
    return p_live * lbg * (-1.0 / bundle.draw.q_prob)


def prior_terms(grid: ProposalGrid, mask: Tensor | None = None) -> Tensor:
    """Squared penalties on head outputs plus an absolute penalty on the mask.

    The box penalty is split by column: size parameters (columns 2:) are
    anchored hard, center offsets (columns :2) only lightly.
    """
    if grid.logits is None:
        raise ValueError("proposal grid carries no logits; priors need the raw scores")
    raw = grid.raw_params
    term = grid.logits.square().mean() * PRIOR_LOGITS \
        + raw[:, :2].square().mean() * PRIOR_BOX_OFFSET \
        + raw[:, 2:].square().mean() * PRIOR_BOX_SIZE
    if mask is not None:
        term = term + mask.abs().mean() * PRIOR_MASK
    return term


def total_step_loss(images: np.ndarray, grids: list[ProposalGrid],
                    bundles: list[StepBundle], seg, crop_res: int = 32,
                    mode: str = "default") -> tuple[Tensor, dict]:
    """Batch-mean training loss and its per-component breakdown.

    Modes: "default" and "uniform-q" share this assembly (they differ only
    in how the bundles were sampled); "no-routing" keeps both gradient
    paths live; "bg-only" drops the foreground term entirely.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    n = len(grids)
    if len(bundles) != n or images.shape[0] != n:
        raise ValueError(f"batch size mismatch: {images.shape[0]} images, "
                         f"{n} grids, {len(bundles)} bundles")
    soft = mode in ("no-routing", "bg-only")
    live = mode == "no-routing"
    inv = 1.0 / float(n)
    fg_sum = bg_sum = prior_sum = None
    entropy = 0.0
    for i in range(n):
        img = constant(images[i][None])
        mask_t = None
        if mode != "bg-only":
            o_term, mask_t = foreground_objective(
                img, grids[i], bundles[i], seg, crop_res=crop_res, live_ratio=live)
            fg_sum = o_term if fg_sum is None else fg_sum + o_term
        g_term = background_objective(grids[i], bundles[i], image=img, soft_box=soft)
        bg_sum = g_term if bg_sum is None else bg_sum + g_term
        p_term = prior_terms(grids[i], mask_t)
        prior_sum = p_term if prior_sum is None else prior_sum + p_term
        entropy += distribution_entropy(grids[i].probs.data)

    loss_bg = bg_sum * inv
    loss_prior = prior_sum * inv
    if fg_sum is None:
        total = loss_bg + loss_prior
        fg_value = 0.0
    else:
        loss_fg = fg_sum * inv
        total = loss_fg + loss_bg + loss_prior
        fg_value = float(loss_fg.data)
    stats = {
        "loss_total": float(total.data),
        "loss_fg": fg_value,
        "loss_bg": float(loss_bg.data),
        "loss_prior": float(loss_prior.data),
        "entropy": entropy * inv,
        "drawn_cell": bundles[0].draw.index,
    }
    return total, stats
