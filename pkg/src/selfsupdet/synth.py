"""Procedural scene generator with exact ground truth.

Each sequence owns one background canvas (rendered larger than the frame),
a camera track that windows into it, and one sprite that drifts along a
smooth random walk. Backgrounds are smooth or periodic, so a masked patch
is predictable from its surroundings; sprites take colors at least 0.2
mean RGB away from the background so they are not. Sprite alpha is binary,
which makes the stored mask, its tight box, and the composited pixels
mutually exact. Ground truth is for evaluation only.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, replace

import numpy as np
from PIL import Image

from .transformer import BBox

BACKGROUND_FAMILIES = ("gradient", "checker", "value-noise", "composite")
CAMERA_MODELS = ("static", "ptz", "handheld")
SPRITE_FAMILIES = ("blob", "polygon", "textured")

# sprite colors must sit at least this far (mean abs RGB) from the
# background's mean color so foreground stays unpredictable from context
MIN_PALETTE_DISTANCE = 0.2

HANDHELD_MAX_SHIFT = 0.05  # translation bound, fraction of image width
PTZ_MAX_DRIFT = 0.15
PTZ_MAX_ZOOM = 0.08


def _walk_margin(radius: float) -> float:
    # blob wobble can reach 1.45x the base radius; keep the whole sprite inside
    return 1.5 * radius + 2.0


@dataclass(frozen=True)
class SceneSpec:
    """Recipe for one family of sequences; seed makes it reproducible."""

    width: int = 128
    height: int = 128
    background: str = "composite"
    camera: str = "static"
    sprite: str = "blob"
    scale_range: tuple[float, float] = (0.15, 0.4)
    distractor_strength: float = 0.0
    seed: int = 0

    def validate(self):
        if self.background not in BACKGROUND_FAMILIES:
            raise ValueError(f"unknown background family {self.background!r}")
        if self.camera not in CAMERA_MODELS:
            raise ValueError(f"unknown camera model {self.camera!r}")
        if self.sprite not in SPRITE_FAMILIES:
            raise ValueError(f"unknown sprite family {self.sprite!r}")
        lo, hi = self.scale_range
        if not (0.0 < lo <= hi < 1.0):
            raise ValueError(f"scale range {self.scale_range} must lie inside (0, 1)")
        if min(self.width, self.height) < 64 or self.width % 8 or self.height % 8:
            raise ValueError(
                f"image size {self.width}x{self.height} must be >= 64 and a multiple of 8")
        if 2 * _walk_margin(hi * min(self.width, self.height) / 2.0) >= min(self.width, self.height):
            raise ValueError(f"sprite scale {hi} cannot fit inside {self.width}x{self.height}")


@dataclass
class SceneSample:
    """One labeled frame; images are float32 HWC in [0, 1]."""

    image: np.ndarray             # (H, W, 3)
    gt_box: BBox
    gt_mask: np.ndarray           # (H, W) bool
    clean_background: np.ndarray  # (H, W, 3)
    frame: int
    sequence: int


# -- background canvases --------------------------------------------------------


def _value_noise(rng: np.random.Generator, h: int, w: int, cells: int,
                 channels: int = 3) -> np.ndarray:
    """Bilinearly upsampled random lattice: smooth blotches in [0, 1]."""
    coarse = rng.uniform(0.0, 1.0, size=(cells + 1, cells + 1, channels))
    ys = np.linspace(0.0, cells, h)
    xs = np.linspace(0.0, cells, w)
    y0 = np.minimum(ys.astype(int), cells - 1)
    x0 = np.minimum(xs.astype(int), cells - 1)
    fy = (ys - y0)[:, None, None]
    fx = (xs - x0)[None, :, None]
    c00 = coarse[y0][:, x0]
    c01 = coarse[y0][:, x0 + 1]
    c10 = coarse[y0 + 1][:, x0]
    c11 = coarse[y0 + 1][:, x0 + 1]
    return (c00 * (1 - fy) * (1 - fx) + c01 * (1 - fy) * fx
            + c10 * fy * (1 - fx) + c11 * fy * fx)


def _gradient_canvas(rng, h, w):
    c0 = rng.uniform(0.1, 0.9, size=3)
    c1 = rng.uniform(0.1, 0.9, size=3)
    theta = rng.uniform(0.0, 2 * np.pi)
    ys, xs = np.mgrid[0:h, 0:w]
    t = (xs * np.cos(theta) + ys * np.sin(theta))
    t = (t - t.min()) / max(np.ptp(t), 1e-9)
    return c0[None, None, :] * (1 - t[:, :, None]) + c1[None, None, :] * t[:, :, None]


def _checker_canvas(rng, h, w, base_cell: int):
    c0 = rng.uniform(0.1, 0.9, size=3)
    c1 = rng.uniform(0.1, 0.9, size=3)
    cell = int(base_cell * rng.uniform(0.75, 1.5))
    ys, xs = np.mgrid[0:h, 0:w]
    parity = ((ys // cell) + (xs // cell)) % 2
    return np.where(parity[:, :, None] == 0, c0[None, None, :], c1[None, None, :])


def render_background_canvas(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    """Canvas at twice the frame size so camera warps never leave it."""
    h = 2 * spec.height
    w = 2 * spec.width
    base_cell = max(spec.width // 8, 8)
    if spec.background == "gradient":
        canvas = _gradient_canvas(rng, h, w)
    elif spec.background == "checker":
        canvas = _checker_canvas(rng, h, w, base_cell)
    elif spec.background == "value-noise":
        canvas = 0.15 + 0.7 * _value_noise(rng, h, w, cells=6)
    else:  # composite
        canvas = _gradient_canvas(rng, h, w)
        canvas = 0.55 * canvas + 0.25 * _checker_canvas(rng, h, w, base_cell) \
            + 0.20 * _value_noise(rng, h, w, cells=6)
    if spec.distractor_strength > 0.0:
        fine = _value_noise(rng, h, w, cells=max(h // 4, 2))
        canvas = canvas + spec.distractor_strength * 0.15 * (fine - 0.5)
    return np.clip(canvas, 0.0, 1.0)


# -- camera ----------------------------------------------------------------------


def camera_track(spec: SceneSpec, n_frames: int, rng: np.random.Generator) -> np.ndarray:
    """Per-frame (dx, dy, angle, zoom) of the window into the canvas.

    dx, dy are offsets in pixels from the canvas center; static keeps them
    zero, ptz follows smooth sinusoidal drifts, handheld applies bounded
    jitter (translation magnitude <= 5% of image width).
    """
    track = np.zeros((n_frames, 4))
    track[:, 3] = 1.0
    t = np.arange(n_frames)
    if spec.camera == "static":
        return track
    if spec.camera == "ptz":
        amp = PTZ_MAX_DRIFT * spec.width
        periods = rng.uniform(24.0, 48.0, size=4)
        phases = rng.uniform(0.0, 2 * np.pi, size=4)
        track[:, 0] = amp * np.sin(2 * np.pi * t / periods[0] + phases[0])
        track[:, 1] = amp * np.sin(2 * np.pi * t / periods[1] + phases[1])
        track[:, 2] = np.deg2rad(2.0) * np.sin(2 * np.pi * t / periods[2] + phases[2])
        track[:, 3] = 1.0 + PTZ_MAX_ZOOM * np.sin(2 * np.pi * t / periods[3] + phases[3])
        return track
    # handheld: AR(1) jitter, hard-clipped to the documented bound
    max_shift = HANDHELD_MAX_SHIFT * spec.width
    shift = np.zeros(2)
    angle = 0.0
    for k in range(n_frames):
        shift = 0.7 * shift + rng.normal(0.0, 0.35 * max_shift, size=2)
        norm = np.hypot(shift[0], shift[1])
        if norm > max_shift:
            shift = shift * (max_shift / norm)
        angle = 0.7 * angle + rng.normal(0.0, np.deg2rad(0.6))
        angle = float(np.clip(angle, -np.deg2rad(1.5), np.deg2rad(1.5)))
        track[k, 0], track[k, 1], track[k, 2] = shift[0], shift[1], angle
    return track


def _warp_canvas(canvas: np.ndarray, spec: SceneSpec, cam: np.ndarray) -> np.ndarray:
    """Sample the frame window (dx, dy, angle, zoom) out of the canvas."""
    h, w = spec.height, spec.width
    ch, cw = canvas.shape[:2]
    dx, dy, ang, zoom = cam
    ys, xs = np.mgrid[0:h, 0:w]
    rx = (xs + 0.5) - w / 2.0
    ry = (ys + 0.5) - h / 2.0
    ca, sa = np.cos(ang), np.sin(ang)
    sx = cw / 2.0 + dx + zoom * (ca * rx - sa * ry) - 0.5
    sy = ch / 2.0 + dy + zoom * (sa * rx + ca * ry) - 0.5
    x0 = np.clip(np.floor(sx).astype(int), 0, cw - 2)
    y0 = np.clip(np.floor(sy).astype(int), 0, ch - 2)
    fx = np.clip(sx - x0, 0.0, 1.0)[:, :, None]
    fy = np.clip(sy - y0, 0.0, 1.0)[:, :, None]
    c00 = canvas[y0, x0]
    c01 = canvas[y0, x0 + 1]
    c10 = canvas[y0 + 1, x0]
    c11 = canvas[y0 + 1, x0 + 1]
    return (c00 * (1 - fy) * (1 - fx) + c01 * (1 - fy) * fx
            + c10 * fy * (1 - fx) + c11 * fy * fx)


# -- sprites ---------------------------------------------------------------------


def _pick_sprite_colors(rng, canvas_mean: np.ndarray, count: int) -> np.ndarray:
    colors = []
    while len(colors) < count:
        c = rng.uniform(0.0, 1.0, size=3)
        if np.mean(np.abs(c - canvas_mean)) >= MIN_PALETTE_DISTANCE:
            colors.append(c)
    return np.array(colors)


@dataclass
class _SpriteDef:
    kind: str
    radius: float            # base radius in pixels
    colors: np.ndarray       # (k, 3)
    blob_amps: np.ndarray
    blob_phases: np.ndarray
    poly_angles: np.ndarray
    poly_radii: np.ndarray
    stripe_freq: float
    spin: float              # radians per frame


def _make_sprite(spec: SceneSpec, rng, canvas_mean) -> _SpriteDef:
    scale = rng.uniform(*spec.scale_range)
    radius = scale * min(spec.width, spec.height) / 2.0
    colors = _pick_sprite_colors(rng, canvas_mean, 2)
    amps = rng.uniform(0.02, 0.15, size=3)
    phases = rng.uniform(0.0, 2 * np.pi, size=3)
    k = int(rng.integers(5, 9))
    angles = np.sort(rng.uniform(0.0, 2 * np.pi, size=k))
    radii = radius * rng.uniform(0.6, 1.0, size=k)
    return _SpriteDef(
        kind=spec.sprite, radius=radius, colors=colors, blob_amps=amps,
        blob_phases=phases, poly_angles=angles, poly_radii=radii,
        stripe_freq=rng.uniform(0.5, 1.2), spin=rng.uniform(-0.05, 0.05))


def _rasterize_sprite(sprite: _SpriteDef, cx: float, cy: float, rot: float,
                      h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    """Binary alpha plus RGB at pixel centers for a sprite at (cx, cy) px."""
    ys, xs = np.mgrid[0:h, 0:w]
    dx = (xs + 0.5) - cx
    dy = (ys + 0.5) - cy
    if sprite.kind == "polygon":
        vx = cx + sprite.poly_radii * np.cos(sprite.poly_angles + rot)
        vy = cy + sprite.poly_radii * np.sin(sprite.poly_angles + rot)
        inside = np.zeros((h, w), dtype=bool)
        px = xs + 0.5
        py = ys + 0.5
        k = len(vx)
        for i in range(k):  # even-odd ray casting
            x1, y1 = vx[i], vy[i]
            x2, y2 = vx[(i + 1) % k], vy[(i + 1) % k]
            crosses = (y1 > py) != (y2 > py)
            with np.errstate(divide="ignore", invalid="ignore"):
                xint = x1 + (x2 - x1) * (py - y1) / (y2 - y1)
            inside ^= crosses & (px < xint)
        alpha = inside
    else:
        rho = np.hypot(dx, dy)
        theta = np.arctan2(dy, dx) - rot
        wobble = sum(a * np.cos((k + 2) * theta + p)
                     for k, (a, p) in enumerate(zip(sprite.blob_amps, sprite.blob_phases)))
        alpha = rho <= sprite.radius * (1.0 + wobble)
    if sprite.kind == "textured":
        ca, sa = np.cos(rot), np.sin(rot)
        u = (ca * dx + sa * dy) / sprite.radius
        stripes = np.sin(2 * np.pi * sprite.stripe_freq * u) > 0
        rgb = np.where(stripes[:, :, None], sprite.colors[0][None, None, :],
                       sprite.colors[1][None, None, :])
    else:
        rgb = np.broadcast_to(sprite.colors[0][None, None, :], (h, w, 3))
    return alpha, rgb


def _tight_box(mask: np.ndarray) -> BBox:
    ys, xs = np.nonzero(mask)
    h, w = mask.shape
    x0, x1 = xs.min(), xs.max() + 1
    y0, y1 = ys.min(), ys.max() + 1
    return BBox(cx=(x0 + x1) / (2 * w), cy=(y0 + y1) / (2 * h),
                w=(x1 - x0) / w, h=(y1 - y0) / h)


def _sprite_walk(spec: SceneSpec, sprite: _SpriteDef, n_frames: int,
                 rng: np.random.Generator) -> np.ndarray:
    """Smooth reflecting random walk keeping the sprite fully inside."""
    margin = _walk_margin(sprite.radius)
    lox, hix = margin, spec.width - margin
    loy, hiy = margin, spec.height - margin
    if lox >= hix or loy >= hiy:
        raise ValueError(f"sprite radius {sprite.radius:.1f}px cannot fit inside the image")
    pos = np.array([rng.uniform(lox, hix), rng.uniform(loy, hiy)])
    vel = rng.normal(0.0, 0.02 * spec.width, size=2)
    out = np.zeros((n_frames, 2))
    for k in range(n_frames):
        out[k] = pos
        vel = 0.9 * vel + rng.normal(0.0, 0.01 * spec.width, size=2)
        pos = pos + vel
        for axis, (lo, hi) in enumerate(((lox, hix), (loy, hiy))):
            if pos[axis] < lo:
                pos[axis] = 2 * lo - pos[axis]
                vel[axis] = -vel[axis]
            elif pos[axis] > hi:
                pos[axis] = 2 * hi - pos[axis]
                vel[axis] = -vel[axis]
    return out


# -- sequence assembly -----------------------------------------------------------


def generate_sequence(spec: SceneSpec, n_frames: int, sequence_id: int = 0) -> list[SceneSample]:
    """Render one coherent sequence; deterministic in (spec, sequence_id)."""
    spec.validate()
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    rng = np.random.default_rng(spec.seed + sequence_id)
    canvas = render_background_canvas(spec, rng)
    track = camera_track(spec, n_frames, rng)
    sprite = _make_sprite(spec, rng, canvas.mean(axis=(0, 1)))
    walk = _sprite_walk(spec, sprite, n_frames, rng)
    samples = []
    for k in range(n_frames):
        background = _warp_canvas(canvas, spec, track[k]).astype(np.float32)
        alpha, rgb = _rasterize_sprite(sprite, walk[k, 0], walk[k, 1],
                                       sprite.spin * k, spec.height, spec.width)
        image = background.copy()
        image[alpha] = rgb[alpha].astype(np.float32)
        samples.append(SceneSample(
            image=image, gt_box=_tight_box(alpha), gt_mask=alpha,
            clean_background=background, frame=k, sequence=sequence_id))
    return samples


def generate_dataset(spec: SceneSpec, n_sequences: int, frames_per_sequence: int) -> list[SceneSample]:
    """Concatenate sequences with per-sequence seeds spec.seed + id."""
    out = []
    for sid in range(n_sequences):
        out.extend(generate_sequence(spec, frames_per_sequence, sequence_id=sid))
    return out


def _mask_gap(a: np.ndarray, b: np.ndarray) -> float:
    """Smallest normalized distance between two masks' boundary pixels."""
    scale = float(min(a.shape))
    pts = []
    for mask in (a, b):
        core = mask & np.roll(mask, 1, 0) & np.roll(mask, -1, 0) \
            & np.roll(mask, 1, 1) & np.roll(mask, -1, 1)
        ys, xs = np.nonzero(mask & ~core)
        pts.append(np.stack([ys, xs], axis=1) / scale)
    diff = pts[0][:, None, :] - pts[1][None, :, :]
    return float(np.sqrt((diff ** 2).sum(-1)).min())


def two_sprite_image(spec: SceneSpec, rng: np.random.Generator,
                     min_gap: float = 0.15) -> tuple[np.ndarray, list[BBox], list[np.ndarray]]:
    """One frame holding two well-separated sprites; inference-time fixture.

    The sprites land in diagonally opposite quadrants and the gap between
    their nearest pixels must reach min_gap in normalized units; pairs that
    fall short are redrawn whole. Returns (image, [gt_box, gt_box],
    [gt_mask, gt_mask]).
    """
    spec.validate()
    canvas = render_background_canvas(spec, rng)
    background = _warp_canvas(canvas, spec, np.array([0.0, 0.0, 0.0, 1.0])).astype(np.float32)
    cmean = canvas.mean(axis=(0, 1))
    w_px, h_px = float(spec.width), float(spec.height)
    for _ in range(120):
        corner = rng.integers(0, 2, size=2)  # sprite 1's quadrant per axis
        image = background.copy()
        boxes: list[BBox] = []
        masks: list[np.ndarray] = []
        for idx in range(2):
            sprite = _make_sprite(spec, rng, cmean)
            margin = _walk_margin(sprite.radius)
            side = corner if idx == 0 else 1 - corner
            x_span = (margin, 0.45 * w_px) if side[0] == 0 else (0.55 * w_px, w_px - margin)
            y_span = (margin, 0.45 * h_px) if side[1] == 0 else (0.55 * h_px, h_px - margin)
            if x_span[0] >= x_span[1] or y_span[0] >= y_span[1]:
                break  # this draw cannot fit a whole quadrant; redraw the pair
            cx = rng.uniform(*x_span)
            cy = rng.uniform(*y_span)
            alpha, rgb = _rasterize_sprite(sprite, cx, cy, rng.uniform(0, 2 * np.pi),
                                           spec.height, spec.width)
            if masks and _mask_gap(masks[0], alpha) < min_gap:
                break
            image[alpha] = rgb[alpha].astype(np.float32)
            boxes.append(_tight_box(alpha))
            masks.append(alpha)
        if len(boxes) == 2:
            return image, boxes, masks
    raise RuntimeError("could not place two separated sprites; loosen min_gap or scale range")


# -- dataset persistence ---------------------------------------------------------

INDEX_HEADER = ["seq", "frame", "cx", "cy", "w", "h", "image", "mask", "background"]


def _save_png(path: str, array: np.ndarray, mode: str):
    if mode == "RGB":
        data = np.clip(np.round(array * 255.0), 0, 255).astype(np.uint8)
    else:  # binary mask
        data = np.where(array, 255, 0).astype(np.uint8)
    Image.fromarray(data, mode=mode).save(path)


def save_dataset(samples: list[SceneSample], directory: str):
    """Write index.csv plus one PNG triple per sample.

    Box coordinates carry 9 decimals so a round trip reproduces them to
    1e-9; image pixels round trip through 8-bit PNG (error <= 1/255).
    """
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, "index.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(INDEX_HEADER)
        for s in samples:
            stem = f"seq{s.sequence:04d}_frame{s.frame:04d}"
            names = (f"{stem}_image.png", f"{stem}_mask.png", f"{stem}_background.png")
            _save_png(os.path.join(directory, names[0]), s.image, "RGB")
            _save_png(os.path.join(directory, names[1]), s.gt_mask, "L")
            _save_png(os.path.join(directory, names[2]), s.clean_background, "RGB")
            writer.writerow([s.sequence, s.frame,
                             f"{s.gt_box.cx:.9f}", f"{s.gt_box.cy:.9f}",
                             f"{s.gt_box.w:.9f}", f"{s.gt_box.h:.9f}", *names])


def load_dataset(directory: str) -> list[SceneSample]:
    index_path = os.path.join(directory, "index.csv")
    if not os.path.isfile(index_path):
        raise FileNotFoundError(f"dataset index not found: {index_path}")
    samples = []
    with open(index_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != INDEX_HEADER:
            raise ValueError(f"{index_path}: bad header {header!r}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(INDEX_HEADER):
                raise ValueError(f"{index_path}:{lineno}: expected {len(INDEX_HEADER)} fields, got {len(row)}")
            try:
                seq, frame = int(row[0]), int(row[1])
                box = BBox(*(float(v) for v in row[2:6]))
            except ValueError as exc:
                raise ValueError(f"{index_path}:{lineno}: {exc}") from exc
            image = _load_rgb(os.path.join(directory, row[6]))
            mask = _load_mask(os.path.join(directory, row[7]))
            background = _load_rgb(os.path.join(directory, row[8]))
            samples.append(SceneSample(image=image, gt_box=box, gt_mask=mask,
                                       clean_background=background, frame=frame, sequence=seq))
    return samples


def _load_rgb(path: str) -> np.ndarray:
    if not os.path.isfile(path):
        raise FileNotFoundError(f"dataset file missing: {path}")
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32)
    return arr / 255.0


def _load_mask(path: str) -> np.ndarray:
    if not os.path.isfile(path):
        raise FileNotFoundError(f"dataset file missing: {path}")
    return np.asarray(Image.open(path).convert("L")) > 127


def hwc_to_chw(image: np.ndarray) -> np.ndarray:
    """(H, W, 3) float image to the (3, H, W) layout the networks use."""
    return np.ascontiguousarray(np.transpose(image, (2, 0, 1)))


def make_split_specs(base: SceneSpec, train_seed: int, eval_seed: int) -> tuple[SceneSpec, SceneSpec]:
    """Disjoint-seed train/eval variants of one spec."""
    return replace(base, seed=train_seed), replace(base, seed=eval_seed)
