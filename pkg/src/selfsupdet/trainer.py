"""Training orchestration: inpainter pretraining, the joint detector loop,
checkpoints, and metrics logging.

Everything is driven by plain numpy generators: one seeds the parameter
init, a second drives batch choice and candidate draws. Re-running with
the same config and dataset reproduces every logged number. All data sits
in memory (the corpora are desk-scale), so batches are sliced directly
rather than prefetched.
"""

import csv
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff.optim import Adam
from .autodiff.tensor import Tensor, constant, no_grad
from .evaluator import iou_box
from .inpainter import Inpainter, pretrain_step
from .objectives import (PRIOR_BOX_OFFSET, PRIOR_BOX_SIZE, PRIOR_MASK,
                         background_estimate, background_objective,
                         foreground_objective, prepare_step, recon_loss,
                         soft_region, total_step_loss)
from .proposal import (Detector, SingleBoxDetector, decode_direct,
                       decode_direct_tensor, select_argmax)
from .segmenter import SegAutoencoder
from .synth import SceneSample, hwc_to_chw
from .transformer import composite, crop

log = logging.getLogger(__name__)

METRICS_HEADER = ("step", "loss_total", "loss_fg", "loss_bg", "loss_prior",
                  "entropy", "drawn_cell", "iou_snapshot")
MAX_CONSECUTIVE_SKIPS = 50

TRAIN_MODES = ("default", "uniform-q", "no-routing", "bg-only", "direct-regression")

CKPT_MAGIC = b"SSOD"
CKPT_VERSION = 1
_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


@dataclass
class TrainConfig:
    """Knobs for both training phases; defaults target desk-scale runs."""

    batch_size: int = 16
    inpainter_steps: int = 2000
    detector_steps: int = 10000
    samples_per_image: int = 1
    epsilon: float = 1e-3
    lr: float = 1e-4
    inpainter_lr: float = 1e-3
    seed: int = 0
    crop_res: int = 32
    grid_size: int = 8
    image_size: int = 128
    checkpoint_interval: int = 1000
    snapshot_interval: int = 500
    routing_audit_interval: int = 500

    def validate(self):
        positives = ("batch_size", "inpainter_steps", "detector_steps",
                     "samples_per_image", "epsilon", "lr", "inpainter_lr",
                     "crop_res", "grid_size", "image_size",
                     "checkpoint_interval", "snapshot_interval",
                     "routing_audit_interval")
        for name in positives:
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        c = self.grid_size * self.grid_size
        if c * self.epsilon >= 1.0:
            raise ValueError(
                f"epsilon {self.epsilon} too large: C*eps must stay below 1 (C={c})")
        if self.image_size != self.grid_size * 16:
            raise ValueError(
                f"image_size {self.image_size} must equal grid_size*16 = {self.grid_size * 16}")


# -- checkpoints -----------------------------------------------------------------


def save_checkpoint(path, state: dict[str, np.ndarray]):
    """Write named tensors to the binary checkpoint format."""
    blob = bytearray()
    blob += CKPT_MAGIC
    blob += struct.pack("<I", CKPT_VERSION)
    blob += struct.pack("<I", len(state))
    for name in sorted(state):
        arr = np.asarray(state[name])
        if arr.dtype == np.float32:
            code = 0
        elif arr.dtype == np.float64:
            code = 1
        else:
            raise ValueError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
        encoded = name.encode("utf-8")
        blob += struct.pack("<H", len(encoded))
        blob += encoded
        blob += struct.pack("BB", code, arr.ndim)
        for dim in arr.shape:
            blob += struct.pack("<I", dim)
        blob += np.ascontiguousarray(arr, dtype=_DTYPE_CODES[code]).tobytes()
    Path(path).write_bytes(bytes(blob))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    """Read a checkpoint back into {name: array}; validates the envelope."""
    data = Path(path).read_bytes()
    view = memoryview(data)
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(view):
            raise ValueError(f"truncated checkpoint: ran out reading {what}")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4, "magic")) != CKPT_MAGIC:
        raise ValueError(f"bad magic in {path}: not a checkpoint file")
    version = struct.unpack("<I", take(4, "version"))[0]
    if version != CKPT_VERSION:
        raise ValueError(f"unsupported version {version} (expected {CKPT_VERSION})")
    count = struct.unpack("<I", take(4, "tensor count"))[0]
    state = {}
    for _ in range(count):
        nlen = struct.unpack("<H", take(2, "name length"))[0]
        name = bytes(take(nlen, "name")).decode("utf-8")
        code, rank = struct.unpack("BB", take(2, "dtype/rank"))
        if code not in _DTYPE_CODES:
            raise ValueError(f"tensor {name!r}: unknown dtype code {code}")
        shape = tuple(struct.unpack("<I", take(4, "dim"))[0] for _ in range(rank))
        dtype = _DTYPE_CODES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize if rank else dtype.itemsize
        payload = take(nbytes, f"payload of {name!r}")
        state[name] = np.frombuffer(payload, dtype=dtype).reshape(shape).copy()
    if pos != len(view):
        raise ValueError(f"checkpoint has {len(view) - pos} trailing bytes")
    return state


def merge_states(**named) -> dict[str, np.ndarray]:
    """Prefix each module's state with its name: merge_states(det=..., seg=...)."""
    out = {}
    for prefix, state in named.items():
        for key, arr in state.items():
            out[f"{prefix}.{key}"] = arr
    return out


def split_state(state: dict[str, np.ndarray], prefix: str) -> dict[str, np.ndarray]:
    """Extract one module's tensors from a merged checkpoint state."""
    want = prefix + "."
    sub = {k[len(want):]: v for k, v in state.items() if k.startswith(want)}
    if not sub:
        raise KeyError(f"checkpoint holds no tensors under prefix {prefix!r}")
    return sub


# -- metrics logging --------------------------------------------------------------


class _MetricsWriter:
    def __init__(self, path):
        self.rows = []
        self.path = path

    def add(self, step, stats, iou_snapshot):
        row = {
            "step": step,
            "loss_total": f"{stats['loss_total']:.6f}",
            "loss_fg": f"{stats['loss_fg']:.6f}",
            "loss_bg": f"{stats['loss_bg']:.6f}",
            "loss_prior": f"{stats['loss_prior']:.6f}",
            "entropy": f"{stats['entropy']:.6f}",
            "drawn_cell": stats["drawn_cell"],
            "iou_snapshot": "" if iou_snapshot is None else f"{iou_snapshot:.6f}",
        }
        self.rows.append(row)

    def flush(self):
        if self.path is None:
            return
        with open(self.path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=METRICS_HEADER)
            writer.writeheader()
            writer.writerows(self.rows)


# -- inpainter phase ---------------------------------------------------------------


def train_inpainter(config: TrainConfig, dataset: list[SceneSample],
                    metrics_path=None, ckpt_path=None) -> tuple[Inpainter, list[float]]:
    """Pretrain the inpainter on clean frames; returns (net, loss curve)."""
    config.validate()
    if not dataset:
        raise ValueError("inpainter training needs a nonempty dataset")
    images = np.stack([hwc_to_chw(s.image) for s in dataset])
    net = Inpainter(np.random.default_rng(config.seed))
    opt = Adam(list(net.parameters()), lr=config.inpainter_lr)
    rng = np.random.default_rng(config.seed + 1)
    curve = []
    for _ in range(config.inpainter_steps):
        idx = rng.integers(0, len(images), size=config.batch_size)
        curve.append(pretrain_step(net, opt, images[idx], rng))
    if metrics_path is not None:
        with open(metrics_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "loss"])
            writer.writerows((i + 1, f"{v:.6f}") for i, v in enumerate(curve))
    if ckpt_path is not None:
        save_checkpoint(ckpt_path, merge_states(inp=net.state_dict()))
    return net, curve


# -- routing audit -----------------------------------------------------------------


def routing_audit(det: Detector, seg: SegAutoencoder, inpainter, image: np.ndarray,
                  epsilon: float, rng: np.random.Generator, crop_res: int = 32):
    """Assert the two terms stay on their own parameter groups.

    The background term must leave the box head and segmenter untouched;
    the foreground term must leave the probability head untouched. Raises
    RuntimeError on any violation.
    """
    def nonzero(module):
        return any(p.grad is not None and np.any(p.grad != 0.0)
                   for p in module.parameters())

    batch = image[None]
    grids = det(constant(batch))
    bundles = prepare_step(batch, grids, inpainter, epsilon, rng)
    det.zero_grad()
    seg.zero_grad()
    background_objective(grids[0], bundles[0]).backward()
    if nonzero(det._modules["box_head"]) or nonzero(seg):
        raise RuntimeError("routing audit failed: background term leaked into "
                           "the box head or segmenter")
    grids = det(constant(batch))
    det.zero_grad()
    seg.zero_grad()
    term, _ = foreground_objective(constant(batch), grids[0], bundles[0], seg,
                                   crop_res=crop_res)
    term.backward()
    if nonzero(det._modules["prob_head"]):
        raise RuntimeError("routing audit failed: foreground term leaked into "
                           "the probability head")


# -- direct regression step ----------------------------------------------------------


def _direct_step_loss(images: np.ndarray, raw: Tensor, seg, inpainter,
                      crop_res: int) -> tuple[Tensor, dict]:
    """Single-box variant: both terms apply to the one regressed box.

    There is no selection distribution, so the background score uses the
    differentiable window directly and the foreground term has weight 1.
    """
    n = images.shape[0]
    h, w = images.shape[2:]
    total = None
    fg_v = bg_v = prior_v = 0.0
    for i in range(n):
        img_t = constant(images[i][None])
        box_np = decode_direct(raw.data[i])
        bhat, _, _ = background_estimate(images[i], box_np, inpainter)
        box_t = decode_direct_tensor(raw[i])
        patch = crop(img_t, box_t, out_res=crop_res)
        fg, mask = seg(patch)
        out = composite(fg, mask, box_t, constant(bhat[None]))
        o_term = recon_loss(out, img_t)
        region = soft_region(box_t, h, w)
        g_term = recon_loss(constant(bhat[None]), img_t, region=region) * (-1.0)
        p_term = raw[i][:2].square().mean() * PRIOR_BOX_OFFSET \
            + raw[i][2:].square().mean() * PRIOR_BOX_SIZE \
            + mask.abs().mean() * PRIOR_MASK
        term = o_term + g_term + p_term
        total = term if total is None else total + term
        fg_v += float(o_term.data)
        bg_v += float(g_term.data)
        prior_v += float(p_term.data)
    inv = 1.0 / float(n)
    total = total * inv
    stats = {"loss_total": float(total.data), "loss_fg": fg_v * inv,
             "loss_bg": bg_v * inv, "loss_prior": prior_v * inv,
             "entropy": 0.0, "drawn_cell": -1}
    return total, stats


# -- detector phase ----------------------------------------------------------------


@dataclass
class TrainResult:
    detector: object
    seg: SegAutoencoder
    history: list[dict] = field(default_factory=list)
    skipped_steps: int = 0
    mode: str = "default"


def predicted_boxes(detector, dataset: list[SceneSample], mode: str = "default",
                    batch_size: int = 16) -> list:
    """One box per sample: the argmax cell, or the regressed box."""
    boxes = []
    with no_grad():
        for lo in range(0, len(dataset), batch_size):
            chunk = dataset[lo:lo + batch_size]
            images = np.stack([hwc_to_chw(s.image) for s in chunk])
            if mode == "direct-regression":
                raw = detector(constant(images))
                boxes.extend(decode_direct(raw.data[i]) for i in range(len(chunk)))
            else:
                grids = detector(constant(images))
                boxes.extend(select_argmax(g)[0] for g in grids)
    return boxes


def snapshot_iou(detector, dataset: list[SceneSample], mode: str,
                 batch_size: int = 16) -> float:
    """Mean IoU of the predicted box against ground truth."""
    boxes = predicted_boxes(detector, dataset, mode, batch_size)
    return float(np.mean([iou_box(b, s.gt_box) for b, s in zip(boxes, dataset)]))


def train_detector(config: TrainConfig, dataset: list[SceneSample], inpainter,
                   mode: str = "default", eval_dataset=None,
                   metrics_path=None, ckpt_dir=None) -> TrainResult:
    """Joint detector/segmenter training against a frozen inpainter.

    ``mode`` picks the objective assembly: the default routed loss, one of
    the sampling/routing ablations, or single-box direct regression.
    Writes the per-step metrics CSV and interval checkpoints when paths
    are given.
    """
    config.validate()
    if mode not in TRAIN_MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {TRAIN_MODES}")
    if not dataset:
        raise ValueError("detector training needs a nonempty dataset")
    if inpainter is None:
        raise ValueError("detector training needs a pretrained inpainter")
    inpainter.set_requires_grad(False)

    images_all = np.stack([hwc_to_chw(s.image) for s in dataset])
    init_rng = np.random.default_rng(config.seed)
    direct = mode == "direct-regression"
    if direct:
        detector = SingleBoxDetector(init_rng, grid_size=config.grid_size)
    else:
        detector = Detector(init_rng, grid_size=config.grid_size)
    seg = SegAutoencoder(init_rng, patch=config.crop_res)

    params = list(detector.parameters())
    if mode != "bg-only":
        params += list(seg.parameters())
    opt = Adam(params, lr=config.lr)
    rng = np.random.default_rng(config.seed + 1)

    writer = _MetricsWriter(metrics_path)
    if ckpt_dir is not None:
        ckpt_dir = Path(ckpt_dir)
        ckpt_dir.mkdir(parents=True, exist_ok=True)

    history = []
    skipped_total = 0
    consecutive = 0
    last_snapshot = None
    for step in range(1, config.detector_steps + 1):
        idx = rng.integers(0, len(images_all), size=config.batch_size)
        images = images_all[idx]

        if direct:
            raw = detector(constant(images))
            loss, stats = _direct_step_loss(images, raw, seg, inpainter,
                                            config.crop_res)
        else:
            grids = detector(constant(images))
            loss = None
            stats = None
            for _ in range(config.samples_per_image):
                bundles = prepare_step(images, grids, inpainter, config.epsilon,
                                       rng, uniform_q=(mode == "uniform-q"))
                assembly = "default" if mode == "uniform-q" else mode
                sample_loss, sample_stats = total_step_loss(
                    images, grids, bundles, seg, crop_res=config.crop_res,
                    mode=assembly)
                loss = sample_loss if loss is None else loss + sample_loss
                stats = sample_stats if stats is None else stats
            if config.samples_per_image > 1:
                loss = loss * (1.0 / config.samples_per_image)
                stats["loss_total"] = float(loss.data)

        if not np.isfinite(loss.data):
            skipped_total += 1
            consecutive += 1
            log.warning("step %d: non-finite loss, skipped (%d consecutive)",
                        step, consecutive)
            if consecutive > MAX_CONSECUTIVE_SKIPS:
                raise RuntimeError(
                    f"aborting: {consecutive} consecutive non-finite steps")
            continue
        opt.zero_grad()
        loss.backward()
        if not opt.step():
            skipped_total += 1
            consecutive += 1
            if consecutive > MAX_CONSECUTIVE_SKIPS:
                raise RuntimeError(
                    f"aborting: {consecutive} consecutive skipped steps")
            continue
        consecutive = 0

        snap = None
        if eval_dataset and (step % config.snapshot_interval == 0
                             or step == config.detector_steps):
            snap = snapshot_iou(detector, eval_dataset, mode)
            last_snapshot = snap
        stats["iou_snapshot"] = last_snapshot
        writer.add(step, stats, snap)
        history.append({"step": step, **stats})

        if (not direct and mode in ("default", "uniform-q")
                and step % config.routing_audit_interval == 0):
            routing_audit(detector, seg, inpainter, images[0], config.epsilon,
                          rng, crop_res=config.crop_res)

        if ckpt_dir is not None and (step % config.checkpoint_interval == 0
                                     or step == config.detector_steps):
            state = merge_states(det=detector.state_dict(), seg=seg.state_dict())
            save_checkpoint(ckpt_dir / f"step{step:06d}.ckpt", state)
            save_checkpoint(ckpt_dir / "final.ckpt", state)

    writer.flush()
    return TrainResult(detector=detector, seg=seg, history=history,
                       skipped_steps=skipped_total, mode=mode)
