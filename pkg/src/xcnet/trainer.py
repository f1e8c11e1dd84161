"""Two-phase training: single-task pre-training, then joint fine-tuning.

Joint training follows the masked multi-task loss
``L_all = L_A + lambda * L_B`` where the task absent from the current batch
contributes literally zero (its loss is never evaluated), and datasets
alternate in fixed-length blocks of ``switch_interval`` iterations.

The optimizer is SGD with momentum: v <- momentum * v - lr * g;
p <- p + v.  The whole pipeline is a deterministic function of the config
seed when run single-threaded.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields

import numpy as np

from . import autodiff as ad
from . import netgraph as ng
from . import synthdata as sd
from .autodiff import Tensor
from .errors import ConfigError, DataError, NumericError
from .evalmetrics import AnchorGrid

TAG_DETECTION = "a"
TAG_SEGMENTATION = "b"

TRAIN_CROP = (64, 64)  # training patches cropped from the full scenes
IGNORE_LABEL = -1

# anchor assignment (simplified RPN protocol)
POSITIVE_IOU = 0.5
NEGATIVE_IOU = 0.3
NEGATIVES_PER_POSITIVE = 3
MIN_NEGATIVES = 8

MODES = ("single_det", "single_seg", "single_task_cross_connected",
         "share1", "share2", "share3", "share4", "cross_stitch", "cross_connected")

_DEFAULT_LR = {"pretrain": 0.01, "finetune": 0.002}


@dataclass
class TrainConfig:
    mode: str = ""
    lambda_: float = 1.0
    switch_interval: int = 100
    learning_rate: float | None = None  # None: mode-appropriate default
    momentum: float = 0.9
    iterations: int = 300
    batch_size: int = 4
    seed: int = 0
    cross_depth: int = 10
    init_std: float = 0.1
    dataset_a: str = ""
    dataset_b: str = ""
    weights_in: str = ""
    weights_out: str = ""
    log_csv: str = ""

    def validate(self):
        if self.lambda_ <= 0:
            raise ConfigError(f"lambda must be > 0, got {self.lambda_}")
        if self.switch_interval < 1:
            raise ConfigError(f"switch_interval must be >= 1, got {self.switch_interval}")
        if self.learning_rate is not None and self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.iterations < 0:
            raise ConfigError(f"iterations must be >= 0, got {self.iterations}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")

    def resolved_lr(self, phase):
        return self.learning_rate if self.learning_rate is not None else _DEFAULT_LR[phase]


_CONFIG_KEYS = {
    "mode": str, "lambda": float, "switch_interval": int, "learning_rate": float,
    "momentum": float, "iterations": int, "batch_size": int, "seed": int,
    "cross_depth": int, "init_std": float, "dataset_a": str, "dataset_b": str,
    "weights_in": str, "weights_out": str, "log_csv": str,
}
_FIELD_NAMES = {"lambda": "lambda_"}


def parse_config_text(text, source="<config>"):
    """Parse the flat key=value config format ('#' starts a comment)."""
    values = {}
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{ln}: expected key=value, got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _CONFIG_KEYS:
            raise ConfigError(f"{source}:{ln}: unknown config key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{ln}: duplicate config key {key!r}")
        try:
            values[key] = _CONFIG_KEYS[key](value)
        except ValueError as exc:
            raise ConfigError(f"{source}:{ln}: bad value for {key!r}: {value!r}") from exc
    kwargs = {_FIELD_NAMES.get(k, k): v for k, v in values.items()}
    config = TrainConfig(**kwargs)
    if config.mode and config.mode not in MODES:
        raise ConfigError(f"{source}: unknown mode {config.mode!r}; expected one of {MODES}")
    config.validate()
    return config


def load_config(path):
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read(), source=str(path))


def config_lines(config):
    out = []
    for f in fields(TrainConfig):
        key = "lambda" if f.name == "lambda_" else f.name
        value = getattr(config, f.name)
        if value is None:
            continue
        out.append(f"{key}={value}")
    return out


def config_hash(config):
    text = "\n".join(config_lines(config))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


# -- optimizer ----------------------------------------------------------------

def sgd_update(param, grad, velocity, learning_rate, momentum):
    """In-place momentum SGD on one array: v <- m*v - lr*g; p <- p + v."""
    if param.shape != grad.shape or param.shape != velocity.shape:
        raise ConfigError(
            f"sgd_update shape mismatch: param {param.shape}, grad {grad.shape}, "
            f"velocity {velocity.shape}"
        )
    velocity *= momentum
    velocity -= learning_rate * grad
    param += velocity


class SgdOptimizer:
    """Momentum SGD over a network's named parameters.

    Parameters whose gradient is absent for a step (e.g. the other task's
    head on a single-task batch) are left untouched.
    """

    def __init__(self, named_params, learning_rate, momentum):
        self.named_params = list(named_params)
        self.learning_rate = float(learning_rate)
        self.momentum = float(momentum)
        self.velocities = {name: np.zeros_like(t.data) for name, t in self.named_params}

    def zero_grad(self):
        for _, t in self.named_params:
            t.zero_grad()

    def step(self):
        for name, t in self.named_params:
            if t.grad is None:
                continue
            sgd_update(t.data, t.grad.astype(t.data.dtype, copy=False),
                       self.velocities[name], self.learning_rate, self.momentum)

    def check_finite(self):
        for name, t in self.named_params:
            if not np.all(np.isfinite(t.data)):
                raise NumericError(f"parameter {name} became non-finite")


# -- batches -------------------------------------------------------------------

@dataclass
class Batch:
    """One training batch carrying exactly one task's annotations."""

    images: Tensor  # (B, 3, h, w) float32 in [0, 1]
    task_tag: str  # "a" (detection) or "b" (segmentation)
    boxes: list | None = None  # per-image (K, 5) arrays when task_tag == "a"
    label_maps: np.ndarray | None = None  # (B, h, w) int64 when task_tag == "b"

    def __post_init__(self):
        if self.images.data.shape[0] == 0:
            raise DataError("empty batch")
        if self.task_tag not in (TAG_DETECTION, TAG_SEGMENTATION):
            raise ConfigError(f"unknown task tag {self.task_tag!r}")


def make_batch(samples, task_tag, rng, crop=TRAIN_CROP, augment=True):
    """Assemble a batch from samples with seeded crop + horizontal flip."""
    if not samples:
        raise DataError("empty batch")
    images = []
    boxes = []
    label_maps = []
    for sample in samples:
        s = sample
        if crop is not None and (s.height > crop[0] or s.width > crop[1]):
            y0 = int(rng.integers(0, s.height - crop[0] + 1)) if augment else \
                (s.height - crop[0]) // 2
            x0 = int(rng.integers(0, s.width - crop[1] + 1)) if augment else \
                (s.width - crop[1]) // 2
            s = sd.crop_at(s, x0, y0, crop[0], crop[1])
        if augment and rng.random() < 0.5:
            s = sd.flip_horizontal(s)
        images.append(s.image.astype(np.float32) / 255.0)
        if task_tag == TAG_DETECTION:
            if s.boxes is None:
                raise DataError(f"sample {s.name} has no boxes for a detection batch")
            boxes.append(s.boxes)
        else:
            if s.label_map is None:
                raise DataError(f"sample {s.name} has no label map for a segmentation batch")
            label_maps.append(s.label_map.astype(np.int64))
    batch = Batch(images=Tensor(np.stack(images)), task_tag=task_tag)
    if task_tag == TAG_DETECTION:
        batch.boxes = boxes
    else:
        batch.label_maps = np.stack(label_maps)
    return batch


class _SampleStream:
    """Seeded shuffling over a dataset with reshuffle on epoch end."""

    def __init__(self, dataset, rng):
        if len(dataset.samples) == 0:
            raise DataError("empty dataset")
        self.samples = dataset.samples
        self.rng = rng
        self.order = []

    def take(self, n):
        out = []
        while len(out) < n:
            if not self.order:
                self.order = list(self.rng.permutation(len(self.samples)))
            out.append(self.samples[self.order.pop(0)])
        return out


def alternation_schedule(dataset_a, dataset_b, switch_interval, total_iters, seed,
                         batch_size=4, crop=TRAIN_CROP, augment=True):
    """Yield batches in blocks: switch_interval from A, then from B, repeating.

    Pass one dataset as None for single-dataset fine-tuning; the schedule
    then emits only the present task's batches.
    """
    if dataset_a is None and dataset_b is None:
        raise DataError("empty dataset")
    if switch_interval < 1:
        raise ConfigError(f"switch_interval must be >= 1, got {switch_interval}")
    root = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    keys = root.spawn(3)
    stream_a = _SampleStream(dataset_a, np.random.default_rng(keys[0])) \
        if dataset_a is not None else None
    stream_b = _SampleStream(dataset_b, np.random.default_rng(keys[1])) \
        if dataset_b is not None else None
    rng_aug = np.random.default_rng(keys[2])

    for it in range(total_iters):
        if stream_a is None:
            tag = TAG_SEGMENTATION
        elif stream_b is None:
            tag = TAG_DETECTION
        else:
            tag = TAG_DETECTION if (it // switch_interval) % 2 == 0 else TAG_SEGMENTATION
        stream = stream_a if tag == TAG_DETECTION else stream_b
        yield make_batch(stream.take(batch_size), tag, rng_aug, crop=crop, augment=augment)


# -- detection targets ----------------------------------------------------------

@dataclass
class DetectionTargets:
    """Per-anchor training targets for one batch."""

    labels: np.ndarray  # (B, A, Hf, Wf) int64: 1 fg, 0 bg, -1 ignore
    reg_targets: np.ndarray  # (B, A, 4, Hf, Wf) float32
    reg_mask: np.ndarray  # same shape, 1 on positive anchors


def _box_deltas(anchor, gt):
    ax, ay, aw, ah = anchor
    gx, gy, gw, gh = gt[:4]
    return np.array([
        ((gx + gw / 2.0) - (ax + aw / 2.0)) / aw,
        ((gy + gh / 2.0) - (ay + ah / 2.0)) / ah,
        np.log(gw / aw),
        np.log(gh / ah),
    ], dtype=np.float32)


def _pairwise_iou(anchors, gts):
    """(n_anchors, n_gt) IoU matrix for (x, y, w, h) arrays."""
    ax0, ay0 = anchors[:, 0], anchors[:, 1]
    ax1, ay1 = ax0 + anchors[:, 2], ay0 + anchors[:, 3]
    gx0, gy0 = gts[:, 0], gts[:, 1]
    gx1, gy1 = gx0 + gts[:, 2], gy0 + gts[:, 3]
    ix = np.maximum(0.0, np.minimum(ax1[:, None], gx1[None]) - np.maximum(ax0[:, None], gx0[None]))
    iy = np.maximum(0.0, np.minimum(ay1[:, None], gy1[None]) - np.maximum(ay0[:, None], gy0[None]))
    inter = ix * iy
    area_a = (anchors[:, 2] * anchors[:, 3])[:, None]
    area_g = (gts[:, 2] * gts[:, 3])[None]
    return inter / (area_a + area_g - inter)


def build_detection_targets(grid, feat_h, feat_w, boxes_per_image, rng):
    """Assign anchors to ground-truth boxes for a batch.

    Anchors with IoU >= 0.5 (or the best anchor of each gt) are positive,
    IoU < 0.3 negative, the rest ignored.  Negatives are subsampled to at
    most max(8, 3 x positives) per image to balance the classification loss.
    """
    anchors = grid.anchor_array(feat_h, feat_w).reshape(-1, 4)  # (H*W*A, 4)
    n_anchors = anchors.shape[0]
    n_a = grid.num_anchors
    batch = len(boxes_per_image)
    labels = np.full((batch, n_anchors), IGNORE_LABEL, dtype=np.int64)
    reg_t = np.zeros((batch, n_anchors, 4), dtype=np.float32)
    reg_m = np.zeros((batch, n_anchors, 4), dtype=np.float32)

    for b, boxes in enumerate(boxes_per_image):
        gts = np.asarray(boxes, dtype=np.float64).reshape(-1, 5)[:, :4] \
            if len(boxes) else np.zeros((0, 4))
        if len(gts) == 0:
            labels[b] = 0
        else:
            iou = _pairwise_iou(anchors, gts)
            best_gt = iou.argmax(axis=1)
            best_iou = iou[np.arange(n_anchors), best_gt]
            labels[b, best_iou < NEGATIVE_IOU] = 0
            pos = best_iou >= POSITIVE_IOU
            # every gt claims its best anchor, ties toward the lower index
            forced = iou.argmax(axis=0)
            pos[forced] = True
            best_gt[forced] = np.arange(len(gts))
            labels[b, pos] = 1
            for idx in np.nonzero(pos)[0]:
                reg_t[b, idx] = _box_deltas(anchors[idx], gts[best_gt[idx]])
                reg_m[b, idx] = 1.0
        n_pos = int((labels[b] == 1).sum())
        neg_idx = np.nonzero(labels[b] == 0)[0]
        keep = min(len(neg_idx), max(MIN_NEGATIVES, NEGATIVES_PER_POSITIVE * n_pos))
        if keep < len(neg_idx):
            chosen = rng.choice(neg_idx, size=keep, replace=False)
            labels[b, neg_idx] = IGNORE_LABEL
            labels[b, chosen] = 0

    # (B, H*W*A, ...) -> per-anchor maps (B, A, Hf, Wf)
    labels = labels.reshape(batch, feat_h, feat_w, n_a).transpose(0, 3, 1, 2)
    reg_t = reg_t.reshape(batch, feat_h, feat_w, n_a, 4).transpose(0, 3, 4, 1, 2)
    reg_m = reg_m.reshape(batch, feat_h, feat_w, n_a, 4).transpose(0, 3, 4, 1, 2)
    return DetectionTargets(labels=np.ascontiguousarray(labels),
                            reg_targets=np.ascontiguousarray(reg_t),
                            reg_mask=np.ascontiguousarray(reg_m))


def detection_grid(net, which="a"):
    spec = net.spec_a if which == "a" else net.spec_b
    head = spec.head
    if not isinstance(head, ng.DetectionHead):
        raise ConfigError("stream head is not a detection head")
    return AnchorGrid(stride=spec.output_stride, anchor_shapes=head.anchor_shapes)


def detection_loss(head_out, targets):
    """Smooth-L1 box regression plus cross-entropy objectness, summed per anchor."""
    n_a = targets.labels.shape[1]
    total = None
    for a in range(n_a):
        base = a * 6
        reg = ad.slice_channels(head_out, base, base + 4)
        cls = ad.slice_channels(head_out, base + 4, base + 6)
        l_reg = ad.smooth_l1(reg, targets.reg_targets[:, a], targets.reg_mask[:, a])
        l_cls = ad.softmax_cross_entropy(cls, targets.labels[:, a], ignore_label=IGNORE_LABEL)
        part = ad.add(l_reg.value, l_cls.value)
        total = part if total is None else ad.add(total, part)
    return total


def segmentation_loss(logits, label_maps):
    """Cross-entropy over all pixels."""
    return ad.softmax_cross_entropy(logits, label_maps, ignore_label=IGNORE_LABEL).value


def task_loss(net, batch, rng):
    """Forward plus the batch task's loss; the other task is not evaluated."""
    if batch.task_tag == TAG_DETECTION:
        out = ng.forward_task(net, "a", batch.images)
        grid = detection_grid(net, "a")
        targets = build_detection_targets(grid, out.data.shape[2], out.data.shape[3],
                                          batch.boxes, rng)
        return detection_loss(out, targets)
    out = ng.forward_task(net, "b", batch.images)
    return segmentation_loss(out, batch.label_maps)


def _apply_step(loss_node, optimizer):
    value = float(loss_node.data.reshape(()))
    if not np.isfinite(value):
        raise NumericError(f"loss became non-finite: {value}")
    optimizer.zero_grad()
    loss_node.backward()
    optimizer.step()
    optimizer.check_finite()
    return value


def multitask_step(net, batch, optimizer, config, rng):
    """One joint-training step: masked loss, backward, SGD update.

    Returns the scalar L_all.  On a detection batch L_all is literally L_A;
    on a segmentation batch it is lambda * L_B.
    """
    if net.mode not in (ng.MODE_CROSS_CONNECTED, ng.MODE_CROSS_STITCH, ng.MODE_SHARED):
        raise ConfigError(f"multitask_step needs a multi-task net, got mode {net.mode!r}")
    loss = task_loss(net, batch, rng)
    if batch.task_tag == TAG_SEGMENTATION:
        loss = ad.scale(loss, config.lambda_)
    return _apply_step(loss, optimizer)


def single_step(net, batch, optimizer, rng):
    """One pre-training step on a single-task net (no lambda weighting)."""
    if net.mode not in (ng.MODE_SINGLE_A, ng.MODE_SINGLE_B):
        raise ConfigError(f"single_step needs a single-task net, got mode {net.mode!r}")
    want = TAG_DETECTION if net.mode == ng.MODE_SINGLE_A else TAG_SEGMENTATION
    if batch.task_tag != want:
        raise ConfigError(f"batch task {batch.task_tag!r} does not match net task {want!r}")
    return _apply_step(task_loss(net, batch, rng), optimizer)


def _dataset_matches_task(dataset, tag):
    if tag == TAG_DETECTION:
        return dataset.kind in ("boxes", "both")
    return dataset.kind in ("masks", "both")


def pretrain_single(net, dataset, config):
    """SGD pre-training of one single-task net; returns (net, loss trace).

    The trace is a list of (iteration, task_tag, loss) recorded every
    iteration.
    """
    config.validate()
    tag = TAG_DETECTION if net.mode == ng.MODE_SINGLE_A else TAG_SEGMENTATION
    if not _dataset_matches_task(dataset, tag):
        raise ConfigError(
            f"dataset kind {dataset.kind!r} has no annotations for task {tag!r}"
        )
    root = np.random.SeedSequence(config.seed)
    keys = root.spawn(2)
    rng_anchor = np.random.default_rng(keys[1])
    optimizer = SgdOptimizer(net.parameters(), config.resolved_lr("pretrain"),
                             config.momentum)
    if tag == TAG_DETECTION:
        schedule = alternation_schedule(dataset, None, config.switch_interval,
                                        config.iterations, keys[0],
                                        batch_size=config.batch_size)
    else:
        schedule = alternation_schedule(None, dataset, config.switch_interval,
                                        config.iterations, keys[0],
                                        batch_size=config.batch_size)
    trace = []
    for it, batch in enumerate(schedule, start=1):
        loss = single_step(net, batch, optimizer, rng_anchor)
        trace.append((it, batch.task_tag, loss))
    return net, trace


def finetune_multitask(net, dataset_a, dataset_b, config):
    """Joint fine-tuning with dataset alternation; returns (net, loss trace)."""
    config.validate()
    if dataset_a is not None and not _dataset_matches_task(dataset_a, TAG_DETECTION):
        raise ConfigError(f"dataset_a kind {dataset_a.kind!r} lacks boxes")
    if dataset_b is not None and not _dataset_matches_task(dataset_b, TAG_SEGMENTATION):
        raise ConfigError(f"dataset_b kind {dataset_b.kind!r} lacks masks")
    root = np.random.SeedSequence(config.seed)
    keys = root.spawn(2)
    rng_anchor = np.random.default_rng(keys[1])
    optimizer = SgdOptimizer(net.parameters(), config.resolved_lr("finetune"),
                             config.momentum)
    schedule = alternation_schedule(dataset_a, dataset_b, config.switch_interval,
                                    config.iterations, keys[0],
                                    batch_size=config.batch_size)
    trace = []
    for it, batch in enumerate(schedule, start=1):
        loss = multitask_step(net, batch, optimizer, config, rng_anchor)
        trace.append((it, batch.task_tag, loss))
    return net, trace


def write_trace_csv(path, trace):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("iteration,task_tag,loss\n")
        for it, tag, loss in trace:
            fh.write(f"{it},{tag},{format(loss, '.10g')}\n")


def trace_decreased(trace, window=20):
    """Strict decrease of the smoothed loss, per task tag.

    For every task tag present, the mean of that tag's last ``window``
    losses must be strictly below the mean of its first ``window``.
    """
    by_tag = {}
    for _, tag, loss in trace:
        by_tag.setdefault(tag, []).append(loss)
    for losses in by_tag.values():
        if len(losses) < 2 * window:
            return False
        if not np.mean(losses[-window:]) < np.mean(losses[:window]):
            return False
    return True
