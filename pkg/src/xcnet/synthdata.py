"""Deterministic synthetic scene generator for detection and segmentation.

Scenes are styled backgrounds with non-overlapping ellipse/rectangle targets
(class 1) and distractors (class 2) rendered on top.  Every pixel of every
output file is a pure function of (scene spec seed, image index), so
regenerating a dataset reproduces it byte for byte.

On-disk formats: images are binary PPM (P6, 8-bit); label and instance maps
are binary PGM (P5) with the class/instance index as the gray value; boxes
are one text file per image with lines "x y w h class"; each dataset
directory carries a manifest listing the serialized scene spec and the
sample basenames.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError, FormatError

CLASS_BACKGROUND = 0
CLASS_TARGET = 1
CLASS_DISTRACTOR = 2
N_CLASSES = 3

BACKGROUND_STYLES = ("smooth_gradient", "clutter_noise", "heavy_clutter")
ANNOTATION_KINDS = ("boxes", "masks", "both")

_PLACEMENT_ATTEMPTS = 1000


@dataclass(frozen=True)
class SceneSpec:
    image_size: tuple = (96, 128)  # (H, W)
    target_count_range: tuple = (1, 3)
    target_size_range: tuple = (10, 28)  # bounding-box side lengths in pixels
    distractor_count_range: tuple = (2, 5)
    background_style: str = "smooth_gradient"
    contrast: float = 0.9
    seed: int = 0

    def validate(self):
        h, w = self.image_size
        if h < 16 or w < 16:
            raise ConfigError(f"image size {self.image_size} too small")
        if self.target_size_range[0] < 4:
            raise ConfigError(
                f"target sizes must be >= 4 px, got minimum {self.target_size_range[0]}"
            )
        if self.target_size_range[1] > min(h, w) // 2:
            raise ConfigError("maximum target size exceeds half the image")
        if self.background_style not in BACKGROUND_STYLES:
            raise ConfigError(
                f"unknown background style {self.background_style!r}; "
                f"expected one of {BACKGROUND_STYLES}"
            )
        if not 0 < self.contrast <= 1:
            raise ConfigError(f"contrast must be in (0, 1], got {self.contrast}")
        for name in ("target_count_range", "target_size_range", "distractor_count_range"):
            lo, hi = getattr(self, name)
            if lo > hi or lo < 0:
                raise ConfigError(f"bad {name}: ({lo}, {hi})")


@dataclass
class Sample:
    """One image with its task annotations.

    ``boxes`` is an (K, 5) int array of (x, y, w, h, class) rows or None;
    ``label_map``/``instance_map`` are (H, W) uint8 arrays or None.
    """

    name: str
    image: np.ndarray  # uint8, (3, H, W)
    boxes: np.ndarray | None = None
    label_map: np.ndarray | None = None
    instance_map: np.ndarray | None = None

    @property
    def height(self):
        return self.image.shape[1]

    @property
    def width(self):
        return self.image.shape[2]


@dataclass
class Dataset:
    spec: SceneSpec
    kind: str
    samples: list

    def __len__(self):
        return len(self.samples)


@dataclass(frozen=True)
class _Shape:
    kind: str  # "ellipse" | "rectangle"
    cx: float
    cy: float
    rx: float
    ry: float

    @property
    def analytic_area(self):
        if self.kind == "ellipse":
            return np.pi * self.rx * self.ry
        return (2 * self.rx) * (2 * self.ry)

    def bounds(self):
        return (self.cx - self.rx, self.cy - self.ry, self.cx + self.rx, self.cy + self.ry)


def _shape_mask(shape, h, w):
    ys, xs = np.mgrid[0:h, 0:w]
    px = xs + 0.5
    py = ys + 0.5
    if shape.kind == "ellipse":
        return ((px - shape.cx) / shape.rx) ** 2 + ((py - shape.cy) / shape.ry) ** 2 <= 1.0
    return (np.abs(px - shape.cx) <= shape.rx) & (np.abs(py - shape.cy) <= shape.ry)


def _boxes_disjoint(a, b, gap=1.0):
    ax0, ay0, ax1, ay1 = a
    bx0, by0, bx1, by1 = b
    return ax1 + gap <= bx0 or bx1 + gap <= ax0 or ay1 + gap <= by0 or by1 + gap <= ay0


def _place_shapes(rng, spec, count, size_range, existing):
    """Rejection-sample non-overlapping shapes fully inside the image."""
    h, w = spec.image_size
    placed = []
    for _ in range(count):
        for attempt in range(_PLACEMENT_ATTEMPTS):
            kind = "ellipse" if rng.random() < 0.5 else "rectangle"
            sw = rng.uniform(size_range[0], size_range[1])
            sh = rng.uniform(size_range[0], size_range[1])
            rx, ry = sw / 2.0, sh / 2.0
            cx = rng.uniform(rx + 1.0, w - rx - 1.0)
            cy = rng.uniform(ry + 1.0, h - ry - 1.0)
            cand = _Shape(kind, cx, cy, rx, ry)
            if all(_boxes_disjoint(cand.bounds(), s.bounds()) for s in existing + placed):
                placed.append(cand)
                break
        else:
            raise DataError(
                f"could not place shape after {_PLACEMENT_ATTEMPTS} attempts "
                f"(image {h}x{w}, {len(existing) + len(placed)} shapes already placed)"
            )
    return placed


def _background(rng, spec):
    h, w = spec.image_size
    ys, xs = np.mgrid[0:h, 0:w]
    u = xs / max(w - 1, 1)
    v = ys / max(h - 1, 1)
    theta = rng.uniform(0, 2 * np.pi)
    ramp = (np.cos(theta) * u + np.sin(theta) * v) * rng.uniform(0.1, 0.25)
    base = rng.uniform(0.35, 0.5)
    img = np.empty((3, h, w), dtype=np.float64)
    for c in range(3):
        phase = rng.uniform(0, 2 * np.pi)
        wave = 0.03 * np.sin(2 * np.pi * (u + v) * rng.uniform(0.5, 1.5) + phase)
        img[c] = base + ramp + wave

    style = spec.background_style
    if style in ("clutter_noise", "heavy_clutter"):
        n_blobs = rng.integers(8, 15) if style == "clutter_noise" else rng.integers(18, 30)
        amp_hi = 0.25 if style == "clutter_noise" else 0.4
        for _ in range(n_blobs):
            bx = rng.uniform(0, w)
            by = rng.uniform(0, h)
            radius = rng.uniform(3, 12)
            amp = rng.uniform(-amp_hi, amp_hi)
            tint = rng.uniform(0.5, 1.5, size=3)
            bump = amp * np.exp(-(((xs - bx) ** 2 + (ys - by) ** 2) / (2 * radius ** 2)))
            img += tint[:, None, None] * bump
        sigma = 0.02 if style == "clutter_noise" else 0.05
        img += rng.normal(0, sigma, size=(3, h, w))
    return img


_TARGET_TINT = np.array([1.0, 0.75, 0.45])      # warm
_DISTRACTOR_TINT = np.array([0.5, 0.75, 1.0])   # cool


def _paint_shape(img, mask, tint, contrast, rng):
    lift = contrast * rng.uniform(0.45, 0.55)
    local = img[:, mask].mean()
    value = np.clip(local + lift, 0.0, 1.0)
    img[:, mask] = (value * tint)[:, None] + rng.normal(0, 0.01, size=(3, int(mask.sum())))


def render_scene(spec, index):
    """Render one scene; returns (image uint8, boxes, label_map, instance_map, shapes)."""
    spec.validate()
    h, w = spec.image_size
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, index]))

    n_targets = int(rng.integers(spec.target_count_range[0], spec.target_count_range[1] + 1))
    n_distract = int(rng.integers(spec.distractor_count_range[0],
                                  spec.distractor_count_range[1] + 1))
    targets = _place_shapes(rng, spec, n_targets, spec.target_size_range, [])
    d_lo = max(4, int(spec.target_size_range[0] * 0.6))
    d_hi = max(d_lo + 1, int(spec.target_size_range[1] * 0.8))
    distractors = _place_shapes(rng, spec, n_distract, (d_lo, d_hi), targets)

    img = _background(rng, spec)
    label_map = np.zeros((h, w), dtype=np.uint8)
    instance_map = np.zeros((h, w), dtype=np.uint8)
    boxes = []
    if len(targets) > 255:
        raise DataError("more than 255 target instances in one image")

    for shape in distractors:
        mask = _shape_mask(shape, h, w)
        _paint_shape(img, mask, _DISTRACTOR_TINT, spec.contrast * 0.8, rng)
        label_map[mask] = CLASS_DISTRACTOR

    for inst_id, shape in enumerate(targets, start=1):
        mask = _shape_mask(shape, h, w)
        if not mask.any():
            raise DataError(f"degenerate target raster for shape {shape}")
        _paint_shape(img, mask, _TARGET_TINT, spec.contrast, rng)
        label_map[mask] = CLASS_TARGET
        instance_map[mask] = inst_id
        ys_m, xs_m = np.nonzero(mask)
        x0, x1 = int(xs_m.min()), int(xs_m.max())
        y0, y1 = int(ys_m.min()), int(ys_m.max())
        boxes.append((x0, y0, x1 - x0 + 1, y1 - y0 + 1, CLASS_TARGET))

    img = np.clip(img, 0.0, 1.0)
    image = np.round(img * 255.0).astype(np.uint8)
    boxes_arr = np.array(boxes, dtype=np.int64).reshape(len(boxes), 5)
    return image, boxes_arr, label_map, instance_map, targets


# -- pixmap I/O --------------------------------------------------------------

def write_ppm(path, image):
    """Binary P6, 8-bit. ``image`` is uint8 with shape (3, H, W)."""
    _, h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(image.transpose(1, 2, 0)).tobytes())


def write_pgm(path, gray):
    """Binary P5, 8-bit. ``gray`` is uint8 with shape (H, W)."""
    h, w = gray.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(gray).tobytes())


def _read_pnm_header(fh, magic, path):
    if fh.read(2) != magic:
        raise FormatError(f"{path}: not a {magic.decode()} file")
    fields = []
    while len(fields) < 3:
        tok = b""
        ch = fh.read(1)
        while ch.isspace():
            ch = fh.read(1)
        if ch == b"#":
            fh.readline()
            continue
        while ch and not ch.isspace():
            tok += ch
            ch = fh.read(1)
        if not tok.isdigit():
            raise FormatError(f"{path}: malformed header token {tok!r}")
        fields.append(int(tok))
    w, h, maxval = fields
    if maxval != 255:
        raise FormatError(f"{path}: unsupported max value {maxval}")
    return w, h


def read_ppm(path):
    with open(path, "rb") as fh:
        w, h = _read_pnm_header(fh, b"P6", path)
        payload = fh.read(3 * w * h)
        if len(payload) != 3 * w * h:
            raise FormatError(f"{path}: truncated pixel data")
        return np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3).transpose(2, 0, 1).copy()


def read_pgm(path):
    with open(path, "rb") as fh:
        w, h = _read_pnm_header(fh, b"P5", path)
        payload = fh.read(w * h)
        if len(payload) != w * h:
            raise FormatError(f"{path}: truncated pixel data")
        return np.frombuffer(payload, dtype=np.uint8).reshape(h, w).copy()


def write_boxes(path, boxes):
    lines = [f"{x} {y} {w} {h} {c}" for x, y, w, h, c in boxes.tolist()]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for line in lines:
            fh.write(line + "\n")


def read_boxes(path):
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for ln, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 5:
                raise FormatError(f"{path}:{ln}: expected 'x y w h class', got {line!r}")
            try:
                rows.append([int(p) for p in parts])
            except ValueError as exc:
                raise FormatError(f"{path}:{ln}: non-integer field") from exc
    return np.array(rows, dtype=np.int64).reshape(len(rows), 5)


# -- dataset directories ------------------------------------------------------

_SPEC_KEYS = ("image_size", "target_count_range", "target_size_range",
              "distractor_count_range", "background_style", "contrast", "seed")


def spec_to_lines(spec):
    return [
        f"image_size={spec.image_size[0]}x{spec.image_size[1]}",
        f"target_count_range={spec.target_count_range[0]}:{spec.target_count_range[1]}",
        f"target_size_range={spec.target_size_range[0]}:{spec.target_size_range[1]}",
        f"distractor_count_range={spec.distractor_count_range[0]}:{spec.distractor_count_range[1]}",
        f"background_style={spec.background_style}",
        f"contrast={spec.contrast!r}",
        f"seed={spec.seed}",
    ]


def spec_from_items(items):
    def pair(value, sep, cast):
        lo, hi = value.split(sep)
        return (cast(lo), cast(hi))

    try:
        return SceneSpec(
            image_size=pair(items["image_size"], "x", int),
            target_count_range=pair(items["target_count_range"], ":", int),
            target_size_range=pair(items["target_size_range"], ":", int),
            distractor_count_range=pair(items["distractor_count_range"], ":", int),
            background_style=items["background_style"],
            contrast=float(items["contrast"]),
            seed=int(items["seed"]),
        )
    except KeyError as exc:
        raise FormatError(f"manifest missing spec key {exc.args[0]!r}") from exc
    except ValueError as exc:
        raise FormatError(f"malformed spec value: {exc}") from exc


def generate_dataset(spec, n_images, annotation_kind, out_dir, force=False):
    """Render ``n_images`` scenes and write them plus a manifest to ``out_dir``."""
    spec.validate()
    if n_images < 1:
        raise ConfigError(f"n_images must be >= 1, got {n_images}")
    if annotation_kind not in ANNOTATION_KINDS:
        raise ConfigError(
            f"unknown annotation kind {annotation_kind!r}; expected one of {ANNOTATION_KINDS}"
        )
    manifest = os.path.join(out_dir, "manifest.txt")
    if os.path.exists(manifest) and not force:
        raise ConfigError(f"{out_dir} already contains a dataset; pass force to overwrite")
    os.makedirs(out_dir, exist_ok=True)

    names = []
    for idx in range(n_images):
        image, boxes, label_map, instance_map, _ = render_scene(spec, idx)
        name = f"img_{idx:05d}"
        write_ppm(os.path.join(out_dir, name + ".ppm"), image)
        if annotation_kind in ("boxes", "both"):
            write_boxes(os.path.join(out_dir, name + ".boxes.txt"), boxes)
        if annotation_kind in ("masks", "both"):
            write_pgm(os.path.join(out_dir, name + ".labels.pgm"), label_map)
            write_pgm(os.path.join(out_dir, name + ".inst.pgm"), instance_map)
        names.append(name)

    with open(manifest, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("# xcnet dataset manifest\n")
        fh.write(f"kind={annotation_kind}\n")
        fh.write(f"n_images={n_images}\n")
        for line in spec_to_lines(spec):
            fh.write(line + "\n")
        fh.write("samples:\n")
        for name in names:
            fh.write(name + "\n")
    return manifest


def load_dataset(directory):
    """Read a dataset directory written by generate_dataset."""
    manifest = os.path.join(directory, "manifest.txt")
    if not os.path.exists(manifest):
        raise DataError(f"no manifest.txt in {directory}")
    items = {}
    names = []
    in_samples = False
    with open(manifest, "r", encoding="utf-8") as fh:
        for ln, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if line == "samples:":
                in_samples = True
                continue
            if in_samples:
                names.append(line)
            else:
                if "=" not in line:
                    raise FormatError(f"{manifest}:{ln}: expected key=value, got {line!r}")
                key, value = line.split("=", 1)
                items[key] = value
    kind = items.get("kind")
    if kind not in ANNOTATION_KINDS:
        raise FormatError(f"{manifest}: bad or missing annotation kind {kind!r}")
    spec = spec_from_items(items)
    samples = []
    for name in names:
        image = read_ppm(os.path.join(directory, name + ".ppm"))
        sample = Sample(name=name, image=image)
        if kind in ("boxes", "both"):
            sample.boxes = read_boxes(os.path.join(directory, name + ".boxes.txt"))
        if kind in ("masks", "both"):
            sample.label_map = read_pgm(os.path.join(directory, name + ".labels.pgm"))
            sample.instance_map = read_pgm(os.path.join(directory, name + ".inst.pgm"))
        samples.append(sample)
    return Dataset(spec=spec, kind=kind, samples=samples)


def save_dataset(dataset, out_dir, force=False):
    """Re-serialize an in-memory dataset (used for round-trip checks)."""
    manifest = os.path.join(out_dir, "manifest.txt")
    if os.path.exists(manifest) and not force:
        raise ConfigError(f"{out_dir} already contains a dataset; pass force to overwrite")
    os.makedirs(out_dir, exist_ok=True)
    for sample in dataset.samples:
        write_ppm(os.path.join(out_dir, sample.name + ".ppm"), sample.image)
        if dataset.kind in ("boxes", "both"):
            write_boxes(os.path.join(out_dir, sample.name + ".boxes.txt"), sample.boxes)
        if dataset.kind in ("masks", "both"):
            write_pgm(os.path.join(out_dir, sample.name + ".labels.pgm"), sample.label_map)
            write_pgm(os.path.join(out_dir, sample.name + ".inst.pgm"), sample.instance_map)
    with open(manifest, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("# xcnet dataset manifest\n")
        fh.write(f"kind={dataset.kind}\n")
        fh.write(f"n_images={len(dataset.samples)}\n")
        for line in spec_to_lines(dataset.spec):
            fh.write(line + "\n")
        fh.write("samples:\n")
        for sample in dataset.samples:
            fh.write(sample.name + "\n")
    return manifest


# -- augmentation -------------------------------------------------------------

def crop_patch(sample, patch_size, seed):
    """Random crop with adjusted annotations.

    Boxes are clipped to the crop and dropped when less than 25% of the
    original box area remains; maps are cropped exactly.
    """
    ph, pw = patch_size
    h, w = sample.height, sample.width
    if ph > h or pw > w:
        raise DataError(f"patch {patch_size} larger than image {(h, w)}")
    rng = np.random.default_rng(np.random.SeedSequence([seed]))
    y0 = int(rng.integers(0, h - ph + 1))
    x0 = int(rng.integers(0, w - pw + 1))
    return crop_at(sample, x0, y0, ph, pw)


def crop_at(sample, x0, y0, ph, pw):
    """Crop with an explicit top-left corner; same annotation rules as crop_patch."""
    out = Sample(name=sample.name, image=sample.image[:, y0:y0 + ph, x0:x0 + pw].copy())
    if sample.boxes is not None:
        kept = []
        for x, y, w, h, cls in sample.boxes.tolist():
            ix0 = max(x, x0)
            iy0 = max(y, y0)
            ix1 = min(x + w, x0 + pw)
            iy1 = min(y + h, y0 + ph)
            inter_w = ix1 - ix0
            inter_h = iy1 - iy0
            if inter_w <= 0 or inter_h <= 0:
                continue
            if inter_w * inter_h < 0.25 * w * h:
                continue
            kept.append([ix0 - x0, iy0 - y0, inter_w, inter_h, cls])
        out.boxes = np.array(kept, dtype=np.int64).reshape(len(kept), 5)
    if sample.label_map is not None:
        out.label_map = sample.label_map[y0:y0 + ph, x0:x0 + pw].copy()
    if sample.instance_map is not None:
        out.instance_map = sample.instance_map[y0:y0 + ph, x0:x0 + pw].copy()
    return out


def flip_horizontal(sample):
    """Mirror the image and its annotations left-right."""
    out = Sample(name=sample.name, image=sample.image[:, :, ::-1].copy())
    if sample.boxes is not None:
        w_img = sample.width
        flipped = sample.boxes.copy()
        flipped[:, 0] = w_img - sample.boxes[:, 0] - sample.boxes[:, 2]
        out.boxes = flipped
    if sample.label_map is not None:
        out.label_map = sample.label_map[:, ::-1].copy()
    if sample.instance_map is not None:
        out.instance_map = sample.instance_map[:, ::-1].copy()
    return out
