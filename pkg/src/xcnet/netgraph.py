"""Network construction: single-task streams and their multi-task compositions.

A stream is a stack of 3x3 conv+ReLU units with 2x2 max-pools after selected
units, followed by a task head.  Two streams with identical unit layouts can
be composed into:

* a cross-connected net, where each unit's output is
  ``x_{n+1}^A = f_n^A(x_n^A) + g_n^A(f_n^B(x_n^B))`` (and symmetrically for
  B), with ``f`` the original conv+ReLU and ``g`` a 1x1 conv+ReLU connection;
* a cross-stitch net, where the connection is a bare per-channel scale
  instead of a 1x1 conv;
* a shared net, where the first k pooling blocks' convs are one set of
  weights used by both tasks.

Pooling is applied to both streams synchronously, after the addition.
No extra ReLU follows the addition: both summands are already post-ReLU.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ConvParams, Tensor
from .errors import ConfigError, FormatError, NumericError

TASK_DETECTION = "detection"
TASK_SEGMENTATION = "segmentation"

MODE_SINGLE_A = "single_a"
MODE_SINGLE_B = "single_b"
MODE_CROSS_CONNECTED = "cross_connected"
MODE_CROSS_STITCH = "cross_stitch"
MODE_SHARED = "shared"

# Number of shared conv layers for each shared-prefix depth (index of the
# top pooling layer -> conv count), for the 10-unit default layout.
SHARE_LAYER_COUNTS = {1: 2, 2: 4, 3: 7, 4: 10}

WEIGHT_MAGIC = b"XCNW"
WEIGHT_VERSION = 1
_CONFIG_RECORD = "__config__"


@dataclass(frozen=True)
class DetectionHead:
    """RPN-style head: 3x3 conv + ReLU, then 1x1 conv to A*(4+2) channels.

    Channel layout per anchor: 4 box deltas then 2 class logits
    (background, target).
    """

    kind: str = TASK_DETECTION
    mid_channels: int = 64
    anchor_shapes: tuple = ((12, 12), (20, 20), (28, 28))

    @property
    def num_anchors(self):
        return len(self.anchor_shapes)

    @property
    def out_channels(self):
        return self.num_anchors * 6


@dataclass(frozen=True)
class SegmentationHead:
    """Pixel-labelling head: refine at 1/4 resolution, then upsample to full.

    3x3 conv + ReLU at the stream's output stride, nearest-upsample to
    stride 4, 3x3 conv + ReLU, 1x1 conv to class logits, nearest-upsample
    to full resolution.
    """

    kind: str = TASK_SEGMENTATION
    mid_channels: int = 32
    refine_channels: int = 16
    n_classes: int = 3


@dataclass(frozen=True)
class StreamSpec:
    """Layout of one single-task stream."""

    units: tuple  # ordered (c_in, c_out) pairs; kernels are 3x3, pad 1
    pool_after: frozenset  # 1-based unit indices followed by a 2x2 max-pool
    head: object  # DetectionHead or SegmentationHead

    def __post_init__(self):
        object.__setattr__(self, "units", tuple(tuple(u) for u in self.units))
        object.__setattr__(self, "pool_after", frozenset(int(i) for i in self.pool_after))

    def validate(self):
        if not self.units:
            raise ConfigError("stream spec has an empty unit list")
        for i in range(1, len(self.units)):
            if self.units[i][0] != self.units[i - 1][1]:
                raise ConfigError(
                    f"channel mismatch between unit {i} (out {self.units[i - 1][1]}) "
                    f"and unit {i + 1} (in {self.units[i][0]})"
                )
        for idx in self.pool_after:
            if not 1 <= idx <= len(self.units):
                raise ConfigError(f"pool position {idx} outside 1..{len(self.units)}")

    @property
    def output_stride(self):
        return 2 ** len(self.pool_after)

    @property
    def out_channels(self):
        return self.units[-1][1]


def default_stream_spec(task, widths=(8, 8, 16, 16, 32, 32, 32, 64, 64, 64),
                        in_channels=3, head=None):
    """The VGG16-proportioned 10-unit layout with pools after units 2, 4, 7, 10."""
    units = []
    c_prev = in_channels
    for c in widths:
        units.append((c_prev, c))
        c_prev = c
    if head is None:
        head = DetectionHead() if task == TASK_DETECTION else SegmentationHead()
    return StreamSpec(units=tuple(units), pool_after=frozenset({2, 4, 7, 10}), head=head)


def _he_conv(rng, c_in, c_out, k, dtype=np.float32):
    fan_in = c_in * k * k
    std = np.sqrt(2.0 / fan_in)
    w = rng.normal(0.0, std, size=(c_out, c_in, k, k)).astype(dtype)
    b = np.zeros(c_out, dtype=dtype)
    return ConvParams(Tensor(w, requires_grad=True), Tensor(b, requires_grad=True),
                      stride=1, padding=(k - 1) // 2)


def _gaussian_conv(rng, c_in, c_out, std, dtype=np.float32):
    w = rng.normal(0.0, std, size=(c_out, c_in, 1, 1)).astype(dtype)
    b = np.zeros(c_out, dtype=dtype)
    return ConvParams(Tensor(w, requires_grad=True), Tensor(b, requires_grad=True),
                      stride=1, padding=0)


def _init_head(rng, head, in_channels, dtype=np.float32):
    if isinstance(head, DetectionHead):
        return {
            "conv": _he_conv(rng, in_channels, head.mid_channels, 3, dtype),
            "out": _he_conv(rng, head.mid_channels, head.out_channels, 1, dtype),
        }
    if isinstance(head, SegmentationHead):
        return {
            "conv": _he_conv(rng, in_channels, head.mid_channels, 3, dtype),
            "refine": _he_conv(rng, head.mid_channels, head.refine_channels, 3, dtype),
            "out": _he_conv(rng, head.refine_channels, head.n_classes, 1, dtype),
        }
    raise ConfigError(f"unknown head descriptor: {head!r}")


_HEAD_PARAM_ORDER = {TASK_DETECTION: ("conv", "out"),
                     TASK_SEGMENTATION: ("conv", "refine", "out")}


@dataclass
class CrossUnit:
    """Connection parameters of one cross-connected unit."""

    g_a: ConvParams  # maps B-stream channels into the A stream
    g_b: ConvParams  # maps A-stream channels into the B stream
    enabled: bool = True


@dataclass
class StitchUnit:
    """Per-channel scale factors applied to the cross term of one unit."""

    s_a: Tensor  # length C_A, scales f_B's maps entering stream A
    s_b: Tensor  # length C_B, scales f_A's maps entering stream B


@dataclass
class MultiTaskNet:
    mode: str
    spec_a: StreamSpec | None
    spec_b: StreamSpec | None
    units_a: list = field(default_factory=list)  # ConvParams per unit
    units_b: list = field(default_factory=list)
    cross_units: list = field(default_factory=list)  # CrossUnit | StitchUnit | None
    cross_depth: int = 0
    shared_layers: int = 0  # conv count shared in MODE_SHARED
    heads: dict = field(default_factory=dict)  # task letter -> param dict

    @property
    def n_units(self):
        return len(self.units_a) if self.units_a else len(self.units_b)

    def head_spec(self, which):
        spec = self.spec_a if which == "a" else self.spec_b
        return spec.head if spec is not None else None

    def parameters(self):
        """Ordered (name, Tensor) pairs; shared tensors appear once."""
        out = []
        seen = set()

        def _add(name, tensor):
            if id(tensor) in seen:
                return
            seen.add(id(tensor))
            out.append((name, tensor))

        def _add_conv(prefix, conv):
            _add(prefix + "/w", conv.weight)
            _add(prefix + "/b", conv.bias)

        for i, conv in enumerate(self.units_a, start=1):
            tag = "s" if self.mode == MODE_SHARED and i <= self.shared_layers else "a"
            _add_conv(f"{tag}/unit{i:02d}", conv)
        for i, conv in enumerate(self.units_b, start=1):
            if self.mode == MODE_SHARED and i <= self.shared_layers:
                continue  # same tensors as units_a's shared prefix
            _add_conv(f"b/unit{i:02d}", conv)
        for i, cu in enumerate(self.cross_units, start=1):
            if cu is None:
                continue
            if isinstance(cu, CrossUnit):
                _add_conv(f"cross{i:02d}/ga", cu.g_a)
                _add_conv(f"cross{i:02d}/gb", cu.g_b)
            else:
                _add(f"cross{i:02d}/sa", cu.s_a)
                _add(f"cross{i:02d}/sb", cu.s_b)
        for which in ("a", "b"):
            if which not in self.heads:
                continue
            spec = self.head_spec(which)
            for part in _HEAD_PARAM_ORDER[spec.kind]:
                _add_conv(f"head_{which}/{part}", self.heads[which][part])
        return out

    def parameter_count(self):
        return sum(int(t.data.size) for _, t in self.parameters())

    def cast(self, dtype):
        """Deep copy with all parameters converted to ``dtype``."""
        clone = MultiTaskNet(mode=self.mode, spec_a=self.spec_a, spec_b=self.spec_b,
                             cross_depth=self.cross_depth, shared_layers=self.shared_layers)
        cache = {}

        def _conv(conv):
            if id(conv) not in cache:
                cache[id(conv)] = conv.cast(dtype)
            return cache[id(conv)]

        clone.units_a = [_conv(c) for c in self.units_a]
        clone.units_b = [_conv(c) for c in self.units_b]
        for cu in self.cross_units:
            if cu is None:
                clone.cross_units.append(None)
            elif isinstance(cu, CrossUnit):
                clone.cross_units.append(CrossUnit(_conv(cu.g_a), _conv(cu.g_b), cu.enabled))
            else:
                clone.cross_units.append(StitchUnit(
                    Tensor(cu.s_a.data.astype(dtype), requires_grad=True),
                    Tensor(cu.s_b.data.astype(dtype), requires_grad=True)))
        for which, parts in self.heads.items():
            clone.heads[which] = {k: _conv(v) for k, v in parts.items()}
        return clone


def build_single_stream(spec, seed, task="a", dtype=np.float32):
    """He-initialized single-task net; bit-identical parameters for equal seeds."""
    spec.validate()
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed))
    mode = MODE_SINGLE_A if task == "a" else MODE_SINGLE_B
    units = [_he_conv(rng, c_in, c_out, 3, dtype) for c_in, c_out in spec.units]
    head = _init_head(rng, spec.head, spec.out_channels, dtype)
    net = MultiTaskNet(mode=mode,
                       spec_a=spec if task == "a" else None,
                       spec_b=spec if task == "b" else None)
    if task == "a":
        net.units_a = units
    else:
        net.units_b = units
    net.heads[task] = head
    return net


def _clone_conv(conv):
    return ConvParams(Tensor(conv.weight.data.copy(), requires_grad=True),
                      Tensor(conv.bias.data.copy(), requires_grad=True),
                      conv.stride, conv.padding)


def _clone_head(parts):
    return {k: _clone_conv(v) for k, v in parts.items()}


def _check_composable(net_a, net_b):
    if net_a.mode != MODE_SINGLE_A or net_b.mode != MODE_SINGLE_B:
        raise ConfigError("composition expects a single-task 'a' net and a single-task 'b' net")
    ua, ub = net_a.spec_a.units, net_b.spec_b.units
    if ua != ub:
        raise ConfigError(f"stream unit layouts differ: {ua} vs {ub}")
    if net_a.spec_a.pool_after != net_b.spec_b.pool_after:
        raise ConfigError("stream pool positions differ")


def compose_cross_connected(net_a, net_b, cross_depth, init_std=0.1, seed=0):
    """Copy both pre-trained streams and insert 1x1 conv+ReLU connections.

    Connection weights are Gaussian(0, init_std^2) with zero bias; heads are
    copied unchanged.
    """
    _check_composable(net_a, net_b)
    n_units = len(net_a.units_a)
    if not 0 <= cross_depth <= n_units:
        raise ConfigError(f"cross_depth {cross_depth} outside 0..{n_units}")
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed))
    dtype = net_a.units_a[0].weight.data.dtype
    net = MultiTaskNet(mode=MODE_CROSS_CONNECTED, spec_a=net_a.spec_a, spec_b=net_b.spec_b,
                       cross_depth=int(cross_depth))
    net.units_a = [_clone_conv(c) for c in net_a.units_a]
    net.units_b = [_clone_conv(c) for c in net_b.units_b]
    for i, (c_in, c_out) in enumerate(net_a.spec_a.units, start=1):
        if i <= cross_depth:
            c_a = c_out  # both streams share widths, checked above
            g_a = _gaussian_conv(rng, c_a, c_a, init_std, dtype)
            g_b = _gaussian_conv(rng, c_a, c_a, init_std, dtype)
            net.cross_units.append(CrossUnit(g_a, g_b))
        else:
            net.cross_units.append(None)
    net.heads["a"] = _clone_head(net_a.heads["a"])
    net.heads["b"] = _clone_head(net_b.heads["b"])
    return net


def compose_cross_stitch(net_a, net_b, cross_depth, seed=0, init_value=0.1):
    """Like compose_cross_connected but with per-channel scales on the cross term."""
    _check_composable(net_a, net_b)
    n_units = len(net_a.units_a)
    if not 0 <= cross_depth <= n_units:
        raise ConfigError(f"cross_depth {cross_depth} outside 0..{n_units}")
    dtype = net_a.units_a[0].weight.data.dtype
    net = MultiTaskNet(mode=MODE_CROSS_STITCH, spec_a=net_a.spec_a, spec_b=net_b.spec_b,
                       cross_depth=int(cross_depth))
    net.units_a = [_clone_conv(c) for c in net_a.units_a]
    net.units_b = [_clone_conv(c) for c in net_b.units_b]
    for i, (c_in, c_out) in enumerate(net_a.spec_a.units, start=1):
        if i <= cross_depth:
            s_a = Tensor(np.full(c_out, init_value, dtype=dtype), requires_grad=True)
            s_b = Tensor(np.full(c_out, init_value, dtype=dtype), requires_grad=True)
            net.cross_units.append(StitchUnit(s_a, s_b))
        else:
            net.cross_units.append(None)
    net.heads["a"] = _clone_head(net_a.heads["a"])
    net.heads["b"] = _clone_head(net_b.heads["b"])
    return net


def compose_shared(net_a, net_b, k):
    """Share the conv layers up to the k-th pooling block; prefix weights from net A."""
    _check_composable(net_a, net_b)
    if k not in SHARE_LAYER_COUNTS:
        raise ConfigError(f"shared prefix index must be 1..4, got {k}")
    n_shared = SHARE_LAYER_COUNTS[k]
    if n_shared > len(net_a.units_a):
        raise ConfigError(
            f"share{k} needs {n_shared} conv units but the streams have {len(net_a.units_a)}"
        )
    net = MultiTaskNet(mode=MODE_SHARED, spec_a=net_a.spec_a, spec_b=net_b.spec_b,
                       shared_layers=n_shared)
    shared = [_clone_conv(c) for c in net_a.units_a[:n_shared]]
    net.units_a = shared + [_clone_conv(c) for c in net_a.units_a[n_shared:]]
    net.units_b = list(shared) + [_clone_conv(c) for c in net_b.units_b[n_shared:]]
    net.cross_units = [None] * len(net_a.units_a)
    net.heads["a"] = _clone_head(net_a.heads["a"])
    net.heads["b"] = _clone_head(net_b.heads["b"])
    return net


def _unit_forward(conv, x):
    return ad.relu(ad.conv2d(x, conv))


def forward_multitask(net, image):
    """Run the stream(s) up to the head inputs.

    Returns (head_input_a, head_input_b); a missing stream yields None.
    For the first unit both stream inputs are the image itself.
    """
    if net.mode == MODE_SINGLE_A:
        return _forward_single(net.units_a, net.spec_a, image), None
    if net.mode == MODE_SINGLE_B:
        return None, _forward_single(net.units_b, net.spec_b, image)
    if net.mode == MODE_SHARED:
        return _forward_shared(net, image)
    return _forward_crossed(net, image)


def _forward_single(units, spec, x):
    for i, conv in enumerate(units, start=1):
        x = _unit_forward(conv, x)
        if i in spec.pool_after:
            x = ad.maxpool2x2(x)
    return x


def _forward_shared(net, image):
    x = image
    pool_after = net.spec_a.pool_after
    for i in range(1, net.shared_layers + 1):
        x = _unit_forward(net.units_a[i - 1], x)
        if i in pool_after:
            x = ad.maxpool2x2(x)
    xa = xb = x
    for i in range(net.shared_layers + 1, net.n_units + 1):
        xa = _unit_forward(net.units_a[i - 1], xa)
        xb = _unit_forward(net.units_b[i - 1], xb)
        if i in pool_after:
            xa = ad.maxpool2x2(xa)
            xb = ad.maxpool2x2(xb)
    return xa, xb


def _forward_crossed(net, image):
    xa = xb = image
    pool_after = net.spec_a.pool_after
    for i in range(1, net.n_units + 1):
        fa = _unit_forward(net.units_a[i - 1], xa)
        fb = _unit_forward(net.units_b[i - 1], xb)
        cu = net.cross_units[i - 1]
        if cu is not None and getattr(cu, "enabled", True):
            if isinstance(cu, CrossUnit):
                xa = ad.add(fa, ad.relu(ad.conv2d(fb, cu.g_a)))
                xb = ad.add(fb, ad.relu(ad.conv2d(fa, cu.g_b)))
            else:
                xa = ad.add(fa, ad.channel_scale(fb, cu.s_a))
                xb = ad.add(fb, ad.channel_scale(fa, cu.s_b))
        else:
            xa, xb = fa, fb
        if i in pool_after:
            xa = ad.maxpool2x2(xa)
            xb = ad.maxpool2x2(xb)
    return xa, xb


def head_forward(net, which, feature):
    """Apply one task head to its stream output."""
    spec = net.head_spec(which)
    parts = net.heads.get(which)
    if spec is None or parts is None:
        raise ConfigError(f"net has no '{which}' head")
    if isinstance(spec, DetectionHead):
        h = ad.relu(ad.conv2d(feature, parts["conv"]))
        return ad.conv2d(h, parts["out"])
    stride = (net.spec_a or net.spec_b).output_stride
    h = ad.relu(ad.conv2d(feature, parts["conv"]))
    if stride > 4:
        h = ad.upsample_nearest(h, stride // 4)
        final_up = 4
    else:
        final_up = stride
    h = ad.relu(ad.conv2d(h, parts["refine"]))
    logits = ad.conv2d(h, parts["out"])
    return ad.upsample_nearest(logits, final_up)


def forward_task(net, which, image):
    """Convenience: stream forward plus the head for one task."""
    ha, hb = forward_multitask(net, image)
    feature = ha if which == "a" else hb
    if feature is None:
        raise ConfigError(f"net mode {net.mode} has no '{which}' stream")
    return head_forward(net, which, feature)


def added_connection_parameters(net):
    """Parameter count added by the connections over the two single nets."""
    total = 0
    for cu in net.cross_units:
        if isinstance(cu, CrossUnit):
            total += cu.g_a.weight.data.size + cu.g_a.bias.data.size
            total += cu.g_b.weight.data.size + cu.g_b.bias.data.size
        elif isinstance(cu, StitchUnit):
            total += cu.s_a.data.size + cu.s_b.data.size
    return total


# -- serialization ----------------------------------------------------------

_MODE_IDS = {MODE_SINGLE_A: 0, MODE_SINGLE_B: 1, MODE_CROSS_CONNECTED: 2,
             MODE_CROSS_STITCH: 3, MODE_SHARED: 4}
_MODE_NAMES = {v: k for k, v in _MODE_IDS.items()}


def _head_config(head):
    if isinstance(head, DetectionHead):
        return {"kind": head.kind, "mid": head.mid_channels,
                "anchors": [list(s) for s in head.anchor_shapes]}
    return {"kind": head.kind, "mid": head.mid_channels,
            "refine": head.refine_channels, "classes": head.n_classes}


def _head_from_config(cfg):
    if cfg["kind"] == TASK_DETECTION:
        return DetectionHead(mid_channels=cfg["mid"],
                             anchor_shapes=tuple(tuple(s) for s in cfg["anchors"]))
    return SegmentationHead(mid_channels=cfg["mid"], refine_channels=cfg["refine"],
                            n_classes=cfg["classes"])


def _net_config(net):
    spec = net.spec_a or net.spec_b
    cfg = {
        "mode": net.mode,
        "units": [list(u) for u in spec.units],
        "pools": sorted(spec.pool_after),
        "cross_depth": net.cross_depth,
        "shared_layers": net.shared_layers,
        "heads": {},
    }
    if net.spec_a is not None:
        cfg["heads"]["a"] = _head_config(net.spec_a.head)
    if net.spec_b is not None:
        cfg["heads"]["b"] = _head_config(net.spec_b.head)
    return cfg


def _skeleton_from_config(cfg):
    """Rebuild an uninitialized net (zero parameters) matching a saved config."""
    mode = cfg["mode"]
    units = tuple(tuple(u) for u in cfg["units"])
    pools = frozenset(cfg["pools"])
    heads = cfg["heads"]
    spec_a = StreamSpec(units, pools, _head_from_config(heads["a"])) if "a" in heads else None
    spec_b = StreamSpec(units, pools, _head_from_config(heads["b"])) if "b" in heads else None

    def _zero_conv(c_in, c_out, k):
        return ConvParams(Tensor(np.zeros((c_out, c_in, k, k), dtype=np.float32), requires_grad=True),
                          Tensor(np.zeros(c_out, dtype=np.float32), requires_grad=True),
                          stride=1, padding=(k - 1) // 2)

    net = MultiTaskNet(mode=mode, spec_a=spec_a, spec_b=spec_b,
                       cross_depth=cfg["cross_depth"], shared_layers=cfg["shared_layers"])
    if mode != MODE_SINGLE_B:
        net.units_a = [_zero_conv(ci, co, 3) for ci, co in units]
    if mode != MODE_SINGLE_A:
        if mode == MODE_SHARED:
            net.units_b = net.units_a[:net.shared_layers] + \
                [_zero_conv(ci, co, 3) for ci, co in units[net.shared_layers:]]
        else:
            net.units_b = [_zero_conv(ci, co, 3) for ci, co in units]
    for i, (ci, co) in enumerate(units, start=1):
        if mode == MODE_CROSS_CONNECTED and i <= net.cross_depth:
            net.cross_units.append(CrossUnit(_zero_conv(co, co, 1), _zero_conv(co, co, 1)))
        elif mode == MODE_CROSS_STITCH and i <= net.cross_depth:
            net.cross_units.append(StitchUnit(
                Tensor(np.zeros(co, dtype=np.float32), requires_grad=True),
                Tensor(np.zeros(co, dtype=np.float32), requires_grad=True)))
        else:
            net.cross_units.append(None)

    def _zero_head(head, c_in):
        if isinstance(head, DetectionHead):
            return {"conv": _zero_conv(c_in, head.mid_channels, 3),
                    "out": _zero_conv(head.mid_channels, head.out_channels, 1)}
        return {"conv": _zero_conv(c_in, head.mid_channels, 3),
                "refine": _zero_conv(head.mid_channels, head.refine_channels, 3),
                "out": _zero_conv(head.refine_channels, head.n_classes, 1)}

    c_last = units[-1][1]
    if spec_a is not None and mode != MODE_SINGLE_B:
        net.heads["a"] = _zero_head(spec_a.head, c_last)
    if spec_b is not None and mode != MODE_SINGLE_A:
        net.heads["b"] = _zero_head(spec_b.head, c_last)
    return net


def save_weights(net, path):
    """Write the weight file: magic, version, record count, then records.

    Each record is: name length (u16 LE), UTF-8 name, rank (u8), dims
    (u32 LE each), payload (f32 LE, row-major).  The first record carries
    the architecture config as JSON appended to its name.
    """
    params = net.parameters()
    records = [(_CONFIG_RECORD + json.dumps(_net_config(net), sort_keys=True,
                                            separators=(",", ":")),
                np.zeros(1, dtype=np.float32))]
    for name, tensor in params:
        if not np.all(np.isfinite(tensor.data)):
            raise NumericError(f"refusing to save non-finite parameter {name}")
        records.append((name, tensor.data))
    blob = bytearray()
    blob += WEIGHT_MAGIC
    blob += bytes([WEIGHT_VERSION])
    blob += struct.pack("<I", len(records))
    for name, arr in records:
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise FormatError(f"record name too long: {len(encoded)} bytes")
        blob += struct.pack("<H", len(encoded))
        blob += encoded
        blob += bytes([arr.ndim])
        for d in arr.shape:
            blob += struct.pack("<I", d)
        blob += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(bytes(blob))


_MAX_DIM = 1 << 31


def _read_exact(fh, n, what):
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated weight file while reading {what}")
    return buf


def load_weights(path):
    """Read a weight file back into a MultiTaskNet; round-trips byte-exactly."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != WEIGHT_MAGIC:
            raise FormatError(f"bad magic {magic!r}, expected {WEIGHT_MAGIC!r}")
        version = _read_exact(fh, 1, "version")[0]
        if version != WEIGHT_VERSION:
            raise FormatError(f"unsupported weight file version {version}")
        (count,) = struct.unpack("<I", _read_exact(fh, 4, "record count"))
        records = []
        for idx in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2, f"record {idx} name length"))
            name = _read_exact(fh, name_len, f"record {idx} name").decode("utf-8")
            rank = _read_exact(fh, 1, f"record {idx} rank")[0]
            dims = []
            for d in range(rank):
                (dim,) = struct.unpack("<I", _read_exact(fh, 4, f"record {idx} dim {d}"))
                if dim > _MAX_DIM:
                    raise FormatError(f"record {name}: dimension overflow ({dim})")
                dims.append(dim)
            size = 1
            for d in dims:
                size *= d
                if size > _MAX_DIM:
                    raise FormatError(f"record {name}: payload overflow")
            payload = _read_exact(fh, 4 * size, f"record {idx} payload")
            arr = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
            records.append((name, arr))
        if fh.read(1):
            raise FormatError("trailing bytes after the last record")

    if not records or not records[0][0].startswith(_CONFIG_RECORD):
        raise FormatError("missing architecture config record")
    try:
        cfg = json.loads(records[0][0][len(_CONFIG_RECORD):])
    except json.JSONDecodeError as exc:
        raise FormatError(f"malformed architecture config: {exc}") from exc

    net = _skeleton_from_config(cfg)
    expected = net.parameters()
    stored = records[1:]
    if len(stored) != len(expected):
        raise FormatError(
            f"record count mismatch: file has {len(stored)} parameter records, "
            f"architecture needs {len(expected)}"
        )
    for (name, arr), (want_name, tensor) in zip(stored, expected):
        if name != want_name:
            raise FormatError(f"unexpected record {name!r}, wanted {want_name!r}")
        if arr.shape != tensor.data.shape:
            raise FormatError(
                f"record {name}: shape {arr.shape} does not match expected {tensor.data.shape}"
            )
        tensor.data[...] = arr
    return net
