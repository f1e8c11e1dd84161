"""Gradient-check suite over operators and whole composed networks.

Central finite differences are only meaningful where the loss is smooth in
a 2-epsilon neighbourhood of the checked point, so composite-graph
instances are built kink-free:

* conv weights are positive (scaled by fan-in) and biases positive, so
  every ReLU pre-activation stays strictly positive under perturbation;
* smooth-L1 targets are derived from the unperturbed predictions, keeping
  |pred - target| clear of the |d| = 1 seam;
* instances whose max-pool windows have a top-two gap small enough to flip
  under perturbation are rejected and rebuilt from the next derived seed.

Operator-level checks (in the test suite) exercise both sides of each
nonlinearity separately with nudged inputs.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import netgraph as ng
from . import trainer as tr
from .autodiff import Tensor, grad_check
from .errors import NumericError

TOLERANCE = 1e-3
EPSILON = 1e-3
# epsilon-sized parameter steps shift relative window gaps by a few 1e-3;
# demand an order of magnitude more before accepting an instance
_MIN_POOL_GAP = 1e-2
_MAX_INSTANCE_ATTEMPTS = 60


# wide positive spread keeps spatial contrast through stacked convs, so
# max-pool windows stay well separated
_W_SPREAD = (0.01, 5.0)


def _positive_conv(rng, c_in, c_out, k):
    fan = c_in * k * k
    w = rng.uniform(_W_SPREAD[0] / fan, _W_SPREAD[1] / fan, size=(c_out, c_in, k, k))
    b = rng.uniform(0.05, 0.15, size=c_out)
    return ad.ConvParams(Tensor(w, dtype=np.float64, requires_grad=True),
                         Tensor(b, dtype=np.float64, requires_grad=True),
                         stride=1, padding=(k - 1) // 2)


def _make_positive(net, rng):
    """Overwrite a float64 net's parameters with kink-free positive values."""
    for _, t in net.parameters():
        if t.data.ndim == 4:
            fan = t.data.shape[1] * t.data.shape[2] * t.data.shape[3]
            t.data[...] = rng.uniform(_W_SPREAD[0] / fan, _W_SPREAD[1] / fan,
                                      size=t.data.shape)
        else:
            t.data[...] = rng.uniform(0.05, 0.15, size=t.data.shape)
    return net


def _image(rng, shape):
    # a strong 2x2-periodic magnitude pattern survives the positive convs'
    # smoothing and keeps pool-window values separated by O(1) ratios
    n, c, h, w = shape
    ys, xs = np.mgrid[0:h, 0:w]
    pattern = 2.0 ** ((ys % 2) * 2 + (xs % 2))
    base = rng.uniform(0.5, 1.5, size=shape)
    return Tensor(base * pattern, dtype=np.float64)


def _tiny_pair(rng, units, pools):
    head_a = ng.DetectionHead(mid_channels=2, anchor_shapes=((4, 4),))
    head_b = ng.SegmentationHead(mid_channels=2, refine_channels=2, n_classes=2)
    seed_a, seed_b = int(rng.integers(1 << 30)), int(rng.integers(1 << 30))
    net_a = ng.build_single_stream(ng.StreamSpec(units, frozenset(pools), head_a),
                                   seed_a, "a", dtype=np.float64)
    net_b = ng.build_single_stream(ng.StreamSpec(units, frozenset(pools), head_b),
                                   seed_b, "b", dtype=np.float64)
    return net_a, net_b


def _seam_safe_target(pred_values, rng):
    """A smooth-L1 target with |pred - target| bounded away from 1."""
    d0 = rng.uniform(-0.5, 0.5, size=pred_values.shape)
    return pred_values - d0


def _normalizer(values, target=2.0):
    """A constant factor that brings |values| down to ~target.

    Captured once from the unperturbed forward; keeping it constant keeps
    the checked loss a fixed function of the parameters while taming both
    softmax saturation and the parameter sensitivity of the logits.
    """
    return float(target / max(np.abs(values).max(), target))


def _joint_loss(net, image, rng):
    """Detection-style + segmentation losses over both heads, seam-safe."""
    h, w = image.data.shape[2], image.data.shape[3]
    stride = net.spec_a.output_stride
    labels_a = rng.integers(0, 2, size=(1, h // stride, w // stride))
    labels_b = rng.integers(0, 2, size=(1, h, w))
    fa0, fb0 = ng.forward_multitask(net, image)
    out_a0 = ng.head_forward(net, "a", fa0)
    out_b0 = ng.head_forward(net, "b", fb0)
    scale_a = _normalizer(out_a0.data)
    scale_b = _normalizer(out_b0.data)
    reg_target = _seam_safe_target(out_a0.data[:, 0:4] * scale_a, rng)
    reg_mask = (rng.random(size=reg_target.shape) < 0.7).astype(np.float64)
    if reg_mask.sum() == 0:
        reg_mask.flat[0] = 1.0

    def loss():
        fa, fb = ng.forward_multitask(net, image)
        out_a = ad.scale(ng.head_forward(net, "a", fa), scale_a)
        reg = ad.slice_channels(out_a, 0, 4)
        cls = ad.slice_channels(out_a, 4, 6)
        l_reg = ad.smooth_l1(reg, reg_target, reg_mask)
        l_cls = ad.softmax_cross_entropy(cls, labels_a)
        out_b = ad.scale(ng.head_forward(net, "b", fb), scale_b)
        l_seg = ad.softmax_cross_entropy(out_b, labels_b)
        return ad.add(ad.add(l_reg.value, l_cls.value), l_seg.value)

    return loss


def _instance_is_pool_safe(loss_fn):
    tracker = []
    ad.pool_gap_tracker = tracker
    try:
        loss_fn()
    finally:
        ad.pool_gap_tracker = None
    return not tracker or min(tracker) > _MIN_POOL_GAP


def _checked_graph(seed, tag, composer, units, pools, image_shape):
    """Build a kink-free composed-net instance and grad-check all parameters."""
    for attempt in range(_MAX_INSTANCE_ATTEMPTS):
        rng = np.random.default_rng(np.random.SeedSequence([tag, seed, attempt]))
        net_a, net_b = _tiny_pair(rng, units, pools)
        net = _make_positive(composer(net_a, net_b, rng), rng)
        image = _image(rng, image_shape)
        loss_fn = _joint_loss(net, image, rng)
        if not _instance_is_pool_safe(loss_fn):
            continue
        params = [t for _, t in net.parameters()]
        return grad_check(loss_fn, params, epsilon=EPSILON)
    raise NumericError(f"could not build a pool-safe instance for check {tag}")


def cross_connected_check(seed):
    return _checked_graph(
        seed, 101,
        lambda a, b, rng: ng.compose_cross_connected(a, b, cross_depth=2,
                                                     seed=int(rng.integers(1 << 30))),
        units=((2, 2), (2, 2)), pools=(2,), image_shape=(1, 2, 6, 6))


def cross_stitch_check(seed):
    return _checked_graph(
        seed, 102,
        lambda a, b, rng: ng.compose_cross_stitch(a, b, cross_depth=2,
                                                  seed=int(rng.integers(1 << 30))),
        units=((2, 2), (2, 2)), pools=(2,), image_shape=(1, 2, 6, 6))


def shared_check(seed, k):
    units_for_k = {1: ((2, 2), (2, 2), (2, 2)),
                   2: ((2, 2), (2, 2), (2, 2), (2, 2), (2, 2))}
    pools_for_k = {1: (2,), 2: (2, 4)}
    return _checked_graph(
        seed, 103 + k,
        lambda a, b, rng: ng.compose_shared(a, b, k),
        units=units_for_k[k], pools=pools_for_k[k], image_shape=(1, 2, 8, 8))


def conv_relu_ce_check(seed):
    rng = np.random.default_rng(np.random.SeedSequence([104, seed]))
    x = _image(rng, (1, 3, 6, 6))
    p = _positive_conv(rng, 3, 4, 3)
    labels = rng.integers(0, 4, size=(1, 6, 6))

    def loss():
        return ad.softmax_cross_entropy(ad.relu(ad.conv2d(x, p)), labels)

    return grad_check(loss, [p.weight, p.bias], epsilon=EPSILON)


def cross_unit_check(seed):
    """One hand-built cross-connected unit with f and g parameters."""
    rng = np.random.default_rng(np.random.SeedSequence([105, seed]))
    xa = _image(rng, (1, 3, 6, 6))
    xb = _image(rng, (1, 3, 6, 6))
    f_a = _positive_conv(rng, 3, 3, 3)
    f_b = _positive_conv(rng, 3, 3, 3)
    g_a = _positive_conv(rng, 3, 3, 1)
    g_b = _positive_conv(rng, 3, 3, 1)
    labels = rng.integers(0, 3, size=(1, 6, 6))

    def loss():
        fa = ad.relu(ad.conv2d(xa, f_a))
        fb = ad.relu(ad.conv2d(xb, f_b))
        out_a = ad.add(fa, ad.relu(ad.conv2d(fb, g_a)))
        out_b = ad.add(fb, ad.relu(ad.conv2d(fa, g_b)))
        la = ad.softmax_cross_entropy(out_a, labels)
        lb = ad.softmax_cross_entropy(out_b, labels)
        return ad.add(la.value, lb.value)

    params = [f_a.weight, f_a.bias, f_b.weight, f_b.bias,
              g_a.weight, g_a.bias, g_b.weight, g_b.bias]
    return grad_check(loss, params, epsilon=EPSILON)


def multitask_detection_check(seed):
    """L_all over a frozen detection batch: gradients reach every group."""
    for attempt in range(_MAX_INSTANCE_ATTEMPTS):
        rng = np.random.default_rng(np.random.SeedSequence([106, seed, attempt]))
        net_a, net_b = _tiny_pair(rng, ((2, 2), (2, 2)), (2,))
        net = _make_positive(
            ng.compose_cross_connected(net_a, net_b, cross_depth=2,
                                       seed=int(rng.integers(1 << 30))), rng)
        image = _image(rng, (1, 2, 6, 6))
        grid = tr.detection_grid(net, "a")
        boxes = [np.array([[1, 1, 4, 4, 1]], dtype=np.int64)]
        out0 = ng.head_forward(net, "a", ng.forward_multitask(net, image)[0])
        targets = tr.build_detection_targets(grid, out0.data.shape[2],
                                             out0.data.shape[3], boxes, rng)
        # keep the regression differences away from the smooth-L1 seam
        for a in range(targets.reg_targets.shape[1]):
            pred0 = out0.data[:, a * 6:a * 6 + 4]
            d = np.abs(pred0 - targets.reg_targets[:, a])
            near = (d > 0.9) & (d < 1.1)
            targets.reg_targets[:, a][near] = pred0[near] - 0.5

        def loss():
            out = ng.head_forward(net, "a", ng.forward_multitask(net, image)[0])
            return tr.detection_loss(out, targets)

        if not _instance_is_pool_safe(loss):
            continue
        params = [t for name, t in net.parameters() if not name.startswith("head_b")]
        return grad_check(loss, params, epsilon=EPSILON)
    raise NumericError("could not build a pool-safe detection-loss instance")


def run_gradcheck_suite(n_instances=20, seed=0):
    """Run every check n_instances times; returns [(name, max_error), ...]."""
    checks = [
        ("conv_relu_ce", conv_relu_ce_check),
        ("cross_unit", cross_unit_check),
        ("cross_connected_graph", cross_connected_check),
        ("cross_stitch_graph", cross_stitch_check),
        ("shared_graph_k1", lambda s: shared_check(s, k=1)),
        ("shared_graph_k2", lambda s: shared_check(s, k=2)),
        ("multitask_detection_loss", multitask_detection_check),
    ]
    results = []
    for name, fn in checks:
        worst = 0.0
        for i in range(n_instances):
            worst = max(worst, fn(seed * 1000 + i))
        results.append((name, worst))
    return results
