import numpy as np
import pytest

from xcnet import autodiff as ad
from xcnet import netgraph as ng
from xcnet.autodiff import Tensor, grad_check
from xcnet.errors import ConfigError, FormatError


def tiny_spec(task, units=((3, 4), (4, 4), (4, 6)), pools=(2,), head=None):
    if head is None:
        head = ng.DetectionHead(mid_channels=8, anchor_shapes=((6, 6),)) \
            if task == ng.TASK_DETECTION else \
            ng.SegmentationHead(mid_channels=8, refine_channels=4, n_classes=3)
    return ng.StreamSpec(units=units, pool_after=frozenset(pools), head=head)


def tiny_pair(seed=0, **kw):
    net_a = ng.build_single_stream(tiny_spec(ng.TASK_DETECTION, **kw), seed=seed, task="a")
    net_b = ng.build_single_stream(tiny_spec(ng.TASK_SEGMENTATION, **kw), seed=seed + 1, task="b")
    return net_a, net_b


def zero_connections(net):
    for cu in net.cross_units:
        if isinstance(cu, ng.CrossUnit):
            cu.g_a.weight.data[...] = 0
            cu.g_a.bias.data[...] = 0
            cu.g_b.weight.data[...] = 0
            cu.g_b.bias.data[...] = 0
        elif isinstance(cu, ng.StitchUnit):
            cu.s_a.data[...] = 0
            cu.s_b.data[...] = 0


class TestBuildSingleStream:
    def test_equal_seeds_give_bit_identical_parameters(self):
        n1 = ng.build_single_stream(tiny_spec(ng.TASK_DETECTION), seed=9, task="a")
        n2 = ng.build_single_stream(tiny_spec(ng.TASK_DETECTION), seed=9, task="a")
        for (name1, t1), (name2, t2) in zip(n1.parameters(), n2.parameters()):
            assert name1 == name2
            assert np.array_equal(t1.data, t2.data)

    def test_different_seeds_differ(self):
        n1 = ng.build_single_stream(tiny_spec(ng.TASK_DETECTION), seed=9, task="a")
        n2 = ng.build_single_stream(tiny_spec(ng.TASK_DETECTION), seed=10, task="a")
        assert not np.array_equal(n1.units_a[0].weight.data, n2.units_a[0].weight.data)

    def test_default_spec_is_vgg_proportioned(self):
        spec = ng.default_stream_spec(ng.TASK_DETECTION)
        assert len(spec.units) == 10
        assert spec.pool_after == frozenset({2, 4, 7, 10})
        assert spec.output_stride == 16

    def test_empty_unit_list_rejected(self):
        spec = ng.StreamSpec(units=(), pool_after=frozenset(), head=ng.DetectionHead())
        with pytest.raises(ConfigError, match="empty"):
            ng.build_single_stream(spec, seed=0, task="a")

    def test_channel_mismatch_rejected(self):
        spec = ng.StreamSpec(units=((3, 4), (5, 4)), pool_after=frozenset(),
                             head=ng.DetectionHead())
        with pytest.raises(ConfigError, match="mismatch"):
            ng.build_single_stream(spec, seed=0, task="a")


class TestComposeCrossConnected:
    def test_zero_connections_match_single_nets_exactly(self):
        net_a, net_b = tiny_pair(seed=3)
        net = ng.compose_cross_connected(net_a, net_b, cross_depth=3, seed=5)
        zero_connections(net)
        rng = np.random.default_rng(11)
        for _ in range(10):
            img = Tensor(rng.random(size=(1, 3, 8, 8)).astype(np.float32))
            fa, fb = ng.forward_multitask(net, img)
            sa, _ = ng.forward_multitask(net_a, img)
            _, sb = ng.forward_multitask(net_b, img)
            assert np.array_equal(fa.data, sa.data)
            assert np.array_equal(fb.data, sb.data)
            ha = ng.head_forward(net, "a", fa)
            ha_single = ng.head_forward(net_a, "a", sa)
            assert np.array_equal(ha.data, ha_single.data)

    def test_cross_depth_zero_reproduces_single_nets(self):
        net_a, net_b = tiny_pair(seed=4)
        net = ng.compose_cross_connected(net_a, net_b, cross_depth=0, seed=5)
        assert all(cu is None for cu in net.cross_units)
        img = Tensor(np.random.default_rng(0).random(size=(1, 3, 8, 8)).astype(np.float32))
        fa, fb = ng.forward_multitask(net, img)
        sa, _ = ng.forward_multitask(net_a, img)
        _, sb = ng.forward_multitask(net_b, img)
        assert np.array_equal(fa.data, sa.data)
        assert np.array_equal(fb.data, sb.data)

    def test_connection_init_statistics(self):
        # wide 1x1 connections so the sample std is tight around init_std
        units = ((3, 48), (48, 48))
        net_a, net_b = tiny_pair(seed=6, units=units, pools=())
        net = ng.compose_cross_connected(net_a, net_b, cross_depth=2, init_std=0.1, seed=7)
        g = np.concatenate([cu.g_a.weight.data.ravel() for cu in net.cross_units])
        assert abs(g.std() - 0.1) < 0.01
        assert abs(g.mean()) < 0.01
        for cu in net.cross_units:
            assert np.all(cu.g_a.bias.data == 0)
            assert cu.g_a.weight.data.shape[2:] == (1, 1)

    def test_added_parameter_count(self):
        net_a, net_b = tiny_pair(seed=8)
        depth = 3
        net = ng.compose_cross_connected(net_a, net_b, cross_depth=depth, seed=9)
        widths = [c_out for _, c_out in net.spec_a.units[:depth]]
        expected = sum(c * c * 2 + c + c for c in widths)
        assert ng.added_connection_parameters(net) == expected
        single_total = net_a.parameter_count() + net_b.parameter_count()
        assert net.parameter_count() == single_total + expected

    def test_cross_depth_out_of_range(self):
        net_a, net_b = tiny_pair(seed=1)
        with pytest.raises(ConfigError, match="cross_depth"):
            ng.compose_cross_connected(net_a, net_b, cross_depth=7, seed=0)


class TestComposeCrossStitch:
    def test_zero_scales_match_single_nets(self):
        net_a, net_b = tiny_pair(seed=12)
        net = ng.compose_cross_stitch(net_a, net_b, cross_depth=3, seed=13)
        zero_connections(net)
        img = Tensor(np.random.default_rng(2).random(size=(1, 3, 8, 8)).astype(np.float32))
        fa, fb = ng.forward_multitask(net, img)
        sa, _ = ng.forward_multitask(net_a, img)
        _, sb = ng.forward_multitask(net_b, img)
        assert np.array_equal(fa.data, sa.data)
        assert np.array_equal(fb.data, sb.data)

    def test_embeds_into_cross_connected_with_diagonal_kernels(self):
        rng = np.random.default_rng(21)
        net_a, net_b = tiny_pair(seed=14)
        stitch = ng.compose_cross_stitch(net_a, net_b, cross_depth=3, seed=15)
        crossed = ng.compose_cross_connected(net_a, net_b, cross_depth=3, seed=16)
        for su, cu in zip(stitch.cross_units, crossed.cross_units):
            c_a = su.s_a.data.shape[0]
            su.s_a.data[...] = rng.uniform(0, 2, size=c_a).astype(np.float32)
            su.s_b.data[...] = rng.uniform(0, 2, size=c_a).astype(np.float32)
            cu.g_a.weight.data[...] = 0
            cu.g_b.weight.data[...] = 0
            cu.g_a.bias.data[...] = 0
            cu.g_b.bias.data[...] = 0
            cu.g_a.weight.data[np.arange(c_a), np.arange(c_a), 0, 0] = su.s_a.data
            cu.g_b.weight.data[np.arange(c_a), np.arange(c_a), 0, 0] = su.s_b.data
        for _ in range(10):
            img = Tensor(rng.random(size=(1, 3, 8, 8)).astype(np.float32))
            fa_s, fb_s = ng.forward_multitask(stitch, img)
            fa_c, fb_c = ng.forward_multitask(crossed, img)
            assert np.max(np.abs(fa_s.data - fa_c.data)) < 1e-5
            assert np.max(np.abs(fb_s.data - fb_c.data)) < 1e-5

    def test_negative_scale_diverges_from_relu_connection(self):
        # a -1 scale on an all-positive activation makes the stitch cross term
        # negative; the conv+ReLU path clamps it at zero instead
        net_a, net_b = tiny_pair(seed=17, units=((3, 4),), pools=())
        stitch = ng.compose_cross_stitch(net_a, net_b, cross_depth=1, seed=18)
        crossed = ng.compose_cross_connected(net_a, net_b, cross_depth=1, seed=18)
        su, cu = stitch.cross_units[0], crossed.cross_units[0]
        su.s_a.data[...] = -1.0
        su.s_b.data[...] = -1.0
        c = su.s_a.data.shape[0]
        cu.g_a.weight.data[...] = 0
        cu.g_b.weight.data[...] = 0
        cu.g_a.weight.data[np.arange(c), np.arange(c), 0, 0] = -1.0
        cu.g_b.weight.data[np.arange(c), np.arange(c), 0, 0] = -1.0
        img = Tensor(np.random.default_rng(3).random(size=(1, 3, 8, 8)).astype(np.float32))
        fa_s, _ = ng.forward_multitask(stitch, img)
        fa_c, _ = ng.forward_multitask(crossed, img)
        assert not np.allclose(fa_s.data, fa_c.data)
        assert fa_s.data.min() < fa_c.data.min()


class TestComposeShared:
    def test_share_layer_counts(self):
        spec_kw = dict(units=tuple(ng.default_stream_spec(ng.TASK_DETECTION).units),
                       pools=(2, 4, 7, 10))
        net_a = ng.build_single_stream(
            ng.StreamSpec(spec_kw["units"], frozenset(spec_kw["pools"]),
                          ng.DetectionHead(mid_channels=8, anchor_shapes=((6, 6),))),
            seed=0, task="a")
        net_b = ng.build_single_stream(
            ng.StreamSpec(spec_kw["units"], frozenset(spec_kw["pools"]),
                          ng.SegmentationHead(mid_channels=8, refine_channels=4)),
            seed=1, task="b")
        for k, expected in [(1, 2), (2, 4), (3, 7), (4, 10)]:
            net = ng.compose_shared(net_a, net_b, k)
            assert net.shared_layers == expected
            for i in range(expected):
                assert net.units_a[i] is net.units_b[i]
            for i in range(expected, 10):
                assert net.units_a[i] is not net.units_b[i]
            # prefix weights come from net A
            assert np.array_equal(net.units_a[0].weight.data, net_a.units_a[0].weight.data)

    def test_k_out_of_range(self):
        net_a, net_b = tiny_pair(seed=2)
        with pytest.raises(ConfigError, match="1..4"):
            ng.compose_shared(net_a, net_b, 5)

    def test_joint_loss_accumulates_into_shared_params(self):
        units = ((2, 3), (3, 3))
        head_a = ng.DetectionHead(mid_channels=4, anchor_shapes=((4, 4),))
        head_b = ng.SegmentationHead(mid_channels=4, refine_channels=3, n_classes=2)
        net_a = ng.build_single_stream(
            ng.StreamSpec(units, frozenset({2}), head_a), seed=3, task="a")
        net_b = ng.build_single_stream(
            ng.StreamSpec(units, frozenset({2}), head_b), seed=4, task="b")
        net = ng.compose_shared(net_a, net_b, 1).cast(np.float64)
        rng = np.random.default_rng(5)
        img = Tensor(rng.random(size=(1, 2, 8, 8)), dtype=np.float64)
        labels_a = rng.integers(0, 2, size=(1, 4, 4))
        labels_b = rng.integers(0, 2, size=(1, 8, 8))

        def loss():
            fa, fb = ng.forward_multitask(net, img)
            out_a = ng.head_forward(net, "a", fa)
            cls = ad.slice_channels(out_a, 4, 6)
            la = ad.softmax_cross_entropy(cls, labels_a)
            out_b = ng.head_forward(net, "b", fb)
            lb = ad.softmax_cross_entropy(out_b, labels_b)
            return ad.add(la.value, lb.value)

        shared = [t for name, t in net.parameters() if name.startswith("s/")]
        assert len(shared) == 4  # 2 shared convs x (weight, bias)
        assert grad_check(loss, shared, epsilon=1e-3) < 1e-3


class TestForward:
    def test_hand_computed_cross_unit(self):
        # one unit, one channel, all f weights 1 (3x3 pad 1), g weight w,
        # constant input c: interior of x2A is 9c + relu(9c * w)
        c_val, w_val = 0.5, 0.25
        units = ((1, 1),)
        head = ng.DetectionHead(mid_channels=1, anchor_shapes=((4, 4),))
        net_a = ng.build_single_stream(ng.StreamSpec(units, frozenset(), head), 0, "a")
        net_b = ng.build_single_stream(
            ng.StreamSpec(units, frozenset(),
                          ng.SegmentationHead(mid_channels=1, refine_channels=1)), 1, "b")
        net = ng.compose_cross_connected(net_a, net_b, cross_depth=1, seed=2)
        net.units_a[0].weight.data[...] = 1.0
        net.units_a[0].bias.data[...] = 0.0
        net.units_b[0].weight.data[...] = 1.0
        net.units_b[0].bias.data[...] = 0.0
        cu = net.cross_units[0]
        for g in (cu.g_a, cu.g_b):
            g.bias.data[...] = 0.0
        cu.g_a.weight.data[...] = w_val
        cu.g_b.weight.data[...] = w_val
        img = Tensor(np.full((1, 1, 6, 6), c_val, dtype=np.float32))
        fa, _ = ng.forward_multitask(net, img)
        interior = fa.data[0, 0, 2, 2]
        expected = 9 * c_val + max(0.0, w_val * 9 * c_val)
        assert abs(interior - expected) < 1e-6

        cu.g_a.weight.data[...] = 0.0
        fa, _ = ng.forward_multitask(net, img)
        assert abs(fa.data[0, 0, 2, 2] - 9 * c_val) < 1e-6

    def test_zero_image_zero_activations(self):
        net_a, net_b = tiny_pair(seed=19)
        net = ng.compose_cross_connected(net_a, net_b, cross_depth=3, seed=20)
        img = Tensor(np.zeros((1, 3, 8, 8), dtype=np.float32))
        fa, fb = ng.forward_multitask(net, img)
        # biases are zero everywhere at init, so everything stays zero
        assert np.all(fa.data == 0)
        assert np.all(fb.data == 0)

    def test_single_mode_ignores_other_stream(self):
        net_a, _ = tiny_pair(seed=22)
        img = Tensor(np.random.default_rng(1).random(size=(2, 3, 8, 8)).astype(np.float32))
        fa, fb = ng.forward_multitask(net_a, img)
        assert fb is None
        assert fa.data.shape[0] == 2

    def test_stream_symmetry_under_swap(self):
        # swapping stream labels and transposing the connections swaps outputs
        units = ((3, 4), (4, 4))
        head_a = ng.DetectionHead(mid_channels=4, anchor_shapes=((4, 4),))
        head_b = ng.SegmentationHead(mid_channels=4, refine_channels=3)
        net_a = ng.build_single_stream(ng.StreamSpec(units, frozenset({2}), head_a), 30, "a")
        net_b = ng.build_single_stream(ng.StreamSpec(units, frozenset({2}), head_b), 31, "b")
        net = ng.compose_cross_connected(net_a, net_b, cross_depth=2, seed=32)

        swapped_a = ng.build_single_stream(ng.StreamSpec(units, frozenset({2}), head_b), 33, "a")
        swapped_b = ng.build_single_stream(ng.StreamSpec(units, frozenset({2}), head_a), 34, "b")
        swapped = ng.compose_cross_connected(swapped_a, swapped_b, cross_depth=2, seed=35)
        for i in range(2):
            swapped.units_a[i].weight.data[...] = net.units_b[i].weight.data
            swapped.units_a[i].bias.data[...] = net.units_b[i].bias.data
            swapped.units_b[i].weight.data[...] = net.units_a[i].weight.data
            swapped.units_b[i].bias.data[...] = net.units_a[i].bias.data
            swapped.cross_units[i].g_a.weight.data[...] = net.cross_units[i].g_b.weight.data
            swapped.cross_units[i].g_a.bias.data[...] = net.cross_units[i].g_b.bias.data
            swapped.cross_units[i].g_b.weight.data[...] = net.cross_units[i].g_a.weight.data
            swapped.cross_units[i].g_b.bias.data[...] = net.cross_units[i].g_a.bias.data

        img = Tensor(np.random.default_rng(4).random(size=(1, 3, 8, 8)).astype(np.float32))
        fa, fb = ng.forward_multitask(net, img)
        ga, gb = ng.forward_multitask(swapped, img)
        assert np.array_equal(fa.data, gb.data)
        assert np.array_equal(fb.data, ga.data)

    def test_head_output_channels(self):
        net_a, net_b = tiny_pair(seed=23)
        img = Tensor(np.random.default_rng(5).random(size=(1, 3, 8, 8)).astype(np.float32))
        fa, _ = ng.forward_multitask(net_a, img)
        out = ng.head_forward(net_a, "a", fa)
        assert out.data.shape[1] == 6  # one anchor x (4 + 2)
        _, fb = ng.forward_multitask(net_b, img)
        seg = ng.head_forward(net_b, "b", fb)
        assert seg.data.shape == (1, 3, 8, 8)  # full resolution logits


class TestWeightFiles:
    def test_round_trip_is_byte_identical(self, tmp_path):
        net_a, net_b = tiny_pair(seed=40)
        net = ng.compose_cross_connected(net_a, net_b, cross_depth=2, seed=41)
        p1 = tmp_path / "net.xcnw"
        p2 = tmp_path / "net2.xcnw"
        ng.save_weights(net, p1)
        loaded = ng.load_weights(p1)
        ng.save_weights(loaded, p2)
        assert p1.read_bytes() == p2.read_bytes()
        for (n1, t1), (n2, t2) in zip(net.parameters(), loaded.parameters()):
            assert n1 == n2
            assert np.array_equal(t1.data, t2.data)

    @pytest.mark.parametrize("mode", ["single_a", "single_b", "cross_stitch", "shared"])
    def test_round_trip_all_modes(self, tmp_path, mode):
        net_a, net_b = tiny_pair(seed=42, units=((3, 4), (4, 4)), pools=(1, 2))
        if mode == "single_a":
            net = net_a
        elif mode == "single_b":
            net = net_b
        elif mode == "cross_stitch":
            net = ng.compose_cross_stitch(net_a, net_b, cross_depth=2, seed=43)
        else:
            net = ng.compose_shared(net_a, net_b, 1)
        path = tmp_path / "w.xcnw"
        ng.save_weights(net, path)
        loaded = ng.load_weights(path)
        assert loaded.mode == net.mode
        path2 = tmp_path / "w2.xcnw"
        ng.save_weights(loaded, path2)
        assert path.read_bytes() == path2.read_bytes()

    def test_loaded_shared_net_still_shares(self, tmp_path):
        net_a, net_b = tiny_pair(seed=44, units=((3, 4), (4, 4), (4, 4)), pools=(2,))
        net = ng.compose_shared(net_a, net_b, 1)  # share1 = 2 conv layers
        path = tmp_path / "w.xcnw"
        ng.save_weights(net, path)
        loaded = ng.load_weights(path)
        assert loaded.units_a[0] is loaded.units_b[0]
        assert loaded.units_a[1] is loaded.units_b[1]
        assert loaded.units_a[2] is not loaded.units_b[2]

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.xcnw"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(FormatError, match="magic"):
            ng.load_weights(path)

    def test_truncated_record(self, tmp_path):
        net_a, _ = tiny_pair(seed=45)
        path = tmp_path / "w.xcnw"
        ng.save_weights(net_a, path)
        blob = path.read_bytes()
        path.write_bytes(blob[:-7])
        with pytest.raises(FormatError, match="truncated"):
            ng.load_weights(path)

    def test_record_count_mismatch(self, tmp_path):
        net_a, _ = tiny_pair(seed=46)
        path = tmp_path / "w.xcnw"
        ng.save_weights(net_a, path)
        blob = bytearray(path.read_bytes())
        import struct
        (count,) = struct.unpack("<I", blob[5:9])
        blob[5:9] = struct.pack("<I", count + 1)
        path.write_bytes(bytes(blob))
        with pytest.raises(FormatError):
            ng.load_weights(path)
