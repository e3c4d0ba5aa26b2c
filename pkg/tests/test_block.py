"""Filtering-block algebra: reshaping, collapse, oracle, init, MACs."""

import numpy as np
import pytest

import oracles
from kflo import block as B
from kflo.autodiff import Param
from kflo.errors import ConfigError, ShapeError, StructureError
from kflo.tensor import ConvGeometry, conv2d


def random_block(rng, ch_out, ch_in, spatial=(3, 3), geom=ConvGeometry(),
                 depth=2, width_mult=2.0, scale=0.5):
    blk = B.expand(ch_out, ch_in, spatial, geom, depth, width_mult,
                   rng=rng, name="blk")
    for p in blk.params():
        p.value[...] = scale * rng.standard_normal(p.value.shape).astype(np.float32)
    return blk


class TestReshape:
    def test_degenerate_single_position(self):
        w = np.array([5.0, 7.0], np.float32).reshape(2, 1, 1, 1)
        sig = B.reshape_kernel_to_signal(w)
        assert sig.shape == (1, 2, 1)
        assert sig.ravel().tolist() == [5.0, 7.0]

    def test_flattened_index_order(self):
        # value 4*c + 2*m + n equals its own flattened position
        w = np.empty((1, 2, 2, 2), np.float32)
        for c in range(2):
            for m in range(2):
                for n in range(2):
                    w[0, c, m, n] = 4 * c + 2 * m + n
        sig = B.reshape_kernel_to_signal(w)
        assert sig[0, 0].tolist() == [0, 1, 2, 3, 4, 5, 6, 7]

    def test_roundtrip_is_identity(self, rng):
        for _ in range(100):
            shape = tuple(int(v) for v in rng.integers(1, 6, size=4))
            w = rng.standard_normal(shape).astype(np.float32)
            sig = B.reshape_kernel_to_signal(w)
            back = B.reshape_signal_to_kernel(sig, shape)
            assert np.array_equal(back, w)

    def test_signal_size_validated(self):
        with pytest.raises(ShapeError):
            B.reshape_signal_to_kernel(np.zeros((1, 2, 3), np.float32),
                                       (2, 2, 2, 2))


class TestCollapse:
    def test_two_layer_hand_case(self):
        blk = B.expand(1, 1, (1, 1), depth=2, width_mult=2.0, rng=0)
        blk.w1.value[...] = np.array([2.0, 3.0], np.float32).reshape(2, 1, 1, 1)
        blk.cascade[0].value[...] = np.array([0.5, 1.0], np.float32).reshape(1, 2, 1)
        assert B.collapse(blk).ravel().tolist() == [4.0]

    def test_dirac_cascade_square_is_exact_base_kernel(self, rng):
        blk = B.expand(4, 3, (3, 3), depth=3, width_mult=1.0, rng=rng)
        assert np.array_equal(B.collapse(blk), blk.w1.value)

    def test_dirac_cascade_is_channel_selection(self, rng):
        for width in (0.5, 2.0):
            blk = B.expand(4, 3, (3, 3), depth=2, width_mult=width, rng=rng)
            wp = B.collapse(blk)
            mid = blk.w1.value.shape[0]
            for out_ch in range(4):
                assert np.array_equal(wp[out_ch], blk.w1.value[out_ch % mid])

    def test_collapse_matches_oracle_on_random_block(self, rng):
        blk = random_block(rng, ch_out=4, ch_in=3, depth=3, width_mult=2.0)
        x = rng.standard_normal((2, 3, 7, 7)).astype(np.float32)
        got = conv2d(x, B.collapse(blk), blk.geom)
        want = B.feature_filter_oracle(x, blk)
        assert oracles.rel_dev(got, want) <= 1e-5

    def test_collapse_linear_in_base_kernel(self, rng):
        blk = random_block(rng, 4, 3)
        a_val = rng.standard_normal(blk.w1.value.shape).astype(np.float32)
        b_val = rng.standard_normal(blk.w1.value.shape).astype(np.float32)
        ca, cb = 0.3, -1.7
        blk.w1.value[...] = a_val
        wa = B.collapse(blk)
        blk.w1.value[...] = b_val
        wb = B.collapse(blk)
        blk.w1.value[...] = ca * a_val + cb * b_val
        mixed = B.collapse(blk)
        assert oracles.rel_dev(mixed, ca * wa + cb * wb) <= 1e-5

    def test_output_geometry_independent_of_cascade_depth(self, rng):
        x = rng.standard_normal((1, 3, 9, 9)).astype(np.float32)
        geom = ConvGeometry(stride=(2, 2), padding=(1, 1))
        shapes = set()
        for depth in (1, 2, 3, 4):
            blk = B.expand(5, 3, (3, 3), geom, depth, 2.0, rng=rng)
            shapes.add(conv2d(x, B.collapse(blk), geom).shape)
        assert len(shapes) == 1

    def test_grouped_equivalence_per_group(self, rng):
        for groups in (2, 4):
            geom = ConvGeometry(padding=(1, 1), groups=groups)
            blk = random_block(rng, ch_out=8, ch_in=4, geom=geom, depth=3,
                               width_mult=1.5)
            x = rng.standard_normal((2, 4, 6, 6)).astype(np.float32)
            got = conv2d(x, B.collapse(blk), geom)
            want = B.feature_filter_oracle(x, blk)
            assert oracles.rel_dev(got, want) <= 1e-5

    def test_width_chain_mismatch_raises(self, rng):
        blk = random_block(rng, 4, 3, depth=3)
        bad = blk.cascade[1].value[:, :-1, :].copy()
        blk.cascade[1] = Param("blk.pw3", bad, kind="cascade")
        with pytest.raises(StructureError, match="chain"):
            B.collapse(blk)

    def test_depth_one_collapse_is_base_kernel(self, rng):
        blk = random_block(rng, 4, 3, depth=1)
        assert np.array_equal(B.collapse(blk), blk.w1.value)

    def test_cached_collapse_invalidates_on_bump(self, rng):
        blk = random_block(rng, 3, 2)
        first = B.collapsed_kernel(blk)
        assert B.collapsed_kernel(blk) is first  # cache hit
        blk.w1.value[...] += 1.0
        blk.w1.bump()
        assert not np.array_equal(B.collapsed_kernel(blk), first)


class TestFeatureFilterOracle:
    def test_dirac_cascade_equals_plain_conv(self, rng):
        blk = B.expand(4, 3, (3, 3), depth=2, width_mult=1.0, rng=rng)
        x = rng.standard_normal((1, 3, 6, 6)).astype(np.float32)
        want = conv2d(x, blk.w1.value[:4])
        got = B.feature_filter_oracle(x, blk)
        assert oracles.rel_dev(got, want) <= 1e-6

    def test_depth_one_is_plain_conv(self, rng):
        blk = random_block(rng, 4, 3, depth=1)
        x = rng.standard_normal((1, 3, 6, 6)).astype(np.float32)
        assert np.array_equal(B.feature_filter_oracle(x, blk),
                              conv2d(x, blk.w1.value))

    def test_randomized_equivalence_sweep(self, rng):
        for _ in range(60):
            groups = int(rng.choice([1, 1, 2]))
            ch_in = int(rng.integers(1, 4)) * groups
            ch_out = int(rng.integers(1, 4)) * groups
            m, n = (int(v) for v in rng.integers(1, 4, 2))
            geom = ConvGeometry(stride=tuple(int(v) for v in rng.integers(1, 3, 2)),
                                padding=tuple(int(v) for v in rng.integers(0, 2, 2)),
                                groups=groups)
            depth = int(rng.integers(1, 4))
            width = float(rng.choice([0.5, 1.0, 2.0]))
            try:
                blk = random_block(rng, ch_out, ch_in, (m, n), geom, depth, width)
            except ConfigError:
                continue  # width rounded a tiny group to zero
            h = int(rng.integers(m + 1, m + 6))
            w = int(rng.integers(n + 1, n + 6))
            x = rng.standard_normal((2, ch_in, h, w)).astype(np.float32)
            got = conv2d(x, B.collapse(blk), geom)
            want = B.feature_filter_oracle(x, blk)
            assert oracles.rel_dev(got, want) <= 1e-5


class TestExpand:
    def test_depth_one_plain_shape(self, rng):
        blk = B.expand(5, 3, (3, 3), depth=1, width_mult=4.0, rng=rng)
        assert blk.cascade == []
        assert blk.w1.value.shape == (5, 3, 3, 3)

    def test_figure_widths_depth2_rho4(self, rng):
        blk = B.expand(10, 8, (5, 5), depth=2, width_mult=4.0, rng=rng)
        assert blk.w1.value.shape == (40, 8, 5, 5)
        assert len(blk.cascade) == 1
        assert blk.cascade[0].value.shape == (10, 40, 1)

    def test_nonsquare_dirac_selection_hand_check(self, rng):
        # width 0.5 of 4 outputs -> 2 base filters; outputs pick 0,1,0,1
        blk = B.expand(4, 2, (3, 3), depth=2, width_mult=0.5, rng=rng)
        wp = B.collapse(blk)
        for out_ch in range(4):
            assert np.array_equal(wp[out_ch], blk.w1.value[out_ch % 2])

    def test_zero_width_rejected(self, rng):
        with pytest.raises(ConfigError, match="zero"):
            B.expand(2, 2, (3, 3), depth=2, width_mult=0.1, rng=rng)

    def test_bad_depth_and_width_rejected(self, rng):
        with pytest.raises(ConfigError):
            B.expand(2, 2, (3, 3), depth=0, rng=rng)
        with pytest.raises(ConfigError):
            B.expand(2, 2, (3, 3), depth=2, width_mult=-1.0, rng=rng)

    def test_deterministic_under_seed(self):
        a = B.expand(4, 3, (3, 3), depth=2, width_mult=2.0, rng=11)
        b = B.expand(4, 3, (3, 3), depth=2, width_mult=2.0, rng=11)
        assert np.array_equal(a.w1.value, b.w1.value)

    def test_round_width_half_away_from_zero(self):
        assert B.round_width(2.5) == 3
        assert B.round_width(2.49) == 2
        assert B.round_width(0.5) == 1


class TestTlStackInit:
    def test_single_network_collapse_bit_equal(self, rng):
        pre = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
        blk = B.expand(4, 3, (3, 3), depth=2, width_mult=1.0, rng=rng)
        B.tl_stack_init(blk, [pre])
        assert np.array_equal(B.collapse(blk), pre)

    def test_two_networks_collapse_equals_first(self, rng):
        pre = [rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
               for _ in range(2)]
        blk = B.expand(4, 3, (3, 3), depth=2, width_mult=2.0, rng=rng)
        B.tl_stack_init(blk, pre)
        assert np.array_equal(B.collapse(blk), pre[0])
        # both nets are stacked into the base kernel
        assert np.array_equal(blk.w1.value[:4], pre[0])
        assert np.array_equal(blk.w1.value[4:], pre[1])

    def test_depth_three_still_selects_first(self, rng):
        pre = [rng.standard_normal((3, 2, 1, 1)).astype(np.float32)
               for _ in range(2)]
        blk = B.expand(3, 2, (1, 1), depth=3, width_mult=2.0, rng=rng)
        B.tl_stack_init(blk, pre)
        assert np.array_equal(B.collapse(blk), pre[0])

    def test_width_count_mismatch_rejected(self, rng):
        blk = B.expand(4, 3, (3, 3), depth=2, width_mult=2.0, rng=rng)
        pre = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
        with pytest.raises(ConfigError, match="width multiplier"):
            B.tl_stack_init(blk, [pre])

    def test_kernel_shape_mismatch_rejected(self, rng):
        blk = B.expand(4, 3, (3, 3), depth=2, width_mult=1.0, rng=rng)
        with pytest.raises(ShapeError, match="shape"):
            B.tl_stack_init(blk, [np.zeros((4, 3, 5, 5), np.float32)])


class TestFlopCount:
    def test_depth_one_relations(self, rng):
        blk = B.expand(8, 4, (3, 3), depth=1, rng=rng)
        fc = B.flop_count(blk, (8, 8), batch=3)
        assert fc.kernel_filtering_macs == fc.vanilla_macs
        assert fc.feature_filtering_macs == fc.vanilla_macs

    def test_lenet_conv2_cascade_costs(self, rng):
        blk = B.expand(16, 6, (5, 5), depth=2, width_mult=4.0, rng=rng)
        for batch in (1, 8, 64):
            fc = B.flop_count(blk, (14, 14), batch=batch)
            assert fc.kernel_filtering_macs - fc.vanilla_macs == 153600
            conv_w1 = batch * 100 * 64 * 6 * 25
            assert fc.feature_filtering_macs - conv_w1 == 16 * 64 * 100 * batch

    def test_kernel_filtering_cheaper_when_signal_shorter(self, rng):
        for _ in range(50):
            ch_in = int(rng.integers(1, 6))
            ch_out = int(rng.integers(1, 6))
            m = int(rng.integers(1, 4))
            batch = int(rng.integers(1, 9))
            h = int(rng.integers(m, m + 8))
            blk = B.expand(ch_out, ch_in, (m, m), depth=2,
                           width_mult=float(rng.choice([1.0, 2.0])), rng=rng)
            fc = B.flop_count(blk, (h, h), batch=batch)
            ho = h - m + 1
            if ch_in * m * m <= batch * ho * ho:
                kf_casc = fc.kernel_filtering_macs - fc.vanilla_macs
                ff_casc = fc.feature_filtering_macs - \
                    batch * ho * ho * blk.w1.value.shape[0] * ch_in * m * m
                assert kf_casc <= ff_casc
