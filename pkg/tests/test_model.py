"""Graph builders, collapse to deployment, serialization round trips."""

import numpy as np
import pytest

import oracles
from kflo import model as M
from kflo.errors import (ModelChecksumError, ModelMagicError, ModelModeError,
                         ModelTruncatedError, ModelVersionError, ShapeError,
                         UsageError)
from kflo.serialize import load_model, save_model


class TestBuilders:
    def test_lenet5_vanilla_parameter_count(self):
        assert M.param_count(M.build_lenet5(depth=1)) == 61706

    def test_lenet5_2x4_widths(self):
        g = M.build_lenet5(depth=2, width_mult=4.0)
        widths = [n.block.w1.value.shape[0] for n in g.nodes if n.block]
        assert widths == [24, 64, 480, 336, 40]
        ends = [n.block.cascade[-1].value.shape[0] for n in g.nodes if n.block]
        assert ends == [6, 16, 120, 84, 10]

    def test_lenet5_forward_shape(self, rng):
        g = M.build_lenet5(depth=2, width_mult=4.0)
        x = rng.standard_normal((1, 1, 28, 28)).astype(np.float32)
        assert M.forward(g, x).shape == (1, 10)

    def test_smallcnn_shape_and_width(self, rng):
        g = M.build_smallcnn(depth=1)
        x = rng.standard_normal((2, 3, 32, 32)).astype(np.float32)
        assert M.forward(g, x).shape == (2, 10)
        g2 = M.build_smallcnn(depth=2, width_mult=2.0)
        first = next(n for n in g2.nodes if n.block)
        assert first.block.w1.value.shape[0] == 64

    def test_smallcnn_collapsed_agrees_with_expanded(self, rng):
        g = M.build_smallcnn(depth=2, width_mult=2.0, seed=5)
        x = rng.standard_normal((2, 3, 32, 32)).astype(np.float32)
        dep = M.collapse_model(g)
        assert oracles.rel_dev(M.forward(g, x), M.forward(dep, x)) <= 1e-5

    def test_build_deterministic_under_seed(self):
        a = M.build_lenet5(depth=2, width_mult=2.0, seed=9)
        b = M.build_lenet5(depth=2, width_mult=2.0, seed=9)
        for pa, pb in zip(M.iter_params(a), M.iter_params(b)):
            assert np.array_equal(pa.value, pb.value)


class TestCollapseModel:
    @pytest.mark.parametrize("builder", [M.build_lenet5, M.build_smallcnn])
    @pytest.mark.parametrize("depth,width", [(1, 1.0), (2, 1.0), (2, 4.0),
                                             (3, 0.5), (4, 2.0)])
    def test_forward_agreement_grid(self, rng, builder, depth, width):
        g = builder(depth=depth, width_mult=width, seed=2)
        for p in M.iter_params(g):
            if p.kind != "bias":
                p.value[...] += (0.1 * rng.standard_normal(p.value.shape)
                                 ).astype(np.float32)
            p.bump()
        shape = (2, *g.input_shape)
        x = rng.standard_normal(shape).astype(np.float32)
        dep = M.collapse_model(g)
        assert oracles.rel_dev(M.forward(g, x), M.forward(dep, x)) <= 1e-5

    def test_deployed_count_independent_of_expansion(self):
        base = M.param_count(M.build_lenet5(depth=1))
        for depth, width in ((2, 1.0), (2, 4.0), (3, 2.0)):
            g = M.build_lenet5(depth=depth, width_mult=width)
            assert M.param_count(M.collapse_model(g)) == base

    def test_dirac_model_deploys_to_channel_selection(self):
        g = M.build_lenet5(depth=2, width_mult=2.0, seed=4)
        dep = M.collapse_model(g)
        for node, dnode in zip(g.nodes, dep.nodes):
            if node.block is None:
                continue
            w1 = node.block.w1.value
            got = dnode.kernel.value.reshape(node.block.ch_out, *w1.shape[1:])
            for out_ch in range(node.block.ch_out):
                assert np.array_equal(got[out_ch], w1[out_ch % w1.shape[0]])

    def test_collapse_requires_training_mode(self):
        dep = M.collapse_model(M.build_lenet5(depth=2))
        with pytest.raises(UsageError):
            M.collapse_model(dep)

    def test_deployed_graph_has_no_blocks(self):
        dep = M.collapse_model(M.build_lenet5(depth=3, width_mult=2.0))
        assert all(n.block is None for n in dep.nodes)


class TestValidation:
    def test_fc_feature_mismatch_detected(self, rng):
        g = M.build_lenet5(depth=1)
        g.input_shape = (1, 32, 32)  # breaks the 16*5*5 flatten
        with pytest.raises(ShapeError, match="fc1"):
            M.validate_graph(g)


class TestSerialization:
    def _params_bit_equal(self, a, b):
        pa, pb = list(M.iter_params(a)), list(M.iter_params(b))
        assert len(pa) == len(pb)
        return all(np.array_equal(x.value, y.value) and x.kind == y.kind
                   for x, y in zip(pa, pb))

    def test_roundtrip_bit_exact(self, tmp_path, rng):
        g = M.build_lenet5(depth=2, width_mult=4.0, seed=6)
        for p in M.iter_params(g):
            p.value[...] += (0.01 * rng.standard_normal(p.value.shape)
                             ).astype(np.float32)
        path = tmp_path / "m.kflo"
        save_model(g, path)
        g2 = load_model(path)
        assert self._params_bit_equal(g, g2)
        assert g2.mode == "training"
        assert g2.input_shape == (1, 28, 28)
        blocks = [n.block for n in g2.nodes if n.block]
        assert [b.depth for b in blocks] == [2] * 5
        assert [b.width_mult for b in blocks] == [4.0] * 5

    def test_deployed_roundtrip_and_idempotent_bytes(self, tmp_path):
        dep = M.collapse_model(M.build_smallcnn(depth=2, width_mult=2.0, seed=1))
        p1, p2 = tmp_path / "a.kflo", tmp_path / "b.kflo"
        save_model(dep, p1)
        save_model(load_model(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_forward_unchanged_through_roundtrip(self, tmp_path, rng):
        g = M.build_smallcnn(depth=2, width_mult=1.0, seed=8)
        dep = M.collapse_model(g)
        save_model(dep, tmp_path / "m.kflo")
        g2 = load_model(tmp_path / "m.kflo")
        x = rng.standard_normal((2, 3, 32, 32)).astype(np.float32)
        assert np.array_equal(M.forward(dep, x), M.forward(g2, x))

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "m.kflo"
        path.write_bytes(b"NOPE" + bytes(64))
        with pytest.raises(ModelMagicError):
            load_model(path)

    def test_version_mismatch(self, tmp_path):
        g = M.build_lenet5(depth=1)
        path = tmp_path / "m.kflo"
        save_model(g, path)
        raw = bytearray(path.read_bytes())
        raw[4] = 99  # version u16 low byte
        path.write_bytes(bytes(raw))
        with pytest.raises(ModelVersionError):
            load_model(path)

    def test_truncated_file(self, tmp_path):
        g = M.build_lenet5(depth=1)
        path = tmp_path / "m.kflo"
        save_model(g, path)
        path.write_bytes(path.read_bytes()[:100])
        with pytest.raises(ModelTruncatedError):
            load_model(path)

    def test_corrupt_payload_byte_fails_checksum(self, tmp_path):
        g = M.build_lenet5(depth=2, width_mult=1.0)
        path = tmp_path / "m.kflo"
        save_model(g, path)
        raw = bytearray(path.read_bytes())
        raw[len(raw) // 2] ^= 0xFF
        path.write_bytes(bytes(raw))
        with pytest.raises(ModelChecksumError, match="checksum"):
            load_model(path)

    def test_mode_expectation(self, tmp_path):
        dep = M.collapse_model(M.build_lenet5(depth=2))
        path = tmp_path / "m.kflo"
        save_model(dep, path)
        with pytest.raises(ModelModeError, match="deployed"):
            load_model(path, expect_mode="training")
