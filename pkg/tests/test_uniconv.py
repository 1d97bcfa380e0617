"""Tests for address-centric convolution."""

import numpy as np
import pytest
from sdacc_sim.models import BlockId, LayerDescriptor, LayerKind, Side
from sdacc_sim.uniconv import (
    decompose,
    delta_table,
    direct_conv_oracle,
    edge_flag,
    pack_activation,
    pack_weight,
    uniconv,
    uniconv_execute,
    unpack_activation,
)


class TestAddressMaps:
    """Test slice decomposition and row offsets."""

    def test_delta_table_3x3(self):
        """Test the nine offsets for a row width of 8."""
        assert delta_table(8) == [9, 8, 7, 1, 0, -1, -7, -8, -9]

    def test_1x1_has_single_slice(self):
        """Test a pointwise kernel has one zero-offset slice."""
        assert delta_table(8, kernel=1) == [0]

    def test_decompose_layer(self):
        """Test decomposing a conv layer uses its width."""
        layer = LayerDescriptor(0, LayerKind.CONV3X3, BlockId(Side.DOWN, 1), height=4, width=6, kernel=3)
        maps = decompose(layer)
        assert [f for f, _ in maps] == list(range(9))
        assert maps[0][1].delta == 7

    def test_decompose_rejects_non_conv(self):
        """Test only convolutions decompose."""
        layer = LayerDescriptor(0, LayerKind.LINEAR, BlockId(Side.DOWN, 1))
        with pytest.raises(ValueError, match="not a convolution"):
            decompose(layer)

    def test_unsupported_kernel(self):
        """Test 5x5 kernels are rejected."""
        with pytest.raises(ValueError, match="Unsupported kernel size"):
            delta_table(8, kernel=5)

    def test_edge_flags(self):
        """Test border rows are masked for off-centre slices."""
        _, top_left = decompose(3, 4)[0]
        # Offset (-1, -1) sends l_in to (h + 1, w + 1): the last row and column fall off.
        assert edge_flag(top_left, 0, 4, 4)
        assert not edge_flag(top_left, 3, 4, 4)
        assert not edge_flag(top_left, 12, 4, 4)
        _, centre = decompose(3, 4)[4]
        assert all(edge_flag(centre, l, 4, 4) for l in range(16))

    def test_edge_flag_range(self):
        """Test l_in outside the grid is an error."""
        _, centre = decompose(3, 4)[4]
        with pytest.raises(ValueError, match="outside"):
            edge_flag(centre, 16, 4, 4)


class TestUniconvExecute:
    """Test the scatter-add convolution against the direct oracle."""

    def setup_method(self):
        """Set up a seeded generator."""
        self.rng = np.random.default_rng(7)

    @pytest.mark.parametrize("shape", [(5, 7, 3, 4), (1, 1, 2, 2), (6, 6, 8, 5), (1, 9, 3, 3)])
    def test_matches_oracle_3x3(self, shape):
        """Test stride-1 3x3 results equal direct convolution."""
        h, w, c_in, c_out = shape
        x = self.rng.standard_normal((h, w, c_in))
        k = self.rng.standard_normal((3, 3, c_in, c_out))
        np.testing.assert_allclose(uniconv(x, k), direct_conv_oracle(x, k), rtol=1e-10, atol=1e-10)

    def test_matches_oracle_1x1(self):
        """Test pointwise convolution."""
        x = self.rng.standard_normal((4, 5, 6))
        k = self.rng.standard_normal((1, 1, 6, 3))
        np.testing.assert_allclose(uniconv(x, k), direct_conv_oracle(x, k, padding=0), rtol=1e-10, atol=1e-10)

    @pytest.mark.parametrize("hw", [(8, 8), (7, 5)])
    def test_matches_oracle_stride_2(self, hw):
        """Test stride-2 downsampling, including odd grids."""
        x = self.rng.standard_normal((*hw, 3))
        k = self.rng.standard_normal((3, 3, 3, 4))
        np.testing.assert_allclose(uniconv(x, k, stride=2), direct_conv_oracle(x, k, stride=2), rtol=1e-10,
                                   atol=1e-10)

    def test_integer_inputs_are_exact(self):
        """Test integer data gives bit-exact results."""
        x = self.rng.integers(-5, 5, (6, 6, 3))
        k = self.rng.integers(-3, 3, (3, 3, 3, 2))
        assert np.array_equal(uniconv(x, k), direct_conv_oracle(x, k))

    def test_randomized_integer_suite(self):
        """Test 200 random integer convolutions are bit-exact."""
        for _ in range(200):
            h, w, c_in, c_out = (int(v) for v in self.rng.integers(1, 9, 4))
            kernel = int(self.rng.choice([1, 3]))
            stride = int(self.rng.choice([1, 2])) if kernel == 3 else 1
            x = self.rng.integers(-8, 8, (h, w, c_in))
            k = self.rng.integers(-4, 4, (kernel, kernel, c_in, c_out))
            expected = direct_conv_oracle(x, k, stride=stride, padding=kernel // 2)
            assert np.array_equal(uniconv(x, k, stride=stride), expected), (h, w, c_in, c_out, kernel, stride)

    def test_hook_sees_slices_in_order(self):
        """Test the scatter hook is called once per slice in slice order."""
        calls = []
        act = pack_activation(self.rng.standard_normal((4, 4, 2)))
        weight = pack_weight(self.rng.standard_normal((3, 3, 2, 2)))
        uniconv_execute(act, weight, hook=lambda f, src, dst: calls.append((f, len(src))))
        assert [f for f, _ in calls] == list(range(9))
        assert dict(calls)[4] == 16
        assert dict(calls)[0] == 9

    def test_pack_round_trip(self):
        """Test merged storage preserves the tensor."""
        x = self.rng.standard_normal((3, 4, 5))
        act = pack_activation(x)
        assert act.data.shape == (12, 5)
        np.testing.assert_array_equal(unpack_activation(act), x)

    def test_channel_mismatch(self):
        """Test inconsistent channel counts are rejected."""
        act = pack_activation(np.zeros((4, 4, 3)))
        weight = pack_weight(np.zeros((3, 3, 2, 2)))
        with pytest.raises(ValueError, match="channels"):
            uniconv_execute(act, weight)

    def test_bad_stride(self):
        """Test unsupported strides are rejected."""
        act = pack_activation(np.zeros((4, 4, 2)))
        with pytest.raises(ValueError, match="Unsupported stride"):
            uniconv_execute(act, pack_weight(np.zeros((3, 3, 2, 2))), stride=3)
        with pytest.raises(ValueError, match="only supported for 3x3"):
            uniconv_execute(act, pack_weight(np.zeros((1, 1, 2, 2))), stride=2)


class TestUniconvProperties:
    """Test algebraic properties of the scatter-add convolution."""

    def setup_method(self):
        """Set up a seeded generator."""
        self.rng = np.random.default_rng(11)

    @pytest.mark.parametrize("stride", [1, 2])
    def test_linear_in_input(self, stride):
        """Test a weighted sum of inputs convolves to the weighted sum of outputs."""
        x1, x2 = self.rng.integers(-6, 6, (2, 5, 6, 3))
        k = self.rng.integers(-3, 3, (3, 3, 3, 4))
        combined = uniconv(3 * x1 - 2 * x2, k, stride)
        assert np.array_equal(combined, 3 * uniconv(x1, k, stride) - 2 * uniconv(x2, k, stride))

    @pytest.mark.parametrize("kernel", [1, 3])
    def test_linear_in_weights(self, kernel):
        """Test a weighted sum of kernels convolves to the weighted sum of outputs."""
        x = self.rng.integers(-6, 6, (4, 7, 2))
        k1, k2 = self.rng.integers(-3, 3, (2, kernel, kernel, 2, 5))
        combined = uniconv(x, 4 * k1 + k2)
        assert np.array_equal(combined, 4 * uniconv(x, k1) + uniconv(x, k2))

    @pytest.mark.parametrize("stride", [1, 2])
    def test_hook_rows_strictly_increasing(self, stride):
        """Test every slice scatters increasing source rows to increasing, in-range destinations."""
        seen = []
        act = pack_activation(self.rng.standard_normal((7, 5, 2)))
        weight = pack_weight(self.rng.standard_normal((3, 3, 2, 2)))
        out = uniconv_execute(act, weight, stride=stride, hook=lambda f, src, dst: seen.append((f, src, dst)))
        assert [f for f, _, _ in seen] == sorted(f for f, _, _ in seen)
        for _, src, dst in seen:
            assert len(src) == len(dst) > 0
            assert np.all(np.diff(src) > 0)
            assert np.all(np.diff(dst) > 0)
            assert 0 <= dst.min() and dst.max() < out.data.shape[0]
            assert 0 <= src.min() and src.max() < 35
