"""Tests for workload data models."""

import pytest
from sdacc_sim.models import (
    ATTENTION_KINDS,
    CONV_KINDS,
    MATMUL_KINDS,
    MOVE_KINDS,
    VECTOR_KINDS,
    BlockId,
    LayerDescriptor,
    LayerKind,
    Side,
)


class TestBlockId:
    """Test block identifiers."""

    def test_str_and_parse(self):
        """Test text form round-trips for each side."""
        for text in ("down1", "mid", "up12"):
            assert str(BlockId.parse(text)) == text

    def test_side_coerced_from_string(self):
        """Test a plain string side is converted to Side."""
        assert BlockId("down", 3).side is Side.DOWN

    def test_mid_index_must_be_zero(self):
        """Test the mid block rejects a non-zero index."""
        with pytest.raises(ValueError, match="mid block must have index 0"):
            BlockId(Side.MID, 1)

    def test_index_range(self):
        """Test down/up indices outside 1..12 are rejected."""
        with pytest.raises(ValueError, match="outside"):
            BlockId(Side.UP, 13)
        with pytest.raises(ValueError, match="outside"):
            BlockId(Side.DOWN, 0)

    def test_parse_rejects_garbage(self):
        """Test unknown block text is rejected."""
        with pytest.raises(ValueError, match="Unrecognized block id"):
            BlockId.parse("side3")


class TestLayerDescriptor:
    """Test derived layer geometry."""

    def setup_method(self):
        """Set up a shared block reference."""
        self.block = BlockId(Side.DOWN, 1)

    def test_stride_two_rounds_up(self):
        """Test strided output dims use ceiling division."""
        layer = LayerDescriptor(0, LayerKind.DOWNSAMPLE_CONV, self.block, height=7, width=8, stride=2, kernel=3)
        assert (layer.out_height, layer.out_width) == (4, 4)
        assert layer.out_len == 16

    def test_upsample_doubles(self):
        """Test nearest upsampling doubles the grid."""
        layer = LayerDescriptor(0, LayerKind.UPSAMPLE_NEAREST, self.block, height=4, width=5)
        assert layer.out_len == 8 * 10

    def test_row_count_defaults_to_spatial(self):
        """Test linear rows fall back to H*W."""
        layer = LayerDescriptor(0, LayerKind.LINEAR, self.block, height=4, width=4)
        assert layer.row_count == 16
        assert LayerDescriptor(0, LayerKind.LINEAR, self.block, height=4, width=4, rows=77).row_count == 77

    def test_softmax_elements(self):
        """Test softmax touches every attention score."""
        layer = LayerDescriptor(0, LayerKind.SOFTMAX, self.block, heads=8, seq_len=64, kv_len=77)
        assert layer.vector_elements == 8 * 64 * 77

    def test_vector_elements(self):
        """Test elementwise ops touch rows x channels."""
        layer = LayerDescriptor(0, LayerKind.GELU, self.block, height=4, width=4, c_in=10)
        assert layer.vector_elements == 160


def test_kind_sets_are_disjoint():
    """Test matmul, vector and move kinds never overlap."""
    assert not MATMUL_KINDS & VECTOR_KINDS
    assert not MATMUL_KINDS & MOVE_KINDS
    assert not VECTOR_KINDS & MOVE_KINDS
    assert CONV_KINDS | ATTENTION_KINDS | {LayerKind.LINEAR} == MATMUL_KINDS
    assert MATMUL_KINDS | VECTOR_KINDS | MOVE_KINDS == frozenset(LayerKind)
