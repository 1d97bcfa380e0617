"""Tests for topology construction and MAC accounting."""

import csv
import json

import pytest
from sdacc_sim.errors import TopologyError
from sdacc_sim.models import CONV_KINDS, MATMUL_KINDS, BlockId, LayerDescriptor, LayerKind, Side
from sdacc_sim.workload import (
    FOOTPRINT_HEADER,
    MACS_HEADER,
    conv_stack,
    cost_curve,
    cost_function,
    count_macs,
    count_params,
    executed_blocks,
    layer_footprint,
    layer_macs,
    step_macs,
    tensor_footprints,
    write_cost_csv,
    write_footprints_csv,
    write_macs_csv,
    build_unet,
)

from conftest import TINY_TOPOLOGY


def _write(tmp_path, doc):
    path = tmp_path / "topo.json"
    path.write_text(json.dumps(doc))
    return path


class TestBuildUnet:
    """Test graph construction from bundled and custom topologies."""

    @pytest.mark.parametrize("model_id", ["sd14", "sd21base", "sdxl"])
    def test_bundled_models_build(self, model_id):
        """Test every bundled model builds with mirrored down/up blocks."""
        graph = build_unet(model_id)
        assert graph.model_id == model_id
        assert len(graph.skips) == graph.depth
        assert [l.id for l in graph.layers] == list(range(len(graph.layers)))

    def test_sd14_layout(self, sd14):
        """Test the SD v1.4 graph has 12 down blocks, a mid block and 12 up blocks."""
        assert graph_sides(sd14) == (12, 1, 12)
        assert sd14.blocks[0] == BlockId(Side.DOWN, 1)
        assert sd14.blocks[-1] == BlockId(Side.UP, 1)
        assert (sd14.latent_h, sd14.latent_w) == (64, 64)

    def test_custom_topology(self, tiny_graph):
        """Test a custom file yields model_id 'custom'."""
        assert tiny_graph.model_id == "custom"
        assert len(tiny_graph.layers) == 4
        assert tiny_graph.source.endswith("tiny.json")

    def test_latent_override_rescales(self, sd14):
        """Test a smaller latent shrinks every level."""
        small = build_unet("sd14", latent_h=32, latent_w=32)
        assert small.layers[0].height == 32
        assert count_macs(small).total < count_macs(sd14).total

    def test_doubled_latent_quadruples_convs(self, sd14):
        """Test doubling both latent sides multiplies every conv by four."""
        big = build_unet("sd14", latent_h=128, latent_w=128)
        base, scaled = count_macs(sd14).per_layer, count_macs(big).per_layer
        assert len(big.layers) == len(sd14.layers)
        for small_layer, big_layer in zip(sd14.layers, big.layers):
            assert big_layer.kind is small_layer.kind
            if small_layer.kind in CONV_KINDS:
                assert scaled[big_layer.id] == 4 * base[small_layer.id]
            elif small_layer.kind in MATMUL_KINDS:
                # Self-attention scores grow with both lengths; text-side projections stay fixed.
                assert scaled[big_layer.id] in (base[small_layer.id], 4 * base[small_layer.id], 16 * base[small_layer.id])

    def test_latent_must_divide(self):
        """Test a latent not divisible by the downsampling factor is rejected."""
        with pytest.raises(TopologyError, match="not divisible"):
            build_unet("sd14", latent_h=36, latent_w=36)

    def test_unknown_model(self):
        """Test an unknown bundled id is rejected."""
        with pytest.raises(TopologyError, match="Unknown model_id"):
            build_unet("sd99")

    def test_missing_file(self, tmp_path):
        """Test a missing topology file is reported."""
        with pytest.raises(TopologyError, match="not found"):
            build_unet(topology=tmp_path / "nope.json")

    def test_requires_source(self):
        """Test that a model id or file is required."""
        with pytest.raises(TopologyError, match="Either model_id"):
            build_unet()

    def test_schema_major_mismatch(self, tmp_path):
        """Test a future schema major version is rejected."""
        path = _write(tmp_path, {**TINY_TOPOLOGY, "schema_version": "2.0"})
        with pytest.raises(TopologyError, match="schema_version"):
            build_unet(topology=path)

    def test_conv3x3_needs_kernel_three(self, tmp_path):
        """Test layer validation catches a mislabelled kernel."""
        doc = json.loads(json.dumps(TINY_TOPOLOGY))
        del doc["blocks"][0]["layers"][0]["kernel"]
        with pytest.raises(TopologyError, match="requires kernel 3"):
            build_unet(topology=_write(tmp_path, doc))

    def test_unmirrored_blocks(self, tmp_path):
        """Test up blocks must mirror down blocks."""
        doc = json.loads(json.dumps(TINY_TOPOLOGY))
        doc["blocks"][2]["index"] = 2
        with pytest.raises(TopologyError, match="do not mirror"):
            build_unet(topology=_write(tmp_path, doc))

    def test_unknown_unit(self, tmp_path):
        """Test an unknown unit type is rejected."""
        doc = json.loads(json.dumps(TINY_TOPOLOGY))
        doc["blocks"][1] = {"side": "mid", "index": 0, "units": [{"type": "lstm"}]}
        with pytest.raises(TopologyError, match="Unknown unit type"):
            build_unet(topology=_write(tmp_path, doc))


def graph_sides(graph):
    return tuple(sum(1 for b in graph.blocks if b.side is side) for side in (Side.DOWN, Side.MID, Side.UP))


class TestLayerMacs:
    """Test per-layer MAC formulas."""

    def setup_method(self):
        """Set up a shared block reference."""
        self.block = BlockId(Side.DOWN, 1)

    def test_conv(self):
        """Test conv MACs are out_len * c_in * c_out * k^2."""
        layer = LayerDescriptor(0, LayerKind.CONV3X3, self.block, height=8, width=8, c_in=4, c_out=8, kernel=3)
        assert layer_macs(layer) == 64 * 4 * 8 * 9

    def test_strided_conv(self):
        """Test stride-2 convs count output pixels only."""
        layer = LayerDescriptor(0, LayerKind.DOWNSAMPLE_CONV, self.block, height=8, width=8, c_in=4, c_out=4,
                                kernel=3, stride=2)
        assert layer_macs(layer) == 16 * 4 * 4 * 9

    def test_linear_rows(self):
        """Test linear MACs use the row count."""
        layer = LayerDescriptor(0, LayerKind.LINEAR, self.block, height=8, width=8, c_in=768, c_out=320, rows=77)
        assert layer_macs(layer) == 77 * 768 * 320

    def test_attention(self):
        """Test attention MACs are heads * seq * kv * head_dim."""
        layer = LayerDescriptor(0, LayerKind.ATTENTION_QK, self.block, heads=8, seq_len=64, kv_len=77, head_dim=40)
        assert layer_macs(layer) == 8 * 64 * 77 * 40

    @pytest.mark.parametrize("kind", [LayerKind.SOFTMAX, LayerKind.GELU, LayerKind.CONCAT, LayerKind.ADD])
    def test_zero_mac_kinds(self, kind):
        """Test vector and movement layers count zero MACs."""
        layer = LayerDescriptor(0, kind, self.block, height=8, width=8, c_in=4, c_out=4, heads=1, seq_len=1, kv_len=1)
        assert layer_macs(layer) == 0


class TestAccounting:
    """Test graph-level MAC, parameter and cost accounting."""

    def test_blocks_sum_to_total(self, sd14):
        """Test per-block MACs add up to the network total."""
        macs = count_macs(sd14)
        assert sum(macs.per_block.values()) == macs.total
        assert sum(macs.per_layer.values()) == macs.total

    def test_sd14_step_macs(self, sd14):
        """Test SD v1.4 runs roughly 400 GMACs per step."""
        assert 3.8e11 < step_macs(sd14) < 4.2e11

    def test_cfg_and_extras(self, sd14):
        """Test guidance doubles the U-Net and extras add on top."""
        base = step_macs(sd14)
        assert step_macs(sd14, cfg=True) == 2 * base
        assert step_macs(sd14, include_extras=True) == base + sum(sd14.extras.values())

    def test_sd14_params(self, sd14):
        """Test the parameter count is in the expected range."""
        assert 7e8 < count_params(sd14) < 1e9

    def test_executed_blocks(self, sd14):
        """Test depth l keeps the top l down and up blocks in execution order."""
        assert [str(b) for b in executed_blocks(sd14, 2)] == ["down1", "down2", "up2", "up1"]
        assert executed_blocks(sd14, 13) == sd14.blocks

    def test_executed_blocks_range(self, sd14):
        """Test depths outside 1..13 are rejected."""
        with pytest.raises(ValueError, match="Depth l"):
            executed_blocks(sd14, 0)

    def test_tiny_cost_function(self, tiny_graph):
        """Test the cost function on a hand-countable graph."""
        assert cost_function(tiny_graph, 1) == pytest.approx(0.5)
        assert cost_function(tiny_graph, 13) == 1.0

    def test_cost_curve_monotone(self, sd14):
        """Test f grows with depth and ends at one."""
        curve = cost_curve(sd14)
        values = [curve[l] for l in range(1, 14)]
        assert values == sorted(values)
        assert values[-1] == 1.0
        assert 0.15 < curve[2] < 0.19

    def test_all_basis_counts_attention(self, sd14):
        """Test the all-MAC basis weighs the attention-heavy top blocks more."""
        assert cost_function(sd14, 2, "all") > cost_function(sd14, 2, "profiled")

    def test_unknown_basis(self, sd14):
        """Test an unknown cost basis is rejected."""
        with pytest.raises(ValueError, match="Unknown cost basis"):
            cost_function(sd14, 2, "flops")


class TestFootprints:
    """Test tensor footprints and CSV dumps."""

    def test_conv_footprint(self, tiny_graph):
        """Test conv footprint bytes at two bytes per element."""
        fp = layer_footprint(tiny_graph.layer(0), 2)
        assert (fp.weight_bytes, fp.act_in_bytes, fp.act_out_bytes) == (576, 512, 1024)

    def test_bytes_per_element(self, tiny_graph):
        """Test footprints scale with element width."""
        one = tensor_footprints(tiny_graph, 1)
        two = tensor_footprints(tiny_graph, 2)
        assert all(b.act_in_bytes == 2 * a.act_in_bytes for a, b in zip(one, two))
        with pytest.raises(ValueError, match="bytes_per_element"):
            tensor_footprints(tiny_graph, 0)

    def test_conv_stack(self, sd14):
        """Test the conv stack keeps only 3x3 convolutions."""
        stack = conv_stack(sd14)
        assert stack
        assert all(l.kernel == 3 for l in stack)

    def test_csv_dumps(self, tiny_graph, tmp_path):
        """Test the MAC, footprint and cost tables."""
        write_macs_csv(tiny_graph, tmp_path / "macs.csv")
        write_footprints_csv(tiny_graph, tmp_path / "fp.csv")
        write_cost_csv(tiny_graph, tmp_path / "cost.csv")
        with open(tmp_path / "macs.csv", newline="") as f:
            rows = list(csv.reader(f))
        assert rows[0] == MACS_HEADER
        assert rows[1][:4] == ["0", "conv3x3", "down1", str(64 * 4 * 8 * 9)]
        with open(tmp_path / "fp.csv", newline="") as f:
            assert next(csv.reader(f)) == FOOTPRINT_HEADER
        with open(tmp_path / "cost.csv", newline="") as f:
            cost_rows = list(csv.reader(f))
        assert cost_rows[0] == ["l", "f"]
        assert len(cost_rows) == 14
