"""Tests for reuse selection, fusion and the traffic model."""

import json

import pytest
from sdacc_sim.errors import InfeasiblePlanError, SchemaVersionError
from sdacc_sim.models import MATMUL_KINDS, ATTENTION_KINDS, Footprint, LayerKind
from sdacc_sim.scheduler import (
    MIB,
    FusionGroup,
    FusionKind,
    FusionPlan,
    ReuseMode,
    SchedulerConfig,
    Tiling,
    TrafficEstimate,
    attention_cores,
    baseline_plan,
    buffer_sweep,
    choose_reuse,
    conv_stack_study,
    cross_working_set,
    fixed_weight_reuse,
    lbl_fits,
    load_schedule,
    main_path,
    plan_schedule,
    planning_footprint,
    save_schedule,
    select_reuse,
    tiling_traffic,
    traffic_model,
    validate_plan,
)
from sdacc_sim.simcore import attention_block
from sdacc_sim.workload import conv_stack, layer_footprint


class TestSchedulerConfig:
    """Test buffer configuration."""

    def test_share_bytes(self):
        """Test the resident share of the default 2 MiB buffer."""
        assert SchedulerConfig().share_bytes == int(2 * MIB * 0.75)

    def test_rejects_empty_buffer(self):
        """Test a zero-byte buffer is rejected."""
        with pytest.raises(ValueError, match="buffer_bytes"):
            SchedulerConfig(buffer_bytes=0)

    def test_rejects_bad_share(self):
        """Test the resident share must be in (0, 1]."""
        with pytest.raises(ValueError, match="resident_share"):
            SchedulerConfig(resident_share=1.5)


class TestReuseSelection:
    """Test per-layer tiling traffic and reuse choice."""

    def setup_method(self):
        """Set up a footprint with a small weight and a large input."""
        self.fp = Footprint(0, weight_bytes=100, act_in_bytes=1000, act_out_bytes=50)

    def test_tiling_traffic(self):
        """Test each tiling's re-read multiplier."""
        assert tiling_traffic(self.fp, Tiling.SINGLE, 60) == TrafficEstimate(100, 1000, 0, 50)
        assert tiling_traffic(self.fp, Tiling.WEIGHT_TILES, 60) == TrafficEstimate(100, 2000, 0, 50)
        assert tiling_traffic(self.fp, Tiling.INPUT_TILES, 60) == TrafficEstimate(1700, 1000, 0, 50)
        assert tiling_traffic(self.fp, Tiling.CIN_SPLIT, 60) == TrafficEstimate(100, 1000, 800, 850)

    def test_traffic_totals(self):
        """Test read, write and total byte properties."""
        est = TrafficEstimate(1, 2, 3, 4)
        assert (est.read_bytes, est.write_bytes, est.total) == (6, 4, 10)
        assert est + est == TrafficEstimate(2, 4, 6, 8)

    def test_tie_prefers_weight_reuse(self):
        """Test equal traffic resolves to weight_reuse."""
        mode, tiling, est = select_reuse(self.fp, 2000)
        assert (mode, tiling) == (ReuseMode.WEIGHT_REUSE, Tiling.SINGLE)
        assert est.total == 1150

    def test_input_reuse_when_weights_too_big(self):
        """Test a resident input wins when weights overflow the share."""
        fp = Footprint(0, weight_bytes=5000, act_in_bytes=100, act_out_bytes=50)
        mode, tiling, _ = select_reuse(fp, 1000)
        assert (mode, tiling) == (ReuseMode.INPUT_REUSE, Tiling.SINGLE)

    def test_both_tiled(self):
        """Test neither operand fitting falls back to the cheapest tiling."""
        fp = Footprint(0, weight_bytes=5000, act_in_bytes=3000, act_out_bytes=10)
        mode, tiling, est = select_reuse(fp, 1000)
        assert (mode, tiling) == (ReuseMode.BOTH_TILED, Tiling.CIN_SPLIT)
        assert est.total == 8050

    def test_choose_reuse(self):
        """Test the buffer-level wrapper."""
        mode, est = choose_reuse(self.fp, 4000)
        assert mode is ReuseMode.WEIGHT_REUSE
        assert est.total == 1150
        with pytest.raises(ValueError, match="buffer_bytes"):
            choose_reuse(self.fp, 0)

    def test_fixed_weight_reuse(self):
        """Test the baseline tiles weights it cannot hold."""
        assert fixed_weight_reuse(self.fp, 200) == (ReuseMode.WEIGHT_REUSE, Tiling.SINGLE)
        assert fixed_weight_reuse(self.fp, 50) == (ReuseMode.BOTH_TILED, Tiling.WEIGHT_TILES)

    def test_im2col_footprint(self, tiny_graph):
        """Test im2col lowering inflates a 3x3 conv input by the kernel area."""
        layer = tiny_graph.layer(0)
        plain = planning_footprint(layer, 2)
        lowered = planning_footprint(layer, 2, im2col=True)
        assert lowered.act_in_bytes == 9 * plain.act_in_bytes
        assert lowered.weight_bytes == plain.weight_bytes


class TestPlanSchedule:
    """Test whole-network planning and the traffic model."""

    def test_covers_every_matmul(self, sd14):
        """Test the plan schedules exactly the matmul layers."""
        plan = plan_schedule(sd14)
        assert set(plan.layers) == {l.id for l in sd14.layers if l.kind in MATMUL_KINDS}
        assert all(plan.layers[l.id].reuse is ReuseMode.WEIGHT_REUSE
                   for l in sd14.layers if l.kind in ATTENTION_KINDS)
        validate_plan(sd14, plan)

    def test_baseline_has_no_layer_fusion(self, sd14):
        """Test the baseline only keeps attention cores on chip."""
        plan = baseline_plan(sd14)
        assert not plan.adaptive
        assert all(g.kind is FusionKind.CROSS_LAYER and len(g.layer_ids) == 2 for g in plan.fusion.groups)
        assert all(s.reuse is not ReuseMode.INPUT_REUSE for s in plan.layers.values())

    def test_adaptive_moves_less(self, sd14):
        """Test adaptive reuse and fusion never add traffic over the baseline."""
        adaptive = traffic_model(sd14, plan_schedule(sd14)).total.total
        base = traffic_model(sd14, baseline_plan(sd14)).total.total
        assert adaptive < base

    def test_traffic_conservation(self, sd14):
        """Test per-layer traffic sums to the reported total."""
        report = traffic_model(sd14, plan_schedule(sd14))
        assert sum(e.total for e in report.per_layer.values()) == report.total.total
        assert all(e.total >= 0 for e in report.per_layer.values())

    def test_fusion_groups_are_disjoint(self, sd14):
        """Test no layer belongs to two fusion groups."""
        plan = plan_schedule(sd14)
        ids = [lid for g in plan.fusion.groups for lid in g.layer_ids]
        assert len(ids) == len(set(ids))
        for g in plan.fusion.groups:
            assert all(plan.layers[lid].group_id == g.group_id for lid in g.layer_ids)

    def test_im2col_plan_moves_more(self, sd14):
        """Test planning on lowered inputs raises conv traffic."""
        direct = traffic_model(sd14, baseline_plan(sd14)).total.total
        lowered = traffic_model(sd14, baseline_plan(sd14, im2col=True)).total.total
        assert lowered > direct

    def test_attention_core_fused(self):
        """Test qk and av share a cross-layer group."""
        graph = attention_block(1024)
        seq = main_path(graph.layers)
        assert [l.name.split(".")[-1] for l in seq] == ["to_q", "qk", "av", "to_out"]
        cores = attention_cores(seq)
        assert [[l.kind for l in c] for c in cores] == [[LayerKind.ATTENTION_QK, LayerKind.ATTENTION_AV]]
        plan = plan_schedule(graph)
        assert any(g.layer_ids == [3, 5] and g.kind is FusionKind.CROSS_LAYER for g in plan.fusion.groups)


class TestValidatePlan:
    """Test infeasible plans are rejected."""

    def setup_method(self):
        """Set up a small buffer that forces tiling on the mid conv."""
        self.config = SchedulerConfig(buffer_bytes=1024)

    def test_input_reuse_overflow(self, tiny_graph):
        """Test input_reuse with an input larger than the share."""
        plan = plan_schedule(tiny_graph, self.config)
        plan.layers[2].reuse = ReuseMode.INPUT_REUSE
        with pytest.raises(InfeasiblePlanError, match="input_reuse needs"):
            validate_plan(tiny_graph, plan)

    def test_weight_reuse_overflow(self, tiny_graph):
        """Test weight_reuse with weights larger than the share."""
        plan = plan_schedule(tiny_graph, self.config)
        plan.layers[2].reuse = ReuseMode.WEIGHT_REUSE
        with pytest.raises(InfeasiblePlanError, match="weight_reuse needs"):
            traffic_model(tiny_graph, plan)

    def test_cross_layer_needs_weight_reuse(self, tiny_graph):
        """Test a cross-layer group with a tiled member."""
        plan = plan_schedule(tiny_graph, self.config)
        plan.fusion = FusionPlan([FusionGroup(0, FusionKind.CROSS_LAYER, [0, 2])])
        with pytest.raises(InfeasiblePlanError, match="must use weight_reuse"):
            validate_plan(tiny_graph, plan)

    def test_layer_by_layer_member_over_buffer(self, tiny_graph):
        """Test a fused member whose input and output overflow the buffer."""
        plan = plan_schedule(tiny_graph, SchedulerConfig(buffer_bytes=1400))
        plan.layers[2].reuse = plan.layers[3].reuse = ReuseMode.INPUT_REUSE
        plan.fusion = FusionPlan([FusionGroup(0, FusionKind.LAYER_BY_LAYER, [2, 3])])
        with pytest.raises(InfeasiblePlanError, match=r"mid\.conv: layer_by_layer needs act_in \+ act_out 2048"):
            traffic_model(tiny_graph, plan)

    def test_planner_skips_oversized_layer_by_layer(self, tiny_graph):
        """Test the planner never fuses a layer whose activations overflow."""
        config = SchedulerConfig(buffer_bytes=1400)
        plan = plan_schedule(tiny_graph, config)
        assert plan.layers[2].reuse is ReuseMode.INPUT_REUSE
        assert not lbl_fits(layer_footprint(tiny_graph.layer(2)), config.buffer_bytes)
        assert all(2 not in g.layer_ids for g in plan.fusion.groups)
        validate_plan(tiny_graph, plan)

    def test_cross_layer_counts_row_bands(self, tiny_graph):
        """Test resident weights that fit still fail once the row band is added."""
        plan = plan_schedule(tiny_graph, SchedulerConfig(buffer_bytes=2000))
        plan.layers[0].reuse = plan.layers[2].reuse = ReuseMode.WEIGHT_REUSE
        plan.layers[0].tiling = plan.layers[2].tiling = Tiling.SINGLE
        plan.fusion = FusionPlan([FusionGroup(0, FusionKind.CROSS_LAYER, [0, 2])])
        with pytest.raises(InfeasiblePlanError, match="weights plus row bands 2112 exceed buffer 2000"):
            validate_plan(tiny_graph, plan)

    def test_cross_layer_member_may_exceed_share(self, tiny_graph):
        """Test a grouped member is bounded by the group working set, not the share."""
        plan = plan_schedule(tiny_graph, SchedulerConfig(buffer_bytes=2200, resident_share=0.5))
        plan.layers[0].reuse = plan.layers[2].reuse = ReuseMode.WEIGHT_REUSE
        plan.layers[0].tiling = plan.layers[2].tiling = Tiling.SINGLE
        plan.fusion = FusionPlan()
        with pytest.raises(InfeasiblePlanError, match="weight_reuse needs weights 1152"):
            validate_plan(tiny_graph, plan)
        plan.fusion = FusionPlan([FusionGroup(0, FusionKind.CROSS_LAYER, [0, 2])])
        validate_plan(tiny_graph, plan)


class TestStudies:
    """Test conv-stack studies."""

    def test_conv_stack_savings(self, sd14):
        """Test reuse saves about a quarter of the traffic and fusion adds to it."""
        study = conv_stack_study(sd14)
        assert study["fused_bytes"] < study["reuse_bytes"] < study["baseline_bytes"]
        assert 0.163 <= study["reuse_saving"] <= 0.323
        assert 0.225 <= study["total_saving"] <= 0.385
        assert study["total_saving"] > study["reuse_saving"]

    def test_buffer_sweep_normalized(self, sd14):
        """Test the sweep is normalized to the first size."""
        sweep = buffer_sweep(sd14, [1 * MIB, 2 * MIB, 4 * MIB])
        assert sweep[1 * MIB] == 1.0
        assert all(v > 0 for v in sweep.values())


class TestConvStackFusion:
    """Test reuse and fusion choices over the SD v1.4 conv stack."""

    def setup_method(self):
        """Set up the default 2 MiB buffer."""
        self.config = SchedulerConfig()

    def plan(self, graph):
        stack = conv_stack(graph)
        return stack, plan_schedule(graph, self.config, layers=stack)

    def groups(self, plan, kind):
        return [g.layer_ids for g in plan.fusion.groups if g.kind is kind]

    def test_layer_by_layer_members_fit(self, sd14):
        """Test every layer_by_layer member holds its input and output on chip."""
        stack, plan = self.plan(sd14)
        runs = self.groups(plan, FusionKind.LAYER_BY_LAYER)
        assert runs == [[l.id for l in stack[10:37]]]
        for lid in runs[0]:
            fp = layer_footprint(sd14.layer(lid))
            assert fp.act_in_bytes + fp.act_out_bytes <= self.config.buffer_bytes, sd14.layer(lid).name
        # 640 channels at 32x32: 2.5 MiB of activations.
        assert not lbl_fits(layer_footprint(stack[9]), self.config.buffer_bytes)

    def test_shallow_cross_layer_groups(self, sd14):
        """Test the full-resolution ends fuse part by part within the buffer."""
        stack, plan = self.plan(sd14)
        pos = {l.id: n for n, l in enumerate(stack)}
        runs = self.groups(plan, FusionKind.CROSS_LAYER)
        assert [[pos[lid] for lid in run] for run in runs] == [[0, 1], [50, 51]]
        fps = {l.id: layer_footprint(l) for l in stack}
        for run in runs:
            members = [sd14.layer(lid) for lid in run]
            assert cross_working_set(members, fps, 2) <= self.config.buffer_bytes
            assert all(0 <= pos[lid] <= 5 or 44 <= pos[lid] <= 51 for lid in run)

    def test_grouped_tiled_layer_becomes_weight_resident(self, sd14):
        """Test a tiled member of a cross-layer group keeps its weights resident."""
        stack, plan = self.plan(sd14)
        fp = layer_footprint(stack[1])
        assert fp.weight_bytes > self.config.share_bytes
        assert select_reuse(fp, self.config.share_bytes)[0] is ReuseMode.BOTH_TILED
        assert (plan.layers[stack[1].id].reuse, plan.layers[stack[1].id].tiling) == (
            ReuseMode.WEIGHT_REUSE, Tiling.SINGLE)
        # Unfused shallow layers stay tiled.
        assert plan.layers[stack[2].id].reuse is ReuseMode.BOTH_TILED
        validate_plan(sd14, plan)

    def test_reuse_choice_dominates_fixed_strategies(self, sd14):
        """Test each conv's chosen traffic is no worse than any feasible fixed strategy."""
        share = self.config.share_bytes
        for layer in conv_stack(sd14):
            fp = layer_footprint(layer)
            chosen = select_reuse(fp, share)[2].total
            _, fixed = fixed_weight_reuse(fp, share)
            assert chosen <= tiling_traffic(fp, fixed, share).total, layer.name
            for tiling in (Tiling.WEIGHT_TILES, Tiling.INPUT_TILES, Tiling.CIN_SPLIT):
                assert chosen <= tiling_traffic(fp, tiling, share).total, layer.name
            if fp.weight_bytes <= share or fp.act_in_bytes <= share:
                assert chosen <= tiling_traffic(fp, Tiling.SINGLE, share).total, layer.name

    def test_fused_layers_never_move_more_than_baseline(self, sd14):
        """Test per-layer fused traffic is bounded by the fixed weight-reuse baseline."""
        stack, plan = self.plan(sd14)
        fused = traffic_model(sd14, plan).per_layer
        base = traffic_model(sd14, baseline_plan(sd14, self.config, layers=stack)).per_layer
        assert all(fused[l.id].total <= base[l.id].total for l in stack)


class TestScheduleFiles:
    """Test schedule plan persistence."""

    def test_save_and_load(self, tiny_graph, tmp_path):
        """Test a saved plan loads with the same schedules."""
        plan = plan_schedule(tiny_graph, im2col=True)
        save_schedule(plan, tmp_path / "schedule.json")
        loaded = load_schedule(tmp_path / "schedule.json")
        assert loaded.im2col and loaded.adaptive
        assert loaded.layers == plan.layers
        assert loaded.config == plan.config

    def test_schema_checked(self, tiny_graph, tmp_path):
        """Test an unsupported schema version is rejected."""
        path = tmp_path / "schedule.json"
        save_schedule(plan_schedule(tiny_graph), path)
        data = json.loads(path.read_text())
        data["schema_version"] = "9.0"
        path.write_text(json.dumps(data))
        with pytest.raises(SchemaVersionError):
            load_schedule(path)

    def test_malformed(self, tmp_path):
        """Test unreadable and malformed files."""
        path = tmp_path / "schedule.json"
        path.write_text("{not json")
        with pytest.raises(InfeasiblePlanError, match="Failed to read"):
            load_schedule(path)
        path.write_text(json.dumps({"schema_version": "1.0", "config": {}}))
        with pytest.raises(InfeasiblePlanError, match="Malformed"):
            load_schedule(path)
