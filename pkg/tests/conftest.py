"""Pytest configuration and fixtures."""

import json
import tempfile
from pathlib import Path

import pytest
from sdacc_sim.phase import save_trace, synth_trace
from sdacc_sim.workload import build_unet


TINY_TOPOLOGY = {
    "schema_version": "1.0",
    "model_id": "tiny",
    "latent_h": 8,
    "latent_w": 8,
    "context_len": 4,
    "context_dim": 8,
    "blocks": [
        {"side": "down", "index": 1, "layers": [
            {"kind": "conv3x3", "name": "conv", "H": 8, "W": 8, "c_in": 4, "c_out": 8, "kernel": 3},
            {"kind": "silu", "name": "act", "H": 8, "W": 8, "c_in": 8, "c_out": 8},
        ]},
        {"side": "mid", "index": 0, "layers": [
            {"kind": "conv3x3", "name": "conv", "H": 8, "W": 8, "c_in": 8, "c_out": 8, "kernel": 3},
        ]},
        {"side": "up", "index": 1, "layers": [
            {"kind": "conv3x3", "name": "conv", "H": 8, "W": 8, "c_in": 8, "c_out": 4, "kernel": 3},
        ]},
    ],
}


@pytest.fixture
def temp_dir():
    """Create a temporary directory for output files."""
    with tempfile.TemporaryDirectory() as tmpdir:
        yield Path(tmpdir)


@pytest.fixture
def tiny_topology(temp_dir):
    """Write a three-block explicit topology file."""
    path = temp_dir / "tiny.json"
    path.write_text(json.dumps(TINY_TOPOLOGY))
    return path


@pytest.fixture
def tiny_graph(tiny_topology):
    """Graph built from the tiny topology."""
    return build_unet(topology=tiny_topology)


@pytest.fixture(scope="session")
def sd14():
    """Bundled SD v1.4 U-Net graph."""
    return build_unet("sd14")


@pytest.fixture
def step_trace():
    """Synthetic trace with a transition at step 20 and outliers in blocks 1 and 2."""
    return synth_trace(T=50, outlier_blocks=(1, 2), D_true=20, n_images=2)


@pytest.fixture
def trace_csv(temp_dir, step_trace):
    """The synthetic trace written as CSV."""
    path = temp_dir / "trace.csv"
    save_trace(step_trace, path)
    return path
