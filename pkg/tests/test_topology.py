import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import MESH6, CHAIN4, chain_topology, mesh_topology, random_chain, random_mesh
from splitnas.topology import (DeviceProfile, LayerAssignment, LinkSpec, Topology, TopologyError, build_assignment,
                               comm_latency, load_topology, output_bits, parse_topology)


def test_chain4():
    t = load_topology(CHAIN4)
    assert t.kind == "chain" and t.M == 4 and t.order == [1, 2, 3, 4]
    assert [(ln.tx, ln.rx, ln.capacity, ln.kind) for ln in t.links] == [
        (1, 2, 25.0, "wireless"), (2, 3, 50.0, "wireless"), (3, 4, 200.0, "wired")]
    assert [d.name for d in t.devices] == ["UE", "SBS", "MBS", "Cloud"]


def test_mesh6():
    t = load_topology(MESH6)
    assert t.kind == "mesh" and t.M == 6
    assert sorted(t.chain_set) == [1, 6] and sorted(t.tree_set) == [2, 3, 4, 5] and t.root == 2
    assert t.prefix == [1] and t.branches == [3, 4, 5] and t.suffix == [6]
    assert t.order == [1, 2, 3, 4, 5, 6] and t.final_device == 6
    assert t.next_hops(2) == [3, 4, 5] and t.next_hops(4) == [6] and t.next_hops(6) == []
    assert t.upload_path() == [1, 2, 3, 6]


def _doc(path):
    return json.loads(path.read_text())


@pytest.mark.parametrize("mutate, message", [
    (lambda d: d["links"].append({"tx": 4, "rx": 9, "capacity_mbps": 10}), "unknown device 9"),
    (lambda d: d["links"].pop(1), "single directed path"),
    (lambda d: d["devices"].pop(), "unknown device"),
    (lambda d: d["devices"][0].update(id=7), "contiguous"),
    (lambda d: d["devices"][1].update(speed_factor=0), "speed_factor"),
    (lambda d: d["links"][0].update(capacity_mbps=-1), "capacity"),
    (lambda d: d["links"][0].update(rx=1), ""),
    (lambda d: d["links"][0].update(kind="laser"), "kind"),
    (lambda d: d.update(kind="ring"), "kind"),
    (lambda d: d.pop("devices"), "malformed"),
])
def test_chain_errors(mutate, message):
    d = _doc(CHAIN4)
    mutate(d)
    with pytest.raises(TopologyError, match=message or None):
        parse_topology(json.dumps(d))


@pytest.mark.parametrize("mutate, message", [
    (lambda d: d.update(root=1), "root"),
    (lambda d: d.update(chain_set=[1, 2, 6]), "overlap"),
    (lambda d: d.update(tree_set=[2, 3, 4]), "cover"),
    (lambda d: d["links"].pop(5), "exactly one chain device"),
    (lambda d: d["links"].append({"tx": 3, "rx": 4, "capacity_mbps": 10}), ""),
    (lambda d: d["links"].pop(2), "not fed by root"),
])
def test_mesh_errors(mutate, message):
    d = _doc(MESH6)
    mutate(d)
    with pytest.raises(TopologyError, match=message or None):
        parse_topology(json.dumps(d))


def test_malformed_json():
    with pytest.raises(TopologyError):
        parse_topology("{not json")


def test_link_validation():
    with pytest.raises(TopologyError):
        LinkSpec(1, 1, 10.0)
    with pytest.raises(TopologyError):
        DeviceProfile(1, "x", -1.0)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.booleans())
def test_round_trip_is_fixed_point(seed, mesh):
    rng = np.random.default_rng(seed)
    topo = (random_mesh if mesh else random_chain)(rng)[0]
    once = parse_topology(topo.to_json())
    assert once.to_json() == topo.to_json()
    assert parse_topology(once.to_json()).to_dict() == once.to_dict()


def test_bundled_files_round_trip():
    for p in (CHAIN4, MESH6):
        t = load_topology(p)
        assert parse_topology(t.to_json()).to_dict() == t.to_dict()


# ------------------------------------------------------------------ comm


def test_comm_latency_examples():
    t = load_topology(CHAIN4)
    assert abs(comm_latency(32_000, t.link(1, 2)) - 1.28) <= 1e-12
    assert comm_latency(0, t.link(1, 2)) == 0.0
    assert comm_latency(32_000, None) == 0.0
    with pytest.raises(ValueError):
        comm_latency(-1, t.link(1, 2))


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 1e9), st.floats(0.1, 1e4), st.floats(0.1, 10))
def test_comm_latency_linear_and_inverse(bits, cap, k):
    a = comm_latency(bits, LinkSpec(1, 2, cap))
    assert comm_latency(k * bits, LinkSpec(1, 2, cap)) == pytest.approx(k * a, rel=1e-12, abs=1e-300)
    assert comm_latency(bits, LinkSpec(1, 2, k * cap)) == pytest.approx(a / k, rel=1e-12, abs=1e-300)


def test_output_bits():
    assert output_bits((10, 10, 10)) == 32_000
    assert output_bits(()) == 0
    assert output_bits((0, 4)) == 0
    # every candidate keeps the layer shape, so identity carries the same payload as any sibling
    assert output_bits((8, 8, 4)) == 8 * 8 * 4 * 32


# ------------------------------------------------------------------ assignment


def test_single_device_takes_everything():
    t = Topology([DeviceProfile(1, "only", 1.0)], [], "chain")
    assert build_assignment(5, t).blocks == {1: [1, 2, 3, 4, 5]}


def test_equal_split():
    t = chain_topology([1.0, 1.0], [25.0])
    la = build_assignment(4, t)
    assert la.blocks == {1: [1, 2], 2: [3, 4]}
    assert la.last_layer(1) == 2 and la.device_of(3) == 2


def test_faster_devices_get_more_layers():
    la = build_assignment(6, load_topology(CHAIN4))
    assert la.blocks == {1: [1], 2: [2], 3: [3, 4], 4: [5, 6]}


def test_too_few_layers():
    with pytest.raises(TopologyError):
        build_assignment(3, load_topology(CHAIN4))


def test_mesh_assignment_and_layer_inputs():
    t = load_topology(MESH6)
    la = build_assignment(8, t)
    assert la.N == 8
    src = la.layer_inputs()
    root_last = la.last_layer(2)
    for b in (3, 4, 5):
        assert src[la.blocks[b][0]] == [root_last]
    assert src[la.blocks[6][0]] == [la.last_layer(b) for b in (3, 4, 5)]
    assert src[1] == [0]


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.booleans(), st.integers(0, 12))
def test_assignment_partitions_layers(seed, mesh, extra):
    rng = np.random.default_rng(seed)
    topo = (random_mesh if mesh else random_chain)(rng)[0]
    la = build_assignment(topo.M + extra, topo)
    la.validate()
    layers = sorted(n for b in la.blocks.values() for n in b)
    assert layers == list(range(1, topo.M + extra + 1))
    for m, b in la.blocks.items():
        assert la.last_layer(m) == max(b) and len(b) >= 1
    assert build_assignment(topo.M + extra, topo).blocks == la.blocks


def test_invalid_assignment_detected():
    t = chain_topology([1.0, 1.0], [25.0])
    with pytest.raises(TopologyError):
        LayerAssignment({1: [1, 3], 2: [2]}, t).validate()
    with pytest.raises(TopologyError):
        LayerAssignment({1: [3], 2: [1, 2]}, t).validate()


def test_mesh_builder_matches_bundled_file():
    built = mesh_topology(1, 3, 1)
    assert built.order == load_topology(MESH6).order
