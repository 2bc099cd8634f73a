import numpy as np
import pytest
from hypothesis import given, strategies as st

from dsme_capr.frame_structure import ConfigError
from dsme_capr.traffic import Pattern, TrafficConfig, build_binary_tree, generate, load_edge_list


def test_31_node_tree():
    topo = build_binary_tree(31)
    groups = topo.hop_groups()
    assert {h: len(v) for h, v in groups.items()} == {0: 1, 1: 2, 2: 4, 3: 8, 4: 16}


def test_small_trees():
    assert build_binary_tree(1).nodes == [0]
    assert {h: len(v) for h, v in build_binary_tree(7).hop_groups().items()} == {0: 1, 1: 2, 2: 4}
    with pytest.raises(ConfigError):
        build_binary_tree(0)


@given(st.integers(1, 127))
def test_tree_invariants(n):
    topo = build_binary_tree(n)
    for node in topo.nodes:
        if node == topo.sink:
            assert topo.hop[node] == 0
        else:
            assert topo.hop[topo.parent[node]] == topo.hop[node] - 1
            assert topo.path_to_sink(node)[-1] == topo.sink
    assert topo.subtree_size(topo.sink) == n


def test_edge_list(tmp_path):
    f = tmp_path / "t.txt"
    f.write_text("# child parent\n1 0\n2 0\n3 1\n")
    topo = load_edge_list(f)
    assert topo.sink == 0 and topo.hop[3] == 2
    f.write_text("1 0\n1 2\n")
    with pytest.raises(ConfigError):
        load_edge_list(f)
    f.write_text("1 2\n2 1\n")
    with pytest.raises(ConfigError):
        load_edge_list(f)


def test_rate_mean_within_three_sigma():
    times = generate(TrafficConfig(Pattern.RATE, delta=2), node=3, duration_s=10_000, seed=5)
    mean = len(times) / 10_000
    assert abs(mean - 2) < 3 * np.sqrt(2 / 10_000)


def test_rate_packets_at_second_start():
    times = generate(TrafficConfig(Pattern.RATE, delta=3), node=1, duration_s=50, seed=1)
    assert all(t == int(t) for t in times)


def test_burst_is_delta_packets():
    times = generate(TrafficConfig(Pattern.BURST, delta=4), node=2, duration_s=500, seed=9)
    _, counts = np.unique(times, return_counts=True)
    assert set(counts) <= {4, 8, 12, 16, 20, 24}
    assert all(c % 4 == 0 for c in counts)


def test_sink_is_silent():
    assert generate(TrafficConfig(delta=4), node=0, duration_s=100, seed=1) == []


def test_uniform_placement_inside_interval():
    times = generate(TrafficConfig(delta=3, uniform_placement=True), node=1, duration_s=30, seed=2)
    assert times == sorted(times) and all(0 <= t < 30 for t in times)
    assert any(t != int(t) for t in times)


@given(st.integers(0, 10**6), st.integers(1, 30))
def test_generator_deterministic(seed, node):
    cfg = TrafficConfig(Pattern.BURST, delta=2)
    assert generate(cfg, node, 20, seed) == generate(cfg, node, 20, seed)


def test_invalid_traffic():
    with pytest.raises(ConfigError):
        TrafficConfig(delta=0)
    with pytest.raises(ConfigError):
        generate(TrafficConfig(), 1, 0, 1)
