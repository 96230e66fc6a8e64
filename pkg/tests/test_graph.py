from __future__ import annotations

import logging
from collections import deque

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from subgec import graph
from subgec.graph import LoadError


def path3():
    return graph.from_edges(3, [(0, 1), (1, 2)])


def test_normalized_adjacency_path():
    a = path3().normalized_adjacency().toarray()
    np.testing.assert_allclose(np.diag(a), [1 / 2, 1 / 3, 1 / 2])
    np.testing.assert_allclose([a[0, 1], a[1, 2]], [1 / np.sqrt(6)] * 2)
    assert a[0, 2] == 0.0


def test_normalized_adjacency_isolated_node():
    g = graph.from_edges(1, [])
    np.testing.assert_array_equal(g.normalized_adjacency().toarray(), [[1.0]])


def test_bfs_star_and_chain():
    star = graph.from_edges(6, [(0, i) for i in range(1, 6)])
    assert graph.bfs_subgraph(star, 0, 3).nodes.tolist() == [0, 1, 2]
    chain = path3()
    sub = graph.bfs_subgraph(chain, 1, 3)
    assert sub.nodes.tolist() == [1, 0, 2]
    np.testing.assert_array_equal(sub.adj, [[0, 1, 1], [1, 0, 0], [1, 0, 0]])


def test_bfs_small_component_returned_whole():
    g = graph.from_edges(5, [(0, 1), (2, 3)])
    assert graph.bfs_subgraph(g, 0, 4).nodes.tolist() == [0, 1]
    assert graph.bfs_subgraph(g, 4, 3).nodes.tolist() == [4]


def test_bfs_errors():
    g = path3()
    with pytest.raises(IndexError):
        graph.bfs_subgraph(g, 3, 2)
    with pytest.raises(ValueError):
        graph.bfs_subgraph(g, 0, 0)


def test_sample_anchors_frozen_draw():
    g = graph.from_edges(2708, [])
    a = graph.sample_anchors(g, 100, 7)
    assert a[:10].tolist() == [1786, 31, 2581, 247, 1374, 259, 991, 1646, 1312, 796]
    assert int(a.sum()) == 142121
    assert np.unique(a).size == 100


def test_sample_anchors_errors():
    g = path3()
    with pytest.raises(ValueError):
        graph.sample_anchors(g, 1, 0)
    with pytest.raises(ValueError):
        graph.sample_anchors(g, 4, 0)


def test_from_edges_symmetrises_and_dedups():
    g = graph.from_edges(3, [(0, 1), (1, 0), (0, 1), (2, 2)])
    assert g.num_edges == 1
    g.validate()


def test_round_trip(tmp_path):
    g = graph.synthetic_graph(40, num_classes=3, num_features=7, seed=3)
    graph.save_dataset(g, tmp_path / "d")
    h = graph.load_dataset(tmp_path / "d")
    assert (g.adj != h.adj).nnz == 0
    assert g.features.tobytes() == h.features.tobytes()
    np.testing.assert_array_equal(g.labels, h.labels)
    for s in graph.SPLITS:
        np.testing.assert_array_equal(g.splits[s], h.splits[s])
    assert (h.name, h.num_classes) == (g.name, g.num_classes)


def test_missing_edges_file_is_named(tmp_path):
    graph.save_dataset(path3(), tmp_path)
    (tmp_path / "edges.tsv").unlink()
    with pytest.raises(LoadError, match="edges.tsv"):
        graph.load_dataset(tmp_path)


def test_bad_feature_line_reports_line_number(tmp_path):
    graph.save_dataset(path3(), tmp_path)
    lines = (tmp_path / "features.tsv").read_text().split("\n")
    lines[1] = "x\t" * 2 + "1.0"
    (tmp_path / "features.tsv").write_text("\n".join(lines))
    with pytest.raises(LoadError, match=r"features.tsv:2"):
        graph.load_dataset(tmp_path)


def test_self_loops_dropped_with_warning(tmp_path, caplog):
    graph.save_dataset(path3(), tmp_path)
    with open(tmp_path / "edges.tsv", "a") as fh:
        fh.write("1\t1\n")
    with caplog.at_level(logging.WARNING):
        g = graph.load_dataset(tmp_path)
    assert g.num_edges == 2
    assert "self-loop" in caplog.text


def test_out_of_range_edge(tmp_path):
    graph.save_dataset(path3(), tmp_path)
    with open(tmp_path / "edges.tsv", "a") as fh:
        fh.write("0\t9\n")
    with pytest.raises(LoadError, match="outside"):
        graph.load_dataset(tmp_path)


def test_synthetic_graph_is_valid_and_homophilous():
    g = graph.synthetic_graph(500, num_classes=5, homophily=0.9, seed=1)
    g.validate()
    coo = g.adj.tocoo()
    assert np.mean(g.labels[coo.row] == g.labels[coo.col]) > 0.8
    assert all(np.sum(g.labels[g.splits["train"]] == c) == 20 for c in range(5))


edge_lists = st.integers(1, 12).flatmap(
    lambda n: st.tuples(
        st.just(n),
        st.lists(st.tuples(st.integers(0, n - 1), st.integers(0, n - 1)), max_size=30),
    )
)


@settings(max_examples=60, deadline=None)
@given(edge_lists)
def test_normalized_adjacency_spectrum(ne):
    n, edges = ne
    a = graph.from_edges(n, edges).normalized_adjacency().toarray()
    np.testing.assert_allclose(a, a.T, atol=1e-15)
    ev = np.linalg.eigvalsh(a)
    assert ev.min() >= -1 - 1e-12 and ev.max() <= 1 + 1e-12


def _component_size(g, root):
    seen = {root}
    q = deque([root])
    while q:
        for v in g.neighbors(q.popleft()):
            if int(v) not in seen:
                seen.add(int(v))
                q.append(int(v))
    return len(seen)


@settings(max_examples=60, deadline=None)
@given(edge_lists, st.integers(1, 12), st.integers(0, 11))
def test_bfs_properties(ne, k, root):
    n, edges = ne
    g = graph.from_edges(n, edges)
    root %= n
    sub = graph.bfs_subgraph(g, root, k)
    assert sub.nodes[0] == root
    assert np.unique(sub.nodes).size == sub.size
    assert sub.size == min(k, _component_size(g, root))
    np.testing.assert_array_equal(sub.adj, g.adj[sub.nodes][:, sub.nodes].toarray())
    # every non-root node has a neighbour earlier in the order
    for t in range(1, sub.size):
        assert sub.adj[t, :t].any()
