from __future__ import annotations

import pickle

import numpy as np
import pytest
import scipy.sparse as sp

from subgec import convert, graph
from subgec.graph import LoadError


def write_planetoid(root, name="toy", gap=False):
    """Tiny Planetoid-format release: 4 labelled nodes (2 train), 3 test nodes.

    With ``gap`` the test index list skips id 5, as in the citeseer release.
    """
    rng = np.random.default_rng(0)
    f, c = 3, 2
    allx = rng.random((4, f))
    ally = np.eye(c)[[0, 1, 0, 1]]
    test_ids = [7, 4, 6] if gap else [6, 4, 5]
    tx = rng.random((3, f))
    ty = np.eye(c)[[1, 1, 0]]
    adj = {0: [1, 4], 1: [0, 2], 2: [1], 3: [6], 4: [0], 5: [], 6: [3]}
    if gap:
        adj[7] = [2]
    parts = {
        "x": sp.csr_matrix(allx[:2]), "y": ally[:2], "allx": sp.csr_matrix(allx), "ally": ally,
        "tx": sp.csr_matrix(tx), "ty": ty, "graph": adj,
    }
    for k, v in parts.items():
        with open(root / f"ind.{name}.{k}", "wb") as fh:
            pickle.dump(v, fh)
    (root / f"ind.{name}.test.index").write_text("\n".join(map(str, test_ids)) + "\n")
    return allx, tx, test_ids


def test_planetoid_layout(tmp_path):
    allx, tx, test_ids = write_planetoid(tmp_path)
    g = convert.read_planetoid(tmp_path, "toy")
    assert g.n == 7 and g.num_classes == 2
    np.testing.assert_array_equal(g.splits["train"], [0, 1])
    np.testing.assert_array_equal(g.splits["val"], [2, 3])
    np.testing.assert_array_equal(g.splits["test"], [4, 5, 6])
    np.testing.assert_allclose(g.features[:4], allx)
    # tx rows are stored in test-index order, so row r belongs to node test_ids[r]
    for r, node in enumerate(test_ids):
        np.testing.assert_allclose(g.features[node], tx[r])
    assert g.labels[6] == 1 and g.labels[4] == 1 and g.labels[5] == 0
    assert g.num_edges == 4
    g.validate()


def test_planetoid_gap_in_test_ids(tmp_path):
    _, tx, _ = write_planetoid(tmp_path, gap=True)
    g = convert.read_planetoid(tmp_path, "toy")
    assert g.n == 8
    assert not g.features[5].any()
    assert 5 not in np.concatenate(list(g.splits.values()))
    np.testing.assert_allclose(g.features[7], tx[0])


def test_planetoid_missing_part_is_named(tmp_path):
    write_planetoid(tmp_path)
    (tmp_path / "ind.toy.ally").unlink()
    with pytest.raises(LoadError, match="ind.toy.ally"):
        convert.read_planetoid(tmp_path, "toy")


def write_webkb(root, name="tiny", with_split=True):
    feats = ["1,0,0", "0,1,0", "0,0,1", "1,1,0", "0,1,1"]
    labels = [0, 1, 2, 0, 1]
    lines = ["node_id\tfeature\tlabel"] + [f"{i}\t{x}\t{y}" for i, (x, y) in enumerate(zip(feats, labels))]
    (root / "out1_node_feature_label.txt").write_text("\n".join(lines) + "\n")
    edges = ["node_id\tnode_id", "0\t1", "1\t2", "3\t3", "4\t0"]
    (root / "out1_graph_edges.txt").write_text("\n".join(edges) + "\n")
    if with_split:
        np.savez(
            root / f"{name}_split_0.6_0.2_0.npz",
            train_mask=np.array([1, 1, 1, 0, 0], bool),
            val_mask=np.array([0, 0, 0, 1, 0], bool),
            test_mask=np.array([0, 0, 0, 0, 1], bool),
        )


def test_webkb_layout(tmp_path):
    write_webkb(tmp_path)
    g = convert.read_webkb(tmp_path, "tiny")
    assert (g.n, g.num_edges, g.num_classes) == (5, 3, 3)
    np.testing.assert_array_equal(g.features[3], [1, 1, 0])
    np.testing.assert_array_equal(g.splits["train"], [0, 1, 2])
    np.testing.assert_array_equal(g.splits["test"], [4])


def test_webkb_fallback_split(tmp_path, caplog):
    write_webkb(tmp_path, with_split=False)
    g = convert.read_webkb(tmp_path, "tiny", split_index=2)
    sizes = [len(g.splits[s]) for s in graph.SPLITS]
    assert sizes == [3, 1, 1]
    assert sorted(np.concatenate(list(g.splits.values())).tolist()) == list(range(5))
    assert "seeded 60/20/20" in caplog.text


def test_webkb_bad_line(tmp_path):
    write_webkb(tmp_path)
    path = tmp_path / "out1_node_feature_label.txt"
    path.write_text(path.read_text().replace("2\t0,0,1\t2", "2\t0,0,1"))
    with pytest.raises(LoadError, match=":4"):
        convert.read_webkb(tmp_path, "tiny")


def test_row_normalize():
    g = graph.from_edges(2, [(0, 1)], np.array([[1.0, 3.0], [0.0, 0.0]]))
    h = convert.row_normalize(g)
    np.testing.assert_allclose(h.features, [[0.25, 0.75], [0.0, 0.0]])
