import numpy as np
import pytest

from fedlap.graph import GraphError, sbm_generate
from fedlap.graphio import (
    load_graph_files,
    read_edge_list,
    read_id_map,
    write_edge_list,
    write_features,
    write_id_map,
    write_labels,
)


def test_round_trip_dense_ids(tmp_path):
    g = sbm_generate([10, 12], 0.3, 0.05, seed=1, feature_dim=3)
    write_edge_list(g, tmp_path / "e.tsv", header="# graph\n")
    write_features(g, tmp_path / "x.csv")
    write_labels(g, tmp_path / "y.csv")
    h, mapping, names = load_graph_files(tmp_path / "e.tsv", tmp_path / "x.csv", tmp_path / "y.csv")
    assert np.array_equal(h.edges, g.edges)
    np.testing.assert_array_equal(h.features, g.features)
    assert np.array_equal(h.labels, g.labels)
    assert names == ["0", "1"]
    assert mapping["5"] == 5


def test_string_ids_with_feature_header(tmp_path):
    (tmp_path / "e.tsv").write_text("# comment\nalice\tbob\nbob\tcarol\n\ncarol\talice  # tail\n")
    (tmp_path / "x.csv").write_text("node_id,f0\ncarol,3\nalice,1\nbob,2\n")
    (tmp_path / "y.csv").write_text("node_id,label\nalice,cat\ncarol,dog\n")
    g, mapping, names = load_graph_files(tmp_path / "e.tsv", tmp_path / "x.csv", tmp_path / "y.csv")
    assert mapping == {"carol": 0, "alice": 1, "bob": 2}
    assert g.m == 3
    np.testing.assert_array_equal(g.features[:, 0], [3, 1, 2])
    assert names == ["cat", "dog"]
    assert list(g.labels) == [1, 0, -1]


def test_explicit_id_map(tmp_path):
    (tmp_path / "e.tsv").write_text("a\tb\nb\tc\n")
    (tmp_path / "x.csv").write_text("1\n2\n3\n")
    write_id_map({"c": 0, "b": 1, "a": 2}, tmp_path / "map.csv")
    assert read_id_map(tmp_path / "map.csv") == {"c": 0, "b": 1, "a": 2}
    g, _, _ = load_graph_files(tmp_path / "e.tsv", tmp_path / "x.csv", id_map_path=tmp_path / "map.csv")
    assert g.edges.tolist() == [[0, 1], [1, 2]]


def test_bad_inputs(tmp_path):
    (tmp_path / "e.tsv").write_text("0\t1\t2\n")
    with pytest.raises(GraphError):
        read_edge_list(tmp_path / "e.tsv")
    (tmp_path / "e.tsv").write_text("0\t7\n")
    (tmp_path / "x.csv").write_text("1\n2\n3\n")
    with pytest.raises(GraphError, match="dangling|id map"):
        load_graph_files(tmp_path / "e.tsv", tmp_path / "x.csv")
    (tmp_path / "map.csv").write_text("external_id,dense_id\na,0\nb,2\n")
    with pytest.raises(GraphError):
        read_id_map(tmp_path / "map.csv")


def test_numeric_label_names_sorted_numerically(tmp_path):
    (tmp_path / "e.tsv").write_text("0\t1\n")
    (tmp_path / "x.csv").write_text("1\n2\n")
    (tmp_path / "y.csv").write_text("0,10\n1,9\n")
    g, _, names = load_graph_files(tmp_path / "e.tsv", tmp_path / "x.csv", tmp_path / "y.csv")
    assert names == ["9", "10"]
    assert list(g.labels) == [1, 0]
