"""Reading and writing graph files: edge lists, feature/label CSVs and id maps."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Optional

import numpy as np

from .graph import Graph, GraphError, build_graph


def _is_float(s: str) -> bool:
    try:
        float(s)
        return True
    except ValueError:
        return False


def read_edge_list(path) -> list[tuple[str, str]]:
    """``u<TAB>v`` per line; blank lines and ``#`` comments are skipped."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split("\t") if "\t" in line else line.split()
            if len(parts) != 2:
                raise GraphError(f"{path}:{lineno}: expected two node ids, got {line!r}")
            out.append((parts[0].strip(), parts[1].strip()))
    return out


def read_features(path) -> tuple[Optional[list[str]], np.ndarray]:
    """Feature CSV, one row per node, header optional.

    If the header's first column is ``node_id`` (or ``id``) that column carries
    external ids; otherwise rows are positional.
    """
    with open(path, encoding="utf-8", newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    if not rows:
        raise GraphError(f"{path}: empty feature file")
    ids = None
    header = rows[0]
    if not all(_is_float(c) for c in header):
        rows = rows[1:]
        if header[0].strip().lower() in ("node_id", "id"):
            ids = [r[0].strip() for r in rows]
            rows = [r[1:] for r in rows]
    try:
        X = np.array([[float(c) for c in r] for r in rows], dtype=np.float64)
    except ValueError as exc:
        raise GraphError(f"{path}: non-numeric feature value ({exc})") from None
    if X.ndim != 2:
        raise GraphError(f"{path}: ragged feature rows")
    return ids, X


def read_labels(path) -> list[tuple[str, str]]:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    if rows and rows[0][0].strip().lower() in ("node_id", "id"):
        rows = rows[1:]
    out = []
    for r in rows:
        if len(r) != 2:
            raise GraphError(f"{path}: expected 'node_id,label' rows, got {r!r}")
        out.append((r[0].strip(), r[1].strip()))
    return out


def read_id_map(path) -> dict:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    if rows and rows[0][0].strip() == "external_id":
        rows = rows[1:]
    mapping = {r[0].strip(): int(r[1]) for r in rows}
    dense = sorted(mapping.values())
    if dense != list(range(len(dense))):
        raise GraphError(f"{path}: dense ids must cover 0..n-1 exactly once")
    return mapping


def write_id_map(mapping: dict, path, header: str = "") -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(header)
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["external_id", "dense_id"])
        for ext, dense in sorted(mapping.items(), key=lambda kv: kv[1]):
            w.writerow([ext, dense])


def load_graph_files(edges_path, features_path, labels_path=None, id_map_path=None):
    """Build a :class:`Graph` from files; returns ``(graph, id_map, label_names)``.

    Without an explicit id map, integer ids already in ``[0, n)`` are kept;
    any other ids are numbered in order of the feature file (when it carries
    ids) or of first appearance in the edge list.
    """
    edges = read_edge_list(edges_path)
    feat_ids, X = read_features(features_path)
    n = X.shape[0]
    if id_map_path is not None:
        mapping = read_id_map(id_map_path)
    elif feat_ids is not None:
        mapping = {e: i for i, e in enumerate(feat_ids)}
    else:
        seen = [x for uv in edges for x in uv]
        if all(s.lstrip("-").isdigit() for s in seen):
            mapping = {str(i): i for i in range(n)}
        else:
            mapping = {}
            for s in seen:
                mapping.setdefault(s, len(mapping))
    if len(mapping) != n:
        raise GraphError(f"id map has {len(mapping)} nodes but the feature file has {n} rows")
    if feat_ids is not None:
        order = np.array([mapping[e] for e in feat_ids])
        X2 = np.empty_like(X)
        X2[order] = X
        X = X2
    try:
        e = np.array([(mapping[u], mapping[v]) for u, v in edges], dtype=np.int64).reshape(-1, 2)
    except KeyError as exc:
        raise GraphError(f"dangling node id {exc.args[0]!r} in edge list") from None
    labels = None
    names: list[str] = []
    if labels_path is not None:
        pairs = read_labels(labels_path)
        names = sorted({lab for _, lab in pairs})
        if all(s.lstrip("-").isdigit() for s in names):
            names.sort(key=int)
        index = {lab: k for k, lab in enumerate(names)}
        labels = np.full(n, -1, dtype=np.int64)
        for ext, lab in pairs:
            if ext not in mapping:
                raise GraphError(f"label for unknown node {ext!r}")
            labels[mapping[ext]] = index[lab]
    g = build_graph(e, X, labels, n=n)
    return g, mapping, names


def write_edge_list(g: Graph, path, header: str = "") -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(header)
        for u, v in g.edges:
            fh.write(f"{u}\t{v}\n")


def write_features(g: Graph, path, header: str = "") -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(header)
        w = csv.writer(fh, lineterminator="\n")
        for row in g.features:
            w.writerow([repr(float(x)) for x in row])


def write_labels(g: Graph, path, header: str = "") -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(header)
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["node_id", "label"])
        if g.labels is not None:
            for v, lab in enumerate(g.labels):
                if lab >= 0:
                    w.writerow([v, int(lab)])
