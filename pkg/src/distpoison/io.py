"""File formats: graph loading, parameter checkpoints.

Graphs load from three files: a text edge list (``src<TAB>dst`` per line,
``#`` comments), a features/labels CSV with header ``node_id,f0..f{d-1},label``,
and a splits JSON with "train"/"val"/"test" node-id lists.

Checkpoints are a flat binary of little-endian float64 values with a JSON
sidecar (same path + ".json") listing tensor names and shapes in file order,
so runs can be resumed and weights compared across runs.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from distpoison.gnn import ParamSet
from distpoison.graph import Graph, build_graph

__all__ = [
    "load_edge_list",
    "load_features_csv",
    "load_splits_json",
    "load_graph",
    "save_checkpoint",
    "load_checkpoint",
]


def load_edge_list(path) -> list[tuple[int, int]]:
    edges = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split("\t") if "\t" in line else line.split()
        if len(parts) != 2:
            raise ValueError(f"{path}:{lineno}: expected 'src<TAB>dst', got {raw!r}")
        edges.append((int(parts[0]), int(parts[1])))
    return edges


def load_features_csv(path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[0] != "node_id" or header[-1] != "label":
            raise ValueError(
                f"{path}: header must be node_id,f0..f{{d-1}},label, got {header}"
            )
        dim = len(header) - 2
        rows = {}
        for rec in reader:
            if not rec:
                continue
            node = int(rec[0])
            if node in rows:
                raise ValueError(f"{path}: duplicate node_id {node}")
            rows[node] = (np.array(rec[1:-1], dtype=np.float64), int(rec[-1]))
    n = len(rows)
    if sorted(rows) != list(range(n)):
        raise ValueError(f"{path}: node ids must cover 0..{n - 1} exactly")
    features = np.zeros((n, dim))
    labels = np.zeros(n, dtype=np.int64)
    for node, (feat, label) in rows.items():
        features[node] = feat
        labels[node] = label
    return features, labels


def load_splits_json(path) -> tuple[list[int], list[int], list[int]]:
    with open(path) as fh:
        data = json.load(fh)
    missing = {"train", "val", "test"} - set(data)
    if missing:
        raise ValueError(f"{path}: missing split keys {sorted(missing)}")
    return data["train"], data["val"], data["test"]


def load_graph(edges_path, features_path, splits_path) -> Graph:
    features, labels = load_features_csv(features_path)
    edges = load_edge_list(edges_path)
    splits = load_splits_json(splits_path)
    return build_graph(edges, features, labels, splits)


def save_checkpoint(params: ParamSet, path) -> None:
    path = Path(path)
    tensors = [("W0", params.W0)]
    if params.W1 is not None:
        tensors.append(("W1", params.W1))
    with open(path, "wb") as fh:
        for _, t in tensors:
            fh.write(np.ascontiguousarray(t, dtype="<f8").tobytes())
    sidecar = {
        "tensors": [{"name": name, "shape": list(t.shape)} for name, t in tensors],
        "learning_rate": params.learning_rate,
        "momentum": params.momentum,
        "k": params.k,
    }
    with open(path.with_suffix(path.suffix + ".json"), "w") as fh:
        json.dump(sidecar, fh, indent=2)


def load_checkpoint(path) -> ParamSet:
    path = Path(path)
    with open(path.with_suffix(path.suffix + ".json")) as fh:
        sidecar = json.load(fh)
    raw = np.frombuffer(path.read_bytes(), dtype="<f8")
    tensors = {}
    offset = 0
    for spec in sidecar["tensors"]:
        size = int(np.prod(spec["shape"]))
        tensors[spec["name"]] = raw[offset : offset + size].reshape(spec["shape"]).copy()
        offset += size
    if offset != len(raw):
        raise ValueError(f"{path}: {len(raw) - offset} unexplained trailing values")
    return ParamSet(
        W0=tensors["W0"],
        W1=tensors.get("W1"),
        learning_rate=sidecar["learning_rate"],
        momentum=sidecar.get("momentum", 0.0),
        k=sidecar.get("k", 2),
    )
