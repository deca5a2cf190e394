"""Core data model for networked observational data.

An observation bundle couples an undirected unit graph with per-unit
features, a binary treatment vector and factual outcomes.  Bundles are
stored on disk as a directory of headed CSV files (``edges.csv``,
``features.csv``, ``treatments.csv``, ``outcomes.csv``, optionally
``potential.csv`` and ``idmap.csv``).
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError

# Scientific format with 13 significant digits; relative round-trip error
# stays below 1e-12 for all float64 magnitudes.
REAL_FORMAT = "%.12e"


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class Graph:
    """Undirected graph over contiguous 0-indexed node ids.

    Edges are stored once as (i, j) with i < j; per-node neighbor lists are
    sorted.  Self-edges are rejected, duplicates collapse to one edge.
    """

    num_nodes: int
    edges: tuple[tuple[int, int], ...]
    neighbor_lists: tuple[np.ndarray, ...] = field(repr=False)

    @classmethod
    def from_edges(cls, num_nodes: int, edges) -> "Graph":
        if num_nodes <= 0:
            raise ValidationError(f"num_nodes must be positive, got {num_nodes}")
        canon = set()
        for i, j in edges:
            i, j = int(i), int(j)
            if i == j:
                raise ValidationError(f"self-edge ({i}, {j}) is not allowed")
            if not (0 <= i < num_nodes and 0 <= j < num_nodes):
                raise ValidationError(
                    f"edge ({i}, {j}) out of range for {num_nodes} nodes"
                )
            canon.add((min(i, j), max(i, j)))
        ordered = tuple(sorted(canon))
        nbrs: list[list[int]] = [[] for _ in range(num_nodes)]
        for i, j in ordered:
            nbrs[i].append(j)
            nbrs[j].append(i)
        lists = tuple(_frozen(np.array(sorted(ns), dtype=np.int64)) for ns in nbrs)
        return cls(num_nodes=num_nodes, edges=ordered, neighbor_lists=lists)

    def neighbors(self, i: int) -> np.ndarray:
        return self.neighbor_lists[i]

    def degree(self, i: int) -> int:
        return len(self.neighbor_lists[i])

    @property
    def num_edges(self) -> int:
        return len(self.edges)


@dataclass(frozen=True)
class ObservationalDataset:
    """Graph + unit features X (N x K), binary treatments T and outcomes Y."""

    graph: Graph
    features: np.ndarray
    treatments: np.ndarray
    outcomes: np.ndarray

    def __post_init__(self):
        n = self.graph.num_nodes
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[0] != n:
            raise ValidationError(
                f"features must be ({n}, K), got shape {np.shape(self.features)}"
            )
        t = np.asarray(self.treatments, dtype=np.int64).reshape(-1)
        if t.shape[0] != n:
            raise ValidationError(f"treatments length {t.shape[0]} != {n} nodes")
        bad = np.setdiff1d(np.unique(t), [0, 1])
        if bad.size:
            raise ValidationError(f"treatments must be 0/1, found values {bad.tolist()}")
        if not (np.any(t == 0) and np.any(t == 1)):
            raise ValidationError("both treatment groups must be non-empty")
        y = np.asarray(self.outcomes, dtype=np.float64).reshape(-1)
        if y.shape[0] != n:
            raise ValidationError(f"outcomes length {y.shape[0]} != {n} nodes")
        object.__setattr__(self, "features", _frozen(feats))
        object.__setattr__(self, "treatments", _frozen(t))
        object.__setattr__(self, "outcomes", _frozen(y))

    @property
    def num_units(self) -> int:
        return self.graph.num_nodes

    @property
    def num_features(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class GroundTruth:
    """Potential outcomes and the unit-level effect tau = y1 - y0."""

    y0: np.ndarray
    y1: np.ndarray
    tau: np.ndarray

    def __post_init__(self):
        y0 = np.asarray(self.y0, dtype=np.float64).reshape(-1)
        y1 = np.asarray(self.y1, dtype=np.float64).reshape(-1)
        tau = np.asarray(self.tau, dtype=np.float64).reshape(-1)
        if not (y0.shape == y1.shape == tau.shape):
            raise ValidationError("y0, y1, tau must have equal length")
        if not np.array_equal(tau, y1 - y0):
            raise ValidationError("tau must equal y1 - y0 exactly")
        object.__setattr__(self, "y0", _frozen(y0))
        object.__setattr__(self, "y1", _frozen(y1))
        object.__setattr__(self, "tau", _frozen(tau))

    @classmethod
    def from_potentials(cls, y0, y1) -> "GroundTruth":
        y0 = np.asarray(y0, dtype=np.float64).reshape(-1)
        y1 = np.asarray(y1, dtype=np.float64).reshape(-1)
        return cls(y0=y0, y1=y1, tau=y1 - y0)


@dataclass(frozen=True)
class SplitIndex:
    """Disjoint sorted train/val/test unit indices covering [0, N)."""

    train: np.ndarray
    val: np.ndarray
    test: np.ndarray

    def __post_init__(self):
        for name in ("train", "val", "test"):
            arr = np.asarray(getattr(self, name), dtype=np.int64).reshape(-1)
            object.__setattr__(self, name, _frozen(np.sort(arr)))
        combined = np.concatenate([self.train, self.val, self.test])
        n = combined.size
        if not np.array_equal(np.sort(combined), np.arange(n)):
            raise ValidationError("split indices must partition [0, N)")

    @property
    def num_units(self) -> int:
        return self.train.size + self.val.size + self.test.size


@dataclass(frozen=True)
class TreatmentSubgraphs:
    """Per-node neighbor partition by treatment agreement with the node."""

    same_neighbors: tuple[np.ndarray, ...]
    opp_neighbors: tuple[np.ndarray, ...]
    has_opp: np.ndarray


def split_units(n: int, ratios: tuple[float, float, float], seed: int) -> SplitIndex:
    """Randomly partition n units into train/val/test index sets.

    Train and val sizes are round(n * ratio); test takes the remainder.
    Deterministic for a given (n, ratios, seed).
    """
    if n < 5:
        raise ValidationError(f"need at least 5 units to split, got {n}")
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise ValidationError(f"ratios must be three positive reals, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValidationError(f"ratios must sum to 1, got sum {sum(ratios)!r}")
    n_train = round(n * ratios[0])
    n_val = round(n * ratios[1])
    if n_train + n_val > n:
        raise ValidationError(f"rounded sizes exceed n={n} for ratios {ratios}")
    perm = np.random.default_rng(seed).permutation(n)
    return SplitIndex(
        train=perm[:n_train],
        val=perm[n_train:n_train + n_val],
        test=perm[n_train + n_val:],
    )


def treatment_subgraphs(graph: Graph, treatments) -> TreatmentSubgraphs:
    """Partition every neighborhood into same-treatment and opposite-treatment sets."""
    t = np.asarray(treatments, dtype=np.int64).reshape(-1)
    if t.shape[0] != graph.num_nodes:
        raise ValidationError(
            f"treatments length {t.shape[0]} != {graph.num_nodes} nodes"
        )
    same, opp = [], []
    for i in range(graph.num_nodes):
        nbrs = graph.neighbor_lists[i]
        agree = t[nbrs] == t[i]
        same.append(_frozen(nbrs[agree]))
        opp.append(_frozen(nbrs[~agree]))
    has_opp = _frozen(np.array([o.size > 0 for o in opp], dtype=bool))
    return TreatmentSubgraphs(
        same_neighbors=tuple(same), opp_neighbors=tuple(opp), has_opp=has_opp
    )


# ---------------------------------------------------------------------------
# Bundle I/O


def _read_csv(path: str, expected_header: list[str] | None = None) -> list[list[str]]:
    if not os.path.isfile(path):
        raise FileNotFoundError(f"missing bundle file: {path}")
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValidationError(f"{path}: empty file")
    header, body = rows[0], rows[1:]
    if expected_header is not None and header != expected_header:
        raise ValidationError(
            f"{path}: expected header {expected_header}, got {header}"
        )
    return body


def _write_csv(path: str, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def load_dataset(path: str) -> tuple[ObservationalDataset, GroundTruth | None]:
    """Load a dataset bundle directory.

    Returns the dataset and, when ``potential.csv`` is present, the ground
    truth; otherwise ground truth is None.
    """
    if not os.path.isdir(path):
        raise FileNotFoundError(f"bundle directory not found: {path}")

    feat_rows = _read_csv(os.path.join(path, "features.csv"))
    try:
        features = np.array([[float(v) for v in row] for row in feat_rows])
    except ValueError as exc:
        raise ValidationError(f"{path}/features.csv: non-numeric value ({exc})")
    n = features.shape[0]

    t_rows = _read_csv(os.path.join(path, "treatments.csv"), ["t"])
    treatments = np.array([int(r[0]) for r in t_rows], dtype=np.int64)
    bad = np.setdiff1d(np.unique(treatments), [0, 1])
    if bad.size:
        raise ValidationError(
            f"{path}/treatments.csv: treatments must be 0/1, found {bad.tolist()}"
        )

    y_rows = _read_csv(os.path.join(path, "outcomes.csv"), ["y"])
    outcomes = np.array([float(r[0]) for r in y_rows])

    for name, count in (("treatments", len(treatments)), ("outcomes", len(outcomes))):
        if count != n:
            raise ValidationError(
                f"{path}: {name} has {count} rows but features has {n}"
            )

    idmap_path = os.path.join(path, "idmap.csv")
    idmap: dict[int, int] | None = None
    if os.path.isfile(idmap_path):
        idmap = {}
        for row in _read_csv(idmap_path, ["external", "node"]):
            idmap[int(row[0])] = int(row[1])

    edge_rows = _read_csv(os.path.join(path, "edges.csv"), ["src", "dst"])
    edges = []
    for row in edge_rows:
        i, j = int(row[0]), int(row[1])
        if idmap is not None:
            try:
                i, j = idmap[i], idmap[j]
            except KeyError as exc:
                raise ValidationError(f"{path}/edges.csv: id {exc} not in idmap.csv")
        edges.append((i, j))
    graph = Graph.from_edges(n, edges)

    dataset = ObservationalDataset(
        graph=graph, features=features, treatments=treatments, outcomes=outcomes
    )

    truth = None
    pot_path = os.path.join(path, "potential.csv")
    if os.path.isfile(pot_path):
        pot_rows = _read_csv(pot_path, ["y0", "y1"])
        if len(pot_rows) != n:
            raise ValidationError(
                f"{path}/potential.csv has {len(pot_rows)} rows but features has {n}"
            )
        y0 = np.array([float(r[0]) for r in pot_rows])
        y1 = np.array([float(r[1]) for r in pot_rows])
        truth = GroundTruth.from_potentials(y0, y1)
    return dataset, truth


def save_dataset(
    dataset: ObservationalDataset, truth: GroundTruth | None, path: str
) -> None:
    """Write a dataset bundle directory (see module docstring for the layout)."""
    try:
        os.makedirs(path, exist_ok=True)
        _write_csv(os.path.join(path, "edges.csv"), ["src", "dst"], dataset.graph.edges)
        k = dataset.num_features
        _write_csv(
            os.path.join(path, "features.csv"),
            [f"f{i}" for i in range(k)],
            ([REAL_FORMAT % v for v in row] for row in dataset.features),
        )
        _write_csv(
            os.path.join(path, "treatments.csv"),
            ["t"],
            ([str(int(t))] for t in dataset.treatments),
        )
        _write_csv(
            os.path.join(path, "outcomes.csv"),
            ["y"],
            ([REAL_FORMAT % y] for y in dataset.outcomes),
        )
        if truth is not None:
            _write_csv(
                os.path.join(path, "potential.csv"),
                ["y0", "y1"],
                ([REAL_FORMAT % a, REAL_FORMAT % b] for a, b in zip(truth.y0, truth.y1)),
            )
    except OSError as exc:
        raise OSError(f"failed to write bundle at {path}: {exc}") from exc
