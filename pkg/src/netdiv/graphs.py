"""Directed weighted communication graphs and dimension-specific subgraphs.

The full graph counts every message between located users and keeps edges
whose weight reaches a configured minimum. Dimension graphs keep only the
messages whose score passes the dimension's percentile threshold and never
apply a weight minimum. Multi-labeled messages contribute full weight to
every matching dimension graph.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .errors import InputError
from .ingest import MessageRecord, MessageTable, UserLocationMap, as_table


def nearest_rank(alpha: float, n: int) -> int:
    """1-based rank of the smallest order statistic with at least an
    alpha-fraction of the sample at or below it.

    The product alpha*n is rounded at 1e-9 before taking the ceiling so that
    float representation of alpha (e.g. 0.9 * 10 = 9.000000000000002) cannot
    shift the rank.
    """
    if not 0.0 < alpha < 1.0:
        raise InputError("percentile must be in (0, 1)")
    if n < 1:
        raise InputError("empty sample")
    rank = math.ceil(round(alpha * n, 9))
    return min(max(rank, 1), n)


@dataclass
class DimensionThresholds:
    """Per-dimension score cutoffs at a common percentile."""

    alpha: float
    theta: dict[str, float]

    def __contains__(self, dim: str) -> bool:
        return dim in self.theta

    def dims(self) -> list[str]:
        return list(self.theta)


def dimension_thresholds(
    messages: MessageTable | Iterable[MessageRecord], alpha: float
) -> DimensionThresholds:
    """Nearest-rank percentile of each dimension's score distribution."""
    table = as_table(messages)
    if len(table) == 0:
        raise InputError("cannot compute thresholds on an empty message stream")
    rank = nearest_rank(alpha, len(table))
    theta = {}
    for j, dim in enumerate(table.dimensions):
        col = np.sort(table.scores[:, j])
        theta[dim] = float(col[rank - 1])
    return DimensionThresholds(alpha=alpha, theta=theta)


def label_message(m: MessageRecord, t: DimensionThresholds) -> set[str]:
    """Dimensions whose score reaches the threshold; the test is inclusive."""
    labels = set()
    for dim, cutoff in t.theta.items():
        if dim not in m.scores:
            raise InputError(f"message {m.message_id}: missing score for '{dim}'")
        if m.scores[dim] >= cutoff:
            labels.add(dim)
    return labels


def label_matrix(table: MessageTable, t: DimensionThresholds) -> np.ndarray:
    """Boolean (n, d) matrix over table.dimensions; True where score >= theta."""
    out = np.zeros((len(table), len(table.dimensions)), dtype=bool)
    for j, dim in enumerate(table.dimensions):
        if dim in t.theta:
            out[:, j] = table.scores[:, j] >= t.theta[dim]
    return out


@dataclass
class CommGraph:
    """Immutable directed weighted graph over located users.

    ``users`` holds the sorted ids of all edge endpoints; ``src``/``dst``
    index into it and the parallel arrays are sorted by (src, dst), which
    makes per-user out-edges contiguous.
    """

    tag: str
    min_weight: int
    users: list[str]
    src: np.ndarray
    dst: np.ndarray
    weight: np.ndarray
    _index: dict[str, int] | None = field(default=None, repr=False, compare=False)

    @property
    def num_nodes(self) -> int:
        return len(self.users)

    @property
    def num_edges(self) -> int:
        return int(self.src.shape[0])

    def node_set(self) -> set[str]:
        return set(self.users)

    def user_index(self, user: str) -> int:
        if self._index is None:
            self._index = {u: i for i, u in enumerate(self.users)}
        idx = self._index.get(user)
        if idx is None:
            raise KeyError(user)
        return idx

    def edge_ids(self) -> set[tuple[str, str]]:
        return {
            (self.users[s], self.users[d])
            for s, d in zip(self.src.tolist(), self.dst.tolist())
        }

    def out_edges(self, user: str) -> tuple[list[str], np.ndarray]:
        """Out-neighbors (in id order) and their weights; empty if none."""
        i = self.user_index(user)
        lo = int(np.searchsorted(self.src, i, side="left"))
        hi = int(np.searchsorted(self.src, i, side="right"))
        return [self.users[d] for d in self.dst[lo:hi]], self.weight[lo:hi]

    def total_weight(self) -> int:
        return int(self.weight.sum())


def _graph_from_pairs(
    tag: str,
    min_weight: int,
    senders: np.ndarray,
    receivers: np.ndarray,
    id_of: list[str],
) -> CommGraph:
    """Reduce message endpoint code arrays into a canonical edge list."""
    n_codes = len(id_of)
    key = senders.astype(np.int64) * n_codes + receivers.astype(np.int64)
    uniq, counts = np.unique(key, return_counts=True)
    keep = counts >= min_weight
    uniq, counts = uniq[keep], counts[keep]
    s_codes = (uniq // n_codes).astype(np.int64)
    d_codes = (uniq % n_codes).astype(np.int64)
    endpoint_codes = np.unique(np.concatenate([s_codes, d_codes]))
    users = sorted(id_of[c] for c in endpoint_codes)
    pos = {u: i for i, u in enumerate(users)}
    remap = np.empty(n_codes, dtype=np.int64)
    for c in endpoint_codes:
        remap[c] = pos[id_of[c]]
    src = remap[s_codes]
    dst = remap[d_codes]
    order = np.lexsort((dst, src))
    return CommGraph(
        tag=tag,
        min_weight=min_weight,
        users=users,
        src=src[order],
        dst=dst[order],
        weight=counts[order].astype(np.int64),
    )


def _located_mask(table: MessageTable, locations: UserLocationMap) -> np.ndarray:
    user_ok = np.array([u in locations for u in table.users], dtype=bool)
    return user_ok[table.sender] & user_ok[table.receiver]


def build_graph(
    messages: MessageTable | Iterable[MessageRecord],
    locations: UserLocationMap,
    min_weight: int = 4,
    tag: str = "full",
) -> CommGraph:
    """Count messages per ordered located pair; keep edges with weight >=
    min_weight. Messages with an unlocated endpoint are dropped first."""
    if min_weight < 1:
        raise InputError("min_weight must be >= 1")
    table = as_table(messages)
    mask = _located_mask(table, locations)
    return _graph_from_pairs(
        tag, min_weight, table.sender[mask], table.receiver[mask], table.users
    )


def build_dimension_graph(
    messages: MessageTable | Iterable[MessageRecord],
    locations: UserLocationMap,
    dim: str,
    thresholds: DimensionThresholds,
) -> CommGraph:
    """Graph over messages passing the dimension threshold; no weight minimum."""
    if dim not in thresholds:
        raise InputError(f"no threshold for dimension '{dim}'")
    table = as_table(messages)
    j = table.dim_index(dim)
    mask = _located_mask(table, locations) & (table.scores[:, j] >= thresholds.theta[dim])
    return _graph_from_pairs(dim, 1, table.sender[mask], table.receiver[mask], table.users)


def edge_overlap(g1: CommGraph, g2: CommGraph) -> tuple[float, float]:
    """Directed edge-set intersection as a fraction of each graph's edges;
    weights are ignored and empty graphs yield 0."""
    e1 = g1.edge_ids()
    e2 = g2.edge_ids()
    shared = len(e1 & e2)
    f1 = shared / len(e1) if e1 else 0.0
    f2 = shared / len(e2) if e2 else 0.0
    return f1, f2


def _log_bins(values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Histogram over power-of-two bins [1,2), [2,4), ... covering the data."""
    if values.size == 0:
        return np.array([1.0, 2.0]), np.zeros(1, dtype=np.int64)
    top = max(float(values.max()), 1.0)
    n_edges = int(math.floor(math.log2(top))) + 2
    edges = 2.0 ** np.arange(n_edges)
    counts, _ = np.histogram(values, bins=np.append(edges, edges[-1] * 2))
    return np.append(edges, edges[-1] * 2), counts.astype(np.int64)


@dataclass
class GraphStats:
    tag: str
    nodes: int
    edges: int
    degree_counts: dict[int, int]
    strength_counts: dict[int, int]
    degree_log_bins: tuple[np.ndarray, np.ndarray]
    strength_log_bins: tuple[np.ndarray, np.ndarray]
    node_fraction: float | None = None


def graph_summary(g: CommGraph, reference: CommGraph | None = None) -> GraphStats:
    """Exact node/edge counts, degree and edge-weight histograms, and the
    fraction of a reference graph's nodes present in g."""
    degree = np.bincount(g.src, minlength=g.num_nodes) + np.bincount(
        g.dst, minlength=g.num_nodes
    )
    deg_counts: dict[int, int] = {}
    for d in degree.tolist():
        deg_counts[d] = deg_counts.get(d, 0) + 1
    w_counts: dict[int, int] = {}
    for w in g.weight.tolist():
        w_counts[w] = w_counts.get(w, 0) + 1
    fraction = None
    if reference is not None:
        ref_nodes = reference.node_set()
        fraction = (
            len(ref_nodes & g.node_set()) / len(ref_nodes) if ref_nodes else 0.0
        )
    return GraphStats(
        tag=g.tag,
        nodes=g.num_nodes,
        edges=g.num_edges,
        degree_counts=deg_counts,
        strength_counts=w_counts,
        degree_log_bins=_log_bins(degree.astype(np.float64)),
        strength_log_bins=_log_bins(g.weight.astype(np.float64)),
        node_fraction=fraction,
    )


def write_graph_csv(g: CommGraph, path: str) -> None:
    """Edge list with a one-line construction header; round-trips losslessly."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# tag={g.tag} min_weight={g.min_weight}\n")
        writer = csv.writer(fh)
        writer.writerow(["src", "dst", "weight"])
        for s, d, w in zip(g.src.tolist(), g.dst.tolist(), g.weight.tolist()):
            writer.writerow([g.users[s], g.users[d], w])


def read_graph_csv(path: str) -> CommGraph:
    if not os.path.exists(path):
        raise InputError(f"graph file not found: {path}")
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip()
        if not header.startswith("# "):
            raise InputError(f"{path}: missing graph header line")
        params = dict(part.split("=", 1) for part in header[2:].split())
        reader = csv.reader(fh)
        cols = next(reader, None)
        if cols != ["src", "dst", "weight"]:
            raise InputError(f"{path}: expected columns src, dst, weight")
        code: dict[str, int] = {}
        src, dst, weight = [], [], []
        for row in reader:
            s, d, w = row
            for u in (s, d):
                if u not in code:
                    code[u] = len(code)
            src.append(code[s])
            dst.append(code[d])
            weight.append(int(w))
    id_of = list(code)
    g = _expand_counted(
        tag=params.get("tag", "full"),
        min_weight=int(params.get("min_weight", 1)),
        s_codes=np.asarray(src, dtype=np.int64),
        d_codes=np.asarray(dst, dtype=np.int64),
        counts=np.asarray(weight, dtype=np.int64),
        id_of=id_of,
    )
    return g


def _expand_counted(
    tag: str,
    min_weight: int,
    s_codes: np.ndarray,
    d_codes: np.ndarray,
    counts: np.ndarray,
    id_of: list[str],
) -> CommGraph:
    """Canonicalize an already-counted edge list."""
    endpoint_codes = np.unique(np.concatenate([s_codes, d_codes])) if len(s_codes) else np.empty(0, dtype=np.int64)
    users = sorted(id_of[c] for c in endpoint_codes)
    pos = {u: i for i, u in enumerate(users)}
    remap = np.zeros(len(id_of), dtype=np.int64)
    for c in endpoint_codes:
        remap[c] = pos[id_of[c]]
    src = remap[s_codes]
    dst = remap[d_codes]
    order = np.lexsort((dst, src))
    return CommGraph(tag, min_weight, users, src[order], dst[order], counts[order])


def graph_from_edges(
    edges: Mapping[tuple[str, str], int], tag: str = "full", min_weight: int = 1
) -> CommGraph:
    """Build a graph directly from an {(src, dst): weight} mapping."""
    code: dict[str, int] = {}
    s_codes, d_codes, counts = [], [], []
    for (s, d), w in edges.items():
        if w < 1:
            raise InputError("edge weights must be >= 1")
        for u in (s, d):
            if u not in code:
                code[u] = len(code)
        s_codes.append(code[s])
        d_codes.append(code[d])
        counts.append(int(w))
    return _expand_counted(
        tag,
        min_weight,
        np.asarray(s_codes, dtype=np.int64),
        np.asarray(d_codes, dtype=np.int64),
        np.asarray(counts, dtype=np.int64),
        list(code),
    )


def write_thresholds_csv(t: DimensionThresholds, path: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["dimension", "alpha", "theta"])
        for dim in sorted(t.theta):
            writer.writerow([dim, repr(t.alpha), repr(t.theta[dim])])


def read_thresholds_csv(path: str) -> DimensionThresholds:
    if not os.path.exists(path):
        raise InputError(f"thresholds file not found: {path}")
    theta = {}
    alpha = None
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            alpha = float(row["alpha"])
            theta[row["dimension"]] = float(row["theta"])
    if alpha is None:
        raise InputError(f"{path}: no threshold rows")
    return DimensionThresholds(alpha=alpha, theta=theta)
