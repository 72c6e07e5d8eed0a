"""Host interaction graph, community detection and per-host graph features.

Every flow ``u -> v`` with ``u != v`` adds 1 to the directed edge weight
``(u, v)``. Cohesion metrics (clustering, k-core, communities) use the
undirected view, where the weight of ``{u, v}`` is ``w(u, v) + w(v, u)``.
"""

from __future__ import annotations

import csv
from collections import Counter
from dataclasses import dataclass, field
from typing import IO, Iterable, Mapping, NamedTuple

import networkx as nx
import numpy as np
from scipy import sparse

from .flow_data import HOST_FEATURES, FlowRecord


class HostFeatures(NamedTuple):
    in_degree: float
    out_degree: float
    in_strength: float
    out_strength: float
    pagerank: float
    clustering: float
    community_size_fraction: float
    intra_community_ratio: float
    k_core: float


assert HostFeatures._fields == HOST_FEATURES


@dataclass
class HostGraph:
    nodes: tuple[str, ...] = ()
    weights: dict[tuple[str, str], float] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.nodes)

    def undirected(self) -> nx.Graph:
        """Undirected view with summed weights; nodes and edges inserted in sorted order."""
        acc: dict[tuple[str, str], float] = {}
        for (u, v), w in self.weights.items():
            key = (u, v) if u < v else (v, u)
            acc[key] = acc.get(key, 0) + w
        g = nx.Graph()
        g.add_nodes_from(self.nodes)
        for (u, v) in sorted(acc):
            g.add_edge(u, v, weight=acc[(u, v)])
        return g

    def scaled(self, factor: float) -> "HostGraph":
        return HostGraph(self.nodes, {e: w * factor for e, w in self.weights.items()})


@dataclass
class GraphArtifacts:
    """Everything feature assembly needs from one graph build."""

    host_features: dict[str, HostFeatures]
    communities: dict[str, int]


def build_graph(records: Iterable[FlowRecord]) -> HostGraph:
    counts: Counter[tuple[str, str]] = Counter()
    for r in records:
        if r.src_ip != r.dst_ip:
            counts[(r.src_ip, r.dst_ip)] += 1
    nodes = sorted({h for e in counts for h in e})
    return HostGraph(tuple(nodes), {e: counts[e] for e in sorted(counts)})


def detect_communities(graph: HostGraph, seed: int = 0) -> dict[str, int]:
    """Seeded Louvain on the undirected weighted view.

    Community ids are dense integers assigned in order of first appearance
    when walking the sorted node list, so the labelling does not depend on
    the order in which networkx returns the sets.
    """
    if not graph.nodes:
        raise ValueError("cannot detect communities on an empty graph")
    g = graph.undirected()
    parts = nx.community.louvain_communities(g, weight="weight", seed=seed)
    raw = {}
    for i, members in enumerate(parts):
        for h in members:
            raw[h] = i
    remap: dict[int, int] = {}
    out = {}
    for h in graph.nodes:
        c = raw[h]
        if c not in remap:
            remap[c] = len(remap)
        out[h] = remap[c]
    return out


def pagerank(
    graph: HostGraph,
    damping: float = 0.85,
    tol: float = 1e-8,
    max_iter: int = 100,
) -> dict[str, float]:
    """Weighted PageRank by power iteration.

    Dangling nodes spread their mass uniformly; iteration stops once the L1
    change drops below ``tol`` or after ``max_iter`` sweeps.
    """
    if not 0 < damping < 1:
        raise ValueError("damping must lie in (0, 1)")
    n = len(graph.nodes)
    if n == 0:
        raise ValueError("empty graph")
    index = {h: i for i, h in enumerate(graph.nodes)}
    rows = np.array([index[u] for u, _ in graph.weights], dtype=np.int64)
    cols = np.array([index[v] for _, v in graph.weights], dtype=np.int64)
    vals = np.array(list(graph.weights.values()), dtype=np.float64)
    out_w = np.bincount(rows, weights=vals, minlength=n)
    dangling = out_w == 0
    # column-stochastic transpose: x_new[v] += x[u] * w(u,v)/out(u)
    trans = sparse.csr_matrix(
        (vals / out_w[rows], (cols, rows)), shape=(n, n)
    ) if len(vals) else sparse.csr_matrix((n, n))
    x = np.full(n, 1.0 / n)
    for _ in range(max_iter):
        x_new = damping * (trans @ x + x[dangling].sum() / n) + (1.0 - damping) / n
        x_new /= x_new.sum()
        delta = np.abs(x_new - x).sum()
        x = x_new
        if delta < tol:
            break
    return {h: float(x[i]) for h, i in index.items()}


def compute_host_features(
    graph: HostGraph,
    communities: Mapping[str, int],
    damping: float = 0.85,
) -> dict[str, HostFeatures]:
    missing = [h for h in graph.nodes if h not in communities]
    if missing:
        raise ValueError(f"hosts without community: {missing[:5]}")
    n = len(graph.nodes)
    if n == 0:
        return {}
    in_deg: Counter[str] = Counter()
    out_deg: Counter[str] = Counter()
    in_str: Counter[str] = Counter()
    out_str: Counter[str] = Counter()
    for (u, v), w in graph.weights.items():
        out_deg[u] += 1
        in_deg[v] += 1
        out_str[u] += w
        in_str[v] += w

    und = graph.undirected()
    clustering = nx.clustering(und)
    core = nx.core_number(und)
    pr = pagerank(graph, damping=damping)
    sizes = Counter(communities[h] for h in graph.nodes)

    intra: Counter[str] = Counter()
    total: Counter[str] = Counter()
    for u, v, w in und.edges(data="weight"):
        total[u] += w
        total[v] += w
        if communities[u] == communities[v]:
            intra[u] += w
            intra[v] += w

    feats = {}
    for h in graph.nodes:
        feats[h] = HostFeatures(
            in_degree=float(in_deg[h]),
            out_degree=float(out_deg[h]),
            in_strength=float(in_str[h]),
            out_strength=float(out_str[h]),
            pagerank=pr[h],
            clustering=float(clustering[h]),
            community_size_fraction=sizes[communities[h]] / n,
            intra_community_ratio=intra[h] / total[h] if total[h] > 0 else 0.0,
            k_core=float(core[h]),
        )
    return feats


def graph_artifacts(records: Iterable[FlowRecord], seed: int = 0) -> GraphArtifacts:
    """Build the graph, detect communities and compute host features in one go."""
    graph = build_graph(records)
    if not graph.nodes:
        return GraphArtifacts({}, {})
    comms = detect_communities(graph, seed=seed)
    return GraphArtifacts(compute_host_features(graph, comms), comms)


def write_host_csv(artifacts: GraphArtifacts, dest: IO[str] | str) -> None:
    """Export as ``host,<nine features>,community``."""
    if isinstance(dest, str):
        with open(dest, "w", encoding="utf-8", newline="") as fh:
            write_host_csv(artifacts, fh)
        return
    w = csv.writer(dest, lineterminator="\n")
    w.writerow(("host",) + HostFeatures._fields + ("community",))
    for h in sorted(artifacts.host_features):
        w.writerow([h, *(repr(float(v)) for v in artifacts.host_features[h]),
                    artifacts.communities[h]])


def read_host_csv(source: IO[str] | str) -> GraphArtifacts:
    if isinstance(source, str):
        with open(source, "r", encoding="utf-8", newline="") as fh:
            return read_host_csv(fh)
    reader = csv.DictReader(source)
    feats, comms = {}, {}
    for row in reader:
        h = row["host"]
        feats[h] = HostFeatures(*(float(row[f]) for f in HostFeatures._fields))
        comms[h] = int(row["community"])
    return GraphArtifacts(feats, comms)
