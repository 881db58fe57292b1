"""Sparse bipartite user-item graphs and the light graph convolution kernels.

Propagation is the parameter-free normalized neighborhood average: layer l+1
of a user row is sum_{i in N(u)} item_row_i^(l) / sqrt(|N(u)||N(i)|), and
symmetric for items. A layer-combination step averages the per-layer outputs
with fixed weights. Both maps are linear, so the exact gradient is available
as an adjoint.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class PropagationSpec:
    """Number of propagation layers plus one combination weight per layer."""

    layers: int
    alphas: tuple[float, ...]

    def __post_init__(self):
        if self.layers < 0:
            raise ValueError("layers must be >= 0")
        if len(self.alphas) != self.layers + 1:
            raise ValueError(
                f"need {self.layers + 1} layer weights, got {len(self.alphas)}"
            )
        if any(a < 0 for a in self.alphas):
            raise ValueError("layer weights must be nonnegative")

    @classmethod
    def uniform(cls, layers: int) -> "PropagationSpec":
        """Equal weight 1/(L+1) on every layer."""
        return cls(layers, tuple([1.0 / (layers + 1)] * (layers + 1)))


class EmbeddingTable:
    """Dense float64 rows addressed by sorted global integer ids."""

    def __init__(self, ids, values):
        self.ids = np.asarray(ids, dtype=np.int64)
        self.values = np.asarray(values, dtype=np.float64)
        if self.values.ndim != 2 or len(self.ids) != len(self.values):
            raise ValueError("ids and value rows must align")
        if len(self.ids) > 1 and not (np.diff(self.ids) > 0).all():
            raise ValueError("ids must be strictly increasing")

    @property
    def rows(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def positions(self, ids, kind: str = "node") -> np.ndarray:
        """Row positions for global ``ids``; missing ids raise KeyError."""
        ids = np.asarray(ids, dtype=np.int64)
        pos = np.searchsorted(self.ids, ids)
        bad = (pos >= self.rows) | (self.ids[np.minimum(pos, self.rows - 1)] != ids)
        if bad.any():
            missing = int(ids[np.argmax(bad)])
            raise KeyError(f"no embedding row for {kind} {missing}")
        return pos

    def lookup(self, ids, kind: str = "node") -> np.ndarray:
        return self.values[self.positions(ids, kind)]

    def copy(self) -> "EmbeddingTable":
        return EmbeddingTable(self.ids.copy(), self.values.copy())


class BipartiteGraph:
    """Immutable user-item graph with both adjacency orientations.

    Node ids are global; isolated nodes are never stored. Edges are kept
    in canonical (user_pos, item_pos) lexicographic order together with
    the symmetric normalization coefficient 1/sqrt(|N(u)||N(i)|).
    """

    def __init__(self, edges):
        edge_list = sorted({(int(u), int(i)) for u, i in edges})
        if not edge_list:
            raise ValueError("graph needs at least one edge")
        arr = np.array(edge_list, dtype=np.int64)
        self.user_ids = np.unique(arr[:, 0])
        self.item_ids = np.unique(arr[:, 1])
        self.edge_u = np.searchsorted(self.user_ids, arr[:, 0])
        self.edge_i = np.searchsorted(self.item_ids, arr[:, 1])
        self.user_degrees = np.bincount(self.edge_u, minlength=len(self.user_ids))
        self.item_degrees = np.bincount(self.edge_i, minlength=len(self.item_ids))
        self.coef = 1.0 / np.sqrt(
            self.user_degrees[self.edge_u] * self.item_degrees[self.edge_i]
        )
        # item->user orientation: same edges re-sorted by (item, user)
        order = np.lexsort((self.edge_u, self.edge_i))
        self._by_item = order
        self._u_indptr = np.concatenate(
            ([0], np.cumsum(self.user_degrees))
        )
        self._i_indptr = np.concatenate(
            ([0], np.cumsum(self.item_degrees))
        )

    @property
    def n_users(self) -> int:
        return len(self.user_ids)

    @property
    def n_items(self) -> int:
        return len(self.item_ids)

    @property
    def n_edges(self) -> int:
        return len(self.edge_u)

    def items_of_user_pos(self, upos: int) -> np.ndarray:
        """Item positions adjacent to the user at position ``upos``."""
        lo, hi = self._u_indptr[upos], self._u_indptr[upos + 1]
        return self.edge_i[lo:hi]

    def users_of_item_pos(self, ipos: int) -> np.ndarray:
        lo, hi = self._i_indptr[ipos], self._i_indptr[ipos + 1]
        return self.edge_u[self._by_item[lo:hi]]

    def item_neighbors(self, user_id: int) -> np.ndarray:
        """Global item ids adjacent to a global user id ([] if absent)."""
        pos = np.searchsorted(self.user_ids, user_id)
        if pos >= self.n_users or self.user_ids[pos] != user_id:
            return np.array([], dtype=np.int64)
        return self.item_ids[self.items_of_user_pos(pos)]

    def edge_set(self) -> set[tuple[int, int]]:
        return {
            (int(self.user_ids[u]), int(self.item_ids[i]))
            for u, i in zip(self.edge_u, self.edge_i)
        }

    def validate(self) -> None:
        assert (self.user_degrees > 0).all() and (self.item_degrees > 0).all()
        assert self._u_indptr[-1] == self.n_edges == self._i_indptr[-1]
        # the two orientations must enumerate the same edge set
        forward = set(zip(self.edge_u.tolist(), self.edge_i.tolist()))
        backward = {
            (int(self.edge_u[j]), int(self.edge_i[j])) for j in self._by_item
        }
        assert forward == backward, "adjacency orientations disagree"


def build_bipartite(edges) -> BipartiteGraph:
    """Construct a graph from an iterable of (user_id, item_id) pairs."""
    graph = BipartiteGraph(edges)
    graph.validate()
    return graph


def ego_graph(user_id: int, item_ids) -> BipartiteGraph:
    """First-order star graph of one user and its items: |N(i)| = 1 for all i."""
    items = np.asarray(item_ids, dtype=np.int64)
    if len(items) == 0:
        raise ValueError(f"user {user_id} has no items for an ego graph")
    return build_bipartite((int(user_id), int(i)) for i in items)


def _step(graph: BipartiteGraph, user_layer: np.ndarray, item_layer: np.ndarray):
    """One simultaneous propagation hop; deterministic scatter accumulation."""
    next_user = np.zeros_like(user_layer)
    next_item = np.zeros_like(item_layer)
    weighted_items = item_layer[graph.edge_i] * graph.coef[:, None]
    weighted_users = user_layer[graph.edge_u] * graph.coef[:, None]
    np.add.at(next_user, graph.edge_u, weighted_items)
    np.add.at(next_item, graph.edge_i, weighted_users)
    return next_user, next_item


def propagate(
    graph: BipartiteGraph,
    user_emb: EmbeddingTable,
    item_emb: EmbeddingTable,
    spec: PropagationSpec,
) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """All propagation layers 0..L for every graph node.

    Returns two lists of (n, d) arrays aligned with graph.user_ids and
    graph.item_ids. Layer 0 is the gathered input.
    """
    user_layers = [user_emb.lookup(graph.user_ids, "user")]
    item_layers = [item_emb.lookup(graph.item_ids, "item")]
    for _ in range(spec.layers):
        nu, ni = _step(graph, user_layers[-1], item_layers[-1])
        user_layers.append(nu)
        item_layers.append(ni)
    return user_layers, item_layers


def combine_layers(layer_rows: list[np.ndarray], spec: PropagationSpec) -> np.ndarray:
    """Weighted sum over layers: row = sum_l alpha_l * row^(l)."""
    if len(layer_rows) != spec.layers + 1:
        raise ValueError(
            f"expected {spec.layers + 1} layers, got {len(layer_rows)}"
        )
    out = np.zeros_like(layer_rows[0])
    for alpha, rows in zip(spec.alphas, layer_rows):
        out += alpha * rows
    return out


def propagate_combined(
    graph: BipartiteGraph,
    user_emb: EmbeddingTable,
    item_emb: EmbeddingTable,
    spec: PropagationSpec,
) -> tuple[np.ndarray, np.ndarray]:
    """Propagation followed by layer combination for users and items."""
    user_layers, item_layers = propagate(graph, user_emb, item_emb, spec)
    return combine_layers(user_layers, spec), combine_layers(item_layers, spec)


def propagate_adjoint(
    graph: BipartiteGraph,
    spec: PropagationSpec,
    upstream_user: np.ndarray,
    upstream_item: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Exact gradient of propagate_combined with respect to its inputs.

    The one-hop map on stacked (user, item) rows is symmetric because the
    edge coefficient 1/sqrt(|N(u)||N(i)|) is shared by both directions, so
    the full linear map equals its own transpose and the adjoint is just
    propagation + combination applied to the upstream gradients.
    """
    if upstream_user.shape != (graph.n_users, upstream_user.shape[1]) or \
            upstream_item.shape != (graph.n_items, upstream_user.shape[1]):
        raise ValueError("upstream gradient shapes do not match the graph")
    user_layers = [np.asarray(upstream_user, dtype=np.float64)]
    item_layers = [np.asarray(upstream_item, dtype=np.float64)]
    for _ in range(spec.layers):
        nu, ni = _step(graph, user_layers[-1], item_layers[-1])
        user_layers.append(nu)
        item_layers.append(ni)
    return combine_layers(user_layers, spec), combine_layers(item_layers, spec)


# -- optional binary cache ----------------------------------------------------

_MAGIC = np.int64(0x42504752)  # "BPGR"


def write_graph_binary(graph: BipartiteGraph, path: str) -> None:
    """Dump as little-endian int64: magic, |U|, |I|, |E|, then (u, i) pairs."""
    header = np.array(
        [_MAGIC, graph.n_users, graph.n_items, graph.n_edges], dtype="<i8"
    )
    pairs = np.stack(
        [graph.user_ids[graph.edge_u], graph.item_ids[graph.edge_i]], axis=1
    ).astype("<i8")
    with open(path, "wb") as fh:
        header.tofile(fh)
        pairs.tofile(fh)


def read_graph_binary(path: str) -> BipartiteGraph:
    with open(path, "rb") as fh:
        header = np.fromfile(fh, dtype="<i8", count=4)
        if len(header) < 4 or header[0] != _MAGIC:
            raise ValueError(f"{path}: not a graph dump")
        n_edges = int(header[3])
        pairs = np.fromfile(fh, dtype="<i8", count=2 * n_edges).reshape(-1, 2)
    if len(pairs) != n_edges:
        raise ValueError(f"{path}: truncated edge list")
    graph = build_bipartite(map(tuple, pairs))
    if graph.n_users != header[1] or graph.n_items != header[2]:
        raise ValueError(f"{path}: node counts disagree with header")
    return graph
