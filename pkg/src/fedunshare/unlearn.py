"""Unlearning-phase protocol: edge withdrawal from the shared graph, the
forgotten graph and its frozen views, contrastive unlearning of the item
table, a from-scratch retrain oracle, and analytic storage-cost models.

Forgotten views are inferred once per run (the snapshot store and the
forgotten graph are both fixed by then) and treated as constants; the only
trainable state is the current item table and the server user table.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .datasets import DatasetSplits, InteractionTable, SharingPartition
from .fedlearn import (
    LearningResult,
    ServerState,
    SnapshotStore,
    TrainConfig,
    fedavg_deltas,
    local_train,
    run_learning,
    select_clients,
)
from .graph import (
    BipartiteGraph,
    EmbeddingTable,
    PropagationSpec,
    build_bipartite,
    propagate_adjoint,
    propagate_combined,
)
from .losses import LossConfig, contrastive_unlearn_loss_grad
from .seeding import rng_for


@dataclass
class UnlearnConfig:
    rounds: int = 1
    clients_per_round: float = 1.0
    learning_rate: float = 0.01
    epochs: int = 1  # contrastive-unlearning steps per round
    cl_batch_size: int = 256
    snapshots_used: int = 0  # 0 = every stored snapshot
    seed: int = 0
    use_forgotten_graph: bool = True  # off: raw snapshot rows as negatives
    remaining_fl: bool = True  # off: reuse the current table as local views
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if self.rounds < 1:
            raise ValueError("unlearning rounds must be >= 1")
        if not 0.0 < self.clients_per_round <= 1.0:
            raise ValueError("clients_per_round must lie in (0, 1]")
        if self.learning_rate < 0 or self.epochs < 0:
            raise ValueError("learning_rate and epochs must be >= 0")
        if self.snapshots_used < 0:
            raise ValueError("snapshots_used must be >= 0")


def apply_unshare(state: ServerState, partition: SharingPartition) -> ServerState:
    """Remove every requested edge from the shared graph.

    Item and user tables are untouched: influence removal is the separate
    contrastive step. Nodes isolated by the removal drop out of the graph.
    """
    requested = partition.unlearn_edges()
    if not requested:
        return state
    if state.shared_graph is None:
        raise ValueError("unshare requested but the server has no shared graph")
    current = state.shared_graph.edge_set()
    missing = requested - current
    if missing:
        u, i = sorted(missing)[0]
        raise ValueError(
            f"request withdraws edge (user {u}, item {i}) absent from the shared graph"
        )
    remaining = current - requested
    new_graph = build_bipartite(remaining) if remaining else None
    return ServerState(
        item_table=state.item_table,
        server_user_table=state.server_user_table,
        shared_graph=new_graph,
        round=state.round,
    )


def build_forgotten_graph(partition: SharingPartition) -> BipartiteGraph:
    """Bipartite graph of exactly the withdrawn (user, item) edges."""
    edges = partition.unlearn_edges()
    if not edges:
        raise ValueError("every unlearn set is empty: nothing to forget")
    return build_bipartite(edges)


def forgotten_views(
    graph_f: BipartiteGraph,
    snapshots: SnapshotStore,
    spec: PropagationSpec,
) -> dict[int, np.ndarray]:
    """Per-item stack of propagated views, one per historical snapshot.

    For each snapshot: item rows come from the snapshot table; user rows,
    which no snapshot stores, are initialized to the mean of that user's
    withdrawn items' snapshot rows; then propagate + combine on the
    forgotten graph and keep the item outputs.
    """
    if len(snapshots) == 0:
        raise ValueError("no snapshots available for forgotten-view inference")
    item_ids = graph_f.item_ids
    views: dict[int, list[np.ndarray]] = {int(i): [] for i in item_ids}
    for values in snapshots.tables():
        if int(item_ids.max()) >= values.shape[0]:
            raise KeyError(
                f"snapshot has no row for item {int(item_ids.max())}"
            )
        item_rows = values[item_ids]
        user_rows = np.zeros((graph_f.n_users, values.shape[1]))
        for upos in range(graph_f.n_users):
            neigh = graph_f.items_of_user_pos(upos)
            user_rows[upos] = item_rows[neigh].mean(axis=0)
        user_table = EmbeddingTable(graph_f.user_ids, user_rows)
        item_table = EmbeddingTable(item_ids, item_rows)
        _, combined_items = propagate_combined(graph_f, user_table, item_table, spec)
        for k, i in enumerate(item_ids):
            views[int(i)].append(combined_items[k])
    return {i: np.stack(v) for i, v in sorted(views.items())}


def raw_snapshot_views(
    item_ids, snapshots: SnapshotStore
) -> dict[int, np.ndarray]:
    """Ablation variant: the snapshot rows themselves, no graph inference."""
    if len(snapshots) == 0:
        raise ValueError("no snapshots available")
    ids = sorted(int(i) for i in item_ids)
    return {i: np.stack([values[i] for values in snapshots.tables()]) for i in ids}


def new_global_views(
    updated_graph: BipartiteGraph | None,
    local_view_values: np.ndarray,
    server_user_table: EmbeddingTable,
    spec: PropagationSpec,
) -> EmbeddingTable:
    """Global-view item table seeded from the new local views.

    Items absent from the updated graph keep their local view (identity
    fallback); with no graph at all the output equals the input table.
    """
    out = np.array(local_view_values, dtype=np.float64)
    ids = np.arange(out.shape[0], dtype=np.int64)
    if updated_graph is not None:
        item_table = EmbeddingTable(ids, local_view_values)
        _, item_views = propagate_combined(
            updated_graph, server_user_table, item_table, spec
        )
        out[updated_graph.item_ids] = item_views
    return EmbeddingTable(ids, out)


@dataclass
class UnlearnResult:
    server: ServerState
    history: list[dict]
    forgotten_views: dict[int, np.ndarray]


def _cu_round(
    state: ServerState,
    views_of_forgotten: dict[int, np.ndarray],
    forgotten_items: np.ndarray,
    train_config: TrainConfig,
    config: UnlearnConfig,
    round_idx: int,
) -> float:
    """One round of contrastive-unlearning epochs over the item table.

    Local views are the current item-table rows themselves (the trainable
    side, freshly reset from the federated pass), global views their graph
    propagation; both gradient sides therefore land on the table, the
    global one through the propagation adjoint. The repulsion away from
    the frozen forgotten views acts directly on each item row.
    """
    spec = train_config.server_spec()
    graph = state.shared_graph
    eta = config.learning_rate
    lam = config.loss.lambda_reg
    d = train_config.dim
    total = 0.0
    if graph is not None:
        domain = np.union1d(graph.item_ids, forgotten_items)
    else:
        domain = np.array(sorted(set(int(i) for i in forgotten_items)), dtype=np.int64)
    for epoch in range(config.epochs):
        if graph is not None:
            _, item_views = propagate_combined(
                graph, state.server_user_table, state.item_table, spec
            )
        loc = state.item_table.values[domain]
        # global view per domain item: propagated when in the graph,
        # otherwise the current raw row (identity fallback)
        glob = np.empty((len(domain), d))
        in_graph = np.zeros(len(domain), dtype=bool)
        for k, i in enumerate(domain):
            if graph is not None:
                p = np.searchsorted(graph.item_ids, i)
                if p < graph.n_items and graph.item_ids[p] == i:
                    glob[k] = item_views[p]
                    in_graph[k] = True
                    continue
            glob[k] = state.item_table.values[int(i)]

        perm = rng_for(config.seed, "cu-batch", round_idx, epoch).permutation(
            len(domain)
        )
        bs = config.cl_batch_size
        chunks = [np.sort(perm[k:k + bs]) for k in range(0, len(perm), bs)]

        up_graph = np.zeros((graph.n_items, d)) if graph is not None else None
        up_user = np.zeros((graph.n_users, d)) if graph is not None else None
        direct: dict[int, np.ndarray] = {}

        def push_direct(i, g):
            direct[i] = direct[i] + g if i in direct else g

        epoch_loss = 0.0
        for chunk in chunks:
            ids = [int(domain[k]) for k in chunk]
            loss, acc = contrastive_unlearn_loss_grad(
                loc[chunk], glob[chunk], views_of_forgotten, ids, config.loss
            )
            epoch_loss += loss
            for k, i in zip(chunk, ids):
                push_direct(i, acc.get(("local", i), d))
                g = acc.get(("global", i), d)
                if in_graph[k]:
                    p = int(np.searchsorted(graph.item_ids, i))
                    up_graph[p] += g
                else:
                    push_direct(i, g)
        total = epoch_loss

        step: dict[int, np.ndarray] = {}
        if graph is not None:
            grad_users, grad_items = propagate_adjoint(graph, spec, up_user, up_graph)
            upos = state.server_user_table.positions(graph.user_ids, "user")
            raw_u = state.server_user_table.values[upos]
            state.server_user_table.values[upos] = raw_u - eta * (
                grad_users + 2.0 * lam * raw_u
            )
            for p, i in enumerate(graph.item_ids):
                step[int(i)] = grad_items[p]
        for i in sorted(direct):
            step[i] = step[i] + direct[i] if i in step else direct[i]
        for i in sorted(step):
            row = state.item_table.values[i]
            state.item_table.values[i] = row - eta * (step[i] + 2.0 * lam * row)
    return total


def run_unlearning(
    state: ServerState,
    snapshots: SnapshotStore,
    partition: SharingPartition,
    clients: dict,
    train_config: TrainConfig,
    config: UnlearnConfig,
    metrics_sink=None,
) -> UnlearnResult:
    """Snapshot-contrastive unlearning: per round, a federated pass over
    remaining data refreshes the local views, then contrastive epochs push
    the table away from the frozen forgotten views. ``state`` must already
    have the withdrawn edges removed (see apply_unshare)."""
    graph_f = build_forgotten_graph(partition)
    used = snapshots
    if config.snapshots_used and config.snapshots_used < len(snapshots):
        used = SnapshotStore(config.snapshots_used)
        for r, values in snapshots.entries[-config.snapshots_used:]:
            used.push(r, values)
    if config.use_forgotten_graph:
        frozen = forgotten_views(graph_f, used, train_config.server_spec())
    else:
        frozen = raw_snapshot_views(graph_f.item_ids, used)
    forgotten_items = graph_f.item_ids

    history: list[dict] = []
    for t in range(1, config.rounds + 1):
        round_idx = state.round + t
        participants = 0
        if config.remaining_fl:
            selected = select_clients(
                sorted(clients), config.clients_per_round, round_idx,
                config.seed,
            )
            broadcast = state.item_table.values
            updates = {}
            for uid in selected:
                client = clients[uid]
                withdrawn = partition.unlearn_sets[uid]
                if len(withdrawn):
                    kept = np.setdiff1d(client.local_items, withdrawn)
                    if len(kept) != len(client.local_items):
                        client.local_items = kept
                upd = local_train(client, broadcast, train_config, round_idx)
                if upd is not None:
                    updates[uid] = upd
            participants = len(updates)
            if updates:
                new_local = fedavg_deltas(broadcast, updates)
            else:
                new_local = broadcast.copy()
        else:
            new_local = state.item_table.values.copy()

        state.item_table = EmbeddingTable(state.item_table.ids, new_local)
        cu_loss = _cu_round(
            state, frozen, forgotten_items, train_config, config, round_idx
        )
        record = {
            "round": round_idx,
            "participants": participants,
            "cu_loss": float(cu_loss),
        }
        history.append(record)
        if metrics_sink is not None:
            metrics_sink(record)
    state.round += config.rounds
    return UnlearnResult(state, history, frozen)


def retrain_partition(partition: SharingPartition) -> SharingPartition:
    """The counterfactual partition where withdrawn items were never shared:
    they move back to the kept-local sets and groups are relabeled."""
    local, share, groups = [], [], []
    for u in range(partition.n_users):
        withdrawn = partition.unlearn_sets[u]
        new_share = np.setdiff1d(partition.share_sets[u], withdrawn)
        new_local = np.union1d(partition.local_sets[u], withdrawn)
        share.append(new_share)
        local.append(new_local)
        if len(new_share) == 0:
            groups.append("none")
        elif len(new_local) == 0:
            groups.append("full")
        else:
            groups.append("partial")
    empty = [np.array([], dtype=np.int64) for _ in range(partition.n_users)]
    return SharingPartition(local, share, empty, groups)


def retrain_oracle(
    config: TrainConfig, partition: SharingPartition, splits: DatasetSplits,
    metrics_sink=None,
) -> LearningResult:
    """Train from scratch as if the withdrawn data had never been shared."""
    reference = retrain_partition(partition)
    reference.validate(splits)
    return run_learning(config, reference, splits, metrics_sink=metrics_sink)


# -- storage-cost models --------------------------------------------------------

STORAGE_METHODS = (
    "fedshare",
    "gradient_history_client",
    "gradient_history_server",
    "retrain",
)


@dataclass
class StorageReport:
    method: str
    bytes: int
    params: dict

    def to_dict(self) -> dict:
        return {"method": self.method, "bytes": self.bytes, "params": self.params}


def storage_cost(method: str, params: dict) -> StorageReport:
    """Analytic bytes-of-history models for unlearning strategies.

    fedshare keeps M item tables; gradient-history methods keep one item
    table worth of gradients per round per participant (client) or per
    round (server), scaled by the retention rate; retraining stores nothing.
    """
    if method not in STORAGE_METHODS:
        raise ValueError(f"unknown storage method {method!r}")
    items = int(params["items"])
    dim = int(params["dim"])
    cell = 8  # 64-bit reals
    rho = float(params.get("retention", 1.0))
    used: dict = {"items": items, "dim": dim}
    if method == "fedshare":
        m = int(params["snapshots"])
        total = m * items * dim * cell
        used["snapshots"] = m
    elif method == "gradient_history_client":
        t = int(params["rounds"])
        clients = int(params["clients_per_round"])
        total = int(round(t * rho * clients * items * dim * cell))
        used.update({"rounds": t, "clients_per_round": clients, "retention": rho})
    elif method == "gradient_history_server":
        t = int(params["rounds"])
        total = int(round(t * rho * items * dim * cell))
        used.update({"rounds": t, "retention": rho})
    else:
        total = 0
    return StorageReport(method, int(total), used)


def render_storage_table(reports: list[StorageReport]) -> str:
    """Aligned text table over several storage reports."""
    rows = [("method", "bytes")] + [(r.method, f"{r.bytes:,}") for r in reports]
    w0 = max(len(a) for a, _ in rows)
    w1 = max(len(b) for _, b in rows)
    lines = [f"{a:<{w0}}  {b:>{w1}}" for a, b in rows]
    lines.insert(1, "-" * (w0 + w1 + 2))
    return "\n".join(lines)


# -- unshare request files --------------------------------------------------------

def write_unshare_requests(
    path: str, partition: SharingPartition, table: InteractionTable
) -> int:
    """One JSON record per requesting user; full withdrawal compresses to
    "all". Returns the number of records written."""
    count = 0
    with open(path, "w", encoding="utf-8") as fh:
        for u in range(partition.n_users):
            withdrawn = partition.unlearn_sets[u]
            if not len(withdrawn):
                continue
            if np.array_equal(withdrawn, partition.share_sets[u]):
                items = "all"
            else:
                items = [table.item_raw[int(i)] for i in withdrawn]
            record = {"user": table.user_raw[u], "items": items}
            fh.write(json.dumps(record, sort_keys=True) + "\n")
            count += 1
    return count


def apply_unshare_requests(
    path: str, partition: SharingPartition, table: InteractionTable
) -> SharingPartition:
    """Parse a request file into a partition with populated unlearn sets."""
    out = partition.copy()
    for u in range(out.n_users):
        out.unlearn_sets[u] = np.array([], dtype=np.int64)
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
                user = table.user_index[record["user"]]
                items = record["items"]
            except (json.JSONDecodeError, KeyError) as exc:
                raise ValueError(f"{path}:{lineno}: bad request record") from exc
            if items == "all":
                out.unlearn_sets[user] = out.share_sets[user].copy()
            else:
                dense = np.array(
                    sorted(table.item_index[r] for r in items), dtype=np.int64
                )
                if not np.isin(dense, out.share_sets[user]).all():
                    raise ValueError(
                        f"{path}:{lineno}: request withdraws items the user never shared"
                    )
                out.unlearn_sets[user] = dense
    return out
