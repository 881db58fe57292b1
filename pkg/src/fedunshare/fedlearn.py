"""Learning-phase protocol: client selection, local ranking training on
kept-local data, weighted aggregation, server-side contrastive refinement
on the shared graph, and snapshot capture.

Privacy boundary: user embeddings and kept-local item sets live inside
ClientState and never cross into server-side functions, which see only
uploaded item tables, shared edges, and aggregation weights.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .datasets import DatasetSplits, SharingPartition
from .evaluation import evaluate
from .graph import (
    BipartiteGraph,
    EmbeddingTable,
    PropagationSpec,
    build_bipartite,
    ego_graph,
    propagate_adjoint,
    propagate_combined,
)
from .losses import GradAccumulator, LossConfig, bpr_loss_grad, infonce_cl_loss_grad
from .seeding import rng_for

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    dim: int = 32
    rounds: int = 10
    clients_per_round: float = 1.0
    local_epochs: int = 1
    learning_rate: float = 0.01
    server_epochs: int = 1
    client_layers: int = 1
    server_layers: int = 3
    snapshots: int = 3
    cl_batch_size: int = 256
    local_data_mode: str = "remaining"  # or "all": include shared items locally
    server_bpr: bool = True
    seed: int = 0
    threads: int = 1
    eval_every: int = 0
    eval_ks: tuple[int, ...] = (10, 20)
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if not 0.0 < self.clients_per_round <= 1.0:
            raise ValueError("clients_per_round must lie in (0, 1]")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.local_data_mode not in ("remaining", "all"):
            raise ValueError("local_data_mode must be 'remaining' or 'all'")
        if self.dim < 1 or self.local_epochs < 0 or self.server_epochs < 0:
            raise ValueError("dim must be >= 1; epoch counts must be >= 0")
        if self.cl_batch_size < 2:
            raise ValueError("cl_batch_size must be >= 2")

    def client_spec(self) -> PropagationSpec:
        return PropagationSpec.uniform(self.client_layers)

    def server_spec(self) -> PropagationSpec:
        return PropagationSpec.uniform(self.server_layers)


@dataclass
class ClientState:
    """One simulated participant: private user vector plus kept-local items."""

    user_id: int
    user_embedding: np.ndarray
    local_items: np.ndarray
    negative_candidates: np.ndarray  # items outside the user's train set

    def can_train(self) -> bool:
        return len(self.local_items) > 0 and len(self.negative_candidates) > 0


@dataclass
class ServerState:
    item_table: EmbeddingTable
    server_user_table: EmbeddingTable
    shared_graph: BipartiteGraph | None
    round: int = 0

    def validate(self, n_items: int) -> None:
        assert self.item_table.rows == n_items, "item table must cover all items"
        if self.shared_graph is not None:
            # server user rows exist exactly for users with shared edges
            assert np.isin(self.shared_graph.user_ids, self.server_user_table.ids).all()


class SnapshotStore:
    """Ring buffer of the most recent item-table copies, one per round."""

    def __init__(self, capacity: int):
        if capacity < 0:
            raise ValueError("capacity must be >= 0")
        self.capacity = capacity
        self.entries: list[tuple[int, np.ndarray]] = []

    def push(self, round_idx: int, values: np.ndarray) -> None:
        if self.entries and round_idx <= self.entries[-1][0]:
            raise ValueError("snapshot rounds must be strictly increasing")
        if self.capacity == 0:
            return
        self.entries.append((int(round_idx), np.array(values, dtype=np.float64)))
        if len(self.entries) > self.capacity:
            self.entries.pop(0)

    def __len__(self) -> int:
        return len(self.entries)

    def rounds(self) -> list[int]:
        return [r for r, _ in self.entries]

    def tables(self) -> list[np.ndarray]:
        return [v for _, v in self.entries]

    def validate(self) -> None:
        assert len(self.entries) <= max(self.capacity, 0)
        rounds = self.rounds()
        assert rounds == sorted(rounds) and len(set(rounds)) == len(rounds)


@dataclass
class LocalUpdate:
    """Sparse client upload: changed item rows relative to the broadcast."""

    weight: float
    delta: dict[int, np.ndarray]
    loss: float = 0.0


def xavier_init(rng: np.random.Generator, rows: int, dim: int) -> np.ndarray:
    """Uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out)), both fans = dim."""
    bound = math.sqrt(6.0 / (dim + dim))
    return rng.uniform(-bound, bound, size=(rows, dim))


def init_clients(
    partition: SharingPartition, splits: DatasetSplits, config: TrainConfig
) -> dict[int, ClientState]:
    train_items = splits.train.per_user_items()
    all_items = np.arange(splits.n_items, dtype=np.int64)
    clients = {}
    for u in range(splits.n_users):
        vec = xavier_init(rng_for(config.seed, "client-init", u), 1, config.dim)[0]
        local = (
            train_items[u]
            if config.local_data_mode == "all"
            else partition.local_sets[u]
        )
        clients[u] = ClientState(
            user_id=u,
            user_embedding=vec,
            local_items=np.array(local, dtype=np.int64),
            negative_candidates=np.setdiff1d(all_items, train_items[u]),
        )
    return clients


def init_server(
    partition: SharingPartition, splits: DatasetSplits, config: TrainConfig
) -> ServerState:
    n_items = splits.n_items
    item_values = xavier_init(
        rng_for(config.seed, "server-init", "items"), n_items, config.dim
    )
    item_table = EmbeddingTable(np.arange(n_items, dtype=np.int64), item_values)
    sharing = sorted(partition.sharing_users())
    user_values = xavier_init(
        rng_for(config.seed, "server-init", "users"), len(sharing), config.dim
    )
    user_table = EmbeddingTable(np.array(sharing, dtype=np.int64), user_values)
    shared = partition.shared_edges()
    graph = build_bipartite(shared) if shared else None
    state = ServerState(item_table, user_table, graph)
    state.validate(n_items)
    return state


def select_clients(all_clients, fraction: float, round_idx: int, seed: int) -> list[int]:
    """Deterministic ceil(fraction * n)-sized sample for this round."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must lie in (0, 1]")
    ids = sorted(int(c) for c in all_clients)
    k = int(math.ceil(fraction * len(ids)))
    order = rng_for(seed, "select", round_idx).permutation(len(ids))
    return sorted(ids[int(j)] for j in order[:k])


def local_train(
    client: ClientState,
    broadcast_values: np.ndarray,
    config: TrainConfig,
    round_idx: int,
) -> LocalUpdate | None:
    """Ranking training on the client's kept-local ego graph.

    Starts from the broadcast item table, runs local_epochs of propagation +
    pairwise loss + SGD on the user vector and touched item rows, and uploads
    only the changed rows. Returns None when the client has nothing to train.
    """
    if not client.can_train():
        return None
    uid = client.user_id
    items = client.local_items
    spec = config.client_spec()
    graph = ego_graph(uid, items)
    lam = config.loss.lambda_reg
    eta = config.learning_rate
    npp = config.loss.negatives_per_positive
    bpr_config = LossConfig(
        tau=config.loss.tau,
        lambda_reg=0.0,  # l2 applied below on raw parameters, not views
        lambda_cl=config.loss.lambda_cl,
        negatives_per_positive=npp,
    )

    working: dict[int, np.ndarray] = {}

    def row(i: int) -> np.ndarray:
        return working.get(i, broadcast_values[i])

    loss_value = 0.0
    for epoch in range(config.local_epochs):
        user_table = EmbeddingTable([uid], client.user_embedding[None, :])
        item_table = EmbeddingTable(
            graph.item_ids, np.stack([row(int(i)) for i in graph.item_ids])
        )
        user_view, item_views = propagate_combined(graph, user_table, item_table, spec)

        rng = rng_for(config.seed, "negatives", round_idx, uid, epoch)
        pos_ids = [int(i) for i in graph.item_ids]
        neg_pool = client.negative_candidates
        negs = neg_pool[rng.integers(0, len(neg_pool), size=npp * len(pos_ids))]
        neg_ids = [int(j) for j in negs]

        vecs = {i: item_views[k] for k, i in enumerate(pos_ids)}
        for j in neg_ids:
            vecs.setdefault(j, row(j))
        loss_value, acc = bpr_loss_grad(
            uid, user_view[0], pos_ids, neg_ids, vecs, bpr_config
        )

        d = config.dim
        up_user = acc.get(("user", uid), d)[None, :]
        up_items = np.stack([acc.get(("item", i), d) for i in pos_ids])
        grad_user, grad_items = propagate_adjoint(graph, spec, up_user, up_items)

        touched_negs = sorted(set(neg_ids))
        if lam > 0.0:
            reg_rows = [client.user_embedding] + [row(i) for i in pos_ids] \
                + [row(j) for j in touched_negs]
            loss_value += lam * float(sum(np.dot(r, r) for r in reg_rows))

        client.user_embedding = client.user_embedding - eta * (
            grad_user[0] + 2.0 * lam * client.user_embedding
        )
        for k, i in enumerate(pos_ids):
            working[i] = row(i) - eta * (grad_items[k] + 2.0 * lam * row(i))
        for j in touched_negs:
            working[j] = row(j) - eta * (
                acc.get(("item", j), d) + 2.0 * lam * row(j)
            )

    delta = {i: working[i] - broadcast_values[i] for i in sorted(working)}
    return LocalUpdate(weight=float(len(items)), delta=delta, loss=float(loss_value))


def fedavg(tables: dict[int, np.ndarray], weights: dict[int, float]) -> np.ndarray:
    """Row-wise weighted average of full tables, canonical client order."""
    if not tables:
        raise ValueError("no client updates to aggregate")
    ids = sorted(tables)
    if any(weights[c] <= 0 for c in ids):
        raise ValueError("aggregation weights must be positive")
    total = float(sum(weights[c] for c in ids))
    out = np.zeros_like(np.asarray(tables[ids[0]], dtype=np.float64))
    for c in ids:
        if tables[c].shape != out.shape:
            raise ValueError("client tables must share one shape")
        out += (weights[c] / total) * tables[c]
    return out


def fedavg_deltas(base: np.ndarray, updates: dict[int, LocalUpdate]) -> np.ndarray:
    """Same average expressed on sparse uploads: base + sum_u w_u * delta_u.

    Algebraically identical to averaging the full tables (every upload is
    base + delta), but untouched rows come out bit-equal to the broadcast.
    """
    if not updates:
        raise ValueError("no client updates to aggregate")
    ids = sorted(updates)
    if any(updates[c].weight <= 0 for c in ids):
        raise ValueError("aggregation weights must be positive")
    total = float(sum(updates[c].weight for c in ids))
    acc: dict[int, np.ndarray] = {}
    for c in ids:
        w = updates[c].weight / total
        for r in sorted(updates[c].delta):
            term = w * updates[c].delta[r]
            acc[r] = acc[r] + term if r in acc else term
    out = np.array(base, dtype=np.float64)
    for r in sorted(acc):
        out[r] = out[r] + acc[r]
    return out


def server_refine(
    state: ServerState,
    local_view_values: np.ndarray,
    config: TrainConfig,
    round_idx: int,
) -> dict[str, float]:
    """Contrastive refinement of the item table on the shared graph.

    Per epoch: propagate current parameters over the shared graph, score a
    ranking term on its edges and an alignment term between the aggregated
    local-view rows (constants) and the propagated global views, then push
    gradients back through the propagation adjoint. Items outside the graph
    are untouched and keep their local view as the global one.
    """
    graph = state.shared_graph
    stats = {"server_bpr": 0.0, "server_cl": 0.0}
    if graph is None or config.server_epochs == 0:
        return stats
    spec = config.server_spec()
    eta = config.learning_rate
    lam = config.loss.lambda_reg
    lam_cl = config.loss.lambda_cl
    npp = config.loss.negatives_per_positive
    d = config.dim
    view_loss_config = LossConfig(
        tau=config.loss.tau, lambda_reg=0.0, lambda_cl=lam_cl,
        negatives_per_positive=npp,
    )

    for epoch in range(config.server_epochs):
        user_views, item_views = propagate_combined(
            graph, state.server_user_table, state.item_table, spec
        )
        up_user = np.zeros((graph.n_users, d))
        up_item = np.zeros((graph.n_items, d))
        bpr_total = 0.0
        cl_total = 0.0

        if config.server_bpr:
            for upos in range(graph.n_users):
                uid = int(graph.user_ids[upos])
                pos_pos = graph.items_of_user_pos(upos)
                pos_ids = graph.item_ids[pos_pos]
                pool = np.setdiff1d(graph.item_ids, pos_ids)
                if len(pool) == 0:
                    continue
                rng = rng_for(config.seed, "server-negatives", round_idx, epoch, uid)
                negs = pool[rng.integers(0, len(pool), size=npp * len(pos_ids))]
                need = np.unique(np.concatenate([pos_ids, negs]))
                need_pos = np.searchsorted(graph.item_ids, need)
                vecs = {int(i): item_views[p] for i, p in zip(need, need_pos)}
                loss, acc = bpr_loss_grad(
                    uid, user_views[upos], [int(i) for i in pos_ids],
                    [int(j) for j in negs], vecs, view_loss_config,
                )
                bpr_total += loss
                up_user[upos] += acc.get(("user", uid), d)
                for i, p in zip(need, need_pos):
                    up_item[int(p)] += acc.get(("item", int(i)), d)

        if lam_cl > 0.0 and graph.n_items >= 2:
            perm = rng_for(config.seed, "cl-batch", round_idx, epoch).permutation(
                graph.n_items
            )
            bs = config.cl_batch_size
            chunks = [perm[k:k + bs] for k in range(0, len(perm), bs)]
            if len(chunks) > 1 and len(chunks[-1]) < 2:
                chunks[-2] = np.concatenate([chunks[-2], chunks[-1]])
                chunks.pop()
            for chunk in chunks:
                chunk = np.sort(chunk)
                ids = graph.item_ids[chunk]
                anchors = local_view_values[ids]
                loss, acc = infonce_cl_loss_grad(
                    anchors, item_views[chunk], [int(i) for i in ids],
                    view_loss_config,
                )
                cl_total += loss
                for p, i in zip(chunk, ids):
                    # anchors are constants within the round: only the
                    # global-view side backpropagates
                    up_item[int(p)] += lam_cl * acc.get(("global", int(i)), d)

        grad_users, grad_items = propagate_adjoint(graph, spec, up_user, up_item)
        upos_rows = state.server_user_table.positions(graph.user_ids, "user")
        ipos_rows = state.item_table.positions(graph.item_ids, "item")
        raw_users = state.server_user_table.values[upos_rows]
        raw_items = state.item_table.values[ipos_rows]
        state.server_user_table.values[upos_rows] = raw_users - eta * (
            grad_users + 2.0 * lam * raw_users
        )
        state.item_table.values[ipos_rows] = raw_items - eta * (
            grad_items + 2.0 * lam * raw_items
        )
        stats["server_bpr"] = bpr_total
        stats["server_cl"] = cl_total
    return stats


@dataclass
class LearningResult:
    server: ServerState
    snapshots: SnapshotStore
    clients: dict[int, ClientState]
    history: list[dict]


def run_learning(
    config: TrainConfig,
    partition: SharingPartition,
    splits: DatasetSplits,
    metrics_sink=None,
) -> LearningResult:
    """Full learning phase: T rounds of select / train / aggregate / refine,
    with a snapshot of the item table captured after every round."""
    clients = init_clients(partition, splits, config)
    server = init_server(partition, splits, config)
    snapshots = SnapshotStore(config.snapshots)
    history: list[dict] = []
    eval_splits = None
    if config.eval_every and splits.valid.n_pairs:
        # per-round metrics score the validation pairs, so they take the
        # test slot that evaluate() reads; real test pairs stay unused here
        eval_splits = DatasetSplits(splits.train, splits.test, splits.valid)

    for t in range(1, config.rounds + 1):
        selected = select_clients(
            sorted(clients), config.clients_per_round, t, config.seed
        )
        broadcast = server.item_table.values

        def train_one(uid):
            return uid, local_train(clients[uid], broadcast, config, t)

        if config.threads > 1:
            with ThreadPoolExecutor(max_workers=config.threads) as pool:
                results = list(pool.map(train_one, selected))
        else:
            results = [train_one(uid) for uid in selected]
        updates = {uid: upd for uid, upd in results if upd is not None}
        skipped = len(selected) - len(updates)
        if skipped:
            logger.debug("round %d: skipped %d clients with no local data", t, skipped)

        if updates:
            aggregated = fedavg_deltas(broadcast, updates)
        else:
            aggregated = broadcast.copy()
        server.item_table = EmbeddingTable(server.item_table.ids, aggregated)
        local_view_values = aggregated.copy()
        stats = server_refine(server, local_view_values, config, t)
        server.round = t
        snapshots.push(t, server.item_table.values)

        record = {
            "round": t,
            "participants": len(updates),
            "skipped": skipped,
            "local_bpr": float(
                np.mean([updates[u].loss for u in sorted(updates)]) if updates else 0.0
            ),
            **stats,
        }
        if eval_splits is not None and t % config.eval_every == 0:
            vectors = {u: clients[u].user_embedding for u in clients}
            report = evaluate(
                vectors, server.item_table, eval_splits, config.eval_ks,
                phase="learning", seed=config.seed,
            )
            record["valid_hr"] = {str(k): report.mean_hr[k] for k in report.ks}
            record["valid_ndcg"] = {str(k): report.mean_ndcg[k] for k in report.ks}
        history.append(record)
        if metrics_sink is not None:
            metrics_sink(record)

    snapshots.validate()
    return LearningResult(server, snapshots, clients, history)
