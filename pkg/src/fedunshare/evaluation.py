"""Top-K ranking metrics, forgetting-efficacy measurement, and report IO.

Ranking is a full sort of all items by cosine score against the user vector,
minus the user's train items; sampled-negative protocols are deliberately
out of scope. Ties break toward the lower item id so rankings are total and
reproducible.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .datasets import DatasetSplits, SharingPartition
from .graph import EmbeddingTable


def rank_items(user_vector: np.ndarray, item_table: EmbeddingTable, exclude=()) -> np.ndarray:
    """All item ids ordered by descending cosine score, excluded ids removed."""
    u = np.asarray(user_vector, dtype=np.float64)
    nu = np.linalg.norm(u)
    if nu == 0.0:
        raise ValueError("cannot rank with a zero user vector")
    norms = np.linalg.norm(item_table.values, axis=1)
    if np.any(norms == 0.0):
        bad = int(item_table.ids[int(np.argmax(norms == 0.0))])
        raise ValueError(f"item {bad} has a zero embedding row")
    scores = (item_table.values @ (u / nu)) / norms
    ids = item_table.ids
    if len(exclude):
        keep = ~np.isin(ids, np.fromiter(exclude, dtype=np.int64, count=len(exclude)))
        ids, scores = ids[keep], scores[keep]
    # lexsort: last key is primary, so order by -score then ascending id
    order = np.lexsort((ids, -scores))
    return ids[order]


def hr_ndcg_at_k(ranked: np.ndarray, test_items, k: int) -> tuple[float, float]:
    """Hit ratio and normalized DCG of one ranking at cutoff ``k``.

    HR normalizes by min(k, |test|) so multi-item test sets stay in [0, 1];
    per-hit gain is 1/log2(rank + 1) with 1-indexed ranks.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    test = set(int(i) for i in test_items)
    if not test:
        raise ValueError("test set is empty")
    top = ranked[:k]
    hit_ranks = [r + 1 for r, i in enumerate(top) if int(i) in test]
    denom = min(k, len(test))
    hr = len(hit_ranks) / denom
    dcg = sum(1.0 / math.log2(r + 1) for r in hit_ranks)
    idcg = sum(1.0 / math.log2(r + 1) for r in range(1, denom + 1))
    return hr, dcg / idcg


@dataclass
class MetricsReport:
    ks: list[int]
    phase: str
    seed: int
    config_hash: str
    user_count: int
    mean_hr: dict[int, float]
    mean_ndcg: dict[int, float]
    per_user: dict[int, dict[str, dict[int, float]]] = field(default_factory=dict)

    def validate(self) -> None:
        assert self.phase in ("learning", "unlearning", "retrain")
        for k in self.ks:
            assert 0.0 <= self.mean_hr[k] <= 1.0
            assert 0.0 <= self.mean_ndcg[k] <= 1.0

    def to_dict(self) -> dict:
        return {
            "phase": self.phase,
            "seed": self.seed,
            "config_hash": self.config_hash,
            "user_count": self.user_count,
            "ks": list(self.ks),
            "mean_hr": {str(k): self.mean_hr[k] for k in self.ks},
            "mean_ndcg": {str(k): self.mean_ndcg[k] for k in self.ks},
        }

    def write_json(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def write_csv(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("user,k,hr,ndcg\n")
            for u in sorted(self.per_user):
                for k in self.ks:
                    hr = self.per_user[u]["hr"][k]
                    nd = self.per_user[u]["ndcg"][k]
                    fh.write(f"{u},{k},{hr:.10f},{nd:.10f}\n")


def evaluate(
    user_vectors: dict[int, np.ndarray],
    item_table: EmbeddingTable,
    splits: DatasetSplits,
    ks,
    phase: str = "learning",
    seed: int = 0,
    config_hash: str = "",
) -> MetricsReport:
    """Full-ranking HR@K / NDCG@K over every user with a nonempty test set.

    Each user's train items are excluded from their candidate list. A test
    user without an embedding is an error.
    """
    ks = sorted(int(k) for k in ks)
    train_items = splits.train.per_user_items()
    test_items = splits.test.per_user_items()
    per_user: dict[int, dict[str, dict[int, float]]] = {}
    for u in range(splits.n_users):
        test = test_items[u]
        if len(test) == 0:
            continue
        if u not in user_vectors:
            raise KeyError(f"no embedding for test user {u}")
        ranked = rank_items(user_vectors[u], item_table, exclude=train_items[u])
        hr_k, nd_k = {}, {}
        for k in ks:
            hr, nd = hr_ndcg_at_k(ranked, test, k)
            hr_k[k], nd_k[k] = hr, nd
        per_user[u] = {"hr": hr_k, "ndcg": nd_k}
    count = len(per_user)
    mean_hr = {
        k: (sum(per_user[u]["hr"][k] for u in sorted(per_user)) / count if count else 0.0)
        for k in ks
    }
    mean_ndcg = {
        k: (sum(per_user[u]["ndcg"][k] for u in sorted(per_user)) / count if count else 0.0)
        for k in ks
    }
    report = MetricsReport(ks, phase, seed, config_hash, count, mean_hr, mean_ndcg, per_user)
    report.validate()
    return report


@dataclass
class ModelView:
    """Item table plus per-user vectors, as one rankable model state."""

    item_table: EmbeddingTable
    user_vectors: dict[int, np.ndarray]


@dataclass
class ForgettingReport:
    mean_cos_before: float
    mean_cos_after: float
    mean_rank_shift: float
    withdrawn_items: int
    requesting_users: int

    def to_dict(self) -> dict:
        return {
            "mean_cos_before": self.mean_cos_before,
            "mean_cos_after": self.mean_cos_after,
            "mean_rank_shift": self.mean_rank_shift,
            "withdrawn_items": self.withdrawn_items,
            "requesting_users": self.requesting_users,
        }


def _mean_cosine_to_views(table: EmbeddingTable, forgotten_views: dict) -> float:
    sims = []
    for item in sorted(forgotten_views):
        views = np.asarray(forgotten_views[item], dtype=np.float64)
        row = table.lookup([item], "item")[0]
        nr = np.linalg.norm(row)
        nv = np.linalg.norm(views, axis=1)
        if nr == 0.0 or np.any(nv == 0.0):
            raise ValueError(f"zero vector while scoring item {item}")
        sims.extend((views @ row) / (nr * nv))
    return float(np.mean(sims))


def forgetting_score(
    before: ModelView,
    after: ModelView,
    forgotten_views: dict[int, np.ndarray],
    partition: SharingPartition,
    splits: DatasetSplits,
) -> ForgettingReport:
    """How far withdrawn items moved, in embedding space and in rankings.

    Cosine part: mean similarity of each withdrawn item's current row to its
    recorded pre-withdrawal views. Rank part: mean change of the withdrawn
    items' positions in their requesting users' lists (positive = demoted);
    the exclusion set is the user's remaining train items, so withdrawn
    items stay rankable.
    """
    if not forgotten_views:
        raise ValueError("no withdrawn items to score")
    assert np.array_equal(before.item_table.ids, after.item_table.ids), \
        "models must share an item id space"
    cos_before = _mean_cosine_to_views(before.item_table, forgotten_views)
    cos_after = _mean_cosine_to_views(after.item_table, forgotten_views)

    train_items = splits.train.per_user_items()
    shifts = []
    requesting = [u for u in range(partition.n_users) if len(partition.unlearn_sets[u])]
    for u in requesting:
        withdrawn = partition.unlearn_sets[u]
        exclude = np.setdiff1d(train_items[u], withdrawn)
        rank_b = rank_items(before.user_vectors[u], before.item_table, exclude)
        rank_a = rank_items(after.user_vectors[u], after.item_table, exclude)
        pos_b = {int(i): r + 1 for r, i in enumerate(rank_b)}
        pos_a = {int(i): r + 1 for r, i in enumerate(rank_a)}
        for i in withdrawn:
            shifts.append(pos_a[int(i)] - pos_b[int(i)])
    return ForgettingReport(
        cos_before,
        cos_after,
        float(np.mean(shifts)) if shifts else 0.0,
        len(forgotten_views),
        len(requesting),
    )
