"""Interaction ingestion, filtering, holdout splitting, and the per-user
sharing partition (kept-local / shared / later-withdrawn train items)."""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .seeding import rng_for


class ParseError(ValueError):
    """Raised for malformed interaction files; carries the line number."""


def _unique_sorted_pairs(pairs) -> np.ndarray:
    arr = np.asarray(sorted(set(map(tuple, pairs))), dtype=np.int64)
    return arr.reshape(-1, 2)


@dataclass
class InteractionTable:
    """Deduplicated implicit-feedback pairs with dense integer ids.

    ``pairs`` is a (n, 2) int64 array of (user, item), lexicographically
    sorted and unique. ``user_raw``/``item_raw`` map dense index -> raw id
    string; the inverse maps are derived.
    """

    n_users: int
    n_items: int
    pairs: np.ndarray
    user_raw: list[str]
    item_raw: list[str]
    user_index: dict[str, int] = field(repr=False, default=None)
    item_index: dict[str, int] = field(repr=False, default=None)

    def __post_init__(self):
        if self.user_index is None:
            self.user_index = {r: i for i, r in enumerate(self.user_raw)}
        if self.item_index is None:
            self.item_index = {r: i for i, r in enumerate(self.item_raw)}

    @property
    def n_pairs(self) -> int:
        return len(self.pairs)

    def items_of(self, user: int) -> np.ndarray:
        """Sorted item ids interacted by ``user``."""
        sel = self.pairs[:, 0] == user
        return np.sort(self.pairs[sel, 1])

    def per_user_items(self) -> list[np.ndarray]:
        """Sorted item array for every user index (one pass)."""
        buckets: list[list[int]] = [[] for _ in range(self.n_users)]
        for u, i in self.pairs:
            buckets[int(u)].append(int(i))
        return [np.array(sorted(b), dtype=np.int64) for b in buckets]

    def user_degrees(self) -> np.ndarray:
        deg = np.zeros(self.n_users, dtype=np.int64)
        np.add.at(deg, self.pairs[:, 0], 1)
        return deg

    def validate(self, require_user_coverage: bool = True) -> None:
        assert self.pairs.ndim == 2 and self.pairs.shape[1] == 2
        if len(self.pairs):
            assert self.pairs[:, 0].min() >= 0 and self.pairs[:, 0].max() < self.n_users
            assert self.pairs[:, 1].min() >= 0 and self.pairs[:, 1].max() < self.n_items
        assert len(np.unique(self.pairs, axis=0)) == len(self.pairs), "duplicate pairs"
        if require_user_coverage:
            assert (self.user_degrees() > 0).all(), "user with no interactions"

    def replace_pairs(self, pairs: np.ndarray) -> "InteractionTable":
        """Same id space, different pair set (used for holdout splits)."""
        return InteractionTable(
            self.n_users, self.n_items, _unique_sorted_pairs(pairs),
            self.user_raw, self.item_raw, self.user_index, self.item_index,
        )


@dataclass
class DatasetSplits:
    """Train / valid / test tables over one shared id space."""

    train: InteractionTable
    valid: InteractionTable
    test: InteractionTable

    def validate(self) -> None:
        tr = set(map(tuple, self.train.pairs))
        va = set(map(tuple, self.valid.pairs))
        te = set(map(tuple, self.test.pairs))
        assert not (tr & va) and not (tr & te) and not (va & te), "splits overlap"

    @property
    def n_users(self) -> int:
        return self.train.n_users

    @property
    def n_items(self) -> int:
        return self.train.n_items


@dataclass
class SharingPartition:
    """Per-user split of train items into kept-local, shared, and withdrawn.

    For every user: local | share partitions the train items, and the
    withdrawal set is a subset of the shared one. Sets are kept as sorted
    int64 arrays so that serialization and iteration are deterministic.
    """

    local_sets: list[np.ndarray]
    share_sets: list[np.ndarray]
    unlearn_sets: list[np.ndarray]
    groups: list[str]

    @property
    def n_users(self) -> int:
        return len(self.groups)

    def sharing_users(self) -> list[int]:
        return [u for u in range(self.n_users) if len(self.share_sets[u])]

    def shared_edges(self) -> set[tuple[int, int]]:
        return {(u, int(i)) for u in range(self.n_users) for i in self.share_sets[u]}

    def unlearn_edges(self) -> set[tuple[int, int]]:
        return {(u, int(i)) for u in range(self.n_users) for i in self.unlearn_sets[u]}

    def remaining_share_sets(self) -> list[np.ndarray]:
        """share \\ unlearn per user (what stays on the server)."""
        return [
            np.setdiff1d(s, un) for s, un in zip(self.share_sets, self.unlearn_sets)
        ]

    def copy(self) -> "SharingPartition":
        return SharingPartition(
            [s.copy() for s in self.local_sets],
            [s.copy() for s in self.share_sets],
            [s.copy() for s in self.unlearn_sets],
            list(self.groups),
        )

    def validate(self, splits: DatasetSplits) -> None:
        per_user = splits.train.per_user_items()
        for u in range(self.n_users):
            loc, sh, un = self.local_sets[u], self.share_sets[u], self.unlearn_sets[u]
            train_u = per_user[u]
            merged = np.union1d(loc, sh)
            assert np.array_equal(merged, train_u), f"user {u}: local+share != train"
            assert len(np.intersect1d(loc, sh)) == 0, f"user {u}: local/share overlap"
            assert np.isin(un, sh).all(), f"user {u}: unlearn set not within share set"
            if self.groups[u] == "none":
                assert len(sh) == 0
            if self.groups[u] == "full":
                assert len(loc) == 0


def load_interactions(path: str, delimiter: str = "\t") -> InteractionTable:
    """Read one (user, item[, rating, timestamp]) record per line.

    Ratings/timestamps are dropped: presence of a record counts as an
    implicit interaction. Dense ids follow first appearance; duplicate
    pairs collapse.
    """
    if not os.path.exists(path):
        raise FileNotFoundError(f"interaction file not found: {path}")
    user_index: dict[str, int] = {}
    item_index: dict[str, int] = {}
    user_raw: list[str] = []
    item_raw: list[str] = []
    pairs: set[tuple[int, int]] = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            fields = line.split(delimiter)
            if len(fields) < 2 or not fields[0] or not fields[1]:
                raise ParseError(
                    f"{path}:{lineno}: expected at least user{delimiter!r}item, got {line!r}"
                )
            ru, ri = fields[0], fields[1]
            if ru not in user_index:
                user_index[ru] = len(user_raw)
                user_raw.append(ru)
            if ri not in item_index:
                item_index[ri] = len(item_raw)
                item_raw.append(ri)
            pairs.add((user_index[ru], item_index[ri]))
    if not pairs:
        raise ParseError(f"{path}: no interaction records")
    table = InteractionTable(
        len(user_raw), len(item_raw), _unique_sorted_pairs(pairs),
        user_raw, item_raw, user_index, item_index,
    )
    table.validate()
    return table


def filter_min_interactions(table: InteractionTable, k: int) -> InteractionTable:
    """Drop users with fewer than ``k`` interactions, then re-densify ids.

    Runs to fixpoint; since removing a user never lowers another user's
    degree, one pass suffices, but the loop keeps the contract explicit.
    Items are never degree-filtered; they drop only when orphaned.
    """
    if k < 0:
        raise ValueError("k must be >= 0")
    pairs = table.pairs
    keep_users = np.ones(table.n_users, dtype=bool)
    while True:
        deg = np.zeros(table.n_users, dtype=np.int64)
        np.add.at(deg, pairs[:, 0], 1)
        drop = keep_users & (deg < k)
        if not drop.any():
            break
        keep_users &= ~drop
        pairs = pairs[keep_users[pairs[:, 0]]]
    if len(pairs) == 0:
        raise ValueError(f"filtering with k={k} removed every interaction")

    old_users = np.flatnonzero(keep_users)
    old_items = np.unique(pairs[:, 1])
    user_remap = {int(o): n for n, o in enumerate(old_users)}
    item_remap = {int(o): n for n, o in enumerate(old_items)}
    new_pairs = np.array(
        [(user_remap[int(u)], item_remap[int(i)]) for u, i in pairs], dtype=np.int64
    )
    out = InteractionTable(
        len(old_users), len(old_items), _unique_sorted_pairs(new_pairs),
        [table.user_raw[int(o)] for o in old_users],
        [table.item_raw[int(o)] for o in old_items],
    )
    out.validate()
    return out


def _validate_ratios(ratios, what: str) -> tuple[float, ...]:
    r = tuple(float(x) for x in ratios)
    if any(x < 0 for x in r):
        raise ValueError(f"{what} must be nonnegative: {r}")
    if abs(sum(r) - 1.0) > 1e-9:
        raise ValueError(f"{what} must sum to 1: {r}")
    return r


def split_holdout(
    table: InteractionTable, ratios: tuple[float, float, float], seed: int
) -> DatasetSplits:
    """Per-user shuffled holdout split; every user keeps >= 1 train pair."""
    r_train, r_valid, r_test = _validate_ratios(ratios, "split ratios")
    if r_train <= 0:
        raise ValueError("train ratio must be positive")
    per_user = table.per_user_items()
    train_p, valid_p, test_p = [], [], []
    for u in range(table.n_users):
        items = per_user[u]
        n = len(items)
        if n == 0:
            continue
        order = rng_for(seed, "split", u).permutation(n)
        shuffled = items[order]
        n_valid = int(math.floor(n * r_valid))
        n_test = int(math.floor(n * r_test))
        # keep at least one train pair; shrink test first, then valid
        while n - n_valid - n_test < 1:
            if n_test > 0:
                n_test -= 1
            elif n_valid > 0:
                n_valid -= 1
            else:
                break
        n_train = n - n_valid - n_test
        train_p.extend((u, int(i)) for i in shuffled[:n_train])
        valid_p.extend((u, int(i)) for i in shuffled[n_train:n_train + n_valid])
        test_p.extend((u, int(i)) for i in shuffled[n_train + n_valid:])
    splits = DatasetSplits(
        table.replace_pairs(np.array(train_p, dtype=np.int64)),
        table.replace_pairs(np.array(valid_p, dtype=np.int64).reshape(-1, 2)),
        table.replace_pairs(np.array(test_p, dtype=np.int64).reshape(-1, 2)),
    )
    splits.validate()
    return splits


def apportion(n: int, ratios) -> list[int]:
    """Largest-remainder integer split of ``n`` by ``ratios`` (sums to n)."""
    quotas = [n * r for r in ratios]
    counts = [int(math.floor(q)) for q in quotas]
    remainder = n - sum(counts)
    by_frac = sorted(
        range(len(ratios)), key=lambda j: (-(quotas[j] - counts[j]), j)
    )
    for j in by_frac[:remainder]:
        counts[j] += 1
    return counts


def assign_sharing(
    splits: DatasetSplits,
    group_ratios: tuple[float, float, float],
    partial_ratio: float,
    seed: int,
) -> SharingPartition:
    """Assign users to full / partial / none sharing groups.

    Full users share every train item; partial users share a seeded
    random ceil(partial_ratio * |train|) subset; none users share nothing.
    """
    ratios = _validate_ratios(group_ratios, "group ratios")
    if not 0.0 <= partial_ratio <= 1.0:
        raise ValueError("partial_ratio must lie in [0, 1]")
    n = splits.n_users
    per_user = splits.train.per_user_items()
    order = rng_for(seed, "groups").permutation(n)
    n_full, n_partial, _ = apportion(n, ratios)
    group_of = {}
    for pos, u in enumerate(order):
        if pos < n_full:
            group_of[int(u)] = "full"
        elif pos < n_full + n_partial:
            group_of[int(u)] = "partial"
        else:
            group_of[int(u)] = "none"

    local_sets, share_sets, groups = [], [], []
    empty = np.array([], dtype=np.int64)
    for u in range(n):
        train_u = per_user[u]
        g = group_of[u]
        if g == "full":
            share = train_u.copy()
        elif g == "partial":
            k = int(math.ceil(partial_ratio * len(train_u)))
            picked = rng_for(seed, "share", u).choice(train_u, size=k, replace=False)
            share = np.sort(picked.astype(np.int64))
        else:
            share = empty.copy()
        local_sets.append(np.setdiff1d(train_u, share))
        share_sets.append(share)
        groups.append(g)
    partition = SharingPartition(
        local_sets, share_sets, [empty.copy() for _ in range(n)], groups
    )
    partition.validate(splits)
    return partition


def issue_unshare_requests(
    partition: SharingPartition, unshare_ratio: float, seed: int
) -> SharingPartition:
    """Select a seeded fraction of sharing users; each withdraws its whole
    shared set. Returns a new partition; the input is untouched."""
    if not 0.0 <= unshare_ratio <= 1.0:
        raise ValueError("unshare_ratio must lie in [0, 1]")
    sharing = partition.sharing_users()
    if not sharing:
        raise ValueError("no sharing users: nothing can be unshared")
    k = int(math.floor(unshare_ratio * len(sharing) + 0.5))
    order = rng_for(seed, "unshare").permutation(len(sharing))
    selected = {sharing[int(j)] for j in order[:k]}
    out = partition.copy()
    for u in range(out.n_users):
        if u in selected:
            out.unlearn_sets[u] = out.share_sets[u].copy()
        else:
            out.unlearn_sets[u] = np.array([], dtype=np.int64)
    return out


# ---------------------------------------------------------------------------
# On-disk form: newline-delimited text files plus a JSON manifest. Raw ids
# are written in dense order, so users.txt/items.txt double as the id maps.
# ---------------------------------------------------------------------------

def _write_lines(path: str, lines) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for line in lines:
            fh.write(line + "\n")


def _pair_lines(table: InteractionTable, pairs: np.ndarray):
    for u, i in pairs:
        yield f"{table.user_raw[int(u)]}\t{table.item_raw[int(i)]}"


def _set_lines(table: InteractionTable, sets: list[np.ndarray]):
    for u, items in enumerate(sets):
        for i in items:
            yield f"{table.user_raw[u]}\t{table.item_raw[int(i)]}"


def write_prepared(
    out_dir: str,
    splits: DatasetSplits,
    partition: SharingPartition,
    manifest_extra: dict | None = None,
) -> dict:
    """Materialize splits + partition as text files and a JSON manifest."""
    os.makedirs(out_dir, exist_ok=True)
    table = splits.train
    _write_lines(os.path.join(out_dir, "users.txt"), table.user_raw)
    _write_lines(os.path.join(out_dir, "items.txt"), table.item_raw)
    for name, part in (("train", splits.train), ("valid", splits.valid), ("test", splits.test)):
        _write_lines(os.path.join(out_dir, f"{name}.txt"), _pair_lines(table, part.pairs))
    for name, sets in (
        ("local", partition.local_sets),
        ("share", partition.share_sets),
        ("unlearn", partition.unlearn_sets),
    ):
        _write_lines(os.path.join(out_dir, f"{name}.txt"), _set_lines(table, sets))
    _write_lines(
        os.path.join(out_dir, "groups.txt"),
        (f"{table.user_raw[u]}\t{partition.groups[u]}" for u in range(partition.n_users)),
    )
    manifest = {
        "users": splits.n_users,
        "items": splits.n_items,
        "pairs": {
            "train": splits.train.n_pairs,
            "valid": splits.valid.n_pairs,
            "test": splits.test.n_pairs,
        },
        "sharing_users": len(partition.sharing_users()),
        "shared_pairs": int(sum(len(s) for s in partition.share_sets)),
        "unlearn_pairs": int(sum(len(s) for s in partition.unlearn_sets)),
        "groups": {
            g: int(sum(1 for x in partition.groups if x == g))
            for g in ("full", "partial", "none")
        },
    }
    manifest.update(manifest_extra or {})
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def _read_pairs(path: str, user_index, item_index) -> np.ndarray:
    pairs = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            try:
                ru, ri = line.split("\t")
                pairs.append((user_index[ru], item_index[ri]))
            except (ValueError, KeyError) as exc:
                raise ParseError(f"{path}:{lineno}: bad record {line!r}") from exc
    return np.array(pairs, dtype=np.int64).reshape(-1, 2)


def load_prepared(out_dir: str) -> tuple[DatasetSplits, SharingPartition, dict]:
    """Inverse of :func:`write_prepared`."""
    manifest_path = os.path.join(out_dir, "manifest.json")
    if not os.path.exists(manifest_path):
        raise FileNotFoundError(f"no manifest.json under {out_dir}")
    with open(manifest_path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    with open(os.path.join(out_dir, "users.txt"), encoding="utf-8") as fh:
        user_raw = [line.rstrip("\n") for line in fh]
    with open(os.path.join(out_dir, "items.txt"), encoding="utf-8") as fh:
        item_raw = [line.rstrip("\n") for line in fh]
    user_index = {r: i for i, r in enumerate(user_raw)}
    item_index = {r: i for i, r in enumerate(item_raw)}
    n_users, n_items = len(user_raw), len(item_raw)

    def table_from(path):
        pairs = _read_pairs(path, user_index, item_index)
        return InteractionTable(n_users, n_items, _unique_sorted_pairs(pairs),
                                user_raw, item_raw, user_index, item_index)

    splits = DatasetSplits(
        table_from(os.path.join(out_dir, "train.txt")),
        table_from(os.path.join(out_dir, "valid.txt")),
        table_from(os.path.join(out_dir, "test.txt")),
    )

    def sets_from(path):
        pairs = _read_pairs(path, user_index, item_index)
        sets = [[] for _ in range(n_users)]
        for u, i in pairs:
            sets[int(u)].append(int(i))
        return [np.array(sorted(s), dtype=np.int64) for s in sets]

    groups = [""] * n_users
    with open(os.path.join(out_dir, "groups.txt"), encoding="utf-8") as fh:
        for line in fh:
            ru, g = line.rstrip("\n").split("\t")
            groups[user_index[ru]] = g
    partition = SharingPartition(
        sets_from(os.path.join(out_dir, "local.txt")),
        sets_from(os.path.join(out_dir, "share.txt")),
        sets_from(os.path.join(out_dir, "unlearn.txt")),
        groups,
    )
    partition.validate(splits)
    return splits, partition, manifest
