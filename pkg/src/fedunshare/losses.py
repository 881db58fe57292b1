"""Closed-form losses with hand-derived gradients.

Scoring is cosine similarity, so every gradient carries the normalization
terms: d cos(a,b)/da = (b_hat - cos * a_hat) / ||a||. Pairwise ranking uses
the log-sigmoid form, contrastive alignment uses a temperature softmax over
in-batch negatives, and the unlearning objective contrasts each retained
item's aligned pair against frozen pre-withdrawal views of that item.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class LossConfig:
    tau: float = 0.2
    lambda_reg: float = 0.0
    lambda_cl: float = 1.0
    negatives_per_positive: int = 1

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.lambda_reg < 0 or self.lambda_cl < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.negatives_per_positive < 1:
            raise ValueError("need at least one negative per positive")


class GradAccumulator:
    """Sparse map from row key to accumulated d-vector gradient.

    Keys are (kind, id) tuples. Merging iterates keys in sorted order so
    repeated accumulation is bitwise deterministic.
    """

    def __init__(self):
        self._grads: dict[tuple, np.ndarray] = {}

    def add(self, key, vec) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        if key in self._grads:
            self._grads[key] = self._grads[key] + vec
        else:
            self._grads[key] = vec.copy()

    def merge(self, other: "GradAccumulator") -> None:
        for key in sorted(other._grads):
            self.add(key, other._grads[key])

    def scale(self, c: float) -> None:
        for key in self._grads:
            self._grads[key] = self._grads[key] * c

    def get(self, key, dim=None) -> np.ndarray:
        if key in self._grads:
            return self._grads[key]
        return np.zeros(dim, dtype=np.float64)

    def __contains__(self, key) -> bool:
        return key in self._grads

    def __len__(self) -> int:
        return len(self._grads)

    def keys_sorted(self) -> list:
        return sorted(self._grads)

    def items_sorted(self):
        for key in sorted(self._grads):
            yield key, self._grads[key]

    def validate(self) -> None:
        for key, vec in self._grads.items():
            assert np.isfinite(vec).all(), f"non-finite gradient at {key}"


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _checked_norms(rows: np.ndarray, what: str) -> np.ndarray:
    norms = np.linalg.norm(rows, axis=-1)
    if np.any(norms == 0.0):
        raise ValueError(f"zero-norm {what} embedding: cosine undefined")
    return norms


def score(u, v) -> float:
    """Cosine similarity of two nonzero vectors."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu = _checked_norms(u[None, :], "user")[0]
    nv = _checked_norms(v[None, :], "item")[0]
    return float(np.dot(u, v) / (nu * nv))


def _cos_many(anchor: np.ndarray, rows: np.ndarray, what="item"):
    """Cosines of one anchor against many rows, with both partials.

    Returns (cos, d cos/d anchor per row, d cos/d row per row).
    """
    na = _checked_norms(anchor[None, :], "anchor")[0]
    nr = _checked_norms(rows, what)
    a_hat = anchor / na
    r_hat = rows / nr[:, None]
    cos = r_hat @ a_hat
    d_anchor = (r_hat - cos[:, None] * a_hat[None, :]) / na
    d_rows = (a_hat[None, :] - cos[:, None] * r_hat) / nr[:, None]
    return cos, d_anchor, d_rows


def _accumulate_rows(acc: GradAccumulator, kind: str, ids, grads: np.ndarray):
    ids = np.asarray(ids, dtype=np.int64)
    uniq, inv = np.unique(ids, return_inverse=True)
    folded = np.zeros((len(uniq), grads.shape[1]), dtype=np.float64)
    np.add.at(folded, inv, grads)
    for j, i in enumerate(uniq):
        acc.add((kind, int(i)), folded[j])


def _add_l2(acc: GradAccumulator, config, touched: dict) -> float:
    """Sparse l2 penalty over the rows touched in this step."""
    if config.lambda_reg == 0.0:
        return 0.0
    reg = 0.0
    for key in sorted(touched):
        row = touched[key]
        reg += float(np.dot(row, row))
        acc.add(key, 2.0 * config.lambda_reg * row)
    return config.lambda_reg * reg


def bpr_loss_grad(
    user_id: int,
    user_vec: np.ndarray,
    pos_ids,
    neg_ids,
    item_vecs: dict[int, np.ndarray],
    config: LossConfig,
):
    """Pairwise ranking loss over (positive, negative) cosine-score gaps.

    ``neg_ids`` holds negatives_per_positive negatives per positive, grouped
    so pair k uses neg_ids[k*n : (k+1)*n]. Returns the summed loss (plus the
    sparse l2 term when lambda_reg > 0) and gradients for the user row and
    every touched item row.
    """
    pos_ids = [int(i) for i in pos_ids]
    neg_ids = [int(i) for i in neg_ids]
    npp = config.negatives_per_positive
    if len(neg_ids) != npp * len(pos_ids):
        raise ValueError(
            f"expected {npp * len(pos_ids)} negatives, got {len(neg_ids)}"
        )
    if not pos_ids:
        raise ValueError("no positive items")
    user_vec = np.asarray(user_vec, dtype=np.float64)
    d = user_vec.shape[0]
    pos_rows = np.stack([item_vecs[i] for i in pos_ids]).astype(np.float64)
    neg_rows = np.stack([item_vecs[j] for j in neg_ids]).astype(np.float64)

    c_pos, du_pos, dv_pos = _cos_many(user_vec, pos_rows)
    c_neg, du_neg, dv_neg = _cos_many(user_vec, neg_rows)

    pair = np.repeat(np.arange(len(pos_ids)), npp)
    x = c_pos[pair] - c_neg
    loss = float(np.logaddexp(0.0, -x).sum())
    w = _sigmoid(x) - 1.0  # d loss / d x, always in (-1, 0)

    acc = GradAccumulator()
    grad_user = (w[:, None] * du_pos[pair]).sum(axis=0) - (w[:, None] * du_neg).sum(axis=0)
    acc.add(("user", int(user_id)), grad_user)
    pos_grads = np.zeros((len(pos_ids), d))
    np.add.at(pos_grads, pair, w[:, None] * dv_pos[pair])
    _accumulate_rows(acc, "item", pos_ids, pos_grads)
    _accumulate_rows(acc, "item", neg_ids, -w[:, None] * dv_neg)

    touched = {("user", int(user_id)): user_vec}
    for i in set(pos_ids) | set(neg_ids):
        touched[("item", i)] = np.asarray(item_vecs[i], dtype=np.float64)
    loss += _add_l2(acc, config, touched)
    return loss, acc


def infonce_cl_loss_grad(
    local_views: np.ndarray,
    global_views: np.ndarray,
    batch_item_ids,
    config: LossConfig,
):
    """Temperature-softmax alignment of each item's two views.

    Every other item in the batch serves as a negative. Gradients are
    returned for both view sides, keyed ("local", id) and ("global", id);
    the caller decides which side is trainable.
    """
    ids = [int(i) for i in batch_item_ids]
    B = len(ids)
    if B < 2:
        raise ValueError("contrastive batch needs at least 2 items")
    L = np.asarray(local_views, dtype=np.float64)
    G = np.asarray(global_views, dtype=np.float64)
    if L.shape != G.shape or L.shape[0] != B:
        raise ValueError("view shapes must match the batch")
    nl = _checked_norms(L, "local view")
    ng = _checked_norms(G, "global view")
    Lh = L / nl[:, None]
    Gh = G / ng[:, None]
    C = Lh @ Gh.T
    logits = C / config.tau
    lse = np.logaddexp.reduce(logits, axis=1)
    loss = float((lse - np.diag(logits)).sum())

    P = np.exp(logits - lse[:, None])
    W = (P - np.eye(B)) / config.tau  # d loss / d C
    # chain through cosine normalization on both sides
    row_mix = (W * C).sum(axis=1)
    grad_L = (W @ Gh - row_mix[:, None] * Lh) / nl[:, None]
    col_mix = (W * C).sum(axis=0)
    grad_G = (W.T @ Lh - col_mix[:, None] * Gh) / ng[:, None]

    acc = GradAccumulator()
    _accumulate_rows(acc, "local", ids, grad_L)
    _accumulate_rows(acc, "global", ids, grad_G)
    return loss, acc


def contrastive_unlearn_loss_grad(
    local_views: np.ndarray,
    global_views: np.ndarray,
    forgotten_view_sets: dict[int, np.ndarray],
    batch_item_ids,
    config: LossConfig,
):
    """Push retained views together and away from frozen forgotten views.

    Items with recorded forgotten views get a softmax term whose denominator
    holds the aligned pair plus every forgotten view (the aligned pair is
    included to keep the objective bounded); other items get pure alignment
    -cos/tau. Forgotten views receive no gradient.
    """
    ids = [int(i) for i in batch_item_ids]
    if not ids:
        raise ValueError("empty unlearning batch")
    L = np.asarray(local_views, dtype=np.float64)
    G = np.asarray(global_views, dtype=np.float64)
    if L.shape != G.shape or L.shape[0] != len(ids):
        raise ValueError("view shapes must match the batch")

    acc = GradAccumulator()
    loss = 0.0
    tau = config.tau
    for k, item in enumerate(ids):
        forgotten = forgotten_view_sets.get(item)
        if forgotten is not None and len(forgotten):
            rows = np.vstack([G[k][None, :], np.asarray(forgotten, dtype=np.float64)])
            cos, d_loc, d_rows = _cos_many(L[k], rows)
            s = cos / tau
            lse = np.logaddexp.reduce(s)
            loss += float(lse - s[0])
            p = np.exp(s - lse)
            # d term / d s = p - e_0; forgotten rows stay constant
            coeff = (p - np.eye(len(s))[0]) / tau
            acc.add(("local", item), coeff @ d_loc)
            acc.add(("global", item), coeff[0] * d_rows[0])
        else:
            cos, d_loc, d_rows = _cos_many(L[k], G[k][None, :])
            loss += float(-cos[0] / tau)
            acc.add(("local", item), -d_loc[0] / tau)
            acc.add(("global", item), -d_rows[0] / tau)
    return loss, acc


def finite_diff_check(loss_fn, params: dict, epsilon: float = 1e-6) -> float:
    """Central-difference audit of analytic gradients.

    ``loss_fn(params) -> (loss, grads)`` where grads maps the same keys as
    ``params`` (missing key = zero gradient). Returns the worst relative
    error over every coordinate of every parameter.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    loss0, grads = loss_fn(params)
    if not np.isfinite(loss0):
        raise ValueError("loss is not finite at the evaluation point")
    worst = 0.0
    for key in sorted(params):
        x = params[key]
        if isinstance(grads, GradAccumulator):
            analytic = grads.get(key, x.shape)
        else:
            analytic = np.asarray(grads.get(key, np.zeros_like(x)))
        flat = x.reshape(-1)
        aflat = analytic.reshape(-1)
        for j in range(flat.shape[0]):
            orig = flat[j]
            flat[j] = orig + epsilon
            lp, _ = loss_fn(params)
            flat[j] = orig - epsilon
            lm, _ = loss_fn(params)
            flat[j] = orig
            numeric = (lp - lm) / (2.0 * epsilon)
            err = abs(aflat[j] - numeric) / max(abs(aflat[j]), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
