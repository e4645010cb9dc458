"""Retrieval evaluation: Recall@K, NDCG@K, normalized entropy."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)

_CHUNK = 512  # users per evaluation chunk; fixed so threading cannot change results


@dataclass
class EvalReport:
    recall_at_k: float
    ndcg_at_k: float
    k: int
    mode: str
    users_evaluated: int
    mean_scoring_calls: float | None = None
    ne: float | None = None
    per_user: dict[int, tuple[float, float]] | None = None

    def to_dict(self) -> dict:
        out = {
            "recall_at_k": self.recall_at_k,
            "ndcg_at_k": self.ndcg_at_k,
            "k": self.k,
            "mode": self.mode,
            "users_evaluated": self.users_evaluated,
        }
        if self.mean_scoring_calls is not None:
            out["mean_scoring_calls"] = self.mean_scoring_calls
        if self.ne is not None:
            out["ne"] = self.ne
        return out


def recall_at_k(relevant, recommended, k: int) -> float:
    """Fraction of the relevant set found in the first k recommendations."""
    rel = set(int(i) for i in relevant)
    if not rel:
        raise ValueError("relevant set must be non-empty")
    top = [int(i) for i in list(recommended)[:k]]
    return len(rel.intersection(top)) / len(rel)


def ndcg_at_k(relevant, recommended, k: int) -> float:
    """Binary-gain DCG at 1-based positions, normalized by the ideal prefix."""
    rel = set(int(i) for i in relevant)
    if not rel:
        raise ValueError("relevant set must be non-empty")
    top = [int(i) for i in list(recommended)[:k]]
    dcg = sum(1.0 / np.log2(pos + 1) for pos, item in enumerate(top, start=1) if item in rel)
    ideal = sum(1.0 / np.log2(pos + 1) for pos in range(1, min(k, len(rel)) + 1))
    return float(dcg / ideal)


def normalized_entropy(labels, probabilities) -> float:
    """Mean log loss over {-1,+1} labels divided by the background-rate entropy.

    Equals 1.0 for the constant predictor at the empirical positive rate;
    undefined (raises) when only one class is present.
    """
    y = np.asarray(labels, dtype=np.float64)
    p = np.asarray(probabilities, dtype=np.float64)
    if y.shape != p.shape or y.ndim != 1 or len(y) == 0:
        raise ValueError("labels and probabilities must be equal-length 1-D arrays")
    if not np.all(np.isin(y, (-1.0, 1.0))):
        raise ValueError("labels must be -1 or +1")
    if np.any(p <= 0.0) or np.any(p >= 1.0):
        raise ValueError("probabilities must lie strictly inside (0, 1)")
    rate = float((y > 0).mean())
    if rate in (0.0, 1.0):
        raise ValueError("undefined NE: labels contain a single class")
    num = -np.mean((1 + y) / 2 * np.log(p) + (1 - y) / 2 * np.log(1 - p))
    den = -(rate * np.log(rate) + (1 - rate) * np.log(1 - rate))
    return float(num / den)


def exact_topk(scores: np.ndarray, k: int) -> np.ndarray:
    """Ids of the k best scores, ordered by descending score then ascending id."""
    ids = np.arange(len(scores))
    order = np.lexsort((ids, -scores))
    return order[:k]


def _fast_topk(scores: np.ndarray, k: int, pad: int = 32) -> np.ndarray:
    """exact_topk via argpartition; exact unless >pad scores tie exactly."""
    n = len(scores)
    if n <= k + pad:
        return exact_topk(scores, k)
    part = np.argpartition(-scores, k + pad)[: k + pad]
    order = np.lexsort((part, -scores[part]))
    return part[order[:k]]


def _block_topk(score_block: np.ndarray, k: int, pad: int = 32) -> np.ndarray:
    """Row-wise _fast_topk over a (rows, n) block; returns (rows, k) ids."""
    rows, n = score_block.shape
    if n <= k + pad:
        cand = np.tile(np.arange(n), (rows, 1))
    else:
        cand = np.argpartition(-score_block, k + pad, axis=1)[:, : k + pad]
    out = np.empty((rows, k), dtype=np.int64)
    row_idx = np.arange(rows)[:, None]
    cand_scores = score_block[row_idx, cand]
    for r in range(rows):
        order = np.lexsort((cand[r], -cand_scores[r]))
        out[r] = cand[r][order[:k]]
    return out


def evaluate_retrieval(
    scorer,
    dataset,
    k: int,
    mode: str = "flat",
    index=None,
    beam_width: int | None = None,
    n_threads: int = 1,
    collect_per_user: bool = False,
    exhaustive_topk: bool = False,
) -> EvalReport:
    """Mean Recall@K / NDCG@K over test users, train positives excluded.

    `scorer` is a model (user/item embedding provider) or, in flat mode, a
    callable user_id -> score vector over the corpus. Beam mode needs `index`
    and `beam_width` and also reports mean scoring calls. Users are processed
    in fixed-size chunks whose results merge in a fixed order, so the thread
    count never changes the output.
    """
    users = sorted(u for u, items in dataset.test.items() if len(items) > 0)
    skipped = len(dataset.test) - len(users)
    if skipped:
        log.info("skipping %d users with empty test sets", skipped)
    if not users:
        raise ValueError("test set is empty")
    if mode not in ("flat", "beam"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "beam" and (index is None or beam_width is None):
        raise ValueError("beam mode requires index and beam_width")

    users_arr = np.asarray(users, dtype=np.int64)
    chunks = [users_arr[s : s + _CHUNK] for s in range(0, len(users_arr), _CHUNK)]

    item_matrix = None
    if mode == "flat" and not callable(scorer):
        item_matrix = scorer.all_item_embeddings().astype(np.float64)

    def eval_chunk(chunk: np.ndarray):
        recalls, ndcgs, calls, per_user = [], [], [], {}
        if mode == "flat":
            if callable(scorer):
                rows = [np.asarray(scorer(int(u)), dtype=np.float64) for u in chunk]
                score_block = np.stack(rows) if rows else np.zeros((0, dataset.num_items))
            else:
                score_block = scorer.user_embedding(chunk).astype(np.float64) @ item_matrix.T
            for row, u in zip(score_block, chunk):
                row[dataset.train[int(u)]] = -np.inf
            if exhaustive_topk:
                tops = [exact_topk(row, k) for row in score_block]
            else:
                tops = _block_topk(score_block, k)
            for top, u in zip(tops, chunk):
                u = int(u)
                r = recall_at_k(dataset.test[u], top, k)
                n = ndcg_at_k(dataset.test[u], top, k)
                recalls.append(r)
                ndcgs.append(n)
                if collect_per_user:
                    per_user[u] = (r, n)
        else:
            u_vecs = scorer.user_embedding(chunk).astype(np.float64)
            for vec, u in zip(u_vecs, chunk):
                u = int(u)
                res = index.beam_search(vec, beam_width, k, exclude=dataset.train[u])
                r = recall_at_k(dataset.test[u], res.items, k)
                n = ndcg_at_k(dataset.test[u], res.items, k)
                recalls.append(r)
                ndcgs.append(n)
                calls.append(res.scoring_calls)
                if collect_per_user:
                    per_user[u] = (r, n)
        return (float(np.sum(recalls)), float(np.sum(ndcgs)), len(recalls),
                float(np.sum(calls)) if calls else 0.0, per_user)

    if n_threads > 1:
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            results = list(pool.map(eval_chunk, chunks))
    else:
        results = [eval_chunk(c) for c in chunks]

    total_r = total_n = total_c = 0.0
    count = 0
    per_user_all: dict[int, tuple[float, float]] = {}
    for r, n, c, calls, pu in results:
        total_r += r
        total_n += n
        count += c
        total_c += calls
        per_user_all.update(pu)

    return EvalReport(
        recall_at_k=total_r / count,
        ndcg_at_k=total_n / count,
        k=k,
        mode=mode,
        users_evaluated=count,
        mean_scoring_calls=(total_c / count) if mode == "beam" else None,
        per_user=per_user_all if collect_per_user else None,
    )


def ne_on_test_pairs(model, dataset, seed: int = 0, negatives_per_positive: int = 1) -> float:
    """Normalized entropy of model probabilities over test positives plus an
    equal batch of uniformly sampled non-train items per user."""
    rng = np.random.default_rng(seed)
    users, items, labels = [], [], []
    for u in sorted(dataset.test):
        pos = dataset.test[u]
        if len(pos) == 0:
            continue
        users.extend([u] * len(pos))
        items.extend(pos.tolist())
        labels.extend([1.0] * len(pos))
        forbidden = set(dataset.train[u].tolist())
        need = len(pos) * negatives_per_positive
        negs = []
        while len(negs) < need:
            cand = int(rng.integers(0, dataset.num_items))
            if cand not in forbidden:
                negs.append(cand)
        users.extend([u] * need)
        items.extend(negs)
        labels.extend([-1.0] * need)
    logits = model.logits(np.asarray(users), np.asarray(items))
    p = np.clip(1.0 / (1.0 + np.exp(-logits)), 1e-12, 1 - 1e-12)
    return normalized_entropy(np.asarray(labels), p)
