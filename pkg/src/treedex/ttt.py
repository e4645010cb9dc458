"""Mining <user, index-node> fine-tuning pairs from a served hierarchy.

A node qualifies for a user when a large enough fraction of its children is
already in the user's interest set at the level below; interest sets build
recursively from the user's train positives. Depth is capped below the top
level, which is shared by everyone and carries no signal.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .data import InteractionDataset
from .metrics import evaluate_retrieval
from .model import TwoTowerModel, finetune_with_pairs
from .tree import HierarchicalIndex

log = logging.getLogger(__name__)


@dataclass
class TttConfig:
    depth: int = 1  # intermediate levels to traverse back from the items
    thresholds: list[float] = field(default_factory=lambda: [0.8])  # level 2 first
    use_retrieved_interests: bool = False

    def validate(self) -> None:
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if len(self.thresholds) != self.depth:
            raise ValueError(f"need {self.depth} thresholds, got {len(self.thresholds)}")
        if any(not 0.0 <= t <= 1.0 for t in self.thresholds):
            raise ValueError("thresholds must lie in [0, 1]")


@dataclass
class TttPairSet:
    users: np.ndarray
    levels: np.ndarray
    nodes: np.ndarray
    rates: np.ndarray

    def __len__(self) -> int:
        return len(self.users)

    def to_tsv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for u, lv, nd, r in zip(self.users, self.levels, self.nodes, self.rates):
                fh.write(f"{u}\t{lv}\t{nd}\t{r:.6f}\n")

    def key_set(self) -> set[tuple[int, int, int]]:
        return set(zip(self.users.tolist(), self.levels.tolist(), self.nodes.tolist()))


def _child_sizes(index: HierarchicalIndex, level: int) -> np.ndarray:
    return np.array([len(c) for c in index.children[level]], dtype=np.int64)


def _level_rates(index: HierarchicalIndex, members_below: np.ndarray, level: int) -> np.ndarray:
    """Per-node fraction of children contained in `members_below` (ids at level-1)."""
    k = len(index.active[level])
    sizes = _child_sizes(index, level)
    counts = np.zeros(k, dtype=np.int64)
    if len(members_below):
        parents = index.parent[level - 1][members_below]
        parents = parents[parents >= 0]
        counts = np.bincount(parents, minlength=k)
    rates = np.zeros(k, dtype=np.float64)
    nonempty = sizes > 0
    rates[nonempty] = counts[nonempty] / sizes[nonempty]
    return rates


def interest_rate(
    user: int,
    node: int,
    level: int,
    interest_below,
    index: HierarchicalIndex,
) -> float:
    """|interest(level-1) ∩ children(node)| / |children(node)|; 0 for childless nodes."""
    children = index.children[level][node]
    if len(children) == 0:
        log.info("node %d at level %d has no children; interest rate 0 for user %d", node, level, user)
        return 0.0
    members = np.asarray(sorted(interest_below), dtype=np.int64)
    hit = np.isin(children, members).sum()
    return float(hit / len(children))


def interest_set(
    dataset: InteractionDataset,
    index: HierarchicalIndex,
    user: int,
    level: int,
    cfg: TttConfig,
) -> set[int]:
    """Entities at `level` the user is interested in; level 1 = train positives."""
    if not 1 <= level <= index.num_levels:
        raise ValueError(f"level must be in [1, {index.num_levels}]")
    members = dataset.train.get(user, np.zeros(0, dtype=np.int64))
    if level == 1:
        return set(int(i) for i in members)
    for lv in range(2, level + 1):
        rates = _level_rates(index, members, lv)
        members = np.flatnonzero(rates >= cfg.thresholds[lv - 2])
    return set(int(i) for i in members)


def extract_pairs(dataset: InteractionDataset, index: HierarchicalIndex, cfg: TttConfig) -> TttPairSet:
    """Emit qualifying (user, level, node) pairs for levels 2..depth+1.

    Deterministic order (user, level, node). The traversal depth must leave
    the top level untouched: depth <= N - 2.
    """
    cfg.validate()
    if cfg.depth > index.num_levels - 2:
        raise ValueError(
            f"depth {cfg.depth} exceeds N-2 = {index.num_levels - 2}; the top level is never eligible"
        )
    users, levels, nodes, rates = [], [], [], []
    for u in sorted(dataset.train):
        members = dataset.train[u]
        for level in range(2, cfg.depth + 2):
            lvl_rates = _level_rates(index, members, level)
            threshold = cfg.thresholds[level - 2]
            qualifying = np.flatnonzero(lvl_rates >= threshold)
            qualifying = qualifying[_child_sizes(index, level)[qualifying] > 0]
            for node in qualifying:
                users.append(u)
                levels.append(level)
                nodes.append(int(node))
                rates.append(lvl_rates[node])
            members = qualifying
    return TttPairSet(
        users=np.asarray(users, dtype=np.int64),
        levels=np.asarray(levels, dtype=np.int64),
        nodes=np.asarray(nodes, dtype=np.int64),
        rates=np.asarray(rates, dtype=np.float64),
    )


def pair_node_embeddings(index: HierarchicalIndex, pairs: TttPairSet) -> np.ndarray:
    """Scoring embedding of each pair's node, aligned with the pair arrays."""
    out = np.zeros((len(pairs), index.dim), dtype=np.float64)
    for level in np.unique(pairs.levels):
        mask = pairs.levels == level
        out[mask] = index.embeddings[int(level)][pairs.nodes[mask]].astype(np.float64)
    return out


def run_ttt(
    model: TwoTowerModel,
    dataset: InteractionDataset,
    index: HierarchicalIndex,
    cfg: TttConfig,
    finetune_epochs: int = 5,
    finetune_lr: float = 1e-3,
    k: int = 20,
    n_threads: int = 1,
) -> dict:
    """Extract pairs, fine-tune the user side, and report metrics before/after.

    Mutates the model (that is the point); never touches the index.
    """
    before = evaluate_retrieval(model, dataset, k, mode="flat", n_threads=n_threads)
    pairs = extract_pairs(dataset, index, cfg)
    if len(pairs) == 0:
        log.warning("no qualifying pairs; model left unchanged")
        return {
            "pairs_extracted": 0,
            "recall_before": before.recall_at_k,
            "recall_after": before.recall_at_k,
            "ndcg_before": before.ndcg_at_k,
            "ndcg_after": before.ndcg_at_k,
        }
    node_embs = pair_node_embeddings(index, pairs)
    finetune_with_pairs(model, pairs.users, node_embs, epochs=finetune_epochs, lr=finetune_lr)
    after = evaluate_retrieval(model, dataset, k, mode="flat", n_threads=n_threads)
    return {
        "pairs_extracted": len(pairs),
        "recall_before": before.recall_at_k,
        "recall_after": after.recall_at_k,
        "ndcg_before": before.ndcg_at_k,
        "ndcg_after": after.ndcg_at_k,
    }
