"""Servable hierarchical index: assembly from finalized codebooks, beam-search
retrieval with per-query scoring-call accounting, and a binary container."""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field

import numpy as np

from .codebooks import LevelCodebook

log = logging.getLogger(__name__)

INDEX_MAGIC = b"HILL"
INDEX_VERSION = 1
_SENTINEL = 0xFFFFFFFF


@dataclass
class RetrievalResult:
    items: np.ndarray  # ranked item ids
    scores: np.ndarray
    scoring_calls: int
    path_trace: list[list[tuple[int, int]]] = field(default_factory=list)  # (level, id) root->item


@dataclass
class CostReport:
    per_level_calls: dict[int, int]
    total_calls: int
    weighted_cost: float
    flat_calls: int
    flat_cost: float
    exact: bool  # True when derived from a concrete query


class HierarchicalIndex:
    """Immutable after assembly/load; beam_search is pure and thread-safe.

    Level 1 holds the items; levels 2..N hold index nodes. A node's scoring
    embedding is the full embedding of its representative item. Nodes without
    children are inactive: excluded from search and stripped of their
    representative.
    """

    def __init__(self, num_levels: int, dim: int):
        self.num_levels = num_levels
        self.dim = dim
        self.embeddings: dict[int, np.ndarray] = {}
        self.representative: dict[int, np.ndarray] = {}
        self.parent: dict[int, np.ndarray] = {}
        self.children: dict[int, list[np.ndarray]] = {}
        self.active: dict[int, np.ndarray] = {}

    @property
    def num_items(self) -> int:
        return len(self.embeddings.get(1, ()))

    @classmethod
    def empty(cls, dim: int) -> "HierarchicalIndex":
        idx = cls(num_levels=1, dim=dim)
        idx.embeddings[1] = np.zeros((0, dim), dtype=np.float32)
        idx.representative[1] = np.zeros(0, dtype=np.int64)
        idx.parent[1] = np.zeros(0, dtype=np.int64)
        idx.active[1] = np.zeros(0, dtype=bool)
        return idx

    # -- construction --------------------------------------------------------

    @classmethod
    def assemble(cls, codebooks: list[LevelCodebook], item_embeddings: np.ndarray) -> "HierarchicalIndex":
        """Wire finalized codebooks into a strict tree.

        An entity's parent is the next level's assignment of its
        representative item (items use their own level-2 assignment), so each
        node has exactly one parent and every item stays reachable from an
        active top-level node.
        """
        item_embeddings = np.asarray(item_embeddings)
        v = len(item_embeddings)
        if v == 0:
            return cls.empty(item_embeddings.shape[1] if item_embeddings.ndim == 2 else 0)
        for i, cb in enumerate(codebooks):
            if not cb.finalized:
                raise ValueError(f"codebook for level {cb.level} is not finalized")
            if cb.level != i + 2:
                raise ValueError("codebooks must be ordered by level 2..N")
            if len(cb.assignment) != v:
                raise ValueError("codebook assignment does not cover the item corpus")
        n = len(codebooks) + 1
        idx = cls(num_levels=n, dim=item_embeddings.shape[1])

        idx.embeddings[1] = item_embeddings.astype(np.float32)
        idx.representative[1] = np.full(v, -1, dtype=np.int64)
        idx.parent[1] = codebooks[0].assignment.astype(np.int64)
        idx.active[1] = np.ones(v, dtype=bool)

        for cb in codebooks:
            level = cb.level
            k = cb.num_nodes
            rep = cb.representative.astype(np.int64)
            emb = np.zeros((k, idx.dim), dtype=np.float32)
            has_rep = rep >= 0
            emb[has_rep] = item_embeddings[rep[has_rep]].astype(np.float32)
            if level < n:
                nxt = codebooks[level - 1]  # codebook for level+1
                parent = np.full(k, -1, dtype=np.int64)
                parent[has_rep] = nxt.assignment[rep[has_rep]]
            else:
                parent = np.full(k, -1, dtype=np.int64)
            idx.embeddings[level] = emb
            idx.representative[level] = rep
            idx.parent[level] = parent

        # invert parents bottom-up; deactivate childless nodes and detach them
        for level in range(2, n + 1):
            k = len(idx.representative[level])
            child_ids = np.flatnonzero(idx.active[level - 1])
            child_parents = idx.parent[level - 1][child_ids]
            children: list[np.ndarray] = [np.zeros(0, dtype=np.int64)] * k
            order = np.argsort(child_parents, kind="stable")
            bounds = np.searchsorted(child_parents[order], np.arange(k + 1))
            for kk in range(k):
                children[kk] = child_ids[order[bounds[kk] : bounds[kk + 1]]]
            idx.children[level] = children
            idx.active[level] = np.array([len(c) > 0 for c in children], dtype=bool)
            inactive = ~idx.active[level]
            idx.representative[level][inactive] = -1
            idx.parent[level][inactive] = -1
        return idx

    def validate(self) -> None:
        if self.num_levels == 1:
            return
        for level in range(1, self.num_levels):
            act = np.flatnonzero(self.active[level])
            parents = self.parent[level][act]
            if len(act) and (parents.min() < 0 or parents.max() >= len(self.active[level + 1])):
                raise ValueError(f"level {level}: active entity without a valid parent")
            if len(act) and not self.active[level + 1][parents].all():
                raise ValueError(f"level {level}: parent of an active entity is inactive")
        for level in range(2, self.num_levels + 1):
            counts = np.zeros(len(self.active[level - 1]), dtype=np.int64)
            for kk, ch in enumerate(self.children[level]):
                counts[ch] += 1
                if self.active[level][kk] and self.representative[level][kk] < 0:
                    raise ValueError(f"level {level}: active node {kk} without representative")
            act_child = self.active[level - 1]
            if not (counts[act_child] == 1).all():
                raise ValueError(f"level {level}: active children must have exactly one parent")

    # -- serving --------------------------------------------------------------

    def beam_search(
        self,
        user_vector: np.ndarray,
        beam_width: int,
        top_k: int,
        exclude: np.ndarray | None = None,
    ) -> RetrievalResult:
        """Descend from all active top-level nodes keeping the `beam_width`
        best-scoring entities per level (ties to the lowest id), then rank the
        surviving items. Counts one scoring call per dot product."""
        if beam_width < 1 or top_k < 1:
            raise ValueError("beam_width and top_k must be >= 1")
        if self.num_items == 0:
            return RetrievalResult(
                items=np.zeros(0, dtype=np.int64), scores=np.zeros(0), scoring_calls=0
            )
        u = np.asarray(user_vector, dtype=np.float64)
        calls = 0
        if self.num_levels == 1:
            candidates = np.arange(self.num_items, dtype=np.int64)
        else:
            candidates = np.flatnonzero(self.active[self.num_levels]).astype(np.int64)
            for level in range(self.num_levels, 1, -1):
                scores = self.embeddings[level][candidates].astype(np.float64) @ u
                calls += len(candidates)
                order = np.lexsort((candidates, -scores))
                survivors = candidates[order[:beam_width]]
                candidates = np.concatenate([self.children[level][s] for s in survivors])

        if exclude is not None and len(exclude):
            candidates = candidates[~np.isin(candidates, exclude)]
        if len(candidates) == 0:
            return RetrievalResult(
                items=np.zeros(0, dtype=np.int64), scores=np.zeros(0), scoring_calls=calls
            )
        scores = self.embeddings[1][candidates].astype(np.float64) @ u
        calls += len(candidates)
        order = np.lexsort((candidates, -scores))[:top_k]
        items = candidates[order]
        item_scores = scores[order]
        trace = [self._path_to_root(int(i)) for i in items]
        return RetrievalResult(items=items, scores=item_scores, scoring_calls=calls, path_trace=trace)

    def _path_to_root(self, item_id: int) -> list[tuple[int, int]]:
        chain: list[tuple[int, int]] = [(1, item_id)]
        level, ident = 1, item_id
        while level < self.num_levels:
            ident = int(self.parent[level][ident])
            level += 1
            chain.append((level, ident))
        return chain[::-1]

    def cost_estimate(
        self,
        beam_width: int,
        cost_units: dict[int, float] | None = None,
        user_vector: np.ndarray | None = None,
    ) -> CostReport:
        """Scoring-call accounting for a beam of the given width.

        With a user vector the counts replay the exact traversal; without one
        they are upper bounds (full top level, then beam-width times the
        maximum fanout, capped by the level's active population). The flat
        baseline is one call per corpus item.
        """
        units = cost_units or {}
        per_level: dict[int, int] = {}
        if self.num_items == 0:
            return CostReport({}, 0, 0.0, 0, 0.0, exact=user_vector is not None)

        if self.num_levels == 1:
            per_level[1] = self.num_items
        elif user_vector is not None:
            u = np.asarray(user_vector, dtype=np.float64)
            candidates = np.flatnonzero(self.active[self.num_levels]).astype(np.int64)
            for level in range(self.num_levels, 1, -1):
                per_level[level] = len(candidates)
                scores = self.embeddings[level][candidates].astype(np.float64) @ u
                order = np.lexsort((candidates, -scores))
                survivors = candidates[order[:beam_width]]
                candidates = np.concatenate([self.children[level][s] for s in survivors])
            per_level[1] = len(candidates)
        else:
            survivors = None
            for level in range(self.num_levels, 1, -1):
                population = int(self.active[level].sum())
                if survivors is None:
                    count = population
                else:
                    max_fanout = max(
                        (len(c) for c, a in zip(self.children[level + 1], self.active[level + 1]) if a),
                        default=0,
                    )
                    count = min(population, survivors * max_fanout)
                per_level[level] = count
                survivors = min(beam_width, count)
            max_fanout = max(
                (len(c) for c, a in zip(self.children[2], self.active[2]) if a), default=0
            )
            per_level[1] = min(self.num_items, survivors * max_fanout)

        total = int(sum(per_level.values()))
        weighted = float(sum(n * units.get(level, 1.0) for level, n in per_level.items()))
        flat = self.num_items
        return CostReport(
            per_level_calls=per_level,
            total_calls=total,
            weighted_cost=weighted,
            flat_calls=flat,
            flat_cost=float(flat * units.get(1, 1.0)),
            exact=user_vector is not None,
        )

    # -- container -----------------------------------------------------------

    def save(self, path) -> None:
        out = bytearray()
        out += struct.pack("<4sIII", INDEX_MAGIC, INDEX_VERSION, self.num_levels, self.dim)
        for level in range(1, self.num_levels + 1):
            out += struct.pack("<I", len(self.embeddings[level]))
        for level in range(1, self.num_levels + 1):
            emb = self.embeddings[level].astype("<f4")
            rep = self.representative[level]
            par = self.parent[level]
            for node_id in range(len(emb)):
                r = rep[node_id]
                p = par[node_id]
                ch = self.children[level][node_id] if level >= 2 else np.zeros(0, dtype=np.int64)
                out += struct.pack(
                    "<IIII",
                    node_id,
                    _SENTINEL if r < 0 else int(r),
                    _SENTINEL if p < 0 else int(p),
                    len(ch),
                )
                if len(ch):
                    out += ch.astype("<u4").tobytes()
                out += emb[node_id].tobytes()
        with open(path, "wb") as fh:
            fh.write(bytes(out))

    @classmethod
    def load(cls, path) -> "HierarchicalIndex":
        with open(path, "rb") as fh:
            blob = fh.read()
        off = 0

        def take(n: int) -> bytes:
            nonlocal off
            if off + n > len(blob):
                raise ValueError(f"index file {path}: truncated at byte {off}")
            chunk = blob[off : off + n]
            off += n
            return chunk

        magic, version, num_levels, dim = struct.unpack("<4sIII", take(16))
        if magic != INDEX_MAGIC:
            raise ValueError(f"index file {path}: bad magic {magic!r}")
        if version != INDEX_VERSION:
            raise ValueError(f"index file {path}: unsupported version {version}")
        counts = [struct.unpack("<I", take(4))[0] for _ in range(num_levels)]

        idx = cls(num_levels=num_levels, dim=dim)
        for level in range(1, num_levels + 1):
            k = counts[level - 1]
            emb = np.zeros((k, dim), dtype=np.float32)
            rep = np.full(k, -1, dtype=np.int64)
            par = np.full(k, -1, dtype=np.int64)
            children: list[np.ndarray] = []
            for slot in range(k):
                node_id, r, p, n_ch = struct.unpack("<IIII", take(16))
                if node_id != slot:
                    raise ValueError(f"index file {path}: out-of-order node record at level {level}")
                if r != _SENTINEL:
                    rep[slot] = r
                if p != _SENTINEL:
                    par[slot] = p
                ch = np.frombuffer(take(4 * n_ch), dtype="<u4").astype(np.int64)
                children.append(ch)
                emb[slot] = np.frombuffer(take(4 * dim), dtype="<f4")
            idx.embeddings[level] = emb
            idx.representative[level] = rep
            idx.parent[level] = par
            if level >= 2:
                idx.children[level] = children
                idx.active[level] = np.array([len(c) > 0 for c in children], dtype=bool)
            else:
                idx.active[1] = np.ones(k, dtype=bool)
        if off != len(blob):
            raise ValueError(f"index file {path}: {len(blob) - off} trailing bytes")
        return idx
