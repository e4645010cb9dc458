"""Alternating index/model optimization: k-means cluster assignment as the
E-step, model refitting against the current node embeddings as the M-step."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .codebooks import (
    LevelCodebook,
    finalize,
    initial_residual_state,
    reconstruction_loss,
    residual_step,
    sq_distances,
    _merge_model_grads,
)
from .data import InteractionDataset, batch_iterator
from .model import Adam, TrainConfig, TwoTowerModel

log = logging.getLogger(__name__)


@dataclass
class EmConfig:
    rounds: int = 1
    kmeans_iters: int = 25
    node_counts: list[int] = field(default_factory=lambda: [64])  # K at levels 2..N
    m_step_epochs: int = 1
    seed: int = 0
    include_zero_centroid: bool = True
    freeze_model: bool = False
    augment_weight: float = 1.0
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self) -> None:
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if self.kmeans_iters < 1:
            raise ValueError("kmeans_iters must be >= 1")
        if not self.node_counts or any(k < 1 for k in self.node_counts):
            raise ValueError("node_counts must be non-empty positive ints")


def _kmeans_pp_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    centers = np.empty((k, x.shape[1]), dtype=np.float64)
    first = int(rng.integers(n))
    centers[0] = x[first]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            idx = int(rng.integers(n))  # all points covered; duplicate arbitrarily
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centers[j] = x[idx]
        d2 = np.minimum(d2, ((x - centers[j]) ** 2).sum(axis=1))
    return centers


def _assign(x: np.ndarray, centers: np.ndarray, chunk: int = 8192):
    labels = np.empty(len(x), dtype=np.int64)
    mind = np.empty(len(x), dtype=np.float64)
    for s in range(0, len(x), chunk):
        d2 = sq_distances(x[s : s + chunk], centers)
        labels[s : s + chunk] = np.argmin(d2, axis=1)
        mind[s : s + chunk] = d2[np.arange(len(d2)), labels[s : s + chunk]]
    return labels, mind


def kmeans_fit(vectors: np.ndarray, k: int, iters: int, seed: int, return_trace: bool = False):
    """Seeded k-means++ plus Lloyd iterations.

    Empty clusters are re-seeded to the point farthest from its centroid.
    Inertia is checked to be non-increasing across iterations. Returns
    (centroids, assignment) or, with `return_trace`, a third list of per-
    iteration inertia values.
    """
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2 or len(x) < 1:
        raise ValueError("vectors must be a non-empty (M, d) array")
    if k < 1:
        raise ValueError("k must be >= 1")
    rng = np.random.default_rng(seed)
    centers = _kmeans_pp_init(x, k, rng)

    trace: list[float] = []
    labels, mind = _assign(x, centers)
    prev = float(mind.sum())
    trace.append(prev)
    for _ in range(iters):
        sums = np.zeros((k, x.shape[1]), dtype=np.float64)
        np.add.at(sums, labels, x)
        counts = np.bincount(labels, minlength=k).astype(np.float64)
        nonempty = counts > 0
        centers[nonempty] = sums[nonempty] / counts[nonempty, None]
        if not nonempty.all():
            taken = mind.copy()
            for kk in np.flatnonzero(~nonempty):
                far = int(np.argmax(taken))
                centers[kk] = x[far]
                taken[far] = -1.0
        labels, mind = _assign(x, centers)
        inertia = float(mind.sum())
        if inertia > prev * (1 + 1e-9) + 1e-12:
            raise RuntimeError(f"k-means inertia increased: {prev} -> {inertia}")
        trace.append(inertia)
        if inertia == prev:
            break
        prev = inertia
    if return_trace:
        return centers, labels, trace
    return centers, labels


def e_step(vectors: np.ndarray, cfg: EmConfig, level: int = 2, seed: int | None = None):
    """Cluster the level's vectors and package them as a finalized codebook.

    Medoid snapping and re-assignment follow the shared finalize rules; when
    the zero-centroid guarantee is on, the last node index is pinned at the
    origin and clusters are fit with one fewer free centroid.
    """
    k = cfg.node_counts[level - 2]
    seed = cfg.seed if seed is None else seed
    x = np.asarray(vectors, dtype=np.float64)
    if cfg.include_zero_centroid:
        emb = np.zeros((k, x.shape[1]), dtype=np.float64)
        if k > 1:
            centers, _ = kmeans_fit(x, k - 1, cfg.kmeans_iters, seed)
            emb[: k - 1] = centers
        codebook = LevelCodebook(level=level, node_embeddings=emb, zero_node=k - 1)
    else:
        centers, _ = kmeans_fit(x, k, cfg.kmeans_iters, seed)
        codebook = LevelCodebook(level=level, node_embeddings=centers)
    return finalize(codebook, x)


def m_step(
    model: TwoTowerModel,
    dataset: InteractionDataset,
    codebooks: list[LevelCodebook],
    epochs: int,
    train_cfg: TrainConfig | None = None,
    augment_weight: float = 1.0,
) -> TwoTowerModel:
    """Refit the model; each positive also pulls its user toward the item's
    level-2 node embedding (node side frozen)."""
    if epochs <= 0:
        return model
    for cb in codebooks:
        if not cb.finalized:
            raise ValueError("m_step requires finalized codebooks")
    cfg = train_cfg or TrainConfig()
    level2 = codebooks[0]
    opt = Adam(model, cfg)
    for epoch in range(epochs):
        for batch in batch_iterator(dataset, cfg.batch_size, cfg.negatives, cfg.seed, epoch):
            loss, grads = model.loss_and_grads(batch.users, batch.items, batch.labels)
            if augment_weight:
                pos = batch.labels > 0.5
                pos_users = batch.users[pos]
                node_vecs = level2.node_embeddings[level2.assignment[batch.items[pos]]]
                aug_loss, aug = model.loss_and_grads(
                    pos_users,
                    np.zeros(len(pos_users), dtype=np.int64),
                    np.ones(len(pos_users)),
                    example_weights=np.full(len(pos_users), augment_weight),
                    item_side_override=node_vecs,
                )
                loss += aug_loss
                grads = _merge_model_grads(grads, aug)
            if not np.isfinite(loss):
                raise RuntimeError(f"m_step diverged at epoch {epoch}")
            opt.step(model, grads)
    return model


def em_build(
    model: TwoTowerModel,
    dataset: InteractionDataset,
    cfg: EmConfig,
    progress=None,
):
    """Alternate residual clustering and model refitting for cfg.rounds.

    Returns (codebooks, final ResidualState, per-round reconstruction losses).
    """
    cfg.validate()
    codebooks: list[LevelCodebook] = []
    state = None
    recon_trace: list[float] = []
    n_levels = len(cfg.node_counts)

    for rnd in range(cfg.rounds):
        originals = model.all_item_embeddings().astype(np.float64)
        state = initial_residual_state(originals)
        codebooks = []
        for level_idx in range(n_levels):
            level = level_idx + 2
            cb = e_step(state.residuals, cfg, level, seed=cfg.seed + level_idx)
            state = residual_step(state, cb, use_hard=True)
            codebooks.append(cb)
            if progress is not None:
                _, mind = _assign(state.residuals + cb.node_embeddings[cb.assignment], cb.node_embeddings)
                progress({"round": rnd, "level": level, "inertia": float(mind.sum())})
        recon = reconstruction_loss(state.cumulative, originals)
        recon_trace.append(recon)
        if progress is not None:
            progress({"round": rnd, "recon_loss": recon})
        log.info("round %d: recon %.6f", rnd, recon)
        if not cfg.freeze_model and cfg.m_step_epochs > 0:
            m_step(model, dataset, codebooks, cfg.m_step_epochs, cfg.train, cfg.augment_weight)

    return codebooks, state, recon_trace
