"""Hierarchy codebook learning.

One level at a time: items (or their residuals) are softly assigned to
learnable node embeddings through a distance softmax, the resulting pseudo
item embedding is scored against the user embedding, and gradients flow to
both the nodes and the model. Levels stack by passing residuals upward;
training is stabilized by a temperature schedule, a column-balance penalty
on pooled soft assignments, and linear warmup of the index loss weight.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .data import InteractionDataset, TrainingBatch, batch_iterator
from .model import Adam, TrainConfig, TwoTowerModel

log = logging.getLogger(__name__)


@dataclass
class LevelCodebook:
    """K node embeddings at one hierarchy level plus the item assignment.

    `assignment[j]` is the hard node index of item j (valid after finalize);
    `representative[k]` is the id of the member item nearest node k, -1 for
    empty nodes. `zero_node`, when set, pins that node's embedding at the
    origin during finalization so small residuals can pass through unchanged.
    """

    level: int
    node_embeddings: np.ndarray  # (K, d) float64
    assignment: np.ndarray | None = None
    representative: np.ndarray | None = None
    finalized: bool = False
    zero_node: int | None = None

    @property
    def num_nodes(self) -> int:
        return self.node_embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.node_embeddings.shape[1]


@dataclass
class ResidualState:
    """Per-item residuals r and cumulative quantization q at one level; q + r
    reconstructs the original vectors."""

    level: int
    residuals: np.ndarray  # (M, d)
    cumulative: np.ndarray  # (M, d)


@dataclass
class IndexTrainConfig:
    levels: int = 2
    node_counts: list[int] = field(default_factory=lambda: [64])  # K at levels 2..N
    max_alpha: float = 50.0
    exp: float = 2.0
    max_iters: int = 2000
    flops_weight: float = 0.1
    pool_batches: int = 8
    warmup_iters: int = 200
    seed: int = 0
    batch_size: int = 256
    negatives: int = 1
    index_loss_weight: float = 1.0
    node_lr: float = 0.02
    model_lr: float = 1e-3
    freeze_model: bool = True
    include_zero_centroid: bool = False
    soft_transition: bool = False

    def validate(self) -> None:
        if self.levels < 2:
            raise ValueError("levels must be >= 2")
        if len(self.node_counts) != self.levels - 1:
            raise ValueError(f"need {self.levels - 1} node counts for levels 2..{self.levels}")
        if any(k < 1 for k in self.node_counts):
            raise ValueError("every node count must be >= 1")
        if self.max_alpha <= 0 or self.exp <= 0:
            raise ValueError("max_alpha and exp must be positive")
        if self.warmup_iters < 1:
            raise ValueError("warmup_iters must be >= 1")


def distance(v: np.ndarray, c: np.ndarray) -> float:
    """Squared Euclidean distance between two vectors."""
    v = np.asarray(v, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    if v.shape != c.shape or v.ndim != 1:
        raise ValueError(f"dimension mismatch: {v.shape} vs {c.shape}")
    diff = v - c
    return float(diff @ diff)


def sq_distances(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Pairwise squared distances, (n, K) for x (n, d) and centers (K, d)."""
    x = np.asarray(x, dtype=np.float64)
    centers = np.asarray(centers, dtype=np.float64)
    d2 = (x * x).sum(axis=1)[:, None] - 2.0 * (x @ centers.T) + (centers * centers).sum(axis=1)[None, :]
    return np.maximum(d2, 0.0)


def nearest_node(x: np.ndarray, centers: np.ndarray, chunk: int = 8192) -> np.ndarray:
    """Argmin over centers for each row of x, ties to the lowest index."""
    out = np.empty(len(x), dtype=np.int64)
    for start in range(0, len(x), chunk):
        out[start : start + chunk] = np.argmin(sq_distances(x[start : start + chunk], centers), axis=1)
    return out


def affinity(distances: np.ndarray, alpha: float) -> np.ndarray:
    """Softmax of -alpha * distances along the last axis (max-subtracted)."""
    d = np.asarray(distances, dtype=np.float64)
    if d.shape[-1] == 0:
        raise ValueError("need at least one node")
    if not np.all(np.isfinite(d)):
        raise ValueError("distances must be finite")
    z = -alpha * d
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def pseudo_embedding(affinities: np.ndarray, codebook) -> np.ndarray:
    """Affinity-weighted combination of node embeddings."""
    emb = codebook.node_embeddings if isinstance(codebook, LevelCodebook) else np.asarray(codebook)
    return np.asarray(affinities, dtype=np.float64) @ np.asarray(emb, dtype=np.float64)


def temperature(iteration: int, cfg: IndexTrainConfig) -> float:
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    if iteration > cfg.max_iters:
        log.warning("iteration %d beyond max_iters %d; alpha clamped", iteration, cfg.max_iters)
        return cfg.max_alpha
    return cfg.max_alpha * iteration**cfg.exp / cfg.max_iters**cfg.exp


def warmup_weight(iteration: int, warmup_iters: int, target_weight: float) -> float:
    if warmup_iters < 1:
        raise ValueError("warmup_iters must be >= 1")
    return target_weight * min(1.0, iteration / warmup_iters)


def flops_penalty(pooled_affinities: np.ndarray) -> float:
    """Sum of squared column means; 1/K at perfect balance, 1 at collapse."""
    a = np.atleast_2d(np.asarray(pooled_affinities, dtype=np.float64))
    means = a.mean(axis=0)
    return float((means * means).sum())


class AffinityPool:
    """Ring buffer of the most recent batches' soft-assignment rows."""

    def __init__(self, max_batches: int):
        self.max_batches = max_batches
        self._blocks: list[np.ndarray] = []

    def rows(self) -> np.ndarray | None:
        if not self._blocks:
            return None
        return np.concatenate(self._blocks, axis=0)

    def push(self, block: np.ndarray) -> None:
        self._blocks.append(np.asarray(block, dtype=np.float64))
        while len(self._blocks) > self.max_batches - 1 and len(self._blocks) > 0:
            # keep max_batches-1 past blocks: the current batch completes the pool
            self._blocks.pop(0)


def finalize(codebook: LevelCodebook, item_vectors: np.ndarray) -> LevelCodebook:
    """Hard-assign items, snap each nonempty node onto its medoid item, and
    re-assign against the snapped embeddings.

    After this the stored assignment is a true argmin over the final node
    embeddings and each nonempty node's representative is its nearest member
    (distance zero for snapped nodes). A pinned zero node keeps the origin
    embedding and is exempt from snapping.
    """
    x = np.asarray(item_vectors, dtype=np.float64)
    if len(x) == 0:
        raise ValueError("need at least one item")
    emb = np.array(codebook.node_embeddings, dtype=np.float64)
    if codebook.zero_node is not None:
        emb[codebook.zero_node] = 0.0

    assignment = nearest_node(x, emb)
    for k in range(len(emb)):
        if k == codebook.zero_node:
            continue
        members = np.flatnonzero(assignment == k)
        if len(members) == 0:
            continue
        dists = ((x[members] - emb[k]) ** 2).sum(axis=1)
        emb[k] = x[members[int(np.argmin(dists))]]

    assignment = nearest_node(x, emb)
    representative = np.full(len(emb), -1, dtype=np.int64)
    for k in range(len(emb)):
        members = np.flatnonzero(assignment == k)
        if len(members) == 0:
            continue
        dists = ((x[members] - emb[k]) ** 2).sum(axis=1)
        representative[k] = members[int(np.argmin(dists))]

    codebook.node_embeddings = emb
    codebook.assignment = assignment
    codebook.representative = representative
    codebook.finalized = True
    return codebook


def initial_residual_state(item_vectors: np.ndarray) -> ResidualState:
    v = np.asarray(item_vectors, dtype=np.float64)
    return ResidualState(level=1, residuals=v.copy(), cumulative=np.zeros_like(v))


def residual_step(
    state: ResidualState,
    codebook: LevelCodebook,
    use_hard: bool = True,
    alpha: float | None = None,
) -> ResidualState:
    """Subtract each item's quantization at this level and carry the remainder up."""
    if use_hard:
        if not codebook.finalized:
            raise ValueError("hard residual step requires a finalized codebook")
        cbar = codebook.node_embeddings[codebook.assignment]
    else:
        if alpha is None:
            raise ValueError("soft residual step requires alpha")
        aff = affinity(sq_distances(state.residuals, codebook.node_embeddings), alpha)
        cbar = pseudo_embedding(aff, codebook)
    return ResidualState(
        level=state.level + 1,
        residuals=state.residuals - cbar,
        cumulative=state.cumulative + cbar,
    )


def reconstruction_loss(cumulative: np.ndarray, originals: np.ndarray) -> float:
    q = np.asarray(cumulative, dtype=np.float64)
    v = np.asarray(originals, dtype=np.float64)
    if q.shape != v.shape:
        raise ValueError(f"shape mismatch: {q.shape} vs {v.shape}")
    diff = q - v
    return float((diff * diff).sum())


# -- joint training ----------------------------------------------------------


@dataclass
class StepReport:
    alpha: float
    index_loss: float
    flops_penalty: float
    loss: float


class MatrixAdam:
    """Adam over a single dense parameter matrix."""

    def __init__(self, shape, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(shape, dtype=np.float64)
        self.v = np.zeros(shape, dtype=np.float64)
        self.t = 0

    def step(self, param: np.ndarray, grad: np.ndarray) -> None:
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        mh = self.m / (1 - self.beta1**self.t)
        vh = self.v / (1 - self.beta2**self.t)
        param -= self.lr * mh / (np.sqrt(vh) + self.eps)


def joint_step_grads(
    model: TwoTowerModel,
    codebook: LevelCodebook,
    batch: TrainingBatch,
    alpha: float,
    index_loss_weight: float,
    flops_weight: float = 0.0,
    cumulative: np.ndarray | None = None,
    pool_rows: np.ndarray | None = None,
):
    """Loss and gradients for one soft-assignment training step.

    Scores each example against the pseudo item embedding; gradients reach
    the node matrix both directly and through the distance softmax, and reach
    the model through the user vector and the item vector's appearance in the
    distances. Returns (report, grads, affinity_rows).
    """
    users = batch.users
    items = batch.items
    y = batch.labels.astype(np.float64)
    b = len(users)

    xu = model.user_table[users]
    eu, cache_u = model.user_tower.forward(xu)
    xv = model.item_table[items]
    ev, cache_v = model.item_tower.forward(xv)
    u = eu.astype(np.float64)
    x = ev.astype(np.float64)
    if cumulative is not None:
        x = x - cumulative[items]

    c = codebook.node_embeddings
    d2 = sq_distances(x, c)
    a = affinity(d2, alpha)
    cbar = a @ c
    z = np.einsum("ij,ij->i", u, cbar)
    p = 1.0 / (1.0 + np.exp(-np.clip(z, -500, 500)))
    idx_losses = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    index_loss = float(idx_losses.mean())

    if pool_rows is not None and len(pool_rows):
        pooled = np.concatenate([pool_rows, a], axis=0)
    else:
        pooled = a
    fl = flops_penalty(pooled)
    total = index_loss_weight * index_loss + flops_weight * fl

    dz = (p - y) / b  # d(index_loss)/dz
    w = u @ c.T  # (b, K): u_j . c_k
    h = index_loss_weight * dz[:, None] * w
    if flops_weight:
        col_means = pooled.mean(axis=0)
        h = h + flops_weight * 2.0 * col_means[None, :] / pooled.shape[0]
    dzsoft = a * (h - (a * h).sum(axis=1, keepdims=True))
    dd = -alpha * dzsoft  # dL/dD

    d_eu = index_loss_weight * dz[:, None] * cbar
    dc = a.T @ (index_loss_weight * dz[:, None] * u)
    dc += 2.0 * dd.sum(axis=0)[:, None] * c - 2.0 * (dd.T @ x)
    dx = 2.0 * dd.sum(axis=1)[:, None] * x - 2.0 * (dd @ c)

    d_xu, tower_u = model.user_tower.backward(d_eu, cache_u)
    u_rows, u_inv = np.unique(users, return_inverse=True)
    gu = np.zeros((len(u_rows), model.cfg.dim), dtype=np.float64)
    np.add.at(gu, u_inv, d_xu)
    d_xv, tower_v = model.item_tower.backward(dx, cache_v)
    i_rows, i_inv = np.unique(items, return_inverse=True)
    gv = np.zeros((len(i_rows), model.cfg.dim), dtype=np.float64)
    np.add.at(gv, i_inv, d_xv)

    report = StepReport(alpha=alpha, index_loss=index_loss, flops_penalty=fl, loss=total)
    grads = {
        "nodes": dc,
        "user_rows": (u_rows, gu),
        "user_tower": tower_u,
        "item_rows": (i_rows, gv),
        "item_tower": tower_v,
    }
    return report, grads, a


def joint_train_step(
    model: TwoTowerModel,
    codebook: LevelCodebook,
    batch: TrainingBatch,
    alpha: float,
    index_loss_weight: float,
    *,
    flops_weight: float = 0.0,
    cumulative: np.ndarray | None = None,
    pool: AffinityPool | None = None,
    node_opt: MatrixAdam | None = None,
    model_opt: Adam | None = None,
) -> StepReport:
    """Run one step, apply node (and optionally model) updates, refresh the pool."""
    pool_rows = pool.rows() if pool is not None else None
    report, grads, aff = joint_step_grads(
        model, codebook, batch, alpha, index_loss_weight, flops_weight, cumulative, pool_rows
    )
    if not np.isfinite(report.loss):
        raise RuntimeError(f"index training diverged: non-finite loss (alpha={alpha:.4g})")
    if node_opt is not None:
        node_opt.step(codebook.node_embeddings, grads["nodes"])
    if model_opt is not None:
        model_opt.step(model, grads)
    if pool is not None:
        pool.push(aff)
    return report


def _merge_model_grads(base: dict, extra: dict) -> dict:
    """Sum two model-gradient dicts (sparse rows by union, towers elementwise)."""
    out = {}
    for key in ("user_rows", "item_rows"):
        a, b = base.get(key), extra.get(key)
        if a is None:
            out[key] = b
        elif b is None:
            out[key] = a
        else:
            rows = np.union1d(a[0], b[0])
            g = np.zeros((len(rows), a[1].shape[1]), dtype=np.float64)
            g[np.searchsorted(rows, a[0])] += a[1]
            g[np.searchsorted(rows, b[0])] += b[1]
            out[key] = (rows, g)
    for key in ("user_tower", "item_tower"):
        ta, tb = base.get(key, {}), extra.get(key, {})
        out[key] = {n: ta.get(n, 0) + tb.get(n, 0) for n in set(ta) | set(tb)}
    return out


def build_hierarchy(
    model: TwoTowerModel,
    dataset: InteractionDataset,
    cfg: IndexTrainConfig,
    progress=None,
):
    """Train, finalize, and stack codebooks for levels 2..N.

    Levels are trained sequentially bottom-up against frozen lower-level
    cumulative quantizations. Returns (codebooks, final ResidualState,
    per-level reconstruction losses). `progress` is an optional callable
    receiving dict records suitable for JSON-lines logging.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    originals = model.all_item_embeddings().astype(np.float64)
    if any(k > len(originals) for k in cfg.node_counts):
        log.warning("node count exceeds item count; empty nodes expected")
    state = initial_residual_state(originals)
    codebooks: list[LevelCodebook] = []
    recon_trace: list[float] = []

    model_opt = None if cfg.freeze_model else Adam(model, TrainConfig(lr=cfg.model_lr, seed=cfg.seed))

    for level_idx, k in enumerate(cfg.node_counts):
        level = level_idx + 2
        codebook = LevelCodebook(
            level=level,
            node_embeddings=rng.normal(0.0, 0.1, (k, model.cfg.dim)),
            zero_node=(k - 1) if cfg.include_zero_centroid else None,
        )
        node_opt = MatrixAdam(codebook.node_embeddings.shape, lr=cfg.node_lr)
        pool = AffinityPool(cfg.pool_batches)

        it = 0
        epoch = 0
        while it < cfg.max_iters:
            for batch in batch_iterator(dataset, cfg.batch_size, cfg.negatives, cfg.seed + level, epoch):
                if it >= cfg.max_iters:
                    break
                alpha = temperature(it, cfg)
                ilw = warmup_weight(it, cfg.warmup_iters, cfg.index_loss_weight)
                pool_rows = pool.rows()
                report, grads, aff = joint_step_grads(
                    model, codebook, batch, alpha, ilw, cfg.flops_weight, state.cumulative, pool_rows
                )
                if not np.isfinite(report.loss):
                    raise RuntimeError(
                        f"index training diverged at level {level} iter {it} (alpha={alpha:.4g})"
                    )
                node_opt.step(codebook.node_embeddings, grads["nodes"])
                if model_opt is not None:
                    _, base_grads = model.loss_and_grads(batch.users, batch.items, batch.labels)
                    model_opt.step(model, _merge_model_grads(base_grads, grads))
                pool.push(aff)
                if progress is not None and (it % 100 == 0 or it == cfg.max_iters - 1):
                    x = model.all_item_embeddings()[batch.items].astype(np.float64) - state.cumulative[batch.items]
                    aff_now = affinity(sq_distances(x, codebook.node_embeddings), alpha)
                    batch_recon = float(((x - aff_now @ codebook.node_embeddings) ** 2).sum())
                    progress(
                        {
                            "level": level,
                            "iter": it,
                            "alpha": alpha,
                            "index_loss": report.index_loss,
                            "flops_penalty": report.flops_penalty,
                            "recon_loss": batch_recon,
                        }
                    )
                it += 1
            epoch += 1

        current = model.all_item_embeddings().astype(np.float64)
        x_level = current - state.cumulative
        finalize(codebook, x_level)
        state = ResidualState(level=state.level, residuals=x_level, cumulative=state.cumulative)
        state = residual_step(state, codebook, use_hard=not cfg.soft_transition,
                              alpha=None if not cfg.soft_transition else cfg.max_alpha)
        codebooks.append(codebook)
        recon = reconstruction_loss(state.cumulative, current)
        recon_trace.append(recon)
        if progress is not None:
            progress({"level": level, "iter": cfg.max_iters, "alpha": cfg.max_alpha,
                      "index_loss": None, "flops_penalty": None, "recon_loss": recon})
        log.info("level %d finalized: K=%d recon=%.6f", level, k, recon)

    return codebooks, state, recon_trace
