"""Compact two-tower scoring model: embedding tables, optional one-hidden-layer
towers, logistic losses, Adam training, and pair-based fine-tuning."""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field

import numpy as np

from .data import InteractionDataset, TrainingBatch, batch_iterator

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"TT2C"
CHECKPOINT_VERSION = 1


@dataclass
class ScorePrediction:
    logit: float
    probability: float


@dataclass
class ModelConfig:
    num_users: int
    num_items: int
    dim: int = 64
    hidden: int = 0  # 0 disables the tower MLPs
    num_tasks: int = 1
    seed: int = 0
    init_std: float = 0.1


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 1024
    negatives: int = 1
    l2_reg: float = 0.0
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    unsup_weight: float = 0.0


@dataclass
class TrainReport:
    epoch_losses: list[float] = field(default_factory=list)
    steps: int = 0


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _bce_from_logits(logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Per-example -[y log sigma(z) + (1-y) log(1-sigma(z))], overflow-safe."""
    return np.maximum(logits, 0.0) - logits * targets + np.log1p(np.exp(-np.abs(logits)))


def supervised_loss(predictions, labels, task_weights) -> float:
    """Weighted multi-task cross-entropy, mean over samples.

    `predictions` and `labels` are (S, T); `task_weights` is (T,). Raises if
    any prediction sits outside the open interval (0, 1) - no silent clamping.
    """
    p = np.atleast_2d(np.asarray(predictions, dtype=np.float64))
    y = np.atleast_2d(np.asarray(labels, dtype=np.float64))
    w = np.atleast_1d(np.asarray(task_weights, dtype=np.float64))
    if p.shape != y.shape or p.shape[1] != w.shape[0]:
        raise ValueError(f"shape mismatch: predictions {p.shape}, labels {y.shape}, weights {w.shape}")
    if np.any(p <= 0.0) or np.any(p >= 1.0):
        raise ValueError("predictions must lie strictly inside (0, 1)")
    s = p.shape[0]
    terms = w[None, :] * (y * np.log(p) + (1.0 - y) * np.log1p(-p))
    return float(-terms.sum() / s)


def distillation_loss(predictions, soft_labels) -> float:
    """Cross-entropy against soft labels in [0, 1], mean over samples."""
    p = np.atleast_2d(np.asarray(predictions, dtype=np.float64))
    q = np.atleast_2d(np.asarray(soft_labels, dtype=np.float64))
    if p.shape != q.shape:
        raise ValueError(f"shape mismatch: predictions {p.shape}, soft labels {q.shape}")
    if np.any(p <= 0.0) or np.any(p >= 1.0):
        raise ValueError("predictions must lie strictly inside (0, 1)")
    if np.any(q < 0.0) or np.any(q > 1.0):
        raise ValueError("soft labels must lie in [0, 1]")
    s = p.shape[0]
    terms = q * np.log(p) + (1.0 - q) * np.log1p(-p)
    return float(-terms.sum() / s)


def total_loss(sup: float, unsup: float, unsup_weight: float = 0.0) -> float:
    return float(sup + unsup_weight * unsup)


class _Tower:
    """One-hidden-layer MLP (d -> h -> d, ReLU), or identity when h == 0."""

    def __init__(self, dim: int, hidden: int, rng: np.random.Generator, init_std: float, dtype):
        self.hidden = hidden
        if hidden > 0:
            self.w1 = rng.normal(0.0, init_std, (dim, hidden)).astype(dtype)
            self.b1 = np.zeros(hidden, dtype=dtype)
            self.w2 = rng.normal(0.0, init_std, (hidden, dim)).astype(dtype)
            self.b2 = np.zeros(dim, dtype=dtype)

    def params(self) -> dict[str, np.ndarray]:
        if self.hidden == 0:
            return {}
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    def forward(self, x: np.ndarray):
        if self.hidden == 0:
            return x, None
        pre = x @ self.w1 + self.b1
        h = np.maximum(pre, 0.0)
        return h @ self.w2 + self.b2, (x, pre, h)

    def backward(self, d_out: np.ndarray, cache) -> tuple[np.ndarray, dict[str, np.ndarray]]:
        if self.hidden == 0:
            return d_out, {}
        x, pre, h = cache
        dw2 = h.T @ d_out
        db2 = d_out.sum(axis=0)
        dh = d_out @ self.w2.T
        dh = np.where(pre > 0.0, dh, 0.0)
        dw1 = x.T @ dh
        db1 = dh.sum(axis=0)
        dx = dh @ self.w1.T
        return dx, {"w1": dw1, "b1": db1, "w2": dw2, "b2": db2}


class TwoTowerModel:
    """User/item embedding tables plus optional tower MLPs; dot-product scorer."""

    def __init__(self, cfg: ModelConfig, dtype=np.float32):
        self.cfg = cfg
        self.dtype = dtype
        rng = np.random.default_rng(cfg.seed)
        self.user_table = rng.normal(0.0, cfg.init_std, (cfg.num_users, cfg.dim)).astype(dtype)
        self.item_table = rng.normal(0.0, cfg.init_std, (cfg.num_items, cfg.dim)).astype(dtype)
        self.task_weights = np.ones(cfg.num_tasks, dtype=np.float64)
        self.user_tower = _Tower(cfg.dim, cfg.hidden, rng, cfg.init_std, dtype)
        self.item_tower = _Tower(cfg.dim, cfg.hidden, rng, cfg.init_std, dtype)

    # -- embeddings ---------------------------------------------------------

    def user_embedding(self, user_ids) -> np.ndarray:
        ids = np.asarray(user_ids)
        if ids.size and (ids.min() < 0 or ids.max() >= self.cfg.num_users):
            raise IndexError(f"user id out of range [0, {self.cfg.num_users})")
        out, _ = self.user_tower.forward(self.user_table[ids])
        return out

    def item_embedding(self, item_ids) -> np.ndarray:
        ids = np.asarray(item_ids)
        if ids.size and (ids.min() < 0 or ids.max() >= self.cfg.num_items):
            raise IndexError(f"item id out of range [0, {self.cfg.num_items})")
        out, _ = self.item_tower.forward(self.item_table[ids])
        return out

    def all_item_embeddings(self) -> np.ndarray:
        out, _ = self.item_tower.forward(self.item_table)
        return out

    def all_user_embeddings(self) -> np.ndarray:
        out, _ = self.user_tower.forward(self.user_table)
        return out

    def score(self, user_id: int, item_id: int) -> ScorePrediction:
        u = self.user_embedding(user_id).astype(np.float64)
        v = self.item_embedding(item_id).astype(np.float64)
        logit = float(u @ v)
        return ScorePrediction(logit=logit, probability=float(_sigmoid(np.array(logit))))

    def logits(self, users: np.ndarray, items: np.ndarray) -> np.ndarray:
        u = self.user_embedding(users).astype(np.float64)
        v = self.item_embedding(items).astype(np.float64)
        return np.einsum("ij,ij->i", u, v)

    # -- training -----------------------------------------------------------

    def loss_and_grads(
        self,
        users: np.ndarray,
        items: np.ndarray,
        labels: np.ndarray,
        example_weights: np.ndarray | None = None,
        mean: bool = True,
        item_side_override: np.ndarray | None = None,
    ):
        """Forward + backward for one batch of (user, item, label) examples.

        Returns (loss, grads) where grads holds sparse table gradients as
        (rows, row_grads) pairs plus dense tower gradients. When
        `item_side_override` is given, those vectors replace the item tower
        output and receive no gradient (frozen-node fine-tuning path).
        """
        users = np.asarray(users, dtype=np.int64)
        items = np.asarray(items, dtype=np.int64)
        y = np.asarray(labels, dtype=np.float64)
        w = np.ones(len(y)) if example_weights is None else np.asarray(example_weights, dtype=np.float64)
        denom = float(len(y)) if mean else 1.0

        xu = self.user_table[users]
        eu, cache_u = self.user_tower.forward(xu)
        if item_side_override is not None:
            ev, cache_v = np.asarray(item_side_override), None
        else:
            xv = self.item_table[items]
            ev, cache_v = self.item_tower.forward(xv)

        z = np.einsum("ij,ij->i", eu.astype(np.float64), ev.astype(np.float64))
        losses = _bce_from_logits(z, y)
        loss = float((w * losses).sum() / denom)

        dz = (w * (_sigmoid(z) - y) / denom).astype(np.float64)
        d_eu = dz[:, None] * ev.astype(np.float64)
        d_xu, tower_u_grads = self.user_tower.backward(d_eu, cache_u)
        u_rows, u_inv = np.unique(users, return_inverse=True)
        gu = np.zeros((len(u_rows), self.cfg.dim), dtype=np.float64)
        np.add.at(gu, u_inv, d_xu)

        grads = {
            "user_rows": (u_rows, gu),
            "user_tower": tower_u_grads,
            "item_rows": None,
            "item_tower": {},
        }
        if item_side_override is None:
            d_ev = dz[:, None] * eu.astype(np.float64)
            d_xv, tower_v_grads = self.item_tower.backward(d_ev, cache_v)
            i_rows, i_inv = np.unique(items, return_inverse=True)
            gv = np.zeros((len(i_rows), self.cfg.dim), dtype=np.float64)
            np.add.at(gv, i_inv, d_xv)
            grads["item_rows"] = (i_rows, gv)
            grads["item_tower"] = tower_v_grads
        return loss, grads

    def parameters(self) -> dict[str, np.ndarray]:
        params = {"user_table": self.user_table, "item_table": self.item_table}
        for name, p in self.user_tower.params().items():
            params[f"user_tower.{name}"] = p
        for name, p in self.item_tower.params().items():
            params[f"item_tower.{name}"] = p
        return params

    def copy(self) -> "TwoTowerModel":
        clone = TwoTowerModel(self.cfg, dtype=self.dtype)
        for name, p in self.parameters().items():
            clone.parameters()[name][...] = p
        return clone


class Adam:
    """Per-parameter adaptive optimizer; embedding tables update touched rows only."""

    def __init__(self, model: TwoTowerModel, cfg: TrainConfig):
        self.cfg = cfg
        self.t = 0
        self.m = {k: np.zeros_like(v, dtype=np.float64) for k, v in model.parameters().items()}
        self.v = {k: np.zeros_like(v, dtype=np.float64) for k, v in model.parameters().items()}

    def _update(self, param: np.ndarray, m: np.ndarray, v: np.ndarray, g: np.ndarray, rows=None):
        c = self.cfg
        if rows is None:
            m[...] = c.beta1 * m + (1 - c.beta1) * g
            v[...] = c.beta2 * v + (1 - c.beta2) * g * g
            mh = m / (1 - c.beta1**self.t)
            vh = v / (1 - c.beta2**self.t)
            param -= (c.lr * mh / (np.sqrt(vh) + c.eps)).astype(param.dtype)
        else:
            m[rows] = c.beta1 * m[rows] + (1 - c.beta1) * g
            v[rows] = c.beta2 * v[rows] + (1 - c.beta2) * g * g
            mh = m[rows] / (1 - c.beta1**self.t)
            vh = v[rows] / (1 - c.beta2**self.t)
            param[rows] -= (c.lr * mh / (np.sqrt(vh) + c.eps)).astype(param.dtype)

    def step(self, model: TwoTowerModel, grads: dict) -> None:
        self.t += 1
        rows, g = grads["user_rows"]
        if self.cfg.l2_reg:
            g = g + self.cfg.l2_reg * model.user_table[rows]
        self._update(model.user_table, self.m["user_table"], self.v["user_table"], g, rows)
        if grads["item_rows"] is not None:
            rows, g = grads["item_rows"]
            if self.cfg.l2_reg:
                g = g + self.cfg.l2_reg * model.item_table[rows]
            self._update(model.item_table, self.m["item_table"], self.v["item_table"], g, rows)
        for tower, key in (("user_tower", "user_tower"), ("item_tower", "item_tower")):
            for name, g in grads[tower].items():
                full = f"{key}.{name}"
                self._update(model.parameters()[full], self.m[full], self.v[full], g)


def train(
    model: TwoTowerModel,
    dataset: InteractionDataset,
    epochs: int,
    cfg: TrainConfig | None = None,
    soft_labels: dict[tuple[int, int], float] | None = None,
) -> TrainReport:
    """Adam training on sampled positives/negatives; returns per-epoch mean loss.

    Deterministic for a fixed (cfg.seed, epoch) pair. Aborts on non-finite
    loss. Optional `soft_labels` maps (user, item) to a teacher probability;
    matching examples get an extra distillation term weighted by
    cfg.unsup_weight.
    """
    if dataset.num_train_interactions() == 0:
        raise ValueError("dataset has no train interactions")
    cfg = cfg or TrainConfig()
    opt = Adam(model, cfg)
    report = TrainReport()

    soft_keys = soft_vals = None
    if soft_labels:
        pairs = sorted(soft_labels.items())
        soft_keys = np.array([u * dataset.num_items + i for (u, i), _ in pairs], dtype=np.int64)
        soft_vals = np.array([v for _, v in pairs], dtype=np.float64)

    for epoch in range(epochs):
        total, count = 0.0, 0
        for batch in batch_iterator(dataset, cfg.batch_size, cfg.negatives, cfg.seed, epoch):
            loss, grads = model.loss_and_grads(batch.users, batch.items, batch.labels)
            if soft_keys is not None and cfg.unsup_weight:
                loss += cfg.unsup_weight * _apply_distillation(
                    model, batch, grads, soft_keys, soft_vals, dataset.num_items, cfg.unsup_weight
                )
            if not np.isfinite(loss):
                raise RuntimeError(
                    f"training diverged: non-finite loss at epoch {epoch} step {report.steps} "
                    f"(lr={cfg.lr}, batch={cfg.batch_size})"
                )
            opt.step(model, grads)
            total += loss * len(batch)
            count += len(batch)
            report.steps += 1
        report.epoch_losses.append(total / max(count, 1))
        log.info("epoch %d: mean loss %.6f", epoch, report.epoch_losses[-1])
    return report


def _apply_distillation(model, batch: TrainingBatch, grads, soft_keys, soft_vals, num_items, weight):
    """Add teacher-matching gradient terms for batch examples with soft labels."""
    keys = batch.users * num_items + batch.items
    idx = np.searchsorted(soft_keys, keys)
    idx = np.minimum(idx, len(soft_keys) - 1)
    hit = soft_keys[idx] == keys
    if not hit.any():
        return 0.0
    users, items = batch.users[hit], batch.items[hit]
    targets = soft_vals[idx[hit]]
    extra_loss, extra = model.loss_and_grads(users, items, targets)
    scale = weight * len(users) / len(batch)
    _merge_sparse(grads, "user_rows", extra, scale)
    _merge_sparse(grads, "item_rows", extra, scale)
    for tower in ("user_tower", "item_tower"):
        for name, g in extra[tower].items():
            grads[tower][name] = grads[tower][name] + scale * g
    return extra_loss * len(users) / len(batch)


def _merge_sparse(grads, key, extra, scale):
    if extra[key] is None:
        return
    rows_a, ga = grads[key]
    rows_b, gb = extra[key]
    rows = np.union1d(rows_a, rows_b)
    g = np.zeros((len(rows), ga.shape[1]), dtype=np.float64)
    g[np.searchsorted(rows, rows_a)] += ga
    g[np.searchsorted(rows, rows_b)] += scale * gb
    grads[key] = (rows, g)


def finetune_with_pairs(
    model: TwoTowerModel,
    pair_users: np.ndarray,
    node_embeddings: np.ndarray,
    epochs: int = 10,
    lr: float = 1e-3,
    weights: np.ndarray | None = None,
) -> TwoTowerModel:
    """Full-batch gradient descent pushing each user toward its paired node vector.

    The node embeddings act as frozen item-side outputs; only user-side
    parameters move. The loss is the sum (not mean) of weighted per-pair
    logistic losses, so duplicating a pair and doubling its weight are
    equivalent. Mutates and returns `model`.
    """
    pair_users = np.asarray(pair_users, dtype=np.int64)
    if len(pair_users) == 0:
        log.warning("finetune_with_pairs called with an empty pair set; model unchanged")
        return model
    nodes = np.asarray(node_embeddings, dtype=np.float64)
    if nodes.shape != (len(pair_users), model.cfg.dim):
        raise ValueError(f"node embeddings must be ({len(pair_users)}, {model.cfg.dim})")
    if pair_users.min() < 0 or pair_users.max() >= model.cfg.num_users:
        raise IndexError("pair references an unknown user")
    labels = np.ones(len(pair_users))
    for _ in range(epochs):
        _, grads = model.loss_and_grads(
            pair_users,
            np.zeros(len(pair_users), dtype=np.int64),
            labels,
            example_weights=weights,
            mean=False,
            item_side_override=nodes,
        )
        rows, g = grads["user_rows"]
        model.user_table[rows] -= (lr * g).astype(model.user_table.dtype)
        for name, g in grads["user_tower"].items():
            p = model.parameters()[f"user_tower.{name}"]
            p -= (lr * g).astype(p.dtype)
    return model


# -- checkpoint container ---------------------------------------------------

_HEADER = struct.Struct("<4sIIIIQQQ")  # magic, version, d, h, T, users, items, seed


def save_checkpoint(model: TwoTowerModel, path) -> None:
    cfg = model.cfg
    with open(path, "wb") as fh:
        fh.write(
            _HEADER.pack(
                CHECKPOINT_MAGIC,
                CHECKPOINT_VERSION,
                cfg.dim,
                cfg.hidden,
                cfg.num_tasks,
                cfg.num_users,
                cfg.num_items,
                cfg.seed,
            )
        )
        fh.write(model.user_table.astype("<f4").tobytes())
        fh.write(model.item_table.astype("<f4").tobytes())
        fh.write(model.task_weights.astype("<f4").tobytes())
        for tower in (model.user_tower, model.item_tower):
            for p in tower.params().values():
                fh.write(p.astype("<f4").tobytes())


def load_checkpoint(path, dtype=np.float32) -> TwoTowerModel:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        raise ValueError(f"checkpoint {path}: truncated header")
    magic, version, dim, hidden, tasks, users, items, seed = _HEADER.unpack_from(blob)
    if magic != CHECKPOINT_MAGIC:
        raise ValueError(f"checkpoint {path}: bad magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"checkpoint {path}: unsupported version {version}")
    cfg = ModelConfig(num_users=users, num_items=items, dim=dim, hidden=hidden, num_tasks=tasks, seed=seed)
    model = TwoTowerModel(cfg, dtype=dtype)
    sizes = [users * dim, items * dim, tasks]
    for tower in (model.user_tower, model.item_tower):
        sizes.extend(p.size for p in tower.params().values())
    expected = _HEADER.size + 4 * sum(sizes)
    if len(blob) != expected:
        raise ValueError(f"checkpoint {path}: expected {expected} bytes, found {len(blob)}")

    offset = _HEADER.size

    def take(shape):
        nonlocal offset
        n = int(np.prod(shape))
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=offset).reshape(shape)
        offset += 4 * n
        return arr

    model.user_table = take((users, dim)).astype(dtype)
    model.item_table = take((items, dim)).astype(dtype)
    model.task_weights = take((tasks,)).astype(np.float64)
    for tower in (model.user_tower, model.item_tower):
        for name, p in tower.params().items():
            setattr(tower, name, take(p.shape).astype(dtype))
    return model
