"""Interaction dataset loading, train/test splits, and negative-sampled batches."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

ADJACENCY = "adjacency"
PAIR_TSV = "pair_tsv"


class ParseError(ValueError):
    """Raised for malformed input lines; carries the 1-based line number."""

    def __init__(self, path, line_no, message):
        super().__init__(f"{path}:{line_no}: {message}")
        self.path = str(path)
        self.line_no = line_no


@dataclass
class InteractionDataset:
    """Per-user positive item sets with a train/test split.

    Ids are dense and 0-based. `train` / `test` map user_id -> sorted int64
    array of item ids. Immutable by convention after load; safe to share
    across readers.
    """

    num_users: int
    num_items: int
    train: dict[int, np.ndarray] = field(default_factory=dict)
    test: dict[int, np.ndarray] = field(default_factory=dict)

    def num_train_interactions(self) -> int:
        return sum(len(v) for v in self.train.values())

    def num_test_interactions(self) -> int:
        return sum(len(v) for v in self.test.values())

    def num_interactions(self) -> int:
        return self.num_train_interactions() + self.num_test_interactions()

    def train_pairs(self) -> np.ndarray:
        """All train positives as an (n, 2) array of (user, item), user-major order."""
        if not self.train:
            return np.empty((0, 2), dtype=np.int64)
        blocks = [
            np.column_stack([np.full(len(items), u, dtype=np.int64), items])
            for u, items in sorted(self.train.items())
        ]
        return np.concatenate(blocks, axis=0)

    def validate(self) -> None:
        for split_name, split in (("train", self.train), ("test", self.test)):
            for u, items in split.items():
                if not 0 <= u < self.num_users:
                    raise ValueError(f"{split_name} user {u} out of range [0, {self.num_users})")
                if len(items) and (items.min() < 0 or items.max() >= self.num_items):
                    raise ValueError(f"{split_name} items for user {u} out of range")
        for u, items in self.test.items():
            tr = self.train.get(u)
            if tr is None or len(tr) == 0:
                raise ValueError(f"user {u} has test items but no train items")
            if len(np.intersect1d(tr, items, assume_unique=True)):
                raise ValueError(f"user {u} has overlapping train/test items")


def _parse_adjacency(path: Path) -> list[tuple[int, int]]:
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            fields = line.split()
            if not fields:
                continue
            try:
                ids = [int(tok) for tok in fields]
            except ValueError:
                raise ParseError(path, line_no, f"non-integer token in {line.strip()!r}") from None
            if any(i < 0 for i in ids):
                raise ParseError(path, line_no, "negative id")
            user = ids[0]
            pairs.extend((user, item) for item in ids[1:])
    return pairs


def _parse_pair_tsv(path: Path) -> list[tuple[int, int]]:
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            fields = line.rstrip("\n").split("\t")
            if len(fields) != 2:
                raise ParseError(path, line_no, f"expected 2 tab-separated fields, got {len(fields)}")
            try:
                user, item = int(fields[0]), int(fields[1])
            except ValueError:
                raise ParseError(path, line_no, f"non-integer token in {line.strip()!r}") from None
            if user < 0 or item < 0:
                raise ParseError(path, line_no, "negative id")
            pairs.append((user, item))
    return pairs


def _dedup(pairs: list[tuple[int, int]], label: str) -> list[tuple[int, int]]:
    seen: set[tuple[int, int]] = set()
    out = []
    for p in pairs:
        if p in seen:
            continue
        seen.add(p)
        out.append(p)
    dropped = len(pairs) - len(out)
    if dropped:
        log.info("deduplicated %d repeated (user, item) pairs in %s", dropped, label)
    return out


def load_interactions(path, format: str = ADJACENCY) -> InteractionDataset:
    """Load a dataset from `path`.

    `path` may be a directory containing train.txt and test.txt, or a single
    file (loaded as the train split). Non-contiguous ids are densified and
    the original->dense maps are persisted alongside the input as
    `<name>_user_remap.tsv` / `<name>_item_remap.tsv`.
    """
    if format not in (ADJACENCY, PAIR_TSV):
        raise ValueError(f"unknown format {format!r}")
    path = Path(path)
    parse = _parse_adjacency if format == ADJACENCY else _parse_pair_tsv
    if path.is_dir():
        train_pairs = _dedup(parse(path / "train.txt"), "train")
        test_path = path / "test.txt"
        test_pairs = _dedup(parse(test_path), "test") if test_path.exists() else []
        remap_dir, remap_stem = path, path.name
    else:
        if not path.exists():
            raise FileNotFoundError(path)
        train_pairs = _dedup(parse(path), "train")
        test_pairs = []
        remap_dir, remap_stem = path.parent, path.stem

    all_users = sorted({u for u, _ in train_pairs} | {u for u, _ in test_pairs})
    all_items = sorted({i for _, i in train_pairs} | {i for _, i in test_pairs})
    num_users = (all_users[-1] + 1) if all_users else 0
    num_items = (all_items[-1] + 1) if all_items else 0

    # ids are taken as already-dense labels (gaps below the max are fine);
    # a remap is built only when the id space is mostly unused
    user_map = item_map = None
    if all_users and len(all_users) < 0.5 * num_users:
        user_map = {orig: dense for dense, orig in enumerate(all_users)}
        num_users = len(all_users)
    if all_items and len(all_items) < 0.5 * num_items:
        item_map = {orig: dense for dense, orig in enumerate(all_items)}
        num_items = len(all_items)
    if user_map or item_map:
        _persist_remap(remap_dir, remap_stem, user_map, item_map)
        if user_map:
            train_pairs = [(user_map[u], i) for u, i in train_pairs]
            test_pairs = [(user_map[u], i) for u, i in test_pairs]
        if item_map:
            train_pairs = [(u, item_map[i]) for u, i in train_pairs]
            test_pairs = [(u, item_map[i]) for u, i in test_pairs]

    ds = InteractionDataset(
        num_users=num_users,
        num_items=num_items,
        train=_group(train_pairs),
        test=_group(test_pairs),
    )
    ds.validate()
    return ds


def _group(pairs: list[tuple[int, int]]) -> dict[int, np.ndarray]:
    grouped: dict[int, list[int]] = {}
    for u, i in pairs:
        grouped.setdefault(u, []).append(i)
    return {u: np.unique(np.asarray(items, dtype=np.int64)) for u, items in grouped.items()}


def _persist_remap(directory: Path, stem: str, user_map, item_map) -> None:
    for kind, mapping in (("user", user_map), ("item", item_map)):
        if not mapping:
            continue
        out = directory / f"{stem}_{kind}_remap.tsv"
        with open(out, "w", encoding="utf-8") as fh:
            for orig, dense in sorted(mapping.items()):
                fh.write(f"{orig}\t{dense}\n")
        log.info("wrote %s id remap to %s", kind, out)


def save_interactions(dataset: InteractionDataset, directory) -> None:
    """Write train.txt/test.txt in adjacency format (round-trips with load)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, split in (("train.txt", dataset.train), ("test.txt", dataset.test)):
        with open(directory / name, "w", encoding="utf-8") as fh:
            for u in sorted(split):
                items = " ".join(str(i) for i in split[u])
                fh.write(f"{u} {items}\n" if len(split[u]) else f"{u}\n")


def sample_negatives(dataset: InteractionDataset, user: int, count: int, rng_seed: int) -> np.ndarray:
    """Uniform samples (with replacement) from items outside train[user]."""
    if count < 1:
        raise ValueError("count must be >= 1")
    positives = dataset.train.get(user, np.empty(0, dtype=np.int64))
    n_legal = dataset.num_items - len(positives)
    if n_legal <= 0:
        raise ValueError(f"no negatives available for user {user}: positives cover the corpus")
    rng = np.random.default_rng(rng_seed)
    pos_set = set(positives.tolist())
    out = np.empty(count, dtype=np.int64)
    filled = 0
    while filled < count:
        draw = rng.integers(0, dataset.num_items, size=count - filled)
        keep = np.fromiter((d not in pos_set for d in draw), dtype=bool, count=len(draw))
        kept = draw[keep]
        out[filled : filled + len(kept)] = kept
        filled += len(kept)
    return out


@dataclass
class TrainingBatch:
    """Column arrays of training examples; labels in {0, 1}, task index < T."""

    users: np.ndarray
    items: np.ndarray
    labels: np.ndarray
    tasks: np.ndarray

    def __len__(self) -> int:
        return len(self.users)


def batch_iterator(
    dataset: InteractionDataset,
    batch_size: int,
    negatives_per_positive: int = 1,
    rng_seed: int = 0,
    epoch: int = 0,
):
    """Yield TrainingBatch objects covering every train positive exactly once.

    Positives are shuffled by a seed derived from (rng_seed, epoch); the same
    pair reproduces the same order. Each positive is followed by
    `negatives_per_positive` label-0 examples for the same user, sampled
    uniformly outside that user's train set.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    pairs = dataset.train_pairs()
    if len(pairs) == 0:
        return
    rng = np.random.default_rng(np.random.SeedSequence([rng_seed, epoch]))
    order = rng.permutation(len(pairs))
    pairs = pairs[order]

    # sorted key array for vectorized (user, item) membership tests
    keys = np.sort(pairs[:, 0] * dataset.num_items + pairs[:, 1])

    for start in range(0, len(pairs), batch_size):
        chunk = pairs[start : start + batch_size]
        users, items = chunk[:, 0], chunk[:, 1]
        n = len(chunk)
        if negatives_per_positive > 0:
            neg_users = np.repeat(users, negatives_per_positive)
            neg_items = rng.integers(0, dataset.num_items, size=len(neg_users))
            # redraw collisions with train positives until clean
            while True:
                cand = neg_users * dataset.num_items + neg_items
                idx = np.searchsorted(keys, cand)
                idx = np.minimum(idx, len(keys) - 1)
                bad = keys[idx] == cand
                if not bad.any():
                    break
                neg_items[bad] = rng.integers(0, dataset.num_items, size=int(bad.sum()))
            all_users = np.concatenate([users, neg_users])
            all_items = np.concatenate([items, neg_items])
            labels = np.concatenate([np.ones(n), np.zeros(len(neg_users))])
        else:
            all_users, all_items, labels = users, items, np.ones(n)
        yield TrainingBatch(
            users=all_users.astype(np.int64),
            items=all_items.astype(np.int64),
            labels=labels.astype(np.float64),
            tasks=np.zeros(len(all_users), dtype=np.int64),
        )


def synthetic_interactions(
    num_users: int,
    num_items: int,
    interactions: int,
    num_groups: int = 48,
    groups_per_user: int = 4,
    noise: float = 0.15,
    test_fraction: float = 0.2,
    seed: int = 0,
) -> InteractionDataset:
    """Deterministic synthetic benchmark stand-in with latent-interest structure.

    Items are partitioned into `num_groups` interest groups with Zipf-ish
    within-group popularity. Each user mixes a few groups; a `noise` fraction
    of each user's interactions is drawn from global popularity instead.
    Per-user interactions are split train/test, mimicking the public-dataset
    protocol. The signal level is such that ranking quality requires actually
    learning the latent structure.
    """
    rng = np.random.default_rng(seed)
    num_groups = min(num_groups, num_items)
    groups_per_user = min(groups_per_user, num_groups)
    group_of_item = rng.integers(0, num_groups, size=num_items)
    # every group needs at least one item: steal from the currently largest
    counts = np.bincount(group_of_item, minlength=num_groups)
    for g in np.flatnonzero(counts == 0):
        donor = int(np.argmax(counts))
        victim = int(np.flatnonzero(group_of_item == donor)[0])
        group_of_item[victim] = g
        counts[donor] -= 1
        counts[g] += 1
    items_by_group = [np.flatnonzero(group_of_item == g) for g in range(num_groups)]

    pop = 1.0 / np.arange(1, num_items + 1) ** 0.8
    pop = pop[rng.permutation(num_items)]
    pop /= pop.sum()
    global_cum = np.cumsum(pop)
    group_cum = [np.cumsum(pop[g_items] / pop[g_items].sum()) for g_items in items_by_group]

    # long-tailed per-user activity scaled to the requested interaction total
    sizes = rng.lognormal(mean=0.0, sigma=0.8, size=num_users)
    sizes = np.maximum(6, np.round(sizes * interactions / sizes.sum()).astype(np.int64))

    train: dict[int, np.ndarray] = {}
    test: dict[int, np.ndarray] = {}
    for u in range(num_users):
        mix = rng.choice(num_groups, size=groups_per_user, replace=False)
        weights = rng.dirichlet(np.full(groups_per_user, 0.6))
        k = int(sizes[u])
        n_draw = 2 * k + 16
        group_draw = mix[rng.choice(groups_per_user, size=n_draw, p=weights)]
        from_noise = rng.random(n_draw) < noise
        quantile = rng.random(n_draw)
        drawn = np.empty(n_draw, dtype=np.int64)
        drawn[from_noise] = np.searchsorted(global_cum, quantile[from_noise])
        for g in np.unique(group_draw[~from_noise]):
            mask = ~from_noise & (group_draw == g)
            drawn[mask] = items_by_group[g][np.searchsorted(group_cum[g], quantile[mask])]
        _, first = np.unique(drawn, return_index=True)
        items = drawn[np.sort(first)][:k]
        n_test = min(max(1, int(round(test_fraction * len(items)))), len(items) - 1)
        perm = rng.permutation(len(items))
        train[u] = np.unique(items[perm[n_test:]])
        test_items = np.unique(items[perm[:n_test]])
        if len(test_items):
            test[u] = test_items

    ds = InteractionDataset(num_users=num_users, num_items=num_items, train=train, test=test)
    ds.validate()
    return ds
