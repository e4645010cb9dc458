import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from treedex.codebooks import (
    AffinityPool,
    IndexTrainConfig,
    LevelCodebook,
    MatrixAdam,
    affinity,
    build_hierarchy,
    distance,
    finalize,
    flops_penalty,
    initial_residual_state,
    joint_step_grads,
    joint_train_step,
    pseudo_embedding,
    reconstruction_loss,
    residual_step,
    sq_distances,
    temperature,
    warmup_weight,
)
from treedex.data import InteractionDataset, batch_iterator
from treedex.model import ModelConfig, TwoTowerModel


class TestDistance:
    def test_zero_for_equal(self):
        v = np.array([1.0, 2.0, 3.0])
        assert distance(v, v) == 0.0

    def test_hand_value(self):
        assert distance(np.array([1.0, 0.0]), np.array([0.0, 1.0])) == 2.0

    def test_symmetry(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=4), rng.normal(size=4)
        assert distance(a, b) == pytest.approx(distance(b, a), abs=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="mismatch"):
            distance(np.zeros(2), np.zeros(3))

    def test_matches_pairwise_helper(self):
        rng = np.random.default_rng(1)
        x, c = rng.normal(size=(5, 3)), rng.normal(size=(4, 3))
        d2 = sq_distances(x, c)
        for i in range(5):
            for j in range(4):
                assert d2[i, j] == pytest.approx(distance(x[i], c[j]), abs=1e-9)


class TestAffinity:
    def test_alpha_zero_uniform(self):
        np.testing.assert_allclose(affinity(np.array([0.3, 1.0, 5.0, 2.0]), 0.0), 0.25)

    def test_softmax_hand_value(self):
        a = affinity(np.array([0.0, 1.0]), 1.0)
        np.testing.assert_allclose(a, [0.7310585786300049, 0.2689414213699951], atol=1e-12)

    def test_hard_limit(self):
        a = affinity(np.array([0.0, 0.01, 5.0]), 1e6)
        assert np.argmax(a) == 0
        assert a[0] >= 0.999

    def test_empty_raises(self):
        with pytest.raises(ValueError):
            affinity(np.zeros(0), 1.0)

    def test_nonfinite_raises(self):
        with pytest.raises(ValueError):
            affinity(np.array([np.inf, 1.0]), 1.0)

    @given(
        st.lists(st.floats(0, 1e4), min_size=1, max_size=16),
        st.floats(0, 1e3),
    )
    @settings(max_examples=100, deadline=None)
    def test_sums_to_one_and_tracks_argmin(self, dists, alpha):
        d = np.array(dists)
        a = affinity(d, alpha)
        assert abs(a.sum() - 1.0) <= 1e-9
        # strictly positive in exact arithmetic; float underflow may flush to 0
        assert (a >= 0).all()
        if alpha * (d.max() - d.min()) > 1e-9:
            # argmin wins whenever alpha resolves the distance spread at all
            assert d[np.argmax(a)] <= d.min() + 1e-12 * max(1.0, d.max())

    def test_strictly_positive_at_moderate_alpha(self):
        a = affinity(np.array([0.0, 5.0, 20.0]), 10.0)
        assert (a > 0).all()


class TestPseudoEmbedding:
    def test_one_hot_returns_node(self):
        nodes = np.array([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(pseudo_embedding(np.array([0.0, 1.0]), nodes), nodes[1])

    def test_uniform_returns_centroid(self):
        nodes = np.array([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_allclose(pseudo_embedding(np.array([0.5, 0.5]), nodes), [2.0, 3.0])

    def test_weighted_hand_value(self):
        nodes = np.array([[0.0, 0.0], [1.0, 1.0]])
        out = pseudo_embedding(np.array([0.7310585786300049, 0.2689414213699951]), nodes)
        np.testing.assert_allclose(out, [0.2689414213699951, 0.2689414213699951], atol=1e-12)


class TestSchedules:
    def _cfg(self, **kw):
        defaults = dict(levels=2, node_counts=[4], max_alpha=10.0, exp=2.0, max_iters=100)
        defaults.update(kw)
        return IndexTrainConfig(**defaults)

    def test_endpoints(self):
        cfg = self._cfg()
        assert temperature(0, cfg) == 0.0
        assert temperature(100, cfg) == 10.0

    def test_hand_value(self):
        assert temperature(50, self._cfg()) == pytest.approx(2.5)

    def test_clamp_beyond_max(self, caplog):
        assert temperature(101, self._cfg()) == 10.0

    def test_non_decreasing(self):
        cfg = self._cfg(exp=0.5)
        vals = [temperature(i, cfg) for i in range(101)]
        assert all(b >= a for a, b in zip(vals, vals[1:]))

    def test_warmup(self):
        assert warmup_weight(0, 100, 0.8) == 0.0
        assert warmup_weight(100, 100, 0.8) == 0.8
        assert warmup_weight(250, 100, 0.8) == 0.8
        assert warmup_weight(25, 100, 0.8) == pytest.approx(0.2)


class TestFlopsPenalty:
    def test_uniform_matrix(self):
        assert flops_penalty(np.full((6, 10), 0.1)) == pytest.approx(0.1, abs=1e-12)

    def test_collapsed_matrix(self):
        rows = np.zeros((5, 10))
        rows[:, 0] = 1.0
        assert flops_penalty(rows) == pytest.approx(1.0)

    def test_single_node(self):
        assert flops_penalty(np.ones((7, 1))) == pytest.approx(1.0)

    @given(st.integers(1, 8), st.integers(1, 12), st.integers(0, 2**31 - 1))
    @settings(max_examples=60, deadline=None)
    def test_row_stochastic_bounds(self, k, rows, seed):
        rng = np.random.default_rng(seed)
        a = rng.dirichlet(np.ones(k), size=rows)
        val = flops_penalty(a)
        assert 1.0 / k - 1e-9 <= val <= 1.0 + 1e-9

    def test_minimum_iff_balanced_columns(self):
        a = np.array([[0.9, 0.1], [0.1, 0.9]])  # column means uniform
        assert flops_penalty(a) == pytest.approx(0.5, abs=1e-12)


class TestAffinityPool:
    def test_keeps_recent_blocks_only(self):
        pool = AffinityPool(max_batches=3)
        for i in range(5):
            pool.push(np.full((2, 2), float(i)))
        rows = pool.rows()
        assert rows.shape == (4, 2)  # two past blocks kept; current batch completes the pool
        assert rows[0, 0] == 3.0


class TestFinalize:
    def test_single_node_collects_everything(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(10, 3))
        cb = LevelCodebook(level=2, node_embeddings=rng.normal(size=(1, 3)))
        finalize(cb, x)
        assert (cb.assignment == 0).all()
        d = ((x - cb.node_embeddings[0]) ** 2).sum(axis=1)
        assert cb.representative[0] == np.argmin(d)

    def test_two_cluster_snap_geometry(self):
        x = np.array([[0.0, 0.0], [10.0, 10.0]])
        cb = LevelCodebook(level=2, node_embeddings=np.array([[1.0, 1.0], [9.0, 9.0]]))
        finalize(cb, x)
        assert cb.assignment.tolist() == [0, 1]
        np.testing.assert_array_equal(cb.node_embeddings, x)
        assert cb.representative.tolist() == [0, 1]

    def test_saturated_codebook_identity(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(6, 4))
        cb = LevelCodebook(level=2, node_embeddings=x.copy())
        finalize(cb, x)
        assert cb.assignment.tolist() == list(range(6))
        state = residual_step(initial_residual_state(x), cb)
        assert reconstruction_loss(state.cumulative, x) == 0.0

    def test_assignment_is_argmin_after_snapping(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(40, 5))
        cb = LevelCodebook(level=2, node_embeddings=rng.normal(size=(6, 5)))
        finalize(cb, x)
        d2 = sq_distances(x, cb.node_embeddings)
        np.testing.assert_array_equal(cb.assignment, np.argmin(d2, axis=1))

    def test_ties_break_to_lowest_node(self):
        x = np.array([[0.0, 0.0]])
        cb = LevelCodebook(level=2, node_embeddings=np.array([[1.0, 0.0], [-1.0, 0.0]]))
        finalize(cb, x)
        assert cb.assignment[0] == 0

    def test_zero_node_kept_at_origin(self):
        rng = np.random.default_rng(3)
        x = rng.normal(loc=5.0, size=(10, 3))
        x[0] = [0.01, 0.0, 0.0]
        cb = LevelCodebook(level=2, node_embeddings=rng.normal(size=(3, 3)), zero_node=2)
        finalize(cb, x)
        np.testing.assert_array_equal(cb.node_embeddings[2], 0.0)
        if (cb.assignment == 2).any():
            assert cb.representative[2] >= 0

    def test_empty_node_keeps_learned_embedding(self):
        x = np.array([[0.0, 0.0], [0.1, 0.0]])
        far = np.array([100.0, 100.0])
        cb = LevelCodebook(level=2, node_embeddings=np.array([[0.05, 0.0], far]))
        finalize(cb, x)
        np.testing.assert_array_equal(cb.node_embeddings[1], far)
        assert cb.representative[1] == -1


class TestResiduals:
    def test_exact_quantization_zeroes_residual(self):
        x = np.array([[2.0, 3.0]])
        cb = LevelCodebook(level=2, node_embeddings=x.copy())
        finalize(cb, x)
        state = residual_step(initial_residual_state(x), cb)
        np.testing.assert_array_equal(state.residuals, 0.0)

    def test_hand_arithmetic_and_reconstruction_identity(self):
        v = np.array([[3.0, 4.0]])
        cb = LevelCodebook(level=2, node_embeddings=np.array([[1.0, 1.0]]))
        cb.assignment = np.array([0])
        cb.representative = np.array([0])
        cb.finalized = True
        state = residual_step(initial_residual_state(v), cb)
        np.testing.assert_array_equal(state.residuals, [[2.0, 3.0]])
        np.testing.assert_array_equal(state.residuals + state.cumulative, v)

    def test_unfinalized_hard_step_raises(self):
        cb = LevelCodebook(level=2, node_embeddings=np.zeros((1, 2)))
        with pytest.raises(ValueError, match="finalized"):
            residual_step(initial_residual_state(np.ones((1, 2))), cb, use_hard=True)

    def test_soft_step_uses_affinities(self):
        v = np.array([[0.0, 0.0]])
        cb = LevelCodebook(level=2, node_embeddings=np.array([[1.0, 0.0], [-1.0, 0.0]]))
        state = residual_step(initial_residual_state(v), cb, use_hard=False, alpha=0.0)
        np.testing.assert_allclose(state.residuals, [[0.0, 0.0]], atol=1e-12)

    def test_reconstruction_loss_values(self):
        assert reconstruction_loss(np.zeros((1, 2)), np.array([[1.0, 1.0]])) == 2.0
        v = np.random.default_rng(0).normal(size=(5, 3))
        q = np.random.default_rng(1).normal(size=(5, 3))
        assert reconstruction_loss(2 * q, 2 * v) == pytest.approx(4 * reconstruction_loss(q, v))
        assert reconstruction_loss(v, v) == 0.0


def _toy_setup(seed=0, n_users=30, n_items=40, dim=6, k=5):
    rng = np.random.default_rng(seed)
    train = {u: np.unique(rng.choice(n_items, size=4)) for u in range(n_users)}
    ds = InteractionDataset(num_users=n_users, num_items=n_items, train=train, test={})
    model = TwoTowerModel(ModelConfig(n_users, n_items, dim=dim, seed=seed), dtype=np.float64)
    cb = LevelCodebook(level=2, node_embeddings=rng.normal(0, 0.1, (k, dim)))
    batch = next(batch_iterator(ds, 16, 1, rng_seed=seed))
    return ds, model, cb, batch


class TestJointStep:
    def test_zero_weights_leave_nodes_unchanged(self):
        _, model, cb, batch = _toy_setup()
        before = cb.node_embeddings.copy()
        opt = MatrixAdam(cb.node_embeddings.shape, lr=0.05)
        joint_train_step(model, cb, batch, alpha=1.0, index_loss_weight=0.0, node_opt=opt)
        np.testing.assert_array_equal(cb.node_embeddings, before)

    def test_single_item_node_loss_decreases(self):
        ds = InteractionDataset(num_users=1, num_items=1, train={0: np.array([0])}, test={})
        model = TwoTowerModel(ModelConfig(1, 1, dim=4, seed=0), dtype=np.float64)
        cb = LevelCodebook(level=2, node_embeddings=np.random.default_rng(0).normal(0, 0.1, (1, 4)))
        opt = MatrixAdam(cb.node_embeddings.shape, lr=0.05)
        batch = next(batch_iterator(ds, 1, 0, rng_seed=0))
        losses = []
        for _ in range(50):
            rep = joint_train_step(model, cb, batch, alpha=1.0, index_loss_weight=1.0, node_opt=opt)
            losses.append(rep.index_loss)
        assert all(b < a for a, b in zip(losses, losses[1:]))

    def test_gradient_check_vs_finite_differences(self):
        """Nodes, tables, and pooled balance penalty against central differences."""
        rng = np.random.default_rng(7)
        ds, model, cb, batch = _toy_setup(seed=7)
        cumulative = rng.normal(0, 0.05, (ds.num_items, model.cfg.dim))
        pool_rows = rng.dirichlet(np.ones(cb.num_nodes), size=24)

        def loss():
            rep, _, _ = joint_step_grads(
                model, cb, batch, alpha=2.5, index_loss_weight=0.8,
                flops_weight=0.4, cumulative=cumulative, pool_rows=pool_rows,
            )
            return rep.loss

        _, grads, _ = joint_step_grads(
            model, cb, batch, alpha=2.5, index_loss_weight=0.8,
            flops_weight=0.4, cumulative=cumulative, pool_rows=pool_rows,
        )
        h = 1e-4
        for _ in range(10):
            i, j = int(rng.integers(cb.num_nodes)), int(rng.integers(model.cfg.dim))
            old = cb.node_embeddings[i, j]
            cb.node_embeddings[i, j] = old + h
            lp = loss()
            cb.node_embeddings[i, j] = old - h
            lm = loss()
            cb.node_embeddings[i, j] = old
            fd = (lp - lm) / (2 * h)
            an = grads["nodes"][i, j]
            assert abs(fd - an) <= 1e-3 * max(abs(fd), abs(an), 1e-8)
        rows, gv = grads["item_rows"]
        for _ in range(5):
            ri = int(rng.integers(len(rows)))
            j = int(rng.integers(model.cfg.dim))
            r = rows[ri]
            old = model.item_table[r, j]
            model.item_table[r, j] = old + h
            lp = loss()
            model.item_table[r, j] = old - h
            lm = loss()
            model.item_table[r, j] = old
            fd = (lp - lm) / (2 * h)
            assert abs(fd - gv[ri, j]) <= 1e-3 * max(abs(fd), abs(gv[ri, j]), 1e-8)

    def test_divergence_guard(self):
        _, model, cb, batch = _toy_setup()
        model.user_table[:] = np.nan
        with pytest.raises(RuntimeError, match="diverged"):
            joint_train_step(model, cb, batch, alpha=1.0, index_loss_weight=1.0,
                             node_opt=MatrixAdam(cb.node_embeddings.shape, lr=0.1))


def _three_gaussian_setup(seed=0, per_cluster=100, dim=8, spread=0.15):
    rng = np.random.default_rng(seed)
    centers = rng.normal(0, 1.5, (3, dim))
    items = np.concatenate(
        [centers[i] + spread * rng.normal(size=(per_cluster, dim)) for i in range(3)]
    )
    labels = np.repeat(np.arange(3), per_cluster)
    n_users = 90
    train = {
        u: np.unique(rng.choice(np.arange((u % 3) * per_cluster, (u % 3 + 1) * per_cluster), size=12))
        for u in range(n_users)
    }
    ds = InteractionDataset(num_users=n_users, num_items=3 * per_cluster, train=train, test={})
    model = TwoTowerModel(ModelConfig(n_users, 3 * per_cluster, dim=dim, seed=seed))
    model.item_table[:] = items.astype(np.float32)
    for u in range(n_users):
        model.user_table[u] = centers[u % 3].astype(np.float32)
    return ds, model, labels


def _purity(assignment, labels):
    total = 0
    for k in np.unique(assignment):
        members = labels[assignment == k]
        if len(members):
            total += np.bincount(members).max()
    return total / len(labels)


class TestBuildHierarchy:
    def test_three_gaussian_recovery(self):
        ds, model, labels = _three_gaussian_setup()
        cfg = IndexTrainConfig(
            levels=2, node_counts=[3], max_alpha=50.0, exp=2.0, max_iters=800,
            flops_weight=0.1, pool_batches=8, warmup_iters=100, seed=0,
            batch_size=64, freeze_model=True, node_lr=0.05,
        )
        books, _, recon = build_hierarchy(model, ds, cfg)
        assert _purity(books[0].assignment, labels) >= 0.95

    def test_recon_monotone_in_levels_with_zero_node(self):
        ds, model, _ = _three_gaussian_setup(seed=3)
        common = dict(max_alpha=50.0, exp=2.0, max_iters=400, flops_weight=0.1,
                      pool_batches=8, warmup_iters=50, seed=1, batch_size=64,
                      freeze_model=True, node_lr=0.05, include_zero_centroid=True)
        _, _, recon2 = build_hierarchy(model, ds, IndexTrainConfig(levels=2, node_counts=[4], **common))
        _, _, recon3 = build_hierarchy(model, ds, IndexTrainConfig(levels=3, node_counts=[4, 3], **common))
        assert recon3[-1] <= recon2[-1] + 1e-9

    def test_reconstruction_identity_at_every_level(self):
        ds, model, _ = _three_gaussian_setup(seed=5)
        cfg = IndexTrainConfig(levels=3, node_counts=[5, 3], max_alpha=30.0, exp=2.0,
                               max_iters=200, warmup_iters=50, seed=2, batch_size=64,
                               freeze_model=True, node_lr=0.05)
        books, state, _ = build_hierarchy(model, ds, cfg)
        v = model.all_item_embeddings().astype(np.float64)
        np.testing.assert_allclose(state.cumulative + state.residuals, v, atol=1e-5)

    def test_bit_deterministic(self):
        ds, model, _ = _three_gaussian_setup(seed=9)
        cfg = IndexTrainConfig(levels=2, node_counts=[4], max_alpha=20.0, exp=2.0,
                               max_iters=150, warmup_iters=30, seed=4, batch_size=32,
                               freeze_model=True, node_lr=0.05)
        books_a, _, _ = build_hierarchy(model, ds, cfg)
        books_b, _, _ = build_hierarchy(model, ds, cfg)
        np.testing.assert_array_equal(books_a[0].node_embeddings, books_b[0].node_embeddings)
        np.testing.assert_array_equal(books_a[0].assignment, books_b[0].assignment)

    def test_progress_records_have_schema(self):
        ds, model, _ = _three_gaussian_setup(seed=11)
        cfg = IndexTrainConfig(levels=2, node_counts=[3], max_alpha=20.0, exp=2.0,
                               max_iters=120, warmup_iters=30, seed=4, batch_size=64,
                               freeze_model=True, node_lr=0.05)
        records = []
        build_hierarchy(model, ds, cfg, progress=records.append)
        assert records
        for rec in records:
            assert {"iter", "alpha", "index_loss", "flops_penalty", "recon_loss"} <= set(rec)

    def test_cotraining_updates_model(self):
        ds, model, _ = _three_gaussian_setup(seed=13)
        before = model.user_table.copy()
        cfg = IndexTrainConfig(levels=2, node_counts=[3], max_alpha=20.0, exp=2.0,
                               max_iters=60, warmup_iters=10, seed=4, batch_size=64,
                               freeze_model=False, node_lr=0.05, model_lr=0.01)
        build_hierarchy(model, ds, cfg)
        assert not np.array_equal(model.user_table, before)
