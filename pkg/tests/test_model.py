import numpy as np
import pytest

from treedex.data import InteractionDataset, batch_iterator, synthetic_interactions
from treedex.model import (
    ModelConfig,
    TrainConfig,
    TwoTowerModel,
    distillation_loss,
    finetune_with_pairs,
    load_checkpoint,
    save_checkpoint,
    supervised_loss,
    total_loss,
    train,
)


def _one_pair_dataset():
    return InteractionDataset(num_users=1, num_items=1, train={0: np.array([0])}, test={})


class TestEmbeddings:
    def test_init_matches_seeded_generator(self):
        cfg = ModelConfig(num_users=3, num_items=4, dim=5, seed=42)
        m = TwoTowerModel(cfg)
        rng = np.random.default_rng(42)
        expected_user = rng.normal(0.0, 0.1, (3, 5)).astype(np.float32)
        expected_item = rng.normal(0.0, 0.1, (4, 5)).astype(np.float32)
        np.testing.assert_array_equal(m.user_table, expected_user)
        np.testing.assert_array_equal(m.item_table, expected_item)

    def test_same_id_twice_identical(self):
        m = TwoTowerModel(ModelConfig(2, 2, dim=4, hidden=3, seed=0))
        np.testing.assert_array_equal(m.user_embedding(1), m.user_embedding(1))

    def test_identity_tower_returns_table_row(self):
        m = TwoTowerModel(ModelConfig(2, 2, dim=4, seed=0))
        np.testing.assert_array_equal(m.item_embedding(1), m.item_table[1])

    def test_out_of_range_raises(self):
        m = TwoTowerModel(ModelConfig(2, 2, dim=4, seed=0))
        with pytest.raises(IndexError):
            m.user_embedding(2)
        with pytest.raises(IndexError):
            m.item_embedding(-1)


class TestScore:
    def test_zero_user_gives_even_odds(self):
        m = TwoTowerModel(ModelConfig(1, 1, dim=4, seed=0))
        m.user_table[0] = 0.0
        pred = m.score(0, 0)
        assert pred.logit == 0.0
        assert pred.probability == 0.5

    def test_all_ones_d4(self):
        m = TwoTowerModel(ModelConfig(1, 1, dim=4, seed=0))
        m.user_table[0] = 1.0
        m.item_table[0] = 1.0
        pred = m.score(0, 0)
        assert pred.logit == pytest.approx(4.0)
        assert pred.probability == pytest.approx(1.0 / (1.0 + np.exp(-4.0)), abs=1e-12)

    def test_bilinearity(self):
        m = TwoTowerModel(ModelConfig(1, 1, dim=8, seed=1))
        base = m.score(0, 0).logit
        m.item_table[0] = -m.item_table[0]
        assert m.score(0, 0).logit == pytest.approx(-base, rel=1e-6)
        m.item_table[0] = -m.item_table[0]
        m.user_table[0] = 3.0 * m.user_table[0]
        assert m.score(0, 0).logit == pytest.approx(3.0 * base, rel=1e-5)


class TestLosses:
    def test_even_odds_single_sample(self):
        assert supervised_loss([[0.5]], [[1.0]], [1.0]) == pytest.approx(np.log(2), abs=1e-12)

    def test_confident_correct_goes_to_zero(self):
        assert supervised_loss([[1 - 1e-9]], [[1.0]], [1.0]) < 1e-8

    def test_two_sample_hand_value(self):
        loss = supervised_loss([[0.9], [0.2]], [[1.0], [0.0]], [1.0])
        assert loss == pytest.approx(-(np.log(0.9) + np.log(0.8)) / 2, abs=1e-12)

    def test_task_weighting(self):
        base = supervised_loss([[0.7, 0.7]], [[1.0, 1.0]], [1.0, 0.0])
        assert base == pytest.approx(-np.log(0.7), abs=1e-12)

    def test_domain_error_not_silently_clamped(self):
        with pytest.raises(ValueError, match="strictly inside"):
            supervised_loss([[1.0]], [[1.0]], [1.0])
        with pytest.raises(ValueError, match="strictly inside"):
            supervised_loss([[0.0]], [[0.0]], [1.0])

    def test_loss_nonnegative(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            p = rng.uniform(1e-6, 1 - 1e-6, (5, 2))
            y = rng.integers(0, 2, (5, 2)).astype(float)
            w = rng.uniform(0, 2, 2)
            assert supervised_loss(p, y, w) >= 0.0

    def test_distillation_matching_prediction_gives_entropy(self):
        p = np.array([[0.3], [0.8]])
        expected = float(np.mean(-(p * np.log(p) + (1 - p) * np.log(1 - p))))
        assert distillation_loss(p, p) == pytest.approx(expected, abs=1e-12)

    def test_distillation_hard_labels_reduce_to_supervised(self):
        p = np.array([[0.9], [0.2]])
        y = np.array([[1.0], [0.0]])
        assert distillation_loss(p, y) == pytest.approx(supervised_loss(p, y, [1.0]), abs=1e-12)

    def test_distillation_even_odds_is_log_two(self):
        assert distillation_loss([[0.5], [0.5]], [[0.1], [0.9]]) == pytest.approx(np.log(2), abs=1e-12)

    def test_total_loss(self):
        assert total_loss(0.5, 0.2, 0.0) == 0.5
        assert total_loss(0.5, 0.2, 1.0) == pytest.approx(0.7)
        assert total_loss(1.0, 0.25, 2.0) == pytest.approx(1.5)


class TestTraining:
    def test_lr_zero_is_noop(self):
        ds = synthetic_interactions(20, 30, 300, seed=0)
        m = TwoTowerModel(ModelConfig(ds.num_users, ds.num_items, dim=8, seed=0))
        before = {k: v.copy() for k, v in m.parameters().items()}
        train(m, ds, 2, TrainConfig(lr=0.0, batch_size=16, seed=0))
        for k, v in m.parameters().items():
            np.testing.assert_array_equal(v, before[k])

    def test_same_seed_identical_loss_trace(self):
        ds = synthetic_interactions(20, 30, 300, seed=0)
        reports = []
        for _ in range(2):
            m = TwoTowerModel(ModelConfig(ds.num_users, ds.num_items, dim=8, seed=3))
            reports.append(train(m, ds, 3, TrainConfig(lr=0.01, batch_size=16, seed=1)))
        assert reports[0].epoch_losses == reports[1].epoch_losses

    def test_overfit_single_pair(self):
        ds = _one_pair_dataset()
        m = TwoTowerModel(ModelConfig(1, 1, dim=8, seed=0))
        train(m, ds, 200, TrainConfig(lr=0.05, batch_size=1, negatives=0, seed=0))
        assert m.score(0, 0).probability > 0.95

    def test_divergence_aborts_with_diagnostic(self):
        ds = synthetic_interactions(10, 20, 150, seed=0)
        m = TwoTowerModel(ModelConfig(ds.num_users, ds.num_items, dim=4, seed=0))
        m.user_table[0, 0] = np.nan
        with pytest.raises(RuntimeError, match="diverged"):
            train(m, ds, 1, TrainConfig(lr=0.01, batch_size=8, seed=0))

    def test_training_reduces_loss(self):
        ds = synthetic_interactions(50, 60, 1500, seed=1)
        m = TwoTowerModel(ModelConfig(ds.num_users, ds.num_items, dim=16, seed=0))
        report = train(m, ds, 4, TrainConfig(lr=0.02, batch_size=64, seed=0))
        assert report.epoch_losses[-1] < report.epoch_losses[0]


class TestGradientCheck:
    def test_analytic_matches_central_differences(self):
        """Ten random parameters across tables and towers, rel err < 1e-3."""
        ds = synthetic_interactions(15, 25, 250, seed=2)
        m = TwoTowerModel(ModelConfig(ds.num_users, ds.num_items, dim=5, hidden=4, seed=1), dtype=np.float64)
        batch = next(batch_iterator(ds, 12, 1, rng_seed=0))

        def loss():
            val, _ = m.loss_and_grads(batch.users, batch.items, batch.labels)
            return val

        _, grads = m.loss_and_grads(batch.users, batch.items, batch.labels)
        rng = np.random.default_rng(0)
        h = 1e-4
        checked = 0
        targets = []
        rows, gu = grads["user_rows"]
        targets += [(m.user_table, (rows[rng.integers(len(rows))],), gu, rows) for _ in range(3)]
        rows_i, gv = grads["item_rows"]
        targets += [(m.item_table, (rows_i[rng.integers(len(rows_i))],), gv, rows_i) for _ in range(3)]
        for table, (row,), g, rows_all in targets:
            col = int(rng.integers(m.cfg.dim))
            old = table[row, col]
            table[row, col] = old + h
            lp = loss()
            table[row, col] = old - h
            lm = loss()
            table[row, col] = old
            fd = (lp - lm) / (2 * h)
            an = g[np.searchsorted(rows_all, row), col]
            assert abs(fd - an) <= 1e-3 * max(abs(fd), abs(an), 1e-8)
            checked += 1
        for tower_key, tower in (("user_tower", m.user_tower), ("item_tower", m.item_tower)):
            for name, g in grads[tower_key].items():
                p = getattr(tower, name)
                pos = tuple(int(rng.integers(s)) for s in p.shape)
                old = p[pos]
                p[pos] = old + h
                lp = loss()
                p[pos] = old - h
                lm = loss()
                p[pos] = old
                fd = (lp - lm) / (2 * h)
                assert abs(fd - g[pos]) <= 1e-3 * max(abs(fd), abs(g[pos]), 1e-8)
                checked += 1
                if checked >= 10:
                    return
        assert checked >= 10


class TestFinetune:
    def test_empty_pairs_is_noop(self, caplog):
        m = TwoTowerModel(ModelConfig(3, 3, dim=4, seed=0))
        before = m.user_table.copy()
        finetune_with_pairs(m, np.array([], dtype=np.int64), np.zeros((0, 4)), epochs=5)
        np.testing.assert_array_equal(m.user_table, before)

    def test_single_pair_probability_increases_monotonically(self):
        m = TwoTowerModel(ModelConfig(1, 1, dim=6, seed=0))
        node = np.random.default_rng(1).normal(0, 0.5, 6)
        probs = []
        for _ in range(100):
            finetune_with_pairs(m, np.array([0]), node[None, :], epochs=1, lr=0.05)
            logit = float(m.user_embedding(0).astype(np.float64) @ node)
            probs.append(1.0 / (1.0 + np.exp(-logit)))
        assert all(b > a for a, b in zip(probs, probs[1:]))

    def test_duplicated_pairs_equal_doubled_weight(self):
        cfg = ModelConfig(4, 2, dim=5, seed=2)
        node = np.random.default_rng(3).normal(0, 0.3, (3, 5))
        users = np.array([0, 1, 2])

        m_dup = TwoTowerModel(cfg)
        finetune_with_pairs(
            m_dup, np.concatenate([users, users]), np.concatenate([node, node]), epochs=3, lr=0.01
        )
        m_w = TwoTowerModel(cfg)
        finetune_with_pairs(m_w, users, node, epochs=3, lr=0.01, weights=np.full(3, 2.0))
        np.testing.assert_array_equal(m_dup.user_table, m_w.user_table)

    def test_unknown_user_raises(self):
        m = TwoTowerModel(ModelConfig(2, 2, dim=4, seed=0))
        with pytest.raises(IndexError):
            finetune_with_pairs(m, np.array([5]), np.zeros((1, 4)), epochs=1)


class TestCheckpoint:
    def test_roundtrip_exact(self, tmp_path):
        m = TwoTowerModel(ModelConfig(6, 7, dim=4, hidden=3, seed=5))
        path = tmp_path / "model.ckpt"
        save_checkpoint(m, path)
        back = load_checkpoint(path)
        for (ka, va), (kb, vb) in zip(sorted(m.parameters().items()), sorted(back.parameters().items())):
            assert ka == kb
            np.testing.assert_array_equal(va, vb)
        assert back.cfg.num_users == 6
        assert back.cfg.hidden == 3

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "model.ckpt"
        m = TwoTowerModel(ModelConfig(2, 2, dim=4, seed=0))
        save_checkpoint(m, path)
        blob = bytearray(path.read_bytes())
        blob[0] = ord("X")
        path.write_bytes(bytes(blob))
        with pytest.raises(ValueError, match="magic"):
            load_checkpoint(path)

    def test_truncated(self, tmp_path):
        path = tmp_path / "model.ckpt"
        m = TwoTowerModel(ModelConfig(2, 2, dim=4, seed=0))
        save_checkpoint(m, path)
        path.write_bytes(path.read_bytes()[:-5])
        with pytest.raises(ValueError, match="bytes"):
            load_checkpoint(path)
