import numpy as np
import pytest

from uxsid import numerics as nm
from uxsid.model import ForwardTrace, ModelConfig
from uxsid.sidgen import CodebookTrainConfig, train_codebooks
from uxsid.synthdata import WorldConfig, attach_sids, generate
from uxsid.trainer import (
    AdamState, TrainingExample, adam_step, eval_auc, eval_uauc, eval_wuauc,
    interest_recall_at_k, train, write_training_log,
)


def brute_force_auc(scores, labels):
    """Pair-counting oracle: correct pairs + half credit for ties."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    if not pos or not neg:
        return None
    total = 0.0
    for p in pos:
        for n in neg:
            total += 1.0 if p > n else (0.5 if p == n else 0.0)
    return total / (len(pos) * len(neg))


class TestAdam:
    def test_first_step_hand_computed(self):
        p = nm.param("w", np.array([[0.0]]))
        state = AdamState.for_params([p])
        adam_step([p], [np.array([[1.0]])], state, lr=0.001)
        # m_hat = 1, v_hat = 1: update = -lr / (1 + 1e-8)
        assert p.value[0, 0] == pytest.approx(-0.001 / (1.0 + 1e-8), abs=1e-15)
        assert state.t == 1

    def test_zero_gradient_leaves_params_and_decays_moments(self):
        p = nm.param("w", np.array([[2.0]]))
        state = AdamState.for_params([p])
        adam_step([p], [np.array([[1.0]])], state, lr=0.001)
        v_before = state.v[0].copy()
        value_before = p.value.copy()
        for _ in range(50):
            adam_step([p], [np.zeros((1, 1))], state, lr=0.001)
        # zero gradient: moments decay toward zero, update magnitude shrinks
        assert state.v[0][0, 0] < v_before[0, 0]
        assert abs(state.m[0][0, 0]) < 1e-3
        assert abs(p.value[0, 0] - value_before[0, 0]) < 0.05

    def test_non_finite_gradient_skips_step(self):
        p = nm.param("w", np.array([[1.0]]))
        state = AdamState.for_params([p])
        adam_step([p], [np.array([[np.nan]])], state, lr=0.001)
        assert p.value[0, 0] == 1.0
        assert state.skipped == 1 and state.t == 0

    def test_identical_runs_identical_trajectories(self):
        rng = np.random.default_rng(0)
        grads = [rng.normal(size=(3, 2)) for _ in range(20)]
        outs = []
        for _ in range(2):
            p = nm.param("w", np.ones((3, 2)))
            state = AdamState.for_params([p])
            for g in grads:
                adam_step([p], [g], state, lr=0.01)
            outs.append(p.value.tobytes())
        assert outs[0] == outs[1]

    def test_rejects_bad_lr(self):
        p = nm.param("w", np.ones((1, 1)))
        with pytest.raises(ValueError):
            adam_step([p], [np.ones((1, 1))], AdamState.for_params([p]), lr=0.0)


class TestAuc:
    def test_perfect_ordering(self):
        assert eval_auc([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == 1.0

    def test_worked_example(self):
        assert eval_auc([0.9, 0.8, 0.7, 0.6], [1, 0, 1, 0]) == 0.75

    def test_matches_pair_counting_oracle_with_ties(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            n = int(rng.integers(4, 30))
            scores = rng.integers(0, 5, size=n) / 4.0  # heavy ties
            labels = rng.integers(0, 2, size=n)
            expected = brute_force_auc(list(scores), list(labels))
            got = eval_auc(scores, labels)
            if expected is None:
                assert got is None
            else:
                assert got == pytest.approx(expected, abs=1e-12)

    def test_random_scores_near_half(self):
        rng = np.random.default_rng(2)
        scores = rng.uniform(size=10000)
        labels = np.array([0, 1] * 5000)
        assert eval_auc(scores, labels) == pytest.approx(0.5, abs=0.02)

    def test_single_class_returns_none(self):
        assert eval_auc([0.5, 0.7], [1, 1]) is None
        assert eval_auc([0.5, 0.7], [0, 0]) is None

    def test_invariant_under_monotone_transform(self):
        rng = np.random.default_rng(3)
        scores = rng.normal(size=200)
        labels = rng.integers(0, 2, size=200)
        base = eval_auc(scores, labels)
        assert eval_auc(np.exp(scores), labels) == pytest.approx(base, abs=1e-12)
        assert eval_auc(3 * scores - 7, labels) == pytest.approx(base, abs=1e-12)


class TestGroupedAuc:
    def test_single_eligible_user(self):
        scores = [0.9, 0.1, 0.8]
        labels = [1, 0, 1]
        users = [5, 5, 5]
        assert eval_uauc(scores, labels, users) == 1.0
        assert eval_wuauc(scores, labels, users) == 1.0

    def test_two_user_worked_example(self):
        # user a: AUC 1.0 over 2 impressions; user b: AUC 0.5 over 6
        scores = [0.9, 0.1] + [0.5, 0.5, 0.5, 0.5, 0.5, 0.5]
        labels = [1, 0] + [1, 0, 1, 0, 1, 0]
        users = ["a"] * 2 + ["b"] * 6
        assert eval_uauc(scores, labels, users) == pytest.approx(0.75)
        assert eval_wuauc(scores, labels, users) == pytest.approx(0.625)

    def test_all_single_class_users_return_none(self):
        assert eval_uauc([0.1, 0.9], [1, 0], ["a", "b"]) is None
        assert eval_wuauc([0.1, 0.9], [1, 0], ["a", "b"]) is None

    def test_uauc_equals_wuauc_for_equal_group_sizes(self):
        rng = np.random.default_rng(4)
        scores, labels, users = [], [], []
        for u in range(10):
            scores.extend(rng.uniform(size=6))
            labels.extend([1, 1, 1, 0, 0, 0])
            users.extend([u] * 6)
        assert eval_uauc(scores, labels, users) == pytest.approx(
            eval_wuauc(scores, labels, users), abs=1e-12)


def make_trace(scores):
    scores = np.asarray(scores, dtype=np.float64)
    return ForwardTrace(global_scores=scores, anchor_scores=np.ones(2) / 2,
                        e_global=np.zeros(4), e_local=np.zeros(4),
                        interests=np.zeros((2, 4)))


class TestInterestRecall:
    def test_all_match(self):
        trace = make_trace([0.5, 0.3, 0.2])
        assert interest_recall_at_k(trace, [7, 7, 7], 7, k=2) == 1.0

    def test_worked_example(self):
        trace = make_trace([0.4, 0.3, 0.2, 0.1])
        assert interest_recall_at_k(trace, [1, 2, 1, 1], 1, k=2) == 0.5

    def test_absent_target(self):
        trace = make_trace([0.4, 0.3, 0.2, 0.1])
        assert interest_recall_at_k(trace, [2, 2, 3, 3], 9, k=3) == 0.0

    def test_k_larger_than_length(self):
        trace = make_trace([0.6, 0.4])
        assert interest_recall_at_k(trace, [5, 5], 5, k=50) == 1.0

    def test_ties_break_to_earlier_position(self):
        trace = make_trace([0.25, 0.25, 0.25, 0.25])
        assert interest_recall_at_k(trace, [8, 1, 1, 1], 8, k=1) == 1.0
        assert interest_recall_at_k(trace, [1, 8, 8, 8], 8, k=1) == 0.0

    def test_bounds(self):
        rng = np.random.default_rng(5)
        for _ in range(30):
            n = int(rng.integers(1, 20))
            trace = make_trace(rng.uniform(size=n))
            sids = rng.integers(0, 3, size=n)
            r = interest_recall_at_k(trace, sids, 1, k=int(rng.integers(1, 25)))
            assert 0.0 <= r <= 1.0


def small_world(seed=0):
    wcfg = WorldConfig(n_clusters=6, items_per_cluster=15, n_users=60, seq_len=80,
                       interests_per_user=3, n_impressions=6, label_noise=0.05,
                       seed=seed)
    ds = generate(wcfg)
    cb = train_codebooks(ds.items, 2, 6, CodebookTrainConfig(seed=seed))
    attach_sids(ds, cb)
    cfg = ModelConfig(n_items=ds.n_items, n_users=60, n_sids=cb.per_level,
                      embed_dim=8, n_anchors=4, head_sizes=(16, 2),
                      n_epochs=5, batch_size=16, lr=0.01, seed=seed)
    return ds, cfg


class TestTrainLoop:
    def test_loss_decreases_over_epochs(self):
        for seed in (0, 1, 2):
            ds, cfg = small_world(seed)
            result = train(ds, cfg)
            assert not result.diverged
            assert result.log[-1]["train_loss"] < result.log[0]["train_loss"]

    def test_training_is_deterministic(self, tmp_path):
        from uxsid.model import save_checkpoint

        blobs = []
        for name in ("a.uxmd", "b.uxmd"):
            ds, cfg = small_world(3)
            result = train(ds, cfg)
            save_checkpoint(result.model, tmp_path / name)
            blobs.append((tmp_path / name).read_bytes())
        assert blobs[0] == blobs[1]

    def test_log_csv_columns(self, tmp_path):
        ds, cfg = small_world(0)
        cfg.n_epochs = 1
        result = train(ds, cfg, log_path=tmp_path / "log.csv")
        header = (tmp_path / "log.csv").read_text().splitlines()[0]
        assert header == "epoch,train_loss,ortho_term,val_auc,val_uauc,val_wuauc,int_r_at_50"
        assert len(result.log) == 1

    def test_empty_train_split_rejected(self):
        ds, cfg = small_world(0)
        ds.train.clear()
        with pytest.raises(ValueError):
            train(ds, cfg)

    def test_divergence_aborts(self):
        from uxsid.model import UxsidModel

        ds, cfg = small_world(0)
        cfg.n_epochs = 4
        model = UxsidModel(cfg)
        model.p.item_emb.value[0, 0] = np.nan
        result = train(ds, cfg, model=model)
        assert result.diverged
        assert result.log == []  # aborted inside the first epoch


def test_write_training_log_formats_missing_values(tmp_path):
    rows = [{"epoch": 1, "train_loss": 0.5, "ortho_term": 1.0,
             "val_auc": None, "val_uauc": "", "val_wuauc": None, "int_r_at_50": None}]
    write_training_log(rows, tmp_path / "log.csv")
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[1] == "1,0.500000,1.000000,,,,"
