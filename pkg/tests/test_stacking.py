import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fairvision.dataset import CLASS_ORDER, GenderLabel
from fairvision.stacking import (
    MetaFeaturesPred,
    MetaFeaturesProb,
    SchemaError,
    StackingError,
    ensemble_predict,
    fit_adaboost_ensemble,
    fit_logistic_ensemble,
    load_ensemble,
    load_meta,
    save_ensemble,
    save_meta,
    stack_predictions,
    stack_probabilities,
)

M, F, N = GenderLabel.MALE, GenderLabel.FEMALE, GenderLabel.NONBINARY
C3 = CLASS_ORDER


def _prob_rows(rng, n, c=3):
    raw = rng.random((n, c)) + 1e-3
    return raw / raw.sum(axis=1, keepdims=True)


class TestStackProbabilities:
    def test_three_models_stack_to_nine_columns(self):
        rng = np.random.default_rng(0)
        outs = [_prob_rows(rng, 50) for _ in range(3)]
        meta = stack_probabilities(outs, ("a", "b", "c"), C3)
        assert meta.matrix.shape == (50, 9)
        for j, out in enumerate(outs):
            np.testing.assert_array_equal(meta.matrix[:, 3 * j: 3 * (j + 1)], out)

    def test_single_model_identity(self):
        rng = np.random.default_rng(1)
        out = _prob_rows(rng, 7)
        meta = stack_probabilities([out], ("solo",), C3)
        np.testing.assert_array_equal(meta.matrix, out)

    def test_hand_checked_cells(self):
        a = np.array([[0.25, 0.75], [0.5, 0.5]])
        b = np.array([[1.0, 0.0], [0.1, 0.9]])
        meta = stack_probabilities([a, b], ("a", "b"), (M, F))
        expected = np.array([
            [0.25, 0.75, 1.0, 0.0],
            [0.5, 0.5, 0.1, 0.9],
        ])
        np.testing.assert_array_equal(meta.matrix, expected)

    def test_ragged_shapes_rejected(self):
        rng = np.random.default_rng(2)
        with pytest.raises(SchemaError, match="shape"):
            stack_probabilities([_prob_rows(rng, 5), _prob_rows(rng, 6)],
                                ("a", "b"), C3)

    def test_mismatched_class_orders_rejected(self):
        rng = np.random.default_rng(3)
        outs = [_prob_rows(rng, 4), _prob_rows(rng, 4)]
        with pytest.raises(SchemaError, match="class order"):
            stack_probabilities(outs, ("a", "b"), C3,
                                class_orders=[C3, (F, M, N)])

    def test_unnormalized_block_rejected(self):
        bad = np.full((3, 3), 0.5)
        with pytest.raises(SchemaError, match="row-sum"):
            stack_probabilities([bad], ("a",), C3)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(1, 4), st.integers(2, 3), st.integers(1, 12),
           st.integers(0, 2**16))
    def test_lossless_rearrangement(self, k, c, n, seed):
        rng = np.random.default_rng(seed)
        outs = [_prob_rows(rng, n, c) for _ in range(k)]
        meta = stack_probabilities(outs, tuple(f"m{j}" for j in range(k)),
                                   C3[:c])
        for j in range(k):
            for col in range(c):
                np.testing.assert_array_equal(
                    meta.matrix[:, j * c + col], outs[j][:, col]
                )


class TestStackPredictions:
    def test_three_models(self):
        outs = [np.zeros(20, dtype=int), np.ones(20, dtype=int),
                np.full(20, 2, dtype=int)]
        meta = stack_predictions(outs, ("a", "b", "c"), C3)
        assert meta.matrix.shape == (20, 3)
        assert all(tuple(row) == (0, 1, 2) for row in meta.matrix)

    def test_single_column_copy(self):
        out = np.array([0, 2, 1])
        meta = stack_predictions([out], ("solo",), C3)
        np.testing.assert_array_equal(meta.matrix[:, 0], out)

    def test_unequal_lengths_rejected(self):
        with pytest.raises(SchemaError, match="length"):
            stack_predictions([np.zeros(3, dtype=int), np.zeros(4, dtype=int)],
                              ("a", "b"), C3)

    def test_out_of_range_entries_rejected(self):
        with pytest.raises(SchemaError, match=r"\[0, 3\)"):
            stack_predictions([np.array([0, 3])], ("a",), C3)


def _separable_meta(n=80, seed=0):
    """Base model 'oracle' emits near-one-hot probabilities of the true label;
    two other models emit noise."""
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 3, size=n)
    oracle = np.full((n, 3), 0.05)
    oracle[np.arange(n), labels] = 0.9
    noise1, noise2 = _prob_rows(rng, n), _prob_rows(rng, n)
    meta = stack_probabilities([oracle, noise1, noise2], ("oracle", "n1", "n2"), C3)
    return meta, [C3[i] for i in labels], labels


class TestLogisticEnsemble:
    def test_separable_training_accuracy_one(self):
        meta, labels, _ = _separable_meta()
        model = fit_logistic_ensemble(meta, labels, cv_folds=4, seed=0)
        assert model.cv_report["training_accuracy"] == 1.0
        assert model.cv_report["chosen_C"] > 0

    def test_predictions_equal_truth_on_separable(self):
        meta, labels, _ = _separable_meta(seed=5)
        model = fit_logistic_ensemble(meta, labels, cv_folds=4, seed=0)
        assert ensemble_predict(model, meta) == labels

    def test_joint_permutation_invariance(self):
        meta, labels, _ = _separable_meta(n=60, seed=2)
        probe, _, _ = _separable_meta(n=25, seed=99)
        model_a = fit_logistic_ensemble(meta, labels, cv_folds=3, seed=1)
        perm = np.random.default_rng(7).permutation(len(labels))
        meta_perm = MetaFeaturesProb(matrix=meta.matrix[perm],
                                     model_order=meta.model_order,
                                     class_order=meta.class_order)
        labels_perm = [labels[i] for i in perm]
        model_b = fit_logistic_ensemble(meta_perm, labels_perm, cv_folds=3, seed=1)
        assert ensemble_predict(model_a, probe) == ensemble_predict(model_b, probe)

    def test_single_class_rejected(self):
        meta, _, _ = _separable_meta(n=20)
        with pytest.raises(StackingError, match="single class"):
            fit_logistic_ensemble(meta, [M] * 20, cv_folds=2)

    def test_non_finite_rejected(self):
        meta, labels, _ = _separable_meta(n=20)
        meta.matrix[3, 2] = np.nan
        with pytest.raises(StackingError, match="non-finite"):
            fit_logistic_ensemble(meta, labels, cv_folds=2)

    def test_too_few_rows_rejected(self):
        meta, labels, _ = _separable_meta(n=20)
        with pytest.raises(StackingError):
            fit_logistic_ensemble(meta, labels, cv_folds=25)


def _oracle_pred_meta(n=90, seed=3):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 3, size=n)
    oracle = labels.copy()
    junk1 = rng.integers(0, 3, size=n)
    junk2 = rng.integers(0, 3, size=n)
    meta = stack_predictions([oracle, junk1, junk2], ("oracle", "j1", "j2"), C3)
    return meta, [C3[i] for i in labels], labels


class TestAdaboostEnsemble:
    def test_oracle_column_perfect_on_held_out(self):
        meta, labels, _ = _oracle_pred_meta(n=120, seed=4)
        model = fit_adaboost_ensemble(meta, labels, cv_folds=3, seed=0)
        held, held_labels, _ = _oracle_pred_meta(n=60, seed=11)
        preds = ensemble_predict(model, held)
        assert preds == held_labels

    def test_degenerate_grid_names_point(self):
        meta, labels, _ = _oracle_pred_meta()
        grid = {"n_estimators": [25], "learning_rate": [1.0]}
        model = fit_adaboost_ensemble(meta, labels, grid=grid, cv_folds=3, seed=0)
        assert model.cv_report["chosen"] == {"n_estimators": 25, "learning_rate": 1.0}

    def test_empty_grid_rejected(self):
        meta, labels, _ = _oracle_pred_meta()
        with pytest.raises(StackingError, match="grid"):
            fit_adaboost_ensemble(meta, labels, grid={"n_estimators": []})

    def test_strict_raw_indices_mode(self):
        meta, labels, _ = _oracle_pred_meta()
        model = fit_adaboost_ensemble(meta, labels, cv_folds=3, seed=0,
                                      strict_raw_indices=True)
        assert model.encoding == "raw"
        assert ensemble_predict(model, meta) == labels

    def test_deterministic_under_seed(self):
        meta, labels, _ = _oracle_pred_meta()
        a = fit_adaboost_ensemble(meta, labels, cv_folds=3, seed=8)
        b = fit_adaboost_ensemble(meta, labels, cv_folds=3, seed=8)
        assert ensemble_predict(a, meta) == ensemble_predict(b, meta)
        assert a.cv_report == b.cv_report


class TestEnsemblePredict:
    def test_empty_input(self):
        meta, labels, _ = _separable_meta(n=30)
        model = fit_logistic_ensemble(meta, labels, cv_folds=3)
        empty = MetaFeaturesProb(matrix=np.zeros((0, 9)),
                                 model_order=meta.model_order,
                                 class_order=meta.class_order)
        assert ensemble_predict(model, empty) == []

    def test_duplicated_rows_duplicated_predictions(self):
        meta, labels, _ = _separable_meta(n=30)
        model = fit_logistic_ensemble(meta, labels, cv_folds=3)
        doubled = MetaFeaturesProb(
            matrix=np.vstack([meta.matrix, meta.matrix]),
            model_order=meta.model_order, class_order=meta.class_order,
        )
        preds = ensemble_predict(model, doubled)
        assert preds[:30] == preds[30:]

    def test_schema_mismatch_names_expected(self):
        meta, labels, _ = _separable_meta(n=30)
        model = fit_logistic_ensemble(meta, labels, cv_folds=3)
        other = MetaFeaturesProb(matrix=meta.matrix,
                                 model_order=("x", "y", "z"),
                                 class_order=meta.class_order)
        with pytest.raises(SchemaError, match="oracle"):
            ensemble_predict(model, other)

    def test_kind_mismatch_rejected(self):
        meta, labels, _ = _separable_meta(n=30)
        model = fit_logistic_ensemble(meta, labels, cv_folds=3)
        preds_meta, _, _ = _oracle_pred_meta(n=30)
        with pytest.raises(SchemaError, match="MetaFeaturesProb"):
            ensemble_predict(model, preds_meta)


class TestPersistence:
    def test_ensemble_round_trip(self, tmp_path):
        meta, labels, _ = _separable_meta(n=40)
        model = fit_logistic_ensemble(meta, labels, cv_folds=4, seed=2)
        save_ensemble(model, tmp_path / "ens")
        back = load_ensemble(tmp_path / "ens")
        assert back.kind == "logistic"
        assert back.model_order == model.model_order
        assert back.cv_report == model.cv_report
        assert ensemble_predict(back, meta) == ensemble_predict(model, meta)

    def test_meta_prob_round_trip(self, tmp_path):
        meta, _, _ = _separable_meta(n=12)
        back = load_meta(save_meta(meta, tmp_path / "m.csv"))
        assert isinstance(back, MetaFeaturesProb)
        assert back.model_order == meta.model_order
        assert back.class_order == meta.class_order
        np.testing.assert_allclose(back.matrix, meta.matrix, atol=1e-9)

    def test_meta_pred_round_trip(self, tmp_path):
        meta, _, _ = _oracle_pred_meta(n=9)
        back = load_meta(save_meta(meta, tmp_path / "m.csv"))
        assert isinstance(back, MetaFeaturesPred)
        np.testing.assert_array_equal(back.matrix, meta.matrix)


class TestStrongBaseProperty:
    def test_ensembles_track_strongest_base(self):
        # One base model is right 90% of the time, two are nearly random.
        rng = np.random.default_rng(42)
        n_train, n_test = 900, 300

        def draw(n):
            labels = rng.integers(0, 3, size=n)
            strong = np.where(rng.random(n) < 0.9, labels, (labels + 1) % 3)
            weak1 = np.where(rng.random(n) < 0.4, labels, rng.integers(0, 3, n))
            weak2 = np.where(rng.random(n) < 0.4, labels, rng.integers(0, 3, n))
            def probify(preds):
                p = np.full((n, 3), 0.1)
                p[np.arange(n), preds] = 0.8
                return p
            return labels, [strong, weak1, weak2], [probify(v) for v in (strong, weak1, weak2)]

        y_tr, preds_tr, probs_tr = draw(n_train)
        y_te, preds_te, probs_te = draw(n_test)
        order = ("strong", "w1", "w2")
        strongest = (preds_te[0] == y_te).mean()

        lp = fit_logistic_ensemble(
            stack_probabilities(probs_tr, order, C3), [C3[i] for i in y_tr],
            cv_folds=5, seed=0)
        lp_acc = np.mean([
            p is C3[t] for p, t in
            zip(ensemble_predict(lp, stack_probabilities(probs_te, order, C3)), y_te)
        ])
        ada = fit_adaboost_ensemble(
            stack_predictions(preds_tr, order, C3), [C3[i] for i in y_tr],
            grid={"n_estimators": [50], "learning_rate": [1.0]}, cv_folds=5, seed=0)
        ada_acc = np.mean([
            p is C3[t] for p, t in
            zip(ensemble_predict(ada, stack_predictions(preds_te, order, C3)), y_te)
        ])
        assert lp_acc >= strongest - 0.02
        assert ada_acc >= strongest - 0.02
