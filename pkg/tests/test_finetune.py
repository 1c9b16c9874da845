import math
from fractions import Fraction

import numpy as np
import pytest

import crossmodal.finetune as F
import crossmodal.model as M
from crossmodal.config import TrainParams
from crossmodal.errors import (
    DataFormatError,
    DegenerateClassError,
    UnsupportedOperationError,
)
from crossmodal.tensor import Tensor

from conftest import tiny_config


class TestBinarize:
    @pytest.mark.parametrize("score,expected", [(0.0, 0), (0.01, 1), (3.0, 1), (1.5, 1)])
    def test_strict_threshold(self, score, expected):
        assert F.binarize(np.array([score]))[0] == expected

    def test_out_of_range_rejected(self):
        with pytest.raises(DataFormatError):
            F.binarize(np.array([3.5]))
        with pytest.raises(DataFormatError):
            F.binarize(np.array([-0.1]))

    def test_idempotent_and_order_independent(self):
        rng = np.random.default_rng(0)
        scores = rng.uniform(0, 3, size=24)
        once = F.binarize(scores)
        assert np.array_equal(F.binarize(once.astype(float)), once)
        perm = rng.permutation(24)
        assert np.array_equal(F.binarize(scores[perm]), once[perm])


class TestClassWeights:
    def test_balanced_gives_unit_weights(self):
        targets = np.array([[1], [0], [1], [0]])
        pos, neg = F.class_weights(targets)
        assert pos[0] == 1.0 and neg[0] == 1.0

    def test_three_to_one_hand_case(self):
        targets = np.array([[1], [1], [1], [0]])
        pos, neg = F.class_weights(targets)
        assert np.isclose(pos[0], 2 / 3) and np.isclose(neg[0], 2.0)

    def test_weighted_masses_balance_exactly(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            n = int(rng.integers(4, 40))
            targets = rng.integers(0, 2, size=(n, 3))
            if ((targets.sum(axis=0) == 0) | (targets.sum(axis=0) == n)).any():
                continue
            pos, neg = F.class_weights(targets)
            for j in range(3):
                n_pos = int(targets[:, j].sum())
                w_pos = Fraction(n, 2 * n_pos)
                w_neg = Fraction(n, 2 * (n - n_pos))
                assert w_pos * n_pos == w_neg * (n - n_pos)  # exact rational identity
                assert np.isclose(pos[j], float(w_pos)) and np.isclose(neg[j], float(w_neg))

    def test_degenerate_class_instructs_resampling(self):
        with pytest.raises(DegenerateClassError, match="resample"):
            F.class_weights(np.array([[1], [1]]))


class TestWeightedBce:
    def test_half_probabilities_unit_weights(self):
        probs = Tensor(np.full(6, 0.5))
        loss = F.weighted_bce(probs, np.array([1, 0, 1, 0, 1, 0]), np.ones(6), np.ones(6))
        assert np.isclose(loss.item(), 6 * math.log(2), atol=1e-12)

    def test_perfect_predictions_near_zero(self):
        targets = np.array([1, 0, 1, 0, 1, 1])
        probs = Tensor(np.where(targets, 1.0 - 1e-9, 1e-9))
        loss = F.weighted_bce(probs, targets, np.ones(6), np.ones(6))
        assert loss.item() < 1e-7

    def test_hand_case_with_asymmetric_weights(self):
        probs = np.array([0.8, 0.3, 0.6, 0.9, 0.2, 0.5])
        targets = np.array([1, 0, 0, 1, 1, 0])
        pos_w = np.full(6, 2.0)
        neg_w = np.full(6, 2 / 3)
        loss = F.weighted_bce(Tensor(probs), targets, pos_w, neg_w).item()
        expected = 0.0
        for p, t in zip(probs, targets):
            w = 2.0 if t else 2 / 3
            expected += w * (-(t * math.log(p) + (1 - t) * math.log(1 - p)))
        assert np.isclose(loss, expected, atol=1e-12)

    def test_saturated_probability_clamped_and_counted(self):
        before = F.clamp_events
        probs = Tensor(np.array([1.0, 0.5, 0.5, 0.5, 0.5, 0.0]))
        loss = F.weighted_bce(probs, np.array([0, 0, 0, 0, 0, 1]), np.ones(6), np.ones(6))
        assert math.isfinite(loss.item())
        assert F.clamp_events == before + 1


class TestMetrics:
    def test_perfect_classifier(self):
        targets = np.array([1, 0, 1, 1, 0])
        assert F.weighted_accuracy(targets, targets) == 1.0
        assert F.f1(targets, targets) == 1.0

    def test_all_positive_predictor_is_half(self):
        targets = np.array([1] * 7 + [0] * 3)
        preds = np.ones(10, dtype=int)
        assert F.weighted_accuracy(preds, targets) == 0.5

    def test_f1_no_positive_predictions(self):
        assert F.f1(np.zeros(5, dtype=int), np.array([1, 1, 0, 0, 0])) == 0.0

    def test_f1_hand_count(self):
        # TP=2, FP=1, FN=1
        preds = np.array([1, 1, 1, 0, 0])
        targets = np.array([1, 1, 0, 1, 0])
        assert F.f1(preds, targets) == pytest.approx(2 / 3, abs=0)

    def test_degenerate_split_reports_none(self):
        assert F.weighted_accuracy(np.array([1, 0]), np.array([1, 1])) is None

    def test_matches_brute_force_counting(self):
        rng = np.random.default_rng(2)
        for _ in range(300):
            n = int(rng.integers(1, 40))
            preds = rng.integers(0, 2, size=n)
            targets = rng.integers(0, 2, size=n)
            tp = sum(1 for p, t in zip(preds, targets) if p == 1 and t == 1)
            fp = sum(1 for p, t in zip(preds, targets) if p == 1 and t == 0)
            tn = sum(1 for p, t in zip(preds, targets) if p == 0 and t == 0)
            fn = sum(1 for p, t in zip(preds, targets) if p == 0 and t == 1)
            if tp + fn and tn + fp:
                expected = float((Fraction(tp, tp + fn) + Fraction(tn, tn + fp)) / 2)
                assert F.weighted_accuracy(preds, targets) == expected
            else:
                assert F.weighted_accuracy(preds, targets) is None
            denom = 2 * tp + fp + fn
            expected_f1 = float(Fraction(2 * tp, denom)) if denom else 0.0
            assert F.f1(preds, targets) == expected_f1


class TestReport:
    def _fixed_report(self):
        preds = np.array([[1, 0, 1], [1, 1, 1], [0, 0, 1], [1, 0, 1]])
        targets = np.array([[1, 0, 1], [0, 1, 1], [0, 0, 1], [1, 1, 1]])
        return F.build_report(preds, targets, names=("alpha", "beta", "gamma"))

    def test_counts_sum_to_dataset_size(self):
        report = self._fixed_report()
        for emotion in report.emotions:
            assert emotion.tp + emotion.fp + emotion.tn + emotion.fn == 4

    def test_metrics_in_unit_interval(self):
        report = self._fixed_report()
        for emotion in report.emotions:
            if emotion.wa is not None:
                assert 0.0 <= emotion.wa <= 1.0
            assert 0.0 <= emotion.f1 <= 1.0

    def test_undefined_wa_excluded_from_macro(self):
        report = self._fixed_report()
        assert report.wa_undefined == ["gamma"]  # no negatives for gamma
        defined = [e.wa for e in report.emotions if e.wa is not None]
        assert report.macro_wa == pytest.approx(float(np.mean(defined)))

    def test_text_format_golden(self):
        # beta: TP=1, FP=0, FN=1 -> precision 1, recall 1/2, F1 = 2/3.
        expected = (
            "emotion           wa        f1     tp     fp     tn     fn\n"
            "alpha       0.750000  0.800000      2      1      1      0\n"
            "beta        0.750000  0.666667      1      0      2      1\n"
            "gamma            n/a  1.000000      4      0      0      0\n"
            "macro       0.750000  0.822222\n"
            "wa undefined for: gamma (excluded from macro)\n"
        )
        assert self._fixed_report().to_text() == expected

    def test_kv_format_stable(self):
        kv = self._fixed_report().to_kv()
        assert "emotion.alpha.wa=0.75" in kv
        assert "macro.f1=" in kv
        assert "wa_undefined=gamma" in kv


class TestAblate:
    def _example(self, small_corpus):
        return small_corpus["examples"][0]

    def test_empty_drop_is_identity(self, small_corpus):
        ex = self._example(small_corpus)
        assert F.ablate(ex, set()) is ex

    def test_drop_both_zeroes_features(self, small_corpus):
        ex = self._example(small_corpus)
        out = F.ablate(ex, {"audio", "visual"})
        assert not out.audio.any() and not out.visual.any()
        assert out.audio.shape == ex.audio.shape
        assert out.visual.shape == ex.visual.shape
        assert out.words == ex.words

    def test_drop_text_rejected(self, small_corpus):
        with pytest.raises(UnsupportedOperationError, match="anchor"):
            F.ablate(self._example(small_corpus), {"text"})

    def test_single_drop_leaves_other_untouched(self, small_corpus):
        ex = self._example(small_corpus)
        out = F.ablate(ex, {"audio"})
        assert not out.audio.any()
        assert np.array_equal(out.visual, ex.visual)


class TestFinetuneLoop:
    def _run(self, small_corpus, runs, seed, epochs=2, base=None):
        train = TrainParams(
            epochs=epochs, batch_size=8, warmup_steps=20, lr_scale=1.0,
            holdout_fraction=0.1, runs=runs,
        )
        return F.finetune_loop(
            base, small_corpus["examples"], small_corpus["vocab"],
            small_corpus["config"], train, epochs, seed, runs,
        )

    def test_single_run_trains(self, small_corpus):
        result = self._run(small_corpus, runs=1, seed=0)
        assert result.selected_run == 0
        assert len(result.runs) == 1
        assert len(result.report.emotions) == 6

    def test_same_seed_same_selection(self, small_corpus):
        a = self._run(small_corpus, runs=2, seed=3)
        b = self._run(small_corpus, runs=2, seed=3)
        assert a.selected_run == b.selected_run
        assert a.report.to_kv() == b.report.to_kv()
        for key in a.weights.params:
            assert np.array_equal(a.weights.params[key], b.weights.params[key])

    def test_selection_maximizes_dev_score(self, small_corpus):
        result = self._run(small_corpus, runs=3, seed=4)
        best = max(r.best_dev_score for r in result.runs)
        assert result.runs[result.selected_run].best_dev_score == best

    def test_splits_are_disjoint_and_cover(self, small_corpus):
        result = self._run(small_corpus, runs=1, seed=5)
        ids = result.split_ids
        all_ids = ids["train"] + ids["dev"] + ids["test"]
        assert len(set(all_ids)) == len(all_ids) == len(small_corpus["examples"])

    def test_pretrained_init_reuses_encoder_fresh_head(self, small_corpus):
        config = small_corpus["config"]
        base = M.init_weights(config, 77)
        result = self._run(small_corpus, runs=1, seed=6, epochs=0, base=base)
        # epochs=0: weights stay at the per-run initialization
        assert "head.mlm.weight" not in result.weights.params
        assert "head.emotion.weight" in result.weights.params
        assert np.array_equal(
            result.weights.params["enc.text.0.attn.wq"],
            base.params["enc.text.0.attn.wq"],
        )
        assert not np.array_equal(
            result.weights.params["head.emotion.weight"],
            base.params["head.emotion.weight"],
        )
