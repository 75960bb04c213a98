"""Metric oracles: openness, macro-F1 sweep, ranking AUC, calibration, confusion."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from osev.metrics import (
    OpenSetRecord,
    confusion_and_top_confusions,
    ece,
    macro_f1,
    open_maf1_curve,
    open_predictions,
    openness,
    read_score_dump,
    roc_auc,
    write_score_dump,
)


class TestOpenness:
    def test_closed_world_is_zero(self):
        for k in (1, 5, 100):
            assert openness(k, 0) == 0.0

    def test_reference_values(self):
        assert openness(101, 51) == pytest.approx(1.0 - math.sqrt(202.0 / 253.0), abs=1e-9)
        assert round(openness(101, 51), 5) == 0.10646
        assert openness(1, 2) == pytest.approx(1.0 - math.sqrt(0.5), abs=1e-9)
        assert round(openness(1, 2), 5) == 0.29289

    def test_monotone_in_unknowns(self):
        vals = [openness(5, i) for i in range(20)]
        assert all(a < b for a, b in zip(vals, vals[1:]))
        assert all(0.0 <= v < 1.0 for v in vals)

    def test_validation(self):
        with pytest.raises(ValueError, match="known"):
            openness(0, 1)
        with pytest.raises(ValueError, match=">= 0"):
            openness(3, -1)


def rec(probs, score, label):
    return OpenSetRecord(probs=np.asarray(probs, dtype=np.float64), score=score, label=label)


class TestOpenSetRecord:
    def test_unknown_flag(self):
        r = rec([0.5, 0.5], 0.1, 2)
        assert r.is_unknown and r.num_known == 2
        assert not rec([0.5, 0.5], 0.1, 0).is_unknown

    def test_validation(self):
        with pytest.raises(ValueError, match="K>=2"):
            rec([1.0], 0.1, 0)
        with pytest.raises(ValueError, match="non-finite"):
            rec([0.5, np.nan], 0.1, 0)
        with pytest.raises(ValueError, match="non-finite"):
            rec([0.5, 0.5], math.inf, 0)
        with pytest.raises(ValueError, match="out of range"):
            rec([0.5, 0.5], 0.1, 3)


class TestOpenPredictions:
    def test_mixed_hand_case(self):
        records = [
            rec([0.7, 0.2, 0.1], 0.3, 0),
            rec([0.1, 0.8, 0.1], 0.6, 1),
            rec([0.2, 0.3, 0.5], 0.5, 2),
            rec([0.4, 0.4, 0.2], 0.9, 3),
        ]
        np.testing.assert_array_equal(open_predictions(records, 0.55), [0, 3, 2, 3])

    def test_infinite_threshold_reduces_to_argmax(self):
        records = [
            rec([0.7, 0.2, 0.1], 0.9, 0),
            rec([0.1, 0.8, 0.1], 0.9, 1),
            rec([0.4, 0.4, 0.2], 0.9, 2),
        ]
        np.testing.assert_array_equal(open_predictions(records, math.inf), [0, 1, 0])

    def test_all_above_threshold_all_unknown(self):
        records = [rec([0.9, 0.1], 0.5, 0), rec([0.1, 0.9], 0.6, 1)]
        np.testing.assert_array_equal(open_predictions(records, 0.0), [2, 2])

    def test_empty_and_inconsistent_records_rejected(self):
        with pytest.raises(ValueError, match="no records"):
            open_predictions([], 0.5)
        with pytest.raises(ValueError, match="disagree"):
            open_predictions([rec([0.5, 0.5], 0.1, 0), rec([0.3, 0.3, 0.4], 0.1, 0)], 0.5)


class TestMacroF1:
    def test_perfect_predictions(self):
        assert macro_f1([0, 1, 2], [0, 1, 2], 3) == 1.0

    def test_balanced_half_right(self):
        assert macro_f1([0, 0, 1, 1], [0, 1, 0, 1], 2) == pytest.approx(0.5, abs=1e-15)

    def test_collapsed_predictor_on_balanced_labels(self):
        # predicted class: precision 0.5, recall 1 -> F1 = 2/3; other class 0
        assert macro_f1([0, 0, 0, 0], [0, 0, 1, 1], 2) == pytest.approx(1.0 / 3.0, abs=1e-15)

    def test_absent_class_skipped(self):
        # class 2 appears in neither array and must not dilute the mean
        assert macro_f1([0, 1], [0, 1], 3) == 1.0

    def test_sample_permutation_invariance(self):
        rng = np.random.default_rng(0)
        preds = rng.integers(0, 4, size=50)
        labels = rng.integers(0, 4, size=50)
        perm = rng.permutation(50)
        assert macro_f1(preds, labels, 4) == macro_f1(preds[perm], labels[perm], 4)

    def test_validation(self):
        with pytest.raises(ValueError, match="matching"):
            macro_f1([0, 1], [0], 2)
        with pytest.raises(ValueError, match="out of range"):
            macro_f1([0, 2], [0, 1], 2)
        with pytest.raises(ValueError, match="num_classes"):
            macro_f1([0], [0], 1)


def perfect_known_records(k, per_class):
    out = []
    for c in range(k):
        probs = np.full(k, 0.0)
        probs[c] = 1.0
        out.extend(rec(probs, 0.1, c) for _ in range(per_class))
    return out


def unknown_pool(k, class_ids, per_class, score):
    pool = {}
    for c in class_ids:
        probs = np.full(k, 1.0 / k)
        pool[c] = [rec(probs, score, k) for _ in range(per_class)]
    return pool


class TestOpenMaf1Curve:
    def test_perfect_separation_gives_constant_one(self):
        known = perfect_known_records(3, 4)
        pool = unknown_pool(3, [10, 11, 12], 4, score=0.9)
        points, scalar, scalar_std, note = open_maf1_curve(known, pool, tau=0.5, num_selections=5)
        assert note is None
        assert len(points) == 3
        for i, pt in enumerate(points, start=1):
            assert pt.num_unknown == i
            assert pt.omega == pytest.approx(openness(3, i), abs=0.0)
            assert pt.f1_mean == 1.0
            assert pt.f1_std == 0.0
            assert len(pt.f1_values) == 5
        assert scalar == 1.0
        assert scalar_std == 0.0

    def test_scalar_is_weighted_mean_of_point_means(self):
        rng = np.random.default_rng(3)
        known = [
            rec(np.eye(3)[rng.integers(0, 3)], float(rng.uniform(0, 1)), int(rng.integers(0, 3)))
            for _ in range(30)
        ]
        pool = {
            c: [rec(np.full(3, 1 / 3), float(rng.uniform(0, 1)), 3) for _ in range(8)]
            for c in (0, 1)
        }
        points, scalar, _, _ = open_maf1_curve(known, pool, tau=0.5, num_selections=4)
        omegas = np.array([pt.omega for pt in points])
        means = np.array([pt.f1_mean for pt in points])
        assert scalar == pytest.approx((omegas * means).sum() / omegas.sum(), abs=1e-12)
        assert means.min() - 1e-12 <= scalar <= means.max() + 1e-12

    def test_single_unknown_class_scalar_equals_its_f1(self):
        known = perfect_known_records(3, 4)
        pool = unknown_pool(3, [42], 4, score=0.2)  # below tau: every unknown leaks
        points, scalar, _, _ = open_maf1_curve(known, pool, tau=0.5, num_selections=3)
        assert len(points) == 1
        assert scalar == points[0].f1_mean
        assert points[0].f1_mean < 1.0

    def test_truncation_note(self):
        known = perfect_known_records(3, 2)
        pool = unknown_pool(3, [1, 2, 3, 4], 2, score=0.9)
        points, _, _, note = open_maf1_curve(known, pool, tau=0.5, max_unknown=2)
        assert len(points) == 2
        assert note == "sweep truncated to 2 of 4 unknown classes"

    def test_selections_are_reproducible(self):
        known = perfect_known_records(4, 3)
        pool = unknown_pool(4, [5, 6, 7], 3, score=0.9)
        a = open_maf1_curve(known, pool, tau=0.5, num_selections=4, seed=9)
        b = open_maf1_curve(known, pool, tau=0.5, num_selections=4, seed=9)
        assert a[0] == b[0] and a[1] == b[1]

    def test_validation(self):
        with pytest.raises(ValueError, match="no known"):
            open_maf1_curve([], {0: []}, tau=0.5)
        with pytest.raises(ValueError, match="no unknown"):
            open_maf1_curve(perfect_known_records(2, 1), {}, tau=0.5)
        with pytest.raises(ValueError, match="num_selections"):
            open_maf1_curve(perfect_known_records(2, 1), {0: []}, tau=0.5, num_selections=0)


def brute_force_auc(known, unknown):
    wins = 0.0
    for su in unknown:
        for sk in known:
            if su > sk:
                wins += 1.0
            elif su == sk:
                wins += 0.5
    return wins / (len(known) * len(unknown))


class TestRocAuc:
    def test_perfect_separation(self):
        assert roc_auc([0.1, 0.2], [0.3, 0.4]) == 1.0

    def test_all_ties(self):
        assert roc_auc([0.5, 0.5, 0.5], [0.5, 0.5]) == 0.5

    def test_one_tie_hand_case(self):
        assert roc_auc([0.1, 0.3], [0.3, 0.4]) == 0.875

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_brute_force_with_ties(self, seed):
        rng = np.random.default_rng(seed)
        # quantized scores force plenty of exact ties
        known = (rng.integers(0, 20, size=rng.integers(1, 200)) / 20.0).tolist()
        unknown = (rng.integers(0, 20, size=rng.integers(1, 200)) / 20.0).tolist()
        assert roc_auc(known, unknown) == brute_force_auc(known, unknown)

    @settings(deadline=None, max_examples=30)
    @given(st.integers(0, 10**6))
    def test_complement_rule(self, seed):
        rng = np.random.default_rng(seed)
        a = rng.integers(0, 10, size=rng.integers(1, 30)) / 10.0
        b = rng.integers(0, 10, size=rng.integers(1, 30)) / 10.0
        assert roc_auc(a, b) + roc_auc(b, a) == pytest.approx(1.0, abs=1e-12)

    def test_monotone_transform_invariance(self):
        rng = np.random.default_rng(4)
        known = rng.uniform(0, 1, size=40)
        unknown = rng.uniform(0, 1, size=30)
        base = roc_auc(known, unknown)
        assert roc_auc(np.exp(known), np.exp(unknown)) == pytest.approx(base, abs=1e-12)
        assert roc_auc(known * 100 - 3, unknown * 100 - 3) == pytest.approx(base, abs=1e-12)

    def test_validation(self):
        with pytest.raises(ValueError, match="non-empty"):
            roc_auc([], [0.5])
        with pytest.raises(ValueError, match="finite"):
            roc_auc([0.5], [np.nan])


class TestEce:
    def test_all_confident_and_correct_is_zero(self):
        assert ece(np.ones(10), np.ones(10)) == 0.0

    def test_single_bin_hand_case(self):
        assert ece([0.8, 0.6], [1.0, 0.0], num_bins=1) == pytest.approx(0.2, abs=1e-15)

    def test_confidence_one_lands_in_last_bin(self):
        # would be an index-out-of-range bug otherwise
        assert ece([1.0], [0.0], num_bins=15) == 1.0

    def test_calibrated_oracle_converges(self):
        rng = np.random.default_rng(123)
        n = 10**5
        conf = rng.uniform(0.0, 1.0, size=n)
        correct = (rng.uniform(0.0, 1.0, size=n) < conf).astype(np.float64)
        assert ece(conf, correct, num_bins=15) < 0.02

    def test_sample_permutation_invariance(self):
        rng = np.random.default_rng(5)
        conf = rng.uniform(0, 1, size=100)
        correct = rng.integers(0, 2, size=100).astype(np.float64)
        perm = rng.permutation(100)
        # summation order inside bins changes, so equality is up to reassociation
        assert ece(conf, correct) == pytest.approx(ece(conf[perm], correct[perm]), abs=1e-12)

    def test_validation(self):
        with pytest.raises(ValueError, match="matching"):
            ece([0.5], [1.0, 0.0])
        with pytest.raises(ValueError, match="lie in"):
            ece([1.5], [1.0])
        with pytest.raises(ValueError, match="num_bins"):
            ece([0.5], [1.0], num_bins=0)


class TestConfusion:
    def test_identity_predictions(self):
        labels = np.array([0, 1, 2, 3])
        matrix, top = confusion_and_top_confusions(labels, labels, num_known=3)
        np.testing.assert_array_equal(matrix, np.eye(4))
        assert top == []

    def test_single_unknown_class_always_leaks_to_three(self):
        preds = np.array([3, 3, 3])
        labels = np.array([5, 5, 5])
        ids = [7, 7, 7]
        matrix, top = confusion_and_top_confusions(preds, labels, num_known=5, unknown_ids=ids)
        assert matrix[5, 3] == 1.0
        assert top == [{"unknown_class": 7, "rate": 1.0, "target": 3}]

    def test_mixed_hand_case(self):
        # K=3; last three samples are unknowns from classes 10, 10, 11
        preds = np.array([0, 1, 1, 3, 2, 2])
        labels = np.array([0, 1, 2, 3, 3, 3])
        ids = [None, None, None, 10, 10, 11]
        matrix, top = confusion_and_top_confusions(preds, labels, num_known=3, unknown_ids=ids)
        np.testing.assert_allclose(matrix[0], [1, 0, 0, 0], atol=0.0)
        np.testing.assert_allclose(matrix[2], [0, 1, 0, 0], atol=0.0)
        np.testing.assert_allclose(matrix[3], [0, 0, 2 / 3, 1 / 3], atol=1e-15)
        assert top == [
            {"unknown_class": 11, "rate": 1.0, "target": 2},
            {"unknown_class": 10, "rate": 0.5, "target": 2},
        ]

    def test_rows_normalize_or_stay_zero(self):
        preds = np.array([0, 0, 1])
        labels = np.array([0, 1, 1])
        matrix, _ = confusion_and_top_confusions(preds, labels, num_known=2)
        np.testing.assert_allclose(matrix[:2].sum(axis=1), 1.0, atol=1e-15)
        np.testing.assert_allclose(matrix[2], 0.0, atol=0.0)

    def test_validation(self):
        with pytest.raises(ValueError, match="out of range"):
            confusion_and_top_confusions([4], [0], num_known=3)
        with pytest.raises(ValueError, match="unknown_ids"):
            confusion_and_top_confusions([0], [0], num_known=3, unknown_ids=[None, None])


class TestScoreDump:
    def test_round_trip(self, tmp_path):
        records = [
            rec([0.25, 0.5, 0.25], 0.125, 1),
            rec([0.1, 0.2, 0.7], 0.9375, 3),  # unknown
            rec([1 / 3, 1 / 3, 1 / 3], 1e-9, 0),
        ]
        path = tmp_path / "scores.jsonl"
        write_score_dump(path, records)
        loaded = read_score_dump(path)
        assert len(loaded) == 3
        for orig, back in zip(records, loaded):
            np.testing.assert_array_equal(orig.probs, back.probs)
            assert orig.score == back.score
            assert orig.label == back.label

    def test_unknown_label_serialized_as_string(self, tmp_path):
        path = tmp_path / "scores.jsonl"
        write_score_dump(path, [rec([0.5, 0.5], 0.9, 2)])
        assert '"label": "unknown"' in path.read_text()

    def test_malformed_line_reports_line_number(self, tmp_path):
        path = tmp_path / "scores.jsonl"
        path.write_text('{"probs": [0.5, 0.5], "score": 0.1, "label": 0}\nnot json\n')
        with pytest.raises(ValueError, match=":2: malformed"):
            read_score_dump(path)

    def test_blank_lines_skipped(self, tmp_path):
        path = tmp_path / "scores.jsonl"
        path.write_text('\n{"probs": [0.5, 0.5], "score": 0.1, "label": 0}\n\n')
        assert len(read_score_dump(path)) == 1
