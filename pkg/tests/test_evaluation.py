import json

import numpy as np
import pytest
import torch
import torch.nn as nn
from hypothesis import given, settings
from hypothesis import strategies as st

from path24.dataset import OFFICIAL_TEST_COUNTS, PreprocessConfig, build_manifest
from path24.errors import EvaluationError
from path24.evaluation import (
    EvalResult,
    PredictionSet,
    as_percent,
    classification_report,
    confusion_matrix,
    evaluate_predictions,
    evaluate_test_set,
    format_report_table,
    patch_to_scan_accuracy,
    plot_confusion,
    round_half_up,
    total_accuracy,
    whole_scan_accuracy,
)
from path24.schemas import validate

from conftest import COLORS
from oracles import brute_force_metrics, random_prediction_pairs


def two_class_example():
    # scan A has two patches (one wrong), scan B has one
    return PredictionSet([("a1", 0, 0), ("a2", 0, 1), ("b1", 1, 1)], num_classes=2)


class TestAccuracies:
    def test_patch_to_scan_hand(self):
        assert patch_to_scan_accuracy(two_class_example()) == pytest.approx(2 / 3)

    def test_whole_scan_hand(self):
        assert whole_scan_accuracy(two_class_example()) == pytest.approx(0.75)

    def test_perfect_official_counts(self):
        true = [s for s, n in enumerate(OFFICIAL_TEST_COUNTS) for _ in range(n)]
        preds = PredictionSet.from_labels(true, true)
        assert len(preds) == 1325
        assert patch_to_scan_accuracy(preds) == 1.0
        assert whole_scan_accuracy(preds) == 1.0
        cm = confusion_matrix(preds)
        assert np.array_equal(np.diag(cm), OFFICIAL_TEST_COUNTS)
        assert cm.sum() == np.trace(cm) == 1325

    def test_25_errors_any_placement(self):
        true = [s for s, n in enumerate(OFFICIAL_TEST_COUNTS) for _ in range(n)]
        rng = np.random.default_rng(0)
        for _ in range(5):
            pred = list(true)
            for i in rng.choice(len(true), 25, replace=False):
                pred[i] = (true[i] + 1) % 24
            preds = PredictionSet.from_labels(true, pred)
            assert patch_to_scan_accuracy(preds) == pytest.approx(1300 / 1325)
            assert round(patch_to_scan_accuracy(preds), 5) == 0.98113

    def test_empty(self):
        with pytest.raises(EvaluationError):
            patch_to_scan_accuracy(PredictionSet([]))

    def test_missing_class(self):
        preds = PredictionSet.from_labels([0, 0, 1], [0, 0, 1], num_classes=3)
        with pytest.raises(EvaluationError, match=r"\[2\]"):
            whole_scan_accuracy(preds)

    def test_label_range(self):
        with pytest.raises(EvaluationError):
            PredictionSet.from_labels([0, 24], [0, 0])


class TestTotalAccuracy:
    def test_identity(self):
        assert total_accuracy(1.0, 0.37) == 0.37

    @pytest.mark.parametrize("eta_p, eta_w, table", [(0.9789, 0.9786, 0.9579), (0.9887, 0.9889, 0.9777)])
    def test_table_rows(self, eta_p, eta_w, table):
        assert total_accuracy(eta_p, eta_w) == pytest.approx(table, abs=1e-4)

    @pytest.mark.parametrize("args", [(1.2, 0.5), (0.5, -0.1)])
    def test_range(self, args):
        with pytest.raises(EvaluationError):
            total_accuracy(*args)


class TestConfusion:
    def test_one_hot(self):
        cm = confusion_matrix(PredictionSet([("x", 3, 7)]))
        expected = np.zeros((24, 24), dtype=int)
        expected[3, 7] = 1
        assert np.array_equal(cm, expected)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(2, 24).flatmap(lambda k: st.tuples(
        st.just(k), st.lists(st.tuples(st.integers(0, k - 1), st.integers(0, k - 1)), min_size=1, max_size=300))))
    def test_counting_identities(self, case):
        k, pairs = case
        preds = PredictionSet.from_labels([t for t, _ in pairs], [p for _, p in pairs], num_classes=k)
        cm = confusion_matrix(preds)
        assert cm.sum() == len(pairs)
        assert np.trace(cm) == sum(t == p for t, p in pairs)
        assert np.array_equal(cm.sum(axis=1), preds.class_counts)
        assert np.array_equal(cm.sum(axis=0), np.bincount([p for _, p in pairs], minlength=k))
        assert patch_to_scan_accuracy(preds) == pytest.approx(np.trace(cm) / len(pairs))


class TestClassificationReport:
    def test_perfect(self):
        r = classification_report(np.diag([5, 3, 2]))
        assert all((c.precision, c.recall, c.f1) == (1.0, 1.0, 1.0) for c in r.per_class)

    def test_class5_rounding(self):
        # 15 test patches, 14 found, nothing else predicted as this scan
        cm = np.zeros((2, 2), dtype=int)
        cm[0, 0], cm[0, 1] = 14, 1
        cm[1, 1] = 50
        c = classification_report(cm).per_class[0]
        assert round_half_up(c.precision) == 1.00
        assert round_half_up(c.recall) == 0.93
        assert c.f1 == pytest.approx(28 / 29)
        assert round_half_up(c.f1) == 0.97
        # F1 from the already rounded inputs would give 0.96
        assert round_half_up(2 * 1.0 * 0.93 / 1.93) == 0.96

    def test_zero_support_and_never_predicted(self):
        cm = np.array([[3, 0, 0], [0, 2, 0], [0, 0, 0]])
        c = classification_report(cm).per_class[2]
        assert (c.precision, c.recall, c.f1, c.support) == (0.0, 0.0, 0.0, 0)
        assert c.precision_undefined and c.recall_undefined

    def test_non_square(self):
        with pytest.raises(EvaluationError):
            classification_report(np.zeros((2, 3)))

    def test_macro(self):
        r = classification_report(np.array([[1, 1], [0, 2]]))
        assert r.macro_precision == pytest.approx((1.0 + 2 / 3) / 2)
        assert r.macro_recall == pytest.approx((0.5 + 1.0) / 2)


class TestAgainstOracle:
    @pytest.mark.parametrize("seed", range(25))
    def test_random_sets(self, seed):
        rng = np.random.default_rng(seed)
        k = int(rng.integers(3, 25))
        pairs = random_prediction_pairs(rng, k, max_per_class=40)
        ref = brute_force_metrics(pairs, k)
        res = evaluate_predictions(PredictionSet.from_labels([t for t, _ in pairs], [p for _, p in pairs], k))
        assert res.eta_p == pytest.approx(ref["eta_p"], abs=1e-12)
        assert res.eta_w == pytest.approx(ref["eta_w"], abs=1e-12)
        assert res.eta_total == pytest.approx(ref["eta_total"], abs=1e-12)
        assert res.confusion.tolist() == ref["confusion"]
        assert res.misclassified_count == ref["misclassified"]
        for got, (p, r, f1, sup) in zip(res.per_class, ref["report"]):
            assert (got.precision, got.recall, got.f1) == pytest.approx((p, r, f1), abs=1e-12)
            assert got.support == sup

    def test_equal_counts_make_metrics_agree(self):
        rng = np.random.default_rng(3)
        true = np.repeat(np.arange(6), 10)
        pred = np.where(rng.uniform(size=60) < 0.7, true, rng.integers(0, 6, 60))
        preds = PredictionSet.from_labels(true, pred, 6)
        assert patch_to_scan_accuracy(preds) == pytest.approx(whole_scan_accuracy(preds), abs=1e-12)

    def test_weighted_mean_relation(self):
        preds = PredictionSet.from_labels([0, 0, 0, 1, 2, 2], [0, 1, 0, 1, 0, 2], 3)
        per_scan = preds.correct_per_class() / preds.class_counts
        weights = preds.class_counts / preds.class_counts.sum()
        assert patch_to_scan_accuracy(preds) == pytest.approx(float(per_scan @ weights))
        assert whole_scan_accuracy(preds) == pytest.approx(float(per_scan.mean()))

    def test_order_invariant(self):
        rng = np.random.default_rng(9)
        pairs = random_prediction_pairs(rng, 5, 20)
        a = evaluate_predictions(PredictionSet.from_labels([t for t, _ in pairs], [p for _, p in pairs], 5))
        rng.shuffle(pairs)
        b = evaluate_predictions(PredictionSet.from_labels([t for t, _ in pairs], [p for _, p in pairs], 5))
        assert (a.eta_p, a.eta_w, a.eta_total) == (b.eta_p, b.eta_w, b.eta_total)
        assert np.array_equal(a.confusion, b.confusion)

    def test_total_is_exact_product(self):
        res = evaluate_predictions(two_class_example())
        assert res.eta_total == res.eta_p * res.eta_w


class TestFormatting:
    def test_half_up(self):
        assert round_half_up(0.125) == 0.13
        assert round_half_up(97.885) == 97.89
        assert as_percent(0.97885) == "97.89"

    def test_json_round_trip_and_schema(self, tmp_path):
        res = evaluate_predictions(two_class_example())
        path = res.save(tmp_path / "r.json")
        data = json.loads(path.read_text())
        validate(data)
        back = EvalResult.from_dict(data)
        assert back.eta_total == res.eta_total
        assert np.array_equal(back.confusion, res.confusion)
        assert back.per_class == res.per_class

    def test_table_and_heatmap(self, tmp_path):
        res = evaluate_predictions(two_class_example())
        table = format_report_table(res)
        assert "Precision" in table and "Recall" in table and "F1-score" in table and "Support" in table
        assert "66.67" in table and "75.00" in table and "50.00" in table
        png = plot_confusion(res.confusion, tmp_path / "cm.png")
        assert png.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


class ColorOracle(nn.Module):
    """Predicts the scan whose reference colour is nearest the image mean."""

    def __init__(self, config, classes):
        super().__init__()
        mean = torch.tensor(config.channel_mean)
        std = torch.tensor(config.channel_std)
        ref = torch.tensor(COLORS[:classes], dtype=torch.float32) / 255.0
        self.register_buffer("ref", (ref - mean) / std)

    def forward(self, x):
        m = x.mean(dim=(2, 3))
        return -torch.cdist(m, self.ref)


class TestEvaluateTestSet:
    def test_oracle_model(self, tree_factory):
        root = tree_factory([2, 2, 2], [3, 2, 4])
        cfg = PreprocessConfig(target_size=32)
        res = evaluate_test_set(ColorOracle(cfg, 3), build_manifest(root), cfg, num_classes=3)
        assert (res.eta_p, res.eta_w, res.eta_total) == (1.0, 1.0, 1.0)
        assert res.misclassified_count == 0
        assert res.n_tot == 9
        assert sorted(pid for pid, _, _ in res.predictions.entries)[0] == "s0_0.png"

    def test_against_oracle(self, tree_factory):
        # the oracle model only knows scans 0 and 1, so scan 2 is always wrong
        root = tree_factory([2, 2, 2], [3, 2, 4])
        cfg = PreprocessConfig(target_size=32)
        model = ColorOracle(cfg, 2)

        class Padded(nn.Module):
            def forward(self, x):
                out = model(x)
                return torch.cat([out, torch.full((len(x), 1), -1e9)], dim=1)

        res = evaluate_test_set(Padded(), build_manifest(root), cfg, num_classes=3)
        scan2 = (torch.tensor(COLORS[2]) / 255.0 - torch.tensor(cfg.channel_mean)) / torch.tensor(cfg.channel_std)
        scan2_pred = int(model(scan2.float()[None, :, None, None]).argmax())
        pairs = [(r.label, r.label if r.label < 2 else scan2_pred)
                 for r in build_manifest(root).subset("test")]
        ref = brute_force_metrics(pairs, 3)
        assert res.eta_p == pytest.approx(ref["eta_p"], abs=1e-12) == pytest.approx(5 / 9)
        assert res.eta_w == pytest.approx(ref["eta_w"], abs=1e-12) == pytest.approx(2 / 3)
        assert res.confusion.tolist() == ref["confusion"]

    def test_missing_class_fails_before_inference(self, tree_factory):
        root = tree_factory([2, 2, 2], [1, 1, 0])

        class Boom(nn.Module):
            def forward(self, x):
                raise AssertionError("inference should not run")

        with pytest.raises(EvaluationError, match=r"\[2\]"):
            evaluate_test_set(Boom(), build_manifest(root), PreprocessConfig(target_size=32), num_classes=3)
