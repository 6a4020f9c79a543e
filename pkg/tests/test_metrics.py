import numpy as np
import pytest

from gridcl.metrics import (
    AccuracyMatrix,
    EvaluationError,
    RunResult,
    accuracy_counts,
    compute_gap,
    evaluate_full,
    predict,
)


class ConstantModel:
    def __init__(self, cls, n_classes=4):
        self.cls, self.n_classes = cls, n_classes

    def predict_logits(self, x):
        z = np.zeros((len(x), self.n_classes))
        z[:, self.cls] = 1.0
        return z


class LookupModel:
    """Returns stored logits row by row; inputs are row indices."""

    def __init__(self, logits):
        self.logits = np.asarray(logits, float)
        self.n_classes = self.logits.shape[1]

    def predict_logits(self, x):
        return self.logits[np.asarray(x, int).ravel()]


def test_constant_predictor_on_balanced_set():
    labels = np.repeat(np.arange(4), 5)
    assert evaluate_full(ConstantModel(2), np.zeros((20, 1, 1)), labels) == 0.25


def test_counting_oracle():
    rng = np.random.default_rng(0)
    logits = rng.standard_normal((50, 6))
    labels = rng.integers(0, 6, 50)
    model = LookupModel(logits)
    correct = 0
    for i in range(50):
        best = max(range(6), key=lambda c: (logits[i, c], -c))
        correct += best == labels[i]
    assert accuracy_counts(model, np.arange(50), labels) == (correct, 50)


def test_ties_go_to_lowest_index():
    assert list(predict(LookupModel([[1.0, 1.0, 0.0]]), np.arange(1))) == [0]


def test_label_beyond_head():
    with pytest.raises(EvaluationError):
        evaluate_full(ConstantModel(0, n_classes=2), np.zeros((1, 1, 1)), [2])


@pytest.mark.parametrize("joint,acc,gap", [(0.658, 0.613, 0.045), (0.981, 0.966, 0.015), (0.7, 0.7, 0.0)])
def test_gap_examples(joint, acc, gap):
    assert compute_gap(acc, joint) == pytest.approx(gap, abs=1e-12)


def test_gap_can_be_negative():
    assert compute_gap(0.9, 0.8) < 0


class TestMatrix:
    def test_lower_triangular_rows(self):
        m = AccuracyMatrix(sizes=[10, 30])
        m.add_row([0.9])
        m.add_row([0.5, 1.0])
        with pytest.raises(ValueError):
            m.add_row([1.0])
        assert [len(r) for r in m.rows] == [1, 2]

    def test_seen_accuracy_is_window_weighted(self):
        m = AccuracyMatrix(sizes=[10, 30])
        m.add_row([0.9])
        m.add_row([0.5, 1.0])
        assert m.seen_accuracy(1) == pytest.approx((5 + 30) / 40)

    def test_weighted_final_row_equals_whole_set_accuracy(self):
        # conservation: per-task accuracies weighted by size recover the pooled accuracy
        rng = np.random.default_rng(1)
        sizes = [7, 13, 4]
        correct = [rng.integers(0, s + 1) for s in sizes]
        m = AccuracyMatrix(sizes=sizes)
        for t in range(3):
            m.add_row([c / s for c, s in zip(correct[: t + 1], sizes)])
        assert m.seen_accuracy(2) == pytest.approx(sum(correct) / sum(sizes))

    def test_old_task_mean(self):
        m = AccuracyMatrix(sizes=[1, 1, 1])
        for row in ([1.0], [0.2, 1.0], [0.1, 0.3, 0.9]):
            m.add_row(row)
        assert m.old_task_mean() == pytest.approx(0.2)


def test_result_json_round_trip():
    r = RunResult("er", 1, 0, [[1.0], [0.5, 0.75]], [4, 4], 0.6, 0.1, 0.7, {"total_bytes": 0}, 1.5, {"a": 1}, "abc")
    back = RunResult.from_json(r.to_json())
    assert back == r and back.matrix().seen_accuracy(1) == pytest.approx(0.625)


def test_result_schema_checked():
    r = RunResult("er", 1, 0, [[1.0]], [1], 1.0, None, None, {}, 0.0, {})
    bad = r.to_json().replace('"schema_version": 1', '"schema_version": 99')
    with pytest.raises(ValueError):
        RunResult.from_json(bad)


def test_evaluation_does_not_touch_the_model():
    from gridcl.model import BiGruClassifier

    m = BiGruClassifier(3, 4, np.random.default_rng(0), hidden=4).train()
    before = m.checksum()
    x = np.random.default_rng(1).standard_normal((10, 5, 3))
    evaluate_full(m, x, np.arange(10) % 4)
    assert m.checksum() == before and m.training
