"""Accuracy matrix, final accuracy and gap to Joint Training."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

RESULT_SCHEMA_VERSION = 1


class EvaluationError(ValueError):
    pass


def predict(model, x: np.ndarray) -> np.ndarray:
    """Argmax class; ties resolve to the lowest class index (numpy argmax semantics)."""
    if len(x) == 0:
        return np.zeros(0, dtype=np.int64)
    return np.argmax(model.predict_logits(x), axis=1)


def accuracy_counts(model, x: np.ndarray, labels: np.ndarray) -> tuple[int, int]:
    labels = np.asarray(labels)
    if len(labels) and labels.max() >= model.n_classes:
        raise EvaluationError(f"label {labels.max()} is outside the head ({model.n_classes} classes)")
    pred = predict(model, x)
    return int(np.sum(pred == labels)), len(labels)


def evaluate_full(model, x: np.ndarray, labels: np.ndarray) -> float:
    """Fraction of windows whose argmax logit equals the label."""
    correct, total = accuracy_counts(model, x, labels)
    return correct / total if total else float("nan")


@dataclass
class AccuracyMatrix:
    """Lower-triangular A[t][j]: accuracy on task j's test subset after task t."""

    rows: list[list[float]] = field(default_factory=list)
    sizes: list[int] = field(default_factory=list)  # test windows per task subset

    def add_row(self, accs: list[float]) -> None:
        if len(accs) != len(self.rows) + 1:
            raise ValueError("each row must cover tasks 0..t")
        self.rows.append([float(a) for a in accs])

    @property
    def n_tasks(self) -> int:
        return len(self.rows)

    def final_row(self) -> list[float]:
        return self.rows[-1]

    def seen_accuracy(self, t: int) -> float:
        """Windows-weighted accuracy over subsets 0..t after task t."""
        w = np.asarray(self.sizes[: t + 1], dtype=np.float64)
        a = np.asarray(self.rows[t], dtype=np.float64)
        return float((w * a).sum() / w.sum()) if w.sum() else float("nan")

    def old_task_mean(self) -> float:
        """Mean final accuracy over tasks before the last one."""
        if self.n_tasks < 2:
            return float("nan")
        return float(np.mean(self.rows[-1][:-1]))


def evaluate_row(model, test_streams, target: str, upto: int) -> list[float]:
    row = []
    for j in range(upto + 1):
        ws = test_streams[j]
        row.append(evaluate_full(model, ws.x, ws.labels(target)) if len(ws) else float("nan"))
    return row


def compute_gap(acc_cl: float, acc_joint: float) -> float:
    """Joint accuracy minus the method's accuracy; negative values are kept."""
    return float(acc_joint) - float(acc_cl)


@dataclass
class RunResult:
    method: str
    scenario: int
    seed: int
    accuracy_matrix: list[list[float]]
    task_test_sizes: list[int]
    final_acc: float
    gap: float | None
    joint_acc: float | None
    memory: dict
    wall_clock_s: float
    config: dict
    dataset_digest: str = ""
    schema_version: int = RESULT_SCHEMA_VERSION

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunResult":
        data = json.loads(text)
        if data.get("schema_version") != RESULT_SCHEMA_VERSION:
            raise ValueError(f"unsupported result schema {data.get('schema_version')}")
        return cls(**data)

    def matrix(self) -> AccuracyMatrix:
        return AccuracyMatrix([list(r) for r in self.accuracy_matrix], list(self.task_test_sizes))
