"""Task-IL / Class-IL prediction over an expert archive and the metrics built on it."""

from __future__ import annotations

import csv
import enum
import json
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import ExpertArchive, ExpertRecord
from .errors import UnknownTaskError
from .network import forward
from .tasks import TaskStream


class EvalMode(enum.Enum):
    TASK_IL = "task_il"
    CLASS_IL = "class_il"


@dataclass(frozen=True)
class Prediction:
    global_class: int
    chosen_task: int
    confidence: float


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def expert_probabilities(record: ExpertRecord, x) -> np.ndarray:
    return softmax(forward(record.network, x).numpy())


def _batch(x) -> tuple[np.ndarray, bool]:
    arr = np.asarray(x, dtype=np.float32)
    return (arr[None], True) if arr.ndim == 3 else (arr, False)


def predict_task_il(archive: ExpertArchive, x, task_id: int):
    """Batched Task-IL: ``(global_classes, chosen_tasks, confidences)`` arrays."""
    record = archive.get(task_id)
    probs = expert_probabilities(record, x)
    local = probs.argmax(axis=1)
    classes = np.asarray(record.class_ids, dtype=np.int64)[local]
    return classes, np.full(len(local), task_id, dtype=np.int64), probs.max(axis=1)


def predict_class_il(archive: ExpertArchive, x):
    """Batched Class-IL: the most confident expert decides each sample."""
    if len(archive) == 0:
        raise UnknownTaskError("archive is empty")
    confidences, classes = [], []
    for record in archive:
        probs = expert_probabilities(record, x)
        confidences.append(probs.max(axis=1))
        classes.append(np.asarray(record.class_ids, dtype=np.int64)[probs.argmax(axis=1)])
    conf = np.stack(confidences, axis=1)
    # argmax returns the first maximum, so ties go to the lowest task index.
    chosen = conf.argmax(axis=1)
    rows = np.arange(len(chosen))
    return np.stack(classes, axis=1)[rows, chosen], chosen.astype(np.int64), conf[rows, chosen]


def infer_task_il(archive: ExpertArchive, x, task_id: int) -> Prediction:
    batch, _ = _batch(x)
    c, t, p = predict_task_il(archive, batch[:1], task_id)
    return Prediction(int(c[0]), int(t[0]), float(p[0]))


def infer_class_il(archive: ExpertArchive, x) -> Prediction:
    batch, _ = _batch(x)
    c, t, p = predict_class_il(archive, batch[:1])
    return Prediction(int(c[0]), int(t[0]), float(p[0]))


def last_accuracy(accuracies: Sequence[float]) -> float:
    """Unweighted mean of per-task accuracies, computed exactly then rounded once."""
    if not accuracies:
        raise ValueError("no accuracies to average")
    return float(sum(Fraction(a) for a in accuracies) / len(accuracies))


@dataclass(frozen=True)
class EvalReport:
    mode: EvalMode
    per_task_accuracy: tuple[float, ...]
    last_accuracy: float
    confusion: tuple[tuple[float, ...], ...]

    def diagonal_mean(self) -> float:
        return last_accuracy([self.confusion[t][t] for t in range(len(self.confusion))])

    def to_dict(self) -> dict:
        return {
            "mode": self.mode.value,
            "per_task_accuracy": list(self.per_task_accuracy),
            "last_accuracy": self.last_accuracy,
            "confusion": [list(r) for r in self.confusion],
        }


def evaluate(archive: ExpertArchive, stream: TaskStream, mode: EvalMode | str) -> EvalReport:
    mode = EvalMode(mode)
    T = stream.num_tasks
    for task in stream:
        archive.get(task.task_id)
    accuracies = []
    confusion = []
    for task in stream:
        x, y = task.test.x, task.test.y
        if mode is EvalMode.TASK_IL:
            classes, chosen, _ = predict_task_il(archive, x, task.task_id)
        else:
            classes, chosen, _ = predict_class_il(archive, x)
        n = len(y)
        accuracies.append(float(np.sum(classes == y)) / n if n else 0.0)
        counts = np.bincount(chosen, minlength=len(archive))[:T]
        confusion.append(tuple(float(c) / n if n else 0.0 for c in counts))
    return EvalReport(mode, tuple(accuracies), last_accuracy(accuracies), tuple(confusion))


# -- report files ----------------------------------------------------------

def write_reports(task_il: EvalReport, class_il: EvalReport, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    payload = {"task_il": task_il.to_dict(), "class_il": class_il.to_dict()}
    (out / "report.json").write_text(json.dumps(payload, indent=2) + "\n")
    with (out / "accuracy.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["task", "task_il_acc", "class_il_acc"])
        for t, (a, b) in enumerate(zip(task_il.per_task_accuracy, class_il.per_task_accuracy)):
            w.writerow([t, repr(a), repr(b)])
        w.writerow(["LA", repr(task_il.last_accuracy), repr(class_il.last_accuracy)])
    for report in (task_il, class_il):
        with (out / f"confusion_{report.mode.value}.csv").open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["true_task"] + [f"chosen_{t}" for t in range(len(report.confusion))])
            for t, row in enumerate(report.confusion):
                w.writerow([t] + [repr(v) for v in row])


def write_comparison(rows: Sequence[tuple[str, EvalReport]], path: str | Path) -> None:
    """One line per (run, mode): per-task accuracies, LA and confusion diagonal mean."""
    width = max(len(r.per_task_accuracy) for _, r in rows)
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["run", "mode"] + [f"task_{t}" for t in range(width)] + ["LA", "confusion_diag_mean"])
        for name, r in rows:
            accs = [repr(a) for a in r.per_task_accuracy] + [""] * (width - len(r.per_task_accuracy))
            w.writerow([name, r.mode.value] + accs + [repr(r.last_accuracy), repr(r.diagonal_mean())])
