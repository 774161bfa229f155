"""Accuracy, attack-success, and durability measurement; CSV emission.

MA is clean test accuracy; BA is the fraction of trigger-bearing test
samples classified as the attacker's target, with samples whose true label
already equals the target excluded (switchable) so the metric is not
inflated by correct predictions. All emitted files are byte-deterministic
for identical inputs; per-round wall time stays in memory only.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .attacks import TextTrigger, VisionTrigger
from .data import TextDataset, VisionDataset, poison_text_sequence
from .nn import predict


@dataclass
class EvalReport:
    main_accuracy: float
    backdoor_accuracy: float
    per_class_accuracy: tuple[float, ...]
    n_clean: int
    n_triggered: int


@dataclass
class LifespanReport:
    removal_round: int
    rounds_above: int
    threshold: float


@dataclass
class RoundRecord:
    """Everything recorded about one communication round."""

    round_index: int
    selected: tuple[int, ...]
    malicious_present: bool
    main_accuracy: float
    backdoor_accuracy: float
    accepted: tuple[bool, ...]
    scores: tuple[float, ...]
    wall_time: float = 0.0  # informational; excluded from CSV for reproducibility


CSV_COLUMNS = ("round", "selected", "malicious", "ma", "ba", "accepted", "scores")


def main_accuracy(model, dataset) -> float:
    """Percent of test samples whose argmax prediction matches the label."""
    inputs = dataset.inputs if isinstance(dataset, VisionDataset) else dataset.sequences
    if len(dataset) == 0:
        return 0.0
    pred = predict(model, inputs)
    return 100.0 * float((pred == dataset.labels).mean())


def per_class_accuracy(model, dataset) -> tuple[float, ...]:
    inputs = dataset.inputs if isinstance(dataset, VisionDataset) else dataset.sequences
    pred = predict(model, inputs)
    out = []
    for k in range(dataset.n_classes):
        mask = dataset.labels == k
        out.append(100.0 * float((pred[mask] == k).mean()) if mask.any() else 0.0)
    return tuple(out)


def apply_trigger(dataset, trigger):
    """Triggered copies of every input; None leaves inputs untouched."""
    if isinstance(dataset, VisionDataset):
        if trigger is None:
            return dataset.inputs
        values = trigger.values if isinstance(trigger, VisionTrigger) else np.asarray(trigger)
        return np.clip(dataset.inputs + values, 0.0, 1.0)
    if trigger is None:
        return dataset.sequences
    out = dataset.sequences.copy()
    for i in range(out.shape[0]):
        out[i] = poison_text_sequence(out[i], trigger.tokens, trigger.positions)
    return out


def backdoor_accuracy(model, dataset, trigger, target_label, exclude_target=True) -> float:
    """Percent of triggered samples predicted as the target label."""
    keep = np.ones(len(dataset), dtype=bool)
    if exclude_target:
        keep = dataset.labels != target_label
    if not keep.any():
        return 0.0
    triggered = apply_trigger(dataset, trigger)[keep]
    pred = predict(model, triggered)
    return 100.0 * float((pred == target_label).mean())


def evaluate(model, dataset, trigger, target_label, exclude_target=True) -> EvalReport:
    keep = dataset.labels != target_label if exclude_target else np.ones(len(dataset), bool)
    report = EvalReport(
        main_accuracy=main_accuracy(model, dataset),
        backdoor_accuracy=backdoor_accuracy(model, dataset, trigger, target_label, exclude_target),
        per_class_accuracy=per_class_accuracy(model, dataset),
        n_clean=len(dataset),
        n_triggered=int(keep.sum()),
    )
    # Cross-check the headline number against raw per-class counts.
    counts = np.bincount(dataset.labels, minlength=dataset.n_classes)
    recon = sum(a * c for a, c in zip(report.per_class_accuracy, counts)) / max(1, counts.sum())
    if abs(recon - report.main_accuracy) > 1e-6:
        raise AssertionError("accuracy does not match per-class confusion counts")
    return report


def lifespan(records, removal_round, threshold) -> LifespanReport:
    """Consecutive rounds starting at removal_round with BA at or above threshold."""
    series = [r.backdoor_accuracy for r in records]
    count = 0
    for ba in series[removal_round:]:
        if ba < threshold:
            break
        count += 1
    return LifespanReport(removal_round, count, threshold)


def peak_backdoor(records) -> float:
    return max((r.backdoor_accuracy for r in records), default=0.0)


# ---------------------------------------------------------------------------
# Emission
# ---------------------------------------------------------------------------


def _join_ints(values):
    return ";".join(str(int(v)) for v in values)


def _join_floats(values):
    return ";".join(repr(float(v)) for v in values)


def records_to_csv(records) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in records:
        writer.writerow(
            [
                r.round_index,
                _join_ints(r.selected),
                int(r.malicious_present),
                repr(float(r.main_accuracy)),
                repr(float(r.backdoor_accuracy)),
                "".join("1" if a else "0" for a in r.accepted),
                _join_floats(r.scores),
            ]
        )
    return buf.getvalue()


def emit_csv(records, path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(records_to_csv(records))


def parse_csv(path) -> list[RoundRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != CSV_COLUMNS:
        raise ValueError(f"{path}: unexpected round-record header {rows[:1]}")
    records = []
    for row in rows[1:]:
        rnd, selected, malicious, ma, ba, accepted, scores = row
        records.append(
            RoundRecord(
                round_index=int(rnd),
                selected=tuple(int(v) for v in selected.split(";")) if selected else (),
                malicious_present=bool(int(malicious)),
                main_accuracy=float(ma),
                backdoor_accuracy=float(ba),
                accepted=tuple(c == "1" for c in accepted),
                scores=tuple(float(v) for v in scores.split(";")) if scores else (),
            )
        )
    return records


def emit_summary(records, removal_round=None, threshold=90.0) -> str:
    """Deterministic key=value summary for machine diffing."""
    if removal_round is None:
        removal_round = len(records)
    removal_round = min(removal_round, len(records))
    span = lifespan(records, removal_round, threshold)
    final = records[-1] if records else None
    lines = [
        f"rounds={len(records)}",
        f"final_ma={repr(float(final.main_accuracy)) if final else 'na'}",
        f"final_ba={repr(float(final.backdoor_accuracy)) if final else 'na'}",
        f"peak_ba={repr(float(peak_backdoor(records)))}",
        f"lifespan_removal_round={span.removal_round}",
        f"lifespan_threshold={repr(float(span.threshold))}",
        f"lifespan_rounds_above={span.rounds_above}",
    ]
    return "\n".join(lines) + "\n"
