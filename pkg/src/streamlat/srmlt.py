"""Boundary-record store and the accuracy/coverage update policy.

During training, each granularity unit (token, utterance, or mini-batch)
keeps a snapshot of the accuracy and coverage ratio it achieved the last
time its triggering points were accepted. New trigger candidates replace
the stored ones only when the policy approves: in pre-training whenever
accuracy strictly improves; in fine-tuning per the accuracy/coverage
decision table (accuracy up always wins, accuracy down always loses, and at
equal accuracy only a coverage drop wins). Metric differences smaller than
the equality tolerance (default 0.001) count as equal.
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .attention import AlignmentMatrix

GRANULARITIES = ("token", "utterance", "minibatch")
PHASES = ("pretrain", "finetune")
DEFAULT_TOLERANCE = 0.001

STORE_FORMAT_VERSION = 1


class UndefinedStatError(ValueError):
    """Accuracy/coverage requested over an empty unit."""


class DegenerateAlignmentError(ValueError):
    """An alignment row carried no mass, so no trigger can be extracted."""


class GranularityMismatchError(ValueError):
    """Unit results do not match the store's configured granularity."""


@dataclass
class StatsSnapshot:
    accuracy: float
    coverage: float
    unit: str

    def __post_init__(self):
        if not (0.0 <= self.accuracy <= 1.0 and 0.0 <= self.coverage <= 1.0):
            raise ValueError(
                f"stats must lie in [0, 1]: acc={self.accuracy}, cov={self.coverage}")
        if self.unit not in GRANULARITIES:
            raise ValueError(f"unknown granularity unit {self.unit!r}")


@dataclass
class BoundaryRecord:
    utterance_id: str
    triggers: list[int]  # 1-based frame indices, one per token
    stats_key: str

    def validate(self, num_frames: Optional[int] = None) -> None:
        if not self.triggers:
            raise ValueError(f"record {self.utterance_id}: no triggers")
        for b in self.triggers:
            if b < 1 or (num_frames is not None and b > num_frames):
                raise ValueError(
                    f"record {self.utterance_id}: trigger {b} outside [1, {num_frames}]")


def batch_accuracy(predicted: Sequence[Sequence[int]],
                   reference: Sequence[Sequence[int]]) -> float:
    """Pooled fraction of correctly predicted token positions."""
    correct = 0
    total = 0
    for hyp, ref in zip(predicted, reference):
        if len(hyp) != len(ref):
            raise ValueError("teacher-forced predictions must align with references")
        total += len(ref)
        correct += sum(1 for h, r in zip(hyp, ref) if h == r)
    if total == 0:
        raise UndefinedStatError("accuracy over an empty unit")
    return correct / total


def batch_coverage(triggers: Sequence[Sequence[int]],
                   lengths: Sequence[int]) -> float:
    """Mean over tokens of trigger index over utterance length."""
    ratios: list[float] = []
    for trigs, T in zip(triggers, lengths):
        for b in trigs:
            if b > T:
                raise ValueError(f"trigger {b} beyond utterance length {T}")
            ratios.append(b / T)
    if not ratios:
        raise UndefinedStatError("coverage over an empty unit")
    return float(np.mean(ratios))


def _classify(delta: float, tol: float) -> str:
    if abs(delta) < tol:
        return "equal"
    return "up" if delta > 0 else "down"


def update_decision(old: StatsSnapshot, new: StatsSnapshot,
                    tol: float = DEFAULT_TOLERANCE) -> bool:
    """Fine-tuning update policy over classified accuracy/coverage changes.

    accuracy up   -> update, whatever coverage did
    accuracy equal-> update only if coverage went down
    accuracy down -> keep the old record
    """
    if old.unit != new.unit:
        raise GranularityMismatchError(f"{old.unit} vs {new.unit}")
    acc = _classify(new.accuracy - old.accuracy, tol)
    if acc == "up":
        return True
    if acc == "down":
        return False
    return _classify(new.coverage - old.coverage, tol) == "down"


def extract_triggers(alpha, on_degenerate: str = "raise") -> list[Optional[int]]:
    """Per-row argmax frame (1-based); ties resolve to the earliest frame.

    Rows with no mass signal a degenerate alignment: either raise, or return
    ``None`` for the caller to substitute a fallback.
    """
    mat = alpha.alpha if isinstance(alpha, AlignmentMatrix) else np.asarray(alpha, dtype=np.float64)
    out: list[Optional[int]] = []
    degenerate = []
    for i, row in enumerate(mat):
        if row.size == 0:
            raise ValueError("alignment row is empty")
        if not row.any():
            degenerate.append(i)
            out.append(None)
            continue
        out.append(int(np.argmax(row)) + 1)
    if degenerate and on_degenerate == "raise":
        raise DegenerateAlignmentError(f"alignment rows {degenerate} carry no mass")
    return out


def triggers_from_stack(alpha_stack: np.ndarray,
                        on_degenerate: str = "raise") -> list[Optional[int]]:
    """Committed trigger per decode step: max over heads of per-head argmax."""
    per_head = [extract_triggers(alpha_stack[h], on_degenerate=on_degenerate)
                for h in range(alpha_stack.shape[0])]
    merged: list[Optional[int]] = []
    for step in zip(*per_head):
        known = [t for t in step if t is not None]
        merged.append(max(known) if known else None)
    return merged


def mask_bounds(record: BoundaryRecord, delta: int, num_frames: int) -> list[int]:
    """Last visible frame per token: recorded trigger plus offset, clipped."""
    if delta < 0:
        raise ValueError("offset must be >= 0")
    return [min(b + delta, num_frames) for b in record.triggers]


@dataclass
class UnitResult:
    """Fresh statistics and trigger candidates for one granularity unit.

    ``triggers`` maps record ids to candidate trigger lists: utterance ids
    at utterance/minibatch granularity, token keys (singleton lists) at
    token granularity.
    """

    stats_key: str
    accuracy: float
    coverage: float
    triggers: dict[str, list[int]]


class RecordStore:
    """Per-utterance boundary records plus per-unit statistic snapshots.

    Readers see a consistent store during a batch; ``maybe_update`` replaces
    a unit's triggers and snapshot atomically, and only between batches.
    A frozen store (fixed external boundaries) rejects all updates.
    """

    def __init__(self, granularity: str = "minibatch",
                 tolerance: float = DEFAULT_TOLERANCE, frozen: bool = False):
        if granularity not in GRANULARITIES:
            raise ValueError(f"unknown granularity {granularity!r}")
        if tolerance < 0:
            raise ValueError("tolerance must be >= 0")
        self.granularity = granularity
        self.tolerance = tolerance
        self.frozen = frozen
        self.records: dict[str, BoundaryRecord] = {}
        self.snapshots: dict[str, StatsSnapshot] = {}

    def __len__(self) -> int:
        return len(self.records)

    @staticmethod
    def token_key(utterance_id: str, position: int) -> str:
        return f"{utterance_id}#t{position}"

    def triggers_for(self, utterance_id: str) -> Optional[list[int]]:
        rec = self.records.get(utterance_id)
        return list(rec.triggers) if rec is not None else None

    def lookup_triggers(self, utterance_id: str, num_tokens: int) -> list[Optional[int]]:
        """Assembled per-token triggers; ``None`` marks tokens with no record.

        At token granularity each position is its own record; otherwise the
        utterance carries one record for all positions.
        """
        if self.granularity == "token":
            out: list[Optional[int]] = []
            for i in range(num_tokens):
                rec = self.records.get(self.token_key(utterance_id, i))
                out.append(rec.triggers[0] if rec is not None else None)
            return out
        rec = self.records.get(utterance_id)
        if rec is None:
            return [None] * num_tokens
        if len(rec.triggers) != num_tokens:
            raise GranularityMismatchError(
                f"record {utterance_id} has {len(rec.triggers)} triggers, "
                f"expected {num_tokens}")
        return list(rec.triggers)

    def maybe_update(self, result: UnitResult, phase: str) -> bool:
        """Apply the phase's policy; on approval swap the whole unit at once."""
        if phase not in PHASES:
            raise ValueError(f"unknown phase {phase!r}")
        if self.frozen:
            return False
        old = self.snapshots.get(result.stats_key)
        new = StatsSnapshot(result.accuracy, result.coverage, self.granularity)
        if old is None:
            accept = True  # first visit always records
        elif phase == "pretrain":
            # higher accuracy wins regardless of coverage
            accept = _classify(new.accuracy - old.accuracy, self.tolerance) == "up"
        else:
            accept = update_decision(old, new, self.tolerance)
        if accept:
            for utt_id, triggers in result.triggers.items():
                self.records[utt_id] = BoundaryRecord(
                    utterance_id=utt_id, triggers=list(triggers),
                    stats_key=result.stats_key)
            self.snapshots[result.stats_key] = new
        return accept

    # -- serialization -------------------------------------------------------

    def dump(self, fp) -> None:
        fp.write(f"boundary-records v{STORE_FORMAT_VERSION}\n")
        fp.write(f"granularity {self.granularity}\n")
        fp.write(f"tolerance {self.tolerance!r}\n")
        fp.write(f"frozen {int(self.frozen)}\n")
        for utt_id in sorted(self.records):
            rec = self.records[utt_id]
            trig = ",".join(str(b) for b in rec.triggers)
            fp.write(f"utterance {utt_id} {len(rec.triggers)} {trig} {rec.stats_key}\n")
        for key in sorted(self.snapshots):
            snap = self.snapshots[key]
            fp.write(f"snapshot {key} {snap.accuracy!r} {snap.coverage!r} {snap.unit}\n")

    def dumps(self) -> str:
        buf = io.StringIO()
        self.dump(buf)
        return buf.getvalue()

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fp:
            self.dump(fp)

    @classmethod
    def load_from(cls, fp) -> "RecordStore":
        header = fp.readline().strip().split()
        if len(header) != 2 or header[0] != "boundary-records":
            raise ValueError("not a boundary-record file")
        if header[1] != f"v{STORE_FORMAT_VERSION}":
            raise ValueError(f"unsupported record format {header[1]}")
        granularity = fp.readline().split()[1]
        tolerance = float(fp.readline().split()[1])
        frozen = bool(int(fp.readline().split()[1]))
        store = cls(granularity=granularity, tolerance=tolerance, frozen=frozen)
        for line in fp:
            parts = line.strip().split()
            if not parts:
                continue
            if parts[0] == "utterance":
                utt_id, count, trig, key = parts[1], int(parts[2]), parts[3], parts[4]
                triggers = [int(t) for t in trig.split(",")]
                if len(triggers) != count:
                    raise ValueError(f"record {utt_id}: trigger count mismatch")
                store.records[utt_id] = BoundaryRecord(utt_id, triggers, key)
            elif parts[0] == "snapshot":
                key, acc, cov, unit = parts[1], float(parts[2]), float(parts[3]), parts[4]
                store.snapshots[key] = StatsSnapshot(acc, cov, unit)
            else:
                raise ValueError(f"unrecognized record line: {line.strip()!r}")
        for rec in store.records.values():
            if rec.stats_key not in store.snapshots:
                raise ValueError(f"record {rec.utterance_id} points at a missing snapshot")
        return store

    @classmethod
    def loads(cls, text: str) -> "RecordStore":
        return cls.load_from(io.StringIO(text))

    @classmethod
    def load(cls, path) -> "RecordStore":
        with open(path, "r", encoding="utf-8") as fp:
            return cls.load_from(fp)


def fixed_store_from_boundaries(boundaries: dict[str, list[int]],
                                lengths: dict[str, int],
                                granularity: str = "minibatch",
                                tolerance: float = DEFAULT_TOLERANCE) -> RecordStore:
    """Frozen store seeded with externally supplied boundaries.

    Used by the fixed-boundary latency-training mode, where ground-truth
    acoustic ends stand in for forced alignments and are never revised.
    Snapshot accuracy is a placeholder; a frozen store never consults it.
    """
    store = RecordStore(granularity=granularity, tolerance=tolerance, frozen=True)
    for utt_id, bounds in boundaries.items():
        cov = batch_coverage([bounds], [lengths[utt_id]])
        if granularity == "token":
            for i, b in enumerate(bounds):
                key = store.token_key(utt_id, i)
                store.records[key] = BoundaryRecord(key, [int(b)], key)
                store.snapshots[key] = StatsSnapshot(0.0, b / lengths[utt_id], granularity)
        else:
            key = f"fixed:{utt_id}"
            store.records[utt_id] = BoundaryRecord(utt_id, list(bounds), key)
            store.snapshots[key] = StatsSnapshot(0.0, cov, granularity)
    return store
