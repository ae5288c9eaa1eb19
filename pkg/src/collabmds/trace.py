"""Message, feature and state types shared by every other module."""

from __future__ import annotations

import csv
import enum
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

CSV_HEADER = (
    "recv_time,send_time,sender,pseudo,"
    "pos_x,pos_y,pos_z,spd_x,spd_y,spd_z,acl_x,acl_y,acl_z,hed_x,hed_y,hed_z,"
    "label,attack_type"
).split(",")

KINEMATIC_FIELDS = ("pos", "spd", "acl", "hed")


class RejectedRecordError(ValueError):
    """A record whose fields cannot be turned into features."""


class AttackType(str, enum.Enum):
    Genuine = "Genuine"
    ConstantPosition = "ConstantPosition"
    ConstantPositionOffset = "ConstantPositionOffset"
    RandomPosition = "RandomPosition"
    RandomPositionOffset = "RandomPositionOffset"
    ConstantSpeed = "ConstantSpeed"
    ConstantSpeedOffset = "ConstantSpeedOffset"
    RandomSpeed = "RandomSpeed"
    RandomSpeedOffset = "RandomSpeedOffset"
    Disruptive = "Disruptive"
    DoS = "DoS"
    DoSRandom = "DoSRandom"
    DoSDisruptive = "DoSDisruptive"
    DoSRandomSybil = "DoSRandomSybil"
    DoSDisruptiveSybil = "DoSDisruptiveSybil"

    @property
    def is_dos(self) -> bool:
        return self.value.startswith("DoS")

    @property
    def is_sybil(self) -> bool:
        return self.value.endswith("Sybil")

    @property
    def is_replay(self) -> bool:
        return "Disruptive" in self.value

    @classmethod
    def parse(cls, name: str) -> AttackType:
        try:
            return cls(name)
        except ValueError:
            raise ValueError(f"unknown attack type {name!r}") from None


ATTACK_CODES = {t: i for i, t in enumerate(AttackType)}
POSITION_VARIANTS = (
    AttackType.ConstantPosition,
    AttackType.ConstantPositionOffset,
    AttackType.RandomPosition,
    AttackType.RandomPositionOffset,
)
SPEED_VARIANTS = (
    AttackType.ConstantSpeed,
    AttackType.ConstantSpeedOffset,
    AttackType.RandomSpeed,
    AttackType.RandomSpeedOffset,
)


def _vec3(v) -> tuple[float, float, float]:
    t = tuple(float(x) for x in v)
    if len(t) != 3:
        raise ValueError(f"expected a 3-vector, got {v!r}")
    return t


@dataclass(frozen=True)
class BsmRecord:
    """One received basic safety message.

    ``attack_type`` is the ground-truth behaviour of the sender.  Freshly
    generated or parsed traces satisfy ``label == 0 => Genuine`` (see
    ``check_labels``); poisoned copies may break it on purpose, since a
    flipped record keeps its true attack type for bookkeeping.
    """

    recv_time: float
    send_time: float
    true_sender_id: str
    pseudo_id: str
    pos: tuple[float, float, float]
    spd: tuple[float, float, float]
    acl: tuple[float, float, float]
    hed: tuple[float, float, float]
    label: int = 0
    attack_type: AttackType = AttackType.Genuine

    def __post_init__(self):
        for name in KINEMATIC_FIELDS:
            object.__setattr__(self, name, _vec3(getattr(self, name)))
        object.__setattr__(self, "attack_type", AttackType(self.attack_type))
        object.__setattr__(self, "true_sender_id", str(self.true_sender_id))
        object.__setattr__(self, "pseudo_id", str(self.pseudo_id))
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label!r}")
        if not (self.recv_time >= self.send_time >= 0):
            raise ValueError(
                f"need recv_time >= send_time >= 0, got {self.recv_time}, {self.send_time}"
            )

    def with_label(self, label: int) -> BsmRecord:
        return BsmRecord(
            self.recv_time, self.send_time, self.true_sender_id, self.pseudo_id,
            self.pos, self.spd, self.acl, self.hed, label, self.attack_type,
        )


def check_labels(records: Iterable[BsmRecord]) -> None:
    for r in records:
        if r.label == 0 and r.attack_type is not AttackType.Genuine:
            raise ValueError(f"record from {r.pseudo_id} labelled 0 but typed {r.attack_type.value}")


def featurize(record: BsmRecord) -> np.ndarray:
    """Euclidean norms of position, speed, acceleration and heading."""
    out = np.array([math.sqrt(sum(c * c for c in getattr(record, f))) for f in KINEMATIC_FIELDS])
    if not np.all(np.isfinite(out)):
        raise RejectedRecordError(f"non-finite kinematics in record from {record.pseudo_id}")
    return out


@dataclass
class DetectionState:
    time_window: np.ndarray
    action_window: np.ndarray

    def __post_init__(self):
        self.time_window = np.asarray(self.time_window, dtype=np.float64)
        self.action_window = np.asarray(self.action_window, dtype=np.int8)
        if self.time_window.ndim != 2 or len(self.time_window) < 1:
            raise ValueError("time_window must be a non-empty (n, d) array")
        if self.action_window.shape != (len(self.time_window),):
            raise ValueError("time_window and action_window lengths differ")

    @property
    def n(self) -> int:
        return len(self.time_window)

    @classmethod
    def initial(cls, n: int, d: int) -> DetectionState:
        return cls(np.zeros((n, d)), np.zeros(n, dtype=np.int8))

    def __eq__(self, other):
        return (
            isinstance(other, DetectionState)
            and np.array_equal(self.time_window, other.time_window)
            and np.array_equal(self.action_window, other.action_window)
        )


def push_state(prev: DetectionState, x, a_prev: int) -> DetectionState:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (prev.time_window.shape[1],):
        raise ValueError(
            f"feature vector has shape {x.shape}, state expects ({prev.time_window.shape[1]},)"
        )
    if a_prev not in (0, 1):
        raise ValueError("previous action must be 0 or 1")
    tw = np.concatenate([prev.time_window[1:], x[None]], axis=0)
    aw = np.concatenate([prev.action_window[1:], np.array([a_prev], dtype=np.int8)])
    return DetectionState(tw, aw)


@dataclass
class ConfusionCounts:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    def add(self, action: int, label: int) -> None:
        if label == 1:
            if action == 1:
                self.tp += 1
            else:
                self.fn += 1
        elif action == 1:
            self.fp += 1
        else:
            self.tn += 1

    @classmethod
    def from_arrays(cls, actions, labels) -> ConfusionCounts:
        actions = np.asarray(actions)
        labels = np.asarray(labels)
        return cls(
            tp=int(np.sum((actions == 1) & (labels == 1))),
            tn=int(np.sum((actions == 0) & (labels == 0))),
            fp=int(np.sum((actions == 1) & (labels == 0))),
            fn=int(np.sum((actions == 0) & (labels == 1))),
        )

    def as_dict(self) -> dict[str, int]:
        return {"tp": self.tp, "tn": self.tn, "fp": self.fp, "fn": self.fn}


# -- canonical CSV ----------------------------------------------------------


def _fmt(x: float) -> str:
    s = f"{x:.6f}"
    return "0.000000" if s == "-0.000000" else s


def record_to_row(r: BsmRecord) -> list[str]:
    row = [_fmt(r.recv_time), _fmt(r.send_time), r.true_sender_id, r.pseudo_id]
    for name in KINEMATIC_FIELDS:
        row.extend(_fmt(c) for c in getattr(r, name))
    row.extend([str(r.label), r.attack_type.value])
    return row


def row_to_record(row: Sequence[str]) -> BsmRecord:
    if len(row) != len(CSV_HEADER):
        raise ValueError(f"expected {len(CSV_HEADER)} columns, got {len(row)}")
    vals = [float(v) for v in row[4:16]]
    return BsmRecord(
        recv_time=float(row[0]),
        send_time=float(row[1]),
        true_sender_id=row[2],
        pseudo_id=row[3],
        pos=vals[0:3],
        spd=vals[3:6],
        acl=vals[6:9],
        hed=vals[9:12],
        label=int(row[16]),
        attack_type=AttackType.parse(row[17]),
    )


def dumps_trace(records: Iterable[BsmRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in records:
        w.writerow(record_to_row(r))
    return buf.getvalue()


def loads_trace(text: str) -> list[BsmRecord]:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0] != CSV_HEADER:
        raise ValueError("missing or unexpected trace CSV header")
    return [row_to_record(r) for r in rows[1:] if r]


def write_trace(path, records: Iterable[BsmRecord]) -> None:
    from .io import atomic_write_text

    atomic_write_text(path, dumps_trace(records))


def read_trace(path) -> list[BsmRecord]:
    return loads_trace(Path(path).read_text(encoding="utf-8"))


def round_record(r: BsmRecord, ndigits: int = 6) -> BsmRecord:
    """Round every real field to the CSV precision so CSV round-trips are exact."""

    def rv(v):
        return tuple(round(c, ndigits) + 0.0 for c in v)

    return BsmRecord(
        round(r.recv_time, ndigits), round(r.send_time, ndigits), r.true_sender_id,
        r.pseudo_id, rv(r.pos), rv(r.spd), rv(r.acl), rv(r.hed), r.label, r.attack_type,
    )


# -- columnar view ----------------------------------------------------------


@dataclass
class TraceArrays:
    """Column-oriented copy of a trace, used by the learning code."""

    recv_time: np.ndarray
    send_time: np.ndarray
    kin: np.ndarray  # (N, 4, 3): pos, spd, acl, hed
    label: np.ndarray
    attack: np.ndarray
    sender: np.ndarray  # integer codes
    pseudo: np.ndarray  # integer codes
    sender_names: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.label)

    @classmethod
    def from_records(cls, records: Sequence[BsmRecord]) -> TraceArrays:
        if len(records) == 0:
            raise ValueError("empty trace")
        senders: dict[str, int] = {}
        pseudos: dict[str, int] = {}
        kin = np.array([[r.pos, r.spd, r.acl, r.hed] for r in records], dtype=np.float64)
        return cls(
            recv_time=np.array([r.recv_time for r in records]),
            send_time=np.array([r.send_time for r in records]),
            kin=kin,
            label=np.array([r.label for r in records], dtype=np.int8),
            attack=np.array([ATTACK_CODES[r.attack_type] for r in records], dtype=np.int16),
            sender=np.array([senders.setdefault(r.true_sender_id, len(senders)) for r in records]),
            pseudo=np.array([pseudos.setdefault(r.pseudo_id, len(pseudos)) for r in records]),
            sender_names=list(senders),
        )

    def norms(self) -> np.ndarray:
        out = np.linalg.norm(self.kin, axis=2)
        if not np.all(np.isfinite(out)):
            raise RejectedRecordError("non-finite kinematics in trace")
        return out

    def inter_arrival(self, fill: float) -> np.ndarray:
        """Seconds since the previous message carrying the same pseudonym."""
        out = np.full(len(self), float(fill))
        order = np.lexsort((self.recv_time, self.pseudo))
        p = self.pseudo[order]
        t = self.recv_time[order]
        same = p[1:] == p[:-1]
        gaps = np.where(same, t[1:] - t[:-1], fill)
        out[order[1:]] = gaps
        return out
