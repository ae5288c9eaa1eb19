"""VeReMi-style dataset ingestion and time-ordered splits.

A dataset is a directory of newline-delimited JSON reception logs plus one
ground-truth file listing what every sender actually did.  Each transmitted
message is matched to its ground truth by message id; a message is labeled
misbehaving when any kinematic component diverges from the truth by more
than a small tolerance, or when the ground truth names its sender as an
attacker.
"""

from __future__ import annotations

import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .io import load_toml
from .trace import AttackType, BsmRecord, KINEMATIC_FIELDS

log = logging.getLogger(__name__)

DIVERGENCE_TOL = 1e-6
MAX_SKIP_FRACTION = 0.10
RATIO_TOLERANCE = 0.05

# VeReMi extension numbering for the attack types this package models
VEREMI_ATTACK_CODES = {
    0: AttackType.Genuine,
    1: AttackType.ConstantPosition,
    2: AttackType.ConstantPositionOffset,
    3: AttackType.RandomPosition,
    4: AttackType.RandomPositionOffset,
    5: AttackType.ConstantSpeed,
    6: AttackType.ConstantSpeedOffset,
    7: AttackType.RandomSpeed,
    8: AttackType.RandomSpeedOffset,
    10: AttackType.Disruptive,
    13: AttackType.DoS,
    14: AttackType.DoSRandom,
    15: AttackType.DoSDisruptive,
    18: AttackType.DoSRandomSybil,
    19: AttackType.DoSDisruptiveSybil,
}


class IngestError(RuntimeError):
    pass


class InsufficientVehiclesError(IngestError):
    pass


@dataclass
class FieldMapping:
    """JSON key names for each canonical field, plus record-type filters."""

    recv_time: str = "rcvTime"
    send_time: str = "sendTime"
    sender: str = "sender"
    pseudo: str = "senderPseudo"
    message_id: str = "messageID"
    pos: str = "pos"
    spd: str = "spd"
    acl: str = "acl"
    hed: str = "hed"
    attacker_type: str = "attackerType"
    type_key: str = "type"
    log_type: int | None = 3
    truth_type: int | None = 4
    attack_codes: dict = field(default_factory=lambda: dict(VEREMI_ATTACK_CODES))

    def attack_from(self, value) -> AttackType:
        if isinstance(value, str) and not value.lstrip("-").isdigit():
            return AttackType.parse(value)
        code = int(value)
        if code not in self.attack_codes:
            raise KeyError(f"unmapped attacker type code {code}")
        return AttackType(self.attack_codes[code])

    @classmethod
    def from_dict(cls, d: dict) -> FieldMapping:
        fields_ = dict(d.get("fields", {}))
        for k in ("type_key", "log_type", "truth_type"):
            if k in d:
                fields_[k] = d[k]
        codes = dict(VEREMI_ATTACK_CODES)
        for k, v in d.get("attack_codes", {}).items():
            codes[int(k)] = AttackType.parse(v)
        return cls(**fields_, attack_codes=codes)

    @classmethod
    def from_toml(cls, path) -> FieldMapping:
        return cls.from_dict(load_toml(path))


@dataclass
class ParseReport:
    total: int = 0
    kept: int = 0
    duplicates: int = 0
    skipped: Counter = field(default_factory=Counter)

    @property
    def n_skipped(self) -> int:
        return sum(self.skipped.values())

    def as_dict(self) -> dict:
        return {"total": self.total, "kept": self.kept, "duplicates": self.duplicates,
                "skipped": dict(sorted(self.skipped.items()))}


def _vec(obj, key) -> tuple[float, float, float]:
    v = obj[key]
    if not isinstance(v, (list, tuple)) or len(v) != 3:
        raise ValueError(f"{key} is not a 3-array")
    out = tuple(float(x) for x in v)
    if not all(math.isfinite(x) for x in out):
        raise ValueError(f"{key} has non-finite entries")
    return out


def _json_lines(path: Path, report: ParseReport, counted: bool):
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            try:
                yield json.loads(line)
            except json.JSONDecodeError:
                if counted:
                    report.total += 1
                    report.skipped["malformed_json"] += 1
                else:
                    report.skipped["malformed_truth_json"] += 1


def _load_truth(path: Path, m: FieldMapping, report: ParseReport) -> dict:
    truth = {}
    for obj in _json_lines(path, report, counted=False):
        if not isinstance(obj, dict):
            report.skipped["malformed_truth_json"] += 1
            continue
        if m.truth_type is not None and obj.get(m.type_key, m.truth_type) != m.truth_type:
            continue
        try:
            kin = {f: _vec(obj, getattr(m, f)) for f in KINEMATIC_FIELDS}
            truth[obj[m.message_id]] = (obj[m.sender], kin, m.attack_from(obj[m.attacker_type]))
        except (KeyError, ValueError, TypeError):
            report.skipped["bad_truth_entry"] += 1
    return truth


def diverges(sent: dict, true: dict, tol: float = DIVERGENCE_TOL) -> bool:
    for f in KINEMATIC_FIELDS:
        if any(abs(a - b) > tol for a, b in zip(sent[f], true[f])):
            return True
    return False


def parse_dataset(log_dir, ground_truth_file, mapping: FieldMapping | None = None,
                  max_skip_fraction: float = MAX_SKIP_FRACTION) -> tuple[list[BsmRecord], ParseReport]:
    """Parse reception logs against ground truth into labeled records.

    A message heard by several receivers is kept once, at its earliest
    reception.  Records come back sorted by reception time.
    """
    m = mapping or FieldMapping()
    log_dir = Path(log_dir)
    gt = Path(ground_truth_file)
    if not log_dir.is_dir():
        raise IngestError(f"log directory {log_dir} does not exist")
    if not gt.is_file():
        raise IngestError(f"ground-truth file {gt} does not exist")
    report = ParseReport()
    truth = _load_truth(gt, m, report)
    best: dict = {}
    for path in sorted(p for p in log_dir.iterdir() if p.is_file()):
        for obj in _json_lines(path, report, counted=True):
            if not isinstance(obj, dict):
                report.total += 1
                report.skipped["malformed_json"] += 1
                continue
            if m.log_type is not None and obj.get(m.type_key, m.log_type) != m.log_type:
                continue
            report.total += 1
            try:
                mid = obj[m.message_id]
                sent = {f: _vec(obj, getattr(m, f)) for f in KINEMATIC_FIELDS}
                recv, send = float(obj[m.recv_time]), float(obj[m.send_time])
                pseudo = str(obj[m.pseudo])
                obj[m.sender]
            except (KeyError, ValueError, TypeError) as exc:
                key = "missing_key" if isinstance(exc, KeyError) else "bad_value"
                report.skipped[key] += 1
                continue
            if mid not in truth:
                report.skipped["no_ground_truth"] += 1
                continue
            if not (recv >= send >= 0):
                report.skipped["bad_timestamps"] += 1
                continue
            true_sender, true_kin, attack = truth[mid]
            label = int(attack is not AttackType.Genuine or diverges(sent, true_kin))
            rec = BsmRecord(recv, send, str(true_sender), pseudo, sent["pos"], sent["spd"],
                            sent["acl"], sent["hed"], label, attack)
            prev = best.get(mid)
            if prev is not None:
                report.duplicates += 1
                if (rec.recv_time, path.name) >= (prev[0].recv_time, prev[1]):
                    continue
            best[mid] = (rec, path.name)
    if report.total and report.n_skipped / report.total > max_skip_fraction:
        raise IngestError(
            f"skipped {report.n_skipped} of {report.total} log records "
            f"(> {max_skip_fraction:.0%}): {report.as_dict()['skipped']}"
        )
    records = sorted((v[0] for v in best.values()),
                     key=lambda r: (r.recv_time, r.send_time, r.true_sender_id, r.pseudo_id))
    report.kept = len(records)
    for reason, n in report.skipped.items():
        log.info("skipped %d records: %s", n, reason)
    return records, report


# -- class ratio and splits --------------------------------------------------


def vehicle_classes(records: Iterable[BsmRecord]) -> dict[str, int]:
    """1 for vehicles with any misbehaving record, else 0."""
    out: dict[str, int] = {}
    for r in records:
        out[r.true_sender_id] = max(out.get(r.true_sender_id, 0), r.label)
    return out


def class_ratio(records: Sequence[BsmRecord]) -> tuple[float, float]:
    """(misbehaving, genuine) fractions over distinct vehicles."""
    cls = vehicle_classes(records)
    if not cls:
        raise ValueError("empty input")
    bad = sum(cls.values())
    return bad / len(cls), (len(cls) - bad) / len(cls)


@dataclass
class SplitPlan:
    fractions: tuple[float, ...]
    roles: tuple[str, ...] = ()

    def __post_init__(self):
        self.fractions = tuple(float(f) for f in self.fractions)
        if not self.roles:
            self.roles = tuple(f"part{i + 1}" for i in range(len(self.fractions)))
        self.roles = tuple(self.roles)
        if len(self.roles) != len(self.fractions):
            raise ValueError("one role name per fraction")
        if len(set(self.roles)) != len(self.roles):
            raise ValueError("role names must be unique")
        if any(f <= 0 for f in self.fractions):
            raise ValueError("every fraction must be > 0")
        if abs(sum(self.fractions) - 1.0) > 1e-9:
            raise ValueError(f"fractions sum to {sum(self.fractions)}, not 1")


def _slice_ratio(members: dict[str, int], cls: dict[str, int]) -> float:
    if not members:
        return float("nan")
    return sum(cls[v] for v in members) / len(members)


def split_by_time(records: Sequence[BsmRecord], plan: SplitPlan,
                  tolerance: float = RATIO_TOLERANCE, max_moves: int = 10_000) -> dict[str, list[BsmRecord]]:
    """Cut a time-ordered trace into consecutive slices by record count.

    If a slice's misbehaving-vehicle ratio strays more than ``tolerance``
    from the global one, whole vehicles are moved between neighbouring
    slices (all of that vehicle's records in the donor slice) until every
    slice is within tolerance.
    """
    recs = list(records)
    times = [r.recv_time for r in recs]
    if any(b < a for a, b in zip(times, times[1:])):
        raise ValueError("records must be sorted by recv_time")
    N = len(recs)
    k = len(plan.fractions)
    if N < k:
        raise InsufficientVehiclesError(f"{N} records cannot fill {k} slices")
    cum = np.cumsum(plan.fractions)
    cuts = [0] + [int(round(c * N)) for c in cum[:-1]] + [N]
    owner = np.zeros(N, dtype=np.int64)
    for s in range(k):
        owner[cuts[s]:cuts[s + 1]] = s
    cls = vehicle_classes(recs)
    m0 = sum(cls.values()) / len(cls)
    sender = [r.true_sender_id for r in recs]

    def members(s):
        return Counter(sender[i] for i in np.flatnonzero(owner == s))

    def violation(ms):
        if not ms:
            return 1.0
        return max(0.0, abs(_slice_ratio(ms, cls) - m0) - tolerance)

    mem = [members(s) for s in range(k)]
    moves = 0
    while moves < max_moves:
        viol = [violation(ms) for ms in mem]
        total = sum(viol)
        if total <= 1e-12:
            break
        best = None
        for s in range(k):
            for t in (s - 1, s + 1):
                if not 0 <= t < k:
                    continue
                # move vehicle v's records from donor t into s
                for v in sorted(mem[t]):
                    new_s = Counter(mem[s])
                    new_s[v] += mem[t][v]
                    new_t = Counter(mem[t])
                    del new_t[v]
                    if not new_t:
                        continue
                    trial = list(viol)
                    trial[s] = violation(new_s)
                    trial[t] = violation(new_t)
                    gain = total - sum(trial)
                    if gain > 1e-12:
                        key = (-gain, mem[t][v], v, s, t)
                        if best is None or key < best[0]:
                            best = (key, v, s, t)
        if best is None:
            n_veh = len(cls)
            need = k * math.ceil(1 / (2 * tolerance))
            raise InsufficientVehiclesError(
                f"cannot keep all {k} slices within {tolerance:.0%} of the global "
                f"misbehaving ratio {m0:.3f} with {n_veh} vehicles; need at least {need} vehicles"
            )
        _, v, s, t = best
        idx = [i for i in np.flatnonzero(owner == t) if sender[i] == v]
        owner[idx] = s
        mem[s][v] += mem[t][v]
        del mem[t][v]
        moves += 1
    out = {}
    for s, role in enumerate(plan.roles):
        idx = np.flatnonzero(owner == s)
        out[role] = [recs[i] for i in idx]
    return out


def split_manifest(parts: dict[str, list[BsmRecord]], files: dict[str, str]) -> dict:
    out = {}
    for role, recs in parts.items():
        m, g = class_ratio(recs) if recs else (0.0, 0.0)
        out[role] = {
            "file": files.get(role),
            "records": len(recs),
            "vehicles": len({r.true_sender_id for r in recs}),
            "misbehaving_vehicle_ratio": m,
            "first_recv_time": recs[0].recv_time if recs else None,
            "last_recv_time": recs[-1].recv_time if recs else None,
        }
    return out


def default_mapping_toml() -> str:
    m = FieldMapping()
    lines = ["# JSON key names for each canonical field", "[fields]"]
    for k in ("recv_time", "send_time", "sender", "pseudo", "message_id", "pos", "spd", "acl", "hed",
              "attacker_type"):
        lines.append(f'{k} = "{getattr(m, k)}"')
    lines += ["", f'type_key = "{m.type_key}"', f"log_type = {m.log_type}", f"truth_type = {m.truth_type}",
              "", "# attacker type code -> attack name", "[attack_codes]"]
    lines += [f'{code} = "{t.value}"' for code, t in sorted(VEREMI_ATTACK_CODES.items())]
    return "\n".join(lines) + "\n"
