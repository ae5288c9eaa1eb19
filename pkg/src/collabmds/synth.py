"""Labeled synthetic BSM traces for every misbehavior variant.

Genuine vehicles drive inside a square area with piecewise-constant
acceleration and yaw rate; their state is integrated on a fixed grid of
``dos_period`` seconds and sampled every ``genuine_bsm_period``.  Misbehaving
vehicles run the same dynamics (that is their ground truth) but transmit
falsified, replayed or flooded messages according to their attack type.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .trace import AttackType, BsmRecord, round_record


class InfeasibleConfigError(ValueError):
    pass


@dataclass
class GenConfig:
    n_vehicles: int = 20
    misbehaving_fraction: float = 0.3
    duration: float = 60.0
    genuine_bsm_period: float = 1.0
    dos_period: float = 0.1
    # assigned round-robin to the misbehaving vehicles
    attack_types: tuple[AttackType, ...] = (AttackType.RandomPosition,)
    # fraction of ``duration`` each vehicle is on the air, drawn uniformly
    presence: tuple[float, float] = (1.0, 1.0)
    const_pos_offset: tuple[float, float, float] = (50.0, 50.0, 0.0)
    random_pos_offset: float = 100.0
    const_spd_offset: tuple[float, float, float] = (5.0, 5.0, 0.0)
    random_spd_offset: float = 10.0
    area: tuple[float, float] = (0.0, 1000.0)
    speed_bounds: tuple[float, float] = (5.0, 30.0)
    max_accel: float = 2.0
    max_yaw_rate: float = 0.1
    latency: tuple[float, float] = (0.001, 0.02)
    rng_seed: int = 0
    id_prefix: str = "v"

    def __post_init__(self):
        self.attack_types = tuple(AttackType(t) for t in self.attack_types)
        for name in ("presence", "const_pos_offset", "const_spd_offset", "area", "speed_bounds", "latency"):
            setattr(self, name, tuple(float(v) for v in getattr(self, name)))
        self.validate()

    def validate(self) -> None:
        if not 0 < self.misbehaving_fraction < 1:
            raise InfeasibleConfigError("misbehaving_fraction must be in (0, 1)")
        if not 0 < self.dos_period < self.genuine_bsm_period:
            raise InfeasibleConfigError("need 0 < dos_period < genuine_bsm_period")
        ratio = self.genuine_bsm_period / self.dos_period
        if abs(ratio - round(ratio)) > 1e-9:
            raise InfeasibleConfigError("genuine_bsm_period must be a multiple of dos_period")
        if not self.area[1] > self.area[0]:
            raise InfeasibleConfigError("degenerate area bounds")
        if not self.speed_bounds[1] > self.speed_bounds[0] >= 0:
            raise InfeasibleConfigError("degenerate speed bounds")
        if not 0 < self.presence[0] <= self.presence[1] <= 1:
            raise InfeasibleConfigError("presence fractions must satisfy 0 < lo <= hi <= 1")
        if self.duration < self.genuine_bsm_period:
            raise InfeasibleConfigError("duration shorter than one beacon period")
        if not self.attack_types or AttackType.Genuine in self.attack_types:
            raise InfeasibleConfigError("attack_types must list at least one misbehavior")
        n_bad = self.n_misbehaving
        if n_bad < 1 or self.n_vehicles - n_bad < 1:
            raise InfeasibleConfigError(
                f"{self.n_vehicles} vehicles at fraction {self.misbehaving_fraction} "
                "leaves one class empty"
            )

    @property
    def n_misbehaving(self) -> int:
        return int(math.floor(self.n_vehicles * self.misbehaving_fraction + 0.5))

    @classmethod
    def from_dict(cls, d: dict) -> GenConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown generator options: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "attack_types":
                v = [t.value for t in v]
            elif isinstance(v, tuple):
                v = list(v)
            out[f.name] = v
        return out


@dataclass
class SynthResult:
    records: list[BsmRecord]
    truth: np.ndarray  # (N, 4, 3) true pos, spd, acl, hed per record
    vehicle_attack: dict[str, AttackType] = field(default_factory=dict)

    def manifest(self) -> dict:
        by_attack = Counter(r.attack_type.value for r in self.records)
        by_label = Counter(str(r.label) for r in self.records)
        vehicles = Counter(t.value for t in self.vehicle_attack.values())
        return {
            "messages": len(self.records),
            "messages_by_label": dict(sorted(by_label.items())),
            "messages_by_attack": dict(sorted(by_attack.items())),
            "vehicles": len(self.vehicle_attack),
            "vehicles_by_attack": dict(sorted(vehicles.items())),
        }


def replay_pool(pool: Sequence[BsmRecord], rng: np.random.Generator, *, send_time: float,
                recv_time: float, sender_id: str, pseudo_id: str,
                attack_type: AttackType = AttackType.Disruptive) -> BsmRecord:
    """Re-transmit a uniformly chosen earlier message under a new identity and time."""
    if len(pool) == 0:
        raise ValueError("replay pool is empty")
    src = pool[int(rng.integers(len(pool)))]
    return BsmRecord(recv_time, send_time, sender_id, pseudo_id,
                     src.pos, src.spd, src.acl, src.hed, 1, attack_type)


def _simulate(cfg: GenConfig, rng: np.random.Generator, n_steps: int):
    """True kinematics on the dos_period grid: arrays of shape (n_steps, 3)."""
    dt = cfg.dos_period
    lo, hi = cfg.area
    vmin, vmax = cfg.speed_bounds
    p = rng.uniform(lo, hi, size=2)
    theta = rng.uniform(-math.pi, math.pi)
    v = rng.uniform(vmin, vmax)
    pos = np.zeros((n_steps, 3))
    spd = np.zeros((n_steps, 3))
    acl = np.zeros((n_steps, 3))
    hed = np.zeros((n_steps, 3))
    next_maneuver = 0
    a = w = 0.0
    for k in range(n_steps):
        if k >= next_maneuver:
            a = rng.uniform(-cfg.max_accel, cfg.max_accel)
            w = rng.uniform(-cfg.max_yaw_rate, cfg.max_yaw_rate)
            next_maneuver = k + int(rng.integers(int(3 / dt), int(8 / dt) + 1))
        a_eff = a
        if (v >= vmax and a > 0) or (v <= vmin and a < 0):
            a_eff = 0.0
        u = np.array([math.cos(theta), math.sin(theta)])
        pos[k, :2] = p
        spd[k, :2] = v * u
        acl[k, :2] = a_eff * u
        hed[k, :2] = u
        v = min(max(v + a_eff * dt, vmin), vmax)
        p = p + v * u * dt
        theta += w * dt
        for axis in range(2):
            if p[axis] < lo or p[axis] > hi:
                p[axis] = 2 * lo - p[axis] if p[axis] < lo else 2 * hi - p[axis]
                theta = math.pi - theta if axis == 0 else -theta
    return pos, spd, acl, hed


def _random_unit(rng) -> tuple[float, float, float]:
    ang = rng.uniform(-math.pi, math.pi)
    return (math.cos(ang), math.sin(ang), 0.0)


def _nonzero_uniform(rng, bound: float) -> np.ndarray:
    while True:
        off = np.array([rng.uniform(-bound, bound), rng.uniform(-bound, bound), 0.0])
        if np.any(off != 0):
            return off


def generate_with_truth(cfg: GenConfig) -> SynthResult:
    rng = np.random.default_rng(cfg.rng_seed)
    dt = cfg.dos_period
    stride = int(round(cfg.genuine_bsm_period / dt))
    total_steps = int(math.floor(cfg.duration / dt + 1e-9))
    lo, hi = cfg.area
    vmin, vmax = cfg.speed_bounds

    n_bad = cfg.n_misbehaving
    bad_idx = set(rng.choice(cfg.n_vehicles, size=n_bad, replace=False).tolist())
    width = max(2, len(str(cfg.n_vehicles - 1)))
    vehicles = []
    k_bad = 0
    for v in range(cfg.n_vehicles):
        vid = f"{cfg.id_prefix}{v:0{width}d}"
        if v in bad_idx:
            attack = cfg.attack_types[k_bad % len(cfg.attack_types)]
            k_bad += 1
        else:
            attack = AttackType.Genuine
        frac = rng.uniform(*cfg.presence)
        span = max(stride, int(round(frac * total_steps)))
        start = int(rng.integers(0, max(1, total_steps - span + 1)))
        phase = int(rng.integers(0, stride))
        vehicles.append((vid, attack, start, span, phase))

    # genuine messages first so replay attackers can draw from them
    messages: list[tuple[BsmRecord, np.ndarray]] = []
    pending_attackers = []
    for vid, attack, start, span, phase in vehicles:
        pos, spd, acl, hed = _simulate(cfg, rng, span)
        if attack is AttackType.Genuine:
            for k in range(phase, span, stride):
                t = (start + k) * dt
                lat = rng.uniform(*cfg.latency)
                truth = np.stack([pos[k], spd[k], acl[k], hed[k]])
                rec = BsmRecord(t + lat, t, vid, f"{vid}-p0", pos[k], spd[k], acl[k], hed[k], 0,
                                AttackType.Genuine)
                messages.append((rec, truth))
        else:
            pending_attackers.append((vid, attack, start, span, phase, (pos, spd, acl, hed)))

    genuine_sorted = sorted((m[0] for m in messages), key=lambda r: r.send_time)
    genuine_times = np.array([r.send_time for r in genuine_sorted])

    for vid, attack, start, span, phase, (pos, spd, acl, hed) in pending_attackers:
        step = 1 if attack.is_dos else stride
        const_pos = np.array([rng.uniform(lo, hi), rng.uniform(lo, hi), 0.0])
        const_spd = np.array(_random_unit(rng)) * rng.uniform(vmin, vmax)
        n_msg = 0
        for k in range(phase % step, span, step):
            t = (start + k) * dt
            lat = rng.uniform(*cfg.latency)
            truth = np.stack([pos[k], spd[k], acl[k], hed[k]])
            tx_pos, tx_spd, tx_acl, tx_hed = pos[k].copy(), spd[k].copy(), acl[k].copy(), hed[k].copy()
            pseudo = f"{vid}-p0"
            if attack.is_sybil:
                pseudo = f"{vid}-s{n_msg}"
            n_msg += 1
            if attack is AttackType.ConstantPosition:
                tx_pos = const_pos
            elif attack is AttackType.ConstantPositionOffset:
                tx_pos = pos[k] + np.array(cfg.const_pos_offset)
            elif attack is AttackType.RandomPosition:
                tx_pos = np.array([rng.uniform(lo, hi), rng.uniform(lo, hi), 0.0])
            elif attack is AttackType.RandomPositionOffset:
                tx_pos = pos[k] + _nonzero_uniform(rng, cfg.random_pos_offset)
            elif attack is AttackType.ConstantSpeed:
                tx_spd = const_spd
            elif attack is AttackType.ConstantSpeedOffset:
                tx_spd = spd[k] + np.array(cfg.const_spd_offset)
            elif attack is AttackType.RandomSpeed:
                tx_spd = np.array([rng.uniform(-vmax, vmax), rng.uniform(-vmax, vmax), 0.0])
            elif attack is AttackType.RandomSpeedOffset:
                tx_spd = spd[k] + _nonzero_uniform(rng, cfg.random_spd_offset)
            elif attack in (AttackType.DoSRandom, AttackType.DoSRandomSybil):
                tx_pos = np.array([rng.uniform(lo, hi), rng.uniform(lo, hi), 0.0])
                tx_spd = np.array([rng.uniform(-vmax, vmax), rng.uniform(-vmax, vmax), 0.0])
                tx_acl = np.array([rng.uniform(-cfg.max_accel, cfg.max_accel),
                                   rng.uniform(-cfg.max_accel, cfg.max_accel), 0.0])
                tx_hed = np.array(_random_unit(rng))
            if attack.is_replay:
                pool = genuine_sorted[: int(np.searchsorted(genuine_times, t, side="left"))]
                if not pool:
                    continue
                rec = replay_pool(pool, rng, send_time=t, recv_time=t + lat, sender_id=vid,
                                  pseudo_id=pseudo, attack_type=attack)
            else:
                rec = BsmRecord(t + lat, t, vid, pseudo, tx_pos, tx_spd, tx_acl, tx_hed, 1, attack)
            messages.append((rec, truth))

    messages.sort(key=lambda m: (m[0].recv_time, m[0].true_sender_id, m[0].pseudo_id))
    records = [round_record(m[0]) for m in messages]
    truth = np.round(np.array([m[1] for m in messages]).reshape(-1, 4, 3), 6) + 0.0
    return SynthResult(records, truth, {v[0]: v[1] for v in vehicles})


def generate(cfg: GenConfig) -> list[BsmRecord]:
    return generate_with_truth(cfg).records


def export_veremi(result: SynthResult, out_dir) -> tuple[Path, Path]:
    """Write a VeReMi-style dataset: one JSON-lines log per receiver plus a
    ground-truth file, using the default field mapping's key names."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    log_dir = out / "logs"
    log_dir.mkdir(exist_ok=True)
    gt_lines = []
    log_lines = []
    for i, (r, tr) in enumerate(zip(result.records, result.truth)):
        msg_id = i + 1
        log_lines.append(json.dumps({
            "type": 3, "rcvTime": r.recv_time, "sendTime": r.send_time,
            "sender": r.true_sender_id, "senderPseudo": r.pseudo_id, "messageID": msg_id,
            "pos": list(r.pos), "spd": list(r.spd), "acl": list(r.acl), "hed": list(r.hed),
        }))
        gt_lines.append(json.dumps({
            "type": 4, "sendTime": r.send_time, "sender": r.true_sender_id,
            "senderPseudo": r.pseudo_id, "messageID": msg_id,
            "pos": tr[0].tolist(), "spd": tr[1].tolist(), "acl": tr[2].tolist(), "hed": tr[3].tolist(),
            "attackerType": r.attack_type.value,
        }))
    (log_dir / "traceJSON-rsu.json").write_text("\n".join(log_lines) + "\n", encoding="utf-8")
    gt = out / "traceGroundTruthJSON.json"
    gt.write_text("\n".join(gt_lines) + "\n", encoding="utf-8")
    return log_dir, gt
