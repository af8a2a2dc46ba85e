"""Channel impulse responses rebuilt from cluster centres and powers."""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .clustering import Cluster
from .raytracer import LOS_OBJECT_ID, SPEED_OF_LIGHT, Snapshot

DEFAULT_DELAY_TOL = 10e-9  # 1 / 100 MHz
DEFAULT_POWER_TOL = 3.0


class TapSource(str, enum.Enum):
    RESTORED = "RESTORED"
    SIMULATED = "SIMULATED"


@dataclass(frozen=True)
class CIRTap:
    delay: float
    power_dbm: float
    source: TapSource = TapSource.RESTORED


def _tap(center, power_dbm, object_id, tx, rx) -> CIRTap:
    if object_id == LOS_OBJECT_ID:
        length = np.linalg.norm(rx - tx)
    else:
        c = np.asarray(center, dtype=float)
        length = np.linalg.norm(tx - c) + np.linalg.norm(c - rx)
    return CIRTap(float(length / SPEED_OF_LIGHT), float(power_dbm), TapSource.RESTORED)


def reconstruct(clusters, tx, rx) -> list[CIRTap]:
    """One tap per cluster, delay from the Tx -> centre -> Rx path."""
    tx = np.asarray(tx, dtype=float)
    rx = np.asarray(rx, dtype=float)
    out = []
    for c in clusters:
        if not np.all(np.isfinite(c.center)):
            raise ValueError(f"cluster {c.object_id} has a non-finite centre")
        out.append(_tap(c.center, c.power_dbm, c.object_id, tx, rx))
    return out


def reconstruct_slots(features, slot_object_ids, weights, tx, rx, min_weight: float = 0.0) -> list[CIRTap]:
    """Taps from one snapshot row of a sample, skipping slots with weight <= ``min_weight``."""
    clusters = [
        Cluster(int(oid), tuple(f[:3]), float(f[3]), 1)
        for f, oid, w in zip(features, slot_object_ids, weights)
        if w > min_weight
    ]
    return reconstruct(clusters, tx, rx)


def simulated_taps(snapshot: Snapshot) -> list[CIRTap]:
    """Every traced ray as a multipath component."""
    return [
        CIRTap(float(d), float(p), TapSource.SIMULATED) for d, p in zip(snapshot.delay, snapshot.power_dbm)
    ]


def match_rate(restored, simulated, delay_tol: float = DEFAULT_DELAY_TOL, power_tol: float = DEFAULT_POWER_TOL) -> float:
    """Fraction of simulated taps matched one-to-one by a restored tap.

    A pair is admissible when delays differ by at most ``delay_tol`` and
    powers by at most ``power_tol``.  Among admissible pairs the matching
    has maximum size, and among those the smallest total delay offset, so
    the rate never drops when a tolerance grows.
    """
    if delay_tol <= 0 or power_tol <= 0:
        raise ValueError("tolerances must be positive")
    simulated = list(simulated)
    restored = list(restored)
    if not simulated:
        return 1.0
    if not restored:
        return 0.0
    sd = np.array([t.delay for t in simulated])
    sp = np.array([t.power_dbm for t in simulated])
    rd = np.array([t.delay for t in restored])
    rp = np.array([t.power_dbm for t in restored])
    dd = np.abs(sd[:, None] - rd[None, :])
    ok = (dd <= delay_tol) & (np.abs(sp[:, None] - rp[None, :]) <= power_tol)
    if not ok.any():
        return 0.0
    # every admissible pair costs < 1 in total, an inadmissible one more than all of them together
    n = max(len(sd), len(rd))
    cost = np.where(ok, dd / delay_tol / (n + 1), float(n + 1))
    rows, cols = linear_sum_assignment(cost)
    matched = int(ok[rows, cols].sum())
    return matched / len(simulated)


CIR_COLUMNS = ("snapshot_index", "source", "delay_ns", "power_dbm")


def write_cir_csv(rows, path) -> None:
    """``rows`` is an iterable of ``(snapshot_index, CIRTap)``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CIR_COLUMNS)
        for idx, tap in rows:
            w.writerow([idx, tap.source.value, f"{tap.delay * 1e9:.6f}", f"{tap.power_dbm:.6f}"])
