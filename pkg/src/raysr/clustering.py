"""Object-based clustering, tracking and segmentation into fixed-size samples.

A cluster gathers every ray that interacted with the same scene object.  Its
centre is the power-weighted mean of the interaction points and its power the
sum of member powers, both computed in linear milliwatts.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .raytracer import LOS_OBJECT_ID, Snapshot

WINDOW = 17
DEFAULT_SLOTS = 10
GAP_WEIGHT = 1e-2
PAD_OBJECT_ID = -2
N_FEATURES = 4  # centre x, y, z, power_dbm


def dbm_to_mw(p):
    return np.power(10.0, np.asarray(p, dtype=float) / 10.0)


def mw_to_dbm(p):
    with np.errstate(divide="ignore"):
        return 10.0 * np.log10(p)


@dataclass(frozen=True)
class Cluster:
    """Rays sharing one object (or one facet in facet mode).

    ``object_id`` carries the grouping key: the object id in object mode, the
    facet id in facet mode, and -1 for the line-of-sight cluster in both.
    """

    object_id: int
    center: tuple[float, float, float]
    power_dbm: float
    ray_count: int

    @property
    def power_mw(self) -> float:
        return float(10.0 ** (self.power_dbm / 10.0))


def cluster_snapshot(snapshot: Snapshot, mode: str = "object") -> list[Cluster]:
    """Clusters of one snapshot, sorted by key."""
    if mode == "object":
        keys = snapshot.object_id
    elif mode == "facet":
        keys = np.where(snapshot.object_id == LOS_OBJECT_ID, LOS_OBJECT_ID, snapshot.facet)
    else:
        raise ValueError(f"unknown clustering mode {mode!r}")
    if len(keys) == 0:
        return []
    uniq, inv = np.unique(keys, return_inverse=True)
    p = dbm_to_mw(snapshot.power_dbm)
    total = np.bincount(inv, weights=p, minlength=len(uniq))
    centre = np.stack(
        [np.bincount(inv, weights=p * snapshot.points[:, a], minlength=len(uniq)) for a in range(3)], axis=1
    ) / total[:, None]
    counts = np.bincount(inv, minlength=len(uniq))
    power = mw_to_dbm(total)
    return [
        Cluster(int(k), tuple(float(v) for v in centre[i]), float(power[i]), int(counts[i]))
        for i, k in enumerate(uniq)
    ]


@dataclass(frozen=True)
class Track:
    """One object's clusters along a route; absent entries hold NaN."""

    object_id: int
    mask: np.ndarray  # (n,) bool
    centers: np.ndarray  # (n, 3)
    powers: np.ndarray  # (n,) dBm
    ray_counts: np.ndarray  # (n,) int

    def cluster(self, i: int) -> Cluster | None:
        if not self.mask[i]:
            return None
        return Cluster(self.object_id, tuple(self.centers[i]), float(self.powers[i]), int(self.ray_counts[i]))

    def reversed(self) -> "Track":
        return Track(self.object_id, self.mask[::-1], self.centers[::-1], self.powers[::-1], self.ray_counts[::-1])

    def __eq__(self, other) -> bool:
        if not isinstance(other, Track):
            return NotImplemented
        return (
            self.object_id == other.object_id
            and np.array_equal(self.mask, other.mask)
            and np.array_equal(self.centers, other.centers, equal_nan=True)
            and np.array_equal(self.powers, other.powers, equal_nan=True)
            and np.array_equal(self.ray_counts, other.ray_counts)
        )


def track_clusters(per_snapshot: list[list[Cluster]]) -> dict[int, Track]:
    """Associate clusters across ordered snapshots by object id."""
    n = len(per_snapshot)
    ids = sorted({c.object_id for cl in per_snapshot for c in cl})
    tracks = {}
    for oid in ids:
        mask = np.zeros(n, dtype=bool)
        centers = np.full((n, 3), np.nan)
        powers = np.full(n, np.nan)
        counts = np.zeros(n, dtype=np.int64)
        tracks[oid] = Track(oid, mask, centers, powers, counts)
    for i, clusters in enumerate(per_snapshot):
        for c in clusters:
            t = tracks[c.object_id]
            if t.mask[i]:
                raise ValueError(f"duplicate cluster for object {c.object_id} in snapshot {i}")
            t.mask[i] = True
            t.centers[i] = c.center
            t.powers[i] = c.power_dbm
            t.ray_counts[i] = c.ray_count
    return tracks


@dataclass
class Sample:
    """17 consecutive snapshots with ``J`` cluster slots.

    ``features[i, j] = (x, y, z, power_dbm)``; ``weights[i, j]`` is 1 for an
    observed cluster, ``GAP_WEIGHT`` for a gap-filled one and 0 for padding.
    """

    route_id: int
    start_index: int
    rx_positions: np.ndarray  # (17, 3)
    slot_object_ids: np.ndarray  # (J,)
    features: np.ndarray  # (17, J, 4)
    weights: np.ndarray  # (17, J)
    tx: tuple[float, float, float] | None = None

    @property
    def n_slots(self) -> int:
        return self.features.shape[1]

    def to_dict(self) -> dict:
        d = {
            "route_id": self.route_id,
            "start_index": self.start_index,
            "rx_positions": self.rx_positions.tolist(),
            "slot_object_ids": [int(v) for v in self.slot_object_ids],
            "features": self.features.tolist(),
            "weights": self.weights.tolist(),
        }
        if self.tx is not None:
            d["tx"] = list(self.tx)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Sample":
        return cls(
            int(d["route_id"]),
            int(d["start_index"]),
            np.asarray(d["rx_positions"], dtype=float),
            np.asarray(d["slot_object_ids"], dtype=np.int64),
            np.asarray(d["features"], dtype=float),
            np.asarray(d["weights"], dtype=float),
            tuple(d["tx"]) if d.get("tx") is not None else None,
        )


def save_samples(samples, path) -> None:
    with open(path, "w") as fh:
        for s in samples:
            fh.write(json.dumps(s.to_dict()) + "\n")


def load_samples(path) -> list[Sample]:
    with open(path) as fh:
        return [Sample.from_dict(json.loads(line)) for line in fh if line.strip()]


def _arc_length(points: np.ndarray) -> np.ndarray:
    step = np.linalg.norm(np.diff(points, axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(step)])


def _gap_fill(values: np.ndarray, present: np.ndarray, s: np.ndarray) -> np.ndarray:
    """Fill absent rows by interpolation over arc length, holding the ends."""
    out = values.copy()
    idx = np.flatnonzero(present)
    for c in range(values.shape[1]):
        out[~present, c] = np.interp(s[~present], s[idx], values[idx, c])
    return out


def segment_and_pad(
    tracks: dict[int, Track],
    rx_positions,
    window: int = WINDOW,
    stride: int = WINDOW,
    n_slots: int = DEFAULT_SLOTS,
    route_id: int = 0,
    gap_weight: float = GAP_WEIGHT,
    tx=None,
) -> list[Sample]:
    """Cut a tracked route into windows and assign the strongest objects to slots.

    Slots hold the ``n_slots`` objects with the highest mean linear power over
    the window (absent snapshots count as zero power), ordered by that mean
    power, ties broken by ascending object id.
    """
    rx = np.asarray(rx_positions, dtype=float)
    n = len(rx)
    if window > n:
        raise ValueError(f"window of {window} snapshots exceeds route length {n}")
    if n_slots < 1:
        raise ValueError("need at least one cluster slot")
    if stride < 1:
        raise ValueError("stride must be positive")
    for t in tracks.values():
        if len(t.mask) != n:
            raise ValueError("track length does not match route length")
    samples = []
    for start in range(0, n - window + 1, stride):
        sl = slice(start, start + window)
        pos = rx[sl]
        s = _arc_length(pos)
        ranked = []
        for oid, t in tracks.items():
            m = t.mask[sl]
            if not m.any():
                continue
            mean_mw = float(np.where(m, dbm_to_mw(np.where(m, t.powers[sl], 0.0)), 0.0).sum() / window)
            ranked.append((-mean_mw, oid))
        ranked.sort()
        chosen = [oid for _, oid in ranked[:n_slots]]
        features = np.zeros((window, n_slots, 4))
        weights = np.zeros((window, n_slots))
        slot_ids = np.full(n_slots, PAD_OBJECT_ID, dtype=np.int64)
        for j, oid in enumerate(chosen):
            t = tracks[oid]
            m = t.mask[sl]
            vals = np.concatenate([t.centers[sl], t.powers[sl, None]], axis=1)
            if not m.all():
                vals = _gap_fill(vals, m, s)
            features[:, j] = vals
            weights[:, j] = np.where(m, 1.0, gap_weight)
            slot_ids[j] = oid
        samples.append(Sample(route_id, start, pos.copy(), slot_ids, features, weights, tx))
    return samples


def samples_from_snapshots(
    snapshots: list[Snapshot],
    route_id: int = 0,
    n_slots: int = DEFAULT_SLOTS,
    window: int = WINDOW,
    stride: int = WINDOW,
    mode: str = "object",
    tx=None,
) -> list[Sample]:
    per = [cluster_snapshot(s, mode) for s in snapshots]
    tracks = track_clusters(per)
    rx = np.array([s.rx_position for s in snapshots])
    return segment_and_pad(tracks, rx, window, stride, n_slots, route_id, tx=tx)
