"""Deterministic box-world ray tracer.

Mechanisms: line of sight, image-method specular reflection up to order 2,
and single-bounce scattering from the centre of every box face that both
ends can see.  Each box face doubles as a "facet" so rays can be grouped by
object or by face downstream.

Power model (dBm, unit-gain omni antennas)::

    LOS         P = P_tx - FSPL(d)
    reflection  P = P_tx - FSPL(d_total) + sum 20 log10(R)
    scattering  P = P_tx - FSPL(d1) - FSPL(d2) + 20 log10(S) + 10 log10(cos_in cos_out)
"""

from __future__ import annotations

import enum
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .scene import Scene

SPEED_OF_LIGHT = 299_792_458.0
LOS_OBJECT_ID = -1
LOS_FACET_ID = -1
INTERIOR_TOL = 1e-9
FACE_TOL = 1e-9


class Mechanism(enum.IntEnum):
    LOS = 0
    REFLECTION = 1
    SCATTERING = 2

    @property
    def tag(self) -> str:
        return _MECH_TAGS[self]


_MECH_TAGS = {Mechanism.LOS: "LOS", Mechanism.REFLECTION: "REFL", Mechanism.SCATTERING: "SCAT"}
_TAG_MECH = {v: k for k, v in _MECH_TAGS.items()}


def fspl_db(distance_m, frequency_hz):
    """Free-space path loss 20 log10(4 pi d f / c) in dB."""
    d = np.asarray(distance_m, dtype=float)
    if np.any(d <= 0) or np.any(~np.isfinite(d)):
        raise ValueError("distance must be positive and finite")
    if frequency_hz <= 0:
        raise ValueError("frequency must be positive")
    out = 20 * np.log10(d) + 20 * math.log10(frequency_hz) + 20 * math.log10(4 * math.pi / SPEED_OF_LIGHT)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class TraceLimits:
    max_reflection_order: int = 2
    min_power_dbm: float = -150.0
    frequency_hz: float = 3.55e9
    tx_power_dbm: float = 0.1

    def __post_init__(self):
        if self.max_reflection_order not in (0, 1, 2):
            raise ValueError("max_reflection_order must be 0, 1 or 2")
        if not self.frequency_hz > 0:
            raise ValueError("frequency_hz must be positive")


@dataclass(frozen=True)
class Ray:
    object_id: int
    interaction_point: tuple[float, float, float]
    path_length: float
    delay: float
    power_dbm: float
    mechanism: Mechanism
    facet: int = LOS_FACET_ID


_RAY_COLUMNS = ("object_id", "facet", "points", "path_length", "power_dbm", "mechanism")


class Snapshot:
    """Rays seen at one receiver position, stored column-wise.

    ``rays`` materialises :class:`Ray` objects; bulk consumers should read
    the arrays directly.
    """

    __slots__ = ("index", "rx_position", "object_id", "facet", "points", "path_length", "power_dbm", "mechanism")

    def __init__(self, index, rx_position, object_id, facet, points, path_length, power_dbm, mechanism):
        self.index = int(index)
        self.rx_position = np.asarray(rx_position, dtype=float)
        self.object_id = np.asarray(object_id, dtype=np.int64)
        self.facet = np.asarray(facet, dtype=np.int64)
        self.points = np.asarray(points, dtype=float).reshape(-1, 3)
        self.path_length = np.asarray(path_length, dtype=float)
        self.power_dbm = np.asarray(power_dbm, dtype=float)
        self.mechanism = np.asarray(mechanism, dtype=np.int8)

    @property
    def delay(self) -> np.ndarray:
        return self.path_length / SPEED_OF_LIGHT

    def __len__(self) -> int:
        return len(self.path_length)

    @property
    def rays(self) -> list[Ray]:
        delay = self.delay
        return [
            Ray(
                int(self.object_id[k]),
                tuple(float(v) for v in self.points[k]),
                float(self.path_length[k]),
                float(delay[k]),
                float(self.power_dbm[k]),
                Mechanism(int(self.mechanism[k])),
                int(self.facet[k]),
            )
            for k in range(len(self))
        ]

    @classmethod
    def from_rays(cls, index, rx_position, rays) -> "Snapshot":
        rays = list(rays)
        return cls(
            index,
            rx_position,
            [r.object_id for r in rays],
            [r.facet for r in rays],
            np.array([r.interaction_point for r in rays], dtype=float).reshape(-1, 3),
            [r.path_length for r in rays],
            [r.power_dbm for r in rays],
            [int(r.mechanism) for r in rays],
        )

    def __eq__(self, other) -> bool:
        if not isinstance(other, Snapshot):
            return NotImplemented
        return (
            self.index == other.index
            and np.array_equal(self.rx_position, other.rx_position)
            and all(np.array_equal(getattr(self, c), getattr(other, c)) for c in _RAY_COLUMNS)
        )

    def to_dict(self) -> dict:
        delay = self.delay
        return {
            "index": self.index,
            "rx": self.rx_position.tolist(),
            "rays": [
                {
                    "object_id": int(self.object_id[k]),
                    "facet": int(self.facet[k]),
                    "point": self.points[k].tolist(),
                    "path_m": float(self.path_length[k]),
                    "delay_s": float(delay[k]),
                    "power_dbm": float(self.power_dbm[k]),
                    "mech": _MECH_TAGS[Mechanism(int(self.mechanism[k]))],
                }
                for k in range(len(self))
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Snapshot":
        rays = d["rays"]
        return cls(
            d["index"],
            d["rx"],
            [r["object_id"] for r in rays],
            [r.get("facet", LOS_FACET_ID) for r in rays],
            np.array([r["point"] for r in rays], dtype=float).reshape(-1, 3),
            [r["path_m"] for r in rays],
            [r["power_dbm"] for r in rays],
            [int(_TAG_MECH[r["mech"]]) for r in rays],
        )


def save_snapshots(snapshots, path) -> None:
    with open(path, "w") as fh:
        for s in snapshots:
            fh.write(json.dumps(s.to_dict()) + "\n")


def load_snapshots(path) -> list[Snapshot]:
    with open(path) as fh:
        return [Snapshot.from_dict(json.loads(line)) for line in fh if line.strip()]


# ---------------------------------------------------------------- geometry


def segments_blocked(p, q, box_lo, box_hi, tol: float = INTERIOR_TOL) -> np.ndarray:
    """True where segment ``p[i] -> q[i]`` passes through the interior of any box.

    Boxes are shrunk by ``tol`` so segments ending on, or sliding along, a
    face are not counted as occluded.
    """
    p = np.atleast_2d(np.asarray(p, dtype=float))
    q = np.atleast_2d(np.asarray(q, dtype=float))
    if len(box_lo) == 0 or len(p) == 0:
        return np.zeros(len(p), dtype=bool)
    lo = box_lo[None, :, :] + tol
    hi = box_hi[None, :, :] - tol
    o = p[:, None, :]
    d = (q - p)[:, None, :]
    parallel = np.abs(d) < 1e-15
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / np.where(parallel, 1.0, d)
        t0 = (lo - o) * inv
        t1 = (hi - o) * inv
    tnear = np.where(parallel, -np.inf, np.minimum(t0, t1))
    tfar = np.where(parallel, np.inf, np.maximum(t0, t1))
    # a parallel axis must already be strictly inside the slab
    outside = parallel & ((o <= lo) | (o >= hi))
    enter = np.maximum(tnear.max(axis=2), 0.0)
    leave = np.minimum(tfar.min(axis=2), 1.0)
    hit = (enter < leave) & ~outside.any(axis=2)
    return hit.any(axis=1)


class _Faces:
    """Flat arrays describing the 6 faces of every scene box."""

    def __init__(self, scene: Scene):
        lo, hi = scene.box_arrays()
        n = len(scene.objects)
        self.box_lo, self.box_hi = lo, hi
        self.count = 6 * n
        self.object_id = np.repeat([o.id for o in scene.objects], 6).astype(np.int64)
        self.local = np.tile(np.arange(6), n)
        self.facet = self.object_id * 6 + self.local
        self.axis = np.tile(np.repeat([0, 1, 2], 2), n)
        self.sign = np.tile([-1.0, 1.0] * 3, n)
        box = np.repeat(np.arange(n), 6)
        self.coord = np.where(self.sign < 0, lo[box, self.axis], hi[box, self.axis]) if n else np.zeros(0)
        self.lo = lo[box] if n else np.zeros((0, 3))
        self.hi = hi[box] if n else np.zeros((0, 3))
        self.refl = np.repeat([o.material.reflection_coeff for o in scene.objects], 6).astype(float)
        self.scat = np.repeat([o.material.scattering_coeff for o in scene.objects], 6).astype(float)
        self.center = 0.5 * (self.lo + self.hi)
        if n:
            self.center[np.arange(self.count), self.axis] = self.coord

    def front(self, points, faces) -> np.ndarray:
        """Signed height of ``points`` above the planes of ``faces`` (positive = in front)."""
        return self.sign[faces] * (points[np.arange(len(faces)), self.axis[faces]] - self.coord[faces])

    def mirror(self, points, faces) -> np.ndarray:
        out = np.array(points, dtype=float, copy=True)
        rows = np.arange(len(faces))
        out[rows, self.axis[faces]] = 2 * self.coord[faces] - out[rows, self.axis[faces]]
        return out

    def inside(self, points, faces, tol: float = FACE_TOL) -> np.ndarray:
        lo, hi = self.lo[faces], self.hi[faces]
        ok = (points >= lo - tol) & (points <= hi + tol)
        return ok.all(axis=1)

    def hit_plane(self, a, b, faces) -> np.ndarray:
        """Intersection of line ``a -> b`` with each face plane."""
        rows = np.arange(len(faces))
        ax = self.axis[faces]
        t = (self.coord[faces] - a[rows, ax]) / (b[rows, ax] - a[rows, ax])
        return a + t[:, None] * (b - a)


def _db(x) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return 20 * np.log10(x)


class RayTracer:
    """Tracer bound to one scene, transmitter and set of limits.

    Transmitter-side work (image points, pruned face pairs) is done once at
    construction; :meth:`trace` is then a pure function of the receiver.
    """

    def __init__(self, scene: Scene, tx, limits: TraceLimits | None = None):
        self.scene = scene
        self.tx = np.asarray(tx, dtype=float)
        self.limits = limits or TraceLimits()
        self.faces = f = _Faces(scene)
        all_faces = np.arange(f.count)
        tx_rep = np.repeat(self.tx[None], f.count, axis=0)
        self._f1 = all_faces[f.front(tx_rep, all_faces) > 0]
        self._img1 = f.mirror(np.repeat(self.tx[None], len(self._f1), axis=0), self._f1)
        if self.limits.max_reflection_order >= 2 and len(self._f1):
            i1 = np.repeat(np.arange(len(self._f1)), f.count)
            f2 = np.tile(all_faces, len(self._f1))
            f1 = self._f1[i1]
            keep = (f1 != f2) & (f.front(self._img1[i1], f2) > 0)
            self._p_f1, self._p_f2, self._p_i1 = f1[keep], f2[keep], self._img1[i1[keep]]
            self._p_i2 = f.mirror(self._p_i1, self._p_f2)
        else:
            self._p_f1 = self._p_f2 = np.zeros(0, dtype=int)
            self._p_i1 = self._p_i2 = np.zeros((0, 3))

    # -- individual mechanisms; each returns column dicts

    def _blocked(self, p, q):
        return segments_blocked(p, q, self.faces.box_lo, self.faces.box_hi)

    def los(self, rx) -> Ray | None:
        rx = np.asarray(rx, dtype=float)
        if np.array_equal(rx, self.tx):
            raise ValueError("tx and rx coincide")
        if self._blocked(self.tx[None], rx[None])[0]:
            return None
        d = float(np.linalg.norm(rx - self.tx))
        power = self.limits.tx_power_dbm - fspl_db(d, self.limits.frequency_hz)
        mid = tuple(float(v) for v in 0.5 * (self.tx + rx))
        return Ray(LOS_OBJECT_ID, mid, d, d / SPEED_OF_LIGHT, power, Mechanism.LOS, LOS_FACET_ID)

    def _reflections_order1(self, rx):
        f = self.faces
        faces = self._f1
        rx_rep = np.repeat(rx[None], len(faces), axis=0)
        ok = f.front(rx_rep, faces) > 0
        faces, img, rx_rep = faces[ok], self._img1[ok], rx_rep[ok]
        pt = f.hit_plane(img, rx_rep, faces) if len(faces) else np.zeros((0, 3))
        ok = f.inside(pt, faces)
        faces, img, rx_rep, pt = faces[ok], img[ok], rx_rep[ok], pt[ok]
        tx_rep = np.repeat(self.tx[None], len(faces), axis=0)
        ok = ~self._blocked(tx_rep, pt) & ~self._blocked(pt, rx_rep)
        faces, img, pt = faces[ok], img[ok], pt[ok]
        length = np.linalg.norm(rx[None] - img, axis=1)
        gain = _db(f.refl[faces])
        return faces, pt, length, gain

    def _reflections_order2(self, rx):
        f = self.faces
        f1, f2, i1, i2 = self._p_f1, self._p_f2, self._p_i1, self._p_i2
        rx_rep = np.repeat(rx[None], len(f2), axis=0)
        ok = f.front(rx_rep, f2) > 0
        f1, f2, i1, i2, rx_rep = f1[ok], f2[ok], i1[ok], i2[ok], rx_rep[ok]
        p2 = f.hit_plane(i2, rx_rep, f2) if len(f2) else np.zeros((0, 3))
        ok = f.inside(p2, f2) & (f.front(p2, f1) > 0)
        f1, f2, i1, i2, rx_rep, p2 = f1[ok], f2[ok], i1[ok], i2[ok], rx_rep[ok], p2[ok]
        p1 = f.hit_plane(i1, p2, f1) if len(f1) else np.zeros((0, 3))
        ok = f.inside(p1, f1) & (f.front(p1, f2) > 0)
        f1, f2, i2, rx_rep, p1, p2 = f1[ok], f2[ok], i2[ok], rx_rep[ok], p1[ok], p2[ok]
        tx_rep = np.repeat(self.tx[None], len(f1), axis=0)
        ok = ~self._blocked(tx_rep, p1) & ~self._blocked(p1, p2) & ~self._blocked(p2, rx_rep)
        f1, f2, i2, p2 = f1[ok], f2[ok], i2[ok], p2[ok]
        length = np.linalg.norm(rx[None] - i2, axis=1)
        gain = _db(f.refl[f1]) + _db(f.refl[f2])
        return f2, p2, length, gain

    def reflection_columns(self, rx):
        """Reflected rays as ``(faces, points, path_length, power_dbm)`` arrays."""
        rx = np.asarray(rx, dtype=float)
        lim = self.limits
        parts = []
        if lim.max_reflection_order >= 1:
            parts.append(self._reflections_order1(rx))
        if lim.max_reflection_order >= 2:
            parts.append(self._reflections_order2(rx))
        if not parts:
            return np.zeros(0, dtype=int), np.zeros((0, 3)), np.zeros(0), np.zeros(0)
        faces = np.concatenate([p[0] for p in parts])
        pts = np.concatenate([p[1] for p in parts])
        length = np.concatenate([p[2] for p in parts])
        gain = np.concatenate([p[3] for p in parts])
        power = lim.tx_power_dbm - fspl_db(length, lim.frequency_hz) + gain if len(length) else np.zeros(0)
        keep = power >= lim.min_power_dbm
        return faces[keep], pts[keep], length[keep], power[keep]

    def scattering_columns(self, rx):
        """Scattered rays as ``(faces, points, path_length, power_dbm)`` arrays."""
        rx = np.asarray(rx, dtype=float)
        f, lim = self.faces, self.limits
        faces = np.flatnonzero(f.scat > 0)
        c = f.center[faces]
        tx_rep = np.repeat(self.tx[None], len(faces), axis=0)
        rx_rep = np.repeat(rx[None], len(faces), axis=0)
        h_in = f.front(tx_rep, faces)
        h_out = f.front(rx_rep, faces)
        ok = (h_in > 0) & (h_out > 0)
        faces, c, tx_rep, rx_rep, h_in, h_out = faces[ok], c[ok], tx_rep[ok], rx_rep[ok], h_in[ok], h_out[ok]
        ok = ~self._blocked(tx_rep, c) & ~self._blocked(c, rx_rep)
        faces, c, h_in, h_out = faces[ok], c[ok], h_in[ok], h_out[ok]
        if not len(faces):
            return faces, c, np.zeros(0), np.zeros(0)
        d1 = np.linalg.norm(c - self.tx[None], axis=1)
        d2 = np.linalg.norm(rx[None] - c, axis=1)
        cos_in, cos_out = h_in / d1, h_out / d2
        power = (
            lim.tx_power_dbm
            - fspl_db(d1, lim.frequency_hz)
            - fspl_db(d2, lim.frequency_hz)
            + _db(f.scat[faces])
            + 10 * np.log10(cos_in * cos_out)
        )
        keep = power >= lim.min_power_dbm
        return faces[keep], c[keep], (d1 + d2)[keep], power[keep]

    def trace(self, rx, index: int = 0) -> Snapshot:
        rx = np.asarray(rx, dtype=float)
        f = self.faces
        obj, fac, pts, length, power, mech = [], [], [], [], [], []
        los = self.los(rx)
        if los is not None:
            obj.append([LOS_OBJECT_ID])
            fac.append([LOS_FACET_ID])
            pts.append(np.array([los.interaction_point]))
            length.append([los.path_length])
            power.append([los.power_dbm])
            mech.append([Mechanism.LOS])
        for m, cols in (
            (Mechanism.REFLECTION, self.reflection_columns(rx)),
            (Mechanism.SCATTERING, self.scattering_columns(rx)),
        ):
            faces, p, L, pw = cols
            obj.append(f.object_id[faces])
            fac.append(f.facet[faces])
            pts.append(p)
            length.append(L)
            power.append(pw)
            mech.append(np.full(len(faces), int(m)))
        return Snapshot(
            index,
            rx,
            np.concatenate(obj),
            np.concatenate(fac),
            np.concatenate(pts).reshape(-1, 3),
            np.concatenate(length),
            np.concatenate(power),
            np.concatenate(mech),
        )


def _rays_from_columns(cols, mechanism: Mechanism, faces_meta: _Faces) -> list[Ray]:
    faces, pts, length, power = cols
    return [
        Ray(
            int(faces_meta.object_id[k]),
            tuple(float(v) for v in pts[i]),
            float(length[i]),
            float(length[i] / SPEED_OF_LIGHT),
            float(power[i]),
            mechanism,
            int(faces_meta.facet[k]),
        )
        for i, k in enumerate(faces)
    ]


def trace_los(scene: Scene, tx, rx, limits: TraceLimits | None = None) -> Ray | None:
    return RayTracer(scene, tx, limits).los(rx)


def trace_reflections(scene: Scene, tx, rx, limits: TraceLimits | None = None) -> list[Ray]:
    tracer = RayTracer(scene, tx, limits)
    return _rays_from_columns(tracer.reflection_columns(rx), Mechanism.REFLECTION, tracer.faces)


def trace_scattering(scene: Scene, tx, rx, limits: TraceLimits | None = None) -> list[Ray]:
    tracer = RayTracer(scene, tx, limits)
    return _rays_from_columns(tracer.scattering_columns(rx), Mechanism.SCATTERING, tracer.faces)


def trace_route(scene: Scene, tx, route, limits: TraceLimits | None = None, threads: int = 1) -> list[Snapshot]:
    """One snapshot per route point, ordered by index whatever ``threads`` is."""
    tracer = RayTracer(scene, tx, limits)
    points = np.asarray(route, dtype=float)
    if threads <= 1:
        return [tracer.trace(p, k) for k, p in enumerate(points)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda kp: tracer.trace(kp[1], kp[0]), enumerate(points)))


def snapshot_path(out_dir, route_id: int) -> Path:
    return Path(out_dir) / f"snapshots_route{route_id:04d}.jsonl"
