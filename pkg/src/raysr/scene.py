"""Box-world scenes, transmitter placement and receiver routes.

Everything in a scene is an axis-aligned box.  The ground is an ordinary
object with id 0 whose top face sits at ``ground_z``, so ground reflections
and ground scattering cluster like any building.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

GROUND_ID = 0
GROUND_THICKNESS = 1.0


class SceneError(ValueError):
    """Invalid scene, generator config or route."""


@dataclass(frozen=True)
class Material:
    reflection_coeff: float = 0.6
    scattering_coeff: float = 0.3

    def __post_init__(self):
        for name in ("reflection_coeff", "scattering_coeff"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise SceneError(f"{name} must lie in [0, 1], got {v}")
        if self.reflection_coeff**2 + self.scattering_coeff**2 > 1.0 + 1e-12:
            raise SceneError("reflection_coeff**2 + scattering_coeff**2 must not exceed 1")


@dataclass(frozen=True)
class SceneObject:
    id: int
    min: tuple[float, float, float]
    max: tuple[float, float, float]
    material: Material = field(default_factory=Material)

    def __post_init__(self):
        lo = tuple(float(v) for v in self.min)
        hi = tuple(float(v) for v in self.max)
        if len(lo) != 3 or len(hi) != 3:
            raise SceneError("box corners must be 3D")
        if not all(a < b for a, b in zip(lo, hi)):
            raise SceneError(f"object {self.id}: min corner must be < max corner on every axis")
        object.__setattr__(self, "min", lo)
        object.__setattr__(self, "max", hi)

    def contains(self, point, strict: bool = False) -> bool:
        p = np.asarray(point, dtype=float)
        lo, hi = np.asarray(self.min), np.asarray(self.max)
        if strict:
            return bool(np.all(p > lo) and np.all(p < hi))
        return bool(np.all(p >= lo) and np.all(p <= hi))


@dataclass(frozen=True)
class Scene:
    objects: tuple[SceneObject, ...]
    ground_z: float = 0.0

    def __post_init__(self):
        objs = tuple(self.objects)
        ids = [o.id for o in objs]
        if len(set(ids)) != len(ids):
            raise SceneError("object ids must be unique within a scene")
        object.__setattr__(self, "objects", objs)

    def object(self, object_id: int) -> SceneObject:
        for o in self.objects:
            if o.id == object_id:
                return o
        raise KeyError(object_id)

    def box_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """Stacked ``(n, 3)`` min and max corners."""
        if not self.objects:
            return np.zeros((0, 3)), np.zeros((0, 3))
        lo = np.array([o.min for o in self.objects], dtype=float)
        hi = np.array([o.max for o in self.objects], dtype=float)
        return lo, hi

    def to_dict(self) -> dict:
        return {
            "ground_z": self.ground_z,
            "objects": [
                {
                    "id": o.id,
                    "min": list(o.min),
                    "max": list(o.max),
                    "reflection_coeff": o.material.reflection_coeff,
                    "scattering_coeff": o.material.scattering_coeff,
                }
                for o in self.objects
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Scene":
        try:
            objects = tuple(
                SceneObject(
                    id=int(o["id"]),
                    min=tuple(o["min"]),
                    max=tuple(o["max"]),
                    material=Material(float(o["reflection_coeff"]), float(o["scattering_coeff"])),
                )
                for o in data["objects"]
            )
            return cls(objects=objects, ground_z=float(data["ground_z"]))
        except (KeyError, TypeError) as exc:
            raise SceneError(f"malformed scene document: {exc!r}") from exc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "Scene":
        return cls.from_dict(json.loads(text))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "Scene":
        return cls.from_json(Path(path).read_text())


def ground_object(lo_xy, hi_xy, ground_z: float = 0.0, material: Material | None = None) -> SceneObject:
    material = material or Material(0.5, 0.2)
    return SceneObject(
        GROUND_ID,
        (lo_xy[0], lo_xy[1], ground_z - GROUND_THICKNESS),
        (hi_xy[0], hi_xy[1], ground_z),
        material,
    )


# ---------------------------------------------------------------- routes


@dataclass(frozen=True)
class RouteSpec:
    """Straight receiver track; ``start`` only contributes its x/y."""

    start: tuple[float, float, float]
    direction: tuple[float, float, float] = (1.0, 0.0, 0.0)
    spacing: float = 1.0
    count: int = 17
    rx_height: float = 2.0

    def __post_init__(self):
        object.__setattr__(self, "start", tuple(float(v) for v in self.start))
        object.__setattr__(self, "direction", tuple(float(v) for v in self.direction))
        if not self.spacing > 0:
            raise SceneError("route spacing must be positive")
        if abs(np.linalg.norm(self.direction) - 1.0) > 1e-12:
            raise SceneError("route direction must be a unit vector")
        if abs(self.direction[2]) > 1e-12:
            raise SceneError("route direction must be horizontal")

    def to_dict(self) -> dict:
        return {
            "start": list(self.start),
            "direction": list(self.direction),
            "spacing": self.spacing,
            "count": self.count,
            "rx_height": self.rx_height,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RouteSpec":
        return cls(
            start=tuple(d["start"]),
            direction=tuple(d.get("direction", (1.0, 0.0, 0.0))),
            spacing=float(d.get("spacing", 1.0)),
            count=int(d["count"]),
            rx_height=float(d.get("rx_height", 2.0)),
        )


MIN_ROUTE_POINTS = 17


def generate_route(spec: RouteSpec, ground_z: float = 0.0) -> np.ndarray:
    """Receiver positions ``(count, 3)`` spaced ``spacing`` apart at ``rx_height``."""
    if spec.count < MIN_ROUTE_POINTS:
        raise SceneError(
            f"route has {spec.count} points; at least {MIN_ROUTE_POINTS} are needed to form one sample"
        )
    k = np.arange(spec.count, dtype=float)[:, None]
    d = np.asarray(spec.direction)
    pts = np.empty((spec.count, 3))
    pts[:, :2] = np.asarray(spec.start[:2]) + k * spec.spacing * d[:2]
    pts[:, 2] = ground_z + spec.rx_height
    return pts


def check_route_clear(scene: Scene, points: np.ndarray) -> None:
    """Raise if any route point touches a scene object."""
    lo, hi = scene.box_arrays()
    if len(lo) == 0:
        return
    inside = np.all((points[:, None, :] >= lo[None]) & (points[:, None, :] <= hi[None]), axis=2)
    if inside.any():
        k, b = np.argwhere(inside)[0]
        raise SceneError(f"route point {k} lies inside object {scene.objects[b].id}")


@dataclass(frozen=True)
class Route:
    """A receiver track with its transmitter, ready for tracing."""

    route_id: int
    spec: RouteSpec
    tx: tuple[float, float, float]
    los: bool = True

    def points(self, ground_z: float = 0.0) -> np.ndarray:
        return generate_route(self.spec, ground_z)

    def to_dict(self) -> dict:
        return {"route_id": self.route_id, "spec": self.spec.to_dict(), "tx": list(self.tx), "los": self.los}

    @classmethod
    def from_dict(cls, d: dict) -> "Route":
        return cls(int(d["route_id"]), RouteSpec.from_dict(d["spec"]), tuple(d["tx"]), bool(d.get("los", True)))


def save_routes(routes, path) -> None:
    Path(path).write_text(json.dumps([r.to_dict() for r in routes], sort_keys=True, indent=1))


def load_routes(path) -> list[Route]:
    return [Route.from_dict(d) for d in json.loads(Path(path).read_text())]


# ---------------------------------------------------------------- generators


@dataclass(frozen=True)
class UrbanConfig:
    """Manhattan grid: one building per block, streets in between."""

    nx: int = 3
    ny: int = 3
    block_size: float = 40.0
    street_width: float = 20.0
    footprint_range: tuple[float, float] = (24.0, 40.0)
    height_range: tuple[float, float] = (12.0, 45.0)
    buildings_per_block: int = 1
    building_material: Material = field(default_factory=lambda: Material(0.6, 0.3))
    ground_material: Material = field(default_factory=lambda: Material(0.5, 0.2))
    ground_z: float = 0.0

    @property
    def pitch(self) -> float:
        return self.block_size + self.street_width

    @property
    def extent(self) -> tuple[float, float]:
        return (self.nx * self.pitch + self.street_width, self.ny * self.pitch + self.street_width)

    def validate(self) -> None:
        if self.nx <= 0 or self.ny <= 0:
            raise SceneError("urban grid dimensions must be positive")
        if self.buildings_per_block <= 0:
            raise SceneError("buildings_per_block must be positive")
        if self.block_size <= 0 or self.street_width <= 0:
            raise SceneError("block size and street width must be positive")
        f0, f1 = self.footprint_range
        h0, h1 = self.height_range
        if not (0 < f0 <= f1 <= self.block_size):
            raise SceneError("footprint range must satisfy 0 < lo <= hi <= block_size")
        if not (0 < h0 <= h1):
            raise SceneError("height range must satisfy 0 < lo <= hi")


def generate_urban_scene(config: UrbanConfig, seed: int) -> Scene:
    config.validate()
    rng = np.random.default_rng(seed)
    gz = config.ground_z
    margin = config.street_width
    ex, ey = config.extent
    objects = [ground_object((-margin, -margin), (ex + margin, ey + margin), gz, config.ground_material)]
    oid = 1
    k = config.buildings_per_block
    cell = config.block_size / k
    f0, f1 = config.footprint_range
    for i in range(config.nx):
        for j in range(config.ny):
            for a in range(k):
                for b in range(k):
                    x0 = config.street_width + i * config.pitch + a * cell
                    y0 = config.street_width + j * config.pitch + b * cell
                    wx, wy = rng.uniform(f0 / k, f1 / k, size=2)
                    h = rng.uniform(*config.height_range)
                    ox = rng.uniform(0.0, cell - wx)
                    oy = rng.uniform(0.0, cell - wy)
                    objects.append(
                        SceneObject(
                            oid,
                            (x0 + ox, y0 + oy, gz),
                            (x0 + ox + wx, y0 + oy + wy, gz + h),
                            config.building_material,
                        )
                    )
                    oid += 1
    return Scene(tuple(objects), gz)


@dataclass(frozen=True)
class StreetConfig:
    """A single straight street along +x lined with buildings and small scatterers."""

    length: float = 200.0
    street_width: float = 24.0
    n_buildings_per_side: int = 5
    building_depth_range: tuple[float, float] = (10.0, 25.0)
    height_range: tuple[float, float] = (8.0, 30.0)
    gap_range: tuple[float, float] = (2.0, 12.0)
    n_scatterers: int = 8
    scatterer_size_range: tuple[float, float] = (1.0, 4.0)
    scatterer_height_range: tuple[float, float] = (1.2, 6.0)
    building_material: Material = field(default_factory=lambda: Material(0.6, 0.3))
    scatterer_material: Material = field(default_factory=lambda: Material(0.4, 0.5))
    ground_material: Material = field(default_factory=lambda: Material(0.5, 0.2))
    ground_z: float = 0.0

    def validate(self) -> None:
        if self.length <= 0 or self.street_width <= 0 or self.n_buildings_per_side <= 0:
            raise SceneError("street dimensions and building count must be positive")
        if self.n_scatterers < 0:
            raise SceneError("scatterer count must be non-negative")


# lane kept free of scatterers so receiver routes never collide
STREET_LANE_HALF_WIDTH = 3.0


def generate_street_scene(config: StreetConfig, seed: int) -> Scene:
    """Street along x in ``[0, length]`` centred on ``y = 0``.

    Scatterers (cars, trees, kiosks) sit between the central lane and the
    building rows.
    """
    config.validate()
    rng = np.random.default_rng(seed)
    gz = config.ground_z
    half = config.street_width / 2
    depth_hi = config.building_depth_range[1]
    objects = [
        ground_object(
            (-config.street_width, -half - depth_hi - 10.0),
            (config.length + config.street_width, half + depth_hi + 10.0),
            gz,
            config.ground_material,
        )
    ]
    oid = 1
    slot = config.length / config.n_buildings_per_side
    for side in (-1, 1):
        for k in range(config.n_buildings_per_side):
            gap = min(rng.uniform(*config.gap_range), 0.8 * slot)
            x0 = k * slot + gap / 2
            x1 = (k + 1) * slot - gap / 2
            depth = rng.uniform(*config.building_depth_range)
            h = rng.uniform(*config.height_range)
            if side < 0:
                lo, hi = (x0, -half - depth, gz), (x1, -half, gz + h)
            else:
                lo, hi = (x0, half, gz), (x1, half + depth, gz + h)
            objects.append(SceneObject(oid, lo, hi, config.building_material))
            oid += 1
    lane = STREET_LANE_HALF_WIDTH
    for _ in range(config.n_scatterers):
        size = rng.uniform(*config.scatterer_size_range, size=2)
        h = rng.uniform(*config.scatterer_height_range)
        side = rng.choice([-1.0, 1.0])
        room = half - lane - size[1]
        if room <= 0:
            continue
        y0 = side * (lane + rng.uniform(0.0, room)) - (size[1] if side < 0 else 0.0)
        x0 = rng.uniform(0.0, config.length - size[0])
        objects.append(
            SceneObject(oid, (x0, y0, gz), (x0 + size[0], y0 + size[1], gz + h), config.scatterer_material)
        )
        oid += 1
    return Scene(tuple(objects), gz)


def place_tx(
    route: RouteSpec,
    rng: np.random.Generator,
    side_offset: float,
    height_range: tuple[float, float] = (5.0, 10.0),
    ground_z: float = 0.0,
    beyond_end: float = 5.0,
) -> tuple[float, float, float]:
    """Transmitter at the roadside near the end of the route.

    ``side_offset`` is the signed lateral distance from the route axis.
    """
    pts = generate_route(route, ground_z)
    d = np.asarray(route.direction)
    lateral = np.array([-d[1], d[0], 0.0])
    p = pts[-1] + beyond_end * d + side_offset * lateral
    p[2] = ground_z + rng.uniform(*height_range)
    return (float(p[0]), float(p[1]), float(p[2]))


def urban_routes(
    config: UrbanConfig,
    seed: int,
    n_routes: int,
    count: int = 170,
    nlos_fraction: float = 0.5,
    route_id_offset: int = 0,
) -> list[Route]:
    """Routes along the grid's streets, each with a roadside transmitter.

    LOS routes get their transmitter in the same street; NLOS routes place it
    in the next parallel street so the buildings block the direct path.
    """
    config.validate()
    rng = np.random.default_rng(seed)
    ex, ey = config.extent
    routes = []
    lane = config.street_width / 2 - 2.0
    for r in range(n_routes):
        along_x = bool(rng.integers(2))
        n_streets = (config.ny if along_x else config.nx) + 1
        street = int(rng.integers(n_streets))
        axis_len = ex if along_x else ey
        if count - 1 > axis_len - 10.0:
            raise SceneError("route does not fit within the grid")
        centre = street * config.pitch + config.street_width / 2 + rng.uniform(-lane / 2, lane / 2)
        s0 = rng.uniform(5.0, axis_len - 5.0 - (count - 1))
        forward = bool(rng.integers(2))
        if along_x:
            start = (s0, centre, 0.0) if forward else (s0 + count - 1, centre, 0.0)
            direction = (1.0, 0.0, 0.0) if forward else (-1.0, 0.0, 0.0)
        else:
            start = (centre, s0, 0.0) if forward else (centre, s0 + count - 1, 0.0)
            direction = (0.0, 1.0, 0.0) if forward else (0.0, -1.0, 0.0)
        spec = RouteSpec(start, direction, 1.0, count, 2.0)
        los = bool(rng.random() >= nlos_fraction)
        # tx line (across-street coordinate) expressed as a lateral offset from the route
        lat_sign = (-direction[1], direction[0])[1 if along_x else 0]
        if los:
            target_street = street
            edge = rng.choice([-1.0, 1.0]) * (config.street_width / 2 - 1.5)
        else:
            step = int(rng.choice([-1, 1]))
            if not 0 <= street + step < n_streets:
                step = -step
            target_street = street + step
            edge = rng.uniform(-lane / 2, lane / 2)
        target = target_street * config.pitch + config.street_width / 2 + edge
        offset = (target - centre) * lat_sign
        tx = place_tx(spec, rng, float(offset), ground_z=config.ground_z, beyond_end=rng.uniform(1.0, 4.0))
        routes.append(Route(route_id_offset + r, spec, tx, los))
    return routes


def street_routes(
    config: StreetConfig,
    seed: int,
    n_routes: int,
    count: int = 170,
    route_id_offset: int = 0,
) -> list[Route]:
    """LOS routes in the central lane of a generated street."""
    config.validate()
    rng = np.random.default_rng(seed)
    routes = []
    for r in range(n_routes):
        if count - 1 > config.length - 10.0:
            raise SceneError("route longer than the street")
        y = rng.uniform(-STREET_LANE_HALF_WIDTH + 0.5, STREET_LANE_HALF_WIDTH - 0.5)
        s0 = rng.uniform(5.0, config.length - 5.0 - (count - 1))
        spec = RouteSpec((s0, y, 0.0), (1.0, 0.0, 0.0), 1.0, count, 2.0)
        offset = rng.choice([-1.0, 1.0]) * (config.street_width / 2 - 1.0) - y
        tx = place_tx(spec, rng, float(offset), ground_z=config.ground_z, beyond_end=rng.uniform(2.0, 8.0))
        routes.append(Route(route_id_offset + r, spec, tx, True))
    return routes
