"""Scene -> rays -> clusters -> samples, for batches of scenes and routes."""

from __future__ import annotations

from dataclasses import dataclass, field

from .clustering import DEFAULT_SLOTS, WINDOW, Sample, samples_from_snapshots
from .raytracer import TraceLimits, trace_route
from .scene import (
    Route,
    Scene,
    StreetConfig,
    UrbanConfig,
    check_route_clear,
    generate_street_scene,
    generate_urban_scene,
    street_routes,
    urban_routes,
)


@dataclass(frozen=True)
class CampaignConfig:
    """How many scenes/routes to simulate and how to cut them into samples."""

    kind: str = "urban"
    n_scenes: int = 4
    routes_per_scene: int = 6
    route_points: int = 170
    nlos_fraction: float = 0.5
    n_slots: int = DEFAULT_SLOTS
    stride: int = WINDOW
    mode: str = "object"
    urban: UrbanConfig = field(default_factory=UrbanConfig)
    street: StreetConfig = field(default_factory=StreetConfig)
    limits: TraceLimits = field(default_factory=TraceLimits)


@dataclass
class SceneRun:
    scene_index: int
    scene: Scene
    routes: list[Route]


def make_scenes(config: CampaignConfig, seed: int) -> list[SceneRun]:
    """Scenes and routes, seeded per scene so each is reproducible alone."""
    runs = []
    for k in range(config.n_scenes):
        scene_seed = seed * 1000 + k
        offset = k * config.routes_per_scene
        if config.kind == "urban":
            scene = generate_urban_scene(config.urban, scene_seed)
            routes = urban_routes(
                config.urban, scene_seed + 1, config.routes_per_scene, config.route_points, config.nlos_fraction, offset
            )
        elif config.kind == "street":
            scene = generate_street_scene(config.street, scene_seed)
            routes = street_routes(config.street, scene_seed + 1, config.routes_per_scene, config.route_points, offset)
        else:
            raise ValueError(f"unknown scene kind {config.kind!r}")
        for r in routes:
            check_route_clear(scene, r.points(scene.ground_z))
        runs.append(SceneRun(k, scene, routes))
    return runs


def route_samples(scene: Scene, route: Route, config: CampaignConfig) -> list[Sample]:
    snaps = trace_route(scene, route.tx, route.points(scene.ground_z), config.limits)
    return samples_from_snapshots(
        snaps, route.route_id, config.n_slots, WINDOW, config.stride, config.mode, tx=route.tx
    )


def build_samples(config: CampaignConfig, seed: int) -> list[Sample]:
    out = []
    for run in make_scenes(config, seed):
        for route in run.routes:
            out.extend(route_samples(run.scene, route, config))
    return out
