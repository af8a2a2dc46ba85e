import json

import numpy as np
import pytest

from raysr.scene import (
    GROUND_ID,
    Material,
    RouteSpec,
    Scene,
    SceneError,
    SceneObject,
    StreetConfig,
    UrbanConfig,
    check_route_clear,
    generate_route,
    generate_street_scene,
    generate_urban_scene,
    load_routes,
    save_routes,
    street_routes,
    urban_routes,
)


def fixed_2x2():
    return UrbanConfig(nx=2, ny=2, block_size=10.0, footprint_range=(10.0, 10.0), height_range=(20.0, 20.0))


def test_urban_object_count_forced_by_grid():
    scene = generate_urban_scene(fixed_2x2(), seed=7)
    assert len(scene.objects) == 5
    assert sum(o.id == GROUND_ID for o in scene.objects) == 1
    for o in scene.objects[1:]:
        assert np.allclose(np.subtract(o.max, o.min), (10, 10, 20))


def test_urban_generation_is_byte_identical_for_same_seed():
    cfg = UrbanConfig(nx=3, ny=2)
    assert generate_urban_scene(cfg, 11).to_json() == generate_urban_scene(cfg, 11).to_json()


def test_urban_seeds_change_heights():
    cfg = UrbanConfig(nx=3, ny=3)
    h1 = [o.max[2] for o in generate_urban_scene(cfg, 1).objects[1:]]
    h2 = [o.max[2] for o in generate_urban_scene(cfg, 2).objects[1:]]
    assert h1 != h2


def test_buildings_rest_on_ground():
    cfg = UrbanConfig(nx=3, ny=3, ground_z=1.5, buildings_per_block=2)
    scene = generate_urban_scene(cfg, 5)
    assert len(scene.objects) == 1 + 9 * 4
    assert all(o.min[2] == 1.5 for o in scene.objects[1:])
    assert scene.objects[0].max[2] == 1.5


@pytest.mark.parametrize("nx,ny", [(0, 2), (2, 0)])
def test_zero_grid_rejected(nx, ny):
    with pytest.raises(SceneError):
        generate_urban_scene(UrbanConfig(nx=nx, ny=ny), 0)


def test_route_points():
    pts = generate_route(RouteSpec((0, 0, 2), (1, 0, 0), 1.0, 34, 2.0))
    assert pts.shape == (34, 3)
    np.testing.assert_array_equal(pts, np.column_stack([np.arange(34.0), np.zeros(34), np.full(34, 2.0)]))
    np.testing.assert_allclose(np.linalg.norm(np.diff(pts, axis=0), axis=1), 1.0, atol=1e-12)


def test_route_diagonal_is_collinear_and_equally_spaced():
    d = np.array([3.0, 4.0, 0.0]) / 5
    pts = generate_route(RouteSpec((1, -2, 0), tuple(d), 0.5, 40, 2.0), ground_z=3.0)
    steps = np.diff(pts, axis=0)
    np.testing.assert_allclose(np.linalg.norm(steps, axis=1), 0.5, atol=1e-12)
    np.testing.assert_allclose(np.cross(steps, d), 0.0, atol=1e-12)
    assert np.all(pts[:, 2] == 5.0)


def test_short_route_rejected():
    with pytest.raises(SceneError):
        generate_route(RouteSpec((0, 0, 2), (1, 0, 0), 1.0, 16, 2.0))


@pytest.mark.parametrize(
    "kwargs",
    [dict(spacing=0.0), dict(direction=(1.0, 1.0, 0.0)), dict(direction=(0.0, 0.0, 1.0))],
)
def test_bad_route_spec(kwargs):
    with pytest.raises(SceneError):
        RouteSpec((0, 0, 0), **{"count": 20, **kwargs})


def test_material_energy_bound():
    Material(0.6, 0.8)
    with pytest.raises(SceneError):
        Material(0.8, 0.8)
    with pytest.raises(SceneError):
        Material(1.2, 0.0)


def test_box_and_id_invariants():
    with pytest.raises(SceneError):
        SceneObject(1, (0, 0, 0), (1, 0, 1))
    a = SceneObject(1, (0, 0, 0), (1, 1, 1))
    with pytest.raises(SceneError):
        Scene((a, SceneObject(1, (2, 2, 0), (3, 3, 1))))


def test_scene_json_schema_round_trip(tmp_path):
    scene = generate_street_scene(StreetConfig(), 3)
    doc = json.loads(scene.to_json())
    assert set(doc) == {"ground_z", "objects"}
    assert set(doc["objects"][0]) == {"id", "min", "max", "reflection_coeff", "scattering_coeff"}
    path = tmp_path / "scene.json"
    scene.save(path)
    assert Scene.load(path) == scene


@pytest.mark.parametrize("seed", range(5))
def test_generated_routes_clear_of_objects(seed):
    cfg = UrbanConfig(nx=3, ny=3)
    scene = generate_urban_scene(cfg, seed)
    for r in urban_routes(cfg, seed, 8):
        pts = r.points()
        check_route_clear(scene, pts)
        assert not any(o.contains(r.tx) for o in scene.objects)
        assert 5.0 <= r.tx[2] <= 10.0
    sc = StreetConfig()
    street = generate_street_scene(sc, seed)
    for r in street_routes(sc, seed, 4):
        check_route_clear(street, r.points())
        assert not any(o.contains(r.tx) for o in street.objects)


def test_route_collision_detected():
    scene = Scene((SceneObject(1, (5, -1, 0), (6, 1, 10)),))
    with pytest.raises(SceneError):
        check_route_clear(scene, generate_route(RouteSpec((0, 0, 0), count=20)))


def test_routes_round_trip(tmp_path):
    routes = urban_routes(UrbanConfig(), 4, 3)
    save_routes(routes, tmp_path / "r.json")
    assert load_routes(tmp_path / "r.json") == routes
