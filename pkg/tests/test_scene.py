import copy
import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from o2ips.errors import GeometryError, OutOfRange, ParseError
from o2ips.scene import (Band, build_scene, classify_band, diffracting_edges_for_floor, dumps_scene,
                         floor_of, load_scene, point3, scene_to_dict, with_band)


def test_default_scene_counts(scene):
    b = scene.building
    assert b.num_floors == 4
    assert len(b.windows) == 32
    assert len(b.edges) == 128
    assert len(scene.anchors) == 4
    assert b.box_max.tolist() == [20.0, 30.0, 12.0]


def test_anchor_at_centroid_rejected(scene_config):
    cfg = copy.deepcopy(scene_config)
    cfg["anchors"][0]["position"] = [10.0, 15.0, 6.0]
    with pytest.raises(GeometryError):
        build_scene(cfg)


def test_window_spanning_two_floors_rejected(scene_config):
    cfg = copy.deepcopy(scene_config)
    w = cfg["windows"] if "windows" in cfg else cfg["building"]["windows"]
    c = np.array(w[0]["corners"])
    c[2:, 2] += 2.0   # top edge moves into the next floor
    w[0]["corners"] = c.tolist()
    with pytest.raises(GeometryError):
        build_scene(cfg)


def test_window_outside_facade_rejected(scene_config):
    cfg = copy.deepcopy(scene_config)
    c = np.array(cfg["building"]["windows"][0]["corners"])
    c[:, 0] += 0.5   # off the x = 0 plane
    cfg["building"]["windows"][0]["corners"] = c.tolist()
    with pytest.raises(GeometryError):
        build_scene(cfg)


def test_parse_errors(scene_config):
    with pytest.raises(ParseError):
        build_scene("{not json")
    cfg = copy.deepcopy(scene_config)
    cfg["schema_version"] = 99
    with pytest.raises(ParseError):
        build_scene(cfg)
    cfg = copy.deepcopy(scene_config)
    del cfg["anchors"]
    with pytest.raises(ParseError):
        build_scene(cfg)
    cfg = copy.deepcopy(scene_config)
    cfg["anchors"][1]["id"] = cfg["anchors"][0]["id"]
    with pytest.raises(ParseError):
        build_scene(cfg)
    cfg = copy.deepcopy(scene_config)
    cfg["loss_params"] = {"bogus": 1}
    with pytest.raises(ParseError):
        build_scene(cfg)


def test_non_rectangular_wall_rejected(scene_config):
    cfg = copy.deepcopy(scene_config)
    c = cfg["building"]["walls"][0]["corners"]
    c[2] = [c[2][0], c[2][1] + 1.0, c[2][2]]
    with pytest.raises(GeometryError):
        build_scene(cfg)


@pytest.mark.parametrize("hz,band", [(10e9, Band.FR3), (28e9, Band.FR2), (700e6, Band.FR1),
                                     (7e9, Band.FR3), (24e9, Band.FR2), (48e9, Band.FR2)])
def test_classify_band(hz, band):
    assert classify_band(hz).band is band


@pytest.mark.parametrize("hz", [0.0, -1.0, 48.0001e9, 100e9])
def test_classify_band_out_of_range(hz):
    with pytest.raises(OutOfRange):
        classify_band(hz)


@given(st.floats(min_value=1.0, max_value=48e9))
def test_classify_band_partitions(hz):
    fb = classify_band(hz)
    matches = [hz < 7e9, 7e9 <= hz < 24e9, 24e9 <= hz <= 48e9]
    assert sum(matches) == 1
    assert fb.band is [Band.FR1, Band.FR3, Band.FR2][matches.index(True)]


def test_edges_for_floor(scene):
    edges = diffracting_edges_for_floor(scene, 1)
    assert len(edges) == 32
    assert all(floor_of(float(e.midpoint[2]), scene.building) == 1 for e in edges)
    assert [e.id for e in edges] == sorted(e.id for e in edges)
    with pytest.raises(IndexError):
        diffracting_edges_for_floor(scene, 4)


def test_edges_for_floor_without_windows(scene_config):
    cfg = copy.deepcopy(scene_config)
    cfg["building"]["windows"] = [w for w in cfg["building"]["windows"] if w["floor"] != 2]
    assert diffracting_edges_for_floor(build_scene(cfg), 2) == []


@pytest.mark.parametrize("z,f", [(4.5, 1), (0.0, 0), (100.0, 3), (-3.0, 0), (7.2, 2), (11.9, 3)])
def test_floor_of(scene, z, f):
    assert floor_of(z, scene.building) == f


def test_serialization_roundtrip_is_byte_identical(scene_config, tmp_path):
    text = json.dumps(scene_config)
    a, b = build_scene(text), build_scene(text)
    assert dumps_scene(a) == dumps_scene(b)
    again = build_scene(scene_to_dict(a))
    assert dumps_scene(again) == dumps_scene(a)
    p = tmp_path / "scene.json"
    p.write_text(dumps_scene(a))
    assert dumps_scene(load_scene(p)) == dumps_scene(a)


def test_with_band(scene):
    s2 = with_band(scene, "FR2")
    assert s2.band.band is Band.FR2 and s2.band.carrier_hz == 28e9
    assert s2.building is scene.building


def test_point3_is_read_only():
    p = point3([1, 2, 3])
    with pytest.raises(ValueError):
        p[0] = 5
    with pytest.raises(Exception):
        point3([1, 2])
    with pytest.raises(Exception):
        point3([1, np.nan, 2])


def test_panel_and_window_lookup(scene):
    b = scene.building
    assert b.panel("F-W").is_facade
    assert not b.panel("S-1").is_facade
    w = b.window("W-S-2-1")
    assert w.floor_index == 2 and w.panel_id == "F-S"
    assert b.edge("W-S-2-1.e0").parent_window == "W-S-2-1"
    with pytest.raises(KeyError):
        b.panel("nope")
    assert b.inside(np.array([1.0, 1.0, 1.0]))
    assert not b.inside(np.array([-1.0, 1.0, 1.0]))
