import json
from dataclasses import replace

import numpy as np
import pytest

from o2ips.errors import GeometryError, ParseError
from o2ips.harness import (BOUND_CURVES, ExperimentConfig, GridSpec, SceneParams, default_scene, export_results,
                           generate_scene, node_grid, read_csv, run_experiment, run_pipeline)
from o2ips.scene import build_scene, floor_of

SMALL = GridSpec(spacing=9.0, spacing_z=3.0, margin=1.0)


def quiet(scene):
    return replace(scene, loss_params=replace(scene.loss_params, toa_sigma_m=0.0))


# ---------------------------------------------------------------- scenes
def test_generate_default_scene():
    sc = build_scene(generate_scene(seed=42))
    assert len(sc.anchors) == 4
    b = sc.building
    assert (b.box_max - b.box_min).tolist() == [20.0, 30.0, 12.0]
    assert b.num_floors == 4 and len(b.windows) == 32
    zs = sorted(a.position[2] for a in sc.anchors)
    assert zs[0] < b.floor_height and zs[-1] > 3 * b.floor_height


def test_generate_scene_deterministic():
    a = json.dumps(generate_scene(seed=7), sort_keys=True)
    b = json.dumps(generate_scene(seed=7), sort_keys=True)
    assert a == b
    assert a != json.dumps(generate_scene(seed=8), sort_keys=True)


def test_standoff_zero_is_rejected():
    with pytest.raises(GeometryError):
        build_scene(generate_scene(SceneParams(standoff=0.0)))


@pytest.mark.parametrize("n", [5, 6])
def test_more_anchors(n):
    sc = build_scene(generate_scene(SceneParams(num_anchors=n)))
    assert len(sc.anchors) == n
    assert not any(sc.building.inside(a.position) for a in sc.anchors)


def test_scene_params_unknown_key():
    with pytest.raises(ParseError):
        SceneParams.from_dict({"floors": 3})


# ---------------------------------------------------------------- grid and config
def test_node_grid_default(scene):
    nodes = node_grid(scene.building, GridSpec())
    assert len(nodes) >= 500
    fh = scene.building.floor_height
    rel = np.mod(nodes[:, 2], fh)
    assert np.all(np.minimum(rel, fh - rel) >= 0.75 - 1e-9)
    assert all(scene.building.inside(p) for p in nodes)


def test_grid_validation():
    with pytest.raises(ParseError):
        GridSpec(spacing=0)
    with pytest.raises(ParseError):
        GridSpec(margin=-1)


def test_config_validation():
    with pytest.raises(ParseError):
        ExperimentConfig(trials=0)
    with pytest.raises(ParseError):
        ExperimentConfig(methods=("unaware_lls", "magic"))
    with pytest.raises(ParseError):
        ExperimentConfig(methods=())
    with pytest.raises(ParseError):
        ExperimentConfig.from_dict({"nodes": 3})
    cfg = ExperimentConfig(trials=3, grid=SMALL)
    assert ExperimentConfig.from_dict(cfg.to_dict()) == cfg


# ---------------------------------------------------------------- pipelines
def test_unknown_variant(scene):
    with pytest.raises(ParseError):
        run_pipeline(scene, np.array([5.0, 5, 5]), "aware_magic")


def test_outdoor_node_rejected(scene):
    with pytest.raises(ValueError):
        run_pipeline(scene, np.array([-5.0, 5, 5]), "unaware_lls")


def test_zero_noise_dnls_map(scene):
    sc = quiet(scene)
    node = np.array([5.0, 5.0, 7.5])
    est = run_pipeline(sc, node, "aware_dnls_map")
    assert np.linalg.norm(est.position - node) <= 1e-5


def test_zero_noise_lls_biased_deep_inside(scene):
    sc = quiet(scene)
    node = np.array([10.0, 15.0, 7.5])
    est = run_pipeline(sc, node, "unaware_lls")
    assert np.linalg.norm(est.position - node) > 0.5


@pytest.mark.parametrize("variant", ["unaware_ippa", "aware_mech", "aware_dnls_facade"])
def test_other_variants_run(scene, variant):
    node = np.array([4.0, 6.0, 4.5])
    est = run_pipeline(scene, node, variant)
    assert np.all(np.isfinite(est.position))


# ---------------------------------------------------------------- experiment + export
@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("exp")
    cfg = ExperimentConfig(grid=SMALL, trials=2, seed=3, sigma_m=0.1, training_nodes=40, workers=1,
                           outdir=str(out))
    return run_experiment(cfg), out


def test_sample_accounting(small_run):
    res, _ = small_run
    n = len(res.nodes)
    for m in res.config.methods:
        assert len(res.errors(m)) + res.failures(m) == n * 2
    for name in [*res.config.methods, *BOUND_CURVES]:
        v, p = res.cdf(name)
        assert np.all(np.diff(v) >= 0) and np.all(np.diff(p) > 0)


def test_export_files(small_run):
    res, out = small_run
    for f in ("errors.csv", "cdf.csv", "bounds.csv", "summary.csv", "cdf.svg"):
        assert (out / f).exists()
    for f in ("errors.csv", "cdf.csv", "bounds.csv", "summary.csv"):
        assert (out / f).read_text().startswith("# schema_version=1\n")
    cdf = read_csv(out / "cdf.csv")
    pct = np.array([float(r["percentile"]) for r in cdf])
    assert np.all((pct > 0) & (pct < 1))
    errors = read_csv(out / "errors.csv")
    summary = {r["method"]: r for r in read_csv(out / "summary.csv")}
    for m in res.config.methods:
        e = [float(r["err_3d_m"]) for r in errors if r["method"] == m and r["status"] == "ok"]
        assert float(summary[m]["median_m"]) == pytest.approx(np.percentile(e, 50), rel=1e-9)
    bounds = read_csv(out / "bounds.csv")
    assert len(bounds) == len(res.nodes)
    svg = (out / "cdf.svg").read_text()
    assert "3D error [m]" in svg and "percentile" in svg


def test_empty_method_omitted_from_svg(small_run, tmp_path):
    res, _ = small_run
    records = [(n, t, m, None, "coverage_failed") if m == "aware_mech" else (n, t, m, r, s)
               for n, t, m, r, s in res.records]
    broken = replace(res, records=records)
    export_results(broken, tmp_path)
    svg = (tmp_path / "cdf.svg").read_text()
    assert ">aware_mech<" not in svg and ">aware_dnls_map<" in svg
    row = [r for r in read_csv(tmp_path / "summary.csv") if r["method"] == "aware_mech"][0]
    assert row["ok"] == "0" and "coverage-failed" in row["note"]


def test_rerun_and_parallel_identical(small_run, tmp_path):
    res, out = small_run
    cfg = replace(res.config, outdir=str(tmp_path / "a"))
    run_experiment(cfg)
    run_experiment(replace(cfg, outdir=str(tmp_path / "b"), workers=2))
    for f in ("errors.csv", "cdf.csv", "bounds.csv", "summary.csv", "cdf.svg"):
        ref = (out / f).read_bytes()
        assert (tmp_path / "a" / f).read_bytes() == ref
        assert (tmp_path / "b" / f).read_bytes() == ref


def test_floor_labels(small_run):
    res, _ = small_run
    sc = default_scene()
    assert res.floors_true.tolist() == [floor_of(z, sc.building) for z in res.nodes[:, 2]]
