"""Parametric scenes, Monte Carlo sweeps and result export."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scene import SCHEMA_VERSION, build_scene

FACADE_ORDER = ("W", "S", "E", "N")


@dataclass(frozen=True)
class SceneParams:
    width: float = 20.0     # x extent
    depth: float = 30.0     # y extent
    height: float = 12.0
    num_floors: int = 4
    floor_height: float = 3.0
    windows_per_facade: int = 2
    window_width: float = 1.2
    window_height: float = 1.5
    sill_height: float = 0.9
    num_anchors: int = 4
    standoff: float = 5.0
    band: str = "FR3"
    anchor_facades: str = "WSWSEN"   # facade for anchor i is anchor_facades[i % len]

    @classmethod
    def from_dict(cls, cfg) -> "SceneParams":
        from .errors import ParseError
        unknown = set(cfg) - set(cls.__dataclass_fields__)
        if unknown:
            raise ParseError(f"unknown scene params: {sorted(unknown)}")
        return cls(**cfg)


def _facade_frame(p: SceneParams, name: str):
    """Origin, unit along-facade axis and length for facade ``name``."""
    W, D = p.width, p.depth
    return {
        "W": (np.array([0.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0]), D, np.array([-1.0, 0, 0])),
        "E": (np.array([W, 0.0, 0.0]), np.array([0.0, 1.0, 0.0]), D, np.array([1.0, 0, 0])),
        "S": (np.array([0.0, 0.0, 0.0]), np.array([1.0, 0.0, 0.0]), W, np.array([0, -1.0, 0])),
        "N": (np.array([0.0, D, 0.0]), np.array([1.0, 0.0, 0.0]), W, np.array([0, 1.0, 0])),
    }[name]


def _rect(origin, u, v):
    return [origin.tolist(), (origin + u).tolist(), (origin + u + v).tolist(), (origin + v).tolist()]


def generate_scene(params: SceneParams | dict | None = None, seed: int = 42) -> dict:
    """Scene config for a box building with windows and outdoor anchors.

    Windows are spread evenly along every facade on every floor. Anchors
    alternate over the west and south facades (then east and north), each at
    ``standoff`` meters, with heights spread over the floors in a seeded order
    and seeded along-facade positions. Deterministic for a given seed.
    """
    if params is None:
        params = SceneParams()
    elif isinstance(params, dict):
        params = SceneParams.from_dict(params)
    p = params
    rng = np.random.default_rng(seed)
    ez = np.array([0.0, 0.0, 1.0])
    walls, windows = [], []
    for name in FACADE_ORDER:
        o, u, length, _ = _facade_frame(p, name)
        walls.append({"id": f"F-{name}", "corners": _rect(o, u * length, ez * p.height),
                      "material": "concrete", "facade": True})
        for f in range(p.num_floors):
            for k in range(p.windows_per_facade):
                center = length * (k + 1) / (p.windows_per_facade + 1)
                lo = o + u * (center - p.window_width / 2) + ez * (f * p.floor_height + p.sill_height)
                windows.append({"id": f"W-{name}-{f}-{k}", "wall": f"F-{name}", "floor": f,
                                "corners": _rect(lo, u * p.window_width, ez * p.window_height)})
    for f in range(p.num_floors + 1):
        z = min(f * p.floor_height, p.height)
        walls.append({"id": f"S-{f}", "corners": _rect(np.array([0.0, 0.0, z]),
                                                       np.array([p.width, 0, 0]),
                                                       np.array([0, p.depth, 0])),
                      "material": "slab", "facade": False})

    n = p.num_anchors
    heights = np.linspace(p.floor_height / 2, p.num_floors * p.floor_height - p.floor_height / 2, n)
    heights = heights[rng.permutation(n)]
    anchors = []
    for i in range(n):
        o, u, length, normal = _facade_frame(p, p.anchor_facades[i % len(p.anchor_facades)])
        along = rng.uniform(0.25, 0.75) * length
        pos = o + u * along + normal * p.standoff
        pos[2] = heights[i]
        anchors.append({"id": f"A{i}", "position": [round(float(c), 6) for c in pos],
                        "position_noise_sigma": 0.0, "clock_offset": 0.0})
    return {
        "schema_version": SCHEMA_VERSION,
        "building": {"footprint": {"x": [0.0, p.width], "y": [0.0, p.depth]},
                     "height": p.height, "num_floors": p.num_floors,
                     "floor_height": p.floor_height, "walls": walls, "windows": windows},
        "anchors": anchors,
        "band": {"name": p.band},
        "loss_params": {},
    }


def default_scene(seed: int = 42, **overrides):
    return build_scene(generate_scene(SceneParams(**overrides), seed))


# --------------------------------------------------------------------------
# Experiments
# --------------------------------------------------------------------------
VARIANTS = ("unaware_lls", "unaware_ippa", "aware_mech", "aware_dnls_map", "aware_dnls_facade")
BOUND_CURVES = ("peb_1diff", "peb_multi")


@dataclass(frozen=True)
class GridSpec:
    spacing: float = 2.5
    spacing_z: float | None = 1.5   # None: same as spacing
    margin: float = 0.75

    def __post_init__(self):
        from .errors import ParseError
        if not self.spacing > 0 or (self.spacing_z is not None and not self.spacing_z > 0):
            raise ParseError("grid spacing must be > 0")
        if self.margin < 0:
            raise ParseError("grid margin must be >= 0")


def node_grid(building, grid: GridSpec) -> np.ndarray:
    """Regular interior grid, at least ``margin`` from walls and slabs.

    Points closer than ``margin`` to an intermediate slab are dropped so no
    node sits on a floor boundary.
    """
    from .errors import ParseError
    lo, hi = building.box_min, building.box_max
    dz = grid.spacing if grid.spacing_z is None else grid.spacing_z
    eps = 1e-9
    axes = []
    for k, step in enumerate((grid.spacing, grid.spacing, dz)):
        axes.append(np.arange(lo[k] + grid.margin, hi[k] - grid.margin + eps, step))
    xs, ys, zs = axes
    fh = building.floor_height
    rel = np.mod(zs, fh)
    zs = zs[(np.minimum(rel, fh - rel) >= min(grid.margin, fh / 2) - eps) | (grid.margin == 0)]
    zs = zs[(zs > lo[2]) & (zs < hi[2])]
    pts = np.array([[x, y, z] for z in zs for x in xs for y in ys], dtype=float).reshape(-1, 3)
    pts = pts[[building.inside(p) for p in pts]] if len(pts) else pts
    if len(pts) == 0:
        raise ParseError("node grid is empty")
    return pts


@dataclass(frozen=True)
class ExperimentConfig:
    scene: dict | None = None          # SceneParams overrides
    scene_path: str | None = None      # scene JSON file (takes precedence)
    scene_seed: int = 42
    band: str | None = None            # overrides the scene's band
    grid: GridSpec = GridSpec()
    methods: tuple[str, ...] = VARIANTS
    trials: int = 1
    seed: int = 0
    sigma_m: float | None = None       # overrides loss_params.toa_sigma_m
    loss_overrides: dict | None = None
    training_nodes: int = 200
    workers: int | None = None
    outdir: str | None = None

    def __post_init__(self):
        from .errors import ParseError
        if not self.methods:
            raise ParseError("methods must be non-empty")
        bad = [m for m in self.methods if m not in VARIANTS]
        if bad:
            raise ParseError(f"unknown method(s) {bad}; known: {list(VARIANTS)}")
        if int(self.trials) < 1:
            raise ParseError("trials must be >= 1")
        if self.sigma_m is not None and self.sigma_m < 0:
            raise ParseError("sigma_m must be >= 0")
        if self.training_nodes < 1:
            raise ParseError("training_nodes must be >= 1")

    @classmethod
    def from_dict(cls, cfg) -> "ExperimentConfig":
        from .errors import ParseError
        cfg = dict(cfg)
        cfg.pop("schema_version", None)
        unknown = set(cfg) - set(cls.__dataclass_fields__)
        if unknown:
            raise ParseError(f"unknown experiment keys: {sorted(unknown)}")
        if "grid" in cfg:
            g = cfg["grid"]
            if not isinstance(g, dict) or set(g) - set(GridSpec.__dataclass_fields__):
                raise ParseError("grid takes spacing, spacing_z, margin")
            cfg["grid"] = GridSpec(**g)
        if "methods" in cfg:
            if isinstance(cfg["methods"], str):
                raise ParseError("methods must be a list")
            cfg["methods"] = tuple(cfg["methods"])
        try:
            return cls(**cfg)
        except TypeError as exc:
            raise ParseError(str(exc)) from exc

    def to_dict(self) -> dict:
        from dataclasses import asdict
        d = asdict(self)
        d["methods"] = list(self.methods)
        return d


def experiment_scene(config: ExperimentConfig):
    from .channel import LossParams
    from .scene import load_scene, with_band
    from dataclasses import replace as dc_replace
    if config.scene_path:
        scene = load_scene(config.scene_path)
    else:
        scene = build_scene(generate_scene(SceneParams.from_dict(config.scene or {}), config.scene_seed))
    if config.band:
        scene = with_band(scene, config.band)
    lp = scene.loss_params
    if config.loss_overrides:
        merged = {**lp.to_dict(), **config.loss_overrides}
        lp = LossParams.from_dict(merged)
    if config.sigma_m is not None:
        lp = dc_replace(lp, toa_sigma_m=float(config.sigma_m))
    return dc_replace(scene, loss_params=lp)


# --------------------------------------------------------------------------
# Per-node link model and pipelines
# --------------------------------------------------------------------------
@dataclass
class LinkObservation:
    """One trial of one anchor-node link: detectable specular taps with noisy ranges."""

    anchor_id: str
    fap: object                 # ToaMeasurement of the earliest detectable tap or None
    taps: list                  # [(CirTap, ToaMeasurement)] detectable specular taps, by delay


def observe_links(scene, node, node_index: int, trial: int, seed: int, mpcs_by_anchor=None):
    """Simulate every anchor link for one trial.

    Each link draws from its own stream: diffuse clutter first, then one
    range-noise sample per detectable specular tap (in delay order). The same
    observations feed every pipeline, so methods see common random numbers.
    """
    from .channel import detectable, link_rng, synthesize_cir, tap_measurement
    from .raypath import MechanismKind, enumerate_mpcs
    lp, band = scene.loss_params, scene.band
    out = []
    for a in scene.anchors:
        mpcs = mpcs_by_anchor[a.id] if mpcs_by_anchor else enumerate_mpcs(a, node, scene)
        rng = link_rng(seed, node_index, a.id, trial)
        cir = synthesize_cir(mpcs, band, lp, rng)
        hits = [t for t in detectable(cir, lp) if t.mechanism.kind is not MechanismKind.DIFFUSE]
        obs = [(t, tap_measurement(t, lp, rng)) for t in hits]
        fap = None
        det = detectable(cir, lp)
        if det:
            first = min(det, key=lambda t: t.delay)
            fap = next((m for t, m in obs if t is first), None)
        out.append(LinkObservation(a.id, fap, obs))
    return out


def _require_fap(links):
    from .errors import NoDetectablePath
    missing = [l.anchor_id for l in links if l.fap is None]
    if missing:
        raise NoDetectablePath(f"no detectable path from {missing}")
    return [l.fap for l in links]


def dnls_map_selection(link: LinkObservation):
    """The FAP when it is a diffraction path, else the earliest detectable diffraction tap."""
    from .raypath import MechanismKind
    if link.fap is not None and link.fap.true_mechanism.kind is MechanismKind.DIFFRACTION:
        for t, m in link.taps:
            if m is link.fap:
                return t, m
    for t, m in link.taps:
        if t.mechanism.kind is MechanismKind.DIFFRACTION:
            return t, m
    return None


def facade_groups(links, building):
    """Detectable diffraction taps grouped by edge; edges seen by one anchor only are dropped."""
    from .locate import FacadePlane
    from .raypath import MechanismKind
    by_edge: dict[str, list] = {}
    for link in links:
        for t, m in link.taps:
            if t.mechanism.kind is MechanismKind.DIFFRACTION:
                by_edge.setdefault(m.edge_id, []).append(m)
    meas, groups, planes = [], [], []
    for eid in sorted(by_edge):
        ms = by_edge[eid]
        if len({m.anchor_id for m in ms}) < 2:
            continue
        groups.append(list(range(len(meas), len(meas) + len(ms))))
        meas.extend(ms)
        panel = building.panel(building.window(building.edge(eid).parent_window).panel_id)
        planes.append(FacadePlane.from_panel(panel))
    return meas, groups, planes


def run_pipeline(scene, node, variant: str, rng=None, *, links=None, node_index: int = 0,
                 trial: int = 0, seed: int = 0, los_threshold: float | None = None):
    """Estimate ``node`` with one pipeline variant.

    Unaware variants use the first arriving path per anchor (IPPA labels it
    by received power against ``los_threshold``). Aware variants use oracle
    mechanism labels from the simulator.
    """
    from .channel import classify_los_nlos
    from .errors import NoDetectablePath, ParseError
    from .locate import SolverParams, dnls_facade, dnls_known_edges, ippa, lls, mechanism_ls
    from .raypath import MechanismKind
    if variant not in VARIANTS:
        raise ParseError(f"unknown variant {variant!r}; known: {list(VARIANTS)}")
    node = np.asarray(node, dtype=float)
    b = scene.building
    if not b.inside(node):
        raise ValueError("node must be strictly inside the building")
    if rng is not None and links is None:
        seed = int(rng.integers(2**31))
    if links is None:
        links = observe_links(scene, node, node_index, trial, seed)
    # one start per floor at the footprint center; keep the lowest residual
    c = b.centroid
    starts = [SolverParams(init_strategy="provided", initial=(c[0], c[1], (f + 0.5) * b.floor_height))
              for f in range(b.num_floors)]

    def best(solve):
        ests = [solve(sp) for sp in starts]
        return min(ests, key=lambda e: (not e.converged, e.final_residual))

    if variant == "unaware_lls":
        return lls(_require_fap(links), scene)
    if variant == "unaware_ippa":
        faps = _require_fap(links)
        thr = np.inf if los_threshold is None else los_threshold
        labels = [classify_los_nlos(m.power, thr) for m in faps]
        # refine the linear fix: projections onto sets holding the node never move away from it
        init = lls(faps, scene).position
        params = SolverParams(max_iterations=2000, step_tolerance=1e-7,
                              init_strategy="provided", initial=tuple(init))
        return ippa(faps, labels, scene, params)
    if variant == "aware_mech":
        ok = (MechanismKind.LINE_OF_SIGHT, MechanismKind.TRANSMISSION, MechanismKind.REFLECTION)
        meas = [m for l in links for t, m in l.taps if t.mechanism.kind in ok]
        if not meas:
            raise NoDetectablePath("no LoS, transmission or reflection path detected")
        return mechanism_ls(meas, scene, scene)
    if variant == "aware_dnls_map":
        sel = [dnls_map_selection(l) for l in links]
        meas = [s[1] for s in sel if s is not None]
        if not meas:
            raise NoDetectablePath("no diffraction path detected")
        return best(lambda sp: dnls_known_edges(meas, scene, b, sp))
    meas, groups, planes = facade_groups(links, b)
    if not meas:
        raise NoDetectablePath("no edge seen by two anchors")
    return best(lambda sp: dnls_facade(meas, scene, planes, groups, sp, interior=b.centroid))


# --------------------------------------------------------------------------
# Bounds per node
# --------------------------------------------------------------------------
def node_bounds(scene, node, mpcs_by_anchor) -> dict:
    """PEB from the diffraction path each anchor's D-NLS input uses, and from all detectable paths."""
    from .bounds import condition_number, fim_from_gradients, near_clamp, path_gradient, peb
    from .channel import detectable, fap_tap, specular_taps
    from .errors import NoDetectablePath, SingularFim
    from .raypath import MechanismKind
    lp, band = scene.loss_params, scene.band
    sigma = lp.toa_sigma_m
    one, multi = [], []
    for a in scene.anchors:
        taps = detectable(specular_taps(mpcs_by_anchor[a.id], band, lp), lp)
        multi.extend(t.mpc for t in taps)
        try:
            first = fap_tap(taps, lp) if taps else None
        except NoDetectablePath:
            first = None
        if first is not None and first.mechanism.kind is MechanismKind.DIFFRACTION:
            one.append(first.mpc)
        else:
            d = [t for t in taps if t.mechanism.kind is MechanismKind.DIFFRACTION]
            if d:
                one.append(min(d, key=lambda t: t.delay).mpc)
    out = {"peb_1diff_m": float("nan"), "peb_multi_m": float("nan"),
           "fim_condition_number": float("nan"), "clamp_flag": near_clamp(one)}
    if sigma <= 0:
        return out
    for key, group in (("peb_1diff_m", one), ("peb_multi_m", multi)):
        if not group:
            continue
        F = fim_from_gradients(np.array([path_gradient(m) for m in group]), sigma)
        if key == "peb_1diff_m":
            out["fim_condition_number"] = condition_number(F)
        try:
            out[key] = peb(F)
        except SingularFim:
            pass
    return out


def calibrate_los_threshold(scene, seed: int, count: int) -> float | None:
    """LoS decision threshold from oracle-labeled FAP powers at random interior nodes."""
    from .channel import calibrate_threshold, oracle_los_label
    from .errors import InsufficientData
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x105]))
    b = scene.building
    lo, hi = b.box_min + 0.25, b.box_max - 0.25
    samples = []
    for i in range(count):
        node = rng.uniform(lo, hi)
        # training nodes get indices disjoint from the evaluation grid
        for link in observe_links(scene, node, -(i + 1) & 0x7FFFFFFF, 0, seed + 1):
            if link.fap is not None:
                samples.append((link.fap.power, oracle_los_label(link.fap.true_mechanism)))
    try:
        return calibrate_threshold(samples)
    except InsufficientData:
        return None


def _process_node(args):
    from .errors import IpsError
    from .raypath import enumerate_mpcs
    from .scene import floor_of
    scene, index, node, methods, trials, seed, thr = args
    mpcs = {a.id: enumerate_mpcs(a, node, scene) for a in scene.anchors}
    rows = []
    for trial in range(trials):
        links = observe_links(scene, node, index, trial, seed, mpcs)
        for method in methods:
            try:
                est = run_pipeline(scene, node, method, links=links, node_index=index,
                                   trial=trial, seed=seed, los_threshold=thr)
            except (IpsError, np.linalg.LinAlgError) as exc:
                rows.append((index, trial, method, None, type(exc).__name__))
                continue
            rows.append((index, trial, method,
                         (tuple(float(v) for v in est.position), est.iterations, bool(est.converged),
                          floor_of(float(est.position[2]), scene.building)), "ok"))
    return index, rows, node_bounds(scene, node, mpcs)


@dataclass
class ExperimentResults:
    config: ExperimentConfig
    nodes: np.ndarray
    records: list            # (node, trial, method, (pos, iters, converged, floor_est) | None, status)
    bounds: list             # per-node dict
    floors_true: np.ndarray
    los_threshold: float | None
    runtime_s: float = 0.0

    def errors(self, method: str, z: bool = False) -> np.ndarray:
        vals = []
        for n, _, m, res, status in self.records:
            if m == method and status == "ok":
                d = np.asarray(res[0]) - self.nodes[n]
                vals.append(abs(d[2]) if z else float(np.linalg.norm(d)))
        return np.array(vals, dtype=float)

    def failures(self, method: str) -> int:
        return sum(1 for r in self.records if r[2] == method and r[4] != "ok")

    def floor_accuracy(self, method: str) -> float:
        hits = [res[3] == self.floors_true[n] for n, _, m, res, s in self.records if m == method and s == "ok"]
        return float(np.mean(hits)) if hits else float("nan")

    def rmse_per_node(self, method: str) -> np.ndarray:
        acc = np.zeros(len(self.nodes))
        cnt = np.zeros(len(self.nodes))
        for n, _, m, res, status in self.records:
            if m == method and status == "ok":
                acc[n] += float(np.sum((np.asarray(res[0]) - self.nodes[n]) ** 2))
                cnt[n] += 1
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.sqrt(acc / cnt)

    def bound_values(self, key: str) -> np.ndarray:
        return np.array([b[f"{key}_m"] for b in self.bounds], dtype=float)

    def cdf(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        vals = self.bound_values(name) if name in BOUND_CURVES else self.errors(name)
        vals = np.sort(vals[np.isfinite(vals)])
        return vals, (np.arange(len(vals)) + 0.5) / max(len(vals), 1)


def worker_count(requested: int | None = None) -> int:
    import os
    n = requested if requested else (os.cpu_count() or 1)
    cap = os.environ.get("IPS_THREADS")
    if cap:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError:
            pass
    return max(1, n)


def run_experiment(config: ExperimentConfig | dict) -> ExperimentResults:
    import time
    from .scene import floor_of
    if isinstance(config, dict):
        config = ExperimentConfig.from_dict(config)
    t0 = time.perf_counter()
    scene = experiment_scene(config)
    nodes = node_grid(scene.building, config.grid)
    thr = None
    if "unaware_ippa" in config.methods:
        thr = calibrate_los_threshold(scene, config.seed, config.training_nodes)
    jobs = [(scene, i, nodes[i], tuple(config.methods), int(config.trials), config.seed, thr)
            for i in range(len(nodes))]
    workers = worker_count(config.workers)
    if workers > 1 and len(jobs) > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=workers) as pool:
            done = list(pool.map(_process_node, jobs, chunksize=max(1, len(jobs) // (8 * workers))))
    else:
        done = [_process_node(j) for j in jobs]
    done.sort(key=lambda r: r[0])
    records = [row for _, rows, _ in done for row in rows]
    bounds = [b for _, _, b in done]
    floors = np.array([floor_of(float(p[2]), scene.building) for p in nodes])
    res = ExperimentResults(config, nodes, records, bounds, floors, thr, time.perf_counter() - t0)
    if config.outdir:
        export_results(res, config.outdir)
    return res


# --------------------------------------------------------------------------
# Export
# --------------------------------------------------------------------------
def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    return "nan" if not np.isfinite(v) else repr(round(v, 12))


def _write_csv(path, header, rows):
    import csv
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# schema_version={SCHEMA_VERSION}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) if not isinstance(v, str) else v for v in r])


def read_csv(path) -> list[dict]:
    """Rows of a CSV written by this module, skipping the schema comment line."""
    import csv
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


ERRORS_COLUMNS = ["node_index", "trial", "method", "status", "x_true", "y_true", "z_true",
                  "x", "y", "z", "err_3d_m", "err_z_m", "floor_true", "floor_est",
                  "iterations", "converged"]
SUMMARY_COLUMNS = ["method", "samples", "ok", "coverage_failed", "median_m", "p90_m", "rmse_m",
                   "median_z_m", "floor_accuracy", "note"]


def export_results(results: ExperimentResults, outdir) -> list[str]:
    """Write errors.csv, cdf.csv, bounds.csv, summary.csv and cdf.svg (plus runtime.json)."""
    import json
    from pathlib import Path
    from .bounds import BOUNDS_CSV_COLUMNS
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    methods = list(results.config.methods)

    rows = []
    for n, trial, m, res, status in results.records:
        t = results.nodes[n]
        if status == "ok":
            p = np.asarray(res[0])
            rows.append([n, trial, m, status, *t, *p, float(np.linalg.norm(p - t)), abs(p[2] - t[2]),
                         int(results.floors_true[n]), res[3], res[1], res[2]])
        else:
            rows.append([n, trial, m, status, *t, None, None, None, None, None,
                         int(results.floors_true[n]), None, None, None])
    _write_csv(out / "errors.csv", ERRORS_COLUMNS, rows)

    cdf_rows = []
    for name in [*methods, *BOUND_CURVES]:
        vals, pct = results.cdf(name)
        cdf_rows.extend([name, v, p] for v, p in zip(vals, pct))
    _write_csv(out / "cdf.csv", ["method", "error_m", "percentile"], cdf_rows)

    _write_csv(out / "bounds.csv", BOUNDS_CSV_COLUMNS,
               [[i, b["peb_1diff_m"], b["peb_multi_m"], b["fim_condition_number"], bool(b["clamp_flag"])]
                for i, b in enumerate(results.bounds)])

    summ = []
    for m in methods:
        e = results.errors(m)
        ez = results.errors(m, z=True)
        nfail = results.failures(m)
        if len(e):
            summ.append([m, len(e) + nfail, len(e), nfail, float(np.median(e)), float(np.percentile(e, 90)),
                         float(np.sqrt(np.mean(e**2))), float(np.median(ez)), results.floor_accuracy(m), ""])
        else:
            summ.append([m, nfail, 0, nfail, None, None, None, None, None, "all samples coverage-failed"])
    for name in BOUND_CURVES:
        v = results.bound_values(name)
        v = v[np.isfinite(v)]
        if len(v):
            summ.append([name, len(results.bounds), len(v), len(results.bounds) - len(v), float(np.median(v)),
                         float(np.percentile(v, 90)), None, None, None, "position error bound"])
        else:
            summ.append([name, len(results.bounds), 0, len(results.bounds), None, None, None, None, None,
                         "no finite bound"])
    _write_csv(out / "summary.csv", SUMMARY_COLUMNS, summ)

    (out / "cdf.svg").write_text(cdf_svg(results), encoding="utf-8")
    (out / "runtime.json").write_text(json.dumps({"runtime_s": results.runtime_s,
                                                  "nodes": len(results.nodes)}, indent=1) + "\n")
    return [str(out / f) for f in ("errors.csv", "cdf.csv", "bounds.csv", "summary.csv", "cdf.svg")]


_COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#444444", "#888888"]


def cdf_svg(results: ExperimentResults, width: int = 640, height: int = 420) -> str:
    """Empirical CDFs (error in meters vs percentile); methods without samples are left out."""
    curves = []
    for name in [*results.config.methods, *BOUND_CURVES]:
        vals, pct = results.cdf(name)
        if len(vals):
            curves.append((name, vals, pct))
    left, right, top, bottom = 60, 170, 20, 50
    pw, ph = width - left - right, height - top - bottom
    xmax = max([float(np.percentile(v, 98)) for _, v, _ in curves] + [1e-3])
    xmax = float(np.ceil(xmax * 10) / 10)

    def X(v):
        return left + pw * min(v, xmax) / xmax

    def Y(p):
        return top + ph * (1 - p)

    s = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
         f'font-family="sans-serif" font-size="11">',
         f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>']
    for k in range(6):
        xv = xmax * k / 5
        s.append(f'<text x="{X(xv):.1f}" y="{top + ph + 15}" text-anchor="middle">{xv:.2f}</text>')
        s.append(f'<text x="{left - 6}" y="{Y(k / 5) + 4:.1f}" text-anchor="end">{k / 5:.1f}</text>')
    s.append(f'<text x="{left + pw / 2}" y="{height - 12}" text-anchor="middle">3D error [m]</text>')
    s.append(f'<text x="15" y="{top + ph / 2}" text-anchor="middle" '
             f'transform="rotate(-90 15 {top + ph / 2})">percentile</text>')
    for i, (name, vals, pct) in enumerate(curves):
        color = _COLORS[i % len(_COLORS)]
        dash = ' stroke-dasharray="5,3"' if name in BOUND_CURVES else ""
        pts = " ".join(f"{X(v):.2f},{Y(p):.2f}" for v, p in zip(vals, pct))
        s.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5"{dash} points="{pts}"/>')
        ly = top + 14 * (i + 1)
        s.append(f'<line x1="{left + pw + 10}" y1="{ly - 4}" x2="{left + pw + 30}" y2="{ly - 4}" '
                 f'stroke="{color}" stroke-width="2"{dash}/>')
        s.append(f'<text x="{left + pw + 35}" y="{ly}">{name}</text>')
    s.append("</svg>")
    return "\n".join(s) + "\n"


def fap_mechanism_fractions(scene, grid: GridSpec, bands=("FR1", "FR2", "FR3")) -> dict:
    """Share of (node, anchor) links whose first arriving path is each mechanism, per band.

    Geometry is enumerated once per link and reused for every band. Links
    with nothing detectable count under ``"none"``.
    """
    from .channel import detectable, specular_taps
    from .raypath import enumerate_mpcs
    from .scene import with_band
    nodes = node_grid(scene.building, grid)
    scenes = {b: with_band(scene, b) for b in bands}
    counts = {b: {} for b in bands}
    total = 0
    for node in nodes:
        for a in scene.anchors:
            mpcs = enumerate_mpcs(a, node, scene)
            total += 1
            for b, sc in scenes.items():
                hits = detectable(specular_taps(mpcs, sc.band, sc.loss_params), sc.loss_params)
                key = hits[0].mechanism.kind.name.lower() if hits else "none"
                counts[b][key] = counts[b].get(key, 0) + 1
    return {b: {k: v / total for k, v in sorted(c.items())} for b, c in counts.items()} | {"links": total}
