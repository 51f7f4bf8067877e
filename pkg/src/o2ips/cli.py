"""Command-line front end.

Subcommands: simulate, localize, crlb, experiment, slp-demo. Exit status is
0 on success, 1 on usage errors (synopsis on stderr) and 2 on runtime errors.
``--scene`` takes a scene JSON file or the word ``default`` for the generated
default scene. For ``experiment``, values in the config file override flags,
and flags override built-in defaults.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .errors import IpsError

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
METHODS = {
    "lls": "unaware_lls",
    "ippa": "unaware_ippa",
    "mech-ls": "aware_mech",
    "dnls-map": "aware_dnls_map",
    "dnls-facade": "aware_dnls_facade",
}
NEEDS_SCENE = ("mech-ls", "dnls-map", "dnls-facade")
MEAS_COLUMNS = ["node_index", "anchor_id", "range_m", "sigma_m", "true_mechanism", "los_label", "edge_id",
                "power_db", "is_fap"]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(EXIT_USAGE)


def _scene(arg: str | None, band: str | None = None):
    from .harness import default_scene
    from .scene import load_scene, with_band
    scene = default_scene() if arg in (None, "default") else load_scene(arg)
    return with_band(scene, band) if band else scene


def _grid(spacing: float, margin: float):
    from .harness import GridSpec
    return GridSpec(spacing=spacing, spacing_z=None, margin=margin)


def _write_rows(path, header, rows):
    import csv
    from .harness import _fmt
    from .scene import SCHEMA_VERSION
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# schema_version={SCHEMA_VERSION}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([v if isinstance(v, str) else _fmt(v) for v in r])


def _sidecar(path: str, name: str) -> Path:
    p = Path(path)
    return p.with_name(p.stem + f".{name}.csv")


# --------------------------------------------------------------------------
def cmd_simulate(args) -> int:
    from .channel import oracle_los_label
    from .harness import node_grid, observe_links
    from .scene import floor_of
    scene = _scene(args.scene, args.band)
    if args.sigma is not None:
        from dataclasses import replace
        scene = replace(scene, loss_params=replace(scene.loss_params, toa_sigma_m=args.sigma))
    b = scene.building
    nodes = node_grid(b, _grid(args.grid, args.margin))
    rows = []
    for i, node in enumerate(nodes):
        for link in observe_links(scene, node, i, 0, args.seed):
            for tap, m in link.taps:
                rows.append([i, m.anchor_id, m.range, m.sigma, m.true_mechanism.tag,
                             oracle_los_label(m.true_mechanism).value, m.edge_id or "", m.power, m is link.fap])
    _write_rows(args.out, MEAS_COLUMNS, rows)
    _write_rows(_sidecar(args.out, "anchors"), ["anchor_id", "x", "y", "z"],
                [[a.id, *a.position] for a in scene.anchors])
    _write_rows(_sidecar(args.out, "nodes"), ["node_index", "x", "y", "z", "floor", "floor_height", "num_floors"],
                [[i, *p, floor_of(float(p[2]), b), b.floor_height, b.num_floors] for i, p in enumerate(nodes)])
    print(f"wrote {len(rows)} measurements for {len(nodes)} nodes to {args.out}")
    return EXIT_OK


def _read_measurements(path):
    from .channel import ToaMeasurement
    from .harness import read_csv
    from .raypath import Mechanism
    by_node: dict[int, list] = {}
    for r in read_csv(path):
        m = ToaMeasurement(r["anchor_id"], float(r["range_m"]), float(r["sigma_m"]),
                           Mechanism.parse(r["true_mechanism"]), edge_id=r["edge_id"] or None,
                           power=float(r["power_db"]))
        by_node.setdefault(int(r["node_index"]), []).append((m, r["is_fap"] == "1"))
    return by_node


def _links_from_rows(rows, anchor_ids):
    from .channel import CirTap
    from .harness import LinkObservation
    from .scene import SPEED_OF_LIGHT
    links = []
    for aid in anchor_ids:
        mine = [(m, f) for m, f in rows if m.anchor_id == aid]
        taps = [(CirTap(m.range / SPEED_OF_LIGHT, m.power, m.true_mechanism, aid), m) for m, _ in mine]
        fap = next((m for m, f in mine if f), None)
        links.append(LinkObservation(aid, fap, taps))
    return links


def cmd_localize(args) -> int:
    from .harness import read_csv, run_pipeline
    from .scene import floor_of
    if args.method in NEEDS_SCENE and not args.scene:
        raise UsageError(f"--method {args.method} needs --scene (edge and panel geometry)")
    by_node = _read_measurements(args.meas)
    anchors_path = _sidecar(args.meas, "anchors")
    nodes_path = _sidecar(args.meas, "nodes")
    scene = _scene(args.scene) if args.scene else None
    if anchors_path.exists():
        anchors = {r["anchor_id"]: np.array([float(r["x"]), float(r["y"]), float(r["z"])])
                   for r in read_csv(anchors_path)}
    elif scene is not None:
        anchors = {a.id: np.asarray(a.position) for a in scene.anchors}
    else:
        raise UsageError("anchor positions missing: pass --scene or keep the .anchors.csv sidecar")
    truth = {int(r["node_index"]): r for r in read_csv(nodes_path)} if nodes_path.exists() else {}

    thr = args.los_threshold
    if args.method == "ippa" and thr is None and scene is not None:
        from .harness import calibrate_los_threshold
        thr = calibrate_los_threshold(scene, args.seed, 200)

    variant = METHODS[args.method]
    rows = []
    for idx in sorted(by_node):
        links = _links_from_rows(by_node[idx], sorted(anchors))
        try:
            est = _localize_links(variant, links, anchors, scene, thr, truth.get(idx))
        except IpsError as exc:
            rows.append([idx, f"{args.method}:{type(exc).__name__}", *[None] * 9])
            continue
        p = est.position
        t = truth.get(idx)
        if t is not None:
            tp = np.array([float(t["x"]), float(t["y"]), float(t["z"])])
            fh, nf = float(t["floor_height"]), int(t["num_floors"])
            f_est = int(min(max(np.floor(p[2] / fh), 0), nf - 1))
            rows.append([idx, est.method_tag, *p, float(np.linalg.norm(p - tp)), abs(p[2] - tp[2]),
                         int(t["floor"]), f_est, est.iterations, est.converged])
        else:
            f_est = floor_of(float(p[2]), scene.building) if scene is not None else None
            rows.append([idx, est.method_tag, *p, None, None, None, f_est, est.iterations, est.converged])
    _write_rows(args.out, ["node_index", "method_tag", "x", "y", "z", "err_3d_m", "err_z_m",
                           "floor_true", "floor_est", "iterations", "converged"], rows)
    print(f"wrote {len(rows)} estimates to {args.out}")
    return EXIT_OK


def _localize_links(variant, links, anchors, scene, thr, truth_row):
    from .channel import classify_los_nlos
    from .harness import _require_fap, run_pipeline
    from .locate import SolverParams, ippa, lls
    if variant == "unaware_lls":
        return lls(_require_fap(links), anchors)
    if variant == "unaware_ippa":
        faps = _require_fap(links)
        t = np.inf if thr is None else thr
        init = lls(faps, anchors).position
        return ippa(faps, [classify_los_nlos(m.power, t) for m in faps], anchors,
                    SolverParams(max_iterations=2000, step_tolerance=1e-7,
                                 init_strategy="provided", initial=tuple(init)))
    # aware variants reuse the harness pipeline; the node argument is only a bounds check
    node = scene.building.centroid
    return run_pipeline(scene, node, variant, links=links)


def cmd_crlb(args) -> int:
    from .bounds import BOUNDS_CSV_COLUMNS
    from .harness import node_bounds, node_grid
    from .raypath import enumerate_mpcs
    scene = _scene(args.scene, args.band)
    if args.sigma is not None:
        from dataclasses import replace
        scene = replace(scene, loss_params=replace(scene.loss_params, toa_sigma_m=args.sigma))
    nodes = node_grid(scene.building, _grid(args.grid, args.margin))
    rows = []
    for i, node in enumerate(nodes):
        b = node_bounds(scene, node, {a.id: enumerate_mpcs(a, node, scene) for a in scene.anchors})
        rows.append([i, b["peb_1diff_m"], b["peb_multi_m"], b["fim_condition_number"], bool(b["clamp_flag"])])
    _write_rows(args.out, BOUNDS_CSV_COLUMNS, rows)
    print(f"wrote bounds for {len(rows)} nodes to {args.out}")
    return EXIT_OK


def cmd_experiment(args) -> int:
    from .harness import ExperimentConfig, run_experiment
    cfg = {}
    for key in ("seed", "trials", "workers", "band", "sigma_m"):
        v = getattr(args, key)
        if v is not None:
            cfg[key] = v
    if args.config:
        try:
            cfg.update(json.loads(Path(args.config).read_text(encoding="utf-8")))
        except json.JSONDecodeError as exc:
            from .errors import ParseError
            raise ParseError(f"{args.config}: {exc}") from exc
    cfg["outdir"] = args.out
    res = run_experiment(ExperimentConfig.from_dict(cfg))
    for m in res.config.methods:
        e = res.errors(m)
        med = f"{np.median(e):.3f} m" if len(e) else "n/a"
        print(f"{m:18s} median {med:>10s}  ok {len(e)}  failed {res.failures(m)}")
    print(f"results in {args.out} ({res.runtime_s:.1f} s)")
    return EXIT_OK


def cmd_slp_demo(args) -> int:
    from .scene import AnchorSpec
    from .slp import demo_topology, dumps_trace, run_session
    extra = ()
    if args.additional:
        extra = (AnchorSpec("X0", np.array([30.0, 30.0, 3.0]), 0.0, 1e-3),)
    topo = demo_topology(args.anchors, args.seed, noise_sigma_m=args.noise, authorize=not args.deny,
                         degraded_ok=args.degraded, additional_anchors=extra)
    trace, report = run_session(topo, seed=args.seed)
    sys.stdout.write(dumps_trace(trace))
    p = report.position
    err = float(np.linalg.norm(p - np.asarray(topo.target_position)))
    print(f"fix {p[0]:.6f} {p[1]:.6f} {p[2]:.6f} method {report.method_tag} error {err:.6f} m")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="o2ips", description="Outdoor-to-indoor ToA positioning toolkit.")
    sub = p.add_subparsers(dest="command", metavar="{simulate,localize,crlb,experiment,slp-demo}",
                           parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("simulate", help="simulate detectable paths and ranges on a node grid")
    s.add_argument("--scene", required=True, help="scene JSON file or 'default'")
    s.add_argument("--band", help="FR1, FR2 or FR3 (default: the scene's band)")
    s.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    s.add_argument("--out", required=True, help="measurement CSV; .anchors.csv and .nodes.csv sidecars go next to it")
    s.add_argument("--grid", type=float, default=2.5, help="node grid spacing in m (default 2.5)")
    s.add_argument("--margin", type=float, default=0.75, help="grid distance from walls and slabs in m (default 0.75)")
    s.add_argument("--sigma", type=float, help="range noise sigma in m (default: scene loss params)")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("localize", help="estimate node positions from a measurement CSV")
    s.add_argument("--meas", required=True, help="measurement CSV written by simulate")
    s.add_argument("--method", required=True, choices=sorted(METHODS), help="estimator")
    s.add_argument("--scene", help="scene JSON or 'default'; required for mech-ls, dnls-map, dnls-facade")
    s.add_argument("--out", required=True, help="estimates CSV")
    s.add_argument("--los-threshold", type=float, help="LoS power threshold in dB for ippa (default: calibrated on the scene, else all NLoS)")
    s.add_argument("--seed", type=int, default=0, help="seed for threshold calibration (default 0)")
    s.set_defaults(func=cmd_localize)

    s = sub.add_parser("crlb", help="position error bounds over a node grid")
    s.add_argument("--scene", required=True, help="scene JSON file or 'default'")
    s.add_argument("--grid", type=float, required=True, help="node grid spacing in m")
    s.add_argument("--margin", type=float, default=0.75, help="grid distance from walls and slabs in m (default 0.75)")
    s.add_argument("--band", help="FR1, FR2 or FR3 (default: the scene's band)")
    s.add_argument("--sigma", type=float, help="range noise sigma in m (default: scene loss params)")
    s.add_argument("--out", required=True, help="bounds CSV")
    s.set_defaults(func=cmd_crlb)

    s = sub.add_parser("experiment", help="Monte Carlo comparison of all pipelines")
    s.add_argument("--config", help="experiment JSON; its values override these flags")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--seed", type=int, help="random seed")
    s.add_argument("--trials", type=int, help="trials per node")
    s.add_argument("--workers", type=int, help="worker processes (capped by IPS_THREADS)")
    s.add_argument("--band", help="FR1, FR2 or FR3")
    s.add_argument("--sigma-m", dest="sigma_m", type=float, help="range noise sigma in m")
    s.set_defaults(func=cmd_experiment)

    s = sub.add_parser("slp-demo", help="run one sidelink positioning session and print its trace")
    s.add_argument("--anchors", type=int, default=4, help="number of anchor UEs (default 4)")
    s.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    s.add_argument("--noise", type=float, default=0.0, help="RTT range noise sigma in m (default 0)")
    s.add_argument("--deny", action="store_true", help="make the LMF deny authorization")
    s.add_argument("--degraded", action="store_true", help="allow a 2D fix with fewer than 4 anchors")
    s.add_argument("--additional", action="store_true", help="have the LMF add one extra anchor (optional step 7)")
    s.set_defaults(func=cmd_slp_demo)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        sys.stderr.write(f"o2ips {args.command}: error: {exc}\n")
        return EXIT_USAGE
    except (IpsError, OSError, ValueError, KeyError) as exc:
        sys.stderr.write(f"o2ips {args.command}: {type(exc).__name__}: {exc}\n")
        return EXIT_RUNTIME


if __name__ == "__main__":
    raise SystemExit(main())
