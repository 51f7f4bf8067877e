"""Position estimators for ToA ranges.

Propagation-unaware: :func:`lls` (squared-range linearization) and
:func:`ippa` (relaxed parallel projections onto spheres for LoS ranges and
balls for NLoS ranges).

Propagation-aware: :func:`mechanism_ls` (transmission and reflection via
virtual anchors), :func:`dnls_known_edges` (diffraction with surveyed window
edges) and :func:`dnls_facade` (diffraction with unknown edges pinned to the
facade at the node's height).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .channel import LosLabel, ToaMeasurement
from .errors import (NonConvergence, RankDeficient, TooFewAnchors, TooFewMeasurements,
                     Underdetermined, UnknownPanel)
from .raypath import MechanismKind, _diffraction_batch, mirror_across
from .scene import (AnchorSpec, BuildingModel, EdgeSegment, SceneModel, WallPanel, floor_of)


@dataclass(frozen=True)
class SolverParams:
    max_iterations: int = 200
    step_tolerance: float = 1e-10
    residual_tolerance: float = 1e-20
    ippa_relaxation: float = 1.0
    init_strategy: str = "centroid"  # centroid | provided | multistart
    initial: tuple[float, float, float] | None = None
    multistart_k: int = 8
    multistart_radius: float = 2.0

    def __post_init__(self):
        if self.step_tolerance <= 0 or self.residual_tolerance <= 0:
            raise ValueError("tolerances must be > 0")
        if not 0 < self.ippa_relaxation <= 1:
            raise ValueError("ippa_relaxation must be in (0, 1]")
        if self.init_strategy not in ("centroid", "provided", "multistart"):
            raise ValueError(f"unknown init_strategy {self.init_strategy!r}")
        if self.init_strategy == "provided" and self.initial is None:
            raise ValueError("init_strategy 'provided' needs an initial point")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")


COST_RTOL = 1e-12  # accepted steps this small in relative cost count as converged

IPPA_DEFAULTS = SolverParams(max_iterations=2000, step_tolerance=1e-7)


@dataclass(frozen=True)
class PositionEstimate:
    position: np.ndarray
    method_tag: str
    iterations: int = 0
    final_residual: float = 0.0
    converged: bool = True
    aux: Mapping = field(default_factory=dict, compare=False)


def _anchor_table(anchors) -> dict[str, np.ndarray]:
    if isinstance(anchors, SceneModel):
        anchors = anchors.anchors
    if isinstance(anchors, Mapping):
        return {k: np.asarray(v.position if isinstance(v, AnchorSpec) else v, dtype=float)
                for k, v in anchors.items()}
    return {a.id: np.asarray(a.position, dtype=float) for a in anchors}


def _anchor_rows(measurements: Sequence[ToaMeasurement], anchors) -> np.ndarray:
    table = _anchor_table(anchors)
    try:
        return np.array([table[m.anchor_id] for m in measurements], dtype=float).reshape(-1, 3)
    except KeyError as exc:
        raise KeyError(f"measurement references unknown anchor {exc.args[0]!r}") from None


def _ranges(measurements: Sequence[ToaMeasurement]) -> np.ndarray:
    return np.array([m.range for m in measurements], dtype=float)


def _weights(measurements: Sequence[ToaMeasurement]) -> np.ndarray:
    sig = np.array([m.sigma for m in measurements], dtype=float)
    if np.any(sig <= 0):
        return np.ones_like(sig)
    return 1.0 / sig**2


# --------------------------------------------------------------------------
# Linear least squares
# --------------------------------------------------------------------------
def solve_lls(points: np.ndarray, ranges: np.ndarray) -> np.ndarray:
    """Closed-form fix from ranges to known points.

    Subtracting the first squared-range equation from the others leaves
    2 (a_i - a_0) . p = |a_i|^2 - |a_0|^2 - r_i^2 + r_0^2.
    """
    points = np.asarray(points, dtype=float)
    ranges = np.asarray(ranges, dtype=float)
    if len(points) < 4:
        raise TooFewAnchors(f"need >= 4 ranges for a 3-D fix, got {len(points)}")
    A = 2.0 * (points[1:] - points[0])
    b = (np.sum(points[1:] ** 2, axis=1) - points[0] @ points[0]
         - ranges[1:] ** 2 + ranges[0] ** 2)
    sv = np.linalg.svd(A, compute_uv=False)
    if sv[-1] <= 1e-10 * sv[0]:
        raise RankDeficient("anchors are coplanar or collinear")
    p, *_ = np.linalg.lstsq(A, b, rcond=None)
    return p


def _range_residual(p, points, ranges) -> float:
    return float(np.sum((np.linalg.norm(points - p, axis=1) - ranges) ** 2))


def lls(measurements: Sequence[ToaMeasurement], anchors) -> PositionEstimate:
    points = _anchor_rows(measurements, anchors)
    ranges = _ranges(measurements)
    p = solve_lls(points, ranges)
    return PositionEstimate(p, "lls", 1, _range_residual(p, points, ranges), True)


# --------------------------------------------------------------------------
# IPPA
# --------------------------------------------------------------------------
def _project_sphere(x, centers, radii):
    d = x - centers
    norm = np.linalg.norm(d, axis=1)
    # direction is arbitrary at the center; pick +z
    safe = np.where(norm > 0, norm, 1.0)
    unit = np.where(norm[:, None] > 0, d / safe[:, None], np.array([0.0, 0.0, 1.0]))
    return centers + radii[:, None] * unit, norm


def ippa(measurements: Sequence[ToaMeasurement], los_labels: Sequence[LosLabel | str] | None,
         anchors, params: SolverParams = IPPA_DEFAULTS,
         callback: Callable[[np.ndarray], None] | None = None) -> PositionEstimate:
    """Iterative parallel projection.

    x <- x + lam * mean_i(P_i(x) - x), with P_i the projection onto the
    sphere |x - a_i| = r_i for LoS ranges and onto the ball |x - a_i| <= r_i
    for NLoS ranges (a non-negative bias keeps the node inside the ball).
    """
    if len(measurements) < 4:
        raise TooFewAnchors(f"IPPA needs >= 4 ranges, got {len(measurements)}")
    if los_labels is None:
        los_labels = [m.los_label for m in measurements]
    if any(lab is None for lab in los_labels):
        raise ValueError("every measurement needs a LoS/NLoS label")
    los = np.array([LosLabel(lab) is LosLabel.LOS for lab in los_labels])
    centers = _anchor_rows(measurements, anchors)
    radii = _ranges(measurements)
    if params.init_strategy == "provided":
        x = np.array(params.initial, dtype=float)
    else:
        x = centers.mean(axis=0)
    lam = params.ippa_relaxation
    converged = False
    it = 0
    for it in range(1, params.max_iterations + 1):
        proj, dist = _project_sphere(x, centers, radii)
        proj = np.where((~los & (dist <= radii))[:, None], x, proj)
        step = lam * np.mean(proj - x, axis=0)
        x = x + step
        if callback is not None:
            callback(x.copy())
        if np.linalg.norm(step) < params.step_tolerance:
            converged = True
            break
    dist = np.linalg.norm(centers - x, axis=1)
    excess = np.where(los, dist - radii, np.maximum(dist - radii, 0.0))
    return PositionEstimate(x, "ippa", it, float(np.sum(excess**2)), converged)


# --------------------------------------------------------------------------
# Transmission / reflection via virtual anchors
# --------------------------------------------------------------------------
def virtual_anchor(anchor: np.ndarray, panel_ids: Sequence[str], building: BuildingModel) -> np.ndarray:
    p = np.asarray(anchor, dtype=float)
    for pid in panel_ids:
        try:
            panel = building.panel(pid)
        except KeyError:
            raise UnknownPanel(f"reflection references unknown panel {pid!r}") from None
        p = mirror_across(p, panel)
    return p


def mechanism_ls(measurements: Sequence[ToaMeasurement], anchors, scene,
                 params: SolverParams | None = None) -> PositionEstimate:
    """LLS after replacing reflected ranges' anchors by their virtual anchors."""
    building = scene.building if isinstance(scene, SceneModel) else scene
    table = _anchor_table(anchors)
    points = []
    for m in measurements:
        mech = m.true_mechanism
        if mech is None:
            raise ValueError(f"measurement from {m.anchor_id} has no mechanism label")
        a = table[m.anchor_id]
        if mech.kind in (MechanismKind.LINE_OF_SIGHT, MechanismKind.TRANSMISSION):
            points.append(a)
        elif mech.kind is MechanismKind.REFLECTION:
            points.append(virtual_anchor(a, mech.panel_ids, building))
        else:
            raise ValueError(f"mechanism_ls cannot use {mech.tag} measurements")
    points = np.array(points, dtype=float).reshape(-1, 3)
    ranges = _ranges(measurements)
    p = solve_lls(points, ranges)
    return PositionEstimate(p, "mech-ls", 1, _range_residual(p, points, ranges), True)


# --------------------------------------------------------------------------
# Levenberg-Marquardt core
# --------------------------------------------------------------------------
@dataclass
class _LmResult:
    x: np.ndarray
    cost: float         # unweighted sum of squared residuals
    iterations: int
    converged: bool


def levenberg_marquardt(model: Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]],
                        measured: np.ndarray, weights: np.ndarray, x0: np.ndarray,
                        params: SolverParams,
                        callback: Callable[[np.ndarray, float], None] | None = None) -> _LmResult:
    """Weighted LM with Marquardt (diagonal) damping.

    ``model(x)`` returns predictions and their Jacobian. Steps are accepted
    only if the weighted cost decreases, so accepted costs are monotone.
    """
    x = np.array(x0, dtype=float)
    pred, J = model(x)
    r = pred - measured
    wcost = float(np.sum(weights * r**2))
    mu = 1e-3
    it = 0
    converged = False
    while it < params.max_iterations:
        if float(np.sum(r**2)) <= params.residual_tolerance:
            converged = True
            break
        it += 1
        JW = J * weights[:, None]
        H = JW.T @ J
        g = JW.T @ r
        diag = np.maximum(np.diag(H), 1e-12 * max(np.max(np.diag(H)), 1e-300))
        try:
            step = -np.linalg.solve(H + mu * np.diag(diag), g)
        except np.linalg.LinAlgError:
            mu *= 10
            continue
        x_new = x + step
        pred_new, J_new = model(x_new)
        r_new = pred_new - measured
        wcost_new = float(np.sum(weights * r_new**2))
        if np.isfinite(wcost_new) and wcost_new <= wcost:
            drop = wcost - wcost_new
            x, r, J, wcost = x_new, r_new, J_new, wcost_new
            mu = max(mu / 3.0, 1e-12)
            if callback is not None:
                callback(x.copy(), wcost)
            if (np.linalg.norm(step) <= params.step_tolerance * (1.0 + np.linalg.norm(x))
                    or drop <= COST_RTOL * wcost):
                converged = True
                break
        else:
            mu *= 4.0
            if mu > 1e12:
                # no descent direction left: sitting on a minimum
                converged = True
                break
    return _LmResult(x, float(np.sum(r**2)), it, converged)


def _starts(center: np.ndarray, params: SolverParams) -> list[np.ndarray]:
    corners = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], float)
    k = params.multistart_k
    reps = int(np.ceil(k / 8))
    offs = np.concatenate([corners * (j + 1) for j in range(reps)])[:k]
    return [center + params.multistart_radius * o for o in offs]


def _solve_with_fallback(model, measured, weights, x0_pos: np.ndarray, extra0: np.ndarray,
                         params: SolverParams, callback=None):
    """Run LM from x0; on NonConvergence (or when asked) retry from perturbed starts."""
    def run(p0):
        return levenberg_marquardt(model, measured, weights, np.concatenate([p0, extra0]),
                                   params, callback)

    best = run(x0_pos)
    if best.converged and params.init_strategy != "multistart":
        return best
    if params.multistart_k <= 0:
        raise NonConvergence(f"no convergence in {params.max_iterations} iterations")
    total = best.iterations
    for p0 in _starts(x0_pos, params):
        res = run(p0)
        total = max(total, res.iterations)
        if (res.converged, -res.cost) > (best.converged, -best.cost):
            best = res
    return best


def _initial_position(params: SolverParams, default: np.ndarray, x0) -> np.ndarray:
    if x0 is not None:
        return np.asarray(x0, dtype=float)
    if params.initial is not None and params.init_strategy in ("provided", "multistart"):
        return np.asarray(params.initial, dtype=float)
    return default


# --------------------------------------------------------------------------
# Diffraction NLS with known edges
# --------------------------------------------------------------------------
def _edge_table(edges) -> dict[str, EdgeSegment]:
    if isinstance(edges, SceneModel):
        edges = edges.building
    if isinstance(edges, BuildingModel):
        edges = edges.edges
    if isinstance(edges, Mapping):
        return dict(edges)
    return {e.id: e for e in edges}


def diffraction_model(anchor_rows: np.ndarray, starts: np.ndarray, ends: np.ndarray):
    """Path lengths L_i(p) and envelope gradients unit(p - q_i) as a model callable."""
    def model(x):
        p = x[:3]
        _, _, _, q, total, _ = _diffraction_batch(anchor_rows, p, starts, ends)
        d = p - q
        norm = np.linalg.norm(d, axis=1)
        J = d / np.where(norm > 0, norm, 1.0)[:, None]
        return total, J
    return model


def dnls_known_edges(measurements: Sequence[ToaMeasurement], anchors, edges,
                     params: SolverParams = SolverParams(), x0=None,
                     callback=None) -> PositionEstimate:
    """Minimize sum_i w_i (l_i - L_i(p))^2 with L_i the Fermat diffraction length.

    Each measurement's ``edge_id`` selects its surveyed edge. The Jacobian
    uses the envelope property: the path is stationary in the diffraction
    point, so dL/dp = unit(p - q).
    """
    if len(measurements) < 3:
        raise TooFewMeasurements(f"need >= 3 diffraction ranges, got {len(measurements)}")
    table = _edge_table(edges)
    try:
        segs = [table[m.edge_id] for m in measurements]
    except KeyError as exc:
        raise KeyError(f"unknown edge {exc.args[0]!r}") from None
    a = _anchor_rows(measurements, anchors)
    starts = np.array([e.start for e in segs])
    ends = np.array([e.end for e in segs])
    default = np.vstack([a, 0.5 * (starts + ends)]).mean(axis=0)
    p0 = _initial_position(params, default, x0)
    res = _solve_with_fallback(diffraction_model(a, starts, ends), _ranges(measurements),
                               _weights(measurements), p0, np.empty(0), params, callback)
    return PositionEstimate(res.x[:3], "dnls-map", res.iterations, res.cost, res.converged)


# --------------------------------------------------------------------------
# Diffraction NLS with facade relaxation
# --------------------------------------------------------------------------
@dataclass(frozen=True)
class FacadePlane:
    """Vertical facade: points origin + t * along + z * e_z."""

    origin: np.ndarray
    along: np.ndarray

    def __post_init__(self):
        o = np.array(self.origin, dtype=float)
        o[2] = 0.0
        u = np.array(self.along, dtype=float)
        u[2] = 0.0
        u /= np.linalg.norm(u)
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "along", u)

    @classmethod
    def from_panel(cls, panel: WallPanel) -> "FacadePlane":
        u = panel.axis_u if abs(panel.axis_u[2]) < abs(panel.axis_v[2]) else panel.axis_v
        return cls(panel.origin, u)

    def point(self, t: float, z: float) -> np.ndarray:
        return self.origin + t * self.along + np.array([0.0, 0.0, z])

    def coordinate(self, p: np.ndarray) -> float:
        return float((np.asarray(p, dtype=float) - self.origin) @ self.along)


def facade_model(anchor_rows: np.ndarray, group_of: np.ndarray, planes: Sequence[FacadePlane]):
    origins = np.array([pl.origin for pl in planes])[group_of]
    alongs = np.array([pl.along for pl in planes])[group_of]

    def model(x):
        p = x[:3]
        t = x[3:][group_of]
        q = origins + t[:, None] * alongs
        q[:, 2] = p[2]
        da = q - anchor_rows
        dp = q - p
        na = np.linalg.norm(da, axis=1)
        npn = np.linalg.norm(dp, axis=1)
        ga = da / np.where(na > 0, na, 1.0)[:, None]
        gp = dp / np.where(npn > 0, npn, 1.0)[:, None]
        J = np.zeros((len(anchor_rows), x.size))
        J[:, 0] = -gp[:, 0]
        J[:, 1] = -gp[:, 1]
        J[:, 2] = ga[:, 2]   # q rides with p.z, so only the anchor leg sees dz
        J[np.arange(len(anchor_rows)), 3 + group_of] = np.einsum("ik,ik->i", ga + gp, alongs)
        return na + npn, J
    return model


def _indoor_side(p, interior, planes) -> bool:
    """Node on the same side of every facade as a known indoor point."""
    for pl in planes:
        n = np.cross(pl.along, [0.0, 0.0, 1.0])
        if ((interior - pl.origin) @ n) * ((p - pl.origin) @ n) < 0:
            return False
    return True


def _mirror_xy(p, q1, q2) -> np.ndarray:
    span = np.linalg.norm(q2 - q1)
    if span < 1e-9:
        return np.array(p, dtype=float)
    u = (q2 - q1) / span
    d = p[:2] - q1
    out = np.array(p, dtype=float)
    out[:2] = q1 + 2.0 * (d @ u) * u - d
    return out


def dnls_facade(measurements: Sequence[ToaMeasurement], anchors, facade_plane,
                edge_groups: Sequence[Sequence[int]], params: SolverParams = SolverParams(),
                x0=None, callback=None, interior=None) -> PositionEstimate:
    """Joint fit of the node and one along-facade coordinate per shared edge.

    ``edge_groups`` lists measurement indices that share one (unknown) edge;
    ``facade_plane`` is one :class:`FacadePlane` for all groups or one per
    group. Each diffraction point is placed on its facade at the node's
    height, so edge positions are never inputs. Recovered coordinates are
    returned in ``aux['t']``.

    With two or more groups the node's horizontal position is fixed only by
    distances to facade points, which admits a mirror twin. ``interior``, a
    point known to be indoors, selects the twin on the indoor side.
    """
    groups = [list(g) for g in edge_groups]
    G = len(groups)
    m = len(measurements)
    if m < 3 + G:
        raise Underdetermined(f"{m} ranges cannot fix 3 + {G} unknowns")
    group_of = np.full(m, -1)
    for j, g in enumerate(groups):
        for i in g:
            if group_of[i] != -1:
                raise ValueError(f"measurement {i} is in more than one group")
            group_of[i] = j
    if np.any(group_of < 0):
        raise ValueError("every measurement must belong to an edge group")
    planes = [facade_plane] * G if isinstance(facade_plane, FacadePlane) else list(facade_plane)
    if len(planes) != G:
        raise ValueError("need one facade plane per edge group")
    a = _anchor_rows(measurements, anchors)
    p0 = _initial_position(params, a.mean(axis=0), x0)
    if interior is not None:
        interior = np.asarray(interior, dtype=float)
    # each edge starts where the straight anchor->p0 line meets its facade
    t0 = []
    for j, g in enumerate(groups):
        pl = planes[j]
        n = np.cross(pl.along, [0.0, 0.0, 1.0])
        ts = []
        for i in g:
            da, dp = (a[i] - pl.origin) @ n, (p0 - pl.origin) @ n
            w = da / (da - dp) if da != dp else 0.5
            ts.append(pl.coordinate(a[i] + w * (p0 - a[i])))
        t0.append(np.mean(ts))
    model = facade_model(a, group_of, planes)
    measured, weights = _ranges(measurements), _weights(measurements)
    res = _solve_with_fallback(model, measured, weights, p0, np.array(t0), params, callback)
    if interior is not None and G >= 2 and not _indoor_side(res.x[:3], interior, planes):
        # distances to two facade points leave a mirror twin across the line joining them
        q = [planes[j].point(res.x[3 + j], 0.0)[:2] for j in range(2)]
        alt = levenberg_marquardt(model, measured, weights,
                                  np.concatenate([_mirror_xy(res.x[:3], *q), res.x[3:]]), params, callback)
        key = lambda r: (_indoor_side(r.x[:3], interior, planes), r.converged, -r.cost)
        res = max((res, alt), key=key)
    return PositionEstimate(res.x[:3], "dnls-facade", res.iterations, res.cost, res.converged,
                            aux={"t": res.x[3:].tolist()})


def estimate_floor(estimate: PositionEstimate, building: BuildingModel) -> int:
    return floor_of(float(estimate.position[2]), building)
