"""Geometric multipath components between an outdoor anchor and an indoor node.

Four generators are provided: the straight (transmission / line-of-sight)
path, specular reflections by the image method, single-edge diffraction off
window edges, and :func:`enumerate_mpcs` which merges them in a documented
order. Diffuse clutter is stochastic and lives in :mod:`o2ips.channel`.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field
from enum import IntEnum
from typing import IO, Iterable, Sequence

import numpy as np

from .errors import DegenerateGeometry
from .scene import (AnchorSpec, BuildingModel, EdgeSegment, SceneModel, WallPanel,
                    diffracting_edges_for_floor, floor_of)

SEGMENT_TOL = 1e-9


class MechanismKind(IntEnum):
    # IntEnum order is the tie-break order used by enumerate_mpcs
    LINE_OF_SIGHT = 0
    TRANSMISSION = 1
    REFLECTION = 2
    DIFFRACTION = 3
    DIFFUSE = 4


_NAMES = {
    MechanismKind.LINE_OF_SIGHT: "LineOfSight",
    MechanismKind.TRANSMISSION: "Transmission",
    MechanismKind.REFLECTION: "Reflection",
    MechanismKind.DIFFRACTION: "Diffraction",
    MechanismKind.DIFFUSE: "Diffuse",
}


@dataclass(frozen=True)
class Mechanism:
    kind: MechanismKind
    walls_crossed: int = 0
    panel_ids: tuple[str, ...] = ()
    edge_id: str | None = None

    def __post_init__(self):
        if self.kind is MechanismKind.TRANSMISSION and self.walls_crossed < 1:
            raise ValueError("Transmission needs walls_crossed >= 1")
        if self.kind is MechanismKind.REFLECTION and not self.panel_ids:
            raise ValueError("Reflection needs at least one panel id")
        if self.kind is MechanismKind.DIFFRACTION and not self.edge_id:
            raise ValueError("Diffraction needs an edge id")

    @classmethod
    def los(cls) -> "Mechanism":
        return cls(MechanismKind.LINE_OF_SIGHT)

    @classmethod
    def transmission(cls, walls: int) -> "Mechanism":
        return cls(MechanismKind.TRANSMISSION, walls_crossed=walls)

    @classmethod
    def reflection(cls, panel_ids: Sequence[str]) -> "Mechanism":
        return cls(MechanismKind.REFLECTION, panel_ids=tuple(panel_ids))

    @classmethod
    def diffraction(cls, edge_id: str) -> "Mechanism":
        return cls(MechanismKind.DIFFRACTION, edge_id=edge_id)

    @classmethod
    def diffuse(cls) -> "Mechanism":
        return cls(MechanismKind.DIFFUSE)

    @property
    def order(self) -> int:
        if self.kind is MechanismKind.REFLECTION:
            return len(self.panel_ids)
        if self.kind is MechanismKind.TRANSMISSION:
            return self.walls_crossed
        return 1 if self.kind is MechanismKind.DIFFRACTION else 0

    @property
    def source_id(self) -> str:
        if self.kind is MechanismKind.REFLECTION:
            return "+".join(self.panel_ids)
        return self.edge_id or ""

    @property
    def is_unbiased(self) -> bool:
        """True when the path length equals the straight anchor-node distance."""
        return self.kind in (MechanismKind.LINE_OF_SIGHT, MechanismKind.TRANSMISSION)

    @property
    def tag(self) -> str:
        name = _NAMES[self.kind]
        if self.kind is MechanismKind.TRANSMISSION:
            return f"{name}({self.walls_crossed})"
        if self.kind in (MechanismKind.REFLECTION, MechanismKind.DIFFRACTION):
            return f"{name}({self.source_id})"
        return name

    def __str__(self) -> str:
        return self.tag

    @classmethod
    def parse(cls, tag: str) -> "Mechanism":
        tag = tag.strip()
        name, _, rest = tag.partition("(")
        arg = rest[:-1] if rest.endswith(")") else rest
        if name == "LineOfSight":
            return cls.los()
        if name == "Transmission":
            return cls.transmission(int(arg))
        if name == "Reflection":
            return cls.reflection(arg.split("+"))
        if name == "Diffraction":
            return cls.diffraction(arg)
        if name == "Diffuse":
            return cls.diffuse()
        raise ValueError(f"unknown mechanism tag {tag!r}")


@dataclass(frozen=True)
class DiffractionSolution:
    t_star: float
    point: np.ndarray
    clamped: bool
    path_length: float
    s_unclamped: float = float("nan")  # along-edge optimum in meters before clamping
    edge_length: float = float("nan")


@dataclass(frozen=True)
class Mpc:
    mechanism: Mechanism
    vertices: np.ndarray
    path_length: float
    anchor_id: str = ""
    crossings: int = 0
    virtual_anchor: np.ndarray | None = field(default=None, compare=False)
    diffraction: DiffractionSolution | None = field(default=None, compare=False)

    @property
    def anchor(self) -> np.ndarray:
        return self.vertices[0]

    @property
    def node(self) -> np.ndarray:
        return self.vertices[-1]

    @property
    def vertex_length(self) -> float:
        return float(np.sum(np.linalg.norm(np.diff(self.vertices, axis=0), axis=1)))

    def sort_key(self):
        return (self.path_length, int(self.mechanism.kind), self.mechanism.source_id)


def _ro(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.flags.writeable = False
    return a


def _as_anchor(anchor) -> tuple[np.ndarray, str]:
    if isinstance(anchor, AnchorSpec):
        return np.asarray(anchor.position, dtype=float), anchor.id
    return np.asarray(anchor, dtype=float), ""


def _building(scene) -> BuildingModel:
    return scene.building if isinstance(scene, SceneModel) else scene


# --------------------------------------------------------------------------
# Segment / panel intersection
# --------------------------------------------------------------------------
def segment_hits(building: BuildingModel, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Boolean (S, P) matrix: does segment s cross solid wall panel p.

    Endpoints are excluded (relative tolerance 1e-9) and crossings inside a
    window aperture do not count.
    """
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    O, U, V, N = building._panel_origin, building._panel_u, building._panel_v, building._panel_n
    d = b - a
    denom = d @ N.T
    num = np.einsum("spk,pk->sp", O[None, :, :] - a[:, None, :], N)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = num / denom
    ok = (np.abs(denom) > 1e-14) & (t > SEGMENT_TOL) & (t < 1 - SEGMENT_TOL)
    t = np.where(ok, t, 0.0)
    rel = a[:, None, :] + t[..., None] * d[:, None, :] - O[None, :, :]
    u = np.einsum("spk,pk->sp", rel, U) / np.einsum("pk,pk->p", U, U)
    v = np.einsum("spk,pk->sp", rel, V) / np.einsum("pk,pk->p", V, V)
    hits = ok & (u >= 0) & (u <= 1) & (v >= 0) & (v <= 1)
    wp = building._window_panel
    if wp.size:
        wu, wv = u[:, wp], v[:, wp]
        lo, hi = building._window_lo, building._window_hi
        in_win = hits[:, wp] & (wu >= lo[:, 0]) & (wu <= hi[:, 0]) & (wv >= lo[:, 1]) & (wv <= hi[:, 1])
        onehot = np.zeros((wp.size, N.shape[0]))
        onehot[np.arange(wp.size), wp] = 1.0
        hits &= ~((in_win.astype(float) @ onehot) > 0)
    return hits


def count_crossings(building: BuildingModel, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return segment_hits(building, a, b).sum(axis=1)


def passes_through_interior(building: BuildingModel, a: np.ndarray, b: np.ndarray,
                            tol: float = SEGMENT_TOL) -> np.ndarray:
    """Per segment, whether it overlaps the open building box over a non-zero length."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    lo, hi = building.box_min, building.box_max
    d = b - a
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (lo - a) / d
        t2 = (hi - a) / d
    tmin = np.minimum(t1, t2)
    tmax = np.maximum(t1, t2)
    flat = d == 0
    strictly_in = (a > lo) & (a < hi)
    tmin = np.where(flat, np.where(strictly_in, -np.inf, np.inf), tmin)
    tmax = np.where(flat, np.where(strictly_in, np.inf, -np.inf), tmax)
    enter = np.maximum(tmin.max(axis=1), 0.0)
    leave = np.minimum(tmax.min(axis=1), 1.0)
    return leave - enter > tol


# --------------------------------------------------------------------------
# Transmission
# --------------------------------------------------------------------------
def transmission_path(anchor, node, scene) -> Mpc:
    """Straight anchor-node path; walls crossed are counted, refraction ignored."""
    a, aid = _as_anchor(anchor)
    n = np.asarray(node, dtype=float)
    length = float(np.linalg.norm(a - n))
    if length == 0:
        raise DegenerateGeometry("anchor and node coincide")
    k = int(count_crossings(_building(scene), a, n)[0])
    mech = Mechanism.transmission(k) if k else Mechanism.los()
    return Mpc(mech, _ro([a, n]), length, aid, crossings=k)


# --------------------------------------------------------------------------
# Reflection (image method)
# --------------------------------------------------------------------------
def mirror_across(point, plane) -> np.ndarray:
    """Reflect ``point`` across a plane given as a WallPanel or (origin, unit_normal)."""
    if isinstance(plane, WallPanel):
        o, n = plane.origin, plane.unit_normal
    else:
        o, n = plane
    p = np.asarray(point, dtype=float)
    o = np.asarray(o, dtype=float)
    n = np.asarray(n, dtype=float)
    return p - 2.0 * ((p - o) @ n) * n


def _plane_crossing(p, q, panel: WallPanel, building: BuildingModel):
    """Point where segment p->q meets ``panel`` (inside its solid part) or None."""
    n = panel.unit_normal
    d = q - p
    denom = d @ n
    if abs(denom) < 1e-14:
        return None
    t = ((panel.origin - p) @ n) / denom
    if not (SEGMENT_TOL < t < 1 - SEGMENT_TOL):
        return None
    x = p + t * d
    u, v = panel.local_coords(x)
    if not (0 <= u <= 1 and 0 <= v <= 1):
        return None
    for w in building.windows:
        if w.panel_id == panel.id:
            wu = [panel.local_coords(c) for c in w.corners]
            us = [c[0] for c in wu]
            vs = [c[1] for c in wu]
            if min(us) <= u <= max(us) and min(vs) <= v <= max(vs):
                return None
    return x


def reflection_paths(anchor, node, scene, max_order: int = 1) -> list[Mpc]:
    """Specular paths up to ``max_order`` bounces (1 or 2) via virtual anchors.

    Candidates whose specular point misses the panel rectangle (or falls in a
    window opening) are discarded.
    """
    if max_order not in (1, 2):
        raise ValueError("max_order must be 1 or 2")
    a, aid = _as_anchor(anchor)
    n = np.asarray(node, dtype=float)
    building = _building(scene)
    panels = building.walls
    out = _first_order_reflections(a, n, building, aid)
    if max_order == 1:
        return out
    for seq in itertools.permutations(panels, 2):
        images = [a]
        for p in seq:
            images.append(mirror_across(images[-1], p))
        points = []
        target = n
        for k in range(len(seq) - 1, -1, -1):
            x = _plane_crossing(images[k + 1], target, seq[k], building)
            if x is None:
                break
            points.append(x)
            target = x
        else:
            verts = np.vstack([a, *points[::-1], n])
            k = int(count_crossings(building, verts[:-1], verts[1:]).sum())
            out.append(Mpc(Mechanism.reflection([p.id for p in seq]), _ro(verts),
                           float(np.linalg.norm(images[-1] - n)), aid, crossings=k,
                           virtual_anchor=_ro(images[-1])))
    return out


def _first_order_reflections(a, n, building: BuildingModel, aid: str) -> list[Mpc]:
    O, U, V, N = building._panel_origin, building._panel_u, building._panel_v, building._panel_n
    images = a - 2.0 * np.einsum("pk,pk->p", a - O, N)[:, None] * N
    d = n - images
    denom = np.einsum("pk,pk->p", d, N)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.einsum("pk,pk->p", O - images, N) / denom
    ok = (np.abs(denom) > 1e-14) & (t > SEGMENT_TOL) & (t < 1 - SEGMENT_TOL)
    t = np.where(ok, t, 0.0)
    x = images + t[:, None] * d
    rel = x - O
    u = np.einsum("pk,pk->p", rel, U) / np.einsum("pk,pk->p", U, U)
    v = np.einsum("pk,pk->p", rel, V) / np.einsum("pk,pk->p", V, V)
    ok &= (u >= 0) & (u <= 1) & (v >= 0) & (v <= 1)
    wp = building._window_panel
    if wp.size:
        lo, hi = building._window_lo, building._window_hi
        in_win = ((u[wp] >= lo[:, 0]) & (u[wp] <= hi[:, 0])
                  & (v[wp] >= lo[:, 1]) & (v[wp] <= hi[:, 1]))
        ok[wp[in_win]] = False
    idx = np.flatnonzero(ok)
    if idx.size == 0:
        return []
    legs_a = np.concatenate([np.broadcast_to(a, (idx.size, 3)), x[idx]])
    legs_b = np.concatenate([x[idx], np.broadcast_to(n, (idx.size, 3))])
    k = count_crossings(building, legs_a, legs_b)
    k = k[: idx.size] + k[idx.size:]
    out = []
    for j, i in enumerate(idx):
        out.append(Mpc(Mechanism.reflection([building.walls[i].id]), _ro([a, x[i], n]),
                       float(np.linalg.norm(images[i] - n)), aid, crossings=int(k[j]),
                       virtual_anchor=_ro(images[i])))
    return out


# --------------------------------------------------------------------------
# Diffraction
# --------------------------------------------------------------------------
def _diffraction_batch(a: np.ndarray, n: np.ndarray, starts: np.ndarray, ends: np.ndarray):
    axis = ends - starts
    length = np.linalg.norm(axis, axis=1)
    u = axis / length[:, None]
    da = a - starts
    dn = n - starts
    s_a = np.einsum("ek,ek->e", da, u)
    s_n = np.einsum("ek,ek->e", dn, u)
    r_a = np.linalg.norm(da - s_a[:, None] * u, axis=1)
    r_n = np.linalg.norm(dn - s_n[:, None] * u, axis=1)
    rsum = r_a + r_n
    with np.errstate(divide="ignore", invalid="ignore"):
        s_star = (s_a * r_n + s_n * r_a) / rsum
    s = np.clip(s_star, 0.0, length)
    q = starts + s[:, None] * u
    total = np.linalg.norm(a - q, axis=1) + np.linalg.norm(q - n, axis=1)
    return s_star, s, length, q, total, rsum


def diffraction_point(anchor, node, edge: EdgeSegment) -> DiffractionSolution:
    """Point on ``edge`` minimizing anchor->edge->node length (Fermat's principle).

    Unfolding the two half-planes about the edge line turns the problem into a
    straight line, giving s* = (s_a r_n + s_n r_a) / (r_a + r_n) in along-edge
    coordinates; s* is clamped to the segment.
    """
    a, _ = _as_anchor(anchor)
    n = np.asarray(node, dtype=float)
    s_star, s, length, q, total, rsum = _diffraction_batch(
        a, n, edge.start[None, :], edge.end[None, :])
    if rsum[0] == 0:
        raise DegenerateGeometry("anchor and node both lie on the edge line")
    clamped = bool(s_star[0] < 0 or s_star[0] > length[0])
    return DiffractionSolution(float(s[0] / length[0]), _ro(q[0]), clamped, float(total[0]),
                               float(s_star[0]), float(length[0]))


def diffraction_paths(anchor, node, scene) -> list[Mpc]:
    """One diffraction Mpc per window edge on the node's floor visible from the anchor."""
    a, aid = _as_anchor(anchor)
    n = np.asarray(node, dtype=float)
    building = _building(scene)
    edges = diffracting_edges_for_floor(building, floor_of(n[2], building))
    if not edges:
        return []
    starts = np.array([e.start for e in edges])
    ends = np.array([e.end for e in edges])
    s_star, s, length, q, total, rsum = _diffraction_batch(a, n, starts, ends)
    keep = (rsum > 0) & ~passes_through_interior(building, np.broadcast_to(a, q.shape), q)
    idx = np.flatnonzero(keep)
    if idx.size == 0:
        return []
    legs_a = np.concatenate([np.broadcast_to(a, (idx.size, 3)), q[idx]])
    legs_b = np.concatenate([q[idx], np.broadcast_to(n, (idx.size, 3))])
    k = count_crossings(building, legs_a, legs_b)
    k = k[: idx.size] + k[idx.size:]
    out = []
    for j, i in enumerate(idx):
        clamped = bool(s_star[i] < 0 or s_star[i] > length[i])
        sol = DiffractionSolution(float(s[i] / length[i]), _ro(q[i]), clamped, float(total[i]),
                                  float(s_star[i]), float(length[i]))
        out.append(Mpc(Mechanism.diffraction(edges[i].id), _ro([a, q[i], n]), float(total[i]),
                       aid, crossings=int(k[j]), diffraction=sol))
    return out


# --------------------------------------------------------------------------
# Enumeration
# --------------------------------------------------------------------------
@dataclass(frozen=True)
class MpcOptions:
    transmission: bool = True
    reflection: bool = True
    diffraction: bool = True
    max_reflection_order: int = 1


def enumerate_mpcs(anchor, node, scene, options: MpcOptions = MpcOptions()) -> list[Mpc]:
    """All enabled geometric MPCs sorted by (path_length, mechanism, source id)."""
    mpcs: list[Mpc] = []
    if options.transmission:
        mpcs.append(transmission_path(anchor, node, scene))
    else:
        a, _ = _as_anchor(anchor)
        if np.linalg.norm(a - np.asarray(node, dtype=float)) == 0:
            raise DegenerateGeometry("anchor and node coincide")
    if options.reflection:
        mpcs.extend(reflection_paths(anchor, node, scene, options.max_reflection_order))
    if options.diffraction:
        mpcs.extend(diffraction_paths(anchor, node, scene))
    mpcs.sort(key=Mpc.sort_key)
    return mpcs


MPC_CSV_COLUMNS = ["anchor_id", "mechanism", "order", "edge_or_panel_ids", "path_length_m", "vertices"]


def write_mpcs_csv(mpcs: Iterable[Mpc], fh: IO[str]) -> None:
    """Debug dump of MPCs; vertices as semicolon-separated 'x y z' triples."""
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(MPC_CSV_COLUMNS)
    for m in mpcs:
        verts = ";".join(" ".join(f"{c:.9g}" for c in v) for v in m.vertices)
        w.writerow([m.anchor_id, _NAMES[m.mechanism.kind], m.mechanism.order,
                    m.mechanism.source_id, f"{m.path_length:.9f}", verts])
