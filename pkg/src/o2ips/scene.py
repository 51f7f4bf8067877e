"""Building, window-edge and anchor geometry in local building coordinates.

Coordinates are meters in a right-handed frame with z up and z = 0 at ground
level. The building is an axis-aligned box; walls and windows are rectangles.
Everything returned by :func:`build_scene` is immutable (frozen dataclasses
holding read-only arrays) and safe to share across worker processes.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import TYPE_CHECKING, Any, Mapping, Sequence

import numpy as np

from .errors import GeometryError, OutOfRange, ParseError

if TYPE_CHECKING:
    from .channel import LossParams

SPEED_OF_LIGHT = 299_792_458.0  # m/s
SCHEMA_VERSION = 1

COPLANAR_TOL = 1e-9
NORMAL_TOL = 1e-12


def point3(values: Sequence[float]) -> np.ndarray:
    """Return a read-only float64 3-vector, rejecting non-finite input."""
    p = np.array(values, dtype=float).reshape(-1)
    if p.shape != (3,):
        raise GeometryError(f"expected 3 coordinates, got {len(p)}")
    if not np.all(np.isfinite(p)):
        raise GeometryError(f"non-finite coordinate in {values!r}")
    p.flags.writeable = False
    return p


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.flags.writeable = False
    return a


# --------------------------------------------------------------------------
# Frequency ranges
# --------------------------------------------------------------------------
class Band(str, Enum):
    FR1 = "FR1"
    FR2 = "FR2"
    FR3 = "FR3"


FR3_LOW_HZ = 7e9
FR2_LOW_HZ = 24e9
FR2_HIGH_HZ = 48e9

DEFAULT_CARRIER_HZ = {Band.FR1: 3.5e9, Band.FR2: 28e9, Band.FR3: 10e9}


@dataclass(frozen=True)
class FrequencyBand:
    band: Band
    carrier_hz: float

    @property
    def wavelength(self) -> float:
        return SPEED_OF_LIGHT / self.carrier_hz


def classify_band(carrier_hz: float) -> FrequencyBand:
    """Map a carrier frequency onto FR1 (< 7 GHz), FR3 (7-24 GHz) or FR2 (24-48 GHz)."""
    f = float(carrier_hz)
    if not math.isfinite(f) or f <= 0:
        raise OutOfRange(f"carrier must be positive, got {carrier_hz!r}")
    if f > FR2_HIGH_HZ:
        raise OutOfRange(f"carrier {f:g} Hz is above 48 GHz")
    if f < FR3_LOW_HZ:
        return FrequencyBand(Band.FR1, f)
    if f < FR2_LOW_HZ:
        return FrequencyBand(Band.FR3, f)
    return FrequencyBand(Band.FR2, f)


# --------------------------------------------------------------------------
# Geometry types
# --------------------------------------------------------------------------
@dataclass(frozen=True)
class EdgeSegment:
    id: str
    start: np.ndarray
    end: np.ndarray
    parent_window: str

    def __post_init__(self):
        if not np.linalg.norm(self.end - self.start) > 0:
            raise GeometryError(f"edge {self.id} has zero length")

    @property
    def length(self) -> float:
        return float(np.linalg.norm(self.end - self.start))

    @property
    def direction(self) -> np.ndarray:
        return (self.end - self.start) / self.length

    @property
    def midpoint(self) -> np.ndarray:
        return 0.5 * (self.start + self.end)

    @property
    def is_vertical(self) -> bool:
        return abs(self.direction[2]) > 1 - 1e-9


@dataclass(frozen=True)
class WallPanel:
    """Planar rectangle; ``corners`` are ordered around the perimeter."""

    id: str
    corners: np.ndarray
    unit_normal: np.ndarray
    material_tag: str = "concrete"
    is_facade: bool = False

    @property
    def origin(self) -> np.ndarray:
        return self.corners[0]

    @property
    def axis_u(self) -> np.ndarray:
        return self.corners[1] - self.corners[0]

    @property
    def axis_v(self) -> np.ndarray:
        return self.corners[3] - self.corners[0]

    def local_coords(self, p: np.ndarray) -> tuple[float, float]:
        """Fractional (u, v) position of ``p`` projected onto the rectangle."""
        d = np.asarray(p, dtype=float) - self.origin
        u, v = self.axis_u, self.axis_v
        return float(d @ u / (u @ u)), float(d @ v / (v @ v))

    def contains(self, p: np.ndarray, tol: float = 1e-9) -> bool:
        u, v = self.local_coords(p)
        return -tol <= u <= 1 + tol and -tol <= v <= 1 + tol


@dataclass(frozen=True)
class WindowAperture:
    id: str
    panel_id: str
    floor_index: int
    corners: np.ndarray
    edges: tuple[EdgeSegment, ...]

    @property
    def z_extent(self) -> tuple[float, float]:
        return float(self.corners[:, 2].min()), float(self.corners[:, 2].max())


@dataclass(frozen=True)
class BuildingModel:
    x_extent: tuple[float, float]
    y_extent: tuple[float, float]
    height: float
    num_floors: int
    floor_height: float
    walls: tuple[WallPanel, ...]
    windows: tuple[WindowAperture, ...]
    # derived lookup arrays for vectorized intersection tests
    _panel_origin: np.ndarray = field(init=False, repr=False, compare=False)
    _panel_u: np.ndarray = field(init=False, repr=False, compare=False)
    _panel_v: np.ndarray = field(init=False, repr=False, compare=False)
    _panel_n: np.ndarray = field(init=False, repr=False, compare=False)
    _window_panel: np.ndarray = field(init=False, repr=False, compare=False)
    _window_lo: np.ndarray = field(init=False, repr=False, compare=False)
    _window_hi: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        index = {w.id: k for k, w in enumerate(self.walls)}
        arr = {
            "_panel_origin": [w.origin for w in self.walls],
            "_panel_u": [w.axis_u for w in self.walls],
            "_panel_v": [w.axis_v for w in self.walls],
            "_panel_n": [w.unit_normal for w in self.walls],
        }
        for name, rows in arr.items():
            object.__setattr__(self, name, _frozen(np.reshape(rows, (-1, 3))))
        lo, hi, parent = [], [], []
        for win in self.windows:
            panel = self.walls[index[win.panel_id]]
            uv = np.array([panel.local_coords(c) for c in win.corners])
            lo.append(uv.min(axis=0))
            hi.append(uv.max(axis=0))
            parent.append(index[win.panel_id])
        object.__setattr__(self, "_window_panel", np.array(parent, dtype=int))
        object.__setattr__(self, "_window_lo", _frozen(np.reshape(lo, (-1, 2))))
        object.__setattr__(self, "_window_hi", _frozen(np.reshape(hi, (-1, 2))))

    @property
    def box_min(self) -> np.ndarray:
        return np.array([self.x_extent[0], self.y_extent[0], 0.0])

    @property
    def box_max(self) -> np.ndarray:
        return np.array([self.x_extent[1], self.y_extent[1], self.height])

    @property
    def centroid(self) -> np.ndarray:
        return 0.5 * (self.box_min + self.box_max)

    def panel(self, panel_id: str) -> WallPanel:
        for w in self.walls:
            if w.id == panel_id:
                return w
        raise KeyError(panel_id)

    def window(self, window_id: str) -> WindowAperture:
        for w in self.windows:
            if w.id == window_id:
                return w
        raise KeyError(window_id)

    @property
    def edges(self) -> tuple[EdgeSegment, ...]:
        return tuple(e for w in self.windows for e in w.edges)

    def edge(self, edge_id: str) -> EdgeSegment:
        for e in self.edges:
            if e.id == edge_id:
                return e
        raise KeyError(edge_id)

    def inside(self, p: np.ndarray) -> bool:
        p = np.asarray(p, dtype=float)
        return bool(np.all(p > self.box_min) and np.all(p < self.box_max))

    def in_footprint(self, p: np.ndarray) -> bool:
        x0, x1 = self.x_extent
        y0, y1 = self.y_extent
        return x0 <= p[0] <= x1 and y0 <= p[1] <= y1


@dataclass(frozen=True)
class AnchorSpec:
    id: str
    position: np.ndarray
    position_noise_sigma: float = 0.0
    clock_offset: float = 0.0


@dataclass(frozen=True)
class SceneModel:
    building: BuildingModel
    anchors: tuple[AnchorSpec, ...]
    band: FrequencyBand
    loss_params: "LossParams"
    schema_version: int = SCHEMA_VERSION

    def anchor(self, anchor_id: str) -> AnchorSpec:
        for a in self.anchors:
            if a.id == anchor_id:
                return a
        raise KeyError(anchor_id)

    @property
    def anchor_positions(self) -> np.ndarray:
        return np.array([a.position for a in self.anchors])


# --------------------------------------------------------------------------
# Construction and validation
# --------------------------------------------------------------------------
def _rectangle(corners: Any, what: str) -> tuple[np.ndarray, np.ndarray]:
    try:
        c = np.array(corners, dtype=float)
    except (TypeError, ValueError) as exc:
        raise ParseError(f"{what}: corners are not numeric") from exc
    if c.shape != (4, 3):
        raise ParseError(f"{what}: need 4 corners of 3 coordinates")
    if not np.all(np.isfinite(c)):
        raise GeometryError(f"{what}: non-finite corner")
    u = c[1] - c[0]
    v = c[3] - c[0]
    n = np.cross(u, v)
    norm = np.linalg.norm(n)
    if norm == 0:
        raise GeometryError(f"{what}: degenerate rectangle")
    n = n / norm
    if abs(np.linalg.norm(n) - 1) > NORMAL_TOL:
        n = n / np.linalg.norm(n)
    if np.max(np.abs((c - c[0]) @ n)) > COPLANAR_TOL:
        raise GeometryError(f"{what}: corners are not coplanar")
    scale = max(np.linalg.norm(u), np.linalg.norm(v))
    if abs(u @ v) > 1e-9 * scale**2 or np.linalg.norm(c[2] - (c[1] + v)) > 1e-9 * scale:
        raise GeometryError(f"{what}: corners do not form a rectangle")
    return _frozen(c), _frozen(n)


def _require(cfg: Mapping, key: str, what: str):
    if key not in cfg:
        raise ParseError(f"{what}: missing key {key!r}")
    return cfg[key]


def _parse_band(cfg: Any) -> FrequencyBand:
    if isinstance(cfg, str):
        cfg = {"name": cfg}
    if not isinstance(cfg, Mapping):
        raise ParseError("band must be an object or band name")
    if "carrier_hz" in cfg:
        fb = classify_band(float(cfg["carrier_hz"]))
        if "name" in cfg and Band(cfg["name"]) != fb.band:
            raise ParseError(f"carrier {fb.carrier_hz:g} Hz is not in {cfg['name']}")
        return fb
    try:
        band = Band(_require(cfg, "name", "band"))
    except ValueError as exc:
        raise ParseError(f"unknown band {cfg['name']!r}") from exc
    return FrequencyBand(band, DEFAULT_CARRIER_HZ[band])


def _parse_building(cfg: Mapping) -> BuildingModel:
    fp = _require(cfg, "footprint", "building")
    try:
        x0, x1 = (float(v) for v in _require(fp, "x", "footprint"))
        y0, y1 = (float(v) for v in _require(fp, "y", "footprint"))
        height = float(_require(cfg, "height", "building"))
        num_floors = int(_require(cfg, "num_floors", "building"))
        floor_height = float(_require(cfg, "floor_height", "building"))
    except (TypeError, ValueError) as exc:
        raise ParseError(f"building: {exc}") from exc
    if not (x1 > x0 and y1 > y0 and height > 0):
        raise GeometryError("building footprint/height must have positive extent")
    if num_floors < 1 or floor_height <= 0:
        raise GeometryError("need num_floors >= 1 and floor_height > 0")
    if num_floors * floor_height > height + 1e-9:
        raise GeometryError("floors do not fit in the building height")
    center = np.array([(x0 + x1) / 2, (y0 + y1) / 2, height / 2])

    walls = []
    for w in _require(cfg, "walls", "building"):
        wid = str(_require(w, "id", "wall"))
        corners, normal = _rectangle(_require(w, "corners", f"wall {wid}"), f"wall {wid}")
        facade = bool(w.get("facade", False))
        if facade and (corners[0] - center) @ normal < 0:
            normal = _frozen(-normal)
        walls.append(WallPanel(wid, corners, normal, str(w.get("material", "concrete")), facade))
    by_id = {w.id: w for w in walls}

    windows = []
    for w in cfg.get("windows", []):
        wid = str(_require(w, "id", "window"))
        parent_id = str(_require(w, "wall", f"window {wid}"))
        if parent_id not in by_id:
            raise ParseError(f"window {wid}: unknown wall {parent_id!r}")
        parent = by_id[parent_id]
        if not parent.is_facade:
            raise GeometryError(f"window {wid}: parent {parent_id} is not a facade")
        corners, _ = _rectangle(_require(w, "corners", f"window {wid}"), f"window {wid}")
        if np.max(np.abs((corners - parent.origin) @ parent.unit_normal)) > COPLANAR_TOL:
            raise GeometryError(f"window {wid} is not in the plane of {parent_id}")
        for c in corners:
            u, v = parent.local_coords(c)
            if not (0 < u < 1 and 0 < v < 1):
                raise GeometryError(f"window {wid} is not strictly inside {parent_id}")
        floor = int(_require(w, "floor", f"window {wid}"))
        zlo, zhi = corners[:, 2].min(), corners[:, 2].max()
        if not (0 <= floor < num_floors):
            raise GeometryError(f"window {wid}: floor {floor} out of range")
        if zlo < floor * floor_height - 1e-9 or zhi > (floor + 1) * floor_height + 1e-9:
            raise GeometryError(f"window {wid}: z-extent [{zlo}, {zhi}] leaves floor {floor}")
        edges = tuple(
            EdgeSegment(f"{wid}.e{k}", _frozen(corners[k]), _frozen(corners[(k + 1) % 4]), wid)
            for k in range(4)
        )
        windows.append(WindowAperture(wid, parent_id, floor, corners, edges))

    return BuildingModel((x0, x1), (y0, y1), height, num_floors, floor_height,
                         tuple(walls), tuple(windows))


def build_scene(config: Mapping | str) -> SceneModel:
    """Parse and validate a scene description (a mapping or JSON text).

    Raises:
        ParseError: malformed config, missing keys or unresolved ids.
        GeometryError: window outside its facade or spanning floors, anchor
            inside the footprint, non-rectangular panels.
    """
    from .channel import LossParams

    if isinstance(config, (str, bytes)):
        try:
            config = json.loads(config)
        except json.JSONDecodeError as exc:
            raise ParseError(f"scene config is not valid JSON: {exc}") from exc
    if not isinstance(config, Mapping):
        raise ParseError("scene config must be a JSON object")
    version = config.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ParseError(f"unsupported or missing schema_version {version!r}")

    building = _parse_building(_require(config, "building", "scene"))
    anchors = []
    for a in _require(config, "anchors", "scene"):
        aid = str(_require(a, "id", "anchor"))
        try:
            pos = point3(_require(a, "position", f"anchor {aid}"))
            sigma = float(a.get("position_noise_sigma", 0.0))
            offset = float(a.get("clock_offset", 0.0))
        except (TypeError, ValueError) as exc:
            raise ParseError(f"anchor {aid}: {exc}") from exc
        if building.in_footprint(pos):
            raise GeometryError(f"anchor {aid} at {pos.tolist()} is not outside the footprint")
        if sigma < 0:
            raise GeometryError(f"anchor {aid}: negative position noise")
        anchors.append(AnchorSpec(aid, pos, sigma, offset))
    if not anchors:
        raise ParseError("scene needs at least one anchor")

    ids = [w.id for w in building.walls] + [w.id for w in building.windows] + [a.id for a in anchors]
    dup = {i for i in ids if ids.count(i) > 1}
    if dup:
        raise ParseError(f"duplicate ids: {sorted(dup)}")

    band = _parse_band(_require(config, "band", "scene"))
    loss = LossParams.from_dict(config.get("loss_params", {}))
    return SceneModel(building, tuple(anchors), band, loss)


def load_scene(path: str | Path) -> SceneModel:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ParseError(f"cannot read scene file {path}: {exc}") from exc
    return build_scene(text)


def scene_to_dict(scene: SceneModel) -> dict:
    b = scene.building
    return {
        "schema_version": scene.schema_version,
        "building": {
            "footprint": {"x": list(b.x_extent), "y": list(b.y_extent)},
            "height": b.height,
            "num_floors": b.num_floors,
            "floor_height": b.floor_height,
            "walls": [
                {"id": w.id, "corners": w.corners.tolist(), "material": w.material_tag,
                 "facade": w.is_facade}
                for w in b.walls
            ],
            "windows": [
                {"id": w.id, "wall": w.panel_id, "floor": w.floor_index,
                 "corners": w.corners.tolist()}
                for w in b.windows
            ],
        },
        "anchors": [
            {"id": a.id, "position": a.position.tolist(),
             "position_noise_sigma": a.position_noise_sigma, "clock_offset": a.clock_offset}
            for a in scene.anchors
        ],
        "band": {"name": scene.band.band.value, "carrier_hz": scene.band.carrier_hz},
        "loss_params": scene.loss_params.to_dict(),
    }


def dumps_scene(scene: SceneModel) -> str:
    """Canonical JSON serialization (sorted keys, fixed separators)."""
    return json.dumps(scene_to_dict(scene), sort_keys=True, separators=(",", ":"))


def with_band(scene: SceneModel, band: FrequencyBand | Band | str) -> SceneModel:
    """Copy of ``scene`` operating on another band (carrier defaults per band)."""
    if not isinstance(band, FrequencyBand):
        band = _parse_band({"name": Band(band).value})
    return SceneModel(scene.building, scene.anchors, band, scene.loss_params, scene.schema_version)


# --------------------------------------------------------------------------
# Floors and edges
# --------------------------------------------------------------------------
def floor_of(z: float, building: BuildingModel) -> int:
    f = math.floor(z / building.floor_height)
    return int(min(max(f, 0), building.num_floors - 1))


def diffracting_edges_for_floor(scene: SceneModel | BuildingModel, floor_index: int) -> list[EdgeSegment]:
    building = scene.building if isinstance(scene, SceneModel) else scene
    if not (0 <= floor_index < building.num_floors):
        raise IndexError(f"floor {floor_index} outside 0..{building.num_floors - 1}")
    edges = [e for w in building.windows if w.floor_index == floor_index for e in w.edges]
    return sorted(edges, key=lambda e: e.id)
