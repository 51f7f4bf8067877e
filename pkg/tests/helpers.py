"""Small scene builders and brute-force geometry oracles shared by the tests."""

import numpy as np

from o2ips.scene import build_scene


def box_config(walls, windows=(), anchors=None, footprint=((0.0, 20.0), (0.0, 30.0)), height=12.0,
               num_floors=4, floor_height=3.0):
    return {
        "schema_version": 1,
        "building": {"footprint": {"x": list(footprint[0]), "y": list(footprint[1])}, "height": height,
                     "num_floors": num_floors, "floor_height": floor_height,
                     "walls": list(walls), "windows": list(windows)},
        "anchors": anchors or [{"id": "A0", "position": [-5.0, 10.0, 5.0]}],
        "band": {"name": "FR3"},
        "loss_params": {},
    }


def wall_x(wid, x, facade=True, y=(0.0, 30.0), z=(0.0, 12.0)):
    return {"id": wid, "facade": facade, "corners": [[x, y[0], z[0]], [x, y[1], z[0]],
                                                     [x, y[1], z[1]], [x, y[0], z[1]]]}


def slab(wid, z, x=(0.0, 20.0), y=(0.0, 30.0)):
    return {"id": wid, "facade": False, "corners": [[x[0], y[0], z], [x[1], y[0], z],
                                                    [x[1], y[1], z], [x[0], y[1], z]]}


def make_scene(*args, **kw):
    return build_scene(box_config(*args, **kw))


def brute_crossings(building, a, b):
    """Per-panel loop: solve the plane crossing, then test rectangle and window membership."""
    count = 0
    for p in building.walls:
        n = p.unit_normal
        d = b - a
        den = d @ n
        if abs(den) < 1e-14:
            continue
        t = ((p.origin - a) @ n) / den
        if not (1e-9 < t < 1 - 1e-9):
            continue
        x = a + t * d
        u, v = p.local_coords(x)
        if not (0 <= u <= 1 and 0 <= v <= 1):
            continue
        in_window = False
        for w in building.windows:
            if w.panel_id != p.id:
                continue
            uv = np.array([p.local_coords(c) for c in w.corners])
            if uv[:, 0].min() <= u <= uv[:, 0].max() and uv[:, 1].min() <= v <= uv[:, 1].max():
                in_window = True
        count += not in_window
    return count


def sampled_interior(building, a, b, samples=4000):
    """Dense sampling oracle: does segment a-b visit the open building box."""
    t = np.linspace(0, 1, samples)[1:-1, None]
    pts = a + t * (b - a)
    lo, hi = building.box_min, building.box_max
    inside = np.all((pts > lo + 1e-6) & (pts < hi - 1e-6), axis=1)
    return bool(inside.any())


def ball_intersection_distance(x, centers, radii):
    """Distance from x to the intersection of closed balls, via a conic solver."""
    import cvxpy as cp
    y = cp.Variable(3)
    prob = cp.Problem(cp.Minimize(cp.norm(y - x)), [cp.norm(y - c) <= r for c, r in zip(centers, radii)])
    prob.solve(solver=cp.CLARABEL)
    if prob.status != cp.OPTIMAL:
        raise RuntimeError(f"projection oracle failed: {prob.status}")
    return float(prob.value)
