"""Fisher information and position error bounds for ToA ranges."""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

from .errors import DegenerateGeometry, SingularFim
from .raypath import MechanismKind, Mpc

FIM_CONDITION_LIMIT = 1e12
CLAMP_MARGIN_M = 1e-3


def _unit(v: np.ndarray) -> np.ndarray:
    norm = float(np.linalg.norm(v))
    if norm == 0.0:
        raise DegenerateGeometry("node coincides with the last interaction vertex")
    return v / norm


def path_gradient(mpc: Mpc, node=None) -> np.ndarray:
    """Gradient of the path length with respect to the node position.

    The path is stationary in its interaction points, so only the last leg
    moves: the gradient is the unit vector from the last fixed vertex (anchor,
    virtual anchor, or diffraction point / clamped endpoint) to the node.
    """
    n = mpc.node if node is None else np.asarray(node, dtype=float)
    kind = mpc.mechanism.kind
    if kind in (MechanismKind.LINE_OF_SIGHT, MechanismKind.TRANSMISSION):
        return _unit(n - mpc.anchor)
    if kind is MechanismKind.REFLECTION:
        src = mpc.virtual_anchor if mpc.virtual_anchor is not None else mpc.vertices[-2]
        return _unit(n - src)
    if kind is MechanismKind.DIFFRACTION:
        return _unit(n - mpc.vertices[1])
    raise ValueError(f"no geometric gradient for {mpc.mechanism.tag}")


def fim_from_gradients(gradients: np.ndarray, sigmas) -> np.ndarray:
    g = np.asarray(gradients, dtype=float).reshape(-1, 3)
    w = 1.0 / np.broadcast_to(np.asarray(sigmas, dtype=float), (len(g),)) ** 2
    F = (g * w[:, None]).T @ g
    return 0.5 * (F + F.T)


def fim(mpcs_with_sigma: Iterable[tuple[Mpc, float]], node=None) -> np.ndarray:
    """FIM = sum_i g_i g_i^T / sigma_i^2 over (mpc, sigma) pairs."""
    pairs = list(mpcs_with_sigma)
    if not pairs:
        raise ValueError("need at least one measurement")
    sig = np.array([s for _, s in pairs], dtype=float)
    if np.any(sig <= 0):
        raise ValueError("sigmas must be > 0")
    g = np.array([path_gradient(m, node) for m, _ in pairs])
    return fim_from_gradients(g, sig)


def condition_number(F: np.ndarray) -> float:
    ev = np.linalg.eigvalsh(F)
    if ev[0] <= 0:
        return float("inf")
    return float(ev[-1] / ev[0])


def peb(F: np.ndarray) -> float:
    """sqrt(trace(F^-1)); SingularFim when fewer than 3 directions are observed."""
    F = np.asarray(F, dtype=float)
    if not condition_number(F) < FIM_CONDITION_LIMIT:
        raise SingularFim("position is unobservable from these measurements")
    return float(np.sqrt(np.trace(np.linalg.inv(F))))


def near_clamp(mpcs: Sequence[Mpc], margin: float = CLAMP_MARGIN_M) -> bool:
    """True if any diffraction point sits within ``margin`` of an edge endpoint transition."""
    for m in mpcs:
        d = m.diffraction
        if d is None:
            continue
        if abs(d.s_unclamped) < margin or abs(d.s_unclamped - d.edge_length) < margin:
            return True
    return False


BOUNDS_CSV_COLUMNS = ["node_index", "peb_1diff_m", "peb_multi_m", "fim_condition_number", "clamp_flag"]
