"""Outdoor-to-indoor ToA positioning: geometric multipath, estimators, bounds and sidelink sessions."""

from .errors import IpsError
from .scene import BuildingModel, SceneModel, build_scene, load_scene

__version__ = "0.1.0"

__all__ = ["IpsError", "BuildingModel", "SceneModel", "build_scene", "load_scene", "__version__"]
