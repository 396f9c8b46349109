"""Hot numeric kernels with a compiled core and a numpy fallback.

The Cython extension ``_ckernels`` is used when it has been built; otherwise
(or when the environment variable ``LIDARLOC_PURE_PYTHON`` is set to a
non-empty value other than ``0``) the numpy versions in ``_pykernels`` are
used. ``BACKEND`` names the active implementation.
"""

import importlib
import os

from . import _pykernels

_force_python = os.environ.get("LIDARLOC_PURE_PYTHON", "") not in ("", "0")


def _load_compiled():
    try:
        return importlib.import_module(__name__ + "._ckernels")
    except ImportError:
        return None


_compiled = None if _force_python else _load_compiled()

if _compiled is not None:
    line_smoothness = _compiled.line_smoothness
    connected_components = _compiled.connected_components
    voxel_mean = _compiled.voxel_mean
    BACKEND = "cython"
else:
    line_smoothness = _pykernels.line_smoothness
    connected_components = _pykernels.connected_components
    voxel_mean = _pykernels.voxel_mean
    BACKEND = "python"


def available_backends():
    """Map backend name to module for every importable implementation."""
    out = {"python": _pykernels}
    compiled = _load_compiled()
    if compiled is not None:
        out["cython"] = compiled
    return out


__all__ = [
    "BACKEND",
    "available_backends",
    "connected_components",
    "line_smoothness",
    "voxel_mean",
]
