"""Backend selection for the simulation hot kernels.

The compiled extension ``lanebench._ckernels`` is used when it imports;
otherwise, or when ``LANEBENCH_PURE_PYTHON=1`` is set, the numpy fallback in
``lanebench._pykernels`` is used. Both expose identical functions.
"""
import importlib
import os

from lanebench import _pykernels


def load_backend(name: str):
    """Return the kernel module called ``name`` (``"cython"`` or ``"python"``)."""
    if name == "python":
        return _pykernels
    if name == "cython":
        return importlib.import_module("lanebench._ckernels")
    raise ValueError(f"unknown kernel backend {name!r}")


def available_backends():
    names = ["python"]
    try:
        load_backend("cython")
    except ImportError:
        pass
    else:
        names.insert(0, "cython")
    return names


if os.environ.get("LANEBENCH_PURE_PYTHON", "") not in ("", "0"):
    _impl = _pykernels
else:
    try:
        _impl = load_backend("cython")
    except ImportError:
        _impl = _pykernels

BACKEND = _impl.NAME

idm_accel = _impl.idm_accel
control_leaders = _impl.control_leaders
idm_controls = _impl.idm_controls
integrate = _impl.integrate
collision_pairs = _impl.collision_pairs
rasterize = _impl.rasterize
