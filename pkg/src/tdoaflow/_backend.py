"""Kernel backend selection.

``TDOAFLOW_BACKEND=numpy`` forces the pure-numpy kernels; the default is
numba when it imports cleanly.
"""

import os

from . import _kernels_numpy

BACKEND_ENV = "TDOAFLOW_BACKEND"


def _select(name):
    name = (name or "numba").strip().lower()
    if name == "numpy":
        return _kernels_numpy, "numpy"
    if name != "numba":
        raise ValueError(f"{BACKEND_ENV} must be 'numba' or 'numpy', got {name!r}")
    try:
        from . import _kernels_numba
    except ImportError:  # pragma: no cover
        return _kernels_numpy, "numpy"
    return _kernels_numba, "numba"


kernels, name = _select(os.environ.get(BACKEND_ENV))


def get(backend=None):
    """Kernel module for ``backend`` ('numba' or 'numpy'); default is the env choice."""
    if backend is None:
        return kernels
    return _select(backend)[0]
