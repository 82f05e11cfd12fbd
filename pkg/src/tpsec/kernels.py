"""Backend selection for the hot nodal-solve kernel.

The compiled extension is preferred when importable; the numpy twin is the
fallback and can be forced with TPSEC_PURE_PYTHON=1 (useful for parity tests
and the kernel benchmark).
"""

from __future__ import annotations

import os

from . import _kernels_py

if os.environ.get("TPSEC_PURE_PYTHON"):
    _impl = _kernels_py
    BACKEND = "python"
else:
    try:
        from . import _kernels_c as _impl  # type: ignore[attr-defined]

        BACKEND = "compiled"
    except ImportError:
        _impl = _kernels_py
        BACKEND = "python"


def newton_power_states(*args, **kwargs):
    return _impl.newton_power_states(*args, **kwargs)


def backends():
    """All importable backends, keyed by name (for tests and benchmarks)."""
    found = {"python": _kernels_py}
    try:
        from . import _kernels_c  # type: ignore[attr-defined]

        found["compiled"] = _kernels_c
    except ImportError:
        pass
    return found
