"""Corpus-scan kernels with an import-time backend choice.

The compiled Cython kernel is used when it was built; otherwise a pure-numpy
fallback with the same contract takes over. Both backends stay importable
(`native`, `fallback`) so tests and the benchmark can compare them directly.
"""

from . import _numpy as fallback

try:
    from . import _scan as native
except ImportError:
    native = None

_active = native if native is not None else fallback

HAVE_NATIVE = native is not None


def backend_name() -> str:
    return "native" if HAVE_NATIVE else "numpy"


prefix_dot_products = _active.prefix_dot_products
prefix_sq_norms = _active.prefix_sq_norms
