"""Backend selection for the hot loops.

The compiled extension is used when it imports; setting the environment
variable CONTAGION_HJB_BACKEND=python forces the numpy fallback.
"""

from __future__ import annotations

import os

from . import _fallback

BACKEND = "python"
_impl = _fallback

if os.environ.get("CONTAGION_HJB_BACKEND", "").lower() != "python":
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        _compiled = None
    if _compiled is not None:
        _impl = _compiled
        BACKEND = "cython"

NAMES = ("hjb_step", "hjb_backward", "tildeP_batch", "physical_batch", "truth_batch", "filter_path")


def get(name: str, backend: str | None = None):
    """Look up a kernel by name, optionally forcing a backend."""
    if backend is None:
        return getattr(_impl, name)
    if backend == "python":
        return getattr(_fallback, name)
    if backend == "cython":
        from . import _kernels

        return getattr(_kernels, name)
    raise ValueError(f"unknown backend {backend!r}")


hjb_step = _impl.hjb_step
hjb_backward = _impl.hjb_backward
tildeP_batch = _impl.tildeP_batch
physical_batch = _impl.physical_batch
truth_batch = _impl.truth_batch
filter_path = _impl.filter_path
