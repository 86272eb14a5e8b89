"""Hot-loop kernels with a compiled core and a numpy fallback.

The active backend is chosen at import time: the Cython extension
``fusevo.kernels._core`` when it built, else the pure-numpy reference.
``FUSEVO_BACKEND`` overrides: ``reference`` forces the fallback, ``compiled``
demands the extension (ImportError if missing), ``auto`` (default) prefers
the extension.  ``BACKEND`` records what was picked.
"""

from __future__ import annotations

import os

from . import _reference

_choice = os.environ.get("FUSEVO_BACKEND", "auto").lower()
if _choice not in ("auto", "compiled", "reference"):
    raise ValueError(f"FUSEVO_BACKEND={_choice!r}: expected auto|compiled|reference")

if _choice == "reference":
    _impl = _reference
    BACKEND = "reference"
else:
    try:
        from . import _core as _impl  # type: ignore[no-redef]

        BACKEND = "compiled"
    except ImportError:
        if _choice == "compiled":
            raise
        _impl = _reference
        BACKEND = "reference"

sample_patches = _impl.sample_patches
warp_points = _impl.warp_points
photometric_blocks = _impl.photometric_blocks
fast_corners = _impl.fast_corners
epipolar_ssd = _impl.epipolar_ssd

FAST_RING = _reference.FAST_RING

__all__ = [
    "BACKEND",
    "FAST_RING",
    "sample_patches",
    "warp_points",
    "photometric_blocks",
    "fast_corners",
    "epipolar_ssd",
]


def backends() -> dict[str, object]:
    """All importable backends by name (for benchmarks and parity tests)."""
    out: dict[str, object] = {"reference": _reference}
    try:
        from . import _core

        out["compiled"] = _core
    except ImportError:
        pass
    return out
