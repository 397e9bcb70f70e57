"""Pick the compiled kernels when built, else the pure-Python fallback.

Set ``MMCOMPRESS_PURE_PYTHON=1`` to force the fallback.
"""

import os

from . import _fallback

if os.environ.get("MMCOMPRESS_PURE_PYTHON") == "1":
    kernels = _fallback
    COMPILED = False
else:
    try:
        from . import _kernels as kernels  # type: ignore[no-redef]

        COMPILED = True
    except ImportError:
        kernels = _fallback
        COMPILED = False

__all__ = ["kernels", "COMPILED"]
