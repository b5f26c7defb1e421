"""Hot numerical kernels with backend selection at import time.

The compiled Cython extension is preferred; set ``FLOWHEAT_PURE_PYTHON=1`` to
force the numpy fallback. ``BACKEND`` records which one is active.
"""

import os

from . import fallback as _fallback

BACKEND = "python"
tridiag_solve = _fallback.tridiag_solve
tridiag_matvec = _fallback.tridiag_matvec
cn_sweep = _fallback.cn_sweep

if not os.environ.get("FLOWHEAT_PURE_PYTHON"):
    try:
        from . import _speedups as _compiled

        tridiag_solve = _compiled.tridiag_solve
        tridiag_matvec = _compiled.tridiag_matvec
        cn_sweep = _compiled.cn_sweep
        BACKEND = "compiled"
    except ImportError:
        pass

__all__ = ["BACKEND", "tridiag_solve", "tridiag_matvec", "cn_sweep"]
