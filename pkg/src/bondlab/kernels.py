"""Backend selector for the ensemble step kernel.

Prefers the compiled extension when importable; falls back to the numpy
implementation otherwise. Set BONDLAB_KERNEL=python or =compiled to force a
backend (forcing `compiled` when the extension is missing raises, so CI can
detect a broken build instead of silently benchmarking the fallback).
"""

from __future__ import annotations

import os

_requested = os.environ.get("BONDLAB_KERNEL", "").strip().lower()

if _requested == "python":
    from . import _kernels_py as _impl
elif _requested == "compiled":
    from . import _kernels as _impl  # type: ignore[no-redef]
elif _requested == "":
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]
    except ImportError:
        from . import _kernels_py as _impl
else:
    raise ImportError(
        f"BONDLAB_KERNEL must be 'python' or 'compiled', got {_requested!r}"
    )

step_exp_shift = _impl.step_exp_shift


def backend_name() -> str:
    """Active kernel backend: 'compiled' or 'python'."""
    return _impl.BACKEND
