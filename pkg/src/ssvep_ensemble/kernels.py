"""Backend selection for the hot kernels.

The compiled extension is used when it imports; otherwise the numpy twin.
Set ``SSVEP_ENSEMBLE_BACKEND=python`` to force the fallback.
"""
import os

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("SSVEP_ENSEMBLE_BACKEND", "").lower() not in ("python", "py", "numpy"):
    try:
        from . import _ckernels as _impl  # noqa: F811
        BACKEND = "cython"
    except ImportError:
        pass

conv_out_len = _kernels_py.conv_out_len
conv1d_forward = _impl.conv1d_forward
conv1d_backward = _impl.conv1d_backward
candidate_scores = _impl.candidate_scores


def available_backends():
    """Mapping of backend name to kernel module, for tests and benchmarks."""
    out = {"python": _kernels_py}
    try:
        from . import _ckernels
        out["cython"] = _ckernels
    except ImportError:
        pass
    return out
