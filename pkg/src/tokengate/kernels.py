"""Kernel backend selection.

The compiled extension is used when importable; set ``TOKENGATE_PURE=1`` to
force the pure-Python fallback.
"""

import os

from . import _kernels_py

BACKEND = "python"
token_logprobs = _kernels_py.token_logprobs
rows_logprobs = _kernels_py.rows_logprobs

if os.environ.get("TOKENGATE_PURE", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _ext
    except ImportError:
        pass
    else:
        BACKEND = "compiled"
        token_logprobs = _ext.token_logprobs
        rows_logprobs = _ext.rows_logprobs


def backend(name: str):
    """Return the (token_logprobs, rows_logprobs) pair for ``name``."""
    if name == "python":
        return _kernels_py.token_logprobs, _kernels_py.rows_logprobs
    if name == "compiled":
        from . import _kernels as ext

        return ext.token_logprobs, ext.rows_logprobs
    raise ValueError(f"unknown kernel backend {name!r}")
