"""Backend selection for the per-event kernel.

The compiled extension is used when importable; set ``BANPPA_PURE_PYTHON=1``
to force the numpy fallback.
"""
import os

import numpy as np

from . import _kernels_py

BACKEND = "python"
_event_terms_impl = _kernels_py.event_terms

if os.environ.get("BANPPA_PURE_PYTHON", "") != "1":
    try:
        from . import _ckernels
    except ImportError:  # extension not built
        _ckernels = None
    else:
        BACKEND = "cython"
        _event_terms_impl = _ckernels.event_terms


def event_terms(mean, var, logw, tbl):
    if BACKEND == "cython":
        mean = np.ascontiguousarray(mean, dtype=np.float64)
        var = np.ascontiguousarray(var, dtype=np.float64)
        logw = np.ascontiguousarray(logw, dtype=np.float64)
    return _event_terms_impl(mean, var, logw, tbl)


def python_event_terms(mean, var, logw, tbl):
    return _kernels_py.event_terms(mean, var, logw, tbl)
