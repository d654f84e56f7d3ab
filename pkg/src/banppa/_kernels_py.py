"""Numpy reference implementation of the per-event kernel."""
import numpy as np

from .gtable import EULER, VAR_FLOOR, GTable


def event_terms(mean, var, logw, tbl: GTable):
    """Per-event mixture terms.

    Parameters
    ----------
    mean, var : (N, K) arrays
        Predictive moments of each latent function at each event.
    logw : (N, K) array
        Log allocation weight of each component for the event's sequence.

    Returns
    -------
    lse : (N,) ``log sum_k exp(logw + E ln f^2)``
    resp : (N, K) normalised responsibilities
    gmean, gvar : (N, K) ``resp * dE[ln f^2]/dmean`` and ``.../dvar``
    elog : (N, K) ``E ln f^2``
    """
    var = np.maximum(var, VAR_FLOOR)
    z = mean * mean / (2 * var)
    g, dg = tbl.eval_z(z)
    elog = -g - EULER + np.log(0.5 * var)
    a = logw + elog
    amax = a.max(axis=1, keepdims=True)
    ex = np.exp(a - amax)
    s = ex.sum(axis=1, keepdims=True)
    resp = ex / s
    lse = (amax + np.log(s))[:, 0]
    gmean = resp * (-dg * mean / var)
    gvar = resp * (dg * z / var + 1.0 / var)
    return lse, resp, gmean, gvar, elog
