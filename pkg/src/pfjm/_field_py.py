"""Pure numpy fallback for the augmented Poisson field kernel."""

import numpy as np

# bounds the (points x charges x dims) temporaries to roughly 32 MB
_CHUNK_ELEMENTS = 4_000_000


def field_batch(X, r, Y, logw, D):
    """Scaled field components at P query points.

    Parameters are float64 arrays: ``X`` (P, N) data-space positions, ``r``
    (P,) augmented radii, ``Y`` (M, N) charges, ``logw`` (M,) log charge weights.

    Returns ``(ex, er, log_scale)`` with the true field equal to
    ``exp(log_scale) * (ex, er)``, i.e. each row is rescaled by its largest
    summand so that nothing over- or underflows for large ``N + D``.
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    Y = np.ascontiguousarray(Y, dtype=np.float64)
    r = np.ascontiguousarray(r, dtype=np.float64)
    logw = np.ascontiguousarray(logw, dtype=np.float64)
    P, N = X.shape
    M = Y.shape[0]
    half_power = 0.5 * (N + D)

    ex = np.empty((P, N))
    er = np.empty(P)
    scale = np.empty(P)
    step = max(1, _CHUNK_ELEMENTS // max(M * N, 1))
    for lo in range(0, P, step):
        hi = min(P, lo + step)
        diff = X[lo:hi, None, :] - Y[None, :, :]
        d2 = np.einsum("pmn,pmn->pm", diff, diff) + (r[lo:hi] ** 2)[:, None]
        logmag = logw[None, :] - half_power * np.log(d2)
        m = logmag.max(axis=1)
        s = np.exp(logmag - m[:, None])
        ex[lo:hi] = np.einsum("pm,pmn->pn", s, diff)
        er[lo:hi] = r[lo:hi] * s.sum(axis=1)
        scale[lo:hi] = m
    return ex, er, scale
