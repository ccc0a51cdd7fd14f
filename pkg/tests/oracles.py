"""Independent numerical oracles shared by the test suite.

These never call into the autodiff engine's backward path: central finite
differences re-derive every gradient from forward evaluations only, and the
convolution oracle is a direct quadruple loop.
"""

import numpy as np

from diffaug import Tensor

EPS = 1e-3
REL_TOL = 1e-3


def rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - n| / max(1, |n|), the float32-friendly relative error."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return float(np.max(np.abs(a - n) / np.maximum(1.0, np.abs(n))))


def numeric_grad(f, x: np.ndarray, eps: float = EPS, coords=None) -> np.ndarray:
    """Central finite differences of scalar-valued f at x.

    coords: optional flat indices to probe (None = all); unprobed entries are
    returned as NaN so callers must compare only probed coordinates.
    """
    x = np.asarray(x, dtype=np.float32)
    flat = x.reshape(-1)
    if coords is None:
        coords = range(flat.size)
        out = np.zeros(flat.size, dtype=np.float64)
    else:
        out = np.full(flat.size, np.nan)
    for i in coords:
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(x))
        flat[i] = orig - eps
        fm = float(f(x))
        flat[i] = orig
        out[i] = (fp - fm) / (2.0 * eps)
    return out.reshape(x.shape)


def check_grad_fn(build_scalar, arrays, eps=EPS, tol=REL_TOL, rng=None, max_coords=None):
    """Compare analytic grads of build_scalar(*tensors) against finite differences.

    build_scalar receives one Tensor per input array and must return a scalar
    Tensor. Returns the worst relative error over all (sampled) coordinates.
    """
    from diffaug import grad

    arrays = [np.asarray(a, dtype=np.float32) for a in arrays]
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = build_scalar(*tensors)
    grads = grad(out, tensors)

    worst = 0.0
    for k, a in enumerate(arrays):
        analytic = np.zeros_like(a) if grads[k] is None else grads[k].data

        def f(xk, k=k):
            ins = [arrays[j] if j != k else xk for j in range(len(arrays))]
            ts = [Tensor(v) for v in ins]
            return build_scalar(*ts).item()

        coords = None
        if max_coords is not None and a.size > max_coords:
            r = rng or np.random.default_rng(0)
            coords = r.choice(a.size, size=max_coords, replace=False)
        numeric = numeric_grad(f, a, eps=eps, coords=coords)
        mask = ~np.isnan(numeric)
        err = rel_err(analytic.reshape(-1)[mask.reshape(-1)], numeric.reshape(-1)[mask.reshape(-1)])
        worst = max(worst, err)
    assert worst < tol, f"gradient mismatch: rel err {worst:.3e} >= {tol}"
    return worst


def conv2d_loops(x: np.ndarray, w: np.ndarray, stride: int = 1, padding: int = 1) -> np.ndarray:
    """Direct nested-loop cross-correlation (the conv oracle)."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    b, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((b, cout, ho, wo))
    for n in range(b):
        for co in range(cout):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[n, :, i * stride : i * stride + kh, j * stride : j * stride + kw]
                    out[n, co, i, j] = np.sum(patch * w[co])
    return out
