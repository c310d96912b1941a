import numpy as np

from segfield import autodiff as ad

STEP = 1e-5


def numeric_grad(fn, arrays: dict, step: float = STEP) -> dict:
    """Central differences of scalar ``fn(arrays)`` w.r.t. every entry of every array."""
    out = {}
    for name, arr in arrays.items():
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = float(fn(arrays))
            flat[i] = orig - step
            lo = float(fn(arrays))
            flat[i] = orig
            gf[i] = (hi - lo) / (2 * step)
        out[name] = g
    return out


def analytic_grad(build, arrays: dict) -> dict:
    params = {k: ad.Tensor(v, requires_grad=True) for k, v in arrays.items()}
    with ad.Tape() as tape:
        loss = build(params)
    return tape.gradient(loss, params)


def rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12))


def check_grad(build, arrays: dict, tol: float = 1e-4) -> float:
    """Max relative error between tape gradients and central differences (f64)."""
    arrays = {k: np.array(v, dtype=np.float64) for k, v in arrays.items()}
    num = numeric_grad(lambda a: build({k: ad.Tensor(v) for k, v in a.items()}).data, arrays)
    ana = analytic_grad(build, arrays)
    worst = max(rel_err(ana[k], num[k]) for k in arrays)
    assert worst < tol, f"gradient mismatch: relative error {worst:.3e}"
    return worst
