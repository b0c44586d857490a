import numpy as np

from .tensor import NonFiniteError, Tape, Tensor, high_precision


def grad_check(fn, point, eps=1e-4, max_coords=None, rng=None):
    """Max relative error between tape gradients and central differences.

    ``fn`` maps a name -> tensor dict to a scalar tensor; ``point`` is a
    name -> array dict. Everything runs in float64. With ``max_coords`` only
    that many randomly chosen coordinates per array are probed.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    with high_precision():
        base = {k: np.array(v, dtype=np.float64) for k, v in point.items()}
        with Tape() as tape:
            P = tape.watch(base)
            loss = fn(P)
        analytic = tape.backward(loss)

        def evaluate(values):
            val = float(fn({k: Tensor(v) for k, v in values.items()}).data)
            if not np.isfinite(val):
                raise NonFiniteError("non-finite function value during probing")
            return val

        worst = 0.0
        for name, arr in base.items():
            flat = arr.reshape(-1)
            coords = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = rng.choice(flat.size, size=max_coords, replace=False)
            for i in coords:
                orig = flat[i]
                flat[i] = orig + eps
                up = evaluate(base)
                flat[i] = orig - eps
                down = evaluate(base)
                flat[i] = orig
                numeric = (up - down) / (2 * eps)
                a = float(analytic[name].reshape(-1)[i])
                worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst
