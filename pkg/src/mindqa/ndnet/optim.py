import numpy as np

from .tensor import ShapeError


def global_norm(grads):
    return float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))


def clip_global_norm(grads, max_norm=5.0):
    """Scale all gradients by max_norm / g when their joint L2 norm g exceeds max_norm."""
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    if not grads:
        return dict(grads)
    g = global_norm(grads)
    if g <= max_norm:
        return dict(grads)
    factor = max_norm / g
    return {k: (v * factor).astype(v.dtype) for k, v in grads.items()}


class AdamState:
    """Bias-corrected Adam moments for a named parameter set."""

    def __init__(self, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step = 0
        self.m = {}
        self.v = {}

    def state_arrays(self):
        out = {}
        for k in self.m:
            out[f"adam.m.{k}"] = self.m[k]
            out[f"adam.v.{k}"] = self.v[k]
        return out


def adam_step(params, grads, state):
    """Apply one Adam update to ``params`` in place and return them."""
    for name, g in grads.items():
        if name not in params:
            raise ShapeError(f"adam_step: gradient for unknown parameter {name!r}")
        if params[name].shape != g.shape:
            raise ShapeError(f"adam_step: shapes {params[name].shape} and {g.shape} do not conform for {name!r}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p -= update.astype(p.dtype)
    return params
