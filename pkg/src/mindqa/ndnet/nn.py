"""Layer helpers over the primitive ops; parameters live in flat name -> array dicts."""

import numpy as np

from . import ops


def uniform_init(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def init_linear(rng, params, name, n_in, n_out):
    params[f"{name}.w"] = uniform_init(rng, (n_in, n_out), n_in)
    params[f"{name}.b"] = uniform_init(rng, (n_out,), n_in)


def linear(P, name, x):
    return ops.add(ops.matmul(x, P[f"{name}.w"]), P[f"{name}.b"])


def init_lstm(rng, params, name, n_in, n_hidden):
    fan_in = n_in + n_hidden
    params[f"{name}.w"] = uniform_init(rng, (fan_in, 4 * n_hidden), fan_in)
    b = uniform_init(rng, (4 * n_hidden,), fan_in)
    b[n_hidden:2 * n_hidden] = 1.0  # forget gate
    params[f"{name}.b"] = b


def lstm_cell(x, h, c, w, b):
    """One LSTM step; gate order (input, forget, candidate, output).

    x: (B, n_in), h, c: (B, H), w: (n_in + H, 4H), b: (4H,).
    """
    n_hidden = h.shape[-1]
    if w.shape[0] != x.shape[-1] + n_hidden or w.shape[1] != 4 * n_hidden:
        raise ops.ShapeError(f"lstm_cell: shapes {x.shape} and {w.shape} do not conform")
    z = ops.add(ops.matmul(ops.concat([x, h], axis=-1), w), b)
    H = n_hidden
    i = ops.sigmoid(z[:, :H])
    f = ops.sigmoid(z[:, H:2 * H])
    g = ops.tanh(z[:, 2 * H:3 * H])
    o = ops.sigmoid(z[:, 3 * H:])
    c_new = ops.add(ops.mul(f, c), ops.mul(i, g))
    h_new = ops.mul(o, ops.tanh(c_new))
    return h_new, c_new


def lstm(P, name, x, h, c):
    return lstm_cell(x, h, c, P[f"{name}.w"], P[f"{name}.b"])


def one_hot(indices, n, dtype=np.float32):
    indices = np.asarray(indices)
    out = np.zeros(indices.shape + (n,), dtype=dtype)
    np.put_along_axis(out, indices[..., None], 1.0, axis=-1)
    return out


def mask_blend(mask, new, old):
    """Rows with mask 1 take ``new``, others keep ``old`` (mask: (B,) constant)."""
    return ops.where(np.asarray(mask, dtype=bool)[:, None], new, old)
