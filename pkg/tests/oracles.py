"""Independent reference implementations used as test oracles.

Everything here is deliberately naive (scalar loops, ``math`` functions)
and shares no code with the package beyond plain data containers.
"""

import math

import numpy as np

from gridseek import ndgrad as nd


def dot(a, b):
    return math.fsum(float(x) * float(y) for x, y in zip(a, b))


def scalar_anchor_term(z_i, anchors, tau):
    return math.fsum(math.exp(dot(z_i, a) / tau) for a in anchors)


def scalar_ant_xent(z_i, z_j, batch, i_index, anchors, tau):
    """-log(exp(s_ij/t) / (sum_{k != i} exp(s_ik/t) + AN)) term by term."""
    denom = math.fsum(math.exp(dot(z_i, b) / tau) for k, b in enumerate(batch) if k != i_index)
    denom += scalar_anchor_term(z_i, anchors, tau)
    return -math.log(math.exp(dot(z_i, z_j) / tau) / denom)


def scalar_batch_losses(zi_rows, zj_rows, anchor_lists, tau):
    """Per-sample losses where the batch holds every z_i and z_j row."""
    batch = list(zi_rows) + list(zj_rows)
    return [scalar_ant_xent(zi_rows[b], zj_rows[b], batch, b, anchor_lists[b], tau)
            for b in range(len(zi_rows))]


def unit_rows(rng, n, d):
    v = rng.normal(size=(n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def brute_force_ranking(entries, z, k):
    """Scan every stored cell with scalar dot products.

    ``entries``: list of (image_id, [(level, row, col, vector), ...]).
    """
    scored = []
    for image_id, cells in entries:
        best, best_cell = -math.inf, None
        for level, row, col, vec in cells:
            s = float(np.dot(np.asarray(vec, dtype=np.float64), np.asarray(z, dtype=np.float64)))
            if s > best:
                best, best_cell = s, (level, row, col)
        scored.append((image_id, best, best_cell))
    scored.sort(key=lambda t: (-t[1], t[0]))
    return scored[:k]


def numeric_grad(f, x: np.ndarray, eps=1e-6):
    """Central differences of scalar ``f`` w.r.t. every entry of ``x`` (in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        hi = f()
        x[i] = old - eps
        lo = f()
        x[i] = old
        g[i] = (hi - lo) / (2 * eps)
    return g


def rel_error(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-8))


def gradcheck(build, inputs, eps=1e-6):
    """Max relative error between tape gradients and central differences.

    ``build(*tensors)`` returns a scalar Tensor; ``inputs`` are float64 arrays.
    """
    tensors = [nd.Tensor(x.copy(), requires_grad=True, dtype=np.float64) for x in inputs]
    with nd.Tape() as tape:
        loss = build(*tensors)
    tape.backward(loss)
    worst = 0.0
    for t in tensors:
        def f():
            with nd.no_grad():
                return float(build(*tensors).data)
        num = numeric_grad(f, t.data, eps)
        worst = max(worst, rel_error(t.grad, num))
    return worst


# ----------------------------------------------------------- shape walk

def conv_params(cin, cout, k):
    return cout * cin * k * k + cout


def default_parameter_count(channels=(16, 32, 64), repr_dim=128, emb=32, fpn=32, head=True):
    """Parameter count derived from the layer table by hand."""
    c1, c2, c3 = channels
    backbone = (conv_params(3, c1, 3) + 2 * conv_params(c1, c1, 3)
                + conv_params(c1, c2, 3) + conv_params(c2, c2, 3)
                + conv_params(c2, c3, 3) + conv_params(c3, c3, 3))
    crop_encoder = (backbone + conv_params(c3, repr_dim, 1)
                    + (repr_dim * repr_dim + repr_dim) + (repr_dim * emb + emb))
    pyramid = (backbone + conv_params(c1, fpn, 1) + conv_params(c2, fpn, 1) + conv_params(c3, fpn, 1)
               + 3 * conv_params(fpn, fpn, 3) + conv_params(c3, fpn, 3) + conv_params(fpn, fpn, 3))
    pyramid += (conv_params(fpn, fpn, 1) + conv_params(fpn, emb, 1)) if head else conv_params(fpn, emb, 1)
    return crop_encoder + pyramid
