"""One gradcheck case per differentiable tensor op.

Each factory takes an rng and returns (fn, list_of_input_arrays) where
fn(*tensors) produces a scalar Tensor. The registry is shared between the
unit tests and the acceptance gradient sweep so "every op" means one list.
"""

import numpy as np

import tprd3.tensor as T
from tprd3.rng import make_rng


def _r(rng, *shape):
    return rng.standard_normal(shape)


def case_matmul(rng):
    return lambda a, b: T.tmean(T.matmul(a, b)), [_r(rng, 3, 4), _r(rng, 4, 5)]


def case_matmul_t(rng):
    return lambda a, b: T.tmean(T.matmul_t(a, b)), [_r(rng, 3, 4), _r(rng, 5, 4)]


def case_add(rng):
    return lambda a, b: T.tmean(T.add(a, b)), [_r(rng, 3, 4), _r(rng, 3, 4)]


def case_sub(rng):
    return lambda a, b: T.tmean(T.sub(a, b)), [_r(rng, 3, 4), _r(rng, 3, 4)]


def case_mul(rng):
    return lambda a, b: T.tmean(T.mul(a, b)), [_r(rng, 3, 4), _r(rng, 3, 4)]


def case_scale(rng):
    return lambda a: T.tmean(T.scale(a, -1.7)), [_r(rng, 3, 4)]


def case_add_bias(rng):
    return lambda x, b: T.tmean(T.add_bias(x, b)), [_r(rng, 3, 4), _r(rng, 4)]


def case_affine(rng):
    return lambda x, w, b: T.tmean(T.affine(x, w, b)), [_r(rng, 3, 4), _r(rng, 4, 5), _r(rng, 5)]


def case_rowscale(rng):
    return lambda x, s: T.tmean(T.rowscale(x, s)), [_r(rng, 3, 4), _r(rng, 3, 1)]


def case_sigmoid(rng):
    return lambda x: T.tmean(T.sigmoid(x)), [_r(rng, 3, 4)]


def case_tanh(rng):
    return lambda x: T.tmean(T.tanh(x)), [_r(rng, 3, 4)]


def case_softmax(rng):
    w = rng.standard_normal((3, 5))
    return lambda x: T.tmean(T.mul(T.softmax(x), T.constant(w))), [_r(rng, 3, 5)]


def case_layer_norm(rng):
    return (lambda x, g, b: T.tmean(T.layer_norm(x, g, b)),
            [_r(rng, 3, 6), 1.0 + 0.1 * _r(rng, 6), _r(rng, 6)])


def case_layer_norm_blocked(rng):
    # gain/bias shaped (m, n) against a (B, m, n) input
    return (lambda x, g, b: T.tmean(T.layer_norm(x, g, b)),
            [_r(rng, 4, 3, 6), 1.0 + 0.1 * _r(rng, 3, 6), _r(rng, 3, 6)])


def case_transpose(rng):
    return (lambda x, w: T.tmean(T.matmul(T.transpose(x), w)),
            [_r(rng, 5, 3), _r(rng, 5, 4)])


def case_seq_affine(rng):
    # two applies so the deferred weight gradient covers a stacked pair
    def fn(x1, x2, w, b, extra):
        sa = T.SeqAffine(w, b)
        return T.tmean(T.add(sa.apply(x1, add=extra), sa.apply(x2)))

    return fn, [_r(rng, 4, 3), _r(rng, 4, 3), _r(rng, 3, 5), _r(rng, 5), _r(rng, 4, 5)]


def case_dropout(rng):
    seed = int(rng.integers(1 << 30))

    def fn(x):
        return T.tmean(T.dropout(x, 0.4, "train", make_rng(seed, 9)))

    return fn, [_r(rng, 4, 6)]


def case_take_along(rng):
    idx = np.stack([rng.permutation(6)[:3] for _ in range(4)])
    return lambda x: T.tmean(T.take_along(x, idx, unique=True)), [_r(rng, 4, 6)]


def case_take_along_dup(rng):
    idx = rng.integers(0, 6, size=(4, 5))
    return lambda x: T.tmean(T.take_along(x, idx, unique=False)), [_r(rng, 4, 6)]


def case_scatter_cols(rng):
    idx = np.stack([rng.permutation(7)[:3] for _ in range(4)])
    m = rng.standard_normal((4, 7))
    return lambda w: T.tmean(T.mul(T.scatter_cols(w, idx, 7), T.constant(m))), [_r(rng, 4, 3)]


def case_take_rows(rng):
    idx = rng.integers(0, 5, size=8)  # repeats expected
    return lambda t: T.tmean(T.take_rows(t, idx)), [_r(rng, 5, 4)]


def case_concat_rows(rng):
    return (lambda a, b: T.tmean(T.concat([a, b], axis=0)),
            [_r(rng, 2, 4), _r(rng, 3, 4)])


def case_concat_cols(rng):
    return (lambda a, b: T.tmean(T.concat([a, b], axis=1)),
            [_r(rng, 3, 2), _r(rng, 3, 4)])


def case_slice_cols(rng):
    return lambda x: T.tmean(T.slice_cols(x, 1, 4)), [_r(rng, 3, 6)]


def case_slice_rows(rng):
    return lambda x: T.tmean(T.slice_rows(x, 1, 3)), [_r(rng, 5, 4)]


def case_row_l2_normalize(rng):
    m = rng.standard_normal((4, 5))
    return (lambda x: T.tmean(T.mul(T.row_l2_normalize(x), T.constant(m))),
            [_r(rng, 4, 5) + np.sign(_r(rng, 4, 5)) * 0.5])


def case_tsum(rng):
    return lambda x: T.tsum(x), [_r(rng, 3, 4)]


def case_tmean(rng):
    return lambda x: T.tmean(x), [_r(rng, 3, 4)]


def case_cross_entropy_rows(rng):
    tgt = rng.integers(0, 5, size=4)
    return lambda l: T.tmean(T.cross_entropy_rows(l, tgt)), [_r(rng, 4, 5)]


def case_cross_entropy(rng):
    tgt = int(rng.integers(0, 6))
    return lambda l: T.cross_entropy(l, tgt), [_r(rng, 6)]


def case_outer3(rng):
    m = rng.standard_normal((2, 3, 4, 5))
    return (lambda v, a, b: T.tmean(T.mul(T.outer3(v, a, b), T.constant(m))),
            [_r(rng, 2, 3), _r(rng, 2, 4), _r(rng, 2, 5)])


def case_outer3_single(rng):
    m = rng.standard_normal((3, 4, 5))
    return (lambda v, a, b: T.tmean(T.mul(T.outer3(v, a, b), T.constant(m))),
            [_r(rng, 3), _r(rng, 4), _r(rng, 5)])


def case_contract3(rng):
    return (lambda f, a, b: T.tmean(T.contract3(f, a, b)),
            [_r(rng, 2, 3, 4, 5), _r(rng, 2, 4), _r(rng, 2, 5)])


def case_contract3_single(rng):
    return (lambda f, a, b: T.tmean(T.contract3(f, a, b)),
            [_r(rng, 3, 4, 5), _r(rng, 4), _r(rng, 5)])


def case_add_outer3(rng):
    return (lambda f, v, a, b: T.tmean(T.add_outer3(f, v, a, b)),
            [_r(rng, 2, 3, 4, 5), _r(rng, 2, 3), _r(rng, 2, 4), _r(rng, 2, 5)])


CASES = {
    name[5:]: fn for name, fn in sorted(globals().items()) if name.startswith("case_")
}
