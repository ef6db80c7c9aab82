"""Finite-difference cases covering every differentiable tensor-core op.

Each builder takes a seeded Generator and returns ``(x_data, f, exclude)``;
``f`` maps the leaf under test to a scalar, ``exclude`` masks kinks.
"""
import zlib

import numpy as np

from sce import tensor as T
from sce.tensor import Tensor


def _w(r, shape):
    return Tensor(r.uniform(-2, 2, size=shape))


def _u(r, shape):
    return r.uniform(-2, 2, size=shape)


def _dot(y, w):
    return T.sum(T.mul(y, w))


def _simple(shape, build):
    """Case whose input is U(-2, 2) and has no kinks."""
    def case(r):
        f = build(r)
        return _u(r, shape), f, None
    return case


IDS = np.array([[0, 2, 2, 4], [1, 0, 3, 2]])
MASK = np.array([[True, True, False, True], [False, True, True, True]])
ROWS = np.array([[1, 0, 1], [1, 1, 0]], bool)


def _relu(r):
    xv = _u(r, (5, 5))
    w = _w(r, (5, 5))
    return xv, lambda x: _dot(T.relu(x), w), np.abs(xv) <= 0.1


def _maxpool(r):
    # distinct values 0.13 apart: no step of size h can flip an argmax
    xv = r.permutation(np.arange(30) * 0.13 - 1.9).reshape(2, 3, 5)
    w = _w(r, (2, 3, 1))
    return xv, lambda x: _dot(T.global_maxpool1d(x), w), None


def _dropout(r):
    w = _w(r, (4, 6))
    seed = int(r.integers(1 << 30))
    # fresh generator per call so every evaluation draws the same mask
    return _u(r, (4, 6)), lambda x: _dot(T.dropout(x, 0.3, np.random.default_rng(seed)), w), None


def _param_side(op):
    def case(r):
        xs = Tensor(_u(r, (2, 3, 6)))
        if op == "conv_w":
            b, w = _w(r, 4), _w(r, (2, 4, 5))
            return _u(r, (4, 3, 2)), lambda W: _dot(T.conv1d(xs, W, b), w), None
        if op == "conv_b":
            W, w = _w(r, (4, 3, 2)), _w(r, (2, 4, 5))
            return _u(r, (4,)), lambda b: _dot(T.conv1d(xs, W, b), w), None
        if op == "linear_w":
            b, w = _w(r, 5), _w(r, (2, 3, 5))
            return _u(r, (6, 5)), lambda W: _dot(T.linear(xs, W, b), w), None
        if op == "linear_b":
            W, w = _w(r, (6, 5)), _w(r, (2, 3, 5))
            return _u(r, (5,)), lambda b: _dot(T.linear(xs, W, b), w), None
        if op == "layer_norm_gamma":
            b, w = _w(r, 6), _w(r, (2, 3, 6))
            return _u(r, (6,)), lambda g: _dot(T.layer_norm(xs, g, b), w), None
        if op == "layer_norm_beta":
            g, w = _w(r, 6), _w(r, (2, 3, 6))
            return _u(r, (6,)), lambda b: _dot(T.layer_norm(xs, g, b), w), None
        raise KeyError(op)
    return case


CASES = {
    "add": _simple((3, 3), lambda r: (lambda c, w: lambda x: _dot(T.add(x, c), w))(_w(r, (3, 3)), _w(r, (3, 3)))),
    "mul": _simple((3, 4), lambda r: (lambda c, w: lambda x: _dot(T.mul(x, c), w))(_w(r, (3, 4)), _w(r, (3, 4)))),
    "mul_self": _simple((3, 4), lambda r: (lambda w: lambda x: _dot(T.mul(x, x), w))(_w(r, (3, 4)))),
    "scale": _simple((2, 5), lambda r: (lambda w: lambda x: _dot(T.scale(x, -1.7), w))(_w(r, (2, 5)))),
    "sum": _simple((2, 3), lambda r: lambda x: T.scale(T.sum(T.mul(x, x)), 0.5)),
    "mean": _simple((4, 2), lambda r: (lambda w: lambda x: T.mean(T.mul(x, w)))(_w(r, (4, 2)))),
    "relu": _relu,
    "mask_rows": _simple((2, 3, 2), lambda r: (lambda w: lambda x: _dot(T.mask_rows(x, ROWS), w))(_w(r, (2, 3, 2)))),
    "dropout": _dropout,
    "reshape_permute": _simple((2, 3, 4), lambda r: (lambda w: lambda x: _dot(
        T.reshape(T.permute(x, (1, 0, 2)), (3, 8)), w))(_w(r, (3, 8)))),
    "transpose_last2": _simple((2, 3, 4), lambda r: (lambda w: lambda x: _dot(T.transpose_last2(x), w))(_w(r, (2, 4, 3)))),
    "squeeze": _simple((2, 3, 1), lambda r: (lambda w: lambda x: _dot(T.squeeze(x, 2), w))(_w(r, (2, 3)))),
    "matmul_left": _simple((3, 4), lambda r: (lambda c, w: lambda x: _dot(T.matmul(x, c), w))(_w(r, (4, 2)), _w(r, (3, 2)))),
    "matmul_right": _simple((4, 2), lambda r: (lambda c, w: lambda x: _dot(T.matmul(c, x), w))(_w(r, (3, 4)), _w(r, (3, 2)))),
    "matmul_batched": _simple((2, 3, 4), lambda r: (lambda c, w: lambda x: _dot(T.matmul(x, c), w))(
        _w(r, (2, 4, 3)), _w(r, (2, 3, 3)))),
    "linear_x": _simple((2, 3, 4), lambda r: (lambda W, b, w: lambda x: _dot(T.linear(x, W, b), w))(
        _w(r, (4, 5)), _w(r, 5), _w(r, (2, 3, 5)))),
    "linear_w": _param_side("linear_w"),
    "linear_b": _param_side("linear_b"),
    "gather_rows": _simple((5, 3), lambda r: (lambda w: lambda tab: _dot(T.gather_rows(tab, IDS), w))(_w(r, (2, 4, 3)))),
    "pick": _simple((3, 2), lambda r: (lambda w: lambda x: _dot(T.pick(x, [1, 0, 1]), w))(_w(r, 3))),
    "softmax": _simple((3, 5), lambda r: (lambda w: lambda x: _dot(T.softmax(x, axis=1), w))(_w(r, (3, 5)))),
    "softmax_masked": _simple((2, 4), lambda r: (lambda w: lambda x: _dot(T.softmax(x, axis=1, mask=MASK), w))(_w(r, (2, 4)))),
    "log_softmax": _simple((3, 4), lambda r: (lambda w: lambda x: _dot(T.log_softmax(x, 1), w))(_w(r, (3, 4)))),
    "layer_norm_x": _simple((3, 6), lambda r: (lambda g, b, w: lambda x: _dot(T.layer_norm(x, g, b), w))(
        _w(r, 6), _w(r, 6), _w(r, (3, 6)))),
    "layer_norm_gamma": _param_side("layer_norm_gamma"),
    "layer_norm_beta": _param_side("layer_norm_beta"),
    "conv1d_x": _simple((2, 3, 6), lambda r: (lambda W, b, w: lambda x: _dot(T.conv1d(x, W, b), w))(
        _w(r, (4, 3, 2)), _w(r, 4), _w(r, (2, 4, 5)))),
    "conv1d_w": _param_side("conv_w"),
    "conv1d_b": _param_side("conv_b"),
    "global_maxpool1d": _maxpool,
}


def run_case(name, h=1e-5, tol=1e-4):
    r = np.random.default_rng(zlib.crc32(name.encode()))
    xv, f, exclude = CASES[name](r)
    return T.finite_diff_check(f, Tensor(xv, requires_grad=True), h=h, tol=tol, exclude=exclude)
