"""Finite-difference gradient suite: every differentiable op plus the full model."""

from __future__ import annotations

import time

import numpy as np

from . import tensor as T
from .geometry import synthetic_ring_montage
from .tensor import grad_check_many

OP_TOL = 1e-4
MODEL_TOL = 1e-3


def _projected(fn, shape, seed=99):
    """Scalarize a tensor-valued op with a fixed random projection."""
    R = np.random.default_rng(seed).uniform(-1, 1, shape)
    return lambda *args: T.tsum(T.mul(fn(*args), R))


def op_cases(seed=1234):
    """{name: (scalar fn, input arrays)} covering each differentiable op."""
    rng = np.random.default_rng(seed)

    def U(*shape):
        return rng.uniform(-1, 1, shape)

    cases = {}

    def case(name, fn, *inputs):
        with T.no_grad():
            shape = fn(*[T.as_tensor(v) for v in inputs]).shape
        cases[name] = (_projected(fn, shape) if shape != () else fn, inputs)

    case("add_broadcast", lambda a, b: a + b, U(3, 4), U(4))
    case("sub", lambda a, b: a - b, U(3, 4), U(3, 1))
    case("mul", lambda a, b: a * b, U(2, 3), U(2, 3))
    case("scale", lambda a: T.scale(a, -2.5), U(5))
    case("reciprocal", lambda a: T.reciprocal(a + 3.0), U(4))
    case("square", T.square, U(2, 2))
    case("exp", T.exp, U(3))
    case("log", lambda a: T.log(a + 2.0), U(3))
    case("gelu", T.gelu, U(3, 3) * 3)
    case("reshape", lambda a: T.reshape(a, (6, 2)), U(3, 4))
    case("transpose", lambda a: T.transpose(a, (2, 0, 1)), U(2, 3, 4))
    case("getitem_slice", lambda a: a[1:, ::2], U(3, 4))
    case("getitem_fancy", lambda a: a[np.array([0, 2, 2])], U(3, 4))
    case("take_rows", lambda a: T.take_rows(a, [1, 1, 0]), U(3, 2))
    case("concat", lambda a, b: T.concat([a, b], axis=1), U(2, 3), U(2, 2))
    case("sum_axis", lambda a: T.tsum(a, axis=1), U(3, 4))
    case("mean", lambda a: T.mean(a, axis=(0, 2)), U(2, 3, 4))
    case("matmul", T.matmul, U(3, 4), U(4, 2))
    case("matmul_batched", T.matmul, U(2, 3, 4), U(2, 4, 5))
    case("linear", T.linear, U(2, 3, 4), U(5, 4), U(5))
    case("softmax", lambda a: T.softmax(a, axis=-1), U(3, 5))
    case("log_softmax", lambda a: T.log_softmax(a, axis=0), U(4, 3))
    case("layer_norm", lambda x, g, b: T.layer_norm(x, g, b, 1e-5), U(3, 6), U(6), U(6))
    case("depthwise_conv2d", T.depthwise_conv2d, U(2, 3, 5, 4), U(3, 5, 3))
    case("conv1d", lambda x, w, b: T.conv1d(x, w, b, stride=2, pad=3), U(2, 2, 20), U(3, 2, 7), U(3))
    case("mse", T.mse, U(4, 3), U(4, 3))
    return cases


def check_op(name, cases=None, h=1e-5):
    cases = op_cases() if cases is None else cases
    fn, inputs = cases[name]
    tensors = [T.parameter(np.array(v, copy=True), f"in{i}") for i, v in enumerate(inputs)]
    return max(grad_check_many(lambda: fn(*tensors), tensors, h=h).values())


def run_op_suite(h=1e-5):
    """{op name: max relative error}."""
    cases = op_cases()
    return {name: check_op(name, cases, h) for name in sorted(cases)}


def full_model_check(config, n_channels=4, n_patches=3, batch=2, coords=12, seed=0, h=1e-4):
    """Gradient check of the masked reconstruction loss through every parameter.

    Each parameter tensor is probed at ``coords`` random coordinates (all of
    them when it is smaller). Returns {parameter name: max relative error}.
    The larger default step keeps round-off below tolerance on key biases,
    whose true gradient is exactly zero (softmax ignores a shared shift).
    """
    from .model import CrissCrossModel

    rng = np.random.default_rng(seed)
    montage = synthetic_ring_montage(n_channels)
    model = CrissCrossModel(config, montage, n_patches, rng=rng)
    # perturb zero-initialised biases and norms so their gradients are generic
    for name, t in model.state().items():
        if name.endswith(".bias") or name.endswith(".gain"):
            t.data = t.data + rng.normal(0, 0.1, t.shape)
    x = rng.normal(size=(batch, n_channels, n_patches, config.patch_len))
    x /= np.abs(x).max(axis=-1, keepdims=True)
    mask = np.zeros((batch, n_channels, n_patches), dtype=bool)
    mask.reshape(batch, -1)[:, ::2] = True
    state = model.state()
    tensors = [state[n] for n in state if not n.startswith("head.")]
    errs = grad_check_many(lambda: model.pretrain_loss(x, mask=mask), tensors, h=h,
                           coords_per_tensor=coords, rng=np.random.default_rng(seed + 1))
    return errs


def report(config, coords=12, seed=0):
    """Run both suites; returns (lines, all_passed, seconds)."""
    t0 = time.perf_counter()
    lines, ok = [], True
    for name, err in run_op_suite().items():
        passed = err < OP_TOL
        ok &= passed
        lines.append(f"{'ok  ' if passed else 'FAIL'} {name:<20s} max_rel_err={err:.3e} tol={OP_TOL:.0e}")
    errs = full_model_check(config, coords=coords, seed=seed)
    worst = max(errs, key=errs.get)
    passed = errs[worst] < MODEL_TOL
    ok &= passed
    lines.append(f"{'ok  ' if passed else 'FAIL'} {'full_model':<20s} max_rel_err={errs[worst]:.3e} "
                 f"tol={MODEL_TOL:.0e} worst={worst} tensors={len(errs)}")
    return lines, ok, time.perf_counter() - t0
