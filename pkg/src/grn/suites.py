"""Gradient-check suites for every differentiable primitive and composite block.

Each case returns the max relative error of its analytic gradients against
central differences.  Ops are looked up on the ``ops`` module at call time so
a patched op is what gets checked.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import ops, tensor
from .blocks import AttentionModule, ResidualUnit, SoftMask
from .gradcheck import check_parameters, check_parameters_batched, grad_check
from .model import GRN, VariantConfig, build_model, fuse
from .tensor import Tensor, no_grad

TOLERANCE = 1e-4


@dataclass(frozen=True)
class Case:
    name: str
    group: str
    run: Callable[[np.random.Generator], float]


def _leaf(rng, *shape, scale=1.0, name=None):
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True, name=name)


def _inputs_and_params(fn, tensors: dict, rng, kinks="redraw", samples=10) -> float:
    proj = {}

    def loss():
        out = fn()
        if "p" not in proj:
            # mean-scaled projection keeps rounding noise on structurally zero
            # gradients (e.g. biases feeding a train-mode batch norm) below the floor
            proj["p"] = Tensor(np.random.default_rng(12345).standard_normal(out.shape) / out.data.size)
        return (out * proj["p"]).sum() if out.data.size > 1 else out.reshape(())

    return max(check_parameters(loss, tensors, samples, rng, kinks=kinks).values())


def _binary(op, b_shape=(3, 1)):
    def run(rng):
        a, b = _leaf(rng, 2, 3, 4, name="a"), _leaf(rng, *b_shape, name="b")
        return _inputs_and_params(lambda: op(a, b), {"a": a, "b": b}, rng)
    return run


def _conv(rng):
    x, w, b = _leaf(rng, 2, 3, 7, 7), _leaf(rng, 4, 3, 3, 3, scale=0.3), _leaf(rng, 4)
    e1 = _inputs_and_params(lambda: ops.conv2d(x, w, b, stride=2, pad=1), {"x": x, "w": w, "b": b}, rng)
    w1 = _leaf(rng, 5, 3, 1, 1)
    e2 = _inputs_and_params(lambda: ops.conv2d(x, w1), {"x": x, "w": w1}, rng)
    return max(e1, e2)


def _maxpool(rng):
    # distinct values keep argmaxes well separated from ties
    x = Tensor(rng.permutation(2 * 3 * 9 * 9).reshape(2, 3, 9, 9) * 0.01, requires_grad=True)
    return _inputs_and_params(lambda: ops.maxpool2d(x, 3, 2, 1), {"x": x}, rng)


def _batchnorm(mode):
    def run(rng):
        x = _leaf(rng, 4, 3, 5, 5)
        gamma, beta = _leaf(rng, 3), _leaf(rng, 3)
        state = ops.BatchNormState(3)
        state.running_mean = rng.standard_normal(3)
        state.running_var = rng.uniform(0.5, 2.0, 3)

        def fn():
            saved = (state.running_mean.copy(), state.running_var.copy())
            out = ops.batchnorm2d(x, gamma, beta, state, mode)
            state.running_mean, state.running_var = saved
            return out

        return _inputs_and_params(fn, {"x": x, "gamma": gamma, "beta": beta}, rng)
    return run


def _linear(rng):
    x, w, b = _leaf(rng, 3, 6), _leaf(rng, 4, 6), _leaf(rng, 4)
    return _inputs_and_params(lambda: ops.linear(x, w, b), {"x": x, "w": w, "b": b}, rng)


def _dropout(rng):
    x = _leaf(rng, 3, 4, 5)
    return _inputs_and_params(lambda: ops.dropout(x, 0.5, "train", np.random.default_rng(7)), {"x": x}, rng)


def _cross_entropy(rng):
    z = _leaf(rng, 4, 6)
    return _inputs_and_params(lambda: ops.softmax_cross_entropy(z, [0, 5, 2, 2]), {"z": z}, rng)


def _unary(fn, *shape, scale=1.0):
    def run(rng):
        return grad_check(fn, rng.standard_normal(shape) * scale, 10, rng)
    return run


def _block_params(module, x, call, rng, samples=6) -> float:
    params = {"input": x, **dict(module.named_parameters())}
    return _inputs_and_params(lambda: call(x), params, rng, kinks="freeze", samples=samples)


def _residual(rng):
    unit = ResidualUnit(3, 6, rng, stride=2)
    x = _leaf(rng, 2, 3, 8, 8)
    e1 = _block_params(unit, x, lambda t: unit(t, "train"), rng)
    same = ResidualUnit(4, 4, rng)
    y = _leaf(rng, 2, 4, 6, 6)
    return max(e1, _block_params(same, y, lambda t: same(t, "train"), rng))


def _calibrate(module, shape, rng, passes=30) -> None:
    """Settle batch-norm running statistics on inputs like the checked one."""
    with no_grad():
        for _ in range(passes):
            module(Tensor(rng.standard_normal(shape)), "train")


def _soft_mask(rng):
    # eval mode: with batch statistics a tiny batch makes the loss so curved
    # that a 1e-3 step carries truncation error of the order of the tolerance
    mask = SoftMask(3, 16, rng)
    x = _leaf(rng, 2, 3, 16, 16)
    _calibrate(mask, x.shape, rng)
    return _block_params(mask, x, lambda t: mask(t, "eval"), rng)


def _attention(rng):
    module = AttentionModule(3, 16, rng)
    x = _leaf(rng, 2, 3, 16, 16)
    _calibrate(module, x.shape, rng)
    return _block_params(module, x, lambda t: module(t, "eval"), rng, samples=4)


def _fuse(rng):
    g, l = _leaf(rng, 2, 3, 4, 4, name="g"), _leaf(rng, 2, 3, 4, 4, name="l")
    return _inputs_and_params(lambda: fuse(g, l), {"g": g, "l": l}, rng)


def _calibrated_grn(rng) -> tuple[GRN, np.ndarray, np.ndarray]:
    """GRN at 32x32 whose batch-norm running statistics match its inputs."""
    model = build_model(VariantConfig(num_classes=5, input_size=32), rng)
    page = rng.uniform(0, 1, (1, 1, 32, 32))
    word = rng.uniform(0, 1, (1, 1, 32, 32))
    calib_p = rng.uniform(0, 1, (8, 1, 32, 32))
    calib_w = rng.uniform(0, 1, (8, 1, 32, 32))
    with no_grad():
        for _ in range(40):
            model.forward(Tensor(calib_p), Tensor(calib_w), "train", np.random.default_rng(0))
    return model, page, word


def _full_grn(rng):
    model, page, word = _calibrated_grn(rng)

    def output(copies):
        return model.forward(Tensor(np.concatenate([page] * copies)), Tensor(np.concatenate([word] * copies)), "eval")

    report = check_parameters_batched(output, lambda o: ops.softmax_cross_entropy(o, [2] * o.shape[0]),
                                      dict(model.named_parameters()), 10, rng)
    return max(report.values())


def cases() -> list[Case]:
    return [
        Case("add", "tensor-core", _binary(lambda a, b: tensor.add(a, b))),
        Case("mul", "tensor-core", _binary(lambda a, b: tensor.mul(a, b))),
        Case("gated", "tensor-core", _binary(lambda a, b: tensor.gated(b, a), (2, 3, 4))),
        Case("sum", "tensor-core", _unary(lambda x: tensor.tensor_sum(x), 3, 4)),
        Case("reshape", "tensor-core", _unary(lambda x: tensor.reshape(x, (4, 3)), 3, 4)),
        Case("conv2d", "tensor-core", _conv),
        Case("maxpool2d", "tensor-core", _maxpool),
        Case("avgpool2d", "tensor-core", _unary(lambda x: ops.avgpool2d(x, 4), 2, 3, 4, 4)),
        Case("bilinear_upsample", "tensor-core", _unary(lambda x: ops.bilinear_upsample(x, 7, 9), 2, 2, 3, 4)),
        Case("relu", "tensor-core", _unary(lambda x: ops.relu(x), 3, 20)),
        Case("sigmoid", "tensor-core", _unary(lambda x: ops.sigmoid(x), 3, 20, scale=3.0)),
        Case("batchnorm2d/train", "tensor-core", _batchnorm("train")),
        Case("batchnorm2d/eval", "tensor-core", _batchnorm("eval")),
        Case("linear", "tensor-core", _linear),
        Case("dropout", "tensor-core", _dropout),
        Case("flatten", "tensor-core", _unary(lambda x: ops.flatten(x), 2, 3, 2, 2)),
        Case("softmax_cross_entropy", "tensor-core", _cross_entropy),
        Case("residual_unit", "nn-blocks", _residual),
        Case("soft_mask", "nn-blocks", _soft_mask),
        Case("attention_module", "nn-blocks", _attention),
        Case("fuse", "nn-blocks", _fuse),
        Case("grn_32", "nn-blocks", _full_grn),
    ]


def run_suite(seed: int = 0, only=None, report: Callable[[str, float], None] | None = None) -> dict[str, float]:
    """Run every case (or those named in ``only``) and return name -> max error."""
    out = {}
    for i, case in enumerate(cases()):
        if only is not None and case.name not in only:
            continue
        err = case.run(np.random.default_rng([seed, i]))
        out[case.name] = err
        if report is not None:
            report(case.name, err)
    return out
