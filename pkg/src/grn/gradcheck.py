"""Central-difference gradient checking.

Analytic gradients from the tape are compared with ``(f(x+h) - f(x-h)) / 2h``
at randomly sampled coordinates, using the error measure
``|a - n| / max(1e-8, |a| + |n|)``.

Relu and maxpool make networks piecewise smooth, and a probe that crosses a
kink measures a different piece than the analytic gradient.  Two policies
handle that:

* ``"redraw"`` rejects a coordinate whose perturbed forward changes any relu
  mask or maxpool argmax and draws another one (used for single ops);
* ``"freeze"`` evaluates the perturbed forwards with the activation pattern of
  the unperturbed point forced back in, i.e. on the same smooth piece (used
  for deep blocks, where almost every probe moves some unit across zero).
"""

from __future__ import annotations

from typing import Callable, Mapping, Optional

import numpy as np

from . import ops
from .tensor import Tensor, backward, no_grad

STEP = 1e-3


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(1e-8, abs(analytic) + abs(numeric))


def _same_pattern(a: list, b: list) -> bool:
    return len(a) == len(b) and all(np.array_equal(p, q) for p, q in zip(a, b))


def _clear_leaf_grads(root: Tensor) -> None:
    seen, stack = set(), [root]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        if t.is_leaf:
            t.grad = None
        stack.extend(t._parents)


def _analytic(loss_fn: Callable[[], Tensor], params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    loss = loss_fn()
    _clear_leaf_grads(loss)
    backward(loss)
    out = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for name, p in params.items()}
    for p in params.values():
        p.grad = None
    return out


def check_parameters(
    loss_fn: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    samples: int = 10,
    rng: Optional[np.random.Generator] = None,
    step: float = STEP,
    kinks: str = "redraw",
    max_redraws: int = 20,
) -> dict[str, float]:
    """Max relative error per named tensor over ``samples`` probed coordinates.

    ``loss_fn`` must rebuild a scalar loss from the current ``params`` values
    and be deterministic.
    """
    if kinks not in ("redraw", "freeze"):
        raise ValueError(f"unknown kink policy {kinks!r}")
    rng = rng or np.random.default_rng(0)
    analytic = _analytic(loss_fn, params)
    with no_grad(), ops.record_kinks() as base_log:
        loss_fn()
    base = list(base_log)

    def probe(flat: np.ndarray, i: int, delta: float) -> tuple[float, list]:
        old = flat[i]
        flat[i] = old + delta
        try:
            with no_grad(), ops.record_kinks() as log:
                if kinks == "freeze":
                    with ops.replay_kinks(base):
                        val = float(loss_fn().data)
                else:
                    val = float(loss_fn().data)
        finally:
            flat[i] = old
        return val, list(log)

    report: dict[str, float] = {}
    for name, p in params.items():
        flat = p.data.reshape(-1)
        if not np.shares_memory(flat, p.data):
            raise ValueError(f"{name}: parameter data must be contiguous for in-place probing")
        grad_flat = analytic[name].reshape(-1)
        worst = 0.0
        for _ in range(min(samples, flat.size)):
            for _attempt in range(max_redraws):
                i = int(rng.integers(flat.size))
                f_plus, log_plus = probe(flat, i, step)
                f_minus, log_minus = probe(flat, i, -step)
                if kinks == "freeze" or (_same_pattern(log_plus, base) and _same_pattern(log_minus, base)):
                    break
            else:
                continue
            numeric = (f_plus - f_minus) / (2 * step)
            worst = max(worst, relative_error(float(grad_flat[i]), numeric))
        report[name] = worst
    return report


def check_parameters_batched(
    output_fn: Callable[[int], Tensor],
    loss_fn: Callable[[Tensor], Tensor],
    params: Mapping[str, Tensor],
    samples: int = 10,
    rng: Optional[np.random.Generator] = None,
    step: float = STEP,
) -> dict[str, float]:
    """Frozen-pattern check that evaluates all probes of a tensor in one batch.

    ``output_fn(copies)`` must run an eval-mode (row-independent) forward on
    ``copies`` stacked replicas of the base batch; ``loss_fn`` maps the output
    of one replica to a scalar.  Each replica sees its own perturbed copy of
    the probed tensor, so a deep network costs one forward per tensor rather
    than two per coordinate.
    """
    rng = rng or np.random.default_rng(0)
    analytic = _analytic(lambda: loss_fn(output_fn(1)), params)
    with no_grad(), ops.record_kinks() as base_log:
        base_out = output_fn(1)
    base = list(base_log)
    n = base_out.shape[0]

    report: dict[str, float] = {}
    for name, p in params.items():
        count = min(samples, p.data.size)
        idx = rng.choice(p.data.size, size=count, replace=False)
        values = np.repeat(p.data.reshape(1, -1), 2 * count, axis=0)
        values[np.arange(0, 2 * count, 2), idx] += step
        values[np.arange(1, 2 * count, 2), idx] -= step
        stacked = np.repeat(values, n, axis=0).reshape((2 * count * n,) + p.shape)
        with no_grad(), ops.probe_parameters({p: stacked}), ops.replay_kinks(base):
            out = output_fn(2 * count).data
        losses = np.array([float(loss_fn(Tensor(out[r * n:(r + 1) * n])).data) for r in range(2 * count)])
        numeric = (losses[0::2] - losses[1::2]) / (2 * step)
        grad = analytic[name].reshape(-1)[idx]
        report[name] = max(relative_error(float(a), float(b)) for a, b in zip(grad, numeric))
    return report


def _scalarize(out: Tensor, proj: Optional[np.ndarray]) -> Tensor:
    if out.data.size == 1:
        return out.reshape(())
    return (out * Tensor(proj)).sum()


def grad_check(
    fn: Callable[[Tensor], Tensor],
    point: np.ndarray,
    samples: int = 10,
    rng: Optional[np.random.Generator] = None,
    step: float = STEP,
    kinks: str = "redraw",
) -> float:
    """Max relative error of d fn / d point at ``samples`` random coordinates.

    Non-scalar outputs are reduced with a fixed random projection so that every
    output element contributes to the checked gradient.
    """
    rng = rng or np.random.default_rng(0)
    x = Tensor(np.array(point, dtype=np.float64, copy=True), requires_grad=True, name="point")
    with no_grad():
        probe_out = fn(Tensor(x.data.copy()))
    proj = rng.standard_normal(probe_out.shape) if probe_out.data.size != 1 else None
    report = check_parameters(lambda: _scalarize(fn(x), proj), {"point": x}, samples, rng, step, kinks)
    return report["point"]
