"""Central-difference validation of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np

from . import autograd as ag
from . import objectives
from .autograd import ComputeGraph, Tensor


@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    passed: bool
    per_input: dict[str, float] = field(default_factory=dict)
    worst: tuple[str, int] | None = None


def _scalar(outputs: Mapping[str, Tensor]) -> Tensor:
    if len(outputs) != 1:
        raise ValueError("gradient check needs a graph with exactly one output")
    (out,) = outputs.values()
    if out.size != 1:
        raise ValueError(f"graph output must be scalar, got shape {out.shape}")
    return out


def finite_diff_check(
    graph: ComputeGraph,
    inputs: Mapping[str, Tensor],
    epsilon: float = 1e-4,
    tolerance: float = 1e-3,
    abs_floor: float = 1e-6,
    fault: Callable[[dict[str, np.ndarray]], None] | None = None,
) -> GradCheckReport:
    """Compare backward against ``(f(x+eps) - f(x-eps)) / 2eps`` elementwise.

    Every input with ``requires_grad`` is checked. The error per element is
    ``|a - n| / max(|a|, |n|, abs_floor)``. ``fault`` may rewrite the analytic
    gradients before comparison (used to prove the checker can fail).
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    checked = {k: t for k, t in inputs.items() if t.requires_grad}
    for t in checked.values():
        t.grad = None
    loss = _scalar(graph.forward(inputs))
    graph.backward(loss, checked.values())
    analytic = {k: t.grad.copy() for k, t in checked.items()}
    if fault is not None:
        fault(analytic)

    per_input: dict[str, float] = {}
    worst_err, worst = 0.0, None
    with ag.no_grad():
        for key, t in checked.items():
            flat = t.data.reshape(-1)
            numeric = np.empty(flat.size)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + epsilon
                f_plus = _scalar(graph.fn(inputs)).item()
                flat[i] = orig - epsilon
                f_minus = _scalar(graph.fn(inputs)).item()
                flat[i] = orig
                numeric[i] = (f_plus - f_minus) / (2 * epsilon)
            a = analytic[key].reshape(-1)
            denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), abs_floor)
            err = np.abs(a - numeric) / denom
            per_input[key] = float(err.max()) if err.size else 0.0
            if err.size and err.max() > worst_err:
                worst_err, worst = float(err.max()), (key, int(err.argmax()))
    for t in checked.values():
        t.grad = None
    return GradCheckReport(worst_err, tolerance, worst_err <= tolerance, per_input, worst)


def _away_from_zero(rng: np.random.Generator, shape, margin: float = 0.05) -> np.ndarray:
    x = rng.normal(size=shape)
    return x + np.where(x >= 0, margin, -margin)


def _case(fn, **inputs) -> tuple[ComputeGraph, dict[str, Tensor]]:
    tensors = {k: Tensor(v, requires_grad=True) for k, v in inputs.items()}
    return ComputeGraph(lambda inp: {"loss": fn(inp)}), tensors


def _weighted(out: Tensor, rng) -> Tensor:
    """Scalar probe ``sum(out * w)`` with a fixed random ``w``."""
    w = Tensor(rng.normal(size=out.shape))
    return ag.sum(ag.mul(out, w))


def primitive_cases(seed: int) -> dict[str, tuple[ComputeGraph, dict[str, Tensor]]]:
    """One randomized scalar-valued graph per primitive and per loss."""
    rng = np.random.default_rng(seed)
    probe = np.random.default_rng(seed + 10_000)
    cases = {}

    def add_case(name, fn, **inputs):
        weights_seed = int(probe.integers(2**32))

        def scalar(inp):
            return _weighted(fn(inp), np.random.default_rng(weights_seed))

        cases[name] = _case(scalar, **inputs)

    a, b = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    add_case("add", lambda i: ag.add(i["a"], i["b"]), a=a, b=rng.normal(size=(4,)))
    add_case("sub", lambda i: ag.sub(i["a"], i["b"]), a=a, b=b)
    add_case("mul", lambda i: ag.mul(i["a"], i["b"]), a=a, b=b)
    add_case("div", lambda i: ag.div(i["a"], i["b"]), a=a, b=np.abs(b) + 0.5)
    add_case("relu", lambda i: ag.relu(i["x"]), x=_away_from_zero(rng, (3, 5)))
    add_case("sigmoid", lambda i: ag.sigmoid(i["x"]), x=rng.normal(size=(3, 5)) * 3)
    add_case("log", lambda i: ag.log(i["x"]), x=rng.uniform(0.2, 2.0, size=(4, 3)))
    add_case("softmax", lambda i: ag.softmax(i["x"], axis=1), x=rng.normal(size=(2, 3, 2, 2)))
    add_case("l2_normalize", lambda i: ag.l2_normalize(i["x"]), x=rng.normal(size=(3, 6)))
    add_case("sum", lambda i: ag.sum(i["x"], axis=(1, 2)), x=rng.normal(size=(2, 3, 4)))
    add_case("mean", lambda i: ag.mean(i["x"], axis=0), x=rng.normal(size=(4, 3)))
    add_case("global_avg_pool", lambda i: ag.global_avg_pool(i["x"]), x=rng.normal(size=(2, 3, 4, 4)))
    add_case("linear", lambda i: ag.linear(i["x"], i["w"], i["b"]),
             x=rng.normal(size=(3, 4)), w=rng.normal(size=(5, 4)), b=rng.normal(size=5))
    add_case("conv2d", lambda i: ag.conv2d(i["x"], i["w"], i["b"], stride=1, padding=1),
             x=rng.normal(size=(2, 2, 5, 5)), w=rng.normal(size=(3, 2, 3, 3)), b=rng.normal(size=3))
    add_case("conv2d_stride2", lambda i: ag.conv2d(i["x"], i["w"], i["b"], stride=2, padding=1),
             x=rng.normal(size=(2, 2, 6, 6)), w=rng.normal(size=(3, 2, 3, 3)), b=rng.normal(size=3))
    add_case("conv_transpose2d", lambda i: ag.conv_transpose2d(i["x"], i["w"], i["b"], stride=2),
             x=rng.normal(size=(2, 3, 3, 3)), w=rng.normal(size=(3, 2, 2, 2)), b=rng.normal(size=2))
    add_case("conv_transpose2d_overlap", lambda i: ag.conv_transpose2d(i["x"], i["w"], None, stride=2, padding=1),
             x=rng.normal(size=(1, 2, 3, 3)), w=rng.normal(size=(2, 2, 3, 3)))
    add_case("concat", lambda i: ag.concat([i["a"], i["b"]], axis=1),
             a=rng.normal(size=(2, 2, 3)), b=rng.normal(size=(2, 3, 3)))
    add_case("slice", lambda i: ag.slice_axis(i["x"], 1, 3, axis=1), x=rng.normal(size=(2, 4, 3)))
    add_case("reshape", lambda i: ag.reshape(i["x"], (6, 2)), x=rng.normal(size=(3, 4)))

    # losses are already scalar
    def loss_case(name, fn, **inputs):
        cases[name] = _case(fn, **inputs)

    k, n, side = 3, 2, 4
    mask = rng.integers(0, k, size=(n, side, side))
    logits = rng.normal(size=(n, k, side, side))
    loss_case("dice_loss", lambda i: objectives.dice_loss(ag.softmax(i["z"], axis=1), mask), z=logits)
    loss_case("ce_loss", lambda i: objectives.ce_loss(ag.softmax(i["z"], axis=1), mask), z=logits.copy())
    loss_case("supervised_loss", lambda i: objectives.supervised_loss(ag.softmax(i["z"], axis=1), mask),
              z=logits.copy())
    target = rng.normal(size=(3, 5))
    loss_case("lfe_loss", lambda i: objectives.lfe_loss(i["o"], target), o=rng.normal(size=(3, 5)))
    tv, tvp = rng.normal(size=(3, 5)), rng.normal(size=(3, 5))
    loss_case("lfe_total_loss",
              lambda i: objectives.lfe_total_loss(i["o"], tv, i["op"], tvp),
              o=rng.normal(size=(3, 5)), op=rng.normal(size=(3, 5)))
    return cases


def gradient_suite(
    seeds: Iterable[int] = range(20),
    epsilon: float = 1e-4,
    tolerance: float = 1e-3,
    fault: Callable[[dict[str, np.ndarray]], None] | None = None,
) -> dict[str, float]:
    """Max relative error per case name over all seeds."""
    worst: dict[str, float] = {}
    for seed in seeds:
        for name, (graph, inputs) in primitive_cases(seed).items():
            report = finite_diff_check(graph, inputs, epsilon, tolerance, fault=fault)
            worst[name] = max(worst.get(name, 0.0), report.max_rel_error)
    return worst
