"""
Finite-difference gradient checks for the autodiff ops and the model blocks.

Every check builds a scalar loss sum(out * W) with a fixed random W, runs
backward once, and compares the result against central differences in
float64. Sampling coordinates are kept away from integers so bilinear
interpolation is differentiable at every checked point.
"""

import logging
from dataclasses import asdict, dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import (
    DepthBlock,
    ModelConfig,
    Module,
    PCQANet,
    RelativePositionBias,
    TransformerBlock,
    deform_conv2d,
)

logger = logging.getLogger(__name__)

STEP = 1e-5
OP_TOLERANCE = 1e-4
MODEL_TOLERANCE = 1e-3
MODEL_SAMPLES = 50
# Gradients smaller than this are compared absolutely
SCALE_FLOOR = 1e-3

Target = Tuple[str, Tensor]


@dataclass
class GradCheckResult:
    name: str
    checked: int
    max_abs_error: float
    max_rel_error: float
    tolerance: float
    passed: bool
    worst: str = ""

    def to_dict(self) -> dict:
        return asdict(self)


def _loss_value(forward: Callable[[], Tensor], weights: np.ndarray) -> float:
    with ad.no_grad():
        return float((forward().data * weights).sum())


def run_check(
    name: str,
    targets: Sequence[Target],
    forward: Callable[[], Tensor],
    rng: np.random.Generator,
    sample: Optional[int] = None,
    step: float = STEP,
    tolerance: float = OP_TOLERANCE,
) -> GradCheckResult:
    """
    Compare analytic and central-difference gradients.

    Args:
        name: label for the report
        targets: (label, tensor) pairs whose gradients are checked
        forward: recomputes the output from the current target values
        rng: draws the loss weights and the sampled entries
        sample: check this many randomly chosen entries instead of all
        step: finite-difference step h
        tolerance: largest accepted relative error

    Returns:
        GradCheckResult with the worst entry named
    """
    for _, t in targets:
        t.requires_grad = True
        t.zero_grad()
    out = forward()
    weights = rng.standard_normal(out.shape)
    ad.backward(ad.sum(ad.mul(out, weights)))

    entries: List[Tuple[str, Tensor, Tuple[int, ...]]] = []
    for label, t in targets:
        entries.extend((label, t, idx) for idx in np.ndindex(t.shape))
    if sample is not None and sample < len(entries):
        chosen = rng.choice(len(entries), size=sample, replace=False)
        entries = [entries[i] for i in sorted(chosen)]

    max_abs = max_rel = 0.0
    worst = ""
    for label, t, idx in entries:
        analytic = 0.0 if t.grad is None else float(t.grad[idx])
        original = t.data[idx]
        t.data[idx] = original + step
        plus = _loss_value(forward, weights)
        t.data[idx] = original - step
        minus = _loss_value(forward, weights)
        t.data[idx] = original
        numeric = (plus - minus) / (2 * step)

        abs_err = abs(analytic - numeric)
        rel_err = abs_err / max(abs(analytic), abs(numeric), SCALE_FLOOR)
        max_abs = max(max_abs, abs_err)
        if rel_err >= max_rel:
            max_rel = rel_err
            worst = f"{label}{list(idx)}: analytic {analytic:.6e}, numeric {numeric:.6e}"

    result = GradCheckResult(
        name=name,
        checked=len(entries),
        max_abs_error=max_abs,
        max_rel_error=max_rel,
        tolerance=tolerance,
        passed=bool(max_rel <= tolerance),
        worst=worst,
    )
    logger.debug(f"gradcheck {name}: {len(entries)} entries, max rel {max_rel:.3e}")
    return result


def check_function(
    name: str,
    fn: Callable[..., Tensor],
    inputs: Dict[str, np.ndarray],
    rng: np.random.Generator,
    tolerance: float = OP_TOLERANCE,
) -> GradCheckResult:
    """Check every entry of every keyword input of ``fn``"""
    tensors = {k: Tensor(np.array(v, dtype=np.float64), requires_grad=True)
               for k, v in inputs.items()}
    return run_check(name, list(tensors.items()), lambda: fn(**tensors), rng,
                     tolerance=tolerance)


def check_module(
    name: str,
    module: Module,
    inputs: Sequence[np.ndarray],
    rng: np.random.Generator,
    sample: Optional[int] = None,
    include_inputs: bool = True,
    tolerance: float = OP_TOLERANCE,
    extra: Sequence[Target] = (),
    call: Optional[Callable[..., Tensor]] = None,
) -> GradCheckResult:
    """Check a module's parameters (and optionally its inputs)"""
    tensors = [Tensor(np.array(v, dtype=np.float64), requires_grad=include_inputs)
               for v in inputs]
    targets: List[Target] = list(module.named_parameters()) + list(extra)
    if include_inputs:
        targets = [(f"input{i}", t) for i, t in enumerate(tensors)] + targets
    invoke = call or module
    return run_check(name, targets, lambda: invoke(*tensors), rng, sample=sample,
                     tolerance=tolerance)


# ==============================================================================
# Suite
# ==============================================================================

def _fractional(rng: np.random.Generator, shape, low: int = -1, high: int = 2) -> np.ndarray:
    """Values whose fractional part lies in [0.2, 0.8]"""
    return rng.integers(low, high, size=shape) + rng.uniform(0.2, 0.8, size=shape)


def op_checks(rng: np.random.Generator) -> List[GradCheckResult]:
    n = rng.standard_normal
    results = [
        check_function("add", ad.add, {"a": n((3, 4)), "b": n((4,))}, rng),
        check_function("sub", ad.sub, {"a": n((2, 1, 3)), "b": n((4, 3))}, rng),
        check_function("mul", ad.mul, {"a": n((3, 4)), "b": n((3, 1))}, rng),
        check_function("div", ad.div, {"a": n((3, 4)), "b": rng.uniform(0.5, 2.0, (3, 4))}, rng),
        check_function("sum", lambda a: ad.sum(a, axis=1), {"a": n((3, 4, 2))}, rng),
        check_function("mean", lambda a: ad.mean(a, axis=(0, 2), keepdims=True),
                       {"a": n((3, 4, 2))}, rng),
        check_function("matmul", ad.matmul, {"a": n((2, 3, 4)), "b": n((4, 5))}, rng),
        check_function("linear", ad.linear,
                       {"x": n((2, 3, 4)), "weight": n((5, 4)), "bias": n((5,))}, rng),
        check_function("gelu", ad.gelu, {"a": n((4, 5))}, rng),
        check_function("softmax", lambda a: ad.softmax(a, axis=-1), {"a": n((3, 5))}, rng),
        check_function("reshape_transpose",
                       lambda a: a.reshape(3, 2, 4).transpose(2, 0, 1), {"a": n((6, 4))}, rng),
        check_function("getitem_gather", lambda a: a[np.array([[0, 2], [2, 1]])],
                       {"a": n((3, 4))}, rng),
        check_function("slice", lambda a: ad.slice(a, 1, 1, 4, 2), {"a": n((2, 5))}, rng),
        check_function("concat", lambda a, b: ad.concat([a, b], axis=1),
                       {"a": n((2, 3, 2)), "b": n((2, 1, 2))}, rng),
        check_function("conv2d",
                       lambda x, weight, bias: ad.conv2d(x, weight, bias, stride=2, padding=1),
                       {"x": n((2, 3, 5, 5)), "weight": n((4, 3, 3, 3)), "bias": n((4,))}, rng),
        check_function("depthwise_conv2d",
                       lambda x, weight, bias: ad.depthwise_conv2d(x, weight, bias, 1, 1),
                       {"x": n((2, 3, 4, 4)), "weight": n((3, 1, 3, 3)), "bias": n((3,))}, rng),
        check_function("avg_pool2d", ad.avg_pool2d, {"x": n((2, 2, 5, 5))}, rng),
        check_function("global_avg_pool", ad.global_avg_pool, {"x": n((2, 3, 3, 2))}, rng),
        check_function("bilinear_sample", ad.bilinear_sample,
                       {"x": n((1, 2, 4, 4)), "rows": _fractional(rng, (1, 2, 3, 3), 0, 3),
                        "cols": _fractional(rng, (1, 2, 3, 3), -1, 4)}, rng),
        check_function("batch_norm",
                       lambda x, gamma, beta: ad.batch_norm(
                           x, gamma, beta, np.zeros(2), np.ones(2), training=True),
                       {"x": n((3, 2, 3, 3)), "gamma": n((2,)), "beta": n((2,))}, rng),
        check_function("batch_norm_eval",
                       lambda x, gamma, beta: ad.batch_norm(
                           x, gamma, beta, np.full(2, 0.3), np.full(2, 1.7), training=False),
                       {"x": n((2, 2, 2, 2)), "gamma": n((2,)), "beta": n((2,))}, rng),
        check_function("layer_norm", ad.layer_norm,
                       {"x": n((2, 3, 5)), "gamma": n((5,)), "beta": n((5,))}, rng),
        check_function("smooth_l1_loss",
                       lambda pred: ad.smooth_l1_loss(pred, np.array([0.0, 1.0, -2.0, 0.5, 3.0])),
                       {"pred": np.array([0.3, -0.4, 1.1, 0.45, 0.2])}, rng),
        check_function("deform_conv2d", deform_conv2d,
                       {"x": n((1, 2, 5, 5)), "offsets": _fractional(rng, (1, 18, 5, 5)),
                        "weight": n((3, 2, 3, 3)), "bias": n((3,))}, rng),
    ]

    def chain(x, weight, gamma, beta, fc_weight, fc_bias):
        h = ad.conv2d(x, weight, None, 1, 1)
        h = ad.batch_norm(h, gamma, beta, np.zeros(3), np.ones(3), training=True)
        h = ad.avg_pool2d(ad.gelu(h), 3, 2, 1)
        return ad.linear(ad.global_avg_pool(h), fc_weight, fc_bias)

    results.append(check_function(
        "conv_norm_gelu_pool_linear", chain,
        {"x": n((2, 2, 4, 4)), "weight": n((3, 2, 3, 3)), "gamma": n((3,)), "beta": n((3,)),
         "fc_weight": n((2, 3)), "fc_bias": n((2,))}, rng))
    return results


def block_checks(rng: np.random.Generator) -> List[GradCheckResult]:
    f64 = np.float64
    n = rng.standard_normal
    results = []

    block = DepthBlock(8, 8, 3, rng, dtype=f64)
    _randomize(block, rng)
    results.append(check_module("depth_block", block, [n((2, 8, 4, 4))], rng))

    block = DepthBlock(4, 8, 3, rng, stride=2, dtype=f64)
    _randomize(block, rng)
    results.append(check_module("depth_block_stride2", block, [n((2, 4, 4, 4))], rng))

    block = TransformerBlock(8, 8, 4, rng, dtype=f64)
    _randomize(block, rng)
    bias = RelativePositionBias(2, 4, 4, rng, dtype=f64)
    results.append(check_module(
        "transformer_block", block, [n((2, 8, 4, 4))], rng,
        extra=list(bias.named_parameters("position_bias.")),
        call=lambda x: block(x, bias()),
    ))

    block = TransformerBlock(4, 8, 4, rng, downsample=True, dtype=f64)
    _randomize(block, rng)
    results.append(check_module("transformer_block_downsample", block, [n((1, 4, 4, 4))], rng))
    return results


def model_check(rng: np.random.Generator, samples: int = MODEL_SAMPLES) -> GradCheckResult:
    """Full model at widths / 16, one repeat per stage, grid 8, sampled parameters"""
    cfg = ModelConfig(repeats=(1, 1, 1, 1, 1), grid=8, scale=1 / 16)
    model = PCQANet(cfg, seed=int(rng.integers(2**31)), dtype=np.float64)
    _randomize(model, rng)
    features = rng.uniform(0.0, 1.0, (2, cfg.input_channels, cfg.grid, cfg.grid))
    return check_module("model", model, [features], rng, sample=samples,
                        include_inputs=False, tolerance=MODEL_TOLERANCE)


def _randomize(module: Module, rng: np.random.Generator):
    """
    Move zero-initialized weights off zero so every path carries gradient,
    keeping deformable offsets fractional.
    """
    for name, p in module.named_parameters():
        if name.endswith("offset_conv.weight"):
            p.data = rng.uniform(-1e-3, 1e-3, p.shape)
        elif name.endswith("offset_conv.bias"):
            p.data = rng.uniform(0.3, 0.6, p.shape)
        elif name.endswith("gamma"):
            p.data = rng.uniform(0.5, 1.5, p.shape)
        else:
            p.data = rng.standard_normal(p.shape) * 0.5


def run_suite(seed: int = 0, include_model: bool = True) -> List[GradCheckResult]:
    """All op checks, the block checks and (optionally) the full model check"""
    rng = np.random.default_rng(seed)
    results = op_checks(rng) + block_checks(rng)
    if include_model:
        results.append(model_check(rng))
    failed = [r.name for r in results if not r.passed]
    if failed:
        logger.warning(f"Gradient checks failed: {', '.join(failed)}")
    else:
        logger.info(f"All {len(results)} gradient checks passed")
    return results
