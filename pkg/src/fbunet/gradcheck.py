"""Finite-difference verification of every differentiable op and of a full
two-round model.

Analytic gradients from :func:`fbunet.autograd.backward` are compared with
central differences ``(L(t + h) - L(t - h)) / 2h`` using
``h = 1e-5 * max(1, |t|)`` in float64. The per-coordinate error is
``|a - n| / max(|a|, |n|, 1e-5)``; a sign-flipped gradient therefore scores 2.
The floor sits above the roundoff of a central difference on an O(1) loss
(about 1e-16 / h), so gradients that are zero in exact arithmetic compare
as equal instead of as noise.

ReLU masks and max-pool winners are recorded during every evaluation. A
coordinate whose perturbation changes any of them straddles a kink, where the
central difference is meaningless, so it is skipped and counted.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import layers, losses, ops
from .autograd import Parameter, Precision, Tensor, backward, no_grad
from .models import ModelConfig, build_model

TOLERANCE = 1e-4
ERROR_FLOOR = 1e-5
F64 = np.float64


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    checked: int
    skipped: int

    @property
    def passed(self) -> bool:
        return self.checked > 0 and self.max_rel_error < TOLERANCE

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status}\t{self.name}\tmax_rel_err\t{self.max_rel_error:.3e}"
                f"\tchecked\t{self.checked}\tskipped_kinks\t{self.skipped}")


def _same_pattern(a, b):
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def check_gradients(name, loss_fn, leaves, rng=None, max_coords=None) -> CheckResult:
    """Compare analytic and numeric gradients of ``loss_fn()`` w.r.t. ``leaves``.

    Args:
        loss_fn: rebuilds the graph from the leaves' current values and
            returns a ``(1, 1, 1, 1)`` tensor.
        leaves: gradient-requiring tensors to perturb.
        max_coords: per-leaf cap on checked coordinates (random subset);
            ``None`` checks every coordinate.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    for t in leaves:
        t.zero_grad()
    with ops.record_kinks() as base_pattern:
        loss = loss_fn()
    backward(loss)
    analytic = [t.grad.copy() for t in leaves]

    def evaluate():
        with no_grad(), ops.record_kinks() as pattern:
            value = loss_fn().item()
        return value, pattern

    worst, checked, skipped = 0.0, 0, 0
    for t, grad in zip(leaves, analytic):
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        for i in coords:
            theta = flat[i]
            h = 1e-5 * max(1.0, abs(theta))
            flat[i] = theta + h
            lp, pp = evaluate()
            flat[i] = theta - h
            lm, pm = evaluate()
            flat[i] = theta
            if not (_same_pattern(pp, base_pattern) and _same_pattern(pm, base_pattern)):
                skipped += 1
                continue
            num = (lp - lm) / (2 * h)
            a = grad.reshape(-1)[i]
            err = abs(a - num) / max(abs(a), abs(num), ERROR_FLOOR)
            worst = max(worst, err)
            checked += 1
    return CheckResult(name, float(worst), checked, skipped)


# ---------------------------------------------------------------- registry

def _leaf(rng, *shape, low=-1.0, high=1.0):
    return Parameter(rng.uniform(low, high, size=shape).astype(F64))


def _unary(fn, shape):
    def case(rng):
        x = _leaf(rng, *shape, low=-2, high=2)
        with no_grad():
            out_shape = fn(x).shape
        r = Tensor(rng.standard_normal(out_shape))
        return (lambda: ops.sum_all(ops.hadamard(fn(x), r))), [x]
    return case


def _conv(rng):
    x, w, b = _leaf(rng, 2, 3, 5, 6), _leaf(rng, 4, 3, 3, 3), _leaf(rng, 4)
    r = Tensor(rng.standard_normal((2, 4, 5, 6)))
    return (lambda: ops.sum_all(ops.hadamard(ops.conv2d(x, w, b), r))), [x, w, b]


def _tconv(rng):
    x, w, b = _leaf(rng, 2, 3, 3, 4), _leaf(rng, 3, 2, 2, 2), _leaf(rng, 2)
    r = Tensor(rng.standard_normal((2, 2, 6, 8)))
    return (lambda: ops.sum_all(ops.hadamard(ops.transposed_conv2d(x, w, b), r))), [x, w, b]


def _concat(rng):
    a, b = _leaf(rng, 2, 2, 3, 3), _leaf(rng, 2, 3, 3, 3)
    r = Tensor(rng.standard_normal((2, 5, 3, 3)))
    return (lambda: ops.sum_all(ops.hadamard(ops.channel_concat(a, b), r))), [a, b]


def _binary(fn):
    def case(rng):
        a, b = _leaf(rng, 2, 3, 4, 4), _leaf(rng, 2, 3, 4, 4)
        r = Tensor(rng.standard_normal((2, 3, 4, 4)))
        return (lambda: ops.sum_all(ops.hadamard(fn(a, b), r))), [a, b]
    return case


def _batchnorm(training):
    def case(rng):
        x = _leaf(rng, 3, 2, 4, 4, low=-3, high=3)
        gamma, beta = _leaf(rng, 2, low=0.5, high=1.5), _leaf(rng, 2)
        stats = ops.RunningStats(rng.uniform(-0.5, 0.5, 2), rng.uniform(0.5, 2.0, 2))
        r = Tensor(rng.standard_normal((3, 2, 4, 4)))

        def loss():
            y = ops.batchnorm(x, gamma, beta, stats, training, update_stats=False)
            return ops.sum_all(ops.hadamard(y, r))
        return loss, [x, gamma, beta]
    return case


def _wce(rng):
    logits = _leaf(rng, 2, 4, 3, 3, low=-2, high=2)
    labels = rng.integers(0, 4, size=(2, 3, 3))
    weights = rng.uniform(0.5, 2.0, 4)
    return (lambda: losses.weighted_cross_entropy(ops.channel_softmax(logits), labels, weights)), [logits]


def _wce_probs(rng):
    probs = _leaf(rng, 2, 3, 3, 3, low=0.1, high=0.9)
    labels = rng.integers(0, 3, size=(2, 3, 3))
    weights = rng.uniform(0.5, 2.0, 3)
    return (lambda: losses.weighted_cross_entropy(probs, labels, weights)), [probs]


def _feedback_loss(rng):
    a, b = _leaf(rng, 1, 1, 1, 1), _leaf(rng, 1, 1, 1, 1)
    return (lambda: losses.feedback_loss(ops.hadamard(a, a), ops.hadamard(b, a), 0.5)), [a, b]


def _convbn_two_rounds(rng):
    block = layers.ConvBNBlock(2, 3, rng, rounds=2, dtype=F64)
    x = _leaf(rng, 2, 2, 4, 4)
    r = Tensor(rng.standard_normal((2, 3, 4, 4)))

    def loss():
        y0 = block(x, 0, True)
        y1 = block(ops.channel_slice(ops.channel_concat(y0, x), 1, 3), 1, True)
        return ops.sum_all(ops.hadamard(y1, r))
    return loss, [x] + block.parameters()


def _convlstm_two_rounds(rng):
    cell = layers.ConvLSTMCell(2, 3, rng, rounds=2, dtype=F64)
    x0, x1 = _leaf(rng, 2, 2, 4, 4), _leaf(rng, 2, 2, 4, 4)
    r0, r1 = Tensor(rng.standard_normal((2, 3, 4, 4))), Tensor(rng.standard_normal((2, 3, 4, 4)))

    def loss():
        cell.reset_state()
        y0 = cell(x0, 0, True)
        y1 = cell(x1, 1, True)
        c = cell.state[0]
        return ops.add(ops.add(ops.sum_all(ops.hadamard(y0, r0)), ops.sum_all(ops.hadamard(y1, r1))),
                       ops.sum_all(ops.hadamard(c, ops.channel_slice(Tensor(r0.data), 0, 3))))
    return loss, [x0, x1] + cell.parameters()


def _rcl(rng):
    layer = layers.RecurrentConvLayer(2, 3, rng, rounds=1, time_steps=2, dtype=F64)
    x = _leaf(rng, 2, 2, 4, 4)
    r = Tensor(rng.standard_normal((2, 3, 4, 4)))
    return (lambda: ops.sum_all(ops.hadamard(layer(x, 0, True), r))), [x] + layer.parameters()


OP_CASES = {
    "conv2d": _conv,
    "transposed_conv2d": _tconv,
    "maxpool2d": _unary(ops.maxpool2d, (2, 2, 4, 6)),
    "relu": _unary(ops.relu, (2, 3, 4, 4)),
    "sigmoid": _unary(ops.sigmoid, (2, 3, 4, 4)),
    "tanh": _unary(ops.tanh, (2, 3, 4, 4)),
    "channel_softmax": _unary(ops.channel_softmax, (2, 4, 3, 3)),
    "channel_concat": _concat,
    "channel_slice": _unary(lambda x: ops.channel_slice(x, 1, 3), (2, 4, 3, 3)),
    "add": _binary(ops.add),
    "hadamard": _binary(ops.hadamard),
    "scale": _unary(lambda x: ops.scale(x, -1.7), (2, 2, 3, 3)),
    "sum_all": _unary(lambda x: ops.hadamard(ops.sum_all(x), ops.sum_all(x)), (2, 2, 3, 3)),
    "batchnorm_train": _batchnorm(True),
    "batchnorm_infer": _batchnorm(False),
    "weighted_cross_entropy": _wce_probs,
    "softmax_cross_entropy": _wce,
    "feedback_loss": _feedback_loss,
    "convbn_two_rounds": _convbn_two_rounds,
    "convlstm_two_rounds": _convlstm_two_rounds,
    "rcl": _rcl,
}

TINY_MODEL = dict(num_classes=3, filters=(2, 3, 4, 5, 6), size=16, batch=2)


def model_case(variant="feedback-convlstm", seed=0, **overrides):
    spec = {**TINY_MODEL, **overrides}
    C = spec["num_classes"]
    cfg = ModelConfig(variant=variant, num_classes=C, filters=spec["filters"])
    model = build_model(cfg, seed=seed, precision=Precision.EXTENDED)
    rng = np.random.default_rng(seed + 1)
    # perturb bn affine parameters so the two rounds' sets differ
    for name, p in model.named_parameters():
        if name.endswith("gamma") or name.endswith("beta"):
            p.data += rng.uniform(-0.3, 0.3, p.data.shape)
    image = rng.uniform(0, 1, (spec["batch"], 1, spec["size"], spec["size"]))
    labels = rng.integers(0, C, size=(spec["batch"], spec["size"], spec["size"]))
    weights = rng.uniform(0.5, 2.0, C)

    def loss():
        out = model.forward(image, training=True)
        l1 = losses.weighted_cross_entropy(out.probs_round1, labels, weights)
        if out.probs_round2 is None:
            return l1
        l2 = losses.weighted_cross_entropy(out.probs_round2, labels, weights)
        return losses.feedback_loss(l1, l2, cfg.lam)
    return loss, model.parameters()


def run(seed=0, ops_only=False, model_coords=6, variants=("feedback-convlstm",)):
    """Run the whole suite; returns a list of :class:`CheckResult`."""
    results = []
    for name, case in OP_CASES.items():
        rng = np.random.default_rng(seed)
        fn, leaves = case(rng)
        results.append(check_gradients(name, fn, leaves, rng))
    if not ops_only:
        for variant in variants:
            fn, leaves = model_case(variant, seed)
            results.append(check_gradients(f"model[{variant}]", fn, leaves,
                                           np.random.default_rng(seed), max_coords=model_coords))
    return results


def report(results) -> str:
    lines = [r.line() for r in results]
    ok = all(r.passed for r in results)
    lines.append(f"{'PASS' if ok else 'FAIL'}\tall\t{sum(r.passed for r in results)}/{len(results)}")
    return "\n".join(lines)
