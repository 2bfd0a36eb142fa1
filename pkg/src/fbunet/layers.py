"""Composite layers: shared-weight conv blocks with per-round batch norm,
ConvLSTM cells and recurrent convolutional layers.

Every block is called as ``block(x, round_index, training)``. A block built
with ``rounds=2`` owns one set of convolution weights and two independent
batch-norm sets; ``round_index`` selects the batch-norm set.
"""

from __future__ import annotations

import numpy as np

from . import ops
from .autograd import Parameter, Tensor
from .errors import ContractError, ShapeError

GATE_ORDER = ("input", "forget", "cell", "output")


class Module:
    """Attribute-walking container for parameters and running statistics."""

    def _children(self):
        for name, value in vars(self).items():
            if isinstance(value, (Parameter, Module, ops.RunningStats)):
                yield name, value
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix=""):
        for name, value in self._children():
            if isinstance(value, Parameter):
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix=""):
        for name, value in self._children():
            if isinstance(value, ops.RunningStats):
                yield f"{prefix}{name}.mean", value.mean
                yield f"{prefix}{name}.var", value.var
            elif isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{name}.")

    def modules(self):
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())


def he_uniform(rng, shape, fan_in, dtype):
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class BatchNorm2d(Module):
    def __init__(self, channels, dtype=np.float32):
        self.gamma = Parameter(np.ones(channels, dtype=dtype))
        self.beta = Parameter(np.zeros(channels, dtype=dtype))
        self.stats = ops.RunningStats.fresh(channels, dtype)

    def __call__(self, x, training):
        return ops.batchnorm(x, self.gamma, self.beta, self.stats, training)


def _check_round(round_index, bn):
    if round_index not in (0, 1) or round_index >= len(bn):
        raise ContractError(f"round index {round_index} invalid for a block with {len(bn)} bn set(s)")


class ConvBNBlock(Module):
    """conv3x3 -> bn[round] -> ReLU with one shared conv weight."""

    def __init__(self, cin, cout, rng, rounds=1, dtype=np.float32):
        self.in_channels, self.out_channels = cin, cout
        self.weight = Parameter(he_uniform(rng, (cout, cin, 3, 3), cin * 9, dtype))
        self.bias = Parameter(np.zeros(cout, dtype=dtype))
        self.bn = [BatchNorm2d(cout, dtype) for _ in range(rounds)]

    def __call__(self, x, round_index=0, training=True):
        _check_round(round_index, self.bn)
        y = ops.conv2d(x, self.weight, self.bias)
        return ops.relu(self.bn[round_index](y, training))


class ConvLSTMCell(Module):
    """Convolutional LSTM cell without peepholes.

    One 3x3 convolution over ``concat(x, h_prev)`` yields stacked
    pre-activations in the order input, forget, cell candidate, output. The
    (cell, hidden) state survives between round 0 and round 1 and is cleared
    by :meth:`reset_state`. The block output is ``ReLU(bn[round](h))``.
    """

    def __init__(self, cin, hidden, rng, rounds=2, forget_bias=1.0, dtype=np.float32):
        self.in_channels, self.out_channels = cin, hidden
        self.hidden = hidden
        self.weight = Parameter(he_uniform(rng, (4 * hidden, cin + hidden, 3, 3),
                                           (cin + hidden) * 9, dtype))
        bias = np.zeros(4 * hidden, dtype=dtype)
        bias[hidden:2 * hidden] = forget_bias
        self.bias = Parameter(bias)
        self.bn = [BatchNorm2d(hidden, dtype) for _ in range(rounds)]
        self.state = None
        self.last_gates = None

    def reset_state(self):
        self.state = None

    def set_state(self, cell: Tensor, hidden: Tensor):
        if cell.shape != hidden.shape:
            raise ShapeError(f"cell {cell.shape} and hidden {hidden.shape} shapes differ")
        self.state = (cell, hidden)

    def __call__(self, x, round_index=0, training=True):
        _check_round(round_index, self.bn)
        n, _, h, w = x.shape
        C = self.hidden
        if round_index == 0:
            if self.state is not None:
                raise ContractError("ConvLSTM round 0 called with stale state; call reset_state() first")
            zeros = Tensor(np.zeros((n, C, h, w), dtype=x.dtype))
            c_prev, h_prev = zeros, zeros
        else:
            if self.state is None:
                raise ContractError("ConvLSTM round 1 called without state from round 0")
            c_prev, h_prev = self.state
            if c_prev.shape != (n, C, h, w):
                raise ShapeError(f"stored state {c_prev.shape} does not match input {x.shape}")

        z = ops.conv2d(ops.channel_concat(x, h_prev), self.weight, self.bias)
        i = ops.sigmoid(ops.channel_slice(z, 0, C))
        f = ops.sigmoid(ops.channel_slice(z, C, 2 * C))
        g = ops.tanh(ops.channel_slice(z, 2 * C, 3 * C))
        o = ops.sigmoid(ops.channel_slice(z, 3 * C, 4 * C))
        c = ops.add(ops.hadamard(f, c_prev), ops.hadamard(i, g))
        hid = ops.hadamard(o, ops.tanh(c))
        self.state = (c, hid)
        self.last_gates = {"input": i.data, "forget": f.data, "cell": g.data, "output": o.data}
        return ops.relu(self.bn[round_index](hid, training))


class RecurrentConvLayer(Module):
    """Recurrent convolutional layer unrolled over ``time_steps``.

    ``s_0 = ff(x)``, ``s_t = ff(x) + rec(ReLU(s_{t-1}))``, output
    ``ReLU(bn[round](s_{T-1}))``. The recurrent convolution has no bias.
    """

    def __init__(self, cin, cout, rng, rounds=1, time_steps=2, dtype=np.float32):
        if time_steps < 1:
            raise ValueError("time_steps must be >= 1")
        self.in_channels, self.out_channels = cin, cout
        self.time_steps = time_steps
        self.weight = Parameter(he_uniform(rng, (cout, cin, 3, 3), cin * 9, dtype))
        self.bias = Parameter(np.zeros(cout, dtype=dtype))
        self.rec_weight = Parameter(he_uniform(rng, (cout, cout, 3, 3), cout * 9, dtype))
        self.bn = [BatchNorm2d(cout, dtype) for _ in range(rounds)]

    def __call__(self, x, round_index=0, training=True):
        _check_round(round_index, self.bn)
        ff = ops.conv2d(x, self.weight, self.bias)
        s = ff
        for _ in range(1, self.time_steps):
            s = ops.add(ff, ops.conv2d(ops.relu(s), self.rec_weight))
        return ops.relu(self.bn[round_index](s, training))


def convbn_apply(block: ConvBNBlock, x, round_index, training):
    return block(x, round_index, training)


def convlstm_step(cell: ConvLSTMCell, x, round_index, training):
    return cell(x, round_index, training)


def reset_state(cell: ConvLSTMCell):
    cell.reset_state()


def rcl_apply(layer: RecurrentConvLayer, x, training, round_index=0):
    return layer(x, round_index, training)
