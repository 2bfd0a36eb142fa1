"""Adam optimizer over :class:`~fbunet.autograd.Parameter` objects."""

import numpy as np

DEFAULT_LR = 1e-4


def adam_step(params, lr=DEFAULT_LR, beta1=0.9, beta2=0.999, eps=1e-8):
    """Apply one bias-corrected Adam update in place.

    Gradients are read, never cleared; the caller re-zeroes them. A parameter
    whose ``grad`` is ``None`` is treated as having a zero gradient.
    """
    for p in params:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        dt = p.data.dtype.type
        b1, b2 = dt(beta1), dt(beta2)
        p.step_count += 1
        t = p.step_count
        p.m *= b1
        p.m += (1 - b1) * g
        p.v *= b2
        p.v += (1 - b2) * (g * g)
        m_hat = p.m / dt(1 - beta1 ** t)
        v_hat = p.v / dt(1 - beta2 ** t)
        p.data -= dt(lr) * m_hat / (np.sqrt(v_hat) + dt(eps))


def zero_grad(params):
    for p in params:
        p.zero_grad()
