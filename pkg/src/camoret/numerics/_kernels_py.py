"""Pure-numpy reference kernels.

Every function takes float64 arrays whose last axis is the reduction axis and
returns freshly allocated arrays. The compiled ``_kernels_c`` module exposes
the same names and signatures.
"""

import numpy as np

_GELU_C = np.sqrt(2.0 / np.pi)


def layernorm_forward(x, gamma, beta, eps):
    mean = x.mean(axis=-1, keepdims=True)
    xc = x - mean
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gamma + beta, xhat, rstd[..., 0]


def layernorm_backward(gy, xhat, rstd, gamma):
    n = xhat.shape[-1]
    lead = tuple(range(xhat.ndim - 1))
    ggamma = (gy * xhat).sum(axis=lead)
    gbeta = gy.sum(axis=lead)
    gxhat = gy * gamma
    gx = (gxhat - gxhat.mean(axis=-1, keepdims=True)
          - xhat * (gxhat * xhat).sum(axis=-1, keepdims=True) / n)
    return gx * rstd[..., None], ggamma, gbeta


def softmax_forward(x):
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(y, gy):
    return y * (gy - (gy * y).sum(axis=-1, keepdims=True))


def gelu_forward(x):
    """Tanh-approximate GELU; also returns the tanh term for the backward pass."""
    t = np.tanh(_GELU_C * (x + 0.044715 * x * x * x))
    return 0.5 * x * (1.0 + t), t


def gelu_backward(x, t, gy):
    dinner = _GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
    return gy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner)
