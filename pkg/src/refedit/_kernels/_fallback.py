"""Pure-numpy reference implementations of the fused kernels.

Every function takes and returns C-contiguous 2-D arrays (rows x features);
the caller reshapes. Both float32 and float64 inputs are accepted and the
output dtype follows the input.
"""

import numpy as np

_GELU_C = np.sqrt(2.0 / np.pi)


def softmax_fwd(x):
    z = x - x.max(axis=1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=1, keepdims=True)
    return z


def softmax_bwd(y, dy):
    dot = (y * dy).sum(axis=1, keepdims=True)
    return y * (dy - dot)


def layernorm_fwd(x, gamma, beta, eps):
    mean = x.mean(axis=1)
    xc = x - mean[:, None]
    var = (xc * xc).mean(axis=1)
    rstd = 1.0 / np.sqrt(var + eps)
    y = xc * rstd[:, None] * gamma + beta
    return y.astype(x.dtype, copy=False), mean, rstd.astype(x.dtype, copy=False)


def layernorm_bwd(dy, x, mean, rstd, gamma):
    n = x.shape[1]
    xhat = (x - mean[:, None]) * rstd[:, None]
    dgamma = (dy * xhat).sum(axis=0)
    dbeta = dy.sum(axis=0)
    g = dy * gamma
    dx = rstd[:, None] / n * (n * g - g.sum(axis=1, keepdims=True) - xhat * (g * xhat).sum(axis=1, keepdims=True))
    return dx.astype(x.dtype, copy=False), dgamma, dbeta


def gelu_fwd(x):
    inner = _GELU_C * (x + 0.044715 * x * x * x)
    return (0.5 * x * (1.0 + np.tanh(inner))).astype(x.dtype, copy=False)


def gelu_bwd(x, dy):
    x3 = x * x * x
    th = np.tanh(_GELU_C * (x + 0.044715 * x3))
    dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
    grad = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner
    return (dy * grad).astype(x.dtype, copy=False)
