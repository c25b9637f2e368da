"""Lightweight global attention over the unsegmented feature map.

The spectral gate pools the whole map to one descriptor per channel; the
spatial gate pools across channels to one descriptor per pixel. Both are
squashed to (0, 1) and applied residually as ``F * (1 + W)``.
"""

from dataclasses import dataclass

import numpy as np

from . import ops
from .errors import ConfigurationError
from .tensor import as_tensor


@dataclass
class SpeAttnParams:
    reduce_kernel: object   # (D/tau, 2D)
    reduce_bias: object
    expand_kernel: object   # (D, D/tau)
    expand_bias: object
    tau: int = 4


@dataclass
class SpaAttnParams:
    kernel: object  # (1, 2, 3, 3)
    bias: object = None
    dilation: int = 2


def init_spe_params(store, prefix, D, tau, rng):
    if D % tau:
        raise ConfigurationError(f"D={D} is not divisible by tau={tau}")
    r = D // tau
    b1, b2 = 1 / np.sqrt(2 * D), 1 / np.sqrt(r)
    return SpeAttnParams(
        store.add(prefix + ".reduce.weight", rng.uniform(-b1, b1, (r, 2 * D))),
        store.add(prefix + ".reduce.bias", rng.uniform(-b1, b1, r)),
        store.add(prefix + ".expand.weight", rng.uniform(-b2, b2, (D, r))),
        store.add(prefix + ".expand.bias", rng.uniform(-b2, b2, D)),
        tau,
    )


def init_spa_params(store, prefix, rng):
    b = 1 / np.sqrt(2 * 9)
    return SpaAttnParams(
        store.add(prefix + ".weight", rng.uniform(-b, b, (1, 2, 3, 3))),
        store.add(prefix + ".bias", rng.uniform(-b, b, 1)),
    )


def spe_compressed_atten(F, p, squash=True):
    """Channel weights ``(D, 1, 1)`` from global average and max pooling."""
    F = as_tensor(F)
    D = F.shape[0]
    if D % p.tau:
        raise ConfigurationError(f"D={D} is not divisible by tau={p.tau}")
    a = ops.concat([ops.global_avg_pool(F), ops.global_max_pool(F)], axis=0)
    h = ops.silu(ops.pointwise_conv(a, p.reduce_kernel, p.reduce_bias))
    w = ops.pointwise_conv(h, p.expand_kernel, p.expand_bias)
    return ops.sigmoid(w) if squash else w


def spa_extended_atten(F, p, squash=True):
    """Pixel weights ``(1, H, W)`` from channel mean/max and a dilated 3x3 conv."""
    F = as_tensor(F)
    a = ops.concat([ops.channel_mean(F), ops.channel_max(F)], axis=0)
    w = ops.silu(ops.dilated_conv3x3(a, p.kernel, p.dilation, p.bias))
    return ops.sigmoid(w) if squash else w


def apply_global_gates(F_spe, F_spa, W_spe, W_spa):
    """Residual gating ``F * (1 + W)``; W_spe broadcasts over space, W_spa over channels."""
    return (ops.mul(F_spe, ops.add(W_spe, 1.0)),
            ops.mul(F_spa, ops.add(W_spa, 1.0)))


class LGIAttention:
    def __init__(self, store, prefix, D, tau, rng):
        self.spe = init_spe_params(store, prefix + ".spe", D, tau, rng)
        self.spa = init_spa_params(store, prefix + ".spa", rng)

    def __call__(self, F):
        return spe_compressed_atten(F, self.spe), spa_extended_atten(F, self.spa)
