"""Dual-channel spatial-spectral encoder.

A feature map is tiled into non-overlapping P x P patches. Each patch is
read twice: along the band axis (spectral branch, pixels as channels) and
along the pixel axis (spatial branch, bands as channels). Each reading is
split into channel groups, and every group is scanned by its own S6.
"""

import logging
import warnings
from dataclasses import dataclass

import numpy as np

from . import ops
from .errors import ConfigurationError, ParameterError
from .ssm import SsmParams, grouped_s6, init_ssm_params, stack_params
from .tensor import Tensor, as_tensor

log = logging.getLogger(__name__)


class ConfigurationWarning(UserWarning):
    pass


@dataclass
class PatchGrid:
    patches: Tensor  # (rows*cols, P, P, D), row-major over the grid
    grid_dims: tuple
    pad: tuple
    stage_patch_size: int
    image_dims: tuple

    @property
    def num_patches(self):
        return self.grid_dims[0] * self.grid_dims[1]


def patchify(F, P):
    """Tile a ``(D, H, W)`` map into ``P x P`` tokens after high-side zero padding."""
    if P < 1:
        raise ParameterError(f"patch size must be >= 1, got {P}")
    F = as_tensor(F)
    D, H, W = F.shape
    rows, cols = -(-H // P), -(-W // P)
    pad = (rows * P - H, cols * P - W)
    x = ops.pad_high(F, (0,) + pad)
    x = ops.reshape(x, (D, rows, P, cols, P))
    x = ops.transpose(x, (1, 3, 2, 4, 0))
    x = ops.reshape(x, (rows * cols, P, P, D))
    return PatchGrid(x, (rows, cols), pad, P, (H, W))


def unpatchify(grid, patches=None):
    """Inverse of :func:`patchify`; ``patches`` may replace the grid's tokens."""
    x = as_tensor(grid.patches if patches is None else patches)
    rows, cols = grid.grid_dims
    P = grid.stage_patch_size
    D = x.shape[-1]
    x = ops.reshape(x, (rows, cols, P, P, D))
    x = ops.transpose(x, (4, 0, 2, 1, 3))
    x = ops.reshape(x, (D, rows * P, cols * P))
    H, W = grid.image_dims
    if grid.pad != (0, 0):
        x = x[:, :H, :W]
    return x


def flatten_dual(token):
    """Return ``(spe, spa)`` readings of a ``(..., P, P, D)`` token.

    ``spa`` is ``(..., P*P, D)`` with pixels enumerated row-major; ``spe`` is its
    transpose ``(..., D, P*P)`` so the scan runs along the band axis.
    """
    token = as_tensor(token)
    *lead, P, P2, D = token.shape
    spa = ops.reshape(token, tuple(lead) + (P * P2, D))
    nd = spa.ndim
    spe = ops.transpose(spa, tuple(range(nd - 2)) + (nd - 1, nd - 2))
    return spe, spa


@dataclass
class GroupedSeq:
    seq: Tensor  # (..., S_L, N_G, D_G)
    domain: str

    @property
    def num_groups(self):
        return self.seq.shape[-2]

    @property
    def group_channels(self):
        return self.seq.shape[-1]


def group_split(x, N_G, domain="spatial"):
    """Split the channel axis into ``N_G`` contiguous blocks."""
    x = as_tensor(x)
    C = x.shape[-1]
    if N_G < 1 or C % N_G:
        raise ConfigurationError(
            f"cannot split C={C} channels into N_G={N_G} equal groups")
    return GroupedSeq(ops.reshape(x, x.shape[:-1] + (N_G, C // N_G)), domain)


def group_concat(grouped):
    seq = grouped.seq if isinstance(grouped, GroupedSeq) else as_tensor(grouped)
    return ops.reshape(seq, seq.shape[:-2] + (seq.shape[-2] * seq.shape[-1],))


def cosine_positional_encoding(S_L, C):
    """Sinusoidal table: sin on even columns, cos on odd, frequency 10000^(-2k/C)."""
    pos = np.arange(S_L, dtype=np.float64)[:, None]
    k2 = np.arange(0, C, 2, dtype=np.float64)
    angle = pos / np.power(10000.0, k2 / C)
    pe = np.zeros((S_L, C))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : C // 2])
    return pe


def resolve_groups(channels, requested):
    """Largest divisor of ``channels`` not exceeding ``requested``."""
    g = max(1, min(requested, channels))
    while channels % g:
        g -= 1
    if g != requested:
        log.info("group count %d does not divide %d channels; using %d",
                 requested, channels, g)
    return g


def multi_group_mamba(x, groups, w, exact=True):
    """Scan each group with its own S6, scale by ``w[i]`` and re-concatenate.

    ``groups`` is a list of per-group :class:`SsmParams` or one stacked instance.
    """
    seq = x.seq if isinstance(x, GroupedSeq) else as_tensor(x)
    N_G = seq.shape[-2]
    if isinstance(groups, (list, tuple)):
        if len(groups) != N_G:
            raise ConfigurationError(f"{len(groups)} S6 instances for {N_G} groups")
        groups = stack_params(groups)
    elif as_tensor(groups.log_A).shape[0] != N_G:
        raise ConfigurationError(
            f"{as_tensor(groups.log_A).shape[0]} S6 instances for {N_G} groups")
    w = as_tensor(w)
    if w.shape != (N_G,):
        raise ConfigurationError(f"group weights {w.shape} for {N_G} groups")
    lead = seq.shape[:-3]
    L, _, Dg = seq.shape[-3:]
    batched = ops.reshape(seq, (int(np.prod(lead, dtype=int)), L, N_G, Dg))
    y = grouped_s6(groups, batched, exact=exact)
    y = ops.mul(y, ops.reshape(w, (1, 1, N_G, 1)))
    return ops.reshape(y, lead + (L, N_G * Dg))


def stage_plan(H, W, P0, stages=3):
    """Per-stage ``(H_i, W_i, P_i)``: dims ceil-halved, patch size floor-halved."""
    if P0 < 4:
        warnings.warn(f"base patch size {P0} < 4 collapses later stages to 1x1 patches",
                      ConfigurationWarning, stacklevel=2)
    plan = []
    for i in range(stages):
        plan.append((H, W, max(1, P0 // 2 ** i)))
        H, W = -(-H // 2), -(-W // 2)
    return plan


class MultiGroupMamba:
    """Trainable multi-group S6 over ``channels`` split into ``groups``."""

    def __init__(self, store, prefix, channels, groups, state_size, rng, exact=True):
        self.channels = channels
        self.groups = groups
        self.exact = exact
        self.params = init_ssm_params(store, prefix + ".s6", channels // groups, state_size,
                                      rng, groups=groups)
        self.w = store.add(prefix + ".w", np.ones(groups))

    def __call__(self, seq):
        return multi_group_mamba(group_split(seq, self.groups), self.params, self.w,
                                 exact=self.exact)


class DCSSEncoder:
    def __init__(self, store, prefix, D, P, groups_spe, groups_spa, state_size, rng,
                 use_pos_encoding=True, exact=True):
        self.D, self.P = D, P
        self.use_pos_encoding = use_pos_encoding
        self.groups_spe = resolve_groups(P * P, groups_spe)
        self.groups_spa = resolve_groups(D, groups_spa)
        self.spe = MultiGroupMamba(store, prefix + ".spe", P * P, self.groups_spe,
                                   state_size, rng, exact)
        self.spa = MultiGroupMamba(store, prefix + ".spa", D, self.groups_spa,
                                   state_size, rng, exact)
        if use_pos_encoding:
            self._pe_spe = cosine_positional_encoding(D, P * P)
            self._pe_spa = cosine_positional_encoding(P * P, D)

    def __call__(self, F):
        return dcss_forward(F, self)


def dcss_forward(F, enc):
    """Return ``(F_spe, F_spa)``, each with the input's ``(D, H, W)`` shape."""
    F = as_tensor(F)
    grid = patchify(F, enc.P)
    n, P, _, D = grid.patches.shape
    spe, spa = flatten_dual(grid.patches)
    if enc.use_pos_encoding:
        spe = ops.add(spe, enc._pe_spe.astype(F.dtype))
        spa = ops.add(spa, enc._pe_spa.astype(F.dtype))
    spe_out = ops.transpose(enc.spe(spe), (0, 2, 1))
    spa_out = enc.spa(spa)
    F_spe = unpatchify(grid, ops.reshape(spe_out, (n, P, P, D)))
    F_spa = unpatchify(grid, ops.reshape(spa_out, (n, P, P, D)))
    return F_spe, F_spa


__all__ = [
    "PatchGrid", "GroupedSeq", "SsmParams", "patchify", "unpatchify", "flatten_dual",
    "group_split", "group_concat", "cosine_positional_encoding", "resolve_groups",
    "multi_group_mamba", "stage_plan", "MultiGroupMamba", "DCSSEncoder", "dcss_forward",
]
