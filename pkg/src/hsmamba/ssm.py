"""State-space scans: ZOH discretization, LTI recurrent/convolutional forms,
and the input-selective S6 scan.

All state matrices are diagonal, so every matrix function reduces to an
elementwise one on the diagonal.
"""

import time
from dataclasses import dataclass, fields

import numpy as np

from . import ops
from .errors import DimensionError, ModeError, ParameterError
from .tensor import Tensor, as_tensor, grad_enabled, no_grad, record

SERIES_THRESHOLD = 1e-8


def _phi(z):
    """expm1(z) / z, with the removable singularity at 0 filled by 1."""
    small = np.abs(z) < SERIES_THRESHOLD
    safe = np.where(small, 1.0, z)
    return np.where(small, 1.0, np.expm1(safe) / safe)


def _dphi(z):
    # Taylor branch avoids cancellation in (z e^z - expm1 z) / z^2
    small = np.abs(z) < 1e-3
    safe = np.where(small, 1.0, z)
    exact = (safe * np.exp(safe) - np.expm1(safe)) / (safe * safe)
    series = 0.5 + z / 3.0 + z * z / 8.0 + z ** 3 / 30.0
    return np.where(small, series, exact)


@dataclass
class DiscretizedPair:
    A_bar: np.ndarray
    B_bar: np.ndarray


def discretize_zoh(A, B, delta, exact=True):
    """Zero-order-hold discretization of a diagonal system.

    ``A_bar = exp(delta*A)`` and ``B_bar = (delta*A)^-1 (exp(delta*A) - 1) delta*B``,
    falling back to ``delta*B`` where ``|delta*A| < 1e-8``. With ``exact=False``
    the simplified ``B_bar = delta*B`` is used everywhere.
    """
    A, B, delta = (np.asarray(v, dtype=np.float64) for v in (A, B, delta))
    if np.any(delta <= 0):
        raise ParameterError("delta must be strictly positive")
    z = delta * A
    B_bar = (_phi(z) if exact else 1.0) * delta * B
    return DiscretizedPair(np.exp(z), np.broadcast_to(B_bar, np.broadcast(z, B_bar).shape).copy())


def recurrent_scan(pair, C, x):
    """h_t = A_bar h_{t-1} + B_bar x_t, y_t = C . h_t with h_0 = 0.

    Parameters may be time-invariant (shape ``(N,)``) or per step ``(L, N)``.
    """
    x = np.asarray(x, dtype=np.float64)
    L = x.shape[0]
    if L == 0:
        return np.zeros(0)
    Ab = np.broadcast_to(pair.A_bar, (L,) + np.shape(pair.A_bar)[-1:])
    Bb = np.broadcast_to(pair.B_bar, (L,) + np.shape(pair.B_bar)[-1:])
    Cs = np.broadcast_to(np.asarray(C, dtype=np.float64), Ab.shape)
    h = np.zeros(Ab.shape[1])
    y = np.empty(L)
    for t in range(L):
        h = Ab[t] * h + Bb[t] * x[t]
        y[t] = Cs[t] @ h
    return y


def ssm_kernel(pair, C, L):
    """Convolution kernel (C B_bar, C A_bar B_bar, ..., C A_bar^{L-1} B_bar)."""
    A_bar, B_bar, C = (np.asarray(v, dtype=np.float64) for v in (pair.A_bar, pair.B_bar, C))
    if A_bar.ndim > 1 or B_bar.ndim > 1 or C.ndim > 1:
        raise ModeError("kernel form needs time-invariant parameters")
    powers = A_bar[None, :] ** np.arange(L)[:, None]
    return powers @ (C * B_bar)


def kernel_scan(pair, C, x):
    """Causal convolution of ``x`` with the SSM kernel; LTI mode only."""
    x = np.asarray(x, dtype=np.float64)
    L = x.shape[0]
    K = ssm_kernel(pair, C, L)
    if L == 0:
        return np.zeros(0)
    return np.convolve(x, K)[:L]


def associative_scan(a, b):
    """Inclusive scan of h_t = a_t h_{t-1} + b_t along axis 0 by recursive doubling.

    Returns ``(prod, h)`` where ``prod[t] = a_0 ... a_t`` so that a nonzero
    initial state h_{-1} contributes ``prod[t] * h_{-1}``.
    """
    a = np.array(a, dtype=np.float64)
    b = np.array(b, dtype=np.float64)
    L = a.shape[0]
    k = 1
    while k < L:
        b_new = b.copy()
        b_new[k:] = a[k:] * b[:-k] + b[k:]
        a_new = a.copy()
        a_new[k:] = a[k:] * a[:-k]
        a, b = a_new, b_new
        k *= 2
    return a, b


# ------------------------------------------------------------- selective scan

def _discretize_steps(delta, A, Bm, exact):
    z = delta[..., None] * A
    Abar = np.exp(z)
    ph = _phi(z) if exact else np.ones_like(z)
    Bbar = ph * delta[..., None] * Bm[..., None, :]
    return z, Abar, ph, Bbar


def _scan_streaming(x, delta, A, Bm, Cm, Dskip, exact, method, chunk=1024):
    # forward only; states are never materialized beyond one chunk
    B, L, G, Dg = x.shape
    N = A.shape[-1]
    h = np.zeros((B, G, Dg, N), dtype=x.dtype)
    y = np.empty_like(x)
    for s in range(0, L, chunk):
        e = min(L, s + chunk)
        _, Abar, _, Bbar = _discretize_steps(delta[:, s:e], A, Bm[:, s:e], exact)
        u = Bbar * x[:, s:e, ..., None]
        Cc = Cm[:, s:e, :, None, :]
        if method == "associative":
            prod, hs = associative_scan(np.moveaxis(Abar, 1, 0), np.moveaxis(u, 1, 0))
            hs = hs + prod * h
            h = hs[-1]
            y[:, s:e] = np.moveaxis((hs * np.moveaxis(Cc, 1, 0)).sum(-1), 0, 1)
        else:
            for t in range(e - s):
                h = Abar[:, t] * h + u[:, t]
                y[:, s + t] = (h * Cc[:, t]).sum(-1)
    return y + Dskip * x


def selective_scan(x, delta, A, Bm, Cm, Dskip, exact=True, method="sequential"):
    """Fused differentiable S6 recurrence on grouped sequences.

    Shapes: ``x, delta (B, L, G, Dg)``; ``A (G, Dg, N)`` (negative);
    ``Bm, Cm (B, L, G, N)``; ``Dskip (G, Dg)``. Per channel d of group g::

        h_t = exp(delta_t A) h_{t-1} + phi(delta_t A) delta_t B_t x_t
        y_t = C_t . h_t + Dskip x_t
    """
    x, delta, A, Bm, Cm, Dskip = (as_tensor(t) for t in (x, delta, A, Bm, Cm, Dskip))
    if x.ndim != 4 or delta.shape != x.shape:
        raise DimensionError(f"x {x.shape} and delta {delta.shape} must be equal 4-d")
    Bsz, L, G, Dg = x.shape
    if A.shape[:2] != (G, Dg) or A.ndim != 3:
        raise DimensionError(f"A {A.shape} does not match groups ({G}, {Dg})")
    N = A.shape[2]
    if Bm.shape != (Bsz, L, G, N) or Cm.shape != Bm.shape:
        raise DimensionError(f"B/C projections must be {(Bsz, L, G, N)}")
    parents = (x, delta, A, Bm, Cm, Dskip)
    if not (grad_enabled() and any(p.requires_grad for p in parents)):
        y = _scan_streaming(x.data, delta.data, A.data, Bm.data, Cm.data, Dskip.data,
                            exact, method)
        return record(y, parents, None, "selective_scan")

    xd, dd, Ad, Bd, Cd, Dd = (p.data for p in parents)
    z, Abar, ph, Bbar = _discretize_steps(dd, Ad, Bd, exact)
    u = Bbar * xd[..., None]
    hs = np.empty_like(u)
    h = np.zeros((Bsz, G, Dg, N), dtype=xd.dtype)
    for t in range(L):
        h = Abar[:, t] * h + u[:, t]
        hs[:, t] = h
    Cb = Cd[:, :, :, None, :]
    y = (hs * Cb).sum(-1) + Dd * xd

    def back(gy):
        gC = np.einsum("blgd,blgdn->blgn", gy, hs)
        q = gy[..., None] * Cb
        gh = np.empty_like(hs)
        acc = np.zeros((Bsz, G, Dg, N), dtype=xd.dtype)
        for t in range(L - 1, -1, -1):
            acc = q[:, t] + (Abar[:, t + 1] * acc if t + 1 < L else 0.0)
            gh[:, t] = acc
        hprev = np.concatenate([np.zeros_like(hs[:, :1]), hs[:, :-1]], axis=1)
        gAbar = gh * hprev
        gx = (gh * Bbar).sum(-1) + gy * Dd
        gBbar = gh * xd[..., None]
        d5 = dd[..., None]
        B5 = Bd[..., None, :]
        gB = (gBbar * ph * d5).sum(axis=3)
        dph = _dphi(z) if exact else 0.0
        gz = gAbar * Abar + gBbar * B5 * d5 * dph
        gdelta = (gz * Ad).sum(-1) + (gBbar * ph * B5).sum(-1)
        gA = (gz * d5).sum(axis=(0, 1))
        gD = (gy * xd).sum(axis=(0, 1))
        return gx, gdelta, gA, gB, gC, gD

    return record(y, parents, back, "selective_scan")


@dataclass
class SsmParams:
    """S6 parameters, optionally stacked along a leading group axis.

    ``log_A (D, N)``, ``W_B/W_C (N, D)``, ``b_B/b_C (N,)``, ``W_dt (D, D)``,
    ``b_dt (D,)``, ``D_skip (D,)``; the state matrix is ``A = -exp(log_A)``.
    """

    log_A: object
    W_B: object
    b_B: object
    W_C: object
    b_C: object
    W_dt: object
    b_dt: object
    D_skip: object

    def tensors(self):
        return [getattr(self, f.name) for f in fields(self)]

    @property
    def state_size(self):
        return np.shape(as_tensor(self.log_A).data)[-1]


def init_ssm_params(store, prefix, channels, state_size, rng, groups=None,
                    dt_min=1e-3, dt_max=0.1):
    """Register S6 parameters in ``store`` (with a leading axis when ``groups``)."""
    lead = () if groups is None else (groups,)
    D, N = channels, state_size
    bound = 1.0 / np.sqrt(D)
    log_A = np.broadcast_to(np.log(np.arange(1, N + 1, dtype=np.float64)), lead + (D, N))
    dt = np.exp(rng.uniform(np.log(dt_min), np.log(dt_max), size=lead + (D,)))
    inv_softplus_dt = dt + np.log(-np.expm1(-dt))
    return SsmParams(
        log_A=store.add(f"{prefix}.log_A", log_A),
        W_B=store.add(f"{prefix}.W_B", rng.uniform(-bound, bound, lead + (N, D))),
        b_B=store.add(f"{prefix}.b_B", np.zeros(lead + (N,))),
        W_C=store.add(f"{prefix}.W_C", rng.uniform(-bound, bound, lead + (N, D))),
        b_C=store.add(f"{prefix}.b_C", np.zeros(lead + (N,))),
        W_dt=store.add(f"{prefix}.W_dt", rng.uniform(-bound, bound, lead + (D, D))),
        b_dt=store.add(f"{prefix}.b_dt", inv_softplus_dt),
        D_skip=store.add(f"{prefix}.D_skip", np.ones(lead + (D,))),
    )


def stack_params(groups):
    """Stack per-group SsmParams into one with a leading group axis."""
    cols = zip(*(p.tensors() for p in groups))
    return SsmParams(*(ops.stack(list(c), axis=0) for c in cols))


def grouped_s6(params, x, exact=True, method="sequential"):
    """Run one S6 instance per group. ``x`` is ``(B, L, G, Dg)``; params are stacked."""
    x = as_tensor(x)
    p = SsmParams(*(as_tensor(t) for t in params.tensors()))
    Bm = ops.add(ops.einsum("blgd,gnd->blgn", x, p.W_B), p.b_B)
    Cm = ops.add(ops.einsum("blgd,gnd->blgn", x, p.W_C), p.b_C)
    delta = ops.softplus(ops.add(ops.einsum("blgd,ged->blge", x, p.W_dt), p.b_dt))
    A = ops.neg(ops.exp(p.log_A))
    return selective_scan(x, delta, A, Bm, Cm, p.D_skip, exact=exact, method=method)


def selective_scan_s6(params, x, exact=True, method="sequential"):
    """Selective scan of a single-group S6 over ``x`` of shape ``(L, D)`` or ``(B, L, D)``."""
    x = as_tensor(x)
    squeeze = x.ndim == 2
    if squeeze:
        x = ops.reshape(x, (1,) + x.shape)
    if x.ndim != 3:
        raise DimensionError(f"expected (L, D) or (B, L, D) input, got {x.shape}")
    Bsz, L, D = x.shape
    stacked = SsmParams(*(ops.reshape(as_tensor(t), (1,) + as_tensor(t).shape)
                          for t in params.tensors()))
    y = grouped_s6(stacked, ops.reshape(x, (Bsz, L, 1, D)), exact=exact, method=method)
    return ops.reshape(y, (L, D) if squeeze else (Bsz, L, D))


def benchmark_scan(L_list, D, N, repeats, method="sequential", seed=0):
    """Wall-clock the forward selective scan at each length.

    Returns rows ``(L, mean_seconds, std_seconds)``; empty when ``repeats == 0``.
    """
    if repeats <= 0:
        return []
    from .tensor import ParamStore
    rng = np.random.default_rng(seed)
    params = init_ssm_params(ParamStore(), "bench", D, N, rng)
    rows = []
    for L in L_list:
        x = Tensor(rng.standard_normal((L, D)))
        times = []
        with no_grad():
            for _ in range(repeats):
                t0 = time.perf_counter()
                selective_scan_s6(params, x, method=method)
                times.append(time.perf_counter() - t0)
        rows.append((int(L), float(np.mean(times)), float(np.std(times))))
    return rows


def scaling_exponent(rows):
    """Slope of log(mean time) against log(L)."""
    L = np.array([r[0] for r in rows], dtype=float)
    t = np.array([r[1] for r in rows], dtype=float)
    return float(np.polyfit(np.log(L), np.log(t), 1)[0])


def write_bench_csv(rows, fh):
    fh.write("L,mean_seconds,std_seconds\n")
    for L, m, s in rows:
        fh.write(f"{L},{m:.9g},{s:.9g}\n")
