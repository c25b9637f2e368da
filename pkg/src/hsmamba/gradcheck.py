"""Central finite-difference verification of reverse-mode gradients."""

from dataclasses import dataclass

import numpy as np

from .tensor import Parameter, Tensor, backward, no_grad

STEP = 1e-5
TOLERANCE = 1e-4


@dataclass
class GradCheckResult:
    case: str
    target: str
    rel_error: float
    tolerance: float = TOLERANCE

    @property
    def passed(self):
        return self.rel_error <= self.tolerance


def relative_error(analytic, numeric, floor=1e-10):
    """``||a - n|| / max(||a||, ||n||, floor)``."""
    a = np.ravel(analytic)
    n = np.ravel(numeric)
    scale = max(np.linalg.norm(a), np.linalg.norm(n), floor)
    return float(np.linalg.norm(a - n) / scale)


def difference_noise(magnitude, step=STEP):
    """Round-off level of one central difference on an objective of this size.

    Gradients below ``noise / tol`` cannot be resolved to relative ``tol``, so
    they are compared against that floor instead.
    """
    return 10.0 * np.finfo(np.float64).eps * max(magnitude, 1.0) / step


def check_gradients(fn, inputs, case="", step=STEP, tol=TOLERANCE, max_entries=None,
                    rng=None):
    """Compare analytic and central-difference gradients of ``fn`` for each input.

    ``fn(*inputs)`` may return any shape; it is contracted with a fixed random
    weighting to form the scalar under test. With ``max_entries`` only that many
    randomly chosen coordinates per input are perturbed.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    inputs = list(inputs)
    for t in inputs:
        if not isinstance(t, Parameter):
            t.requires_grad = True
        t.grad = None
        # perturbation writes through a flat view; a strided array would copy
        t.data = np.array(t.data, order="C")
    out = fn(*inputs)
    weight = rng.standard_normal(out.shape)
    backward(out, weight)
    floor = difference_noise(float(np.sum(np.abs(out.data * weight))), step) / tol

    def objective():
        with no_grad():
            return float(np.sum(fn(*inputs).data * weight))

    results = []
    for k, t in enumerate(inputs):
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        numeric = np.empty(len(idx))
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + step
            fp = objective()
            flat[i] = orig - step
            fm = objective()
            flat[i] = orig
            numeric[j] = (fp - fm) / (2 * step)
        name = getattr(t, "name", None) or f"input{k}"
        results.append(GradCheckResult(case, name,
                                       relative_error(analytic.reshape(-1)[idx], numeric,
                                                      floor * np.sqrt(len(idx))), tol))
    return results


def worst(results):
    return max(results, key=lambda r: r.rel_error)


def _rand(rng, shape, lo=-1.0, hi=1.0):
    return Tensor(rng.uniform(lo, hi, size=shape))


def op_cases(rng, shapes_per_op=5):
    """Yield ``(case, fn, inputs)`` for every primitive at several random shapes."""
    from . import ops
    from .ssm import selective_scan
    from .train import masked_cross_entropy

    for s in range(shapes_per_op):
        C = int(rng.integers(1, 5))
        H = int(rng.integers(2, 7))
        W = int(rng.integers(2, 7))
        shape = (C, H, W)
        tag = f"[{s}]{shape}"
        yield "add" + tag, ops.add, [_rand(rng, shape), _rand(rng, (C, 1, 1))]
        yield "sub" + tag, ops.sub, [_rand(rng, shape), _rand(rng, (1, H, W))]
        yield "mul" + tag, ops.mul, [_rand(rng, shape), _rand(rng, (W,))]
        yield "exp" + tag, ops.exp, [_rand(rng, shape)]
        yield "sum" + tag, lambda a: ops.sum(a, axis=(1, 2)), [_rand(rng, shape)]
        yield "transpose" + tag, lambda a: ops.transpose(a, (2, 0, 1)), [_rand(rng, shape)]
        yield "getitem" + tag, lambda a: a[:, 1:, ::2], [_rand(rng, shape)]
        yield "pad_high" + tag, lambda a: ops.pad_high(a, (0, 1, 2)), [_rand(rng, shape)]
        yield "concat" + tag, lambda a, b: ops.concat([a, b], axis=0), [_rand(rng, shape),
                                                                       _rand(rng, shape)]
        yield "stack" + tag, lambda a, b: ops.stack([a, b], axis=1), [_rand(rng, shape),
                                                                     _rand(rng, shape)]
        yield "einsum" + tag, lambda a, b: ops.einsum("chw,dc->dhw", a, b), [
            _rand(rng, shape), _rand(rng, (3, C))]
        yield "einsum_reduce" + tag, lambda a, b: ops.einsum("chw,c->h", a, b), [
            _rand(rng, shape), _rand(rng, (C,))]
        yield "sigmoid" + tag, ops.sigmoid, [_rand(rng, shape, -4, 4)]
        yield "softplus" + tag, ops.softplus, [_rand(rng, shape, -4, 4)]
        yield "silu" + tag, ops.silu, [_rand(rng, shape, -4, 4)]
        Dout = int(rng.integers(1, 5))
        yield "pointwise_conv" + tag, ops.pointwise_conv, [
            _rand(rng, shape), _rand(rng, (Dout, C)), _rand(rng, (Dout,))]
        dil = int(rng.integers(1, 3))
        yield f"dilated_conv3x3(d={dil})" + tag, (
            lambda x, k, d=dil: ops.dilated_conv3x3(x, k, d)), [
            _rand(rng, shape), _rand(rng, (1, C, 3, 3))]
        G = [g for g in (1, 2, 4) if (2 * C) % g == 0][-1]
        yield f"group_norm(G={G})" + tag, lambda x, a, b, g=G: ops.group_norm(x, g, a, b), [
            _rand(rng, (2 * C, H, W)), _rand(rng, (2 * C,)), _rand(rng, (2 * C,))]
        yield "avg_pool2x2" + tag, ops.avg_pool2x2, [_rand(rng, shape)]
        yield "global_avg_pool" + tag, ops.global_avg_pool, [_rand(rng, shape)]
        yield "global_max_pool" + tag, ops.global_max_pool, [_rand(rng, shape)]
        yield "channel_mean" + tag, ops.channel_mean, [_rand(rng, shape)]
        yield "channel_max" + tag, ops.channel_max, [_rand(rng, shape)]
        f = int(rng.integers(1, 4))
        yield f"upsample_nearest(x{f})" + tag, lambda a, f=f: ops.upsample_nearest(a, f), [
            _rand(rng, shape)]

        Bsz, L, G, Dg, N = (int(v) for v in rng.integers(1, 4, size=5))
        seq = (Bsz, L, G, Dg)
        yield f"selective_scan{seq}N{N}", selective_scan, [
            _rand(rng, seq), _rand(rng, seq, 0.05, 1.0), _rand(rng, (G, Dg, N), -2.0, -0.2),
            _rand(rng, (Bsz, L, G, N)), _rand(rng, (Bsz, L, G, N)), _rand(rng, (G, Dg))]

        K = int(rng.integers(2, 5))
        labels = rng.integers(1, K + 1, size=(H, W))
        mask = rng.random((H, W)) < 0.6
        mask.flat[0] = True
        yield f"masked_cross_entropy(K={K})" + tag, (
            lambda z, lab=labels, m=mask: masked_cross_entropy(z, lab, m)), [
            _rand(rng, (K, H, W), -3, 3)]


def run_op_suite(seed=0, shapes_per_op=5):
    rng = np.random.default_rng(seed)
    results = []
    for case, fn, inputs in op_cases(rng, shapes_per_op):
        results.extend(check_gradients(fn, inputs, case=case, rng=rng))
    return results


def tiny_model_config(**overrides):
    from .network import ModelConfig
    kw = dict(D=8, P0=2, groups_spe=2, groups_spa=2, state_size=2, num_classes=3,
              gn_groups=4, tau=4)
    kw.update(overrides)
    return ModelConfig(**kw)


def generic_point(store, rng, spread=0.2):
    """Move parameters off their initial values.

    Initial timescales are 1e-3..0.1, which scales some gradients down to ~1e-9,
    below what central differences resolve in float64; checks run at a point
    where every path carries an O(1) signal.
    """
    for p in store:
        if p.name.endswith(".b_dt"):
            p.data = rng.uniform(-1.0, 1.0, p.shape)
        else:
            p.data = p.data + rng.normal(0.0, spread, p.shape)


def run_model_suite(level="model", seed=0, max_entries=3):
    """Gradient checks through one HS-Mamba block or the full network."""
    from .network import HSMamba
    from .train import masked_cross_entropy

    rng = np.random.default_rng(seed)
    cfg = tiny_model_config()
    model = HSMamba(cfg, C_in=4, seed=seed)
    generic_point(model.store, rng)
    results = []
    if level == "block":
        block = model.blocks[0]
        x = Tensor(rng.standard_normal((cfg.D, 8, 8)))
        params = [p for p in model.store if p.name.startswith(block.prefix)]
        return check_gradients(lambda x, *_: block(x), [x] + params, case="hs_mamba_block",
                               max_entries=max_entries, rng=rng)
    cube = rng.standard_normal((4, 8, 8))
    labels = rng.integers(1, cfg.num_classes + 1, size=(8, 8))
    mask = rng.random((8, 8)) < 0.5
    x = Tensor(cube)
    params = list(model.store)
    results.extend(check_gradients(
        lambda x, *_: masked_cross_entropy(model.forward(x), labels, mask),
        [x] + params, case="model", max_entries=max_entries, rng=rng))
    return results
