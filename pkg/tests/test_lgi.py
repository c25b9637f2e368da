import numpy as np
import pytest

from hsmamba import ops
from hsmamba.errors import ConfigurationError
from hsmamba.gradcheck import check_gradients
from hsmamba.lgi import (LGIAttention, SpaAttnParams, SpeAttnParams, apply_global_gates,
                         init_spe_params, spa_extended_atten, spe_compressed_atten)
from hsmamba.network import ModelConfig, count_params
from hsmamba.tensor import ParamStore, Tensor


def spe_params(D, tau=4, seed=0):
    return init_spe_params(ParamStore(), "spe", D, tau, np.random.default_rng(seed))


def test_constant_input_pools_to_constant():
    F = np.full((4, 3, 3), 2.5)
    np.testing.assert_array_equal(ops.global_avg_pool(F).data.ravel(), 2.5)
    np.testing.assert_array_equal(ops.global_max_pool(F).data.ravel(), 2.5)


def test_zero_spe_params_give_half():
    D = 8
    p = SpeAttnParams(np.zeros((2, 2 * D)), np.zeros(2), np.zeros((D, 2)), np.zeros(D))
    W = spe_compressed_atten(np.random.default_rng(0).standard_normal((D, 4, 4)), p).data
    assert W.shape == (D, 1, 1)
    np.testing.assert_array_equal(W, 0.5)


def test_pooled_descriptor_matches_full_scan():
    F = np.random.default_rng(1).standard_normal((3, 5, 4))
    avg = [sum(F[c].ravel()) / F[c].size for c in range(3)]
    mx = [max(F[c].ravel()) for c in range(3)]
    np.testing.assert_allclose(ops.global_avg_pool(F).data.ravel(), avg, atol=1e-15)
    np.testing.assert_array_equal(ops.global_max_pool(F).data.ravel(), mx)


def test_spe_requires_divisible_channels():
    with pytest.raises(ConfigurationError):
        init_spe_params(ParamStore(), "spe", 6, 4, np.random.default_rng(0))


def test_single_channel_mean_equals_max():
    F = np.random.default_rng(2).standard_normal((1, 4, 4))
    np.testing.assert_array_equal(ops.channel_mean(F).data, F)
    np.testing.assert_array_equal(ops.channel_max(F).data, F)


def test_channel_pools_at_a_pixel():
    F = np.array([2.0, 4.0]).reshape(2, 1, 1)
    assert (ops.channel_mean(F).data.item(), ops.channel_max(F).data.item()) == (3.0, 4.0)


@pytest.mark.parametrize("hw", [5, 9, 16])
def test_spa_output_extent(hw):
    p = SpaAttnParams(np.random.default_rng(3).standard_normal((1, 2, 3, 3)), np.zeros(1))
    W = spa_extended_atten(np.random.default_rng(4).standard_normal((6, hw, hw)), p)
    assert W.shape == (1, hw, hw)


def test_zero_gates_are_identity():
    rng = np.random.default_rng(5)
    a, b = rng.standard_normal((3, 4, 4)), rng.standard_normal((3, 4, 4))
    x, y = apply_global_gates(a, b, np.zeros((3, 1, 1)), np.zeros((1, 4, 4)))
    np.testing.assert_array_equal(x.data, a)
    np.testing.assert_array_equal(y.data, b)


def test_unit_gate_doubles_channel():
    a = np.random.default_rng(6).standard_normal((3, 2, 2))
    W = np.zeros((3, 1, 1))
    W[1] = 1.0
    x, _ = apply_global_gates(a, a, W, np.zeros((1, 2, 2)))
    np.testing.assert_array_equal(x.data[1], 2 * a[1])
    np.testing.assert_array_equal(x.data[0], a[0])


def test_gated_output_bounded_by_twice_input():
    store = ParamStore()
    lgi = LGIAttention(store, "lgi", 8, 4, np.random.default_rng(7))
    F = np.random.default_rng(8).standard_normal((8, 6, 6)) * 3
    Ws, Wp = lgi(F)
    x, y = apply_global_gates(F, F, Ws, Wp)
    bound = 2 * np.abs(F).max()
    assert np.abs(x.data).max() <= bound and np.abs(y.data).max() <= bound


def test_spe_gate_invariant_to_spatial_permutation():
    p = spe_params(8)
    rng = np.random.default_rng(9)
    F = rng.standard_normal((8, 5, 5))
    perm = rng.permutation(25)
    Fp = F.reshape(8, -1)[:, perm].reshape(8, 5, 5)
    np.testing.assert_allclose(spe_compressed_atten(F, p).data,
                               spe_compressed_atten(Fp, p).data, rtol=0, atol=1e-15)


def test_spa_gate_translation_equivariant_in_interior():
    p = SpaAttnParams(np.random.default_rng(10).standard_normal((1, 2, 3, 3)), np.zeros(1))
    F = np.zeros((3, 16, 16))
    F[:, 4:10, 4:10] = np.random.default_rng(11).standard_normal((3, 6, 6))
    a = spa_extended_atten(F, p).data
    b = spa_extended_atten(np.roll(F, (2, 3), axis=(1, 2)), p).data
    np.testing.assert_allclose(np.roll(a, (2, 3), axis=(1, 2)), b, rtol=0, atol=1e-15)


def test_attention_gradients():
    store = ParamStore()
    rng = np.random.default_rng(12)
    lgi = LGIAttention(store, "lgi", 8, 4, rng)
    x = Tensor(rng.standard_normal((8, 5, 5)))

    def fn(x, *_):
        a, b = lgi(x)
        return ops.add(ops.mul(x, a), ops.mul(x, b))

    res = check_gradients(fn, [x] + list(store), case="lgi", rng=rng)
    assert max(r.rel_error for r in res) <= 1e-4


@pytest.mark.xfail(strict=True, reason="at D=128 one block's attention alone is ~12.5K "
                                       "scalars; see the decisions ledger")
def test_attention_parameter_share_below_one_percent():
    cfg = ModelConfig(D=128)
    total = count_params(cfg, 200)
    no_lgi = count_params(ModelConfig(D=128, use_lgi=False), 200)
    assert (total - no_lgi) / total < 0.01
