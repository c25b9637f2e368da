import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hsmamba.errors import ModeError, ParameterError
from hsmamba.gradcheck import check_gradients
from hsmamba.ssm import (DiscretizedPair, associative_scan, benchmark_scan, discretize_zoh,
                         init_ssm_params, kernel_scan, recurrent_scan, scaling_exponent,
                         selective_scan, selective_scan_s6, ssm_kernel, write_bench_csv)
from hsmamba.tensor import ParamStore, Tensor, no_grad


def naive_s6(p, x):
    """Triple loop over time, channel and state; every projection written out by hand."""
    L, D = x.shape
    N = p["log_A"].shape[1]
    y = np.zeros((L, D))
    h = np.zeros((D, N))
    for t in range(L):
        Bt = [sum(p["W_B"][n, d] * x[t, d] for d in range(D)) + p["b_B"][n] for n in range(N)]
        Ct = [sum(p["W_C"][n, d] * x[t, d] for d in range(D)) + p["b_C"][n] for n in range(N)]
        for d in range(D):
            pre = sum(p["W_dt"][d, e] * x[t, e] for e in range(D)) + p["b_dt"][d]
            dt = np.log1p(np.exp(pre))
            acc = 0.0
            for n in range(N):
                a = -np.exp(p["log_A"][d, n])
                z = dt * a
                bbar = (np.exp(z) - 1.0) / z * dt * Bt[n]
                h[d, n] = np.exp(z) * h[d, n] + bbar * x[t, d]
                acc += Ct[n] * h[d, n]
            y[t, d] = acc + p["D_skip"][d] * x[t, d]
    return y


def random_s6(rng, D, N):
    store = ParamStore()
    params = init_ssm_params(store, "s6", D, N, rng)
    for prm in store:
        prm.data = prm.data + rng.normal(0, 0.3, prm.shape)
    return params, {p.name.split(".")[-1]: p.data for p in store}


# -------------------------------------------------------------------- ZOH

def test_zoh_closed_form():
    pair = discretize_zoh(-1.0, 1.0, np.log(2.0))
    assert abs(pair.A_bar - 0.5) < 1e-15
    assert abs(pair.B_bar - 0.5) < 1e-15


def test_zoh_limit_branch():
    pair = discretize_zoh(1e-12, 2.0, 0.5)
    assert pair.A_bar == pytest.approx(1.0, abs=1e-12)
    assert pair.B_bar == pytest.approx(1.0, abs=1e-12)


def test_zoh_simplified_flag():
    pair = discretize_zoh(-3.0, 2.0, 0.1, exact=False)
    assert pair.B_bar == pytest.approx(0.2, abs=1e-15)


def test_zoh_rejects_nonpositive_delta():
    with pytest.raises(ParameterError):
        discretize_zoh(-1.0, 1.0, 0.0)


@settings(max_examples=50, deadline=None)
@given(st.floats(-5, -1e-3), st.floats(1e-3, 2.0))
def test_abar_inside_unit_interval(a, dt):
    assert 0 < discretize_zoh(a, 1.0, dt).A_bar < 1


# -------------------------------------------------------------- LTI scans

def test_recurrent_memoryless():
    pair = DiscretizedPair(np.array([0.0]), np.array([1.0]))
    np.testing.assert_array_equal(recurrent_scan(pair, np.array([1.0]), [3.0, 5.0]), [3.0, 5.0])


def test_recurrent_hand_decay():
    pair = DiscretizedPair(np.array([0.5]), np.array([1.0]))
    np.testing.assert_array_equal(recurrent_scan(pair, np.array([1.0]), [1.0, 0.0, 0.0]),
                                  [1.0, 0.5, 0.25])


def test_recurrent_matches_dense_matrix_oracle():
    rng = np.random.default_rng(0)
    A, B, C = -rng.uniform(0.1, 2, 2), rng.standard_normal(2), rng.standard_normal(2)
    pair = discretize_zoh(A, B, 0.3)
    x = rng.standard_normal(20)
    Abar = np.diag(pair.A_bar)
    h = np.zeros(2)
    expect = []
    for xt in x:
        h = Abar @ h + pair.B_bar * xt
        expect.append(C @ h)
    np.testing.assert_allclose(recurrent_scan(pair, C, x), expect, rtol=0, atol=1e-13)


def test_kernel_closed_form():
    pair = DiscretizedPair(np.array([0.5]), np.array([1.0]))
    np.testing.assert_array_equal(ssm_kernel(pair, np.array([1.0]), 3), [1.0, 0.5, 0.25])


def test_kernel_impulse_response():
    rng = np.random.default_rng(1)
    pair = discretize_zoh(-rng.uniform(0.1, 2, 4), rng.standard_normal(4), 0.2)
    C = rng.standard_normal(4)
    x = np.zeros(10)
    x[0] = 1.0
    np.testing.assert_allclose(kernel_scan(pair, C, x), ssm_kernel(pair, C, 10), atol=1e-15)


def test_kernel_vs_recurrent_L64():
    rng = np.random.default_rng(2)
    pair = discretize_zoh(-rng.uniform(0.05, 3, 6), rng.standard_normal(6), 0.1)
    C, x = rng.standard_normal(6), rng.standard_normal(64)
    assert np.max(np.abs(kernel_scan(pair, C, x) - recurrent_scan(pair, C, x))) <= 1e-10


def test_kernel_rejects_time_varying():
    pair = DiscretizedPair(np.full((3, 2), 0.5), np.ones((3, 2)))
    with pytest.raises(ModeError):
        ssm_kernel(pair, np.ones(2), 3)


def test_recurrent_empty_input():
    pair = DiscretizedPair(np.array([0.5]), np.array([1.0]))
    assert recurrent_scan(pair, np.array([1.0]), np.zeros(0)).shape == (0,)


def test_associative_scan_matches_loop():
    rng = np.random.default_rng(3)
    a, b = rng.uniform(0, 1, (37, 3)), rng.standard_normal((37, 3))
    _, h = associative_scan(a, b)
    ref = np.zeros(3)
    for t in range(37):
        ref = a[t] * ref + b[t]
        np.testing.assert_allclose(h[t], ref, rtol=1e-12, atol=1e-12)


def test_state_bounded_on_long_sequence():
    rng = np.random.default_rng(4)
    pair = discretize_zoh(-rng.uniform(0.01, 1, 4), rng.standard_normal(4), 0.05)
    x = rng.uniform(-1, 1, 10_000)
    bound = np.abs(pair.B_bar) / (1 - np.abs(pair.A_bar))
    h = np.zeros(4)
    for xt in x:
        h = pair.A_bar * h + pair.B_bar * xt
        assert np.all(np.abs(h) <= bound + 1e-12)


# ---------------------------------------------------------------- S6 scan

def test_s6_matches_naive_triple_loop():
    rng = np.random.default_rng(5)
    params, raw = random_s6(rng, 2, 4)
    x = rng.standard_normal((8, 2))
    y = selective_scan_s6(params, x).data
    assert np.max(np.abs(y - naive_s6(raw, x))) <= 1e-12


def test_s6_single_step_formula():
    rng = np.random.default_rng(6)
    params, raw = random_s6(rng, 3, 2)
    x = rng.standard_normal((1, 3))
    Bt = raw["W_B"] @ x[0] + raw["b_B"]
    Ct = raw["W_C"] @ x[0] + raw["b_C"]
    dt = np.log1p(np.exp(raw["W_dt"] @ x[0] + raw["b_dt"]))
    A = -np.exp(raw["log_A"])
    z = dt[:, None] * A
    bbar = np.expm1(z) / z * dt[:, None] * Bt[None]
    expect = (bbar * x[0][:, None] * Ct[None]).sum(1) + raw["D_skip"] * x[0]
    np.testing.assert_allclose(selective_scan_s6(params, x).data[0], expect, atol=1e-13)


def test_s6_vanishing_timescale_is_pure_skip():
    rng = np.random.default_rng(7)
    params, raw = random_s6(rng, 3, 4)
    params.W_dt.data[:] = 0.0
    params.b_dt.data[:] = -60.0
    x = rng.standard_normal((12, 3))
    np.testing.assert_allclose(selective_scan_s6(params, x).data, raw["D_skip"] * x,
                               atol=1e-20)


def test_s6_zeroed_projections_reduce_to_lti():
    rng = np.random.default_rng(8)
    params, raw = random_s6(rng, 2, 3)
    for w in (params.W_B, params.W_C, params.W_dt):
        w.data[:] = 0.0
    x = rng.standard_normal((16, 2))
    y = selective_scan_s6(params, x).data
    dt = np.log1p(np.exp(raw["b_dt"]))
    for d in range(2):
        pair = discretize_zoh(-np.exp(raw["log_A"][d]), raw["b_B"], dt[d])
        ref = recurrent_scan(pair, raw["b_C"], x[:, d]) + raw["D_skip"][d] * x[:, d]
        np.testing.assert_allclose(y[:, d], ref, rtol=0, atol=1e-13)


@pytest.mark.parametrize("method", ["sequential", "associative"])
def test_streaming_path_matches_taped_path(method):
    rng = np.random.default_rng(9)
    params, _ = random_s6(rng, 3, 4)
    x = rng.standard_normal((2, 40, 3))
    taped = selective_scan_s6(params, Tensor(x, requires_grad=True)).data
    with no_grad():
        fast = selective_scan_s6(params, x, method=method).data
    np.testing.assert_allclose(fast, taped, rtol=0, atol=1e-10)


@pytest.mark.parametrize("exact", [True, False])
def test_selective_scan_gradients(exact):
    rng = np.random.default_rng(10)
    B, L, G, Dg, N = 2, 6, 2, 2, 3
    inputs = [Tensor(rng.standard_normal((B, L, G, Dg))),
              Tensor(rng.uniform(0.05, 1, (B, L, G, Dg))),
              Tensor(-rng.uniform(0.2, 2, (G, Dg, N))),
              Tensor(rng.standard_normal((B, L, G, N))),
              Tensor(rng.standard_normal((B, L, G, N))),
              Tensor(rng.standard_normal((G, Dg)))]
    fn = lambda *a: selective_scan(*a, exact=exact)  # noqa: E731
    res = check_gradients(fn, inputs, case="scan", rng=rng)
    assert max(r.rel_error for r in res) <= 1e-4


def test_s6_parameter_gradients_full_scan():
    rng = np.random.default_rng(11)
    store = ParamStore()
    params = init_ssm_params(store, "s6", 3, 2, rng)
    x = Tensor(rng.standard_normal((16, 3)))
    res = check_gradients(lambda x, *_: selective_scan_s6(params, x), [x] + list(store),
                          case="s6", rng=rng)
    assert max(r.rel_error for r in res) <= 1e-4


# -------------------------------------------------------------- benchmark

def test_benchmark_zero_repeats():
    assert benchmark_scan([16, 32], 1, 1, 0) == []


def test_benchmark_smallest_case_and_csv():
    rows = benchmark_scan([8, 16, 32], 1, 1, 2)
    assert all(r[1] > 0 for r in rows)
    assert [r[0] for r in rows] == [8, 16, 32]
    buf = io.StringIO()
    write_bench_csv(rows, buf)
    assert buf.getvalue().splitlines()[0] == "L,mean_seconds,std_seconds"


def test_scaling_exponent_recovers_power():
    rows = [(L, 3e-7 * L ** 1.5, 0.0) for L in (100, 200, 400, 800)]
    assert scaling_exponent(rows) == pytest.approx(1.5, abs=1e-12)
