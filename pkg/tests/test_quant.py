import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from _oracles import numeric_grad
from gtc import tensor as T
from gtc.quant import (
    DEFAULT_EPS_ZERO,
    QuantParams,
    bit_cost,
    bit_cost_term,
    code_width,
    grad_bit_cost,
    grad_quantize,
    layer_bits,
    q_transform,
    quantize,
    quantize_tensor,
    quantize_weight,
    round_half_away,
    signum_eps,
)

EXAMPLE_W = np.array([[2.5, 1, 1.3, 0.75], [1, -2.5, -1.2, -0.9]], np.float32)
EXAMPLE_P = QuantParams(-1.0, -3.5)
EXAMPLE_WQ = np.array([[2.0 ** -6, 2.0 ** -1, 2.0 ** -2, 1.0], [2.0 ** -1, -2.0 ** -6, -2.0 ** -2, -1.0]])

magnitudes = st.floats(1e-6, 1e6)
weights = st.one_of(magnitudes, magnitudes.map(lambda v: -v), st.just(0.0))
weight_arrays = arrays(np.float32, st.integers(1, 40), elements=weights.map(np.float32))
thetas = st.tuples(st.floats(-4, 4), st.floats(-2, 2))


def layer_with_range(span: int):
    """A layer whose exponents cover exactly [0, span] under the identity quantizer."""
    return quantize_tensor(np.array([1.0, 2.0 ** span], np.float32), QuantParams())


def test_q_transform_examples():
    assert q_transform(2.5, EXAMPLE_P) == pytest.approx(-1 - 3.5 * math.log2(2.5))
    assert float(q_transform(2.5, EXAMPLE_P)) == pytest.approx(-5.6268, abs=1e-4)
    assert q_transform(1.0, QuantParams(0.7, -2.0)) == pytest.approx(0.7)
    assert q_transform(8.0, QuantParams(0.0, 1.0)) == 3.0


def test_signum_eps_examples():
    eps = 2.0 ** -24
    assert signum_eps(1e-30, eps) == 0
    assert signum_eps(-0.5, eps) == -1
    assert signum_eps(eps, eps) == 1
    assert signum_eps(-eps, eps) == -1
    assert signum_eps(np.nextafter(eps, 0), eps) == 0


def test_quantize_weight_examples():
    assert quantize_weight(0.37, QuantParams(0.0, 0.0)) == (1, 0)
    assert quantize_weight(-4.0, QuantParams(0.0, 1.0)) == (-1, 2)
    assert quantize_weight(1e-30, QuantParams()) == (0, None)


def test_round_half_away_from_zero():
    np.testing.assert_array_equal(round_half_away(np.array([0.5, -0.5, 2.5, -2.5, 1.49, -1.51])),
                                  [1, -1, 3, -3, 1, -2])


def test_example_matrix_exact():
    q = quantize_tensor(EXAMPLE_W, EXAMPLE_P)
    np.testing.assert_array_equal(q.dequantize(), EXAMPLE_WQ)
    np.testing.assert_array_equal(q.exponents, [[-6, -1, -2, 0], [-1, -6, -2, 0]])
    np.testing.assert_array_equal(q.signs, [[1, 1, 1, 1], [1, -1, -1, -1]])
    assert (q.m, q.M, q.bits) == (-6, 0, 4)


def test_constant_layer_is_one_bit():
    q = quantize_tensor(np.ones(7, np.float32), QuantParams(0.0, 1.0))
    assert (q.m, q.M, q.bits) == (0, 0, 1)


def test_range_matches_scalar_scan():
    rng = np.random.default_rng(0)
    for _ in range(20):
        w = (rng.normal(size=50) * 10.0 ** rng.uniform(-3, 3, 50)).astype(np.float32)
        w[rng.random(50) < 0.1] = 0
        p = QuantParams(float(rng.uniform(-3, 3)), float(rng.uniform(-2, 2)))
        exps = [quantize_weight(float(v), p)[1] for v in w]
        exps = [e for e in exps if e is not None]
        q = quantize_tensor(w, p)
        assert (q.m, q.M) == (min(exps), max(exps))
        assert q.bits == 1 + math.ceil(math.log2(max(exps) - min(exps) + 1))


def test_all_zero_layer():
    q = quantize_tensor(np.zeros(5, np.float32), QuantParams())
    assert q.all_zero and q.bits == 1 and q.m is None
    assert grad_bit_cost([np.zeros(5)], [QuantParams()]) == [(0.0, 0.0)]


def test_empty_tensor_rejected():
    with pytest.raises(ValueError):
        quantize_tensor(np.zeros(0, np.float32), QuantParams())


@pytest.mark.parametrize("t1,t2,eps", [(math.nan, 1, 1e-3), (0, math.inf, 1e-3), (0, 1, 0.0)])
def test_quant_params_validated(t1, t2, eps):
    with pytest.raises(ValueError):
        QuantParams(t1, t2, eps)


def test_bit_cost_examples():
    assert bit_cost([layer_with_range(1)]) == 4
    assert bit_cost([layer_with_range(3)] + [layer_with_range(1)] * 3) == 20
    assert [layer_with_range(s).bits for s in (3, 1)] == [3, 2]
    assert bit_cost([layer_with_range(0)] * 2) == 4
    with pytest.raises(ValueError):
        bit_cost([])


def test_layer_bits_and_code_width():
    assert layer_bits(-6, 0) == 4
    assert code_width(-6, 0) == 3
    assert layer_bits(0, 0) == 1 and code_width(0, 0) == 1
    assert layer_bits(None, None) == 1 and code_width(None, None) == 0
    # four levels: the metric says 3 bits, storage needs a 3-bit code plus the sign
    assert layer_bits(0, 3) == 3 and code_width(0, 3) == 3


def test_grad_quantize_examples():
    dw, _, _ = grad_quantize(4.0, QuantParams(0.0, 1.0))
    assert dw == 1.0
    dw, d1, d2 = grad_quantize(0.3, QuantParams(0.5, 0.0))
    assert dw == 0.0 and d1 != 0.0
    assert grad_quantize(0.0, QuantParams()) == (0.0, 0.0, 0.0)


def test_grad_quantize_matches_surrogate_differences():
    rng = np.random.default_rng(1)

    def surrogate(w, t1, t2):
        return math.copysign(2.0 ** (t1 + t2 * math.log2(abs(w))), w)

    for _ in range(50):
        w = float(rng.choice([-1, 1]) * 10 ** rng.uniform(-2, 1))
        t1, t2 = float(rng.uniform(-2, 2)), float(rng.uniform(-1.5, 1.5))
        up = float(rng.normal())
        got = grad_quantize(w, QuantParams(t1, t2), up, rounding="none")
        h = 1e-6
        want = (
            up * (surrogate(w + h * abs(w), t1, t2) - surrogate(w - h * abs(w), t1, t2)) / (2 * h * abs(w)),
            up * (surrogate(w, t1 + h, t2) - surrogate(w, t1 - h, t2)) / (2 * h),
            up * (surrogate(w, t1, t2 + h) - surrogate(w, t1, t2 - h)) / (2 * h),
        )
        np.testing.assert_allclose(got, want, rtol=1e-4, atol=1e-9)


def test_grad_bit_cost_vanishes_without_range():
    assert grad_bit_cost([np.array([0.3])], [QuantParams(0.2, 0.7)]) == [(0.0, 0.0)]
    assert grad_bit_cost([np.full(6, -0.3)], [QuantParams(0.2, 0.7)]) == [(0.0, 0.0)]


def surrogate_cost(w, t1, t2):
    q = t1 + t2 * np.log2(np.abs(w))
    return 2.0 ** (1.0 + math.log2(q.max() - q.min() + 1.0))


def test_grad_bit_cost_matches_surrogate_differences():
    rng = np.random.default_rng(2)
    for _ in range(30):
        w = rng.normal(size=20) * 10 ** rng.uniform(-1, 1, 20)
        t1, t2 = float(rng.uniform(-2, 2)), float(rng.uniform(-1.5, 1.5))
        [(d1, d2)] = grad_bit_cost([w], [QuantParams(t1, t2)], rounding="none")
        h = 1e-3
        n1 = (surrogate_cost(w, t1 + h, t2) - surrogate_cost(w, t1 - h, t2)) / (2 * h)
        n2 = (surrogate_cost(w, t1, t2 + h) - surrogate_cost(w, t1, t2 - h)) / (2 * h)
        assert d1 == pytest.approx(n1, abs=1e-9)
        assert d2 == pytest.approx(n2, rel=1e-3)


def test_autodiff_quantize_matches_surrogate_differences():
    rng = np.random.default_rng(3)
    with T.default_dtype(np.float64):
        w = T.Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        t1 = T.Tensor(np.float64(0.3), requires_grad=True)
        t2 = T.Tensor(np.float64(0.8), requires_grad=True)
        r = rng.normal(size=(4, 3))

        def f():
            return float(np.sum(quantize(T.Tensor(w.data), T.Tensor(t1.data), T.Tensor(t2.data),
                                         rounding="none").data * r))

        T.backward(T.tsum(T.mul(quantize(w, t1, t2, rounding="none"), T.Tensor(r))))
        nw, n1, n2 = numeric_grad(f, [w.data, t1.data, t2.data])
    np.testing.assert_allclose(w.grad, nw, rtol=1e-3)
    assert float(t1.grad) == pytest.approx(float(n1), rel=1e-3)
    assert float(t2.grad) == pytest.approx(float(n2), rel=1e-3)


def test_autodiff_bit_cost_matches_surrogate_differences():
    rng = np.random.default_rng(4)
    with T.default_dtype(np.float64):
        # magnitudes kept away from zero so h=1e-3 stays small against log2's curvature
        w = T.Tensor(rng.choice([-1, 1], (6, 5)) * rng.uniform(0.2, 3, (6, 5)), requires_grad=True)
        b = T.Tensor(rng.choice([-1, 1], 5) * rng.uniform(0.2, 3, 5), requires_grad=True)
        t1 = T.Tensor(np.float64(-0.4), requires_grad=True)
        t2 = T.Tensor(np.float64(1.2), requires_grad=True)

        def f():
            return bit_cost_term([([T.Tensor(w.data), T.Tensor(b.data)], T.Tensor(t1.data), T.Tensor(t2.data))],
                                 rounding="none").item()

        T.backward(bit_cost_term([([w, b], t1, t2)], rounding="none"))
        nw, nb, n1, n2 = numeric_grad(f, [w.data, b.data, t1.data, t2.data])
    np.testing.assert_allclose(w.grad, nw, rtol=1e-3, atol=1e-8)
    np.testing.assert_allclose(b.grad, nb, rtol=1e-3, atol=1e-8)
    assert float(t1.grad) == pytest.approx(0.0, abs=1e-8) and float(n1) == pytest.approx(0.0, abs=1e-6)
    assert float(t2.grad) == pytest.approx(float(n2), rel=1e-3)


def test_stochastic_rounding_is_opt_in_and_seeded():
    w = np.linspace(0.1, 3, 40).astype(np.float32)
    p = QuantParams(0.3, 0.9)
    with pytest.raises(ValueError):
        quantize_tensor(w, p, rounding="stochastic")
    a = quantize_tensor(w, p, rounding="stochastic", rng=T.SeededRng(5))
    b = quantize_tensor(w, p, rounding="stochastic", rng=T.SeededRng(5))
    assert a == b
    q = 0.3 + 0.9 * np.log2(w.astype(np.float64))
    assert np.all((a.exponents == np.floor(q)) | (a.exponents == np.ceil(q)))
    assert quantize_tensor(w, p) == quantize_tensor(w, p, rounding="nearest")


@settings(max_examples=200, deadline=None)
@given(weight_arrays, thetas)
def test_dequantized_values_are_signed_powers_of_two(w, theta):
    q = quantize_tensor(w, QuantParams(*theta))
    d = q.dequantize().astype(np.float64)
    nz = d != 0
    mant, _ = np.frexp(np.abs(d[nz]))
    assert np.all(mant == 0.5)
    np.testing.assert_array_equal(np.sign(d), signum_eps(w, DEFAULT_EPS_ZERO))


@settings(max_examples=200, deadline=None)
@given(weight_arrays, thetas)
def test_bits_at_least_one_and_one_iff_single_level(w, theta):
    q = quantize_tensor(w, QuantParams(*theta))
    assert q.bits >= 1
    levels = set(q.exponents[q.signs != 0].tolist())
    assert (q.bits == 1) == (len(levels) <= 1)


@settings(max_examples=100, deadline=None)
@given(weight_arrays)
def test_ternary_regime(w):
    q = quantize_tensor(w, QuantParams(0.0, 0.0))
    assert np.all(q.exponents == 0)
    assert set(np.unique(q.dequantize()).tolist()) <= {-1.0, 0.0, 1.0}


@settings(max_examples=100, deadline=None)
@given(arrays(np.int32, st.integers(1, 30), elements=st.integers(-24, 100)),
       arrays(np.int8, 30, elements=st.sampled_from([-1, 0, 1])))
def test_identity_quantizer_is_idempotent_on_powers_of_two(exps, signs):
    w = (signs[:len(exps)] * np.ldexp(1.0, exps)).astype(np.float32)
    q = quantize_tensor(w, QuantParams(0.0, 1.0))
    np.testing.assert_array_equal(q.dequantize(), w)
    again = quantize_tensor(q.dequantize(), QuantParams(0.0, 1.0))
    assert again == q


@given(st.integers(-200, 200), st.integers(0, 300), st.integers(0, 300))
def test_bit_cost_monotone_in_range(m, r1, r2):
    assume(r1 <= r2)
    assert layer_bits(m, m + r1) <= layer_bits(m, m + r2)
    assert code_width(m, m + r1) <= code_width(m, m + r2)
