import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from dmacast.wavelets import (DEFAULT_CANDIDATES, WAVELETS, ScalogramTransformer, UndefinedRatioError,
                              batched_scalograms, cwt, cwt_operator, entropy_energy_ratio, eval_wavelet,
                              get_wavelet, pad_width, scalogram_stack, select_wavelet)
from oracles import brute_cwt, gaussian_derivative

SCALES = tuple(range(1, 25))


def _quad(name):
    t = np.arange(-8.0, 8.0 + 5e-4, 1e-3)
    v = eval_wavelet(name, t)
    return np.trapezoid(v, t), np.sqrt(np.trapezoid(v * v, t))


@pytest.mark.parametrize("name", sorted(WAVELETS))
def test_admissible_and_unit_norm(name):
    mean, norm = _quad(name)
    assert abs(mean) < 1e-8
    assert abs(norm - 1.0) < 1e-6


@pytest.mark.parametrize("order", range(1, 9))
def test_gaus_matches_symbolic_derivative(order):
    t = np.linspace(-10, 10, 2001)
    np.testing.assert_allclose(eval_wavelet(f"gaus{order}", t), gaussian_derivative(order)(t), atol=1e-14)


def test_mexican_hat_is_negated_gaus2():
    t = np.linspace(-5, 5, 101)
    np.testing.assert_allclose(eval_wavelet("mexican_hat", t), -eval_wavelet("gaus2", t))
    assert eval_wavelet("mexican_hat", 0.0) > 0


def test_support_bounds_tail():
    for w in WAVELETS.values():
        t = np.linspace(w.support, w.support + 20, 500)
        peak = np.abs(w(np.linspace(-w.support, w.support, 4001))).max()
        assert np.abs(w(t)).max() < 1e-10 * peak * 1.01
        assert np.abs(w(-t)).max() < 1e-10 * peak * 1.01


def test_unknown_wavelet():
    with pytest.raises(ValueError, match="unknown wavelet"):
        get_wavelet("haar")


@pytest.mark.parametrize("order", [1, 4, 8])
def test_cwt_no_pad_matches_bruteforce(order):
    x = np.random.default_rng(order).normal(size=64)
    got = cwt(x, SCALES, f"gaus{order}", pad="none").coeffs
    ref = brute_cwt(x, SCALES, gaussian_derivative(order))
    assert np.abs(got - ref).max() <= 1e-9 * np.abs(ref).max()


@pytest.mark.parametrize("name", ["gaus2", "morlet_real"])
def test_cwt_reflect_matches_padded_bruteforce(name):
    x = np.random.default_rng(7).normal(size=80)
    w = get_wavelet(name)
    got = cwt(x, SCALES, name).coeffs
    ref = brute_cwt(x, SCALES, w, pad_width(SCALES, w))
    assert np.abs(got - ref).max() <= 1e-9 * np.abs(ref).max()


def test_cwt_shape_and_errors():
    s = cwt(np.ones(30), range(1, 5))
    assert s.coeffs.shape == (4, 30)
    with pytest.raises(ValueError):
        cwt([])
    with pytest.raises(ValueError):
        cwt([1.0, np.nan, 2.0])
    with pytest.raises(ValueError):
        cwt_operator(10, SCALES, pad="zero")


def test_constant_signal_interior_vanishes():
    # zero-mean wavelet: away from the edges a constant signal has no response
    # (scale 1 samples the wavelet too coarsely for the discrete sum to vanish)
    c = cwt(np.full(400, 3.0), range(2, 9), "gaus4", pad="none").coeffs
    assert np.abs(c[:, 150:250]).max() < 1e-9


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, 48, elements=st.floats(-100, 100)), arrays(np.float64, 48, elements=st.floats(-100, 100)),
       st.floats(-3, 3))
def test_cwt_is_linear(x, y, k):
    a = cwt(x + k * y, range(1, 7), "gaus3").coeffs
    b = cwt(x, range(1, 7), "gaus3").coeffs + k * cwt(y, range(1, 7), "gaus3").coeffs
    np.testing.assert_allclose(a, b, atol=1e-8 * (1 + np.abs(b).max()))


def test_scalogram_stack_crops_last_columns():
    rng = np.random.default_rng(0)
    f1, f2 = rng.normal(size=120), rng.normal(size=120)
    stack = scalogram_stack([f1, f2], s=24, h=24, feature_names=["a", "b"])
    assert stack.tensor.shape == (24, 24, 2)
    assert stack.feature_names == ("a", "b")
    np.testing.assert_allclose(stack.tensor[:, :, 1], cwt(f2, SCALES).coeffs[:, -24:])


def test_scalogram_stack_rejects_short_feature():
    with pytest.raises(ValueError):
        scalogram_stack([np.ones(10)], h=24)


def test_batched_matches_single():
    w = np.random.default_rng(3).normal(size=(5, 48))
    out = batched_scalograms(w, h=24, s=24, wavelet="gaus5")
    for i in range(5):
        np.testing.assert_allclose(out[i], cwt(w[i], SCALES, "gaus5").coeffs[:, -24:], atol=1e-12)
    np.testing.assert_allclose(ScalogramTransformer("gaus5").fit(w).transform(w), out)


def test_entropy_energy_ratio_hand_case():
    # energies 1 and 3: p = (1/4, 3/4), E = 4
    c = np.array([[1.0, np.sqrt(3.0)]])
    h = -(0.25 * np.log(0.25) + 0.75 * np.log(0.75))
    assert entropy_energy_ratio(c) == pytest.approx(h / 4.0, rel=1e-12)
    with pytest.raises(UndefinedRatioError):
        entropy_energy_ratio(np.zeros((3, 3)))


def test_entropy_energy_ratio_scale_behaviour():
    c = np.random.default_rng(1).normal(size=(6, 6))
    # scaling by k leaves entropy unchanged and multiplies energy by k^2
    assert entropy_energy_ratio(2 * c) == pytest.approx(entropy_energy_ratio(c) / 4, rel=1e-12)


def test_select_wavelet_min_max_and_ties():
    windows = [np.sin(np.arange(24) / 3.0) + 0.1 * i for i in range(4)]
    lo = select_wavelet(DEFAULT_CANDIDATES, windows, "min")
    hi = select_wavelet(DEFAULT_CANDIDATES, windows, "max")
    assert lo in DEFAULT_CANDIDATES and hi in DEFAULT_CANDIDATES and lo != hi
    assert select_wavelet(["gaus3", "gaus3"], windows) == "gaus3"
    with pytest.raises(ValueError):
        select_wavelet([], windows)
    with pytest.raises(UndefinedRatioError):
        select_wavelet(["gaus1"], [np.zeros(24)])
