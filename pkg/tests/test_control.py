import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from postdenit.control import (
    ClassicalConfig,
    ControllerState,
    EstimatorBuffer,
    MfcConfig,
    classical_dose,
    classical_from_dict,
    combined_dose,
    controller_step,
    estimate_F,
    ip_correction,
    mfc_from_dict,
)

H = 5.0 / 1440.0
T = 1.0 / 24.0


def _buffer(ts, ys, us, window=T):
    buf = EstimatorBuffer(window)
    for t, y, u in zip(ts, ys, us):
        buf.push(t, y, u)
    return buf


def simulate_toy(F_of_t, alpha, K_p, y0, y_set, t_end, h=H, window=T):
    """iP loop on dy/dt = F(t) + alpha*u, u held between samples, y exact."""
    buf = EstimatorBuffer(window)
    y, u = y0, 0.0
    ts, es = [], []
    n = int(round(t_end / h))
    for k in range(n + 1):
        t = k * h
        buf.push(t, y, u)
        F_hat = estimate_F(buf, alpha, window, t)
        u = 0.0 if F_hat is None else ip_correction(F_hat, y - y_set, 0.0, alpha, K_p)
        ts.append(t)
        es.append(y - y_set)
        # F is piecewise constant on the sampling grid, so the step is exact
        y = y + h * (F_of_t(t + 0.5 * h) + alpha * u)
    return np.array(ts), np.array(es)


# -- classical ---------------------------------------------------------------------


def test_classical_reference_dose():
    u = classical_dose(45000, 15.0, ClassicalConfig(K=3.0, C_NO3_set=2.0))
    assert u == pytest.approx(1755.0)
    assert u / 1.5 == pytest.approx(1170.0)


def test_classical_clamps_and_zero_gain():
    assert classical_dose(45000, 1.5, ClassicalConfig(C_NO3_set=2.0)) == 0.0
    assert classical_dose(45000, 15.0, ClassicalConfig(K=0.0)) == 0.0
    with pytest.raises(ValueError):
        classical_dose(-1.0, 15.0, ClassicalConfig())


def test_config_dicts():
    assert classical_from_dict({"K": 4}) == ClassicalConfig(K=4.0)
    assert mfc_from_dict({"alpha": -0.2, "u_corr_max": None}).alpha == -0.2
    with pytest.raises(ValueError):
        mfc_from_dict({"gain": 1.0})


@pytest.mark.parametrize(
    "kw", [dict(alpha=0.0), dict(K_p=0.0), dict(T=H), dict(u_corr_max=-1.0), dict(order=2)]
)
def test_mfc_validation(kw):
    with pytest.raises(ValueError):
        replace(MfcConfig(), **kw).validate()


# -- estimator -----------------------------------------------------------------------


def test_constant_output_gives_zero():
    ts = np.arange(13) * H
    buf = _buffer(ts, np.full(13, 3.7), np.zeros(13))
    assert estimate_F(buf, -0.01, T) == pytest.approx(0.0, abs=1e-12)


@pytest.mark.parametrize("slope", [0.0, 1.0, -37.5, 1e4])
def test_ramp_gives_slope(slope):
    ts = 2.0 + np.arange(13) * H
    buf = _buffer(ts, 0.4 + slope * ts, np.zeros(13))
    assert abs(estimate_F(buf, -0.01, T) - slope) <= 1e-9 * max(1.0, abs(slope))


def test_toy_plant_constant_input():
    F0, alpha = 2.0, 0.5
    ts = np.arange(13) * H
    ys = 1.0 + (F0 + alpha * 1.0) * ts
    buf = _buffer(ts, ys, np.ones(13))
    assert estimate_F(buf, alpha, T) == pytest.approx(F0, abs=1e-3)


def test_not_ready_before_window_filled():
    buf = _buffer(np.arange(12) * H, np.arange(12.0), np.zeros(12))
    assert not buf.ready()
    assert estimate_F(buf, -0.01, T) is None
    buf.push(12 * H, 12.0, 0.0)
    assert buf.ready()


def test_buffer_rejects_non_increasing_time():
    buf = _buffer([0.0, H], [0.0, 0.0], [0.0, 0.0])
    with pytest.raises(ValueError):
        buf.push(H, 1.0, 0.0)


def test_buffer_trims_old_samples():
    buf = _buffer(np.arange(100) * H, np.zeros(100), np.zeros(100))
    assert len(buf) == 13
    assert buf.span() == pytest.approx(T)


def test_irregular_samples_still_exact_for_affine_output():
    rng = np.random.default_rng(0)
    ts = np.sort(rng.uniform(0, 2 * T, 40))
    ts = np.concatenate([[0.0], ts, [2 * T + 1e-3]])
    buf = _buffer(ts, 5.0 - 2.5 * ts, np.zeros(ts.size))
    assert estimate_F(buf, -0.01, T) == pytest.approx(-2.5, abs=1e-9)


# -- iP law and gating -----------------------------------------------------------


def test_ip_examples():
    assert ip_correction(0.0, 0.0, 0.0, -0.01, 24.0) == 0.0
    assert ip_correction(0.2, 0.1, 0.0, -0.01, 2.0) == pytest.approx(40.0)
    with pytest.raises(ValueError):
        ip_correction(0.2, 0.1, 0.0, 0.0, 2.0)


def test_gating_rules():
    cfg = MfcConfig(u_corr_max=100.0)
    assert combined_dose(500.0, 80.0, 0.7, 0.8, cfg) == (500.0, 0.0)
    assert combined_dose(500.0, -5.0, 0.9, 0.8, cfg) == (500.0, 0.0)
    assert combined_dose(500.0, 200.0, 0.9, 0.8, cfg) == (600.0, 100.0)
    assert combined_dose(500.0, None, 2.0, 0.8, cfg) == (500.0, 0.0)
    assert combined_dose(500.0, 30.0, 0.8, 0.8, cfg) == (500.0, 0.0)


@settings(max_examples=300, deadline=None)
@given(
    st.floats(min_value=1e-3, max_value=10.0),
    st.floats(min_value=-10.0, max_value=10.0),
    st.floats(min_value=-10.0, max_value=10.0),
    st.floats(min_value=0.1, max_value=100.0),
    st.floats(min_value=1e-3, max_value=1e3),
)
def test_scale_coherence(a_mag, F_hat, e, K_p, scale):
    # scaling alpha, F_hat and K_p*e together leaves the dose unchanged,
    # so u*alpha moves linearly with the common scale
    alpha = -a_mag
    u1 = ip_correction(F_hat, e, 0.0, alpha, K_p)
    u2 = ip_correction(scale * F_hat, scale * e, 0.0, scale * alpha, K_p)
    assert u2 == pytest.approx(u1, rel=1e-9, abs=1e-9)
    assert u2 * scale * alpha == pytest.approx(scale * u1 * alpha, rel=1e-9, abs=1e-9)


@settings(max_examples=300, deadline=None)
@given(
    st.floats(min_value=0.0, max_value=1e4),
    st.one_of(st.none(), st.floats(min_value=-1e5, max_value=1e5)),
    st.floats(min_value=0.0, max_value=10.0),
    st.floats(min_value=0.0, max_value=1e4),
)
def test_dose_bounds(u_ff, u_mfc, y, cap):
    total, corr = combined_dose(u_ff, u_mfc, y, 0.8, MfcConfig(u_corr_max=cap))
    assert total >= 0.0
    assert 0.0 <= corr <= cap


# -- controller step ----------------------------------------------------------------


def _run_controller(cs, Q, c_in, ys, h=H):
    outs = []
    for k, y in enumerate(ys):
        cs, out = controller_step(cs, Q, c_in, y, k * h)
        outs.append(out)
    return cs, outs


def test_disabled_mfc_is_classical():
    cs = ControllerState(mfc_enabled=False)
    _, outs = _run_controller(cs, 45000, 15.0, np.linspace(0, 3, 50))
    assert all(o.u_total == classical_dose(45000, 15.0, cs.classical) and o.u_corr == 0.0 for o in outs)


def test_warming_window_gives_feedforward_only():
    cs = ControllerState(mfc=MfcConfig(u_corr_max=1e4, T=T), mfc_enabled=True)
    _, outs = _run_controller(cs, 45000, 15.0, np.full(12, 2.0))
    assert all(o.F_hat is None and o.u_corr == 0.0 for o in outs)


def test_pinned_above_setpoint_gives_positive_correction():
    cs = ControllerState(mfc=MfcConfig(u_corr_max=1e6, T=T), mfc_enabled=True)
    _, outs = _run_controller(cs, 45000, 15.0, np.full(60, 0.9))
    ready = [o for o in outs if o.F_hat is not None]
    assert len(ready) == 60 - 12
    assert all(o.u_corr > 0.0 for o in ready)


def test_fault_holds_previous_dose():
    cs = ControllerState(mfc_enabled=True)
    cs, first = controller_step(cs, 45000, 15.0, 1.0, 0.0)
    cs2, held = controller_step(cs, 45000, 25.0, 1.0, H, fault=True)
    assert held.held and held.u_total == first.u_total
    _, held2 = controller_step(cs, 45000, 25.0, math.nan, H)
    assert held2.held and held2.u_total == first.u_total


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(min_value=0.0, max_value=3.0), min_size=20, max_size=40), st.integers(0, 10))
def test_gating_invariance(ys, shift):
    mfc = ControllerState(mfc=MfcConfig(u_corr_max=2000.0, alpha=-0.2, K_p=6.0), mfc_enabled=True)
    plain = ControllerState(mfc_enabled=False)
    for k, y in enumerate(ys):
        t = (k + shift) * H
        c_in = 15.0 + 5.0 * math.sin(k)
        mfc, a = controller_step(mfc, 45000, c_in, y, t)
        plain, b = controller_step(plain, 45000, c_in, y, t)
        if y <= 0.8:
            assert a.u_total == b.u_total


# -- closed loop on the ultra-local toy plant -------------------------------------------


def test_closed_loop_follows_exponential_with_fine_sampling():
    alpha, K_p, F0 = -0.01, 24.0, 3.0
    h = 30.0 / 86400.0
    ts, es = simulate_toy(lambda t: F0, alpha, K_p, 2.0, 0.8, 0.3, h=h)
    start = int(round(T / h)) + 1
    e0 = es[start]
    assert abs(e0) > 0.1
    for k in range(start, start + int(round(1.5 / 24 / h))):
        expect = e0 * math.exp(-K_p * (ts[k] - ts[start]))
        assert es[k] == pytest.approx(expect, rel=0.01, abs=1e-9)


def test_closed_loop_recovers_after_disturbance_jumps():
    alpha, K_p = -0.01, 24.0
    F = lambda t: 2.0 if (t % 0.5) < 0.25 else -1.5  # noqa: E731
    ts, es = simulate_toy(F, alpha, K_p, 1.5, 0.8, 1.0)
    for jump in (0.25, 0.5, 0.75):
        late = (ts > jump + 0.2) & (ts < jump + 0.25 - 1e-9)
        assert np.max(np.abs(es[late])) < 1e-3
