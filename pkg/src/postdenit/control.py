"""Methanol dosing: feedforward law on the nitrate load plus a model-free iP add-on.

The add-on works on the first-order ultra-local model ``dy/dt = F + alpha*u``
with ``y`` the effluent nitrite and ``u`` its own dose correction. ``F`` is
re-estimated every control period from a sliding window of past samples,
then the intelligent proportional law picks ``u`` so that the tracking error
obeys ``de/dt = -K_p e``.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np


@dataclass(frozen=True)
class ClassicalConfig:
    K: float = 3.0
    C_NO3_set: float = 1.25

    def validate(self) -> None:
        if self.K < 0 or self.C_NO3_set < 0:
            raise ValueError("control.classical: K and C_NO3_set must be >= 0")


@dataclass(frozen=True)
class MfcConfig:
    alpha: float = -0.3
    K_p: float = 24.0
    T: float = 2.0 / 24.0
    y_set: float = 0.8
    # None: resolved by the scenario runner to half the nominal feedforward dose
    u_corr_max: float | None = None
    dt_ctrl: float = 5.0 / 1440.0
    order: int = 1

    def validate(self) -> None:
        if self.order != 1:
            raise ValueError("control.mfc.order: only first-order ultra-local models are supported")
        if self.alpha == 0 or not math.isfinite(self.alpha):
            raise ValueError("control.mfc.alpha must be finite and nonzero")
        if not self.K_p > 0:
            raise ValueError("control.mfc.K_p must be > 0")
        if not self.dt_ctrl > 0:
            raise ValueError("control.mfc.dt_ctrl must be > 0")
        if self.T < 2.0 * self.dt_ctrl - 1e-12:
            raise ValueError("control.mfc.T must span at least two control periods")
        if self.u_corr_max is not None and self.u_corr_max < 0:
            raise ValueError("control.mfc.u_corr_max must be >= 0")


def _from_dict(cls, d: dict, section: str):
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"unknown {section} keys: {sorted(unknown)}")
    types = {f.name: f.type for f in fields(cls)}
    return cls(**{k: (v if v is None else int(v) if types[k] == "int" else float(v)) for k, v in d.items()})


def classical_from_dict(d: dict) -> ClassicalConfig:
    return _from_dict(ClassicalConfig, d, "control.classical")


def mfc_from_dict(d: dict) -> MfcConfig:
    return _from_dict(MfcConfig, d, "control.mfc")


def classical_dose(Q: float, C_NO3_in: float, cfg: ClassicalConfig) -> float:
    """Feedforward dose, kgCOD/d: K times the nitrate flux to remove."""
    if Q < 0:
        raise ValueError("Q must be >= 0")
    return cfg.K * Q * max(0.0, C_NO3_in - cfg.C_NO3_set) / 1000.0


class EstimatorBuffer:
    """Sliding window of (t, y, u) samples.

    ``u`` stored with a sample at ``t_k`` is the input held over
    ``(t_{k-1}, t_k]``.
    """

    def __init__(self, T: float, samples=()):
        self.T = T
        self._buf: deque = deque(samples)

    def copy(self) -> "EstimatorBuffer":
        return EstimatorBuffer(self.T, self._buf)

    def push(self, t: float, y: float, u: float) -> None:
        if self._buf and t <= self._buf[-1][0]:
            raise ValueError(f"estimator samples must be strictly increasing in time (got {t})")
        self._buf.append((t, y, u))
        # keep one sample at or before t - T so the window stays covered
        while len(self._buf) > 2 and self._buf[1][0] <= t - self.T + 1e-12:
            self._buf.popleft()

    def span(self) -> float:
        if len(self._buf) < 2:
            return 0.0
        return self._buf[-1][0] - self._buf[0][0]

    def ready(self) -> bool:
        return len(self._buf) >= 2 and self.span() >= self.T - 1e-9

    def arrays(self):
        arr = np.array(self._buf, dtype=float).reshape(-1, 3)
        return arr[:, 0], arr[:, 1], arr[:, 2]

    def __len__(self) -> int:
        return len(self._buf)


def estimate_F(buf: EstimatorBuffer, alpha: float, T: float, t: float | None = None) -> float | None:
    """Sliding-window estimate of the ultra-local term ``F``.

    Evaluates ``-(6/T^3) * int_0^T [(T - 2s) y(t-T+s) + alpha s (T-s) u(t-T+s)] ds``
    with ``y`` linear and ``u`` constant between samples, integrated exactly
    over each interval. Returns None until the buffer covers the window.
    """
    if not buf.ready():
        return None
    ts, ys, us = buf.arrays()
    if t is None:
        t = ts[-1]
    t0 = t - T
    if ts[0] > t0 + 1e-9 or ts[-1] < t - 1e-9:
        return None
    acc = 0.0
    for k in range(1, len(ts)):
        a, b = ts[k - 1], ts[k]
        if b <= t0 or a >= t:
            continue
        # clip the interval to the window, interpolating y at the cut
        lo, hi = max(a, t0), min(b, t)
        ya = ys[k - 1] + (ys[k] - ys[k - 1]) * (lo - a) / (b - a)
        yb = ys[k - 1] + (ys[k] - ys[k - 1]) * (hi - a) / (b - a)
        sa, sb = lo - t0, hi - t0
        acc += _kernel_y(T, sa, sb, ya, yb) + alpha * us[k] * _kernel_u(T, sa, sb)
    return -6.0 / T**3 * acc


def _kernel_y(T, sa, sb, ya, yb):
    """int_sa^sb (T - 2s) y(s) ds for y linear from ya to yb."""
    h = sb - sa
    dy = yb - ya
    return h * ((T - 2.0 * sa) * (ya + 0.5 * dy) - 2.0 * h * (0.5 * ya + dy / 3.0))


def _kernel_u(T, sa, sb):
    """int_sa^sb s (T - s) ds."""
    prim = lambda s: 0.5 * T * s * s - s**3 / 3.0  # noqa: E731
    return prim(sb) - prim(sa)


def ip_correction(F_hat: float, e: float, dy_set: float, alpha: float, K_p: float) -> float:
    """Intelligent proportional law, in dose units."""
    if alpha == 0:
        raise ValueError("alpha must be nonzero")
    return -(F_hat - dy_set + K_p * e) / alpha


def combined_dose(u_ff: float, u_mfc: float | None, y: float, y_set: float, cfg: MfcConfig) -> tuple[float, float]:
    """Total dose and the correction actually applied.

    The correction only ever adds methanol and is switched off while the
    measured nitrite sits at or below its setpoint.
    """
    if u_mfc is None or not y > y_set or not math.isfinite(u_mfc):
        corr = 0.0
    else:
        corr = max(u_mfc, 0.0)
        if cfg.u_corr_max is not None:
            corr = min(corr, cfg.u_corr_max)
    return max(0.0, u_ff + corr), corr


@dataclass
class ControllerState:
    classical: ClassicalConfig = field(default_factory=ClassicalConfig)
    mfc: MfcConfig = field(default_factory=MfcConfig)
    buffer: EstimatorBuffer | None = None
    mfc_enabled: bool = False
    mfc_active: bool = False
    last_u_total: float = 0.0
    last_u_ff: float = 0.0
    last_u_corr: float = 0.0
    F_hat: float | None = None
    started: bool = False

    def __post_init__(self):
        if self.buffer is None:
            self.buffer = EstimatorBuffer(self.mfc.T)


@dataclass(frozen=True)
class ControlOutput:
    u_total: float
    u_ff: float
    u_corr: float
    F_hat: float | None
    mfc_active: bool
    held: bool = False


def controller_step(cs: ControllerState, Q: float, C_NO3_in: float, NO2_out: float, t: float, fault: bool = False):
    """Advance the controller one period; returns ``(new_state, ControlOutput)``.

    A flagged or non-finite nitrite reading holds the previous dose.
    """
    if cs.started and (fault or not math.isfinite(NO2_out)):
        out = ControlOutput(cs.last_u_total, cs.last_u_ff, cs.last_u_corr, cs.F_hat, cs.mfc_active, held=True)
        return cs, out

    u_ff = classical_dose(Q, C_NO3_in, cs.classical)
    if not cs.mfc_enabled:
        new = replace(cs, last_u_total=u_ff, last_u_ff=u_ff, last_u_corr=0.0, started=True)
        return new, ControlOutput(u_ff, u_ff, 0.0, None, False)

    m = cs.mfc
    buf = cs.buffer.copy()
    if math.isfinite(NO2_out) and not fault:
        buf.push(t, NO2_out, cs.last_u_corr)
    F_hat = estimate_F(buf, m.alpha, m.T, t)
    u_mfc = None if F_hat is None else ip_correction(F_hat, NO2_out - m.y_set, 0.0, m.alpha, m.K_p)
    u_total, corr = combined_dose(u_ff, u_mfc, NO2_out, m.y_set, m)
    active = corr > 0.0
    new = replace(
        cs,
        buffer=buf,
        mfc_active=active,
        last_u_total=u_total,
        last_u_ff=u_ff,
        last_u_corr=corr,
        F_hat=F_hat,
        started=True,
    )
    return new, ControlOutput(u_total, u_ff, corr, F_hat, active)


def config_to_dict(cfg) -> dict:
    return asdict(cfg)
