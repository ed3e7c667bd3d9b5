"""Biofilter plant: tanks in series, layered biofilm, backwash and effluent sensor.

State layout
------------
``bulk``  (n_tanks, 6)            liquid concentrations, g/m3
``film``  (n_tanks, n_layers, 6)  film content per unit biofilm area, g/m2
``flows`` (2, 6)                  cumulative inflow / outflow, g

Film layers are indexed from the media (0) to the surface (n_layers - 1).
Layer thickness is the particulate content divided by ``rho_f``, so growth,
decay, attachment and detachment move the thickness directly. Transport and
reactions see each layer as at least ``L_min / n_layers`` thick: the residual
film left on the media after a wash.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import _kernels
from .influent import InfluentState
from .kinetics import (
    COD_CONTENT,
    N_COMPONENTS,
    PARTICULATES,
    S_NO2,
    S_NO3,
    SOLUBLES,
    KineticParams,
    X_H,
    X_I,
    build_stoichiometry,
)

log = logging.getLogger(__name__)

SOL = np.array(SOLUBLES)
PART = np.array(PARTICULATES)
N_CONTENT = np.array([0.0, 1.0, 1.0, 1.0, 0.0, 0.0])

BLOWUP = 1e12


class NumericalFault(RuntimeError):
    """Integrator produced a non-finite or runaway state."""


@dataclass(frozen=True)
class BiofilterConfig:
    n_tanks: int = 6
    V_total: float = 3000.0
    porosity: float = 0.38
    a_spec: float = 400.0
    n_layers: int = 3
    rho_f: float = 2500.0
    # S_S, S_NO3, S_NO2, S_N2
    D_eff: tuple = (0.8e-4, 0.9e-4, 0.9e-4, 1.2e-4)
    k_L: float = 0.5
    lambda_f: float = 1.0
    k_det: float = 5000.0
    L_min: float = 0.9e-3
    f_bw: float = 0.3
    t_bw: float = 0.0
    bed_depth: float = 3.5

    def validate(self) -> None:
        if self.n_tanks < 1 or self.n_layers < 1:
            raise ValueError("plant.n_tanks and plant.n_layers must be >= 1")
        if not 0.0 < self.porosity <= 1.0:
            raise ValueError("plant.porosity must lie in (0, 1]")
        if not 0.0 <= self.f_bw <= 1.0:
            raise ValueError("plant.f_bw must lie in [0, 1]")
        if len(self.D_eff) != len(SOLUBLES):
            raise ValueError("plant.D_eff needs one value per soluble component")
        for f in fields(self):
            v = getattr(self, f.name)
            vals = v if isinstance(v, tuple) else (v,)
            if any(x < 0 for x in vals):
                raise ValueError(f"plant.{f.name} must be >= 0")
        if self.V_total <= 0 or self.rho_f <= 0:
            raise ValueError("plant.V_total and plant.rho_f must be > 0")

    @property
    def V_liquid(self) -> float:
        """Liquid volume of one tank, m3."""
        return self.porosity * self.V_total / self.n_tanks

    @property
    def film_area(self) -> float:
        """Biofilm area in one tank, m2."""
        return self.a_spec * self.V_total / self.n_tanks

    def to_dict(self) -> dict:
        d = asdict(self)
        d["D_eff"] = list(self.D_eff)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BiofilterConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown plant keys: {sorted(unknown)}")
        kw = {}
        for k, v in d.items():
            if k in ("n_tanks", "n_layers"):
                kw[k] = int(v)
            elif k == "D_eff":
                kw[k] = tuple(float(x) for x in v)
            else:
                kw[k] = float(v)
        return cls(**kw)


@dataclass(frozen=True)
class FilmLayer:
    thickness: float
    X_H: float
    X_I: float
    S_S: float
    S_NO3: float
    S_NO2: float
    S_N2: float


@dataclass(frozen=True)
class TankState:
    bulk: np.ndarray
    film_layers: list


@dataclass
class PlantState:
    bulk: np.ndarray
    film: np.ndarray
    flows: np.ndarray
    t: float = 0.0
    # mass removed by backwash, per component, g
    removed: np.ndarray = field(default_factory=lambda: np.zeros(N_COMPONENTS))
    # mass added back by positivity clamps, per component, g
    clamped: np.ndarray = field(default_factory=lambda: np.zeros(N_COMPONENTS))

    def copy(self) -> "PlantState":
        return PlantState(
            self.bulk.copy(), self.film.copy(), self.flows.copy(), self.t, self.removed.copy(), self.clamped.copy()
        )

    @property
    def n_tanks(self) -> int:
        return self.bulk.shape[0]

    def thickness(self, rho_f: float) -> np.ndarray:
        """Particulate layer thicknesses, m, shape (n_tanks, n_layers)."""
        return (self.film[..., X_H] + self.film[..., X_I]) / rho_f

    def tanks(self, cfg: BiofilterConfig) -> list[TankState]:
        """Per-tank view; layer thickness is floored at ``L_min / n_layers``."""
        h = np.maximum(self.thickness(cfg.rho_f), cfg.L_min / cfg.n_layers)
        out = []
        for i in range(self.n_tanks):
            layers = []
            for l in range(self.film.shape[1]):
                c = self.film[i, l] / h[i, l]
                layers.append(FilmLayer(h[i, l], c[X_H], c[X_I], c[0], c[S_NO3], c[S_NO2], c[3]))
            out.append(TankState(self.bulk[i].copy(), layers))
        return out

    @property
    def sludge_ledger(self) -> dict:
        return {"COD": float(self.removed[PART].sum() + self.removed[0]), "N": float(self.removed @ N_CONTENT)}

    @property
    def effluent(self) -> np.ndarray:
        return self.bulk[-1]


def init_plant(cfg: BiofilterConfig, thickness: float, xh_fraction: float = 0.8) -> PlantState:
    """Uniform biofilm of total ``thickness`` (m) in every tank, empty bulk."""
    cfg.validate()
    if thickness <= 0 or thickness < cfg.L_min:
        raise ValueError(f"inoculum thickness {thickness} below floor L_min={cfg.L_min}")
    if not 0.0 <= xh_fraction <= 1.0:
        raise ValueError("xh_fraction must lie in [0, 1]")
    h = thickness / cfg.n_layers
    film = np.zeros((cfg.n_tanks, cfg.n_layers, N_COMPONENTS))
    film[..., X_H] = xh_fraction * cfg.rho_f * h
    film[..., X_I] = (1.0 - xh_fraction) * cfg.rho_f * h
    return PlantState(
        bulk=np.zeros((cfg.n_tanks, N_COMPONENTS)),
        film=film,
        flows=np.zeros((2, N_COMPONENTS)),
    )


def dose_to_concentration(u: float, Q: float) -> float:
    """Methanol dose (kgCOD/d) as a concentration increment in the feed, gCOD/m3."""
    if not Q > 0:
        raise ValueError(f"cannot dose into flow Q={Q}")
    return 1000.0 * u / Q


def feed_vector(influent: InfluentState, dS_S: float = 0.0) -> np.ndarray:
    c = np.zeros(N_COMPONENTS)
    c[0] = influent.C_SS + dS_S
    c[S_NO3] = influent.C_NO3
    c[S_NO2] = influent.C_NO2
    return c


class PlantModel:
    """Right-hand side and stepping for one plant configuration."""

    def __init__(self, cfg: BiofilterConfig, p: KineticParams):
        cfg.validate()
        p.validate()
        self.cfg = cfg
        self.p = p
        self.S = build_stoichiometry(p).matrix
        self.V = cfg.V_liquid
        self.A = cfg.film_area
        self.D = np.asarray(cfg.D_eff, dtype=float)
        self.nt = cfg.n_tanks
        self.nl = cfg.n_layers
        self.h_floor = max(cfg.L_min / cfg.n_layers, 1e-12)
        self._kin = np.array([p.mu_H, p.K_S, p.K_NO3, p.K_NO2, p.eta_NO3, p.eta_NO2, p.b_H])
        self._geo = np.array([self.V, self.A, cfg.rho_f, cfg.k_L, cfg.lambda_f, cfg.k_det, cfg.bed_depth, self.h_floor])
        self._shapes = ((self.nt, N_COMPONENTS), (self.nt, self.nl, N_COMPONENTS), (2, N_COMPONENTS))
        self._sizes = [int(np.prod(s)) for s in self._shapes]

    # -- flat vector packing -------------------------------------------------
    def pack(self, s: PlantState) -> np.ndarray:
        return np.concatenate([s.bulk.ravel(), s.film.ravel(), s.flows.ravel()])

    def unpack(self, y: np.ndarray):
        a, b, _ = self._sizes
        return y[:a].reshape(self._shapes[0]), y[a : a + b].reshape(self._shapes[1]), y[a + b :].reshape(self._shapes[2])

    # -- reactions -------------------------------------------------------------
    def _reaction(self, c: np.ndarray) -> np.ndarray:
        p = self.p
        ss = np.maximum(c[..., 0], 0.0)
        no3 = np.maximum(c[..., S_NO3], 0.0)
        no2 = np.maximum(c[..., S_NO2], 0.0)
        xh = c[..., X_H]
        sub = p.mu_H * xh * ss / (p.K_S + ss) if p.K_S > 0 else p.mu_H * xh * (ss > 0)
        r = np.empty(c.shape[:-1] + (3,))
        r[..., 0] = sub * p.eta_NO3 * _sat(no3, p.K_NO3)
        r[..., 1] = sub * p.eta_NO2 * _sat(no2, p.K_NO2)
        r[..., 2] = p.b_H * xh
        return r @ self.S

    def rhs(self, y: np.ndarray, feed: np.ndarray, Q: float) -> np.ndarray:
        cfg = self.cfg
        C, M, _ = self.unpack(y)
        h_part = (M[..., X_H] + M[..., X_I]) / cfg.rho_f
        h = np.maximum(h_part, self.h_floor)
        Cf = M / h[..., None]

        dC = self._reaction(C)
        dM = self._reaction(Cf) * h[..., None]

        # advection through the tank chain
        up = np.empty_like(C)
        up[0] = feed
        up[1:] = C[:-1]
        dC += (Q / self.V) * (up - C)

        # bulk <-> surface layer solubles
        J = cfg.k_L * (Cf[:, -1, SOL] - C[:, SOL])
        dC[:, SOL] += J * (self.A / self.V)
        dM[:, -1, SOL] -= J

        # diffusion between adjacent layers, positive towards the surface
        if self.nl > 1:
            dist = 0.5 * (h[:, :-1] + h[:, 1:])
            Fd = self.D * (Cf[:, :-1, SOL] - Cf[:, 1:, SOL]) / dist[..., None]
            dM[:, :-1, SOL] -= Fd
            dM[:, 1:, SOL] += Fd

        # filtration of bulk particulates onto the surface layer
        if cfg.lambda_f > 0:
            att = cfg.lambda_f * Q * cfg.bed_depth / self.nt * C[:, PART]
            dC[:, PART] -= att / self.V
            dM[:, -1, PART] += att / self.A

        # detachment: volumetric rate k_det * L * X in the surface layer
        if cfg.k_det > 0:
            L = h_part.sum(axis=1)
            det = Cf[:, -1, PART] * (cfg.k_det * L * h_part[:, -1])[:, None]
            dM[:, -1, PART] -= det
            dC[:, PART] += det * (self.A / self.V)

        dF = np.empty((2, N_COMPONENTS))
        dF[0] = Q * feed
        dF[1] = Q * C[-1]
        return np.concatenate([dC.ravel(), dM.ravel(), dF.ravel()])

    # -- integration -----------------------------------------------------------
    def step(self, s: PlantState, feed: np.ndarray, Q: float, dt: float) -> PlantState:
        if not dt > 0:
            raise ValueError("dt must be > 0")
        y = self.rk4(self.pack(s), feed, Q, dt)
        C, M, F = self.unpack(y)
        C = C.copy()
        M = M.copy()
        clamped = s.clamped.copy()
        if not np.all(np.isfinite(y)) or np.max(np.abs(y)) > BLOWUP:
            bad = np.flatnonzero(~np.isfinite(y) | (np.abs(y) > BLOWUP))
            raise NumericalFault(f"plant state diverged at t={s.t + dt:.6f} d (flat indices {bad[:8].tolist()})")
        negC = np.minimum(C, 0.0)
        negM = np.minimum(M, 0.0)
        if negC.any() or negM.any():
            added = -(negC.sum(axis=0) * self.V + negM.sum(axis=(0, 1)) * self.A)
            clamped += added
            log.debug("t=%.5f clamped %s g", s.t + dt, added)
            C -= negC
            M -= negM
        M = _kernels.relayer(M, self.cfg.rho_f)
        return PlantState(C, M, F.copy(), s.t + dt, s.removed.copy(), clamped)

    def rk4(self, y: np.ndarray, feed: np.ndarray, Q: float, dt: float) -> np.ndarray:
        """One bare RK4 step of the flat state: no clamping, no re-layering."""
        return _kernels.plant_rk4(
            y, np.asarray(feed, dtype=float), float(Q), float(dt),
            self.nt, self.nl, self._kin, self.S, self._geo, self.D,
        )

    def rhs_compiled(self, y: np.ndarray, feed: np.ndarray, Q: float) -> np.ndarray:
        out = np.empty_like(y)
        _kernels.plant_rhs(y, np.asarray(feed, dtype=float), float(Q), self.nt, self.nl, self._kin, self.S, self._geo, self.D, out)
        return out


def _sat(s, k):
    if k > 0:
        return s / (k + s)
    return (s > 0).astype(float)


def rk4_step(f, t: float, y: np.ndarray, dt: float) -> np.ndarray:
    """One classical fourth-order Runge-Kutta step of dy/dt = f(t, y)."""
    k1 = f(t, y)
    k2 = f(t + 0.5 * dt, y + 0.5 * dt * k1)
    k3 = f(t + 0.5 * dt, y + 0.5 * dt * k2)
    k4 = f(t + dt, y + dt * k3)
    return y + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def plant_derivatives(s: PlantState, influent: InfluentState, dS_S: float, cfg: BiofilterConfig, p: KineticParams):
    """Time derivative of the plant state as ``(d_bulk, d_film, d_flows)``."""
    model = PlantModel(cfg, p)
    d = model.rhs(model.pack(s), feed_vector(influent, dS_S), influent.Q)
    return tuple(x.copy() for x in model.unpack(d))


def step(s: PlantState, influent: InfluentState, dS_S: float, dt: float, cfg: BiofilterConfig, p: KineticParams) -> PlantState:
    model = PlantModel(cfg, p)
    return model.step(s, feed_vector(influent, dS_S), influent.Q, dt)


def apply_backwash(s: PlantState, f_bw: float, cfg: BiofilterConfig) -> PlantState:
    """Strip a fraction ``f_bw`` of the film thickness from the surface of every tank."""
    if not 0.0 <= f_bw <= 1.0:
        raise ValueError("f_bw must lie in [0, 1]")
    out = s.copy()
    if f_bw == 0.0:
        return out
    A = cfg.film_area
    h = s.thickness(cfg.rho_f)
    nl = h.shape[1]
    for i in range(s.n_tanks):
        L = h[i].sum()
        keep = min(L, max(L * (1.0 - f_bw), cfg.L_min))
        if keep >= L:
            continue
        z = np.concatenate([[0.0], np.cumsum(h[i])])
        cum = np.concatenate([np.zeros((1, N_COMPONENTS)), np.cumsum(s.film[i], axis=0)])
        j = min(int(np.searchsorted(z, keep, side="right")) - 1, nl - 1)
        w = (keep - z[j]) / h[i, j] if h[i, j] > 0 else 0.0
        kept_total = cum[j] + w * s.film[i, j]
        out.removed = out.removed + (cum[-1] - kept_total) * A
        # kept content re-spread over equal layers
        new_z = keep * np.arange(nl + 1) / nl
        jj = np.clip(np.searchsorted(z, new_z, side="right") - 1, 0, nl - 1)
        ww = np.divide(new_z - z[jj], h[i, jj], out=np.zeros(nl + 1), where=h[i, jj] > 0)
        c_new = cum[jj] + ww[:, None] * s.film[i, jj]
        c_new[-1] = kept_total
        c_new[0] = 0.0
        out.film[i] = np.diff(c_new, axis=0)
    return out


# -- effluent sensor -----------------------------------------------------------


@dataclass(frozen=True)
class SensorModel:
    dt_sample: float = 5.0 / 1440.0
    lag: float = 0.0
    noise_sigma: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        if not self.dt_sample > 0:
            raise ValueError("sensor.dt_sample must be > 0")
        if self.lag < 0 or self.noise_sigma < 0:
            raise ValueError("sensor.lag and sensor.noise_sigma must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SensorModel":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown sensor keys: {sorted(unknown)}")
        return cls(**{k: (int(v) if k == "seed" else float(v)) for k, v in d.items()})


@dataclass(frozen=True)
class Measurement:
    t: float
    NO2_out: float
    NO3_out: float
    Q: float
    flagged: bool = False


class EffluentHistory:
    """Append-only record of last-tank effluent used to apply the analyzer lag."""

    def __init__(self):
        self._t: list[float] = []
        self._no2: list[float] = []
        self._no3: list[float] = []
        self._q: list[float] = []

    def record(self, t: float, s: PlantState, Q: float) -> None:
        if self._t and t <= self._t[-1]:
            raise ValueError("history timestamps must increase")
        self._t.append(t)
        self._no2.append(float(s.bulk[-1, S_NO2]))
        self._no3.append(float(s.bulk[-1, S_NO3]))
        self._q.append(float(Q))

    def __len__(self) -> int:
        return len(self._t)

    def at(self, t: float) -> tuple[float, float, float, bool]:
        """Values at ``t`` (linear interpolation); flagged when ``t`` precedes the record."""
        if not self._t:
            raise ValueError("empty effluent history")
        ts = self._t
        if t < ts[0] - 1e-12:
            return self._no2[0], self._no3[0], self._q[0], True
        i = int(np.searchsorted(ts, t, side="right")) - 1
        if i >= len(ts) - 1 or abs(ts[i] - t) <= 1e-12:
            i = min(i, len(ts) - 1)
            return self._no2[i], self._no3[i], self._q[i], False
        w = (t - ts[i]) / (ts[i + 1] - ts[i])
        lerp = lambda v: v[i] + w * (v[i + 1] - v[i])  # noqa: E731
        return lerp(self._no2), lerp(self._no3), lerp(self._q), False


def effluent_measurement(t: float, history: EffluentHistory, sensor: SensorModel) -> Measurement:
    """Sampled, lagged and noisy effluent reading with zero-order hold.

    The reading at ``t`` is the one taken at the last sampling instant; its
    noise is drawn from a generator keyed on (seed, sample index), so readings
    are reproducible regardless of how often the sensor is polled.
    """
    k = int(math.floor(t / sensor.dt_sample + 1e-9))
    t_s = k * sensor.dt_sample
    no2, no3, q, flagged = history.at(t_s - sensor.lag)
    if sensor.noise_sigma > 0:
        noise = np.random.default_rng([sensor.seed, k]).normal(0.0, sensor.noise_sigma, size=2)
        no2 = max(0.0, no2 + noise[0])
        no3 = max(0.0, no3 + noise[1])
    return Measurement(t_s, no2, no3, q, flagged)


def stored_mass(s: PlantState, cfg: BiofilterConfig) -> np.ndarray:
    """Mass of each component held in liquid and film, g."""
    return s.bulk.sum(axis=0) * cfg.V_liquid + s.film.sum(axis=(0, 1)) * cfg.film_area


def cod_of(mass: np.ndarray) -> float:
    return float(mass @ COD_CONTENT)


def n_of(mass: np.ndarray) -> float:
    return float(mass @ N_CONTENT)
