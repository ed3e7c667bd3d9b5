"""Scenario runner, summary statistics, strategy comparison and K calibration."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .biofilter import (
    BiofilterConfig,
    EffluentHistory,
    PlantModel,
    PlantState,
    SensorModel,
    apply_backwash,
    dose_to_concentration,
    effluent_measurement,
    feed_vector,
    init_plant,
    stored_mass,
)
from .control import (
    ClassicalConfig,
    ControllerState,
    MfcConfig,
    classical_dose,
    classical_from_dict,
    controller_step,
    mfc_from_dict,
)
from .influent import InfluentProfile, generate, load_timeseries
from .kinetics import COD_CONTENT, S_NO2, S_NO3, KineticParams, build_stoichiometry, check_continuity

log = logging.getLogger(__name__)

CSV_COLUMNS = (
    "t_d",
    "Q_m3d",
    "NO3_in",
    "NO2_in",
    "NO2_out",
    "NO3_out",
    "u_ff_kgCODd",
    "u_corr_kgCODd",
    "u_total_kgCODd",
    "meoh_kgd",
    "F_hat",
    "mfc_active",
    "backwash",
)
MODES = ("classical", "classical+mfc")
METHANOL_COD = 1.5  # gCOD per g methanol
N_CONTENT = np.array([0.0, 1.0, 1.0, 1.0, 0.0, 0.0])


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ScenarioSpec:
    name: str = "scenario"
    mode: str = "classical"
    plant: BiofilterConfig = field(default_factory=BiofilterConfig)
    kinetics: KineticParams = field(default_factory=KineticParams)
    influent: InfluentProfile = field(default_factory=InfluentProfile)
    influent_csv: str | None = None
    classical: ClassicalConfig = field(default_factory=ClassicalConfig)
    mfc: MfcConfig = field(default_factory=MfcConfig)
    sensor: SensorModel = field(default_factory=SensorModel)
    duration: float = 10.0
    warmup: float = 5.0
    dt: float = 7.5 / 86400.0
    inoculum_thickness: float = 3e-3
    inoculum_xh_fraction: float = 0.8
    output_dir: str = "."

    @property
    def seed(self) -> int:
        return self.influent.seed

    @property
    def dt_ctrl(self) -> float:
        return self.mfc.dt_ctrl

    def validate(self) -> None:
        try:
            self.plant.validate()
            self.kinetics.validate()
            self.influent.validate()
            self.classical.validate()
            self.mfc.validate()
            self.sensor.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.mode not in MODES:
            raise ConfigError(f"run.mode must be one of {MODES}, got {self.mode!r}")
        if not 0 <= self.warmup < self.duration:
            raise ConfigError("run.warmup must satisfy 0 <= warmup < duration")
        if not self.dt > 0:
            raise ConfigError("run.dt must be > 0")
        for label, period in (("sensor.dt_sample", self.sensor.dt_sample), ("control.mfc.dt_ctrl", self.dt_ctrl)):
            ratio = period / self.dt
            if abs(ratio - round(ratio)) > 1e-6 or round(ratio) < 1:
                raise ConfigError(f"run.dt must divide {label}")
        res = check_continuity(build_stoichiometry(self.kinetics))
        worst = max(np.max(np.abs(res["COD"])), np.max(np.abs(res["N"])))
        if worst > 1e-9:
            raise ConfigError(f"stoichiometry fails continuity check (residual {worst:.3g})")

    def to_config(self) -> dict:
        mfc = asdict(self.mfc)
        return {
            "plant": self.plant.to_dict(),
            "kinetics": self.kinetics.to_dict(),
            "influent": {**self.influent.to_dict(), **({"csv": self.influent_csv} if self.influent_csv else {})},
            "control": {"classical": asdict(self.classical), "mfc": mfc},
            "sensor": self.sensor.to_dict(),
            "run": {
                "name": self.name,
                "mode": self.mode,
                "duration": self.duration,
                "warmup": self.warmup,
                "dt": self.dt,
                "inoculum_thickness": self.inoculum_thickness,
                "inoculum_xh_fraction": self.inoculum_xh_fraction,
                "output_dir": self.output_dir,
            },
        }

    @classmethod
    def from_config(cls, cfg: dict, base_dir: str | Path | None = None) -> "ScenarioSpec":
        known = {"plant", "kinetics", "influent", "control", "run", "sensor"}
        unknown = set(cfg) - known
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        try:
            influent = dict(cfg.get("influent", {}))
            csv_path = influent.pop("csv", None)
            if csv_path is not None and base_dir is not None and not Path(csv_path).is_absolute():
                csv_path = str(Path(base_dir) / csv_path)
            control = cfg.get("control", {})
            unknown = set(control) - {"classical", "mfc"}
            if unknown:
                raise ValueError(f"unknown control keys: {sorted(unknown)}")
            run = dict(cfg.get("run", {}))
            seed = run.pop("seed", None)
            profile = InfluentProfile.from_dict(influent)
            if seed is not None:
                profile = replace(profile, seed=int(seed))
            kw = dict(
                plant=BiofilterConfig.from_dict(cfg.get("plant", {})),
                kinetics=KineticParams.from_dict(cfg.get("kinetics", {})),
                influent=profile,
                influent_csv=csv_path,
                classical=classical_from_dict(control.get("classical", {})),
                mfc=mfc_from_dict(control.get("mfc", {})),
                sensor=SensorModel.from_dict(cfg.get("sensor", {})),
            )
            run_fields = {f.name: f for f in fields(cls)}
            for k, v in run.items():
                if k not in run_fields or k in kw:
                    raise ValueError(f"unknown run key: {k!r}")
                kw[k] = v if k in ("name", "mode", "output_dir") else float(v)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        spec = cls(**kw)
        spec.validate()
        return spec

    def spec_hash(self) -> str:
        blob = json.dumps(self.to_config(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def load_config(path) -> ScenarioSpec:
    path = Path(path)
    try:
        cfg = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return ScenarioSpec.from_config(cfg, base_dir=path.parent)


def resolved_mfc(spec: ScenarioSpec) -> MfcConfig:
    """MFC config with the correction cap filled in from the nominal feedforward dose."""
    if spec.mfc.u_corr_max is not None:
        return spec.mfc
    nominal = classical_dose(spec.influent.Q_base, spec.influent.NO3_base, spec.classical)
    return replace(spec.mfc, u_corr_max=0.5 * nominal)


@dataclass
class RunResult:
    columns: dict
    provenance: dict
    warmup: float
    duration: float
    initial_state: PlantState
    final_state: PlantState
    backwash_times: list

    def __getitem__(self, name: str) -> np.ndarray:
        if name == "NOx_out":
            return self.columns["NO2_out"] + self.columns["NO3_out"]
        return self.columns[name]

    @property
    def t(self) -> np.ndarray:
        return self.columns["t_d"]

    def evaluation_mask(self, include_warmup: bool = False) -> np.ndarray:
        if include_warmup:
            return np.ones_like(self.t, dtype=bool)
        return self.t >= self.warmup - 1e-9

    def summary(self, name: str, include_warmup: bool = False) -> "SummaryStats":
        lo = 0.0 if include_warmup else self.warmup
        return summarize(self.t, self[name], (lo, self.duration))

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        cols = [self.columns[c] for c in CSV_COLUMNS]
        for i in range(len(self.t)):
            row = []
            for name, col in zip(CSV_COLUMNS, cols):
                v = col[i]
                row.append(str(int(v)) if name in ("mfc_active", "backwash") else repr(float(v)))
            w.writerow(row)
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text


def run_scenario(spec: ScenarioSpec) -> RunResult:
    """Simulate one scenario from t = 0 to ``spec.duration``.

    The controller runs every ``dt_ctrl``, the sensor and the log every
    ``sensor.dt_sample``, the plant every ``dt``; backwash hits every day at
    ``plant.t_bw`` (the start-of-run instant excluded).
    """
    spec.validate()
    cfg = spec.plant
    model = PlantModel(cfg, spec.kinetics)
    source = load_timeseries(spec.influent_csv) if spec.influent_csv else None

    def influent_at(t):
        return source(t) if source is not None else generate(t, spec.influent)

    dt = spec.dt
    n_steps = int(round(spec.duration / dt))
    every_ctrl = int(round(spec.dt_ctrl / dt))
    every_sample = int(round(spec.sensor.dt_sample / dt))

    state = init_plant(cfg, spec.inoculum_thickness, spec.inoculum_xh_fraction)
    initial = state.copy()
    history = EffluentHistory()
    ctrl = ControllerState(
        classical=spec.classical, mfc=resolved_mfc(spec), mfc_enabled=spec.mode == "classical+mfc"
    )
    out = None
    rows = []
    bw_times = []
    bw_pending = False
    next_bw = cfg.t_bw if cfg.t_bw > 0 else 1.0

    for k in range(n_steps + 1):
        t = k * dt
        if t >= next_bw - 0.5 * dt:
            state = apply_backwash(state, cfg.f_bw, cfg)
            bw_times.append(t)
            bw_pending = True
            next_bw += 1.0
        inf_now = influent_at(t)
        history.record(t, state, inf_now.Q)
        if k % every_ctrl == 0 or k % every_sample == 0:
            meas = effluent_measurement(t, history, spec.sensor)
        if k % every_ctrl == 0:
            ctrl, out = controller_step(ctrl, inf_now.Q, inf_now.C_NO3, meas.NO2_out, t, fault=meas.flagged)
        if k % every_sample == 0:
            rows.append(
                (
                    t,
                    inf_now.Q,
                    inf_now.C_NO3,
                    inf_now.C_NO2,
                    state.bulk[-1, S_NO2],
                    state.bulk[-1, S_NO3],
                    out.u_ff,
                    out.u_corr,
                    out.u_total,
                    out.u_total / METHANOL_COD,
                    math.nan if out.F_hat is None else out.F_hat,
                    int(out.mfc_active),
                    int(bw_pending),
                )
            )
            bw_pending = False
        if k == n_steps:
            break
        # inputs held over the step, influent sampled at its midpoint
        inf_mid = influent_at(t + 0.5 * dt)
        feed = feed_vector(inf_mid, dose_to_concentration(out.u_total, inf_mid.Q))
        state = model.step(state, feed, inf_mid.Q, dt)

    arr = np.array(rows, dtype=float)
    columns = {name: arr[:, i].copy() for i, name in enumerate(CSV_COLUMNS)}
    provenance = {
        "spec_hash": spec.spec_hash(),
        "seed": spec.seed,
        "code_version": __version__,
        "name": spec.name,
        "mode": spec.mode,
    }
    return RunResult(columns, provenance, spec.warmup, spec.duration, initial, state, bw_times)


def mass_balance(result: RunResult, cfg: BiofilterConfig) -> dict:
    """Closing error of the whole-plant N and COD budgets over a run.

    ``stored_end - stored_start = inflow - outflow - backwash + clamp`` per
    component, weighted into N and COD. Residuals are relative to the gross
    throughput of the respective quantity.
    """
    s0, s1 = result.initial_state, result.final_state
    d_store = stored_mass(s1, cfg) - stored_mass(s0, cfg)
    inflow = s1.flows[0] - s0.flows[0]
    outflow = s1.flows[1] - s0.flows[1]
    net = inflow - outflow - (s1.removed - s0.removed) + (s1.clamped - s0.clamped)
    out = {}
    for label, weight in (("N", N_CONTENT), ("COD", COD_CONTENT)):
        resid = float((d_store - net) @ weight)
        gross = float(np.abs(weight) @ (np.abs(inflow) + np.abs(outflow)))
        out[label] = {"residual": resid, "relative": abs(resid) / gross if gross > 0 else abs(resid)}
    clamp_mass = float(np.abs(s1.clamped - s0.clamped).sum())
    out["clamp_fraction"] = clamp_mass / float(np.abs(inflow).sum()) if inflow.any() else clamp_mass
    return out


def backwash_recovery_times(
    result: RunResult, y_set: float = 0.8, band: float = 0.1, onset: float = 1.0 / 24.0
) -> list[tuple[float, float]]:
    """Hours from each evaluation-window backwash until NO2_out is back inside ``y_set +/- band``.

    An excursion counts when it starts within ``onset`` days of the wash; a
    wash that leaves the effluent in band gives 0. An excursion that never
    ends before the run does gives ``inf``. A wash at the final instant has
    no aftermath to measure and is skipped.
    """
    t = result.t
    y = result["NO2_out"]
    out = []
    for tb in result.backwash_times:
        if not result.warmup - 1e-9 <= tb < t[-1] - 1e-9:
            continue
        after = t >= tb - 1e-9
        tt, yy = t[after], y[after]
        outside = np.abs(yy - y_set) > band + 1e-12
        start = np.flatnonzero(outside & (tt <= tb + onset + 1e-9))
        if start.size == 0:
            out.append((tb, 0.0))
            continue
        back = np.flatnonzero(~outside[start[0] :])
        out.append((tb, 24.0 * (tt[start[0] + back[0]] - tb) if back.size else math.inf))
    return out


# -- statistics ---------------------------------------------------------------

STAT_FIELDS = ("mean", "median", "Q25", "Q75", "D10", "D90", "min", "max", "std", "n")


@dataclass(frozen=True)
class SummaryStats:
    mean: float
    median: float
    Q25: float
    Q75: float
    D10: float
    D90: float
    min: float
    max: float
    std: float
    n: int

    @property
    def range(self) -> float:
        return self.max - self.min

    def ordered(self) -> bool:
        return self.min <= self.D10 <= self.Q25 <= self.median <= self.Q75 <= self.D90 <= self.max

    def to_dict(self) -> dict:
        return asdict(self)


def summarize(t, values, window: tuple[float, float] | None = None) -> SummaryStats:
    """Order statistics (linear interpolation between order statistics), mean and population std."""
    t = np.asarray(t, dtype=float)
    v = np.asarray(values, dtype=float)
    if window is not None:
        lo, hi = window
        sel = (t >= lo - 1e-9) & (t <= hi + 1e-9)
        v = v[sel]
    if v.size == 0:
        raise ValueError("summary window contains no samples")
    q = np.quantile(v, [0.10, 0.25, 0.50, 0.75, 0.90])
    return SummaryStats(
        mean=float(np.mean(v)),
        median=float(q[2]),
        Q25=float(q[1]),
        Q75=float(q[3]),
        D10=float(q[0]),
        D90=float(q[4]),
        min=float(np.min(v)),
        max=float(np.max(v)),
        std=float(np.std(v)),
        n=int(v.size),
    )


COMPARED = ("NO2_out", "NO3_out", "NOx_out", "meoh_kgd")


@dataclass
class ComparisonReport:
    names: tuple
    stats: dict  # name -> variable -> SummaryStats
    no2_range_ratio: float
    mean_offset_from_setpoint: dict
    methanol_total_delta_pct: float
    window: tuple
    seed: int

    def to_dict(self) -> dict:
        return {
            "names": list(self.names),
            "window": list(self.window),
            "seed": self.seed,
            "stats": {n: {v: s.to_dict() for v, s in per.items()} for n, per in self.stats.items()},
            "no2_range_ratio": self.no2_range_ratio,
            "mean_offset_from_setpoint": self.mean_offset_from_setpoint,
            "methanol_total_delta_pct": self.methanol_total_delta_pct,
        }


def compare(a: RunResult, b: RunResult, y_set: float = 0.8) -> ComparisonReport:
    """Compare run ``b`` against baseline ``a`` over their common evaluation window.

    ``no2_range_ratio`` is range(b) / range(a); the methanol delta is
    (total(b) - total(a)) / total(a) in percent.
    """
    if a.provenance["seed"] != b.provenance["seed"]:
        raise ValueError("runs use different influent seeds")
    if a.warmup != b.warmup or a.duration != b.duration or not np.array_equal(a.t, b.t):
        raise ValueError("runs use different evaluation windows or sampling grids")
    na = a.provenance.get("name", "a")
    nb = b.provenance.get("name", "b")
    if na == nb:
        na, nb = f"{na}_a", f"{nb}_b"
    stats = {na: {v: a.summary(v) for v in COMPARED}, nb: {v: b.summary(v) for v in COMPARED}}
    ra, rb = stats[na]["NO2_out"].range, stats[nb]["NO2_out"].range
    mask = a.evaluation_mask()
    tot_a = float(np.sum(a["meoh_kgd"][mask]))
    tot_b = float(np.sum(b["meoh_kgd"][mask]))
    return ComparisonReport(
        names=(na, nb),
        stats=stats,
        no2_range_ratio=rb / ra if ra > 0 else (1.0 if rb == ra else math.inf),
        mean_offset_from_setpoint={n: stats[n]["NO2_out"].mean - y_set for n in (na, nb)},
        methanol_total_delta_pct=100.0 * (tot_b - tot_a) / tot_a if tot_a > 0 else 0.0,
        window=(a.warmup, a.duration),
        seed=a.provenance["seed"],
    )


# -- calibration --------------------------------------------------------------


class CalibrationError(RuntimeError):
    pass


@dataclass
class CalibrationResult:
    K: float
    mean_NO2: float
    iterations: int
    history: list

    def to_dict(self) -> dict:
        return asdict(self)


def evaluation_mean_no2(spec: ScenarioSpec, K: float) -> float:
    s = replace(spec, mode="classical", classical=replace(spec.classical, K=K))
    return run_scenario(s).summary("NO2_out").mean


def calibrate_classical(
    spec: ScenarioSpec,
    target: float = 0.8,
    K_range: tuple[float, float] = (2.0, 8.0),
    tol: float = 0.02,
    max_iter: int = 40,
) -> CalibrationResult:
    """Bisect on K until the evaluation-window mean nitrite is within ``tol`` of ``target``.

    Higher K means more methanol and less residual nitrite; the search range
    must bracket the target under that ordering.
    """
    lo, hi = K_range
    f_lo = evaluation_mean_no2(spec, lo)
    f_hi = evaluation_mean_no2(spec, hi)
    history = [(lo, f_lo), (hi, f_hi)]
    if not f_lo > f_hi:
        raise CalibrationError(f"mean NO2 not decreasing in K over [{lo}, {hi}]: {f_lo:.4f} vs {f_hi:.4f}")
    if not f_hi <= target <= f_lo:
        raise CalibrationError(
            f"K range [{lo}, {hi}] does not bracket target {target}: mean NO2 spans [{f_hi:.4f}, {f_lo:.4f}]"
        )
    for it in range(1, max_iter + 1):
        mid = 0.5 * (lo + hi)
        f_mid = evaluation_mean_no2(spec, mid)
        history.append((mid, f_mid))
        log.info("calibration iter %d: K=%.5f mean NO2=%.4f", it, mid, f_mid)
        if abs(f_mid - target) <= tol:
            return CalibrationResult(mid, f_mid, it, history)
        if f_mid > target:
            lo = mid
        else:
            hi = mid
    raise CalibrationError(f"no K within tolerance after {max_iter} bisections")
