"""Two-step heterotrophic denitrification on methanol.

Component order used by every array in the package::

    S_S, S_NO3, S_NO2, S_N2, X_H, X_I

Process order::

    growth on nitrate (NO3 -> NO2), growth on nitrite (NO2 -> N2), decay
"""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass, fields

import numpy as np

COMPONENTS = ("S_S", "S_NO3", "S_NO2", "S_N2", "X_H", "X_I")
PROCESSES = ("growth_NO3", "growth_NO2", "decay")

S_S, S_NO3, S_NO2, S_N2, X_H, X_I = range(6)
SOLUBLES = (S_S, S_NO3, S_NO2, S_N2)
PARTICULATES = (X_H, X_I)
N_COMPONENTS = len(COMPONENTS)

N_MOLAR_MASS = 14.0  # gN/mol
COD_PER_ELECTRON = 8.0  # gCOD per mol e- (32 gO2 / 4 e-)


class ReductionStep(enum.Enum):
    NO3_TO_NO2 = 2  # electrons accepted per N
    NO2_TO_N2 = 3


def acceptor_cod_equivalent(step: ReductionStep) -> float:
    """COD equivalent (gCOD/gN) of the electrons accepted by one reduction step."""
    return step.value * COD_PER_ELECTRON / N_MOLAR_MASS


# COD content of each component, nitrogen gas as reference state.
COD_CONTENT = np.array(
    [
        1.0,
        -(acceptor_cod_equivalent(ReductionStep.NO3_TO_NO2) + acceptor_cod_equivalent(ReductionStep.NO2_TO_N2)),
        -acceptor_cod_equivalent(ReductionStep.NO2_TO_N2),
        0.0,
        1.0,
        1.0,
    ]
)


@dataclass(frozen=True)
class Components:
    S_S: float = 0.0
    S_NO3: float = 0.0
    S_NO2: float = 0.0
    S_N2: float = 0.0
    X_H: float = 0.0
    X_I: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, name) for name in COMPONENTS], dtype=float)

    @classmethod
    def from_array(cls, arr) -> "Components":
        return cls(*(float(v) for v in arr))


@dataclass(frozen=True)
class KineticParams:
    mu_H: float = 6.0
    K_S: float = 10.0
    K_NO3: float = 0.5
    K_NO2: float = 0.5
    eta_NO3: float = 0.8
    eta_NO2: float = 0.8
    Y_H: float = 0.25
    b_H: float = 0.3
    f_I: float = 0.1
    i_XB: float = 0.0

    def validate(self) -> None:
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"kinetics.{f.name} must be >= 0")
        if not 0.0 < self.Y_H < 1.0:
            raise ValueError(f"kinetics.Y_H must lie in (0, 1), got {self.Y_H}")
        if not 0.0 <= self.f_I < 1.0:
            raise ValueError(f"kinetics.f_I must lie in [0, 1), got {self.f_I}")
        for name in ("eta_NO3", "eta_NO2"):
            if not 0.0 < getattr(self, name) <= 1.0:
                raise ValueError(f"kinetics.{name} must lie in (0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "KineticParams":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown kinetics keys: {sorted(unknown)}")
        return cls(**{k: float(v) for k, v in d.items()})


@dataclass(frozen=True)
class StoichMatrix:
    """Process-by-component conversion coefficients (rows: PROCESSES)."""

    matrix: np.ndarray
    i_XB: float = 0.0

    def row(self, process: str) -> np.ndarray:
        return self.matrix[PROCESSES.index(process)]


def build_stoichiometry(p: KineticParams) -> StoichMatrix:
    if not 0.0 < p.Y_H < 1.0:
        raise ValueError(f"Y_H must lie in (0, 1), got {p.Y_H}")
    Y = p.Y_H
    nu_no3 = (1.0 - Y) / (acceptor_cod_equivalent(ReductionStep.NO3_TO_NO2) * Y)
    nu_no2 = (1.0 - Y) / (acceptor_cod_equivalent(ReductionStep.NO2_TO_N2) * Y)
    m = np.zeros((len(PROCESSES), N_COMPONENTS))
    m[0, S_S] = -1.0 / Y
    m[0, X_H] = 1.0
    m[0, S_NO3] = -nu_no3
    m[0, S_NO2] = nu_no3
    m[1, S_S] = -1.0 / Y
    m[1, X_H] = 1.0
    m[1, S_NO2] = -nu_no2
    m[1, S_N2] = nu_no2
    m[2, X_H] = -1.0
    m[2, X_I] = p.f_I
    m[2, S_S] = 1.0 - p.f_I
    return StoichMatrix(m, i_XB=p.i_XB)


def process_rates(c, p: KineticParams) -> np.ndarray:
    """Monod process rates, gCOD/(m3 d).

    ``c`` is a ``Components`` or any array whose last axis holds the six
    components; the result has the same leading shape and a last axis of 3.
    """
    c = c.as_array() if isinstance(c, Components) else np.asarray(c, dtype=float)
    ss = c[..., S_S]
    no3 = c[..., S_NO3]
    no2 = c[..., S_NO2]
    xh = c[..., X_H]
    sub = _monod(ss, p.K_S) * p.mu_H * xh
    rates = np.empty(c.shape[:-1] + (3,))
    rates[..., 0] = sub * p.eta_NO3 * _monod(no3, p.K_NO3)
    rates[..., 1] = sub * p.eta_NO2 * _monod(no2, p.K_NO2)
    rates[..., 2] = p.b_H * xh
    return rates


def _monod(s, k):
    s = np.maximum(s, 0.0)
    denom = k + s
    # k = 0 and s = 0 gives 0/0; a vanishing concentration means no reaction.
    return np.divide(s, denom, out=np.zeros_like(s, dtype=float), where=denom > 0)


def conversion_derivatives(c, p: KineticParams, stoich: StoichMatrix | None = None) -> np.ndarray:
    """Reaction-only time derivative of the components, g/(m3 d)."""
    if stoich is None:
        stoich = build_stoichiometry(p)
    return process_rates(c, p) @ stoich.matrix


def check_continuity(m: StoichMatrix) -> dict[str, np.ndarray]:
    """Per-process COD and nitrogen residuals of a conversion table.

    COD is counted with nitrate and nitrite carried at their negative
    acceptor equivalents, so a balanced growth row sums to zero. Biomass
    nitrogen (``i_XB``) is counted in the N balance; with no ammonium pool in
    the component set any nonzero ``i_XB`` shows up as a residual.
    """
    n_content = np.array([0.0, 1.0, 1.0, 1.0, m.i_XB, m.i_XB])
    return {"COD": m.matrix @ COD_CONTENT, "N": m.matrix @ n_content}
