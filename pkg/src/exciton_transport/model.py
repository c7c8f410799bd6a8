"""Conformations, dipole-coupled Hamiltonians and empirical Hamiltonian files.

Sampled conformations live in units of the input-output distance ``d``: the
input site sits at the origin, the output site at ``(0, 0, 1)``, and every
other site is uniform inside the ball of diameter 1 centred at
``(0, 0, 0.5)``.  Hamiltonians are kept in angular-frequency units with
``hbar = 1`` so that the evolution phase is simply eigenvalue times time.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernel
from .rng import split_seed

MIN_SEPARATION = kernel.MIN_SEPARATION
BALL_CENTER = np.array([0.0, 0.0, 0.5])
BALL_RADIUS = 0.5
# slack for the ball test on stored coordinates (z is stored shifted by 0.5)
_BALL_SLACK = 1e-12

SPEED_OF_LIGHT = 299_792_458.0
UNIT_FACTORS = {
    "rad_per_s": 1.0,
    "h_hz": 2.0 * math.pi,
    "per_cm": 2.0 * math.pi * SPEED_OF_LIGHT * 100.0,
}
ASYMMETRY_TOL = 1e-12

# chromophores 1 and 3 (zero-based 0 and 2) define the empirical time window
DEFAULT_EMPIRICAL_SITES = (0, 2)


class DegenerateGeometryError(ValueError):
    """Two sites closer than MIN_SEPARATION."""


class HamiltonianFileError(ValueError):
    """Malformed or inconsistent Hamiltonian/conformation file."""


def to_internal(values, unit: str):
    """Convert energies given in ``unit`` to angular frequency (rad/s)."""
    try:
        factor = UNIT_FACTORS[unit]
    except KeyError:
        raise HamiltonianFileError(
            f"unknown unit {unit!r}; expected one of {sorted(UNIT_FACTORS)}"
        ) from None
    return np.asarray(values, dtype=float) * factor


def from_internal(values, unit: str):
    if unit not in UNIT_FACTORS:
        raise HamiltonianFileError(f"unknown unit {unit!r}")
    return np.asarray(values, dtype=float) / UNIT_FACTORS[unit]


@dataclass(frozen=True, eq=False)
class Conformation:
    positions: np.ndarray
    input_index: int = 0
    output_index: int = 1
    alpha: float = 1.0

    def __post_init__(self):
        pos = np.array(self.positions, dtype=float)
        if pos.ndim != 2 or pos.shape[1] != 3:
            raise ValueError(f"positions must have shape (N, 3), got {pos.shape}")
        n = pos.shape[0]
        if n < 2:
            raise ValueError("a conformation needs at least 2 sites")
        i, o = int(self.input_index), int(self.output_index)
        if i == o or not (0 <= i < n and 0 <= o < n):
            raise ValueError(f"invalid input/output indices ({i}, {o}) for N={n}")
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if not np.array_equal(pos[i], [0.0, 0.0, 0.0]) or not np.array_equal(pos[o], [0.0, 0.0, 1.0]):
            raise ValueError("input and output sites must sit at (0,0,0) and (0,0,1)")
        r2 = ((pos - BALL_CENTER) ** 2).sum(axis=1)
        if np.any(r2 > BALL_RADIUS**2 + _BALL_SLACK):
            bad = int(np.argmax(r2))
            raise ValueError(f"site {bad} lies outside the unit-diameter ball")
        dmin = min_pair_distance(pos)
        if dmin <= MIN_SEPARATION:
            raise DegenerateGeometryError(f"sites closer than {MIN_SEPARATION:g} (min distance {dmin:.3g})")
        pos.setflags(write=False)
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "input_index", i)
        object.__setattr__(self, "output_index", o)
        object.__setattr__(self, "alpha", float(self.alpha))

    @property
    def n_sites(self) -> int:
        return self.positions.shape[0]

    def __eq__(self, other):
        if not isinstance(other, Conformation):
            return NotImplemented
        return (
            np.array_equal(self.positions, other.positions)
            and (self.input_index, self.output_index, self.alpha)
            == (other.input_index, other.output_index, other.alpha)
        )

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "input": self.input_index,
            "output": self.output_index,
            "positions": self.positions.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> Conformation:
        try:
            return cls(
                positions=np.asarray(data["positions"], dtype=float),
                input_index=int(data.get("input", 0)),
                output_index=int(data.get("output", 1)),
                alpha=float(data.get("alpha", 1.0)),
            )
        except (KeyError, TypeError) as exc:
            raise HamiltonianFileError(f"bad conformation record: {exc}") from exc


def min_pair_distance(pos: np.ndarray) -> float:
    diff = pos[:, None, :] - pos[None, :, :]
    d = np.sqrt((diff**2).sum(axis=-1))
    d[np.diag_indices_from(d)] = np.inf
    return float(d.min())


@dataclass(frozen=True, eq=False)
class Hamiltonian:
    """Real-symmetric single-excitation Hamiltonian in angular-frequency units.

    ``time_unit`` only labels what a unit of time means for this matrix:
    ``"natural"`` for conformation models (alpha = d = 1) and ``"s"`` for
    ingested empirical data.
    """

    matrix: np.ndarray
    input_index: int = 0
    output_index: int = 1
    labels: tuple = field(default=())
    time_unit: str = "natural"

    def __post_init__(self):
        m = np.array(self.matrix, dtype=float)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError(f"Hamiltonian must be square, got shape {m.shape}")
        n = m.shape[0]
        if n < 2:
            raise ValueError("Hamiltonian needs at least 2 sites")
        if not np.all(np.isfinite(m)):
            raise ValueError("Hamiltonian has non-finite entries")
        i, o = int(self.input_index), int(self.output_index)
        if i == o or not (0 <= i < n and 0 <= o < n):
            raise ValueError(f"invalid input/output indices ({i}, {o}) for N={n}")
        m = 0.5 * (m + m.T)
        m.setflags(write=False)
        labels = tuple(str(s) for s in self.labels) if self.labels else tuple(str(k + 1) for k in range(n))
        if len(labels) != n:
            raise ValueError("labels must match the matrix dimension")
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "input_index", i)
        object.__setattr__(self, "output_index", o)
        object.__setattr__(self, "labels", labels)

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    @property
    def in_out_coupling(self) -> float:
        return float(self.matrix[self.input_index, self.output_index])

    def with_matrix(self, matrix) -> Hamiltonian:
        return Hamiltonian(matrix, self.input_index, self.output_index, self.labels, self.time_unit)

    def to_dict(self, unit: str = "rad_per_s") -> dict:
        if self.time_unit == "natural" and unit != "rad_per_s":
            raise ValueError("conformation Hamiltonians are dimensionless; export with unit='rad_per_s'")
        return {
            "unit": unit,
            "dim": self.dim,
            "matrix": from_internal(self.matrix, unit).tolist(),
            "input_site": self.input_index,
            "output_site": self.output_index,
            "labels": list(self.labels),
        }


# --------------------------------------------------------------------------
# sampling and couplings


def sample_conformation(n_sites: int, seed: int, index: int = 0, alpha: float = 1.0) -> Conformation:
    """Random conformation drawn from stream ``(seed, index)``.

    Identical to the conformation used for sample ``index`` of a campaign
    with the same seed.
    """
    if n_sites < 2:
        raise ValueError(f"n_sites must be >= 2, got {n_sites}")
    k0, k1 = split_seed(seed)
    pos = np.empty((n_sites, 3))
    kernel.sample_positions(n_sites, k0, k1, np.uint64(index), np.uint64(0), MIN_SEPARATION, pos)
    return Conformation(pos, 0, 1, alpha)


def coupling_matrix(conf: Conformation) -> Hamiltonian:
    pos = conf.positions
    if min_pair_distance(pos) < MIN_SEPARATION:
        raise DegenerateGeometryError("pairwise distance below MIN_SEPARATION")
    h = np.empty((conf.n_sites, conf.n_sites))
    kernel.dipole_matrix(pos, conf.alpha, h)
    return Hamiltonian(h, conf.input_index, conf.output_index)


def default_time_window(h: Hamiltonian, factor: float = 0.1) -> float:
    """``factor`` times the bare input-output Rabi transfer time pi/(2|J|)."""
    j = abs(h.in_out_coupling)
    if j == 0:
        raise ValueError("input-output coupling is zero; time window undefined")
    if factor <= 0:
        raise ValueError("window factor must be positive")
    return factor * math.pi / (2.0 * j)


# --------------------------------------------------------------------------
# files


def _read_json(path) -> dict:
    path = Path(path)
    try:
        with path.open("r", encoding="utf-8") as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise HamiltonianFileError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise HamiltonianFileError(f"{path}: expected a JSON object")
    return data


def hamiltonian_from_dict(data: dict, source: str = "<dict>") -> Hamiltonian:
    for key in ("unit", "matrix"):
        if key not in data:
            raise HamiltonianFileError(f"{source}: missing field {key!r}")
    try:
        raw = np.asarray(data["matrix"], dtype=float)
    except (TypeError, ValueError) as exc:
        raise HamiltonianFileError(f"{source}: matrix is not numeric ({exc})") from exc
    if raw.ndim != 2 or raw.shape[0] != raw.shape[1]:
        raise HamiltonianFileError(f"{source}: matrix must be square, got shape {raw.shape}")
    n = raw.shape[0]
    if "dim" in data and int(data["dim"]) != n:
        raise HamiltonianFileError(f"{source}: dim={data['dim']} but matrix is {n}x{n}")
    scale = np.abs(raw).max()
    if scale > 0 and np.abs(raw - raw.T).max() > ASYMMETRY_TOL * scale:
        raise HamiltonianFileError(f"{source}: matrix asymmetric beyond {ASYMMETRY_TOL:g} relative")
    default_in, default_out = DEFAULT_EMPIRICAL_SITES if n > 2 else (0, 1)
    try:
        return Hamiltonian(
            to_internal(raw, data["unit"]),
            int(data.get("input_site", default_in)),
            int(data.get("output_site", default_out)),
            tuple(data.get("labels") or ()),
            time_unit="s",
        )
    except HamiltonianFileError:
        raise
    except ValueError as exc:
        raise HamiltonianFileError(f"{source}: {exc}") from exc


def load_hamiltonian(path) -> Hamiltonian:
    return hamiltonian_from_dict(_read_json(path), str(path))


def load_conformation(path) -> Conformation:
    return Conformation.from_dict(_read_json(path))
