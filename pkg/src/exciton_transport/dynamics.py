"""Closed and locally dephased single-excitation dynamics.

Closed evolution uses the spectral decomposition of the real-symmetric
Hamiltonian.  Dephased evolution works with the real ``N^2``-dimensional
generator acting on the packed density matrix (see :mod:`.kernel`); for the
transfer-efficiency scan it is diagonalised once, giving the output
population as a finite sum of damped exponentials.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
from scipy.integrate import solve_ivp

from . import kernel
from .model import Hamiltonian

CONVENTIONS = ("projector", "double")
# above this size propagate_open switches from exact exponentials to stepping
EXACT_OPEN_MAX_SITES = 12
# sum |amplitudes| above which the eigen-expansion is treated as ill-conditioned
_CANCELLATION_LIMIT = 1e6


@dataclass(frozen=True)
class GridConfig:
    grid_points: int = 1024
    refine_tol: float = 1e-6

    def __post_init__(self):
        if self.grid_points < 2:
            raise ValueError("grid_points must be >= 2")
        if not 0 < self.refine_tol < 1:
            raise ValueError("refine_tol must lie in (0, 1)")


@dataclass(frozen=True)
class DephasingConfig:
    """Local dephasing of strength ``gamma``.

    With the ``projector`` convention every site-basis coherence decays at
    ``gamma``; ``double`` makes it decay at ``2 * gamma``.
    """

    gamma: float
    convention: str = "projector"

    def __post_init__(self):
        if not self.gamma >= 0:
            raise ValueError("gamma must be non-negative")
        if self.convention not in CONVENTIONS:
            raise ValueError(f"convention must be one of {CONVENTIONS}, got {self.convention!r}")

    @property
    def coherence_rate(self) -> float:
        return self.gamma * (2.0 if self.convention == "double" else 1.0)


@dataclass
class TransferResult:
    p_out: float
    t_star: float
    window: float
    grid_best: float
    trajectory: list | None = None

    def as_dict(self) -> dict:
        return {"p_out": self.p_out, "t_star": self.t_star, "window": self.window}


def _mat(h) -> np.ndarray:
    return h.matrix if isinstance(h, Hamiltonian) else np.asarray(h, dtype=float)


def _shifted(m: np.ndarray) -> np.ndarray:
    # a multiple of the identity only adds a global phase
    return m - np.eye(m.shape[0]) * (np.trace(m) / m.shape[0])


def basis_state(n: int, j: int) -> np.ndarray:
    psi = np.zeros(n, dtype=complex)
    psi[j] = 1.0
    return psi


# --------------------------------------------------------------------------
# closed


def propagate_closed(h, psi0, t: float) -> np.ndarray:
    if t < 0:
        raise ValueError("t must be non-negative")
    psi0 = np.asarray(psi0, dtype=complex)
    if t == 0:
        return psi0.copy()
    e, v = np.linalg.eigh(_shifted(_mat(h)))
    return v @ (np.exp(-1j * e * t) * (v.T @ psi0))


def transfer_efficiency_closed(h: Hamiltonian, window: float, grid: GridConfig = GridConfig()) -> TransferResult:
    """Maximum output population within ``[0, window]`` starting from the input site."""
    if not window > 0:
        raise ValueError("window must be positive")
    e, _, w = kernel.spectral_weights(np.ascontiguousarray(h.matrix), h.input_index, h.output_index)
    p, ts, g = kernel.scan_closed(e, w, window, grid.grid_points, grid.refine_tol)
    return TransferResult(float(p), float(ts), float(window), float(g))


# --------------------------------------------------------------------------
# open


def lindblad_rhs(m: np.ndarray, rate: float):
    """Right-hand side of the dephasing master equation on a complex matrix."""

    def rhs(rho):
        out = -1j * (m @ rho - rho @ m)
        off = rho - np.diag(np.diag(rho))
        return out - rate * off

    return rhs


def _real_generator(m: np.ndarray, rate: float) -> np.ndarray:
    n = m.shape[0]
    g = np.empty((n * n, n * n))
    kernel.real_generator(np.ascontiguousarray(m), rate, g)
    return g


def _pack(rho: np.ndarray) -> np.ndarray:
    x = np.empty(rho.size)
    kernel.pack_density(np.ascontiguousarray(rho, dtype=complex), x)
    return x


def _unpack(x: np.ndarray, n: int) -> np.ndarray:
    rho = np.empty((n, n), dtype=complex)
    kernel.unpack_density(np.ascontiguousarray(x), rho)
    return rho


def _check_density(rho: np.ndarray) -> np.ndarray:
    rho = np.asarray(rho, dtype=complex)
    if rho.ndim != 2 or rho.shape[0] != rho.shape[1]:
        raise ValueError("density matrix must be square")
    if np.abs(rho - rho.conj().T).max() > 1e-9:
        raise ValueError("density matrix is not Hermitian")
    if abs(np.trace(rho).real - 1) > 1e-9:
        raise ValueError("density matrix trace differs from 1")
    return rho


def propagate_open(h, rho0, deph: DephasingConfig, t: float) -> np.ndarray:
    """Density matrix after time ``t`` of dephased evolution."""
    if t < 0:
        raise ValueError("t must be non-negative")
    rho0 = _check_density(rho0)
    if t == 0:
        return rho0.copy()
    m = _shifted(_mat(h))
    n = m.shape[0]
    rate = deph.coherence_rate
    if n > EXACT_OPEN_MAX_SITES:
        rhs = lindblad_rhs(m, rate)
        sol = solve_ivp(
            lambda _t, y: rhs(y.reshape(n, n)).ravel(),
            (0.0, t), rho0.ravel(), method="DOP853", rtol=1e-11, atol=1e-13,
        )
        if not sol.success:
            raise RuntimeError(f"open evolution failed: {sol.message}")
        rho = sol.y[:, -1].reshape(n, n)
        return 0.5 * (rho + rho.conj().T)
    prop = sla.expm(_real_generator(m, rate) * t)
    return _unpack(prop @ _pack(rho0), n)


class OpenSpectrum:
    """Output population of dephased evolution as a sum of damped exponentials.

    Falls back to repeated matrix exponentials when the eigenvector basis is
    too ill-conditioned for the expansion to be trusted.
    """

    def __init__(self, generator: np.ndarray, n: int, in_idx: int, out_idx: int):
        self.n = n
        self.generator = generator
        self.x0 = np.zeros(n * n)
        self.x0[in_idx * n + in_idx] = 1.0
        self.out_slot = out_idx * n + out_idx
        self.exact = True
        wr, wi, _, vr, info = sla.lapack.dgeev(generator, compute_vl=0, compute_vr=1)
        if info != 0:
            self.exact = False
            return
        d = n * n
        self.lam = np.empty(d, dtype=complex)
        self.vecs = np.empty((d, d), dtype=complex)
        kernel.eig_pairs_to_complex(wr, wi, vr, self.lam, self.vecs)
        try:
            self.coef = np.linalg.solve(self.vecs, self.x0.astype(complex))
        except np.linalg.LinAlgError:
            self.exact = False
            return
        self.amp = self.vecs[self.out_slot] * self.coef
        recon = np.abs(self.vecs @ self.coef - self.x0).max()
        if recon > 1e-10 or np.abs(self.amp).sum() > _CANCELLATION_LIMIT:
            self.exact = False

    def population(self, t: float) -> float:
        if self.exact:
            return float(kernel.open_value(self.lam, self.amp, t))
        return float((sla.expm(self.generator * t) @ self.x0)[self.out_slot])

    def packed_state(self, t: float) -> np.ndarray:
        if self.exact:
            return (self.vecs @ (self.coef * np.exp(self.lam * t))).real
        return sla.expm(self.generator * t) @ self.x0

    def scan(self, window: float, grid: GridConfig):
        if self.exact:
            return kernel.scan_open(self.lam, self.amp, window, grid.grid_points, grid.refine_tol)
        return _scan_by_stepping(self, window, grid)


def _scan_by_stepping(spec: OpenSpectrum, window: float, grid: GridConfig):
    dt = window / (grid.grid_points - 1)
    step = sla.expm(spec.generator * dt)
    x = spec.x0.copy()
    vals = np.empty(grid.grid_points)
    for k in range(grid.grid_points):
        vals[k] = x[spec.out_slot]
        x = step @ x
    best_n = int(np.argmax(vals))
    t_best = window if best_n == grid.grid_points - 1 else best_n * dt
    best = spec.population(t_best)
    a, b = max(0.0, (best_n - 1) * dt), min(window, (best_n + 1) * dt)
    t_ref = golden_max(spec.population, a, b, grid.refine_tol * window)
    f_ref = spec.population(t_ref)
    if f_ref > best:
        return min(max(f_ref, 0.0), 1.0), t_ref, best
    return min(max(best, 0.0), 1.0), t_best, best


def golden_max(f, a: float, b: float, tol: float) -> float:
    g = kernel.GOLDEN
    c, d = b - g * (b - a), a + g * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc > fd:
            b, d, fd = d, c, fc
            c = b - g * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + g * (b - a)
            fd = f(d)
    return c if fc > fd else d


def open_spectrum(h: Hamiltonian, deph: DephasingConfig) -> OpenSpectrum:
    m = _shifted(h.matrix)
    return OpenSpectrum(_real_generator(m, deph.coherence_rate), h.dim, h.input_index, h.output_index)


def transfer_efficiency_open(h: Hamiltonian, deph: DephasingConfig, window: float,
                             grid: GridConfig = GridConfig()) -> TransferResult:
    if not window > 0:
        raise ValueError("window must be positive")
    if h.dim > EXACT_OPEN_MAX_SITES:
        return _transfer_open_integrated(h, deph, window, grid)
    p, ts, g = open_spectrum(h, deph).scan(window, grid)
    return TransferResult(float(p), float(ts), float(window), float(g))


def _transfer_open_integrated(h, deph, window, grid):
    n = h.dim
    rhs = lindblad_rhs(_shifted(h.matrix), deph.coherence_rate)
    rho0 = np.zeros((n, n), dtype=complex)
    rho0[h.input_index, h.input_index] = 1
    ts = np.linspace(0.0, window, grid.grid_points)
    sol = solve_ivp(lambda _t, y: rhs(y.reshape(n, n)).ravel(), (0.0, window), rho0.ravel(),
                    method="DOP853", t_eval=ts, rtol=1e-11, atol=1e-13, dense_output=True)
    if not sol.success:
        raise RuntimeError(f"open evolution failed: {sol.message}")
    o = h.output_index * n + h.output_index

    def pop(t):
        return float(sol.sol(t)[o].real)

    vals = sol.y[o].real
    best_n = int(np.argmax(vals))
    dt = window / (grid.grid_points - 1)
    t_best, best = ts[best_n], float(vals[best_n])
    t_ref = golden_max(pop, max(0.0, t_best - dt), min(window, t_best + dt), grid.refine_tol * window)
    if pop(t_ref) > best:
        return TransferResult(min(pop(t_ref), 1.0), float(t_ref), float(window), best)
    return TransferResult(min(best, 1.0), float(t_best), float(window), best)


# --------------------------------------------------------------------------
# trajectories


def state_trajectory(h: Hamiltonian, initial, deph: DephasingConfig | None, window: float,
                     n_samples: int) -> list:
    """Uniformly sampled ``(time, state)`` pairs on ``[0, window]``.

    States are amplitude vectors for closed evolution and density matrices
    when ``deph`` is given.
    """
    if n_samples < 2:
        raise ValueError("n_samples must be >= 2")
    if not window > 0:
        raise ValueError("window must be positive")
    times = np.linspace(0.0, window, n_samples)
    m = _shifted(h.matrix)
    n = h.dim
    if deph is None:
        psi0 = np.asarray(initial, dtype=complex)
        e, v = np.linalg.eigh(m)
        c = v.T @ psi0
        return [(float(t), v @ (np.exp(-1j * e * t) * c)) for t in times]
    rho0 = _check_density(initial)
    if n > EXACT_OPEN_MAX_SITES:
        return [(float(t), propagate_open(h, rho0, deph, t)) for t in times]
    step = sla.expm(_real_generator(m, deph.coherence_rate) * (window / (n_samples - 1)))
    x = _pack(rho0)
    out = []
    for t in times:
        out.append((float(t), _unpack(x, n)))
        x = step @ x
    return out


def site_populations(state) -> np.ndarray:
    state = np.asarray(state)
    if state.ndim == 1:
        return np.abs(state) ** 2
    return np.real(np.diag(state))


def transfer_with_trajectory(h: Hamiltonian, window: float, grid: GridConfig = GridConfig(),
                             deph: DephasingConfig | None = None) -> TransferResult:
    """Transfer efficiency together with the trajectory on the scan grid."""
    res = (transfer_efficiency_closed(h, window, grid) if deph is None
           else transfer_efficiency_open(h, deph, window, grid))
    if deph is None:
        init = basis_state(h.dim, h.input_index)
    else:
        init = np.zeros((h.dim, h.dim), dtype=complex)
        init[h.input_index, h.input_index] = 1
    res.trajectory = state_trajectory(h, init, deph, window, grid.grid_points)
    return res


def rabi_probability(coupling: float, t: float) -> float:
    """Output population of the bare two-site problem."""
    return math.sin(coupling * t) ** 2
