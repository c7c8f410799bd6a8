"""Moment-based multipartite entanglement of single-excitation states.

For a state with one excitation shared over N sites the measures depend only
on the site populations ``p_j = |<j|psi>|^2`` through the moments
``M_k = sum_j p_j^k``.  ``c2`` is positive as soon as the excitation is
shared by two sites, ``c4`` only once at least four sites take part.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernel

# name written to campaign metadata
MIXED_ESTIMATOR = "dominant-eigenvector-surrogate"


@dataclass(frozen=True)
class EntanglementRecord:
    c2: float
    c4: float
    c2_max: float
    c4_max: float


def _populations(psi) -> np.ndarray:
    return np.abs(np.asarray(psi, dtype=complex)) ** 2


def moments(psi, k_max: int) -> np.ndarray:
    """``[M_1, ..., M_kmax]`` in the site basis."""
    if k_max < 1:
        raise ValueError("k_max must be >= 1")
    p = _populations(psi)
    return np.array([np.sum(p**k) for k in range(1, k_max + 1)])


def c2_from_moments(m2: float, n: int) -> float:
    if n < 2:
        raise ValueError("c2 needs at least 2 sites")
    x = (1.0 - m2) / (1.0 - 1.0 / n)
    return float(min(np.sqrt(x), 1.0)) if x > 0 else 0.0


def c4_from_moments(m2: float, m3: float, m4: float, n: int) -> float:
    if n < 4:
        raise ValueError("c4 needs at least 4 sites")
    num = 1.0 - 6.0 * m2 + 8.0 * m3 + 3.0 * m2 * m2 - 6.0 * m4
    den = 1.0 - 6.0 / n + 11.0 / n**2 - 6.0 / n**3
    # rounding drives the numerator slightly negative on <=3-site states
    return float(min((num / den) ** 0.25, 1.0)) if num > 0 else 0.0


def c2(psi) -> float:
    pop = _populations(psi)
    if pop.shape[0] < 2:
        raise ValueError("c2 needs at least 2 sites")
    return float(kernel.c_measures(pop)[0])


def c4(psi) -> float:
    """``c4`` evaluated without moment cancellation; exactly 0 on <=3-site support."""
    pop = _populations(psi)
    if pop.shape[0] < 4:
        raise ValueError("c4 needs at least 4 sites")
    return float(kernel.c_measures(pop)[1])


def c_nu(psi, nu: int) -> float:
    if nu == 2:
        return c2(psi)
    if nu == 4:
        return c4(psi)
    raise ValueError("only nu in {2, 4} is available")


def max_entanglement_over(trajectory, t_star: float) -> EntanglementRecord:
    """Maxima of c2 and c4 over the samples of ``trajectory`` with ``t <= t_star``.

    ``c4`` entries are NaN when the state has fewer than 4 sites.  The
    instantaneous fields hold the values at the last included sample.
    """
    if len(trajectory) == 0:
        raise ValueError("empty trajectory")
    c2s, c4s = [], []
    for t, psi in trajectory:
        if t > t_star:
            continue
        pop = _populations(psi)
        a, b = kernel.c_measures(pop)
        c2s.append(a)
        c4s.append(b)
    if not c2s:
        raise ValueError("no trajectory sample at or before t_star")
    c4_arr = np.asarray(c4s)
    c4_max = float(np.nan) if np.all(np.isnan(c4_arr)) else float(np.nanmax(c4_arr))
    return EntanglementRecord(float(c2s[-1]), float(c4s[-1]), float(max(c2s)), c4_max)


def c_nu_mixed_estimate(rho, nu: int) -> float:
    """Quasi-pure estimate of ``c_nu`` for a density matrix.

    The pure-state value of the dominant eigenvector, scaled by
    ``max(2 * lambda_max - 1, 0)``.  Exact for pure states, zero whenever no
    eigenvalue exceeds one half.
    """
    rho = np.asarray(rho, dtype=complex)
    w, v = np.linalg.eigh(0.5 * (rho + rho.conj().T))
    weight = max(2.0 * w[-1] - 1.0, 0.0)
    if weight == 0.0:
        return 0.0
    return weight * c_nu(v[:, -1], nu)
