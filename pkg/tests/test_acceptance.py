"""Acceptance criteria, one test per criterion.

Each test records a PASS/FAIL/SKIP line that is printed in the terminal
summary.  Long-running variants are opt-in:

  EXCITON_FULL_TAIL=1             run criterion 4 at 1e8 samples
  EXCITON_FMO_HAMILTONIAN=path    JSON Hamiltonian file for criterion 10
  EXCITON_FMO_RESTARTS=n          box-optimizer restarts for criterion 10 (200)
"""

import json
import math
import os
from pathlib import Path

import numpy as np
import pytest

from conftest import random_density, random_hamiltonian, record
from oracles import three_site_grid_oracle
from exciton_transport.cli import run_cli
from exciton_transport.dynamics import (DephasingConfig, basis_state, propagate_closed,
                                        propagate_open, transfer_efficiency_closed)
from exciton_transport.ensemble import (DEFAULT_CONVENTION, CampaignConfig, default_workers,
                                        density_crossing, run_campaign, tail_fraction)
from exciton_transport.entanglement import c2, c4
from exciton_transport.model import default_time_window, load_hamiltonian
from exciton_transport.optimize import (ConformationOptConfig, HamiltonianBoxConfig, RobustnessConfig,
                                        dephased_evaluation, in_box, optimize_conformation,
                                        optimize_hamiltonian_box, robustness_scan)
from exciton_transport.sketch import Histogram1D

SEED = 2024
WORKERS = default_workers()


@pytest.fixture(scope="module")
def coherent_1e6():
    return run_campaign(CampaignConfig(7, 10**6, seed=SEED, record_entanglement=True, workers=WORKERS))


@pytest.fixture(scope="module")
def dephased_1e5():
    return {
        conv: run_campaign(CampaignConfig(7, 10**5, seed=SEED, gamma_over_window=2.0, convention=conv,
                                          workers=WORKERS))
        for conv in ("projector", "double")
    }


def test_criterion_01_two_site_oracle(capsys):
    code = run_cli(["evaluate", "--sites", "2"])
    data = json.loads(capsys.readouterr().out)
    exact = math.sin(0.05 * math.pi) ** 2
    dp = abs(data["p_out"] - exact)
    dt = abs(data["t_star"] - data["T"])
    ok = code == 0 and dp <= 1e-9 and dt <= 1e-6 * data["T"]
    record(1, ok, f"p_out={data['p_out']:.12f} (|err|={dp:.1e} <= 1e-9), "
                  f"|t_star-T|={dt:.1e} <= {1e-6 * data['T']:.1e}")
    assert ok


def test_criterion_02_coherent_mean(coherent_1e6):
    m = coherent_1e6.mean_coherent
    ok = coherent_1e6.n == 10**6 and 0.046 <= m <= 0.052
    record(2, ok, f"N=7, n={coherent_1e6.n}: mean p_out={m:.5f} "
                  f"(+-{coherent_1e6.moments['p_out_coherent'].sem:.1e}) in [0.046, 0.052]")
    assert ok


def test_criterion_03_dephased_mean(dephased_1e5):
    means = {conv: r.mean_dephased for conv, r in dephased_1e5.items()}
    passing = [c for c, m in means.items() if 0.036 <= m <= 0.042]
    ok = bool(passing) and DEFAULT_CONVENTION in passing
    text = ", ".join(f"{c}={m:.5f}" for c, m in means.items())
    record(3, ok, f"N=7, n=1e5, gamma=2/T: mean {text}; band [0.036, 0.042]; "
                  f"default convention {DEFAULT_CONVENTION!r}")
    assert ok


def _tail(n):
    res = run_campaign(CampaignConfig(7, n, seed=SEED, workers=WORKERS, record_cap=10_000))
    return tail_fraction(res, 0.9)


def test_criterion_04_tail_fraction():
    if os.environ.get("EXCITON_FULL_TAIL") == "1":
        tf = _tail(10**8)
        ok = 1.5e-6 <= tf.fraction <= 1.4e-5
        record(4, ok, f"n=1e8: {tf.count} events with p_out >= 0.9, fraction {tf.fraction:.2e} "
                      f"(Wilson95 [{tf.ci_low:.2e}, {tf.ci_high:.2e}]) in [1.5e-6, 1.4e-5]")
    else:
        tf = _tail(10**7)
        ok = tf.count >= 1
        record(4, ok, f"smoke n=1e7: {tf.count} events with p_out >= 0.9 (need >= 1), fraction "
                      f"{tf.fraction:.2e}; full 1e8 band check runs with EXCITON_FULL_TAIL=1")
    assert ok


def test_criterion_05_density_crossing(coherent_1e6, dephased_1e5):
    deph = dephased_1e5[DEFAULT_CONVENTION]
    coh, dep = coherent_1e6.hists["coherent"], deph.hists["dephased"]
    assert coh.bins == dep.bins == 200
    cross = density_crossing(coh, dep)
    ok = cross.found and abs(cross.level - 0.076) <= 0.01
    record(5, ok, f"200 bins, coherent 1e6 vs dephased 1e5 ({DEFAULT_CONVENTION}): "
                  f"crossing at {cross.level if cross.found else float('nan'):.4f}, target 0.076 +- 0.01")
    assert ok


def test_criterion_06_entanglement_gate(coherent_1e6):
    n2, k2 = coherent_1e6.gate_probability("c2_max", 0.8, 0.5)
    n4, k4 = coherent_1e6.gate_probability("c4_max", 0.5, 0.5)
    p2 = k2 / n2 if n2 else 0.0
    p4 = k4 / n4 if n4 else 0.0
    ok = n2 > 0 and n4 > 0 and p2 < 1e-3 and p4 < 1e-2
    record(6, ok, f"P(p>0.5 | c2_max<0.8) = {k2}/{n2} = {p2:.1e} < 1e-3; "
                  f"P(p>0.5 | c4_max<0.5) = {k4}/{n4} = {p4:.1e} < 1e-2")
    assert ok


def test_kink_ridge_in_c2_marginal(coherent_1e6):
    # supplementary: the c2_max marginal jumps at the two-site value sqrt(7/12)
    h, _ = np.histogram(coherent_1e6.records["c2_max"], bins=100, range=(0, 1))
    ratio = h[1:] / np.maximum(h[:-1], 1)
    assert int(np.argmax(ratio)) + 1 == int(math.sqrt(7 / 12) * 100)


def test_criterion_07_kink_constant():
    psi = np.zeros(7, dtype=complex)
    psi[:2] = 1 / math.sqrt(2)
    err = abs(c2(psi) - math.sqrt(7 / 12))
    record(7, err <= 1e-12, f"c2(uniform 2-of-7) = {c2(psi):.15f}, |err vs sqrt(7/12)| = {err:.1e}")
    assert err <= 1e-12


def test_criterion_08_optimizer():
    seven = optimize_conformation(ConformationOptConfig(n_sites=7, n_restarts=50, seed=SEED), WORKERS)
    three = optimize_conformation(ConformationOptConfig(n_sites=3, n_restarts=10, seed=SEED), WORKERS)
    oracle, raw = three_site_grid_oracle(0.05 * math.pi, n=50)
    d3 = abs(three.transfer.p_out - oracle)
    ok = seven.transfer.p_out >= 0.99 and d3 <= 1e-4 and three.transfer.p_out >= raw - 1e-12
    record(8, ok, f"N=7, 50 restarts: best p_out={seven.transfer.p_out:.6f} >= 0.99; N=3: "
                  f"{three.transfer.p_out:.7f} vs 50^3 grid oracle {oracle:.7f} (|diff|={d3:.1e} <= 1e-4)")
    assert ok


def _rk4(h, psi, t, steps):
    dt = t / steps
    for _ in range(steps):
        k1 = -1j * (h @ psi)
        k2 = -1j * (h @ (psi + 0.5 * dt * k1))
        k3 = -1j * (h @ (psi + 0.5 * dt * k2))
        k4 = -1j * (h @ (psi + dt * k3))
        psi = psi + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    return psi


def test_criterion_09_property_suites():
    rng = np.random.default_rng(SEED)
    checks = {}

    worst = 0.0
    for n in (2, 7, 12):
        h = random_hamiltonian(rng, n)
        psi = basis_state(n, 0)
        for t in (0.1, 3.0, 40.0):
            worst = max(worst, abs(np.linalg.norm(propagate_closed(h, psi, t)) - 1))
    checks["unitarity"] = (worst <= 1e-12, f"{worst:.1e}")

    worst = 0.0
    for n in (3, 7, 13):
        h = random_hamiltonian(rng, n)
        for t in (0.1, 2.0):
            rho = propagate_open(h, random_density(rng, n), DephasingConfig(1.3), t)
            worst = max(worst, abs(np.trace(rho).real - 1), -np.linalg.eigvalsh(rho).min(),
                        np.abs(rho - rho.conj().T).max())
    checks["CPTP"] = (worst <= 1e-9, f"{worst:.1e}")

    h = random_hamiltonian(rng, 7)
    a, b = _rk4(h, basis_state(7, 0), 1.0, 3000), _rk4(h, basis_state(7, 0), 1.0, 6000)
    ref = b + (b - a) / 15
    got = propagate_closed(h, basis_state(7, 0), 1.0)
    err = np.abs(np.outer(got, got.conj()) - np.outer(ref, ref.conj())).max()
    checks["spectral-vs-integrator"] = (err <= 1e-8, f"{err:.1e}")

    vals = []
    for k in (1, 2, 3):
        for _ in range(200):
            amp = np.zeros(7, dtype=complex)
            idx = rng.choice(7, k, replace=False)
            amp[idx] = rng.normal(size=k) + 1j * rng.normal(size=k)
            vals.append(c4(amp / np.linalg.norm(amp)))
    checks["c4=0 on <=3 sites"] = (max(vals) == 0.0, f"max {max(vals):.1e}")

    parts = []
    for _ in range(3):
        h1 = Histogram1D(200)
        h1.add(rng.uniform(-0.05, 1.05, 5000))
        parts.append(h1)
    left = parts[0].merge(parts[1]).merge(parts[2])
    right = parts[0].merge(parts[1].merge(parts[2]))
    checks["merge associativity"] = (np.array_equal(left.counts, right.counts)
                                     and (left.underflow, left.overflow) == (right.underflow, right.overflow),
                                     "bitwise")

    cfg = dict(n_sites=7, n_samples=20_000, seed=SEED, record_entanglement=True)
    r1 = run_campaign(CampaignConfig(**cfg, workers=1))
    r16 = run_campaign(CampaignConfig(**cfg, workers=16))
    same = (r1.moments == r16.moments and r1.tails == r16.tails and r1.gates == r16.gates
            and all(np.array_equal(r1.hists[k].counts, r16.hists[k].counts) for k in r1.hists)
            and all(np.array_equal(r1.cond[k].counts, r16.cond[k].counts) for k in r1.cond)
            and all(np.array_equal(r1.records[k], r16.records[k], equal_nan=True) for k in r1.records))
    checks["1 vs 16 workers"] = (same, "bitwise")

    ok = all(v[0] for v in checks.values())
    record(9, ok, "; ".join(f"{k}: {'ok' if v[0] else 'FAIL'} ({v[1]})" for k, v in checks.items()))
    assert ok


def test_criterion_10_fmo_suite():
    path = os.environ.get("EXCITON_FMO_HAMILTONIAN")
    if not path or not Path(path).is_file():
        pytest.skip("data-dependent: FMO Hamiltonian file not supplied "
                    "(set EXCITON_FMO_HAMILTONIAN=path/to/fmo.json)")
    restarts = int(os.environ.get("EXCITON_FMO_RESTARTS", "200"))
    base = load_hamiltonian(path)
    window = default_time_window(base)
    p_base = transfer_efficiency_closed(base, window).p_out
    box = HamiltonianBoxConfig(base, n_restarts=restarts, seed=SEED)
    opt = optimize_hamiltonian_box(box, window)
    star = opt.hamiltonian
    gamma = 2.0 / window
    d_base = dephased_evaluation(base, gamma, window, DEFAULT_CONVENTION).p_out
    d_star = dephased_evaluation(star, gamma, window, DEFAULT_CONVENTION).p_out
    rob = robustness_scan(star, RobustnessConfig(seed=SEED), window)
    ratio = rob.std / rob.mean
    target = 0.05 / 0.43
    checks = {
        "window": (abs(window - 1.6e-13) <= 0.16e-13, f"T={window:.3e}s"),
        "base": (abs(p_base - 0.057) <= 0.01, f"p={p_base:.4f}"),
        "FMO*": (opt.transfer.p_out >= 0.40 and in_box(star, box), f"p={opt.transfer.p_out:.4f}"),
        "dephased base": (abs(d_base - 0.123) <= 0.03, f"p={d_base:.4f}"),
        "dephased FMO*": (abs(d_star - 0.215) <= 0.05, f"p={d_star:.4f}"),
        "robustness": (target / 2 <= ratio <= 2 * target, f"std/mean={ratio:.3f} vs {target:.3f}"),
    }
    ok = all(v[0] for v in checks.values())
    record(10, ok, "; ".join(f"{k}: {'ok' if v[0] else 'FAIL'} ({v[1]})" for k, v in checks.items()))
    assert ok
