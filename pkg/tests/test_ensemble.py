import math

import numpy as np
import pytest

from exciton_transport.dynamics import DephasingConfig, transfer_efficiency_closed, transfer_efficiency_open
from exciton_transport.ensemble import (
    SHARD_SIZE, CampaignConfig, CampaignConfigError, conditional_density, conditional_exceedance,
    default_workers, density_crossing, dephasing_gain_loss, run_campaign, shard_ranges,
    tail_fraction, wilson_interval,
)
from exciton_transport.model import coupling_matrix, sample_conformation
from exciton_transport.sketch import Histogram1D


def assert_results_identical(a, b):
    assert a.n == b.n
    for k in a.moments:
        assert a.moments[k] == b.moments[k]
    for k in a.hists:
        np.testing.assert_array_equal(a.hists[k].counts, b.hists[k].counts)
    for k in a.cond:
        np.testing.assert_array_equal(a.cond[k].counts, b.cond[k].counts)
    assert a.tails == b.tails and a.gates == b.gates and a.gain_loss == b.gain_loss
    assert a.records.keys() == b.records.keys()
    for k in a.records:
        np.testing.assert_array_equal(a.records[k], b.records[k])


def test_campaign_is_bitwise_independent_of_workers():
    cfg = CampaignConfig(7, 2 * SHARD_SIZE + 517, seed=11, record_entanglement=True, record_cap=5000)
    one = run_campaign(cfg)
    many = run_campaign(CampaignConfig(**{**cfg.__dict__, "workers": 16}))
    assert_results_identical(one, many)
    assert len(one.records["index"]) == 5000 and not one.records_complete


def test_dephased_campaign_is_bitwise_independent_of_workers():
    cfg = CampaignConfig(5, 300, seed=4, gamma_over_window=2.0, record_entanglement=True,
                         record_mixed_entanglement=True)
    assert_results_identical(run_campaign(cfg), run_campaign(CampaignConfig(**{**cfg.__dict__, "workers": 7})))


def test_records_match_single_evaluations():
    cfg = CampaignConfig(6, 40, seed=2024, gamma_over_window=2.0)
    res = run_campaign(cfg)
    for i in (0, 17, 39):
        h = coupling_matrix(sample_conformation(6, 2024, i))
        c = transfer_efficiency_closed(h, cfg.window)
        d = transfer_efficiency_open(h, DephasingConfig(2.0 / cfg.window), cfg.window)
        assert res.records["p_out_coherent"][i] == pytest.approx(c.p_out, abs=1e-12)
        assert res.records["t_star"][i] == pytest.approx(c.t_star, abs=1e-9)
        assert res.records["p_out_dephased"][i] == pytest.approx(d.p_out, abs=1e-10)


def test_two_site_campaign_is_a_single_bin():
    res = run_campaign(CampaignConfig(2, 1000, seed=1))
    p = math.sin(0.05 * math.pi) ** 2
    assert res.mean_coherent == pytest.approx(p, abs=1e-14)
    assert res.moments["p_out_coherent"].m2 == 0.0
    counts = res.hists["coherent"].counts
    assert counts.sum() == 1000 and counts[int(p * 200)] == 1000


def test_retention_is_bottom_k_by_priority():
    cfg = CampaignConfig(4, 3000, seed=9, record_cap=100)
    capped = run_campaign(cfg)
    full = run_campaign(CampaignConfig(**{**cfg.__dict__, "record_cap": 10_000}))
    assert full.records_complete and len(full.records["index"]) == 3000
    assert set(capped.records["index"]) <= set(full.records["index"])
    np.testing.assert_array_equal(np.sort(capped.records["index"]), capped.records["index"])
    idx = capped.records["index"]
    np.testing.assert_array_equal(capped.records["p_out_coherent"], full.records["p_out_coherent"][idx])


def test_campaign_config_errors():
    with pytest.raises(CampaignConfigError, match="sites must be >= 2"):
        CampaignConfig(1, 10)
    with pytest.raises(CampaignConfigError):
        CampaignConfig(7, 0)
    with pytest.raises(CampaignConfigError):
        CampaignConfig(7, 10, gamma=1.0, gamma_over_window=2.0)
    with pytest.raises(CampaignConfigError):
        CampaignConfig(7, 10, gamma=1.0, convention="triple")
    with pytest.raises(CampaignConfigError):
        CampaignConfig(7, 10, record_mixed_entanglement=True)
    with pytest.raises(CampaignConfigError, match="record cap"):
        CampaignConfig(7, 10, record_cap=10**9)


def test_default_workers(monkeypatch):
    monkeypatch.setenv("EXCITON_THREADS", "3")
    assert default_workers() == 3
    monkeypatch.setenv("EXCITON_THREADS", "x")
    with pytest.raises(CampaignConfigError):
        default_workers()


def test_shard_ranges():
    assert shard_ranges(10, 4) == [(0, 4), (4, 4), (8, 2)]
    assert sum(c for _, c in shard_ranges(100_000)) == 100_000


def test_wilson_interval():
    lo, hi = wilson_interval(0, 10)
    assert lo == 0.0 and hi == pytest.approx(0.27753, abs=1e-5)
    lo, hi = wilson_interval(5, 10)
    assert (lo, hi) == (pytest.approx(0.23659, abs=1e-5), pytest.approx(0.76341, abs=1e-5))
    assert wilson_interval(0, 0) == (0.0, 1.0)


def test_tail_fraction_counts_inclusive():
    res = run_campaign(CampaignConfig(7, 2000, seed=5, tail_thresholds=(0.05,)))
    p = res.records["p_out_coherent"]
    tf = tail_fraction(res, 0.05)
    assert tf.count == int((p >= 0.05).sum()) and tf.n == 2000
    assert tf.ci_low <= tf.fraction <= tf.ci_high
    assert tail_fraction(res, 0.123).count == int((p >= 0.123).sum())
    assert tail_fraction(res, 0.0).count == 2000 and tail_fraction(res, 1.5).count == 0
    # a sample sitting exactly on the threshold counts
    value = float(res.records["p_out_coherent"][0])
    exact = run_campaign(CampaignConfig(7, 1, seed=5, tail_thresholds=(value,)))
    assert tail_fraction(exact, value).count == 1


def test_tail_fraction_needs_records_for_untracked_thresholds():
    res = run_campaign(CampaignConfig(3, 50, seed=1, record_cap=10))
    with pytest.raises(ValueError):
        tail_fraction(res, 0.3)


def test_conditional_density():
    records = {"c2_max": np.array([0.1, 0.1, 0.1, 0.9, np.nan]),
               "p_out_coherent": np.array([0.05, 0.05, 0.95, 0.5, 0.5])}
    cd = conditional_density(records, "c2_max", bins=10)
    col = cd.density[1]
    assert (col * 0.1).sum() == pytest.approx(1.0)
    assert cd.mass[1, 0] == pytest.approx(2 / 3) and cd.mass[1, 9] == pytest.approx(1 / 3)
    assert cd.empty_columns.sum() == 8
    assert cd.hist.outside == 0 and cd.hist.total == 4
    p, n = conditional_exceedance(records, "c2_max", 0.5, 0.5)
    assert (p, n) == (pytest.approx(1 / 3), 3)
    with pytest.raises(KeyError):
        conditional_density({"c2_max": np.full(3, np.nan), "p_out_coherent": np.ones(3)}, "c2_max")


def test_gain_loss():
    records = {"p_out_coherent": np.array([0.1, 0.2, 0.3, 0.4]),
               "p_out_dephased": np.array([0.2, 0.1, 0.3, 0.1])}
    gl = dephasing_gain_loss(records)
    assert gl.fraction_enhanced == 0.25 and gl.fraction_suppressed == 0.5
    assert gl.fraction_unchanged == 0.25
    assert gl.mean_gain == pytest.approx(0.1) and gl.mean_loss == pytest.approx(-0.2)
    with pytest.raises(ValueError):
        dephasing_gain_loss({"p_out_coherent": np.ones(2)})


def triangle(rising: bool, bins=200, n=200_000):
    h = Histogram1D(bins)
    edges = h.edges
    mass = np.diff(edges**2) if rising else np.diff(1 - (1 - edges) ** 2)
    h.counts[:] = np.round(mass * n).astype(np.int64)
    return h


def test_crossing_of_triangles():
    up, down = triangle(True), triangle(False)
    c = density_crossing(up, down)
    assert c.found and abs(c.level - 0.5) <= 0.5 / 200
    assert not density_crossing(down, up).found
    c = density_crossing(down, up, direction="falling")
    assert c.found and abs(c.level - 0.5) <= 0.5 / 200
    assert density_crossing(down, up, direction="any").found
    assert not density_crossing(up, up).found
    with pytest.raises(ValueError):
        density_crossing(up, Histogram1D(100))
    with pytest.raises(ValueError):
        density_crossing(up, down, direction="sideways")


def test_crossing_ignores_short_excursions():
    a = Histogram1D(10, counts=[5, 5, 5, 5, 5, 5, 5, 5, 5, 5])
    b = Histogram1D(10, counts=[6, 4, 6, 6, 6, 4, 4, 4, 4, 6])
    # a - b: - + - - - + + + + -   -> first persistent rising change at bin 5
    c = density_crossing(a, b, persistence=3)
    assert c.found and 4.5 / 10 < c.level < 5.5 / 10
    assert density_crossing(a, b, persistence=5).found is False


def test_summary_contents():
    res = run_campaign(CampaignConfig(5, 200, seed=3, gamma_over_window=2.0, record_entanglement=True))
    s = res.summary()
    assert s["n_samples"] == 200
    assert s["dephasing"]["coherence_rate"] == pytest.approx(2.0 / res.window)
    assert s["gain_loss"]["fraction_enhanced"] + s["gain_loss"]["fraction_suppressed"] \
        + s["gain_loss"]["fraction_unchanged"] == pytest.approx(1.0)
    assert [t["threshold"] for t in s["tails"]["coherent"]] == [0.5, 0.76, 0.9]
    assert len(s["gates"]) == 2


def test_single_sample_identical_across_workers():
    a = run_campaign(CampaignConfig(7, 1, seed=123, record_entanglement=True))
    b = run_campaign(CampaignConfig(7, 1, seed=123, record_entanglement=True, workers=16))
    assert_results_identical(a, b)


def test_conditional_density_point_mass():
    records = {"c2_max": np.full(5, 0.42), "p_out_coherent": np.full(5, 0.07)}
    cd = conditional_density(records, "c2_max", bins=10)
    assert cd.mass[4, 0] == 1.0 and cd.mass.sum() == 1.0
    assert (~cd.empty_columns).sum() == 1


def test_identical_pairs_have_zero_delta():
    p = np.linspace(0, 1, 11)
    gl = dephasing_gain_loss({"p_out_coherent": p, "p_out_dephased": p.copy()})
    assert not gl.deltas.any() and gl.fraction_unchanged == 1.0


def test_moments_match_two_pass_on_records():
    res = run_campaign(CampaignConfig(7, 100_000, seed=8))
    p = res.records["p_out_coherent"]
    assert res.records_complete and len(p) == 100_000
    mu = p.mean()
    m2 = ((p - mu) ** 2).sum()
    mom = res.moments["p_out_coherent"]
    assert mom.mean == pytest.approx(mu, rel=1e-10)
    assert mom.m2 == pytest.approx(m2, rel=1e-10)


def test_recorded_values_in_range():
    cfg = CampaignConfig(7, 3000, seed=21, gamma_over_window=2.0, record_entanglement=True)
    rec = run_campaign(cfg).records
    for f in ("p_out_coherent", "p_out_dephased", "c2_max", "c4_max"):
        assert np.all((rec[f] >= 0) & (rec[f] <= 1)), f
    for f in ("t_star", "t_star_dephased"):
        assert np.all((rec[f] >= 0) & (rec[f] <= cfg.window)), f


def test_dephasing_suppresses_efficient_samples():
    # the campaign is its own oracle: strong dephasing hurts good transporters
    res = run_campaign(CampaignConfig(7, 10_000, seed=2024, gamma_over_window=2.0))
    p, q = res.records["p_out_coherent"], res.records["p_out_dephased"]
    good = p > 0.3
    assert good.sum() >= 20
    assert (q[good] < p[good]).mean() > 0.95
