"""Monte Carlo campaigns over random conformations.

Sample ``i`` of a campaign is fully determined by ``(seed, i)``.  The index
range is cut into fixed-size shards independent of the worker count; every
shard produces private histograms, moments and counters, and the shards are
reduced in index order.  Results are therefore bitwise identical for any
number of workers.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import kernel
from .dynamics import DephasingConfig, GridConfig, OpenSpectrum
from .entanglement import MIXED_ESTIMATOR, c_nu_mixed_estimate
from .rng import split_seed
from .sketch import Histogram1D, Histogram2D, RunningMoments

# frozen after calibrating the dephased ensemble mean (see README)
DEFAULT_CONVENTION = "projector"
DEFAULT_TAIL_THRESHOLDS = (0.5, 0.76, 0.9)
# (x field, x strictly below, p_out strictly above)
DEFAULT_GATES = (("c2_max", 0.8, 0.5), ("c4_max", 0.5, 0.5))
SHARD_SIZE = 8192
# retained records cost ~72 bytes each; beyond this the cap is a config error
MAX_RECORD_CAP = 20_000_000
THREADS_ENV = "EXCITON_THREADS"

RECORD_FIELDS = (
    "index", "p_out_coherent", "t_star", "c2_max", "c4_max",
    "p_out_dephased", "t_star_dephased", "c2_max_dephased",
)


class CampaignConfigError(ValueError):
    pass


def default_workers() -> int:
    value = os.environ.get(THREADS_ENV)
    if value:
        try:
            return max(1, int(value))
        except ValueError:
            raise CampaignConfigError(f"{THREADS_ENV} must be an integer, got {value!r}") from None
    return os.cpu_count() or 1


@dataclass(frozen=True)
class CampaignConfig:
    n_sites: int
    n_samples: int
    seed: int = 0
    window_factor: float = 0.1
    alpha: float = 1.0
    # dephasing: gamma = gamma_over_window / T unless an absolute gamma is given
    gamma_over_window: float | None = None
    gamma: float | None = None
    convention: str = DEFAULT_CONVENTION
    grid: GridConfig = field(default_factory=GridConfig)
    record_entanglement: bool = False
    record_mixed_entanglement: bool = False
    bins: int = 200
    cond_bins: int = 100
    tail_thresholds: tuple = DEFAULT_TAIL_THRESHOLDS
    gates: tuple = DEFAULT_GATES
    record_cap: int = 1_000_000
    workers: int = 1

    def __post_init__(self):
        if self.n_sites < 2:
            raise CampaignConfigError(f"sites must be >= 2 (got {self.n_sites})")
        if self.n_samples < 1:
            raise CampaignConfigError(f"samples must be >= 1 (got {self.n_samples})")
        if self.seed < 0:
            raise CampaignConfigError("seed must be non-negative")
        if not self.window_factor > 0:
            raise CampaignConfigError("window factor must be positive")
        if self.bins < 2 or self.cond_bins < 2:
            raise CampaignConfigError("bins must be >= 2")
        if self.gamma is not None and self.gamma_over_window is not None:
            raise CampaignConfigError("give either gamma or gamma_over_window, not both")
        for g in (self.gamma, self.gamma_over_window):
            if g is not None and g < 0:
                raise CampaignConfigError("dephasing rate must be non-negative")
        if self.convention not in ("projector", "double"):
            raise CampaignConfigError(f"unknown dephasing convention {self.convention!r}")
        if not 0 <= self.record_cap <= MAX_RECORD_CAP:
            raise CampaignConfigError(
                f"record cap must lie in [0, {MAX_RECORD_CAP}] (got {self.record_cap}); "
                "histograms and counters stay exact without raw records")
        if self.workers < 1:
            raise CampaignConfigError("workers must be >= 1")
        if self.record_mixed_entanglement and not self.dephased:
            raise CampaignConfigError("mixed-state entanglement requires dephasing")
        for t in self.tail_thresholds:
            if not 0 <= t <= 1:
                raise CampaignConfigError("tail thresholds must lie in [0, 1]")

    @property
    def dephased(self) -> bool:
        return self.gamma is not None or self.gamma_over_window is not None

    @property
    def window(self) -> float:
        # poles are a distance d = 1 apart, so the in-out coupling equals alpha
        return self.window_factor * math.pi / (2.0 * self.alpha)

    def dephasing(self) -> DephasingConfig | None:
        if self.gamma is not None:
            return DephasingConfig(self.gamma, self.convention)
        if self.gamma_over_window is not None:
            return DephasingConfig(self.gamma_over_window / self.window, self.convention)
        return None

    def to_dict(self) -> dict:
        return {
            "n_sites": self.n_sites, "n_samples": self.n_samples, "seed": self.seed,
            "window_factor": self.window_factor, "alpha": self.alpha,
            "gamma_over_window": self.gamma_over_window, "gamma": self.gamma,
            "convention": self.convention,
            "grid": {"grid_points": self.grid.grid_points, "refine_tol": self.grid.refine_tol},
            "record_entanglement": self.record_entanglement,
            "record_mixed_entanglement": self.record_mixed_entanglement,
            "bins": self.bins, "cond_bins": self.cond_bins,
            "tail_thresholds": list(self.tail_thresholds),
            "gates": [list(g) for g in self.gates],
            "record_cap": self.record_cap,
        }


# --------------------------------------------------------------------------
# per-shard accumulation


@dataclass
class Partial:
    """Everything a shard contributes; merged associatively."""

    n: int
    moments: dict
    hists: dict
    cond: dict
    tails: dict
    gates: dict
    gain_loss: dict
    records: dict


def _empty_gain_loss() -> dict:
    return {"n_gain": 0, "n_loss": 0, "n_equal": 0, "sum_gain": 0.0, "sum_loss": 0.0}


def _evaluate_shard(cfg: CampaignConfig, start: int, count: int) -> dict:
    k0, k1 = split_seed(cfg.seed)
    window = cfg.window
    out = {
        "index": np.arange(start, start + count, dtype=np.int64),
        "p_out_coherent": np.empty(count),
        "t_star": np.empty(count),
        "c2_max": np.full(count, np.nan),
        "c4_max": np.full(count, np.nan),
        "p_out_dephased": np.full(count, np.nan),
        "t_star_dephased": np.full(count, np.nan),
        "c2_max_dephased": np.full(count, np.nan),
        "priority": np.empty(count),
    }
    kernel.coherent_shard(
        cfg.n_sites, k0, k1, start, cfg.alpha, window, cfg.grid.grid_points, cfg.grid.refine_tol,
        cfg.record_entanglement, out["p_out_coherent"], out["t_star"], out["c2_max"],
        out["c4_max"], out["priority"],
    )
    deph = cfg.dephasing()
    if deph is not None:
        n = cfg.n_sites
        gen = np.empty((1, n * n, n * n))
        for i in range(count):
            kernel.shard_generators(n, k0, k1, start + i, 1, cfg.alpha, deph.coherence_rate, gen)
            spec = OpenSpectrum(gen[0].copy(), n, 0, 1)
            p, ts, _ = spec.scan(window, cfg.grid)
            out["p_out_dephased"][i] = p
            out["t_star_dephased"][i] = ts
            if cfg.record_mixed_entanglement:
                out["c2_max_dephased"][i] = _mixed_c2_max(spec, window, cfg.grid, ts)
    return out


def _mixed_c2_max(spec: OpenSpectrum, window: float, grid: GridConfig, t_star: float) -> float:
    dt = window / (grid.grid_points - 1)
    n_last = min(int(math.floor(t_star / dt)), grid.grid_points - 1)
    times = np.append(np.arange(n_last + 1) * dt, t_star)
    best = 0.0
    for t in times:
        x = spec.packed_state(t)
        rho = np.empty((spec.n, spec.n), dtype=complex)
        kernel.unpack_density(np.ascontiguousarray(x), rho)
        best = max(best, c_nu_mixed_estimate(rho, 2))
    return best


def _partial_from(cfg: CampaignConfig, rec: dict) -> Partial:
    p = rec["p_out_coherent"]
    moments = {"p_out_coherent": RunningMoments.from_values(p)}
    hists = {"coherent": Histogram1D(cfg.bins)}
    hists["coherent"].add(p)
    tails = {"coherent": {t: int((p >= t).sum()) for t in cfg.tail_thresholds}}
    cond, gates = {}, {}
    if cfg.record_entanglement:
        for name in ("c2_max", "c4_max"):
            h2 = Histogram2D(cfg.cond_bins, cfg.cond_bins)
            h2.add(rec[name], p)
            cond[name] = h2
        for xf, below, above in cfg.gates:
            sel = rec[xf] < below
            gates[(xf, below, above)] = (int(sel.sum()), int((sel & (p > above)).sum()))
    gl = _empty_gain_loss()
    if cfg.dephased:
        q = rec["p_out_dephased"]
        moments["p_out_dephased"] = RunningMoments.from_values(q)
        hists["dephased"] = Histogram1D(cfg.bins)
        hists["dephased"].add(q)
        tails["dephased"] = {t: int((q >= t).sum()) for t in cfg.tail_thresholds}
        delta = q - p
        gl = {
            "n_gain": int((delta > 0).sum()), "n_loss": int((delta < 0).sum()),
            "n_equal": int((delta == 0).sum()),
            "sum_gain": float(delta[delta > 0].sum()), "sum_loss": float(delta[delta < 0].sum()),
        }
        if cfg.record_mixed_entanglement:
            h2 = Histogram2D(cfg.cond_bins, cfg.cond_bins)
            h2.add(rec["c2_max_dephased"], q)
            cond["c2_max_dephased"] = h2
    return Partial(len(p), moments, hists, cond, tails, gates, gl, rec)


class _Reservoir:
    """Bottom-k retention by per-sample priority; order-independent."""

    def __init__(self, cap: int):
        self.cap = cap
        self.parts: list[dict] = []
        self.size = 0
        self.threshold = np.inf
        self.seen = 0

    def add(self, rec: dict) -> None:
        self.seen += len(rec["index"])
        if self.cap == 0:
            return
        keep = rec["priority"] <= self.threshold
        if not keep.all():
            rec = {k: v[keep] for k, v in rec.items()}
        self.parts.append(rec)
        self.size += len(rec["index"])
        if self.size > 2 * self.cap:
            self._compact()

    def _compact(self) -> None:
        merged = {k: np.concatenate([p[k] for p in self.parts]) for k in self.parts[0]}
        if len(merged["index"]) > self.cap:
            order = np.lexsort((merged["index"], merged["priority"]))[: self.cap]
            merged = {k: v[order] for k, v in merged.items()}
            self.threshold = float(merged["priority"].max())
        self.parts = [merged]
        self.size = len(merged["index"])

    def result(self) -> dict:
        if not self.parts:
            return {k: np.empty(0) for k in RECORD_FIELDS}
        self._compact()
        rec = self.parts[0]
        order = np.argsort(rec["index"], kind="stable")
        return {k: rec[k][order] for k in RECORD_FIELDS}


# --------------------------------------------------------------------------
# campaign


@dataclass
class CampaignResult:
    config: CampaignConfig
    window: float
    n: int
    moments: dict
    hists: dict
    cond: dict
    tails: dict
    gates: dict
    gain_loss: dict
    records: dict
    records_complete: bool

    @property
    def mean_coherent(self) -> float:
        return self.moments["p_out_coherent"].mean

    @property
    def mean_dephased(self) -> float:
        return self.moments["p_out_dephased"].mean

    def gate_probability(self, x_field: str, below: float, above: float) -> tuple[int, int]:
        """(count with x < below, count of those with p_out > above)."""
        return self.gates[(x_field, below, above)]

    def summary(self) -> dict:
        cfg = self.config
        out = {
            "n_samples": self.n,
            "window": self.window,
            "dephasing": None,
            "entanglement_estimator": MIXED_ESTIMATOR if cfg.record_mixed_entanglement else None,
            "moments": {k: v.as_dict() for k, v in self.moments.items()},
            "tails": {},
            "gates": [],
            "gain_loss": None,
            "crossing": None,
            "records": {"retained": int(len(self.records["index"])), "complete": self.records_complete},
        }
        for kind, counts in self.tails.items():
            out["tails"][kind] = []
            for t, c in sorted(counts.items()):
                lo, hi = wilson_interval(c, self.n)
                out["tails"][kind].append(
                    {"threshold": t, "count": c, "fraction": c / self.n, "wilson95": [lo, hi]}
                )
        for (xf, below, above), (n_x, n_xy) in self.gates.items():
            out["gates"].append({
                "x_field": xf, "x_below": below, "p_out_above": above, "n_condition": n_x,
                "n_joint": n_xy, "probability": (n_xy / n_x) if n_x else None,
            })
        deph = cfg.dephasing()
        if deph is not None:
            out["dephasing"] = {"gamma": deph.gamma, "convention": deph.convention,
                                "coherence_rate": deph.coherence_rate,
                                "gamma_over_window": deph.gamma * self.window}
            gl = self.gain_loss
            out["gain_loss"] = {
                "fraction_enhanced": gl["n_gain"] / self.n,
                "fraction_suppressed": gl["n_loss"] / self.n,
                "fraction_unchanged": gl["n_equal"] / self.n,
                "mean_gain": gl["sum_gain"] / gl["n_gain"] if gl["n_gain"] else None,
                "mean_loss": gl["sum_loss"] / gl["n_loss"] if gl["n_loss"] else None,
            }
            cross = density_crossing(self.hists["coherent"], self.hists["dephased"])
            out["crossing"] = {"found": cross.found, "level": cross.level, "direction": "rising"}
        return out


def shard_ranges(n_samples: int, shard_size: int = SHARD_SIZE):
    return [(s, min(shard_size, n_samples - s)) for s in range(0, n_samples, shard_size)]


def run_campaign(cfg: CampaignConfig, progress=None) -> CampaignResult:
    """Evaluate ``cfg.n_samples`` random conformations and reduce the statistics."""
    ranges = shard_ranges(cfg.n_samples)
    reservoir = _Reservoir(cfg.record_cap)
    acc: Partial | None = None

    def consume(rec):
        nonlocal acc
        part = _partial_from(cfg, rec)
        reservoir.add(rec)
        part.records = None
        acc = part if acc is None else _merge(acc, part)
        if progress is not None:
            progress(acc.n, cfg.n_samples)

    if cfg.workers == 1:
        for start, count in ranges:
            consume(_evaluate_shard(cfg, start, count))
    else:
        with ThreadPoolExecutor(cfg.workers) as pool:
            window = 4 * cfg.workers
            for k in range(0, len(ranges), window):
                chunk = ranges[k:k + window]
                for rec in pool.map(lambda r: _evaluate_shard(cfg, *r), chunk):
                    consume(rec)
    records = reservoir.result()
    return CampaignResult(cfg, cfg.window, acc.n, acc.moments, acc.hists, acc.cond, acc.tails,
                          acc.gates, acc.gain_loss, records, reservoir.seen <= cfg.record_cap)


def _merge(a: Partial, b: Partial) -> Partial:
    return Partial(
        a.n + b.n,
        {k: a.moments[k].merge(b.moments[k]) for k in a.moments},
        {k: a.hists[k].merge(b.hists[k]) for k in a.hists},
        {k: a.cond[k].merge(b.cond[k]) for k in a.cond},
        {kind: {t: a.tails[kind][t] + b.tails[kind][t] for t in a.tails[kind]} for kind in a.tails},
        {g: (a.gates[g][0] + b.gates[g][0], a.gates[g][1] + b.gates[g][1]) for g in a.gates},
        {k: a.gain_loss[k] + b.gain_loss[k] for k in a.gain_loss},
        None,
    )


def with_overrides(cfg: CampaignConfig, **kw) -> CampaignConfig:
    return replace(cfg, **kw)


# --------------------------------------------------------------------------
# statistics on results


def wilson_interval(k: int, n: int, z: float = 1.959963984540054) -> tuple[float, float]:
    if n == 0:
        return 0.0, 1.0
    phat = k / n
    den = 1 + z * z / n
    center = (phat + z * z / (2 * n)) / den
    half = z * math.sqrt(phat * (1 - phat) / n + z * z / (4 * n * n)) / den
    return max(0.0, center - half), min(1.0, center + half)


@dataclass(frozen=True)
class TailFraction:
    threshold: float
    count: int
    n: int
    fraction: float
    ci_low: float
    ci_high: float


def tail_fraction(result: CampaignResult, threshold: float, kind: str = "coherent") -> TailFraction:
    """Fraction of samples with ``p_out >= threshold`` plus its Wilson 95% interval.

    Uses the exact campaign counters; thresholds not tracked there are
    answered from the raw records when every sample was retained.
    """
    n = result.n
    counts = result.tails[kind]
    if threshold in counts:
        k = counts[threshold]
    elif threshold <= 0:
        k = n
    elif threshold > 1:
        k = 0
    elif result.records_complete:
        field_name = "p_out_coherent" if kind == "coherent" else "p_out_dephased"
        k = int((result.records[field_name] >= threshold).sum())
    else:
        raise ValueError(f"threshold {threshold} was not tracked and records are capped")
    lo, hi = wilson_interval(k, n)
    return TailFraction(threshold, k, n, k / n, lo, hi)


@dataclass
class ConditionalDensity:
    hist: Histogram2D
    mass: np.ndarray
    empty_columns: np.ndarray

    @property
    def density(self) -> np.ndarray:
        """Conditional density over y per x column (integrates to 1 over y)."""
        dy = (self.hist.y_range[1] - self.hist.y_range[0]) / self.hist.y_bins
        return self.mass / dy


def conditional_density(records: dict, x_field: str, y_field: str = "p_out_coherent",
                        bins: int | tuple = 100) -> ConditionalDensity:
    """Histogram of ``y`` given ``x`` with every non-empty x column normalised to unit mass."""
    for f in (x_field, y_field):
        if f not in records:
            raise KeyError(f"records lack field {f!r}")
    x = np.asarray(records[x_field], dtype=float)
    if np.all(np.isnan(x)):
        raise KeyError(f"field {x_field!r} was not recorded")
    bx, by = (bins, bins) if isinstance(bins, int) else bins
    h = Histogram2D(bx, by)
    h.add(x, records[y_field])
    return from_histogram2d(h)


def from_histogram2d(h: Histogram2D) -> ConditionalDensity:
    mass, empty = h.column_normalized()
    return ConditionalDensity(h, mass, empty)


def conditional_exceedance(records: dict, x_field: str, x_below: float, y_above: float,
                           y_field: str = "p_out_coherent") -> tuple[float, int]:
    """Empirical P(y > y_above | x < x_below) and the conditioning count."""
    x = np.asarray(records[x_field])
    y = np.asarray(records[y_field])
    sel = x < x_below
    n = int(sel.sum())
    return (float((y[sel] > y_above).sum() / n) if n else float("nan")), n


@dataclass
class GainLoss:
    deltas: np.ndarray
    fraction_enhanced: float
    fraction_suppressed: float
    fraction_unchanged: float
    mean_gain: float
    mean_loss: float


def dephasing_gain_loss(records: dict) -> GainLoss:
    """Signed change ``p_dephased - p_coherent`` per conformation and class summaries."""
    if "p_out_dephased" not in records:
        raise ValueError("records carry no dephased efficiencies")
    p = np.asarray(records["p_out_coherent"], dtype=float)
    q = np.asarray(records["p_out_dephased"], dtype=float)
    if p.shape != q.shape or np.isnan(q).any():
        raise ValueError("records are not paired coherent/dephased evaluations")
    d = q - p
    n = max(len(d), 1)
    gain, loss = d[d > 0], d[d < 0]
    return GainLoss(
        d, len(gain) / n, len(loss) / n, float((d == 0).sum()) / n,
        float(gain.mean()) if len(gain) else 0.0, float(loss.mean()) if len(loss) else 0.0,
    )


@dataclass(frozen=True)
class Crossing:
    found: bool
    level: float | None = None


def density_crossing(coherent: Histogram1D, dephased: Histogram1D, persistence: int = 3,
                     direction: str = "rising") -> Crossing:
    """Lowest abscissa where the two densities cross with a persistent sign change.

    The bin-wise difference ``coherent - dephased`` must change sign and keep
    the new sign over at least ``persistence`` bins.  ``direction="rising"``
    only accepts changes from negative to positive, i.e. the level above which
    the coherent density dominates; ``"falling"`` the opposite; ``"any"``
    accepts both.  The crossing is interpolated linearly between the bin
    centres on either side.
    """
    if direction not in ("rising", "falling", "any"):
        raise ValueError("direction must be 'rising', 'falling' or 'any'")
    if not coherent.compatible(dephased):
        raise ValueError("histograms must share their binning")
    if coherent.total == 0 or dephased.total == 0:
        return Crossing(False)
    diff = coherent.density() - dephased.density()
    sign = np.sign(diff)
    centers = 0.5 * (coherent.edges[:-1] + coherent.edges[1:])
    nz = np.flatnonzero(sign)
    for a, b in zip(nz[:-1], nz[1:]):
        if sign[a] == sign[b]:
            continue
        if (direction == "rising" and sign[b] < 0) or (direction == "falling" and sign[b] > 0):
            continue
        after = sign[b:b + persistence]
        if len(after) < persistence or np.any(after != sign[b]):
            continue
        x = centers[a] + (centers[b] - centers[a]) * diff[a] / (diff[a] - diff[b])
        return Crossing(True, float(x))
    return Crossing(False)
