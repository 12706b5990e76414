"""Run matrices for the statistical studies and their pass/fail gates.

Each study returns a StudyResult holding a ResultTable (one row per observable
and N, every gate traceable to a row), the gate list, and plot-ready columns.
"""

from __future__ import annotations

import csv
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import Scenario
from .errors import ConfigurationError
from .runs import (DensitySampler, member_id, noise_record, simulate_fluctuation,
                   simulate_particles, solve_mean_field, initial_key)
from .particles import sample_initial_positions
from .stats import (conditional_char_compare, empirical_error_norm, eta_pairing, ks_normal_test,
                    rate_fit, sobolev_tail_bound)

log = logging.getLogger(__name__)

TABLE_COLUMNS = ("study", "observable", "N", "count", "value", "std_error", "reference",
                 "threshold", "passed")

# acceptance thresholds
RATE_SLOPE_RANGE = (-1.2, -0.8)
RATE_MIN_R2 = 0.98
CLT_VARIANCE_RTOL = 0.05
CLT_KS_LEVEL = 0.01
CLT_KS_PASS_FRACTION = 0.95
CHAR_N_SE = 3.0
ISOMETRY_N_SE = 4.0
COUPLING_FINAL_RATIO = 0.5
LIMIT_N_SE = 3.0


@dataclass
class Gate:
    name: str
    value: float
    threshold: str
    passed: bool

    def as_dict(self):
        return dict(name=self.name, value=float(self.value), threshold=self.threshold,
                    passed=bool(self.passed))


@dataclass
class StudyResult:
    kind: str
    rows: list = field(default_factory=list)
    gates: list = field(default_factory=list)
    plots: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)
    elapsed: float = 0.0

    @property
    def passed(self) -> bool:
        return all(g.passed for g in self.gates)

    def add_row(self, observable, N, count, value, se=float("nan"), reference=float("nan"),
                threshold="", passed=""):
        self.rows.append(dict(study=self.kind, observable=observable, N=N, count=count,
                              value=float(value), std_error=float(se), reference=float(reference),
                              threshold=threshold, passed=passed))

    def gate(self, name, value, threshold, passed):
        g = Gate(name, float(value), threshold, bool(passed))
        self.gates.append(g)
        return g

    def summary(self) -> dict:
        return dict(study=self.kind, passed=self.passed, elapsed_seconds=round(self.elapsed, 3),
                    gates=[g.as_dict() for g in self.gates], **self.extra)

    def write(self, out_dir) -> list:
        """results.csv, summary.json, plots.json and one CSV per plot; returns file names."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        files = []
        with open(out / "results.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=TABLE_COLUMNS)
            w.writeheader()
            for r in self.rows:
                w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
        files.append("results.csv")
        (out / "summary.json").write_text(json.dumps(self.summary(), indent=2, sort_keys=True))
        files.append("summary.json")
        axes = {}
        for name, (columns, data, x, y) in self.plots.items():
            fname = f"plot_{name}.csv"
            with open(out / fname, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(columns)
                for row in zip(*data):
                    w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
            axes[fname] = dict(x=x, y=y)
            files.append(fname)
        (out / "plots.json").write_text(json.dumps(axes, indent=2, sort_keys=True))
        files.append("plots.json")
        return files


def _pmap(fn, items, workers: int):
    """Order-preserving map; results never depend on the worker count."""
    items = list(items)
    if workers <= 1 or len(items) < 2:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items, chunksize=max(1, len(items) // (4 * workers))))


def _mean_se(x):
    x = np.asarray(x, dtype=float)
    return float(x.mean()), float(x.std(ddof=1) / np.sqrt(x.size)) if x.size > 1 else float("nan")


def _var_se(x):
    """Sample variance and its standard error from the fourth central moment."""
    x = np.asarray(x, dtype=float)
    n = x.size
    c = x - x.mean()
    var = float(np.sum(c**2) / (n - 1))
    m4 = float(np.mean(c**4))
    return var, float(np.sqrt(max(m4 - var**2 * (n - 3) / (n - 1), 0.0) / n))


# ---------------------------------------------------------------------------
# workers (top level so they pickle)
# ---------------------------------------------------------------------------

_CACHE: dict = {}


def _mean_field_cached(sc: Scenario, w_path_id: int):
    key = (sc.digest(), w_path_id)
    if key not in _CACHE:
        _CACHE.clear()
        _CACHE[key] = solve_mean_field(sc, noise_record(sc, w_path_id).increments, w_path_id)
    return _CACHE[key]


def _rate_member(args):
    sc, n, e, w_id = args
    mf = _mean_field_cached(sc, w_id)
    out = simulate_particles(sc, n, member_id(n, e), mf.dW, w_path_id=w_id)
    return [empirical_error_norm(out.final.positions, mf.final, a, sc.k_stat) for a in sc.alpha]


def _clt_draw(args):
    sc, n, index, phis = args
    v0 = sc.initial_density()
    sampler = DensitySampler(v0)
    vals = []
    for i in index:
        pos = sample_initial_positions(sampler, n, initial_key(sc.master_seed, member_id(n, i)),
                                       grid_max=sampler.grid_max).positions
        vals.append([eta_pairing(pos, v0.pair(p), p) for p in phis])
    return vals


def _conditional_member(args):
    sc, n, e, w_id = args
    mf = _mean_field_cached(sc, w_id)
    phis = sc.test_functions()
    out = simulate_particles(sc, n, member_id(n, e), mf.dW, w_path_id=w_id, phis=phis)
    return [out.martingales[str(p)] for p in phis], out.keys["common_noise"].ensemble_id


def _coupling_member(args):
    sc, ladder, e = args
    mf = solve_mean_field(sc, noise_record(sc, e).increments, e)
    return [simulate_particles(sc, n, member_id(n, e), mf.dW, w_path_id=e, mean_field=mf,
                               coupled=True).coupling_mse for n in ladder]


def _limit_pair(args):
    sc, n, i = args
    mf = solve_mean_field(sc, noise_record(sc, i).increments, i)
    phis = sc.test_functions()
    part = simulate_particles(sc, n, member_id(n, i), mf.dW, w_path_id=i)
    vt = mf.final
    p_vals = [eta_pairing(part.final.positions, vt.pair(p), p) for p in phis]
    lim = simulate_fluctuation(sc, mf, i, phis)
    s_vals = [lim.final.eta.pair(p) for p in phis]
    return p_vals, s_vals


# ---------------------------------------------------------------------------
# studies
# ---------------------------------------------------------------------------

def study_rate(sc: Scenario, workers: int = 1, injected=None) -> StudyResult:
    """E ||mu_N - v_T||^2_{H^alpha} against N, conditional on one W path.

    ``injected`` maps N -> per-ensemble values and bypasses the simulation.
    """
    res = StudyResult("rate")
    if injected is None:
        jobs = [(sc, n, e, 0 if sc.conditional_on_w else e) for n in sc.N for e in range(sc.ensembles)]
        vals = _pmap(_rate_member, jobs, workers)
        per_n = {n: np.array([vals[i * sc.ensembles + e] for e in range(sc.ensembles)])
                 for i, n in enumerate(sc.N)}
    else:
        per_n = {n: np.asarray(v, dtype=float).reshape(-1, 1) for n, v in injected.items()}
    alphas = sc.alpha if injected is None else sc.alpha[:1]
    for j, a in enumerate(alphas):
        means = []
        for n in sorted(per_n):
            m, se = _mean_se(per_n[n][:, j])
            means.append((n, m))
            res.add_row(f"norm_sq[H{a:g}]", n, per_n[n].shape[0], m, se,
                        reference=sobolev_tail_bound(sc.k_stat, a))
        fit = rate_fit(means)
        ns = [n for n, _ in means]
        res.plots[f"rate_H{a:g}"] = (("N", "mean_norm_sq", "std_error"),
                                     (ns, [m for _, m in means],
                                      [_mean_se(per_n[n][:, j])[1] for n in ns]), "N (log)",
                                     "E||mu_N - v_T||^2 (log)")
        lo, hi = RATE_SLOPE_RANGE
        res.add_row(f"slope[H{a:g}]", "", len(means), fit.slope, fit.half_width / 1.96,
                    reference=-1.0, threshold=f"[{lo}, {hi}]", passed=fit.contains(lo, hi))
        res.add_row(f"r_squared[H{a:g}]", "", len(means), fit.r_squared,
                    threshold=f">= {RATE_MIN_R2}", passed=fit.r_squared >= RATE_MIN_R2)
        if j == 0:
            res.gate(f"slope[H{a:g}]", fit.slope, f"[{lo}, {hi}]", fit.contains(lo, hi))
            res.gate(f"r_squared[H{a:g}]", fit.r_squared, f">= {RATE_MIN_R2}",
                     fit.r_squared >= RATE_MIN_R2)
            res.extra["fit"] = dict(slope=fit.slope, intercept=fit.intercept,
                                    r_squared=fit.r_squared, half_width=fit.half_width)
    res.extra["k_stat"] = sc.k_stat
    res.extra["tail_bound"] = sobolev_tail_bound(sc.k_stat, sc.alpha[0])
    return res


def study_clt0(sc: Scenario, workers: int = 1, samples=None) -> StudyResult:
    """Gaussian law of <eta^N_0, phi>; ``samples`` (reps x draws) bypasses the particle sampler."""
    res = StudyResult("clt0")
    phi = sc.test_functions()[0]
    v0 = sc.initial_density()
    g = v0.grid
    phi_grid = phi.values_on(g)
    target = float(np.sum(phi_grid**2 * v0.values()) * g.cell_area - v0.pair(phi) ** 2)
    n = sc.N[-1]
    if samples is None:
        total = sc.repetitions * sc.samples
        chunk = 100
        jobs = [(sc, n, range(s, min(s + chunk, total)), [phi]) for s in range(0, total, chunk)]
        flat = np.array([r[0] for part in _pmap(_clt_draw, jobs, workers) for r in part])
        samples = flat.reshape(sc.repetitions, sc.samples)
    samples = np.asarray(samples, dtype=float)
    pvals, stats_ = [], []
    for r, row in enumerate(samples):
        d, p = ks_normal_test(row, 0.0, target)
        pvals.append(p)
        stats_.append(d)
        var, se = _var_se(row)
        res.add_row(f"variance[{phi}] rep {r}", n, row.size, var, se, target)
        res.add_row(f"ks_pvalue[{phi}] rep {r}", n, row.size, p, threshold=f"> {CLT_KS_LEVEL}",
                    passed=p > CLT_KS_LEVEL)
    pooled, pooled_se = _var_se(samples.ravel())
    rel = abs(pooled - target) / target
    frac = float(np.mean(np.array(pvals) > CLT_KS_LEVEL))
    first = abs(_var_se(samples[0])[0] - target) / target
    res.add_row(f"variance[{phi}] pooled", n, samples.size, pooled, pooled_se, target,
                f"rel err <= {CLT_VARIANCE_RTOL}", rel <= CLT_VARIANCE_RTOL)
    res.add_row(f"ks_pass_fraction[{phi}]", n, len(pvals), frac,
                threshold=f">= {CLT_KS_PASS_FRACTION}", passed=frac >= CLT_KS_PASS_FRACTION)
    res.gate(f"variance_rel_error[{phi}]", rel, f"<= {CLT_VARIANCE_RTOL}", rel <= CLT_VARIANCE_RTOL)
    res.gate(f"ks_pass_fraction[{phi}]", frac, f">= {CLT_KS_PASS_FRACTION}",
             frac >= CLT_KS_PASS_FRACTION)
    res.extra.update(target_variance=target, pooled_variance=pooled,
                     first_repetition_rel_error=first, ks_pvalues=pvals)
    res.plots["clt0_samples"] = (("repetition", "value"),
                                 (np.repeat(np.arange(samples.shape[0]), samples.shape[1]),
                                  samples.ravel()), "value", "density")
    return res


def study_conditional_m(sc: Scenario, workers: int = 1, samples=None, qv=None,
                        w_path_ids=None, grad_integral=None) -> StudyResult:
    """Conditional characteristic function of <M^N_t, phi> given one W path, and the isometry."""
    res = StudyResult("conditional_m")
    phi = sc.test_functions()[0]
    n = sc.N[-1]
    if samples is None:
        jobs = [(sc, n, e, 0) for e in range(sc.ensembles)]
        out = _pmap(_conditional_member, jobs, workers)
        samples = np.array([o[0][0][0] for o in out])
        qv = np.array([o[0][0][1] for o in out])
        w_path_ids = [o[1] for o in out]
        grad_integral = _mean_field_cached(sc, 0).grad_sq_integral(phi)
    samples = np.asarray(samples, dtype=float)
    if w_path_ids is None:
        w_path_ids = [0] * samples.size
    comps = conditional_char_compare(samples, w_path_ids, grad_integral, sc.s_grid)
    char_ok = True
    for c in comps:
        ok = c.within(CHAR_N_SE)
        char_ok &= ok
        zr, zi = c.z_scores()
        res.add_row(f"char_re[{phi}] s={c.s:g}", n, samples.size, c.empirical_re, c.se_re, c.target,
                    f"|z| <= {CHAR_N_SE}", abs(zr) <= CHAR_N_SE)
        res.add_row(f"char_im[{phi}] s={c.s:g}", n, samples.size, c.empirical_im, c.se_im, 0.0,
                    f"|z| <= {CHAR_N_SE}", abs(zi) <= CHAR_N_SE)
    worst = max(max(abs(z) for z in c.z_scores()) for c in comps)
    res.gate(f"char_function_max_z[{phi}]", worst, f"<= {CHAR_N_SE}", char_ok)
    res.plots["conditional_char"] = (("s", "empirical_re", "empirical_im", "target", "se_re", "se_im"),
                                     ([c.s for c in comps], [c.empirical_re for c in comps],
                                      [c.empirical_im for c in comps], [c.target for c in comps],
                                      [c.se_re for c in comps], [c.se_im for c in comps]),
                                     "s", "E exp(i s <M_t, phi>)")
    res.plots["martingale_samples"] = (("value",), (samples,), "value", "density")
    if qv is not None:
        qv = np.asarray(qv, dtype=float)
        var, var_se = _var_se(samples)
        qmean, qse = _mean_se(qv)
        se = float(np.hypot(var_se, qse))
        z = abs(var - qmean) / se
        res.add_row(f"variance[{phi}]", n, samples.size, var, var_se, qmean)
        res.add_row(f"mean_qv[{phi}]", n, qv.size, qmean, qse, 2 * grad_integral)
        res.gate(f"isometry_z[{phi}]", z, f"<= {ISOMETRY_N_SE}", z <= ISOMETRY_N_SE)
        res.extra.update(variance=var, mean_qv=qmean)
    res.extra.update(grad_integral=grad_integral, shared_w_path_ids=sorted(set(map(int, w_path_ids))))
    return res


def study_coupling(sc: Scenario, workers: int = 1) -> StudyResult:
    """Time-T mean-square distance between X^N_i and its McKean-Vlasov copy along an N ladder."""
    res = StudyResult("coupling")
    ladder = tuple(sc.N)
    vals = np.array(_pmap(_coupling_member, [(sc, ladder, e) for e in range(sc.ensembles)], workers))
    means, ses = [], []
    for j, n in enumerate(ladder):
        m, se = _mean_se(vals[:, j])
        means.append(m)
        ses.append(se)
        res.add_row("coupling_mse", n, vals.shape[0], m, se)
    # an identically zero ladder (no interaction) counts as converged
    decreasing = all(b < a or a == b == 0 for a, b in zip(means, means[1:]))
    ratio = means[-1] / means[0] if means[0] > 0 else 0.0
    res.gate("mse_strictly_decreasing", float(decreasing), "True", decreasing)
    res.gate("mse_ratio_last_first", ratio, f"< {COUPLING_FINAL_RATIO}",
             ratio < COUPLING_FINAL_RATIO or means[0] == 0)
    res.plots["coupling"] = (("N", "mse", "std_error"), (list(ladder), means, ses), "N (log)",
                             "E|X^N - Xbar|^2 (log)")
    if len(ladder) >= 3 and min(means) > 0:
        fit = rate_fit(list(zip(ladder, means)))
        res.extra["fit_slope"] = fit.slope
    return res


def study_limit_compare(sc: Scenario, workers: int = 1) -> StudyResult:
    """Mean and variance of <eta^N_T, phi> vs the fluctuation SPDE, run i sharing W_i."""
    res = StudyResult("limit_compare")
    n = sc.N[-1]
    phis = sc.test_functions()
    out = _pmap(_limit_pair, [(sc, n, i) for i in range(sc.ensembles)], workers)
    part = np.array([o[0] for o in out])
    spde = np.array([o[1] for o in out])
    for j, p in enumerate(phis):
        mp, sp = _mean_se(part[:, j])
        ms, ss = _mean_se(spde[:, j])
        vp, svp = _var_se(part[:, j])
        vs, svs = _var_se(spde[:, j])
        zm = abs(mp - ms) / np.hypot(sp, ss)
        zv = abs(vp - vs) / np.hypot(svp, svs)
        res.add_row(f"mean[{p}] particles", n, part.shape[0], mp, sp, ms, f"|z| <= {LIMIT_N_SE}", zm <= LIMIT_N_SE)
        res.add_row(f"mean[{p}] spde", "", spde.shape[0], ms, ss)
        res.add_row(f"variance[{p}] particles", n, part.shape[0], vp, svp, vs, f"|z| <= {LIMIT_N_SE}", zv <= LIMIT_N_SE)
        res.add_row(f"variance[{p}] spde", "", spde.shape[0], vs, svs)
        res.gate(f"mean_z[{p}]", zm, f"<= {LIMIT_N_SE}", zm <= LIMIT_N_SE)
        res.gate(f"variance_z[{p}]", zv, f"<= {LIMIT_N_SE}", zv <= LIMIT_N_SE)
        res.plots[f"limit_{j}"] = (("particles", "spde"), (part[:, j], spde[:, j]), "value", "density")
    return res


STUDIES = {
    "rate": study_rate,
    "clt0": study_clt0,
    "conditional_m": study_conditional_m,
    "coupling": study_coupling,
    "limit_compare": study_limit_compare,
}


def run_study(kind: str, sc: Scenario, workers: int = 1) -> StudyResult:
    kind = kind.replace("-", "_")
    if kind not in STUDIES:
        raise ConfigurationError(f"unknown study kind {kind!r}")
    scs = sc.for_study(kind).validate()
    t0 = time.perf_counter()
    res = STUDIES[kind](scs, workers)
    res.elapsed = time.perf_counter() - t0
    log.info("study %s finished in %.1fs, passed=%s", kind, res.elapsed, res.passed)
    return res
