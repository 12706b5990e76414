"""Single-trajectory drivers: mean field, particles (optionally coupled to the
conditional McKean-Vlasov copies) and the fluctuation SPDE.

All randomness is drawn from keyed streams:

    W                common_noise   ensemble_id = w_path_id
    X_i(0), B_i      idiosyncratic  ensemble_id = member id (particle_id 1 / 0)
    eta0, M noise    eta0 / mfield_noise, ensemble_id = run id

so a conditional batch shares the W stream and nothing else.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .config import Scenario
from .errors import ConfigurationError, NumericalAlarm
from .particles import (CouplingPair, NoiseBundle, ParticleState, common_path, coupling_mse,
                        pairwise_drift, sample_initial_positions, step_interacting,
                        step_mckean_vlasov)
from .rng import StreamKey
from .spde import (FluctuationState, MeanFieldState, NoisePathRecord, eta0_key,
                   generate_M_increment, m_noise_key, sample_eta0, step_fluctuation,
                   step_mean_field)
from .stats import (MartingaleAccumulator, PairingSeries, TestFunction, continuum_interaction,
                    empirical_error_norm, particle_interaction, sigma_second_values,
                    sigma_transport_values, sobolev_norm_sq)
from .torus import FourierField, evaluate_modes

log = logging.getLogger(__name__)


def member_id(n: int, index: int) -> int:
    """Distinct idiosyncratic stream id for ensemble member ``index`` at size ``n``."""
    return int(n) * 1_000_000 + int(index)


def initial_key(seed: int, member: int) -> StreamKey:
    return StreamKey(seed, "idiosyncratic", member, 1, 0)


def noise_record(sc: Scenario, w_path_id: int = 0) -> NoisePathRecord:
    dW = common_path(sc.master_seed, w_path_id, sc.n_steps, sc.dt)
    return NoisePathRecord(sc.dt, dW, (sc.master_seed,), w_path_id)


def _check_record(sc: Scenario, rec: NoisePathRecord):
    if abs(rec.dt - sc.dt) > 1e-15 * sc.dt:
        raise ConfigurationError(f"noise record dt={rec.dt} differs from scenario dt={sc.dt}")
    if rec.n_steps < sc.n_steps:
        raise ConfigurationError(f"noise record has {rec.n_steps} steps, scenario needs {sc.n_steps}")


class DensitySampler:
    """Vectorized evaluation of a band-limited density for rejection sampling."""

    def __init__(self, v: FourierField):
        self.block = v.centered(max(v.band(), 1))
        self.grid_max = float(v.values().max())

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        return evaluate_modes(self.block, x.reshape(-1, 2)).reshape(x.shape[:-1])


# ---------------------------------------------------------------------------
# mean field
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class MeanFieldPath:
    times: np.ndarray
    fields: list
    dW: np.ndarray
    w_path_id: int = 0
    monitors: dict = field(default_factory=dict)
    _ublocks: dict = field(default_factory=dict, repr=False)

    @property
    def final(self) -> FourierField:
        return self.fields[-1]

    def velocity_blocks(self, k_eval: int) -> np.ndarray:
        """Centered coefficients of u = K*v_n, shape (steps+1, 2, 2k+1, 2k+1)."""
        if k_eval not in self._ublocks:
            from .torus import _velocity_multiplier_cached
            g = self.fields[0].grid
            mult = _velocity_multiplier_cached(g)
            out = []
            for f in self.fields:
                out.append(FourierField(g, mult * f.coeffs).centered(k_eval))
            self._ublocks[k_eval] = np.array(out)
        return self._ublocks[k_eval]

    def grad_sq_integral(self, phi: TestFunction, upto: int | None = None) -> float:
        """int_0^t <|grad phi|^2, v_s> ds, trapezoidal on the step grid."""
        n = len(self.fields) if upto is None else upto + 1
        vals = np.array([phi.grad_sq_mean(f) for f in self.fields[:n]])
        t = self.times[:n]
        return float(np.sum(0.5 * (vals[1:] + vals[:-1]) * np.diff(t)))


def solve_mean_field(sc: Scenario, dW, w_path_id: int = 0, *, check: bool = True) -> MeanFieldPath:
    """Integrate the mean-field equation along the given common-noise increments."""
    scheme = sc.scheme()
    state = MeanFieldState(sc.initial_density())
    fields_ = [state.v]
    mass, l2, vmin, vmax = [0.0], [], [], []
    g = scheme.grid

    def monitor(v):
        vals = v.values()
        l2.append(float(np.sum(np.abs(v.coeffs) ** 2)))
        vmin.append(float(vals.min()))
        vmax.append(float(vals.max()))

    monitor(state.v)
    for step in range(sc.n_steps):
        state = step_mean_field(state, float(dW[step]), scheme)
        fields_.append(state.v)
        monitor(state.v)
        mass.append(float(abs(state.v.coeffs[0, 0] - 1.0)))
        if check and not np.isfinite(l2[-1]):
            raise NumericalAlarm(f"mean field blew up at step {step + 1}")
        if check and vmin[-1] < -sc.positivity_tol:
            raise NumericalAlarm(
                f"mean field lost positivity at step {step + 1}: grid min {vmin[-1]:.3e}")
    monitors = dict(mass_error=np.array(mass), l2=np.array(l2),
                    vmin=np.array(vmin), vmax=np.array(vmax))
    return MeanFieldPath(sc.times.copy(), fields_, np.asarray(dW[: sc.n_steps], dtype=float),
                         w_path_id, monitors)


def run_mean_field(sc: Scenario, record: NoisePathRecord | None = None, w_path_id: int = 0):
    if record is None:
        record = noise_record(sc, w_path_id)
    _check_record(sc, record)
    return solve_mean_field(sc, record.increments, record.path_id), record


# ---------------------------------------------------------------------------
# particles
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class ParticleOutcome:
    N: int
    member: int
    w_path_id: int
    final: ParticleState
    initial: ParticleState
    martingales: dict = field(default_factory=dict)
    series: dict = field(default_factory=dict)
    snapshots: list = field(default_factory=list)
    coupling_mse: float | None = None
    limit_final: ParticleState | None = None
    keys: dict = field(default_factory=dict)


def _log_observables(series, t, pos, drift, v, phis, sigma, alpha, k_stat, sqrt_n, g_points):
    pts, area = g_points
    v_vals = v.values()

    def eta(on_particles, on_grid):
        # sqrt(N) (<psi, mu_N> - <psi, v>) with <psi, v> by grid quadrature
        return sqrt_n * (np.mean(on_particles) - np.sum(on_grid * v_vals) * area)

    for phi in phis:
        name = str(phi)
        series[f"eta[{name}]"].append(t, eta(phi(pos), phi(pts)))
        lap = phi.laplacian()
        series[f"eta_lap[{name}]"].append(t, eta(lap(pos), lap(pts)))
        if sigma is not None:
            series[f"eta_sig2[{name}]"].append(
                t, eta(sigma_second_values(phi, sigma, pos), sigma_second_values(phi, sigma, pts)))
            series[f"eta_sig1[{name}]"].append(
                t, eta(sigma_transport_values(phi, sigma, pos), sigma_transport_values(phi, sigma, pts)))
        if drift is not None:
            kn = particle_interaction(pos, phi, drift) - sqrt_n * continuum_interaction(v, phi)
            series[f"interaction[{name}]"].append(t, kn)
    for a in alpha:
        series[f"norm[H{a:g}]"].append(t, empirical_error_norm(pos, v, a, k_stat))


def simulate_particles(sc: Scenario, n: int, member: int, dW, *, w_path_id: int = 0,
                       mean_field: MeanFieldPath | None = None, phis=(), log_series: bool = False,
                       coupled: bool = False, snapshot_every: int | None = None,
                       sampler: DensitySampler | None = None) -> ParticleOutcome:
    """One particle trajectory; ``coupled`` also advances the McKean-Vlasov copies with the same noise."""
    spec = sc.kernel_spec()
    sigma = sc.sigma_field()
    seed = sc.master_seed
    dt = sc.dt
    if sampler is None:
        sampler = DensitySampler(sc.initial_density())
    state = sample_initial_positions(sampler, n, initial_key(seed, member), grid_max=sampler.grid_max)
    initial = state
    if (coupled or log_series) and mean_field is None:
        raise ConfigurationError("coupled runs and full logging need the mean-field path")
    ublocks = mean_field.velocity_blocks(sc.k_eval) if coupled and sc.interacting else None
    limit = state if coupled else None
    accs = {str(p): MartingaleAccumulator(p) for p in phis}
    series: dict = {}
    sqrt_n = np.sqrt(n)
    if log_series:
        g = mean_field.fields[0].grid
        g_points = (np.stack([g.x1, g.x2], axis=-1), g.cell_area)
        names = []
        for p in phis:
            names += [f"eta[{p}]", f"eta_lap[{p}]", f"martingale[{p}]", f"qv[{p}]"]
            if sigma is not None:
                names += [f"eta_sig2[{p}]", f"eta_sig1[{p}]"]
            if spec is not None:
                names.append(f"interaction[{p}]")
        names += [f"norm[H{a:g}]" for a in sc.alpha]
        names.append("dW")
        for nm in names:
            series[nm] = PairingSeries(nm, N=n, ensemble_id=member, w_path_id=w_path_id, seed=seed)
    snaps = []
    if snapshot_every:
        snaps.append((0.0, state.positions.copy()))

    def drift_at(pos):
        return pairwise_drift(pos, spec, sc.force) if spec is not None else None

    drift = drift_at(state.positions)
    keys = {}
    for step in range(sc.n_steps):
        t = step * dt
        noise = NoiseBundle.draw(seed, step, n, dt, w_path_id=w_path_id, ensemble_id=member,
                                 dW=float(dW[step]))
        if step == 0:
            keys = {"common_noise": noise.keys[0], "idiosyncratic": noise.keys[1]}
        if log_series:
            _log_observables(series, t, state.positions, drift, mean_field.fields[step], phis, sigma,
                             sc.alpha, sc.k_stat, sqrt_n, g_points)
            for p in phis:
                series[f"martingale[{p}]"].append(t, accs[str(p)].value)
                series[f"qv[{p}]"].append(t, accs[str(p)].qv)
            series["dW"].append(t, noise.dW)
        for acc in accs.values():
            acc.update(state.positions, noise.dB, dt)
        new_state = step_interacting(state, noise, spec, sigma, sc.force, drift=drift)
        if coupled:
            u = evaluate_modes(ublocks[step], limit.positions).T if ublocks is not None else None
            limit = step_mckean_vlasov(limit, None, noise, sigma, drift=u)
        state = new_state
        drift = drift_at(state.positions) if (step + 1 < sc.n_steps or log_series) else None
        if snapshot_every and (step + 1) % snapshot_every == 0:
            snaps.append(((step + 1) * dt, state.positions.copy()))
    if log_series:
        t = sc.n_steps * dt
        _log_observables(series, t, state.positions, drift, mean_field.fields[-1], phis, sigma,
                         sc.alpha, sc.k_stat, sqrt_n, g_points)
        for p in phis:
            series[f"martingale[{p}]"].append(t, accs[str(p)].value)
            series[f"qv[{p}]"].append(t, accs[str(p)].qv)
        series["dW"].append(t, 0.0)
    if snapshot_every and snaps[-1][0] != sc.n_steps * dt:
        snaps.append((sc.n_steps * dt, state.positions.copy()))
    out = ParticleOutcome(n, member, w_path_id, state, initial,
                          {k: (a.value, a.qv) for k, a in accs.items()}, series, snaps, keys=keys)
    if coupled:
        out.limit_final = limit
        out.coupling_mse = coupling_mse(CouplingPair(state, limit))
    return out


def run_particles(sc: Scenario, n: int, ensemble_id: int = 0, record: NoisePathRecord | None = None,
                  *, log_series: bool = True, snapshot_every: int | None = None):
    """Particle run with full observable logging (the mean field is solved along the same W)."""
    if record is None:
        if sc.conditional_on_w:
            raise ConfigurationError("conditional runs need a persisted common-noise record")
        record = noise_record(sc, ensemble_id)
    _check_record(sc, record)
    mf = solve_mean_field(sc, record.increments, record.path_id)
    out = simulate_particles(sc, n, ensemble_id, record.increments, w_path_id=record.path_id,
                             mean_field=mf, phis=sc.test_functions(), log_series=log_series,
                             snapshot_every=snapshot_every)
    return out, mf


def particle_weak_form_residual(outcome: ParticleOutcome, phi, dt: float) -> np.ndarray:
    """Residual of the fluctuation identity for <phi, eta^N> from the logged series."""
    from .stats import weak_form_residual
    s = outcome.series
    name = str(phi)
    t, p = s[f"eta[{name}]"].as_arrays()
    drift = [s[f"eta_lap[{name}]"].as_arrays()[1]]
    if f"eta_sig2[{name}]" in s:
        drift.append(0.5 * s[f"eta_sig2[{name}]"].as_arrays()[1])
    if f"interaction[{name}]" in s:
        drift.append(s[f"interaction[{name}]"].as_arrays()[1])
    noise = []
    if f"eta_sig1[{name}]" in s:
        noise.append((s[f"eta_sig1[{name}]"].as_arrays()[1], s["dW"].as_arrays()[1]))
    return weak_form_residual(t, p, drift, noise, s[f"martingale[{name}]"].as_arrays()[1])


def mean_field_weak_form_residual(sc: Scenario, path: MeanFieldPath, phi: TestFunction) -> np.ndarray:
    """Residual of <phi, v_t> = <phi, v_0> + int <lap phi, v> + <grad phi, v K*v>
    + 1/2 <sigma.grad(sigma.grad phi), v> ds + int <sigma.grad phi, v> dW."""
    from .stats import weak_form_residual
    g = path.fields[0].grid
    pts = np.stack([g.x1, g.x2], axis=-1)
    sigma = sc.sigma_field()
    pair = np.array([f.pair(phi) for f in path.fields])
    lap = phi.laplacian()
    drift = [np.array([f.pair(lap) for f in path.fields])]
    if sc.interacting:
        drift.append(np.array([continuum_interaction(f, phi) for f in path.fields]))
    noise = []
    if sigma is not None:
        s2 = sigma_second_values(phi, sigma, pts)
        s1 = sigma_transport_values(phi, sigma, pts)
        drift.append(np.array([0.5 * np.sum(s2 * f.values()) * g.cell_area for f in path.fields]))
        noise.append((np.array([np.sum(s1 * f.values()) * g.cell_area for f in path.fields]), path.dW))
    return weak_form_residual(path.times, pair, drift, noise)


# ---------------------------------------------------------------------------
# fluctuation SPDE
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class FluctuationOutcome:
    run_id: int
    final: FluctuationState
    series: dict = field(default_factory=dict)
    snapshots: list = field(default_factory=list)


def simulate_fluctuation(sc: Scenario, mean_field: MeanFieldPath, run_id: int, phis=(), *,
                         zero_initial: bool = False, additive_noise: bool = True,
                         snapshot_every: int | None = None) -> FluctuationOutcome:
    scheme = sc.scheme()
    seed = sc.master_seed
    v0 = mean_field.fields[0]
    if zero_initial:
        state = FluctuationState(FourierField(v0.grid, np.zeros_like(v0.coeffs)))
    else:
        state = sample_eta0(v0, eta0_key(seed, run_id), sc.positivity_tol)
    series = {str(p): PairingSeries(f"eta_limit[{p}]", ensemble_id=run_id,
                                    w_path_id=mean_field.w_path_id, seed=seed) for p in phis}
    snaps = [(0.0, state.eta)] if snapshot_every else []

    def log(t):
        for p in phis:
            series[str(p)].append(t, state.eta.pair(p))

    log(0.0)
    for step in range(sc.n_steps):
        v = mean_field.fields[step]
        dM = generate_M_increment(v, sc.dt, m_noise_key(seed, run_id, step)) if additive_noise else None
        state = step_fluctuation(state, v, float(mean_field.dW[step]), dM, scheme)
        if not np.all(np.isfinite(state.eta.coeffs[:2, :2])):
            raise NumericalAlarm(f"fluctuation field blew up at step {step + 1}")
        log(state.time)
        if snapshot_every and (step + 1) % snapshot_every == 0:
            snaps.append((state.time, state.eta))
    return FluctuationOutcome(run_id, state, series, snaps)
