import numpy as np
import pytest

from vortexfluct.config import load_scenario
from vortexfluct.errors import ConfigurationError, DomainError, FormatError
from vortexfluct.particles import sample_initial_positions
from vortexfluct.rng import StreamKey
from vortexfluct.runs import (DensitySampler, noise_record, simulate_fluctuation, solve_mean_field)
from vortexfluct.spde import (SPATIAL_TOLERANCE, FluctuationState, MeanFieldState, NoisePathRecord,
                              SpdeScheme, eta0_key, generate_M_increment, load_field,
                              m_noise_key, nonlinear_term, sample_eta0, save_field,
                              step_fluctuation, step_mean_field, transport_terms)
from vortexfluct.stats import TestFunction
from vortexfluct.torus import AREA, DivFreeVectorField, FourierField, SpectralGrid


def uniform(g):
    return FourierField.from_modes(g, {(0, 0): 1.0}, True)


def random_density(g, seed, scale=0.05):
    rng = np.random.default_rng(seed)
    vals = 1 / AREA + scale / AREA * rng.normal(size=(g.M, g.M))
    c = FourierField.from_values(g, vals, True).coeffs * g.nyquist_free
    c[0, 0] = 1.0
    return FourierField(g, c, True)


def grid_points(g):
    return [(a, b) for a in range(g.M) for b in range(g.M)]


def naive_synthesis(g, coeffs, x):
    """(2pi)^-2 sum_k c_k e^{ik.x} by explicit loops over modes."""
    total = np.zeros(coeffs.shape[:-2], dtype=complex)
    for a, b in grid_points(g):
        k1, k2 = g.wavenumbers[a], g.wavenumbers[b]
        total = total + coeffs[..., a, b] * np.exp(1j * (k1 * x[0] + k2 * x[1]))
    return total.real / AREA


def naive_analysis(g, values):
    """c_k = sum_x f(x) e^{-ik.x} h^2 by explicit loops over grid points."""
    out = np.zeros(values.shape[:-2] + (g.M, g.M), dtype=complex)
    for a, b in grid_points(g):
        k1, k2 = g.wavenumbers[a], g.wavenumbers[b]
        acc = 0.0
        for i, j in grid_points(g):
            acc = acc + values[..., i, j] * np.exp(-1j * (k1 * g.x1[i, j] + k2 * g.x2[i, j]))
        out[..., a, b] = acc * g.cell_area
    return out


def naive_values(g, fn):
    vals = None
    for i, j in grid_points(g):
        r = np.asarray(fn(np.array([g.x1[i, j], g.x2[i, j]])))
        if vals is None:
            vals = np.zeros(r.shape + (g.M, g.M))
        vals[..., i, j] = r
    return vals


def naive_divergence(g, flux_coeffs, mask):
    return 1j * (g.k1 * flux_coeffs[0] + g.k2 * flux_coeffs[1]) * mask


# ---- nonlinear and transport terms ------------------------------------------

def test_nonlinear_term_vanishes_for_uniform():
    g = SpectralGrid(16)
    assert np.max(np.abs(nonlinear_term(uniform(g)).coeffs)) < 1e-15


def test_nonlinear_term_is_mass_free():
    g = SpectralGrid(16)
    assert nonlinear_term(random_density(g, 1)).coeffs[0, 0] == 0


@pytest.mark.oracle
def test_nonlinear_term_matches_quadrature_oracle():
    g = SpectralGrid(8)
    v = random_density(g, 2, scale=0.3)
    mask = g.dealias_mask
    c = v.coeffs * mask
    ksq = np.where(g.ksq == 0, 1.0, g.ksq)
    u_c = np.stack([1j * g.k2 / ksq * c, -1j * g.k1 / ksq * c])
    u_c[:, 0, 0] = 0

    def flux(x):
        return naive_synthesis(g, u_c, x) * naive_synthesis(g, c, x)

    ref = -naive_divergence(g, naive_analysis(g, naive_values(g, flux)), mask)
    assert np.max(np.abs(nonlinear_term(v).coeffs - ref)) <= 1e-10


def test_transport_terms_vanish_for_uniform():
    g = SpectralGrid(16)
    a, b = transport_terms(uniform(g), DivFreeVectorField.default(1.0))
    assert np.max(np.abs(a.coeffs)) < 1e-15 and np.max(np.abs(b.coeffs)) < 1e-15


def test_transport_constant_sigma_single_mode():
    g = SpectralGrid(16)
    v = FourierField.from_modes(g, {(0, 0): 1.0, (2, 1): 0.1 + 0.05j}, True)
    c = 0.7
    _, first = transport_terms(v, DivFreeVectorField.constant(c, 0.0))
    assert first.coefficient(2, 1) == pytest.approx(-1j * c * 2 * (0.1 + 0.05j), abs=1e-15)


@pytest.mark.oracle
def test_transport_terms_match_quadrature_oracle():
    g = SpectralGrid(8)
    v = random_density(g, 3, scale=0.3)
    sigma = DivFreeVectorField.default(0.8)
    mask = g.dealias_mask

    def sigma_dot_grad(coeffs):
        grad = np.stack([1j * g.k1 * coeffs, 1j * g.k2 * coeffs])
        vals = naive_values(g, lambda x: sigma(x) @ naive_synthesis(g, grad, x))
        return naive_analysis(g, vals) * mask

    first = sigma_dot_grad(v.coeffs * mask)
    second = sigma_dot_grad(first)
    half_second, minus_first = transport_terms(v, sigma)
    assert np.max(np.abs(minus_first.coeffs + first)) <= 1e-12
    assert np.max(np.abs(half_second.coeffs - 0.5 * second)) <= 1e-12


# ---- mean-field stepping ----------------------------------------------------

def test_uniform_is_fixed_point():
    g = SpectralGrid(32)
    scheme = SpdeScheme(g, 0.01, DivFreeVectorField.default(0.5))
    s = MeanFieldState(uniform(g))
    for dW in (0.3, -1.0):
        s = step_mean_field(s, dW, scheme)
    assert np.max(np.abs(s.v.coeffs - uniform(g).coeffs)) < 1e-15


def test_pure_heat_decay_is_exact():
    g = SpectralGrid(32)
    v = random_density(g, 4)
    scheme = SpdeScheme(g, 0.01, None, nonlinear=False)
    s = MeanFieldState(v)
    for _ in range(10):
        s = step_mean_field(s, 0.0, scheme)
    ratio = np.abs(s.v.coeffs) - np.exp(-g.ksq * 0.1) * np.abs(v.coeffs)
    assert np.max(np.abs(ratio)) <= 1e-12


def test_mass_pinned_and_l2_non_increasing():
    sc = load_scenario(overrides={"noise.sigma": "off", "grid.M": "64", "time.T": "0.5",
                                  "kernel.k_eval": "16", "stats.k_stat": "16"}).validate()
    mf = solve_mean_field(sc, np.zeros(sc.n_steps))
    assert np.all(mf.monitors["mass_error"] == 0.0)
    assert np.all(np.diff(mf.monitors["l2"]) <= 1e-10)
    assert mf.monitors["vmax"].max() <= mf.monitors["vmax"][0] + 1e-8
    assert mf.monitors["vmin"].min() >= mf.monitors["vmin"][0] - 1e-8


def test_mass_exact_with_noise():
    sc = load_scenario(overrides={"grid.M": "32", "kernel.k_eval": "8", "stats.k_stat": "8"}).validate()
    mf = solve_mean_field(sc, noise_record(sc, 1).increments)
    assert all(f.coeffs[0, 0] == 1.0 for f in mf.fields)


def test_grid_refinement():
    out = []
    phis = [TestFunction.parse(p) for p in ("cos(1,1)", "sin(2,1)", "cos(3,-2)")]
    for m in (32, 64):
        sc = load_scenario(overrides={"grid.M": str(m), "kernel.k_eval": "8",
                                      "stats.k_stat": "8"}).validate()
        mf = solve_mean_field(sc, noise_record(sc, 0).increments)
        out.append([mf.final.pair(p) for p in phis])
    assert np.max(np.abs(np.diff(out, axis=0))) < SPATIAL_TOLERANCE


def test_stability_and_step_checks():
    g = SpectralGrid(128)
    with pytest.raises(ConfigurationError):
        SpdeScheme(g, 0.01, DivFreeVectorField.default(1.0))
    with pytest.raises(ConfigurationError):
        SpdeScheme(g, 0.0)
    assert SpdeScheme(g, 2.5e-3, DivFreeVectorField.default(0.5)).stability_number() <= 36


# ---- initial fluctuation and additive noise ----------------------------------

def test_eta0_constant_pairing_is_zero():
    g = SpectralGrid(16)
    e = sample_eta0(random_density(g, 5), eta0_key(1, 0)).eta
    assert abs(e.pair(TestFunction.constant(2.0))) < 1e-15
    assert e.coeffs[0, 0] == 0


def test_eta0_variance_uniform():
    g = SpectralGrid(16)
    v = uniform(g)
    phi = TestFunction.cos(1, 0)
    n = 10_000
    x = np.array([sample_eta0(v, eta0_key(2, r)).eta.pair(phi) for r in range(n)])
    assert abs(x.var() - 0.5) < 4 * 0.5 * np.sqrt(2 / n)


@pytest.mark.oracle
def test_eta0_covariance_matches_particle_oracle():
    sc = load_scenario(overrides={"grid.M": "32", "kernel.k_eval": "8", "stats.k_stat": "8"}).validate()
    v0 = sc.initial_density()
    phis = [TestFunction.cos(1, 0), TestFunction.cos(1, 1)]
    reps, n = 1500, 4096
    spde = np.array([[sample_eta0(v0, eta0_key(3, r)).eta.pair(p) for p in phis] for r in range(reps)])
    sampler = DensitySampler(v0)
    means = [v0.pair(p) for p in phis]
    part = []
    for r in range(reps):
        x = sample_initial_positions(sampler, n, StreamKey(3, "aux", r, 1), grid_max=sampler.grid_max).positions
        part.append([np.sqrt(n) * (np.mean(p(x)) - m) for p, m in zip(phis, means)])
    part = np.array(part)
    vals = v0.values()
    target = np.empty((2, 2))
    for i, p in enumerate(phis):
        for j, q in enumerate(phis):
            pv, qv = p.values_on(v0.grid), q.values_on(v0.grid)
            ca = v0.grid.cell_area
            target[i, j] = np.sum(pv * qv * vals) * ca - np.sum(pv * vals) * ca * np.sum(qv * vals) * ca
    c_spde, c_part = np.cov(spde.T), np.cov(part.T)
    se = np.sqrt((target**2 + np.outer(np.diag(target), np.diag(target))) / reps)
    assert np.all(np.abs(c_spde - c_part) < 4 * np.sqrt(2) * se)
    assert np.all(np.abs(c_spde - target) < 4 * se)


def test_eta0_rejects_negative_density():
    g = SpectralGrid(16)
    v = FourierField.from_modes(g, {(0, 0): 1.0, (1, 0): 0.8}, True)
    with pytest.raises(DomainError):
        sample_eta0(v, eta0_key(1, 0))


def test_m_increment_constant_pairing_and_variance():
    g = SpectralGrid(16)
    v = uniform(g)
    phi = TestFunction.cos(1, 0)
    dM = generate_M_increment(v, 0.1, m_noise_key(1, 0, 0))
    assert abs(dM.pair(TestFunction.constant())) < 1e-15
    n, steps, dt = 10_000, 2, 0.05
    tot = np.zeros(n)
    for r in range(n):
        for s in range(steps):
            tot[r] += generate_M_increment(v, dt, m_noise_key(4, r, s)).pair(phi)
    t = steps * dt
    assert abs(tot.var() - t) < 4 * t * np.sqrt(2 / n)


@pytest.mark.oracle
def test_m_cross_covariance_matches_particle_quadratic_variation():
    sc = load_scenario(overrides={"grid.M": "32", "kernel.k_eval": "8", "stats.k_stat": "8"}).validate()
    v0 = sc.initial_density()
    phi, psi = TestFunction.cos(1, 0), TestFunction.cos(1, 1)
    t, reps = 0.1, 6000
    m = np.array([[generate_M_increment(v0, t, m_noise_key(5, r, 0)).pair(p) for p in (phi, psi)]
                  for r in range(reps)])
    # particle quadratic covariation by polarization, particles frozen at draws from v0
    x = sample_initial_positions(DensitySampler(v0), 200_000, StreamKey(5, "aux", 0, 1)).positions
    qv = lambda f: 2.0 * t * np.mean(np.sum(f.grad(x) ** 2, axis=1))
    both = TestFunction(np.concatenate([phi.wavevectors, psi.wavevectors]),
                        np.concatenate([phi.amplitudes, psi.amplitudes]))
    cross_qv = 0.5 * (qv(both) - qv(phi) - qv(psi))
    cov = np.cov(m.T)
    se = np.sqrt((cov[0, 0] * cov[1, 1] + cov[0, 1] ** 2) / reps)
    assert abs(cov[0, 1] - cross_qv) < 4 * se
    analytic = 2 * t * np.sum(np.sum(phi.grad(np.stack([v0.grid.x1, v0.grid.x2], -1))
                                     * psi.grad(np.stack([v0.grid.x1, v0.grid.x2], -1)), -1)
                              * v0.values()) * v0.grid.cell_area
    assert abs(cov[0, 1] - analytic) < 4 * se


def test_m_increments_uncorrelated():
    g = SpectralGrid(16)
    v = random_density(g, 6)
    phi = TestFunction.cos(1, 0)
    n = 5000
    a = np.array([generate_M_increment(v, 0.1, m_noise_key(6, r, 0)).pair(phi) for r in range(n)])
    b = np.array([generate_M_increment(v, 0.05, m_noise_key(6, r, 1)).pair(phi) for r in range(n)])
    assert abs(np.corrcoef(a, b)[0, 1]) < 4 / np.sqrt(n)


# ---- fluctuation stepping -----------------------------------------------------

def test_zero_fluctuation_stays_zero():
    g = SpectralGrid(16)
    scheme = SpdeScheme(g, 0.01, DivFreeVectorField.default(0.5))
    s = FluctuationState(FourierField(g, np.zeros((16, 16), complex)))
    for _ in range(5):
        s = step_fluctuation(s, random_density(g, 7), 0.1, None, scheme)
    assert np.all(s.eta.coeffs == 0)


def test_uniform_density_coupling_vanishes():
    g = SpectralGrid(16)
    e = sample_eta0(random_density(g, 8), eta0_key(1, 1))
    with_k = step_fluctuation(e, uniform(g), 0.0, None, SpdeScheme(g, 0.01, None, nonlinear=True))
    without = step_fluctuation(e, uniform(g), 0.0, None, SpdeScheme(g, 0.01, None, nonlinear=False))
    assert np.max(np.abs(with_k.eta.coeffs - without.eta.coeffs)) < 1e-15


def small_fluct_scenario():
    return load_scenario(overrides={"grid.M": "32", "kernel.k_eval": "8", "stats.k_stat": "8",
                                    "time.T": "0.05"}).validate()


def test_fluctuation_runs_are_bitwise_reproducible():
    sc = small_fluct_scenario()
    mf = solve_mean_field(sc, noise_record(sc, 2).increments, 2)
    a = simulate_fluctuation(sc, mf, 7, sc.test_functions())
    b = simulate_fluctuation(sc, mf, 7, sc.test_functions())
    c = simulate_fluctuation(sc, mf, 8, sc.test_functions())
    assert np.array_equal(a.final.eta.coeffs, b.final.eta.coeffs)
    assert not np.array_equal(a.final.eta.coeffs, c.final.eta.coeffs)
    assert a.final.eta.coeffs[0, 0] == 0


def test_zero_noise_zero_initial_is_zero():
    sc = small_fluct_scenario()
    mf = solve_mean_field(sc, noise_record(sc, 2).increments, 2)
    out = simulate_fluctuation(sc, mf, 0, sc.test_functions(), zero_initial=True, additive_noise=False)
    assert np.all(out.final.eta.coeffs == 0)


# ---- persistence -------------------------------------------------------------

def test_noise_record_roundtrip(tmp_path):
    rec = NoisePathRecord(0.01, np.random.default_rng(0).normal(size=12), (123, 456), 9)
    rec.save(tmp_path / "w.vflw")
    back = NoisePathRecord.load(tmp_path / "w.vflw")
    assert back.to_bytes() == rec.to_bytes()
    assert back.path_id == 9 and back.seeds == (123, 456)
    with pytest.raises(FormatError):
        NoisePathRecord.from_bytes(b"NOPE" + rec.to_bytes()[4:])
    with pytest.raises(FormatError):
        NoisePathRecord.from_bytes(rec.to_bytes()[:30])


def test_field_roundtrip(tmp_path):
    g = SpectralGrid(16)
    f = random_density(g, 9)
    save_field(tmp_path / "v.vflf", f)
    back = load_field(tmp_path / "v.vflf", True)
    assert np.array_equal(back.coeffs, f.coeffs) and back.grid.M == 16
    raw = (tmp_path / "v.vflf").read_bytes()
    (tmp_path / "bad.vflf").write_bytes(raw[:-16])
    with pytest.raises(FormatError):
        load_field(tmp_path / "bad.vflf")
