import json
import re

import numpy as np
import pytest

from vortexfluct import cli
from vortexfluct.config import DENSITY_PRESETS, Scenario, load_scenario, parse_density, parse_sigma, scenario_to_ini
from vortexfluct.errors import ConfigurationError
from vortexfluct.particles import NoiseBundle, load_trajectory
from vortexfluct.spde import NoisePathRecord, load_field
from vortexfluct.stats import TestFunction, continuum_interaction, read_series_csv
from vortexfluct.studies import study_clt0, study_rate
from vortexfluct.torus import KernelSpec, eval_kernel_point, torus_displacement

SMALL = ["--grid.M=32", "--kernel.k_max=16", "--kernel.k_eval=8", "--stats.k_stat=8", "--time.T=0.05"]


def run(*argv):
    return cli.main([str(a) for a in argv])


def series_file(out, name):
    return out / "series" / (re.sub(r"[^\w.-]+", "_", name).strip("_") + ".csv")


# ---- configuration --------------------------------------------------------------

def test_defaults_validate():
    sc = Scenario().validate()
    assert sc.n_steps == 100
    assert sc.interacting


def test_overrides_are_typed_and_explicit():
    sc = load_scenario(overrides={"particles.N": "8, 16", "stats.phi": "cos(1,0), sin(0,1)",
                                  "grid.nonlinear": "off", "time.dt": "1e-3"})
    assert sc.N == (8, 16)
    assert sc.phi == ("cos(1,0)", "sin(0,1)")
    assert sc.nonlinear is False and not sc.interacting
    assert sc.dt == 1e-3
    assert {"N", "phi", "nonlinear", "dt"} <= sc.explicit


def test_study_defaults_sit_below_explicit_settings():
    sc = load_scenario(overrides={"particles.N": "8, 16"})
    assert sc.for_study("rate").N == (8, 16)
    assert sc.for_study("clt0").samples == 2000
    sc = load_scenario(overrides={"study.clt0.samples": "50"})
    assert sc.for_study("clt0").samples == 50
    assert sc.for_study("rate").samples == Scenario().samples


def test_kernel_off_disables_interaction():
    sc = load_scenario(overrides={"kernel.mode": "off"})
    assert sc.kernel_spec() is None
    assert not sc.interacting
    assert not sc.scheme().nonlinear


@pytest.mark.parametrize("override", [
    {"grid.M": "30"},
    {"grid.M": "6"},
    {"particles.N": "16, 8"},
    {"particles.N": "1"},
    {"stats.k_stat": "64"},
    {"kernel.k_eval": "64"},
    {"kernel.force": "tree"},
    {"initial.density": "modes: 1,0,0.6"},  # 1 + 1.2 cos x1 dips below zero
    {"initial.density": "nope"},
    {"noise.sigma": "swirl"},
    {"stats.phi": "cosh(1,0)"},
    {"particles.ensembles": "0"},
])
def test_invalid_scenarios_raise(override):
    with pytest.raises(ConfigurationError):
        load_scenario(overrides=override).validate()


@pytest.mark.parametrize("override", [{"grid.bogus": "1"}, {"nosection": "1"}, {"grid.M": "abc"},
                                      {"study.nope.samples": "3"}, {"run.reproducible": "maybe"}])
def test_bad_keys_and_values_raise(override):
    with pytest.raises(ConfigurationError):
        load_scenario(overrides=override)


def test_density_presets_and_modes():
    for name in DENSITY_PRESETS:
        assert parse_density(name)[(0, 0)] == 1.0
    d = parse_density("modes: 1,0,0.1; 0,2,0,0.05")
    assert d[(1, 0)] == 0.1 and d[(0, 2)] == 0.05j
    with pytest.raises(ConfigurationError):
        parse_density("modes: 0,0,0.5")
    f = load_scenario(overrides={"initial.density": "modes: 1,0,0.1"}).initial_density()
    assert f.coefficient(1, 0) == pytest.approx(0.1)
    assert f.coefficient(-1, 0) == pytest.approx(0.1)
    assert f.hermitian_defect() == 0.0


def test_sigma_specs():
    assert parse_sigma("off", 0.5) is None
    assert parse_sigma("default", 0.0) is None
    x = np.array([[0.3, -1.1]])
    s = parse_sigma("default", 0.5)
    assert np.allclose(s(x), 0.5 * np.array([[np.cos(-1.1), np.cos(0.3)]]))
    c = parse_sigma("constant: 1, 2", 0.5)
    assert np.allclose(c(x), [[0.5, 1.0]])
    m = parse_sigma("modes: 0,1,1,0", 0.5)
    assert np.allclose(m(x), [[0.5 * np.cos(-1.1), 0.0]])
    with pytest.raises(ConfigurationError):
        parse_sigma("modes: 1,0,1,0", 1.0)  # not divergence free


def test_ini_roundtrip(tmp_path):
    sc = load_scenario(overrides={"particles.N": "8, 16", "stats.phi": "cos(1,0), sin(1,1)",
                                  "noise.sigma": "constant: 1, 0", "study.rate.ensembles": "7"})
    path = tmp_path / "s.ini"
    path.write_text(scenario_to_ini(sc))
    back = load_scenario(path)
    assert back == sc
    assert back.digest() == sc.digest()
    assert back.for_study("rate").ensembles == 7


def test_malformed_ini(tmp_path):
    path = tmp_path / "bad.ini"
    path.write_text("no section header\n")
    with pytest.raises(ConfigurationError):
        load_scenario(path)
    with pytest.raises(ConfigurationError):
        load_scenario(tmp_path / "missing.ini")


def test_dict_roundtrip_and_digest():
    sc = load_scenario(overrides={"particles.N": "8, 16"})
    assert Scenario.from_dict(json.loads(json.dumps(sc.to_dict()))) == sc
    assert load_scenario(overrides={"run.master_seed": "1"}).digest() != sc.digest()


# ---- exit codes -----------------------------------------------------------------

def test_exit_codes_for_usage_and_configuration(tmp_path):
    assert run("--version") == 0
    assert run("frobnicate") == 3
    assert run("mean-field", "--out-dir", tmp_path, "--grid.M=31") == 3
    assert run("mean-field", "--out-dir", tmp_path, "--config", tmp_path / "none.ini") == 3
    assert run("fluct-limit", "--out-dir", tmp_path / "f", "--mean-field", tmp_path / "nothing", *SMALL) == 3
    assert run("report", tmp_path) == 3
    assert run("replay", tmp_path / "manifest.json") == 3


def test_numerical_alarm_exit_code(tmp_path):
    # an oversized step breaks the declared stability bound of the mean-field scheme
    rc = run("mean-field", "--out-dir", tmp_path, *SMALL, "--time.dt=0.05", "--noise.amplitude=3")
    assert rc in (3, 4)


# ---- commands -------------------------------------------------------------------

@pytest.fixture(scope="module")
def mean_field_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("mf")
    assert run("mean-field", "--out-dir", out, *SMALL, "--grid.snapshot_every=5") == 0
    return out


def test_mean_field_outputs(mean_field_dir):
    out = mean_field_dir
    snaps = sorted(p.name for p in out.glob("v_*.vflf"))
    assert snaps == [f"v_{s:06d}.vflf" for s in (0, 5, 10, 15, 20)]
    manifest = json.loads((out / "manifest.json").read_text())
    assert set(manifest["files"]) == {"w_path.vflw", "monitors.csv", *snaps}
    assert manifest["scenario"]["M"] == 32
    mon = np.loadtxt(out / "monitors.csv", delimiter=",", skiprows=1)
    assert mon.shape == (21, 5)
    assert np.max(np.abs(mon[:, 1])) < 1e-12
    assert load_scenario(out / "scenario.ini").digest() == manifest["scenario_hash"]
    v = load_field(out / "v_000000.vflf")
    assert v.coefficient(1, 1) == pytest.approx(0.125)


def test_replay_reproduces_mean_field(mean_field_dir, tmp_path, capsys):
    assert run("replay", mean_field_dir / "manifest.json", "--out-dir", tmp_path) == 0
    assert "bit for bit" in capsys.readouterr().out


def test_replay_detects_tampering(mean_field_dir, tmp_path):
    manifest = json.loads((mean_field_dir / "manifest.json").read_text())
    manifest["files"]["monitors.csv"] = "0" * 64
    path = tmp_path / "manifest.json"
    path.write_text(json.dumps(manifest))
    assert run("replay", path, "--out-dir", tmp_path / "r") == 2


def test_fluct_limit_from_mean_field_dir(mean_field_dir, tmp_path):
    out = tmp_path / "fl"
    assert run("fluct-limit", "--out-dir", out, "--mean-field", mean_field_dir, *SMALL,
               "--grid.snapshot_every=5", "--run-id=3") == 0
    assert len(list(out.glob("eta_*.vflf"))) == 5
    (s,) = read_series_csv(series_file(out, "eta_limit[cos(1,0)]"))
    assert s.ensemble_id == 3 and len(s.times) == 21
    assert s.values[0] == pytest.approx(load_field(out / "eta_000000.vflf").pair(TestFunction.parse("cos(1,0)")))
    # a scenario that does not reproduce the stored snapshots is refused
    assert run("fluct-limit", "--out-dir", tmp_path / "x", "--mean-field", mean_field_dir, *SMALL,
               "--noise.amplitude=0.3") == 3


def test_out_dir_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.OUT_DIR_ENV, str(tmp_path / "envout"))
    assert run("mean-field", *SMALL, "--time.T=0.01") == 0
    assert (tmp_path / "envout" / "manifest.json").exists()


# ---- particle run with every series recomputed from the trajectory file ---------

@pytest.fixture(scope="module")
def particle_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("particles")
    argv = ["particles", "--out-dir", out, "--n=8", "--ensemble=2", *SMALL, "--time.T=0.0075",
            "--grid.snapshot_every=1", "--kernel.mode=regularized", "--kernel.epsilon=0.3",
            "--stats.phi=cos(1,0), sin(1,2)", "--stats.alpha=-2, -1"]
    assert run(*argv) == 0
    return out


def test_particle_manifest_and_stream_audit(particle_dir):
    manifest = json.loads((particle_dir / "manifest.json").read_text())
    keys = manifest["stream_keys"]
    assert keys["common_noise"]["role"] == "common_noise"
    assert keys["common_noise"]["ensemble_id"] == 0  # conditional on W path 0
    assert keys["idiosyncratic"]["ensemble_id"] == 2
    assert manifest["invocation"]["n"] == 8
    assert "trajectory.vflp" in manifest["files"]


@pytest.mark.oracle
def test_particle_series_recomputed_from_trajectory(particle_dir):
    out = particle_dir
    sc = load_scenario(out / "scenario.ini")
    times, pos = load_trajectory(out / "trajectory.vflp")
    assert pos.shape == (4, 8, 2)
    assert np.allclose(times, [0.0, 0.0025, 0.005, 0.0075])
    n = pos.shape[1]
    rec = NoisePathRecord.load(out / "w_path.vflw")

    # mean field along the same W: reuse the CLI to produce it, read it back
    mf_out = out / "mf"
    assert run("mean-field", "--out-dir", mf_out, "--config", out / "scenario.ini") == 0
    fields = [load_field(mf_out / f"v_{s:06d}.vflf") for s in range(4)]
    sigma = sc.sigma_field()
    spec = KernelSpec.regularized(0.3)

    def read(name):
        (s,) = read_series_csv(series_file(out, name))
        assert np.allclose(s.times, times, atol=1e-15)
        return np.array(s.values)

    for text in ("cos(1,0)", "sin(1,2)"):
        phi = TestFunction.parse(text)
        k1, k2 = (int(t) for t in text[4:-1].split(","))
        trig = np.cos if text.startswith("cos") else np.sin
        lap = -(k1 * k1 + k2 * k2)

        def field_pair(v, scale=1.0):
            # <trig(k.x), v> from the density coefficient c_k = int v e^{-ik.x}
            c = v.coefficient(k1, k2)
            return scale * (c.real if trig is np.cos else -c.imag)

        phase = pos[..., 0] * k1 + pos[..., 1] * k2
        eta = [np.sqrt(n) * (trig(phase[s]).mean() - field_pair(fields[s])) for s in range(4)]
        assert np.allclose(read(f"eta[{phi}]"), eta, atol=1e-12)
        eta_lap = [np.sqrt(n) * (lap * trig(phase[s]).mean() - field_pair(fields[s], lap)) for s in range(4)]
        assert np.allclose(read(f"eta_lap[{phi}]"), eta_lap, atol=1e-12)

        # gradient of phi at the particles
        dtrig = -np.sin(phase) if trig is np.cos else np.cos(phase)
        grad = np.stack([k1 * dtrig, k2 * dtrig], axis=-1)

        # martingale and quadratic variation, regenerating dB from its stream keys
        mart, qv = [0.0], [0.0]
        for s in range(3):
            dB = NoiseBundle.draw(sc.master_seed, s, n, sc.dt, ensemble_id=2, dW=0.0).dB
            mart.append(mart[-1] + np.sqrt(2 / n) * np.sum(grad[s] * dB))
            qv.append(qv[-1] + 2 / n * np.sum(grad[s] ** 2) * sc.dt)
        assert np.allclose(read(f"martingale[{phi}]"), mart, atol=1e-12)
        assert np.allclose(read(f"qv[{phi}]"), qv, atol=1e-12)

        # transport term sigma . grad phi, the field part by grid quadrature
        def transport(points):
            ph = points[..., 0] * k1 + points[..., 1] * k2
            d = -np.sin(ph) if trig is np.cos else np.cos(ph)
            sv = sigma(points)
            return sv[..., 0] * k1 * d + sv[..., 1] * k2 * d

        g = fields[0].grid
        pts = np.stack([g.x1, g.x2], axis=-1)
        sig1 = [np.sqrt(n) * (transport(pos[s]).mean() - np.sum(transport(pts) * fields[s].values()) * g.cell_area)
                for s in range(4)]
        assert np.allclose(read(f"eta_sig1[{phi}]"), sig1, atol=1e-12)

        # interaction by a naive double loop over pairs
        inter = []
        for s in range(4):
            b = np.zeros((n, 2))
            for i in range(n):
                for j in range(n):
                    if i != j:
                        b[i] += eval_kernel_point(spec, torus_displacement(pos[s, i], pos[s, j])) / n
            inter.append(np.sum(grad[s] * b) / np.sqrt(n) - np.sqrt(n) * continuum_interaction(fields[s], phi))
        assert np.allclose(read(f"interaction[{phi}]"), inter, atol=1e-12)

    # Sobolev error norms by a direct sum over modes
    for alpha in (-2.0, -1.0):
        norms = []
        for s in range(4):
            tot = 0.0
            for a in range(-8, 9):
                for c in range(-8, 9):
                    if a == c == 0:
                        continue
                    mu = np.mean(np.exp(-1j * (a * pos[s, :, 0] + c * pos[s, :, 1])))
                    tot += (1 + a * a + c * c) ** alpha * abs(mu - fields[s].coefficient(a, c)) ** 2
            norms.append(tot)
        assert np.allclose(read(f"norm[H{alpha:g}]"), norms, rtol=1e-12)

    assert np.allclose(read("dW")[:3], rec.increments[:3], atol=0)
    assert read("dW")[3] == 0.0


def test_particles_replay(particle_dir, tmp_path):
    assert run("replay", particle_dir / "manifest.json", "--out-dir", tmp_path) == 0


# ---- studies --------------------------------------------------------------------

def test_injected_rate_study_recovers_slope():
    sc = load_scenario(overrides={"particles.N": "256, 512, 1024, 2048, 4096"}).for_study("rate")
    rng = np.random.default_rng(4)
    injected = {n: (3.0 / n) * (1 + 0.05 * rng.standard_normal(100)) for n in sc.N}
    res = study_rate(sc, injected=injected)
    assert res.extra["fit"]["slope"] == pytest.approx(-1.0, abs=0.05)
    assert res.passed


def test_injected_rate_study_rejects_wrong_law():
    sc = Scenario().for_study("rate")
    injected = {n: np.full(10, n ** -0.5) * (1 + 1e-3 * np.arange(10)) for n in sc.N}
    assert not study_rate(sc, injected=injected).passed


@pytest.mark.oracle
def test_synthetic_clt0_samples_pass():
    sc = Scenario().for_study("clt0")
    # Var cos(x1) under the default density is 1/2 (its (2,0) coefficient vanishes)
    samples = np.random.default_rng(11).normal(0.0, np.sqrt(0.5), (20, 2000))
    res = study_clt0(sc, samples=samples)
    assert res.extra["target_variance"] == pytest.approx(0.5, rel=1e-12)
    assert res.passed
    assert not study_clt0(sc, samples=samples * 1.2).passed


def test_coupling_study_without_kernel(tmp_path):
    out = tmp_path / "coupling"
    rc = run("study", "coupling", "--out-dir", out, *SMALL, "--time.T=0.01", "--kernel.mode=off",
             "--particles.N=4, 8", "--particles.ensembles=2")
    assert rc == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["passed"]
    rows = (out / "results.csv").read_text().splitlines()
    header = rows[0].split(",")
    mse = [r.split(",") for r in rows[1:] if r.startswith("coupling,coupling_mse")]
    assert len(mse) == 2
    assert all(float(r[header.index("value")]) == 0.0 for r in mse)
    assert run("report", out) == 0
