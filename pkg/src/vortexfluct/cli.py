"""Command-line driver.

    vortexfluct mean-field   [options]
    vortexfluct particles    [options] [--n N] [--ensemble E] [--w-record FILE]
    vortexfluct fluct-limit  [options] --mean-field DIR [--run-id R]
    vortexfluct study KIND   [options]     KIND: rate clt0 conditional-m coupling limit-compare
    vortexfluct report DIR
    vortexfluct replay MANIFEST

Common options: --config FILE, --seed S, --out-dir DIR, --threads T,
--reproducible / --no-reproducible, and any ``--section.key=value`` override.

Exit codes: 0 all gates pass, 2 gates failed, 3 configuration error,
4 numerical alarm.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import re
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import __version__
from .config import Scenario, load_scenario, scenario_to_ini
from .errors import ConfigurationError, FormatError, NumericalAlarm, VortexFluctError
from .particles import save_trajectory
from .spde import NoisePathRecord, load_field, save_field
from .stats import write_series_csv

EXIT_OK, EXIT_GATES, EXIT_CONFIG, EXIT_ALARM = 0, 2, 3, 4
OUT_DIR_ENV = "VORTEXFLUCT_OUT_DIR"
_OVERRIDE = re.compile(r"^--([A-Za-z_][\w-]*(?:\.[\w-]+)+)=(.*)$")

log = logging.getLogger("vortexfluct")


def _common_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="INI scenario file")
    p.add_argument("--seed", type=int, help="master seed (overrides run.master_seed)")
    p.add_argument("--out-dir", help=f"output directory (default ${OUT_DIR_ENV} or ./vortexfluct-out)")
    p.add_argument("--threads", type=int, help="worker processes for ensembles")
    p.add_argument("--reproducible", dest="reproducible", action="store_true", default=None)
    p.add_argument("--no-reproducible", dest="reproducible", action="store_false")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common_parser()
    ap = argparse.ArgumentParser(prog="vortexfluct", description=__doc__.split("\n\n")[0],
                                 parents=[common])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    sub.add_parser("mean-field", parents=[common], help="solve the mean-field SPDE along one W path")
    p = sub.add_parser("particles", parents=[common], help="one particle trajectory with logged observables")
    p.add_argument("--n", type=int, help="particle count (default: first of particles.N)")
    p.add_argument("--ensemble", type=int, default=0)
    p.add_argument("--w-record", help="persisted common-noise path (.vflw)")
    p = sub.add_parser("fluct-limit", parents=[common], help="fluctuation SPDE along a mean-field run")
    p.add_argument("--mean-field", required=True, help="output directory of a mean-field run")
    p.add_argument("--run-id", type=int, default=0)
    p = sub.add_parser("study", parents=[common], help="run a statistical study")
    p.add_argument("kind", choices=["rate", "clt0", "conditional-m", "coupling", "limit-compare"])
    p = sub.add_parser("report", parents=[common], help="print a study summary")
    p.add_argument("directory")
    p = sub.add_parser("replay", parents=[common], help="rerun a manifest and compare outputs")
    p.add_argument("manifest")
    return ap


def parse_args(argv):
    overrides, rest = {}, []
    for a in argv:
        m = _OVERRIDE.match(a)
        if m and m.group(1).split(".")[0] in (
                "initial", "noise", "time", "grid", "kernel", "particles", "stats", "run", "study"):
            overrides[m.group(1)] = m.group(2)
        else:
            rest.append(a)
    args = build_parser().parse_args(rest)
    args.overrides = overrides
    return args


def scenario_from_args(args) -> Scenario:
    ov = dict(args.overrides)
    if args.seed is not None:
        ov["run.master_seed"] = str(args.seed)
    if args.threads is not None:
        ov["run.threads"] = str(args.threads)
    if args.reproducible is not None:
        ov["run.reproducible"] = str(args.reproducible)
    return load_scenario(args.config, ov)


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(out: Path, sc: Scenario, invocation: dict, files, extra=None):
    from .particles import pm_grid_size
    spec = sc.kernel_spec()
    kernel = spec.describe() if spec is not None else {"mode": "off"}
    kernel["force"] = sc.force
    if spec is not None and sc.force == "pm":
        kernel["pm_grid"] = pm_grid_size(spec)
    manifest = dict(
        artifact_version=__version__,
        invocation=invocation,
        scenario=sc.to_dict(),
        study_sections=[[k, a, list(v) if isinstance(v, tuple) else v] for k, a, v in sc.study_sections],
        scenario_hash=sc.digest(),
        kernel=kernel,
        tolerances=dict(positivity=sc.positivity_tol, k_stat=sc.k_stat, k_eval=sc.k_eval),
        files={f: _sha256(out / f) for f in sorted(set(files))},
    )
    if extra:
        manifest.update(extra)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    (out / "scenario.ini").write_text(scenario_to_ini(sc))
    return manifest


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_mean_field(sc: Scenario, out: Path, args) -> int:
    from .runs import run_mean_field
    sc.validate()
    mf, rec = run_mean_field(sc)
    out.mkdir(parents=True, exist_ok=True)
    files = ["w_path.vflw"]
    rec.save(out / "w_path.vflw")
    every = max(1, sc.snapshot_every)
    for step in range(0, sc.n_steps + 1):
        if step % every == 0 or step == sc.n_steps:
            name = f"v_{step:06d}.vflf"
            save_field(out / name, mf.fields[step])
            files.append(name)
    with open(out / "monitors.csv", "w") as fh:
        fh.write("time,mass_error,l2,grid_min,grid_max\n")
        m = mf.monitors
        for i, t in enumerate(mf.times):
            row = (t, m["mass_error"][i], m["l2"][i], m["vmin"][i], m["vmax"][i])
            fh.write(",".join(repr(float(x)) for x in row) + "\n")
    files.append("monitors.csv")
    write_manifest(out, sc, {"command": "mean-field"}, files)
    print(f"mean field: {sc.n_steps} steps, max mass error {mf.monitors['mass_error'].max():.3g}, "
          f"grid min {mf.monitors['vmin'].min():.4g}, wrote {out}")
    return EXIT_OK


def cmd_particles(sc: Scenario, out: Path, args) -> int:
    from .runs import noise_record, run_particles
    sc.validate()
    n = args.n or sc.N[0]
    if args.w_record:
        rec = NoisePathRecord.load(args.w_record)
    else:
        rec = noise_record(sc, 0 if sc.conditional_on_w else args.ensemble)
    outcome, _ = run_particles(sc, n, args.ensemble, rec, snapshot_every=max(1, sc.snapshot_every))
    out.mkdir(parents=True, exist_ok=True)
    rec.save(out / "w_path.vflw")
    times = [t for t, _ in outcome.snapshots]
    save_trajectory(out / "trajectory.vflp", times, np.array([p for _, p in outcome.snapshots]))
    files = ["w_path.vflw", "trajectory.vflp"]
    (out / "series").mkdir(exist_ok=True)
    for name, s in outcome.series.items():
        fname = "series/" + re.sub(r"[^\w.-]+", "_", name).strip("_") + ".csv"
        write_series_csv(out / fname, [s])
        files.append(fname)
    audit = {k: dict(role=v.role, ensemble_id=v.ensemble_id, master_seed=v.master_seed)
             for k, v in outcome.keys.items()}
    inv = {"command": "particles", "n": n, "ensemble": args.ensemble,
           "w_path_id": rec.path_id, "w_record_sha256": hashlib.sha256(rec.to_bytes()).hexdigest()}
    write_manifest(out, sc, inv, files, {"stream_keys": audit})
    print(f"particles: N={n}, member {args.ensemble}, {len(times)} snapshots, wrote {out}")
    return EXIT_OK


def cmd_fluct_limit(sc: Scenario, out: Path, args) -> int:
    from .runs import solve_mean_field, simulate_fluctuation
    sc.validate()
    src = Path(args.mean_field)
    wfile = src / "w_path.vflw"
    snaps = sorted(src.glob("v_*.vflf"))
    if not wfile.exists() or not snaps:
        raise ConfigurationError(f"{src} does not hold a mean-field run (need w_path.vflw and v_*.vflf)")
    rec = NoisePathRecord.load(wfile)
    if abs(rec.dt - sc.dt) > 1e-15 * sc.dt or rec.n_steps < sc.n_steps:
        raise ConfigurationError("noise record does not match the scenario time grid")
    mf = solve_mean_field(sc, rec.increments, rec.path_id)
    for path in snaps:
        step = int(path.stem.split("_")[1])
        stored = load_field(path)
        if step > sc.n_steps or not np.array_equal(stored.coeffs, mf.fields[step].coeffs):
            raise ConfigurationError(f"{path.name} is not reproduced by the scenario and W record")
    phis = sc.test_functions()
    res = simulate_fluctuation(sc, mf, args.run_id, phis, snapshot_every=max(1, sc.snapshot_every))
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for t, eta in res.snapshots:
        name = f"eta_{int(round(t / sc.dt)):06d}.vflf"
        save_field(out / name, eta)
        files.append(name)
    (out / "series").mkdir(exist_ok=True)
    for p, s in res.series.items():
        fname = "series/" + re.sub(r"[^\w.-]+", "_", f"eta_limit[{p}]").strip("_") + ".csv"
        write_series_csv(out / fname, [s])
        files.append(fname)
    inv = {"command": "fluct-limit", "run_id": args.run_id, "mean_field": str(src.resolve()),
           "w_record_sha256": _sha256(wfile)}
    write_manifest(out, sc, inv, files)
    print(f"fluctuation limit: run {args.run_id}, {len(files)} files, wrote {out}")
    return EXIT_OK


def cmd_study(sc: Scenario, out: Path, args) -> int:
    from .studies import run_study
    kind = args.kind.replace("-", "_")
    res = run_study(kind, sc, workers=max(1, sc.threads))
    files = res.write(out)
    write_manifest(out, sc.for_study(kind), {"command": "study", "kind": kind}, files)
    print_summary(res.summary())
    return EXIT_OK if res.passed else EXIT_GATES


def print_summary(summary: dict):
    print(f"study {summary['study']}: {'PASS' if summary['passed'] else 'FAIL'}")
    for g in summary["gates"]:
        print(f"  [{'pass' if g['passed'] else 'FAIL'}] {g['name']} = {g['value']:.6g} ({g['threshold']})")


def cmd_report(args) -> int:
    d = Path(args.directory)
    f = d / "summary.json"
    if not f.exists():
        raise ConfigurationError(f"no summary.json in {d}")
    summary = json.loads(f.read_text())
    print_summary(summary)
    rows = d / "results.csv"
    if rows.exists():
        print(rows.read_text().rstrip())
    return EXIT_OK if summary["passed"] else EXIT_GATES


def cmd_replay(args) -> int:
    """Rerun the invocation recorded in a manifest and compare every file hash."""
    mpath = Path(args.manifest)
    try:
        manifest = json.loads(mpath.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigurationError(f"cannot read manifest {mpath}: {exc}") from exc
    sc = Scenario.from_dict(manifest["scenario"])
    from dataclasses import replace
    sc = replace(sc, study_sections=tuple((k, a, tuple(v) if isinstance(v, list) else v)
                                          for k, a, v in manifest.get("study_sections", [])))
    inv = manifest["invocation"]
    out = Path(args.out_dir) if args.out_dir else Path(tempfile.mkdtemp(prefix="vortexfluct-replay-"))
    ns = argparse.Namespace(n=inv.get("n"), ensemble=inv.get("ensemble", 0), w_record=None,
                            mean_field=inv.get("mean_field"), run_id=inv.get("run_id", 0),
                            kind=inv.get("kind"))
    cmd = inv["command"]
    if cmd == "particles" and (mpath.parent / "w_path.vflw").exists():
        ns.w_record = str(mpath.parent / "w_path.vflw")
    if cmd == "study":
        from .studies import run_study
        res = run_study(ns.kind, sc, workers=max(1, sc.threads))
        files = res.write(out)
        write_manifest(out, sc, inv, files)
    else:
        COMMANDS[cmd](sc, out, ns)
    new = json.loads((out / "manifest.json").read_text())["files"]
    diffs = [f for f in manifest["files"] if new.get(f) != manifest["files"][f]]
    if diffs:
        print(f"replay differs in {len(diffs)} file(s): {', '.join(diffs)}")
        return EXIT_GATES
    print(f"replay reproduced {len(manifest['files'])} files bit for bit in {out}")
    return EXIT_OK


COMMANDS = {"mean-field": cmd_mean_field, "particles": cmd_particles,
            "fluct-limit": cmd_fluct_limit, "study": cmd_study}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
    except SystemExit as exc:
        # --help / --version exit 0; usage errors are configuration errors, not failed gates
        return EXIT_OK if exc.code in (0, None) else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "report":
            return cmd_report(args)
        if args.command == "replay":
            return cmd_replay(args)
        sc = scenario_from_args(args)
        out = Path(args.out_dir or os.environ.get(OUT_DIR_ENV, "vortexfluct-out"))
        return COMMANDS[args.command](sc, out, args)
    except NumericalAlarm as exc:
        print(f"numerical alarm: {exc}", file=sys.stderr)
        return EXIT_ALARM
    except (ConfigurationError, FormatError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except VortexFluctError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
