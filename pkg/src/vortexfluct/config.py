"""Scenario configuration.

Config files are INI-style: ``[section]`` headers, ``key = value`` lines,
comma-separated lists. Every key can be overridden on the command line as
``--section.key=value``; ``[study.<kind>]`` sections override the base keys for
one study kind only (e.g. ``--study.rate.ensembles=20``).
"""

from __future__ import annotations

import configparser
import hashlib
import json
import re
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .errors import ConfigurationError, InvalidInputError
from .spde import SpdeScheme
from .torus import AREA, DivFreeVectorField, FourierField, KernelSpec, SpectralGrid

STUDY_KINDS = ("rate", "clt0", "conditional_m", "coupling", "limit_compare")


def _ints(text):
    return tuple(int(t) for t in _split(text))


def _floats(text):
    return tuple(float(t) for t in _split(text))


def _strs(text):
    return tuple(_split(text, keep_parens=True))


def _bool(text):
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _split(text, keep_parens=False):
    if isinstance(text, (tuple, list)):
        return [str(t) for t in text]
    if keep_parens:
        # commas inside parentheses belong to the item, e.g. "cos(1,0), sin(0,1)"
        return [p.strip() for p in re.split(r",(?![^()]*\))", text) if p.strip()]
    return [p.strip() for p in str(text).split(",") if p.strip()]


# (section, key) -> (attribute, parser)
KEYS = {
    ("initial", "density"): ("density", str),
    ("noise", "sigma"): ("sigma", str),
    ("noise", "amplitude"): ("sigma_amplitude", float),
    ("time", "T"): ("T", float),
    ("time", "dt"): ("dt", float),
    ("grid", "M"): ("M", int),
    ("grid", "nonlinear"): ("nonlinear", _bool),
    ("grid", "snapshot_every"): ("snapshot_every", int),
    ("grid", "positivity_tol"): ("positivity_tol", float),
    ("kernel", "mode"): ("kernel", str),
    ("kernel", "k_max"): ("k_max", int),
    ("kernel", "epsilon"): ("epsilon", float),
    ("kernel", "force"): ("force", str),
    ("kernel", "k_eval"): ("k_eval", int),
    ("particles", "N"): ("N", _ints),
    ("particles", "ensembles"): ("ensembles", int),
    ("particles", "conditional_on_w"): ("conditional_on_w", _bool),
    ("particles", "samples"): ("samples", int),
    ("particles", "repetitions"): ("repetitions", int),
    ("stats", "alpha"): ("alpha", _floats),
    ("stats", "phi"): ("phi", _strs),
    ("stats", "k_stat"): ("k_stat", int),
    ("stats", "m_weight"): ("m_weight", float),
    ("stats", "s_grid"): ("s_grid", _floats),
    ("run", "master_seed"): ("master_seed", int),
    ("run", "reproducible"): ("reproducible", _bool),
    ("run", "threads"): ("threads", int),
}
ATTR_PARSERS = {attr: p for attr, p in KEYS.values()}

STUDY_DEFAULTS = {
    "rate": dict(N=(256, 512, 1024, 2048, 4096), ensembles=100, conditional_on_w=True),
    "clt0": dict(N=(4096,), samples=2000, repetitions=20, phi=("cos(1,0)",)),
    "conditional_m": dict(N=(2048,), ensembles=1000, conditional_on_w=True, phi=("cos(1,0)",)),
    "coupling": dict(N=(256, 512, 1024, 2048), ensembles=50, conditional_on_w=False),
    "limit_compare": dict(N=(4096,), ensembles=500, conditional_on_w=False,
                          phi=("cos(1,0)", "cos(0,1)", "cos(1,1)")),
}

DENSITY_PRESETS = {
    "uniform": {},
    "default": {(1, 1): 0.125, (1, -1): 0.125},
    # 1 + 0.4 cos x1 cos x2 + 0.3 sin(x1 + 2 x2)
    "mixed": {(1, 1): 0.1, (1, -1): 0.1, (1, 2): -0.15j},
}


@dataclass(frozen=True)
class Scenario:
    density: str = "default"
    sigma: str = "default"
    sigma_amplitude: float = 0.5
    T: float = 0.25
    dt: float = 2.5e-3
    M: int = 128
    nonlinear: bool = True
    snapshot_every: int = 10
    positivity_tol: float = 1e-8
    kernel: str = "spectral"
    k_max: int = 128
    epsilon: float = 0.05
    force: str = "direct"
    k_eval: int = 16
    N: tuple = (256, 512, 1024, 2048, 4096)
    ensembles: int = 100
    conditional_on_w: bool = True
    samples: int = 2000
    repetitions: int = 20
    alpha: tuple = (-2.0,)
    phi: tuple = ("cos(1,0)", "cos(0,1)", "cos(1,1)")
    k_stat: int = 32
    m_weight: float = 2.0
    s_grid: tuple = (0.25, 0.5, 1.0, 2.0)
    master_seed: int = 20240611
    reproducible: bool = True
    threads: int = 1
    explicit: frozenset = field(default=frozenset(), compare=False)
    study_sections: tuple = field(default=(), compare=False)

    # ---- derived objects -------------------------------------------------

    @property
    def n_steps(self) -> int:
        n = int(round(self.T / self.dt))
        if n < 1 or abs(n * self.dt - self.T) > 1e-9 * max(1.0, self.T):
            raise ConfigurationError(f"T={self.T} is not a whole number of steps of dt={self.dt}")
        return n

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) * self.dt

    def grid(self) -> SpectralGrid:
        return SpectralGrid(self.M)

    def initial_density(self) -> FourierField:
        return FourierField.from_modes(self.grid(), parse_density(self.density), is_density=True)

    def sigma_field(self) -> DivFreeVectorField | None:
        return parse_sigma(self.sigma, self.sigma_amplitude)

    def kernel_spec(self) -> KernelSpec:
        if self.kernel == "spectral":
            return KernelSpec.spectral(self.k_max)
        if self.kernel == "regularized":
            return KernelSpec.regularized(self.epsilon)
        if self.kernel == "free_space":
            return KernelSpec.free_space()
        if self.kernel == "off":
            return None
        raise ConfigurationError(f"unknown kernel mode {self.kernel!r}")

    @property
    def interacting(self) -> bool:
        """K-coupled terms active; switching the kernel off removes them everywhere."""
        return self.nonlinear and self.kernel != "off"

    def scheme(self, nonlinear: bool | None = None) -> SpdeScheme:
        return SpdeScheme(self.grid(), self.dt, self.sigma_field(),
                          self.interacting if nonlinear is None else nonlinear)

    def test_functions(self):
        from .stats import TestFunction
        return [TestFunction.parse(p) for p in self.phi]

    # ---- validation / identity ------------------------------------------

    def validate(self) -> "Scenario":
        try:
            self.n_steps
            if self.M < 8 or self.M % 2:
                raise ConfigurationError(f"grid size M={self.M} must be even and at least 8")
            v0 = self.initial_density()
            vmin = float(v0.values().min())
            if vmin <= 0:
                raise ConfigurationError(
                    f"initial density must be strictly positive on the grid (min {vmin * AREA:.3g}/(2pi)^2)")
            self.scheme()
            if self.kernel != "off" and self.kernel_spec() is not None and not self.kernel_spec().is_regular:
                raise ConfigurationError("particle runs need a regularized or spectral kernel")
            if self.force not in ("direct", "pm"):
                raise ConfigurationError(f"force method must be direct or pm, got {self.force!r}")
            if any(n < 2 for n in self.N) or any(b <= a for a, b in zip(self.N, self.N[1:])):
                raise ConfigurationError(f"N list must be strictly increasing and >= 2, got {self.N}")
            if self.ensembles < 1 or self.samples < 1 or self.repetitions < 1:
                raise ConfigurationError("ensemble and sample counts must be positive")
            if not 1 <= self.k_stat < self.M // 2:
                raise ConfigurationError(f"k_stat={self.k_stat} must lie in [1, M/2)")
            if self.k_eval >= self.M // 2:
                raise ConfigurationError(f"k_eval={self.k_eval} exceeds the grid band")
            self.test_functions()
        except (InvalidInputError, ValueError) as exc:
            if isinstance(exc, ConfigurationError):
                raise
            raise ConfigurationError(str(exc)) from exc
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("explicit")
        d.pop("study_sections")
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        kw = {}
        for f in fields(cls):
            if f.name in d:
                val = d[f.name]
                kw[f.name] = tuple(val) if isinstance(val, list) else val
        return cls(**kw)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def for_study(self, kind: str) -> "Scenario":
        """Scenario with the study's defaults applied below any explicit setting."""
        kind = kind.replace("-", "_")
        if kind not in STUDY_KINDS:
            raise ConfigurationError(f"unknown study kind {kind!r}")
        kw = {k: v for k, v in STUDY_DEFAULTS[kind].items() if k not in self.explicit}
        for section, key, value in self.study_sections:
            if section == kind:
                kw[key] = value
        return replace(self, **kw)


def parse_density(spec: str) -> dict:
    """Preset name or ``modes: k1,k2,re[,im]; ...`` (c_0 = 1 implied, partners filled)."""
    s = spec.strip()
    if s in DENSITY_PRESETS:
        modes = dict(DENSITY_PRESETS[s])
    elif s.startswith("modes:"):
        modes = {}
        for item in s[len("modes:"):].split(";"):
            if not item.strip():
                continue
            parts = [float(p) for p in item.split(",")]
            if len(parts) not in (3, 4):
                raise ConfigurationError(f"density mode {item!r} needs k1,k2,re[,im]")
            k = (int(parts[0]), int(parts[1]))
            if k == (0, 0):
                raise ConfigurationError("the mass coefficient is fixed to 1")
            modes[k] = complex(parts[2], parts[3] if len(parts) == 4 else 0.0)
    else:
        raise ConfigurationError(f"unknown density {spec!r}; presets: {', '.join(DENSITY_PRESETS)}")
    out = {(0, 0): 1.0}
    out.update(modes)
    return out


def parse_sigma(spec: str, amplitude: float) -> DivFreeVectorField | None:
    """``off``, ``default`` (amplitude (cos x2, cos x1)), ``constant: c1,c2`` or
    ``modes: k1,k2,a1,a2; ...`` (real amplitudes of cos(k.x), scaled by amplitude)."""
    s = spec.strip()
    try:
        if s == "off" or amplitude == 0:
            return None
        if s == "default":
            return DivFreeVectorField.default(amplitude)
        if s.startswith("constant:"):
            c1, c2 = (float(p) for p in s[len("constant:"):].split(","))
            return DivFreeVectorField.constant(amplitude * c1, amplitude * c2)
        if s.startswith("modes:"):
            ks, amps = [], []
            for item in s[len("modes:"):].split(";"):
                if not item.strip():
                    continue
                k1, k2, a1, a2 = (float(p) for p in item.split(","))
                for sign in (1, -1):
                    ks.append((sign * int(k1), sign * int(k2)))
                    amps.append((0.5 * amplitude * a1, 0.5 * amplitude * a2))
            return DivFreeVectorField(np.array(ks), np.array(amps, dtype=complex))
    except InvalidInputError as exc:
        raise ConfigurationError(f"invalid sigma {spec!r}: {exc}") from exc
    raise ConfigurationError(f"unknown sigma spec {spec!r}")


def _coerce(attr: str, raw):
    try:
        return ATTR_PARSERS[attr](raw)
    except (ValueError, TypeError) as exc:
        raise ConfigurationError(f"bad value {raw!r} for {attr}: {exc}") from exc


def _lookup(section: str, key: str):
    if (section, key) in KEYS:
        return KEYS[(section, key)][0]
    raise ConfigurationError(f"unknown configuration key [{section}] {key}")


def _study_attr(key: str):
    for (_, k), (attr, _) in KEYS.items():
        if k == key:
            return attr
    raise ConfigurationError(f"unknown study key {key!r}")


def load_scenario(path=None, overrides: dict | None = None, base: Scenario | None = None) -> Scenario:
    """Build a Scenario from an optional INI file plus ``{"section.key": value}`` overrides."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    if path is not None:
        try:
            with open(path) as fh:
                cp.read_file(fh)
        except OSError as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
        except configparser.Error as exc:
            raise ConfigurationError(f"malformed config {path}: {exc}") from exc
    entries = [(sec, key, val) for sec in cp.sections() for key, val in cp.items(sec)]
    for dotted, val in (overrides or {}).items():
        sec, _, key = dotted.rpartition(".")
        if not sec:
            raise ConfigurationError(f"override {dotted!r} must look like section.key")
        entries.append((sec, key, val))
    kw, explicit, study = {}, set(), []
    for sec, key, val in entries:
        if sec.startswith("study."):
            kind = sec[len("study."):].replace("-", "_")
            if kind not in STUDY_KINDS:
                raise ConfigurationError(f"unknown study section [{sec}]")
            attr = _study_attr(key)
            study.append((kind, attr, _coerce(attr, val)))
            continue
        attr = _lookup(sec, key)
        kw[attr] = _coerce(attr, val)
        explicit.add(attr)
    base = base or Scenario()
    return replace(base, **kw, explicit=frozenset(base.explicit | explicit),
                   study_sections=tuple(base.study_sections) + tuple(study))


def scenario_to_ini(sc: Scenario) -> str:
    lines, current = [], None
    d = sc.to_dict()
    for (sec, key), (attr, _) in KEYS.items():
        if sec != current:
            lines.append(f"\n[{sec}]" if lines else f"[{sec}]")
            current = sec
        val = d[attr]
        if isinstance(val, list):
            val = ", ".join(str(v) for v in val)
        lines.append(f"{key} = {val}")
    for kind, attr, val in sc.study_sections:
        key = next(k for (s, k), (a, _) in KEYS.items() if a == attr)
        val = ", ".join(map(str, val)) if isinstance(val, tuple) else val
        lines.append(f"\n[study.{kind}]\n{key} = {val}")
    return "\n".join(lines) + "\n"
