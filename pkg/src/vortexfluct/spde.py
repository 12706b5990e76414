"""Pseudo-spectral solvers for the stochastic vorticity equation (mean field)

    dv = (Lap v - K*v . grad v) dt - sigma . grad v o dW

and for the linear fluctuation equation

    d eta = Lap eta dt - div(v K*eta) dt - div(eta K*v) dt
            + 1/2 sigma.grad(sigma.grad eta) dt + dM - sigma.grad eta dW,

together with samplers for the Gaussian initial fluctuation and for the
conditionally Gaussian additive noise M.

Time stepping: integrating factor exp(-|k|^2 dt) on the Laplacian, explicit
Euler-Maruyama (Ito form) on everything else, 2/3-rule dealiasing of products.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DomainError, FormatError, InvalidInputError
from .rng import StreamKey, normals
from .torus import (DivFreeVectorField, FourierField, SpectralGrid, _velocity_multiplier_cached)

log = logging.getLogger(__name__)

# mean-square amplification of the explicit transport-noise step on mode k is
# exp(-2|k|^2 dt) (1 + (sigma.k)^4 dt^2 / 4); with |k|^2 <= 2 (M/3)^2 after
# dealiasing this stays <= 1 when ||sigma||^4 dt M^2 <= 36
STABILITY_CONSTANT = 36.0
POSITIVITY_TOLERANCE = 1e-8
# declared bound on the change of smooth time-T pairings <v_T, phi> under M -> 2M
SPATIAL_TOLERANCE = 1e-10


@dataclass(frozen=True, eq=False)
class SpdeScheme:
    """Time step, term switches and the transport field.

    ``nonlinear`` toggles the K-coupled advection terms, ``sigma=None`` removes
    all transport-noise terms.
    """

    grid: SpectralGrid
    dt: float
    sigma: DivFreeVectorField | None = None
    nonlinear: bool = True
    dealias: bool = True

    def __post_init__(self):
        if not self.dt > 0:
            raise ConfigurationError(f"dt must be positive, got {self.dt}")
        self.check_stability()

    def stability_number(self) -> float:
        if self.sigma is None:
            return 0.0
        return self.sigma.sup_norm() ** 4 * self.dt * self.grid.M**2

    def check_stability(self):
        q = self.stability_number()
        if q > STABILITY_CONSTANT:
            raise ConfigurationError(
                f"unstable configuration: ||sigma||^4 dt M^2 = {q:.3g} exceeds {STABILITY_CONSTANT}")

    @property
    def heat_factor(self) -> np.ndarray:
        return self._cache("heat", lambda: np.exp(-self.grid.ksq * self.dt))

    @property
    def mask(self) -> np.ndarray:
        g = self.grid
        return g.dealias_mask if self.dealias else g.nyquist_free

    @property
    def sigma_grid(self) -> np.ndarray | None:
        if self.sigma is None:
            return None
        return self._cache("sigma", lambda: self.sigma.grid_values(self.grid))

    def _cache(self, name, make):
        store = self.__dict__.setdefault("_store", {})
        if name not in store:
            store[name] = make()
        return store[name]


@dataclass(frozen=True, eq=False)
class MeanFieldState:
    v: FourierField
    time: float = 0.0

    def grid_min(self) -> float:
        return float(self.v.values().min())


@dataclass(frozen=True, eq=False)
class FluctuationState:
    eta: FourierField
    time: float = 0.0


# ---------------------------------------------------------------------------
# spectral building blocks (all on raw coefficient arrays)
# ---------------------------------------------------------------------------

def _divergence(grid: SpectralGrid, flux_values: np.ndarray, mask) -> np.ndarray:
    """Coefficients of div(F) from grid values F (2, M, M)."""
    fh = grid.to_coeffs(flux_values)
    return 1j * (grid.k1 * fh[0] + grid.k2 * fh[1]) * mask


def _velocity_values(grid, coeffs):
    return grid.to_values(_velocity_multiplier_cached(grid) * coeffs)


def _transport(grid, coeffs, sigma_grid, mask):
    """sigma.grad f = div(sigma f) (sigma is divergence free); returns coefficients."""
    f = grid.to_values(coeffs * mask)
    return _divergence(grid, sigma_grid * f, mask)


def nonlinear_term(v: FourierField | MeanFieldState, dealias: bool = True) -> FourierField:
    """Coefficients of -div(u v), u = K * v, with 2/3-rule dealiasing; zero at k = 0."""
    v = getattr(v, "v", v)
    g = v.grid
    mask = g.dealias_mask if dealias else g.nyquist_free
    c = v.coeffs * mask
    vals = g.to_values(c)
    u = _velocity_values(g, c)
    return FourierField(g, -_divergence(g, u * vals, mask))


def transport_terms(v: FourierField | MeanFieldState, sigma: DivFreeVectorField,
                    dealias: bool = True) -> tuple[FourierField, FourierField]:
    """(1/2 sigma.grad(sigma.grad v), -sigma.grad v) as Fourier fields."""
    v = getattr(v, "v", v)
    g = v.grid
    mask = g.dealias_mask if dealias else g.nyquist_free
    sg = sigma.grid_values(g)
    first = _transport(g, v.coeffs, sg, mask)
    second = _transport(g, first, sg, mask)
    return FourierField(g, 0.5 * second), FourierField(g, -first)


# ---------------------------------------------------------------------------
# mean-field step
# ---------------------------------------------------------------------------

def mean_field_rhs(v_coeffs: np.ndarray, scheme: SpdeScheme):
    """Drift (without the Laplacian) and dW-factor coefficients at the current state.

    Also returns the dealiased grid values of v, reused for monitoring.
    """
    g = scheme.grid
    mask = scheme.mask
    c = v_coeffs * mask
    vals = g.to_values(c)
    drift = np.zeros_like(v_coeffs)
    if scheme.nonlinear:
        u = _velocity_values(g, c)
        drift -= _divergence(g, u * vals, mask)
    noise = None
    if scheme.sigma is not None:
        sg = scheme.sigma_grid
        first = _divergence(g, sg * vals, mask)
        second = _transport(g, first, sg, mask)
        drift += 0.5 * second
        noise = -first
    return drift, noise, vals


def step_mean_field(state: MeanFieldState, dW: float, scheme: SpdeScheme) -> MeanFieldState:
    """v_hat <- exp(-|k|^2 dt) [v_hat + dt drift + dW noise]; mass pinned to 1."""
    drift, noise, _ = mean_field_rhs(state.v.coeffs, scheme)
    new = state.v.coeffs + scheme.dt * drift
    if noise is not None:
        new = new + dW * noise
    new = scheme.heat_factor * new
    new[0, 0] = 1.0
    return MeanFieldState(FourierField(scheme.grid, new, is_density=True), state.time + scheme.dt)


# ---------------------------------------------------------------------------
# initial fluctuation and additive noise
# ---------------------------------------------------------------------------

def _grid_white_noise(grid: SpectralGrid, key: StreamKey, components: int | None = None):
    shape = (grid.M, grid.M) if components is None else (components, grid.M, grid.M)
    return normals(key, shape) / grid.h


def sample_eta0(v0: FourierField, key: StreamKey, tol: float = POSITIVITY_TOLERANCE) -> FluctuationState:
    """eta0 = sqrt(v0) xi - (integral of sqrt(v0) xi) v0 with xi grid white noise.

    Gives Cov(<eta0, phi>, <eta0, psi>) = <phi psi, v0> - <phi, v0><psi, v0>.
    """
    g = v0.grid
    vals = v0.values()
    if vals.min() < -tol:
        raise DomainError(f"initial density is negative on the grid (min {vals.min():.3g})")
    root = np.sqrt(np.clip(vals, 0.0, None))
    xi = _grid_white_noise(g, key)
    weighted = root * xi
    eta = weighted - g.cell_area * weighted.sum() * vals
    c = g.to_coeffs(eta)
    c[0, 0] = 0.0
    return FluctuationState(FourierField(g, c), 0.0)


def generate_M_increment(v: FourierField, dt: float, key: StreamKey,
                         tol: float = POSITIVITY_TOLERANCE) -> FourierField:
    """dM = div(sqrt(2 max(v, 0)) zeta) sqrt(dt), zeta 2-component grid white noise.

    Conditionally on v, <dM, phi> is N(0, 2 dt <|grad phi|^2, v>).
    """
    g = v.grid
    vals = v.values()
    if vals.min() < -tol:
        log.warning("negative density %.3g clamped while generating M", vals.min())
    amp = np.sqrt(2.0 * np.clip(vals, 0.0, None) * dt)
    zeta = _grid_white_noise(g, key, components=2)
    return FourierField(g, _divergence(g, amp * zeta, g.nyquist_free))


def m_noise_key(master_seed: int, run_id: int, step: int) -> StreamKey:
    return StreamKey(master_seed, "mfield_noise", run_id, 0, step)


def eta0_key(master_seed: int, run_id: int) -> StreamKey:
    return StreamKey(master_seed, "eta0", run_id, 0, 0)


# ---------------------------------------------------------------------------
# fluctuation step
# ---------------------------------------------------------------------------

def fluctuation_rhs(eta_coeffs, v_coeffs, scheme: SpdeScheme, v_vals=None):
    g = scheme.grid
    mask = scheme.mask
    e = eta_coeffs * mask
    eta_vals = g.to_values(e)
    drift = np.zeros_like(eta_coeffs)
    if scheme.nonlinear:
        vc = v_coeffs * mask
        if v_vals is None:
            v_vals = g.to_values(vc)
        flux = v_vals * _velocity_values(g, e) + eta_vals * _velocity_values(g, vc)
        drift -= _divergence(g, flux, mask)
    noise = None
    if scheme.sigma is not None:
        sg = scheme.sigma_grid
        first = _divergence(g, sg * eta_vals, mask)
        drift += 0.5 * _transport(g, first, sg, mask)
        noise = -first
    return drift, noise


def step_fluctuation(state: FluctuationState, v: FourierField | MeanFieldState, dW: float,
                     dM: FourierField | None, scheme: SpdeScheme, v_vals=None) -> FluctuationState:
    """Integrating-factor Euler-Maruyama step; v and dW must be those of the mean-field step."""
    v = getattr(v, "v", v)
    if v.grid != state.eta.grid:
        raise InvalidInputError("eta and v live on different grids")
    drift, noise = fluctuation_rhs(state.eta.coeffs, v.coeffs, scheme, v_vals)
    new = state.eta.coeffs + scheme.dt * drift
    if noise is not None:
        new = new + dW * noise
    if dM is not None:
        new = new + dM.coeffs
    new = scheme.heat_factor * new
    new[0, 0] = 0.0
    return FluctuationState(FourierField(scheme.grid, new), state.time + scheme.dt)


# ---------------------------------------------------------------------------
# persistence: noise paths (VFLW) and field snapshots (VFLF)
# ---------------------------------------------------------------------------

NOISE_MAGIC = b"VFLW"
NOISE_VERSION = 1
FIELD_MAGIC = b"VFLF"
FIELD_VERSION = 1


@dataclass(frozen=True, eq=False)
class NoisePathRecord:
    """A persisted common-noise path plus the seeds that regenerate M / xi noise."""

    dt: float
    increments: np.ndarray
    seeds: tuple = ()
    path_id: int = 0
    version: int = NOISE_VERSION

    @property
    def n_steps(self) -> int:
        return int(len(self.increments))

    def to_bytes(self) -> bytes:
        """magic, u32 version, f64 dt, u64 steps, steps x f64 dW,
        u64 seed count, seed count x u64 (first the W path id, then master seeds)."""
        seeds = (self.path_id,) + tuple(self.seeds)
        return b"".join([
            NOISE_MAGIC,
            struct.pack("<IdQ", self.version, self.dt, self.n_steps),
            np.asarray(self.increments, dtype="<f8").tobytes(),
            struct.pack("<Q", len(seeds)),
            np.asarray(seeds, dtype="<u8").tobytes(),
        ])

    @classmethod
    def from_bytes(cls, raw: bytes) -> "NoisePathRecord":
        if raw[:4] != NOISE_MAGIC:
            raise FormatError("not a noise path record")
        version, dt, n = struct.unpack_from("<IdQ", raw, 4)
        if version != NOISE_VERSION:
            raise FormatError(f"unsupported noise record version {version}")
        off = 4 + struct.calcsize("<IdQ")
        if len(raw) < off + 8 * n + 8:
            raise FormatError("truncated noise path record")
        inc = np.frombuffer(raw, dtype="<f8", count=n, offset=off).copy()
        off += 8 * n
        (ns,) = struct.unpack_from("<Q", raw, off)
        seeds = np.frombuffer(raw, dtype="<u8", count=ns, offset=off + 8).tolist()
        return cls(dt, inc, tuple(seeds[1:]), int(seeds[0]), version)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "NoisePathRecord":
        return cls.from_bytes(Path(path).read_bytes())


def save_field(path, f: FourierField) -> None:
    """magic, u32 version, u32 M, then M*M complex coefficients as interleaved
    little-endian float64 (re, im) pairs in row-major FFT wavevector order."""
    with open(path, "wb") as fh:
        fh.write(FIELD_MAGIC)
        fh.write(struct.pack("<II", FIELD_VERSION, f.grid.M))
        fh.write(np.ascontiguousarray(f.coeffs, dtype="<c16").tobytes())


def load_field(path, is_density: bool = False) -> FourierField:
    raw = Path(path).read_bytes()
    if raw[:4] != FIELD_MAGIC:
        raise FormatError(f"{path}: not a field snapshot")
    version, m = struct.unpack_from("<II", raw, 4)
    if version != FIELD_VERSION:
        raise FormatError(f"{path}: unsupported field version {version}")
    body = np.frombuffer(raw, dtype="<c16", offset=12)
    if body.size != m * m:
        raise FormatError(f"{path}: truncated field snapshot")
    return FourierField(SpectralGrid(m), body.reshape(m, m).astype(complex), is_density)
