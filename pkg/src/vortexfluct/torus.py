"""Periodic geometry, Fourier fields and the Biot-Savart kernel on [-pi, pi]^2.

Fourier convention used throughout the package::

    <f, e_k> = c_k = integral over the torus of f(x) exp(-i k.x) dx
    f(x)     = (2 pi)^-2 * sum_k c_k exp(i k.x)

so the uniform probability density has c_0 = 1 and all other coefficients 0,
and the empirical measure of N points has c_k = (1/N) sum_j exp(-i k.X_j).

The periodic Biot-Savart kernel is K = grad_perp G with G the zero-mean Green
function of -Laplacian and grad_perp = (d/dx2, -d/dx1); its Fourier multiplier
is i (k2, -k1) / |k|^2.
"""

from __future__ import annotations

import functools
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.fft as sfft
from numba import njit

from .errors import FormatError, InvalidInputError, SingularityError

TWO_PI = 2.0 * np.pi
AREA = TWO_PI**2

# Radial taper exp(-TAPER_STRENGTH (|k|/K_max)^TAPER_ORDER) for the truncated kernel.
TAPER_STRENGTH = 36.0
TAPER_ORDER = 8

EWALD_SPLIT = 1.0
EWALD_IMAGES = 2
EWALD_MODES = 14


# ---------------------------------------------------------------------------
# torus geometry
# ---------------------------------------------------------------------------

def _wrap(x):
    y = np.mod(np.asarray(x, dtype=float) + np.pi, TWO_PI) - np.pi
    # mod can round up to exactly 2 pi for tiny negative inputs
    return np.where(y >= np.pi, y - TWO_PI, y)


def wrap(p):
    """Map raw coordinates onto [-pi, pi) componentwise."""
    p = np.asarray(p, dtype=float)
    if not np.all(np.isfinite(p)):
        raise InvalidInputError("cannot wrap non-finite coordinates")
    return _wrap(p)


def torus_displacement(a, b):
    """Minimal-image displacement d with a = b + d (mod 2 pi), d in [-pi, pi)^2."""
    return _wrap(np.asarray(a, dtype=float) - np.asarray(b, dtype=float))


def torus_distance(a, b):
    return np.linalg.norm(torus_displacement(a, b), axis=-1)


# ---------------------------------------------------------------------------
# spectral grid and Fourier fields
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SpectralGrid:
    """M x M collocation grid x_j = -pi + j h with wavevectors -M/2 < k_i <= M/2.

    Arrays are stored in FFT order; axis 0 is x1 / k1 and axis 1 is x2 / k2.
    """

    modes_per_axis: int

    def __post_init__(self):
        m = self.modes_per_axis
        if m < 8 or m % 2:
            raise InvalidInputError(f"modes_per_axis must be even and >= 8, got {m}")

    @property
    def M(self) -> int:
        return self.modes_per_axis

    @property
    def h(self) -> float:
        return TWO_PI / self.M

    @property
    def cell_area(self) -> float:
        return self.h**2

    @functools.cached_property
    def wavenumbers(self) -> np.ndarray:
        k = np.fft.fftfreq(self.M, 1.0 / self.M)
        k[self.M // 2] = self.M // 2
        return k

    @functools.cached_property
    def k1(self) -> np.ndarray:
        return np.broadcast_to(self.wavenumbers[:, None], (self.M, self.M))

    @functools.cached_property
    def k2(self) -> np.ndarray:
        return np.broadcast_to(self.wavenumbers[None, :], (self.M, self.M))

    @functools.cached_property
    def ksq(self) -> np.ndarray:
        return self.k1**2 + self.k2**2

    @functools.cached_property
    def nyquist_free(self) -> np.ndarray:
        """1 away from the Nyquist lines, 0 on them (odd derivatives are ill-defined there)."""
        keep = np.abs(self.wavenumbers) < self.M // 2
        return (keep[:, None] & keep[None, :]).astype(float)

    @functools.cached_property
    def dealias_mask(self) -> np.ndarray:
        """Orszag 2/3 rule: keep |k_i| <= M/3."""
        keep = np.abs(self.wavenumbers) <= self.M // 3
        return (keep[:, None] & keep[None, :]).astype(float)

    @functools.cached_property
    def phase(self) -> np.ndarray:
        """(-1)^(k1+k2), accounts for the grid starting at -pi instead of 0."""
        s = np.where(np.arange(self.M) % 2 == 0, 1.0, -1.0)
        return s[:, None] * s[None, :]

    @functools.cached_property
    def x1(self) -> np.ndarray:
        x = -np.pi + self.h * np.arange(self.M)
        return np.broadcast_to(x[:, None], (self.M, self.M))

    @functools.cached_property
    def x2(self) -> np.ndarray:
        x = -np.pi + self.h * np.arange(self.M)
        return np.broadcast_to(x[None, :], (self.M, self.M))

    def wavevectors(self) -> np.ndarray:
        """All (k1, k2) pairs, shape (M*M, 2), in storage order."""
        return np.stack([self.k1.ravel(), self.k2.ravel()], axis=1).astype(int)

    # transforms between grid values and coefficients c_k = <f, e_k>
    def to_coeffs(self, values: np.ndarray) -> np.ndarray:
        return self.cell_area * self.phase * sfft.fft2(values, axes=(-2, -1))

    def to_values(self, coeffs: np.ndarray) -> np.ndarray:
        return sfft.ifft2(coeffs * self.phase, axes=(-2, -1)).real / self.cell_area


@dataclass(frozen=True, eq=False)
class FourierField:
    """Truncated coefficients c_k = <f, e_k> of a real periodic field on a SpectralGrid."""

    grid: SpectralGrid
    coeffs: np.ndarray
    is_density: bool = False

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=complex)
        if c.shape[-2:] != (self.grid.M, self.grid.M):
            raise InvalidInputError(f"coefficient array {c.shape} does not match grid {self.grid.M}")
        object.__setattr__(self, "coeffs", c)

    @classmethod
    def from_values(cls, grid: SpectralGrid, values, is_density=False) -> "FourierField":
        return cls(grid, grid.to_coeffs(np.asarray(values, dtype=float)), is_density)

    @classmethod
    def from_modes(cls, grid: SpectralGrid, modes, is_density=False) -> "FourierField":
        """Build from {(k1, k2): c_k}; Hermitian partners are filled in when absent."""
        c = np.zeros((grid.M, grid.M), dtype=complex)
        for (k1, k2), value in modes.items():
            c[k1 % grid.M, k2 % grid.M] = value
            if (-k1, -k2) not in modes:
                c[-k1 % grid.M, -k2 % grid.M] = np.conj(value)
        return cls(grid, c, is_density)

    def values(self) -> np.ndarray:
        return self.grid.to_values(self.coeffs)

    def coefficient(self, k1: int, k2: int) -> complex:
        return complex(self.coeffs[k1 % self.grid.M, k2 % self.grid.M])

    def hermitian_defect(self) -> float:
        c = self.coeffs
        flipped = np.conj(np.roll(c[..., ::-1, ::-1], 1, axis=(-2, -1)))
        return float(np.max(np.abs(c - flipped)))

    def centered(self, k: int) -> np.ndarray:
        """Coefficients for |k|_inf <= k as a (2k+1, 2k+1) array indexed by k + k_offset."""
        if k >= self.grid.M // 2:
            raise InvalidInputError(f"k={k} exceeds the grid band {self.grid.M // 2 - 1}")
        idx = np.arange(-k, k + 1) % self.grid.M
        return self.coeffs[..., idx[:, None], idx[None, :]]

    def pair(self, phi) -> float:
        """Integral of f * phi for a real test function given by its coefficients or a TestFunction."""
        phi_c = phi.coeffs_on(self.grid) if hasattr(phi, "coeffs_on") else np.asarray(phi)
        return float(np.sum(self.coeffs * np.conj(phi_c)).real / AREA)

    def band(self) -> int:
        """Largest |k|_inf carrying a nonzero coefficient."""
        nz = np.nonzero(np.abs(self.coeffs) > 0)
        if len(nz[0]) == 0:
            return 0
        k = self.grid.wavenumbers
        return int(max(np.max(np.abs(k[nz[-2]])), np.max(np.abs(k[nz[-1]]))))

    def evaluate(self, points, k_eval: int | None = None) -> np.ndarray:
        """Off-grid values by direct truncated Fourier summation over |k|_inf <= k_eval."""
        kb = self.band() if k_eval is None else min(k_eval, self.grid.M // 2 - 1)
        return evaluate_modes(self.centered(kb), points)


def evaluate_modes(centered_coeffs: np.ndarray, points) -> np.ndarray:
    """Evaluate (2pi)^-2 sum_k c_k e^{ik.x} at points, for centered coefficient blocks.

    ``centered_coeffs`` has shape (..., 2K+1, 2K+1); the result has shape
    (..., n_points). The sum is separable, so cost is n_points * (2K+1)^2.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    c = np.asarray(centered_coeffs)
    kb = (c.shape[-1] - 1) // 2
    ks = np.arange(-kb, kb + 1)
    e1 = np.exp(1j * pts[:, 0:1] * ks[None, :])
    e2 = np.exp(1j * pts[:, 1:2] * ks[None, :])
    lead = c.shape[:-2]
    flat = c.reshape((-1,) + c.shape[-2:])
    out = np.empty((flat.shape[0], pts.shape[0]))
    for i, block in enumerate(flat):
        out[i] = np.einsum("pa,pa->p", e1 @ block, e2).real
    return out.reshape(lead + (pts.shape[0],)) / AREA


# ---------------------------------------------------------------------------
# velocity operator
# ---------------------------------------------------------------------------

def velocity_multiplier(grid: SpectralGrid) -> np.ndarray:
    """m(k) = i (k2, -k1) / |k|^2 with m(0) = 0; shape (2, M, M)."""
    ksq = grid.ksq.copy()
    ksq[0, 0] = 1.0
    m = np.stack([1j * grid.k2 / ksq, -1j * grid.k1 / ksq])
    m[:, 0, 0] = 0.0
    return m


@functools.lru_cache(maxsize=16)
def _velocity_multiplier_cached(grid: SpectralGrid) -> np.ndarray:
    return velocity_multiplier(grid) * grid.nyquist_free


def apply_velocity_operator(f: FourierField) -> np.ndarray:
    """Coefficients (2, M, M) of u = K * f = grad_perp (-Laplacian)^-1 f.

    Nyquist lines are dropped so that u stays real.
    """
    return _velocity_multiplier_cached(f.grid) * f.coeffs


def spectral_divergence(grid: SpectralGrid, u_coeffs: np.ndarray) -> np.ndarray:
    return 1j * (grid.k1 * u_coeffs[0] + grid.k2 * u_coeffs[1])


# ---------------------------------------------------------------------------
# Biot-Savart kernel realizations
# ---------------------------------------------------------------------------

def free_space_kernel(x) -> np.ndarray:
    """-(1/2pi) x_perp / |x|^2 with x_perp = (x2, -x1)."""
    x = np.asarray(x, dtype=float)
    r2 = np.sum(x**2, axis=-1, keepdims=True)
    perp = np.stack([x[..., 1], -x[..., 0]], axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        return -perp / (TWO_PI * r2)


def taper(kmag, k_max):
    return np.exp(-TAPER_STRENGTH * (np.asarray(kmag) / k_max) ** TAPER_ORDER)


def smooth_step(t):
    """C-infinity step: 0 for t <= 0, 1 for t >= 1."""
    t = np.asarray(t, dtype=float)
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        a = np.where(t > 0, np.exp(-1.0 / np.where(t > 0, t, 1.0)), 0.0)
        b = np.where(t < 1, np.exp(-1.0 / np.where(t < 1, 1.0 - t, 1.0)), 0.0)
        return np.where(t >= 1, 1.0, np.where(t <= 0, 0.0, a / (a + b)))


def periodic_kernel_ewald(x, split=EWALD_SPLIT) -> np.ndarray:
    """Exact periodic Biot-Savart kernel via an Ewald split of the Green function.

    Singular at lattice points; used as the oracle and to tabulate the
    periodizing correction.
    """
    x = np.asarray(x, dtype=float)
    return _periodic_correction(x, split) + free_space_kernel(x)


def _periodic_correction(x, split=EWALD_SPLIT) -> np.ndarray:
    """K_per(x) - K_free(x), analytic for |x| < 2 pi (x need not be wrapped)."""
    x = np.asarray(x, dtype=float)
    a2 = split**2
    out = np.zeros_like(x)
    # short-range, central image, minus the free-space part
    r2 = np.sum(x**2, axis=-1)
    safe = np.where(r2 > 0, r2, 1.0)
    g = np.where(r2 > 0, -np.expm1(-a2 * safe) / safe, a2)
    out[..., 0] += x[..., 1] * g / TWO_PI
    out[..., 1] += -x[..., 0] * g / TWO_PI
    # short-range, remaining images
    n = np.arange(-EWALD_IMAGES, EWALD_IMAGES + 1)
    for n1 in n:
        for n2 in n:
            if n1 == 0 and n2 == 0:
                continue
            y = x + TWO_PI * np.array([n1, n2])
            ry = np.sum(y**2, axis=-1)
            w = -np.exp(-a2 * ry) / (TWO_PI * ry)
            out[..., 0] += w * y[..., 1]
            out[..., 1] += -w * y[..., 0]
    # long-range, reciprocal sum -(1/A) sum_k k_perp sin(k.x) e^{-|k|^2/4a^2}/|k|^2
    ks = np.arange(-EWALD_MODES, EWALD_MODES + 1)
    kk1, kk2 = np.meshgrid(ks, ks, indexing="ij")
    kk1, kk2 = kk1.ravel(), kk2.ravel()
    ksq = kk1**2 + kk2**2
    sel = ksq > 0
    kk1, kk2, ksq = kk1[sel], kk2[sel], ksq[sel]
    w = np.exp(-ksq / (4 * a2)) / ksq / AREA
    s = np.sin(x[..., 0:1] * kk1 + x[..., 1:2] * kk2)
    out[..., 0] += -(s * (kk2 * w)).sum(axis=-1)
    out[..., 1] += (s * (kk1 * w)).sum(axis=-1)
    return out


def spectral_kernel_sum(x, k_max: int) -> np.ndarray:
    """Radially tapered partial Fourier sum of K, evaluated pointwise.

    Cost is n_points * L^2 with L ~ 2.2 k_max; intended for checks and oracles.
    """
    pts = np.atleast_2d(np.asarray(x, dtype=float))
    kb = int(np.ceil(1.1 * k_max))
    ks = np.arange(-kb, kb + 1)
    kk1 = ks[:, None].astype(float)
    kk2 = ks[None, :].astype(float)
    ksq = kk1**2 + kk2**2
    ksq[kb, kb] = 1.0
    w = taper(np.sqrt(ksq), k_max) / ksq / AREA
    w[kb, kb] = 0.0
    # sum_k w(k) k_perp sin(k.x) = Im(E1 W_perp E2) with E_j = e^{i k x_j}
    out = np.empty(pts.shape)
    chunk = max(1, int(2e7 // (ks.size**2)))
    for s in range(0, pts.shape[0], chunk):
        p = pts[s:s + chunk]
        e1 = np.exp(1j * p[:, 0:1] * ks[None, :])
        e2 = np.exp(1j * p[:, 1:2] * ks[None, :])
        out[s:s + chunk, 0] = -np.einsum("pa,pa->p", e1 @ (w * kk2), e2).imag
        out[s:s + chunk, 1] = np.einsum("pa,pa->p", e1 @ (w * kk1), e2).imag
    return out.reshape(np.shape(x))


@dataclass(frozen=True)
class KernelSpec:
    """Choice of kernel realization.

    mode
        ``"spectral"``  tapered partial Fourier sum up to ``k_max`` (acts as K_eps, eps ~ pi/k_max)
        ``"free_space"`` exact kernel: free-space term plus tabulated periodic correction
        ``"regularized"`` free-space term cut off smoothly inside ``epsilon`` plus the correction
    """

    mode: str
    k_max: int | None = None
    epsilon: float | None = None
    table_resolution: int | None = None

    def __post_init__(self):
        if self.mode == "spectral":
            if not self.k_max or self.k_max < 1:
                raise InvalidInputError("spectral kernel needs k_max >= 1")
            if self.table_resolution is None:
                object.__setattr__(self, "table_resolution", 8 * self.k_max)
        elif self.mode in ("free_space", "regularized"):
            if self.mode == "regularized" and not (self.epsilon and self.epsilon > 0):
                raise InvalidInputError("regularized kernel needs epsilon > 0")
            if self.table_resolution is None:
                object.__setattr__(self, "table_resolution", 256)
        else:
            raise InvalidInputError(f"unknown kernel mode {self.mode!r}")

    @classmethod
    def spectral(cls, k_max: int, table_resolution: int | None = None) -> "KernelSpec":
        return cls("spectral", k_max=k_max, table_resolution=table_resolution)

    @classmethod
    def free_space(cls, table_resolution: int = 256) -> "KernelSpec":
        return cls("free_space", table_resolution=table_resolution)

    @classmethod
    def regularized(cls, epsilon: float, table_resolution: int = 256) -> "KernelSpec":
        return cls("regularized", epsilon=epsilon, table_resolution=table_resolution)

    @property
    def is_regular(self) -> bool:
        return self.mode != "free_space"

    @property
    def effective_epsilon(self) -> float:
        if self.mode == "spectral":
            return np.pi / self.k_max
        return self.epsilon or 0.0

    def describe(self) -> dict:
        return {"mode": self.mode, "k_max": self.k_max, "epsilon": self.effective_epsilon,
                "table_resolution": self.table_resolution}


@dataclass(frozen=True, eq=False)
class KernelTable:
    """Padded node table for 4-point Lagrange interpolation plus optional free-space part.

    Nodes sit at origin + j*h for j = 0..n-1 in both axes, covering [-pi - h, pi + 2h).
    The kernel is ``table(x) + free_weight * chi(|x|/eps) * K_free(x)``.
    """

    data: np.ndarray  # (2, n, n)
    origin: float
    h: float
    free_weight: float
    epsilon: float
    resolution: int = 0

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        flat = x.reshape(-1, 2)
        out = np.empty_like(flat)
        _table_eval_many(self.data, self.origin, 1.0 / self.h, self.free_weight,
                         self.epsilon, flat, out)
        return out.reshape(x.shape)


def _padded_nodes(resolution: int):
    h = TWO_PI / resolution
    nodes = -np.pi + h * np.arange(-1, resolution + 2)
    return nodes, h


def tabulate_correction(resolution: int) -> KernelTable:
    nodes, h = _padded_nodes(resolution)
    xx = np.stack(np.meshgrid(nodes, nodes, indexing="ij"), axis=-1)
    data = np.moveaxis(_periodic_correction(xx), -1, 0).copy()
    return KernelTable(data, float(nodes[0]), h, 1.0, 0.0, resolution)


def tabulate_spectral(k_max: int, resolution: int) -> KernelTable:
    if resolution < 2.4 * k_max:
        raise InvalidInputError("table resolution must exceed 2.4 k_max to hold the tapered band")
    grid = SpectralGrid(resolution)
    kmag = np.sqrt(grid.ksq)
    mult = velocity_multiplier(grid) * taper(kmag, k_max) * grid.nyquist_free
    values = grid.to_values(mult)  # (2, L, L) on nodes -pi + j h
    data = np.pad(values, ((0, 0), (1, 2), (1, 2)), mode="wrap")
    nodes, h = _padded_nodes(resolution)
    return KernelTable(np.ascontiguousarray(data), float(nodes[0]), h, 0.0, 0.0, resolution)


@functools.lru_cache(maxsize=8)
def realize_kernel(spec: KernelSpec) -> KernelTable:
    """Fast table-backed realization used by the particle force loops."""
    if spec.mode == "spectral":
        return tabulate_spectral(spec.k_max, spec.table_resolution)
    table = tabulate_correction(spec.table_resolution)
    if spec.mode == "regularized":
        return KernelTable(table.data, table.origin, table.h, 1.0, spec.epsilon, table.resolution)
    return table


def eval_kernel_point(spec: KernelSpec, x) -> np.ndarray:
    """K(x) (or K_eps(x)) for minimal-image displacements x, shape (..., 2)."""
    x = np.asarray(x, dtype=float)
    if spec.mode == "spectral":
        return spectral_kernel_sum(x, spec.k_max)
    r2 = np.sum(x**2, axis=-1)
    if spec.mode == "free_space" and np.any(r2 == 0):
        raise SingularityError("exact Biot-Savart kernel evaluated at x = 0")
    return realize_kernel(spec)(x)


# ---------------------------------------------------------------------------
# numba kernels
# ---------------------------------------------------------------------------

@njit(cache=True, inline="always")
def _lagrange4(t):
    wm = -t * (t - 1.0) * (t - 2.0) / 6.0
    w0 = (t + 1.0) * (t - 1.0) * (t - 2.0) / 2.0
    w1 = -(t + 1.0) * t * (t - 2.0) / 2.0
    w2 = (t + 1.0) * t * (t - 1.0) / 6.0
    return wm, w0, w1, w2


@njit(cache=True)
def _smooth_step_scalar(t):
    if t <= 0.0:
        return 0.0
    if t >= 1.0:
        return 1.0
    a = np.exp(-1.0 / t)
    b = np.exp(-1.0 / (1.0 - t))
    return a / (a + b)


@njit(cache=True)
def _table_eval(data, origin, inv_h, free_weight, eps, d1, d2):
    u = (d1 - origin) * inv_h
    v = (d2 - origin) * inv_h
    i = int(np.floor(u))
    j = int(np.floor(v))
    a = _lagrange4(u - i)
    b = _lagrange4(v - j)
    k1 = 0.0
    k2 = 0.0
    for p in range(4):
        ap = a[p]
        r0 = 0.0
        r1 = 0.0
        for q in range(4):
            r0 += b[q] * data[0, i - 1 + p, j - 1 + q]
            r1 += b[q] * data[1, i - 1 + p, j - 1 + q]
        k1 += ap * r0
        k2 += ap * r1
    if free_weight != 0.0:
        r2 = d1 * d1 + d2 * d2
        if r2 > 0.0:
            c = free_weight / (2.0 * np.pi * r2)
            if eps > 0.0:
                c *= _smooth_step_scalar(np.sqrt(r2) / eps)
            k1 += -d2 * c
            k2 += d1 * c
    return k1, k2


@njit(cache=True)
def _table_eval_many(data, origin, inv_h, free_weight, eps, pts, out):
    for n in range(pts.shape[0]):
        k1, k2 = _table_eval(data, origin, inv_h, free_weight, eps, pts[n, 0], pts[n, 1])
        out[n, 0] = k1
        out[n, 1] = k2


# ---------------------------------------------------------------------------
# divergence-free transport field sigma
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class DivFreeVectorField:
    """sigma(x) = sum_m a_m exp(i k_m . x) with k_m . a_m = 0 and Hermitian amplitudes."""

    wavevectors: np.ndarray  # (m, 2) int
    amplitudes: np.ndarray  # (m, 2) complex

    def __post_init__(self):
        k = np.asarray(self.wavevectors, dtype=int).reshape(-1, 2)
        a = np.asarray(self.amplitudes, dtype=complex).reshape(-1, 2)
        if k.shape != a.shape:
            raise InvalidInputError("wavevectors and amplitudes must pair up")
        div = np.abs(np.sum(k * a, axis=1))
        if np.any(div > 1e-12 * (1 + np.abs(a).sum(axis=1))):
            raise InvalidInputError("sigma has a mode with k . a != 0 (not divergence free)")
        lookup = {tuple(kk): aa for kk, aa in zip(k.tolist(), a)}
        for kk, aa in lookup.items():
            partner = lookup.get((-kk[0], -kk[1]))
            if partner is None or np.max(np.abs(partner - np.conj(aa))) > 1e-14:
                raise InvalidInputError(f"sigma mode {kk} lacks its Hermitian partner")
        object.__setattr__(self, "wavevectors", k)
        object.__setattr__(self, "amplitudes", a)

    @classmethod
    def default(cls, amplitude: float = 1.0) -> "DivFreeVectorField":
        """amplitude * (cos x2, cos x1)."""
        half = amplitude / 2.0
        k = [(0, 1), (0, -1), (1, 0), (-1, 0)]
        a = [(half, 0), (half, 0), (0, half), (0, half)]
        return cls(np.array(k), np.array(a, dtype=complex))

    @classmethod
    def constant(cls, c1: float, c2: float) -> "DivFreeVectorField":
        return cls(np.array([(0, 0)]), np.array([(c1, c2)], dtype=complex))

    def _phases(self, x):
        x = np.asarray(x, dtype=float)
        return np.exp(1j * (x[..., None, 0] * self.wavevectors[:, 0]
                            + x[..., None, 1] * self.wavevectors[:, 1]))

    def __call__(self, x) -> np.ndarray:
        e = self._phases(x)
        return np.einsum("...m,mc->...c", e, self.amplitudes).real

    def jacobian(self, x) -> np.ndarray:
        """J[..., a, b] = d sigma_a / d x_b."""
        e = self._phases(x)
        return np.einsum("...m,ma,mb->...ab", 1j * e, self.amplitudes,
                         self.wavevectors.astype(float)).real

    def advective_derivative(self, x) -> np.ndarray:
        """(sigma . grad) sigma at x."""
        s = self(x)
        return np.einsum("...ab,...b->...a", self.jacobian(x), s)

    def divergence(self, x) -> np.ndarray:
        return np.trace(self.jacobian(x), axis1=-2, axis2=-1)

    def sup_norm(self) -> float:
        """Upper bound on max_x |sigma(x)| (sum of mode amplitudes, componentwise)."""
        return float(np.sqrt(np.sum(np.abs(self.amplitudes).sum(axis=0) ** 2)))

    def grid_values(self, grid: SpectralGrid) -> np.ndarray:
        pts = np.stack([grid.x1, grid.x2], axis=-1)
        return np.moveaxis(self(pts), -1, 0)


# ---------------------------------------------------------------------------
# kernel table persistence (VFLK)
# ---------------------------------------------------------------------------

KERNEL_MAGIC = b"VFLK"
KERNEL_VERSION = 1


def save_kernel_table(path, table: KernelTable) -> None:
    """magic, u32 version, u32 resolution, then the padded (resolution+3)^2 node
    values of each correction component, row-major little-endian float64."""
    data = np.ascontiguousarray(table.data, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(KERNEL_MAGIC)
        fh.write(struct.pack("<II", KERNEL_VERSION, table.resolution))
        fh.write(data.tobytes())


def load_kernel_table(path) -> KernelTable:
    raw = Path(path).read_bytes()
    if raw[:4] != KERNEL_MAGIC:
        raise FormatError(f"{path}: not a kernel table")
    version, resolution = struct.unpack_from("<II", raw, 4)
    if version != KERNEL_VERSION:
        raise FormatError(f"{path}: unsupported kernel table version {version}")
    n = resolution + 3
    body = np.frombuffer(raw, dtype="<f8", offset=12)
    if body.size != 2 * n * n:
        raise FormatError(f"{path}: truncated kernel table")
    nodes, h = _padded_nodes(resolution)
    return KernelTable(body.reshape(2, n, n).astype(float), float(nodes[0]), h, 1.0, 0.0, resolution)
