"""Observables and statistical tests for particle and continuum fluctuations.

Norms use the unnormalized pairing c_k = <f, e_k> = integral f e^{-ik.x} dx, so
for the empirical measure c_k = (1/N) sum_j exp(-i k.X_j) and a probability
density has c_0 = 1. Values differ from L^2-normalized conventions by powers of
2 pi; rates and distributional comparisons do not depend on that.
"""

from __future__ import annotations

import csv
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats as sps

from .errors import DomainError, InvalidConditioningError, InvalidInputError
from .torus import AREA, FourierField, SpectralGrid, _velocity_multiplier_cached


# ---------------------------------------------------------------------------
# test functions
# ---------------------------------------------------------------------------

_TERM = re.compile(r"^\s*(?:([-+]?\d*\.?\d+(?:[eE][-+]?\d+)?)\s*\*\s*)?(cos|sin)\(\s*(-?\d+)\s*,\s*(-?\d+)\s*\)\s*$")


@dataclass(frozen=True, eq=False)
class TestFunction:
    """phi(x) = sum_m a_m exp(i k_m . x), real (amplitudes come in conjugate pairs)."""

    __test__ = False  # keep pytest from collecting this class

    wavevectors: np.ndarray
    amplitudes: np.ndarray
    label: str = ""

    def __post_init__(self):
        k = np.asarray(self.wavevectors, dtype=int).reshape(-1, 2)
        a = np.asarray(self.amplitudes, dtype=complex).reshape(-1)
        if k.shape[0] != a.shape[0]:
            raise InvalidInputError("wavevectors and amplitudes must pair up")
        # merge duplicates, then check the real-valuedness condition a_{-k} = conj(a_k)
        merged: dict = {}
        for kk, aa in zip(map(tuple, k.tolist()), a):
            merged[kk] = merged.get(kk, 0) + aa
        for kk, aa in merged.items():
            if abs(merged.get((-kk[0], -kk[1]), 0) - np.conj(aa)) > 1e-12:
                raise InvalidInputError(f"test function mode {kk} lacks its conjugate partner")
        keys = sorted(merged)
        object.__setattr__(self, "wavevectors", np.array(keys, dtype=int).reshape(-1, 2))
        object.__setattr__(self, "amplitudes", np.array([merged[q] for q in keys], dtype=complex))

    @classmethod
    def cos(cls, k1: int, k2: int, amplitude: float = 1.0) -> "TestFunction":
        if (k1, k2) == (0, 0):
            return cls.constant(amplitude)
        return cls([(k1, k2), (-k1, -k2)], [amplitude / 2, amplitude / 2], f"cos({k1},{k2})")

    @classmethod
    def sin(cls, k1: int, k2: int, amplitude: float = 1.0) -> "TestFunction":
        return cls([(k1, k2), (-k1, -k2)], [-0.5j * amplitude, 0.5j * amplitude], f"sin({k1},{k2})")

    @classmethod
    def constant(cls, c: float = 1.0) -> "TestFunction":
        return cls([(0, 0)], [c], f"{c:g}")

    @classmethod
    def parse(cls, text: str) -> "TestFunction":
        """Sums of terms like ``cos(1,0)``, ``0.5*sin(1,2)`` or a bare constant."""
        parts = [p for p in re.split(r"\+(?![^()]*\))", text.replace(" ", "")) if p]
        ks, amps = [], []
        for part in parts:
            m = _TERM.match(part)
            if m is None:
                try:
                    c = float(part)
                except ValueError:
                    raise InvalidInputError(f"cannot parse test function term {part!r}") from None
                ks.append((0, 0))
                amps.append(c)
                continue
            coef = float(m.group(1)) if m.group(1) else 1.0
            f = getattr(cls, m.group(2))(int(m.group(3)), int(m.group(4)), coef)
            ks.extend(map(tuple, f.wavevectors.tolist()))
            amps.extend(f.amplitudes.tolist())
        return cls(ks, amps, text.strip())

    def __str__(self):
        return self.label or "phi"

    def _phases(self, x):
        x = np.asarray(x, dtype=float)
        return np.exp(1j * (x[..., 0, None] * self.wavevectors[:, 0] + x[..., 1, None] * self.wavevectors[:, 1]))

    def __call__(self, x) -> np.ndarray:
        return (self._phases(x) @ self.amplitudes).real

    def grad(self, x) -> np.ndarray:
        """Analytic gradient at points (..., 2) -> (..., 2)."""
        w = self._phases(x) * (1j * self.amplitudes)
        return (w @ self.wavevectors.astype(float)).real

    def laplacian(self) -> "TestFunction":
        ksq = np.sum(self.wavevectors**2, axis=1)
        return TestFunction(self.wavevectors, -ksq * self.amplitudes, f"lap[{self}]")

    def grad_sq_mean(self, v: FourierField) -> float:
        """<|grad phi|^2, v> by grid quadrature."""
        g = v.grid
        gr = self.grad(np.stack([g.x1, g.x2], axis=-1))
        return float(np.sum(np.sum(gr**2, axis=-1) * v.values()) * g.cell_area)

    def coeffs_on(self, grid: SpectralGrid) -> np.ndarray:
        """<phi, e_k> on the grid layout (AREA times the amplitudes)."""
        c = np.zeros((grid.M, grid.M), dtype=complex)
        half = grid.M // 2
        if np.any(np.abs(self.wavevectors) >= half):
            raise InvalidInputError(f"test function {self} is not resolved on an M={grid.M} grid")
        for (k1, k2), a in zip(self.wavevectors.tolist(), self.amplitudes):
            c[k1 % grid.M, k2 % grid.M] += AREA * a
        return c

    def values_on(self, grid: SpectralGrid) -> np.ndarray:
        return self(np.stack([grid.x1, grid.x2], axis=-1))


def sigma_transport_values(phi: TestFunction, sigma, points) -> np.ndarray:
    """sigma . grad phi at points."""
    return np.sum(sigma(points) * phi.grad(points), axis=-1)


def sigma_second_values(phi: TestFunction, sigma, points) -> np.ndarray:
    """sigma . grad(sigma . grad phi) at points.

    Expanded exactly: sigma_a d_a(sigma_b d_b phi) = (J sigma)_b d_b phi + sigma^T H sigma
    with J the Jacobian of sigma and H the Hessian of phi.
    """
    x = np.asarray(points, dtype=float)
    s = sigma(x)
    adv = sigma.advective_derivative(x)
    e = phi._phases(x)
    k = phi.wavevectors.astype(float)
    # Hessian: -sum a k_a k_b e^{ik.x}
    hess = -np.einsum("...m,m,ma,mb->...ab", e, phi.amplitudes, k, k).real
    return np.sum(adv * phi.grad(x), axis=-1) + np.einsum("...a,...ab,...b->...", s, hess, s)


# ---------------------------------------------------------------------------
# spectra and norms
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class EmpiricalSpectrum:
    """<mu_N, e_k> for |k|_inf <= k_stat, centered layout (2K+1, 2K+1)."""

    coeffs: np.ndarray
    N: int
    time: float = 0.0

    @property
    def k_stat(self) -> int:
        return (self.coeffs.shape[-1] - 1) // 2

    def coefficient(self, k1: int, k2: int) -> complex:
        K = self.k_stat
        return complex(self.coeffs[k1 + K, k2 + K])


def empirical_spectrum(positions, k_stat: int, time: float = 0.0) -> EmpiricalSpectrum:
    """Exact coefficients (1/N) sum_j exp(-i k.X_j); separable in the two axes."""
    if k_stat < 1:
        raise InvalidInputError("k_stat must be at least 1")
    x = np.atleast_2d(np.asarray(positions, dtype=float))
    ks = np.arange(-k_stat, k_stat + 1)
    e1 = np.exp(-1j * np.outer(x[:, 0], ks))
    e2 = np.exp(-1j * np.outer(x[:, 1], ks))
    c = (e1.T @ e2) / x.shape[0]
    c[k_stat, k_stat] = 1.0
    return EmpiricalSpectrum(c, x.shape[0], time)


def sobolev_weights(k_trunc: int, alpha: float) -> np.ndarray:
    ks = np.arange(-k_trunc, k_trunc + 1)
    return (1.0 + ks[:, None] ** 2 + ks[None, :] ** 2) ** alpha


def sobolev_norm_sq(coeffs, alpha: float, k_trunc: int | None = None) -> float:
    """sum over |k|_inf <= k_trunc of (1 + |k|^2)^alpha |c_k|^2.

    ``coeffs`` is a centered block (..., 2K+1, 2K+1), an EmpiricalSpectrum or a
    FourierField; leading axes are summed independently.
    """
    if isinstance(coeffs, EmpiricalSpectrum):
        coeffs = coeffs.coeffs
    if isinstance(coeffs, FourierField):
        kt = coeffs.grid.M // 2 - 1 if k_trunc is None else k_trunc
        coeffs = coeffs.centered(kt)
    c = np.asarray(coeffs)
    K = (c.shape[-1] - 1) // 2
    kt = K if k_trunc is None else k_trunc
    if kt > K:
        raise InvalidInputError(f"k_trunc={kt} exceeds the available band {K}")
    c = c[..., K - kt:K + kt + 1, K - kt:K + kt + 1]
    out = np.sum(sobolev_weights(kt, alpha) * np.abs(c) ** 2, axis=(-2, -1))
    return float(out) if np.ndim(out) == 0 else out


def sobolev_tail_bound(k_trunc: int, alpha: float, coeff_bound: float = 2.0) -> float:
    """Bound on the omitted part sum_{|k|_inf > K}(1+|k|^2)^alpha |c_k|^2 for |c_k| <= coeff_bound.

    The shell |k|_inf = r has 8r points with |k| >= r, so the tail is at most
    integral_K^inf 8r(1+r^2)^alpha dr = 4 (1+K^2)^(alpha+1) / (-alpha-1), alpha < -1.
    """
    if alpha >= -1:
        return float("inf")
    return coeff_bound**2 * 4.0 * (1.0 + k_trunc**2) ** (alpha + 1) / (-alpha - 1)


def empirical_error_norm(positions, v: FourierField, alpha: float, k_stat: int) -> float:
    """||mu_N - v||^2_{H^alpha} truncated at k_stat."""
    mu = empirical_spectrum(positions, k_stat).coeffs
    return sobolev_norm_sq(mu - v.centered(k_stat), alpha)


def eta_pairing(positions, v: FourierField | float, phi: TestFunction) -> float:
    """<eta^N, phi> = sqrt(N) (mean_i phi(X_i) - <phi, v>); ``v`` may be the value <phi, v>."""
    x = np.asarray(positions)
    mean_v = v.pair(phi) if isinstance(v, FourierField) else float(v)
    return float(np.sqrt(x.shape[0]) * (np.mean(phi(x)) - mean_v))


# ---------------------------------------------------------------------------
# martingale, interaction term, weights
# ---------------------------------------------------------------------------

@dataclass
class MartingaleAccumulator:
    """Running <M^N_t, phi> = sqrt(2/N) sum_i int grad phi(X_i) . dB_i and its quadratic variation."""

    phi: TestFunction
    value: float = 0.0
    qv: float = 0.0

    def update(self, positions, dB, dt: float) -> tuple[float, float]:
        x = np.asarray(positions, dtype=float)
        dB = np.asarray(dB, dtype=float)
        if x.shape != dB.shape:
            raise InvalidInputError(f"positions {x.shape} and increments {dB.shape} differ in shape")
        n = x.shape[0]
        gr = self.phi.grad(x)
        self.value += np.sqrt(2.0 / n) * float(np.sum(gr * dB))
        self.qv += 2.0 / n * float(np.sum(gr**2)) * dt
        return self.value, self.qv


def particle_interaction(positions, phi: TestFunction, drift) -> float:
    """sqrt(N) <grad phi, K*mu_N mu_N> with the diagonal excluded, given b_i = (1/N) sum_{j!=i} K(X_i - X_j)."""
    x = np.asarray(positions, dtype=float)
    return float(np.sum(phi.grad(x) * np.asarray(drift)) / np.sqrt(x.shape[0]))


def continuum_interaction(v: FourierField, phi: TestFunction) -> float:
    """<grad phi, v K*v> by dealiased grid quadrature."""
    g = v.grid
    c = v.coeffs * g.dealias_mask
    vals = g.to_values(c)
    u = g.to_values(_velocity_multiplier_cached(g) * c)
    gr = np.moveaxis(phi.grad(np.stack([g.x1, g.x2], axis=-1)), -1, 0)
    return float(np.sum(gr * u * vals) * g.cell_area)


def interaction_term(positions, v: FourierField, phi: TestFunction, spec=None, drift=None,
                     method: str = "direct") -> float:
    """K^N(phi) = sqrt(N) <grad phi, K*mu_N mu_N> - sqrt(N) <grad phi, v K*v>."""
    if drift is None:
        from .particles import pairwise_drift
        if spec is None:
            raise InvalidInputError("either a kernel spec or a precomputed drift is needed")
        drift = pairwise_drift(positions, spec, method)
    n = np.asarray(positions).shape[0]
    return particle_interaction(positions, phi, drift) - np.sqrt(n) * continuum_interaction(v, phi)


def entropy_weight(times, norm_sq_series, m: float = 2.0, t: float | None = None) -> float:
    """R_t = (1/m) exp(-m int_0^t ||v_s||^2_{H^4} ds), trapezoidal in time."""
    if not m > 1:
        raise InvalidInputError(f"weight constant m must exceed 1, got {m}")
    ts = np.asarray(times, dtype=float)
    ys = np.asarray(norm_sq_series, dtype=float)
    if ts.shape != ys.shape or ts.size == 0:
        raise InvalidInputError("times and norm series must be non-empty and aligned")
    if t is None:
        t = ts[-1]
    if t < ts[0] or t > ts[-1] + 1e-12:
        raise InvalidInputError(f"t={t} lies outside the logged interval [{ts[0]}, {ts[-1]}]")
    keep = ts < t
    grid_t = np.append(ts[keep], t)
    grid_y = np.append(ys[keep], np.interp(t, ts, ys))
    integral = float(np.sum(0.5 * (grid_y[1:] + grid_y[:-1]) * np.diff(grid_t)))
    return float(np.exp(-m * integral) / m)


def fisher_information(values, cell_area: float | None = None) -> float:
    """int |grad rho|^2 / rho dx with spectral gradients on a uniform periodic grid."""
    rho = np.asarray(values, dtype=float)
    if rho.ndim != 2 or rho.shape[0] != rho.shape[1]:
        raise InvalidInputError("grid values must be a square array")
    if np.any(rho <= 0):
        raise DomainError("Fisher information needs strictly positive grid values")
    m = rho.shape[0]
    if cell_area is None:
        cell_area = (2 * np.pi / m) ** 2
    k = np.fft.fftfreq(m, 1.0 / m)
    if m % 2 == 0:
        k[m // 2] = 0.0
    r = np.fft.fft2(rho)
    g1 = np.fft.ifft2(1j * k[:, None] * r).real
    g2 = np.fft.ifft2(1j * k[None, :] * r).real
    return float(np.sum((g1**2 + g2**2) / rho) * cell_area)


# ---------------------------------------------------------------------------
# fits and tests
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RateFitResult:
    slope: float
    intercept: float
    r_squared: float
    half_width: float

    def contains(self, lo: float, hi: float) -> bool:
        return lo <= self.slope <= hi


def rate_fit(pairs) -> RateFitResult:
    """OLS of log(value) on log(N) with a 95% t-interval half-width for the slope."""
    arr = np.asarray(list(pairs), dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise InvalidInputError("rate_fit expects (N, value) pairs")
    if len(np.unique(arr[:, 0])) < 3:
        raise InvalidInputError("rate_fit needs at least three distinct N")
    if np.any(arr <= 0):
        raise DomainError("rate_fit needs positive N and values")
    x, y = np.log(arr[:, 0]), np.log(arr[:, 1])
    n = len(x)
    xm, ym = x.mean(), y.mean()
    sxx = np.sum((x - xm) ** 2)
    slope = np.sum((x - xm) * (y - ym)) / sxx
    intercept = ym - slope * xm
    resid = y - intercept - slope * x
    ss_res, ss_tot = np.sum(resid**2), np.sum((y - ym) ** 2)
    r2 = 1.0 if ss_tot == 0 else float(np.clip(1 - ss_res / ss_tot, 0.0, 1.0))
    half = 0.0
    if n > 2:
        se = np.sqrt(ss_res / (n - 2) / sxx)
        half = float(sps.t.ppf(0.975, n - 2) * se)
    return RateFitResult(float(slope), float(intercept), r2, half)


def kolmogorov_sf(lam: float, terms: int = 100) -> float:
    """P(K > lam) = 2 sum_{j>=1} (-1)^{j-1} exp(-2 j^2 lam^2)."""
    if lam <= 0:
        return 1.0
    j = np.arange(1, terms + 1)
    return float(np.clip(2.0 * np.sum((-1.0) ** (j - 1) * np.exp(-2.0 * j**2 * lam**2)), 0.0, 1.0))


def ks_normal_test(samples, mean: float, variance: float) -> tuple[float, float]:
    """One-sample KS statistic against N(mean, variance) and its asymptotic p-value."""
    if not variance > 0:
        raise DomainError(f"variance must be positive, got {variance}")
    x = np.sort(np.asarray(samples, dtype=float))
    n = x.size
    if n < 50:
        raise InvalidInputError(f"KS test needs at least 50 samples, got {n}")
    cdf = sps.norm.cdf((x - mean) / np.sqrt(variance))
    i = np.arange(1, n + 1)
    d = float(max(np.max(i / n - cdf), np.max(cdf - (i - 1) / n)))
    sq = np.sqrt(n)
    return d, kolmogorov_sf((sq + 0.12 + 0.11 / sq) * d)


@dataclass(frozen=True)
class CharComparison:
    s: float
    empirical_re: float
    empirical_im: float
    target: float
    se_re: float
    se_im: float

    def z_scores(self) -> tuple[float, float]:
        zr = 0.0 if self.se_re == 0 else (self.empirical_re - self.target) / self.se_re
        zi = 0.0 if self.se_im == 0 else self.empirical_im / self.se_im
        return zr, zi

    def within(self, n_se: float = 3.0) -> bool:
        tol = 1e-12
        return (abs(self.empirical_re - self.target) <= n_se * self.se_re + tol
                and abs(self.empirical_im) <= n_se * self.se_im + tol)


def _jackknife_mean_se(x: np.ndarray) -> float:
    n = x.size
    loo = (x.sum() - x) / (n - 1)
    return float(np.sqrt((n - 1) / n * np.sum((loo - loo.mean()) ** 2)))


def conditional_char_compare(samples, w_path_ids, grad_integral: float, s_grid,
                             min_samples: int = 500) -> list[CharComparison]:
    """Empirical E[exp(i s X)] vs exp(-s^2 int <|grad phi|^2, v_s> ds) for samples sharing one W path."""
    x = np.asarray(samples, dtype=float)
    ids = np.unique(np.asarray(w_path_ids))
    if ids.size != 1:
        raise InvalidConditioningError(f"samples come from {ids.size} different common-noise paths")
    if x.size < min_samples:
        raise InvalidInputError(f"need at least {min_samples} samples, got {x.size}")
    out = []
    for s in s_grid:
        c, sn = np.cos(s * x), np.sin(s * x)
        out.append(CharComparison(float(s), float(c.mean()), float(sn.mean()),
                                  float(np.exp(-s * s * grad_integral)),
                                  _jackknife_mean_se(c), _jackknife_mean_se(sn)))
    return out


# ---------------------------------------------------------------------------
# weak-form bookkeeping
# ---------------------------------------------------------------------------

def weak_form_residual(times, pairing, drift_terms, noise_terms=(), martingale=None):
    """r_n = P_n - P_0 - sum_{m<n} [sum(drift_m) dt_m + sum(g_m dW_m)] - M_n.

    ``drift_terms`` is a sequence of series sampled at ``times``; ``noise_terms``
    a sequence of (integrand series, increments) where increments[m] drives the
    step from times[m] to times[m+1]. Left-point (Ito) sums throughout.
    """
    t = np.asarray(times, dtype=float)
    p = np.asarray(pairing, dtype=float)
    n = t.size
    if p.shape != (n,) or n < 2:
        raise InvalidInputError("pairing must be a series aligned with times")
    if np.any(np.diff(t) <= 0):
        raise InvalidInputError("times must be strictly increasing")
    dt = np.diff(t)
    incr = np.zeros(n - 1)
    for series in drift_terms:
        s = np.asarray(series, dtype=float)
        if s.shape != (n,):
            raise InvalidInputError("drift series is not on the pairing time grid")
        incr += s[:-1] * dt
    for series, dW in noise_terms:
        s, w = np.asarray(series, dtype=float), np.asarray(dW, dtype=float)
        if s.shape != (n,) or w.shape[0] < n - 1:
            raise InvalidInputError("noise series is not on the pairing time grid")
        incr += s[:-1] * w[: n - 1]
    r = p - p[0] - np.concatenate([[0.0], np.cumsum(incr)])
    if martingale is not None:
        mg = np.asarray(martingale, dtype=float)
        if mg.shape != (n,):
            raise InvalidInputError("martingale series is not on the pairing time grid")
        r = r - (mg - mg[0])
    return r


# ---------------------------------------------------------------------------
# time series with CSV persistence
# ---------------------------------------------------------------------------

SERIES_COLUMNS = ("time", "value", "N", "ensemble_id", "w_path_id", "seed")


@dataclass
class PairingSeries:
    name: str
    times: list = field(default_factory=list)
    values: list = field(default_factory=list)
    N: int = 0
    ensemble_id: int = 0
    w_path_id: int = 0
    seed: int = 0

    def append(self, t: float, value: float):
        if self.times and not t > self.times[-1]:
            raise InvalidInputError(f"{self.name}: time {t} does not advance past {self.times[-1]}")
        self.times.append(float(t))
        self.values.append(float(value))

    def as_arrays(self):
        return np.asarray(self.times), np.asarray(self.values)

    def rows(self):
        for t, v in zip(self.times, self.values):
            yield (repr(t), repr(v), self.N, self.ensemble_id, self.w_path_id, self.seed)


def write_series_csv(path, series: list[PairingSeries]) -> None:
    """One file per observable; several members may be stacked in one file."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SERIES_COLUMNS)
        for s in series:
            w.writerows(s.rows())


def read_series_csv(path, name: str | None = None) -> list[PairingSeries]:
    name = name or Path(path).stem
    out: dict = {}
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = tuple(next(r))
        if header != SERIES_COLUMNS:
            raise InvalidInputError(f"{path}: unexpected header {header}")
        for row in r:
            t, v, n, e, w, seed = row
            key = (int(n), int(e), int(w), int(seed))
            if key not in out:
                out[key] = PairingSeries(name, N=key[0], ensemble_id=key[1], w_path_id=key[2], seed=key[3])
            out[key].append(float(t), float(v))
    return list(out.values())
