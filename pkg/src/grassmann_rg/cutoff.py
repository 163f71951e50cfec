"""Smooth cutoff machinery for the multi-scale decompositions.

A compactly supported Gevrey-class bump is built once by iterated
convolution of indicator kernels and shared by the frequency-side (UV)
and energy-side (IR) cutoff families.  Scale counters, weights and
finite-difference derivative probes live here too.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.signal import fftconvolve

from .lattice import (
    ConfigurationError,
    LatticeSpec,
    matsubara_frequencies,
    spatial_momenta,
)
from .model import HoppingParams, f_t

__all__ = [
    "GevreyBump", "ScaleParams", "build_phi", "default_phi", "chi_uv",
    "chi_ir", "chi_ir_le", "chi_ir_hat", "scale_counts", "gevrey_probe",
    "export_ir_table", "UVScaleWarning",
]

PI2_6 = math.pi ** 2 / 6.0
PI2_3 = math.pi ** 2 / 3.0


class UVScaleWarning(UserWarning):
    """h below the regime where the UV bound lemmas are stated."""


@dataclass(frozen=True)
class GevreyBump:
    """Nonincreasing C-infinity step: 1 below pi^2/6, 0 above pi^2/3.

    Stored as the cumulative integral F of the mollifier u on a uniform
    grid; evaluation is exact (no table lookup) on both flat regions.
    """

    K: int
    step: float
    cumulative: np.ndarray
    support_top: float

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        y = PI2_3 - x
        out = np.empty_like(y)
        flat1 = y >= self.support_top
        flat0 = y <= 0.0
        mid = ~(flat1 | flat0)
        out[flat1] = 1.0
        out[flat0] = 0.0
        if mid.any():
            grid = self.step * np.arange(len(self.cumulative))
            out[mid] = np.interp(y[mid], grid, self.cumulative)
        return out if out.ndim else float(out)


def build_phi(K: int = 8, grid: float = 1e-4) -> GevreyBump:
    """K-fold convolution of normalized indicators of widths (j+1)^{-2}.

    The widths sum below pi^2/6, so the support condition needed for the
    flat regions holds for every K; small K only degrades smoothness.
    """
    if K < 4:
        raise ConfigurationError("need K >= 4 indicator factors for the probes")
    u = np.ones(1)
    for j in range(K):
        n = max(int(round((j + 1) ** -2 / grid)), 1)
        u = fftconvolve(u, np.full(n, 1.0 / n))
    u = np.clip(u, 0.0, None)
    F = np.cumsum(u)
    F /= F[-1]
    top = grid * (len(F) - 1)
    assert top < PI2_6
    return GevreyBump(K=K, step=grid, cumulative=F, support_top=top)


_PHI_CACHE: dict = {}


def default_phi() -> GevreyBump:
    if "phi" not in _PHI_CACHE:
        _PHI_CACHE["phi"] = build_phi()
    return _PHI_CACHE["phi"]


@dataclass(frozen=True)
class ScaleParams:
    """Multi-scale bookkeeping: base M, weight prefactor c_w, smoothness
    constants of the dispersion, dimension."""

    M: float = 4.0
    c_w: float = 0.1
    E1: float = 4.0
    E2: float = 1.0
    d: int = 2
    alpha: float | None = None

    def __post_init__(self):
        if self.M <= math.sqrt(2.0):
            raise ConfigurationError("scale base M must exceed sqrt(2)")
        if not 0.0 < self.c_w <= 1.0:
            raise ConfigurationError("c_w must lie in (0, 1]")

    @property
    def M_uv(self) -> float:
        return 2.0 * math.sqrt(6.0) / math.pi * (self.E1 + 1.0)

    @property
    def M_ir(self) -> float:
        return math.sqrt(6.0) / math.pi * math.sqrt(
            math.pi ** 2 / 3.0 * self.M_uv ** 2 + 4.0)

    @property
    def w0(self) -> float:
        return (self.c_w * (self.d + 1) ** -2 *
                min(self.M_uv, 1.0 / (self.E2 + 1.0)) * self.M ** -2)

    def w(self, l: int) -> float:
        return self.w0 * self.M ** l

    @property
    def r_exponent(self) -> float:
        return 0.5


def _n_h(h: float, params: ScaleParams) -> int:
    arg = 2.0 * h * PI2_6 ** -0.5 / params.M_uv
    return max(math.floor(math.log(arg) / math.log(params.M)) + 1, 1)


def _n_beta(beta: float, params: ScaleParams) -> int:
    arg = (math.pi / beta) / (math.pi / math.sqrt(3.0) * params.M_ir)
    return min(math.floor(math.log(arg) / math.log(params.M)), 0)


def scale_counts(spec: LatticeSpec, params: ScaleParams) -> tuple[int, int]:
    """(number of UV scales, most negative IR scale)."""
    if spec.h < math.exp(2.0 * params.E1):
        warnings.warn(
            f"h={spec.h} is below e^(2 E1)={math.exp(2 * params.E1):.1f}; "
            "UV covariance bounds are not guaranteed at this resolution",
            UVScaleWarning, stacklevel=2)
    return _n_h(spec.h, params), _n_beta(spec.beta, params)


def _uv_arg(h: float, omega) -> np.ndarray:
    return (h * np.abs(1.0 - np.exp(1j * np.asarray(omega, dtype=float) / h))) ** 2


def chi_uv(l: int, omega, spec: LatticeSpec, params: ScaleParams,
           phi: GevreyBump | None = None):
    """Frequency-shell weight at UV scale l in {0, ..., N_h}."""
    nh = _n_h(spec.h, params)
    if not 0 <= l <= nh:
        raise ValueError(f"UV scale {l} outside 0..{nh}")
    phi = phi or default_phi()
    a2 = _uv_arg(spec.h, omega)
    muv2 = params.M_uv ** 2
    if l == 0:
        return phi(a2 / muv2)
    return phi(a2 / (muv2 * params.M ** (2 * l))) - \
        phi(a2 / (muv2 * params.M ** (2 * (l - 1))))


def _ir_energy(omega, k, ft: float) -> np.ndarray:
    omega = np.asarray(omega, dtype=float)
    k = np.asarray(k, dtype=float)
    ksum = (1.0 + np.cos(k)).sum(axis=-1)
    return omega ** 2 + ft * ksum


def chi_ir(l: int, omega, k, t: HoppingParams, spec: LatticeSpec,
           params: ScaleParams, phi: GevreyBump | None = None):
    """Energy-shell weight at IR scale l in {N_beta, ..., 0}, including the
    frequency prefactor that terminates the UV side."""
    nb = _n_beta(spec.beta, params)
    if not nb <= l <= 0:
        raise ValueError(f"IR scale {l} outside {nb}..0")
    phi = phi or default_phi()
    e2 = _ir_energy(omega, k, f_t(t))
    mir2 = params.M_ir ** 2
    pref = phi(np.asarray(omega, dtype=float) ** 2 / params.M_uv ** 2)
    return pref * (phi(e2 / (mir2 * params.M ** (2 * (l + 1)))) -
                   phi(e2 / (mir2 * params.M ** (2 * l))))


def chi_ir_le(l: int, omega, k, t: HoppingParams, spec: LatticeSpec,
              params: ScaleParams, phi: GevreyBump | None = None):
    """Sum of the shell weights over scales <= l."""
    nb = _n_beta(spec.beta, params)
    if not nb <= l <= 0:
        raise ValueError(f"IR scale {l} outside {nb}..0")
    tot = 0.0
    for j in range(nb, l + 1):
        tot = tot + chi_ir(j, omega, k, t, spec, params, phi)
    return tot


def chi_ir_hat(l: int, omega, k, t: HoppingParams, spec: LatticeSpec,
               params: ScaleParams, phi: GevreyBump | None = None):
    """The non-telescoped envelope; agrees with chi_ir_le once |omega|
    clears the first Matsubara frequency."""
    phi = phi or default_phi()
    e2 = _ir_energy(omega, k, f_t(t))
    pref = phi(np.asarray(omega, dtype=float) ** 2 / params.M_uv ** 2)
    return pref * phi(e2 / (params.M_ir ** 2 * params.M ** (2 * (l + 1))))


# -- derivative probes ------------------------------------------------------


def _fd_derivative(f, x0: float, n: int, step: float):
    """n-th derivative by the (n+2)-point binomial stencil with one
    Richardson extrapolation; returns (value, relative disagreement)."""

    def stencil(s):
        acc = None
        for i in range(n + 1):
            w = (-1.0) ** i * math.comb(n, i)
            v = np.asarray(f(x0 + (n / 2.0 - i) * s), dtype=complex)
            acc = w * v if acc is None else acc + w * v
        return acc / s ** n

    d1 = stencil(step)
    d2 = stencil(step / 2.0)
    rich = (4.0 * d2 - d1) / 3.0

    def mag(v):
        v = np.atleast_2d(v)
        return float(np.linalg.norm(v, 2))

    denom = max(mag(rich), 1e-30)
    return rich, mag(d2 - d1) / denom


def gevrey_probe(f, x0: float, n_max: int, q: float, r: float,
                 t_exp: float = 2.0, step: float = 1e-2) -> list[dict]:
    """Compare |f^(n)(x0)| against the envelope q * r^n * (n!)^t_exp.

    Matrix-valued f is measured in operator norm.  Unstable estimates
    (step-halving disagreement above 10%) are flagged, not failed.
    """
    if n_max > 6:
        raise ValueError("finite differences above order 6 are not supported")
    rows = []
    for n in range(1, n_max + 1):
        est, disagree = _fd_derivative(f, x0, n, step)
        est_mag = float(np.linalg.norm(np.atleast_2d(est), 2))
        envelope = q * r ** n * math.factorial(n) ** t_exp
        rows.append({
            "n": n,
            "estimate": est_mag,
            "envelope": envelope,
            "unstable": disagree > 0.10,
            "ok": est_mag <= envelope * 1.10 or disagree > 0.10,
        })
    return rows


def export_ir_table(path, spec: LatticeSpec, params: ScaleParams,
                    t: HoppingParams, phi: GevreyBump | None = None) -> int:
    """Write shell weights over the full frequency-momentum grid as CSV
    (columns l, omega, k1, k2, value).  Returns the row count."""
    nb = _n_beta(spec.beta, params)
    omegas = matsubara_frequencies(spec)
    kvecs = spatial_momenta(spec)
    count = 0
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["l", "omega", "k1", "k2", "value"])
        for l in range(nb, 1):
            for om in omegas:
                for kv in kvecs:
                    val = float(chi_ir(l, om, kv, t, spec, params, phi))
                    row = [l, repr(float(om))] + [repr(float(c)) for c in kv]
                    wr.writerow(row + [repr(val)])
                    count += 1
    return count
