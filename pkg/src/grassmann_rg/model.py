"""Hamiltonian data for the half-filled multi-band lattice model.

Contains the hopping / coupling parameter containers, the flagship
four-band flux dispersion with its closed-form spectrum, the signed
Grassmann interaction polynomials, and occupation-basis (Fock) operator
builders used by the exact oracle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .algebra import AlgebraContext, GrassmannPolynomial
from .lattice import (
    CHARGE_BAR,
    ConfigurationError,
    IndexUniverse,
    LatticeSpec,
    spatial_momenta,
)

__all__ = [
    "HoppingParams", "CouplingParams", "DispersionFn", "dispersion_4band",
    "dispersion_4band_derivative", "four_band", "spectrum_Xpq", "f_t",
    "propagator_bound_check", "interaction_kernels", "fock_operators",
    "fock_mode_index", "fock_annihilation", "one_particle_matrix",
    "occupation_numbers",
]

FOCK_MODE_CAP = 14


@dataclass(frozen=True)
class HoppingParams:
    """Positive hopping amplitudes (horizontal/vertical, even/odd rows)."""

    t_he: float
    t_ho: float
    t_ve: float
    t_vo: float

    def __post_init__(self):
        for name in ("t_he", "t_ho", "t_ve", "t_vo"):
            if not getattr(self, name) > 0.0:
                raise ConfigurationError(f"hopping amplitude {name} must be positive")

    @property
    def as_tuple(self):
        return (self.t_he, self.t_ho, self.t_ve, self.t_vo)

    @property
    def max_amp(self) -> float:
        return max(self.as_tuple)

    @property
    def normalized(self) -> bool:
        return abs(self.max_amp - 1.0) < 1e-12


@dataclass(frozen=True)
class CouplingParams:
    """Per-band couplings; complex values are allowed off the physical axis."""

    values: tuple

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(complex(v) for v in self.values))

    @classmethod
    def uniform(cls, b: int, u) -> "CouplingParams":
        return cls((complex(u),) * b)

    @property
    def b(self) -> int:
        return len(self.values)

    @property
    def u_max(self) -> float:
        return max((abs(v) for v in self.values), default=0.0)

    def as_array(self) -> np.ndarray:
        return np.array(self.values, dtype=complex)


@dataclass
class DispersionFn:
    """A band matrix evaluator k -> b x b, with optional smoothness constants.

    E1 bounds the matrix and all its k-derivatives in operator norm, E2
    bounds the derivatives of order >= 1 alone.
    """

    fn: object
    b: int
    E1: float | None = None
    E2: float | None = None

    def __call__(self, k) -> np.ndarray:
        return np.asarray(self.fn(k), dtype=complex)

    def validate(self, samples, tol: float = 1e-12) -> dict:
        """Hermiticity and 2 pi periodicity residuals over sample momenta."""
        worst_h = 0.0
        worst_p = 0.0
        for k in samples:
            k = np.asarray(k, dtype=float)
            E = self(k)
            worst_h = max(worst_h, float(np.abs(E - E.conj().T).max()))
            for j in range(len(k)):
                kp = k.copy()
                kp[j] += 2.0 * math.pi
                worst_p = max(worst_p, float(np.abs(self(kp) - E).max()))
        ok = worst_h < tol and worst_p < tol
        return {"hermiticity": worst_h, "periodicity": worst_p, "ok": ok}


def dispersion_4band(t: HoppingParams, k) -> np.ndarray:
    k1, k2 = float(k[0]), float(k[1])
    h1m = 1.0 + np.exp(-1j * k1)
    h1p = 1.0 + np.exp(1j * k1)
    h2m = 1.0 + np.exp(-1j * k2)
    h2p = 1.0 + np.exp(1j * k2)
    return np.array([
        [0.0, t.t_he * h1m, t.t_ve * h2m, 0.0],
        [t.t_he * h1p, 0.0, 0.0, -t.t_vo * h2m],
        [t.t_ve * h2p, 0.0, 0.0, t.t_ho * h1m],
        [0.0, -t.t_vo * h2p, t.t_ho * h1p, 0.0],
    ], dtype=complex)


def dispersion_4band_derivative(t: HoppingParams, k, j: int, n: int) -> np.ndarray:
    """(d/dk_j)^n of the four-band matrix, exact (each entry is c e^{+-ik_j})."""
    if n == 0:
        return dispersion_4band(t, k)
    k1, k2 = float(k[0]), float(k[1])
    out = np.zeros((4, 4), dtype=complex)
    if j == 1:
        em = (-1j) ** n * np.exp(-1j * k1)
        ep = (1j) ** n * np.exp(1j * k1)
        out[0, 1] = t.t_he * em
        out[1, 0] = t.t_he * ep
        out[2, 3] = t.t_ho * em
        out[3, 2] = t.t_ho * ep
    elif j == 2:
        em = (-1j) ** n * np.exp(-1j * k2)
        ep = (1j) ** n * np.exp(1j * k2)
        out[0, 2] = t.t_ve * em
        out[2, 0] = t.t_ve * ep
        out[1, 3] = -t.t_vo * em
        out[3, 1] = -t.t_vo * ep
    else:
        raise ValueError("axis j must be 1 or 2")
    return out


def four_band(t: HoppingParams) -> DispersionFn:
    """The flagship instance; smoothness constants 4 and 1 hold when the
    largest amplitude is 1."""
    return DispersionFn(lambda k: dispersion_4band(t, k), b=4, E1=4.0, E2=1.0)


def _AB(t: HoppingParams, k):
    c1 = 1.0 + math.cos(float(k[0]))
    c2 = 1.0 + math.cos(float(k[1]))
    A = (t.t_he ** 2 + t.t_ho ** 2) * c1 + (t.t_ve ** 2 + t.t_vo ** 2) * c2
    B = t.t_he * t.t_ho * c1 + t.t_ve * t.t_vo * c2
    return A, B


def spectrum_Xpq(t: HoppingParams, k) -> np.ndarray:
    """Closed-form eigenvalues p (A + q sqrt(A^2 - 4B^2))^{1/2}, ascending."""
    A, B = _AB(t, k)
    disc = A * A - 4.0 * B * B
    if disc < -1e-14 * max(1.0, A * A):
        raise ValueError(f"discriminant {disc} below round-off tolerance")
    root = math.sqrt(max(disc, 0.0))
    lo = math.sqrt(max(A - root, 0.0))
    hi = math.sqrt(max(A + root, 0.0))
    return np.array([-hi, -lo, lo, hi])


def f_t(t: HoppingParams) -> float:
    num = min(t.t_he * t.t_ho, t.t_ve * t.t_vo)
    den = t.max_amp ** 1.5
    ratio = min(t.t_ho / t.t_he, t.t_he / t.t_ho, t.t_vo / t.t_ve,
                t.t_ve / t.t_vo)
    return num / den * ratio


def propagator_bound_check(t: HoppingParams, samples) -> dict:
    """Check || (i w - E(k))^{-1} || <= (w^2 + f_t sum_j (1+cos k_j))^{-1/2}
    over the given (omega, k) samples.

    Returns a report with the worst margin (bound minus computed norm;
    nonnegative means the bound held) and any skipped singular samples.
    """
    ft = f_t(t)
    eye = np.eye(4)
    worst = math.inf
    worst_at = None
    skipped = []
    checked = 0
    for omega, k in samples:
        gap = omega * omega + ft * sum(1.0 + math.cos(float(kj)) for kj in k)
        if gap <= 0.0:
            skipped.append({"omega": omega, "k": tuple(k),
                            "note": "singular point, bound undefined"})
            continue
        E = dispersion_4band(t, k)
        M = 1j * omega * eye - E
        try:
            norm = float(np.linalg.norm(np.linalg.inv(M), 2))
        except np.linalg.LinAlgError:
            skipped.append({"omega": omega, "k": tuple(k),
                            "note": "matrix not invertible"})
            continue
        margin = gap ** -0.5 - norm
        checked += 1
        if margin < worst:
            worst = margin
            worst_at = {"omega": omega, "k": tuple(k), "norm": norm,
                        "bound": gap ** -0.5}
    return {"checked": checked, "skipped": skipped,
            "worst_margin": worst if checked else None, "worst_at": worst_at,
            "violations": 1 if (checked and worst < -1e-12) else 0}


def interaction_kernels(spec_or_universe, U: CouplingParams, delta: int,
                        ctx: AlgebraContext | None = None,
                        grade: int = 0) -> GrassmannPolynomial:
    """The polynomial -V^delta with the on-site interaction kernels.

    delta = +1 gives -V; delta = -1 additionally flips the sign of the
    half-filling quadratic counterterm.  Quartic part:
    -(1/h) sum_{rho,x,t} U_rho psibar_up psibar_dn psi_dn psi_up; quadratic
    part: +delta/(2h) sum_{I0} U_rho psibar psi.
    """
    if isinstance(spec_or_universe, IndexUniverse):
        universe = spec_or_universe
    else:
        universe = IndexUniverse(spec_or_universe)
    spec = universe.spec
    if U.b != spec.b:
        raise ConfigurationError(f"need {spec.b} couplings, got {U.b}")
    if delta not in (1, -1):
        raise ConfigurationError("delta must be +1 or -1")
    if ctx is None:
        ctx = AlgebraContext(spec.n_i0)
    p = GrassmannPolynomial(ctx)
    h = spec.h
    for rho in range(1, spec.b + 1):
        u = U.values[rho - 1]
        if u == 0.0:
            continue
        for x in spec.sites():
            for ti in range(spec.n_tau):
                b_up = universe.gen_id(rho, x, 0, ti, CHARGE_BAR)
                p_up = universe.gen_id(rho, x, 0, ti, -CHARGE_BAR)
                b_dn = universe.gen_id(rho, x, 1, ti, CHARGE_BAR)
                p_dn = universe.gen_id(rho, x, 1, ti, -CHARGE_BAR)
                p.add_term(-u / h, (b_up, b_dn, p_dn, p_up), grade)
                p.add_term(delta * u / (2.0 * h), (b_up, p_up), grade)
                p.add_term(delta * u / (2.0 * h), (b_dn, p_dn), grade)
    return p._cleanup()


# -- Fock-space builders ---------------------------------------------------


def fock_mode_index(spec: LatticeSpec, rho: int, x, sigma: int) -> int:
    """Lexicographic (rho, x, sigma) mode numbering over one time slice."""
    sites = list(spec.sites())
    ix = sites.index(tuple(x))
    return ((rho - 1) * len(sites) + ix) * 2 + sigma


def _popcount_below(dim: int) -> np.ndarray:
    states = np.arange(dim)
    pop = np.zeros(dim, dtype=np.int64)
    bit = 0
    while (1 << bit) < dim:
        pop += (states >> bit) & 1
        bit += 1
    return pop


def fock_annihilation(n_modes: int, m: int) -> sp.csr_matrix:
    """The annihilation operator of mode m in the occupation-bitmask basis,
    with the sign (-1)^{number of occupied lower modes}."""
    dim = 1 << n_modes
    states = np.arange(dim)
    occupied = (states >> m) & 1 == 1
    src = states[occupied]
    dst = src & ~(1 << m)
    pop = _popcount_below(dim)
    signs = 1.0 - 2.0 * (pop[src & ((1 << m) - 1)] & 1)
    return sp.csr_matrix((signs, (dst, src)), shape=(dim, dim))


def occupation_numbers(n_modes: int, m: int) -> np.ndarray:
    """Diagonal of the number operator of mode m."""
    return ((np.arange(1 << n_modes) >> m) & 1).astype(float)


def one_particle_matrix(spec: LatticeSpec, dispersion) -> np.ndarray:
    """Real-space hopping block h[(rho,x),(eta,y)] = (1/L^d) sum_k
    e^{i<k,x-y>} E(k)(rho,eta), without the spin index."""
    sites = np.array(list(spec.sites()), dtype=float)
    kvecs = spatial_momenta(spec)
    Eks = np.array([dispersion(k) for k in kvecs])     # (nk, b, b)
    phases = np.exp(1j * (sites @ kvecs.T))            # (ns, nk)
    # h[(rho,x),(eta,y)] = (1/L^d) sum_k ph[x,k] conj(ph[y,k]) E_k[rho,eta]
    h = np.einsum("xk,yk,kre->rxey", phases, phases.conj(), Eks) / spec.n_sites
    ns = len(sites)
    return h.reshape(spec.b * ns, spec.b * ns)


def fock_operators(spec: LatticeSpec, dispersion, U: CouplingParams):
    """Sparse (H0, V, H) on the 2^{2 b L^d}-dimensional occupation basis.

    `dispersion` is a DispersionFn (or any k -> b x b callable); pass a
    HoppingParams to get the four-band instance.
    """
    if isinstance(dispersion, HoppingParams):
        if spec.b != 4:
            raise ConfigurationError("four-band hoppings require b=4")
        dispersion = four_band(dispersion)
    n_modes = 2 * spec.b * spec.n_sites
    if n_modes > FOCK_MODE_CAP:
        raise ConfigurationError(
            f"{n_modes} modes exceed the Fock dimension cap 2^{FOCK_MODE_CAP}")
    if U.b != spec.b:
        raise ConfigurationError(f"need {spec.b} couplings, got {U.b}")
    dim = 1 << n_modes
    hblk = one_particle_matrix(spec, dispersion)
    ann = [fock_annihilation(n_modes, m) for m in range(n_modes)]
    H0 = sp.csr_matrix((dim, dim), dtype=complex)
    nb = hblk.shape[0]
    for a in range(nb):
        for bcol in range(nb):
            amp = hblk[a, bcol]
            if abs(amp) < 1e-15:
                continue
            for sg in (0, 1):
                m1 = 2 * a + sg
                m2 = 2 * bcol + sg
                H0 = H0 + amp * (ann[m1].conj().T @ ann[m2])
    diag = np.zeros(dim, dtype=complex)
    sites = list(spec.sites())
    for rho in range(1, spec.b + 1):
        u = U.values[rho - 1]
        if u == 0.0:
            continue
        for x in sites:
            up = occupation_numbers(n_modes, fock_mode_index(spec, rho, x, 0))
            dn = occupation_numbers(n_modes, fock_mode_index(spec, rho, x, 1))
            diag += u * (up * dn - 0.5 * (up + dn))
    V = sp.diags(diag).tocsr()
    H = (H0 + V).tocsr()
    return H0.tocsr(), V, H
