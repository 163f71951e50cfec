"""Discrete space-time and momentum index sets for lattice fermion models.

The fermion fields live on a finite universe of signed indices

    (band, site, spin, time, charge)

with `charge = +1` for conjugate fields and `charge = -1` for plain fields.
Times sit on the grid [0, beta) with spacing 1/h and are stored as exact
integer multiples of 1/h; sites are integer vectors on the d-dimensional
torus of side L.  Everything downstream (kernels, covariances, norms)
iterates these indices in one fixed lexicographic order so that results are
bit-reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

SPIN_UP = 0
SPIN_DOWN = 1
SPINS = (SPIN_UP, SPIN_DOWN)
CHARGE_BAR = +1   # conjugate field, sorts first
CHARGE_PLAIN = -1

__all__ = [
    "SPIN_UP", "SPIN_DOWN", "SPINS", "CHARGE_BAR", "CHARGE_PLAIN",
    "LatticeSpec", "SpaceTimeIndex", "SignedIndex", "MomentumPoint",
    "enumerate_index_sets", "IndexUniverse", "dist", "dist_flat",
    "wrap_time", "wrap_site", "matsubara_frequencies", "spatial_momenta",
    "index_distance_matrices",
]


class ConfigurationError(ValueError):
    """Raised for invalid lattice/model parameter combinations."""


@dataclass(frozen=True)
class LatticeSpec:
    """Geometry of one finite model instance.

    h is the time-grid density; validity requires beta*h/2 to be a positive
    integer, i.e. h in (2/beta)*N, so that the number of time slices beta*h
    is a positive even integer.
    """

    d: int
    L: int
    b: int
    beta: float
    h: float
    basis: tuple[tuple[float, ...], ...] | None = None  # rows u_j
    dual_basis: tuple[tuple[float, ...], ...] | None = None  # rows v_j

    def __post_init__(self):
        if self.d < 1 or self.L < 1 or self.b < 1:
            raise ConfigurationError("d, L, b must be positive integers")
        if self.beta <= 0 or self.h <= 0:
            raise ConfigurationError("beta and h must be positive")
        slices = self.beta * self.h
        if abs(slices - round(slices)) > 1e-9 or round(slices) % 2 != 0 or round(slices) == 0:
            raise ConfigurationError(
                f"h={self.h} not in (2/beta)*N for beta={self.beta}: "
                f"beta*h={slices} must be a positive even integer")
        if (self.basis is None) != (self.dual_basis is None):
            raise ConfigurationError("basis and dual_basis must be given together")
        if self.basis is not None:
            u = np.asarray(self.basis, dtype=float)
            v = np.asarray(self.dual_basis, dtype=float)
            if u.shape != (self.d, self.d) or v.shape != (self.d, self.d):
                raise ConfigurationError("basis matrices must be d x d")
            if not np.allclose(u @ v.T, np.eye(self.d), atol=1e-12):
                raise ConfigurationError("basis and dual basis must be dual pairs")

    @property
    def n_tau(self) -> int:
        """Number of time slices beta*h (even integer)."""
        return int(round(self.beta * self.h))

    @property
    def n_sites(self) -> int:
        return self.L ** self.d

    @property
    def n_i0(self) -> int:
        """|I0| = 2 b beta h L^d (band x site x spin x time)."""
        return 2 * self.b * self.n_tau * self.n_sites

    @property
    def n_gen(self) -> int:
        """|I| = 4 b beta h L^d signed generators."""
        return 2 * self.n_i0

    def dual_vector(self, j: int) -> np.ndarray:
        if self.dual_basis is not None:
            return np.asarray(self.dual_basis[j - 1], dtype=float)
        e = np.zeros(self.d)
        e[j - 1] = 1.0
        return e

    def sites(self) -> Iterator[tuple[int, ...]]:
        """Sites of the torus in lexicographic order."""
        def rec(prefix, depth):
            if depth == self.d:
                yield tuple(prefix)
                return
            for c in range(self.L):
                yield from rec(prefix + [c], depth + 1)
        yield from rec([], 0)


@dataclass(frozen=True, order=True)
class SpaceTimeIndex:
    """One element of the unsigned index set: (band, site, spin, time).

    `t_idx` is the exact integer time t*h in {0, ..., beta*h - 1}; the
    ordering of the dataclass fields realizes the global lexicographic order
    (band, site, spin, time).
    """

    rho: int
    x: tuple[int, ...]
    sigma: int
    t_idx: int

    def time(self, h: float) -> float:
        return self.t_idx / h


@dataclass(frozen=True, order=True)
class SignedIndex:
    """Space-time index plus charge; theta=+1 (conjugate) sorts before -1."""

    base: SpaceTimeIndex
    theta_rank: int = field(init=False)
    theta: int = CHARGE_BAR

    def __post_init__(self):
        if self.theta not in (CHARGE_BAR, CHARGE_PLAIN):
            raise ConfigurationError("theta must be +1 or -1")
        object.__setattr__(self, "theta_rank", 0 if self.theta == CHARGE_BAR else 1)


@dataclass(frozen=True)
class MomentumPoint:
    """A point (k, omega) of the momentum-frequency grid.

    k components are multiples of 2*pi/L in [0, 2*pi); omega is an odd
    multiple of pi/beta with |omega| < pi*h.
    """

    k: tuple[float, ...]
    omega: float


def enumerate_index_sets(spec: LatticeSpec) -> tuple[list[SpaceTimeIndex], list[SignedIndex]]:
    """All unsigned and signed indices in the fixed lexicographic order.

    Order: (rho, x_1..x_d, sigma, t, theta) with spin up < down and
    charge +1 < -1.  The returned lists are the process-lifetime reference
    enumerations; generator ids used by the algebra are positions in the
    second list.
    """
    i0: list[SpaceTimeIndex] = []
    gens: list[SignedIndex] = []
    for rho in range(1, spec.b + 1):
        for x in spec.sites():
            for sigma in SPINS:
                for t_idx in range(spec.n_tau):
                    st = SpaceTimeIndex(rho, x, sigma, t_idx)
                    i0.append(st)
                    gens.append(SignedIndex(st, theta=CHARGE_BAR))
                    gens.append(SignedIndex(st, theta=CHARGE_PLAIN))
    # gens was filled bar/plain interleaved per unsigned index, which is the
    # lexicographic order on (rho, x, sigma, t, theta) since theta ranks last.
    return i0, gens


class IndexUniverse:
    """Frozen enumeration of one spec's index sets with id lookups.

    The algebra layer works with small integer generator ids; this class owns
    the id <-> index dictionaries and a few decode tables as numpy arrays
    (band, spin, time, site coordinates, charge per generator id).
    """

    def __init__(self, spec: LatticeSpec):
        self.spec = spec
        self.i0, self.gens = enumerate_index_sets(spec)
        self.i0_pos = {st: i for i, st in enumerate(self.i0)}
        self.gen_pos = {g: i for i, g in enumerate(self.gens)}
        n = len(self.gens)
        self.gen_base = np.array([self.i0_pos[g.base] for g in self.gens], dtype=np.int64)
        self.gen_theta = np.array([g.theta for g in self.gens], dtype=np.int64)
        self.rho = np.array([st.rho for st in self.i0], dtype=np.int64)
        self.sigma = np.array([st.sigma for st in self.i0], dtype=np.int64)
        self.t_idx = np.array([st.t_idx for st in self.i0], dtype=np.int64)
        self.site = np.array([st.x for st in self.i0], dtype=np.int64)
        assert n == spec.n_gen and len(self.i0) == spec.n_i0

    def gen_id(self, rho: int, x: Sequence[int], sigma: int, t_idx: int, theta: int) -> int:
        st = SpaceTimeIndex(rho, tuple(x), sigma, t_idx)
        return self.gen_pos[SignedIndex(st, theta=theta)]

    def i0_id(self, rho: int, x: Sequence[int], sigma: int, t_idx: int) -> int:
        return self.i0_pos[SpaceTimeIndex(rho, tuple(x), sigma, t_idx)]

    def describe(self, gid: int) -> SignedIndex:
        return self.gens[gid]


def _chordal(period: float, a: float, b: float) -> float:
    # (period / 2 pi) |e^{i 2 pi a / period} - e^{i 2 pi b / period}|
    ang = math.pi * (a - b) / period
    return (period / math.pi) * abs(math.sin(ang))


def _as_base(X) -> SpaceTimeIndex:
    return X.base if isinstance(X, SignedIndex) else X


def dist(j: int, X, Y, spec: LatticeSpec) -> float:
    """Chordal distance along axis j (0 = time, 1..d = space).

    d_0 = (beta/2pi)|e^{i 2pi x/beta} - e^{i 2pi y/beta}| on times,
    d_j = (L/2pi)|e^{i 2pi <x,v_j>/L} - e^{i 2pi <y,v_j>/L}| on sites.
    """
    Xb, Yb = _as_base(X), _as_base(Y)
    if j == 0:
        return _chordal(spec.beta, Xb.t_idx / spec.h, Yb.t_idx / spec.h)
    if not 1 <= j <= spec.d:
        raise ValueError(f"axis {j} out of range 0..{spec.d}")
    v = spec.dual_vector(j)
    return _chordal(spec.L, float(np.dot(Xb.x, v)), float(np.dot(Yb.x, v)))


def dist_flat(j: int, X, Y, spec: LatticeSpec) -> float:
    """Flat circle distance min(|x-y|, beta-|x-y|) on times (axis 0), chordal
    spatial distance otherwise.  Satisfies dist >= (2/pi) * dist_flat."""
    if j == 0:
        Xb, Yb = _as_base(X), _as_base(Y)
        delta = abs(Xb.t_idx - Yb.t_idx) / spec.h
        return min(delta, spec.beta - delta)
    return dist(j, X, Y, spec)


def wrap_time(beta: float, x: float, h: float | None = None) -> tuple[int, float]:
    """Decompose x = n*beta + r with r in [0, beta).

    When h is supplied the arithmetic runs on the exact integer grid
    (x assumed a multiple of 1/h); otherwise a float floor is used.
    """
    if h is not None:
        a = round(x * h)
        ntau = round(beta * h)
        n = a // ntau
        return int(n), (a - n * ntau) / h
    n = math.floor(x / beta)
    return int(n), x - n * beta


def wrap_site(L: int, x: Sequence[int]) -> tuple[int, ...]:
    """Componentwise reduction mod L into {0..L-1}."""
    return tuple(int(c) % L for c in x)


def matsubara_frequencies(spec: LatticeSpec) -> np.ndarray:
    """The beta*h frequencies (pi/beta)(2Z+1) with |omega| < pi*h, ascending."""
    ntau = spec.n_tau
    ns = np.arange(-ntau // 2, ntau // 2)
    return (2 * ns + 1) * math.pi / spec.beta


def all_odd_frequencies(spec: LatticeSpec, omega_max: float) -> np.ndarray:
    """All odd multiples of pi/beta with |omega| <= omega_max (no h cap)."""
    nmax = int(math.floor((omega_max * spec.beta / math.pi - 1) / 2))
    ns = np.arange(-nmax - 1, nmax + 1)
    om = (2 * ns + 1) * math.pi / spec.beta
    return om[np.abs(om) <= omega_max]


def spatial_momenta(spec: LatticeSpec) -> np.ndarray:
    """The L^d momenta (2pi/L) * site, one row per site in site order."""
    sites = np.array(list(spec.sites()), dtype=float)
    return 2 * math.pi * sites / spec.L


def index_distance_matrices(universe: IndexUniverse) -> np.ndarray:
    """All chordal distances d_j between unsigned indices, shape (d+1, n, n).

    Axis 0 of the first dimension is the time distance, axes 1..d the spatial
    ones.  Distances ignore band, spin and charge, so they are tabulated once
    per universe and reused by every weighted kernel norm.
    """
    spec = universe.spec
    n = len(universe.i0)
    out = np.empty((spec.d + 1, n, n), dtype=float)
    tt = universe.t_idx / spec.h
    ang = np.pi * (tt[:, None] - tt[None, :]) / spec.beta
    out[0] = (spec.beta / np.pi) * np.abs(np.sin(ang))
    for j in range(1, spec.d + 1):
        v = spec.dual_vector(j)
        proj = universe.site @ v
        ang = np.pi * (proj[:, None] - proj[None, :]) / spec.L
        out[j] = (spec.L / np.pi) * np.abs(np.sin(ang))
    return out
