"""Sparse Grassmann polynomial algebra over a finite generator universe.

Polynomials are stored as dictionaries from strictly increasing generator-id
tuples to complex coefficients, bucketed by (grade, degree).  The grade is an
optional formal order counter in the coupling constants: products add grades,
and grades above the context cap are discarded exactly (working modulo the
next order).  Ungraded workflows keep everything in grade 0.

The generator convention follows the lattice enumeration: generator id g
represents the unsigned index g // 2 with charge +1 (conjugate field) when g
is even and -1 (plain field) when g is odd.  With this encoding, monomial
Gaussian integration reduces to a determinant of the conjugate-vs-plain
covariance submatrix after a charge-sorting permutation; no Pfaffian is ever
needed.

Coefficient bookkeeping: every polynomial carries `dropped`, an upper bound
on the total absolute coefficient mass discarded by pruning, degree capping
or series cutoffs since its construction.  Exact-mode contexts refuse to
truncate degrees or exceed the term budget and raise CapacityError instead.
"""

from __future__ import annotations

import cmath
import itertools
import math
from dataclasses import dataclass

import numpy as np

from .lattice import (
    CHARGE_BAR,
    IndexUniverse,
    matsubara_frequencies,
    spatial_momenta,
    wrap_site,
)

__all__ = [
    "CapacityError", "ContractError", "AlgebraContext", "GrassmannPolynomial",
    "multiply", "exp_poly", "log_poly", "gaussian_integral", "free_integrate",
    "left_derivative", "poly_from_raw_kernel", "poly_l1", "poly_norm",
    "poly_diff", "check_translation_property", "TransformRQ",
    "apply_transform", "build_transforms", "quadratic_momentum_kernel",
    "reconstruct_quadratic", "FlatExtension",
]

DEFAULT_TERM_BUDGET = 10 ** 6
DEFAULT_PRUNE_TOL = 1e-15


class CapacityError(RuntimeError):
    """Term budget or degree cap exceeded in exact mode."""


class ContractError(ValueError):
    """A documented precondition of an operation was violated."""


class AlgebraContext:
    """Shared policy object for a family of polynomials.

    n_i0: number of unsigned indices (generator count is 2*n_i0).
    degree_cap: drop (or, in exact mode, refuse) degrees above this.
    grade_cap: work modulo grade grade_cap+1; None disables grading.
    exact: refuse any degree/budget truncation instead of recording it.
    prune_tol: coefficients with |c| <= prune_tol are dropped after each
      operation (their mass accumulates in `dropped`).  Defaults to 0 in
      exact mode and 1e-15 otherwise.
    """

    __slots__ = ("n_i0", "degree_cap", "grade_cap", "term_budget",
                 "prune_tol", "exact", "series_tol")

    def __init__(self, n_i0: int, degree_cap: int | None = None,
                 grade_cap: int | None = None,
                 term_budget: int = DEFAULT_TERM_BUDGET,
                 prune_tol: float | None = None, exact: bool = False,
                 series_tol: float = 1e-16):
        self.n_i0 = int(n_i0)
        self.degree_cap = degree_cap
        self.grade_cap = grade_cap
        self.term_budget = int(term_budget)
        if prune_tol is None:
            prune_tol = 0.0 if exact else DEFAULT_PRUNE_TOL
        self.prune_tol = float(prune_tol)
        self.exact = bool(exact)
        self.series_tol = float(series_tol)

    @property
    def n_gen(self) -> int:
        return 2 * self.n_i0

    @staticmethod
    def charge(gid: int) -> int:
        return CHARGE_BAR if gid % 2 == 0 else -CHARGE_BAR

    @staticmethod
    def i0_of(gid: int) -> int:
        return gid // 2

    def _check_same(self, other: "AlgebraContext"):
        if self is other:
            return
        if (self.n_i0, self.degree_cap, self.grade_cap, self.exact) != \
                (other.n_i0, other.degree_cap, other.grade_cap, other.exact):
            raise ContractError("operands built over incompatible contexts")


def _sort_key(seq) -> tuple[tuple[int, ...] | None, int]:
    """Sort a generator tuple, returning (key, parity sign) or (None, 0)
    when an id repeats (the monomial vanishes)."""
    lst = list(seq)
    sign = 1
    for i in range(1, len(lst)):
        val = lst[i]
        j = i - 1
        while j >= 0 and lst[j] > val:
            lst[j + 1] = lst[j]
            j -= 1
            sign = -sign
        lst[j + 1] = val
    for i in range(1, len(lst)):
        if lst[i] == lst[i - 1]:
            return None, 0
    return tuple(lst), sign


def _merge_key(a: tuple[int, ...], b: tuple[int, ...]) -> tuple[tuple[int, ...] | None, int]:
    """Merge two increasing tuples with the Koszul crossing sign."""
    i = j = 0
    la, lb = len(a), len(b)
    out = []
    crossings = 0
    while i < la and j < lb:
        if a[i] < b[j]:
            out.append(a[i])
            i += 1
        elif a[i] > b[j]:
            out.append(b[j])
            j += 1
            crossings += la - i
        else:
            return None, 0
    out.extend(a[i:])
    out.extend(b[j:])
    return tuple(out), (-1 if crossings % 2 else 1)


class GrassmannPolynomial:
    """One element of the finite Grassmann algebra (see module docstring)."""

    __slots__ = ("ctx", "terms", "dropped", "truncated")

    def __init__(self, ctx: AlgebraContext):
        self.ctx = ctx
        # (grade, degree) -> {increasing id tuple -> complex}
        self.terms: dict[tuple[int, int], dict[tuple[int, ...], complex]] = {}
        self.dropped = 0.0
        self.truncated = False

    # -- construction ------------------------------------------------------

    @classmethod
    def zero(cls, ctx: AlgebraContext) -> "GrassmannPolynomial":
        return cls(ctx)

    @classmethod
    def const(cls, ctx: AlgebraContext, z: complex, grade: int = 0) -> "GrassmannPolynomial":
        p = cls(ctx)
        p.add_term(z, (), grade)
        return p

    def add_term(self, coeff: complex, gens, grade: int = 0):
        """Accumulate coeff * psi_{gens} (gens in any order, Koszul sign applied)."""
        key, sign = _sort_key(gens)
        if key is None:
            return
        if self.ctx.grade_cap is not None and grade > self.ctx.grade_cap:
            return
        m = len(key)
        if self.ctx.degree_cap is not None and m > self.ctx.degree_cap:
            if self.ctx.exact:
                raise CapacityError(f"degree {m} above cap {self.ctx.degree_cap}")
            self.dropped += abs(coeff)
            self.truncated = True
            return
        bucket = self.terms.setdefault((grade, m), {})
        bucket[key] = bucket.get(key, 0.0) + sign * coeff

    def _cleanup(self):
        tol = self.ctx.prune_tol
        for gk in list(self.terms):
            bucket = self.terms[gk]
            if tol > 0.0:
                dead = [k for k, c in bucket.items() if abs(c) <= tol]
                for k in dead:
                    self.dropped += abs(bucket.pop(k))
            else:
                dead = [k for k, c in bucket.items() if c == 0.0]
                for k in dead:
                    del bucket[k]
            if not bucket:
                del self.terms[gk]
        total = self.n_terms
        if total > self.ctx.term_budget:
            if self.ctx.exact:
                raise CapacityError(
                    f"term budget {self.ctx.term_budget} exceeded ({total})")
            ranked = sorted(
                ((abs(c), gk, k) for gk, b in self.terms.items() for k, c in b.items()))
            for mag, gk, k in ranked[: total - self.ctx.term_budget]:
                del self.terms[gk][k]
                self.dropped += mag
            self.truncated = True
            for gk in [g for g, b in self.terms.items() if not b]:
                del self.terms[gk]
        return self

    def copy(self) -> "GrassmannPolynomial":
        p = GrassmannPolynomial(self.ctx)
        p.terms = {gk: dict(b) for gk, b in self.terms.items()}
        p.dropped = self.dropped
        p.truncated = self.truncated
        return p

    # -- inspection --------------------------------------------------------

    @property
    def n_terms(self) -> int:
        return sum(len(b) for b in self.terms.values())

    @property
    def max_degree(self) -> int:
        return max((m for (_, m) in self.terms), default=0)

    def degrees(self) -> list[int]:
        return sorted({m for (_, m) in self.terms})

    def const_part(self, grade: int | None = None) -> complex:
        if grade is not None:
            return self.terms.get((grade, 0), {}).get((), 0.0)
        return sum(b.get((), 0.0) for (g, m), b in self.terms.items() if m == 0)

    def coeff(self, gens, grade: int | None = None) -> complex:
        key, sign = _sort_key(gens)
        if key is None:
            return 0.0
        m = len(key)
        if grade is not None:
            return sign * self.terms.get((grade, m), {}).get(key, 0.0)
        tot = 0.0
        for (g, mm), b in self.terms.items():
            if mm == m:
                tot += b.get(key, 0.0)
        return sign * tot

    def kernel_value(self, gens, h: float, grade: int | None = None) -> complex:
        """The antisymmetric kernel f_m at an arbitrary signed tuple:
        f_m(X) = sgn(sort) * c_{sort(X)} * h^m / m!."""
        m = len(gens)
        return self.coeff(gens, grade) * h ** m / math.factorial(m)

    def mass(self) -> float:
        return sum(abs(c) for b in self.terms.values() for c in b.values())

    def l1(self, m: int, grade: int | None = None) -> float:
        """The L1 kernel norm (1/h)^m sum_X |f_m(X)|, which equals the sum of
        |coefficient| over stored degree-m tuples."""
        if grade is not None:
            return sum(abs(c) for c in self.terms.get((grade, m), {}).values())
        if m == 0:
            return abs(self.const_part())
        tot = 0.0
        agg: dict[tuple[int, ...], complex] = {}
        for (g, mm), b in self.terms.items():
            if mm == m:
                for k, c in b.items():
                    agg[k] = agg.get(k, 0.0) + c
        for c in agg.values():
            tot += abs(c)
        return tot

    def degree_slice(self, keep) -> "GrassmannPolynomial":
        """New polynomial with only the degrees for which keep(m) is true."""
        p = GrassmannPolynomial(self.ctx)
        for (g, m), b in self.terms.items():
            if keep(m):
                p.terms[(g, m)] = dict(b)
        p.dropped = self.dropped
        p.truncated = self.truncated
        return p

    def grade_collapse(self) -> "GrassmannPolynomial":
        """Sum all grades into grade 0 (evaluating the formal counter at 1)."""
        p = GrassmannPolynomial(self.ctx)
        for (g, m), b in self.terms.items():
            out = p.terms.setdefault((0, m), {})
            for k, c in b.items():
                out[k] = out.get(k, 0.0) + c
        p.dropped = self.dropped
        p.truncated = self.truncated
        return p._cleanup()

    def to_json_dict(self) -> dict:
        rows = []
        for (g, m) in sorted(self.terms):
            for k in sorted(self.terms[(g, m)]):
                c = self.terms[(g, m)][k]
                rows.append({"grade": g, "degree": m, "indices": list(k),
                             "re": c.real if isinstance(c, complex) else float(c),
                             "im": c.imag if isinstance(c, complex) else 0.0})
        return {"n_i0": self.ctx.n_i0, "terms": rows,
                "dropped": self.dropped, "truncated": self.truncated}

    # -- arithmetic --------------------------------------------------------

    def __add__(self, other):
        if isinstance(other, (int, float, complex)):
            other = GrassmannPolynomial.const(self.ctx, other)
        self.ctx._check_same(other.ctx)
        p = self.copy()
        for gk, b in other.terms.items():
            out = p.terms.setdefault(gk, {})
            for k, c in b.items():
                out[k] = out.get(k, 0.0) + c
        p.dropped += other.dropped
        p.truncated = p.truncated or other.truncated
        return p._cleanup()

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, (int, float, complex)):
            other = GrassmannPolynomial.const(self.ctx, other)
        return self + other.scale(-1.0)

    def scale(self, z: complex) -> "GrassmannPolynomial":
        p = GrassmannPolynomial(self.ctx)
        for gk, b in self.terms.items():
            p.terms[gk] = {k: z * c for k, c in b.items()}
        p.dropped = self.dropped * abs(z)
        p.truncated = self.truncated
        return p._cleanup()

    def __mul__(self, other):
        if isinstance(other, (int, float, complex)):
            return self.scale(other)
        return multiply(self, other)

    def __rmul__(self, other):
        if isinstance(other, (int, float, complex)):
            return self.scale(other)
        return NotImplemented


def multiply(f: GrassmannPolynomial, g: GrassmannPolynomial) -> GrassmannPolynomial:
    """Graded exterior product with Koszul signs."""
    f.ctx._check_same(g.ctx)
    ctx = f.ctx
    out = GrassmannPolynomial(ctx)
    dcap = ctx.degree_cap
    gcap = ctx.grade_cap
    for (g1, m1), b1 in f.terms.items():
        for (g2, m2), b2 in g.terms.items():
            if gcap is not None and g1 + g2 > gcap:
                continue
            md = m1 + m2
            if dcap is not None and md > dcap:
                if ctx.exact:
                    raise CapacityError(f"degree {md} above cap {dcap}")
                out.dropped += sum(abs(c) for c in b1.values()) * \
                    sum(abs(c) for c in b2.values())
                out.truncated = True
                continue
            bucket = out.terms.setdefault((g1 + g2, md), {})
            if m1 == 0:
                c1 = b1.get((), 0.0)
                for k2, c2 in b2.items():
                    bucket[k2] = bucket.get(k2, 0.0) + c1 * c2
                continue
            for k1, c1 in b1.items():
                for k2, c2 in b2.items():
                    key, sign = _merge_key(k1, k2)
                    if key is None:
                        continue
                    bucket[key] = bucket.get(key, 0.0) + sign * c1 * c2
    out.dropped += f.dropped * g.mass() + g.dropped * f.mass()
    out.truncated = out.truncated or f.truncated or g.truncated
    return out._cleanup()


def _series_weight(ctx: AlgebraContext, p: GrassmannPolynomial) -> int:
    """Minimal grade+positive-degree weight over terms (>=1 for series steps)."""
    w = None
    for (g, m) in p.terms:
        ww = g + (1 if m > 0 else 0)
        w = ww if w is None else min(w, ww)
    return 0 if w is None else w


def _series_limit(ctx: AlgebraContext) -> int:
    # every series factor carries grade + 1_{degree>0} >= 1, so surviving
    # products have at most grade_cap + min(degree_cap, n_gen) factors
    deg = ctx.n_gen if ctx.degree_cap is None else min(ctx.degree_cap, ctx.n_gen)
    return (ctx.grade_cap or 0) + deg + 1


def exp_poly(f: GrassmannPolynomial) -> GrassmannPolynomial:
    """exp(f) = e^{f0} sum_n (f - f0)^n / n! with f0 the grade-0 scalar part.

    The series terminates by nilpotency (grade-carrying constants die at the
    grade cap).  In non-exact contexts it may stop earlier once the running
    term's mass falls below series_tol; the rigorous tail bound
    mass^{n+1}/(n+1)! * e^{mass} is charged to `dropped`.
    """
    ctx = f.ctx
    f0 = f.const_part(grade=0) if ctx.grade_cap is not None else f.const_part()
    delta = f - f0
    if _series_weight(ctx, delta) < 1 and delta.n_terms:
        raise ContractError("exp series requires no grade-0 constant remainder")
    acc = GrassmannPolynomial.const(ctx, 1.0)
    power = GrassmannPolynomial.const(ctx, 1.0)
    dmass = delta.mass()
    limit = _series_limit(ctx)
    for n in range(1, limit + 1):
        power = multiply(power, delta).scale(1.0 / n)
        if not power.terms:
            break
        acc = acc + power
        if not ctx.exact and power.mass() < ctx.series_tol:
            tail = dmass ** (n + 1) / math.factorial(n + 1) * math.exp(dmass)
            acc.dropped += tail
            break
    return acc.scale(cmath.exp(f0))


def log_poly(f: GrassmannPolynomial) -> GrassmannPolynomial:
    """log(f) = log f0 + sum_n ((-1)^{n-1}/n) ((f-f0)/f0)^n, principal branch."""
    ctx = f.ctx
    f0 = f.const_part(grade=0) if ctx.grade_cap is not None else f.const_part()
    f0 = complex(f0)
    if f0.real <= 0.0 and abs(f0.imag) == 0.0:
        raise ValueError("log_poly: constant part on the branch cut (Re<=0, Im=0)")
    ratio = (f - f0).scale(1.0 / f0)
    if _series_weight(ctx, ratio) < 1 and ratio.n_terms:
        raise ContractError("log series requires no grade-0 constant remainder")
    acc = GrassmannPolynomial.const(ctx, cmath.log(f0))
    power = GrassmannPolynomial.const(ctx, 1.0)
    rmass = ratio.mass()
    limit = _series_limit(ctx)
    for n in range(1, limit + 1):
        power = multiply(power, ratio)
        if not power.terms:
            break
        acc = acc + power.scale((-1.0) ** (n - 1) / n)
        if not ctx.exact and power.mass() / (n + 1) < ctx.series_tol and rmass < 1.0:
            acc.dropped += rmass ** (n + 1) / ((n + 1) * (1.0 - rmass))
            break
    return acc


# -- Gaussian integration ------------------------------------------------


def _det(rows: list[list[complex]]) -> complex:
    n = len(rows)
    if n == 0:
        return 1.0
    if n == 1:
        return rows[0][0]
    if n == 2:
        return rows[0][0] * rows[1][1] - rows[0][1] * rows[1][0]
    if n == 3:
        a, b, c = rows[0]
        d, e, ff = rows[1]
        g, hh, i = rows[2]
        return a * (e * i - ff * hh) - b * (d * i - ff * g) + c * (d * hh - e * g)
    return complex(np.linalg.det(np.array(rows, dtype=complex)))


def monomial_gaussian(key: tuple[int, ...], cmat: np.ndarray) -> complex:
    """Full Gaussian integral of psi_{key} (key strictly increasing).

    Charge-sort the monomial (conjugate fields to the front, stable), then
    contract as det(C(bar_i, plain_j)); the stable partition contributes the
    crossing parity and reversing the plain block contributes (-1)^{p(p-1)/2}.
    """
    bars = []
    plains = []
    crossings = 0
    for gid in key:
        if gid % 2 == 0:
            crossings += len(plains)
            bars.append(gid // 2)
        else:
            plains.append(gid // 2)
    p = len(bars)
    if p != len(plains):
        return 0.0
    if p == 0:
        return 1.0
    sign = -1.0 if (crossings + p * (p - 1) // 2) % 2 else 1.0
    rows = [[cmat[i, j] for j in plains] for i in bars]
    return sign * _det(rows)


def gaussian_integral(f: GrassmannPolynomial, cmat: np.ndarray):
    """Integrate out every generator: sum of coefficient * monomial integral.

    Returns a complex number for ungraded contexts, else {grade: value}.
    """
    vals: dict[int, complex] = {}
    for (g, m), b in f.terms.items():
        for k, c in b.items():
            v = monomial_gaussian(k, cmat)
            if v != 0.0:
                vals[g] = vals.get(g, 0.0) + c * v
    if f.ctx.grade_cap is None:
        return vals.get(0, 0.0) + sum(v for g, v in vals.items() if g != 0)
    return vals


def free_integrate(f: GrassmannPolynomial, cmat: np.ndarray) -> GrassmannPolynomial:
    """F(psi) = integral of f(psi + psi^1) d mu_C(psi^1).

    Per monomial, sum over balanced subsets of its conjugate/plain positions:
    the integrated positions K contract to a full Gaussian integral of the
    subtuple (a determinant), the external positions E keep their relative
    order; the interleaving sign is the parity of pairs (i in K) < (j in E).
    """
    ctx = f.ctx
    out = GrassmannPolynomial(ctx)
    tol = ctx.prune_tol
    for (g, m), b in f.terms.items():
        bucket_cache: dict[int, dict] = {}
        for key, c in b.items():
            if tol > 0.0 and abs(c) <= tol:
                out.dropped += abs(c)
                continue
            barpos = [i for i, gid in enumerate(key) if gid % 2 == 0]
            plainpos = [i for i, gid in enumerate(key) if gid % 2 == 1]
            for j in range(0, min(len(barpos), len(plainpos)) + 1):
                for S in itertools.combinations(barpos, j):
                    for T in itertools.combinations(plainpos, j):
                        kpos = sorted(S + T)
                        subkey = tuple(key[i] for i in kpos)
                        val = monomial_gaussian(subkey, cmat)
                        if val == 0.0:
                            continue
                        inside = 0
                        crossings = 0
                        kset = set(kpos)
                        for i in range(m):
                            if i in kset:
                                inside += 1
                            else:
                                crossings += inside
                        sign = -1.0 if crossings % 2 else 1.0
                        ekey = tuple(key[i] for i in range(m) if i not in kset)
                        md = len(ekey)
                        bucket = bucket_cache.get(md)
                        if bucket is None:
                            bucket = out.terms.setdefault((g, md), {})
                            bucket_cache[md] = bucket
                        bucket[ekey] = bucket.get(ekey, 0.0) + sign * c * val
    out.dropped += f.dropped
    out.truncated = f.truncated
    return out._cleanup()


def left_derivative(f: GrassmannPolynomial, gid: int) -> GrassmannPolynomial:
    """Left derivative d/d psi_{gid}: remove the generator after moving it to
    the front, so a term at position i picks up (-1)^i."""
    out = GrassmannPolynomial(f.ctx)
    for (g, m), b in f.terms.items():
        if m == 0:
            continue
        for key, c in b.items():
            try:
                i = key.index(gid)
            except ValueError:
                continue
            sign = -1.0 if i % 2 else 1.0
            nk = key[:i] + key[i + 1:]
            bucket = out.terms.setdefault((g, m - 1), {})
            bucket[nk] = bucket.get(nk, 0.0) + sign * c
    return out._cleanup()


def poly_from_raw_kernel(ctx: AlgebraContext, raw: dict, h: float,
                         grade: int = 0) -> GrassmannPolynomial:
    """Build sum_m (1/h)^m sum_X fhat_m(X) psi_X from a raw (not necessarily
    antisymmetric) kernel {signed-id tuple: value}; canonicalization performs
    the antisymmetrization."""
    p = GrassmannPolynomial(ctx)
    for key, val in raw.items():
        p.add_term(val / h ** len(key), key, grade)
    return p._cleanup()


# -- norms ----------------------------------------------------------------


def poly_l1(f: GrassmannPolynomial, m: int, grade: int | None = None) -> float:
    return f.l1(m, grade)


def _weight_table(w: float, rexp: float, dmats: np.ndarray) -> np.ndarray:
    """exp(sum_j (w * d_j)^rexp) between unsigned indices."""
    return np.exp(np.sum((w * dmats) ** rexp, axis=0))


def poly_norm(f: GrassmannPolynomial, m: int, which: int, w: float,
              rexp: float, dmats: np.ndarray, h: float,
              grade: int | None = None) -> float:
    """The scale-weighted kernel norms.

    which=0:  sup_X (1/h)^{m-1} sum_Y e^{sum_j (w d_j(X,Y_1))^rexp} |f_m(X,Y)|
    which=1:  additionally a factor d_{j'}(X,Y_q), sup over j' and q.

    Both reduce to sums over the stored increasing tuples: orderings of a
    support set contribute equal |kernel| values, leaving the combinatorial
    prefactors h/(m(m-1)) (and h/(m(m-1)(m-2)) for the q>=2 branch).
    """
    if m < 2:
        raise ValueError("weighted norms are defined for degree >= 2")
    agg: dict[tuple[int, ...], complex] = {}
    for (g, mm), b in f.terms.items():
        if mm != m or (grade is not None and g != grade):
            continue
        for k, c in b.items():
            agg[k] = agg.get(k, 0.0) + c
    if not agg:
        return 0.0
    wt = _weight_table(w, rexp, dmats)
    n_gen = f.ctx.n_gen
    if which == 0:
        acc = np.zeros(n_gen)
        for key, c in agg.items():
            a = abs(c)
            if a == 0.0:
                continue
            ids = [gid // 2 for gid in key]
            for i, gid in enumerate(key):
                xi = ids[i]
                s = 0.0
                for j2, z in enumerate(ids):
                    if j2 != i:
                        s += wt[xi, z]
                acc[gid] += a * s
        return float(acc.max()) * h / (m * (m - 1))
    if which != 1:
        raise ValueError("which must be 0 or 1")
    best = 0.0
    naxes = dmats.shape[0]
    for jp in range(naxes):
        dj = dmats[jp]
        acc1 = np.zeros(n_gen)
        acc2 = np.zeros(n_gen)
        for key, c in agg.items():
            a = abs(c)
            if a == 0.0:
                continue
            ids = [gid // 2 for gid in key]
            for i, gid in enumerate(key):
                xi = ids[i]
                se = sd = sed = 0.0
                for j2, z in enumerate(ids):
                    if j2 == i:
                        continue
                    e = wt[xi, z]
                    dv = dj[xi, z]
                    se += e
                    sd += dv
                    sed += e * dv
                acc1[gid] += a * sed
                if m >= 3:
                    acc2[gid] += a * (se * sd - sed)
        v1 = acc1.max() * h / (m * (m - 1))
        best = max(best, float(v1))
        if m >= 3:
            v2 = acc2.max() * h / (m * (m - 1) * (m - 2))
            best = max(best, float(v2))
    return best


def check_translation_property(f: GrassmannPolynomial, universe: IndexUniverse,
                               rtol: float = 1e-9) -> None:
    """Verify the antiperiodic time-translation property of all kernels:
    a one-step shift t -> t + 1/h maps each coefficient to itself times
    (-1)^{number of wrapped entries}.  One generating shift suffices.

    Raises ContractError on violation.
    """
    spec = universe.spec
    ntau = spec.n_tau
    scale = max(f.mass(), 1.0)
    # one time step maps gen id: t_idx -> t_idx+1 (mod ntau, sign per wrap)
    nmap = np.empty(universe.spec.n_gen, dtype=np.int64)
    wraps = np.zeros(universe.spec.n_gen, dtype=np.int64)
    for gid, g in enumerate(universe.gens):
        st = g.base
        t2 = st.t_idx + 1
        wrap = 1 if t2 >= ntau else 0
        nmap[gid] = universe.gen_id(st.rho, st.x, st.sigma, t2 % ntau, g.theta)
        wraps[gid] = wrap
    for (g, m), b in f.terms.items():
        for key, c in b.items():
            mapped = [int(nmap[gid]) for gid in key]
            nw = int(sum(wraps[gid] for gid in key))
            skey, sgn = _sort_key(mapped)
            if skey is None:
                raise ContractError("translation image collapses a tuple")
            c2 = f.terms.get((g, len(key)), {}).get(skey, 0.0)
            expected = ((-1) ** nw) * sgn * c2
            if abs(c - expected) > rtol * scale:
                raise ContractError(
                    "kernel violates the antiperiodic translation property")


def poly_diff(f1: GrassmannPolynomial, u1: IndexUniverse,
              f2: GrassmannPolynomial, u2: IndexUniverse,
              m: int, w: float, rexp: float,
              check: bool = True) -> float:
    """Windowed comparison of degree-m kernels at two temperatures.

    sup over X at time 0, weighted sum over tuples Y with times in the common
    window [-beta1/4, beta1/4); each raw index is wrapped into its own time
    circle with the antiperiodic sign before the kernel lookup.  The time
    distance here is the flat |x - y|, scaled by 1/pi inside the weight.
    """
    s1, s2 = u1.spec, u2.spec
    b1, b2 = s1.beta, s2.beta
    if abs(b1 - round(b1)) > 1e-12 or abs(b2 - round(b2)) > 1e-12 or b2 < b1:
        raise ContractError("poly_diff requires integer beta1 <= beta2")
    if s1.h != s2.h or round(s1.h) % 4 != 0 or s1.h != round(s1.h):
        raise ContractError("poly_diff requires a common h in 4N")
    if (s1.L, s1.d, s1.b) != (s2.L, s2.d, s2.b):
        raise ContractError("poly_diff requires matching spatial geometry")
    if check:
        check_translation_property(f1, u1)
        check_translation_property(f2, u2)
    h = int(s1.h)
    # window times as integer multiples of 1/h in [-beta1 h/4, beta1 h/4)
    q = int(round(b1 * h / 4))
    window = range(-q, q)
    spins = (0, 1)
    thetas = (CHARGE_BAR, -CHARGE_BAR)
    sites = list(s1.sites())
    ext = [(rho, x, sg, ti, th)
           for rho in range(1, s1.b + 1) for x in sites for sg in spins
           for ti in window for th in thetas]

    def lookup(f, u, spec, tup):
        ids = []
        ntot = 0
        for (rho, x, sg, ti, th) in tup:
            n, r = divmod(ti, int(round(spec.beta * spec.h)))
            ntot += n
            ids.append(u.gen_id(rho, x, sg, r, th))
        val = f.kernel_value(ids, spec.h)
        return ((-1) ** ntot) * val

    def hat_d(a, bnd):
        # flat time distance and chordal spatial distances, axis-indexed
        out = [abs(a[3] - bnd[3]) / h]
        for j in range(1, s1.d + 1):
            v = s1.dual_vector(j)
            out.append(_chordal_local(s1.L, float(np.dot(a[1], v)),
                                      float(np.dot(bnd[1], v))))
        return out

    best = 0.0
    x0 = [(rho, x, sg, 0, th) for rho in range(1, s1.b + 1)
          for x in sites for sg in spins for th in thetas]
    fact = math.factorial(m - 2) if m >= 2 else 1
    for X in x0:
        others = [Z for Z in ext if Z != X]
        total = 0.0
        for combo in itertools.combinations(others, m - 1):
            tup = (X,) + combo
            dv = lookup(f1, u1, s1, tup) - lookup(f2, u2, s2, tup)
            a = abs(dv)
            if a == 0.0:
                continue
            wsum = 0.0
            for Z in combo:
                ds = hat_d(X, Z)
                wsum += math.exp(sum((w * dd / math.pi) ** rexp for dd in ds))
            total += a * wsum * fact
        total *= (1.0 / h) ** (m - 1)
        best = max(best, total)
    return best


def _chordal_local(period: float, a: float, b: float) -> float:
    ang = math.pi * (a - b) / period
    return (period / math.pi) * abs(math.sin(ang))


# -- symmetry transforms --------------------------------------------------


@dataclass
class TransformRQ:
    """A generator relabeling S with phases Q: psi_X -> e^{iQ(S(X))} psi_{S(X)}.

    `qvals[x]` stores Q(S(x)) for each source generator id x, so applying the
    transform multiplies a term by exp(i * sum qvals) and relabels through
    `perm`.  `conj` marks maps used in the conjugated invariance statements.
    """

    name: str
    perm: np.ndarray
    qvals: np.ndarray
    conj: bool = False

    def __post_init__(self):
        n = len(self.perm)
        if sorted(self.perm.tolist()) != list(range(n)):
            raise ContractError(f"transform {self.name}: S is not a bijection")


def apply_transform(f: GrassmannPolynomial, T: TransformRQ) -> GrassmannPolynomial:
    out = GrassmannPolynomial(f.ctx)
    perm = T.perm
    qv = T.qvals
    for (g, m), b in f.terms.items():
        bucket = out.terms.setdefault((g, m), {})
        for key, c in b.items():
            mapped = [int(perm[gid]) for gid in key]
            phase = cmath.exp(1j * float(sum(qv[gid] for gid in key)))
            skey, sgn = _sort_key(mapped)
            if skey is None:
                continue
            cc = c.conjugate() if T.conj else c
            bucket[skey] = bucket.get(skey, 0.0) + sgn * phase * cc
    out.dropped = f.dropped
    out.truncated = f.truncated
    return out._cleanup()


def build_transforms(universe: IndexUniverse, shift_site=None,
                     shift_t_idx: int = 0) -> dict[str, TransformRQ]:
    """The standard symmetry family over one universe.

    Returns particle_hole, spin_phase, spin_flip, translation (by the given
    site vector and time step), hermitian_conj and half_filled_conj; rotation
    is included only for four-band models on a square torus.
    """
    spec = universe.spec
    n = spec.n_gen
    ntau = spec.n_tau
    if shift_site is None:
        shift_site = (0,) * spec.d
    out: dict[str, TransformRQ] = {}

    def build(name, smap, qfun, conj=False):
        perm = np.empty(n, dtype=np.int64)
        qv = np.empty(n, dtype=float)
        for gid, gsig in enumerate(universe.gens):
            st = gsig.base
            tgt = smap(st.rho, st.x, st.sigma, st.t_idx, gsig.theta)
            perm[gid] = universe.gen_id(*tgt)
            qv[gid] = qfun(*tgt)
        out[name] = TransformRQ(name, perm, qv, conj)

    build("particle_hole",
          lambda r, x, sg, t, th: (r, x, sg, t, th),
          lambda r, x, sg, t, th: (math.pi / 2) * th)
    build("spin_phase",
          lambda r, x, sg, t, th: (r, x, sg, t, th),
          lambda r, x, sg, t, th: math.pi if sg == 0 else 0.0)
    build("spin_flip",
          lambda r, x, sg, t, th: (r, x, 1 - sg, t, th),
          lambda r, x, sg, t, th: 0.0)

    # translation phase Q(S(X)) = pi * n_beta(src_time + s) depends on the
    # source index, so it is built directly rather than through `build`.
    zshift = tuple(shift_site)
    s_idx = shift_t_idx
    perm = np.empty(n, dtype=np.int64)
    qv = np.empty(n, dtype=float)
    for gid, gsig in enumerate(universe.gens):
        st = gsig.base
        x2 = wrap_site(spec.L, tuple(xi + zi for xi, zi in zip(st.x, zshift)))
        t2 = st.t_idx + s_idx
        nwrap = t2 // ntau
        perm[gid] = universe.gen_id(st.rho, x2, st.sigma, t2 % ntau, gsig.theta)
        qv[gid] = math.pi * nwrap
    out["translation"] = TransformRQ("translation", perm, qv, False)

    # the q-functions below receive the target tuple S(X), so the phase
    # formulas are evaluated literally at that tuple
    build("hermitian_conj",
          lambda r, x, sg, t, th: (r, x, sg, (-t) % ntau, -th),
          lambda r, x, sg, t, th: math.pi * ((1 if th == CHARGE_BAR else 0) +
                                             (1 if t != 0 else 0)),
          conj=True)
    build("half_filled_conj",
          lambda r, x, sg, t, th: (r, x, sg, t, -th),
          lambda r, x, sg, t, th: math.pi if r in (1, 4) else 0.0,
          conj=True)

    if spec.b == 4 and spec.d == 2 and spec.basis is None:
        evec = {1: (0, 0), 2: (1, 0), 3: (0, 1), 4: (1, 1)}

        def rot_s(r, x, sg, t, th):
            e = evec[r]
            return (r, wrap_site(spec.L, tuple(-xi - ei for xi, ei in zip(x, e))),
                    sg, t, th)

        build("rotation", rot_s, lambda r, x, sg, t, th: 0.0)
    return out


# -- momentum-space quadratic kernel --------------------------------------


class FlatExtension:
    """Continuous-variable extension of a discrete momentum kernel.

    Evaluates (2/h) sum_{x,t} e^{-i<k, r_L'(x)>} e^{-i w r_beta'(t)}
    (-1)^{n_beta(r_beta'(t))} J2((rho,x,up,t,-1),(eta,0,up,0,+1)) for any
    real (w, k); r' maps the second half of each circle to negative
    representatives.
    """

    def __init__(self, spec, table: np.ndarray, sites: np.ndarray):
        self.spec = spec
        self.table = table  # (b, nsites, ntau, b) complex
        ntau = spec.n_tau
        t = np.arange(ntau) / spec.h
        self.tprime = np.where(t < spec.beta / 2, t, t - spec.beta)
        self.tsign = np.where(t < spec.beta / 2, 1.0, -1.0)
        s = sites.astype(float)
        self.xprime = np.where(s < spec.L / 2, s, s - spec.L)

    def __call__(self, omega: float, k) -> np.ndarray:
        k = np.asarray(k, dtype=float)
        ph_x = np.exp(-1j * (self.xprime @ k))
        ph_t = np.exp(-1j * omega * self.tprime) * self.tsign
        ph = ph_x[:, None] * ph_t[None, :]
        return (2.0 / self.spec.h) * np.einsum(
            "rxte,xt->re", self.table, ph)


def _quadratic_table(f: GrassmannPolynomial, universe: IndexUniverse) -> np.ndarray:
    """T[rho-1, xflat, t, eta-1] = J2((rho,x,up,t,-1),(eta,0,up,0,+1))."""
    spec = universe.spec
    sites = list(spec.sites())
    ntau = spec.n_tau
    T = np.zeros((spec.b, len(sites), ntau, spec.b), dtype=complex)
    h = spec.h
    zero = sites[0]
    for e in range(spec.b):
        gbar = universe.gen_id(e + 1, zero, 0, 0, CHARGE_BAR)
        for r in range(spec.b):
            for ix, x in enumerate(sites):
                for t in range(ntau):
                    gp = universe.gen_id(r + 1, x, 0, t, -CHARGE_BAR)
                    T[r, ix, t, e] = f.kernel_value((gp, gbar), h)
    return T


def quadratic_momentum_kernel(f: GrassmannPolynomial, universe: IndexUniverse,
                              check: bool = True, rtol: float = 1e-9):
    """Fourier transform of the degree-2 kernel to momentum space.

    Returns (omegas, kvecs, W, flat) with W[iw, ik] a b x b matrix and
    `flat` the continuous extension evaluator.  With check=True the
    reduction preconditions (particle-hole, spin phase, spin flip and
    translation invariance) are verified first.
    """
    spec = universe.spec
    if check:
        checks = []
        base = build_transforms(universe, shift_t_idx=1)
        checks += [("particle_hole", base["particle_hole"]),
                   ("spin_phase", base["spin_phase"]),
                   ("spin_flip", base["spin_flip"]),
                   ("time translation", base["translation"])]
        for j in range(spec.d):
            step = tuple(1 if i == j else 0 for i in range(spec.d))
            checks.append((f"space translation {j + 1}",
                           build_transforms(universe, shift_site=step)["translation"]))
        scale = max(f.mass(), 1.0)
        for name, tmap in checks:
            g = apply_transform(f, tmap)
            if _poly_dist(f, g) > rtol * scale:
                raise ContractError(f"quadratic reduction requires {name} invariance")
    omegas = matsubara_frequencies(spec)
    kvecs = spatial_momenta(spec)
    sites = np.array(list(spec.sites()), dtype=float)
    T = _quadratic_table(f, universe)
    t = np.arange(spec.n_tau) / spec.h
    ph_t = np.exp(-1j * np.outer(omegas, t))            # (nw, ntau)
    ph_x = np.exp(-1j * (kvecs @ sites.T))              # (nk, nsites)
    W = (2.0 / spec.h) * np.einsum("wt,kx,rxte->wkre", ph_t, ph_x, T)
    return omegas, kvecs, W, FlatExtension(spec, T, sites)


def _poly_dist(f: GrassmannPolynomial, g: GrassmannPolynomial) -> float:
    keys = set(f.terms) | set(g.terms)
    tot = 0.0
    for gk in keys:
        bf = f.terms.get(gk, {})
        bg = g.terms.get(gk, {})
        for k in set(bf) | set(bg):
            tot = max(tot, abs(bf.get(k, 0.0) - bg.get(k, 0.0)))
    return tot


def reconstruct_quadratic(omegas: np.ndarray, kvecs: np.ndarray, W: np.ndarray,
                          universe: IndexUniverse,
                          ctx: AlgebraContext) -> GrassmannPolynomial:
    """Rebuild the degree-2 polynomial from its momentum kernel:

    (1/h^2) sum delta_{sigma tau} (1/(beta L^d)) sum_{(w,k)} e^{i<k,x-y>}
    e^{i w (s-t... )} W(w,k)(rho,eta) psi_{rho x sigma s} psibar_{eta y tau t}.
    """
    spec = universe.spec
    sites = np.array(list(spec.sites()), dtype=float)
    nsites = len(sites)
    ntau = spec.n_tau
    vol = spec.beta * spec.n_sites
    # G[r, e, dx, dt] for dt index 0..ntau-1 (true dt = idx/h), dx site index
    t = np.arange(ntau) / spec.h
    ph_t = np.exp(1j * np.outer(t, omegas))            # (ntau, nw)
    ph_x = np.exp(1j * (sites @ kvecs.T))              # (nsites, nk)
    G = np.einsum("tw,xk,wkre->rext", ph_t, ph_x, W) / vol
    p = GrassmannPolynomial(ctx)
    site_list = list(spec.sites())
    site_pos = {x: i for i, x in enumerate(site_list)}
    for r in range(spec.b):
        for e in range(spec.b):
            for sg in range(2):
                for ix, x in enumerate(site_list):
                    for iy, y in enumerate(site_list):
                        dx = site_pos[wrap_site(spec.L, tuple(
                            a - bb for a, bb in zip(x, y)))]
                        for s in range(ntau):
                            for tt in range(ntau):
                                dt = s - tt
                                sign = 1.0
                                if dt < 0:
                                    dt += ntau
                                    sign = -1.0
                                val = sign * G[r, e, dx, dt] / spec.h ** 2
                                if val == 0.0:
                                    continue
                                gp = universe.gen_id(r + 1, x, sg, s, -CHARGE_BAR)
                                gb = universe.gen_id(e + 1, y, sg, tt, CHARGE_BAR)
                                p.add_term(val, (gp, gb))
    return p._cleanup()
