import math

import numpy as np
import pytest

from grassmann_rg.algebra import AlgebraContext, poly_l1
from grassmann_rg.lattice import (
    CHARGE_BAR,
    ConfigurationError,
    IndexUniverse,
    LatticeSpec,
)
from grassmann_rg.model import (
    CouplingParams,
    HoppingParams,
    dispersion_4band,
    dispersion_4band_derivative,
    f_t,
    fock_annihilation,
    fock_mode_index,
    fock_operators,
    four_band,
    interaction_kernels,
    occupation_numbers,
    one_particle_matrix,
    propagator_bound_check,
    spectrum_Xpq,
)

T1 = HoppingParams(1.0, 1.0, 1.0, 1.0)


def rand_hoppings(rng):
    vals = rng.uniform(0.2, 1.0, size=4)
    vals[rng.integers(0, 4)] = 1.0
    return HoppingParams(*vals)


def test_hopping_validation():
    with pytest.raises(ConfigurationError):
        HoppingParams(1.0, 0.0, 1.0, 1.0)
    assert T1.normalized and T1.max_amp == 1.0


def test_dispersion_zero_at_pi_pi():
    E = dispersion_4band(T1, (math.pi, math.pi))
    assert np.abs(E).max() < 1e-15


def test_dispersion_at_origin():
    E = dispersion_4band(T1, (0.0, 0.0))
    expected = np.array([
        [0, 2, 2, 0],
        [2, 0, 0, -2],
        [2, 0, 0, 2],
        [0, -2, 2, 0],
    ], dtype=complex)
    assert np.allclose(E, expected)
    M = E / 2.0
    assert np.allclose(M @ M, 2.0 * np.eye(4), atol=1e-14)
    ev = np.sort(np.linalg.eigvalsh(E))
    s = 2.0 * math.sqrt(2.0)
    assert np.allclose(ev, [-s, -s, s, s], atol=1e-12)


def test_dispersion_hermitian_periodic():
    rng = np.random.default_rng(0)
    disp = four_band(HoppingParams(*rng.uniform(0.3, 1.0, size=4)))
    rep = disp.validate(rng.uniform(-8, 8, size=(100, 2)))
    assert rep["ok"], rep


def test_spectrum_closed_form_matches_eigh():
    rng = np.random.default_rng(1)
    for _ in range(20):
        t = rand_hoppings(rng)
        for _ in range(50):
            k = rng.uniform(-math.pi, math.pi, size=2)
            ev = np.sort(np.linalg.eigvalsh(dispersion_4band(t, k)))
            assert np.abs(spectrum_Xpq(t, k) - ev).max() < 1e-10


def test_spectrum_degenerate_point():
    assert np.allclose(spectrum_Xpq(T1, (math.pi, math.pi)), np.zeros(4))


def test_f_t_values():
    assert f_t(T1) == pytest.approx(1.0)
    assert f_t(HoppingParams(1.0, 0.5, 1.0, 1.0)) == pytest.approx(0.25)


def test_f_t_lower_bounds_spectrum():
    rng = np.random.default_rng(2)
    for _ in range(10):
        t = rand_hoppings(rng)
        ft = f_t(t)
        for _ in range(100):
            k = rng.uniform(-math.pi, math.pi, size=2)
            floor = math.sqrt(ft) * math.sqrt(
                sum(1.0 + math.cos(kj) for kj in k))
            xs = np.abs(spectrum_Xpq(t, k))
            assert xs.min() >= floor - 1e-12


def test_propagator_bound_exact_point():
    rep = propagator_bound_check(T1, [(math.pi, (math.pi, math.pi))])
    assert rep["checked"] == 1 and rep["violations"] == 0
    assert rep["worst_at"]["norm"] == pytest.approx(1.0 / math.pi, rel=1e-12)
    assert rep["worst_margin"] == pytest.approx(0.0, abs=1e-12)


def test_propagator_bound_random_samples():
    rng = np.random.default_rng(3)
    samples = [(rng.uniform(-6, 6), rng.uniform(-math.pi, math.pi, size=2))
               for _ in range(1000)]
    rep = propagator_bound_check(T1, samples)
    assert rep["violations"] == 0
    assert rep["checked"] + len(rep["skipped"]) == 1000


def test_propagator_bound_singular_sample_skipped():
    rep = propagator_bound_check(T1, [(0.0, (math.pi, math.pi))])
    assert rep["checked"] == 0 and len(rep["skipped"]) == 1


def test_dispersion_derivative_bound_and_consistency():
    rng = np.random.default_rng(4)
    t = rand_hoppings(rng)
    for _ in range(50):
        k = rng.uniform(-math.pi, math.pi, size=2)
        for j in (1, 2):
            for n in range(4):
                D = dispersion_4band_derivative(t, k, j, n)
                assert np.linalg.norm(D, 2) <= 4.0 + 1e-12
            # first derivative against central differences
            eps = 1e-6
            kp, km = k.copy(), k.copy()
            kp[j - 1] += eps
            km[j - 1] -= eps
            fd = (dispersion_4band(t, kp) - dispersion_4band(t, km)) / (2 * eps)
            assert np.abs(fd - dispersion_4band_derivative(t, k, j, 1)).max() < 1e-8


# -- interaction polynomial ------------------------------------------------


def small_spec():
    return LatticeSpec(d=1, L=2, b=2, beta=1.0, h=2.0)


def test_interaction_zero_coupling():
    spec = small_spec()
    p = interaction_kernels(spec, CouplingParams.uniform(spec.b, 0.0), +1)
    assert p.n_terms == 0


def test_interaction_l1_bounds():
    spec = small_spec()
    umax = 0.7
    U = CouplingParams.uniform(spec.b, umax)
    cap = spec.b * spec.beta * spec.n_sites * umax
    for delta in (+1, -1):
        p = interaction_kernels(spec, U, delta)
        assert poly_l1(p, 2) <= cap + 1e-12
        assert poly_l1(p, 4) == pytest.approx(cap)
        assert p.degrees() == [2, 4]


def test_interaction_kernel_values_and_antisymmetry():
    spec = small_spec()
    u = 0.3 - 0.1j
    U = CouplingParams.uniform(spec.b, u)
    uni = IndexUniverse(spec)
    h = spec.h
    for delta in (+1, -1):
        p = interaction_kernels(uni, U, delta)
        b_up = uni.gen_id(1, (0,), 0, 0, CHARGE_BAR)
        p_up = uni.gen_id(1, (0,), 0, 0, -CHARGE_BAR)
        b_dn = uni.gen_id(1, (0,), 1, 0, CHARGE_BAR)
        p_dn = uni.gen_id(1, (0,), 1, 0, -CHARGE_BAR)
        quart = (b_up, b_dn, p_dn, p_up)
        assert p.kernel_value(quart, h) == pytest.approx(-h ** 3 * u / 24.0)
        # swapping any two arguments flips the kernel sign
        swapped = (b_dn, b_up, p_dn, p_up)
        assert p.kernel_value(swapped, h) == pytest.approx(h ** 3 * u / 24.0)
        assert p.kernel_value((b_up, p_up), h) == pytest.approx(
            delta * h * u / 4.0)
        assert p.kernel_value((p_up, b_up), h) == pytest.approx(
            -delta * h * u / 4.0)


def test_interaction_sign_difference_is_quadratic_shift():
    spec = small_spec()
    u = 0.5
    U = CouplingParams.uniform(spec.b, u)
    uni = IndexUniverse(spec)
    plus = interaction_kernels(uni, U, +1)
    minus = interaction_kernels(uni, U, -1)
    d = plus - minus
    assert d.degrees() == [2]
    for i0 in range(spec.n_i0):
        assert d.coeff((2 * i0, 2 * i0 + 1)) == pytest.approx(u / spec.h)


# -- Fock space ------------------------------------------------------------


def test_fock_anticommutation():
    n = 4
    dim = 1 << n
    ident = np.eye(dim)
    ops = [fock_annihilation(n, m).toarray() for m in range(n)]
    for m1 in range(n):
        for m2 in range(n):
            acc = ops[m1] @ ops[m2] + ops[m2] @ ops[m1]
            assert np.abs(acc).max() < 1e-14
            acc2 = ops[m1] @ ops[m2].conj().T + ops[m2].conj().T @ ops[m1]
            target = ident if m1 == m2 else 0.0
            assert np.abs(acc2 - target).max() < 1e-14


def fock_spec():
    return LatticeSpec(d=2, L=1, b=4, beta=1.0, h=4.0)


def test_fock_zero_coupling_and_hermiticity():
    spec = fock_spec()
    rng = np.random.default_rng(5)
    t = rand_hoppings(rng)
    H0, V, H = fock_operators(spec, t, CouplingParams.uniform(4, 0.0))
    assert abs(V).sum() == 0.0
    U = CouplingParams(tuple(rng.uniform(-1, 1, size=4)))
    H0, V, H = fock_operators(spec, t, U)
    assert np.abs((H - H.conj().T).toarray()).max() < 1e-12


def test_fock_dimension_cap():
    spec = LatticeSpec(d=2, L=2, b=4, beta=1.0, h=2.0)
    with pytest.raises(ConfigurationError):
        fock_operators(spec, T1, CouplingParams.uniform(4, 0.0))


def test_free_trace_product_formula():
    spec = fock_spec()
    rng = np.random.default_rng(6)
    t = rand_hoppings(rng)
    H0, _, _ = fock_operators(spec, t, CouplingParams.uniform(4, 0.0))
    w = np.linalg.eigvalsh(H0.toarray())
    beta = spec.beta
    trace = np.exp(-beta * w).sum()
    hblk = one_particle_matrix(spec, four_band(t))
    eps = np.linalg.eigvalsh(hblk)
    product = np.prod(1.0 + np.exp(-beta * eps)) ** 2  # spin squared
    assert trace == pytest.approx(product, rel=1e-10)


def test_fock_half_filling():
    spec = fock_spec()
    rng = np.random.default_rng(7)
    t = rand_hoppings(rng)
    U = CouplingParams(tuple(rng.uniform(-1.5, 1.5, size=4)))
    _, _, H = fock_operators(spec, t, U)
    w, Q = np.linalg.eigh(H.toarray())
    weights = np.exp(-spec.beta * (w - w.min()))
    Z = weights.sum()
    n_modes = 2 * spec.b * spec.n_sites
    for rho in range(1, 5):
        for sg in (0, 1):
            m = fock_mode_index(spec, rho, (0, 0), sg)
            nd = occupation_numbers(n_modes, m)
            filling = ((np.abs(Q) ** 2 * nd[:, None]).sum(axis=0) * weights).sum() / Z
            assert filling == pytest.approx(0.5, abs=1e-9)
