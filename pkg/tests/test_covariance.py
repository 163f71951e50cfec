import csv
import math
import warnings

import numpy as np
import pytest

from grassmann_rg.algebra import AlgebraContext, GrassmannPolynomial, poly_norm, build_transforms
from grassmann_rg.covariance import (
    AntisymExtension,
    FlowDivergenceError,
    antisym_extend,
    closed_form_dense,
    covariance_norm,
    covariance_symmetry_check,
    export_blocks_csv,
    full_covariance,
    gram_bound_probe,
    gram_scaling_report,
    ir_slice,
    sliced_covariances,
    temperature_band_quantity,
    uv_slice,
)
from grassmann_rg.cutoff import ScaleParams, UVScaleWarning, chi_uv, scale_counts
from grassmann_rg.lattice import (
    IndexUniverse,
    LatticeSpec,
    index_distance_matrices,
    matsubara_frequencies,
)
from grassmann_rg.model import (
    CouplingParams,
    DispersionFn,
    HoppingParams,
    fock_mode_index,
    fock_operators,
    four_band,
)

T1 = HoppingParams(1.0, 1.0, 1.0, 1.0)
DISP = four_band(T1)


def quiet_counts(spec, params):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UVScaleWarning)
        return scale_counts(spec, params)


def desk_spec(beta=2.0, L=2, h=4.0):
    return LatticeSpec(d=2, L=L, b=4, beta=beta, h=h)


def zero_disp(b):
    return DispersionFn(lambda k: np.zeros((b, b)), b=b, E1=1.0, E2=1.0)


def chain_disp():
    # two-band chain, hermitian and periodic
    def fn(k):
        z = 1.0 + np.exp(-1j * k[0])
        return np.array([[0.0, z], [np.conj(z), 0.0]])

    return DispersionFn(fn, b=2, E1=2.0, E2=1.0)


# -- full covariance --------------------------------------------------------


def test_zero_dispersion_equal_time():
    spec = LatticeSpec(d=1, L=2, b=2, beta=1.0, h=4.0)
    C = full_covariance(spec, zero_disp(2))
    for rho in (1, 2):
        v = C.entry((rho, (0,), 0, 0), (rho, (0,), 0, 0))
        assert v == pytest.approx(0.5, abs=1e-13)


def test_spin_off_diagonal_vanishes():
    spec = desk_spec()
    C = full_covariance(spec, DISP)
    uni = IndexUniverse(spec)
    D = C.dense(uni)
    mask = uni.sigma[:, None] != uni.sigma[None, :]
    assert np.max(np.abs(D[mask])) == 0.0


def test_two_route_agreement_one_band():
    spec = LatticeSpec(d=1, L=2, b=1, beta=1.0, h=4.0)

    def fn(k):
        return np.array([[-2.0 * math.cos(k[0])]])

    disp = DispersionFn(fn, b=1, E1=2.0, E2=1.0)
    uni = IndexUniverse(spec)
    D1 = full_covariance(spec, disp).dense(uni)
    D2 = closed_form_dense(spec, disp, uni)
    assert np.max(np.abs(D1 - D2)) < 1e-9


def test_two_route_agreement_four_band():
    spec = desk_spec(beta=1.0)
    uni = IndexUniverse(spec)
    D1 = full_covariance(spec, DISP).dense(uni)
    D2 = closed_form_dense(spec, DISP, uni)
    assert np.max(np.abs(D1 - D2)) < 1e-9


def test_closed_form_large_beta_stable():
    spec = desk_spec(beta=8.0, L=2)
    uni = IndexUniverse(spec)
    D2 = closed_form_dense(spec, DISP, uni)
    assert np.all(np.isfinite(D2.real)) and np.all(np.isfinite(D2.imag))
    D1 = full_covariance(spec, DISP).dense(uni)
    assert np.max(np.abs(D1 - D2)) < 1e-9


def test_two_point_function_vs_fock_oracle():
    # time-ordered trace on the Fock space, evaluated by dense
    # eigendecomposition, against the frequency-sum entries
    spec = LatticeSpec(d=1, L=2, b=2, beta=1.0, h=4.0)
    disp = chain_disp()
    H0, _, _ = fock_operators(spec, disp, CouplingParams.uniform(2, 0.0))
    H = H0.toarray()
    lam, Q = np.linalg.eigh(H)
    from grassmann_rg.model import fock_annihilation

    n_modes = 2 * spec.b * spec.n_sites
    anns = [fock_annihilation(n_modes, m).toarray() for m in range(n_modes)]

    def ev(s):
        return (Q * np.exp(s * lam)) @ Q.conj().T

    Z = np.sum(np.exp(-spec.beta * lam))
    C = full_covariance(spec, disp)
    sigma = 0
    rng = np.random.default_rng(11)
    for _ in range(24):
        rho, eta = rng.integers(1, 3, size=2)
        xi, yi = rng.integers(0, 2, size=2)
        ti, si = rng.integers(0, spec.n_tau, size=2)
        x, y = ti / spec.h, si / spec.h
        m1 = fock_mode_index(spec, rho, (xi,), sigma)
        m2 = fock_mode_index(spec, eta, (yi,), sigma)
        astar = anns[m1].conj().T
        a = anns[m2]
        if x >= y:
            op = ev(x - spec.beta) @ astar @ ev(y - x) @ a @ ev(-y)
            val = np.trace(op) / Z
        else:
            op = ev(y - spec.beta) @ a @ ev(x - y) @ astar @ ev(-x)
            val = -np.trace(op) / Z
        eng = C.entry((rho, (xi,), sigma, ti), (eta, (yi,), sigma, si))
        assert abs(val - eng) < 1e-10


def test_time_antiperiodicity():
    # pushing the time difference across the boundary flips the sign:
    # K(dt - n_tau) = -K(dt) for positive dt
    spec = desk_spec()
    C = full_covariance(spec, DISP)
    ker = C.kernel()
    ntau = spec.n_tau
    for dt in range(1, ntau):
        lhs = ker[dt - 1]
        rhs = -ker[dt + ntau - 1]
        assert np.max(np.abs(lhs - rhs)) < 1e-12


# -- the six-member family --------------------------------------------------


def test_family_decomposition_and_identity_relation():
    p = ScaleParams(M=4.0)
    spec = desk_spec(beta=1.0)
    uni = IndexUniverse(spec)
    fam = sliced_covariances(spec, DISP, p)
    C = full_covariance(spec, DISP)
    resid = np.abs(fam["le0_plus"].dense(uni) + fam["gt0_plus"].dense(uni)
                   - C.dense(uni))
    assert resid.max() < 1e-12
    lhs = fam["gt0_plus_h"].dense(uni)
    rhs = fam["gt0_minus"].dense(uni) + fam["identity"].dense(uni)
    assert np.max(np.abs(lhs - rhs)) < 1e-12


def test_identity_member_is_kronecker():
    p = ScaleParams(M=4.0)
    spec = desk_spec(beta=1.0)
    uni = IndexUniverse(spec)
    eye = sliced_covariances(spec, DISP, p)["identity"].dense(uni)
    assert np.max(np.abs(eye - np.eye(len(uni.i0)))) < 1e-12


def test_grid_correction_term():
    # the h-grid member differs from the plain one by the diagonal
    # frequency sum over the low shell
    p = ScaleParams(M=4.0)
    spec = desk_spec(beta=1.0)
    fam = sliced_covariances(spec, DISP, p)
    om = matsubara_frequencies(spec)
    chi0 = np.asarray(chi_uv(0, om, spec, p))
    for dt_idx in range(spec.n_tau):
        expect = np.sum(np.exp(1j * om * dt_idx / spec.h) * chi0) / \
            (spec.beta * spec.h)
        X = (2, (1, 0), 1, dt_idx)
        Y = (2, (1, 0), 1, 0)
        got = fam["gt0_plus_h"].entry(X, Y) - fam["gt0_plus"].entry(X, Y)
        assert abs(got - expect) < 1e-12
    X = (1, (0, 0), 0, 0)
    Y = (2, (0, 0), 0, 0)
    assert abs(fam["gt0_plus_h"].entry(X, Y) - fam["gt0_plus"].entry(X, Y)) \
        < 1e-15


# -- UV slices --------------------------------------------------------------


def test_uv_slice_telescoping():
    p = ScaleParams(M=2.0)
    spec = desk_spec(beta=1.0, h=64.0)
    nh, _ = quiet_counts(spec, p)
    assert nh >= 3
    fam = sliced_covariances(spec, DISP, p)
    tot = sum(uv_slice(l, +1, spec, DISP, p).blocks for l in range(1, nh + 1))
    assert np.max(np.abs(tot - fam["gt0_plus"].blocks)) < 1e-11


def test_uv_decay_plateau():
    # the scaled norms M^l * |C_l~| settle on a plateau
    p = ScaleParams(M=2.0)
    spec = desk_spec(beta=1.0, h=64.0)
    uni = IndexUniverse(spec)
    nh, _ = quiet_counts(spec, p)
    scaled = []
    for l in range(1, nh + 1):
        ext = antisym_extend(uv_slice(l, +1, spec, DISP, p))
        scaled.append(covariance_norm(ext, uni, 0, 0, p) * p.M ** l)
    assert all(v > 0 for v in scaled)
    assert max(scaled) / min(scaled) < 2.0


def test_uv_tadpole_sum_stable_in_h():
    p = ScaleParams(M=2.0)
    sums = {}
    for h in (16.0, 32.0, 64.0):
        spec = desk_spec(beta=1.0, h=h)
        nh, _ = quiet_counts(spec, p)
        tot = 0.0
        for l in range(1, nh + 1):
            ker0 = uv_slice(l, +1, spec, DISP, p).kernel()[spec.n_tau - 1, 0]
            tot += max(abs(ker0[r, r]) for r in range(4))
        sums[h] = tot
    vals = [sums[16.0], sums[32.0], sums[64.0]]
    assert all(0.25 < v < 0.55 for v in vals)
    assert abs(vals[2] - vals[1]) <= abs(vals[1] - vals[0])


def test_uv_slice_minus_kernel_differs():
    p = ScaleParams(M=4.0)
    spec = desk_spec(beta=1.0, h=16.0)
    cp = uv_slice(1, +1, spec, DISP, p)
    cm = uv_slice(1, -1, spec, DISP, p)
    assert np.max(np.abs(cp.blocks - cm.blocks)) > 1e-3
    with pytest.raises(ValueError):
        uv_slice(1, 0, spec, DISP, p)


# -- IR slices --------------------------------------------------------------


def test_ir_free_partition_matches_continuous_member():
    # summing the free energy shells reproduces the continuous-frequency
    # low member entrywise
    p = ScaleParams(M=4.0)
    spec = desk_spec(beta=2.0, L=4)
    uni = IndexUniverse(spec)
    _, nb = quiet_counts(spec, p)
    tot = sum(ir_slice(l, spec, DISP, T1, p).dense(uni)
              for l in range(nb, 1))
    ref = sliced_covariances(spec, DISP, p)["le0_infty"].dense(uni)
    assert np.max(np.abs(tot - ref)) < 1e-12


def test_full_reconstruction_converges_in_h():
    # IR shells + UV shells approach the full covariance as the grid is
    # refined; the defect halves with each doubling of h
    p = ScaleParams(M=4.0)
    defects = []
    for h in (8.0, 16.0, 32.0):
        spec = desk_spec(beta=1.0, L=2, h=h)
        uni = IndexUniverse(spec)
        nh, nb = quiet_counts(spec, p)
        acc = sum(ir_slice(l, spec, DISP, T1, p).dense(uni)
                  for l in range(nb, 1))
        acc += sum(uv_slice(l, +1, spec, DISP, p).dense(uni)
                   for l in range(1, nh + 1))
        D = full_covariance(spec, DISP).dense(uni)
        defects.append(np.max(np.abs(acc - D)))
    assert defects[1] / defects[0] < 0.7
    assert defects[2] / defects[1] < 0.7


def test_ir_inverse_bound_on_support():
    p = ScaleParams(M=4.0)
    spec = desk_spec(beta=8.0, L=4)
    _, nb = quiet_counts(spec, p)
    om = matsubara_frequencies(spec)
    from grassmann_rg.cutoff import chi_ir
    from grassmann_rg.lattice import spatial_momenta

    hit = 0
    for l in range(nb, 1):
        for w in om:
            for kv in spatial_momenta(spec):
                if float(chi_ir(l, w, kv, T1, spec, p)) == 0.0:
                    continue
                hit += 1
                inv = np.linalg.inv(1j * w * np.eye(4) - DISP(kv))
                assert np.linalg.norm(inv, 2) <= p.M ** -l + 1e-12
    assert hit > 0


def test_ir_selfenergy_insertion_and_neumann():
    p = ScaleParams(M=4.0)
    spec = desk_spec(beta=8.0, L=4)

    def small_sigma(om, kv):
        return 0.02 * np.eye(4)

    c_free = ir_slice(-2, spec, DISP, T1, p)
    c_pert = ir_slice(-2, spec, DISP, T1, p, selfenergy=small_sigma)
    diff = np.max(np.abs(c_free.blocks - c_pert.blocks))
    assert 0.0 < diff < 1.0

    def huge_sigma(om, kv):
        return 50.0 * np.eye(4)

    with pytest.raises(FlowDivergenceError) as exc:
        ir_slice(-2, spec, DISP, T1, p, selfenergy=huge_sigma)
    assert exc.value.norm >= 1.0
    assert len(exc.value.k) == 2


# -- antisymmetric extension and norms --------------------------------------


def test_antisym_extension_rules():
    spec = desk_spec(beta=1.0)
    C = full_covariance(spec, DISP)
    ext = antisym_extend(C)
    X = (1, (0, 1), 0, 2)
    Y = (3, (1, 0), 0, 0)
    assert ext.entry((X, 1), (Y, -1)) == pytest.approx(0.5 * C.entry(X, Y))
    assert ext.entry((X, -1), (Y, 1)) == pytest.approx(-0.5 * C.entry(Y, X))
    assert ext.entry((X, 1), (Y, 1)) == 0.0
    assert ext.entry((X, -1), (Y, -1)) == 0.0


def test_antisym_dense_is_antisymmetric():
    spec = LatticeSpec(d=1, L=2, b=2, beta=1.0, h=2.0)
    uni = IndexUniverse(spec)
    ext = antisym_extend(full_covariance(spec, chain_disp()))
    T = ext.dense(uni)
    assert np.max(np.abs(T + T.T)) < 1e-15
    # exhaustive agreement with the entry rule
    for g1 in range(len(uni.gens)):
        a = uni.describe(g1)
        Xa = (a.base.rho, a.base.x, a.base.sigma, a.base.t_idx)
        for g2 in range(len(uni.gens)):
            bidx = uni.describe(g2)
            Xb = (bidx.base.rho, bidx.base.x, bidx.base.sigma, bidx.base.t_idx)
            assert T[g1, g2] == pytest.approx(
                ext.entry((Xa, a.theta), (Xb, bidx.theta)), abs=1e-14)


def test_identity_norm_value():
    # one nonzero term of size 1/2 per fixed first index
    p = ScaleParams(M=4.0)
    spec = desk_spec(beta=1.0)
    uni = IndexUniverse(spec)
    fam = sliced_covariances(spec, DISP, p)
    ext = antisym_extend(fam["identity"])
    got = covariance_norm(ext, uni, 0, 0, p)
    assert got == pytest.approx(1.0 / (2.0 * spec.h), rel=1e-12)
    assert covariance_norm(ext, uni, 0, 1, p) == pytest.approx(0.0, abs=1e-15)


def test_norm_zero_and_weight_monotone():
    from grassmann_rg.covariance import Covariance

    spec = desk_spec(beta=1.0)
    uni = IndexUniverse(spec)
    ext = antisym_extend(full_covariance(spec, DISP))
    lo = covariance_norm(ext, uni, 0, 0, ScaleParams(M=4.0, c_w=0.05))
    hi = covariance_norm(ext, uni, 0, 0, ScaleParams(M=4.0, c_w=0.8))
    assert hi >= lo > 0
    zero = Covariance(
        spec, "zero",
        np.zeros((spec.n_tau, spec.n_sites, spec.b, spec.b), dtype=complex))
    assert covariance_norm(antisym_extend(zero), uni, 0, 0,
                           ScaleParams(M=4.0)) == 0.0


def test_norm_agrees_with_polynomial_route():
    # encode the extension as a degree-2 element and take the kernel
    # norm there; both routes must agree
    p = ScaleParams(M=4.0)
    spec = LatticeSpec(d=1, L=2, b=2, beta=1.0, h=2.0)
    uni = IndexUniverse(spec)
    ext = antisym_extend(full_covariance(spec, chain_disp()))
    T = ext.dense(uni)
    n = T.shape[0]
    ctx = AlgebraContext(n_i0=len(uni.i0), degree_cap=2)
    f = GrassmannPolynomial(ctx)
    for g1 in range(n):
        for g2 in range(g1 + 1, n):
            if T[g1, g2] != 0.0:
                f.add_term(2.0 * T[g1, g2] / spec.h ** 2, (g1, g2))
    dmats = index_distance_matrices(uni)
    a = poly_norm(f, 2, 0, p.w(0), p.r_exponent, dmats, spec.h)
    b = covariance_norm(ext, uni, 0, 0, p)
    assert a == pytest.approx(b, rel=1e-10)


# -- probes ------------------------------------------------------------------


def test_gram_probe_deterministic_and_bounded():
    spec = desk_spec(beta=2.0)
    C = full_covariance(spec, DISP)
    r1 = gram_bound_probe(C, n_max=5, trials=80, seed=5)
    r2 = gram_bound_probe(C, n_max=5, trials=80, seed=5)
    assert r1 == r2
    assert r1["per_n"][1] <= np.max(np.abs(C.dense(IndexUniverse(spec)))) + 1e-12
    vals = [v for n, v in r1["per_n"].items() if n >= 2]
    assert max(vals) / min(vals) < 10.0
    assert r1["D_et"] < 1.0
    with pytest.raises(ValueError):
        gram_bound_probe(C, n_max=9)


def test_gram_scaling_report_shape():
    p = ScaleParams(M=4.0)
    spec = desk_spec(beta=8.0, L=4)
    _, nb = quiet_counts(spec, p)
    slices = {}
    for l in range(nb, 1):
        cov = ir_slice(l, spec, DISP, T1, p)
        if np.max(np.abs(cov.blocks)) > 0:
            slices[l] = cov
    rep = gram_scaling_report(slices, a1=2.0, M=p.M, trials=40)
    assert set(rep["per_scale"]) == set(slices)
    for row in rep["per_scale"].values():
        assert np.isfinite(row["D_et"]) and np.isfinite(row["ratio"])
        assert row["D_et"] > 0


# -- symmetries --------------------------------------------------------------


def transforms_for(uni):
    return build_transforms(uni, shift_site=(1, 0), shift_t_idx=1)


def test_translation_symmetry_full():
    spec = desk_spec(beta=1.0)
    uni = IndexUniverse(spec)
    C = full_covariance(spec, DISP)
    tr = transforms_for(uni)["translation"]
    assert covariance_symmetry_check(C, tr, uni) < 1e-12


def test_plain_symmetries_on_ir_slice():
    p = ScaleParams(M=4.0)
    spec = desk_spec(beta=2.0, L=4)
    uni = IndexUniverse(spec)
    cov = ir_slice(-1, spec, DISP, T1, p)
    assert np.max(np.abs(cov.blocks)) > 0
    tf = build_transforms(uni, shift_site=(1, 1), shift_t_idx=2)
    for name in ("particle_hole", "spin_phase", "spin_flip", "translation",
                 "rotation"):
        assert covariance_symmetry_check(cov, tf[name], uni) < 1e-11, name


def test_conjugate_symmetries():
    p = ScaleParams(M=4.0)
    spec = desk_spec(beta=2.0, L=4)
    uni = IndexUniverse(spec)
    tf = transforms_for(uni)
    cov = ir_slice(-1, spec, DISP, T1, p)
    assert covariance_symmetry_check(cov, tf["hermitian_conj"], uni) < 1e-11
    assert covariance_symmetry_check(cov, tf["half_filled_conj"], uni) < 1e-11
    fam = sliced_covariances(spec, DISP, p)
    resid = covariance_symmetry_check(
        fam["gt0_plus"], tf["half_filled_conj"], uni, other=fam["gt0_minus"])
    assert resid < 1e-11
    resid = covariance_symmetry_check(
        fam["gt0_minus"], tf["half_filled_conj"], uni, other=fam["gt0_plus"])
    assert resid < 1e-11


def test_symmetry_residual_detects_breakage():
    spec = desk_spec(beta=1.0)
    uni = IndexUniverse(spec)
    C = full_covariance(spec, DISP)
    C.kernel()
    broken = C._kernel.copy()
    broken[0, 0, 0, 1] += 0.37
    from grassmann_rg.covariance import Covariance

    B = Covariance(spec, "broken", C.blocks)
    B._kernel = broken
    tr = transforms_for(uni)["translation"]
    assert covariance_symmetry_check(B, tr, uni) > 1e-3


# -- temperature dependence and export ---------------------------------------


def test_temperature_band():
    qs = {}
    for beta, L in ((2.0, 4), (4.0, 4), (8.0, 8)):
        spec = desk_spec(beta=beta, L=L)
        qs[beta] = temperature_band_quantity(spec, DISP) / beta
    vals = list(qs.values())
    assert max(vals) / min(vals) < 3.0


def test_export_blocks(tmp_path):
    spec = LatticeSpec(d=2, L=2, b=4, beta=1.0, h=2.0)
    C = full_covariance(spec, DISP)
    path = tmp_path / "blocks.csv"
    n = export_blocks_csv(path, C)
    assert n == spec.n_tau * spec.n_sites * spec.b ** 2
    with open(path) as fh:
        rows = list(csv.reader(fh))
    assert rows[0][:3] == ["omega", "k1", "k2"]
    om0, k10, k20, r, e, re, im = rows[1]
    wi = list(matsubara_frequencies(spec)).index(float(om0))
    assert complex(float(re), float(im)) == pytest.approx(
        complex(C.blocks[wi, 0, int(r) - 1, int(e) - 1]), abs=1e-15)
