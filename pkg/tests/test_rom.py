import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from modal_tune.eigen import solve_smallest
from modal_tune.rom import (ROM_CAP, RomAccuracyError, RomEvaluator, build_rom, rom_eigenpairs,
                            rom_eval)
from modal_tune.sensitivity import mode_derivatives


@pytest.fixture(scope="module")
def rom(arch):
    return build_rom(arch.system, arch.truth, 5)


def test_basis_is_orthonormal(rom):
    V = rom.basis
    np.testing.assert_allclose(V.T @ V, np.eye(rom.m), atol=1e-12)
    assert 20 <= rom.m <= 40


def test_exact_at_expansion_point(arch, rom):
    lam, u = rom_eigenpairs(rom, arch.truth)
    full = solve_smallest(arch.system, arch.truth, 5)
    np.testing.assert_allclose(lam, full.eigenvalues, rtol=1e-10)
    _, Mr = rom.matrices(arch.truth)
    np.testing.assert_allclose(u.T @ Mr @ u, np.eye(5), atol=1e-10)
    np.testing.assert_allclose(rom.solution.eigenvalues, full.eigenvalues, rtol=1e-12)


@settings(max_examples=20, deadline=None)
@given(u=st.tuples(*[st.floats(0, 1)] * 3))
def test_rayleigh_ritz_upper_bound(arch, rom, u):
    x = arch.system.space.from_unit(np.array(u))
    lam, _ = rom_eigenpairs(rom, x)
    full = solve_smallest(arch.system, x, 5).eigenvalues
    assert np.all(lam >= full * (1 - 1e-11))


def test_accuracy_decays_with_distance(arch, rom):
    errs = []
    for t in (0.0, 0.02, 0.1, 0.3):
        x = arch.truth * (1 + t * np.array([1.0, -0.5, 0.3]))
        lam, _ = rom_eigenpairs(rom, x)
        full = solve_smallest(arch.system, x, 5).eigenvalues
        errs.append(np.max(np.abs(lam - full) / full))
    assert errs[0] < 1e-10
    assert errs == sorted(errs)
    assert errs[1] < 1e-4


def test_evaluator_matches_full_rows(arch, rom):
    x = arch.truth * 1.01
    f_all, modes_all = rom_eval(rom, x)
    ev = RomEvaluator(rom, arch.target.sensor_dofs)
    f, modes = ev(x)
    np.testing.assert_array_equal(f, f_all)
    np.testing.assert_allclose(modes, modes_all[arch.target.sensor_dofs], rtol=1e-13, atol=1e-15)


def test_derivative_enrichment_makes_shape_gradients_exact(arch):
    x0 = np.array([6e9, 3e9, 2500.0])
    system = arch.system
    sol = solve_smallest(system, x0, 5)
    dv = mode_derivatives(system, sol)
    plain = build_rom(system, x0, 5)
    rich = build_rom(system, x0, 5, derivative_modes=5)
    assert plain.m < rich.m <= ROM_CAP
    h = 1e-6 * system.space.widths

    def rom_dv(r, j):
        xp, xm = x0.copy(), x0.copy()
        xp[j] += h[j]
        xm[j] -= h[j]
        up = r.basis @ _aligned(r, xp, sol)
        um = r.basis @ _aligned(r, xm, sol)
        return (up - um) / (2 * h[j])

    for j in range(3):
        exact = dv[j]
        e_rich = np.linalg.norm(rom_dv(rich, j) - exact) / np.linalg.norm(exact)
        e_plain = np.linalg.norm(rom_dv(plain, j) - exact) / np.linalg.norm(exact)
        assert e_rich < 1e-5
        assert e_rich < e_plain


def _aligned(r, x, ref):
    _, u = rom_eigenpairs(r, x)
    v = r.basis @ u
    return u * np.sign(np.einsum("ij,ij->j", v, ref.reduced_vectors))


def test_accuracy_error_when_m_max_too_small(arch):
    with pytest.raises(RomAccuracyError, match="m_max = 6"):
        build_rom(arch.system, arch.truth, 5, m_max=6, m_min=6)
