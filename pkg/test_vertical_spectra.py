#!/usr/bin/env python3
"""Layered eigenproblem, its finite-element oracle and the per-mode elliptic solver"""

import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from src.models import ConfigurationError, IncompatibleDataError, build_layer_stack
from src.services.spectral_fields import eigenmode_field, norms
from src.services.vertical_spectra import (TransferState, WeakForm, dispersion_and_count, fem_oracle_eigs,
                                           fem_oracle_extrapolated, find_eigenpairs, lagrange_basis,
                                           propagate_layer, solve_mode_elliptic)
from src.services.verification import manufactured_pressure


@pytest.mark.parametrize('kappa', [0.0, 2.0 * np.pi])
def test_single_layer_matches_closed_form(single_stack, kappa):
    basis = find_eigenpairs(single_stack, kappa, 8)
    k = np.arange(1, 9)
    np.testing.assert_allclose(basis.eigenvalues, kappa ** 2 + (k * np.pi) ** 2, rtol=1e-10)


def test_single_layer_eigenfunctions_are_sines(single_stack):
    basis = find_eigenpairs(single_stack, 0.0, 4)
    z = np.linspace(-1.0, 0.0, 41)
    values = basis.evaluate(z)
    for k in range(1, 5):
        expected = np.sqrt(2.0) * np.sin(k * np.pi * (z + 1.0))
        np.testing.assert_allclose(values[:, k - 1], expected, atol=1e-10)


def test_propagate_oscillating_layer():
    omega = 2.5 * np.pi
    state = propagate_layer(TransferState.initial(omega ** 2), 1.0, 1.0, 0.0, omega ** 2)
    v, w = state.unscaled()
    assert v == pytest.approx(1.0 / omega, rel=1e-12)
    assert w == pytest.approx(0.0, abs=1e-12)
    # zeros at 0.4 and 0.8
    assert int(state.crossings) == 2


def test_propagate_decaying_layer_tracks_growth():
    state = propagate_layer(TransferState.initial(0.0), 1.0, 3.0, 1.0, 0.0)
    v, w = state.unscaled()
    assert v == pytest.approx(np.sinh(3.0), rel=1e-12)
    assert w == pytest.approx(np.cosh(3.0), rel=1e-12)
    assert int(state.crossings) == 0
    assert 0.5 <= max(abs(float(state.v)), abs(float(state.w))) <= 2.0


def test_count_matches_eigenvalues_below(single_stack):
    _, count = dispersion_and_count(single_stack, 0.0, (2.5 * np.pi) ** 2)
    assert count == 2
    _, counts = dispersion_and_count(single_stack, 0.0, np.array([0.5, 10.0, 50.0, 100.0]))
    assert list(counts) == [0, 1, 2, 3]


def test_dispersion_vanishes_at_eigenvalues(two_layer_stack):
    basis = find_eigenpairs(two_layer_stack, np.pi, 5)
    for lam in basis.eigenvalues:
        F, _ = dispersion_and_count(two_layer_stack, np.pi, lam)
        F_near, _ = dispersion_and_count(two_layer_stack, np.pi, lam * (1 + 1e-3))
        assert abs(F) < 1e-8 * max(abs(F_near), 1e-300)


def test_eigenvalues_ascending_and_bracketed(contrast_stack):
    basis = find_eigenpairs(contrast_stack, 2.0, 10)
    assert np.all(np.diff(basis.eigenvalues) > 0)
    for lam, (lo, hi) in zip(basis.eigenvalues, basis.brackets):
        assert lo <= lam <= hi


def test_eigenvalues_increase_with_wavenumber(contrast_stack):
    spectra = np.array([find_eigenpairs(contrast_stack, kappa, 8).eigenvalues
                        for kappa in (0.0, 1.0, np.pi, 2.0 * np.pi, 4.0 * np.pi)])
    assert np.all(np.diff(spectra, axis=0) > 0)


def test_w_norm_grows_like_eigenvalue(small_bases):
    for m in (0, 1):
        lam = small_bases.bases[m].eigenvalues
        ratios = []
        for k in range(3, small_bases.kmax + 1):
            field = eigenmode_field(small_bases, m, k)
            size = np.sqrt(small_bases.modal_inner(field.modal, field.modal))
            ratios.append(norms(field, small_bases)['W'] / size / lam[k - 1])
        assert max(ratios) / min(ratios) < 10.0


def test_orthonormal_and_flux_continuous(contrast_stack):
    basis = find_eigenpairs(contrast_stack, 0.0, 12)
    np.testing.assert_allclose(basis.gram(), np.eye(12), atol=1e-10)
    value_jump, flux_jump = basis.interface_residuals()
    assert value_jump <= 1e-8
    assert flux_jump <= 1e-6


def test_slope_ratio_across_interface():
    stack = build_layer_stack([0.0, -0.5, -1.0], [(1.0, 1.0, 1.0), (1.0, 1.0, 10.0)], 1.0)
    basis = find_eigenpairs(stack, 0.0, 6)
    zj = np.array([-0.5])
    above = basis.evaluate(zj, derivative=True, layer=np.array([0]))[0]
    below = basis.evaluate(zj, derivative=True, layer=np.array([1]))[0]
    keep = np.abs(below) > 1e-6
    np.testing.assert_allclose(above[keep] / below[keep], 10.0, rtol=1e-6)


def test_sign_convention_positive_slope_at_bottom(contrast_stack):
    basis = find_eigenpairs(contrast_stack, 1.0, 6)
    slopes = basis.evaluate(np.array([-1.0]), derivative=True)[0]
    assert np.all(slopes > 0)


def test_porosity_weighted_normalization():
    stack = build_layer_stack([0.0, -0.5, -1.0], [(1.0, 0.4, 1.0), (1.0, 0.8, 1.0)], 1.0)
    basis = find_eigenpairs(stack, 0.0, 6, weighting='porosity')
    np.testing.assert_allclose(basis.gram(weighted=True), np.eye(6), atol=1e-10)
    value_jump, flux_jump = basis.interface_residuals()
    assert value_jump <= 1e-8
    assert flux_jump <= 1e-6
    extrapolated, _, _ = fem_oracle_extrapolated(stack, 0.0, 6, mesh_density=400.0, weighting='porosity')
    np.testing.assert_allclose(extrapolated, basis.eigenvalues, rtol=1e-6)


def test_porosity_weighting_rescales_uniform_stack():
    stack = build_layer_stack([0.0, -1.0], [(1.0, 0.5, 2.0)], 1.0)
    plain = find_eigenpairs(stack, np.pi, 5)
    weighted = find_eigenpairs(stack, np.pi, 5, weighting='porosity')
    np.testing.assert_allclose(weighted.eigenvalues, plain.eigenvalues / 0.5, rtol=1e-12)
    np.testing.assert_allclose(weighted.gram(weighted=True), np.eye(5), atol=1e-10)


def test_oracle_agrees_after_extrapolation(two_layer_stack):
    basis = find_eigenpairs(two_layer_stack, 0.0, 6)
    extrapolated, coarse, fine = fem_oracle_extrapolated(two_layer_stack, 0.0, 6, mesh_density=400.0)
    np.testing.assert_allclose(extrapolated, basis.eigenvalues, rtol=1e-6)
    # P1 eigenvalues converge from above at second order
    assert np.all(coarse > fine)
    assert np.all(fine > basis.eigenvalues)
    orders = np.log2((coarse - basis.eigenvalues) / (fine - basis.eigenvalues))
    np.testing.assert_allclose(orders, 2.0, atol=0.2)


def test_oracle_rejects_unaligned_mesh(two_layer_stack):
    with pytest.raises(ConfigurationError, match='interfaces'):
        fem_oracle_eigs(two_layer_stack, 0.0, 3, nodes=np.linspace(-1.0, 0.0, 40))


def test_lagrange_basis_reproduces_cubics():
    nodes = np.array([-1.0, -0.2, 0.5, 1.0])
    x = np.linspace(-1.5, 1.5, 13)
    values, slopes = lagrange_basis(nodes, x)
    np.testing.assert_allclose(values @ (nodes ** 3 - 2 * nodes + 1), x ** 3 - 2 * x + 1, atol=1e-12)
    np.testing.assert_allclose(slopes @ (nodes ** 3 - 2 * nodes + 1), 3 * x ** 2 - 2, atol=1e-12)


def test_dirichlet_mode_solve(single_stack):
    kappa = 3.0
    weak = WeakForm(f0=lambda z, layer: (np.pi ** 2 + kappa ** 2) * np.sin(np.pi * z))
    profile = solve_mode_elliptic(single_stack, kappa, [1.0], weak, 'dirichlet', order=2, mesh_density=32.0)
    z = np.linspace(-1.0, 0.0, 101)
    np.testing.assert_allclose(profile.value(z), np.sin(np.pi * z), atol=2e-4)


def test_manufactured_neumann_converges(two_layer_stack):
    coefficients = [1.0, 5.0]
    kappa = 2.0 * np.pi
    exact, weak = manufactured_pressure(two_layer_stack, coefficients, kappa)
    z = np.linspace(-1.0, 0.0, 201)
    errors = []
    for density in (16.0, 32.0, 64.0):
        profile = solve_mode_elliptic(two_layer_stack, kappa, coefficients, weak, 'neumann', 2, density)
        errors.append(np.max(np.abs(profile.value(z) - exact(z))))
    assert errors[-1] < 1e-4
    assert np.log2(errors[-2] / errors[-1]) >= 2.0


def test_neumann_zero_mode_rejects_incompatible_data(two_layer_stack):
    weak = WeakForm(f0=lambda z, layer: np.ones_like(z))
    with pytest.raises(IncompatibleDataError):
        solve_mode_elliptic(two_layer_stack, 0.0, [1.0, 1.0], weak, 'neumann')


def test_neumann_zero_mode_returns_zero_mean(two_layer_stack):
    weak = WeakForm(f0=lambda z, layer: np.cos(np.pi * z))
    profile = solve_mode_elliptic(two_layer_stack, 0.0, [1.0, 2.0], weak, 'neumann', order=3)
    solver = profile.solver
    assert abs(float(np.sum(solver.weights * profile.value(solver.points)))) < 1e-10


if __name__ == "__main__":
    sys.exit(pytest.main([__file__]))
