#!/usr/bin/env python3
"""Pressure solve, Darcy velocity, skew advection and time stepping"""

import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from src.models import (BoundaryData, ConfigurationError, PhysicalConstants, SimulationError,
                        build_layer_stack)
from src.services.basis_cache import BasisCache
from src.services.darcy_transport import DarcyTransport, StepperConfig
from src.services.spectral_fields import SpectralField, build_spectral_basis, eigenmode_field, random_field
from src.services.verification import energy_residual_orders


def test_invalid_stepper_rejected(small_bases, pool):
    with pytest.raises(ConfigurationError):
        DarcyTransport(small_bases, PhysicalConstants(), BoundaryData(), StepperConfig(dt=-1.0), pool=pool)
    with pytest.raises(ConfigurationError):
        DarcyTransport(small_bases, PhysicalConstants(), BoundaryData(), StepperConfig(scheme='RK4'), pool=pool)


def test_horizontally_uniform_field_is_hydrostatic(small_bases, make_transport):
    transport = make_transport(small_bases)
    modal = np.zeros((5, 6), dtype=complex)
    modal[0, 0] = 1.0
    state = transport.make_state(modal)
    ux, uz = state.velocity
    assert np.max(np.abs(ux)) <= 1e-12
    assert np.max(np.abs(uz)) <= 1e-12
    # P' = -c phi balances buoyancy
    z = np.linspace(-0.95, -0.05, 7)
    phi = small_bases.bases[0].evaluate(z) @ modal[0].real
    dP = transport.pressure_profile(state.pressure, 0, z, derivative=True).real
    np.testing.assert_allclose(dP, -phi, atol=5e-3)


def test_pressure_and_velocity_per_wavenumber(small_bases, make_transport):
    transport = make_transport(small_bases)
    modal = eigenmode_field(small_bases, 1, 1).modal
    pressure = transport.solve_pressure(modal)
    assert len(pressure) == small_bases.grid.nx // 2 + 1
    ux, uz, ux_rows, uz_rows, _ = transport.darcy_velocity(modal, pressure)
    assert ux.shape == uz.shape == (small_bases.grid.nx, small_bases.grid.nz)
    assert np.isrealobj(ux) and np.isrealobj(uz)
    np.testing.assert_array_equal(uz_rows[0], 0.0)
    assert np.max(np.abs(uz_rows[1])) > 1e-3
    state = transport.make_state(modal)
    np.testing.assert_allclose(uz, state.velocity[1], atol=1e-14)


def test_hydrostatic_residual_of_pressure_solve(small_bases, make_transport):
    transport = make_transport(small_bases)
    modal = np.zeros((5, 6), dtype=complex)
    modal[0, :3] = [1.0, -0.5, 0.25]
    pressure = transport.solve_pressure(modal)
    scale = np.max(np.abs(small_bases.values[0] @ modal[0]))
    weak, pointwise = transport.hydrostatic_residual(modal, pressure)
    assert weak <= 1e-8
    assert pointwise <= 2e-2 * scale
    # no pressure leaves the whole buoyancy unbalanced
    weak, pointwise = transport.hydrostatic_residual(modal, [np.zeros_like(p) for p in pressure])
    assert weak > 1e-3
    assert pointwise == pytest.approx(scale, rel=1e-12)


def test_darcy_map_is_linear(small_bases, make_transport):
    transport = make_transport(small_bases)
    a = random_field(small_bases, 1, band=(2, 4)).modal
    b = random_field(small_bases, 2, band=(2, 4)).modal

    def velocity(modal):
        ux, uz, _, _, _ = transport.darcy_velocity(modal, transport.solve_pressure(modal))
        return ux, uz

    combined = velocity(2.0 * a - 0.5 * b)
    for got, ua, ub in zip(combined, velocity(a), velocity(b)):
        scale = np.max(np.abs(got))
        assert scale > 0
        np.testing.assert_allclose(got, 2.0 * ua - 0.5 * ub, atol=1e-12 * scale)


def test_tilted_mode_drives_flow(small_bases, make_transport):
    transport = make_transport(small_bases)
    state = transport.initial_state(eigenmode_field(small_bases, 1, 1))
    assert np.max(np.abs(state.velocity[1])) > 1e-3
    assert state.cfl > 0
    no_buoyancy = make_transport(small_bases, alpha=0.0).initial_state(eigenmode_field(small_bases, 1, 1))
    assert np.max(np.abs(no_buoyancy.velocity[1])) <= 1e-14


def test_advection_is_orthogonal_to_field(small_bases, make_transport):
    transport = make_transport(small_bases)
    state = transport.initial_state(random_field(small_bases, 7, band=(2, 4)))
    N = transport.advection_term(state.phi, state.velocity)
    scale = np.sqrt(transport.modal_inner(N, N) * transport.modal_inner(state.modal, state.modal))
    assert abs(transport.modal_inner(N, state.modal)) <= 1e-10 * scale


def test_pure_diffusion_decay_matches_scheme(small_bases, make_transport):
    lam = small_bases.bases[0].eigenvalues[0]
    dt = 1e-3
    z = dt * lam
    for scheme, factor in (('IMEX-CN', (1 - z / 2) / (1 + z / 2)), ('IMEX-Euler', 1 / (1 + z))):
        transport = make_transport(small_bases, dt=dt, scheme=scheme)
        state = transport.initial_state(eigenmode_field(small_bases, 0, 1))
        E0 = transport.energy(state.modal)
        for _ in range(5):
            state = transport.step(state)
        assert transport.energy(state.modal) == pytest.approx(E0 * factor ** 10, rel=1e-12)
        assert state.step == 5
        assert state.t == pytest.approx(5 * dt)


def test_initial_state_removes_lift(small_bases, make_transport):
    transport = make_transport(small_bases, C0=0.0, C1=1.0)
    total = np.broadcast_to(transport.lift_nodes, (8, small_bases.grid.nz)).copy()
    state = transport.initial_state(SpectralField(None, total))
    assert np.max(np.abs(state.modal)) <= 1e-12
    # conduction state: uniform upward flux, no flow
    assert np.max(np.abs(state.velocity[1])) <= 1e-12


def test_energy_residual_is_second_order(small_bases, pool):
    transport = DarcyTransport(small_bases, PhysicalConstants(), BoundaryData(), StepperConfig(dt=1.0), pool=pool)
    orders = energy_residual_orders(transport, seeds=(1, 2), levels=3)
    assert np.mean(orders) == pytest.approx(2.0, abs=0.4)


@pytest.mark.parametrize('scheme,expected,tolerance', [('IMEX-Euler', 1.0, 0.3), ('IMEX-CN', 2.0, 0.4)])
def test_time_step_self_convergence(small_bases, make_transport, scheme, expected, tolerance):
    T = 0.01
    initial = random_field(small_bases, 4, band=(2, 4))

    def final_modal(steps):
        transport = make_transport(small_bases, dt=T / steps, scheme=scheme)
        final, _ = transport.run(transport.initial_state(initial), T, cadence=10 ** 6)
        return final.modal

    reference = final_modal(32 * 64)
    errors = np.array([np.linalg.norm(final_modal(steps) - reference) for steps in (8, 16, 32)])
    orders = np.log2(errors[:-1] / errors[1:])
    assert np.mean(orders) == pytest.approx(expected, abs=tolerance)


def test_non_finite_step_raises_with_last_good_state(small_bases, make_transport, monkeypatch):
    transport = make_transport(small_bases)
    state = transport.initial_state(eigenmode_field(small_bases, 1, 1))
    monkeypatch.setattr(transport, '_advance', lambda s, dt: np.full_like(s.modal, np.nan))
    with pytest.raises(SimulationError) as excinfo:
        transport.step(state)
    assert excinfo.value.state is state


def test_adaptive_step_reduces_dt(small_bases, pool):
    stepper = StepperConfig(dt=10.0, adaptive=True, cfl_target=0.5)
    transport = DarcyTransport(small_bases, PhysicalConstants(), BoundaryData(), stepper, pool=pool)
    state = transport.initial_state(eigenmode_field(small_bases, 1, 1))
    new = transport.step(state)
    assert 'dt_reduced' in new.flags
    assert new.dt < 10.0
    assert transport.cfl_number(state, new.dt) == pytest.approx(0.5)


def test_run_lands_on_end_time(small_bases, make_transport):
    transport = make_transport(small_bases, dt=1e-3)
    state = transport.initial_state(random_field(small_bases, 2, band=(2, 3), amplitude=0.1))
    seen = []
    final, records = transport.run(state, 2.5e-3, cadence=2, on_record=seen.append)
    assert final.step == 3
    assert final.t == pytest.approx(2.5e-3, abs=1e-15)
    assert [r.t for r in records] == pytest.approx([0.0, 2e-3, 2.5e-3])
    assert len(seen) == len(records)


def test_run_rejects_end_before_start(small_bases, make_transport):
    transport = make_transport(small_bases)
    state = transport.initial_state(eigenmode_field(small_bases, 0, 1))
    with pytest.raises(ConfigurationError):
        transport.run(state, -1.0)


def test_layered_porosity_dissipates(pool):
    stack = build_layer_stack([0.0, -0.5, -1.0], [(1.0, 0.4, 1.0), (1.0, 0.8, 2.0)], 1.0)
    bases = build_spectral_basis(stack, 8, 5, pool=pool, cache=BasisCache())
    transport = DarcyTransport(bases, PhysicalConstants(alpha=0.0), BoundaryData(),
                               StepperConfig(dt=1e-3), pool=pool)
    state = transport.initial_state(random_field(bases, 5, band=(2, 4)))
    energies = [transport.energy(state.modal)]
    for _ in range(4):
        state = transport.step(state)
        energies.append(transport.energy(state.modal))
    assert all(b < a for a, b in zip(energies, energies[1:]))


if __name__ == "__main__":
    sys.exit(pytest.main([__file__]))
