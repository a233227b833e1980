#!/usr/bin/env python3
"""Layer stack validation, material lookup and the conduction lift"""

import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from src.models import (BoundaryData, ConfigurationError, PhysicalConstants, build_layer_stack,
                        conduction_profile, material_at)


def test_positive_depths_are_negated():
    stack = build_layer_stack([0.0, 0.5, 1.0], [(1, 1, 1), (2, 0.5, 3)], 1.0)
    assert stack.interfaces == (0.0, -0.5, -1.0)
    assert stack.depth == 1.0
    np.testing.assert_allclose(stack.thickness, [0.5, 0.5])
    np.testing.assert_allclose(stack.bD, [1.0, 1.5])
    assert not stack.constant_porosity


def test_invalid_stack_reports_every_problem():
    with pytest.raises(ConfigurationError) as excinfo:
        build_layer_stack([0.0, -0.5, -0.4], [(0.0, 1.0, 1.0), (1.0, 1.5, 1.0)], -1.0)
    errors = excinfo.value.errors
    assert any('strictly decreasing' in e for e in errors)
    assert any('permeability' in e for e in errors)
    assert any('porosity' in e for e in errors)
    assert any('width' in e for e in errors)


def test_layer_count_mismatch():
    with pytest.raises(ConfigurationError, match='layer-count mismatch'):
        build_layer_stack([0.0, -0.5, -1.0], [(1, 1, 1)], 1.0)


def test_material_at_interface_takes_layer_below(two_layer_stack):
    assert material_at(two_layer_stack, -0.5) == (1.0, 1.0, 2.0)
    assert material_at(two_layer_stack, -0.25) == (1.0, 1.0, 1.0)
    assert material_at(two_layer_stack, 0.0) == (1.0, 1.0, 1.0)
    with pytest.raises(ConfigurationError):
        material_at(two_layer_stack, -1.5)


def test_stack_hash_tracks_material_changes(two_layer_stack):
    other = build_layer_stack([0.0, -0.5, -1.0], [(1.0, 1.0, 1.0), (1.0, 1.0, 2.5)], 1.0)
    assert two_layer_stack.stack_hash() == build_layer_stack(
        [0.0, -0.5, -1.0], [(1.0, 1.0, 1.0), (1.0, 1.0, 2.0)], 1.0).stack_hash()
    assert two_layer_stack.stack_hash() != other.stack_hash()


def test_two_layer_conduction_profile(two_layer_stack):
    lift = conduction_profile(two_layer_stack, BoundaryData(0.0, 1.0))
    assert lift.flux == pytest.approx(4.0 / 3.0, rel=1e-14)
    assert float(lift.value(-0.5)) == pytest.approx(2.0 / 3.0, abs=1e-14)
    assert float(lift.value(0.0)) == pytest.approx(0.0, abs=1e-15)
    assert float(lift.value(-1.0)) == pytest.approx(1.0, abs=1e-14)
    value_jump, flux_jump = lift.interface_jumps()
    assert value_jump <= 1e-12
    assert flux_jump <= 1e-12


def test_single_layer_lift_is_affine(single_stack):
    lift = conduction_profile(single_stack, BoundaryData(0.3, -1.2))
    z = np.linspace(-1.0, 0.0, 11)
    np.testing.assert_allclose(lift.value(z), 0.3 + (0.3 + 1.2) * z, atol=1e-14)


def test_lift_is_linear_in_boundary_data(contrast_stack):
    z = np.linspace(-1.0, 0.0, 23)
    a = conduction_profile(contrast_stack, BoundaryData(1.0, 0.0)).value(z)
    b = conduction_profile(contrast_stack, BoundaryData(0.0, 1.0)).value(z)
    ab = conduction_profile(contrast_stack, BoundaryData(2.0, -3.0)).value(z)
    np.testing.assert_allclose(ab, 2.0 * a - 3.0 * b, atol=1e-13)


def test_physical_constants_validation():
    assert PhysicalConstants().buoyancy == 1.0
    assert PhysicalConstants(alpha=0.0).validate() == []
    assert PhysicalConstants(mu=0.0).validate()
    assert BoundaryData(float('nan'), 0.0).validate()


if __name__ == "__main__":
    sys.exit(pytest.main([__file__]))
