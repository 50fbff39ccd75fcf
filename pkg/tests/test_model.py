import math

import pytest
from hypothesis import given, settings, strategies as st

from fsihopf.model import (PhysicalInputs, Params, ValidationError, nondimensionalize, validate,
                           parse_config_text, format_config)


def test_all_ones_inputs_give_unit_params():
    p = nondimensionalize(PhysicalInputs(1, 1, 1, 1, 1, 1))
    assert (p.lam, p.omega_n_sq, p.varpi) == (1.0, 1.0, 1.0)


def test_worked_example():
    # lam = 2*3/6, omega^2 = 9*4/(2*6), varpi = 27/2
    p = nondimensionalize(PhysicalInputs(2, 3, 6, 4, 2, 1))
    assert p.lam == pytest.approx(1.0, rel=1e-15)
    assert p.omega_n_sq == pytest.approx(3.0, rel=1e-15)
    assert p.varpi == pytest.approx(13.5, rel=1e-15)


def test_exponents_by_dimensional_analysis():
    # each output is a monomial; recover its exponents by doubling one input at a time
    base = dict(stream_speed=1.3, body_diameter=0.7, kinematic_viscosity=0.9,
                spring_constant=2.1, body_mass=1.7, fluid_density=0.4)
    p0 = nondimensionalize(PhysicalInputs(**base))
    expected = {
        "stream_speed": (1, 0, 0), "body_diameter": (1, 2, 3), "kinematic_viscosity": (-1, -1, 0),
        "spring_constant": (0, 1, 0), "body_mass": (0, -1, -1), "fluid_density": (0, 0, 1),
    }
    for name, exps in expected.items():
        d = dict(base)
        d[name] *= 2.0
        p = nondimensionalize(PhysicalInputs(**d))
        got = tuple(round(math.log2(getattr(p, f) / getattr(p0, f))) for f in ("lam", "omega_n_sq", "varpi"))
        assert got == exps, name


def test_density_only_moves_varpi():
    a = nondimensionalize(PhysicalInputs(2, 3, 6, 4, 2, 1.0))
    b = nondimensionalize(PhysicalInputs(2, 3, 6, 4, 2, 1e-9))
    assert b.varpi == pytest.approx(13.5e-9)
    assert (a.lam, a.omega_n_sq) == (b.lam, b.omega_n_sq)


@pytest.mark.parametrize("field", ["stream_speed", "body_diameter", "kinematic_viscosity",
                                   "spring_constant", "body_mass", "fluid_density"])
def test_nonpositive_input_names_field(field):
    d = dict(stream_speed=1, body_diameter=1, kinematic_viscosity=1, spring_constant=1,
             body_mass=1, fluid_density=1)
    d[field] = 0.0
    with pytest.raises(ValidationError, match=field):
        nondimensionalize(PhysicalInputs(**d))


def test_validate_messages():
    validate(Params(lam=1, omega_n_sq=1, varpi=1, dim=2))
    with pytest.raises(ValidationError, match="omega_n_sq must be positive"):
        validate(Params(lam=1, omega_n_sq=0, varpi=1, dim=2))
    with pytest.raises(ValidationError, match="lambda must be nonnegative"):
        validate(Params(lam=-1, omega_n_sq=1, varpi=1, dim=2))
    with pytest.raises(ValidationError, match="varpi"):
        validate(Params(lam=1, omega_n_sq=1, varpi=0))
    validate(Params(lam=1, omega_n_sq=1, varpi=0), allow_zero_varpi=True)
    with pytest.raises(ValidationError, match="dim"):
        validate(Params(lam=1, omega_n_sq=1, varpi=1, dim=4))


pos = st.floats(min_value=1e-3, max_value=1e3)


@settings(max_examples=200, deadline=None)
@given(V=pos, L=pos, nu=pos, ell=pos, M=pos, rho=pos, a=pos, b=pos, c=pos)
def test_similarity_group_leaves_params_fixed(V, L, nu, ell, M, rho, a, b, c):
    p = nondimensionalize(PhysicalInputs(V, L, nu, ell, M, rho))
    # V -> aV, L -> bL, nu -> ab nu, M -> c b^3 M, rho -> c rho, ell -> a b^2 c ell
    q = nondimensionalize(PhysicalInputs(a * V, b * L, a * b * nu, a * b * b * c * ell, c * b ** 3 * M, c * rho))
    for f in ("lam", "omega_n_sq", "varpi"):
        assert getattr(q, f) == pytest.approx(getattr(p, f), rel=1e-12)


SCHEMA = {"params": {"lambda": ("float", 1.0), "dim": ("int", 2)},
          "mesh": {"box": ("floats", (-1.0, 1.0)), "outflow": ("str", "natural")}}


def test_config_roundtrip_and_defaults():
    cfg = parse_config_text("[params]\nlambda = 2.5  # comment\n[mesh]\nbox = -3, 4\n", SCHEMA)
    assert cfg["params"] == {"lambda": 2.5, "dim": 2}
    assert cfg["mesh"]["box"] == (-3.0, 4.0)
    again = parse_config_text(format_config(cfg), SCHEMA)
    assert again == cfg


def test_config_rejects_unknown_keys_and_sections():
    with pytest.raises(ValidationError, match="unknown key 'lamda'"):
        parse_config_text("[params]\nlamda = 1\n", SCHEMA)
    with pytest.raises(ValidationError, match="unknown section"):
        parse_config_text("[solver]\ntol = 1\n", SCHEMA)
    with pytest.raises(ValidationError, match="lambda"):
        parse_config_text("[params]\nlambda = fast\n", SCHEMA)
