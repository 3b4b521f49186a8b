import pytest

from mtdcopf.case import (CaseFormatError, CaseValidationError, Scenario,
                          ScenarioError, apply_scenario, parse_case,
                          parse_case_text, parse_scenario_text,
                          serialize_case, serialize_scenario)
from mtdcopf.data import case_path

MINIMAL = """\
mtdcopf-case 1
name minimal
units pu
s_nominal 100.0
v_dc_nominal 200.0

[ac_bus]
1 1.0 0.0 0.9 1.1 -0.5 0.5 0.0 0.0 0.0 0.0
2 1.0 0.0 0.9 1.1 -0.5 0.5 0.4 0.1 0.0 0.0

[generator]
1 0.0 1.0 -0.5 0.5 100.0 2000.0 0.0

[ac_branch]
1 2 0.01 0.1 0.02 1.0

[dc_bus]

[dc_branch]

[converter]
"""


def test_minimal_pure_ac_case():
    case = parse_case_text(MINIMAL)
    assert len(case.ac_buses) == 2
    assert len(case.converters) == 0
    assert case.s_nominal == 100.0


def test_dangling_dc_bus_reference():
    text = MINIMAL.replace("[dc_bus]\n", "[dc_bus]\n1 1.0 0.9 1.1\n")
    text = text.replace(
        "[converter]\n",
        "[converter]\n"
        "7 1 99 0.011 0.003 0.004 0.011 0.003 0.007 "
        "-1.0 1.0 1.2 droop 0.0 1.0 0.1 0.001 0.5\n")
    with pytest.raises(CaseValidationError) as err:
        parse_case_text(text)
    assert "converter 7" in str(err.value)
    assert "99" in str(err.value)


def test_loss_coefficients_round_trip():
    case = parse_case(case_path("three_terminal"))
    conv = case.converters[0]
    assert (conv.loss_rectifier.a, conv.loss_rectifier.b,
            conv.loss_rectifier.c) == (0.011, 0.003, 0.004)
    assert (conv.loss_inverter.a, conv.loss_inverter.b,
            conv.loss_inverter.c) == (0.011, 0.003, 0.007)
    again = parse_case_text(serialize_case(case))
    conv2 = again.converters[0]
    assert conv2.loss_rectifier == conv.loss_rectifier
    assert conv2.loss_inverter == conv.loss_inverter


@pytest.mark.parametrize("name", ["three_terminal", "nordic_like",
                                  "ac_small"])
def test_serialize_round_trip_byte_identical(name):
    case = parse_case(case_path(name))
    canon = serialize_case(case)
    case2 = parse_case_text(canon)
    assert case2 == case
    assert serialize_case(case2) == canon


def test_mixed_units_divide_by_base():
    text = MINIMAL.replace("units pu", "units mixed")
    text = text.replace("2 1.0 0.0 0.9 1.1 -0.5 0.5 0.4 0.1 0.0 0.0",
                        "2 1.0 0.0 0.9 1.1 -0.5 0.5 40.0 10.0 0.0 0.0")
    text = text.replace("1 0.0 1.0 -0.5 0.5 100.0 2000.0 0.0",
                        "1 0.0 100.0 -50.0 50.0 0.01 20.0 0.0")
    case = parse_case_text(text)
    bus2 = case.ac_buses[1]
    assert bus2.load_p == 40.0 / 100.0
    assert bus2.load_q == 10.0 / 100.0
    gen = case.generators[0]
    assert gen.p_max == 1.0
    # currency value of the cost curve is preserved by the rescaling
    assert gen.cost(1.0) == pytest.approx(0.01 * 100.0**2 + 20.0 * 100.0)


def test_parse_error_reports_line():
    bad = MINIMAL.replace("1 2 0.01 0.1 0.02 1.0", "1 2 0.01 nope 0.02 1.0")
    with pytest.raises(CaseFormatError) as err:
        parse_case_text(bad)
    assert err.value.line_no == 15


def test_header_required():
    with pytest.raises(CaseFormatError):
        parse_case_text("name broken\n")


def test_disconnected_ac_graph_rejected():
    text = MINIMAL.replace(
        "[generator]",
        "3 1.0 0.0 0.9 1.1 -0.5 0.5 0.0 0.0 0.0 0.0\n"
        "4 1.0 0.0 0.9 1.1 -0.5 0.5 0.1 0.0 0.0 0.0\n\n[generator]")
    text = text.replace("[ac_branch]\n1 2 0.01 0.1 0.02 1.0",
                        "[ac_branch]\n1 2 0.01 0.1 0.02 1.0\n"
                        "3 4 0.01 0.1 0.02 1.0")
    with pytest.raises(CaseValidationError) as err:
        parse_case_text(text)
    assert "not connected" in str(err.value)


def test_isolated_bus_is_warning_not_error():
    text = MINIMAL.replace(
        "[generator]",
        "3 1.0 0.0 0.9 1.1 -0.5 0.5 0.0 0.0 0.0 0.0\n\n[generator]")
    case = parse_case_text(text)
    warnings = case.validate()
    assert any("isolated" in w for w in warnings)


class TestApplyScenario:
    def test_empty_scenario_is_identity(self, nordic_like):
        out = apply_scenario(nordic_like, Scenario(name="noop"))
        assert out == nordic_like

    def test_generator_removal(self, nordic_like):
        n = len(nordic_like.generators)
        out = apply_scenario(
            nordic_like, Scenario(name="g", generator_outages=frozenset({2})))
        assert len(out.generators) == n - 1
        assert out.ac_buses == nordic_like.ac_buses
        assert out.converters == nordic_like.converters
        # 1-based indexing: generator 2 is gone, the others survive
        survivors = {g.bus for g in out.generators}
        assert survivors == {g.bus for i, g in
                             enumerate(nordic_like.generators, start=1)
                             if i != 2}

    def test_input_not_mutated_and_idempotent(self, nordic_like):
        scen = Scenario(name="c", converter_outages=frozenset({1}))
        before = serialize_case(nordic_like)
        once = apply_scenario(nordic_like, scen)
        assert serialize_case(nordic_like) == before
        twice = apply_scenario(once, Scenario(name="noop"))
        assert twice == once

    def test_unknown_references(self, nordic_like):
        with pytest.raises(ScenarioError):
            apply_scenario(nordic_like,
                           Scenario(name="x",
                                    generator_outages=frozenset({99})))
        with pytest.raises(ScenarioError):
            apply_scenario(nordic_like,
                           Scenario(name="x",
                                    converter_outages=frozenset({42})))

    def test_converter_removal_leaves_leaf_dc_bus_as_warning(self):
        # two dc buses joined by one line; the removed converter leaves a
        # converter-free leaf that must only warn
        text = MINIMAL.replace("[dc_bus]\n",
                               "[dc_bus]\n1 1.0 0.9 1.1\n2 1.0 0.9 1.1\n")
        text = text.replace("[dc_branch]\n", "[dc_branch]\n1 2 0.05\n")
        text = text.replace(
            "[converter]\n",
            "[converter]\n"
            "1 1 1 0.011 0.003 0.004 0.011 0.003 0.007 "
            "-1.0 1.0 1.2 droop 0.0 1.0 0.1 0.001 0.5\n"
            "2 2 2 0.011 0.003 0.004 0.011 0.003 0.007 "
            "-1.0 1.0 1.2 droop 0.0 1.0 0.1 0.001 0.5\n")
        case = parse_case_text(text)
        out = apply_scenario(case,
                             Scenario(name="c",
                                      converter_outages=frozenset({2})))
        assert len(out.dc_buses) == 2
        warnings = out.validate()
        assert any("leaf" in w and "2" in w for w in warnings)


def test_scenario_round_trip():
    scen = Scenario(name="mix", generator_outages=frozenset({2, 4}),
                    converter_outages=frozenset({1}))
    text = serialize_scenario(scen)
    again = parse_scenario_text(text)
    assert again == scen
    assert serialize_scenario(again) == text
