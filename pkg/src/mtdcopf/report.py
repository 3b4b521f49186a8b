"""Serialization of strategy results: per-run reports and aggregate tables.

Per-(scenario, mode) runs serialize to JSON documents carrying enough
state to re-verify them later.  Four aggregate artifacts mirror the
published result tables: droop coefficients per scenario, final
objective values, final voltage deviations, and the per-DC-bus voltage
set points as plot-ready CSV.  All machine-readable outputs are
schema-versioned and byte-stable across reruns; volatile metadata
(timestamps, durations) lives in a sidecar file excluded from
determinism comparisons.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .case import NetworkCase, Scenario, serialize_scenario
from .strategy import Mode, StrategyReport, conservation_summary

SCHEMA_VERSION = 1

MODE_LABELS = {
    Mode.ACTIVE_POWER: "Active Power Control",
    Mode.ADAPTIVE_DROOP: "Adaptive Voltage Droop",
    Mode.PROPOSED_DROOP: "Proposed Voltage Droop",
}

MISSING = "-"


def _num(v):
    return repr(float(v))


def report_to_dict(report: StrategyReport, case: NetworkCase,
                   scenario: Scenario, case_path: str = "") -> dict:
    """JSON-ready document for one (scenario, mode) run."""
    stages = []
    for st in report.stages:
        lay = st.system.layout
        stages.append({
            "stage": st.stage,
            "objective_kind": st.objective_kind,
            "status": st.solution.status,
            "objective_value": st.solution.objective_value,
            "max_residual": st.solution.max_residual,
            "kkt_stationarity": st.solution.kkt_stationarity,
            "iterations": st.solution.iterations,
            "controls": [
                {"converter": s.converter, "mode": s.mode,
                 "p_ref": s.p_ref, "u_ref": s.u_ref, "k_droop": s.k_droop}
                for s in st.control_snapshot],
            "dc_voltages": st.dc_voltages(),
            "converter_powers": st.converter_powers(),
            "variables": {name: float(v)
                          for name, v in zip(lay.names, st.solution.x)},
            "conservation": (conservation_summary(st)
                             if st.converged else None),
        })
    return {
        "schema_version": SCHEMA_VERSION,
        "case": report.base_case,
        "case_path": case_path,
        "scenario": {
            "name": scenario.name,
            "generator_outages": sorted(scenario.generator_outages),
            "converter_outages": sorted(scenario.converter_outages),
        },
        "mode": report.mode,
        "fallback_triggered": report.fallback_triggered,
        "final_cost": report.final_cost,
        "final_vdev": report.final_vdev,
        "droop_gains": {str(k): v for k, v in report.droop_gains().items()},
        "stages": stages,
        "validation": report.validation,
    }


def dump_report(doc: dict) -> str:
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"


def report_filename(scenario_name: str, mode: str) -> str:
    safe = scenario_name.replace(" ", "_").replace("/", "_")
    return f"report_{safe}_{mode}.json"


# ---------------------------------------------------------------------------
# aggregate tables
# ---------------------------------------------------------------------------

@dataclass
class RunMatrix:
    """All (scenario, mode) reports of one solve invocation."""

    case: NetworkCase
    scenarios: list[Scenario]
    reports: dict[tuple[str, str], StrategyReport]   # (scenario, mode) ->
    failures: dict[tuple[str, str], str]

    def modes(self):
        seen = []
        for (_, mode) in self.reports:
            if mode not in seen:
                seen.append(mode)
        return sorted(seen, key=list(Mode.ALL).index)


def droop_table(matrix: RunMatrix) -> list[list[str]]:
    """Gain per converter per scenario for the droop-based modes."""
    rows = [["mode", "converter"] +
            [s.name for s in matrix.scenarios]]
    for mode in (Mode.PROPOSED_DROOP, Mode.ADAPTIVE_DROOP):
        if not any(m == mode for (_, m) in matrix.reports):
            continue
        for conv in matrix.case.converters:
            row = [mode, str(conv.id)]
            for scen in matrix.scenarios:
                rep = matrix.reports.get((scen.name, mode))
                if rep is None:
                    row.append(MISSING)
                    continue
                gains = rep.droop_gains()
                row.append(_num(gains[conv.id]) if conv.id in gains
                           else MISSING)
            rows.append(row)
    return rows


def objective_table(matrix: RunMatrix) -> list[list[str]]:
    rows = [["mode"] + [s.name for s in matrix.scenarios]]
    for mode in matrix.modes():
        row = [mode]
        for scen in matrix.scenarios:
            rep = matrix.reports.get((scen.name, mode))
            row.append(_num(rep.final_cost) if rep is not None else MISSING)
        rows.append(row)
    return rows


def vdev_table(matrix: RunMatrix) -> list[list[str]]:
    rows = [["mode"] + [s.name for s in matrix.scenarios]]
    for mode in matrix.modes():
        row = [mode]
        for scen in matrix.scenarios:
            rep = matrix.reports.get((scen.name, mode))
            row.append(_num(rep.final_vdev) if rep is not None else MISSING)
        rows.append(row)
    return rows


def dc_voltage_series(matrix: RunMatrix) -> list[list[str]]:
    """Plot-ready final DC voltage per (scenario, mode, dc bus)."""
    rows = [["scenario", "mode", "dc_bus", "u_dc"]]
    for scen in matrix.scenarios:
        for mode in matrix.modes():
            rep = matrix.reports.get((scen.name, mode))
            if rep is None:
                continue
            voltages = rep.final_stage.dc_voltages()
            for bus in matrix.case.dc_buses:
                val = voltages.get(bus.id)
                rows.append([scen.name, mode, str(bus.id),
                             _num(val) if val is not None else MISSING])
    return rows


def to_csv(rows: list[list[str]]) -> str:
    head = f"# mtdcopf-aggregate {SCHEMA_VERSION}\n"
    return head + "\n".join(",".join(r) for r in rows) + "\n"


def to_text_table(rows: list[list[str]], title: str) -> str:
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    out = [title, "-" * len(title)]
    for i, r in enumerate(rows):
        out.append("  ".join(c.ljust(w) for c, w in zip(r, widths)))
        if i == 0:
            out.append("  ".join("-" * w for w in widths))
    return "\n".join(out) + "\n"


AGGREGATES = {
    "droop_coefficients": droop_table,
    "objectives": objective_table,
    "voltage_deviation": vdev_table,
    "dc_voltages": dc_voltage_series,
}


def write_outputs(matrix: RunMatrix, out_dir, formats=("csv", "json"),
                  case_path: str = "") -> list[Path]:
    """Write per-run reports plus the four aggregate artifacts."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    scen_by_name = {s.name: s for s in matrix.scenarios}
    for (scen_name, mode), rep in sorted(matrix.reports.items()):
        doc = report_to_dict(rep, matrix.case, scen_by_name[scen_name],
                             case_path=case_path)
        path = out / report_filename(scen_name, mode)
        path.write_text(dump_report(doc))
        written.append(path)
    for name, builder in AGGREGATES.items():
        rows = builder(matrix)
        if "csv" in formats:
            path = out / f"{name}.csv"
            path.write_text(to_csv(rows))
            written.append(path)
        if "json" in formats:
            path = out / f"{name}.json"
            path.write_text(json.dumps(
                {"schema_version": SCHEMA_VERSION, "name": name,
                 "columns": rows[0], "rows": rows[1:]},
                sort_keys=True, indent=2) + "\n")
            written.append(path)
        if "table" in formats:
            path = out / f"{name}.txt"
            path.write_text(to_text_table(rows, name.replace("_", " ")))
            written.append(path)
    return written
