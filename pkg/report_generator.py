#!/usr/bin/env python3
"""
Report Generator for the band reinsurance solver

Writes the run artifacts and their Markdown summaries:
- value_function.csv, policy.json and residual_report.json from a solve
- convergence.csv from a refinement study
- simulation_report.json / .csv from a Monte Carlo run
- verification_report.json / .md from a verification run
- plot data CSVs comparing contract configurations

Every artifact carries the config hash and the tool version: JSON files
as top-level keys, CSV files as a leading '#' comment line.
"""

import json
import math
import os
from datetime import datetime
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from band_reinsurance_errors import ArtifactError
from band_solver import TOOL_VERSION, BandPolicy, GridSolution
from reinsurance_contracts import ReinsuranceVector
from surplus_simulator import SimulationResult


def to_jsonable(value: Any) -> Any:
    """numpy types, vectors and non-finite floats into plain JSON values"""
    if isinstance(value, dict):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return [to_jsonable(v) for v in value.tolist()]
    if isinstance(value, ReinsuranceVector):
        return value.to_dict()
    if isinstance(value, (np.bool_, bool)):
        return bool(value)
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating, float)):
        value = float(value)
        if math.isnan(value):
            return None
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return value
    return value


def read_csv_artifact(path) -> pd.DataFrame:
    """Read a CSV written by ReportGenerator (skips the header comment)"""
    if not os.path.exists(path):
        raise ArtifactError(f"artifact not found: {path}")
    return pd.read_csv(path, comment='#', float_precision='round_trip')


def read_json_artifact(path) -> Dict:
    if not os.path.exists(path):
        raise ArtifactError(f"artifact not found: {path}")
    with open(path, encoding='utf-8') as f:
        try:
            return json.load(f)
        except json.JSONDecodeError as e:
            raise ArtifactError(f"{path} is not valid JSON: {e}")


def load_policy(path) -> BandPolicy:
    return BandPolicy.from_dict(read_json_artifact(path))


class ReportGenerator:
    """Write solver, simulation and verification artifacts into one directory"""

    def __init__(self, output_dir: str = "outputs", config_hash: str = "", config_name: str = ""):
        self.output_dir = str(output_dir)
        self.config_hash = config_hash
        self.config_name = config_name
        self.timestamp = datetime.now()
        self.timestamp_str = self.timestamp.strftime("%Y-%m-%d %H:%M:%S")

        if not os.path.exists(self.output_dir):
            os.makedirs(self.output_dir)

    def path(self, name: str) -> str:
        return os.path.join(self.output_dir, name)

    def _stamp(self) -> Dict[str, str]:
        return {'config_hash': self.config_hash, 'tool_version': TOOL_VERSION}

    def _write_json(self, name: str, payload: Dict) -> str:
        filename = self.path(name)
        document = {**self._stamp(), **to_jsonable(payload)}
        with open(filename, 'w', encoding='utf-8', newline='\n') as f:
            json.dump(document, f, indent=2)
            f.write('\n')
        return filename

    def _write_csv(self, name: str, frame: pd.DataFrame) -> str:
        filename = self.path(name)
        with open(filename, 'w', encoding='utf-8', newline='\n') as f:
            f.write(f"# config_hash={self.config_hash} tool_version={TOOL_VERSION}\n")
            frame.to_csv(f, index=False, lineterminator='\n')
        return filename

    def _write_markdown(self, name: str, report_lines: List[str]) -> str:
        filename = self.path(name)
        with open(filename, 'w', encoding='utf-8', newline='\n') as f:
            f.write('\n'.join(report_lines) + '\n')
        return filename

    def _footer(self) -> List[str]:
        return [
            "",
            "---",
            f"*Config hash `{self.config_hash}`, tool version {TOOL_VERSION}. Generated on {self.timestamp_str}*",
        ]

    def generate_solve_reports(self, solution: GridSolution, model_label: str,
                               pool_description: str = "") -> Dict[str, str]:
        """All solve artifacts; returns their filenames"""
        reports = {
            'value_function': self._write_csv('value_function.csv', solution.to_frame()),
            'policy': self.generate_policy(solution.bands),
            'residual': self.generate_residual_report(solution),
        }
        reports['solve_summary'] = self.generate_solve_summary(solution, model_label, pool_description)
        return reports

    def generate_policy(self, policy: BandPolicy) -> str:
        policy.config_hash = self.config_hash
        return self._write_json('policy.json', policy.to_dict())

    def generate_residual_report(self, solution: GridSolution) -> str:
        report = dict(solution.residual_report)
        report['argmax_vectors'] = [v.label() if v is not None else None
                                    for v in report.get('argmax_vectors', [])]
        report['verified'] = solution.verified
        report['band_count'] = solution.band_count
        return self._write_json('residual_report.json', report)

    def generate_convergence(self, table: pd.DataFrame) -> str:
        frame = table.copy()
        frame['monotone'] = table.attrs.get('monotone')
        return self._write_csv('convergence.csv', frame)

    def generate_simulation_report(self, results: Sequence[SimulationResult],
                                   V_h: Optional[Sequence[float]] = None, settings: Optional[Dict] = None) -> Dict[str, str]:
        rows = []
        for k, result in enumerate(results):
            row = result.to_dict()
            if V_h is not None:
                row['V_h'] = float(V_h[k])
                row['gap_in_std_errors'] = (abs(row['mean_discounted_dividends'] - row['V_h']) / row['std_error']
                                            if row['std_error'] > 0 else None)
            rows.append(row)
        return {
            'json': self._write_json('simulation_report.json', {'settings': settings or {}, 'results': rows}),
            'csv': self._write_csv('simulation_report.csv', pd.DataFrame(rows)),
        }

    def generate_verification_report(self, checks: Dict[str, Dict]) -> Dict[str, str]:
        passed = all(c.get('passed', False) for c in checks.values())
        return {
            'json': self._write_json('verification_report.json', {'passed': passed, 'checks': checks}),
            'markdown': self.generate_verification_summary(checks),
        }

    def generate_plot_data(self, values: pd.DataFrame, params: pd.DataFrame) -> Dict[str, str]:
        return {
            'values': self._write_csv('plot_value_functions.csv', values),
            'params': self._write_csv('plot_strategies.csv', params),
        }

    def generate_solve_summary(self, solution: GridSolution, model_label: str, pool_description: str = "") -> str:
        """Markdown summary of one solve"""
        policy = solution.bands
        report = solution.residual_report
        boundary = report.get('boundary', {})
        bounds = report.get('bounds', {})

        report_lines = [
            f"# Band Reinsurance Solve Report: {self.config_name or model_label}",
            f"*Generated on {self.timestamp_str}*",
            "",
            f"**Model**: `{model_label}`",
            f"**Candidates**: {pool_description or 'n/a'}",
            "",
            "---",
            "",
            "## 🎯 Key Metrics",
            "",
            "| Metric | Value |",
            "|--------|-------|",
            f"| Grid step h | {solution.h:g} |",
            f"| x_max | {solution.K * solution.h:g} |",
            f"| First barrier a₁ | {solution.a1:.4f} |",
            f"| Bands | {solution.band_count} |",
            f"| V(0) | {solution.V.values[0]:.6g} |",
            f"| Max HJB residual | {report.get('max_abs_residual', float('nan')):.3e} |",
            f"| Residual tolerance | {report.get('tolerance', float('nan')):.3e} |",
            f"| Status | {'✅ Verified' if solution.verified else '🟡 Best effort'} |",
            "",
        ]

        if policy is not None:
            report_lines.extend([
                "## 📋 Band Partition",
                "",
                "| Region | Points / Intervals |",
                "|--------|--------------------|",
                f"| A (pay at premium rate) | {', '.join(f'{a:.4f}' for a in policy.levels)} |",
                f"| B (lump to anchor) | {'; '.join(f'({lo:.4f}, {hi})' for lo, hi in policy.b_intervals)} |",
                f"| C (accumulate) | {'; '.join(f'[{lo:.4f}, {hi:.4f})' for lo, hi in policy.c_intervals)} |",
                "",
                "### Contracts at the Barrier Levels",
                "",
                "| Level | Contract | Net premium |",
                "|-------|----------|-------------|",
            ])
            for i in policy.a_indices:
                vector = policy.vector_at(i)
                report_lines.append(f"| {i * policy.h:.4f} | {vector.label()} | {policy.point_p_net()[i]:.4f} |")
            report_lines.append("")

        report_lines.extend([
            "## 🔍 Checks",
            "",
            "| Check | Result | Detail |",
            "|-------|--------|--------|",
            f"| HJB residual | {_mark(report.get('passed'))} | worst at x={report.get('worst_x', float('nan')):g} |",
            f"| Value bounds and slope | {_mark(bounds.get('passed'))} | min slope {bounds.get('min_slope', float('nan')):.6f} |",
            f"| Boundary V(0) | {_mark(boundary.get('passed'))} | V(0)/v0 {boundary.get('ratio', float('nan')):.4f} ({boundary.get('mode', 'n/a')}) |",
            f"| f' nonnegative | {_mark(report.get('fprime_nonnegative'))} | |",
        ])
        if report.get('violating_intervals'):
            report_lines.extend([
                "",
                "### ⚠️ Residual Violations",
                "",
                "| From | To |",
                "|------|----|",
            ])
            for lo, hi in report['violating_intervals']:
                report_lines.append(f"| {lo:.4f} | {hi:.4f} |")

        report_lines.extend(self._footer())
        return self._write_markdown('solve_report.md', report_lines)

    def generate_verification_summary(self, checks: Dict[str, Dict]) -> str:
        report_lines = [
            f"# Verification Report: {self.config_name}",
            f"*Generated on {self.timestamp_str}*",
            "",
            "## 🔍 Checks",
            "",
            "| Check | Result | Margin |",
            "|-------|--------|--------|",
        ]
        for name, check in checks.items():
            margin = check.get('margin')
            margin_text = f"{margin:.3e}" if isinstance(margin, (int, float)) else ""
            report_lines.append(f"| {name} | {_mark(check.get('passed'))} | {margin_text} |")

        failing = {name: check for name, check in checks.items() if not check.get('passed')}
        if failing:
            report_lines.extend(["", "## ❌ Failures", ""])
            for name, check in failing.items():
                report_lines.append(f"- **{name}**: {check.get('message', 'failed')}")

        report_lines.extend(self._footer())
        return self._write_markdown('verification_report.md', report_lines)

    def generate_index_report(self, reports: Dict[str, str]) -> str:
        """Index linking every artifact written in this run"""
        descriptions = {
            'value_function': '📈 Value function and contracts per grid point (CSV)',
            'policy': '📋 Band policy (JSON)',
            'residual': '🔍 HJB residual report (JSON)',
            'solve_summary': '📊 Solve summary',
            'convergence': '📉 Convergence study (CSV)',
            'simulation': '🎲 Monte Carlo report (JSON)',
            'simulation_csv': '🎲 Monte Carlo report (CSV)',
            'verification': '✅ Verification report (JSON)',
            'verification_summary': '✅ Verification summary',
            'plot_values': '📈 Value functions by configuration (CSV)',
            'plot_params': '📈 Reinsurance parameters by configuration (CSV)',
        }
        report_lines = [
            f"# Band Reinsurance Reports Index: {self.config_name}",
            f"*Generated on {self.timestamp_str}*",
            "",
            "## 📁 Available Reports",
            "",
        ]
        for report_type, filepath in reports.items():
            if report_type != 'index' and os.path.exists(filepath):
                report_lines.append(f"- [{descriptions.get(report_type, 'Report')}](./{os.path.basename(filepath)})")
        report_lines.extend(self._footer())
        return self._write_markdown('index.md', report_lines)


def _mark(passed) -> str:
    if passed is None:
        return "➖"
    return "✅" if passed else "❌"
