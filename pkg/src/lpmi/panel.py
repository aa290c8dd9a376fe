"""Patient-quarter panel construction from long-format records.

Raw rows arrive at (patient, quarter) granularity, possibly several per
quarter; row order within a quarter is temporal. Aggregation averages the
outcome values of a quarter, except that in the quarter containing the
patient's first acute event, values on or after the event row are dropped.
Quarters 1..baseline_quarters form the baseline period and collapse into a
single baseline outcome; later quarters become the followup panel with a
presence mask. Patients without a baseline outcome or without any observed
followup outcome are excluded and reported.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError

RESERVED_COLUMNS = ("patient_id", "quarter", "outcome", "event")


@dataclass
class RawRecord:
    """One long-format input row."""

    patient_id: str
    quarter: int
    outcome: float | None
    event: int
    covariates: dict[str, float]


@dataclass
class Record:
    """One followup patient-quarter after aggregation."""

    quarter_index: int  # 1-based followup quarter
    outcome: float | None
    event: int
    time_varying: dict[str, float]
    first_event_date_quarter: int | None = None  # raw quarter of first event

    @property
    def observed(self) -> bool:
        return self.outcome is not None


@dataclass
class Patient:
    patient_id: str
    baseline_covariates: dict[str, float]
    baseline_outcome: float
    followup: list[Record]

    @property
    def T(self) -> int:
        return len(self.followup)

    @property
    def n_observed(self) -> int:
        return sum(1 for r in self.followup if r.observed)


@dataclass
class PanelConfig:
    """Aggregation rules for build_panel."""

    baseline_quarters: int = 4
    time_varying: tuple[str, ...] = ()
    delimiter: str = ","


@dataclass
class Panel:
    patients: list[Patient]
    time_varying_names: tuple[str, ...]
    baseline_covariate_names: tuple[str, ...]
    baseline_quarters: int = 4
    exclusions: list[tuple[str, str]] = field(default_factory=list)

    @property
    def n(self) -> int:
        return len(self.patients)

    @property
    def n_quarters(self) -> int:
        return sum(p.T for p in self.patients)

    @property
    def n_observed(self) -> int:
        return sum(p.n_observed for p in self.patients)

    def observed_fractions(self) -> np.ndarray:
        return np.array([p.n_observed / p.T for p in self.patients])

    def to_records(self) -> list[RawRecord]:
        """Canonical long rows that rebuild this panel exactly.

        The baseline period is emitted as a single quarter-1 row holding the
        baseline average. A followup quarter with both an outcome and an
        event becomes an outcome row followed by an event row, so the
        outcome is unambiguously pre-event on re-aggregation.
        """
        rows: list[RawRecord] = []
        zeros_tv = {k: 0.0 for k in self.time_varying_names}
        for p in self.patients:
            base_cov = dict(p.baseline_covariates) | dict(zeros_tv)
            rows.append(RawRecord(p.patient_id, 1, p.baseline_outcome, 0, base_cov))
            fe = p.followup[0].first_event_date_quarter if p.followup else None
            if fe is not None and fe <= self.baseline_quarters:
                rows.append(RawRecord(p.patient_id, fe, None, 1, dict(base_cov)))
            for r in p.followup:
                cov = dict(p.baseline_covariates) | dict(r.time_varying)
                raw_q = r.quarter_index + self.baseline_quarters
                if r.event and r.outcome is not None:
                    rows.append(RawRecord(p.patient_id, raw_q, r.outcome, 0, cov))
                    rows.append(RawRecord(p.patient_id, raw_q, None, 1, dict(cov)))
                else:
                    rows.append(RawRecord(p.patient_id, raw_q, r.outcome, r.event, cov))
        return rows

    def manifest(self) -> dict:
        return {
            "patients": self.n,
            "followup_quarters": self.n_quarters,
            "observed_outcomes": self.n_observed,
            "baseline_quarters": self.baseline_quarters,
            "time_varying": list(self.time_varying_names),
            "baseline_covariates": list(self.baseline_covariate_names),
            "exclusions": [{"patient_id": pid, "reason": why} for pid, why in self.exclusions],
        }


def build_panel(records, config: PanelConfig) -> Panel:
    """Aggregate raw rows into the patient-quarter panel.

    Multiple outcome values within a quarter are averaged; in the quarter of
    the patient's first event, values on rows at or after the first event row
    are excluded from the average. Patients failing the inclusion rules
    (baseline outcome present, at least one observed followup outcome) are
    dropped and listed in the exclusion report.
    """
    by_patient: dict[str, list[RawRecord]] = {}
    tv_names = tuple(config.time_varying)
    baseline_names: list[str] = []
    for rec in records:
        if rec.quarter < 0:
            raise DataError(f"negative quarter {rec.quarter} for patient {rec.patient_id}")
        by_patient.setdefault(str(rec.patient_id), []).append(rec)
        for name in rec.covariates:
            if name not in tv_names and name not in baseline_names:
                baseline_names.append(name)

    patients: list[Patient] = []
    exclusions: list[tuple[str, str]] = []
    for pid, rows in by_patient.items():
        # stable sort keeps within-quarter input order as the time proxy
        rows = sorted(rows, key=lambda r: r.quarter)
        first_event: tuple[int, int] | None = None  # (quarter, position within quarter)
        pos_in_quarter: dict[int, int] = {}
        for rec in rows:
            pos = pos_in_quarter.get(rec.quarter, 0)
            pos_in_quarter[rec.quarter] = pos + 1
            if rec.event and first_event is None:
                first_event = (rec.quarter, pos)

        # per-quarter aggregation
        tv_sums: dict[int, dict[str, list[float]]] = {}
        quarter_values: dict[int, list[float]] = {}
        quarter_event: dict[int, int] = {}
        seen_pos: dict[int, int] = {}
        for rec in rows:
            pos = seen_pos.get(rec.quarter, 0)
            seen_pos[rec.quarter] = pos + 1
            quarter_event[rec.quarter] = quarter_event.get(rec.quarter, 0) or int(bool(rec.event))
            excluded = (first_event is not None and rec.quarter == first_event[0]
                        and pos >= first_event[1])
            if rec.outcome is not None and not excluded:
                quarter_values.setdefault(rec.quarter, []).append(float(rec.outcome))
            if rec.quarter > config.baseline_quarters:
                for name in tv_names:
                    if name not in rec.covariates or rec.covariates[name] is None:
                        raise DataError(
                            f"missing time-varying covariate '{name}' for patient {pid} "
                            f"quarter {rec.quarter}; time-varying values may not be missing"
                        )
                    tv_sums.setdefault(rec.quarter, {}).setdefault(name, []).append(
                        float(rec.covariates[name]))

        base_vals = [np.mean(quarter_values[q]) for q in sorted(quarter_values)
                     if q <= config.baseline_quarters]
        followup_quarters = sorted(q for q in quarter_event if q > config.baseline_quarters)
        if not base_vals:
            exclusions.append((pid, "no baseline outcome in quarters 1-"
                               f"{config.baseline_quarters}"))
            continue
        baseline_outcome = float(np.mean(base_vals))
        if not np.isfinite(baseline_outcome):
            raise DataError(f"non-finite baseline outcome for patient {pid}")

        if not followup_quarters:
            exclusions.append((pid, "no followup quarters"))
            continue
        t_max = followup_quarters[-1] - config.baseline_quarters
        followup: list[Record] = []
        fe_quarter = first_event[0] if first_event is not None else None
        for j in range(1, t_max + 1):
            raw_q = j + config.baseline_quarters
            if raw_q not in quarter_event:
                if tv_names:
                    raise DataError(
                        f"patient {pid} has no row for quarter {raw_q}; time-varying "
                        "covariates may not be missing on interior quarters"
                    )
                followup.append(Record(j, None, 0, {}, fe_quarter))
                continue
            vals = quarter_values.get(raw_q)
            tv = {name: float(np.mean(tv_sums[raw_q][name])) for name in tv_names} \
                if tv_names else {}
            followup.append(Record(
                j,
                float(np.mean(vals)) if vals else None,
                int(quarter_event[raw_q]),
                tv,
                fe_quarter,
            ))
        if not any(r.observed for r in followup):
            exclusions.append((pid, "no observed followup outcome"))
            continue

        first_row = rows[0]
        baseline_cov = {}
        for name in baseline_names:
            if name not in first_row.covariates or first_row.covariates[name] is None:
                raise DataError(f"missing baseline covariate '{name}' for patient {pid}")
            baseline_cov[name] = float(first_row.covariates[name])
        patients.append(Patient(pid, baseline_cov, baseline_outcome, followup))

    patients.sort(key=lambda p: p.patient_id)
    seen = set()
    for p in patients:
        for r in p.followup:
            key = (p.patient_id, r.quarter_index)
            if key in seen:
                raise DataError(f"duplicate patient-quarter {key} after aggregation")
            seen.add(key)
    return Panel(patients, tv_names, tuple(baseline_names), config.baseline_quarters,
                 exclusions)


def _parse_float(text: str, row_num: int, column: str) -> float | None:
    text = text.strip()
    if text == "":
        return None
    try:
        return float(text)
    except ValueError:
        raise DataError(f"row {row_num}: non-numeric value {text!r} in column '{column}'")


def read_records_csv(path_or_buffer, delimiter: str = ",") -> list[RawRecord]:
    """Parse long-format delimited text with a required header row.

    Columns: patient_id, quarter, outcome (empty cell = missing), event,
    then covariates.
    """
    if hasattr(path_or_buffer, "read"):
        fh = path_or_buffer
        close = False
    else:
        fh = open(path_or_buffer, newline="")
        close = True
    try:
        reader = csv.reader(fh, delimiter=delimiter)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError("empty input: header row required")
        header = [h.strip() for h in header]
        for required in RESERVED_COLUMNS:
            if required not in header:
                raise DataError(f"missing required column '{required}' in header {header}")
        idx = {name: header.index(name) for name in header}
        cov_names = [h for h in header if h not in RESERVED_COLUMNS]
        records = []
        for row_num, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataError(f"row {row_num}: expected {len(header)} fields, got {len(row)}")
            quarter_text = row[idx["quarter"]].strip()
            try:
                quarter = int(quarter_text)
            except ValueError:
                raise DataError(f"row {row_num}: non-integer quarter {quarter_text!r}")
            outcome = _parse_float(row[idx["outcome"]], row_num, "outcome")
            event_val = _parse_float(row[idx["event"]], row_num, "event")
            covs = {}
            for name in cov_names:
                val = row[idx[name]].strip()
                covs[name] = None if val == "" else _parse_float(val, row_num, name)
            records.append(RawRecord(
                row[idx["patient_id"]].strip(), quarter, outcome,
                int(event_val) if event_val is not None else 0, covs,
            ))
        return records
    finally:
        if close:
            fh.close()


def _format_value(v) -> str:
    if v is None:
        return ""
    return f"{v:.10g}"


def records_to_csv(records, covariate_names, path_or_buffer, delimiter: str = ",") -> None:
    """Write long-format rows with a deterministic numeric format."""
    if hasattr(path_or_buffer, "write"):
        fh = path_or_buffer
        close = False
    else:
        fh = open(path_or_buffer, "w", newline="")
        close = True
    try:
        writer = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
        writer.writerow(list(RESERVED_COLUMNS) + list(covariate_names))
        for rec in records:
            writer.writerow(
                [rec.patient_id, rec.quarter, _format_value(rec.outcome), rec.event]
                + [_format_value(rec.covariates.get(name)) for name in covariate_names]
            )
    finally:
        if close:
            fh.close()


def write_panel(panel: Panel, csv_path, manifest_path=None, extra_manifest: dict | None = None,
                delimiter: str = ",") -> None:
    """Serialize the canonical panel plus its JSON manifest."""
    names = list(panel.baseline_covariate_names) + list(panel.time_varying_names)
    records_to_csv(panel.to_records(), names, csv_path, delimiter)
    if manifest_path is not None:
        manifest = panel.manifest()
        if extra_manifest:
            manifest.update(extra_manifest)
        with open(manifest_path, "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")


def completed_records(panel: Panel, y_matrix) -> list[RawRecord]:
    """Long rows of a completed dataset: outcomes replaced by the (n, Tmax)
    matrix (e.g. one multiply-imputed draw); events and covariates pass
    through from the panel."""
    rows: list[RawRecord] = []
    zeros_tv = {k: 0.0 for k in panel.time_varying_names}
    for i, p in enumerate(panel.patients):
        rows.append(RawRecord(p.patient_id, 1, p.baseline_outcome, 0,
                              dict(p.baseline_covariates) | dict(zeros_tv)))
        for j, r in enumerate(p.followup):
            cov = dict(p.baseline_covariates) | dict(r.time_varying)
            value = float(y_matrix[i, j])
            raw_q = r.quarter_index + panel.baseline_quarters
            if r.event:
                rows.append(RawRecord(p.patient_id, raw_q, value, 0, cov))
                rows.append(RawRecord(p.patient_id, raw_q, None, 1, dict(cov)))
            else:
                rows.append(RawRecord(p.patient_id, raw_q, value, 0, cov))
    return rows


def read_panel_csv(path_or_buffer, config: PanelConfig) -> Panel:
    return build_panel(read_records_csv(path_or_buffer, config.delimiter), config)


def panel_from_string(text: str, config: PanelConfig) -> Panel:
    return read_panel_csv(io.StringIO(text), config)
