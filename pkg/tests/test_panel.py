import io

import numpy as np
import pytest

from lpmi.errors import DataError
from lpmi.panel import (PanelConfig, RawRecord, build_panel, panel_from_string,
                        read_records_csv, records_to_csv)

CFG = PanelConfig()


def rec(pid, quarter, outcome=None, event=0, **covs):
    return RawRecord(pid, quarter, outcome, event, covs or {"x1": 1.0})


def base_rows(pid="a", baseline_value=6.5):
    return [rec(pid, 1, baseline_value)]


def test_multiple_values_in_quarter_are_averaged():
    rows = base_rows() + [rec("a", 5, 6.0), rec("a", 5, 8.0)]
    panel = build_panel(rows, CFG)
    assert panel.n == 1
    assert panel.patients[0].followup[0].outcome == pytest.approx(7.0)


def test_values_on_or_after_first_event_are_excluded():
    # within the first-event quarter only the pre-event value counts
    rows = base_rows() + [rec("a", 5, 6.0), rec("a", 5, None, event=1), rec("a", 5, 9.0),
                          rec("a", 6, 8.0)]
    panel = build_panel(rows, CFG)
    first, second = panel.patients[0].followup
    assert first.outcome == pytest.approx(6.0)
    assert first.event == 1
    assert first.first_event_date_quarter == 5
    # later quarters are unaffected by the event restriction
    assert second.outcome == pytest.approx(8.0)


def test_event_row_with_outcome_counts_as_on_event():
    rows = base_rows() + [rec("a", 5, 6.0), rec("a", 5, 9.0, event=1)]
    panel = build_panel(rows, CFG)
    assert panel.patients[0].followup[0].outcome == pytest.approx(6.0)


def test_baseline_averages_first_four_quarters():
    rows = [rec("a", 1, 6.0), rec("a", 3, 8.0), rec("a", 5, 7.0)]
    panel = build_panel(rows, CFG)
    assert panel.patients[0].baseline_outcome == pytest.approx(7.0)


def test_patient_without_baseline_excluded():
    rows = [rec("a", 5, 7.0), rec("b", 1, 6.0), rec("b", 5, 7.0)]
    panel = build_panel(rows, CFG)
    assert panel.n == 1
    assert panel.exclusions == [("a", "no baseline outcome in quarters 1-4")]


def test_patient_without_followup_outcome_excluded():
    rows = [rec("a", 1, 6.0), rec("a", 5, None), rec("b", 1, 6.0), rec("b", 5, 7.0)]
    panel = build_panel(rows, CFG)
    assert [p.patient_id for p in panel.patients] == ["b"]
    assert ("a", "no observed followup outcome") in panel.exclusions


def test_presence_mask_matches_outcomes():
    rows = [rec("a", 1, 6.0), rec("a", 5, 7.0), rec("a", 6, None), rec("a", 7, 8.0)]
    panel = build_panel(rows, CFG)
    observed = [r.observed for r in panel.patients[0].followup]
    values = [r.outcome for r in panel.patients[0].followup]
    assert observed == [True, False, True]
    assert all((v is not None) == o for v, o in zip(values, observed))


def test_gap_quarters_become_missing_records():
    rows = [RawRecord("a", 1, 6.0, 0, {}), RawRecord("a", 5, 7.0, 0, {}),
            RawRecord("a", 8, 8.0, 0, {})]
    panel = build_panel(rows, PanelConfig(time_varying=()))
    followup = panel.patients[0].followup
    assert [r.quarter_index for r in followup] == [1, 2, 3, 4]
    assert [r.observed for r in followup] == [True, False, False, True]


def test_gap_quarter_with_time_varying_is_error():
    rows = [RawRecord("a", 1, 6.0, 0, {"tv1": 0.1}),
            RawRecord("a", 5, 7.0, 0, {"tv1": 0.2}),
            RawRecord("a", 7, 8.0, 0, {"tv1": 0.3})]
    with pytest.raises(DataError):
        build_panel(rows, PanelConfig(time_varying=("tv1",)))


def test_aggregation_idempotent():
    rows = [rec("a", 1, 6.0), rec("a", 2, 6.5),
            rec("a", 5, 6.0), rec("a", 5, 8.0),
            rec("a", 6, 7.5, event=1), rec("a", 8, 9.0),
            rec("b", 2, 5.5), rec("b", 5, None), rec("b", 6, 6.25)]
    panel = build_panel(rows, CFG)
    rebuilt = build_panel(panel.to_records(), CFG)
    assert rebuilt.patients == panel.patients


def test_idempotence_with_baseline_event():
    rows = [rec("a", 1, 6.0), rec("a", 2, None, event=1), rec("a", 5, 7.0),
            rec("a", 6, 8.0, event=1)]
    panel = build_panel(rows, CFG)
    assert panel.patients[0].followup[0].first_event_date_quarter == 2
    rebuilt = build_panel(panel.to_records(), CFG)
    assert rebuilt.patients == panel.patients


def test_csv_parse_error_names_row():
    text = "patient_id,quarter,outcome,event,x1\na,1,6.0,0,1.0\na,5,oops,0,1.0\n"
    with pytest.raises(DataError, match="row 3"):
        panel_from_string(text, CFG)


def test_csv_missing_header_column():
    with pytest.raises(DataError, match="outcome"):
        panel_from_string("patient_id,quarter,event\na,1,0\n", CFG)


def test_csv_round_trip():
    rows = [rec("a", 1, 6.0, x1=0.5), rec("a", 5, 7.25, x1=0.5),
            rec("a", 6, None, event=1, x1=0.5)]
    buf = io.StringIO()
    records_to_csv(rows, ["x1"], buf)
    parsed = read_records_csv(io.StringIO(buf.getvalue()))
    assert len(parsed) == 3
    assert parsed[1].outcome == pytest.approx(7.25)
    assert parsed[2].outcome is None
    assert parsed[2].event == 1
    assert parsed[0].covariates == {"x1": 0.5}


def test_panel_sorted_by_patient_and_quarter():
    rows = [rec("b", 5, 7.0), rec("b", 1, 6.0), rec("a", 6, 7.0),
            rec("a", 1, 6.0), rec("a", 5, 6.5)]
    panel = build_panel(rows, CFG)
    assert [p.patient_id for p in panel.patients] == ["a", "b"]
    assert [r.quarter_index for r in panel.patients[0].followup] == [1, 2]


def test_negative_quarter_rejected():
    with pytest.raises(DataError):
        build_panel([rec("a", -1, 5.0)], CFG)


def test_manifest_counts():
    rows = [rec("a", 1, 6.0), rec("a", 5, 7.0), rec("a", 6, None),
            rec("c", 5, 9.9)]
    panel = build_panel(rows, CFG)
    m = panel.manifest()
    assert m["patients"] == 1
    assert m["followup_quarters"] == 2
    assert m["observed_outcomes"] == 1
    assert m["exclusions"][0]["patient_id"] == "c"
