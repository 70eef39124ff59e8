from __future__ import annotations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from egfrlmm.backends import MALFORMED_TEXT, echo_sentence
from egfrlmm.extraction import (
    EXTRACTION_PROMPT,
    Prediction,
    extract_pattern,
    extract_prediction,
    extraction_audit,
)

CELL = dict(window_id="P001#1", template_id=3, backend_id="m", attempt_index=1)


def test_template_shaped_sentence():
    assert extract_pattern("The most likely predicted value for the next 90 days is 42.5 mL/min/1.73m².") == 42.5


def test_unit_adjacent_beats_earlier_numbers():
    assert extract_pattern("Values ranged 30 to 35; I predict 33.0 mL/min/1.73m².") == 33.0


def test_no_digits_is_no_match():
    assert extract_pattern("The trajectory is concerning.") is None


def test_predicted_value_is_tier():
    text = "Looking at 3 visits, the predicted value over the next period is about 38.2, down from 41."
    assert extract_pattern(text) == 38.2


def test_last_occurrence_within_tier():
    assert extract_pattern("Either 40 mL/min/1.73m² or 44 mL/min/1.73m².") == 44.0
    assert extract_pattern("between 30 and 40") == 40.0


def test_out_of_range_candidates_are_skipped():
    assert extract_pattern("It could be 250 mL/min/1.73m², more likely 45 mL/min/1.73m² than 300.") == 45.0
    assert extract_pattern("0.5 mL/min/1.73m²") is None
    assert extract_pattern("eGFR 250") is None
    assert extract_pattern("eGFR 250", plausible_max=300) == 250.0


def test_horizons_dates_and_percentages_are_not_values():
    assert extract_pattern("Over the next 90 days expect a 5% decline.") is None
    assert extract_pattern("The visit on 2021-03-04 suggests 47 in 180 days.") == 47.0
    assert extract_pattern("a drop of -3 overall") is None


def test_unit_spellings():
    for unit in ("mL/min/1.73m²", "mL/min/1.73 m2", "ml / min / 1.73m^2"):
        assert extract_pattern(f"around 52.25 {unit} by then, not 60") == 52.25


@settings(max_examples=300, deadline=None)
@given(st.floats(1.0, 200.0, allow_nan=False), st.integers(1, 4), st.integers(1, 2000))
def test_echo_forms_round_trip(value, template_id, days):
    assert extract_pattern(echo_sentence(value, days, template_id)) == value


@given(st.text(max_size=200))
def test_deterministic_and_in_range(text):
    first = extract_pattern(text)
    assert first == extract_pattern(text)
    assert first is None or 1.0 <= first <= 200.0


def test_secondary_pass_on_unitless_reply():
    asked = []

    def ask(prompt):
        asked.append(prompt)
        return "41"

    raw = "The decline seems gradual; I would expect something in the low forties."
    p = extract_prediction(raw, ask=ask, **CELL)
    assert (p.value, p.method) == (41.0, "secondary-model")
    assert asked == [EXTRACTION_PROMPT.format(text=raw)]
    assert asked[0].startswith("Return only the predicted eGFR number from this text: ")


def test_secondary_reply_range_takes_last():
    p = extract_prediction("no figure given", ask=lambda _: "between 30 and 40", **CELL)
    assert (p.value, p.method) == (40.0, "secondary-model")


def test_secondary_not_consulted_when_pattern_hits():
    def ask(_):
        raise AssertionError("should not be called")

    p = extract_prediction("predicted 47.1 mL/min/1.73m²", ask=ask, **CELL)
    assert (p.value, p.method) == (47.1, "pattern")


def test_malformed_reply_fails():
    p = extract_prediction(MALFORMED_TEXT, ask=lambda _: MALFORMED_TEXT, **CELL)
    assert p.method == "failed" and p.value is None and not p.ok
    assert extract_prediction(MALFORMED_TEXT, **CELL).method == "failed"


def test_prediction_invariants():
    with pytest.raises(ValueError):
        Prediction(value=None, method="pattern", **CELL)
    with pytest.raises(ValueError):
        Prediction(value=3.0, method="failed", **CELL)
    with pytest.raises(ValueError):
        Prediction(value=3.0, method="guess", **CELL)


def test_audit_counts_balance():
    preds = [
        extract_prediction(text, window_id=f"P{i}#1", template_id=t, backend_id=b, attempt_index=1)
        for i, (b, t, text) in enumerate(
            [
                ("a", 1, "40 mL/min/1.73m²"),
                ("a", 1, MALFORMED_TEXT),
                ("a", 2, "41 mL/min/1.73m²"),
                ("b", 1, MALFORMED_TEXT),
            ]
        )
    ]
    audit = extraction_audit(preds)
    assert audit == {
        "a|1": {"attempted": 2, "pattern": 1, "secondary-model": 0, "failed": 1},
        "a|2": {"attempted": 1, "pattern": 1, "secondary-model": 0, "failed": 0},
        "b|1": {"attempted": 1, "pattern": 0, "secondary-model": 0, "failed": 1},
    }
    for c in audit.values():
        assert c["attempted"] == c["pattern"] + c["secondary-model"] + c["failed"]
