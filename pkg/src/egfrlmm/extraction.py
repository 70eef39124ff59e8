"""Recover one numeric eGFR forecast from free-form model text."""

from __future__ import annotations

import re
from collections import Counter
from collections.abc import Callable, Iterable
from dataclasses import dataclass

PLAUSIBLE_MIN = 1.0
PLAUSIBLE_MAX = 200.0

EXTRACTION_PROMPT = "Return only the predicted eGFR number from this text: {text}"

METHODS = ("pattern", "secondary-model", "failed")

_NUM = r"(?<![\d.])\d+(?:\.\d+)?(?![\d])"
_NUMBER = re.compile(_NUM)
_UNIT = re.compile(r"mL\s*/\s*min\s*/\s*1\.73\s*(?:m²|m\^?2|m2)", re.IGNORECASE)
_DATE = re.compile(r"\d{4}-\d{2}-\d{2}")
# Numbers that are clearly not the forecast: horizons, percentages, counts of visits.
_NOT_A_VALUE = re.compile(r"\s*(?:%|percent\b|days?\b|weeks?\b|months?\b|years?\b|visits?\b)", re.IGNORECASE)
_PREDICTED_IS = re.compile(
    r"predicted\s+value\b[^.]*?\bis\b\s*(?:about|approximately|around|roughly|~|=|:)?\s*(" + _NUM + ")",
    re.IGNORECASE,
)


@dataclass(frozen=True)
class Prediction:
    window_id: str
    template_id: int
    backend_id: str
    attempt_index: int
    value: float | None
    method: str

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown extraction method {self.method!r}")
        if (self.method == "failed") != (self.value is None):
            raise ValueError("failed predictions carry no value; successful ones must")

    @property
    def ok(self) -> bool:
        return self.method != "failed"


def _mask(text: str) -> str:
    """Blank out unit strings and ISO dates, keeping offsets aligned with ``text``."""
    for pattern in (_UNIT, _DATE):
        text = pattern.sub(lambda m: " " * len(m.group(0)), text)
    return text


def _is_signed(masked: str, start: int) -> bool:
    if start == 0 or masked[start - 1] not in "-−":
        return False
    return start == 1 or not masked[start - 2].isdigit()


def _pick_last(values: Iterable[float], lo: float, hi: float) -> float | None:
    chosen = None
    for v in values:
        if lo <= v <= hi:
            chosen = v
    return chosen


def extract_pattern(
    raw_text: str,
    plausible_min: float = PLAUSIBLE_MIN,
    plausible_max: float = PLAUSIBLE_MAX,
) -> float | None:
    """Return the forecast value in ``raw_text`` or None when nothing plausible is found.

    Tiers, first hit wins: a number right before the eGFR unit; a number after
    "predicted value ... is"; any remaining number. Inside a tier the last in-range
    occurrence is taken.
    """
    masked = _mask(raw_text)

    candidates = []
    for m in _NUMBER.finditer(masked):
        if _is_signed(masked, m.start()) or _NOT_A_VALUE.match(masked, m.end()):
            continue
        candidates.append(m)

    tier1 = []
    for u in _UNIT.finditer(raw_text):
        before = masked[: u.start()].rstrip()
        for m in candidates:
            if m.end() == len(before):
                tier1.append(float(m.group(0)))
    tier2 = [
        float(m.group(1))
        for m in _PREDICTED_IS.finditer(masked)
        if not _is_signed(masked, m.start(1)) and not _NOT_A_VALUE.match(masked, m.end(1))
    ]
    tier3 = [float(m.group(0)) for m in candidates]

    for tier in (tier1, tier2, tier3):
        value = _pick_last(tier, plausible_min, plausible_max)
        if value is not None:
            return value
    return None


def extract_secondary(
    raw_text: str,
    ask: Callable[[str], str],
    plausible_min: float = PLAUSIBLE_MIN,
    plausible_max: float = PLAUSIBLE_MAX,
) -> float | None:
    """Ask a helper model to restate the number, then pattern-match its reply."""
    reply = ask(EXTRACTION_PROMPT.format(text=raw_text))
    return extract_pattern(reply, plausible_min, plausible_max)


def extract_prediction(
    raw_text: str,
    *,
    window_id: str,
    template_id: int,
    backend_id: str,
    attempt_index: int,
    ask: Callable[[str], str] | None = None,
    plausible_min: float = PLAUSIBLE_MIN,
    plausible_max: float = PLAUSIBLE_MAX,
) -> Prediction:
    cell = dict(window_id=window_id, template_id=template_id, backend_id=backend_id, attempt_index=attempt_index)
    value = extract_pattern(raw_text, plausible_min, plausible_max)
    if value is not None:
        return Prediction(value=value, method="pattern", **cell)
    if ask is not None and raw_text:
        value = extract_secondary(raw_text, ask, plausible_min, plausible_max)
        if value is not None:
            return Prediction(value=value, method="secondary-model", **cell)
    return Prediction(value=None, method="failed", **cell)


def extraction_audit(predictions: Iterable[Prediction]) -> dict[str, dict[str, int]]:
    """Counts per ``backend|template``: attempted, pattern, secondary-model, failed."""
    counts: dict[tuple[str, int], Counter] = {}
    for p in predictions:
        c = counts.setdefault((p.backend_id, p.template_id), Counter())
        c["attempted"] += 1
        c[p.method] += 1
    return {
        f"{b}|{t}": {k: c.get(k, 0) for k in ("attempted", *METHODS)}
        for (b, t), c in sorted(counts.items())
    }
