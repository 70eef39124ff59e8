"""Prompt templates and their instantiation against prediction windows."""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from egfrlmm.cohort import COMORBIDITIES, MEDICATIONS, PatientProfile, PredictionWindow
from egfrlmm.errors import TemplateError

KINDS = ("fill-in-blank", "descriptive", "open-ended", "role-playing")
BLANK = "{{eGFR}}"
NOT_AVAILABLE = "not available"

_BUILTIN_FILES = {
    1: ("1_fill_in_blank.txt", "fill-in-blank"),
    2: ("2_descriptive.txt", "descriptive"),
    3: ("3_open_ended.txt", "open-ended"),
    4: ("4_role_playing.txt", "role-playing"),
}

# A single-brace placeholder that is not part of the {{eGFR}} blank.
_PLACEHOLDER = re.compile(r"(?<!\{)\{([A-Za-z_][A-Za-z0-9_]*)\}(?!\})")


@dataclass(frozen=True)
class PromptTemplate:
    template_id: int
    kind: str
    body: str

    def __post_init__(self):
        if self.kind not in KINDS:
            raise TemplateError(f"template {self.template_id}: unknown kind {self.kind!r}")
        for name in ("next_day_diff", "data_text"):
            count = len(re.findall(r"(?<!\{)\{" + name + r"\}(?!\})", self.body))
            if count != 1:
                raise TemplateError(
                    f"template {self.template_id}: {{{name}}} must appear exactly once, found {count}"
                )
        has_blank = BLANK in self.body
        if self.kind == "open-ended" and has_blank:
            raise TemplateError(f"template {self.template_id}: open-ended templates carry no {BLANK} blank")
        if self.kind != "open-ended" and not has_blank:
            raise TemplateError(f"template {self.template_id}: {self.kind} templates need a {BLANK} blank")


@dataclass(frozen=True)
class PromptInstance:
    template_id: int
    rendered_text: str
    window_id: str
    image_digest: str

    @property
    def text_digest(self) -> str:
        return hashlib.sha256(self.rendered_text.encode("utf-8")).hexdigest()


def builtin_templates() -> dict[int, PromptTemplate]:
    pkg = resources.files("egfrlmm") / "templates"
    out = {}
    for tid, (fname, kind) in _BUILTIN_FILES.items():
        body = (pkg / fname).read_text(encoding="utf-8").rstrip("\n")
        out[tid] = PromptTemplate(tid, kind, body)
    return out


def load_template_file(path: str | Path, template_id: int, kind: str) -> PromptTemplate:
    body = Path(path).read_text(encoding="utf-8").rstrip("\n")
    return PromptTemplate(template_id, kind, body)


def _num(x: float) -> str:
    return repr(float(x))


def compose_data_text(
    window: PredictionWindow,
    profile: PatientProfile,
    lab_visit: int | None = None,
) -> str:
    """Name-value listing of the clinical context for one window.

    Labs come from the latest observed visit unless ``lab_visit`` (1-based ordinal
    within the window) says otherwise. Missing labs render as "not available".
    """
    observed = window.observed_visits
    if len(observed) < 3:
        raise TemplateError(f"window {window.window_id} needs at least 3 observed visits for data text")
    if lab_visit is None:
        labs = observed[-1]
    else:
        if not 1 <= lab_visit <= len(observed):
            raise TemplateError(
                f"lab_visit {lab_visit} outside window {window.window_id} ({len(observed)} visits)"
            )
        labs = observed[lab_visit - 1]

    def lab(value, unit):
        return NOT_AVAILABLE if value is None else f"{_num(value)} {unit}"

    pairs = [
        ("BUN", lab(labs.bun, "mg/dL")),
        ("phosphorus", lab(labs.phosphorus, "mg/dL")),
        ("UACR", lab(labs.uacr, "mg/g")),
    ]
    for v in observed[-3:]:
        pairs.append((f"eGFR on {v.date.isoformat()}", _num(v.egfr)))
    comorbidities = [display for key, display in COMORBIDITIES if key in profile.comorbidities]
    medications = [display for key, display in MEDICATIONS if key in profile.medications]
    pairs += [
        ("age at baseline", _num(profile.age_at_baseline)),
        ("gender", profile.gender),
        ("CKD stage", str(profile.ckd_stage)),
        ("CKD cause", profile.ckd_cause),
        ("Charlson Comorbidity Index", str(profile.charlson_index)),
        ("comorbidities", ", ".join(comorbidities) or "none"),
        ("medications", ", ".join(medications) or "none"),
    ]
    return "; ".join(f"{k}: {v}" for k, v in pairs)


def render_prompt(
    template: PromptTemplate,
    window: PredictionWindow,
    data_text: str,
    image_digest: str = "",
) -> PromptInstance:
    values = {"next_day_diff": str(window.next_day_diff), "data_text": data_text}
    # check the template, not the output, so braces inside data_text stay literal
    leftover = [name for name in _PLACEHOLDER.findall(template.body) if name not in values]
    if leftover:
        raise TemplateError(f"template {template.template_id}: unresolved placeholders {leftover}")
    text = re.sub(
        r"(?<!\{)\{(next_day_diff|data_text)\}(?!\})", lambda m: values[m.group(1)], template.body
    )
    return PromptInstance(
        template_id=template.template_id,
        rendered_text=text,
        window_id=window.window_id,
        image_digest=image_digest,
    )
