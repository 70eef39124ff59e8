"""Repeat averaging, prompt ensembles and model ensembles over extracted predictions."""

from __future__ import annotations

import math
from collections import defaultdict
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass

from egfrlmm.extraction import Prediction

SCOPES = ("repeat-average", "prompt-ensemble", "model-ensemble")


@dataclass(frozen=True)
class Member:
    backend_id: str
    template_id: int
    attempt_index: int | None  # None for an already repeat-averaged cell
    value: float


@dataclass(frozen=True)
class EnsembleResult:
    window_id: str
    scope: str
    members: tuple[Member, ...]
    value: float

    @property
    def member_count(self) -> int:
        return len(self.members)


def mean(values: Sequence[float], weights: Sequence[float] | None = None) -> float:
    """Order-independent (weighted) mean, clamped into [min, max] against rounding."""
    if not values:
        raise ValueError("mean of no values")
    if weights is None:
        m = math.fsum(values) / len(values)
    else:
        total = math.fsum(weights)
        if not total > 0:
            raise ValueError("weights must sum to a positive number")
        m = math.fsum(w * v for w, v in zip(weights, values)) / total
    return min(max(m, min(values)), max(values))


def average_repeats(predictions: Iterable[Prediction]) -> EnsembleResult | None:
    """Mean over the successful attempts of one (window, prompt, backend) cell.

    Returns None (cell missing) when no attempt produced a value.
    """
    preds = list(predictions)
    cells = {(p.window_id, p.backend_id, p.template_id) for p in preds}
    if len(cells) > 1:
        raise ValueError(f"predictions span several cells: {sorted(cells)}")
    members = tuple(
        Member(p.backend_id, p.template_id, p.attempt_index, p.value)
        for p in sorted(preds, key=lambda p: p.attempt_index)
        if p.ok
    )
    if not members:
        return None
    return EnsembleResult(preds[0].window_id, "repeat-average", members, mean([m.value for m in members]))


def _combine(cells: Iterable[EnsembleResult], scope: str, weights: Sequence[float] | None = None) -> EnsembleResult:
    cells = list(cells)
    if not cells:
        raise ValueError(f"{scope} needs at least one cell")
    windows = {c.window_id for c in cells}
    if len(windows) != 1:
        raise ValueError(f"{scope} cells span several windows: {sorted(windows)}")
    members = tuple(Member(c.members[0].backend_id, c.members[0].template_id, None, c.value) for c in cells)
    return EnsembleResult(cells[0].window_id, scope, members, mean([m.value for m in members], weights))


def prompt_ensemble(cells: Iterable[EnsembleResult]) -> EnsembleResult:
    """Unweighted mean over one backend's repeat-averaged template cells for a window."""
    cells = list(cells)
    if len({c.members[0].backend_id for c in cells}) > 1:
        raise ValueError("prompt ensemble mixes backends")
    return _combine(cells, "prompt-ensemble")


def model_ensemble(
    cells: Iterable[EnsembleResult],
    weights: Mapping[str, float] | None = None,
) -> EnsembleResult:
    """Mean over backends' repeat-averaged cells for one (window, template).

    ``weights`` maps backend id to a fixed weight; absent backends weigh 1.
    """
    cells = list(cells)
    if len({c.members[0].template_id for c in cells}) > 1:
        raise ValueError("model ensemble mixes templates")
    w = None
    if weights:
        w = [float(weights.get(c.members[0].backend_id, 1.0)) for c in cells]
    return _combine(cells, "model-ensemble", w)


@dataclass
class EnsembleTables:
    repeat: dict[tuple[str, str, int], EnsembleResult]  # (window, backend, template)
    prompt: dict[tuple[str, str], EnsembleResult]  # (window, backend)
    model: dict[tuple[str, int], EnsembleResult]  # (window, template)


def build_ensembles(
    predictions: Iterable[Prediction],
    weights: Mapping[str, float] | None = None,
) -> EnsembleTables:
    """All three aggregation levels from a flat prediction table; missing cells are skipped."""
    by_cell: dict[tuple[str, str, int], list[Prediction]] = defaultdict(list)
    for p in predictions:
        by_cell[(p.window_id, p.backend_id, p.template_id)].append(p)

    repeat = {}
    for key in sorted(by_cell):
        result = average_repeats(by_cell[key])
        if result is not None:
            repeat[key] = result

    per_backend: dict[tuple[str, str], list[EnsembleResult]] = defaultdict(list)
    per_template: dict[tuple[str, int], list[EnsembleResult]] = defaultdict(list)
    for (window, backend, template), r in repeat.items():
        per_backend[(window, backend)].append(r)
        per_template[(window, template)].append(r)

    return EnsembleTables(
        repeat=repeat,
        prompt={k: prompt_ensemble(v) for k, v in sorted(per_backend.items())},
        model={k: model_ensemble(v, weights) for k, v in sorted(per_template.items())},
    )
