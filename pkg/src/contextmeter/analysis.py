"""Statistics layer: rank correlations, agreement, stratified aggregates,
prediction-shift accounting, and the balanced-MAE prompt objective.

Everything here is pure and deterministic over in-memory sequences; the
correlation grid emitter produces plot-ready CSV/JSON only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import permutations
from typing import Iterable, Optional, Sequence

from scipy import stats as _scipy_stats

from .errors import (
    DegenerateInput,
    EmptyInput,
    LengthMismatch,
    NoPairableValues,
)
from .metrics import DESIRABILITY
from .model import (
    CANONICAL_LABELS,
    CharacteristicVector,
    Reliability,
    StanceLabel,
    VerdictLabel,
)

SIGNIFICANCE_LEVEL = 0.05


# -- rank correlation --------------------------------------------------------------

def _average_ranks(values: Sequence[float]) -> list[float]:
    """1-based ranks; tied values share the average of their positions."""
    order = sorted(range(len(values)), key=lambda i: values[i])
    ranks = [0.0] * len(values)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and values[order[j + 1]] == values[order[i]]:
            j += 1
        average = (i + j) / 2 + 1
        for k in range(i, j + 1):
            ranks[order[k]] = average
        i = j + 1
    return ranks


@dataclass(frozen=True)
class CorrelationResult:
    rho: float
    p_value: Optional[float]
    n: int
    characteristic: str = ""
    stratum: str = ""

    @property
    def significant(self) -> bool:
        return self.p_value is not None and self.p_value < SIGNIFICANCE_LEVEL

    def to_dict(self) -> dict:
        return {
            "characteristic": self.characteristic,
            "stratum": self.stratum,
            "rho": self.rho,
            "p_value": self.p_value,
            "n": self.n,
            "significant": self.significant,
        }


def _rank_rho(rank_x: Sequence[float], rank_y: Sequence[float]) -> float:
    n = len(rank_x)
    mean = (n + 1) / 2
    cov = math.fsum((rx - mean) * (ry - mean) for rx, ry in zip(rank_x, rank_y))
    var_x = math.fsum((rx - mean) ** 2 for rx in rank_x)
    var_y = math.fsum((ry - mean) ** 2 for ry in rank_y)
    return cov / math.sqrt(var_x * var_y)


def spearman(
    x: Sequence[float],
    y: Sequence[float],
    permutation: bool = False,
) -> CorrelationResult:
    """Spearman rank correlation with average ranks for ties.

    The two-sided p-value uses the t-distribution approximation;
    ``permutation=True`` (n <= 12 only) computes the exact permutation
    p-value instead. Constant inputs have no defined rank correlation.
    """
    if len(x) != len(y):
        raise LengthMismatch(f"{len(x)} vs {len(y)} observations")
    n = len(x)
    if n < 3:
        raise DegenerateInput(f"need at least 3 observations, got {n}")
    if len(set(x)) < 2 or len(set(y)) < 2:
        raise DegenerateInput("constant input has no defined rank correlation")

    rank_x = _average_ranks(x)
    rank_y = _average_ranks(y)
    rho = _rank_rho(rank_x, rank_y)

    if permutation:
        if n > 12:
            raise DegenerateInput(f"exact permutation test limited to n <= 12, got {n}")
        observed = abs(rho)
        count = 0
        total = 0
        for perm in permutations(rank_y):
            total += 1
            if abs(_rank_rho(rank_x, perm)) >= observed - 1e-12:
                count += 1
        p_value = count / total
    elif abs(rho) >= 1.0 - 1e-15:
        p_value = 0.0
    else:
        t = rho * math.sqrt((n - 2) / (1.0 - rho * rho))
        p_value = 2.0 * float(_scipy_stats.t.sf(abs(t), n - 2))
    return CorrelationResult(rho=rho, p_value=p_value, n=n)


# -- inter-annotator agreement -----------------------------------------------------

def krippendorff_alpha(
    units: Sequence[Sequence[Optional[object]]],
    metric: str = "nominal",
    order: Optional[Sequence[object]] = None,
) -> float:
    """Krippendorff's alpha over a unit x coder label matrix.

    ``units`` holds one label list per unit (None = missing); units with
    fewer than two labels are excluded. ``metric`` is nominal or ordinal;
    ordinal requires ``order``, the label scale from low to high.
    """
    if metric not in ("nominal", "ordinal"):
        raise DegenerateInput(f"unknown metric {metric!r}")
    pairable = [
        [label for label in unit if label is not None]
        for unit in units
    ]
    pairable = [labels for labels in pairable if len(labels) >= 2]
    if not pairable:
        raise NoPairableValues("no unit carries two or more labels")

    values: list[object] = []
    for labels in pairable:
        for label in labels:
            if label not in values:
                values.append(label)
    if order is not None:
        missing = [v for v in values if v not in order]
        if missing:
            raise DegenerateInput(f"labels absent from the ordinal scale: {missing}")
        values = [v for v in order if v in values]
    index = {value: i for i, value in enumerate(values)}
    size = len(values)

    coincidence = [[0.0] * size for _ in range(size)]
    for labels in pairable:
        m = len(labels)
        for i, a in enumerate(labels):
            for j, b in enumerate(labels):
                if i != j:
                    coincidence[index[a]][index[b]] += 1.0 / (m - 1)
    totals = [sum(row) for row in coincidence]
    n = sum(totals)

    if metric == "nominal":
        def delta_sq(i: int, j: int) -> float:
            return 0.0 if i == j else 1.0
    else:
        def delta_sq(i: int, j: int) -> float:
            if i == j:
                return 0.0
            lo, hi = min(i, j), max(i, j)
            span = sum(totals[g] for g in range(lo, hi + 1))
            return (span - (totals[i] + totals[j]) / 2.0) ** 2

    observed = math.fsum(
        coincidence[i][j] * delta_sq(i, j) for i in range(size) for j in range(size)
    ) / n
    expected = math.fsum(
        totals[i] * totals[j] * delta_sq(i, j) for i in range(size) for j in range(size)
    ) / (n * (n - 1))
    if expected == 0.0:
        # Every pairable label identical: agreement is perfect by definition.
        return 1.0
    return 1.0 - observed / expected


# -- stratified aggregation --------------------------------------------------------

def _mean_std(values: Sequence[float]) -> tuple[float, float]:
    n = len(values)
    mean = math.fsum(values) / n
    variance = math.fsum((v - mean) ** 2 for v in values) / n
    return mean, math.sqrt(variance)


@dataclass(frozen=True)
class StratifiedAcu:
    """Per-stance mean ± population std of ACU, plus the grand mean."""

    strata: dict[StanceLabel, tuple[float, float, int]]
    grand_mean: float
    grand_std: float
    n: int
    empty_strata: tuple[StanceLabel, ...]

    def to_dict(self) -> dict:
        return {
            "strata": {
                stance.value: {"mean": mean, "std": std, "n": count}
                for stance, (mean, std, count) in self.strata.items()
            },
            "grand_mean": self.grand_mean,
            "grand_std": self.grand_std,
            "n": self.n,
            "empty_strata": [stance.value for stance in self.empty_strata],
        }


def stratified_acu(
    acus: Sequence[float], stances: Sequence[StanceLabel]
) -> StratifiedAcu:
    """Group ACU scores by evidence stance; empty strata are reported, not fatal."""
    if len(acus) != len(stances):
        raise LengthMismatch(f"{len(acus)} scores vs {len(stances)} stances")
    if not acus:
        raise EmptyInput("no scored samples")
    groups: dict[StanceLabel, list[float]] = {}
    for value, stance in zip(acus, stances):
        groups.setdefault(stance, []).append(value)
    strata = {}
    for stance in StanceLabel:
        if stance in groups:
            mean, std = _mean_std(groups[stance])
            strata[stance] = (mean, std, len(groups[stance]))
    grand_mean, grand_std = _mean_std(acus)
    return StratifiedAcu(
        strata=strata,
        grand_mean=grand_mean,
        grand_std=grand_std,
        n=len(acus),
        empty_strata=tuple(s for s in StanceLabel if s not in groups),
    )


# -- prediction-shift accounting ---------------------------------------------------

@dataclass(frozen=True)
class ShiftRow:
    """One evidence-stance stratum of the prediction-shift table."""

    n: int
    counts_without: dict[VerdictLabel, int]
    counts_with: dict[VerdictLabel, int]
    delta: dict[VerdictLabel, int]
    sum_delta_n_d: int
    desirable_switches: int
    undesirable_switches: int

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "counts_without": {k.value: v for k, v in self.counts_without.items()},
            "counts_with": {k.value: v for k, v in self.counts_with.items()},
            "delta": {k.value: v for k, v in self.delta.items()},
            "sum_delta_n_d": self.sum_delta_n_d,
            "desirable_switches": self.desirable_switches,
            "undesirable_switches": self.undesirable_switches,
        }


@dataclass(frozen=True)
class ShiftTable:
    strata: dict[StanceLabel, ShiftRow]
    total_delta_n_d: int
    n: int

    def to_dict(self) -> dict:
        return {
            "strata": {stance.value: row.to_dict() for stance, row in self.strata.items()},
            "total_delta_n_d": self.total_delta_n_d,
            "n": self.n,
        }


def prediction_shift(
    claim_only_preds: Sequence[VerdictLabel],
    with_evidence_preds: Sequence[VerdictLabel],
    stances: Sequence[StanceLabel],
) -> ShiftTable:
    """Per-stance label counts in both modes and the desirability-signed
    change ΣΔN_D = Σ_t D(t, S_E) · ΔN(t).

    A sample switching between labels contributes D(new) − D(old); crossing
    from an undesirable to a desirable label adds +2, the reverse −2, and a
    move inside the same desirability class 0. Desirable/undesirable switch
    counts (the crossings) are reported alongside for audit.
    """
    if not (len(claim_only_preds) == len(with_evidence_preds) == len(stances)):
        raise LengthMismatch(
            f"{len(claim_only_preds)} / {len(with_evidence_preds)} / {len(stances)}"
        )
    if not stances:
        raise EmptyInput("no predictions")

    grouped: dict[StanceLabel, list[tuple[VerdictLabel, VerdictLabel]]] = {}
    for before, after, stance in zip(claim_only_preds, with_evidence_preds, stances):
        grouped.setdefault(stance, []).append((before, after))

    strata: dict[StanceLabel, ShiftRow] = {}
    total = 0
    for stance in StanceLabel:
        if stance not in grouped:
            continue
        pairs = grouped[stance]
        counts_without = {label: 0 for label in CANONICAL_LABELS}
        counts_with = {label: 0 for label in CANONICAL_LABELS}
        desirable = 0
        undesirable = 0
        for before, after in pairs:
            counts_without[before] += 1
            counts_with[after] += 1
            if before != after:
                d_before = DESIRABILITY[(before, stance)]
                d_after = DESIRABILITY[(after, stance)]
                if d_after > d_before:
                    desirable += 1
                elif d_after < d_before:
                    undesirable += 1
        delta = {
            label: counts_with[label] - counts_without[label]
            for label in CANONICAL_LABELS
        }
        sum_dnd = sum(
            DESIRABILITY[(label, stance)] * delta[label] for label in CANONICAL_LABELS
        )
        strata[stance] = ShiftRow(
            n=len(pairs),
            counts_without=counts_without,
            counts_with=counts_with,
            delta=delta,
            sum_delta_n_d=sum_dnd,
            desirable_switches=desirable,
            undesirable_switches=undesirable,
        )
        total += sum_dnd
    return ShiftTable(strata=strata, total_delta_n_d=total, n=len(stances))


# -- balanced mean absolute error --------------------------------------------------

DEFAULT_LABEL_ENCODING = {
    VerdictLabel.FALSE: 0.0,
    VerdictLabel.NONE: 1.0,
    VerdictLabel.TRUE: 2.0,
}


def balanced_mae(
    gold: Sequence[VerdictLabel],
    pred: Sequence[VerdictLabel],
    encoding: Optional[dict[VerdictLabel, float]] = None,
) -> float:
    """Mean absolute error with sample weights inversely proportional to
    gold-class frequency (each gold class contributes equal total weight)."""
    if len(gold) != len(pred):
        raise LengthMismatch(f"{len(gold)} gold vs {len(pred)} predicted")
    if not gold:
        raise EmptyInput("no labels")
    encoding = encoding or DEFAULT_LABEL_ENCODING
    counts: dict[VerdictLabel, int] = {}
    for label in gold:
        counts[label] = counts.get(label, 0) + 1
    n = len(gold)
    k = len(counts)
    weights = [n / (k * counts[label]) for label in gold]
    errors = [
        abs(encoding[g] - encoding[p]) * w for g, p, w in zip(gold, pred, weights)
    ]
    return math.fsum(errors) / math.fsum(weights)


# -- correlation grid --------------------------------------------------------------

#: Grid rows, one per profiled characteristic; perplexity is reported
#: model-agnostically here.
GRID_CHARACTERISTICS = (
    "Jaccard similarity",
    "Claim-evidence overlap",
    "Repeats claim (%)",
    "Flesch reading ease score",
    "Claim length",
    "Evidence length",
    "Perplexity",
    "Claim entity overlap",
    "Detection by LLM (%)",
    "Unreliable source (%)",
    "Contains hedging (%)",
    "Contains hedging discourse (%)",
    "Contains 'True'",
    "Contains 'False'",
    "Fact-check source (%)",
    "Gold source (%)",
    "Pub. after claim (%)",
)


def _as_float(value) -> Optional[float]:
    if value is None:
        return None
    if isinstance(value, bool):
        return 1.0 if value else 0.0
    return float(value)


def characteristic_values(vector: CharacteristicVector) -> dict[str, Optional[float]]:
    """Numeric view of one characteristic vector, keyed by grid row name.

    Unknown-reliability samples contribute no value to the unreliability
    row (the correlation runs over the known subset only).
    """
    unreliable: Optional[float]
    if vector.unreliable is None or vector.unreliable is Reliability.UNKNOWN:
        unreliable = None
    else:
        unreliable = 1.0 if vector.unreliable is Reliability.UNRELIABLE else 0.0
    return {
        "Jaccard similarity": _as_float(vector.jaccard),
        "Claim-evidence overlap": _as_float(vector.claim_evidence_overlap),
        "Repeats claim (%)": _as_float(vector.repeats_claim),
        "Flesch reading ease score": _as_float(vector.flesch),
        "Claim length": _as_float(vector.claim_len_chars),
        "Evidence length": _as_float(vector.evidence_len_chars),
        "Perplexity": _as_float(vector.perplexity),
        "Claim entity overlap": _as_float(vector.entity_overlap),
        "Detection by LLM (%)": _as_float(vector.refers_external),
        "Unreliable source (%)": unreliable,
        "Contains hedging (%)": _as_float(vector.hedging),
        "Contains hedging discourse (%)": _as_float(vector.hedging_discourse),
        "Contains 'True'": _as_float(vector.contains_true_word),
        "Contains 'False'": _as_float(vector.contains_false_word),
        "Fact-check source (%)": _as_float(vector.fact_check_source),
        "Gold source (%)": _as_float(vector.gold_source),
        "Pub. after claim (%)": _as_float(vector.pub_after_claim),
    }


@dataclass(frozen=True)
class GridSample:
    """One scored sample joined with its characteristics for the grid."""

    dataset: str
    stance: StanceLabel
    acu: float
    vector: CharacteristicVector


def correlation_grid(samples: Iterable[GridSample]) -> dict:
    """Characteristic x (dataset, stance) Spearman grid, plot-ready.

    Cells with fewer than 3 usable pairs or a constant input are absent
    (None), mirroring undefined correlations rather than forcing zeros.
    """
    materialized = list(samples)
    datasets = sorted({sample.dataset for sample in materialized})
    stance_order = list(StanceLabel)
    columns = []
    for dataset in datasets:
        present = {s.stance for s in materialized if s.dataset == dataset}
        columns.extend(
            f"{dataset}|{stance.value}" for stance in stance_order if stance in present
        )

    cells: dict[str, dict[str, Optional[dict]]] = {
        row: {column: None for column in columns} for row in GRID_CHARACTERISTICS
    }
    for column in columns:
        dataset, stance_value = column.split("|", 1)
        of_column = [
            s
            for s in materialized
            if s.dataset == dataset and s.stance.value == stance_value
        ]
        for row in GRID_CHARACTERISTICS:
            pairs = []
            for sample in of_column:
                value = characteristic_values(sample.vector)[row]
                if value is not None:
                    pairs.append((value, sample.acu))
            if len(pairs) < 3:
                continue
            xs = [p[0] for p in pairs]
            ys = [p[1] for p in pairs]
            try:
                result = spearman(xs, ys)
            except DegenerateInput:
                continue
            cells[row][column] = CorrelationResult(
                rho=result.rho,
                p_value=result.p_value,
                n=result.n,
                characteristic=row,
                stratum=column,
            ).to_dict()
    return {"rows": list(GRID_CHARACTERISTICS), "columns": columns, "cells": cells}


def grid_to_csv(grid: dict) -> str:
    """CSV rendering: one row per characteristic, ``rho*`` marks p < 0.05."""
    import csv
    import io

    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["characteristic"] + grid["columns"])
    for row in grid["rows"]:
        rendered = []
        for column in grid["columns"]:
            cell = grid["cells"][row][column]
            if cell is None:
                rendered.append("")
            else:
                flag = "*" if cell["significant"] else ""
                rendered.append(f"{cell['rho']:.3f}{flag}")
        writer.writerow([row] + rendered)
    return buffer.getvalue()
