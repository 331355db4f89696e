"""Core data model: claims, evidence, stances, verdicts, and scored samples.

All types are immutable after construction and validate their invariants in
``__post_init__``. The canonical on-disk format is JSON Lines, one object per
line, UTF-8, with field names matching the dataclass fields. Serialization is
canonical (sorted keys, fixed separators) so that encoding a decoded record
reproduces the original line byte for byte.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from datetime import date
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Iterator, Optional

from .errors import DanglingReference, InvariantViolation, ParseError


class StanceLabel(str, Enum):
    """Six-way stance of an evidence piece towards its claim (symbol S_E)."""

    SUPPORTS = "supports"
    INSUFFICIENT_SUPPORTS = "insufficient-supports"
    INSUFFICIENT_NEUTRAL = "insufficient-neutral"
    INSUFFICIENT_CONTRADICTORY = "insufficient-contradictory"
    INSUFFICIENT_REFUTES = "insufficient-refutes"
    REFUTES = "refutes"


class VerdictLabel(str, Enum):
    """Salient verdict tokens scored by a model: T = {True, None, False}."""

    TRUE = "True"
    NONE = "None"
    FALSE = "False"


#: Canonical enumeration order of T used for delta_p vectors.
CANONICAL_LABELS: tuple[VerdictLabel, ...] = (
    VerdictLabel.TRUE,
    VerdictLabel.NONE,
    VerdictLabel.FALSE,
)


class ClaimVerdict(str, Enum):
    """Verdict of a claim at rest, after raw-label mapping."""

    TRUE = "True"
    HALF_TRUE = "Half-true"
    FALSE = "False"


class Relevance(str, Enum):
    RELEVANT = "relevant"
    NOT_RELEVANT = "not-relevant"


class Reliability(str, Enum):
    """Source reliability verdict; unknown covers domains outside the lists."""

    UNRELIABLE = "unreliable"
    RELIABLE = "reliable"
    UNKNOWN = "unknown"


class PromptMode(str, Enum):
    CLAIM_ONLY = "claim-only"
    CLAIM_EVIDENCE = "claim+evidence"


def canonical_json(obj: Any) -> str:
    """Serialize with sorted keys and fixed separators (byte-stable)."""
    return json.dumps(obj, ensure_ascii=False, sort_keys=True, separators=(",", ":"))


def fallback_id(*parts: str) -> str:
    """Deterministic identifier derived from record content.

    Used when the upstream dataset supplies no id; stable across runs so
    replay stores can key on it.
    """
    digest = hashlib.sha256("\x1f".join(parts).encode("utf-8")).hexdigest()
    return digest[:16]


def word_count(text: str) -> int:
    """Whitespace-split token count, the convention for all word caps."""
    return len(text.split())


def _parse_date(value: Optional[str], field: str) -> Optional[date]:
    if value is None:
        return None
    try:
        return date.fromisoformat(value)
    except ValueError as exc:
        raise InvariantViolation(field, f"not an ISO-8601 date: {value!r}") from exc


def _isoformat(value: Optional[date]) -> Optional[str]:
    return None if value is None else value.isoformat()


@dataclass(frozen=True)
class ClaimRecord:
    """A real-world claim with claimant, source, date, and mapped verdict."""

    id: str
    text: str
    claimant: Optional[str]
    source: str
    claim_date: Optional[date]
    verdict: ClaimVerdict
    raw_verdict: str

    def __post_init__(self) -> None:
        if not self.id:
            raise InvariantViolation("id", "must be non-empty")
        if not self.text:
            raise InvariantViolation("text", "claim text must be non-empty")
        if not isinstance(self.verdict, ClaimVerdict):
            raise InvariantViolation("verdict", f"unmapped label: {self.verdict!r}")
        if not self.source:
            raise InvariantViolation("source", "must be non-empty")

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "text": self.text,
            "claimant": self.claimant,
            "source": self.source,
            "claim_date": _isoformat(self.claim_date),
            "verdict": self.verdict.value,
            "raw_verdict": self.raw_verdict,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ClaimRecord":
        try:
            verdict = ClaimVerdict(data["verdict"])
        except ValueError as exc:
            raise InvariantViolation(
                "verdict", f"unmapped label: {data.get('verdict')!r}"
            ) from exc
        except KeyError as exc:
            raise InvariantViolation("verdict", "missing") from exc
        return cls(
            id=data["id"],
            text=data["text"],
            claimant=data.get("claimant"),
            source=data["source"],
            claim_date=_parse_date(data.get("claim_date"), "claim_date"),
            verdict=verdict,
            raw_verdict=data.get("raw_verdict", verdict.value),
        )


@dataclass(frozen=True)
class EvidencePiece:
    """A retrieved context chunk with URL, dates, source flags, annotations.

    The 300-word cap applies to evidence produced by the retrieval pipeline
    and is enforced there; recast corpora may carry longer texts.
    """

    id: str
    claim_id: str
    text: str
    url: str
    pub_date: Optional[date] = None
    is_fact_check_source: bool = False
    is_gold_source: bool = False
    pub_after_claim: Optional[bool] = None
    relevance: Optional[Relevance] = None
    stance: Optional[StanceLabel] = None
    annotator_labels: tuple[tuple[Optional[Relevance], Optional[StanceLabel]], ...] = ()

    def __post_init__(self) -> None:
        if not self.id:
            raise InvariantViolation("id", "must be non-empty")
        if not self.text:
            raise InvariantViolation("text", "evidence text must be non-empty")
        if self.stance is not None and self.relevance is not Relevance.RELEVANT:
            raise InvariantViolation(
                "stance", "stance present requires relevance = relevant"
            )

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "claim_id": self.claim_id,
            "text": self.text,
            "url": self.url,
            "pub_date": _isoformat(self.pub_date),
            "is_fact_check_source": self.is_fact_check_source,
            "is_gold_source": self.is_gold_source,
            "pub_after_claim": self.pub_after_claim,
            "relevance": None if self.relevance is None else self.relevance.value,
            "stance": None if self.stance is None else self.stance.value,
            "annotator_labels": [
                [
                    None if rel is None else rel.value,
                    None if st is None else st.value,
                ]
                for rel, st in self.annotator_labels
            ],
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "EvidencePiece":
        def parse_enum(enum_cls, value, field):
            if value is None:
                return None
            try:
                return enum_cls(value)
            except ValueError as exc:
                raise InvariantViolation(field, f"unknown value: {value!r}") from exc

        labels = []
        for pair in data.get("annotator_labels", []):
            rel, st = pair[0], pair[1]
            labels.append(
                (
                    parse_enum(Relevance, rel, "annotator_labels"),
                    parse_enum(StanceLabel, st, "annotator_labels"),
                )
            )
        return cls(
            id=data["id"],
            claim_id=data["claim_id"],
            text=data["text"],
            url=data.get("url", ""),
            pub_date=_parse_date(data.get("pub_date"), "pub_date"),
            is_fact_check_source=bool(data.get("is_fact_check_source", False)),
            is_gold_source=bool(data.get("is_gold_source", False)),
            pub_after_claim=data.get("pub_after_claim"),
            relevance=parse_enum(Relevance, data.get("relevance"), "relevance"),
            stance=parse_enum(StanceLabel, data.get("stance"), "stance"),
            annotator_labels=tuple(labels),
        )


@dataclass(frozen=True)
class VerdictProbabilities:
    """Normalized probabilities over {True, None, False} for one prompt mode."""

    p_true: float
    p_none: float
    p_false: float
    mode: PromptMode

    def __post_init__(self) -> None:
        for name in ("p_true", "p_none", "p_false"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise InvariantViolation(name, f"outside [0, 1]: {value}")
        total = self.p_true + self.p_none + self.p_false
        if abs(total - 1.0) > 1e-9:
            raise InvariantViolation("sum", f"probabilities sum to {total}, not 1")

    @classmethod
    def from_weights(
        cls, weights: dict[VerdictLabel, float], mode: PromptMode
    ) -> "VerdictProbabilities":
        """Renormalize non-negative label weights to sum to 1."""
        from .errors import ZeroMass

        total = sum(weights.get(label, 0.0) for label in CANONICAL_LABELS)
        if total <= 0.0:
            raise ZeroMass("all canonical labels carry zero probability mass")
        return cls(
            p_true=weights.get(VerdictLabel.TRUE, 0.0) / total,
            p_none=weights.get(VerdictLabel.NONE, 0.0) / total,
            p_false=weights.get(VerdictLabel.FALSE, 0.0) / total,
            mode=mode,
        )

    def get(self, label: VerdictLabel) -> float:
        return {
            VerdictLabel.TRUE: self.p_true,
            VerdictLabel.NONE: self.p_none,
            VerdictLabel.FALSE: self.p_false,
        }[label]

    def to_dict(self) -> dict[str, Any]:
        return {
            "p_true": self.p_true,
            "p_none": self.p_none,
            "p_false": self.p_false,
            "mode": self.mode.value,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "VerdictProbabilities":
        return cls(
            p_true=data["p_true"],
            p_none=data["p_none"],
            p_false=data["p_false"],
            mode=PromptMode(data["mode"]),
        )


@dataclass(frozen=True)
class ScoredSample:
    """ΔP / ACU scores of one (claim, evidence, model, prompt) combination.

    ``delta_p`` follows CANONICAL_LABELS order: (True, None, False).
    """

    claim_id: str
    evidence_id: str
    probs_without: VerdictProbabilities
    probs_with: VerdictProbabilities
    delta_p: tuple[float, float, float]
    acu: float
    model_id: str
    prompt_id: str

    _TOL = 1e-9

    def __post_init__(self) -> None:
        if len(self.delta_p) != 3:
            raise InvariantViolation("delta_p", "must have exactly three entries")
        for value in self.delta_p:
            if not -1.0 - self._TOL <= value <= 1.0 + self._TOL:
                raise InvariantViolation("delta_p", f"entry outside [-1, 1]: {value}")
        if not -3.0 - self._TOL <= self.acu <= 3.0 + self._TOL:
            raise InvariantViolation("acu", f"outside [-3, 3]: {self.acu}")

    def to_dict(self) -> dict[str, Any]:
        return {
            "claim_id": self.claim_id,
            "evidence_id": self.evidence_id,
            "probs_without": self.probs_without.to_dict(),
            "probs_with": self.probs_with.to_dict(),
            "delta_p": list(self.delta_p),
            "acu": self.acu,
            "model_id": self.model_id,
            "prompt_id": self.prompt_id,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ScoredSample":
        return cls(
            claim_id=data["claim_id"],
            evidence_id=data["evidence_id"],
            probs_without=VerdictProbabilities.from_dict(data["probs_without"]),
            probs_with=VerdictProbabilities.from_dict(data["probs_with"]),
            delta_p=tuple(data["delta_p"]),
            acu=data["acu"],
            model_id=data["model_id"],
            prompt_id=data["prompt_id"],
        )


@dataclass(frozen=True)
class CharacteristicVector:
    """Per-sample values of every context-characteristic detector.

    Detector fields are None when the detector was disabled or errored for
    the sample; profile aggregation reports those as skips. ``unreliable``
    distinguishes a computed "unknown" (domain outside list coverage) from
    None (detector disabled).
    """

    claim_id: str
    evidence_id: str
    jaccard: float
    claim_evidence_overlap: Optional[float]
    repeats_claim: bool
    flesch: Optional[float]
    claim_len_chars: int
    evidence_len_chars: int
    perplexity: Optional[float] = None
    entity_overlap: Optional[float] = None
    no_entity_flag: bool = False
    refers_external: Optional[bool] = None
    hedging: bool = False
    hedging_discourse: bool = False
    unreliable: Optional[Reliability] = None
    contains_true_word: bool = False
    contains_false_word: bool = False
    pub_after_claim: Optional[bool] = None
    fact_check_source: bool = False
    gold_source: bool = False

    def __post_init__(self) -> None:
        for name in ("jaccard", "claim_evidence_overlap", "entity_overlap"):
            value = getattr(self, name)
            if value is not None and not 0.0 <= value <= 1.0:
                raise InvariantViolation(name, f"outside [0, 1]: {value}")
        if self.perplexity is not None and self.perplexity <= 0.0:
            raise InvariantViolation("perplexity", "must be positive")

    def to_dict(self) -> dict[str, Any]:
        return {
            "claim_id": self.claim_id,
            "evidence_id": self.evidence_id,
            "jaccard": self.jaccard,
            "claim_evidence_overlap": self.claim_evidence_overlap,
            "repeats_claim": self.repeats_claim,
            "flesch": self.flesch,
            "claim_len_chars": self.claim_len_chars,
            "evidence_len_chars": self.evidence_len_chars,
            "perplexity": self.perplexity,
            "entity_overlap": self.entity_overlap,
            "no_entity_flag": self.no_entity_flag,
            "refers_external": self.refers_external,
            "hedging": self.hedging,
            "hedging_discourse": self.hedging_discourse,
            "unreliable": None if self.unreliable is None else self.unreliable.value,
            "contains_true_word": self.contains_true_word,
            "contains_false_word": self.contains_false_word,
            "pub_after_claim": self.pub_after_claim,
            "fact_check_source": self.fact_check_source,
            "gold_source": self.gold_source,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "CharacteristicVector":
        unreliable = data.get("unreliable")
        return cls(
            claim_id=data["claim_id"],
            evidence_id=data["evidence_id"],
            jaccard=data["jaccard"],
            claim_evidence_overlap=data.get("claim_evidence_overlap"),
            repeats_claim=data["repeats_claim"],
            flesch=data.get("flesch"),
            claim_len_chars=data["claim_len_chars"],
            evidence_len_chars=data["evidence_len_chars"],
            perplexity=data.get("perplexity"),
            entity_overlap=data.get("entity_overlap"),
            no_entity_flag=bool(data.get("no_entity_flag", False)),
            refers_external=data.get("refers_external"),
            hedging=bool(data.get("hedging", False)),
            hedging_discourse=bool(data.get("hedging_discourse", False)),
            unreliable=None if unreliable is None else Reliability(unreliable),
            contains_true_word=bool(data.get("contains_true_word", False)),
            contains_false_word=bool(data.get("contains_false_word", False)),
            pub_after_claim=data.get("pub_after_claim"),
            fact_check_source=bool(data.get("fact_check_source", False)),
            gold_source=bool(data.get("gold_source", False)),
        )


def validate_sample(
    claim: ClaimRecord, evidence: EvidencePiece
) -> tuple[ClaimRecord, EvidencePiece]:
    """Cross-validate a (claim, evidence) pair beyond per-type invariants."""
    if evidence.claim_id != claim.id:
        raise DanglingReference(
            f"evidence {evidence.id} references claim {evidence.claim_id!r}, "
            f"not {claim.id!r}"
        )
    if (
        evidence.pub_after_claim is not None
        and evidence.pub_date is not None
        and claim.claim_date is not None
    ):
        expected = evidence.pub_date > claim.claim_date
        if evidence.pub_after_claim != expected:
            raise InvariantViolation(
                "pub_after_claim",
                f"flag {evidence.pub_after_claim} inconsistent with dates "
                f"{evidence.pub_date} vs {claim.claim_date}",
            )
    return claim, evidence


# -- JSON Lines IO -------------------------------------------------------------

def encode_line(record: Any) -> str:
    """Canonical single-line encoding of a record with a to_dict method."""
    payload = record.to_dict() if hasattr(record, "to_dict") else record
    return canonical_json(payload)


def write_jsonl(path: Path, records: Iterable[Any], header: Optional[dict] = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        if header is not None:
            fh.write(canonical_json({"kind": "header", **header}) + "\n")
        for record in records:
            fh.write(encode_line(record) + "\n")


def read_jsonl(path: Path, skip_header: bool = True) -> Iterator[tuple[int, dict]]:
    """Yield (line_no, object) pairs; raises ParseError with the line number."""
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(str(path), line_no, str(exc)) from exc
            if skip_header and line_no == 1 and isinstance(obj, dict) and obj.get("kind") == "header":
                continue
            yield line_no, obj
