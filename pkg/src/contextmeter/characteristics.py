"""Context-characteristic detectors over (claim, evidence) pairs.

Pure text detectors (similarity, readability, hedging, verdict words) need no
external services. Provider-backed detectors (external-source judgement,
perplexity) take callables and are skipped when not configured. Aggregation
uses exact summation so profile results are independent of corpus order.
"""

from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence
from urllib.parse import urlsplit

from .errors import (
    DegenerateClaim,
    DegenerateText,
    MalformedUrl,
    UnparseableJudgement,
)
from .model import (
    CharacteristicVector,
    ClaimRecord,
    EvidencePiece,
    Reliability,
)

logger = logging.getLogger(__name__)

_TOKEN_SPLIT_RE = re.compile(r"[\W_]+", re.UNICODE)
_SENTENCE_SPLIT_RE = re.compile(r"[.!?]+")
_TRUE_WORD_RE = re.compile(r"\bTrue\b")
_FALSE_WORD_RE = re.compile(r"\bFalse\b")


def words(text: str) -> list[str]:
    """Lowercased word tokens with punctuation and special characters
    (including '-' and '_') stripped; hyphenated compounds split apart."""
    return [token for token in _TOKEN_SPLIT_RE.split(text.lower()) if token]


def word_set(text: str) -> frozenset[str]:
    """The set W of unique lowercased words in a text."""
    return frozenset(words(text))


def jaccard(claim_text: str, evidence_text: str) -> float:
    """J(C, E) = |W(C) ∩ W(E)| / |W(C) ∪ W(E)|.

    Defined as 0 when the union is empty (both texts degenerate).
    """
    claim_words = word_set(claim_text)
    evidence_words = word_set(evidence_text)
    union = claim_words | evidence_words
    if not union:
        logger.debug("degenerate jaccard: both word sets empty")
        return 0.0
    return len(claim_words & evidence_words) / len(union)


def claim_evidence_overlap(claim_text: str, evidence_text: str) -> float:
    """|W(C) ∩ W(E)| / |W(C)|: coverage of claim words by the evidence."""
    claim_words = word_set(claim_text)
    if not claim_words:
        raise DegenerateClaim("claim has no words after normalization")
    return len(claim_words & word_set(evidence_text)) / len(claim_words)


def _contains_token_run(haystack: Sequence[str], needle: Sequence[str]) -> bool:
    if not needle:
        return False
    limit = len(haystack) - len(needle)
    for start in range(limit + 1):
        if haystack[start : start + len(needle)] == list(needle):
            return True
    return False


def repeats_claim(claim_text: str, evidence_text: str) -> bool:
    """Whether the evidence repeats the claim verbatim.

    Matching is done on normalized word-token sequences (whitespace collapsed,
    case folded, punctuation stripped) at word boundaries, so that a verbatim
    repeat embedded in a longer sentence counts but a partial-word collision
    ("cat sat" inside "bobcat sat") does not. Word-boundary matching is what
    keeps the guarantee repeats_claim ⇒ claim_evidence_overlap = 1.
    """
    claim_tokens = words(claim_text)
    if not claim_tokens:
        return False
    return _contains_token_run(words(evidence_text), claim_tokens)


# -- readability ----------------------------------------------------------------

_VOWELS = frozenset("aeiouy")


def count_syllables(word: str) -> int:
    """Deterministic syllable heuristic: count vowel groups (aeiouy), subtract
    one for a silent trailing 'e' (unless the word ends in 'le'), minimum 1."""
    letters = "".join(ch for ch in word.lower() if ch.isalpha())
    if not letters:
        return 0
    groups = 0
    previous_vowel = False
    for ch in letters:
        is_vowel = ch in _VOWELS
        if is_vowel and not previous_vowel:
            groups += 1
        previous_vowel = is_vowel
    if groups > 1 and letters.endswith("e") and not letters.endswith("le"):
        groups -= 1
    return max(groups, 1)


def flesch_reading_ease(text: str) -> float:
    """206.835 - 1.015 * (words/sentences) - 84.6 * (syllables/words).

    Words are whitespace tokens containing at least one letter or digit;
    sentences are runs terminated by '.', '!' or '?' (minimum one).
    """
    tokens = [token for token in text.split() if any(ch.isalnum() for ch in token)]
    if not tokens:
        raise DegenerateText("no countable words")
    sentence_parts = [
        part for part in _SENTENCE_SPLIT_RE.split(text) if any(ch.isalnum() for ch in part)
    ]
    n_sentences = max(len(sentence_parts), 1)
    n_words = len(tokens)
    n_syllables = sum(count_syllables(token) for token in tokens)
    return 206.835 - 1.015 * (n_words / n_sentences) - 84.6 * (n_syllables / n_words)


# -- entities --------------------------------------------------------------------

def detect_entities(text: str) -> list[str]:
    """Heuristic named-entity detector: maximal runs of capitalized words.

    Single-word runs at sentence starts are excluded (ordinary sentence
    capitalization), as are runs with fewer than two letters. Stands in for
    an external tagger; swap in a provider for higher fidelity.
    """
    spans: list[tuple[str, bool]] = []
    current: list[str] = []
    current_starts_sentence = False
    sentence_start = True
    for raw in text.split():
        core = raw.strip("\"'“”‘’()[]{}<>.,;:!?")
        capitalized = bool(core) and core[0].isalpha() and core[0].isupper()
        if capitalized:
            if not current:
                current_starts_sentence = sentence_start
            current.append(core)
        else:
            if current:
                spans.append((" ".join(current), current_starts_sentence))
                current = []
        sentence_start = raw.endswith((".", "!", "?"))
    if current:
        spans.append((" ".join(current), current_starts_sentence))

    selected = []
    for surface, starts_sentence in spans:
        if len(surface.split()) == 1 and starts_sentence:
            continue
        if sum(ch.isalpha() for ch in surface) < 2:
            continue
        selected.append(surface)
    return selected


def entity_overlap(
    claim_text: str,
    evidence_text: str,
    ner: Callable[[str], list[str]] = detect_entities,
) -> tuple[float, bool]:
    """Fraction of claim entities whose surface form occurs in the evidence.

    Returns (1.0, True) when the claim has no detectable entities; matching is
    case-insensitive on word-token sequences.
    """
    entities = ner(claim_text)
    if not entities:
        return 1.0, True
    evidence_tokens = words(evidence_text)
    found = sum(
        1 for entity in entities if _contains_token_run(evidence_tokens, words(entity))
    )
    return found / len(entities), False


# -- external-source judgement ----------------------------------------------------

EXTERNAL_SOURCE_PROMPT = (
    "Does the following text refer to an external source or not? Admissible "
    "external sources are for example 'a study', '[1]', 'the BBC', a news "
    "channel etc. Answer with a 'Yes' or 'No'.\n\nText: <text>"
)


def refers_external_source(evidence_text: str, judge: Callable[[str], str]) -> bool:
    """Ask a text-judgement provider whether the evidence cites a source."""
    prompt = EXTERNAL_SOURCE_PROMPT.replace("<text>", evidence_text)
    reply = judge(prompt)
    trimmed = reply.strip().strip(".,!\"'").casefold()
    if trimmed == "yes":
        return True
    if trimmed == "no":
        return False
    raise UnparseableJudgement(f"expected Yes or No, got {reply!r}")


# -- hedging -----------------------------------------------------------------------

def _data_path(*parts: str) -> Path:
    return Path(resources.files("contextmeter").joinpath("data", *parts))


def _read_lexicon_file(path: Path) -> frozenset[str]:
    entries = set()
    for line in path.read_text(encoding="utf-8").splitlines():
        entry = line.split("#", 1)[0].strip().lower()
        if entry:
            entries.add(entry)
    return frozenset(entries)


@dataclass(frozen=True)
class HedgeLexicon:
    """Hedge words plus multi-word hedging discourse markers (lowercase)."""

    hedge_words: frozenset[str]
    hedging_discourse_markers: frozenset[str]

    @classmethod
    def from_files(cls, hedge_path: Path, discourse_path: Path) -> "HedgeLexicon":
        return cls(
            hedge_words=_read_lexicon_file(Path(hedge_path)),
            hedging_discourse_markers=_read_lexicon_file(Path(discourse_path)),
        )

    @classmethod
    def default(cls) -> "HedgeLexicon":
        return cls.from_files(_data_path("hedges.txt"), _data_path("hedging_discourse.txt"))


def hedging_flags(evidence_text: str, lexicon: HedgeLexicon) -> tuple[bool, bool]:
    """(contains hedge word, contains hedging discourse marker).

    Matching is case-insensitive and whole-word; discourse markers match as
    contiguous phrases.
    """
    tokens = words(evidence_text)
    token_set = set(tokens)
    has_hedge = any(
        word in token_set if " " not in word else _contains_token_run(tokens, word.split())
        for word in lexicon.hedge_words
    )
    has_discourse = any(
        _contains_token_run(tokens, marker.split())
        for marker in lexicon.hedging_discourse_markers
    )
    return has_hedge, has_discourse


# -- source reliability -------------------------------------------------------------

@dataclass(frozen=True)
class ReliabilityList:
    """Domain → flag-category mapping plus the coverage universe.

    A domain is unreliable when flagged in any category; reliable when inside
    the coverage universe but unflagged; unknown otherwise.
    """

    flagged: dict[str, str] = field(default_factory=dict)
    coverage: frozenset[str] = frozenset()

    @classmethod
    def from_directory(cls, directory: Path) -> "ReliabilityList":
        directory = Path(directory)
        flagged: dict[str, str] = {}
        for category in ("questionable", "conspiracy_pseudoscience", "satire"):
            path = directory / f"{category}.txt"
            if path.exists():
                for domain in _read_lexicon_file(path):
                    flagged[domain] = category
        coverage = set(flagged)
        coverage_path = directory / "coverage.txt"
        if coverage_path.exists():
            coverage |= _read_lexicon_file(coverage_path)
        return cls(flagged=flagged, coverage=frozenset(coverage))

    @classmethod
    def default(cls) -> "ReliabilityList":
        return cls.from_directory(_data_path("reliability"))


def normalize_domain(url: str) -> str:
    """Reduce a URL to its lowercase host: scheme, port and 'www.' stripped."""
    if not url or not url.strip():
        raise MalformedUrl("empty URL")
    candidate = url.strip()
    if "//" not in candidate:
        candidate = "//" + candidate
    host = urlsplit(candidate).hostname
    if not host:
        raise MalformedUrl(f"no host in {url!r}")
    host = host.lower()
    if host.startswith("www."):
        host = host[len("www."):]
    return host


def _domain_matches(host: str, domains: Iterable[str]) -> bool:
    return any(host == domain or host.endswith("." + domain) for domain in domains)


def unreliable_source(url: str, lists: ReliabilityList) -> Reliability:
    """Tri-state reliability of the URL's registered domain."""
    host = normalize_domain(url)
    if _domain_matches(host, lists.flagged):
        return Reliability.UNRELIABLE
    if _domain_matches(host, lists.coverage):
        return Reliability.RELIABLE
    return Reliability.UNKNOWN


def verdict_word_flags(text: str) -> tuple[bool, bool]:
    """Whole-word, case-sensitive detection of "True" and "False"."""
    return bool(_TRUE_WORD_RE.search(text)), bool(_FALSE_WORD_RE.search(text))


# -- per-sample vector and corpus profile ----------------------------------------------

@dataclass
class DetectorProviders:
    """Optional provider callables; None disables the detector."""

    ner: Callable[[str], list[str]] = detect_entities
    judge: Optional[Callable[[str], str]] = None
    perplexity: Optional[Callable[[str], float]] = None
    perplexity_model: str = "model"


def characteristic_vector(
    claim: ClaimRecord,
    evidence: EvidencePiece,
    lexicon: Optional[HedgeLexicon] = None,
    reliability: Optional[ReliabilityList] = None,
    providers: Optional[DetectorProviders] = None,
) -> CharacteristicVector:
    """Run every configured detector on one (claim, evidence) pair."""
    lexicon = lexicon or HedgeLexicon.default()
    reliability = reliability or ReliabilityList.default()
    providers = providers or DetectorProviders()

    try:
        overlap = claim_evidence_overlap(claim.text, evidence.text)
    except DegenerateClaim:
        overlap = None
    try:
        flesch = flesch_reading_ease(evidence.text)
    except DegenerateText:
        flesch = None
    overlap_value, no_entity = entity_overlap(claim.text, evidence.text, providers.ner)
    refers = None
    if providers.judge is not None:
        refers = refers_external_source(evidence.text, providers.judge)
    perplexity_value = None
    if providers.perplexity is not None:
        perplexity_value = providers.perplexity(evidence.text)
    try:
        unreliable = unreliable_source(evidence.url, reliability)
    except MalformedUrl:
        unreliable = None
    hedging, hedging_discourse = hedging_flags(evidence.text, lexicon)
    contains_true, contains_false = verdict_word_flags(evidence.text)

    return CharacteristicVector(
        claim_id=claim.id,
        evidence_id=evidence.id,
        jaccard=jaccard(claim.text, evidence.text),
        claim_evidence_overlap=overlap,
        repeats_claim=repeats_claim(claim.text, evidence.text),
        flesch=flesch,
        claim_len_chars=len(claim.text),
        evidence_len_chars=len(evidence.text),
        perplexity=perplexity_value,
        entity_overlap=overlap_value,
        no_entity_flag=no_entity,
        refers_external=refers,
        hedging=hedging,
        hedging_discourse=hedging_discourse,
        unreliable=unreliable,
        contains_true_word=contains_true,
        contains_false_word=contains_false,
        pub_after_claim=evidence.pub_after_claim,
        fact_check_source=evidence.is_fact_check_source,
        gold_source=evidence.is_gold_source,
    )


def _mean_std(values: Sequence[float]) -> dict[str, float]:
    n = len(values)
    mean = math.fsum(values) / n
    variance = math.fsum((v - mean) ** 2 for v in values) / n
    return {"mean": mean, "std": math.sqrt(variance), "n": n}


def _percent(flags: Sequence[bool]) -> dict[str, float]:
    n = len(flags)
    return {"percent": 100.0 * sum(1 for f in flags if f) / n, "n": n}


@dataclass
class ProfileReport:
    """Corpus-level aggregate of characteristic vectors.

    ``rows`` is keyed by the reporting row names; continuous rows carry
    mean/std, flag rows carry a percentage.
    """

    rows: dict[str, Optional[dict]]
    total_instances: int
    skipped: dict[str, int]

    def to_dict(self) -> dict:
        return {
            "rows": self.rows,
            "Total instances": self.total_instances,
            "skipped": self.skipped,
        }


def profile(
    pairs: Iterable[tuple[ClaimRecord, EvidencePiece]],
    lexicon: Optional[HedgeLexicon] = None,
    reliability: Optional[ReliabilityList] = None,
    providers: Optional[DetectorProviders] = None,
) -> tuple[list[CharacteristicVector], ProfileReport]:
    """Compute vectors for every pair plus the corpus aggregate report."""
    providers = providers or DetectorProviders()
    vectors = [
        characteristic_vector(claim, evidence, lexicon, reliability, providers)
        for claim, evidence in pairs
    ]
    return vectors, aggregate_profile(vectors, perplexity_model=providers.perplexity_model)


def aggregate_profile(
    vectors: Sequence[CharacteristicVector], perplexity_model: str = "model"
) -> ProfileReport:
    rows: dict[str, Optional[dict]] = {}
    skipped: dict[str, int] = {}

    def continuous(key: str, values: list[Optional[float]]) -> None:
        present = [v for v in values if v is not None]
        skip = len(values) - len(present)
        if skip:
            skipped[key] = skip
        rows[key] = _mean_std(present) if present else None

    def percent(key: str, values: list[Optional[bool]]) -> None:
        present = [v for v in values if v is not None]
        skip = len(values) - len(present)
        if skip:
            skipped[key] = skip
        rows[key] = _percent(present) if present else None

    continuous("Jaccard similarity", [v.jaccard for v in vectors])
    continuous("Claim-evidence overlap", [v.claim_evidence_overlap for v in vectors])
    percent("Repeats claim (%)", [v.repeats_claim for v in vectors])
    continuous("Flesch reading ease score", [v.flesch for v in vectors])
    continuous("Claim length", [float(v.claim_len_chars) for v in vectors])
    continuous("Evidence length", [float(v.evidence_len_chars) for v in vectors])
    continuous(f"{perplexity_model}: Perplexity", [v.perplexity for v in vectors])
    continuous("Claim entity overlap", [v.entity_overlap for v in vectors])
    percent("Detection by LLM (%)", [v.refers_external for v in vectors])
    unreliable_known = [
        v.unreliable is Reliability.UNRELIABLE
        for v in vectors
        if v.unreliable in (Reliability.UNRELIABLE, Reliability.RELIABLE)
    ]
    unknown = [v for v in vectors if v.unreliable is Reliability.UNKNOWN]
    disabled = [v for v in vectors if v.unreliable is None]
    if disabled:
        skipped["Unreliable source (%)"] = len(disabled)
    row: Optional[dict] = None
    if unreliable_known or unknown:
        row = {
            "percent": (
                100.0 * sum(unreliable_known) / len(unreliable_known)
                if unreliable_known
                else None
            ),
            "n": len(unreliable_known),
            "unknown_percent": 100.0
            * len(unknown)
            / (len(unreliable_known) + len(unknown)),
        }
    rows["Unreliable source (%)"] = row
    percent("Contains hedging (%)", [v.hedging for v in vectors])
    percent("Contains hedging discourse (%)", [v.hedging_discourse for v in vectors])
    percent("Contains 'True'", [v.contains_true_word for v in vectors])
    percent("Contains 'False'", [v.contains_false_word for v in vectors])
    percent("Fact-check source (%)", [v.fact_check_source for v in vectors])
    percent("Gold source (%)", [v.gold_source for v in vectors])
    percent("Pub. after claim (%)", [v.pub_after_claim for v in vectors])

    return ProfileReport(rows=rows, total_instances=len(vectors), skipped=skipped)
