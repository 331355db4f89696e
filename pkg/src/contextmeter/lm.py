"""Language-model access: prompt rendering, verdict extraction, perplexity.

Verdict probabilities are read from the next-token distribution at the
position immediately following the prompt's final "Answer:". Each surface
label collects its own probability mass plus the mass of the same label
with one leading space; a label absent from the returned distribution
falls back to its longest present prefix (the first token of a multi-token
label). Masses are mapped through the template's verbalizer and
renormalized to sum to 1.

All scoring can run through a record/replay store so that downstream
reports are reproducible without model access.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import threading
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Protocol, Union

from importlib import resources

from ._net import post_json
from .errors import (
    DegenerateText,
    InvariantViolation,
    MissingSlotValue,
    ProviderError,
    ReplayMiss,
    StoreCorruption,
)
from .model import (
    CANONICAL_LABELS,
    ClaimRecord,
    EvidencePiece,
    PromptMode,
    VerdictLabel,
    VerdictProbabilities,
    canonical_json,
)

CLAIMANT_SLOT = "<claimant>"
CLAIM_SLOT = "<claim>"
EVIDENCE_SLOT = "<evidence>"


@dataclass(frozen=True)
class PromptTemplate:
    """A prompt body with slot markers plus its label vocabulary.

    ``verbalizer_map`` maps each surface label the model is asked to emit
    to one of the three canonical labels; together the values must cover
    exactly {True, None, False}.
    """

    id: str
    mode: PromptMode
    shots: int
    body: str
    verbalizer_map: dict[str, VerdictLabel]
    include_claimant: bool = True

    def __post_init__(self) -> None:
        if self.shots not in (0, 3):
            raise InvariantViolation("shots", f"expected 0 or 3, got {self.shots}")
        if CLAIM_SLOT not in self.body:
            raise InvariantViolation("body", f"missing {CLAIM_SLOT} slot")
        has_evidence_slot = EVIDENCE_SLOT in self.body
        if self.mode is PromptMode.CLAIM_EVIDENCE and not has_evidence_slot:
            raise InvariantViolation("body", f"claim+evidence mode requires {EVIDENCE_SLOT}")
        if self.mode is PromptMode.CLAIM_ONLY and has_evidence_slot:
            raise InvariantViolation("body", f"claim-only mode must not contain {EVIDENCE_SLOT}")
        covered = set(self.verbalizer_map.values())
        if covered != set(CANONICAL_LABELS):
            raise InvariantViolation(
                "verbalizer_map",
                f"must cover exactly the three canonical labels, covers {sorted(v.value for v in covered)}",
            )


def _template_dir():
    return resources.files("contextmeter") / "data" / "prompts"


def load_template(template_id: str, base_dir: Optional[Path] = None) -> PromptTemplate:
    """Load ``<id>.txt`` (body) + ``<id>.json`` (sidecar) template files."""
    root = Path(base_dir) if base_dir is not None else _template_dir()
    try:
        body = (root / f"{template_id}.txt").read_text(encoding="utf-8")
        sidecar = json.loads((root / f"{template_id}.json").read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise InvariantViolation(
            "template_id", f"no template {template_id!r} under {root}"
        ) from exc
    return PromptTemplate(
        id=sidecar.get("id", template_id),
        mode=PromptMode(sidecar["mode"]),
        shots=int(sidecar["shots"]),
        body=body,
        verbalizer_map={
            surface: VerdictLabel(canonical)
            for surface, canonical in sidecar["verbalizer_map"].items()
        },
        include_claimant=bool(sidecar.get("include_claimant", True)),
    )


BUILTIN_TEMPLATE_IDS = (
    "llama-claim-3shot",
    "pythia-claim-3shot",
    "claim-0shot",
    "llama-evidence-3shot",
    "pythia-evidence-3shot",
    "evidence-0shot",
)


def builtin_templates() -> dict[str, PromptTemplate]:
    return {tid: load_template(tid) for tid in BUILTIN_TEMPLATE_IDS}


def _drop_claimant_lines(body: str) -> str:
    lines = body.split("\n")
    kept: list[str] = []
    skip_blank = False
    for line in lines:
        if line.startswith("Claimant:"):
            skip_blank = True
            continue
        if skip_blank and line.strip() == "":
            skip_blank = False
            continue
        skip_blank = False
        kept.append(line)
    return "\n".join(kept)


def render_prompt(
    template: PromptTemplate,
    claim: Union[ClaimRecord, str],
    evidence: Union[EvidencePiece, str, None] = None,
    claimant: Optional[str] = None,
) -> str:
    """Substitute slot values into the template body.

    ``claim``/``evidence`` accept records or raw strings; a claimant passed
    explicitly overrides the record's. Claimant lines are removed wholesale
    when the template says to exclude them.
    """
    if isinstance(claim, ClaimRecord):
        claim_text = claim.text
        if claimant is None:
            claimant = claim.claimant
    else:
        claim_text = claim
    evidence_text = evidence.text if isinstance(evidence, EvidencePiece) else evidence

    if not claim_text:
        raise MissingSlotValue("claim text is empty")
    if template.mode is PromptMode.CLAIM_EVIDENCE and not evidence_text:
        raise MissingSlotValue("claim+evidence template requires evidence text")
    if template.mode is PromptMode.CLAIM_ONLY and evidence_text is not None:
        raise InvariantViolation("evidence", "claim-only template does not accept evidence")

    body = template.body
    if template.include_claimant:
        if not claimant:
            raise MissingSlotValue("template includes claimant lines but no claimant given")
        body = body.replace(CLAIMANT_SLOT, claimant)
    else:
        body = _drop_claimant_lines(body)
    body = body.replace(CLAIM_SLOT, claim_text)
    if template.mode is PromptMode.CLAIM_EVIDENCE:
        body = body.replace(EVIDENCE_SLOT, evidence_text)
    return body


def prompt_hash(prompt: str) -> str:
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()


# -- providers ---------------------------------------------------------------------

class LogprobProvider(Protocol):
    """A completion backend exposing token-level probabilities."""

    provider_id: str

    def next_token_distribution(self, prompt: str) -> dict[str, float]:
        """Probabilities of candidate next tokens (top-k; may not sum to 1)."""
        ...

    def token_logprobs(self, text: str) -> list[float]:
        """Per-token log-likelihoods of ``text`` under the model."""
        ...


class HttpLogprobProvider:
    """Provider over an HTTP+JSON completion endpoint.

    ``next_token_distribution`` POSTs ``{"prompt", "max_tokens": 1,
    "logprobs": top_k}`` and expects ``{"top_logprobs": {token: logprob}}``.
    ``token_logprobs`` POSTs ``{"text", "echo": true}`` and expects
    ``{"token_logprobs": [float, ...]}``. The auth token is read from the
    environment variable named by ``auth_env_var``; it is never read from
    configuration files.
    """

    def __init__(
        self,
        endpoint: str,
        provider_id: str,
        auth_env_var: Optional[str] = None,
        timeout: float = 60.0,
        retries: int = 2,
        top_k: int = 50,
    ):
        self.provider_id = provider_id
        self._endpoint = endpoint
        self._timeout = timeout
        self._retries = retries
        self._top_k = top_k
        self._headers: Optional[dict] = None
        if auth_env_var:
            token = os.environ.get(auth_env_var)
            if not token:
                raise ProviderError(
                    f"auth environment variable {auth_env_var!r} is not set",
                    retryable=False,
                )
            self._headers = {"Authorization": f"Bearer {token}"}

    def next_token_distribution(self, prompt: str) -> dict[str, float]:
        data = post_json(
            self._endpoint,
            {"prompt": prompt, "max_tokens": 1, "logprobs": self._top_k},
            self._timeout,
            self._retries,
            ProviderError,
            headers=self._headers,
        )
        top = data.get("top_logprobs")
        if not isinstance(top, dict):
            raise ProviderError("malformed top_logprobs payload", retryable=False)
        return {token: math.exp(logprob) for token, logprob in top.items()}

    def token_logprobs(self, text: str) -> list[float]:
        data = post_json(
            self._endpoint,
            {"text": text, "echo": True},
            self._timeout,
            self._retries,
            ProviderError,
            headers=self._headers,
        )
        values = data.get("token_logprobs")
        if not isinstance(values, list):
            raise ProviderError("malformed token_logprobs payload", retryable=False)
        return [float(v) for v in values]


# -- extraction --------------------------------------------------------------------

def surface_label_mass(distribution: dict[str, float], label: str) -> float:
    """Probability mass assigned to a surface label.

    Exact mass of the label and of " " + label are merged. When neither
    appears, the longest distribution key that prefixes either variant
    stands in for the label's first token.
    """
    mass = distribution.get(label, 0.0) + distribution.get(" " + label, 0.0)
    if mass > 0.0:
        return mass
    for variant in (label, " " + label):
        candidates = [
            key
            for key in distribution
            if key not in ("", " ") and variant.startswith(key)
        ]
        if candidates:
            mass += distribution[max(candidates, key=len)]
    return mass


def verdict_probabilities(
    provider: LogprobProvider,
    prompt: str,
    verbalizer_map: dict[str, VerdictLabel],
    mode: PromptMode,
) -> tuple[VerdictProbabilities, dict[str, float]]:
    """Score the prompt and renormalize label masses; returns the surface
    masses alongside for audit."""
    distribution = provider.next_token_distribution(prompt)
    surface_probs = {
        surface: surface_label_mass(distribution, surface)
        for surface in verbalizer_map
    }
    weights: dict[VerdictLabel, float] = {label: 0.0 for label in CANONICAL_LABELS}
    for surface, mass in surface_probs.items():
        weights[verbalizer_map[surface]] += mass
    return VerdictProbabilities.from_weights(weights, mode), surface_probs


def perplexity(provider: LogprobProvider, text: str) -> float:
    """exp of the negative mean per-token log-likelihood of ``text``."""
    if not text or not text.strip():
        raise DegenerateText("cannot compute perplexity of empty text")
    logprobs = provider.token_logprobs(text)
    if not logprobs:
        raise DegenerateText("provider returned no tokens")
    return math.exp(-math.fsum(logprobs) / len(logprobs))


# -- record / replay ---------------------------------------------------------------

@dataclass(frozen=True)
class ScoreRecord:
    """One scored prompt, checksummed for store-integrity verification."""

    prompt_hash: str
    surface_probs: dict[str, float]
    probs: VerdictProbabilities
    provider_id: str
    timestamp: float

    @property
    def key(self) -> tuple[str, str]:
        return (self.prompt_hash, self.provider_id)

    def _payload(self) -> dict:
        return {
            "prompt_hash": self.prompt_hash,
            "surface_probs": self.surface_probs,
            "probs": self.probs.to_dict(),
            "provider_id": self.provider_id,
            "timestamp": self.timestamp,
        }

    def checksum(self) -> str:
        return hashlib.sha256(canonical_json(self._payload()).encode("utf-8")).hexdigest()

    def to_dict(self) -> dict:
        payload = self._payload()
        payload["checksum"] = self.checksum()
        return payload

    @classmethod
    def from_dict(cls, data: dict) -> "ScoreRecord":
        try:
            record = cls(
                prompt_hash=data["prompt_hash"],
                surface_probs=dict(data["surface_probs"]),
                probs=VerdictProbabilities.from_dict(data["probs"]),
                provider_id=data["provider_id"],
                timestamp=data["timestamp"],
            )
        except (KeyError, TypeError) as exc:
            raise StoreCorruption(f"malformed score record: {exc}") from exc
        stored = data.get("checksum")
        if stored != record.checksum():
            raise StoreCorruption(
                f"checksum mismatch for prompt_hash {record.prompt_hash[:12]}"
            )
        return record


class ReplayStore:
    """JSON Lines store of ScoreRecords keyed by (prompt_hash, provider_id)."""

    def __init__(self, path: Path):
        self.path = Path(path)
        self._records: dict[tuple[str, str], ScoreRecord] = {}
        self._lock = threading.Lock()
        if self.path.exists():
            self._load()

    def _load(self) -> None:
        with self.path.open("r", encoding="utf-8") as handle:
            for line_no, line in enumerate(handle, start=1):
                if not line.strip():
                    continue
                try:
                    data = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise StoreCorruption(
                        f"{self.path}:{line_no}: unparseable line ({exc.msg})"
                    ) from exc
                record = ScoreRecord.from_dict(data)
                self._records[record.key] = record

    def __len__(self) -> int:
        return len(self._records)

    def get(self, prompt_hash_value: str, provider_id: str) -> Optional[ScoreRecord]:
        return self._records.get((prompt_hash_value, provider_id))

    def append(self, record: ScoreRecord) -> None:
        with self._lock:
            self._records[record.key] = record
            with self.path.open("a", encoding="utf-8") as handle:
                handle.write(canonical_json(record.to_dict()) + "\n")


SCORER_MODES = ("record", "replay", "passthrough")


class VerdictScorer:
    """Scores prompts through a provider and/or a replay store.

    record: call the provider, persist every result.
    replay: serve exclusively from the store; the provider is never
      contacted (it may be omitted entirely).
    passthrough: call the provider, persist nothing.
    """

    def __init__(
        self,
        provider: Optional[LogprobProvider] = None,
        store: Optional[ReplayStore] = None,
        mode: str = "passthrough",
        provider_id: Optional[str] = None,
    ):
        if mode not in SCORER_MODES:
            raise InvariantViolation("mode", f"expected one of {SCORER_MODES}, got {mode!r}")
        if mode in ("record", "passthrough") and provider is None:
            raise InvariantViolation("provider", f"{mode} mode requires a provider")
        if mode in ("record", "replay") and store is None:
            raise InvariantViolation("store", f"{mode} mode requires a store")
        self.mode = mode
        self._provider = provider
        self._store = store
        self.provider_id = provider_id or (provider.provider_id if provider else None)
        if self.provider_id is None:
            raise InvariantViolation("provider_id", "replay without provider needs an explicit provider_id")

    def score_prompt(
        self,
        prompt: str,
        verbalizer_map: dict[str, VerdictLabel],
        mode: PromptMode,
    ) -> ScoreRecord:
        key_hash = prompt_hash(prompt)
        if self.mode == "replay":
            record = self._store.get(key_hash, self.provider_id)
            if record is None:
                raise ReplayMiss(
                    f"no record for prompt_hash {key_hash[:12]} under provider {self.provider_id!r}"
                )
            return record
        probs, surface_probs = verdict_probabilities(
            self._provider, prompt, verbalizer_map, mode
        )
        record = ScoreRecord(
            prompt_hash=key_hash,
            surface_probs=surface_probs,
            probs=probs,
            provider_id=self.provider_id,
            timestamp=time.time(),
        )
        if self.mode == "record":
            self._store.append(record)
        return record

    def score(
        self,
        template: PromptTemplate,
        claim: Union[ClaimRecord, str],
        evidence: Union[EvidencePiece, str, None] = None,
    ) -> ScoreRecord:
        if isinstance(claim, ClaimRecord) and claim.claimant is None and template.include_claimant:
            template = replace(template, include_claimant=False)
        prompt = render_prompt(template, claim, evidence)
        return self.score_prompt(prompt, template.verbalizer_map, template.mode)
