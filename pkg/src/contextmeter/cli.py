"""Command-line entry point wiring the modules into reproducible batch runs.

Every invocation resolves one RunConfig (JSON file + flag overrides),
creates a timestamped run directory, echoes the resolved config there, and
writes artifacts whose contents are byte-identical across reruns of the
same config and replay store. Each artifact embeds the config hash, the
ACU form, and the tool version: JSON Lines files as a leading header line,
JSON files under a "meta" key, CSV files as a leading comment line.

Exit codes: 0 success, 2 configuration error, 1 any other failure; errors
are printed to stderr as one JSON object.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Optional

from . import analysis, characteristics, ingest, lm, metrics, retrieval
from ._version import __version__
from .errors import ConfigError, ContextMeterError, NoPairableValues
from .model import (
    ClaimRecord,
    EvidencePiece,
    ScoredSample,
    canonical_json,
    read_jsonl,
    write_jsonl,
)

ACU_FORMS = ("mean", "sum")


@dataclass
class RunConfig:
    """Single source of truth for a run; secrets stay in the environment.

    ``auth_env_var`` names the environment variable holding the provider
    token; the token itself never appears in config files or run archives.
    """

    claims_path: Optional[str] = None
    evidence_path: Optional[str] = None
    triplets_path: Optional[str] = None
    dataset: str = "dataset"
    field_map_path: Optional[str] = None

    fixture_corpus: Optional[str] = None
    search_endpoints: list = field(default_factory=list)
    rerank_endpoint: Optional[str] = None
    fact_check_domains: list = field(default_factory=list)

    provider_endpoint: Optional[str] = None
    provider_id: Optional[str] = None
    auth_env_var: Optional[str] = None
    request_timeout: float = 60.0

    claim_template: Optional[str] = None
    evidence_template: Optional[str] = None
    template_dir: Optional[str] = None

    acu_form: str = "sum"
    detectors: dict = field(default_factory=dict)

    replay_store: Optional[str] = None
    record_store: Optional[str] = None

    scored_path: Optional[str] = None
    characteristics_path: Optional[str] = None
    run_dir: Optional[str] = None

    out_dir: str = "runs"
    seed: int = 0
    max_concurrency: int = 0

    def __post_init__(self) -> None:
        if self.acu_form not in ACU_FORMS:
            raise ConfigError(f"acu_form must be one of {ACU_FORMS}, got {self.acu_form!r}")
        if self.max_concurrency <= 0:
            self.max_concurrency = os.cpu_count() or 1

    def resolved(self) -> dict[str, Any]:
        return asdict(self)

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(canonical_json(self.resolved()).encode("utf-8")).hexdigest()[:16]


def load_config(path: Optional[str], overrides: dict[str, Any]) -> RunConfig:
    data: dict[str, Any] = {}
    if path is not None:
        config_path = Path(path)
        if not config_path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            data = json.loads(config_path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    data.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return RunConfig(**data)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


# -- artifact helpers --------------------------------------------------------------

def _header(config: RunConfig) -> dict[str, Any]:
    return {
        "kind": "header",
        "config_hash": config.config_hash,
        "acu_form": config.acu_form,
        "version": __version__,
    }


def _meta(config: RunConfig) -> dict[str, Any]:
    return {
        "config_hash": config.config_hash,
        "acu_form": config.acu_form,
        "version": __version__,
    }


def write_json_artifact(path: Path, payload: dict, config: RunConfig) -> None:
    document = {"meta": _meta(config)}
    document.update(payload)
    path.write_text(canonical_json(document) + "\n", encoding="utf-8")


def write_csv_artifact(path: Path, csv_text: str, config: RunConfig) -> None:
    comment = (
        f"# config_hash={config.config_hash} acu_form={config.acu_form} "
        f"version={__version__}\n"
    )
    path.write_text(comment + csv_text, encoding="utf-8")


def make_run_dir(config: RunConfig, command: str) -> Path:
    base = Path(config.out_dir)
    base.mkdir(parents=True, exist_ok=True)
    stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%SZ")
    candidate = base / f"{command}-{stamp}-{config.config_hash[:8]}"
    suffix = 1
    while candidate.exists():
        candidate = base / f"{command}-{stamp}-{config.config_hash[:8]}-{suffix}"
        suffix += 1
    candidate.mkdir()
    (candidate / "resolved_config.json").write_text(
        canonical_json({"meta": _meta(config), "config": config.resolved()}) + "\n",
        encoding="utf-8",
    )
    return candidate


def _require(config: RunConfig, **paths: Optional[str]) -> None:
    missing = [name for name, value in paths.items() if not value]
    if missing:
        raise ConfigError(f"missing required settings: {', '.join(missing)}")


def _load_claims(path: str) -> list[ClaimRecord]:
    return [ClaimRecord.from_dict(row) for _, row in read_jsonl(Path(path))]


def _load_evidence(path: str) -> list[EvidencePiece]:
    return [EvidencePiece.from_dict(row) for _, row in read_jsonl(Path(path))]


def _load_field_map(config: RunConfig) -> Optional[dict]:
    if config.field_map_path is None:
        return None
    try:
        return json.loads(Path(config.field_map_path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read field map: {exc}") from exc


def _write_corpus(corpus: ingest.Corpus, run_dir: Path, config: RunConfig) -> list[str]:
    write_jsonl(
        run_dir / "claims.jsonl",
        (claim.to_dict() for claim in corpus.claims.values()),
        header=_header(config),
    )
    write_jsonl(
        run_dir / "evidence.jsonl",
        (piece.to_dict() for piece in corpus.evidence),
        header=_header(config),
    )
    n_claims, n_evidence = corpus.totals()
    stats = {
        "claims": n_claims,
        "evidence": n_evidence,
        "dropped_claims": corpus.dropped_claims,
        "per_source": {
            source: {"claims": c, "samples": s}
            for source, (c, s) in sorted(corpus.per_source_counts().items())
        },
        "stance_histogram": dict(sorted(corpus.stance_histogram().items())),
        "relevance_histogram": dict(sorted(corpus.relevance_histogram().items())),
        "inter_context_conflicts": corpus.inter_context_conflicts(),
    }
    write_json_artifact(run_dir / "corpus_stats.json", {"stats": stats}, config)
    return ["claims.jsonl", "evidence.jsonl", "corpus_stats.json"]


# -- subcommands -------------------------------------------------------------------

def cmd_ingest(config: RunConfig, run_dir: Path) -> list[str]:
    _require(config, claims_path=config.claims_path, evidence_path=config.evidence_path)
    corpus = ingest.load_druid(
        Path(config.claims_path),
        Path(config.evidence_path),
        field_map=_load_field_map(config),
    )
    return _write_corpus(corpus, run_dir, config)


def cmd_recast(config: RunConfig, run_dir: Path) -> list[str]:
    _require(config, triplets_path=config.triplets_path)
    if config.dataset not in ("counterfact", "conflictqa"):
        raise ConfigError(
            "recast needs dataset set to counterfact or conflictqa, "
            f"got {config.dataset!r}"
        )
    corpus = ingest.load_triplets(
        Path(config.triplets_path),
        dataset=config.dataset,
        field_map=_load_field_map(config),
    )
    return _write_corpus(corpus, run_dir, config)


def _build_search_clients(config: RunConfig) -> list:
    clients = []
    if config.fixture_corpus:
        clients.append(retrieval.FixtureSearchClient(Path(config.fixture_corpus)))
    for entry in config.search_endpoints:
        try:
            clients.append(
                retrieval.HttpSearchClient(
                    endpoint=entry["endpoint"],
                    name=entry["name"],
                    timeout=config.request_timeout,
                )
            )
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"search_endpoints entries need name+endpoint: {exc}") from exc
    if not clients:
        raise ConfigError("retrieve needs fixture_corpus or search_endpoints")
    return clients


def cmd_retrieve(config: RunConfig, run_dir: Path) -> list[str]:
    _require(config, claims_path=config.claims_path)
    claims = _load_claims(config.claims_path)
    engines = _build_search_clients(config)
    if config.rerank_endpoint:
        reranker = retrieval.HttpRerankClient(
            config.rerank_endpoint, timeout=config.request_timeout
        )
    else:
        reranker = retrieval.LexicalOverlapReranker()
    domains = frozenset(config.fact_check_domains)

    def run_one(claim: ClaimRecord):
        try:
            return retrieval.run_pipeline(claim, engines, reranker, fact_check_domains=domains)
        except ContextMeterError as exc:
            raise type(exc)(f"claim {claim.id}: {exc}") from exc

    with ThreadPoolExecutor(max_workers=config.max_concurrency) as pool:
        outcomes = list(pool.map(run_one, claims))

    evidence_rows = []
    traces = []
    for evidences, trace in outcomes:
        evidence_rows.extend(piece.to_dict() for piece in evidences)
        traces.append(trace)
    write_jsonl(run_dir / "evidence.jsonl", evidence_rows, header=_header(config))
    write_jsonl(run_dir / "traces.jsonl", traces, header=_header(config))
    return ["evidence.jsonl", "traces.jsonl"]


def cmd_profile(config: RunConfig, run_dir: Path) -> list[str]:
    _require(config, claims_path=config.claims_path, evidence_path=config.evidence_path)
    claims = {claim.id: claim for claim in _load_claims(config.claims_path)}
    evidence = _load_evidence(config.evidence_path)
    pairs = []
    for piece in evidence:
        claim = claims.get(piece.claim_id)
        if claim is None:
            raise ContextMeterError(
                f"evidence {piece.id} references unknown claim {piece.claim_id}"
            )
        pairs.append((claim, piece))
    providers = characteristics.DetectorProviders(
        perplexity_model=config.provider_id or "model"
    )
    vectors, report = characteristics.profile(pairs, providers=providers)
    write_jsonl(
        run_dir / "characteristics.jsonl",
        (vector.to_dict() for vector in vectors),
        header=_header(config),
    )
    write_json_artifact(run_dir / "profile.json", {"profile": report.to_dict()}, config)
    return ["characteristics.jsonl", "profile.json"]


def _build_scorer(config: RunConfig) -> lm.VerdictScorer:
    provider = None
    if config.provider_endpoint:
        if not config.provider_id:
            raise ConfigError("provider_endpoint requires provider_id")
        provider = lm.HttpLogprobProvider(
            endpoint=config.provider_endpoint,
            provider_id=config.provider_id,
            auth_env_var=config.auth_env_var,
            timeout=config.request_timeout,
        )
    if config.replay_store and provider is None:
        store = lm.ReplayStore(Path(config.replay_store))
        if not config.provider_id:
            raise ConfigError("replay without a provider requires provider_id")
        return lm.VerdictScorer(
            store=store, mode="replay", provider_id=config.provider_id
        )
    if provider is None:
        raise ConfigError("score needs a provider endpoint or a replay store")
    if config.record_store:
        store = lm.ReplayStore(Path(config.record_store))
        return lm.VerdictScorer(provider=provider, store=store, mode="record")
    return lm.VerdictScorer(provider=provider)


def cmd_score(config: RunConfig, run_dir: Path) -> list[str]:
    _require(
        config,
        claims_path=config.claims_path,
        evidence_path=config.evidence_path,
        claim_template=config.claim_template,
        evidence_template=config.evidence_template,
    )
    template_dir = Path(config.template_dir) if config.template_dir else None
    claim_template = lm.load_template(config.claim_template, template_dir)
    evidence_template = lm.load_template(config.evidence_template, template_dir)
    scorer = _build_scorer(config)
    acu_config = metrics.AcuConfig(form=config.acu_form)

    claims = _load_claims(config.claims_path)
    evidence = [e for e in _load_evidence(config.evidence_path) if e.stance is not None]
    claims_by_id = {claim.id: claim for claim in claims}
    prompt_id = f"{claim_template.id}+{evidence_template.id}"

    def score_claim(claim: ClaimRecord) -> lm.ScoreRecord:
        try:
            return scorer.score(claim_template, claim)
        except ContextMeterError as exc:
            raise type(exc)(f"claim {claim.id}: {exc}") from exc

    with ThreadPoolExecutor(max_workers=config.max_concurrency) as pool:
        claim_records = list(pool.map(score_claim, claims))
    without = {claim.id: record for claim, record in zip(claims, claim_records)}

    def score_pair(piece: EvidencePiece) -> Optional[ScoredSample]:
        claim = claims_by_id.get(piece.claim_id)
        if claim is None:
            return None
        try:
            with_record = scorer.score(evidence_template, claim, piece)
        except ContextMeterError as exc:
            raise type(exc)(f"claim {claim.id} evidence {piece.id}: {exc}") from exc
        return metrics.score_sample(
            claim_id=claim.id,
            evidence_id=piece.id,
            probs_without=without[claim.id].probs,
            probs_with=with_record.probs,
            stance=piece.stance,
            model_id=scorer.provider_id,
            prompt_id=prompt_id,
            config=acu_config,
        )

    with ThreadPoolExecutor(max_workers=config.max_concurrency) as pool:
        samples = [s for s in pool.map(score_pair, evidence) if s is not None]

    write_jsonl(
        run_dir / "scored.jsonl",
        (sample.to_dict() for sample in samples),
        header=_header(config),
    )
    return ["scored.jsonl"]


def _load_scored(path: str) -> list[ScoredSample]:
    return [ScoredSample.from_dict(row) for _, row in read_jsonl(Path(path))]


def cmd_analyze(config: RunConfig, run_dir: Path) -> list[str]:
    _require(config, scored_path=config.scored_path, evidence_path=config.evidence_path)
    scored = _load_scored(config.scored_path)
    evidence = {piece.id: piece for piece in _load_evidence(config.evidence_path)}

    kept: list[ScoredSample] = []
    acus, stances = [], []
    preds_without, preds_with = [], []
    conflicts = 0
    skipped = 0
    for sample in scored:
        piece = evidence.get(sample.evidence_id)
        if piece is None or piece.stance is None:
            skipped += 1
            continue
        kept.append(sample)
        acus.append(sample.acu)
        stances.append(piece.stance)
        before = metrics.argmax_label(sample.probs_without)
        after = metrics.argmax_label(sample.probs_with)
        preds_without.append(before)
        preds_with.append(after)
        if metrics.memory_conflict(before, piece.stance):
            conflicts += 1
    if not acus:
        raise ContextMeterError("no scored samples with stance-annotated evidence")

    stratified = analysis.stratified_acu(acus, stances)
    shift = analysis.prediction_shift(preds_without, preds_with, stances)

    agreement: dict[str, Optional[float]] = {}
    for name, picker in (
        ("relevance", lambda labels: [rel for rel, _ in labels]),
        ("stance", lambda labels: [st for _, st in labels]),
    ):
        units = [
            picker(piece.annotator_labels)
            for piece in evidence.values()
            if piece.annotator_labels
        ]
        try:
            agreement[name] = analysis.krippendorff_alpha(units)
        except NoPairableValues:
            agreement[name] = None

    payload = {
        "stratified_acu": stratified.to_dict(),
        "prediction_shift": shift.to_dict(),
        "memory_conflicts": {
            "count": conflicts,
            "rate": conflicts / len(acus),
        },
        "agreement": agreement,
        "skipped_samples": skipped,
    }
    write_json_artifact(run_dir / "analysis.json", {"analysis": payload}, config)
    outputs = ["analysis.json"]

    if config.characteristics_path:
        from .model import CharacteristicVector

        vectors = {}
        for _, row in read_jsonl(Path(config.characteristics_path)):
            vector = CharacteristicVector.from_dict(row)
            vectors[vector.evidence_id] = vector
        grid_samples = []
        for sample, stance in zip(kept, stances):
            vector = vectors.get(sample.evidence_id)
            if vector is None:
                continue
            grid_samples.append(
                analysis.GridSample(
                    dataset=config.dataset,
                    stance=stance,
                    acu=sample.acu,
                    vector=vector,
                )
            )
        grid = analysis.correlation_grid(grid_samples)
        write_json_artifact(run_dir / "grid.json", {"grid": grid}, config)
        write_csv_artifact(run_dir / "grid.csv", analysis.grid_to_csv(grid), config)
        outputs += ["grid.json", "grid.csv"]
    return outputs


def cmd_report(config: RunConfig, run_dir: Path) -> list[str]:
    _require(config, run_dir=config.run_dir)
    source = Path(config.run_dir)
    if not source.is_dir():
        raise ConfigError(f"run_dir is not a directory: {source}")
    sections: dict[str, Any] = {}
    for name in ("corpus_stats", "profile", "analysis", "grid"):
        artifact = source / f"{name}.json"
        if artifact.exists():
            document = json.loads(artifact.read_text(encoding="utf-8"))
            document.pop("meta", None)
            sections[name] = document
    write_json_artifact(run_dir / "report.json", {"sections": sections}, config)

    def flatten(prefix: str, value: Any, rows: list[tuple[str, str]]) -> None:
        if isinstance(value, dict):
            for key in sorted(value):
                flatten(f"{prefix}.{key}" if prefix else str(key), value[key], rows)
        elif isinstance(value, list):
            rows.append((prefix, json.dumps(value, ensure_ascii=False)))
        else:
            rows.append((prefix, "" if value is None else str(value)))

    rows: list[tuple[str, str]] = []
    flatten("", sections, rows)
    import csv
    import io

    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["key", "value"])
    writer.writerows(rows)
    write_csv_artifact(run_dir / "report.csv", buffer.getvalue(), config)
    return ["report.json", "report.csv"]


COMMANDS = {
    "ingest": cmd_ingest,
    "recast": cmd_recast,
    "retrieve": cmd_retrieve,
    "profile": cmd_profile,
    "score": cmd_score,
    "analyze": cmd_analyze,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="contextmeter",
        description="Claim-verification context-utilisation toolkit",
    )
    parser.add_argument("--version", action="version", version=__version__)
    subparsers = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub = subparsers.add_parser(name)
        sub.add_argument("--config", help="JSON run-config file")
        sub.add_argument("--out", help="output root (default: runs)")
        sub.add_argument("--replay", help="replay store path (read-only)")
        sub.add_argument("--record", help="record store path (append)")
        sub.add_argument("--acu-form", choices=ACU_FORMS)
        sub.add_argument("--seed", type=int)
        sub.add_argument("--max-concurrency", type=int)
        sub.add_argument("--claims", help="claims JSON Lines path")
        sub.add_argument("--evidence", help="evidence JSON Lines path")
        sub.add_argument("--triplets", help="raw triplet JSON Lines path")
        sub.add_argument("--dataset", help="dataset name (recast: counterfact|conflictqa)")
        sub.add_argument("--field-map", help="upstream field-name mapping JSON")
        sub.add_argument("--fixture-corpus", help="local search corpus directory")
        sub.add_argument("--claim-template", help="claim-only prompt template id")
        sub.add_argument("--evidence-template", help="claim+evidence prompt template id")
        sub.add_argument("--template-dir", help="directory of custom templates")
        sub.add_argument("--provider-endpoint", help="logprob provider URL")
        sub.add_argument("--provider-id", help="provider/model identifier")
        sub.add_argument("--auth-env", help="env var naming the provider token")
        sub.add_argument("--scored", help="scored samples JSON Lines path")
        sub.add_argument("--characteristics", help="characteristics JSON Lines path")
        sub.add_argument("--run-dir", help="existing run directory to merge (report)")
    return parser


_OVERRIDE_MAP = {
    "out": "out_dir",
    "replay": "replay_store",
    "record": "record_store",
    "acu_form": "acu_form",
    "seed": "seed",
    "max_concurrency": "max_concurrency",
    "claims": "claims_path",
    "evidence": "evidence_path",
    "triplets": "triplets_path",
    "dataset": "dataset",
    "field_map": "field_map_path",
    "fixture_corpus": "fixture_corpus",
    "claim_template": "claim_template",
    "evidence_template": "evidence_template",
    "template_dir": "template_dir",
    "provider_endpoint": "provider_endpoint",
    "provider_id": "provider_id",
    "auth_env": "auth_env_var",
    "scored": "scored_path",
    "characteristics": "characteristics_path",
    "run_dir": "run_dir",
}


def _discard_if_empty(run_dir: Optional[Path]) -> None:
    """Drop a run dir that never got past the echoed config."""
    if run_dir is None:
        return
    leftovers = [p.name for p in run_dir.iterdir()]
    if leftovers in ([], ["resolved_config.json"]):
        for p in run_dir.iterdir():
            p.unlink()
        run_dir.rmdir()
        try:
            run_dir.parent.rmdir()
        except OSError:
            pass


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    run_dir: Optional[Path] = None
    try:
        overrides = {
            target: getattr(args, flag)
            for flag, target in _OVERRIDE_MAP.items()
            if getattr(args, flag, None) is not None
        }
        config = load_config(args.config, overrides)
        run_dir = make_run_dir(config, args.command)
        outputs = COMMANDS[args.command](config, run_dir)
    except ConfigError as exc:
        _discard_if_empty(run_dir)
        print(
            json.dumps({"error": type(exc).__name__, "message": str(exc)}),
            file=sys.stderr,
        )
        return 2
    except ContextMeterError as exc:
        print(
            json.dumps({"error": type(exc).__name__, "message": str(exc)}),
            file=sys.stderr,
        )
        return 1
    print(
        canonical_json(
            {"command": args.command, "outputs": outputs, "run_dir": str(run_dir)}
        )
    )
    return 0


if __name__ == "__main__":
    sys.exit(main())
