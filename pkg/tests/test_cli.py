"""End-to-end tests for the command-line interface.

Every test drives ``cli.main`` the way a shell would: argv in, exit code
out, one JSON object on stdout (success) or stderr (failure). Artifact
bytes are compared directly where the contract promises reproducibility.
"""

import contextlib
import io
import json
import re
import shutil
import subprocess
import sys
from pathlib import Path

import pytest

from conftest import HashLogprobProvider
from contextmeter import cli, lm
from contextmeter._version import __version__
from contextmeter.analysis import GRID_CHARACTERISTICS
from contextmeter.model import ClaimRecord, EvidencePiece, read_jsonl


def run_cli(*args: str):
    """Invoke the CLI in-process and capture (exit_code, stdout, stderr)."""
    out, err = io.StringIO(), io.StringIO()
    with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
        code = cli.main(list(args))
    return code, out.getvalue(), err.getvalue()


def run_dir_of(stdout: str) -> Path:
    return Path(json.loads(stdout)["run_dir"])


def read_rows(path: Path) -> list[dict]:
    return [row for _, row in read_jsonl(path)]


def header_line(path: Path) -> dict:
    return json.loads(path.read_text(encoding="utf-8").splitlines()[0])


@pytest.fixture(scope="module")
def out_root(tmp_path_factory) -> Path:
    return tmp_path_factory.mktemp("runs")


@pytest.fixture(scope="module")
def replay_store(tmp_path_factory, druid_fixture_paths) -> Path:
    """Replay store covering every prompt a fixture score run renders."""
    claims_path, evidence_path = druid_fixture_paths
    store_path = tmp_path_factory.mktemp("store") / "store.jsonl"
    scorer = lm.VerdictScorer(
        provider=HashLogprobProvider(),
        store=lm.ReplayStore(store_path),
        mode="record",
    )
    claim_template = lm.load_template("claim-0shot")
    evidence_template = lm.load_template("evidence-0shot")
    claims = [ClaimRecord.from_dict(r) for _, r in read_jsonl(claims_path)]
    by_id = {claim.id: claim for claim in claims}
    for claim in claims:
        scorer.score(claim_template, claim)
    for _, row in read_jsonl(evidence_path):
        piece = EvidencePiece.from_dict(row)
        if piece.stance is not None:
            scorer.score(evidence_template, by_id[piece.claim_id], piece)
    return store_path


def score_args(druid_fixture_paths, replay_store: Path, out_root: Path) -> list[str]:
    claims_path, evidence_path = druid_fixture_paths
    return [
        "score",
        "--claims", str(claims_path),
        "--evidence", str(evidence_path),
        "--claim-template", "claim-0shot",
        "--evidence-template", "evidence-0shot",
        "--replay", str(replay_store),
        "--provider-id", "hash-mock",
        "--out", str(out_root),
    ]


@pytest.fixture(scope="module")
def scored_run(druid_fixture_paths, replay_store, out_root) -> Path:
    code, stdout, stderr = run_cli(*score_args(druid_fixture_paths, replay_store, out_root))
    assert code == 0, stderr
    return run_dir_of(stdout)


@pytest.fixture(scope="module")
def profile_run(druid_fixture_paths, out_root) -> Path:
    claims_path, evidence_path = druid_fixture_paths
    code, stdout, stderr = run_cli(
        "profile",
        "--claims", str(claims_path),
        "--evidence", str(evidence_path),
        "--out", str(out_root),
    )
    assert code == 0, stderr
    return run_dir_of(stdout)


class TestRunContract:
    def test_stdout_names_command_outputs_and_run_dir(self, druid_fixture_paths, tmp_path):
        claims_path, evidence_path = druid_fixture_paths
        code, stdout, _ = run_cli(
            "ingest",
            "--claims", str(claims_path),
            "--evidence", str(evidence_path),
            "--out", str(tmp_path),
        )
        assert code == 0
        payload = json.loads(stdout)
        assert set(payload) == {"command", "outputs", "run_dir"}
        assert payload["command"] == "ingest"
        assert payload["outputs"] == ["claims.jsonl", "evidence.jsonl", "corpus_stats.json"]

    def test_run_dir_name_has_command_stamp_and_hash(self, profile_run):
        assert re.fullmatch(r"profile-\d{8}T\d{6}Z-[0-9a-f]{8}", profile_run.name)

    def test_run_dir_echoes_resolved_config(self, profile_run):
        resolved = json.loads((profile_run / "resolved_config.json").read_text())
        assert set(resolved) == {"meta", "config"}
        assert resolved["config"]["acu_form"] == "sum"
        header = header_line(profile_run / "characteristics.jsonl")
        assert resolved["meta"]["config_hash"] == header["config_hash"]

    def test_jsonl_artifacts_start_with_header_line(self, profile_run):
        header = header_line(profile_run / "characteristics.jsonl")
        assert set(header) == {"kind", "config_hash", "acu_form", "version"}
        assert header["kind"] == "header"
        assert header["version"] == __version__

    def test_rerun_gets_fresh_run_dir_same_artifacts(self, druid_fixture_paths, tmp_path):
        claims_path, evidence_path = druid_fixture_paths
        args = (
            "profile",
            "--claims", str(claims_path),
            "--evidence", str(evidence_path),
            "--out", str(tmp_path),
        )
        _, first_out, _ = run_cli(*args)
        _, second_out, _ = run_cli(*args)
        first, second = run_dir_of(first_out), run_dir_of(second_out)
        assert first != second
        for name in ("characteristics.jsonl", "profile.json", "resolved_config.json"):
            assert (first / name).read_bytes() == (second / name).read_bytes()

    def test_version_flag_prints_package_version(self):
        proc = subprocess.run(
            [sys.executable, "-m", "contextmeter.cli", "--version"],
            capture_output=True,
            text=True,
        )
        assert proc.returncode == 0
        assert proc.stdout.strip() == __version__


class TestConfigErrors:
    def assert_config_error(self, args, fragment: str):
        code, _, stderr = run_cli(*args)
        assert code == 2
        payload = json.loads(stderr)
        assert payload["error"] == "ConfigError"
        assert fragment in payload["message"]

    def test_score_without_any_settings(self):
        self.assert_config_error(
            ["score"],
            "missing required settings: claims_path, evidence_path, "
            "claim_template, evidence_template",
        )

    def test_score_without_templates(self, druid_fixture_paths):
        claims_path, evidence_path = druid_fixture_paths
        self.assert_config_error(
            ["score", "--claims", str(claims_path), "--evidence", str(evidence_path)],
            "missing required settings: claim_template, evidence_template",
        )

    def test_analyze_without_inputs(self):
        self.assert_config_error(["analyze"], "scored_path")

    def test_unknown_config_key(self, tmp_path):
        config = tmp_path / "run.json"
        config.write_text('{"acu_form": "sum", "frobnicate": 1}\n')
        self.assert_config_error(
            ["score", "--config", str(config)], "unknown config keys: frobnicate"
        )

    def test_config_file_missing(self, tmp_path):
        self.assert_config_error(
            ["score", "--config", str(tmp_path / "nope.json")], "not found"
        )

    def test_config_file_invalid_json(self, tmp_path):
        config = tmp_path / "run.json"
        config.write_text("{not json")
        self.assert_config_error(["score", "--config", str(config)], "not valid JSON")

    def test_config_file_must_be_object(self, tmp_path):
        config = tmp_path / "run.json"
        config.write_text('["sum"]\n')
        self.assert_config_error(["score", "--config", str(config)], "JSON object")

    def test_bad_acu_form_in_config(self, tmp_path):
        config = tmp_path / "run.json"
        config.write_text('{"acu_form": "median"}\n')
        self.assert_config_error(["score", "--config", str(config)], "acu_form")

    def test_recast_needs_known_dataset(self, tmp_path):
        triplets = tmp_path / "rows.jsonl"
        triplets.write_text("{}\n")
        self.assert_config_error(
            ["recast", "--triplets", str(triplets)], "counterfact or conflictqa"
        )

    def test_retrieve_needs_some_search_backend(self, druid_fixture_paths):
        claims_path, _ = druid_fixture_paths
        self.assert_config_error(
            ["retrieve", "--claims", str(claims_path)],
            "fixture_corpus or search_endpoints",
        )

    def test_score_needs_provider_or_replay(self, druid_fixture_paths):
        claims_path, evidence_path = druid_fixture_paths
        self.assert_config_error(
            [
                "score",
                "--claims", str(claims_path),
                "--evidence", str(evidence_path),
                "--claim-template", "claim-0shot",
                "--evidence-template", "evidence-0shot",
            ],
            "provider endpoint or a replay store",
        )

    def test_config_error_leaves_no_run_dir(self, druid_fixture_paths, tmp_path):
        claims_path, evidence_path = druid_fixture_paths
        out = tmp_path / "runs"
        code, _, _ = run_cli(
            "score",
            "--claims", str(claims_path),
            "--evidence", str(evidence_path),
            "--out", str(out),
        )
        assert code == 2
        assert not out.exists()

    def test_replay_requires_provider_id(self, druid_fixture_paths, replay_store):
        claims_path, evidence_path = druid_fixture_paths
        self.assert_config_error(
            [
                "score",
                "--claims", str(claims_path),
                "--evidence", str(evidence_path),
                "--claim-template", "claim-0shot",
                "--evidence-template", "evidence-0shot",
                "--replay", str(replay_store),
            ],
            "provider_id",
        )


class TestFailureExitCode:
    def test_parse_error_exits_one(self, druid_fixture_paths, tmp_path):
        claims_path, _ = druid_fixture_paths
        bad_evidence = tmp_path / "evidence.jsonl"
        bad_evidence.write_text(
            json.dumps(
                {
                    "id": "e-x",
                    "claim_id": "c-missing",
                    "text": "Dangling evidence.",
                    "url": "https://example.org/x",
                }
            )
            + "\n"
        )
        code, _, stderr = run_cli(
            "ingest",
            "--claims", str(claims_path),
            "--evidence", str(bad_evidence),
            "--out", str(tmp_path),
        )
        assert code == 1
        payload = json.loads(stderr)
        assert payload["error"] == "ParseError"
        assert "unknown claim" in payload["message"]

    def test_missing_auth_env_var_exits_one(self, druid_fixture_paths, tmp_path, monkeypatch):
        monkeypatch.delenv("CONTEXTMETER_TEST_TOKEN", raising=False)
        claims_path, evidence_path = druid_fixture_paths
        code, _, stderr = run_cli(
            "score",
            "--claims", str(claims_path),
            "--evidence", str(evidence_path),
            "--claim-template", "claim-0shot",
            "--evidence-template", "evidence-0shot",
            "--provider-endpoint", "https://lm.example/api",
            "--provider-id", "some-model",
            "--auth-env", "CONTEXTMETER_TEST_TOKEN",
            "--out", str(tmp_path),
        )
        assert code == 1
        payload = json.loads(stderr)
        assert payload["error"] == "ProviderError"
        assert "CONTEXTMETER_TEST_TOKEN" in payload["message"]

    def test_replay_miss_exits_one(self, druid_fixture_paths, tmp_path):
        claims_path, evidence_path = druid_fixture_paths
        # Store only covers the claim-only prompts, so the first
        # claim+evidence lookup must fail loudly instead of guessing.
        store_path = tmp_path / "short.jsonl"
        scorer = lm.VerdictScorer(
            provider=HashLogprobProvider(),
            store=lm.ReplayStore(store_path),
            mode="record",
        )
        template = lm.load_template("claim-0shot")
        for _, row in read_jsonl(claims_path):
            scorer.score(template, ClaimRecord.from_dict(row))
        code, _, stderr = run_cli(
            "score",
            "--claims", str(claims_path),
            "--evidence", str(evidence_path),
            "--claim-template", "claim-0shot",
            "--evidence-template", "evidence-0shot",
            "--replay", str(store_path),
            "--provider-id", "hash-mock",
            "--out", str(tmp_path),
        )
        assert code == 1
        assert json.loads(stderr)["error"] == "ReplayMiss"


class TestIngestRecast:
    def test_corpus_stats_match_fixture(self, druid_fixture_paths, tmp_path):
        claims_path, evidence_path = druid_fixture_paths
        code, stdout, _ = run_cli(
            "ingest",
            "--claims", str(claims_path),
            "--evidence", str(evidence_path),
            "--out", str(tmp_path),
        )
        assert code == 0
        stats = json.loads((run_dir_of(stdout) / "corpus_stats.json").read_text())["stats"]
        assert stats["claims"] == 5
        assert stats["evidence"] == 12
        assert stats["dropped_claims"] == 0
        assert stats["inter_context_conflicts"] == 2
        assert stats["per_source"]["politifact"] == {"claims": 2, "samples": 5}
        assert stats["relevance_histogram"] == {"not-relevant": 2, "relevant": 10}

    def test_ingest_claims_round_trip_through_artifact(self, druid_fixture_paths, tmp_path):
        claims_path, evidence_path = druid_fixture_paths
        _, stdout, _ = run_cli(
            "ingest",
            "--claims", str(claims_path),
            "--evidence", str(evidence_path),
            "--out", str(tmp_path),
        )
        artifact = run_dir_of(stdout) / "claims.jsonl"
        reloaded = [ClaimRecord.from_dict(row) for row in read_rows(artifact)]
        original = [ClaimRecord.from_dict(row) for _, row in read_jsonl(claims_path)]
        assert reloaded == original

    def test_recast_counterfact_writes_balanced_corpus(self, tmp_path):
        triplets = tmp_path / "triplets.jsonl"
        rows = [
            {
                "case_id": 101,
                "subject": "Danube",
                "relation": "flows through",
                "object_true": "Vienna",
                "object_edited": "Oslo",
            },
            {
                "case_id": 102,
                "subject": "Mount Kenya",
                "relation": "is located in",
                "object_true": "Kenya",
                "object_edited": "Chile",
            },
        ]
        triplets.write_text("".join(json.dumps(r) + "\n" for r in rows))
        code, stdout, stderr = run_cli(
            "recast",
            "--triplets", str(triplets),
            "--dataset", "counterfact",
            "--out", str(tmp_path),
        )
        assert code == 0, stderr
        run_dir = run_dir_of(stdout)
        stats = json.loads((run_dir / "corpus_stats.json").read_text())["stats"]
        assert stats["claims"] == 2
        assert stats["evidence"] == 4
        assert stats["stance_histogram"] == {"refutes": 2, "supports": 2}
        evidence = [EvidencePiece.from_dict(row) for row in read_rows(run_dir / "evidence.jsonl")]
        assert all(piece.relevance is not None for piece in evidence)


class TestRetrieve:
    def test_fixture_corpus_pipeline(self, fixture_corpus_dir, tmp_path):
        claims = tmp_path / "claims.jsonl"
        claims.write_text(
            json.dumps(
                {
                    "id": "c-lh-1",
                    "text": "The red lighthouse on Gull Island was built in 1932.",
                    "claimant": "Somebody",
                    "source": "politifact",
                    "claim_date": "2022-05-10",
                    "verdict": "True",
                    "raw_verdict": "True",
                }
            )
            + "\n"
        )
        code, stdout, stderr = run_cli(
            "retrieve",
            "--claims", str(claims),
            "--fixture-corpus", str(fixture_corpus_dir),
            "--out", str(tmp_path),
        )
        assert code == 0, stderr
        payload = json.loads(stdout)
        assert payload["outputs"] == ["evidence.jsonl", "traces.jsonl"]
        run_dir = Path(payload["run_dir"])
        evidence = [EvidencePiece.from_dict(row) for row in read_rows(run_dir / "evidence.jsonl")]
        assert len(evidence) == 3
        assert all(piece.claim_id == "c-lh-1" for piece in evidence)
        traces = read_rows(run_dir / "traces.jsonl")
        assert len(traces) == 1
        assert traces[0]["claim_id"] == "c-lh-1"
        assert traces[0]["chunks_kept"] >= 3


class TestScore:
    def test_replay_runs_are_byte_identical(self, druid_fixture_paths, replay_store, out_root, scored_run):
        code, stdout, stderr = run_cli(*score_args(druid_fixture_paths, replay_store, out_root))
        assert code == 0, stderr
        rerun = run_dir_of(stdout)
        assert rerun != scored_run
        for name in ("scored.jsonl", "resolved_config.json"):
            assert (rerun / name).read_bytes() == (scored_run / name).read_bytes()

    def test_scored_rows_carry_provider_and_prompt_ids(self, scored_run):
        rows = read_rows(scored_run / "scored.jsonl")
        assert len(rows) == 10
        assert {row["model_id"] for row in rows} == {"hash-mock"}
        assert {row["prompt_id"] for row in rows} == {"claim-0shot+evidence-0shot"}

    def test_header_records_acu_form(self, scored_run):
        assert header_line(scored_run / "scored.jsonl")["acu_form"] == "sum"

    def test_mean_form_is_sum_over_three(self, druid_fixture_paths, replay_store, out_root, scored_run):
        args = score_args(druid_fixture_paths, replay_store, out_root)
        code, stdout, _ = run_cli(*args, "--acu-form", "mean")
        assert code == 0
        mean_run = run_dir_of(stdout)
        assert header_line(mean_run / "scored.jsonl")["acu_form"] == "mean"
        sums = {
            (row["claim_id"], row["evidence_id"]): row["acu"]
            for row in read_rows(scored_run / "scored.jsonl")
        }
        means = {
            (row["claim_id"], row["evidence_id"]): row["acu"]
            for row in read_rows(mean_run / "scored.jsonl")
        }
        assert set(means) == set(sums)
        for key, value in means.items():
            assert value == pytest.approx(sums[key] / 3)


@pytest.fixture(scope="module")
def analysis_run(druid_fixture_paths, scored_run, profile_run, out_root) -> Path:
    _, evidence_path = druid_fixture_paths
    code, stdout, stderr = run_cli(
        "analyze",
        "--scored", str(scored_run / "scored.jsonl"),
        "--evidence", str(evidence_path),
        "--characteristics", str(profile_run / "characteristics.jsonl"),
        "--dataset", "druid",
        "--out", str(out_root),
    )
    assert code == 0, stderr
    assert json.loads(stdout)["outputs"] == ["analysis.json", "grid.json", "grid.csv"]
    return run_dir_of(stdout)


class TestAnalyze:
    def test_analysis_document_shape(self, analysis_run):
        document = json.loads((analysis_run / "analysis.json").read_text())
        assert set(document) == {"meta", "analysis"}
        payload = document["analysis"]
        assert set(payload) == {
            "stratified_acu",
            "prediction_shift",
            "memory_conflicts",
            "agreement",
            "skipped_samples",
        }
        # Every scored row points at stance-annotated evidence in the fixture.
        assert payload["skipped_samples"] == 0
        assert set(payload["agreement"]) == {"relevance", "stance"}

    def test_stratified_acu_covers_fixture_stances(self, analysis_run):
        stratified = json.loads((analysis_run / "analysis.json").read_text())["analysis"][
            "stratified_acu"
        ]
        assert stratified["n"] == 10
        assert stratified["empty_strata"] == []
        assert set(stratified["strata"]) == {
            "supports",
            "insufficient-supports",
            "insufficient-neutral",
            "insufficient-contradictory",
            "insufficient-refutes",
            "refutes",
        }

    def test_memory_conflict_rate_in_unit_interval(self, analysis_run):
        conflicts = json.loads((analysis_run / "analysis.json").read_text())["analysis"][
            "memory_conflicts"
        ]
        assert conflicts["count"] >= 0
        assert 0.0 <= conflicts["rate"] <= 1.0

    def test_grid_schema_and_columns(self, analysis_run):
        grid = json.loads((analysis_run / "grid.json").read_text())["grid"]
        assert tuple(grid["rows"]) == GRID_CHARACTERISTICS
        assert grid["columns"] == [
            "druid|supports",
            "druid|insufficient-supports",
            "druid|insufficient-neutral",
            "druid|insufficient-contradictory",
            "druid|insufficient-refutes",
            "druid|refutes",
        ]
        for row in grid["rows"]:
            assert set(grid["cells"][row]) == set(grid["columns"])

    def test_grid_csv_is_comment_header_then_one_line_per_row(self, analysis_run):
        lines = (analysis_run / "grid.csv").read_text().splitlines()
        assert lines[0].startswith("# config_hash=")
        assert lines[1].split(",")[0] == "characteristic"
        assert len(lines) == 2 + len(GRID_CHARACTERISTICS)


class TestReport:
    def test_report_merges_sibling_artifacts(self, druid_fixture_paths, scored_run, tmp_path):
        _, evidence_path = druid_fixture_paths
        code, stdout, _ = run_cli(
            "analyze",
            "--scored", str(scored_run / "scored.jsonl"),
            "--evidence", str(evidence_path),
            "--out", str(tmp_path),
        )
        assert code == 0
        analysis_run = run_dir_of(stdout)

        staged = tmp_path / "staged"
        staged.mkdir()
        shutil.copy(analysis_run / "analysis.json", staged / "analysis.json")

        code, stdout, stderr = run_cli("report", "--run-dir", str(staged), "--out", str(tmp_path))
        assert code == 0, stderr
        payload = json.loads(stdout)
        assert payload["outputs"] == ["report.json", "report.csv"]
        report_dir = Path(payload["run_dir"])

        report = json.loads((report_dir / "report.json").read_text())
        assert set(report["sections"]) == {"analysis"}
        assert "meta" not in report["sections"]["analysis"]

        lines = (report_dir / "report.csv").read_text().splitlines()
        assert lines[0].startswith("# config_hash=")
        assert lines[1] == "key,value"
        assert any(line.startswith("analysis.analysis.stratified_acu") for line in lines[2:])

    def test_report_requires_existing_directory(self, tmp_path):
        code, _, stderr = run_cli(
            "report", "--run-dir", str(tmp_path / "absent"), "--out", str(tmp_path)
        )
        assert code == 2
        assert json.loads(stderr)["error"] == "ConfigError"


class TestConfigFileDrivenRun:
    def test_flags_override_config_file(self, druid_fixture_paths, tmp_path):
        claims_path, evidence_path = druid_fixture_paths
        config = tmp_path / "run.json"
        config.write_text(
            json.dumps(
                {
                    "claims_path": str(claims_path),
                    "evidence_path": str(evidence_path),
                    "acu_form": "mean",
                    "out_dir": str(tmp_path / "ignored"),
                }
            )
            + "\n"
        )
        code, stdout, _ = run_cli(
            "profile", "--config", str(config), "--out", str(tmp_path / "actual")
        )
        assert code == 0
        run_dir = run_dir_of(stdout)
        assert run_dir.parent == tmp_path / "actual"
        # Settings not overridden on the command line keep config values.
        assert header_line(run_dir / "characteristics.jsonl")["acu_form"] == "mean"
