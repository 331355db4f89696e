"""Prompt templates, logprob extraction, and the record/replay scorer."""

import json
import math
import re
from dataclasses import replace

import pytest

from contextmeter import lm
from contextmeter.errors import (
    InvariantViolation,
    MissingSlotValue,
    ProviderError,
    ReplayMiss,
    StoreCorruption,
    ZeroMass,
)
from contextmeter.model import PromptMode, VerdictLabel

from conftest import (
    HashLogprobProvider,
    PoisonProvider,
    UniformLogprobProvider,
    make_claim,
    make_evidence,
)

FULL_MAP = {
    "True": VerdictLabel.TRUE,
    "None": VerdictLabel.NONE,
    "False": VerdictLabel.FALSE,
}


class TestBuiltinTemplates:
    def test_six_templates(self):
        assert set(lm.builtin_templates()) == set(lm.BUILTIN_TEMPLATE_IDS)
        assert len(lm.BUILTIN_TEMPLATE_IDS) == 6

    def test_modes_and_shots(self):
        templates = lm.builtin_templates()
        expected = {
            "claim-0shot": (PromptMode.CLAIM_ONLY, 0),
            "evidence-0shot": (PromptMode.CLAIM_EVIDENCE, 0),
            "llama-claim-3shot": (PromptMode.CLAIM_ONLY, 3),
            "llama-evidence-3shot": (PromptMode.CLAIM_EVIDENCE, 3),
            "pythia-claim-3shot": (PromptMode.CLAIM_ONLY, 3),
            "pythia-evidence-3shot": (PromptMode.CLAIM_EVIDENCE, 3),
        }
        for template_id, (mode, shots) in expected.items():
            template = templates[template_id]
            assert template.mode is mode
            assert template.shots == shots
            assert template.body.endswith("Answer:")
            assert len(template.verbalizer_map) == 3

    def test_evidence_templates_preserve_source_quirks(self):
        body = lm.builtin_templates()["llama-evidence-3shot"].body
        # exact exemplar text: typographic quotes and a second exemplar whose
        # Claim/Evidence lines are adjacent without a blank line
        assert "“" in body
        assert "$31.4" in body
        assert re.search(r'Claim: "[^"]+"\nEvidence:', body)

    def test_llama_evidence_verbalizer(self):
        template = lm.builtin_templates()["llama-evidence-3shot"]
        assert template.verbalizer_map == {
            "Support": VerdictLabel.TRUE,
            "None": VerdictLabel.NONE,
            "Refute": VerdictLabel.FALSE,
        }

    def test_unknown_template_id(self):
        with pytest.raises(InvariantViolation):
            lm.load_template("nonexistent-prompt")


class TestTemplateValidation:
    def _make(self, **kwargs):
        defaults = dict(
            id="x",
            mode=PromptMode.CLAIM_ONLY,
            shots=0,
            body='Claim: "<claim>"\n\nAnswer:',
            verbalizer_map=dict(FULL_MAP),
        )
        defaults.update(kwargs)
        return lm.PromptTemplate(**defaults)

    def test_valid(self):
        assert self._make().id == "x"

    def test_shots_restricted(self):
        with pytest.raises(InvariantViolation):
            self._make(shots=1)

    def test_verbalizer_must_cover_canonical_labels(self):
        with pytest.raises(InvariantViolation):
            self._make(verbalizer_map={"True": VerdictLabel.TRUE})
        with pytest.raises(InvariantViolation):
            self._make(
                verbalizer_map={
                    "Yes": VerdictLabel.TRUE,
                    "No": VerdictLabel.FALSE,
                }
            )
        # several surface forms may map onto one canonical label
        template = self._make(
            verbalizer_map={
                "Yes": VerdictLabel.TRUE,
                "Maybe": VerdictLabel.NONE,
                "No": VerdictLabel.FALSE,
                "Nope": VerdictLabel.FALSE,
            }
        )
        assert len(template.verbalizer_map) == 4

    def test_claim_only_must_not_take_evidence_slot(self):
        with pytest.raises(InvariantViolation):
            self._make(body='Claim: "<claim>" <evidence>\n\nAnswer:')

    def test_evidence_mode_requires_evidence_slot(self):
        with pytest.raises(InvariantViolation):
            self._make(
                mode=PromptMode.CLAIM_EVIDENCE,
                body='Claim: "<claim>"\n\nAnswer:',
            )


class TestRenderPrompt:
    def test_claimant_lines_present(self):
        template = lm.builtin_templates()["llama-claim-3shot"]
        prompt = lm.render_prompt(template, make_claim(text="The sky is green."))
        assert prompt.count("Claimant:") == 4  # three exemplars + the target
        assert 'Claim: "The sky is green."' in prompt
        assert prompt.endswith("Answer:")

    def test_claimant_dropped_when_disabled(self):
        template = replace(
            lm.builtin_templates()["llama-claim-3shot"], include_claimant=False
        )
        prompt = lm.render_prompt(template, make_claim(claimant=None))
        assert "Claimant:" not in prompt
        # dropping the line must not leave doubled blank lines behind
        assert "\n\n\n" not in prompt

    def test_claimant_from_record(self):
        template = lm.builtin_templates()["llama-claim-3shot"]
        prompt = lm.render_prompt(template, make_claim(claimant="Jane Roe"))
        assert "Claimant: Jane Roe" in prompt

    def test_evidence_template(self):
        template = lm.builtin_templates()["llama-evidence-3shot"]
        prompt = lm.render_prompt(
            template,
            make_claim(text="The sky is green."),
            evidence=make_evidence(text="Observations show a blue sky."),
        )
        assert 'Evidence: "Observations show a blue sky."' in prompt
        assert prompt.endswith("Answer:")

    def test_evidence_rejected_for_claim_only(self):
        template = lm.builtin_templates()["llama-claim-3shot"]
        with pytest.raises(InvariantViolation):
            lm.render_prompt(template, make_claim(), evidence=make_evidence())

    def test_missing_evidence_rejected(self):
        template = lm.builtin_templates()["llama-evidence-3shot"]
        with pytest.raises(MissingSlotValue):
            lm.render_prompt(template, make_claim())

    def test_missing_claimant_rejected(self):
        template = lm.builtin_templates()["llama-claim-3shot"]
        with pytest.raises(MissingSlotValue):
            lm.render_prompt(template, make_claim(claimant=None))

    def test_plain_string_inputs(self):
        template = lm.builtin_templates()["evidence-0shot"]
        prompt = lm.render_prompt(
            template, "The sky is green.", evidence="It is blue.",
            claimant="Jane Roe",
        )
        assert 'Claim: "The sky is green."' in prompt

    def test_prompt_hash_stable(self):
        assert lm.prompt_hash("abc") == lm.prompt_hash("abc")
        assert lm.prompt_hash("abc") != lm.prompt_hash("abd")


class TestSurfaceMass:
    def test_exact_plus_leading_space(self):
        mass = lm.surface_label_mass({"True": 0.1, " True": 0.05, "Tru": 0.2},
                                     "True")
        assert mass == pytest.approx(0.15)

    def test_longest_prefix_fallback(self):
        # the full label never appears as a token; fall back to its prefixes
        mass = lm.surface_label_mass(
            {"Supp": 0.3, " Sup": 0.1, "None": 0.2, "Ref": 0.1}, "Support"
        )
        assert mass == pytest.approx(0.4)

    def test_absent_label_is_zero(self):
        assert lm.surface_label_mass({"Other": 1.0}, "True") == 0.0


class TestVerdictProbabilities:
    def test_renormalizes_label_mass(self):
        class Fixed:
            provider_id = "fixed"

            def next_token_distribution(self, prompt):
                return {"True": 0.2, "False": 0.6, "None": 0.1, "the": 0.1}

            def token_logprobs(self, text):
                return [-1.0]

        probs, surface = lm.verdict_probabilities(
            Fixed(), "p", FULL_MAP, PromptMode.CLAIM_ONLY
        )
        assert probs.p_true == pytest.approx(0.2 / 0.9)
        assert probs.p_none == pytest.approx(0.1 / 0.9)
        assert probs.p_false == pytest.approx(0.6 / 0.9)
        assert surface == {"True": 0.2, "None": 0.1, "False": 0.6}

    def test_verbalizer_reroutes_surface_labels(self):
        class Fixed:
            provider_id = "fixed"

            def next_token_distribution(self, prompt):
                return {"Support": 0.5, "Refute": 0.3, "None": 0.2}

            def token_logprobs(self, text):
                return [-1.0]

        verbalizer = {
            "Support": VerdictLabel.TRUE,
            "None": VerdictLabel.NONE,
            "Refute": VerdictLabel.FALSE,
        }
        probs, surface = lm.verdict_probabilities(
            Fixed(), "p", verbalizer, PromptMode.CLAIM_EVIDENCE
        )
        assert probs.p_true == pytest.approx(0.5)
        assert probs.p_false == pytest.approx(0.3)
        assert surface == {"Support": 0.5, "None": 0.2, "Refute": 0.3}

    def test_zero_mass_rejected(self):
        class Empty:
            provider_id = "empty"

            def next_token_distribution(self, prompt):
                return {"the": 0.8, "a": 0.2}

            def token_logprobs(self, text):
                return [-1.0]

        with pytest.raises(ZeroMass):
            lm.verdict_probabilities(Empty(), "p", FULL_MAP, PromptMode.CLAIM_ONLY)


class TestPerplexity:
    def test_uniform_vocabulary(self):
        provider = UniformLogprobProvider(vocab_size=50)
        assert lm.perplexity(provider, "one two three four") == pytest.approx(50.0)

    def test_repeat_invariance(self):
        provider = UniformLogprobProvider(vocab_size=10)
        once = lm.perplexity(provider, "alpha beta")
        thrice = lm.perplexity(provider, "alpha beta " * 3)
        assert once == pytest.approx(thrice)

    def test_empty_text_rejected(self):
        from contextmeter.errors import DegenerateText

        with pytest.raises(DegenerateText):
            lm.perplexity(UniformLogprobProvider(), "  ")

    def test_matches_direct_formula(self):
        provider = HashLogprobProvider()
        text = "some words to measure"
        logprobs = provider.token_logprobs(text)
        expected = math.exp(-math.fsum(logprobs) / len(logprobs))
        assert lm.perplexity(provider, text) == pytest.approx(expected)


class TestScoreRecord:
    def _record(self):
        provider = HashLogprobProvider()
        scorer = lm.VerdictScorer(provider=provider, mode="passthrough")
        return scorer.score(lm.builtin_templates()["claim-0shot"], make_claim())

    def test_round_trip(self):
        record = self._record()
        clone = lm.ScoreRecord.from_dict(record.to_dict())
        assert clone == record

    def test_checksum_detects_tampering(self):
        record = self._record()
        data = record.to_dict()
        data["surface_probs"]["True"] = 0.42
        with pytest.raises(StoreCorruption):
            lm.ScoreRecord.from_dict(data)


class TestReplayStore:
    def test_record_then_replay_identical(self, tmp_path):
        store_path = tmp_path / "store.jsonl"
        provider = HashLogprobProvider()
        template = lm.builtin_templates()["claim-0shot"]
        claim = make_claim(text="The sky is green.")

        recorder = lm.VerdictScorer(
            provider=provider, store=lm.ReplayStore(store_path), mode="record"
        )
        recorded = recorder.score(template, claim)

        replayer = lm.VerdictScorer(
            store=lm.ReplayStore(store_path), mode="replay",
            provider_id=provider.provider_id,
        )
        replayed = replayer.score(template, claim)
        assert replayed.probs == recorded.probs
        assert replayed.surface_probs == recorded.surface_probs
        assert replayed.checksum() == recorded.checksum()

    def test_replay_never_contacts_provider(self, tmp_path):
        store_path = tmp_path / "store.jsonl"
        provider = HashLogprobProvider()
        template = lm.builtin_templates()["claim-0shot"]
        claim = make_claim()
        lm.VerdictScorer(
            provider=provider, store=lm.ReplayStore(store_path), mode="record"
        ).score(template, claim)

        poisoned = lm.VerdictScorer(
            provider=PoisonProvider(), store=lm.ReplayStore(store_path),
            mode="replay", provider_id=provider.provider_id,
        )
        poisoned.score(template, claim)  # PoisonProvider raises if touched

    def test_replay_miss(self, tmp_path):
        store_path = tmp_path / "store.jsonl"
        provider = HashLogprobProvider()
        template = lm.builtin_templates()["claim-0shot"]
        lm.VerdictScorer(
            provider=provider, store=lm.ReplayStore(store_path), mode="record"
        ).score(template, make_claim(text="Seen claim."))

        replayer = lm.VerdictScorer(
            store=lm.ReplayStore(store_path), mode="replay",
            provider_id=provider.provider_id,
        )
        with pytest.raises(ReplayMiss):
            replayer.score(template, make_claim(text="Unseen claim."))

    def test_tampered_store_rejected(self, tmp_path):
        store_path = tmp_path / "store.jsonl"
        provider = HashLogprobProvider()
        template = lm.builtin_templates()["claim-0shot"]
        record = lm.VerdictScorer(
            provider=provider, store=lm.ReplayStore(store_path), mode="record"
        ).score(template, make_claim())

        lines = store_path.read_text(encoding="utf-8").splitlines()
        payload = json.loads(lines[-1])
        payload["surface_probs"]["True"] = 0.999
        store_path.write_text(
            "\n".join(lines[:-1] + [json.dumps(payload)]) + "\n", encoding="utf-8"
        )
        with pytest.raises(StoreCorruption):
            lm.ReplayStore(store_path).get(
                record.prompt_hash, provider.provider_id
            )

    def test_truncated_line_rejected(self, tmp_path):
        store_path = tmp_path / "store.jsonl"
        store_path.write_text('{"prompt_hash": "ab\n', encoding="utf-8")
        with pytest.raises(StoreCorruption):
            lm.ReplayStore(store_path)

    def test_missing_file_is_empty(self, tmp_path):
        store = lm.ReplayStore(tmp_path / "absent.jsonl")
        assert len(store) == 0


class TestVerdictScorer:
    def test_passthrough_requires_provider(self):
        with pytest.raises(InvariantViolation):
            lm.VerdictScorer(mode="passthrough")

    def test_unknown_mode_rejected(self):
        with pytest.raises(InvariantViolation):
            lm.VerdictScorer(
                provider=UniformLogprobProvider(), mode="cached"
            )

    def test_passthrough_does_not_write(self, tmp_path):
        store_path = tmp_path / "store.jsonl"
        scorer = lm.VerdictScorer(
            provider=HashLogprobProvider(), store=lm.ReplayStore(store_path),
            mode="passthrough",
        )
        scorer.score(lm.builtin_templates()["claim-0shot"], make_claim())
        assert not store_path.exists() or len(lm.ReplayStore(store_path)) == 0

    def test_none_claimant_falls_back_to_claimantless_prompt(self):
        provider = HashLogprobProvider()
        scorer = lm.VerdictScorer(provider=provider, mode="passthrough")
        template = lm.builtin_templates()["llama-claim-3shot"]
        record = scorer.score(template, make_claim(claimant=None))
        assert record.provider_id == provider.provider_id


class TestHttpProvider:
    def test_auth_env_var_required(self, monkeypatch):
        monkeypatch.delenv("TEST_LM_TOKEN", raising=False)
        with pytest.raises(ProviderError):
            lm.HttpLogprobProvider(
                "https://lm.example/api", "test-model",
                auth_env_var="TEST_LM_TOKEN",
            )

    def test_token_read_from_environment(self, monkeypatch):
        monkeypatch.setenv("TEST_LM_TOKEN", "sekrit")
        provider = lm.HttpLogprobProvider(
            "https://lm.example/api", "test-model", auth_env_var="TEST_LM_TOKEN"
        )
        assert provider.provider_id == "test-model"
