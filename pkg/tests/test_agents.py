"""Panel recruitment, discussion rounds, verdict parsing, and the feedback loop."""

from __future__ import annotations

import pytest

from clinflow.agents import (
    FeedbackVerdict,
    LoopOutcome,
    PromptLibrary,
    parse_verdict,
    recruit_panel,
    review,
    run_feedback_loop,
)
from clinflow.backends import ScriptedProvider
from clinflow.errors import ConfigurationError
from conftest import make_gateway

LIBRARY = PromptLibrary()


def _panel(stage="diagnosis", department="Surgery"):
    return recruit_panel(stage, department, LIBRARY)


def _approving_provider(candidate="the decision"):
    provider = ScriptedProvider()
    provider.register("diagnosis.general", "a view")
    provider.register("diagnosis.summarizer", candidate)
    provider.register("diagnosis.feedback", "APPROVE")
    return provider


class TestRecruit:
    def test_panel_arity_and_department(self):
        panel = _panel()
        assert len(panel.generals) == 3
        assert all(p.department == "Surgery" for p in panel.generals)
        assert panel.summarizer.department == "Surgery"

    def test_personas_are_distinct_per_specialist(self):
        panel = _panel()
        personas = {p.persona_prompt for p in panel.generals}
        assert len(personas) == 3

    def test_referral_panel_needs_no_department(self):
        panel = recruit_panel("referral", None, LIBRARY)
        assert panel.department is None

    def test_other_stages_require_department(self):
        with pytest.raises(ConfigurationError):
            recruit_panel("diagnosis", None, LIBRARY)

    def test_deterministic_profiles(self):
        assert _panel() == _panel()

    def test_missing_template_is_configuration_error(self, tmp_path):
        with pytest.raises(ConfigurationError):
            recruit_panel("diagnosis", "Surgery", PromptLibrary(tmp_path))


class TestDiscuss:
    def test_round_shape_and_summarizer_last(self):
        gateway = make_gateway(_approving_provider())
        outcome = run_feedback_loop(gateway, _panel(), LIBRARY, context="ctx")
        messages = outcome.transcript.messages
        assert [m.speaker for m in messages] == ["general-1", "general-2", "general-3", "summarizer"]
        assert all(m.round == 1 for m in messages)
        outcome.transcript.validate()

    def test_empty_retrieval_marker_in_prompts(self):
        gateway = make_gateway(_approving_provider())
        run_feedback_loop(gateway, _panel(), LIBRARY, context="ctx", retrieved=())
        chats = [e for e in gateway.transcript.entries if e["kind"] == "chat"]
        panel_prompts = [e["request_text"] for e in chats if not e["tag"].endswith(".feedback")]
        assert all("No similar cases available." in text for text in panel_prompts)

    def test_later_generals_see_earlier_speakers(self):
        provider = ScriptedProvider()
        provider.register("diagnosis.general", replies=["first view", "second view", "third view"])
        provider.register("diagnosis.summarizer", "decision")
        provider.register("diagnosis.feedback", "APPROVE")
        gateway = make_gateway(provider)
        run_feedback_loop(gateway, _panel(), LIBRARY, context="ctx")
        chats = [e for e in gateway.transcript.entries if e["tag"] == "diagnosis.general"]
        assert "first view" not in chats[0]["request_text"]
        assert "first view" in chats[1]["request_text"]
        assert "second view" in chats[2]["request_text"]
        summarizer = [e for e in gateway.transcript.entries if e["tag"] == "diagnosis.summarizer"]
        for view in ("first view", "second view", "third view"):
            assert view in summarizer[0]["request_text"]


class TestVerdictParsing:
    def test_approve(self):
        verdict = parse_verdict("APPROVE")
        assert verdict == FeedbackVerdict(decision="approve")

    def test_revise_with_reasons(self):
        verdict = parse_verdict("REVISE: referral ignores cardiac history; suggest cardiology")
        assert verdict.decision == "revise"
        assert "ignores cardiac history" in verdict.reasons
        assert "cardiology" in verdict.suggestions

    def test_case_insensitive(self):
        assert parse_verdict("approve, looks fine").decision == "approve"

    def test_garbage_unparseable(self):
        assert parse_verdict("The plan feels adequate I suppose") is None

    def test_bare_revise_unparseable(self):
        assert parse_verdict("REVISE") is None


class TestReview:
    def test_scripted_approve(self):
        gateway = make_gateway(_approving_provider())
        verdict = review(gateway, _panel(), LIBRARY, "candidate", "ctx")
        assert verdict.decision == "approve"
        assert not verdict.parse_failure

    def test_garbage_twice_fails_open_with_flag(self):
        provider = _approving_provider()
        provider.register("diagnosis.feedback", "mumble mumble")
        gateway = make_gateway(provider)
        verdict = review(gateway, _panel(), LIBRARY, "candidate", "ctx")
        assert verdict.decision == "approve"
        assert verdict.parse_failure
        feedback_calls = [e for e in gateway.transcript.entries if e["tag"] == "diagnosis.feedback"]
        assert len(feedback_calls) == 2
        assert "could not be parsed" in feedback_calls[1]["request_text"]

    def test_garbage_then_valid_uses_second_reply(self):
        provider = _approving_provider()
        provider.register("diagnosis.feedback", replies=["???", "REVISE: missing labs"])
        gateway = make_gateway(provider)
        verdict = review(gateway, _panel(), LIBRARY, "candidate", "ctx")
        assert verdict.decision == "revise"
        assert not verdict.parse_failure


class TestFeedbackLoop:
    def test_immediate_approve(self):
        gateway = make_gateway(_approving_provider("final answer"))
        outcome = run_feedback_loop(gateway, _panel(), LIBRARY, context="ctx", max_rounds=3)
        assert outcome.rounds_used == 1
        assert outcome.converged
        assert outcome.final_text == "final answer"

    def test_always_revise_hits_round_bound(self):
        provider = _approving_provider()
        provider.register("diagnosis.feedback", "REVISE: never good enough")
        gateway = make_gateway(provider)
        outcome = run_feedback_loop(gateway, _panel(), LIBRARY, context="ctx", max_rounds=3)
        assert outcome.rounds_used == 3
        assert not outcome.converged
        assert len(outcome.verdicts) == 3
        outcome.transcript.validate()

    def test_revise_then_approve_threads_feedback(self):
        provider = _approving_provider()
        provider.register(
            "diagnosis.feedback", replies=["REVISE: consider the imaging findings", "APPROVE"]
        )
        gateway = make_gateway(provider)
        outcome = run_feedback_loop(gateway, _panel(), LIBRARY, context="ctx", max_rounds=3)
        assert outcome.rounds_used == 2
        assert outcome.converged
        round2_prompts = [
            e["request_text"]
            for e in gateway.transcript.entries
            if e["tag"] in ("diagnosis.general", "diagnosis.summarizer")
        ][4:]
        assert all("consider the imaging findings" in p for p in round2_prompts)

    def test_context_monotonicity_across_rounds(self):
        provider = _approving_provider()
        provider.register(
            "diagnosis.feedback",
            replies=["REVISE: reason alpha", "REVISE: reason beta", "REVISE: reason gamma"],
        )
        gateway = make_gateway(provider)
        outcome = run_feedback_loop(gateway, _panel(), LIBRARY, context="ctx", max_rounds=3)
        assert outcome.rounds_used == 3
        general_prompts = [
            e["request_text"] for e in gateway.transcript.entries if e["tag"] == "diagnosis.general"
        ]
        round3_first = general_prompts[6]
        assert "reason alpha" in round3_first
        assert "reason beta" in round3_first

    def test_auto_approve_skips_reviewer(self):
        gateway = make_gateway(_approving_provider())
        outcome = run_feedback_loop(
            gateway, _panel(), LIBRARY, context="ctx", max_rounds=3, auto_approve=True
        )
        assert outcome.rounds_used == 1
        assert outcome.converged
        assert outcome.auto_approved
        assert not any(e["tag"].endswith(".feedback") for e in gateway.transcript.entries)

    def test_max_rounds_validation(self):
        gateway = make_gateway(_approving_provider())
        with pytest.raises(ConfigurationError):
            run_feedback_loop(gateway, _panel(), LIBRARY, context="ctx", max_rounds=0)

    def test_outcome_roundtrip(self):
        gateway = make_gateway(_approving_provider())
        outcome = run_feedback_loop(gateway, _panel(), LIBRARY, context="ctx")
        again = LoopOutcome.from_dict(outcome.as_dict())
        assert again.as_dict() == outcome.as_dict()
