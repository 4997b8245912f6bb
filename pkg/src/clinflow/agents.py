"""Agent roles and the iterative discuss -> summarize -> review loop.

Every pipeline stage runs the same machinery: a recruited panel of three
same-department specialists speaks in turn, a summarizer issues the candidate
decision, and a reviewing physician either approves it or sends it back with
reasons. The loop stops on approval or after a bounded number of rounds.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Sequence

from .backends import Gateway, user_request
from .cases import ImageRef
from .errors import ConfigurationError
from .store import ScoredCase, render_snippets

NO_RETRIEVAL_MARKER = "No similar cases available."
CLOSING_TOKEN = "[CONSULTATION_COMPLETE]"

STRICT_VERDICT_SUFFIX = (
    "\n\nYour previous reply could not be parsed. Reply again starting with the single "
    "word APPROVE, or with REVISE: followed by your reasons."
)


class Role(str, Enum):
    GENERAL = "general"
    SUMMARIZER = "summarizer"
    FEEDBACK = "feedback"
    PATIENT = "patient"
    EXTRACTOR = "extractor"


@dataclass(frozen=True)
class AgentProfile:
    role: Role
    department: str | None
    persona_prompt: str
    tag: str


@dataclass(frozen=True)
class Panel:
    stage: str
    department: str | None
    generals: tuple[AgentProfile, AgentProfile, AgentProfile]
    summarizer: AgentProfile
    feedback: AgentProfile


@dataclass(frozen=True)
class AgentMessage:
    speaker: str
    round: int
    text: str

    def as_dict(self) -> dict:
        return {"speaker": self.speaker, "round": self.round, "text": self.text}

    @classmethod
    def from_dict(cls, raw: dict) -> "AgentMessage":
        return cls(speaker=raw["speaker"], round=raw["round"], text=raw["text"])


def retrieval_refs(scored: Sequence[ScoredCase]) -> tuple[dict, ...]:
    """Compact references to retrieved cases, suitable for transcripts and exports."""
    return tuple(
        {
            "case_id": s.record.case_id,
            "similarity": round(s.similarity, 6),
            "tier": s.tier.value,
            "department": s.record.department,
        }
        for s in scored
    )


@dataclass
class PanelTranscript:
    """Ordered record of panel utterances plus the retrieval context they saw."""

    messages: list[AgentMessage] = field(default_factory=list)
    retrieved_refs: tuple[dict, ...] = ()

    def round_count(self) -> int:
        return max((m.round for m in self.messages), default=0)

    def validate(self, panel_size: int = 3) -> None:
        rounds = self.round_count()
        for r in range(1, rounds + 1):
            batch = [m for m in self.messages if m.round == r]
            speakers = [m.speaker for m in batch]
            if len([s for s in speakers if s.startswith("general")]) != panel_size:
                raise AssertionError(f"round {r} is missing general-agent messages")
            if speakers[-1] != "summarizer" or speakers.count("summarizer") != 1:
                raise AssertionError(f"round {r} must end with one summarizer message")

    def as_dict(self) -> dict:
        return {
            "messages": [m.as_dict() for m in self.messages],
            "retrieved": list(self.retrieved_refs),
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "PanelTranscript":
        return cls(
            messages=[AgentMessage.from_dict(m) for m in raw.get("messages", [])],
            retrieved_refs=tuple(raw.get("retrieved", [])),
        )


@dataclass(frozen=True)
class FeedbackVerdict:
    decision: str  # "approve" | "revise"
    reasons: str = ""
    suggestions: str = ""
    parse_failure: bool = False

    def as_dict(self) -> dict:
        return {
            "decision": self.decision,
            "reasons": self.reasons,
            "suggestions": self.suggestions,
            "parse_failure": self.parse_failure,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "FeedbackVerdict":
        return cls(
            decision=raw["decision"],
            reasons=raw.get("reasons", ""),
            suggestions=raw.get("suggestions", ""),
            parse_failure=raw.get("parse_failure", False),
        )


@dataclass(frozen=True)
class LoopOutcome:
    final_text: str
    rounds_used: int
    converged: bool
    transcript: PanelTranscript
    verdicts: tuple[FeedbackVerdict, ...] = ()
    auto_approved: bool = False

    def as_dict(self) -> dict:
        return {
            "final_text": self.final_text,
            "rounds_used": self.rounds_used,
            "converged": self.converged,
            "auto_approved": self.auto_approved,
            "verdicts": [v.as_dict() for v in self.verdicts],
            "transcript": self.transcript.as_dict(),
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "LoopOutcome":
        return cls(
            final_text=raw["final_text"],
            rounds_used=raw["rounds_used"],
            converged=raw["converged"],
            transcript=PanelTranscript.from_dict(raw.get("transcript", {})),
            verdicts=tuple(FeedbackVerdict.from_dict(v) for v in raw.get("verdicts", [])),
            auto_approved=raw.get("auto_approved", False),
        )


class PromptLibrary:
    """Loads prompt templates from a directory or the packaged defaults.

    Each template file holds the system persona, a line with just `---`,
    then the user-message template with its named placeholders.
    """

    def __init__(self, directory: str | Path | None = None):
        self._directory = Path(directory) if directory else None
        self._cache: dict[str, tuple[str, str]] = {}

    def _read(self, name: str) -> str:
        if self._directory is not None:
            path = self._directory / f"{name}.txt"
            if not path.exists():
                raise ConfigurationError(f"missing prompt template {path}")
            return path.read_text(encoding="utf-8")
        ref = resources.files("clinflow").joinpath(f"data/templates/{name}.txt")
        try:
            return ref.read_text(encoding="utf-8")
        except FileNotFoundError as exc:
            raise ConfigurationError(f"missing prompt template {name!r}") from exc

    def get(self, name: str) -> tuple[str, str]:
        """Return (system persona template, user message template)."""
        if name not in self._cache:
            raw = self._read(name)
            if "\n---\n" in raw:
                system, user = raw.split("\n---\n", 1)
            else:
                system, user = "", raw
            self._cache[name] = (system.strip("\n"), user.strip("\n"))
        return self._cache[name]

    def system_only(self, name: str) -> str:
        return self.get(name)[0]


def recruit_panel(stage: str, department: str | None, library: PromptLibrary,
                  tag: str | None = None) -> Panel:
    """Build three general profiles, a summarizer, and the stage's reviewer.

    Profiles are deterministic given (stage, department): the three generals
    differ only by their specialist index. Stage `referral` recruits triage
    personas with no department binding.
    """
    tag = tag or stage
    if stage != "referral" and not department:
        raise ConfigurationError(f"stage {stage!r} requires a department for recruitment")
    general_sys, _ = library.get(f"{stage}_general")
    summarizer_sys, _ = library.get(f"{stage}_summarizer")
    feedback_sys, _ = library.get(f"{stage}_feedback")
    dept_value = department or ""
    generals = tuple(
        AgentProfile(
            role=Role.GENERAL,
            department=department,
            persona_prompt=general_sys.format(specialist_index=i, department=dept_value),
            tag=f"{tag}.general",
        )
        for i in (1, 2, 3)
    )
    return Panel(
        stage=stage,
        department=department,
        generals=generals,  # type: ignore[arg-type]
        summarizer=AgentProfile(
            role=Role.SUMMARIZER,
            department=department,
            persona_prompt=summarizer_sys.format(department=dept_value),
            tag=f"{tag}.summarizer",
        ),
        feedback=AgentProfile(
            role=Role.FEEDBACK,
            department=department,
            persona_prompt=feedback_sys.format(department=dept_value),
            tag=f"{tag}.feedback",
        ),
    )


def _discussion_block(messages: Sequence[AgentMessage], round_no: int) -> str:
    said = [m for m in messages if m.round == round_no and m.speaker != "summarizer"]
    if not said:
        return ""
    lines = [f"Specialist {m.speaker.split('-')[-1]}: {m.text}" for m in said]
    return "Panel discussion so far:\n" + "\n".join(lines) + "\n\n"


def discuss(
    gateway: Gateway,
    panel: Panel,
    library: PromptLibrary,
    context: str,
    retrieved: Sequence[ScoredCase],
    feedback_block: str,
    transcript: PanelTranscript,
    round_no: int,
    case_id: str = "",
    images: Sequence[ImageRef] = (),
) -> str:
    """Run one discussion round; returns the summarizer's candidate decision."""
    snippets = render_snippets(tuple(retrieved))
    _, general_user = library.get(f"{panel.stage}_general")
    _, summarizer_user = library.get(f"{panel.stage}_summarizer")
    for i, profile in enumerate(panel.generals, start=1):
        prompt = general_user.format(
            context=context,
            retrieved_cases=snippets,
            feedback=feedback_block,
            discussion=_discussion_block(transcript.messages, round_no),
        )
        response = gateway.chat(
            user_request(profile.persona_prompt, prompt, profile.tag, images=images),
            role=Role.GENERAL.value,
            case_id=case_id,
        )
        transcript.messages.append(AgentMessage(f"general-{i}", round_no, response.text))
    prompt = summarizer_user.format(
        context=context,
        retrieved_cases=snippets,
        feedback=feedback_block,
        discussion=_discussion_block(transcript.messages, round_no),
    )
    response = gateway.chat(
        user_request(panel.summarizer.persona_prompt, prompt, panel.summarizer.tag, images=images),
        role=Role.SUMMARIZER.value,
        case_id=case_id,
    )
    transcript.messages.append(AgentMessage("summarizer", round_no, response.text))
    return response.text


_VERDICT_RE = re.compile(r"^\s*(APPROVE|REVISE)\b[:,.]?\s*(.*)$", re.IGNORECASE | re.DOTALL)


def parse_verdict(text: str) -> FeedbackVerdict | None:
    match = _VERDICT_RE.match(text)
    if not match:
        return None
    word = match.group(1).upper()
    remainder = match.group(2).strip()
    if word == "APPROVE":
        return FeedbackVerdict(decision="approve", suggestions=remainder)
    if not remainder:
        return None  # a bare REVISE carries no usable signal
    reasons = remainder
    suggestions = ""
    lowered = remainder.lower()
    idx = lowered.find("suggest")
    if idx > 0:
        suggestions = remainder[idx:].strip()
    return FeedbackVerdict(decision="revise", reasons=reasons, suggestions=suggestions)


def review(
    gateway: Gateway,
    panel: Panel,
    library: PromptLibrary,
    candidate: str,
    downstream_context: str,
    case_id: str = "",
) -> FeedbackVerdict:
    """One reviewer call; a second unparseable reply fails open to approval."""
    _, feedback_user = library.get(f"{panel.stage}_feedback")
    prompt = feedback_user.format(context=downstream_context, candidate=candidate)
    for attempt in (1, 2):
        response = gateway.chat(
            user_request(panel.feedback.persona_prompt, prompt, panel.feedback.tag),
            role=Role.FEEDBACK.value,
            case_id=case_id,
        )
        verdict = parse_verdict(response.text)
        if verdict is not None:
            return verdict
        prompt = prompt + STRICT_VERDICT_SUFFIX
    return FeedbackVerdict(decision="approve", parse_failure=True)


def run_feedback_loop(
    gateway: Gateway,
    panel: Panel,
    library: PromptLibrary,
    context: str,
    retrieved: Sequence[ScoredCase] = (),
    downstream_context: str = "",
    max_rounds: int = 3,
    auto_approve: bool = False,
    case_id: str = "",
    images: Sequence[ImageRef] = (),
) -> LoopOutcome:
    """Repeat discuss -> review until approval or the round budget is spent.

    On a revise verdict the reasons and suggestions are appended to the next
    round's feedback block, so every earlier verdict stays visible in later
    rounds. The final text is the last candidate regardless of convergence.
    """
    if max_rounds < 1:
        raise ConfigurationError("max_rounds must be at least 1")
    transcript = PanelTranscript(retrieved_refs=retrieval_refs(tuple(retrieved)))
    verdicts: list[FeedbackVerdict] = []
    feedback_block = ""
    candidate = ""
    converged = False
    rounds_used = 0
    for round_no in range(1, max_rounds + 1):
        rounds_used = round_no
        candidate = discuss(
            gateway,
            panel,
            library,
            context,
            retrieved,
            feedback_block,
            transcript,
            round_no,
            case_id=case_id,
            images=images,
        )
        if auto_approve:
            converged = True
            break
        verdict = review(gateway, panel, library, candidate, downstream_context or context,
                         case_id=case_id)
        verdicts.append(verdict)
        if verdict.decision == "approve":
            converged = True
            break
        feedback_block += (
            f"Reviewer feedback (round {round_no}): {verdict.reasons}"
            + (f" Suggestions: {verdict.suggestions}" if verdict.suggestions else "")
            + "\n\n"
        )
    return LoopOutcome(
        final_text=candidate,
        rounds_used=rounds_used,
        converged=converged,
        transcript=transcript,
        verdicts=tuple(verdicts),
        auto_approved=auto_approve,
    )


def build_patient_profile(case, library: PromptLibrary) -> AgentProfile:
    """Simulated patient persona: knows its own record, never the outcome fields."""
    persona_template = library.get("patient")[0] or library.get("patient")[1]
    persona = persona_template.format(
        age=case.age,
        sex=case.sex,
        chief_complaint=case.chief_complaint,
        patient_description=case.patient_description,
        symptom_description=case.symptom_description,
        patient_history=case.patient_history,
    )
    return AgentProfile(role=Role.PATIENT, department=None, persona_prompt=persona,
                        tag="history.patient")


def build_doctor_profile(department: str, library: PromptLibrary) -> AgentProfile:
    system, _ = library.get("history_doctor")
    return AgentProfile(
        role=Role.SUMMARIZER,
        department=department,
        persona_prompt=system.format(department=department),
        tag="history.doctor",
    )


def build_extractor_profile(library: PromptLibrary) -> AgentProfile:
    system, _ = library.get("extractor")
    return AgentProfile(role=Role.EXTRACTOR, department=None, persona_prompt=system,
                        tag="history.extractor")
