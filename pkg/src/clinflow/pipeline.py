"""Five-stage case pipeline: referral, history-taking, examination, diagnosis, treatment.

Each stage's predicted output is threaded into the next stage's context.
Five ablation switches reshape the run: personalization (patient-specific
fields in contexts), sequentiality (predicted vs gold upstream inputs),
interactivity (live dialogue vs direct injection), feedback (review loop vs
single auto-approved round), and rag (case retrieval vs an empty marker).
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .agents import (
    CLOSING_TOKEN,
    LoopOutcome,
    Panel,
    PromptLibrary,
    Role,
    build_doctor_profile,
    build_extractor_profile,
    build_patient_profile,
    recruit_panel,
    run_feedback_loop,
)
from .backends import ChatRequest, Gateway, Turn, user_request
from .cases import ClinicalCase
from .errors import ConfigurationError, NotInVocabulary, TransportError
from .store import CaseStore, ScoredCase, render_snippets
from .vocab import ItemCategory, Vocabularies

STAGES = ("referral", "history", "examination", "diagnosis", "treatment")

VACUOUS_REPORT = "No imaging performed."

PROFILE_PREFIX = "Patient profile:"
HISTORY_PREFIX = "Patient history:"
REFERRAL_PREFIX = "Referred department:"
EXAMS_PREFIX = "Requested examinations:"
REPORT_PREFIX = "Imaging report:"
DIAGNOSIS_PREFIX = "Working diagnosis:"
SYMPTOM_PREFIX = "Symptom summary:"


@dataclass(frozen=True)
class AblationFlags:
    personalization: bool = True
    sequentiality: bool = True
    interactivity: bool = True
    feedback: bool = True
    rag: bool = True

    def as_dict(self) -> dict:
        return {
            "personalization": self.personalization,
            "sequentiality": self.sequentiality,
            "interactivity": self.interactivity,
            "feedback": self.feedback,
            "rag": self.rag,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "AblationFlags":
        return cls(**{k: bool(v) for k, v in raw.items()})


@dataclass(frozen=True)
class RunOptions:
    flags: AblationFlags = AblationFlags()
    max_rounds: int = 3
    turn_budget: int = 8
    retrieval_k: int = 3
    reingest: bool = False

    def __post_init__(self) -> None:
        if self.max_rounds < 1:
            raise ConfigurationError("max_rounds must be at least 1")
        if self.turn_budget < 1:
            raise ConfigurationError("turn_budget must be at least 1")


@dataclass
class PipelineEnv:
    """Everything a run needs: backends, retrieval store, vocabularies, prompts."""

    gateway: Gateway
    vocabs: Vocabularies
    library: PromptLibrary
    options: RunOptions = RunOptions()
    store: CaseStore | None = None

    def __post_init__(self) -> None:
        if self.options.flags.rag and self.store is None:
            raise ConfigurationError("rag is enabled but no case store is configured")

    def config_fingerprint(self) -> str:
        payload = {
            "flags": self.options.flags.as_dict(),
            "max_rounds": self.options.max_rounds,
            "turn_budget": self.options.turn_budget,
            "retrieval_k": self.options.retrieval_k,
            "provider": self.gateway.provider_for("default").provider_id,
            "vocab": self.vocabs.content_hash,
        }
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:12]

    def retrieve(self, query: str, department: str | None, case_id: str) -> tuple[ScoredCase, ...]:
        if not self.options.flags.rag or self.store is None:
            return ()
        result = self.store.retrieve(query, department=department, k=self.options.retrieval_k)
        return result.cases


# ---------------------------------------------------------------------------
# Stage payloads and run records
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DialogueState:
    turns: tuple[tuple[str, str], ...]
    turn_budget: int
    extracted_items: tuple[str, ...]

    def as_dict(self) -> dict:
        return {
            "turns": [list(t) for t in self.turns],
            "turn_budget": self.turn_budget,
            "extracted_items": list(self.extracted_items),
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "DialogueState":
        return cls(
            turns=tuple((q, a) for q, a in raw.get("turns", [])),
            turn_budget=raw.get("turn_budget", 0),
            extracted_items=tuple(raw.get("extracted_items", [])),
        )


@dataclass(frozen=True)
class ReferralPayload:
    l1: str
    l2: tuple[str, ...]

    def as_dict(self) -> dict:
        return {"l1": self.l1, "l2": list(self.l2)}


@dataclass(frozen=True)
class HistoryPayload:
    items: tuple[str, ...]
    unmatched: tuple[str, ...]
    dialogue: DialogueState | None

    def as_dict(self) -> dict:
        return {
            "items": list(self.items),
            "unmatched": list(self.unmatched),
            "dialogue": self.dialogue.as_dict() if self.dialogue else None,
        }


@dataclass(frozen=True)
class ExaminationPayload:
    report: str
    vacuous: bool

    def as_dict(self) -> dict:
        return {"report": self.report, "vacuous": self.vacuous}


@dataclass(frozen=True)
class DiagnosisPayload:
    text: str

    def as_dict(self) -> dict:
        return {"text": self.text}


@dataclass(frozen=True)
class TreatmentPayload:
    items: tuple[str, ...]
    unmatched: tuple[str, ...]

    def as_dict(self) -> dict:
        return {"items": list(self.items), "unmatched": list(self.unmatched)}


def _payload_from_dict(stage: str, raw: dict):
    if stage == "referral":
        return ReferralPayload(l1=raw.get("l1", ""), l2=tuple(raw.get("l2", [])))
    if stage == "history":
        dialogue = raw.get("dialogue")
        return HistoryPayload(
            items=tuple(raw.get("items", [])),
            unmatched=tuple(raw.get("unmatched", [])),
            dialogue=DialogueState.from_dict(dialogue) if dialogue else None,
        )
    if stage == "examination":
        return ExaminationPayload(report=raw.get("report", ""), vacuous=raw.get("vacuous", False))
    if stage == "diagnosis":
        return DiagnosisPayload(text=raw.get("text", ""))
    if stage == "treatment":
        return TreatmentPayload(
            items=tuple(raw.get("items", [])), unmatched=tuple(raw.get("unmatched", []))
        )
    raise ValueError(f"unknown stage {stage!r}")


@dataclass(frozen=True)
class StageOutput:
    stage: str
    payload: object
    loops: tuple[LoopOutcome, ...]
    context_text: str
    elapsed: float
    detail: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            "stage": self.stage,
            "payload": self.payload.as_dict(),
            "loops": [loop.as_dict() for loop in self.loops],
            "context_text": self.context_text,
            "elapsed": round(self.elapsed, 6),
            "detail": self.detail,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "StageOutput":
        return cls(
            stage=raw["stage"],
            payload=_payload_from_dict(raw["stage"], raw["payload"]),
            loops=tuple(LoopOutcome.from_dict(l) for l in raw.get("loops", [])),
            context_text=raw.get("context_text", ""),
            elapsed=raw.get("elapsed", 0.0),
            detail=raw.get("detail", {}),
        )


@dataclass(frozen=True)
class CaseRun:
    case_id: str
    stages: tuple[StageOutput, ...]
    config_fingerprint: str
    flags: AblationFlags
    status: str  # "complete" | "aborted"
    abort_reason: str | None = None

    def stage_output(self, stage: str) -> StageOutput | None:
        for output in self.stages:
            if output.stage == stage:
                return output
        return None

    def predicted_features(self) -> dict:
        """The six outcome slots as predicted by this run."""
        referral = self.stage_output("referral")
        history = self.stage_output("history")
        exam = self.stage_output("examination")
        diagnosis = self.stage_output("diagnosis")
        treatment = self.stage_output("treatment")
        return {
            "referral_l1": referral.payload.l1 if referral else "",
            "referral_l2": list(referral.payload.l2) if referral else [],
            "examinations": list(history.payload.items) if history else [],
            "imaging_report": exam.payload.report if exam else "",
            "diagnosis": diagnosis.payload.text if diagnosis else "",
            "treatments": list(treatment.payload.items) if treatment else [],
        }

    def as_dict(self) -> dict:
        return {
            "case_id": self.case_id,
            "status": self.status,
            "abort_reason": self.abort_reason,
            "config_fingerprint": self.config_fingerprint,
            "flags": self.flags.as_dict(),
            "stages": [s.as_dict() for s in self.stages],
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "CaseRun":
        return cls(
            case_id=raw["case_id"],
            stages=tuple(StageOutput.from_dict(s) for s in raw.get("stages", [])),
            config_fingerprint=raw.get("config_fingerprint", ""),
            flags=AblationFlags.from_dict(raw.get("flags", {})),
            status=raw["status"],
            abort_reason=raw.get("abort_reason"),
        )

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), ensure_ascii=False, sort_keys=True, indent=2) + "\n"

    def save(self, directory: str | Path) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / f"{self.case_id}.json"
        path.write_text(self.to_json(), encoding="utf-8")
        return path

    @classmethod
    def load(cls, path: str | Path) -> "CaseRun":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


class _StageAbort(Exception):
    def __init__(self, reason: str, stage_output: StageOutput):
        self.reason = reason
        self.stage_output = stage_output
        super().__init__(reason)


# ---------------------------------------------------------------------------
# Context assembly
# ---------------------------------------------------------------------------

def _base_sections(case: ClinicalCase, flags: AblationFlags) -> list[str]:
    sections = [f"Chief complaint: {case.chief_complaint}"]
    if flags.personalization:
        sections.append(
            f"{PROFILE_PREFIX} age {case.age}, sex {case.sex}. {case.patient_description}"
        )
        sections.append(f"{HISTORY_PREFIX} {case.patient_history}")
    return sections


@dataclass
class _Upstream:
    """Stage inputs so far; swaps in gold values when sequentiality is ablated."""

    case: ClinicalCase
    flags: AblationFlags
    l1: str = ""
    l2: tuple[str, ...] = ()
    examinations: tuple[str, ...] = ()
    imaging_report: str = ""
    diagnosis: str = ""

    def referral(self) -> tuple[str, tuple[str, ...]]:
        if self.flags.sequentiality:
            return self.l1, self.l2
        return self.case.gold_referral_l1, tuple(sorted(self.case.gold_referral_l2))

    def referral_section(self) -> str:
        l1, l2 = self.referral()
        suffix = f" > {', '.join(l2)}" if l2 else ""
        return f"{REFERRAL_PREFIX} {l1}{suffix}"

    def exam_items(self) -> tuple[str, ...]:
        if self.flags.sequentiality:
            return self.examinations
        return tuple(sorted(self.case.gold_examinations))

    def exams_section(self) -> str:
        items = self.exam_items()
        return f"{EXAMS_PREFIX} {'; '.join(items) if items else '(none)'}"

    def report_section(self) -> str:
        report = self.imaging_report if self.flags.sequentiality else self.case.gold_imaging_report
        return f"{REPORT_PREFIX} {report if report else '(none)'}"

    def diagnosis_section(self) -> str:
        text = self.diagnosis if self.flags.sequentiality else self.case.gold_diagnosis
        return f"{DIAGNOSIS_PREFIX} {text}"


def _parse_list_items(text: str) -> list[str]:
    # Items are split on semicolons and newlines only; canonical labels may
    # themselves contain commas.
    pieces: list[str] = []
    for line in text.splitlines():
        line = re.sub(r"^\s*(?:[-*]|\d+[.)])\s*", "", line)
        pieces.extend(part for part in line.split(";"))
    return [p for p in (piece.strip(" .\t") for piece in pieces) if p]


def _canonicalize_items(pieces: Sequence[str], canonicalize) -> tuple[tuple[str, ...], tuple[str, ...]]:
    matched: list[str] = []
    unmatched: list[str] = []
    seen_unmatched: set[str] = set()
    for piece in pieces:
        try:
            matched.append(canonicalize(piece).label)
        except NotInVocabulary:
            folded = " ".join(piece.split()).casefold()
            if folded not in seen_unmatched:
                seen_unmatched.add(folded)
                unmatched.append(piece)
    return tuple(sorted(set(matched))), tuple(unmatched)


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------

def _loop_kwargs(env: PipelineEnv) -> dict:
    feedback_on = env.options.flags.feedback
    return {
        "max_rounds": env.options.max_rounds if feedback_on else 1,
        "auto_approve": not feedback_on,
    }


def _elapsed(env: PipelineEnv, started: float) -> float:
    return round(env.gateway.clock.now() - started, 6)


def stage_referral(case: ClinicalCase, env: PipelineEnv, upstream: _Upstream) -> StageOutput:
    """Two chained loops: pick the L1 department, then L2 labels within it."""
    started = env.gateway.clock.now()
    departments = env.vocabs.departments
    base = _base_sections(case, env.options.flags)
    retrieved = env.retrieve(case.chief_complaint, department=None, case_id=case.id)

    l1_context = "\n".join(
        base
        + [
            "Decision required: choose exactly one first-level department for this patient "
            "from: " + "; ".join(departments.l1) + "."
        ]
    )
    panel = recruit_panel("referral", None, env.library, tag="referral_l1")
    l1_loop = run_feedback_loop(
        env.gateway, panel, env.library, l1_context, retrieved,
        case_id=case.id, **_loop_kwargs(env),
    )
    l1 = departments.match_l1(l1_loop.final_text)
    if l1 is None:
        l1 = _reprompt_label(
            env, panel, case.id, "referral_l1.reprompt",
            "State the single most appropriate first-level department for this patient. "
            "Answer with exactly one name from: " + "; ".join(departments.l1) + ".",
            departments.match_l1,
        )
    if l1 is None:
        payload = ReferralPayload(l1="", l2=())
        raise _StageAbort(
            "referral L1 decision did not match any department after one reprompt",
            StageOutput("referral", payload, (l1_loop,), l1_context, _elapsed(env, started)),
        )

    sublist = departments.l2[l1]
    l2_context = "\n".join(
        base
        + [
            f"{REFERRAL_PREFIX} {l1}",
            "Decision required: choose one or more second-level departments within "
            f"{l1} from: " + "; ".join(sublist) + ". Separate multiple choices with semicolons.",
        ]
    )
    panel2 = recruit_panel("referral", None, env.library, tag="referral_l2")
    l2_loop = run_feedback_loop(
        env.gateway, panel2, env.library, l2_context, retrieved,
        case_id=case.id, **_loop_kwargs(env),
    )
    l2 = _parse_l2(l2_loop.final_text, l1, departments)
    if not l2:
        reply = _reprompt_text(
            env, panel2, case.id, "referral_l2.reprompt",
            f"List the second-level departments within {l1} this patient should visit. "
            "Answer only with names from: " + "; ".join(sublist) + ", separated by semicolons.",
        )
        l2 = _parse_l2(reply, l1, departments)
    if not l2:
        payload = ReferralPayload(l1=l1, l2=())
        raise _StageAbort(
            "referral L2 decision matched no sub-department after one reprompt",
            StageOutput(
                "referral", payload, (l1_loop, l2_loop), l1_context,
                _elapsed(env, started), {"l2_context": l2_context},
            ),
        )

    payload = ReferralPayload(l1=l1, l2=tuple(sorted(l2)))
    return StageOutput(
        "referral", payload, (l1_loop, l2_loop), l1_context,
        _elapsed(env, started), {"l2_context": l2_context},
    )


def _reprompt_label(env, panel: Panel, case_id, tag, prompt, matcher):
    reply = _reprompt_text(env, panel, case_id, tag, prompt)
    return matcher(reply)


def _reprompt_text(env: PipelineEnv, panel: Panel, case_id: str, tag: str, prompt: str) -> str:
    response = env.gateway.chat(
        user_request(panel.summarizer.persona_prompt, prompt, tag),
        role=Role.SUMMARIZER.value,
        case_id=case_id,
    )
    return response.text


def _parse_l2(text: str, l1: str, departments) -> list[str]:
    hits: list[str] = []
    for piece in _parse_list_items(text):
        label = departments.match_l2(piece, l1)
        if label and label not in hits:
            hits.append(label)
    if not hits:
        folded = " ".join(text.split()).casefold()
        for label in departments.l2[l1]:
            if " ".join(label.split()).casefold() in folded and label not in hits:
                hits.append(label)
    return hits


def _dialogue_block(turns: Sequence[tuple[str, str]]) -> str:
    if not turns:
        return "(no conversation yet)"
    lines = []
    for question, answer in turns:
        lines.append(f"Doctor: {question}")
        lines.append(f"Patient: {answer}")
    return "\n".join(lines)


def stage_history(case: ClinicalCase, env: PipelineEnv, upstream: _Upstream) -> StageOutput:
    """Interactive history-taking dialogue, or a direct panel proposal when ablated."""
    started = env.gateway.clock.now()
    flags = env.options.flags
    department = upstream.referral()[0]
    retrieved = env.retrieve(case.symptom_description, department=department, case_id=case.id)
    base = _base_sections(case, flags) + [upstream.referral_section()]

    if not flags.interactivity:
        context = "\n".join(
            base
            + [
                f"{SYMPTOM_PREFIX} {case.symptom_description}",
                "Decision required: list the examination items to order, separated by semicolons.",
            ]
        )
        panel = recruit_panel("history", department, env.library)
        loop = run_feedback_loop(
            env.gateway, panel, env.library, context, retrieved,
            case_id=case.id, **_loop_kwargs(env),
        )
        items, unmatched = _canonicalize_items(
            _parse_list_items(loop.final_text), env.vocabs.canonicalize_examination
        )
        payload = HistoryPayload(items=items, unmatched=unmatched, dialogue=None)
        return StageOutput("history", payload, (loop,), context, _elapsed(env, started))

    context = "\n".join(base)
    doctor = build_doctor_profile(department, env.library)
    patient = build_patient_profile(case, env.library)
    extractor = build_extractor_profile(env.library)
    _, doctor_user = env.library.get("history_doctor")
    snippets = render_snippets(retrieved)

    turns: list[tuple[str, str]] = []
    for _ in range(env.options.turn_budget):
        question = env.gateway.chat(
            user_request(
                doctor.persona_prompt,
                doctor_user.format(
                    context=context,
                    retrieved_cases=snippets,
                    dialogue=_dialogue_block(turns),
                ),
                doctor.tag,
            ),
            role=Role.SUMMARIZER.value,
            case_id=case.id,
        ).text
        if CLOSING_TOKEN in question:
            break
        patient_turns: list[Turn] = []
        for prior_q, prior_a in turns:
            patient_turns.append(Turn("user", prior_q))
            patient_turns.append(Turn("assistant", prior_a))
        patient_turns.append(Turn("user", question))
        answer = env.gateway.chat(
            ChatRequest(
                system_prompt=patient.persona_prompt,
                turns=tuple(patient_turns),
                tag=patient.tag,
            ),
            role=Role.PATIENT.value,
            case_id=case.id,
        ).text
        turns.append((question, answer))

    _, extractor_user = env.library.get("extractor")
    extraction_reply = env.gateway.chat(
        user_request(
            extractor.persona_prompt,
            extractor_user.format(dialogue=_dialogue_block(turns)),
            extractor.tag,
        ),
        role=Role.EXTRACTOR.value,
        case_id=case.id,
    ).text
    items, unmatched = _canonicalize_items(
        _parse_list_items(extraction_reply), env.vocabs.canonicalize_examination
    )
    dialogue = DialogueState(
        turns=tuple(turns), turn_budget=env.options.turn_budget, extracted_items=items
    )
    payload = HistoryPayload(items=items, unmatched=unmatched, dialogue=dialogue)
    return StageOutput(
        "history", payload, (), context, _elapsed(env, started),
        {"patient_persona": patient.persona_prompt, "extraction_reply": extraction_reply},
    )


def stage_examination(case: ClinicalCase, env: PipelineEnv, upstream: _Upstream) -> StageOutput:
    """Imaging report from a multimodal loop; image-free cases are vacuous."""
    started = env.gateway.clock.now()
    if not case.images:
        payload = ExaminationPayload(report=VACUOUS_REPORT, vacuous=True)
        return StageOutput("examination", payload, (), "", _elapsed(env, started))

    department = upstream.referral()[0]
    retrieved = env.retrieve(case.symptom_description, department=department, case_id=case.id)
    attachments = "; ".join(
        f"{img.modality_tag}" + (f" ({img.caption})" if img.caption else "") for img in case.images
    )
    context = "\n".join(
        _base_sections(case, env.options.flags)
        + [
            upstream.referral_section(),
            upstream.exams_section(),
            f"Attached images: {attachments}",
            "Decision required: write the imaging report for the attached images.",
        ]
    )
    panel = recruit_panel("examination", department, env.library)
    loop = run_feedback_loop(
        env.gateway, panel, env.library, context, retrieved,
        case_id=case.id, images=case.images, **_loop_kwargs(env),
    )
    payload = ExaminationPayload(report=loop.final_text, vacuous=False)
    return StageOutput("examination", payload, (loop,), context, _elapsed(env, started))


def stage_diagnosis(case: ClinicalCase, env: PipelineEnv, upstream: _Upstream) -> StageOutput:
    started = env.gateway.clock.now()
    department = upstream.referral()[0]
    retrieved = env.retrieve(case.symptom_description, department=department, case_id=case.id)
    context = "\n".join(
        _base_sections(case, env.options.flags)
        + [
            upstream.referral_section(),
            upstream.exams_section(),
            upstream.report_section(),
            "Decision required: state the final diagnosis.",
        ]
    )
    panel = recruit_panel("diagnosis", department, env.library)
    loop = run_feedback_loop(
        env.gateway, panel, env.library, context, retrieved,
        case_id=case.id, **_loop_kwargs(env),
    )
    return StageOutput(
        "diagnosis", DiagnosisPayload(text=loop.final_text), (loop,), context,
        _elapsed(env, started),
    )


def stage_treatment(case: ClinicalCase, env: PipelineEnv, upstream: _Upstream) -> StageOutput:
    started = env.gateway.clock.now()
    department = upstream.referral()[0]
    retrieved = env.retrieve(case.symptom_description, department=department, case_id=case.id)
    context = "\n".join(
        _base_sections(case, env.options.flags)
        + [
            upstream.referral_section(),
            upstream.exams_section(),
            upstream.report_section(),
            upstream.diagnosis_section(),
            "Decision required: list the care plan items, separated by semicolons.",
        ]
    )
    panel = recruit_panel("treatment", department, env.library)
    loop = run_feedback_loop(
        env.gateway, panel, env.library, context, retrieved,
        case_id=case.id, **_loop_kwargs(env),
    )
    items, unmatched = _canonicalize_items(
        _parse_list_items(loop.final_text),
        lambda text: env.vocabs.canonicalize_item(text, ItemCategory.TREATMENT),
    )
    payload = TreatmentPayload(items=items, unmatched=unmatched)
    return StageOutput("treatment", payload, (loop,), context, _elapsed(env, started))


# ---------------------------------------------------------------------------
# Whole-case execution
# ---------------------------------------------------------------------------

def max_chat_calls(options: RunOptions) -> int:
    """Loose upper bound on chat calls for one case, for audit assertions."""
    rounds = options.max_rounds if options.flags.feedback else 1
    per_round = 3 + 1 + 2  # three generals, one summarizer, reviewer plus one reprompt
    loops = 6  # referral runs two loops; the other four stages one each
    reprompts = 2  # referral L1/L2 strict reprompts
    dialogue = 2 * options.turn_budget + 1  # doctor + patient turns, one extraction call
    return loops * rounds * per_round + reprompts + dialogue


def run_case(case: ClinicalCase, env: PipelineEnv) -> CaseRun:
    """Execute the five stages in order, honoring the ablation flags."""
    if case.images:
        for role in (Role.GENERAL.value, Role.SUMMARIZER.value):
            if not env.gateway.provider_for(role).supports_images:
                raise ConfigurationError(
                    f"case {case.id!r} has images but the {role} provider cannot accept them"
                )
    fingerprint = env.config_fingerprint()
    upstream = _Upstream(case=case, flags=env.options.flags)
    outputs: list[StageOutput] = []
    status = "complete"
    abort_reason: str | None = None
    try:
        referral = stage_referral(case, env, upstream)
        outputs.append(referral)
        upstream.l1, upstream.l2 = referral.payload.l1, referral.payload.l2

        history = stage_history(case, env, upstream)
        outputs.append(history)
        upstream.examinations = history.payload.items

        examination = stage_examination(case, env, upstream)
        outputs.append(examination)
        upstream.imaging_report = "" if examination.payload.vacuous else examination.payload.report

        diagnosis = stage_diagnosis(case, env, upstream)
        outputs.append(diagnosis)
        upstream.diagnosis = diagnosis.payload.text

        outputs.append(stage_treatment(case, env, upstream))
    except _StageAbort as abort:
        outputs.append(abort.stage_output)
        status = "aborted"
        abort_reason = abort.reason
    except TransportError as exc:
        status = "aborted"
        abort_reason = f"backend transport failure: {exc}"

    run = CaseRun(
        case_id=case.id,
        stages=tuple(outputs),
        config_fingerprint=fingerprint,
        flags=env.options.flags,
        status=status,
        abort_reason=abort_reason,
    )
    if env.options.reingest and run.status == "complete" and env.store is not None:
        env.store.reingest_run(run, case)
    return run
