"""Metric suite: department accuracy, set IoU, judged diagnosis grading,
claim recall for generated reports, per-run aggregates, and the cumulative
error-propagation counts across the five stages.

All metrics are pure given the judge's responses, so replaying a transcript
reproduces every score bit-exactly.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .agents import PromptLibrary, Role
from .backends import Gateway, user_request
from .cases import ClinicalCase
from .errors import CaseValidationError
from .pipeline import CaseRun

SCORE_COLUMNS = ("referral_l1", "referral_l2", "history", "examination", "diagnosis", "treatment")

COLUMN_TITLES = {
    "referral_l1": "Referral L1",
    "referral_l2": "Referral L2",
    "history": "History-taking",
    "examination": "Examination",
    "diagnosis": "Diagnosis",
    "treatment": "Treatment",
}

PROPAGATION_STAGES = ("referral", "history", "examination", "diagnosis", "treatment")

# A stage counts as "correct" for propagation when its score reaches the
# threshold; the referral stage is gauged on the L1 accuracy column.
DEFAULT_THRESHOLDS = {
    "referral": 1.0,
    "history": 0.5,
    "examination": 0.5,
    "diagnosis": 0.5,
    "treatment": 0.5,
}

JUDGE_DIAGNOSIS_TAG = "judge.diagnosis"
JUDGE_CLAIM_EXTRACT_TAG = "judge.claim_extract"
JUDGE_CLAIM_ENTAIL_TAG = "judge.claim_entail"

STRICT_GRADE_SUFFIX = (
    "\n\nYour previous reply could not be parsed. Reply with a single digit from 1 to 5."
)


@dataclass(frozen=True)
class StageScore:
    stage: str
    value: float
    detail: dict = field(default_factory=dict)
    vacuous: bool = False

    def as_dict(self) -> dict:
        return {
            "stage": self.stage,
            "value": round(self.value, 6),
            "detail": self.detail,
            "vacuous": self.vacuous,
        }


@dataclass(frozen=True)
class CaseScores:
    case_id: str
    scores: dict[str, StageScore]

    def value(self, column: str) -> StageScore:
        return self.scores[column]

    def as_dict(self) -> dict:
        return {
            "case_id": self.case_id,
            "scores": {column: self.scores[column].as_dict() for column in SCORE_COLUMNS},
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "CaseScores":
        scores = {
            column: StageScore(
                stage=column,
                value=entry["value"],
                detail=entry.get("detail", {}),
                vacuous=entry.get("vacuous", False),
            )
            for column, entry in raw["scores"].items()
        }
        return cls(case_id=raw["case_id"], scores=scores)


# ---------------------------------------------------------------------------
# Elementary metrics
# ---------------------------------------------------------------------------

def accuracy_l1(pred: str, gold: str) -> int:
    """Exact label equality."""
    return 1 if pred == gold else 0


def iou(pred: Iterable[str], gold: Iterable[str]) -> StageScore:
    """Intersection over union of two label sets; both empty scores 1.0 (vacuous)."""
    pred_set = set(pred)
    gold_set = set(gold)
    union = pred_set | gold_set
    inter = pred_set & gold_set
    detail = {
        "intersection": len(inter),
        "union": len(union),
        "pred_size": len(pred_set),
        "gold_size": len(gold_set),
    }
    if not union:
        return StageScore(stage="iou", value=1.0, detail=detail, vacuous=True)
    return StageScore(stage="iou", value=len(inter) / len(union), detail=detail)


GRADE_RE = re.compile(r"\b([1-5])\b")


def normalize_grade(level: int) -> float:
    if not 1 <= level <= 5:
        raise ValueError(f"grade level must be 1..5, got {level}")
    return (level - 1) / 4


def grade_diagnosis(
    pred: str,
    gold: str,
    gateway: Gateway,
    library: PromptLibrary,
    case_id: str = "",
) -> tuple[int, float, bool]:
    """Judge the diagnosis on the five-level scale; returns (level, normalized, parse_failed).

    An unparseable judge reply is reprompted once; a second failure scores
    level 1. Scoring fails closed so parse lapses can never inflate results.
    """
    system, user = library.get("judge_diagnosis")
    prompt = user.format(gold=gold, pred=pred)
    for attempt in (1, 2):
        reply = gateway.chat(
            user_request(system, prompt, JUDGE_DIAGNOSIS_TAG),
            role=Role.FEEDBACK.value,
            case_id=case_id,
        ).text
        match = GRADE_RE.search(reply)
        if match:
            level = int(match.group(1))
            return level, normalize_grade(level), False
        prompt = prompt + STRICT_GRADE_SUFFIX
    return 1, 0.0, True


_CLAIM_LINE_RE = re.compile(r"^\s*(\d+)[.):]\s*(.+?)\s*$")
_ENTAIL_RE = re.compile(r"\b(YES|NO|ENTAILED|NOT)\b", re.IGNORECASE)


def parse_claims(text: str) -> list[str]:
    claims = []
    for line in text.splitlines():
        match = _CLAIM_LINE_RE.match(line)
        if match:
            claims.append(match.group(2))
    return claims


def claim_recall(
    generated: str,
    reference: str,
    gateway: Gateway,
    library: PromptLibrary,
    case_id: str = "",
    batch: bool = False,
) -> StageScore:
    """Fraction of reference-report claims entailed by the generated report.

    Two judge phases: extract an enumerated claim list from the reference,
    then check each claim against the generated text (one call per claim, or
    a single batched call). Per-claim parse failures count as not entailed.
    """
    if not reference.strip():
        raise CaseValidationError("claim recall needs a non-empty reference report")
    extract_sys, extract_user = library.get("judge_claim_extract")
    reply = gateway.chat(
        user_request(extract_sys, extract_user.format(reference=reference), JUDGE_CLAIM_EXTRACT_TAG),
        role=Role.FEEDBACK.value,
        case_id=case_id,
    ).text
    claims = parse_claims(reply)
    if not claims:
        return StageScore(
            stage="examination",
            value=0.0,
            detail={"claims": 0, "entailed": 0, "flag": "no-claims-extracted"},
            vacuous=True,
        )

    entailed = 0
    verdicts: list[bool] = []
    if batch:
        batch_sys, batch_user = library.get("judge_claim_entail_batch")
        numbered = "\n".join(f"{i}. {claim}" for i, claim in enumerate(claims, start=1))
        reply = gateway.chat(
            user_request(
                batch_sys,
                batch_user.format(generated=generated, claims=numbered),
                JUDGE_CLAIM_ENTAIL_TAG,
            ),
            role=Role.FEEDBACK.value,
            case_id=case_id,
        ).text
        by_index: dict[int, bool] = {}
        for line in reply.splitlines():
            match = re.match(r"\s*(\d+)\s*[:.)-]?\s*(YES|NO)\b", line, re.IGNORECASE)
            if match:
                by_index[int(match.group(1))] = match.group(2).upper() == "YES"
        verdicts = [by_index.get(i, False) for i in range(1, len(claims) + 1)]
    else:
        entail_sys, entail_user = library.get("judge_claim_entail")
        for claim in claims:
            reply = gateway.chat(
                user_request(
                    entail_sys,
                    entail_user.format(generated=generated, claim=claim),
                    JUDGE_CLAIM_ENTAIL_TAG,
                ),
                role=Role.FEEDBACK.value,
                case_id=case_id,
            ).text
            match = _ENTAIL_RE.search(reply)
            verdicts.append(bool(match) and match.group(1).upper() in ("YES", "ENTAILED"))
    entailed = sum(verdicts)
    return StageScore(
        stage="examination",
        value=entailed / len(claims),
        detail={"claims": len(claims), "entailed": entailed},
    )


# ---------------------------------------------------------------------------
# Scoring whole runs
# ---------------------------------------------------------------------------

def _aborted(stage: str) -> StageScore:
    return StageScore(stage=stage, value=0.0, detail={"flag": "aborted"})


def score_run(
    run: CaseRun,
    case: ClinicalCase,
    gateway: Gateway,
    library: PromptLibrary,
    strict_items: bool = True,
    batch_entail: bool = False,
) -> CaseScores:
    """Score one run against its case's ground truth.

    In strict mode, predicted items that failed canonicalization still count
    in the prediction's union for IoU, penalizing invented items; lenient
    mode drops them.
    """
    if run.case_id != case.id:
        raise CaseValidationError(f"run {run.case_id!r} does not match case {case.id!r}")
    scores: dict[str, StageScore] = {}

    referral = run.stage_output("referral")
    if referral is None or not referral.payload.l1:
        scores["referral_l1"] = _aborted("referral_l1")
    else:
        value = accuracy_l1(referral.payload.l1, case.gold_referral_l1)
        scores["referral_l1"] = StageScore(
            stage="referral_l1",
            value=float(value),
            detail={"pred": referral.payload.l1, "gold": case.gold_referral_l1},
        )
    if referral is None or not referral.payload.l2:
        scores["referral_l2"] = _aborted("referral_l2")
    else:
        base = iou(referral.payload.l2, case.gold_referral_l2)
        scores["referral_l2"] = StageScore("referral_l2", base.value, base.detail, base.vacuous)

    history = run.stage_output("history")
    if history is None:
        scores["history"] = _aborted("history")
    else:
        pred_items = set(history.payload.items)
        if strict_items:
            pred_items |= {f"unmatched::{u}" for u in history.payload.unmatched}
        base = iou(pred_items, case.gold_examinations)
        base.detail["unmatched"] = len(history.payload.unmatched)
        scores["history"] = StageScore("history", base.value, base.detail, base.vacuous)

    exam = run.stage_output("examination")
    if exam is None:
        scores["examination"] = _aborted("examination")
    elif exam.payload.vacuous:
        scores["examination"] = StageScore(
            stage="examination", value=1.0, detail={"flag": "no-images"}, vacuous=True
        )
    else:
        base = claim_recall(
            exam.payload.report,
            case.gold_imaging_report,
            gateway,
            library,
            case_id=case.id,
            batch=batch_entail,
        )
        scores["examination"] = StageScore("examination", base.value, base.detail, base.vacuous)

    diagnosis = run.stage_output("diagnosis")
    if diagnosis is None:
        scores["diagnosis"] = _aborted("diagnosis")
    else:
        level, normalized, parse_failed = grade_diagnosis(
            diagnosis.payload.text, case.gold_diagnosis, gateway, library, case_id=case.id
        )
        detail = {"level": level}
        if parse_failed:
            detail["flag"] = "judge-parse-failure"
        scores["diagnosis"] = StageScore(stage="diagnosis", value=normalized, detail=detail)

    treatment = run.stage_output("treatment")
    if treatment is None:
        scores["treatment"] = _aborted("treatment")
    else:
        pred_items = set(treatment.payload.items)
        if strict_items:
            pred_items |= {f"unmatched::{u}" for u in treatment.payload.unmatched}
        base = iou(pred_items, case.gold_treatments)
        base.detail["unmatched"] = len(treatment.payload.unmatched)
        scores["treatment"] = StageScore("treatment", base.value, base.detail, base.vacuous)

    return CaseScores(case_id=run.case_id, scores=scores)


# ---------------------------------------------------------------------------
# Aggregation and error propagation
# ---------------------------------------------------------------------------

def _stage_passes(case_scores: CaseScores, stage: str, thresholds: dict[str, float]) -> bool:
    column = "referral_l1" if stage == "referral" else stage
    score = case_scores.scores[column]
    if score.vacuous:
        return True  # no applicable ground truth; neutral for propagation
    return score.value >= thresholds[stage]


def error_propagation_report(
    scored: Sequence[CaseScores],
    thresholds: dict[str, float] | None = None,
) -> list[int]:
    """Count of cases still correct at every stage up to k, for k = 1..5."""
    thresholds = {**DEFAULT_THRESHOLDS, **(thresholds or {})}
    counts = []
    survivors = list(scored)
    for stage in PROPAGATION_STAGES:
        survivors = [cs for cs in survivors if _stage_passes(cs, stage, thresholds)]
        counts.append(len(survivors))
    return counts


@dataclass(frozen=True)
class ScoreReport:
    per_case: tuple[CaseScores, ...]
    column_means: dict[str, float | None]
    overall: float
    propagation: list[int]
    thresholds: dict[str, float]
    flags: tuple[str, ...] = ()

    def as_dict(self) -> dict:
        return {
            "cases": [cs.as_dict() for cs in self.per_case],
            "column_means": {
                column: (round(v, 6) if v is not None else None)
                for column, v in self.column_means.items()
            },
            "overall": round(self.overall, 6),
            "propagation": {
                "stages": list(PROPAGATION_STAGES),
                "counts": self.propagation,
                "thresholds": self.thresholds,
            },
            "flags": list(self.flags),
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "ScoreReport":
        return cls(
            per_case=tuple(CaseScores.from_dict(c) for c in raw["cases"]),
            column_means=dict(raw["column_means"]),
            overall=raw["overall"],
            propagation=list(raw["propagation"]["counts"]),
            thresholds=dict(raw["propagation"]["thresholds"]),
            flags=tuple(raw.get("flags", [])),
        )


def aggregate(
    scored: Sequence[CaseScores],
    thresholds: dict[str, float] | None = None,
) -> ScoreReport:
    """Column means over non-vacuous entries plus the unweighted overall average.

    A column with no non-vacuous entries is reported as absent, excluded from
    the overall mean, and flagged.
    """
    if not scored:
        raise CaseValidationError("cannot aggregate zero scored runs")
    column_means: dict[str, float | None] = {}
    flags: list[str] = []
    for column in SCORE_COLUMNS:
        values = [cs.scores[column].value for cs in scored if not cs.scores[column].vacuous]
        if values:
            column_means[column] = sum(values) / len(values)
        else:
            column_means[column] = None
            flags.append(f"column {column} has no non-vacuous entries")
    present = [v for v in column_means.values() if v is not None]
    overall = sum(present) / len(present) if present else 0.0
    thresholds = {**DEFAULT_THRESHOLDS, **(thresholds or {})}
    return ScoreReport(
        per_case=tuple(scored),
        column_means=column_means,
        overall=overall,
        propagation=error_propagation_report(scored, thresholds),
        thresholds=thresholds,
        flags=tuple(flags),
    )
