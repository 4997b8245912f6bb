"""Structured case store: encode, partition, retrieve, and grow.

Each case becomes a record with 12 named feature slots keyed by its symptom
text embedding. Records are partitioned by first-level department and split
into a verified tier (curated corpus) and a pseudo tier (re-ingested pipeline
runs). Retrieval ranks the department's verified records by cosine similarity
first and only falls back to pseudo records to fill the remaining slots.
"""

from __future__ import annotations

import json
import logging
import threading
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import TYPE_CHECKING, Callable, Iterable, Sequence

from .backends import Vector, cosine
from .cases import ClinicalCase
from .errors import (
    CaseValidationError,
    DimensionMismatch,
    EncodeError,
    StorageError,
)

if TYPE_CHECKING:  # pragma: no cover
    from .pipeline import CaseRun

logger = logging.getLogger(__name__)

FEATURE_FIELDS = (
    "age",
    "sex",
    "patient_description",
    "symptom_description",
    "patient_history",
    "image_summary",
    "referral_l1",
    "referral_l2",
    "examinations",
    "imaging_report",
    "diagnosis",
    "treatments",
)

EmbedFn = Callable[[str], Vector]


class Tier(str, Enum):
    VERIFIED = "verified"
    PSEUDO = "pseudo"


@dataclass(frozen=True)
class CaseFeatures:
    """The 12 named feature slots of a stored case."""

    age: str
    sex: str
    patient_description: str
    symptom_description: str
    patient_history: str
    image_summary: str
    referral_l1: str
    referral_l2: tuple[str, ...]
    examinations: tuple[str, ...]
    imaging_report: str
    diagnosis: str
    treatments: tuple[str, ...]

    def as_dict(self) -> dict:
        return {
            "age": self.age,
            "sex": self.sex,
            "patient_description": self.patient_description,
            "symptom_description": self.symptom_description,
            "patient_history": self.patient_history,
            "image_summary": self.image_summary,
            "referral_l1": self.referral_l1,
            "referral_l2": list(self.referral_l2),
            "examinations": list(self.examinations),
            "imaging_report": self.imaging_report,
            "diagnosis": self.diagnosis,
            "treatments": list(self.treatments),
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "CaseFeatures":
        return cls(
            age=raw.get("age", ""),
            sex=raw.get("sex", ""),
            patient_description=raw.get("patient_description", ""),
            symptom_description=raw.get("symptom_description", ""),
            patient_history=raw.get("patient_history", ""),
            image_summary=raw.get("image_summary", ""),
            referral_l1=raw.get("referral_l1", ""),
            referral_l2=tuple(raw.get("referral_l2", [])),
            examinations=tuple(raw.get("examinations", [])),
            imaging_report=raw.get("imaging_report", ""),
            diagnosis=raw.get("diagnosis", ""),
            treatments=tuple(raw.get("treatments", [])),
        )


@dataclass(frozen=True)
class CaseRecord:
    case_id: str
    features: CaseFeatures
    symptom_embedding: Vector
    tier: Tier
    department: str

    def as_dict(self) -> dict:
        return {
            "kind": "record",
            "case_id": self.case_id,
            "features": self.features.as_dict(),
            "symptom_embedding": list(self.symptom_embedding.values),
            "tier": self.tier.value,
            "department": self.department,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "CaseRecord":
        return cls(
            case_id=raw["case_id"],
            features=CaseFeatures.from_dict(raw["features"]),
            symptom_embedding=Vector(tuple(float(v) for v in raw["symptom_embedding"])),
            tier=Tier(raw.get("tier", Tier.VERIFIED.value)),
            department=raw["department"],
        )


@dataclass(frozen=True)
class ScoredCase:
    record: CaseRecord
    similarity: float

    @property
    def tier(self) -> Tier:
        return self.record.tier


@dataclass(frozen=True)
class RetrievalResult:
    """Top-k matches plus a flag marking a whole-store fallback search."""

    cases: tuple[ScoredCase, ...]
    global_fallback: bool = False

    def __len__(self) -> int:
        return len(self.cases)

    def __iter__(self):
        return iter(self.cases)


def image_summary(case: ClinicalCase) -> str:
    parts = []
    for image in case.images:
        parts.append(f"{image.modality_tag}: {image.caption}" if image.caption else image.modality_tag)
    return "; ".join(parts)


def encode_case(case: ClinicalCase, embed_fn: EmbedFn) -> CaseRecord:
    """Map a curated case onto a verified record; gold fields fill the outcome slots."""
    if not case.symptom_description.strip():
        raise EncodeError(f"case {case.id!r} has no symptom description to key retrieval on")
    features = CaseFeatures(
        age=str(case.age),
        sex=case.sex,
        patient_description=case.patient_description,
        symptom_description=case.symptom_description,
        patient_history=case.patient_history,
        image_summary=image_summary(case),
        referral_l1=case.gold_referral_l1,
        referral_l2=tuple(sorted(case.gold_referral_l2)),
        examinations=tuple(sorted(case.gold_examinations)),
        imaging_report=case.gold_imaging_report,
        diagnosis=case.gold_diagnosis,
        treatments=tuple(sorted(case.gold_treatments)),
    )
    return CaseRecord(
        case_id=case.id,
        features=features,
        symptom_embedding=embed_fn(case.symptom_description),
        tier=Tier.VERIFIED,
        department=case.gold_referral_l1,
    )


class CaseStore:
    """Department-partitioned, tiered record index over symptom embeddings."""

    def __init__(
        self,
        embed_fn: EmbedFn,
        dim: int,
        departments: Sequence[str],
        fingerprint: str = "",
        verify_embeddings: bool | None = None,
    ):
        self.embed_fn = embed_fn
        self.dim = dim
        self.departments = tuple(departments)
        self.fingerprint = fingerprint
        self.fingerprint_mismatch = False
        self.vocab_hash = ""
        self._verify = verify_embeddings
        self._buckets: dict[str, dict[Tier, list[CaseRecord]]] = {}
        self._lock = threading.Lock()

    # -- write path --------------------------------------------------------

    def insert(self, record: CaseRecord) -> None:
        if record.symptom_embedding.dim != self.dim:
            raise DimensionMismatch(
                f"record {record.case_id!r} has dim {record.symptom_embedding.dim}, store has {self.dim}"
            )
        if record.department not in self.departments:
            raise CaseValidationError(f"record department {record.department!r} not in L1 vocabulary")
        if self._should_verify():
            expected = self.embed_fn(record.features.symptom_description)
            if expected.values != record.symptom_embedding.values:
                raise EncodeError(
                    f"record {record.case_id!r} embedding does not match the store provider"
                )
        with self._lock:
            for dept, tiers in self._buckets.items():
                bucket = tiers[record.tier]
                for i, existing in enumerate(bucket):
                    if existing.case_id == record.case_id:
                        del bucket[i]
                        logger.info(
                            "replaced %s record %r (was in %s)", record.tier.value, record.case_id, dept
                        )
                        break
            self._buckets.setdefault(
                record.department, {Tier.VERIFIED: [], Tier.PSEUDO: []}
            )[record.tier].append(record)

    def _should_verify(self) -> bool:
        if self._verify is not None:
            return self._verify
        return bool(getattr(self.embed_fn, "deterministic", False)) or bool(
            getattr(getattr(self.embed_fn, "__self__", None), "deterministic", False)
        )

    def encode_and_insert(self, case: ClinicalCase) -> CaseRecord:
        record = encode_case(case, self.embed_fn)
        self.insert(record)
        return record

    def reingest_run(self, run: "CaseRun", case: ClinicalCase) -> CaseRecord:
        """Re-ingest a completed run as a pseudo record; outcome slots are predictions."""
        if run.status != "complete":
            raise CaseValidationError(f"run for case {run.case_id!r} is not complete")
        predicted = run.predicted_features()
        features = CaseFeatures(
            age=str(case.age),
            sex=case.sex,
            patient_description=case.patient_description,
            symptom_description=case.symptom_description,
            patient_history=case.patient_history,
            image_summary=image_summary(case),
            referral_l1=predicted["referral_l1"],
            referral_l2=tuple(predicted["referral_l2"]),
            examinations=tuple(predicted["examinations"]),
            imaging_report=predicted["imaging_report"],
            diagnosis=predicted["diagnosis"],
            treatments=tuple(predicted["treatments"]),
        )
        record = CaseRecord(
            case_id=case.id,
            features=features,
            symptom_embedding=self.embed_fn(case.symptom_description),
            tier=Tier.PSEUDO,
            department=predicted["referral_l1"],
        )
        self.insert(record)
        return record

    # -- read path ---------------------------------------------------------

    def records(self, department: str | None = None, tier: Tier | None = None) -> list[CaseRecord]:
        with self._lock:
            out = []
            for dept, tiers in self._buckets.items():
                if department is not None and dept != department:
                    continue
                for t, bucket in tiers.items():
                    if tier is not None and t != tier:
                        continue
                    out.extend(bucket)
            return out

    def size(self) -> int:
        return len(self.records())

    def _ranked(self, records: Iterable[CaseRecord], query: Vector) -> list[ScoredCase]:
        scored = [
            ScoredCase(record=r, similarity=cosine(query, r.symptom_embedding)) for r in records
        ]
        scored.sort(key=lambda s: (-s.similarity, s.record.case_id))
        return scored

    def retrieve(self, symptom_text: str, department: str | None = None, k: int = 3) -> RetrievalResult:
        """Top-k records by symptom similarity, verified tier before pseudo.

        With a department, ranking is restricted to that department's bucket;
        an entirely empty bucket falls back to a whole-store search, flagged
        in the result. Without a department the search is global.
        """
        if k <= 0:
            raise CaseValidationError("k must be positive")
        if not symptom_text.strip():
            raise CaseValidationError("query text must be non-empty")
        if department is not None and department not in self.departments:
            raise CaseValidationError(f"unknown department {department!r}")
        if self.size() == 0:
            return RetrievalResult(cases=())
        query = self.embed_fn(symptom_text)
        if query.dim != self.dim:
            raise DimensionMismatch(f"query dim {query.dim} does not match store dim {self.dim}")
        fallback = False
        scope = department
        if department is not None and not self.records(department):
            fallback = True
            scope = None
        results = self._ranked(self.records(scope, Tier.VERIFIED), query)[:k]
        if len(results) < k:
            results += self._ranked(self.records(scope, Tier.PSEUDO), query)[: k - len(results)]
        return RetrievalResult(cases=tuple(results), global_fallback=fallback)

    def symptom_length_stats(self) -> dict:
        lengths = [len(r.features.symptom_description) for r in self.records()]
        if not lengths:
            return {"count": 0, "min": 0, "mean": 0.0, "max": 0}
        return {
            "count": len(lengths),
            "min": min(lengths),
            "mean": round(sum(lengths) / len(lengths), 2),
            "max": max(lengths),
        }

    # -- persistence -------------------------------------------------------

    def persist(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        header = {
            "kind": "header",
            "dim": self.dim,
            "provider_fingerprint": self.fingerprint,
            "vocab_hash": self.vocab_hash,
        }
        lines = [json.dumps(header, sort_keys=True)]
        for record in sorted(self.records(), key=lambda r: (r.tier.value, r.case_id)):
            lines.append(json.dumps(record.as_dict(), ensure_ascii=False, sort_keys=True))
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(
        cls,
        path: str | Path,
        embed_fn: EmbedFn,
        departments: Sequence[str],
        expected_dim: int | None = None,
        expected_fingerprint: str = "",
    ) -> "CaseStore":
        path = Path(path)
        if not path.exists():
            raise StorageError(f"store file does not exist: {path}")
        lines = [line for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]
        if not lines:
            raise StorageError(f"store file is empty: {path}")
        header = json.loads(lines[0])
        if header.get("kind") != "header":
            raise StorageError(f"store file missing header record: {path}")
        dim = int(header["dim"])
        if expected_dim is not None and dim != expected_dim:
            raise DimensionMismatch(
                f"store dim {dim} does not match configured dim {expected_dim}"
            )
        store = cls(
            embed_fn=embed_fn,
            dim=dim,
            departments=departments,
            fingerprint=header.get("provider_fingerprint", ""),
            verify_embeddings=False,
        )
        store.vocab_hash = header.get("vocab_hash", "")
        if expected_fingerprint and store.fingerprint != expected_fingerprint:
            store.fingerprint_mismatch = True
            logger.warning(
                "store provider fingerprint %r differs from configured %r; "
                "retrieval geometry may be inconsistent",
                store.fingerprint,
                expected_fingerprint,
            )
        for line in lines[1:]:
            store.insert(CaseRecord.from_dict(json.loads(line)))
        return store


def render_snippets(scored: Sequence[ScoredCase]) -> str:
    """Compact structured snippets of retrieved cases for prompt contexts."""
    if not scored:
        return "No similar cases available."
    lines = []
    for i, item in enumerate(scored, start=1):
        f = item.record.features
        lines.append(
            f"[Similar case {i} | department: {item.record.department} | "
            f"similarity: {item.similarity:.3f} | source: {item.tier.value}] "
            f"symptoms: {f.symptom_description} | referral: {f.referral_l1}"
            f"{' > ' + ', '.join(f.referral_l2) if f.referral_l2 else ''} | "
            f"examinations: {'; '.join(f.examinations) or '(none)'} | "
            f"diagnosis: {f.diagnosis or '(none)'} | "
            f"outcome plan: {'; '.join(f.treatments) or '(none)'}"
        )
    return "\n".join(lines)
