"""Clinical case schema, corpus loading, and deterministic dataset splits."""

from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .errors import CaseValidationError, StorageError
from .vocab import Vocabularies

SEXES = ("male", "female", "other")

CASE_FIELDS = (
    "id",
    "age",
    "sex",
    "chief_complaint",
    "patient_description",
    "symptom_description",
    "patient_history",
    "images",
    "gold_referral_l1",
    "gold_referral_l2",
    "gold_examinations",
    "gold_imaging_report",
    "gold_diagnosis",
    "gold_treatments",
)


@dataclass(frozen=True)
class ImageRef:
    """Opaque pointer to a case image; pixels are never inspected."""

    uri: str
    modality_tag: str
    caption: str = ""

    def as_dict(self) -> dict:
        return {"uri": self.uri, "modality_tag": self.modality_tag, "caption": self.caption}


@dataclass(frozen=True)
class ClinicalCase:
    """One de-identified patient record with per-stage ground truth."""

    id: str
    age: int
    sex: str
    chief_complaint: str
    patient_description: str
    symptom_description: str
    patient_history: str
    images: tuple[ImageRef, ...]
    gold_referral_l1: str
    gold_referral_l2: frozenset[str]
    gold_examinations: frozenset[str]
    gold_imaging_report: str
    gold_diagnosis: str
    gold_treatments: frozenset[str]

    def as_dict(self) -> dict:
        return {
            "id": self.id,
            "age": self.age,
            "sex": self.sex,
            "chief_complaint": self.chief_complaint,
            "patient_description": self.patient_description,
            "symptom_description": self.symptom_description,
            "patient_history": self.patient_history,
            "images": [img.as_dict() for img in self.images],
            "gold_referral_l1": self.gold_referral_l1,
            "gold_referral_l2": sorted(self.gold_referral_l2),
            "gold_examinations": sorted(self.gold_examinations),
            "gold_imaging_report": self.gold_imaging_report,
            "gold_diagnosis": self.gold_diagnosis,
            "gold_treatments": sorted(self.gold_treatments),
        }


def _field_error(case_id: str, name: str, problem: str) -> CaseValidationError:
    prefix = f"case {case_id!r}: " if case_id else ""
    return CaseValidationError(f"{prefix}field {name!r} {problem}")


def _req_str(raw: dict, name: str, case_id: str, allow_empty: bool = False) -> str:
    if name not in raw:
        raise _field_error(case_id, name, "is missing")
    value = raw[name]
    if not isinstance(value, str):
        raise _field_error(case_id, name, f"must be a string, got {type(value).__name__}")
    if not allow_empty and not value.strip():
        raise _field_error(case_id, name, "must be non-empty")
    return value


def _req_label_set(raw: dict, name: str, case_id: str) -> list[str]:
    if name not in raw:
        raise _field_error(case_id, name, "is missing")
    value = raw[name]
    if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
        raise _field_error(case_id, name, "must be a list of strings")
    if not value:
        raise _field_error(case_id, name, "must be non-empty")
    return value


def parse_case(raw: dict | str, vocabs: Vocabularies) -> ClinicalCase:
    """Validate one case document (dict or JSON text) against the vocabularies."""
    if isinstance(raw, str):
        try:
            raw = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise CaseValidationError(f"malformed case JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise CaseValidationError("case document must be a JSON object")

    case_id = raw.get("id", "")
    if not isinstance(case_id, str) or not case_id:
        raise _field_error("", "id", "must be a non-empty string")

    age = raw.get("age")
    if not isinstance(age, int) or isinstance(age, bool) or age < 0:
        raise _field_error(case_id, "age", "must be a non-negative integer")

    sex = _req_str(raw, "sex", case_id)
    if sex not in SEXES:
        raise _field_error(case_id, "sex", f"must be one of {SEXES}, got {sex!r}")

    images_raw = raw.get("images", [])
    if not isinstance(images_raw, list):
        raise _field_error(case_id, "images", "must be a list")
    images = []
    for i, entry in enumerate(images_raw):
        if not isinstance(entry, dict):
            raise _field_error(case_id, f"images[{i}]", "must be an object")
        uri = entry.get("uri", "")
        if not isinstance(uri, str) or not uri:
            raise _field_error(case_id, f"images[{i}].uri", "must be a non-empty string")
        modality = entry.get("modality_tag", "")
        if modality not in vocabs.image_types:
            raise _field_error(
                case_id,
                f"images[{i}].modality_tag",
                f"must be one of the {len(vocabs.image_types)} image types, got {modality!r}",
            )
        images.append(ImageRef(uri=uri, modality_tag=modality, caption=entry.get("caption", "")))

    l1 = _req_str(raw, "gold_referral_l1", case_id)
    if not vocabs.departments.is_l1(l1):
        close = vocabs.departments.match_l1(l1)
        hint = f"; did you mean {close!r}?" if close else ""
        raise _field_error(case_id, "gold_referral_l1", f"unknown department {l1!r}{hint}")

    l2_labels = _req_label_set(raw, "gold_referral_l2", case_id)
    for label in l2_labels:
        if not vocabs.departments.is_l2(label):
            raise _field_error(case_id, "gold_referral_l2", f"unknown department {label!r}")

    exams = _req_label_set(raw, "gold_examinations", case_id)
    for label in exams:
        if not vocabs.is_examination_label(label):
            raise _field_error(case_id, "gold_examinations", f"unknown examination {label!r}")

    treatments = _req_label_set(raw, "gold_treatments", case_id)
    for label in treatments:
        if not vocabs.is_treatment_label(label):
            raise _field_error(case_id, "gold_treatments", f"unknown treatment {label!r}")

    report = _req_str(raw, "gold_imaging_report", case_id, allow_empty=True)
    if bool(images) != bool(report.strip()):
        raise _field_error(
            case_id,
            "gold_imaging_report",
            "must be non-empty exactly when the case has images",
        )

    return ClinicalCase(
        id=case_id,
        age=age,
        sex=sex,
        chief_complaint=_req_str(raw, "chief_complaint", case_id),
        patient_description=_req_str(raw, "patient_description", case_id),
        symptom_description=_req_str(raw, "symptom_description", case_id),
        patient_history=_req_str(raw, "patient_history", case_id),
        images=tuple(images),
        gold_referral_l1=l1,
        gold_referral_l2=frozenset(l2_labels),
        gold_examinations=frozenset(exams),
        gold_imaging_report=report,
        gold_diagnosis=_req_str(raw, "gold_diagnosis", case_id),
        gold_treatments=frozenset(treatments),
    )


def load_corpus(path: str | Path, vocabs: Vocabularies) -> list[ClinicalCase]:
    """Load a corpus from a JSONL file, a single-case JSON file, or a directory of them."""
    path = Path(path)
    if not path.exists():
        raise StorageError(f"corpus path does not exist: {path}")
    documents: list[str] = []
    if path.is_dir():
        for child in sorted(path.glob("*.json")):
            documents.append(child.read_text(encoding="utf-8"))
    elif path.suffix == ".jsonl":
        for line in path.read_text(encoding="utf-8").splitlines():
            if line.strip():
                documents.append(line)
    else:
        documents.append(path.read_text(encoding="utf-8"))

    cases = []
    seen_ids: set[str] = set()
    for doc in documents:
        case = parse_case(doc, vocabs)
        if case.id in seen_ids:
            raise CaseValidationError(f"duplicate case id {case.id!r} in corpus")
        seen_ids.add(case.id)
        cases.append(case)
    return cases


def write_corpus(cases: Iterable[ClinicalCase], path: str | Path) -> None:
    path = Path(path)
    lines = [json.dumps(case.as_dict(), ensure_ascii=False, sort_keys=True) for case in cases]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def department_counts(cases: Sequence[ClinicalCase]) -> dict[str, int]:
    counts: dict[str, int] = {}
    for case in cases:
        counts[case.gold_referral_l1] = counts.get(case.gold_referral_l1, 0) + 1
    return dict(sorted(counts.items()))


def apportion(total: int, ratios: Sequence[float]) -> list[int]:
    """Largest-remainder apportionment of `total` across `ratios`."""
    quotas = [r * total for r in ratios]
    sizes = [math.floor(q) for q in quotas]
    leftover = total - sum(sizes)
    order = sorted(range(len(ratios)), key=lambda i: (-(quotas[i] - sizes[i]), i))
    for i in order[:leftover]:
        sizes[i] += 1
    return sizes


@dataclass(frozen=True)
class SplitManifest:
    """Reproducible record of a train/val/test partition."""

    seed: int
    ratios: tuple[float, float, float]
    train: tuple[str, ...]
    val: tuple[str, ...]
    test: tuple[str, ...]

    def bucket(self, name: str) -> tuple[str, ...]:
        if name not in ("train", "val", "test"):
            raise CaseValidationError(f"unknown split bucket {name!r}")
        return getattr(self, name)

    def as_dict(self) -> dict:
        return {
            "seed": self.seed,
            "ratios": list(self.ratios),
            "buckets": {"train": list(self.train), "val": list(self.val), "test": list(self.test)},
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "SplitManifest":
        buckets = raw["buckets"]
        return cls(
            seed=raw["seed"],
            ratios=tuple(raw["ratios"]),
            train=tuple(buckets["train"]),
            val=tuple(buckets["val"]),
            test=tuple(buckets["test"]),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(
            json.dumps(self.as_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )

    @classmethod
    def load(cls, path: str | Path) -> "SplitManifest":
        path = Path(path)
        if not path.exists():
            raise StorageError(f"split manifest does not exist: {path}")
        return cls.from_dict(json.loads(path.read_text(encoding="utf-8")))


def split_dataset(
    cases: Sequence[ClinicalCase],
    ratios: tuple[float, float, float] = (0.7, 0.1, 0.2),
    seed: int = 0,
) -> SplitManifest:
    """Seeded shuffle then largest-remainder cut into train/val/test.

    Deterministic for a fixed seed regardless of input order; the partition
    is exact and bucket sizes differ from ratio*N by at most one.
    """
    if any(r < 0 for r in ratios):
        raise CaseValidationError("split ratios must be non-negative")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise CaseValidationError(f"split ratios must sum to 1, got {sum(ratios)}")
    nonzero = sum(1 for r in ratios if r > 0)
    if len(cases) < nonzero:
        raise CaseValidationError(
            f"cannot split {len(cases)} cases across {nonzero} non-empty buckets"
        )
    ids = sorted(case.id for case in cases)
    if len(set(ids)) != len(ids):
        raise CaseValidationError("case ids must be unique before splitting")
    rng = random.Random(seed)
    rng.shuffle(ids)
    sizes = apportion(len(ids), ratios)
    train = tuple(ids[: sizes[0]])
    val = tuple(ids[sizes[0] : sizes[0] + sizes[1]])
    test = tuple(ids[sizes[0] + sizes[1] :])
    return SplitManifest(seed=seed, ratios=tuple(ratios), train=train, val=val, test=test)
