"""Closed vocabularies: departments, examination items, treatment items.

All matching is case-folded and whitespace-collapsed, against canonical
labels and their listed aliases. Vocabularies ship as package data and can
be swapped out with a directory of same-named JSON files.
"""

from __future__ import annotations

import difflib
import hashlib
import json
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from pathlib import Path

from .errors import CaseValidationError, NotInVocabulary

DEPARTMENTS_FILE = "departments.json"
EXAMINATIONS_FILE = "examinations.json"
TREATMENTS_FILE = "treatments.json"
IMAGE_TYPES_FILE = "image_types.json"


class ItemCategory(str, Enum):
    PHYSICAL_EXAM = "physical_exam"
    AUXILIARY_EXAM = "auxiliary_exam"
    TREATMENT = "treatment"


EXAM_CATEGORIES = (ItemCategory.AUXILIARY_EXAM, ItemCategory.PHYSICAL_EXAM)


@dataclass(frozen=True)
class CanonicalItem:
    """A vocabulary item identified by its canonical label."""

    label: str
    category: ItemCategory


def fold(text: str) -> str:
    """Case-fold and collapse runs of whitespace."""
    return " ".join(text.split()).casefold()


@dataclass(frozen=True)
class DepartmentVocabulary:
    """Two-level department taxonomy: L1 departments, each with L2 sub-departments."""

    l1: tuple[str, ...]
    l2: dict[str, tuple[str, ...]]

    def __post_init__(self) -> None:
        seen: set[str] = set()
        for label in self.l1:
            if fold(label) in seen:
                raise CaseValidationError(f"duplicate L1 department label {label!r}")
            seen.add(fold(label))
        seen_l2: set[str] = set()
        for l1_label, subs in self.l2.items():
            if l1_label not in self.l1:
                raise CaseValidationError(f"L2 list keyed by unknown L1 label {l1_label!r}")
            for label in subs:
                if fold(label) in seen_l2:
                    raise CaseValidationError(f"duplicate L2 department label {label!r}")
                seen_l2.add(fold(label))

    @property
    def l2_all(self) -> tuple[str, ...]:
        return tuple(label for l1 in self.l1 for label in self.l2[l1])

    def is_l1(self, label: str) -> bool:
        return label in self.l1

    def is_l2(self, label: str) -> bool:
        return label in set(self.l2_all)

    def match_l1(self, text: str) -> str | None:
        """Resolve free text to an L1 label: exact folded match, then unique substring."""
        return _match_label(text, self.l1)

    def match_l2(self, text: str, l1: str) -> str | None:
        """Resolve free text to an L2 label within the given L1 sub-list."""
        if l1 not in self.l2:
            raise CaseValidationError(f"unknown L1 department {l1!r}")
        return _match_label(text, self.l2[l1])


def _match_label(text: str, labels: tuple[str, ...]) -> str | None:
    folded = fold(text)
    if not folded:
        return None
    by_fold = {fold(label): label for label in labels}
    if folded in by_fold:
        return by_fold[folded]
    hits = [label for label in labels if fold(label) in folded]
    if len(hits) == 1:
        return hits[0]
    return None


class ItemVocabulary:
    """Canonical item labels plus aliases for one or more categories."""

    def __init__(self, entries: dict[ItemCategory, list[dict]]):
        self._labels: dict[ItemCategory, tuple[str, ...]] = {}
        self._lookup: dict[ItemCategory, dict[str, str]] = {}
        for category, items in entries.items():
            labels = []
            lookup: dict[str, str] = {}
            for item in items:
                label = item["label"]
                labels.append(label)
                for key in [label, *item.get("aliases", [])]:
                    folded = fold(key)
                    if folded in lookup and lookup[folded] != label:
                        raise CaseValidationError(
                            f"alias {key!r} maps to both {lookup[folded]!r} and {label!r}"
                        )
                    lookup[folded] = label
            self._labels[category] = tuple(labels)
            self._lookup[category] = lookup

    def categories(self) -> tuple[ItemCategory, ...]:
        return tuple(self._labels)

    def labels(self, category: ItemCategory) -> tuple[str, ...]:
        return self._labels[category]

    def contains_label(self, label: str, category: ItemCategory) -> bool:
        return label in self._labels[category]

    def canonicalize(self, free_text: str, category: ItemCategory) -> CanonicalItem:
        """Match free text against one category; raises NotInVocabulary on miss."""
        lookup = self._lookup[category]
        folded = fold(free_text)
        if folded in lookup:
            return CanonicalItem(lookup[folded], category)
        suggestions = tuple(
            lookup[m] for m in difflib.get_close_matches(folded, lookup.keys(), n=3)
        )
        raise NotInVocabulary(free_text, category.value, suggestions)


@dataclass(frozen=True)
class Vocabularies:
    """Bundle of every closed vocabulary the engine needs."""

    departments: DepartmentVocabulary
    examinations: ItemVocabulary
    treatments: ItemVocabulary
    image_types: tuple[str, ...]
    content_hash: str = field(default="", compare=False)

    def item_vocabulary(self, category: ItemCategory) -> ItemVocabulary:
        if category is ItemCategory.TREATMENT:
            return self.treatments
        return self.examinations

    def canonicalize_item(self, free_text: str, category: ItemCategory) -> CanonicalItem:
        return self.item_vocabulary(category).canonicalize(free_text, category)

    def canonicalize_examination(self, free_text: str) -> CanonicalItem:
        """Match against auxiliary then physical examination labels."""
        last: NotInVocabulary | None = None
        for category in EXAM_CATEGORIES:
            try:
                return self.examinations.canonicalize(free_text, category)
            except NotInVocabulary as exc:
                last = exc
        assert last is not None
        raise last

    def is_examination_label(self, label: str) -> bool:
        return any(self.examinations.contains_label(label, c) for c in EXAM_CATEGORIES)

    def is_treatment_label(self, label: str) -> bool:
        return self.treatments.contains_label(label, ItemCategory.TREATMENT)


def _read_json(directory: Path | None, name: str) -> dict:
    if directory is not None:
        return json.loads((directory / name).read_text(encoding="utf-8"))
    ref = resources.files("clinflow").joinpath("data/vocab").joinpath(name)
    return json.loads(ref.read_text(encoding="utf-8"))


def load_vocabularies(directory: str | Path | None = None) -> Vocabularies:
    """Load all vocabulary files from a directory, or the packaged defaults."""
    base = Path(directory) if directory is not None else None
    dep_raw = _read_json(base, DEPARTMENTS_FILE)
    exam_raw = _read_json(base, EXAMINATIONS_FILE)
    treat_raw = _read_json(base, TREATMENTS_FILE)
    img_raw = _read_json(base, IMAGE_TYPES_FILE)

    departments = DepartmentVocabulary(
        l1=tuple(entry["label"] for entry in dep_raw["l1"]),
        l2={entry["label"]: tuple(entry["l2"]) for entry in dep_raw["l1"]},
    )
    examinations = ItemVocabulary(
        {
            ItemCategory.PHYSICAL_EXAM: exam_raw["physical_exam"],
            ItemCategory.AUXILIARY_EXAM: exam_raw["auxiliary_exam"],
        }
    )
    exam_labels = set()
    for category in EXAM_CATEGORIES:
        for label in examinations.labels(category):
            if fold(label) in exam_labels:
                raise CaseValidationError(f"examination label {label!r} appears twice")
            exam_labels.add(fold(label))
    treatments = ItemVocabulary({ItemCategory.TREATMENT: treat_raw["treatment"]})
    for label in treatments.labels(ItemCategory.TREATMENT):
        if fold(label) in exam_labels:
            raise CaseValidationError(
                f"label {label!r} appears in both examination and treatment vocabularies"
            )
    blob = json.dumps([dep_raw, exam_raw, treat_raw, img_raw], sort_keys=True)
    content_hash = hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]
    return Vocabularies(
        departments=departments,
        examinations=examinations,
        treatments=treatments,
        image_types=tuple(img_raw["image_types"]),
        content_hash=content_hash,
    )
