"""Case store: encoding, tiered retrieval, re-ingestion, persistence."""

from __future__ import annotations

import random
from dataclasses import replace

import pytest

from clinflow.backends import HashEmbedder, cosine
from clinflow.errors import CaseValidationError, DimensionMismatch, EncodeError
from clinflow.store import (
    CaseFeatures,
    CaseRecord,
    CaseStore,
    FEATURE_FIELDS,
    Tier,
    encode_case,
    render_snippets,
)
from conftest import TEST_DIM, demo_provider, make_env, make_gateway, make_store

EMBEDDER = HashEmbedder(dim=TEST_DIM)

SYMPTOM_POOL = [
    "fever with dry cough and fatigue",
    "sharp chest pain on exertion",
    "gradual vision loss in one eye",
    "itchy rash across the lower back",
    "episodic abdominal cramps after meals",
    "persistent ringing in the right ear",
    "joint swelling in both hands",
    "burning sensation when urinating",
]


def _record(case_id: str, department: str, symptom: str, tier: Tier = Tier.VERIFIED) -> CaseRecord:
    features = CaseFeatures(
        age="40",
        sex="female",
        patient_description="d",
        symptom_description=symptom,
        patient_history="h",
        image_summary="",
        referral_l1=department,
        referral_l2=(),
        examinations=("Blood tests",),
        imaging_report="",
        diagnosis=f"dx for {case_id}",
        treatments=("Medication",),
    )
    return CaseRecord(
        case_id=case_id,
        features=features,
        symptom_embedding=EMBEDDER.embed(symptom),
        tier=tier,
        department=department,
    )


def _store(vocabs) -> CaseStore:
    return CaseStore(
        embed_fn=EMBEDDER.embed,
        dim=TEST_DIM,
        departments=vocabs.departments.l1,
        fingerprint=EMBEDDER.fingerprint,
    )


class TestEncode:
    def test_all_twelve_slots_populated(self, corpus):
        case = next(c for c in corpus if c.images)
        record = encode_case(case, EMBEDDER.embed)
        assert record.tier is Tier.VERIFIED
        feature_dict = record.features.as_dict()
        assert set(feature_dict) == set(FEATURE_FIELDS)
        assert len(FEATURE_FIELDS) == 12
        for slot in ("symptom_description", "referral_l1", "diagnosis", "image_summary"):
            assert feature_dict[slot]

    def test_empty_symptom_rejected(self, corpus):
        case = replace(corpus[0], symptom_description="   ")
        with pytest.raises(EncodeError):
            encode_case(case, EMBEDDER.embed)

    def test_embedding_matches_symptom_text(self, corpus):
        record = encode_case(corpus[0], EMBEDDER.embed)
        assert record.symptom_embedding == EMBEDDER.embed(corpus[0].symptom_description)


class TestInsert:
    def test_insert_into_empty_store(self, vocabs):
        store = _store(vocabs)
        store.insert(_record("a", "Surgery", SYMPTOM_POOL[0]))
        assert store.size() == 1

    def test_upsert_same_id(self, vocabs):
        store = _store(vocabs)
        store.insert(_record("a", "Surgery", SYMPTOM_POOL[0]))
        store.insert(_record("a", "Surgery", SYMPTOM_POOL[1]))
        assert store.size() == 1
        assert store.records()[0].features.symptom_description == SYMPTOM_POOL[1]

    def test_upsert_across_departments_within_tier(self, vocabs):
        store = _store(vocabs)
        store.insert(_record("a", "Surgery", SYMPTOM_POOL[0]))
        store.insert(_record("a", "Pediatrics", SYMPTOM_POOL[1]))
        assert store.size() == 1
        assert store.records()[0].department == "Pediatrics"

    def test_tiers_are_separate_namespaces(self, vocabs):
        store = _store(vocabs)
        store.insert(_record("a", "Surgery", SYMPTOM_POOL[0], Tier.VERIFIED))
        store.insert(_record("a", "Surgery", SYMPTOM_POOL[1], Tier.PSEUDO))
        assert store.size() == 2

    def test_dim_mismatch(self, vocabs):
        store = _store(vocabs)
        other = HashEmbedder(dim=TEST_DIM * 2)
        bad = CaseRecord(
            case_id="a",
            features=_record("a", "Surgery", SYMPTOM_POOL[0]).features,
            symptom_embedding=other.embed(SYMPTOM_POOL[0]),
            tier=Tier.VERIFIED,
            department="Surgery",
        )
        with pytest.raises(DimensionMismatch):
            store.insert(bad)

    def test_unknown_department_rejected(self, vocabs):
        store = _store(vocabs)
        with pytest.raises(CaseValidationError):
            store.insert(_record("a", "Hogwarts Infirmary", SYMPTOM_POOL[0]))

    def test_insert_verifies_embedding_against_provider(self, vocabs):
        store = _store(vocabs)
        tampered = replace(
            _record("a", "Surgery", SYMPTOM_POOL[0]),
            symptom_embedding=EMBEDDER.embed(SYMPTOM_POOL[1]),
        )
        with pytest.raises(EncodeError):
            store.insert(tampered)


def _brute_force(store: CaseStore, department, query_text: str, k: int):
    query = EMBEDDER.embed(query_text)
    records = store.records(department)
    if department is not None and not records:
        records = store.records()
    tier_rank = {Tier.VERIFIED: 0, Tier.PSEUDO: 1}
    ranked = sorted(
        records,
        key=lambda r: (tier_rank[r.tier], -cosine(query, r.symptom_embedding), r.case_id),
    )
    return [r.case_id for r in ranked[:k]]


class TestRetrieve:
    def test_self_retrieval_similarity_one(self, vocabs):
        store = _store(vocabs)
        for i, symptom in enumerate(SYMPTOM_POOL[:5]):
            store.insert(_record(f"r{i}", "Surgery", symptom))
        result = store.retrieve(SYMPTOM_POOL[3], department="Surgery")
        assert result.cases[0].record.case_id == "r3"
        assert result.cases[0].similarity == pytest.approx(1.0, abs=1e-12)

    def test_verified_before_pseudo(self, vocabs):
        store = _store(vocabs)
        store.insert(_record("v1", "Surgery", SYMPTOM_POOL[0], Tier.VERIFIED))
        store.insert(_record("v2", "Surgery", SYMPTOM_POOL[1], Tier.VERIFIED))
        for i in range(4):
            store.insert(_record(f"p{i}", "Surgery", SYMPTOM_POOL[2 + i], Tier.PSEUDO))
        result = store.retrieve(SYMPTOM_POOL[5], department="Surgery", k=3)
        tiers = [s.tier for s in result.cases]
        assert tiers[:2] == [Tier.VERIFIED, Tier.VERIFIED]
        assert tiers[2] is Tier.PSEUDO
        assert result.cases[2].record.case_id == _brute_force(store, "Surgery", SYMPTOM_POOL[5], 3)[2]

    def test_matches_brute_force_on_random_stores(self, vocabs):
        rng = random.Random(77)
        departments = list(vocabs.departments.l1[:4])
        for _ in range(25):
            store = _store(vocabs)
            n = rng.randint(1, 20)
            for i in range(n):
                store.insert(
                    _record(
                        f"c{i:02d}",
                        rng.choice(departments),
                        rng.choice(SYMPTOM_POOL),
                        rng.choice((Tier.VERIFIED, Tier.PSEUDO)),
                    )
                )
            dept = rng.choice(departments)
            query = rng.choice(SYMPTOM_POOL)
            got = [s.record.case_id for s in store.retrieve(query, department=dept, k=3).cases]
            assert got == _brute_force(store, dept, query, 3)

    def test_duplicate_similarities_tie_break_by_id(self, vocabs):
        store = _store(vocabs)
        for case_id in ("z", "a", "m"):
            store.insert(_record(case_id, "Surgery", SYMPTOM_POOL[0]))
        result = store.retrieve(SYMPTOM_POOL[0], department="Surgery", k=3)
        assert [s.record.case_id for s in result.cases] == ["a", "m", "z"]

    def test_empty_store_returns_empty(self, vocabs):
        assert len(_store(vocabs).retrieve("anything", department="Surgery")) == 0

    def test_unknown_department_error(self, vocabs):
        store = _store(vocabs)
        store.insert(_record("a", "Surgery", SYMPTOM_POOL[0]))
        with pytest.raises(CaseValidationError):
            store.retrieve("q", department="Not A Dept")

    def test_empty_department_falls_back_globally(self, vocabs):
        store = _store(vocabs)
        store.insert(_record("a", "Surgery", SYMPTOM_POOL[0]))
        result = store.retrieve(SYMPTOM_POOL[0], department="Pediatrics")
        assert result.global_fallback
        assert [s.record.case_id for s in result.cases] == ["a"]

    def test_department_none_searches_globally_unflagged(self, vocabs):
        store = _store(vocabs)
        store.insert(_record("a", "Surgery", SYMPTOM_POOL[0]))
        result = store.retrieve(SYMPTOM_POOL[0], department=None)
        assert not result.global_fallback
        assert len(result) == 1


class TestReingest:
    def _completed_run(self, vocabs, corpus_by_id):
        env = make_env(vocabs, store_cases=[])
        from clinflow.pipeline import run_case

        case = corpus_by_id["case-0001"]
        return case, run_case(case, env)

    def test_pseudo_record_fields_come_from_predictions(self, vocabs, corpus_by_id):
        case, run = self._completed_run(vocabs, corpus_by_id)
        gateway = make_gateway(demo_provider())
        store = make_store(gateway, vocabs)
        record = store.reingest_run(run, case)
        assert record.tier is Tier.PSEUDO
        assert record.features.diagnosis == run.stage_output("diagnosis").payload.text
        assert record.department == run.stage_output("referral").payload.l1
        assert record.features.symptom_description == case.symptom_description

    def test_reingest_twice_upserts(self, vocabs, corpus_by_id):
        case, run = self._completed_run(vocabs, corpus_by_id)
        gateway = make_gateway(demo_provider())
        store = make_store(gateway, vocabs)
        store.reingest_run(run, case)
        store.reingest_run(run, case)
        assert store.size() == 1

    def test_incomplete_run_rejected(self, vocabs, corpus_by_id):
        case, run = self._completed_run(vocabs, corpus_by_id)
        from dataclasses import replace as dc_replace

        aborted = dc_replace(run, status="aborted")
        store = make_store(make_gateway(demo_provider()), vocabs)
        with pytest.raises(CaseValidationError):
            store.reingest_run(aborted, case)

    def test_pseudo_never_outranks_equal_similarity_verified(self, vocabs):
        rng = random.Random(5)
        for _ in range(30):
            store = _store(vocabs)
            symptom = rng.choice(SYMPTOM_POOL)
            store.insert(_record("ver", "Surgery", symptom, Tier.VERIFIED))
            store.insert(_record("pse", "Surgery", symptom, Tier.PSEUDO))
            result = store.retrieve(symptom, department="Surgery", k=2)
            assert [s.record.case_id for s in result.cases] == ["ver", "pse"]

    def test_monotone_growth_preserves_verified_results(self, vocabs, corpus_by_id):
        case, run = self._completed_run(vocabs, corpus_by_id)
        store = _store(vocabs)
        for i, symptom in enumerate(SYMPTOM_POOL[:4]):
            store.insert(_record(f"v{i}", "Internal Medicine", symptom))
        before = [
            s.record.case_id
            for s in store.retrieve(SYMPTOM_POOL[0], department="Internal Medicine", k=3).cases
        ]
        size_before = store.size()
        store.reingest_run(run, case)
        assert store.size() == size_before + 1
        after = [
            s.record.case_id
            for s in store.retrieve(SYMPTOM_POOL[0], department="Internal Medicine", k=3).cases
        ]
        assert before == after


class TestPersistence:
    def test_roundtrip(self, vocabs, tmp_path):
        store = _store(vocabs)
        for i, symptom in enumerate(SYMPTOM_POOL):
            tier = Tier.PSEUDO if i % 3 == 0 else Tier.VERIFIED
            store.insert(_record(f"c{i}", "Surgery", symptom, tier))
        path = tmp_path / "store.jsonl"
        store.persist(path)
        loaded = CaseStore.load(
            path, EMBEDDER.embed, vocabs.departments.l1, expected_dim=TEST_DIM,
            expected_fingerprint=EMBEDDER.fingerprint,
        )
        assert sorted(r.as_dict()["case_id"] for r in loaded.records()) == sorted(
            r.as_dict()["case_id"] for r in store.records()
        )
        by_id = {r.case_id: r for r in loaded.records()}
        for record in store.records():
            assert by_id[record.case_id] == record
        assert not loaded.fingerprint_mismatch

    def test_dim_mismatch_on_load(self, vocabs, tmp_path):
        store = _store(vocabs)
        store.insert(_record("a", "Surgery", SYMPTOM_POOL[0]))
        path = tmp_path / "store.jsonl"
        store.persist(path)
        with pytest.raises(DimensionMismatch):
            CaseStore.load(path, EMBEDDER.embed, vocabs.departments.l1, expected_dim=TEST_DIM * 2)

    def test_fingerprint_mismatch_flagged(self, vocabs, tmp_path):
        store = _store(vocabs)
        store.insert(_record("a", "Surgery", SYMPTOM_POOL[0]))
        path = tmp_path / "store.jsonl"
        store.persist(path)
        loaded = CaseStore.load(
            path, EMBEDDER.embed, vocabs.departments.l1, expected_fingerprint="remote:other-model"
        )
        assert loaded.fingerprint_mismatch

    def test_legacy_records_without_tier_load_as_verified(self, vocabs, tmp_path):
        import json

        store = _store(vocabs)
        store.insert(_record("a", "Surgery", SYMPTOM_POOL[0]))
        path = tmp_path / "store.jsonl"
        store.persist(path)
        lines = path.read_text().splitlines()
        record = json.loads(lines[1])
        del record["tier"]
        path.write_text(lines[0] + "\n" + json.dumps(record) + "\n")
        loaded = CaseStore.load(path, EMBEDDER.embed, vocabs.departments.l1)
        assert loaded.records()[0].tier is Tier.VERIFIED
        assert loaded.records(tier=Tier.PSEUDO) == []

    def test_symptom_length_stats(self, vocabs):
        store = _store(vocabs)
        store.insert(_record("a", "Surgery", "short one"))
        stats = store.symptom_length_stats()
        assert stats["count"] == 1
        assert stats["min"] == stats["max"] == len("short one")


class TestSnippets:
    def test_empty_marker(self):
        assert render_snippets(()) == "No similar cases available."

    def test_contains_key_fields(self, vocabs):
        store = _store(vocabs)
        store.insert(_record("a", "Surgery", SYMPTOM_POOL[0]))
        result = store.retrieve(SYMPTOM_POOL[0], department="Surgery")
        text = render_snippets(result.cases)
        assert "Similar case 1" in text
        assert "dx for a" in text
        assert "verified" in text
