from __future__ import annotations

from pathlib import Path

import pytest

from clinflow.agents import PromptLibrary
from clinflow.backends import (
    Gateway,
    HashEmbedder,
    ScriptedProvider,
    TickClock,
    TranscriptLog,
)
from clinflow.cases import load_corpus
from clinflow.pipeline import AblationFlags, PipelineEnv, RunOptions
from clinflow.store import CaseStore
from clinflow.vocab import load_vocabularies

REPO = Path(__file__).resolve().parent.parent
FIXTURES = REPO / "fixtures"
CORPUS_PATH = FIXTURES / "corpus.jsonl"
SCRIPTS_PATH = FIXTURES / "scripts.json"
JUDGE_SCRIPTS_PATH = FIXTURES / "judge_scripts.json"

TEST_DIM = 32


@pytest.fixture(scope="session")
def vocabs():
    return load_vocabularies()


@pytest.fixture(scope="session")
def corpus(vocabs):
    return load_corpus(CORPUS_PATH, vocabs)


@pytest.fixture(scope="session")
def corpus_by_id(corpus):
    return {case.id: case for case in corpus}


def make_gateway(provider=None, dim: int = TEST_DIM, role_providers=None) -> Gateway:
    return Gateway(
        chat_provider=provider if provider is not None else ScriptedProvider(),
        embedder=HashEmbedder(dim=dim),
        role_providers=role_providers,
        transcript=TranscriptLog(),
        clock=TickClock(),
    )


def demo_provider() -> ScriptedProvider:
    return ScriptedProvider.from_file(SCRIPTS_PATH)


def judge_gateway() -> Gateway:
    return make_gateway(ScriptedProvider.from_file(JUDGE_SCRIPTS_PATH))


def make_store(gateway: Gateway, vocabs, cases=(), dim: int = TEST_DIM) -> CaseStore:
    store = CaseStore(
        embed_fn=gateway.embed,
        dim=dim,
        departments=vocabs.departments.l1,
        fingerprint=f"feature-hash:{dim}",
    )
    for case in cases:
        store.encode_and_insert(case)
    return store


def make_env(
    vocabs,
    provider=None,
    store_cases=(),
    flags: AblationFlags | None = None,
    max_rounds: int = 3,
    turn_budget: int = 8,
    reingest: bool = False,
    dim: int = TEST_DIM,
    role_providers=None,
) -> PipelineEnv:
    gateway = make_gateway(provider or demo_provider(), dim=dim, role_providers=role_providers)
    flags = flags or AblationFlags()
    store = make_store(gateway, vocabs, store_cases, dim=dim) if flags.rag else None
    return PipelineEnv(
        gateway=gateway,
        vocabs=vocabs,
        library=PromptLibrary(),
        options=RunOptions(
            flags=flags, max_rounds=max_rounds, turn_budget=turn_budget, reingest=reingest
        ),
        store=store,
    )
