"""Layered run configuration and provider construction.

Precedence: command-line flags > config file > built-in defaults. Credentials
are read only from environment variables named in the provider config.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .backends import (
    DEFAULT_EMBED_DIM,
    ChatProvider,
    Gateway,
    HashEmbedder,
    OpenAICompatProvider,
    RemoteEmbedder,
    ScriptedProvider,
    TickClock,
    TranscriptLog,
    WallClock,
)
from .errors import ConfigurationError
from .pipeline import AblationFlags, RunOptions

FLAG_ALIASES = {
    "person": "personalization",
    "personalization": "personalization",
    "seq": "sequentiality",
    "sequentiality": "sequentiality",
    "inter": "interactivity",
    "interactivity": "interactivity",
    "feedback": "feedback",
    "rag": "rag",
}


def parse_flags(spec: str, base: AblationFlags | None = None) -> AblationFlags:
    """Parse 'person=on,seq=off,...' into ablation flags over a base setting."""
    flags = (base or AblationFlags()).as_dict()
    if spec:
        for piece in spec.split(","):
            piece = piece.strip()
            if not piece:
                continue
            if "=" not in piece:
                raise ConfigurationError(f"flag {piece!r} must look like name=on|off")
            name, value = piece.split("=", 1)
            key = FLAG_ALIASES.get(name.strip().lower())
            if key is None:
                raise ConfigurationError(f"unknown ablation flag {name!r}")
            value = value.strip().lower()
            if value not in ("on", "off", "true", "false", "1", "0"):
                raise ConfigurationError(f"flag {name!r} must be on or off, got {value!r}")
            flags[key] = value in ("on", "true", "1")
    return AblationFlags.from_dict(flags)


@dataclass
class RunConfig:
    """Everything `run` and friends need, loadable from one JSON file."""

    corpus_path: str = ""
    vocab_dir: str | None = None
    manifest_path: str = ""
    store_path: str = ""
    output_dir: str = "out"
    split_ratios: tuple[float, float, float] = (0.7, 0.1, 0.2)
    seed: int = 0
    embedding_dim: int = DEFAULT_EMBED_DIM
    flags: AblationFlags = field(default_factory=AblationFlags)
    max_rounds: int = 3
    turn_budget: int = 8
    retrieval_k: int = 3
    parallelism: int = 1
    reingest: bool = False
    strict_items: bool = True
    batch_entail: bool = False
    provider: dict = field(default_factory=dict)
    judge_provider: dict = field(default_factory=dict)
    thresholds: dict = field(default_factory=dict)

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigurationError(f"config file does not exist: {path}")
        raw = json.loads(path.read_text(encoding="utf-8"))
        config = cls()
        for key, value in raw.items():
            if key == "flags":
                config.flags = AblationFlags.from_dict(value)
            elif key == "split_ratios":
                config.split_ratios = tuple(value)
            elif hasattr(config, key):
                setattr(config, key, value)
            else:
                raise ConfigurationError(f"unknown config key {key!r}")
        return config

    def options(self) -> RunOptions:
        return RunOptions(
            flags=self.flags,
            max_rounds=self.max_rounds,
            turn_budget=self.turn_budget,
            retrieval_k=self.retrieval_k,
            reingest=self.reingest,
        )

    def validate_for_run(self) -> None:
        if not self.corpus_path or not Path(self.corpus_path).exists():
            raise ConfigurationError(f"corpus path does not exist: {self.corpus_path!r}")
        if self.manifest_path and not Path(self.manifest_path).exists():
            raise ConfigurationError(f"manifest path does not exist: {self.manifest_path!r}")
        if self.flags.rag:
            if not self.store_path:
                raise ConfigurationError("rag=on requires a store path")
            if not Path(self.store_path).exists():
                raise ConfigurationError(f"store path does not exist: {self.store_path!r}")
        if self.parallelism < 1:
            raise ConfigurationError("parallelism must be at least 1")


def build_chat_provider(spec: dict) -> ChatProvider:
    kind = spec.get("kind", "")
    if kind == "scripted":
        if "script_path" not in spec:
            raise ConfigurationError("scripted provider needs script_path")
        provider = ScriptedProvider.from_file(spec["script_path"])
        if "supports_images" in spec:
            provider.supports_images = bool(spec["supports_images"])
        return provider
    if kind == "openai_compat":
        for required in ("base_url", "model"):
            if required not in spec:
                raise ConfigurationError(f"openai_compat provider needs {required}")
        return OpenAICompatProvider(
            base_url=spec["base_url"],
            model=spec["model"],
            api_key_env=spec.get("api_key_env", "OPENAI_API_KEY"),
            timeout=spec.get("timeout", 60.0),
            retries=spec.get("retries", 3),
            supports_images=spec.get("supports_images", True),
        )
    raise ConfigurationError(f"unknown provider kind {kind!r}")


def build_embedder(spec: dict, dim: int):
    kind = spec.get("kind", "hash")
    if kind == "hash":
        return HashEmbedder(dim=dim)
    if kind == "remote":
        for required in ("base_url", "model"):
            if required not in spec:
                raise ConfigurationError(f"remote embedder needs {required}")
        return RemoteEmbedder(
            base_url=spec["base_url"],
            model=spec["model"],
            api_key_env=spec.get("api_key_env", "OPENAI_API_KEY"),
            timeout=spec.get("timeout", 60.0),
            retries=spec.get("retries", 3),
            dim=dim,
        )
    raise ConfigurationError(f"unknown embedder kind {kind!r}")


def build_gateway(
    provider_spec: dict,
    embedding_dim: int = DEFAULT_EMBED_DIM,
    transcript_path: str | Path | None = None,
) -> Gateway:
    """Build the gateway from a provider spec.

    Spec shape: either a bare provider ({"kind": ...}) or
    {"default": {...}, "roles": {"patient": {...}}, "embedder": {...}}.
    Scripted default providers get a logical clock so exports stay byte-stable.
    """
    if "kind" in provider_spec:
        default_spec = provider_spec
        role_specs: dict[str, dict] = {}
        embed_spec: dict = {}
    else:
        default_spec = provider_spec.get("default", {})
        role_specs = provider_spec.get("roles", {})
        embed_spec = provider_spec.get("embedder", {})
    default = build_chat_provider(default_spec)
    roles = {role: build_chat_provider(spec) for role, spec in role_specs.items()}
    embedder = build_embedder(embed_spec, embedding_dim)
    deterministic = isinstance(default, ScriptedProvider) and all(
        isinstance(p, ScriptedProvider) for p in roles.values()
    )
    return Gateway(
        chat_provider=default,
        embedder=embedder,
        role_providers=roles,
        transcript=TranscriptLog(transcript_path),
        clock=TickClock() if deterministic else WallClock(),
    )


def scripted_gateway_from_file(script_path: str | Path, embedding_dim: int = DEFAULT_EMBED_DIM,
                               transcript_path: str | Path | None = None) -> Gateway:
    return build_gateway(
        {"kind": "scripted", "script_path": str(script_path)},
        embedding_dim=embedding_dim,
        transcript_path=transcript_path,
    )


def load_provider_spec(path: str | Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"provider config does not exist: {path}")
    return json.loads(path.read_text(encoding="utf-8"))
