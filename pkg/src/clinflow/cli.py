"""Command-line surface: ingest, split, index, run, eval, report.

Exit codes are a stable contract for CI: 0 success, 1 validation problem,
2 artifact I/O problem, 3 backend failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from . import __version__
from .agents import PromptLibrary
from .backends import HashEmbedder
from .cases import (
    SplitManifest,
    department_counts,
    load_corpus,
    split_dataset,
)
from .config import (
    RunConfig,
    build_gateway,
    load_provider_spec,
    parse_flags,
)
from .errors import (
    BackendError,
    CaseValidationError,
    ClinFlowError,
    ConfigurationError,
    DimensionMismatch,
    EncodeError,
    NotInVocabulary,
    StorageError,
)
from .metrics import ScoreReport, aggregate, score_run
from .pipeline import CaseRun, PipelineEnv, run_case
from .reporting import write_report
from .store import CaseStore
from .vocab import load_vocabularies

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_IO = 2
EXIT_BACKEND = 3


class _Parser(argparse.ArgumentParser):
    # Usage errors are validation problems under the exit-code contract.
    def error(self, message: str):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_VALIDATION)


def _gate_output(path: Path, force: bool) -> None:
    if path.exists() and not force:
        raise StorageError(f"output already exists (use --force): {path}")


def _ratios(text: str) -> tuple[float, float, float]:
    parts = [p for p in text.split(",") if p.strip()]
    if len(parts) != 3:
        raise ConfigurationError(f"ratios must be three comma-separated numbers, got {text!r}")
    try:
        return tuple(float(p) for p in parts)  # type: ignore[return-value]
    except ValueError as exc:
        raise ConfigurationError(f"bad ratio in {text!r}") from exc


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_ingest(args) -> int:
    vocabs = load_vocabularies(args.vocab_dir)
    cases = load_corpus(args.corpus, vocabs)
    counts = department_counts(cases)
    if args.json:
        print(json.dumps({"cases": len(cases), "departments": counts}, indent=2, sort_keys=True))
    else:
        print(f"{len(cases)} valid cases across {len(counts)} departments")
        width = max(len(d) for d in counts)
        for dept, count in counts.items():
            print(f"  {dept.ljust(width)}  {count}")
    return EXIT_OK


def cmd_split(args) -> int:
    vocabs = load_vocabularies(args.vocab_dir)
    cases = load_corpus(args.corpus, vocabs)
    manifest = split_dataset(cases, ratios=_ratios(args.ratios), seed=args.seed)
    out = Path(args.out)
    _gate_output(out, args.force)
    manifest.save(out)
    print(
        f"split {len(cases)} cases into train={len(manifest.train)} "
        f"val={len(manifest.val)} test={len(manifest.test)} (seed={args.seed})"
    )
    return EXIT_OK


def cmd_index_build(args) -> int:
    vocabs = load_vocabularies(args.vocab_dir)
    cases = {case.id: case for case in load_corpus(args.corpus, vocabs)}
    manifest = SplitManifest.load(args.manifest)
    store_path = Path(args.store)
    _gate_output(store_path, args.force)
    embedder = HashEmbedder(dim=args.dim)
    store = CaseStore(
        embed_fn=embedder.embed,
        dim=embedder.dim,
        departments=vocabs.departments.l1,
        fingerprint=embedder.fingerprint,
    )
    store.vocab_hash = vocabs.content_hash
    try:
        for case_id in [*manifest.train, *manifest.val]:
            if case_id not in cases:
                raise CaseValidationError(f"manifest id {case_id!r} not found in corpus")
            store.encode_and_insert(cases[case_id])
    except ClinFlowError:
        if store_path.exists():
            store_path.unlink()
        raise
    store.persist(store_path)
    stats = store.symptom_length_stats()
    print(
        f"indexed {store.size()} verified records into {store_path} "
        f"(dim={store.dim}, symptom length min/mean/max = "
        f"{stats['min']}/{stats['mean']}/{stats['max']})"
    )
    return EXIT_OK


def _load_store_auto(path: str, vocabs, expected_dim: int | None = None) -> CaseStore:
    header_line = Path(path).read_text(encoding="utf-8").splitlines()[0]
    dim = int(json.loads(header_line)["dim"])
    embedder = HashEmbedder(dim=dim)
    return CaseStore.load(
        path,
        embed_fn=embedder.embed,
        departments=vocabs.departments.l1,
        expected_dim=expected_dim,
        expected_fingerprint=embedder.fingerprint,
    )


def cmd_index_query(args) -> int:
    vocabs = load_vocabularies(args.vocab_dir)
    store = _load_store_auto(args.store, vocabs)
    result = store.retrieve(args.text, department=args.dept, k=args.k)
    if args.json:
        print(
            json.dumps(
                {
                    "global_fallback": result.global_fallback,
                    "matches": [
                        {
                            "case_id": s.record.case_id,
                            "similarity": round(s.similarity, 6),
                            "tier": s.tier.value,
                            "department": s.record.department,
                            "diagnosis": s.record.features.diagnosis,
                        }
                        for s in result.cases
                    ],
                },
                indent=2,
                sort_keys=True,
            )
        )
        return EXIT_OK
    if result.global_fallback:
        print("(department bucket empty; searched the whole store)")
    if not result.cases:
        print("no matches")
    for i, scored in enumerate(result.cases, start=1):
        record = scored.record
        print(
            f"{i}. {record.case_id}  sim={scored.similarity:.4f}  tier={scored.tier.value}  "
            f"dept={record.department}  dx={record.features.diagnosis or '(none)'}"
        )
    return EXIT_OK


def _run_config_from_args(args) -> RunConfig:
    config = RunConfig.from_file(args.config) if args.config else RunConfig()
    if args.corpus:
        config.corpus_path = args.corpus
    if args.manifest:
        config.manifest_path = args.manifest
    if args.store:
        config.store_path = args.store
    if args.out:
        config.output_dir = args.out
    if args.vocab_dir:
        config.vocab_dir = args.vocab_dir
    if args.flags is not None:
        config.flags = parse_flags(args.flags, base=config.flags)
    if args.max_rounds is not None:
        config.max_rounds = args.max_rounds
    if args.turn_budget is not None:
        config.turn_budget = args.turn_budget
    if args.parallel is not None:
        config.parallelism = args.parallel
    if args.reingest:
        config.reingest = True
    if args.dim is not None:
        config.embedding_dim = args.dim
    if args.scripts:
        config.provider = {"kind": "scripted", "script_path": args.scripts}
    elif args.provider_config:
        config.provider = load_provider_spec(args.provider_config)
    return config


def cmd_run(args) -> int:
    config = _run_config_from_args(args)
    if not config.provider:
        raise ConfigurationError("run needs --scripts or --provider-config")
    config.validate_for_run()
    vocabs = load_vocabularies(config.vocab_dir)
    cases = {case.id: case for case in load_corpus(config.corpus_path, vocabs)}
    manifest = SplitManifest.load(config.manifest_path)
    bucket_ids = manifest.bucket(args.split)
    missing = [case_id for case_id in bucket_ids if case_id not in cases]
    if missing:
        raise CaseValidationError(f"manifest ids missing from corpus: {missing[:5]}")

    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for case_id in bucket_ids:
        _gate_output(out_dir / f"{case_id}.json", args.force)

    gateway = build_gateway(
        config.provider,
        embedding_dim=config.embedding_dim,
        transcript_path=out_dir / "transcript.jsonl",
    )
    store = None
    if config.flags.rag:
        store = _load_store_auto(config.store_path, vocabs, expected_dim=config.embedding_dim)
        store.embed_fn = gateway.embed  # route query embeddings through the audit log
    env = PipelineEnv(
        gateway=gateway,
        vocabs=vocabs,
        library=PromptLibrary(),
        options=config.options(),
        store=store,
    )

    ordered = [cases[case_id] for case_id in bucket_ids]
    if config.parallelism > 1 and not config.reingest:
        with ThreadPoolExecutor(max_workers=config.parallelism) as pool:
            runs = list(pool.map(lambda c: run_case(c, env), ordered))
    else:
        runs = [run_case(case, env) for case in ordered]
    for run in runs:
        run.save(out_dir)

    completed = sum(1 for r in runs if r.status == "complete")
    run_manifest = {
        "config_fingerprint": env.config_fingerprint(),
        "flags": config.flags.as_dict(),
        "split": args.split,
        "case_ids": list(bucket_ids),
        "completed": completed,
        "aborted": len(runs) - completed,
    }
    (out_dir / "run_manifest.json").write_text(
        json.dumps(run_manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    print(f"ran {len(runs)} cases ({completed} complete) into {out_dir}")
    return EXIT_OK


def cmd_eval(args) -> int:
    vocabs = load_vocabularies(args.vocab_dir)
    runs_dir = Path(args.runs_dir)
    if not runs_dir.is_dir():
        raise StorageError(f"runs directory does not exist: {runs_dir}")
    run_files = sorted(
        p for p in runs_dir.glob("*.json") if p.name not in ("run_manifest.json",)
    )
    if not run_files:
        raise StorageError(f"no run files found in {runs_dir}")
    cases = {case.id: case for case in load_corpus(args.corpus, vocabs)}

    if args.judge_scripts:
        judge_spec = {"kind": "scripted", "script_path": args.judge_scripts}
    elif args.judge_config:
        judge_spec = load_provider_spec(args.judge_config)
    else:
        raise ConfigurationError("eval needs --judge-scripts or --judge-config")
    gateway = build_gateway(judge_spec)
    library = PromptLibrary()

    scored = []
    for path in run_files:
        run = CaseRun.load(path)
        if run.case_id not in cases:
            raise CaseValidationError(f"run {path.name} references unknown case {run.case_id!r}")
        scored.append(
            score_run(
                run,
                cases[run.case_id],
                gateway,
                library,
                strict_items=not args.lenient_items,
                batch_entail=args.batch_entail,
            )
        )
    report = aggregate(scored)
    out = Path(args.out)
    _gate_output(out, args.force)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(
        json.dumps(report.as_dict(), ensure_ascii=False, sort_keys=True, indent=2) + "\n",
        encoding="utf-8",
    )
    print(f"scored {len(scored)} runs -> {out} (overall average {report.overall:.4f})")
    return EXIT_OK


def cmd_report(args) -> int:
    scores_path = Path(args.scores)
    if not scores_path.exists():
        raise StorageError(f"scores file does not exist: {scores_path}")
    report = ScoreReport.from_dict(json.loads(scores_path.read_text(encoding="utf-8")))
    written = write_report(report, args.out_dir, force=args.force, figures=not args.no_figures)
    for path in written:
        print(f"wrote {path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="clinflow", description=__doc__)
    parser.add_argument("--version", action="version", version=f"clinflow {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="validate a corpus and print department counts")
    p.add_argument("--corpus", required=True)
    p.add_argument("--vocab-dir", default=None)
    p.add_argument("--json", action="store_true")
    p.set_defaults(fn=cmd_ingest)

    p = sub.add_parser("split", help="write a deterministic train/val/test manifest")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ratios", default="0.7,0.1,0.2")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--vocab-dir", default=None)
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_split)

    index = sub.add_parser("index", help="build or query the case store")
    index_sub = index.add_subparsers(dest="index_command", required=True)

    p = index_sub.add_parser("build", help="encode train+val cases into a store file")
    p.add_argument("--corpus", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--store", required=True)
    p.add_argument("--dim", type=int, default=256)
    p.add_argument("--vocab-dir", default=None)
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_index_build)

    p = index_sub.add_parser("query", help="retrieve the most similar cases")
    p.add_argument("--store", required=True)
    p.add_argument("--text", required=True)
    p.add_argument("--dept", default=None)
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--vocab-dir", default=None)
    p.add_argument("--json", action="store_true")
    p.set_defaults(fn=cmd_index_query)

    p = sub.add_parser("run", help="execute the pipeline over a split bucket")
    p.add_argument("--config", default=None, help="JSON config file; flags override it")
    p.add_argument("--corpus", default=None)
    p.add_argument("--manifest", default=None)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--out", default=None)
    p.add_argument("--store", default=None)
    p.add_argument("--scripts", default=None, help="scripted provider reply file")
    p.add_argument("--provider-config", default=None)
    p.add_argument("--flags", default=None, help="e.g. person=on,seq=on,inter=on,feedback=on,rag=on")
    p.add_argument("--max-rounds", type=int, default=None)
    p.add_argument("--turn-budget", type=int, default=None)
    p.add_argument("--parallel", type=int, default=None)
    p.add_argument("--reingest", action="store_true")
    p.add_argument("--dim", type=int, default=None)
    p.add_argument("--vocab-dir", default=None)
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("eval", help="score a directory of run files")
    p.add_argument("--runs-dir", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--judge-scripts", default=None)
    p.add_argument("--judge-config", default=None)
    p.add_argument("--lenient-items", action="store_true",
                   help="drop unmatched free-text items instead of penalizing them")
    p.add_argument("--batch-entail", action="store_true")
    p.add_argument("--vocab-dir", default=None)
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("report", help="render tables, CSVs, and figures from scores")
    p.add_argument("--scores", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--no-figures", action="store_true")
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (CaseValidationError, ConfigurationError, NotInVocabulary, DimensionMismatch,
            EncodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (StorageError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except BackendError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BACKEND


if __name__ == "__main__":
    raise SystemExit(main())
