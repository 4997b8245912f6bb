"""Sequential clinical decision pipeline with panel agents, case retrieval,
and an evaluation harness."""

__version__ = "0.1.0"

from .cases import ClinicalCase, ImageRef, SplitManifest, load_corpus, parse_case, split_dataset
from .errors import ClinFlowError
from .pipeline import AblationFlags, CaseRun, PipelineEnv, RunOptions, run_case
from .vocab import Vocabularies, load_vocabularies

__all__ = [
    "__version__",
    "AblationFlags",
    "CaseRun",
    "ClinFlowError",
    "ClinicalCase",
    "ImageRef",
    "PipelineEnv",
    "RunOptions",
    "SplitManifest",
    "Vocabularies",
    "load_corpus",
    "load_vocabularies",
    "parse_case",
    "run_case",
    "split_dataset",
]
