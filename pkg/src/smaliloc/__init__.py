"""LLM-driven localization of malicious payloads in decompiled Android apps."""

__version__ = "0.1.0"

from .behaviors import Behavior, FamilyTable, load_family_table, load_taxonomy, lookup_family
from .evaluation import GroundTruth, MetricsRow, score, score_from_verdicts, workload_reduction
from .gateway import Gateway, LlmRequest, LlmResponse, MockBackend
from .pipeline import AnalysisReport, Finding, PipelineConfig, run_baseline, run_malloc
from .smali import Corpus, SmaliClass, SmaliMethod, group_synthetic_methods, ingest_tree, parse_smali_file

__all__ = [
    "AnalysisReport",
    "Behavior",
    "Corpus",
    "FamilyTable",
    "Finding",
    "Gateway",
    "GroundTruth",
    "LlmRequest",
    "LlmResponse",
    "MetricsRow",
    "MockBackend",
    "PipelineConfig",
    "SmaliClass",
    "SmaliMethod",
    "group_synthetic_methods",
    "ingest_tree",
    "load_family_table",
    "load_taxonomy",
    "lookup_family",
    "parse_smali_file",
    "run_baseline",
    "run_malloc",
    "score",
    "score_from_verdicts",
    "workload_reduction",
]
