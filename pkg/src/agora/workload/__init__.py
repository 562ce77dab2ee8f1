"""Workload traces, synthetic generators, LLM decode model and job sampling."""

from .formats import parse_trace, quantize, dequantize, read_trace, serialize_trace, write_trace, SAMPLE_DTYPE
from .jobs import (
    JobDistribution,
    JobSpec,
    llm_distribution,
    load_distribution,
    sample_index,
    sample_job,
    save_distribution,
)
from .llm import DecodeStep, Gqa, LlmModelConfig, Mla, llm_decode_step, llm_decode_trace, load_model
from .synthetic import SyntheticSpec, gen_synthetic_trace
from .trace import TickGrid, Trace, TraceStats, UtilizationRecord, tick_grid, trace_stats

__all__ = [
    "DecodeStep", "Gqa", "JobDistribution", "JobSpec", "LlmModelConfig", "Mla", "SAMPLE_DTYPE",
    "SyntheticSpec", "TickGrid", "Trace", "TraceStats", "UtilizationRecord", "dequantize",
    "gen_synthetic_trace", "llm_decode_step", "llm_decode_trace", "llm_distribution",
    "load_distribution", "load_model", "parse_trace", "quantize", "read_trace", "sample_index",
    "sample_job", "save_distribution", "serialize_trace", "tick_grid", "trace_stats", "write_trace",
]
