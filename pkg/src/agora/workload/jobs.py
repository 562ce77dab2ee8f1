"""Jobs, weighted job distributions and seeded sampling."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from ..errors import BadSpec, ConfigError, MissingTraceBinding
from ..pricing import GpuCatalog, GpuModel
from .formats import read_trace
from .llm import DEFAULT_BATCH, DEFAULT_CONTEXTS, DEFAULT_EFF_BW, DEFAULT_EFF_COMP, llm_decode_trace, load_model
from .trace import Trace


@dataclass(frozen=True, eq=False)
class JobSpec:
    """One job size ``s``: either recorded traces or an LLM decode request.

    ``traces`` maps GPU name to a :class:`Trace` or a path to a trace file.
    LLM jobs synthesise a trace for any catalog GPU on demand.
    """

    name: str
    kind: str = "trace-file"
    traces: Mapping[str, Trace | str | Path] = field(default_factory=dict)
    model: str | None = None
    batch: int = DEFAULT_BATCH
    context: int = 1024
    output_tokens: int = 128
    eff_bw: float = DEFAULT_EFF_BW
    eff_comp: float = DEFAULT_EFF_COMP
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.kind not in ("trace-file", "llm-decode"):
            raise ConfigError(f"job {self.name!r}: unknown kind {self.kind!r}")
        if self.kind == "llm-decode" and not self.model:
            raise ConfigError(f"job {self.name!r}: llm-decode needs a model")

    def trace_for(self, gpu: GpuModel) -> Trace:
        """The job's trace on ``gpu``; loaded or synthesised once, then cached."""
        hit = self._cache.get(gpu.name)
        if hit is not None:
            return hit
        if self.kind == "llm-decode":
            model = load_model(self.model)
            trace = llm_decode_trace(model, gpu, self.batch, self.context, self.output_tokens, self.eff_bw, self.eff_comp)
        else:
            if gpu.name not in self.traces:
                raise MissingTraceBinding(self.name, gpu.name)
            src = self.traces[gpu.name]
            trace = src if isinstance(src, Trace) else read_trace(src, gpu)
            trace.check_gpu(gpu)
        self._cache[gpu.name] = trace
        return trace

    def has_binding(self, gpu: str) -> bool:
        return self.kind == "llm-decode" or gpu in self.traces

    def to_dict(self, relative_to: Path | None = None) -> dict:
        if self.kind == "llm-decode":
            d = {"kind": self.kind, "name": self.name, "model": self.model, "batch": self.batch,
                 "context": self.context, "output_tokens": self.output_tokens}
            if self.eff_bw != DEFAULT_EFF_BW or self.eff_comp != DEFAULT_EFF_COMP:
                d.update(eff_bw=self.eff_bw, eff_comp=self.eff_comp)
            return d
        traces = {}
        for g, src in self.traces.items():
            if isinstance(src, Trace):
                raise ValueError(f"job {self.name!r}: in-memory traces cannot be written to a distribution file")
            p = Path(src)
            if relative_to is not None:
                try:
                    p = p.resolve().relative_to(relative_to.resolve())
                except ValueError:
                    pass
            traces[g] = str(p)
        return {"kind": self.kind, "name": self.name, "traces": traces}

    @classmethod
    def from_dict(cls, d: dict, base: Path | None = None) -> "JobSpec":
        try:
            kind = d.get("kind", "trace-file")
            if kind == "llm-decode":
                return cls(
                    d.get("name") or f"{d['model']}-b{d.get('batch', DEFAULT_BATCH)}-c{d['context']}",
                    kind,
                    model=d["model"],
                    batch=int(d.get("batch", DEFAULT_BATCH)),
                    context=int(d["context"]),
                    output_tokens=int(d.get("output_tokens", 128)),
                    eff_bw=float(d.get("eff_bw", DEFAULT_EFF_BW)),
                    eff_comp=float(d.get("eff_comp", DEFAULT_EFF_COMP)),
                )
            traces = {g: (base / p if base is not None else Path(p)) for g, p in d["traces"].items()}
            return cls(d["name"], kind, traces)
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad job spec {d!r}: {exc}") from exc


@dataclass(frozen=True)
class JobDistribution:
    entries: tuple[tuple[JobSpec, float], ...]

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple((j, float(w)) for j, w in self.entries))
        if not self.entries:
            raise BadSpec("distribution has no entries")
        w = self.weights
        if (w < 0).any() or not np.isfinite(w).all() or w.sum() <= 0:
            raise BadSpec("weights must be non-negative with a positive sum")

    @property
    def jobs(self) -> list[JobSpec]:
        return [j for j, _ in self.entries]

    @property
    def weights(self) -> np.ndarray:
        return np.array([w for _, w in self.entries], dtype=float)

    @property
    def cumulative(self) -> np.ndarray:
        c = np.cumsum(self.weights)
        return c / c[-1]

    def check_bindings(self, gpus) -> None:
        for job in self.jobs:
            for g in gpus:
                if not job.has_binding(g):
                    raise MissingTraceBinding(job.name, g)

    def to_dict(self, relative_to: Path | None = None) -> dict:
        return {"entries": [{"weight": w, "job": j.to_dict(relative_to)} for j, w in self.entries]}

    @classmethod
    def from_dict(cls, d: dict, base: Path | None = None) -> "JobDistribution":
        try:
            return cls(tuple((JobSpec.from_dict(e["job"], base), float(e.get("weight", 1.0))) for e in d["entries"]))
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"bad distribution: {exc}") from exc


def load_distribution(path: str | Path) -> JobDistribution:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot load distribution {path}: {exc}") from exc
    return JobDistribution.from_dict(data, base=path.parent)


def save_distribution(dist: JobDistribution, path: str | Path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(dist.to_dict(relative_to=path.parent), indent=2) + "\n")
    return path


def sample_index(dist: JobDistribution, rng: np.random.Generator, n: int | None = None):
    """Categorical draw(s) of entry indices, proportional to weight.

    ``n`` draws consume the generator exactly like ``n`` single draws, so
    batched and one-at-a-time sampling give the same sequence.
    """
    u = rng.random() if n is None else rng.random(n)
    idx = np.searchsorted(dist.cumulative, u, side="right")
    return np.minimum(idx, len(dist.entries) - 1) if n is not None else min(int(idx), len(dist.entries) - 1)


def sample_job(dist: JobDistribution, rng: np.random.Generator) -> JobSpec:
    return dist.entries[sample_index(dist, rng)][0]


def llm_distribution(
    models=("llama3-70b", "llama3-405b", "deepseek-v3-671b"),
    contexts=DEFAULT_CONTEXTS,
    batch: int = DEFAULT_BATCH,
    output_tokens: int = 128,
) -> JobDistribution:
    """Equal-weight LLM decode jobs over ``models`` x ``contexts``."""
    entries = []
    for m in models:
        for c in contexts:
            job = JobSpec(f"{m}-b{batch}-c{c}", "llm-decode", model=m, batch=batch, context=c, output_tokens=output_tokens)
            entries.append((job, 1.0))
    return JobDistribution(tuple(entries))


def traces_on(dist: JobDistribution, gpu: GpuModel) -> list[Trace]:
    return [j.trace_for(gpu) for j in dist.jobs]


def resolve_gpus(catalog: GpuCatalog, names) -> list[GpuModel]:
    out = []
    for n in names:
        if n not in catalog:
            raise ConfigError(f"GPU {n!r} is not in the catalog {catalog.names}")
        out.append(catalog[n])
    return out
