"""Analytical decode-phase model for LLM inference.

Each decode step is priced with a two-term roofline: the step takes as long
as the slower of moving its bytes at ``bw_max * eff_bw`` and doing its FLOPs
at ``compute_peak * eff_comp``.  Bytes per step are one read of the active
weights plus one read of the KV cache for every sequence in the batch.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from ..errors import BadArgs, ConfigError
from ..pricing import GpuModel
from .trace import Trace

DEFAULT_EFF_BW = 0.8
DEFAULT_EFF_COMP = 0.8
DEFAULT_BATCH = 64
DEFAULT_CONTEXTS = (1024, 2048, 4096, 8192)


@dataclass(frozen=True)
class Gqa:
    kv_heads: int
    head_dim: int

    def kv_bytes(self, dtype_bytes: float) -> float:
        return 2 * self.kv_heads * self.head_dim * dtype_bytes

    @property
    def width(self) -> int:
        return self.kv_heads * self.head_dim


@dataclass(frozen=True)
class Mla:
    compressed_dim: int
    rope_dim: int

    def kv_bytes(self, dtype_bytes: float) -> float:
        return (self.compressed_dim + self.rope_dim) * dtype_bytes

    @property
    def width(self) -> int:
        # attention reads the latent vector in place of per-head K/V
        return self.compressed_dim + self.rope_dim


@dataclass(frozen=True)
class LlmModelConfig:
    name: str
    active_params: float
    dtype_bytes: float
    layers: int
    attention: Gqa | Mla

    def __post_init__(self):
        a = self.attention
        dims = (a.kv_heads, a.head_dim) if isinstance(a, Gqa) else (a.compressed_dim, a.rope_dim)
        if min(self.active_params, self.dtype_bytes, self.layers, *dims) <= 0:
            raise ConfigError(f"model {self.name!r}: all sizes must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "LlmModelConfig":
        try:
            att = d["attention"]
            kind = att.get("kind", "gqa")
            if kind == "gqa":
                attention = Gqa(int(att["kv_heads"]), int(att["head_dim"]))
            elif kind == "mla":
                attention = Mla(int(att["compressed_dim"]), int(att["rope_dim"]))
            else:
                raise ConfigError(f"unknown attention kind {kind!r}")
            return cls(d["name"], float(d["active_params"]), float(d["dtype_bytes"]), int(d["layers"]), attention)
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad model config: {exc}") from exc


def bundled_models() -> list[str]:
    root = resources.files("agora").joinpath("data/models")
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def load_model(name_or_path: str | Path) -> LlmModelConfig:
    """Load a bundled model by name, or a model config file by path."""
    p = Path(name_or_path)
    if p.suffix == ".json" and p.exists():
        text = p.read_text()
    else:
        res = resources.files("agora").joinpath(f"data/models/{name_or_path}.json")
        if not res.is_file():
            raise ConfigError(f"unknown model {name_or_path!r}; bundled: {bundled_models()}")
        text = res.read_text()
    return LlmModelConfig.from_dict(json.loads(text))


@dataclass(frozen=True)
class DecodeStep:
    latency: float  # seconds
    achieved_bw: float  # TB/s
    flops: float
    bytes_moved: float
    memory_bound: bool
    compute_util: float


def _check(batch, context, eff_bw, eff_comp):
    if batch < 1 or context < 1:
        raise BadArgs(f"batch and context must be >= 1 (got {batch}, {context})")
    if not (0 < eff_bw <= 1 and 0 < eff_comp <= 1):
        raise BadArgs(f"efficiencies must be in (0, 1] (got {eff_bw}, {eff_comp})")


def _step_arrays(model: LlmModelConfig, gpu: GpuModel, batch, contexts, eff_bw, eff_comp):
    contexts = np.asarray(contexts, dtype=float)
    kv = model.attention.kv_bytes(model.dtype_bytes)
    bytes_moved = model.active_params * model.dtype_bytes + batch * contexts * model.layers * kv
    flops = 2 * model.active_params * batch + 4 * batch * contexts * model.layers * model.attention.width
    mem_time = bytes_moved / (gpu.bw_max * 1e12 * eff_bw)
    comp_time = flops / (gpu.compute_peak * 1e12 * eff_comp)
    latency = np.maximum(mem_time, comp_time)
    achieved = np.minimum(bytes_moved / latency / 1e12, gpu.bw_max * eff_bw)
    comp_util = np.minimum(flops / latency / (gpu.compute_peak * 1e12), 1.0)
    return latency, achieved, flops, bytes_moved, mem_time >= comp_time, comp_util


def llm_decode_step(
    model: LlmModelConfig,
    gpu: GpuModel,
    batch: int,
    context: int,
    eff_bw: float = DEFAULT_EFF_BW,
    eff_comp: float = DEFAULT_EFF_COMP,
) -> DecodeStep:
    _check(batch, context, eff_bw, eff_comp)
    lat, bw, fl, by, mem, cu = _step_arrays(model, gpu, batch, [context], eff_bw, eff_comp)
    return DecodeStep(float(lat[0]), float(bw[0]), float(fl[0]), float(by[0]), bool(mem[0]), float(cu[0]))


def llm_decode_trace(
    model: LlmModelConfig,
    gpu: GpuModel,
    batch: int,
    context: int,
    output_tokens: int,
    eff_bw: float = DEFAULT_EFF_BW,
    eff_comp: float = DEFAULT_EFF_COMP,
) -> Trace:
    """One record per decode step; the context grows by one token per step."""
    _check(batch, context, eff_bw, eff_comp)
    if output_tokens < 1:
        raise BadArgs(f"output_tokens must be >= 1 (got {output_tokens})")
    contexts = context + np.arange(output_tokens)
    lat, bw, _, _, _, cu = _step_arrays(model, gpu, batch, contexts, eff_bw, eff_comp)
    return Trace(
        gpu.name,
        lat * 1e6,
        bw,
        cu,
        np.minimum(bw / gpu.bw_max, 1.0),
        [f"{model.name}:ctx{int(c)}" for c in contexts],
        token_count=batch * output_tokens,
    )
