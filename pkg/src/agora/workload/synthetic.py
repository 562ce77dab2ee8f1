"""Seeded synthetic traces, standing in for measured per-kernel traces.

Distributions are small JSON-friendly dicts::

    {"const": 1.0}
    {"uniform": [0.0, 2.0]}
    {"choice": {"values": [0.2, 1.8], "weights": [3, 1]}}
    {"lognormal": {"median": 30, "sigma": 1.0, "min": 2, "max": 2000}}

A duration distribution may add ``"integer": true`` to round to whole
microseconds (minimum 1).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import BadSpec
from ..pricing import GpuModel
from .trace import Trace


@dataclass(frozen=True)
class SyntheticSpec:
    n_records: int
    duration_dist: dict  # microseconds
    bw_dist: dict  # TB/s
    compute_dist: dict = field(default_factory=lambda: {"uniform": [0.0, 1.0]})

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        try:
            return cls(
                int(d["n_records"]),
                dict(d["duration_dist"]),
                dict(d["bw_dist"]),
                dict(d.get("compute_dist", {"uniform": [0.0, 1.0]})),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise BadSpec(f"bad synthetic trace spec: {exc}") from exc


def _support(dist: dict) -> tuple[float, float]:
    if "const" in dist:
        v = float(dist["const"])
        return v, v
    if "uniform" in dist:
        lo, hi = (float(x) for x in dist["uniform"])
        if hi < lo:
            raise BadSpec(f"uniform bounds reversed: {dist}")
        return lo, hi
    if "choice" in dist:
        vals = [float(v) for v in dist["choice"]["values"]]
        if not vals:
            raise BadSpec("choice needs at least one value")
        return min(vals), max(vals)
    if "lognormal" in dist:
        p = dist["lognormal"]
        lo, hi = float(p.get("min", 0.0)), float(p.get("max", np.inf))
        if p["median"] <= 0 or p["sigma"] < 0 or hi < lo:
            raise BadSpec(f"bad lognormal parameters: {p}")
        return lo, hi
    raise BadSpec(f"unknown distribution {dist}")


def draw(dist: dict, n: int, rng: np.random.Generator) -> np.ndarray:
    if "const" in dist:
        out = np.full(n, float(dist["const"]))
    elif "uniform" in dist:
        lo, hi = (float(x) for x in dist["uniform"])
        out = rng.uniform(lo, hi, n)
    elif "choice" in dist:
        c = dist["choice"]
        vals = np.asarray(c["values"], dtype=float)
        w = np.asarray(c.get("weights", np.ones(len(vals))), dtype=float)
        if len(w) != len(vals) or (w < 0).any() or w.sum() <= 0:
            raise BadSpec(f"bad choice weights: {c}")
        out = vals[rng.choice(len(vals), size=n, p=w / w.sum())]
    elif "lognormal" in dist:
        p = dist["lognormal"]
        out = np.exp(rng.normal(np.log(float(p["median"])), float(p["sigma"]), n))
        out = np.clip(out, float(p.get("min", 0.0)), float(p.get("max", np.inf)))
    else:
        raise BadSpec(f"unknown distribution {dist}")
    if dist.get("integer"):
        out = np.maximum(np.rint(out), 1.0)
    return out


def gen_synthetic_trace(spec: SyntheticSpec | dict, gpu: GpuModel, seed) -> Trace:
    """Generate a trace whose records are i.i.d. draws from ``spec``.

    The same ``(spec, gpu, seed)`` always yields the same trace.  ``seed`` may
    be an int, a sequence of ints, or a :class:`numpy.random.SeedSequence`.
    """
    if isinstance(spec, dict):
        spec = SyntheticSpec.from_dict(spec)
    if spec.n_records < 1:
        raise BadSpec("n_records must be at least 1")
    d_lo, _ = _support(spec.duration_dist)
    if d_lo <= 0 and not spec.duration_dist.get("integer"):
        raise BadSpec(f"durations must be positive: {spec.duration_dist}")
    b_lo, b_hi = _support(spec.bw_dist)
    if b_lo < 0 or b_hi > gpu.bw_max:
        raise BadSpec(f"bandwidth distribution {spec.bw_dist} not within [0, {gpu.bw_max}] for {gpu.name}")
    c_lo, c_hi = _support(spec.compute_dist)
    if c_lo < 0 or c_hi > 1:
        raise BadSpec(f"compute utilisation distribution {spec.compute_dist} not within [0, 1]")

    rng = np.random.default_rng(seed)
    n = spec.n_records
    durations = draw(spec.duration_dist, n, rng)
    bw = draw(spec.bw_dist, n, rng)
    cu = draw(spec.compute_dist, n, rng)
    return Trace(gpu.name, durations, bw, cu, bw / gpu.bw_max)
