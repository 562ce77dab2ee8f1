"""Bundled fixture workload: synthetic applications with per-kernel traces.

Each application is a sequence of kernels described by the bytes they move
and the FLOPs they execute.  A kernel's duration on a GPU is the roofline
time plus a fixed launch overhead, rounded up to whole microseconds, so one
kernel list yields consistent A100 and H100 traces.
"""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from ..pricing import GpuCatalog, GpuModel, load_catalog
from .formats import write_trace
from .jobs import JobDistribution, JobSpec, load_distribution, save_distribution
from .trace import Trace

FIXTURE_NAME = "torchbench_like"
LAUNCH_US = 2.0
GAP_PROB = 0.5  # chance of a host-side idle gap after a kernel
GAP_US_MEDIAN = 12.0
GAP_US_SIGMA = 1.0
GAP_BW = 0.01  # TB/s of background traffic while idle
KERNEL_EFF_BW = 0.9
KERNEL_EFF_COMP = 0.7


@dataclass(frozen=True)
class KernelClass:
    weight: float
    mem_us_median: float  # A100 memory time
    mem_us_sigma: float
    intensity_lo: float  # FLOPs per byte, log-uniform range
    intensity_hi: float


# (name, n_kernels, kernel classes, distribution weight)
APPS = [
    ("resnet_like", 900, [KernelClass(3, 25, 0.9, 20, 600), KernelClass(1, 12, 0.7, 0.5, 8)], 1.0),
    ("bert_like", 800, [KernelClass(2, 40, 0.8, 60, 900), KernelClass(2, 10, 0.8, 0.5, 4)], 1.0),
    ("unet_like", 700, [KernelClass(1, 60, 1.0, 30, 400), KernelClass(1, 20, 0.9, 1, 10)], 1.0),
    ("embedding_heavy", 1000, [KernelClass(4, 15, 0.7, 0.2, 2), KernelClass(1, 30, 0.8, 100, 800)], 1.0),
    ("gnn_like", 900, [KernelClass(3, 8, 1.0, 0.3, 3), KernelClass(1, 50, 0.7, 10, 200)], 1.0),
    ("transformer_small", 1000, [KernelClass(1, 20, 0.8, 200, 1500), KernelClass(1, 6, 0.6, 0.5, 5)], 1.0),
    ("rnn_like", 1200, [KernelClass(1, 5, 0.6, 2, 30), KernelClass(1, 3, 0.5, 0.5, 4)], 1.0),
    ("detection_like", 800, [KernelClass(2, 35, 1.1, 15, 500), KernelClass(1, 25, 0.9, 0.5, 6)], 1.0),
]


def _kernels(n: int, classes: list[KernelClass], rng: np.random.Generator):
    w = np.array([c.weight for c in classes], dtype=float)
    which = rng.choice(len(classes), size=n, p=w / w.sum())
    mem_us = np.empty(n)
    intensity = np.empty(n)
    for i, c in enumerate(classes):
        m = which == i
        k = int(m.sum())
        mem_us[m] = np.exp(rng.normal(np.log(c.mem_us_median), c.mem_us_sigma, k))
        intensity[m] = np.exp(rng.uniform(np.log(c.intensity_lo), np.log(c.intensity_hi), k))
    a100_bw = 2.039e12 * KERNEL_EFF_BW
    nbytes = np.clip(mem_us, 0.5, 5000) * 1e-6 * a100_bw
    return nbytes, nbytes * intensity


def kernel_trace(nbytes: np.ndarray, flops: np.ndarray, gpu: GpuModel, labels=None, gaps=None) -> Trace:
    """Trace of the kernels on ``gpu``; ``gaps[i] > 0`` inserts an idle record after kernel ``i``."""
    mem = nbytes / (gpu.bw_max * 1e12 * KERNEL_EFF_BW)
    comp = flops / (gpu.compute_peak * 1e12 * KERNEL_EFF_COMP)
    dur_us = np.ceil((np.maximum(mem, comp)) * 1e6 + LAUNCH_US)
    bw = np.round(np.minimum(nbytes / (dur_us * 1e-6) / 1e12, gpu.bw_max), 6)
    cu = np.round(np.minimum(flops / (dur_us * 1e-6) / (gpu.compute_peak * 1e12), 1.0), 4)
    labels = list(labels) if labels is not None else [""] * len(dur_us)
    if gaps is not None and (gaps > 0).any():
        n = len(dur_us)
        has_gap = gaps > 0
        # interleave: kernel i at slot i + (gaps before i), its gap right after
        slot = np.arange(n) + np.concatenate(([0], np.cumsum(has_gap)[:-1]))
        total = n + int(has_gap.sum())
        d2, b2, c2 = np.empty(total), np.full(total, GAP_BW), np.zeros(total)
        l2 = ["idle"] * total
        d2[slot], b2[slot], c2[slot] = dur_us, bw, cu
        gap_slot = slot[has_gap] + 1
        d2[gap_slot] = gaps[has_gap]
        for i, s in enumerate(slot):
            l2[s] = labels[i]
        dur_us, bw, cu, labels = d2, b2, c2, l2
    du = np.minimum(np.round(bw / gpu.bw_max, 4), 1.0)
    return Trace(gpu.name, dur_us, bw, cu, du, labels)


def build_fixture(catalog: GpuCatalog | None = None, gpus=("A100", "H100"), seed: int = 2025) -> JobDistribution:
    """Generate the fixture workload in memory."""
    catalog = catalog or load_catalog()
    models = [catalog[g] for g in gpus]
    entries = []
    for i, (name, n, classes, weight) in enumerate(APPS):
        rng = np.random.default_rng([seed, i])
        nbytes, flops = _kernels(n, classes, rng)
        gaps = np.where(
            rng.random(n) < GAP_PROB,
            np.maximum(np.rint(np.exp(rng.normal(np.log(GAP_US_MEDIAN), GAP_US_SIGMA, n))), 1.0),
            0.0,
        )
        labels = [f"{name}:k{j}" for j in range(n)]
        traces = {g.name: kernel_trace(nbytes, flops, g, labels, gaps) for g in models}
        entries.append((JobSpec(name, "trace-file", traces), weight))
    return JobDistribution(tuple(entries))


def write_fixture(out_dir: str | Path, catalog: GpuCatalog | None = None, gpus=("A100", "H100"), seed: int = 2025) -> Path:
    """Write traces plus ``distribution.json`` under ``out_dir``."""
    out = Path(out_dir)
    (out / "traces").mkdir(parents=True, exist_ok=True)
    dist = build_fixture(catalog, gpus, seed)
    entries = []
    for job, w in dist.entries:
        paths = {}
        for g, trace in job.traces.items():
            paths[g] = write_trace(trace, out / "traces" / f"{job.name}_{g}.csv")
        entries.append((JobSpec(job.name, "trace-file", paths), w))
    return save_distribution(JobDistribution(tuple(entries)), out / "distribution.json")


def fixture_path() -> Path:
    return Path(str(resources.files("agora").joinpath(f"data/fixtures/{FIXTURE_NAME}/distribution.json")))


def load_fixture() -> JobDistribution:
    """The bundled fixture workload (A100 and H100 traces for each app)."""
    return load_distribution(fixture_path())
