"""Time-based and feature-based GPU pricing functions.

A feature-based curve maps instantaneous memory bandwidth (TB/s) to a price
per hour.  Curves are piecewise linear through the anchors ``(0, base)`` and
``(bw_upper_i, cap_i)``; each anchor normally sits at one GPU generation's
peak bandwidth, so ``cap_i`` is the most a customer can pay per hour while
using no more than that GPU offers.

Money is kept as integer nanodollars wherever it is stored or accumulated.
Curve anchors are converted on construction (round half to even), and
evaluation between anchors returns floats.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from decimal import ROUND_HALF_EVEN, Decimal
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import BadBreakpoints, ConfigError, NonMonotone, OutOfDomain

NANO = 10**9
US_PER_HOUR = 3.6e9
# relative slack on the last breakpoint, matching the trace bw_max tolerance
DOMAIN_RTOL = 1e-9


def to_nanodollars(dollars: float) -> int:
    """Convert a dollar amount to integer nanodollars, rounding half to even."""
    q = Decimal(repr(float(dollars))) * NANO
    return int(q.quantize(Decimal(1), rounding=ROUND_HALF_EVEN))


def to_dollars(nanodollars: int) -> float:
    return nanodollars / NANO


def charge_nanodollars(ppt: float, duration_us: float) -> float:
    """Exact (unrounded) charge in nanodollars for ``duration_us`` at ``ppt`` $/h."""
    return ppt * duration_us / 3.6


@dataclass(frozen=True)
class GpuModel:
    name: str
    bw_max: float  # TB/s
    compute_peak: float  # TFLOPS
    ppt: float  # $/hour under time-based pricing

    def __post_init__(self):
        for attr in ("bw_max", "compute_peak", "ppt"):
            v = getattr(self, attr)
            if not (isinstance(v, (int, float)) and v > 0 and math.isfinite(v)):
                raise ConfigError(f"GPU {self.name!r}: {attr} must be positive, got {v!r}")

    @property
    def bw_per_price(self) -> float:
        return capability_price_ratio(self.bw_max, self.ppt)

    @property
    def comp_per_price(self) -> float:
        # capability expressed in hundreds of TFLOPS
        return capability_price_ratio(self.compute_peak / 100.0, self.ppt)


@dataclass(frozen=True)
class GpuCatalog:
    models: tuple[GpuModel, ...]

    def __post_init__(self):
        object.__setattr__(self, "models", tuple(self.models))
        if not self.models:
            raise ConfigError("catalog is empty")
        names = [m.name for m in self.models]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate GPU names in catalog: {names}")
        for a, b in zip(self.models, self.models[1:]):
            if not b.bw_max > a.bw_max:
                raise ConfigError(
                    f"catalog must be strictly increasing by bw_max: {a.name} ({a.bw_max}) "
                    f"then {b.name} ({b.bw_max})"
                )

    def __getitem__(self, name: str) -> GpuModel:
        for m in self.models:
            if m.name == name:
                return m
        raise KeyError(name)

    def __contains__(self, name) -> bool:
        return any(m.name == name for m in self.models)

    def __iter__(self):
        return iter(self.models)

    def __len__(self):
        return len(self.models)

    @property
    def names(self) -> list[str]:
        return [m.name for m in self.models]

    def subset(self, names: Iterable[str]) -> "GpuCatalog":
        wanted = set(names)
        return GpuCatalog(tuple(m for m in self.models if m.name in wanted))

    def to_dict(self) -> dict:
        return {
            "gpus": [
                {"name": m.name, "bw_max": m.bw_max, "compute_peak": m.compute_peak, "ppt": m.ppt}
                for m in self.models
            ]
        }

    @classmethod
    def from_dict(cls, data: dict) -> "GpuCatalog":
        try:
            rows = data["gpus"]
            return cls(tuple(GpuModel(r["name"], float(r["bw_max"]), float(r["compute_peak"]), float(r["ppt"])) for r in rows))
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad catalog: {exc}") from exc


def load_catalog(path: str | Path | None = None) -> GpuCatalog:
    """Load a GPU catalog; with no path, the bundled P100/V100/A100/H100 table."""
    if path is None:
        text = resources.files("agora").joinpath("data/catalog.json").read_text()
    else:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read catalog {path}: {exc}") from exc
    try:
        return GpuCatalog.from_dict(json.loads(text))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"catalog {path} is not valid JSON: {exc}") from exc


@dataclass(frozen=True)
class FbpCurve:
    """Piecewise-linear price-per-hour as a function of bandwidth.

    ``base_nd`` and the caps are integer nanodollars per hour.  The
    constructor checks only the structure (positive base, strictly increasing
    breakpoints); use :func:`build_fbp` to also enforce monotone prices.
    """

    base_nd: int
    segments: tuple[tuple[float, int], ...]
    _xs: np.ndarray = field(init=False, repr=False, compare=False)
    _ys: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        segs = tuple((float(bw), int(cap)) for bw, cap in self.segments)
        object.__setattr__(self, "segments", segs)
        if self.base_nd <= 0:
            raise NonMonotone(f"base price must be positive, got {self.base_nd} n$/h")
        if not segs:
            raise BadBreakpoints("curve needs at least one segment")
        prev = 0.0
        for bw, _ in segs:
            if not (math.isfinite(bw) and bw > prev):
                raise BadBreakpoints(f"breakpoints must be strictly increasing and positive: {[s[0] for s in segs]}")
            prev = bw
        object.__setattr__(self, "_xs", np.array([0.0] + [s[0] for s in segs]))
        object.__setattr__(self, "_ys", np.array([self.base_nd] + [s[1] for s in segs], dtype=float))

    @classmethod
    def from_dollars(cls, base: float, segments: Sequence[tuple[float, float]]) -> "FbpCurve":
        return cls(to_nanodollars(base), tuple((bw, to_nanodollars(cap)) for bw, cap in segments))

    @property
    def base(self) -> float:
        return to_dollars(self.base_nd)

    @property
    def breakpoints(self) -> list[float]:
        return [bw for bw, _ in self.segments]

    @property
    def caps(self) -> list[float]:
        return [to_dollars(c) for _, c in self.segments]

    @property
    def domain_max(self) -> float:
        return self.segments[-1][0]

    @property
    def anchors(self) -> list[tuple[float, float]]:
        return [(0.0, self.base)] + [(bw, to_dollars(c)) for bw, c in self.segments]

    @property
    def slopes(self) -> list[float]:
        """Segment slopes in $/h per TB/s."""
        pts = self.anchors
        return [(y1 - y0) / (x1 - x0) for (x0, y0), (x1, y1) in zip(pts, pts[1:])]

    @property
    def is_monotone(self) -> bool:
        nds = [self.base_nd] + [c for _, c in self.segments]
        return all(b >= a for a, b in zip(nds, nds[1:]))

    @property
    def is_convex(self) -> bool:
        # compare slopes by cross-multiplication on integer nanodollars
        pts = [(0.0, self.base_nd)] + list(self.segments)
        for (x0, y0), (x1, y1), (x2, y2) in zip(pts, pts[1:], pts[2:]):
            if (y1 - y0) * (x2 - x1) > (y2 - y1) * (x1 - x0):
                return False
        return True

    def price_per_hour(self, bw):
        """Vectorised evaluation; returns $/h as float or ndarray."""
        arr = np.asarray(bw, dtype=float)
        top = self.domain_max
        if arr.size:
            bad = (arr < 0) | (arr > top * (1 + DOMAIN_RTOL)) | ~np.isfinite(arr)
            if bad.any():
                idx = int(np.flatnonzero(bad.ravel())[0])
                raise OutOfDomain(
                    f"bandwidth {arr.ravel()[idx]!r} TB/s outside curve domain [0, {top}]; extend the curve",
                    index=idx,
                )
        out = np.interp(np.minimum(arr, top), self._xs, self._ys) / NANO
        return float(out) if out.ndim == 0 else out

    def to_dict(self) -> dict:
        return {"base": self.base, "segments": [{"bw_tbps": bw, "cap": to_dollars(c)} for bw, c in self.segments]}

    @classmethod
    def from_dict(cls, data: dict) -> "FbpCurve":
        try:
            segs = [(float(s["bw_tbps"]), float(s["cap"])) for s in data["segments"]]
            return build_fbp(float(data["base"]), segs)
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad curve definition: {exc}") from exc

    def __str__(self) -> str:
        vals = [self.base] + self.caps
        return "(" + ", ".join(f"{v:g}" for v in vals) + ")"


def build_fbp(base: float, segments: Sequence[tuple[float, float]]) -> FbpCurve:
    """Build a monotone curve from a base price and ``(bw_upper, cap)`` pairs.

    >>> str(build_fbp(4, [(2.039, 5.06), (3.35, 15)]))
    '(4, 5.06, 15)'
    """
    if not segments:
        raise BadBreakpoints("curve needs at least one segment")
    curve = FbpCurve.from_dollars(base, segments)
    if not curve.is_monotone:
        raise NonMonotone(
            f"caps must be non-decreasing and start at or above the base price: base={base}, "
            f"caps={[c for _, c in segments]}"
        )
    return curve


def fbp_price_per_time(curve: FbpCurve, bw: float) -> float:
    """Price in $/h charged while using ``bw`` TB/s."""
    return curve.price_per_hour(float(bw))


def extend_fbp(curve: FbpCurve, bw_upper: float, cap: float) -> FbpCurve:
    """Append a piece for a newer GPU; prices on the old domain are untouched."""
    if not bw_upper > curve.domain_max:
        raise BadBreakpoints(f"new breakpoint {bw_upper} must exceed current domain max {curve.domain_max}")
    cap_nd = to_nanodollars(cap)
    if cap_nd < curve.segments[-1][1]:
        raise NonMonotone(f"new cap {cap} is below previous cap {curve.caps[-1]}")
    return FbpCurve(curve.base_nd, curve.segments + ((float(bw_upper), cap_nd),))


def curve_from_notation(values: Sequence[float], breakpoints: Sequence[float], strict: bool = True) -> FbpCurve:
    """Build ``(b, M_1, M_2, ...)`` with the caps placed at ``breakpoints``.

    ``strict=False`` skips the monotonicity check so a bad curve can still be
    inspected with :func:`validate_desiderata`.
    """
    values = list(values)
    if len(values) != len(breakpoints) + 1:
        raise ConfigError(f"{len(values) - 1} caps given for {len(breakpoints)} breakpoints")
    segments = list(zip(breakpoints, values[1:]))
    return build_fbp(values[0], segments) if strict else FbpCurve.from_dollars(values[0], segments)


def parse_notation(text: str, catalog: GpuCatalog, gpus: Sequence[str] | None = None, strict: bool = True) -> FbpCurve:
    """Parse ``"4, 5.06, 15"`` (brackets optional) against catalog bandwidths.

    Caps are anchored at ``gpus`` in order, defaulting to the newest GPUs of
    the catalog (as many as there are caps).
    """
    try:
        values = [float(v) for v in text.strip().strip("()").replace("+", ",").split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"cannot parse curve notation {text!r}") from exc
    n_caps = len(values) - 1
    if gpus is None:
        if n_caps > len(catalog) or n_caps < 1:
            raise ConfigError(f"curve {text!r} has {n_caps} caps; catalog has {len(catalog)} GPUs")
        gpus = catalog.names[-n_caps:]
    return curve_from_notation(values, [catalog[g].bw_max for g in gpus], strict)


def tbp_cost(gpu: GpuModel, duration_h: float) -> float:
    """Time-based charge in dollars for ``duration_h`` hours on ``gpu``."""
    if duration_h < 0:
        raise ValueError("duration must be non-negative")
    return gpu.ppt * duration_h


def capability_price_ratio(capability: float, price: float) -> float:
    if not price > 0:
        raise ZeroDivisionError(f"price must be positive, got {price!r}")
    return capability / price


@dataclass
class DesiderataReport:
    monotone: bool
    caps_respected: bool
    convex: bool
    f_percent: float | None = None
    violations: list[str] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.monotone and self.caps_respected and not self.violations


def validate_desiderata(curve: FbpCurve, catalog: GpuCatalog) -> DesiderataReport:
    """Check the structural desiderata of ``curve`` against ``catalog``.

    Never raises; problems are listed as violations.  Breakpoints that do not
    coincide with any catalog bandwidth produce a warning (also emitted via
    :mod:`warnings`).
    """
    violations: list[str] = []
    notes: list[str] = []

    pts = [(0.0, curve.base_nd)] + list(curve.segments)
    for (x0, y0), (x1, y1) in zip(pts, pts[1:]):
        if y1 < y0:
            violations.append(
                f"price decreases from ${to_dollars(y0):g}/h at {x0:g} TB/s to ${to_dollars(y1):g}/h at {x1:g} TB/s"
            )
    monotone = not violations

    caps_ok = True
    for gpu in catalog:
        if gpu.bw_max > curve.domain_max * (1 + DOMAIN_RTOL):
            caps_ok = False
            violations.append(f"{gpu.name} peak {gpu.bw_max:g} TB/s lies beyond the curve domain; extend the curve")
            continue
        # declared cap: the first anchor at or above this GPU's ceiling
        cap_nd = next(c for bw, c in curve.segments if bw >= gpu.bw_max * (1 - DOMAIN_RTOL))
        price_nd = float(np.interp(min(gpu.bw_max, curve.domain_max), curve._xs, curve._ys))
        if price_nd > cap_nd + 1e-6:
            caps_ok = False
            violations.append(
                f"{gpu.name}: price ${price_nd / NANO:g}/h at {gpu.bw_max:g} TB/s exceeds cap ${to_dollars(cap_nd):g}/h"
            )

    peaks = [g.bw_max for g in catalog]
    for bw in curve.breakpoints:
        if not any(math.isclose(bw, p, rel_tol=1e-9) for p in peaks):
            notes.append(f"breakpoint {bw:g} TB/s does not match any catalog GPU peak {peaks}")
    for msg in notes:
        warnings.warn(msg, stacklevel=2)

    return DesiderataReport(monotone, caps_ok, curve.is_convex, None, violations, notes)


def load_curve(path: str | Path) -> FbpCurve:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot load curve {path}: {exc}") from exc
    return FbpCurve.from_dict(data)
