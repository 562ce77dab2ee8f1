import json
import warnings
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

import oracles
from agora.errors import BadBreakpoints, ConfigError, NonMonotone, OutOfDomain
from agora.pricing import (
    FbpCurve,
    GpuCatalog,
    GpuModel,
    build_fbp,
    capability_price_ratio,
    curve_from_notation,
    extend_fbp,
    fbp_price_per_time,
    load_curve,
    parse_notation,
    tbp_cost,
    validate_desiderata,
)


def test_build_named_curve(curve):
    assert str(curve) == "(4, 5.06, 15)"
    assert curve.breakpoints == [2.039, 3.35]


def test_cap_equal_to_base_is_allowed():
    c = build_fbp(4, [(2.039, 4)])
    assert fbp_price_per_time(c, 1.0) == 4.0


@pytest.mark.parametrize("base,segs,exc", [
    (4, [(2.039, 3)], NonMonotone),
    (4, [(2.039, 6), (3.35, 5)], NonMonotone),
    (4, [(2.039, 5), (2.039, 6)], BadBreakpoints),
    (4, [(3.35, 5), (2.039, 6)], BadBreakpoints),
    (4, [], BadBreakpoints),
    (0, [(1.0, 1)], NonMonotone),
])
def test_build_rejects(base, segs, exc):
    with pytest.raises(exc):
        build_fbp(base, segs)


def test_anchor_values(curve):
    assert fbp_price_per_time(curve, 0) == 4.0
    assert fbp_price_per_time(curve, 2.039) == 5.06
    assert fbp_price_per_time(curve, 3.35) == 15.0


def test_midpoint_of_first_segment(curve):
    assert fbp_price_per_time(curve, 1.0195) == pytest.approx(4.53, abs=1e-12)


def test_out_of_domain(curve):
    with pytest.raises(OutOfDomain):
        fbp_price_per_time(curve, 4.0)
    with pytest.raises(OutOfDomain):
        fbp_price_per_time(curve, -0.1)


def test_vector_evaluation_matches_scalar(curve):
    xs = np.linspace(0, 3.35, 101)
    vec = curve.price_per_hour(xs)
    assert vec.tolist() == [fbp_price_per_time(curve, x) for x in xs]


def test_extend(curve):
    ext = extend_fbp(curve, 8.0, 30)
    assert str(ext) == "(4, 5.06, 15, 30)"
    assert fbp_price_per_time(ext, 8.0) == 30.0
    assert extend_fbp(curve, 8.0, 15).caps[-1] == 15.0
    with pytest.raises(BadBreakpoints):
        extend_fbp(curve, 3.0, 30)
    with pytest.raises(NonMonotone):
        extend_fbp(curve, 8.0, 14)


def test_extend_is_exact_on_old_domain(curve):
    ext = extend_fbp(curve, 8.0, 30)
    xs = np.random.default_rng(0).uniform(0, 3.35, 5000)
    assert np.array_equal(curve.price_per_hour(xs), ext.price_per_hour(xs))


def test_tbp_cost(catalog):
    assert tbp_cost(catalog["H100"], 1) == 11.06
    assert tbp_cost(catalog["A100"], 0) == 0
    assert tbp_cost(catalog["A100"], 2) == pytest.approx(10.12)
    with pytest.raises(ValueError):
        tbp_cost(catalog["A100"], -1)


@pytest.mark.parametrize("cap,price,expected", [
    (3.35, 11.06, 0.302), (0.752, 1.46, 0.515), (9.90, 11.06, 0.895),
])
def test_capability_price_ratio(cap, price, expected):
    assert capability_price_ratio(cap, price) == pytest.approx(expected, abs=0.001)


def test_ratio_guards_zero_price():
    with pytest.raises(ZeroDivisionError):
        capability_price_ratio(1.0, 0)


def test_catalog_rejects_ties_and_duplicates():
    a = GpuModel("X", 1.0, 1.0, 1.0)
    with pytest.raises(ConfigError):
        GpuCatalog((a, GpuModel("Y", 1.0, 2.0, 2.0)))
    with pytest.raises(ConfigError):
        GpuCatalog((a, GpuModel("X", 2.0, 2.0, 2.0)))
    with pytest.raises(ConfigError):
        GpuModel("Z", 0.0, 1.0, 1.0)


def test_desiderata_clean(curve, catalog):
    rep = validate_desiderata(curve, catalog.subset(["A100", "H100"]))
    assert rep.monotone and rep.caps_respected and rep.ok
    assert rep.convex


def test_desiderata_decreasing_segment(catalog):
    bad = curve_from_notation([4, 15, 5.06], [2.039, 3.35], strict=False)
    rep = validate_desiderata(bad, catalog.subset(["A100", "H100"]))
    assert not rep.monotone
    assert any("decreases" in v for v in rep.violations)


def test_desiderata_alignment_warning(catalog):
    c = build_fbp(4, [(2.0, 5.06), (3.35, 15)])
    with pytest.warns(UserWarning, match="does not match"):
        rep = validate_desiderata(c, catalog.subset(["A100", "H100"]))
    assert rep.monotone and rep.warnings


def test_desiderata_gpu_beyond_domain(catalog):
    c = build_fbp(4, [(2.039, 5.06)])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        rep = validate_desiderata(c, catalog)
    assert not rep.caps_respected


def test_notation_anchors_newest_gpus(catalog):
    c = parse_notation("(4, 5.06, 15)", catalog)
    assert c.breakpoints == [2.039, 3.35]
    with pytest.raises(ConfigError):
        parse_notation("4, x", catalog)


def test_curve_file_round_trip(tmp_path, curve):
    p = tmp_path / "c.json"
    p.write_text(json.dumps(curve.to_dict()))
    assert load_curve(p) == curve
    p.write_text('{"base": 4.0, "segments": [{"bw_tbps": 2.039, "cap": 5.06}, {"bw_tbps": 3.35, "cap": 15.0}]}')
    assert load_curve(p) == curve


def test_interpolation_matches_exact_oracle(curve):
    anchors = oracles.anchors_of(curve)
    for x in np.linspace(0, 3.35, 257):
        assert fbp_price_per_time(curve, x) == pytest.approx(float(oracles.ppt(anchors, Fraction(x))), rel=1e-12)


@st.composite
def curves(draw, convex=False):
    n = draw(st.integers(1, 4))
    xs = sorted(draw(st.lists(st.floats(0.05, 10), min_size=n, max_size=n, unique=True)))
    if convex:
        slopes = sorted(draw(st.lists(st.floats(0, 20), min_size=n, max_size=n)))
        base = draw(st.floats(0.5, 10))
        caps, x0, y = [], 0.0, base
        for x, s in zip(xs, slopes):
            y += s * (x - x0)
            caps.append(y)
            x0 = x
    else:
        base = draw(st.floats(0.5, 10))
        steps = draw(st.lists(st.floats(0, 20), min_size=n, max_size=n))
        caps = list(np.cumsum(steps) + base)
    return build_fbp(base, list(zip(xs, caps)))


@settings(max_examples=200, deadline=None)
@given(curves(), st.floats(0, 1), st.floats(0, 1))
def test_monotone_in_bandwidth(c, u, v):
    x, y = sorted((u * c.domain_max, v * c.domain_max))
    assert fbp_price_per_time(c, x) <= fbp_price_per_time(c, y)


@settings(max_examples=200, deadline=None)
@given(curves(), st.floats(0.1, 20), st.floats(0.1, 20))
def test_extension_preserves_old_domain(c, dx, dcap):
    ext = extend_fbp(c, c.domain_max + dx, c.caps[-1] + dcap)
    xs = np.linspace(0, c.domain_max, 64)
    assert np.array_equal(c.price_per_hour(xs), ext.price_per_hour(xs))


@settings(max_examples=200, deadline=None)
@given(curves(convex=True), st.lists(st.floats(0, 1), min_size=1, max_size=30))
def test_jensen_on_multisets(c, us):
    assume(c.is_convex)  # nanodollar rounding can bend nearly-collinear anchors
    xs = np.array(us) * c.domain_max
    assert fbp_price_per_time(c, float(xs.mean())) <= float(np.mean(c.price_per_hour(xs))) + 1e-9


def test_convexity_flag():
    assert not build_fbp(4, [(1, 10), (2, 11)]).is_convex
    assert build_fbp(4, [(1, 5), (2, 11)]).is_convex
    assert isinstance(build_fbp(4, [(1, 5)]), FbpCurve)
