import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from agora.econ import (
    INSTANTANEOUS,
    WINDOW_AVERAGE,
    SamplingConfig,
    emit_report,
    f_percent,
    parse_report,
    price_ideal,
    price_sampled,
    run_experiment,
    sampling_error_sweep,
)
from agora.errors import EmptyInput, LengthMismatch, MissingTraceBinding, OutOfDomain
from agora.pricing import FbpCurve, build_fbp
from agora.workload import JobDistribution, JobSpec, Trace

HOUR = 3.6e9


def tr(durs, bws):
    n = len(durs)
    return Trace("H100", durs, bws, [0.0] * n, [0.0] * n)


def test_ideal_one_hour_at_a100_peak(curve):
    assert price_ideal(tr([HOUR], [2.039]), curve) == pytest.approx(5.06, abs=1e-12)


def test_ideal_half_idle_half_peak(curve):
    assert price_ideal(tr([HOUR / 2, HOUR / 2], [0, 3.35]), curve) == pytest.approx(9.50, abs=1e-12)


def test_window_average_over_one_hour(curve):
    t = tr([HOUR / 2, HOUR / 2], [0, 3.35])
    got = price_sampled(t, curve, SamplingConfig(HOUR))
    assert got == pytest.approx(4 + 1.06 / 2.039 * 1.675, abs=1e-9)
    assert got == pytest.approx(4.871, abs=5e-4)
    assert got < price_ideal(t, curve)


@pytest.mark.parametrize("mode", [INSTANTANEOUS, WINDOW_AVERAGE])
@pytest.mark.parametrize("period", [1, 7, 50, 333.3, 1e6])
def test_constant_trace_is_exact(curve, mode, period):
    t = tr([12345.0], [1.7])
    assert price_sampled(t, curve, SamplingConfig(period, mode)) == pytest.approx(price_ideal(t, curve), rel=1e-12)


def test_out_of_domain_names_record(curve):
    with pytest.raises(OutOfDomain, match="record 1"):
        price_ideal(Trace("X", [1, 1], [1.0, 9.0], [0, 0], [0, 0]), curve)


def test_sampling_config_validation():
    with pytest.raises(ValueError):
        SamplingConfig(0)
    with pytest.raises(ValueError):
        SamplingConfig(1, "median")
    with pytest.raises(ValueError):
        SamplingConfig(1, tail_policy="price-floor")


@st.composite
def int_traces(draw, max_records=12):
    n = draw(st.integers(1, max_records))
    durs = draw(st.lists(st.integers(1, 200), min_size=n, max_size=n))
    bws = draw(st.lists(st.floats(0, 3.35), min_size=n, max_size=n))
    return durs, bws


@settings(max_examples=150, deadline=None)
@given(int_traces(), st.integers(1, 300), st.sampled_from([INSTANTANEOUS, WINDOW_AVERAGE]))
def test_sampled_matches_window_walk_oracle(curve, data, period, mode):
    durs, bws = data
    expect = oracles.sampled(durs, bws, oracles.anchors_of(curve), period, mode)
    got = price_sampled(tr(durs, bws), curve, SamplingConfig(period, mode))
    assert got == pytest.approx(float(expect), rel=1e-9, abs=1e-18)


@settings(max_examples=150, deadline=None)
@given(int_traces())
def test_ideal_matches_oracle(curve, data):
    durs, bws = data
    expect = oracles.ideal(durs, bws, oracles.anchors_of(curve))
    assert price_ideal(tr(durs, bws), curve) == pytest.approx(float(expect), rel=1e-12)


@settings(max_examples=100, deadline=None)
@given(int_traces(), st.data())
def test_refinement_invariance(curve, data, draw):
    durs, bws = data
    k = draw.draw(st.integers(0, len(durs) - 1))
    cut = draw.draw(st.floats(0.01, 0.99))
    d2 = durs[:k] + [durs[k] * cut, durs[k] * (1 - cut)] + durs[k + 1:]
    b2 = bws[:k] + [bws[k], bws[k]] + bws[k + 1:]
    a, b = tr(durs, bws), tr(d2, b2)
    assert abs(price_ideal(a, curve) - price_ideal(b, curve)) < 1e-9
    for mode in (INSTANTANEOUS, WINDOW_AVERAGE):
        cfg = SamplingConfig(37, mode)
        assert abs(price_sampled(a, curve, cfg) - price_sampled(b, curve, cfg)) < 1e-9


@settings(max_examples=100, deadline=None)
@given(int_traces(), st.floats(0.1, 50))
def test_linearity(curve, data, alpha):
    t = tr(*data)
    scaled = FbpCurve(round(curve.base_nd * alpha), tuple((bw, round(c * alpha)) for bw, c in curve.segments))
    assert price_ideal(t, scaled) == pytest.approx(alpha * price_ideal(t, curve), rel=1e-8)


@settings(max_examples=100, deadline=None)
@given(int_traces())
def test_exact_at_unit_period(curve, data):
    t = tr(*data)
    for mode in (INSTANTANEOUS, WINDOW_AVERAGE):
        assert price_sampled(t, curve, SamplingConfig(1, mode)) == pytest.approx(price_ideal(t, curve), rel=1e-12)


def test_f_percent():
    assert f_percent([1, 3, 2], [2, 2, 2]) == pytest.approx(100 / 3)
    assert f_percent([1, 2, 3, 4], [1, 2, 3, 3.5]) == 25.0
    assert f_percent([1.0, 2.0], [1.0, 2.0]) == 0
    assert f_percent([1.5, 2.5], [1.0, 2.0]) == 100
    with pytest.raises(LengthMismatch):
        f_percent([1], [1, 2])
    with pytest.raises(EmptyInput):
        f_percent([], [])


def _jobs(catalog, specs):
    entries = []
    for i, (durs, bws) in enumerate(specs):
        traces = {"H100": Trace("H100", durs, bws, [0] * len(durs), [0] * len(durs))}
        entries.append((JobSpec(f"j{i}", traces=traces), 1.0))
    return JobDistribution(tuple(entries))


def test_experiment_f_percent_by_enumeration(catalog):
    # H100 TBP is 11.06 $/h; (4, 5.06, 15) exceeds it only above ~2.94 TB/s
    dist = _jobs(catalog, [([HOUR], [0.5]), ([HOUR], [1.0]), ([HOUR], [2.0]), ([HOUR], [3.3])])
    curve = build_fbp(4, [(2.039, 5.06), (3.35, 15)])
    rep = run_experiment(dist, curve, catalog, n_jobs=4000, seed=3)
    idx = np.random.default_rng(3).random(4000)
    assert 0 < rep.f_percent < 100
    picks = np.minimum(np.searchsorted(dist.cumulative, idx, side="right"), 3)
    assert rep.f_percent == pytest.approx(100 * np.mean(picks == 3))
    assert rep.mean_tbp["H100"] == pytest.approx(11.06)


def test_curve_below_tbp_has_zero_f_percent(catalog, fixture_dist):
    low = build_fbp(4, [(2.039, 5.06), (3.35, 11.06)])
    assert run_experiment(fixture_dist, low, catalog, n_jobs=500, seed=1).f_percent == 0


def test_dominance_is_monotone(catalog, fixture_dist):
    reps = [run_experiment(fixture_dist, build_fbp(4, [(2.039, m), (3.35, h)]), catalog, n_jobs=2000, seed=9)
            for m, h in [(5.06, 15), (7, 30), (10, 60)]]
    assert all(b.mean_fbp >= a.mean_fbp for a, b in zip(reps, reps[1:]))
    assert all(b.f_percent >= a.f_percent for a, b in zip(reps, reps[1:]))


def test_experiment_determinism(catalog, fixture_dist, curve):
    a = run_experiment(fixture_dist, curve, catalog, n_jobs=1000, seed=4)
    b = run_experiment(fixture_dist, curve, catalog, n_jobs=1000, seed=4)
    assert emit_report(a, "json") == emit_report(b, "json")


def test_missing_reference_binding(catalog):
    job = JobSpec("lonely", traces={"A100": Trace("A100", [1], [0.1], [0], [0])})
    with pytest.raises(MissingTraceBinding, match="lonely"):
        run_experiment(JobDistribution(((job, 1.0),)), build_fbp(4, [(3.35, 15)]), catalog, n_jobs=10)


def test_per_token_cost_for_llm_jobs(catalog):
    from agora.workload import llm_distribution

    dist = llm_distribution(models=("llama3-70b",), contexts=(1024, 2048), output_tokens=4)
    rep = run_experiment(dist, build_fbp(4, [(2.039, 5.06), (3.35, 15)]), catalog, n_jobs=50, seed=0)
    assert rep.per_token_fbp is not None and rep.per_token_fbp > 0


def test_sweep_shares_draws_and_undercharges(catalog, fixture_dist, curve):
    rows = sampling_error_sweep(fixture_dist, curve, catalog, periods=[10, 50, 250], n_jobs=500, seed=2)
    assert len({r.ideal_mean for r in rows}) == 1
    assert all(r.percent_error <= 0 for r in rows)
    with pytest.raises(EmptyInput):
        sampling_error_sweep(fixture_dist, curve, catalog, periods=[], n_jobs=10)


def test_report_round_trips(catalog, fixture_dist, curve):
    rep = run_experiment(fixture_dist, curve, catalog, n_jobs=300, seed=5)
    assert parse_report(emit_report(rep, "json"), "json") == rep
    csv_text = emit_report(rep, "csv").decode()
    assert csv_text.splitlines()[0] == "n_jobs,gpu,mean_tbp,mean_fbp,per_token_fbp,f_percent,seed"
    back = parse_report(emit_report(rep, "csv"), "csv")
    assert back.mean_tbp == rep.mean_tbp and back.mean_fbp == rep.mean_fbp and back.f_percent == rep.f_percent

    rows = sampling_error_sweep(fixture_dist, curve, catalog, periods=[10, 25], n_jobs=100, seed=5)
    assert emit_report(rows).decode().splitlines()[0] == "period_us,ideal_mean,real_mean,percent_error"
    assert parse_report(emit_report(rows, "json"), "json", "sweep") == rows
    assert parse_report(emit_report(rows, "csv"), "csv", "sweep") == rows
