import numpy as np
import pytest

from simtune.logfeat import (
    FEATURE_LENGTH,
    MANDATORY_KEYS,
    LogDocument,
    LogFormatError,
    MissingKeyError,
    curve_statistics,
    derived_metrics,
    emit_log,
    extract_features,
    feature_names,
    features_from_result,
    parse_log,
)
from simtune.simkernel import NumericalControls, lognormal_field, quarter_five_spot, run_simulation


@pytest.fixture(scope="module")
def finished():
    case = quarter_five_spot(nx=5, ny=5, perm=lognormal_field(5, 5, rng=1), horizon=60, report=15,
                             controls=NumericalControls(solver_kind="direct"))
    return case, run_simulation(case)


def crafted_log(**overrides) -> LogDocument:
    values = dict.fromkeys(MANDATORY_KEYS, "0")
    values.update(SIMULATOR_ID="other-sim", END_STATUS="NORMAL", TIMESTEPS="50",
                  NEWTON_CYCLES="100", LINEAR_ITERS="150", ELAPSED_S="10")
    values.update(overrides)
    return parse_log("".join(f"{k}={v}\n" for k, v in values.items()))


def test_normal_log_has_every_mandatory_key_once(finished):
    case, result = finished
    doc = emit_log(result, case)
    keys = doc.keys()
    assert doc["END_STATUS"] == "NORMAL"
    for k in MANDATORY_KEYS:
        assert keys.count(k) == 1


def test_emit_parse_emit_is_byte_identical(finished):
    case, result = finished
    text = emit_log(result, case).to_text()
    assert parse_log(text).to_text() == text


def test_timeout_log_reports_partial_progress(finished):
    case, _ = finished
    r = run_simulation(case, wall_timeout_s=1e-4)
    doc = parse_log(emit_log(r, case).to_text())
    assert doc["END_STATUS"] == "TIMEOUT"
    assert 0 < doc.number("DAYS_SIMULATED") < case.horizon_days
    assert int(doc["TIMESTEPS"]) == r.counters.timesteps


def test_parse_errors_name_the_problem():
    with pytest.raises(LogFormatError, match="line 2"):
        parse_log("END_STATUS=NORMAL\nnot a record\n")
    with pytest.raises(MissingKeyError, match="CUTS"):
        parse_log("".join(f"{k}=1\n" for k in MANDATORY_KEYS if k != "CUTS").replace("END_STATUS=1", "END_STATUS=NORMAL"))
    with pytest.raises(MissingKeyError):
        parse_log("TIMESTEPS=3\n")


def test_unknown_keys_are_preserved():
    doc = parse_log("END_STATUS=ABNORMAL\nMY_EXTRA=a=b\n")
    assert doc.records == [("END_STATUS", "ABNORMAL"), ("MY_EXTRA", "a=b")]


def test_log_round_trip_matches_direct_features(finished):
    case, result = finished
    doc = parse_log(emit_log(result, case).to_text())
    via_log = extract_features(doc, case, result.curves_csv())
    direct = features_from_result(result, case)
    assert via_log == direct
    assert np.array_equal(via_log.flatten(), direct.flatten())


def test_flattened_length_is_fixed(finished):
    case, result = finished
    fv = features_from_result(result, case)
    assert fv.flatten().size == FEATURE_LENGTH == len(feature_names())
    other = quarter_five_spot(nx=7, ny=4, horizon=30, report=10, controls=NumericalControls(solver_kind="direct"))
    fv2 = features_from_result(run_simulation(other), other)
    assert fv2.flatten().size == FEATURE_LENGTH


def test_crafted_log_division_features(finished):
    case, result = finished
    fv = extract_features(crafted_log(), case, result.curves)
    assert fv.et_per_timestep == pytest.approx(0.2)
    ni_ts, li_ni = derived_metrics(fv)
    assert ni_ts == pytest.approx(2.0)
    assert li_ni == pytest.approx(1.5)
    assert fv.flatten()[feature_names().index("simulator_other")] == 1.0


def test_zero_timesteps_rejected(finished):
    case, result = finished
    with pytest.raises(ValueError):
        extract_features(crafted_log(TIMESTEPS="0"), case, result.curves)


def test_uniform_porosity_statistics():
    case = quarter_five_spot(nx=4, ny=4, porosity=0.2, horizon=30, report=10,
                             controls=NumericalControls(solver_kind="direct"))
    fv = features_from_result(run_simulation(case), case)
    s = fv.poro_stats
    assert s.min == s.max == s.mean == pytest.approx(0.2)
    assert s.std == 0.0


def test_derived_metrics_table_style_numbers(finished):
    case, result = finished
    fv = features_from_result(result, case)
    fv.newton_cycles, fv.timesteps, fv.solver_iterations = 143, 100, 4174
    ni_ts, li_ni = derived_metrics(fv)
    assert ni_ts == pytest.approx(1.43)
    assert li_ni == pytest.approx(29.19, abs=0.005)
    fv.solver_iterations = fv.timesteps = fv.newton_cycles
    assert derived_metrics(fv) == (1.0, 1.0)
    fv.timesteps = 0
    with pytest.raises(ZeroDivisionError):
        derived_metrics(fv)


def test_curve_statistics_examples():
    s = curve_statistics([1, 2, 3])
    assert (s.min, s.max, s.mean) == (1, 3, 2)
    assert s.std == pytest.approx(np.sqrt(2 / 3))
    assert curve_statistics([5, 5]).histogram == [2] + [0] * 9
    assert curve_statistics(np.arange(100)).histogram == [10] * 10
    with pytest.raises(ValueError):
        curve_statistics([])
