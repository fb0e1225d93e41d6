import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gridsens.bench import (
    CSV_COLUMNS,
    BenchCell,
    BenchConfig,
    BenchReport,
    emit_report,
    fit_beta,
    load_report,
    run_benchmark,
    speedup_model,
)

pos = st.floats(min_value=1e-3, max_value=1e6, allow_nan=False)


@settings(max_examples=300)
@given(T=pos, n_bar=pos, K=pos)
def test_serial_beta_one_is_exactly_one(T, n_bar, K):
    assert speedup_model(T, n_bar, K, 1.0, parallel=False) == 1.0


@given(n_bar=pos, K=pos)
def test_parallel_single_period_is_one(n_bar, K):
    assert speedup_model(1, n_bar, K, 1.0, parallel=True) == pytest.approx(1.0, rel=1e-12)


def test_parallel_asymptotes():
    assert speedup_model(1e6, 600, 10, 1.0, parallel=True) == pytest.approx(61, rel=0.05)
    assert speedup_model(1e6, 90, 10, 3.0, parallel=True) == pytest.approx(1000, rel=0.05)


@settings(max_examples=200)
@given(n_bar=st.floats(1, 1e4), K=st.floats(0.1, 100), beta=st.floats(1, 3),
       T1=st.floats(1, 1e5), T2=st.floats(1, 1e5))
def test_parallel_monotone_and_bounded(n_bar, K, beta, T1, T2):
    lo, hi = sorted((T1, T2))
    a = speedup_model(lo, n_bar, K, beta, parallel=True)
    b = speedup_model(hi, n_bar, K, beta, parallel=True)
    assert a <= b * (1 + 1e-12)
    assert b <= (n_bar / K + 1) ** beta * (1 + 1e-12)


@pytest.mark.parametrize("args", [
    (0, 10, 1, 1.0), (10, -1, 1, 1.0), (10, 10, 0, 1.0), (10, 10, 1, 0.5),
    (10, 10, 1, 3.5), (float("inf"), 10, 1, 1.0), (float("nan"), 10, 1, 1.0),
])
def test_speedup_domain_errors(args):
    with pytest.raises(ValueError):
        speedup_model(*args, parallel=True)


def synthetic_report(power, horizons=(24, 96, 336), n_bar=50, K=2):
    cells = [
        BenchCell("central_rev", T, 1, 1e-6 * (T * (n_bar + K)) ** power, {}, [])
        for T in horizons
    ]
    return BenchReport(cells, {"n_bar": n_bar, "K": K})


@pytest.mark.parametrize("power", [1.0, 3.0])
def test_fit_beta_on_constructed_runtimes(power):
    assert fit_beta(synthetic_report(power)) == pytest.approx(power, abs=1e-9)


def test_fit_beta_needs_three_horizons():
    with pytest.raises(ValueError):
        fit_beta(synthetic_report(1.0, horizons=(24, 96)))
    with pytest.raises(ValueError):
        fit_beta(BenchReport(synthetic_report(1.0).cells, {}))


def test_config_validation():
    with pytest.raises(ValueError):
        BenchConfig(horizons=[24], trials=0)
    with pytest.raises(ValueError):
        BenchConfig(horizons=[])
    with pytest.raises(ValueError):
        BenchConfig(horizons=[0])
    with pytest.raises(ValueError):
        BenchConfig(horizons=[4], methods=["magic"])
    with pytest.raises(ValueError):
        BenchConfig.from_dict({"horizons": [4], "colour": "red"})
    assert BenchConfig(horizons=[4]).trials == 10


def test_empty_report_csv_is_header_only(tmp_path):
    path = tmp_path / "r.csv"
    emit_report(BenchReport(), "csv", path)
    assert path.read_text() == ",".join(CSV_COLUMNS) + "\n"


def test_unknown_format(tmp_path):
    with pytest.raises(ValueError):
        emit_report(BenchReport(), "xml", tmp_path / "r")


@pytest.fixture(scope="module")
def small_report():
    cfg = BenchConfig(horizons=[4], methods=["decentral_rev"], parallelism=[1, 2],
                      trials=1, n_nodes=6, n_batteries=1, seed=4)
    return run_benchmark(cfg)


def test_single_cell():
    report = run_benchmark(BenchConfig(horizons=[3], methods=["central_rev"], trials=1,
                                       n_nodes=4, n_batteries=1))
    assert len(report.cells) == 1
    cell = report.cells[0]
    assert (cell.method, cell.T, cell.parallelism) == ("central_rev", 3, 1)
    assert len(cell.trials) == 1
    assert cell.trial_min_seconds == cell.trials[0] > 0
    assert set(cell.stages) == {"solve:factorize", "solve:adjoint"}
    assert cell.speedup is None


def test_three_cells_and_speedups(small_report, tmp_path):
    # the central baseline is added automatically
    assert sorted((c.method, c.parallelism) for c in small_report.cells) == [
        ("central_rev", 1), ("decentral_rev", 1), ("decentral_rev", 2)
    ]
    for c in small_report.cells:
        if c.method == "decentral_rev":
            base = small_report.cell("central_rev", 4, 1).trial_min_seconds
            assert c.speedup == base / c.trial_min_seconds
    path = tmp_path / "r.csv"
    emit_report(small_report, "csv", path)
    rows = list(csv.reader(path.open()))
    assert tuple(rows[0]) == CSV_COLUMNS
    assert len(rows) == 4
    assert all(r[5] for r in rows[1:] if r[0] == "decentral_rev")


def test_json_round_trip(small_report, tmp_path):
    path = tmp_path / "r.json"
    emit_report(small_report, "json", path)
    back = load_report(path)
    assert back.cells == small_report.cells
    assert back.metadata == json.loads(json.dumps(small_report.metadata))
    meta = small_report.metadata
    assert meta["n_bar"] == meta["N"] + meta["M"] + meta["K"]
    assert {"worker_count", "machine", "beta", "trials"} <= set(meta)


def test_min_of_trials():
    report = run_benchmark(BenchConfig(horizons=[3], methods=["central_rev"], trials=3,
                                       n_nodes=4, n_batteries=1))
    cell = report.cells[0]
    assert len(cell.trials) == 3
    assert cell.trial_min_seconds == min(cell.trials)


def test_failure_is_reported_and_rest_kept(tmp_path, monkeypatch):
    import gridsens.bench as bench
    from gridsens.errors import InfeasibleError

    real = bench.solve_dispatch

    def flaky(case, *a, **k):
        if case.horizon == 5:
            raise InfeasibleError("synthetic failure")
        return real(case, *a, **k)

    monkeypatch.setattr(bench, "solve_dispatch", flaky)
    report = run_benchmark(BenchConfig(horizons=[3, 5], methods=["central_rev"], trials=1,
                                       n_nodes=4, n_batteries=1))
    assert [c.T for c in report.cells] == [3]
    assert report.errors and report.errors[0]["T"] == 5


def test_case_file_source(tmp_path):
    from gridsens.model import generate_synthetic, save_case

    path = tmp_path / "c.json"
    save_case(generate_synthetic(5, 1, 8, 2), path)
    cfg = BenchConfig(horizons=[2, 8], methods=["central_rev"], trials=1, case_path=str(path))
    assert cfg.case_for(2).horizon == 2
    report = run_benchmark(cfg)
    assert [c.T for c in report.cells] == [2, 8]
    np.testing.assert_equal(report.metadata["N"], 5)
