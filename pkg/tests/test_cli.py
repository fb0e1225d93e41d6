import csv
import io
import json
import subprocess
import sys

import numpy as np
import pytest

from gridsens.cli import main
from gridsens.model import load_bundled_case, save_case

from conftest import one_node_case


def read_lme(text):
    rows = list(csv.reader(io.StringIO(text)))
    assert rows[0] == ["node", "period", "lambda"]
    return rows[1:]


@pytest.fixture
def case2b_file(tmp_path):
    path = tmp_path / "case2b.json"
    save_case(load_bundled_case("case2b"), path)
    return str(path)


def test_gen_is_deterministic(tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    for out in (a, b):
        assert main(["gen", "--nodes", "6", "--batteries", "2", "--horizon", "5",
                     "--seed", "3", "--out", str(out)]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_gen_minimal(tmp_path):
    out = tmp_path / "a.json"
    assert main(["gen", "--nodes", "1", "--batteries", "0", "--horizon", "1",
                 "--seed", "1", "--out", str(out)]) == 0
    assert json.loads(out.read_text())["n_nodes"] == 1


def test_gen_too_many_batteries(tmp_path, capsys):
    code = main(["gen", "--batteries", "5", "--nodes", "3", "--horizon", "2",
                 "--out", str(tmp_path / "x.json")])
    assert code == 2
    assert capsys.readouterr().err


def test_usage_errors_exit_2():
    with pytest.raises(SystemExit) as info:
        main(["lme"])
    assert info.value.code == 2
    with pytest.raises(SystemExit) as info:
        main(["lme", "--case", "x.json", "--method", "magic"])
    assert info.value.code == 2
    with pytest.raises(SystemExit) as info:
        main(["lme", "--case", "x.json", "--parallelism", "0"])
    assert info.value.code == 2


def test_missing_case_file_exit_2(tmp_path):
    assert main(["lme", "--case", str(tmp_path / "none.json")]) == 2


@pytest.mark.parametrize("method", ["central-fwd", "central-rev", "decentral-fwd", "decentral-rev"])
def test_trivial_single_row(tmp_path, capsys, method):
    path = tmp_path / "t.json"
    save_case(load_bundled_case("trivial1"), path)
    assert main(["lme", "--case", str(path), "--method", method]) == 0
    rows = read_lme(capsys.readouterr().out)
    assert len(rows) == 1
    assert rows[0][:2] == ["1", "1"]
    assert float(rows[0][2]) == pytest.approx(2.0, abs=1e-5)


def test_case2b_methods_agree(case2b_file, tmp_path):
    vals = []
    for method in ("central-fwd", "central-rev", "decentral-fwd", "decentral-rev"):
        out = tmp_path / f"{method}.csv"
        assert main(["lme", "--case", case2b_file, "--method", method, "--out", str(out)]) == 0
        rows = read_lme(out.read_text())
        assert [r[:2] for r in rows] == [["1", "1"], ["1", "2"], ["2", "1"], ["2", "2"]]
        vals.append(np.array([float(r[2]) for r in rows]))
    for v in vals[1:]:
        assert np.abs(v - vals[0]).max() <= 1e-6


def test_fd_check_passes(case2b_file, tmp_path, capsys):
    out = tmp_path / "l.csv"
    assert main(["lme", "--case", case2b_file, "--fd-check", "--out", str(out)]) == 0
    assert "fd-check: max_abs_diff=" in capsys.readouterr().out


def test_fd_check_failure_exit_1(case2b_file, tmp_path, monkeypatch):
    import gridsens.oracle as oracle

    real = oracle.lme_finite_difference

    def skewed(*args, **kwargs):
        res = real(*args, **kwargs)
        res.lam = res.lam * 1.01
        return res

    monkeypatch.setattr(oracle, "lme_finite_difference", skewed)
    out = tmp_path / "l.csv"
    assert main(["lme", "--case", case2b_file, "--fd-check", "--out", str(out)]) == 1


def test_infeasible_exit_3(tmp_path):
    path = tmp_path / "inf.json"
    save_case(one_node_case(demand=20.0, g_max=10.0), path)
    assert main(["lme", "--case", str(path)]) == 3


def test_degenerate_exit_4(tmp_path):
    from gridsens.model import DispatchCase, Network

    net = Network(
        n_nodes=2, line_from=[0], line_to=[1], susceptance=[5.0], f_max=[50.0],
        battery_nodes=[1], p_max=[0.0], s_max=[4.0], s_init=[2.0], s_final=[2.0],
    )
    case = DispatchCase(net, 2, np.array([[1.0] * 2, [3.0] * 2]), np.full((2, 2), 5.0),
                        np.full((2, 2), 20.0), np.array([[0.8] * 2, [0.2] * 2]))
    path = tmp_path / "deg.json"
    save_case(case, path)
    assert main(["lme", "--case", str(path), "--out", str(tmp_path / "o.csv")]) == 4


def test_dump_kkt(case2b_file, tmp_path):
    dump = tmp_path / "d1F.txt"
    assert main(["lme", "--case", case2b_file, "--dump-kkt", str(dump),
                 "--out", str(tmp_path / "o.csv")]) == 0
    assert dump.read_text().startswith("% 49 49 ")


def test_lme_output_is_byte_identical(case2b_file, tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    for out in (a, b):
        assert main(["lme", "--case", case2b_file, "--method", "decentral-rev",
                     "--out", str(out)]) == 0
    assert a.read_bytes() == b.read_bytes()


def bench_config(tmp_path, **kw):
    cfg = {"horizons": [4], "methods": ["decentral_rev"], "trials": 1,
           "n_nodes": 5, "n_batteries": 1, "seed": 2, **kw}
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    return str(path)


def test_bench_json_and_csv(tmp_path):
    cfg = bench_config(tmp_path)
    js, cs = tmp_path / "r.json", tmp_path / "r.csv"
    assert main(["bench", "--config", cfg, "--out", str(js)]) == 0
    assert main(["bench", "--config", cfg, "--out", str(cs), "--format", "csv"]) == 0
    cells = json.loads(js.read_text())["cells"]
    rows = list(csv.DictReader(cs.open()))
    assert sorted((c["method"], c["T"]) for c in cells) == sorted(
        (r["method"], int(r["T"])) for r in rows
    ) == [("central_rev", 4), ("decentral_rev", 4)]


def test_bench_speedup_column(tmp_path):
    cfg = bench_config(tmp_path, horizons=[24, 96], n_nodes=8)
    out = tmp_path / "r.csv"
    assert main(["bench", "--config", cfg, "--out", str(out), "--format", "csv"]) == 0
    rows = list(csv.DictReader(out.open()))
    dec = [r for r in rows if r["method"] == "decentral_rev"]
    assert sorted(int(r["T"]) for r in dec) == [24, 96]
    assert all(float(r["speedup"]) > 0 for r in dec)


def test_bench_bad_config(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["bench", "--config", str(bad), "--out", str(tmp_path / "r.json")]) == 2
    assert main(["bench", "--config", bench_config(tmp_path, trials=0),
                 "--out", str(tmp_path / "r.json")]) == 2


def test_console_script(tmp_path):
    out = tmp_path / "g.json"
    proc = subprocess.run(
        [sys.executable, "-m", "gridsens.cli", "gen", "--nodes", "2", "--horizon", "2",
         "--out", str(out)],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0, proc.stderr
    assert out.exists()
