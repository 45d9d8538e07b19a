import json
import subprocess
import sys

import pytest
import yaml

from darse.cli import main
from darse.commands import read_csv, read_result, run_group_sweep, run_search, sweep_name
from darse.config import ConfigError, load_config, parse_config
from darse.lowrank import make_layers, param_count, write_matrix
from darse.toymodel import generate_synthetic_sentiment, read_dataset, write_dataset


def write_cfg(path, **raw):
    path.write_text(yaml.safe_dump(raw, sort_keys=False))
    return path


def run(*argv):
    return main([str(a) for a in argv])


SPECTRAL = dict(
    seed=3,
    layers=[[12, 10], [16, 16], [8, 14], [10, 10]],
    space=dict(r_max=8, coarse_grid=[1, 2, 4, 8], fine_delta=4),
    search=dict(param_budget=300),
    objective=dict(kind="spectral_tail", generate=dict(decay=[0.6, 0.9], scale=[0.5, 2.0])),
    output_dir="out",
)


@pytest.fixture
def spectral(tmp_path):
    return write_cfg(tmp_path / "spectral.yaml", **SPECTRAL)


# allocate


def test_allocate_ratio_example(tmp_path):
    cfg = write_cfg(tmp_path / "a.yaml", layers=[[8, 8], [8, 8]],
                    allocation=dict(rank_budget=8, spectra=[[3.0], [3 ** 0.5]]),
                    objective=dict(kind="spectral_tail", generate={}))
    assert run("allocate", "--config", cfg) == 0
    res = read_result(tmp_path / "out" / "allocation.result")
    assert res["ranks"] == [6, 2]
    assert res["importance"] == pytest.approx([9.0, 3.0], rel=1e-12)
    assert res["param_count"] == param_count(res["ranks"], make_layers([[8, 8], [8, 8]]))


def test_allocate_identity_layers(tmp_path):
    cfg = write_cfg(tmp_path / "a.yaml", layers=[[4, 4]] * 3,
                    allocation=dict(rank_budget=10, identity=True, caps=[10, 10, 10]),
                    objective=dict(kind="spectral_tail", generate={}))
    assert run("allocate", "--config", cfg, "--out", tmp_path / "o") == 0
    res = read_result(tmp_path / "o" / "allocation.result")
    assert res["ranks"] == [3, 3, 3]
    assert res["param_count"] == param_count([3, 3, 3], make_layers([[4, 4]] * 3))


def test_allocate_from_matrix_files(tmp_path):
    import numpy as np
    write_matrix(tmp_path / "m0.txt", np.diag([3.0, 0.0]))
    write_matrix(tmp_path / "m1.txt", np.diag([1.0, 0.0]))
    cfg = write_cfg(tmp_path / "a.yaml", layers=[[2, 2], [2, 2]],
                    allocation=dict(rank_budget=4, matrices=["m0.txt", "m1.txt"]),
                    objective=dict(kind="spectral_tail", generate={}))
    assert run("allocate", "--config", cfg) == 0
    assert read_result(tmp_path / "out" / "allocation.result")["ranks"] == [2, 0]


def test_allocate_degenerate_exit_2(tmp_path, capsys):
    cfg = write_cfg(tmp_path / "a.yaml", layers=[[4, 4], [4, 4]],
                    allocation=dict(rank_budget=4, spectra=[[0.0], [0.0]]),
                    objective=dict(kind="spectral_tail", generate={}))
    assert run("allocate", "--config", cfg) == 2
    assert "zero" in capsys.readouterr().err


def test_allocate_needs_budget(tmp_path):
    cfg = write_cfg(tmp_path / "a.yaml", layers=[[4, 4]], objective=dict(kind="spectral_tail", generate={}))
    assert run("allocate", "--config", cfg) == 1


# search and oracle


def test_search_scripted(tmp_path):
    cfg = write_cfg(tmp_path / "s.yaml", layers=[[4, 4], [4, 4]],
                    space=dict(r_max=4, coarse_grid=[1, 2, 4], fine_delta=1),
                    objective=dict(kind="scripted", default=10.0, entries=[
                        dict(ranks=[2, 0], metric=5.0), dict(ranks=[2, 2], metric=1.0),
                        dict(ranks=[2, 3], metric=0.5)]))
    assert run("search", "--config", cfg) == 0
    res = read_result(tmp_path / "out" / "best.result")
    assert res["best"] == [2, 3] and res["metric"] == 0.5 and res["status"] == "ok"
    assert set(res["phases"]) == {"seed", "coarse", "fine"}
    lines = (tmp_path / "out" / "history.log").read_text().splitlines()
    assert len(lines) == res["evaluations"]


def test_search_deterministic_bytes(spectral, tmp_path):
    assert run("search", "--config", spectral, "--out", tmp_path / "a") == 0
    assert run("search", "--config", spectral, "--out", tmp_path / "b") == 0
    for name in ("best.result", "report.csv", "history.log"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_search_seed_override_changes_instance(spectral, tmp_path):
    run("search", "--config", spectral, "--out", tmp_path / "a")
    run("search", "--config", spectral, "--out", tmp_path / "b", "--seed", 4)
    a, b = read_result(tmp_path / "a" / "best.result"), read_result(tmp_path / "b" / "best.result")
    assert a["seed"] == 3 and b["seed"] == 4 and a["metric"] != b["metric"]


def test_search_jobs_flag_same_answer(spectral, tmp_path):
    run("search", "--config", spectral, "--out", tmp_path / "a")
    run("search", "--config", spectral, "--out", tmp_path / "b", "--jobs", 3)
    assert (tmp_path / "a" / "best.result").read_bytes() == (tmp_path / "b" / "best.result").read_bytes()


def test_search_within_ten_percent_of_oracle(spectral, tmp_path):
    assert run("search", "--config", spectral) == 0
    assert run("oracle", "--config", spectral) == 0
    best = read_result(tmp_path / "out" / "best.result")
    opt = read_result(tmp_path / "out" / "oracle.result")
    assert opt["method"] == "dp"
    assert best["param_count"] <= 300
    assert opt["metric"] <= best["metric"] <= 1.10 * opt["metric"]


def test_oracle_brute_matches_dp(tmp_path):
    raw = dict(SPECTRAL, layers=[[6, 6], [5, 7], [6, 4]], search=dict(param_budget=60))
    cfg = write_cfg(tmp_path / "c.yaml", **raw, oracle=dict(method="brute"))
    assert run("oracle", "--config", cfg, "--out", tmp_path / "b") == 0
    cfg = write_cfg(tmp_path / "c.yaml", **raw, oracle=dict(method="dp"))
    assert run("oracle", "--config", cfg, "--out", tmp_path / "d") == 0
    b, d = read_result(tmp_path / "b" / "oracle.result"), read_result(tmp_path / "d" / "oracle.result")
    assert b["metric"] == d["metric"] and b["best"] == d["best"]


def test_oracle_dp_needs_separable(tmp_path):
    cfg = write_cfg(tmp_path / "c.yaml", layers=[[4, 4]], oracle=dict(method="dp"),
                    objective=dict(kind="scripted", default=1.0, entries=[]))
    assert run("oracle", "--config", cfg) == 1


def test_evaluator_failure_exit_3(tmp_path, capsys):
    # scripted table without a default fails on the first unlisted vector
    cfg = write_cfg(tmp_path / "s.yaml", layers=[[4, 4]], space=dict(r_max=4, coarse_grid=[1, 2]),
                    objective=dict(kind="scripted", entries=[dict(ranks=[0], metric=1.0),
                                                             dict(ranks=[1], metric=0.5)]))
    assert run("search", "--config", cfg) == 3
    res = read_result(tmp_path / "out" / "best.result")
    assert res["status"] == "failed" and res["rank_vector"] == [2]
    assert "[2]" in capsys.readouterr().err


def test_infeasible_budget_exit_2(tmp_path):
    raw = dict(SPECTRAL, space=dict(r_min=2, r_max=8, coarse_grid=[2, 4, 8]), search=dict(param_budget=10))
    cfg = write_cfg(tmp_path / "c.yaml", **raw)
    assert run("search", "--config", cfg) == 2
    assert run("oracle", "--config", cfg) == 2


# config errors


def test_config_errors_exit_1(tmp_path, capsys):
    assert run("search", "--config", tmp_path / "missing.yaml") == 1
    bad = tmp_path / "bad.yaml"
    bad.write_text("layers: [[4, 4]\n")
    assert run("search", "--config", bad) == 1
    cfg = write_cfg(tmp_path / "u.yaml", **dict(SPECTRAL, colour="blue"))
    assert run("search", "--config", cfg) == 1
    assert "colour" in capsys.readouterr().err
    cfg = write_cfg(tmp_path / "f.yaml", layers=[[4, 4]],
                    objective=dict(kind="spectral_tail", matrices=["nope.txt"]))
    assert run("search", "--config", cfg) == 1
    assert run("search") == 1


@pytest.mark.parametrize("raw", [
    dict(objective=dict(kind="spectral_tail")),
    dict(layers=[[4, 4]]),
    dict(layers=[[4, 4]], objective=dict(kind="magic")),
    dict(layers=[[0, 4]], objective=dict(kind="spectral_tail")),
    dict(layers=[[4, 4]], objective=dict(kind="spectral_tail"), space=dict(r_max=-1)),
    dict(layers=[[4, 4]], objective=dict(kind="spectral_tail"), search=dict(bogus=1)),
    dict(layers=[[4, 4]], objective=dict(kind="spectral_tail", generate=dict(rank=1))),
    dict(layers=[[4, 4]], objective=dict(kind="scripted", spectra=[[1.0]])),
    dict(layers=[[4, 4]], objective=dict(kind="spectral_tail"), sweep=dict(groups=[[0, 1]], ranks=[[1]])),
])
def test_parse_config_rejects(raw, tmp_path):
    with pytest.raises(ConfigError):
        parse_config(raw, tmp_path)


def test_load_config_overrides(spectral, tmp_path):
    cfg = load_config(spectral, seed=9, output_dir=tmp_path / "x", jobs=2)
    assert cfg.seed == 9 and cfg.search.seed == 9 and cfg.search.jobs == 2
    assert cfg.path(cfg.output_dir) == (tmp_path / "x").resolve()
    assert cfg.search.param_budget == 300 and cfg.space.fine_delta == 4


# sweep


SWEEP = dict(
    seed=5,
    layers=[[16, 16]] * 4,
    space=dict(r_max=16, coarse_grid=[1, 2, 4, 8, 16]),
    sweep=dict(groups=[[0, 1], [2, 3]], ranks=[[2, 8], [2, 8]]),
    objective=dict(kind="spectral_tail", generate=dict(decay=[0.6, 0.9])),
)


def test_sweep_rows_sorted(tmp_path):
    cfg = write_cfg(tmp_path / "s.yaml", **SWEEP)
    assert run("sweep", "--config", cfg) == 0
    rows = read_csv(tmp_path / "out" / "sweep.csv")
    assert len(rows) == 4
    assert list(rows[0]) == ["config", "metric", "param_count", "ranks"]
    keys = [(float(r["metric"]), r["config"]) for r in rows]
    assert keys == sorted(keys)
    names = {r["config"] for r in rows}
    assert names == {"G2-2@2", "G2-2@8", "G2-8@2", "G2-8@8"}
    # uniform vectors appear whenever the rank is a candidate in every group
    assert {"2;2;2;2", "8;8;8;8"} <= {r["ranks"] for r in rows}


def test_sweep_ties_order_by_name(tmp_path):
    raw = dict(SWEEP, objective=dict(kind="scripted", default=1.0, entries=[]))
    cfg = write_cfg(tmp_path / "s.yaml", **raw)
    assert run("sweep", "--config", cfg) == 0
    names = [r["config"] for r in read_csv(tmp_path / "out" / "sweep.csv")]
    assert names == sorted(names)


def test_sweep_best_not_better_than_explore(tmp_path):
    cfg = load_config(write_cfg(tmp_path / "s.yaml", **dict(SWEEP, sweep=dict(
        groups=[[0, 1], [2, 3]], ranks=[[1, 2, 4, 8, 16]] * 2))))
    rows = run_group_sweep(cfg)
    res = run_search(cfg)
    assert rows[0]["metric"] >= res["metric"]


def test_sweep_cap_exceeded(tmp_path, capsys):
    raw = dict(SWEEP, sweep=dict(groups=[[0, 0], [1, 1], [2, 2], [3, 3]], ranks=[1, 2, 4], cap=50))
    cfg = write_cfg(tmp_path / "s.yaml", **raw)
    assert run("sweep", "--config", cfg) == 1
    assert "81" in capsys.readouterr().err


def test_sweep_requires_section(spectral):
    assert run("sweep", "--config", spectral) == 1


def test_sweep_name():
    assert sweep_name([384, 512, 256]) == "G3-384@512@256"


# report


def test_report_empty_history(tmp_path):
    (tmp_path / "h.log").write_text("")
    assert run("report", tmp_path / "h.log", "--out", tmp_path / "r") == 0
    assert (tmp_path / "r" / "report.csv").read_text() == \
        "source,evaluation_index,phase,iteration,metric,running_min,ranks\n"


def test_report_running_min(spectral, tmp_path):
    run("search", "--config", spectral)
    assert run("report", "--config", spectral) == 0
    rows = read_csv(tmp_path / "out" / "report.csv")
    mins = [float(r["running_min"]) for r in rows]
    assert rows and all(b <= a for a, b in zip(mins, mins[1:]))
    assert min(float(r["metric"]) for r in rows) == read_result(tmp_path / "out" / "best.result")["metric"]
    uni = read_csv(tmp_path / "out" / "uniform.csv")
    assert [int(r["rank"]) for r in uni] == [1, 2, 4, 8]


def test_report_multiple_sources(spectral, tmp_path):
    run("search", "--config", spectral, "--out", tmp_path / "a")
    run("search", "--config", spectral, "--out", tmp_path / "b", "--seed", 8)
    assert run("report", tmp_path / "a" / "history.log", tmp_path / "b" / "history.log",
               "--out", tmp_path / "r") == 0
    rows = read_csv(tmp_path / "r" / "report.csv")
    n_a = len((tmp_path / "a" / "history.log").read_text().splitlines())
    assert len(rows) == n_a + len((tmp_path / "b" / "history.log").read_text().splitlines())


def test_report_uniform_diminishing(tmp_path):
    cfg = write_cfg(tmp_path / "u.yaml", seed=11, layers=[[32, 32]] * 4,
                    space=dict(r_max=32, coarse_grid=[1, 2, 4, 8, 16, 32]),
                    objective=dict(kind="spectral_tail", generate=dict(decay=0.6)))
    (tmp_path / "h.log").write_text("")
    assert run("report", tmp_path / "h.log", "--config", cfg) == 0
    gains = [float(r["improvement"]) for r in read_csv(tmp_path / "out" / "uniform.csv")[1:]]
    assert all(b < a for a, b in zip(gains, gains[1:]))


def test_report_malformed_line(tmp_path, capsys):
    good = json.dumps(dict(rank_vector=[1], metric=1.0, phase="seed", iteration=0, evaluation_index=0))
    (tmp_path / "h.log").write_text(good + "\n" + good + "\n{oops\n")
    assert run("report", tmp_path / "h.log", "--out", tmp_path) == 1
    assert "h.log:3" in capsys.readouterr().err


# round trips and the remaining objective kinds


def test_result_files_round_trip(spectral, tmp_path):
    cfg = load_config(spectral)
    res = run_search(cfg)
    assert read_result(tmp_path / "out" / "best.result") == json.loads(json.dumps(res))
    text = (tmp_path / "out" / "best.result").read_text()
    assert text.endswith("\n") and "\r" not in text
    csv_text = (tmp_path / "out" / "report.csv").read_text()
    assert "\r" not in csv_text
    for row in read_csv(tmp_path / "out" / "report.csv"):
        assert float(row["metric"]) == float(repr(float(row["metric"])))


def test_matrix_fit_config(tmp_path):
    cfg = write_cfg(tmp_path / "m.yaml", seed=1, layers=[[5, 4], [4, 4]],
                    space=dict(r_max=4, coarse_grid=[1, 2, 4], fine_delta=1),
                    search=dict(max_iter=2),
                    objective=dict(kind="matrix_fit", generate=dict(decay=0.5),
                                   fit=dict(max_steps=300)))
    assert run("search", "--config", cfg) == 0
    res = read_result(tmp_path / "out" / "best.result")
    assert res["metric"] >= 0


def test_toy_config_writes_dataset(tmp_path):
    cfg = write_cfg(tmp_path / "t.yaml", seed=2, layers=[[6, 6]] * 2,
                    space=dict(r_max=3, coarse_grid=[0, 3], fine_delta=1), search=dict(max_iter=1),
                    objective=dict(kind="toy_multitask", model=dict(reg_hidden=4, cls_hidden=4),
                                   train=dict(max_steps=30), generate=dict(count=40)))
    assert run("search", "--config", cfg) == 0
    data = read_dataset(tmp_path / "out" / "dataset.csv")
    assert len(data) == 40 and len(data[0].features) == 6


def test_toy_config_reads_dataset(tmp_path):
    write_dataset(tmp_path / "d.csv", generate_synthetic_sentiment(40, 6, seed=1))
    cfg = write_cfg(tmp_path / "t.yaml", layers=[[6, 6]], space=dict(r_max=2, coarse_grid=[1], fine_delta=1),
                    search=dict(max_iter=1),
                    objective=dict(kind="toy_multitask", dataset="d.csv", train=dict(max_steps=10)))
    assert run("search", "--config", cfg) == 0
    assert not (tmp_path / "out" / "dataset.csv").exists()


def test_help_documents_dataset_columns(capsys):
    with pytest.raises(SystemExit):
        main(["--help"])
    out = capsys.readouterr().out
    assert "score" in out and "label" in out and "feature" in out


def test_module_entry_point(spectral, tmp_path):
    proc = subprocess.run([sys.executable, "-m", "darse", "search", "--config", str(spectral),
                           "--out", str(tmp_path / "m")], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert (tmp_path / "m" / "best.result").exists()
