import json


from agora.cli import main


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_econ_outputs_and_determinism(tmp_path, capsys):
    cfg = tmp_path / "exp.json"
    cfg.write_text(json.dumps({"curve": "4, 5.06, 15", "n_jobs": 500, "seed": 3}))
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(capsys, "econ", "-c", cfg, "--out", a)[0] == 0
    assert run(capsys, "econ", "-c", cfg, "--out", b)[0] == 0
    for name in ("report.csv", "report.json", "manifest.json", "revenue.png"):
        assert (a / name).exists()
    assert (a / "report.json").read_bytes() == (b / "report.json").read_bytes()
    assert (a / "revenue.png").read_bytes() == (b / "revenue.png").read_bytes()
    m = json.loads((a / "manifest.json").read_text())
    assert m["subcommand"] == "econ" and m["seed"] == 3 and m["config_paths"] == [str(cfg)]
    assert (a / "report.csv").read_text().startswith("n_jobs,gpu,mean_tbp,mean_fbp,per_token_fbp,f_percent,seed\n")


def test_econ_missing_binding_is_config_error(tmp_path, capsys):
    (tmp_path / "t.csv").write_text("100,1.0,0.5,0.5,k\n")
    (tmp_path / "dist.json").write_text(json.dumps(
        {"entries": [{"weight": 1, "job": {"name": "a100-only-job", "traces": {"A100": "t.csv"}}}]}))
    code, _, err = run(capsys, "econ", "--distribution", tmp_path / "dist.json", "--n-jobs", 10,
                       "--out", tmp_path / "o", "--no-plots")
    assert code == 2
    assert "a100-only-job" in err


def test_sweep_rows(tmp_path, capsys):
    code, out, _ = run(capsys, "sweep", "--n-jobs", 200, "--out", tmp_path / "s")
    assert code == 0
    lines = (tmp_path / "s" / "sweep.csv").read_text().splitlines()
    assert lines[0] == "period_us,ideal_mean,real_mean,percent_error"
    assert [float(line.split(",")[0]) for line in lines[1:]] == [10, 25, 50, 100, 150, 200, 250]
    assert all(float(line.split(",")[3]) <= 0 for line in lines[1:])
    assert (tmp_path / "s" / "sweep.png").exists()

    assert run(capsys, "sweep", "--periods", "50", "--n-jobs", 50, "--out", tmp_path / "one", "--no-plots")[0] == 0
    assert len((tmp_path / "one" / "sweep.csv").read_text().splitlines()) == 2


def test_capacity(tmp_path, capsys):
    code, out, _ = run(capsys, "capacity", 500, 8, 50, 8, "--out", tmp_path / "c")
    assert code == 0
    assert "5.12 Gbit/s" in out and "17.9 PiB/year" in out
    assert run(capsys, "capacity", 1, 1, 1000000, 8, "--out", tmp_path / "c1")[1].startswith("8 B/s")
    one = json.loads((tmp_path / "c" / "capacity.json").read_text())
    run(capsys, "capacity", 1000, 8, 50, 8, "--out", tmp_path / "c2")
    two = json.loads((tmp_path / "c2" / "capacity.json").read_text())
    assert two == {k: 2 * v for k, v in one.items()}
    assert run(capsys, "capacity", 0, 8, 50, 8, "--out", tmp_path / "c3")[0] == 2
    assert run(capsys, "capacity", 1, 8, "--out", tmp_path / "c4")[0] == 2


def test_validate_curve(tmp_path, capsys):
    code, out, _ = run(capsys, "validate-curve", "4, 5.06, 15", "--out", tmp_path / "v")
    assert code == 0 and json.loads(out)["ok"]
    assert (tmp_path / "v" / "curve.png").exists()
    code, out, _ = run(capsys, "validate-curve", "4, 15, 5.06", "--out", tmp_path / "w", "--no-plots")
    assert code == 1 and not json.loads(out)["monotone"]
    assert run(capsys, "validate-curve", "4, abc", "--out", tmp_path / "x")[0] == 2


def test_gen_traces(tmp_path, capsys):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"n_records": 20, "duration_dist": {"const": 10}, "bw_dist": {"uniform": [0, 2]}}))
    assert run(capsys, "gen-traces", "--spec", spec, "--count", 2, "--out", tmp_path / "g")[0] == 0
    assert len(list((tmp_path / "g").glob("synthetic_*_H100.csv"))) == 2
    assert run(capsys, "gen-traces", "--spec", spec, "--format", "atrc", "--out", tmp_path / "b")[0] == 0
    assert run(capsys, "gen-traces", "--kind", "llm", "--model", "llama3-70b", "--output-tokens", 4,
               "--out", tmp_path / "l")[0] == 0
    assert run(capsys, "gen-traces", "--out", tmp_path / "n")[0] == 2


def test_emulate_and_bill(tmp_path, capsys):
    out = tmp_path / "e"
    code, text, err = run(capsys, "emulate", "--nodes", 2, "--gpus", 2, "--customers", 2, "--duration-us", 200_000,
                          "--max-samples", 500, "--truncate-n", 2, "--out", out, "--label", "t")
    assert code == 0, err
    s = json.loads((out / "summary.json").read_text())
    assert s["conserved"] and s["streams"] == 4 and s["gaps"] == 0
    assert (out / "latency.csv").read_text().startswith("run_label,count,min_us,mean_us,p50_us,p99_us,max_us\n")
    assert (out / "latency.png").exists()
    assert len(list((out / "invoices").glob("*.json"))) == 2

    # everything is already invoiced; billing the store again finds nothing
    code, text, _ = run(capsys, "bill", "--store", out / "store", "--out", tmp_path / "b", "--preview")
    assert code == 0 and "total 0 nd" in text
    assert run(capsys, "bill", "--store", tmp_path / "missing", "--out", tmp_path / "b")[0] == 2


def test_emulate_hosts_prints_commands(tmp_path, capsys):
    code, text, _ = run(capsys, "emulate", "--nodes", 3, "--gpus", 1, "--hosts", "h1,h2", "--out", tmp_path / "m")
    assert code == 0
    assert text.count("agora node") == 3 and "agora collector" in text
    assert len(list((tmp_path / "m" / "nodes").glob("node_*.json"))) == 3


def test_usage_errors(capsys):
    assert run(capsys, "frobnicate")[0] == 2
    assert run(capsys)[0] == 2
    assert run(capsys, "econ", "--n-jobs", "many")[0] == 2
