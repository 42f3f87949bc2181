import csv
import json
import time

import numpy as np
import pytest
import yaml

from fedpow import cli
from fedpow.harness import (
    SpecError,
    bundled_spec_path,
    load_spec,
    parse_strategy,
    run_bound,
    run_experiment,
    run_freq,
    spec_from_dict,
    summarize,
)

QUAD = {
    "schema_version": 1, "experiment": "quadratic", "n_clients": 8, "dim": 3, "tau": 2,
    "rounds": 15, "eta": 1e-3, "m": 2, "strategies": ["rand", "pow_d:4"], "seeds": 2,
    "target_loss": 1.0, "skew_grid": 20, "skew_draws": 500, "bound_T": [10, 100],
}


def write_spec(path, data):
    path.write_text(yaml.safe_dump(data))
    return path


def test_bundled_specs_parse():
    q = load_spec(bundled_spec_path("quadratic_k30.spec"))
    assert (q.n_clients, q.dim, q.tau, q.eta, q.power_law_a) == (30, 5, 2, 2e-5, 3.0)
    s = load_spec(bundled_spec_path("synthetic11.spec"))
    assert (s.n_clients, s.batch_size, s.tau, s.eta, s.lr_milestones) == (30, 50, 30, 0.05, (300, 600))


def test_schema_errors():
    with pytest.raises(SpecError, match="strategies"):
        spec_from_dict({**QUAD, "strategies": []})
    with pytest.raises(SpecError):
        spec_from_dict({**QUAD, "schema_version": 2})
    with pytest.raises(SpecError):
        spec_from_dict({**QUAD, "unknown_key": 1})
    with pytest.raises(SpecError):
        spec_from_dict({**QUAD, "strategies": ["pow_d"]})
    with pytest.raises(SpecError, match="exceeds"):
        spec_from_dict({**QUAD, "strategies": ["pow_d:40"]})
    with pytest.raises(SpecError):
        spec_from_dict({**QUAD, "experiment": "synthetic", "lr_schedule": "theorem"})
    with pytest.raises(SpecError):
        spec_from_dict([1, 2])


def test_parse_strategy():
    spec = spec_from_dict(QUAD)
    assert parse_strategy("rand_norep", spec).replacement is False
    cfg = parse_strategy("cpow_d:5", spec)
    assert (cfg.kind, cfg.d, cfg.m) == ("cpow_d", 5, 2)


def test_run_outputs_and_pure_summary(tmp_path):
    spec = spec_from_dict(QUAD)
    summary = run_experiment(spec, tmp_path)
    files = sorted(p.name for p in (tmp_path / "metrics").iterdir())
    assert files == ["pow_d4_seed0.csv", "pow_d4_seed1.csv", "rand_seed0.csv", "rand_seed1.csv"]
    header = (tmp_path / "metrics" / "rand_seed0.csv").read_text().splitlines()[0]
    assert header == "round,t,global_loss,eval_metric,selected_ids,lr"
    assert set(summary["strategies"]) == {"rand", "pow_d4"}
    assert summary["strategies"]["rand"]["seeds"] == [0, 1]
    runs = json.loads((tmp_path / "runs.json").read_text())
    assert len(runs["runs"]) == 4 and runs["spec"]["base_seed"] == 0

    before = {p: p.read_bytes() for p in (tmp_path / "comparison.csv", tmp_path / "summary.json")}
    summarize(tmp_path, spec.target_loss)
    assert all(p.read_bytes() == b for p, b in before.items())


def test_comparison_mean_matches_metrics(tmp_path):
    run_experiment(spec_from_dict(QUAD), tmp_path)
    losses = []
    for s in (0, 1):
        with (tmp_path / "metrics" / f"rand_seed{s}.csv").open() as fh:
            losses.append([float(r["global_loss"]) for r in csv.DictReader(fh)])
    with (tmp_path / "comparison.csv").open() as fh:
        rows = [r for r in csv.DictReader(fh) if r["strategy"] == "rand"]
    np.testing.assert_allclose([float(r["global_loss_mean"]) for r in rows], np.mean(losses, axis=0))


def test_freq_profile(tmp_path):
    run_experiment(spec_from_dict({**QUAD, "rounds": 200}), tmp_path)
    path = run_freq(tmp_path / "metrics")
    with path.open() as fh:
        rows = list(csv.DictReader(fh))
    rand = [r for r in rows if r["strategy"] == "rand"]
    ratios = [float(r["ratio"]) for r in rand]
    assert ratios == sorted(ratios, reverse=True)
    assert sum(ratios) == pytest.approx(1.0)
    # 800 with-replacement draws: ratios track p_k
    for r in rand:
        assert abs(float(r["ratio"]) - float(r["p_k"])) < 0.06


def test_freq_single_round(tmp_path):
    (tmp_path / "metrics").mkdir()
    (tmp_path / "metrics" / "pow_d3_seed0.csv").write_text(
        "round,t,global_loss,eval_metric,selected_ids,lr\n0,1,1.0,,2;4,0.1\n")
    path = run_freq(tmp_path)
    rows = list(csv.DictReader(path.open()))
    assert [(r["client"], float(r["ratio"])) for r in rows[:2]] == [("2", 0.5), ("4", 0.5)]


def test_bound_explicit(tmp_path):
    params = {"L": 2.0, "mu": 1.0, "G": 1.0, "sigma": 0.0, "tau": 2, "m": 3, "gap": 0.5,
              "rho_bar": 1.2, "rho_tilde": 1.2, "init_dist_sq": 1.0, "init_gap": 2.0,
              "T": [1000, 2000, 4000]}
    rows = run_bound(params, tmp_path)
    t1 = [r for r in rows if r[1] == "theorem1"]
    assert all(r[4] == 0.0 for r in t1)
    assert 1.9 < t1[0][3] / t1[1][3] < 2.0
    assert {r[1] for r in rows} == {"theorem1", "theorem2"}


def test_bound_eta_above_cap(tmp_path):
    params = {"L": 2.0, "mu": 1.0, "G": 1.0, "gap": 0.5, "rho_bar": 1.0, "rho_tilde": 1.0,
              "init_dist_sq": 1.0, "init_gap": 1.0, "eta": 10.0}
    with pytest.raises(SpecError):
        run_bound(params, tmp_path)


def test_bound_derived_from_spec(tmp_path):
    rows = run_bound(spec_from_dict(QUAD), tmp_path)
    assert {r[0] for r in rows} == {"rand", "pow_d4"}
    assert (tmp_path / "bound_table.csv").read_text().startswith("strategy,theorem,T,")


# --- CLI ---------------------------------------------------------------------


def test_cli_run_and_env_precedence(tmp_path, monkeypatch, capsys):
    spec = write_spec(tmp_path / "q.spec", {**QUAD, "output_dir": str(tmp_path / "from_spec")})
    monkeypatch.setenv(cli.OUT_ENV, str(tmp_path / "from_env"))
    assert cli.main(["run", "--spec", str(spec)]) == 0
    assert (tmp_path / "from_env" / "summary.json").is_file()
    assert cli.main(["run", "--spec", str(spec), "--out", str(tmp_path / "flag"), "--seed", "5"]) == 0
    assert (tmp_path / "flag" / "metrics" / "rand_seed5.csv").is_file()
    monkeypatch.delenv(cli.OUT_ENV)
    assert cli.main(["run", "--spec", str(spec)]) == 0
    assert (tmp_path / "from_spec" / "summary.json").is_file()


def test_cli_exit_codes(tmp_path, capsys):
    assert cli.main(["run", "--spec", str(tmp_path / "missing.spec")]) == 2
    empty = write_spec(tmp_path / "e.spec", {**QUAD, "strategies": []})
    assert cli.main(["run", "--spec", str(empty), "--out", str(tmp_path / "o")]) == 2
    assert "strategies" in capsys.readouterr().err
    boom = write_spec(tmp_path / "d.spec", {**QUAD, "eta": 5.0, "rounds": 200, "tau": 50})
    assert cli.main(["run", "--spec", str(boom), "--out", str(tmp_path / "o")]) == 3
    assert "diverged" in capsys.readouterr().err
    assert cli.main(["freq", str(tmp_path / "nothing")]) == 2


def test_cli_freq_rejects_missing_history_column(tmp_path):
    (tmp_path / "metrics").mkdir()
    (tmp_path / "metrics" / "rand_seed0.csv").write_text("round,t,global_loss\n0,1,1.0\n")
    assert cli.main(["freq", str(tmp_path)]) == 2


def test_cli_skew_and_bound(tmp_path, capsys):
    spec = write_spec(tmp_path / "q.spec", {**QUAD, "strategies": ["rand", "pow_d:4", "rpow_d:4"]})
    assert cli.main(["skew", "--spec", str(spec), "--out", str(tmp_path / "s")]) == 0
    table = (tmp_path / "s" / "skew_table.csv").read_text().splitlines()
    assert table[0] == "strategy,d,rho_bar,rho_tilde_over_rho_bar"
    assert len(table) == 3
    assert cli.main(["bound", "--spec", str(spec), "--out", str(tmp_path / "b")]) == 0
    bad = write_spec(tmp_path / "p.yaml", {"L": 1.0})
    assert cli.main(["bound", "--spec", str(bad), "--out", str(tmp_path / "b")]) == 2


def test_cli_skew_single_client(tmp_path):
    spec = write_spec(tmp_path / "k1.spec", {**QUAD, "n_clients": 1, "m": 1,
                                             "strategies": ["rand", "pow_d:1"]})
    assert cli.main(["skew", "--spec", str(spec), "--out", str(tmp_path)]) == 0
    for entry in json.loads((tmp_path / "skew_report.json").read_text()).values():
        assert entry["rho_bar"] == pytest.approx(1.0)
        assert entry["rho_tilde"] == pytest.approx(1.0)


@pytest.mark.slow
@pytest.mark.parametrize("name", ["quadratic_k30.spec", "synthetic11.spec"])
def test_bundled_spec_completes_within_five_minutes(tmp_path, name):
    start = time.perf_counter()
    assert cli.main(["run", "--spec", str(bundled_spec_path(name)), "--out", str(tmp_path)]) == 0
    assert time.perf_counter() - start < 300
