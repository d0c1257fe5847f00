import csv
import json
import os

import pytest

from asyncpfl.cli import main
from asyncpfl.config import ConfigError, from_dict, load_config, parse_text, write_atomic

BASE = """
name = "{name}"
seeds = [1, 2, 3]
Q = 2
steps = {steps}

[fleet]
kind = "quadratic"
n = 4
dim = 3
heterogeneity = {het}
noise = 0.2
lipschitz = 1.0

[rule]
option = "{option}"
eta = {eta}
{extra}

[schedule]
mode = "{mode}"
"""


def write_cfg(tmp_path, fname="c.toml", name="x", steps=50, het=1.0, option="A", eta=0.05, extra="",
              mode="async"):
    p = tmp_path / fname
    p.write_text(BASE.format(name=name, steps=steps, het=het, option=option, eta=eta, extra=extra, mode=mode))
    return p


def test_config_round_trip(tmp_path):
    cfg = load_config(write_cfg(tmp_path, option="C", extra="lam_scale = 10.0"))
    again = from_dict(json.loads(cfg.echo()))
    assert again == cfg
    assert cfg.rule["lam"] == pytest.approx(10.0)


def test_config_echo_includes_defaults(tmp_path):
    d = load_config(write_cfg(tmp_path)).to_dict()
    assert d["beta"] == 1.0 and d["schedule"]["upload"] == [4.0, 6.0] and d["rule"]["batch_size"] == 1


@pytest.mark.parametrize("raw,field", [
    ({"fleet": {"n": 0}}, "fleet"),
    ({"rule": {"option": "B", "alpha": -1.0}}, "rule.alpha"),
    ({"rule": {"option": "A", "batch_size": 0}}, "rule.batch_size"),
    ({"rule": {"option": "A", "lam": 3.0}}, "rule.lam"),
    ({"schedule": {"mode": "parallel"}}, "schedule.mode"),
    ({"schedule": {"participation": 1.5}}, "schedule.participation"),
    ({"bogus": 1}, "bogus"),
    ({"Q": 0}, "Q"),
    ({"steps": None, "time": None}, "steps"),
])
def test_invalid_configs_name_the_field(raw, field):
    with pytest.raises(ConfigError) as exc:
        from_dict(raw)
    assert exc.value.path == field


def test_lam_below_measured_smoothness_rejected(tmp_path):
    p = write_cfg(tmp_path, option="C", extra="lam = 0.9")
    with pytest.raises(ConfigError, match="kappa"):
        load_config(p)
    assert main(["run", "--config", str(p), "--out", str(tmp_path / "o")]) == 2


def test_parse_text_reports_bad_toml():
    with pytest.raises(ConfigError):
        parse_text("a = [", ".toml")


def test_run_writes_one_directory_per_seed_and_is_deterministic(tmp_path):
    p = write_cfg(tmp_path)
    out1, out2 = tmp_path / "o1", tmp_path / "o2"
    assert main(["run", str(p), "--out", str(out1)]) == 0
    assert main(["run", "--config", str(p), "--out", str(out2), "--jobs", "2"]) == 0
    dirs = sorted(x.name for x in out1.iterdir() if x.is_dir())
    assert dirs == ["seed_1", "seed_2", "seed_3"]
    assert (out1 / "aggregate.json").exists()
    for s in dirs:
        for f in ("metrics.csv", "ledger.csv"):
            assert (out1 / s / f).read_bytes() == (out2 / s / f).read_bytes()
    header = (out1 / "seed_1" / "metrics.csv").read_text().splitlines()[0]
    assert header == "step,time,grad_norm_sq,loss,staleness,active_ratio"
    rows = list(csv.DictReader(open(out1 / "seed_1" / "ledger.csv")))
    assert all(int(r["staleness"]) == int(r["t"]) - int(r["omega"]) for r in rows)
    summary = json.loads((out1 / "seed_2" / "summary.json").read_text())
    assert summary["config"]["rule"]["option"] == "A" and "tau_observed" in summary
    assert not list(out1.rglob("*.tmp*"))


def test_seed_override_and_env_out(tmp_path, monkeypatch):
    p = write_cfg(tmp_path)
    monkeypatch.setenv("ASYNCPFL_OUT", str(tmp_path / "envout"))
    assert main(["run", str(p), "--seed-override", "7"]) == 0
    assert [x.name for x in (tmp_path / "envout").iterdir() if x.is_dir()] == ["seed_7"]


def test_divergence_gives_nonzero_exit_and_keeps_logs(tmp_path):
    p = write_cfg(tmp_path, eta=80.0, steps=400)
    out = tmp_path / "div"
    assert main(["run", str(p), "--out", str(out)]) == 1
    agg = json.loads((out / "aggregate.json").read_text())
    assert agg["diverged_seeds"] == [1, 2, 3]
    assert len((out / "seed_1" / "metrics.csv").read_text().splitlines()) > 1


def test_verify_gradcheck_exit_zero(tmp_path, capsys):
    p = write_cfg(tmp_path)
    assert main(["verify", "gradcheck", str(p), "--out", str(tmp_path / "g")]) == 0
    assert "moreau_grad_exact" in capsys.readouterr().out
    assert json.loads((tmp_path / "g" / "verify_gradcheck.json").read_text())["passed"]


def test_verify_lemmas_refuses_small_lam_for_diversity(tmp_path, capsys):
    p = write_cfg(tmp_path)
    with open(p, "a") as fh:
        fh.write("\n[verify]\nlemma_lams = [5.0]\nlemma_names = [\"moreau_diversity\"]\n")
    assert main(["verify", "lemmas", str(p), "--out", str(tmp_path / "l")]) == 2
    assert "lam >= 7 L" in capsys.readouterr().err


def test_verify_lemmas_small_run(tmp_path):
    p = write_cfg(tmp_path)
    with open(p, "a") as fh:
        fh.write("\n[verify]\nlemma_names = [\"moreau_smoothness\", \"maml_grad_norm\"]\n"
                 "draws = 500\nbias_draws = 500\npairs = 100\n")
    assert main(["verify", "lemmas", str(p), "--out", str(tmp_path / "l")]) == 0
    rep = json.loads((tmp_path / "l" / "verify_lemmas.json").read_text())
    assert len(rep["reports"]) == 4 and rep["passed"]


def test_verify_rates_refuses_short_horizon(tmp_path, capsys):
    p = write_cfg(tmp_path, steps=100)
    assert main(["verify", "rates", str(p), "--out", str(tmp_path / "r")]) == 2
    assert "threshold" in capsys.readouterr().err


def test_compare_with_itself_gives_identical_curves(tmp_path):
    a = write_cfg(tmp_path, "a.toml", name="m1")
    b = write_cfg(tmp_path, "b.toml", name="m2")
    out = tmp_path / "cmp"
    assert main(["compare", str(a), str(b), "--out", str(out)]) == 0
    rows = list(csv.DictReader(open(out / "compare.csv")))
    m1 = [(r["seed"], r["time"], r["metric"], r["value"]) for r in rows if r["method"] == "m1"]
    m2 = [(r["seed"], r["time"], r["metric"], r["value"]) for r in rows if r["method"] == "m2"]
    assert m1 == m2 and m1
    assert (out / "personalization.csv").exists()


def test_compare_truncates_at_earliest_finisher(tmp_path):
    a = write_cfg(tmp_path, "a.toml", name="async", steps=60)
    b = write_cfg(tmp_path, "b.toml", name="sync", steps=5, mode="sync")
    out = tmp_path / "cmp"
    assert main(["compare", "--config", str(a), "--config", str(b), "--out", str(out)]) == 0
    rows = list(csv.DictReader(open(out / "compare.csv")))
    for seed in ("1", "2", "3"):
        sync_end = max(float(r["time"]) for r in rows if r["method"] == "sync" and r["seed"] == seed)
        async_end = max(float(r["time"]) for r in rows if r["method"] == "async" and r["seed"] == seed)
        assert async_end <= sync_end


def test_compare_rejects_mismatched_fleets(tmp_path, capsys):
    a = write_cfg(tmp_path, "a.toml", het=1.0)
    b = write_cfg(tmp_path, "b.toml", het=2.0)
    assert main(["compare", str(a), str(b), "--out", str(tmp_path / "c")]) == 2
    assert "share the fleet settings" in capsys.readouterr().err


def test_compare_needs_two_configs(tmp_path):
    assert main(["compare", str(write_cfg(tmp_path)), "--out", str(tmp_path)]) == 2


def test_report_marks_best(tmp_path, capsys):
    for k, eta in enumerate((0.05, 0.2)):
        p = write_cfg(tmp_path, f"c{k}.toml", eta=eta)
        assert main(["run", str(p), "--out", str(tmp_path / "runs" / f"eta{k}")]) == 0
    capsys.readouterr()
    assert main(["report", "--out", str(tmp_path / "runs")]) == 0
    out = capsys.readouterr().out
    assert out.count("best") == 1 and "eta0" in out and "eta1" in out


def test_write_atomic_replaces_file(tmp_path):
    p = tmp_path / "x" / "f.txt"
    write_atomic(p, "one")
    write_atomic(p, "two")
    assert p.read_text() == "two" and os.listdir(p.parent) == ["f.txt"]
