import csv
import json

import pytest

from fairdolce.cli import (
    METRICS_COLUMNS,
    ConfigError,
    ExperimentConfig,
    main,
    parse_config,
    run_experiment,
)
from fairdolce.data import write_csv
from fairdolce.learner import Ablation

GOLDEN_HEADER = ("seed,t,env,accuracy,dp,eo,md,g,recon,inv,cls,fair,total,"
                 "lambda1,lambda2,lambda3,cum_violation")
TINY = ["--n-per-env", "30", "--angles", "0", "45", "--correlations", "0.8", "0.2", "--feature-dim", "3",
        "--tasks-per-env", "2", "--Q", "3", "--inner-steps", "2", "--latent-semantic", "2",
        "--latent-variation", "2", "--comparator-steps", "3"]


def run_cli(tmp_path, name, *extra):
    out = tmp_path / name
    assert main(["run", *TINY, "--out", str(out), *extra]) == 0
    return out


class TestParse:
    def test_defaults(self):
        cfg = parse_config([])
        assert cfg.source == "rotated"
        assert (cfg.learner.margin_fair, cfg.learner.margin_recon, cfg.learner.margin_inv) == (0.05,) * 3
        assert cfg.seeds == (0,)

    def test_empty_margins_flag_keeps_defaults(self):
        assert parse_config(["--margins"]).learner.margin_inv == 0.05
        assert parse_config(["--margins", "0.1", "0.2", "0.3"]).learner.margin_recon == 0.2
        with pytest.raises(ConfigError):
            parse_config(["--margins", "0.1"])

    def test_csv_and_generator_conflict(self):
        with pytest.raises(ConfigError, match="conflict"):
            parse_config(["--source", "rotated", "--csv", "x.csv"])
        with pytest.raises(ConfigError, match="conflict"):
            parse_config(["--csv", "x.csv", "--n-per-env", "10"])

    def test_csv_source_needs_path(self):
        with pytest.raises(ConfigError, match="missing required source"):
            parse_config(["--source", "csv"])

    def test_flag_overrides_file(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"learner": {"Q": 7, "eta1_0": 0.2}, "seeds": [3, 4]}))
        cfg = parse_config(["--config", str(path), "--Q", "9"])
        assert cfg.learner.Q == 9 and cfg.learner.eta1_0 == 0.2 and cfg.seeds == (3, 4)
        assert json.loads(cfg.dumps())["learner"]["Q"] == 9

    def test_unknown_keys_rejected(self, tmp_path):
        for bad in ({"bogus": 1}, {"learner": {"bogus": 1}}, {"learner": {"seed": 3}}):
            path = tmp_path / "c.json"
            path.write_text(json.dumps(bad))
            with pytest.raises(ConfigError, match="unknown"):
                parse_config(["--config", str(path)])

    def test_type_mismatch(self, tmp_path):
        for bad in ({"learner": {"Q": "16"}}, {"learner": {"Q": 1.5}}, {"seeds": [0, "1"]},
                    {"flipped": {"flip_middle": 1}}):
            path = tmp_path / "c.json"
            path.write_text(json.dumps(bad))
            with pytest.raises(ConfigError, match="type mismatch"):
                parse_config(["--config", str(path)])

    def test_invalid_values(self):
        with pytest.raises(ConfigError):
            parse_config(["--Q", "0"])
        with pytest.raises(ConfigError):
            parse_config(["--seeds", "1", "1"])

    def test_resolved_dump_round_trips(self):
        cfg = parse_config(["--ablation", "no_fairness", "--seeds", "1", "2", "--hidden", "4",
                            "--lambda-init", "1", "2", "3", "--source", "flipped", "--n-copies", "4"])
        again = ExperimentConfig.from_dict(json.loads(cfg.dumps()))
        assert again == cfg
        assert again.learner.ablation is Ablation.NO_FAIRNESS and again.flipped.n_copies == 4


class TestRun:
    def test_outputs_and_golden_header(self, tmp_path):
        out = run_cli(tmp_path, "r", "--seeds", "1", "2")
        assert sorted(p.name for p in out.iterdir()) == ["config.resolved", "metrics.csv", "summary.json"]
        lines = (out / "metrics.csv").read_text().splitlines()
        assert lines[0] == GOLDEN_HEADER == ",".join(METRICS_COLUMNS)
        rows = list(csv.DictReader(lines))
        assert [r["seed"] for r in rows] == ["1"] * 4 + ["2"] * 4
        # no inner loop at t=1: loss columns are empty
        assert rows[0]["recon"] == "" and rows[1]["recon"] != ""
        summary = json.loads((out / "summary.json").read_text())
        assert [s["seed"] for s in summary["per_seed"]] == [1, 2]
        assert summary["mean"]["final_window"]["accuracy"]["count"] == 2
        assert set(summary["mean"]) >= {"fair_sdr", "static_regret", "path_length", "cumulative_violation"}
        resolved = ExperimentConfig.from_dict(json.loads((out / "config.resolved").read_text()))
        assert resolved.seeds == (1, 2)

    def test_bit_identical_reruns(self, tmp_path):
        a = run_cli(tmp_path, "a", "--seeds", "3")
        b = run_cli(tmp_path, "b", "--seeds", "3")
        assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()

    def test_rerun_from_resolved_config(self, tmp_path):
        a = run_cli(tmp_path, "a")
        b = tmp_path / "b"
        assert main(["run", "--config", str(a / "config.resolved"), "--out", str(b)]) == 0
        assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()

    def test_refuses_nonempty_output(self, tmp_path, capsys):
        out = run_cli(tmp_path, "r")
        assert main(["run", *TINY, "--out", str(out)]) == 1
        assert "not empty" in capsys.readouterr().err
        assert main(["run", *TINY, "--out", str(out), "--force"]) == 0

    def test_failure_leaves_no_files(self, tmp_path, capsys):
        out = tmp_path / "r"
        code = main(["run", "--csv", str(tmp_path / "missing.csv"), "--out", str(out)])
        assert code == 1
        err = capsys.readouterr().err.strip()
        assert len(err.splitlines()) == 1 and "missing.csv" in err
        assert not out.exists()
        assert not [p for p in tmp_path.iterdir() if p.name.startswith(".r.")]

    def test_config_error_exit_code(self, tmp_path, capsys):
        assert main(["run", "--source", "csv", "--out", str(tmp_path / "x")]) == 2
        assert "config error" in capsys.readouterr().err

    def test_csv_source(self, tmp_path):
        data = tmp_path / "d.csv"
        assert main(["generate", "--source", "rotated", "--n-per-env", "30", "--angles", "0", "45",
                     "--correlations", "0.8", "0.2", "--feature-dim", "3", "--out", str(data)]) == 0
        out = tmp_path / "r"
        assert main(["run", "--csv", str(data), "--tasks-per-env", "2", "--Q", "3", "--inner-steps", "2",
                     "--comparator-steps", "2", "--out", str(out)]) == 0
        rows = list(csv.DictReader((out / "metrics.csv").open()))
        assert [r["env"] for r in rows] == ["0", "0", "1", "1"]

    def test_flipped_source(self, tmp_path):
        out = tmp_path / "f"
        assert main(["run", "--source", "flipped", "--base-n", "40", "--base-d", "4", "--Q", "3",
                     "--inner-steps", "2", "--comparator-steps", "2", "--out", str(out)]) == 0
        rows = list(csv.DictReader((out / "metrics.csv").open()))
        assert [r["env"] for r in rows] == ["0", "0", "1", "1", "2", "2"]


def test_run_experiment_returns_path(tmp_path):
    cfg = parse_config([*TINY, "--out", str(tmp_path / "x")])
    assert run_experiment(cfg) == tmp_path / "x"


def test_generate_rejects_csv_source(tmp_path, capsys):
    data = tmp_path / "d.csv"
    from fairdolce.data import synthetic_credit_base

    write_csv(data, synthetic_credit_base(10, 2))
    assert main(["generate", "--csv", str(data), "--out", str(tmp_path / "o.csv")]) == 2
