import csv
import json

import numpy as np
import pytest

from lpv_mhe_mpc.cli import EXIT_CONFIG, EXIT_OK, EXIT_VERIFY, main
from lpv_mhe_mpc.experiment import (
    EPISODE_COLUMNS,
    ConfigError,
    ExperimentConfig,
    check_rows,
    initial_theta,
    learn,
    load_theta,
    run_episode,
    simulate,
    write_theta,
)

SMALL = dict(T_f=40, iterations=1, episodes_per_iteration=2, eval_seeds=[1001])


def small_config(**over):
    return ExperimentConfig.from_dict({**SMALL, **over})


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


class TestConfig:
    def test_defaults(self):
        cfg = ExperimentConfig()
        assert cfg.design_k == (1.0, 2.0) and cfg.design_d == (0.0, 0.5)
        assert cfg.true_k == (0.5, 2.0) and cfg.true_d == (0.0, 0.2)
        assert cfg.h == 0.05 and cfg.N == 10

    def test_json_round_trip(self, tmp_path):
        cfg = small_config(x_min=[-2, -2], x_max=[2, 2], theta_init={"f": [0.1, 0.0, 0.0]})
        path = tmp_path / "c.json"
        path.write_text(json.dumps(cfg.to_json()))
        assert ExperimentConfig.load(path) == cfg

    @pytest.mark.parametrize("data", [
        {"unknown_key": 1}, {"h": -0.1}, {"gamma": 1.0}, {"true_k": [2.0, 1.0]}, {"seed": -1},
        {"schedule_mode": "random"}, {"u_min": 1.0, "u_max": -1.0}, [],
    ])
    def test_invalid(self, data):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict(data)

    def test_unreadable(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("{")
        with pytest.raises(ConfigError):
            ExperimentConfig.load(bad)

    def test_theta_overrides(self):
        th = initial_theta(small_config(theta_init={"f": [0.1, 0.2, 0.3]}))
        np.testing.assert_array_equal(th["f"], [0.1, 0.2, 0.3])
        with pytest.raises(ConfigError):
            initial_theta(small_config(theta_init={"f": [0.1]}))
        with pytest.raises(ConfigError):
            initial_theta(small_config(theta_init={"nope": [0.1]}))
        with pytest.raises(ConfigError):
            initial_theta(small_config(learned=["nope"]))

    def test_theta_file(self, tmp_path):
        cfg = small_config()
        th = initial_theta(cfg)
        write_theta(tmp_path / "t.json", th)
        np.testing.assert_array_equal(load_theta(tmp_path / "t.json", th).values, th.values)
        (tmp_path / "bad.json").write_text('{"values": [1.0]}')
        with pytest.raises(ConfigError):
            load_theta(tmp_path / "bad.json", th)


class TestEpisode:
    def test_equilibrium_start(self):
        cfg = small_config()
        res = run_episode(cfg, initial_theta(cfg), False, 7, x0=np.zeros(2))
        assert res.J <= 1e-8

    def test_deterministic(self):
        cfg = small_config()
        th = initial_theta(cfg)
        a = run_episode(cfg, th, False, 3)
        b = run_episode(cfg, th, False, 3)
        assert a.J == b.J
        assert a.rows == b.rows

    def test_rows(self):
        cfg = small_config()
        res = run_episode(cfg, initial_theta(cfg), True, 5)
        assert len(res.rows) == cfg.T_f
        assert all(len(r) == len(EPISODE_COLUMNS) for r in res.rows)
        assert check_rows(res.rows) == []
        assert len(res.transitions) == cfg.T_f

    def test_exploration_respects_bounds(self):
        cfg = small_config(exploration=0.5)
        res = run_episode(cfg, initial_theta(cfg), True, 6, x0=np.array([1.0, 1.0]))
        u = np.array([r[16] for r in res.rows], dtype=float)
        assert np.all(np.abs(u) <= 1.0 + 1e-8)

    def test_matched_model_stabilizes(self):
        cfg = ExperimentConfig(design_k=(0.5, 2.0), design_d=(0.0, 0.2), eval_seeds=(1,))
        th = initial_theta(cfg)
        for seed in range(3):
            res = run_episode(cfg, th, False, seed)
            assert abs(res.x_final[0]) <= 0.05

    def test_check_rows_flags_violations(self):
        cfg = small_config(T_f=3)
        rows = run_episode(cfg, initial_theta(cfg), False, 1).rows
        bad = [list(r) for r in rows]
        bad[0][16] = 1.5
        bad[1][8] = -0.1
        assert len(check_rows(bad)) == 2


class TestRuns:
    def test_simulate(self, tmp_path):
        cfg = small_config(T_f=20)
        summary = simulate(cfg, tmp_path, debug=True)
        assert len(read_csv(tmp_path / "episodes.csv")) == 20
        assert json.loads((tmp_path / "config.json").read_text()) == json.loads(json.dumps(cfg.to_json()))
        assert (tmp_path / "debug" / "mpc_e000_k0000.csv").exists()
        assert np.isfinite(summary["J_mean"])

    def test_zero_learning_rate_flat(self, tmp_path):
        cfg = small_config(alpha=0.0, iterations=2)
        res = learn(cfg, tmp_path)
        assert res["J_eval"][0] == res["J_eval"][1] == res["J_eval"][2]
        trace = read_csv(tmp_path / "learning_trace.csv")
        assert [int(r["iteration"]) for r in trace] == [0, 1, 2]
        assert trace[0]["norm_L_A"] == trace[-1]["norm_L_A"]

    def test_empty_selection_is_simulate(self, tmp_path):
        cfg = small_config(learned=[])
        res = learn(cfg, tmp_path / "learn")
        summary = simulate(cfg, tmp_path / "sim")
        assert res["J_eval"][-1] == summary["J_mean"]
        th0 = json.loads((tmp_path / "learn" / "theta_initial.json").read_text())
        th1 = json.loads((tmp_path / "learn" / "theta_final.json").read_text())
        assert th0 == th1

    def test_learning_step_changes_theta(self, tmp_path):
        cfg = small_config(T_f=100, episodes_per_iteration=2)
        res = learn(cfg, tmp_path)
        trace = read_csv(tmp_path / "learning_trace.csv")
        assert int(trace[1]["valid_samples"]) == 200
        assert trace[1]["rejected"] == "0"
        assert not np.array_equal(res["theta"].values, initial_theta(cfg).values)


class TestCli:
    def test_unknown_key_exit(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text('{"bogus": 1}')
        assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path)]) == EXIT_CONFIG

    def test_malformed_theta_exit(self, tmp_path):
        th = tmp_path / "t.json"
        th.write_text("[1, 2]")
        assert main(["simulate", "--theta", str(th), "--out", str(tmp_path)]) == EXIT_CONFIG

    def test_seed_out_of_range(self, tmp_path):
        assert main(["simulate", "--seed", str(2**64), "--out", str(tmp_path)]) == EXIT_CONFIG

    def test_simulate_ok(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({**SMALL, "T_f": 10}))
        assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "o"), "--seed", "4"]) == EXIT_OK
        assert json.loads((tmp_path / "o" / "config.json").read_text())["seed"] == 4
        assert "J_mean" in capsys.readouterr().out

    def test_bench(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({**SMALL, "T_f": 10}))
        assert main(["bench", "--config", str(cfg), "--out", str(tmp_path)]) == EXIT_OK
        stats = json.loads((tmp_path / "bench.json").read_text())
        assert stats["mpc"]["count"] == 10

    @pytest.mark.slow
    def test_verify_mutation_exit(self, tmp_path):
        assert main(["verify", "--quick", "--inject-sign-error", "--out", str(tmp_path)]) == EXIT_VERIFY
        assert "FAIL" in (tmp_path / "verify_report.txt").read_text()
