import csv
import math

import numpy as np
import pytest
import yaml
from scipy import stats

from mvflow.cli import ESTIMATOR_HEADER, load_config, main
from mvflow.errors import ConfigError


def write_config(path, cfg):
    path.write_text(yaml.safe_dump(cfg))
    return str(path)


def read_table(path):
    lines = path.read_text().splitlines()
    assert lines[0].startswith("# config_hash=")
    return lines[0].split("=", 1)[1], list(csv.DictReader(lines[1:]))


BASE = {
    "model": {"family": "constant", "params": {"b": 0.0, "sigma0": 1.0}},
    "grid": {"T": 1.0, "n_steps": 8},
    "particles": 2,
    "samples": 20000,
    "seed": 11,
    "x": [0.3],
}


def run(tmp_path, command, cfg, *extra, name="out"):
    out = tmp_path / name
    code = main([command, "--config", write_config(tmp_path / f"{name}.yaml", cfg), "--out", str(out), *extra])
    return code, out


class TestConfig:
    def test_unknown_top_level_key(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(write_config(tmp_path / "c.yaml", dict(BASE, colour="red")), "estimate")

    def test_unknown_block_key(self, tmp_path):
        cfg = dict(BASE, estimate={"targets": ["dx"], "order": 1})
        with pytest.raises(ConfigError):
            load_config(write_config(tmp_path / "c.yaml", cfg), "estimate")

    @pytest.mark.parametrize("patch", [
        {"grid": {"T": -1.0, "n_steps": 8}},
        {"grid": {"T": float("nan"), "n_steps": 8}},
        {"samples": 0},
        {"particles": 1.5},
        {"seed": -3},
        {"x": [0.0, 1.0]},
        {"model": {"family": "nope"}},
        {"model": {"family": "constant", "params": {"b": 0.0}}},
    ])
    def test_invalid_values(self, tmp_path, patch):
        with pytest.raises(ConfigError):
            load_config(write_config(tmp_path / "c.yaml", dict(BASE, **patch)), "estimate")

    def test_seed_override_changes_hash(self, tmp_path):
        p = write_config(tmp_path / "c.yaml", BASE)
        assert load_config(p, "estimate").hash() != load_config(p, "estimate", seed=12).hash()
        assert load_config(p, "estimate").hash() == load_config(p, "estimate").hash()


class TestExitCodes:
    def test_negative_time_leaves_nothing(self, tmp_path, capsys):
        code, out = run(tmp_path, "estimate", dict(BASE, grid={"T": -1.0, "n_steps": 8}))
        assert code == 2
        assert not out.exists()
        assert capsys.readouterr().err.startswith("error,2,")

    def test_order_cap(self, tmp_path, capsys):
        code, out = run(tmp_path, "estimate", dict(BASE, estimate={"targets": ["dx"], "alpha": [0, 0, 0]}))
        assert code == 4 and not out.exists()
        assert capsys.readouterr().err.startswith("error,4,")

    def test_blow_up(self, tmp_path, capsys):
        cfg = dict(BASE, model={"family": "constant", "params": {"b": 1e308, "sigma0": 1.0}},
                   grid={"T": 4.0, "n_steps": 2}, samples=10)
        code, out = run(tmp_path, "estimate", cfg)
        assert code == 3 and not out.exists()

    def test_degenerate_diffusion(self, tmp_path, capsys):
        cfg = dict(BASE, model={"family": "constant", "params": {"b": 0.0, "sigma0": 0.0}}, samples=100,
                   estimate={"targets": ["dx"]})
        code, out = run(tmp_path, "estimate", cfg)
        assert code == 3 and not out.exists()
        assert "singular" in capsys.readouterr().err

    def test_missing_file(self, tmp_path):
        assert main(["estimate", "--config", str(tmp_path / "absent.yaml"), "--out", str(tmp_path)]) == 2

    def test_bad_command(self, tmp_path):
        assert main(["fly", "--config", write_config(tmp_path / "c.yaml", BASE)]) == 2


class TestCommands:
    def test_estimate_matches_gaussian_derivative(self, tmp_path):
        cfg = dict(BASE, estimate={"targets": ["expectation", "dx"], "payoff": "sin", "alpha": [0]})
        code, out = run(tmp_path, "estimate", cfg, "--threads", "2")
        assert code == 0
        _, rows = read_table(out / "estimates.csv")
        assert list(rows[0]) == ESTIMATOR_HEADER
        e, d = rows
        assert e["estimator"] == "expectation" and d["estimator"] == "dx"
        assert abs(float(e["value"]) - math.exp(-0.5) * math.sin(0.3)) <= 3 * float(e["stderr"])
        assert abs(float(d["value"]) - math.exp(-0.5) * math.cos(0.3)) <= 3 * float(d["stderr"])

    def test_estimate_dmu_rows_per_v(self, tmp_path):
        cfg = dict(BASE, model={"family": "mean_field_ou", "params": {"a": 1.0, "sigma0": 0.5}}, particles=200,
                   samples=2000, initial={"kind": "normal", "std": 1.0},
                   estimate={"targets": ["dmu"], "v": [[-1.0], [1.0]]})
        code, out = run(tmp_path, "estimate", cfg)
        assert code == 0
        _, rows = read_table(out / "estimates.csv")
        assert [r["v"] for r in rows] == ["-1.0", "1.0"]

    def test_density_within_tolerance(self, tmp_path):
        cfg = dict(BASE, x=[0.0], samples=100000, density={"z_grid": {"lo": -4, "hi": 4, "count": 101}})
        code, out = run(tmp_path, "density", cfg)
        assert code == 0
        _, rows = read_table(out / "density.csv")
        z = np.array([float(r["z"]) for r in rows])
        p = np.array([float(r["p"]) for r in rows])
        assert len(rows) == 101
        assert np.max(np.abs(p - stats.norm.pdf(z))) <= 0.01
        _, fit = read_table(out / "tail_fit.csv")
        assert {r["quantity"] for r in fit} == {"slope", "intercept", "r2", "n_points"}

    def test_simulate(self, tmp_path):
        cfg = dict(BASE, model={"family": "mean_field_ou", "params": {"a": 1.0, "sigma0": 0.5}}, particles=300,
                   initial={"kind": "uniform", "low": -1.0, "high": 1.0}, simulate={"write_paths": True})
        code, out = run(tmp_path, "simulate", cfg)
        assert code == 0
        h1, summary = read_table(out / "summary.csv")
        h2, _ = read_table(out / "paths.csv")
        assert h1 == h2 and len(summary) == 9

    def test_pde_check(self, tmp_path):
        cfg = dict(BASE, model={"family": "mean_field_ou", "params": {"a": 1.0, "sigma0": 0.5}}, particles=100,
                   samples=2000, grid={"T": 0.5, "n_steps": 16}, initial={"kind": "normal"})
        code, out = run(tmp_path, "pde-check", cfg)
        assert code == 0
        _, rows = read_table(out / "pde_check.csv")
        assert [r["term"] for r in rows] == ["dt_U", "x_terms", "mu_terms", "residual", "h_t"]

    def test_compare(self, tmp_path):
        cfg = dict(BASE, compare={"target": "dx", "payoff": "sin", "bumps": [0.1, 0.01]})
        code, out = run(tmp_path, "compare", cfg)
        assert code == 0
        _, rows = read_table(out / "compare.csv")
        assert [float(r["bump"]) for r in rows] == [0.1, 0.01]


class TestReproducibility:
    @pytest.mark.parametrize("command,block", [
        ("estimate", {"estimate": {"targets": ["dx", "fixed_point_dx"], "payoff": "sin"}}),
        ("density", {"density": {"z_grid": {"lo": -2, "hi": 2, "count": 11}, "derivatives": ["dz"]}}),
        ("simulate", {"simulate": {"write_paths": False}}),
    ])
    def test_byte_identical_across_threads(self, tmp_path, command, block):
        cfg = dict(BASE, samples=3000, particles=50, **block)
        c1, a = run(tmp_path, command, cfg, "--threads", "1", name="a")
        c2, b = run(tmp_path, command, cfg, "--threads", "4", name="b")
        assert c1 == c2 == 0
        files = sorted(p.name for p in a.iterdir())
        assert files == sorted(p.name for p in b.iterdir())
        for name in files:
            assert (a / name).read_bytes() == (b / name).read_bytes()

    def test_seed_flag_changes_output(self, tmp_path):
        cfg = dict(BASE, samples=2000, estimate={"targets": ["dx"], "payoff": "sin"})
        _, a = run(tmp_path, "estimate", cfg, "--seed", "1", name="a")
        _, b = run(tmp_path, "estimate", cfg, "--seed", "2", name="b")
        assert (a / "estimates.csv").read_bytes() != (b / "estimates.csv").read_bytes()
