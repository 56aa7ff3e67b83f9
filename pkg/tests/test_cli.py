"""Tests for configuration, parsing, export, and the command-line interface."""

import json

import numpy as np
import pytest

from stmmap.cli import (
    ConfigError,
    RunConfig,
    load_config,
    main,
    make_emulation_case,
    parse_landmarks_csv,
    parse_points_csv,
    write_manifest,
)


class TestLoadConfig:
    def test_default_keyword(self):
        cfg = load_config("default")
        assert cfg == RunConfig()

    def test_missing_file(self):
        with pytest.raises(ConfigError, match="not found"):
            load_config("/nonexistent/path.ini")

    def test_round_trip(self, tmp_path):
        p = tmp_path / "cfg.ini"
        p.write_text(
            "[map]\ndepth = 3\nwindow = 2\n"
            "[prior]\nrho = 0.75\nsigma2 = 10\n"
            "[run]\nseed = 42\nsensor = lidar\n"
            "[scenario]\nsteps = 4\n"
        )
        cfg = load_config(str(p))
        assert cfg.depth == 3
        assert cfg.window == 2
        assert cfg.rho == 0.75
        assert cfg.sigma2 == 10.0
        assert cfg.seed == 42
        assert cfg.sensor == "lidar"
        assert cfg.steps == 4
        # untouched fields keep defaults
        assert cfg.a_p == RunConfig().a_p

    def test_unknown_section(self, tmp_path):
        p = tmp_path / "cfg.ini"
        p.write_text("[mystery]\nx = 1\n")
        with pytest.raises(ConfigError, match="unknown config section"):
            load_config(str(p))

    def test_unknown_key(self, tmp_path):
        p = tmp_path / "cfg.ini"
        p.write_text("[map]\ndeepness = 3\n")
        with pytest.raises(ConfigError, match="unknown key"):
            load_config(str(p))

    def test_bad_type(self, tmp_path):
        p = tmp_path / "cfg.ini"
        p.write_text("[map]\ndepth = five\n")
        with pytest.raises(ConfigError):
            load_config(str(p))

    @pytest.mark.parametrize(
        "section,key,value",
        [
            ("map", "depth", "-1"),
            ("map", "depth", "99"),
            ("map", "window", "0"),
            ("prior", "rho", "1.0"),
            ("prior", "sigma2", "0"),
            ("prior", "a_p", "-2"),
            ("convergence", "kl_threshold", "0"),
            ("convergence", "max_sweeps", "0"),
            ("run", "sensor", "sonar"),
            ("scenario", "steps", "1"),
            ("scenario", "density", "0"),
        ],
    )
    def test_out_of_range(self, tmp_path, section, key, value):
        p = tmp_path / "cfg.ini"
        p.write_text(f"[{section}]\n{key} = {value}\n")
        with pytest.raises(ConfigError):
            load_config(str(p))


class TestManifest:
    def test_contents_and_reproducibility(self, tmp_path):
        cfg = load_config("default")
        write_manifest(str(tmp_path / "a"), "simulate", cfg)
        write_manifest(str(tmp_path / "b"), "simulate", cfg)
        a = (tmp_path / "a.manifest.json").read_bytes()
        b = (tmp_path / "b.manifest.json").read_bytes()
        assert a == b
        doc = json.loads(a)
        assert doc["format_version"] == 1
        assert doc["seed"] == cfg.seed
        assert len(doc["config_hash"]) == 64
        assert "numpy" in doc["versions"]

    def test_hash_tracks_config(self, tmp_path):
        c1 = RunConfig()
        c2 = RunConfig(depth=3)
        write_manifest(str(tmp_path / "a"), "x", c1)
        write_manifest(str(tmp_path / "b"), "x", c2)
        h1 = json.loads((tmp_path / "a.manifest.json").read_text())["config_hash"]
        h2 = json.loads((tmp_path / "b.manifest.json").read_text())["config_hash"]
        assert h1 != h2


class TestParsePoints:
    def test_isotropic_form(self, tmp_path):
        p = tmp_path / "pts.csv"
        p.write_text("x,y,z,sigma\n1,2,3,0.5\n4,5,6,2\n")
        res = parse_points_csv(str(p))
        assert res.means.shape == (2, 3)
        np.testing.assert_allclose(res.covs[0], 0.25 * np.eye(3))
        np.testing.assert_allclose(res.covs[1], 4.0 * np.eye(3))
        assert res.warnings == []
        assert res.n_total_rows == 2

    def test_full_covariance_form(self, tmp_path):
        p = tmp_path / "pts.csv"
        p.write_text(
            "x,y,z,sxx,syy,szz,sxy,sxz,syz\n"
            "0,0,1,2,3,4,0.1,0.2,0.3\n"
        )
        res = parse_points_csv(str(p))
        cov = res.covs[0]
        np.testing.assert_allclose(cov, cov.T)
        assert cov[0, 0] == 2 and cov[1, 1] == 3 and cov[2, 2] == 4
        assert cov[0, 1] == 0.1 and cov[0, 2] == 0.2 and cov[1, 2] == 0.3

    def test_bad_rows_warned_with_line_numbers(self, tmp_path):
        p = tmp_path / "pts.csv"
        p.write_text("x,y,z,sigma\n1,2,3,0.5\n1,2,nope,0.5\n1,2,3,-1\n4,5,6,1\n")
        res = parse_points_csv(str(p))
        assert len(res.means) == 2
        assert len(res.warnings) == 2
        assert ":3:" in res.warnings[0]
        assert ":4:" in res.warnings[1]
        assert res.n_total_rows == 4

    def test_non_psd_covariance_skipped(self, tmp_path):
        p = tmp_path / "pts.csv"
        p.write_text(
            "x,y,z,sxx,syy,szz,sxy,sxz,syz\n"
            "0,0,0,1,1,1,0,0,0\n"
            "0,0,0,1,1,1,5,0,0\n"
        )
        res = parse_points_csv(str(p))
        assert len(res.means) == 1
        assert len(res.warnings) == 1

    def test_unknown_header(self, tmp_path):
        p = tmp_path / "pts.csv"
        p.write_text("a,b,c\n1,2,3\n")
        with pytest.raises(ConfigError, match="unrecognized header"):
            parse_points_csv(str(p))

    def test_blank_lines_ignored(self, tmp_path):
        p = tmp_path / "pts.csv"
        p.write_text("x,y,z,sigma\n1,2,3,0.5\n\n ,\n4,5,6,1\n")
        res = parse_points_csv(str(p))
        assert len(res.means) == 2
        assert res.warnings == []


class TestParseLandmarks:
    def test_three_rows(self, tmp_path):
        p = tmp_path / "lm.csv"
        p.write_text("id,x,y,z\n0,0,0,0\n1,2,0,0\n2,0,2,0\n")
        lm = parse_landmarks_csv(str(p))
        np.testing.assert_allclose(lm, [[0, 0, 0], [2, 0, 0], [0, 2, 0]])

    def test_wrong_count(self, tmp_path):
        p = tmp_path / "lm.csv"
        p.write_text("id,x,y,z\n0,0,0,0\n1,2,0,0\n")
        with pytest.raises(ConfigError, match="exactly 3"):
            parse_landmarks_csv(str(p))

    def test_bad_header(self, tmp_path):
        p = tmp_path / "lm.csv"
        p.write_text("x,y,z\n0,0,0\n")
        with pytest.raises(ConfigError, match="id,x,y,z"):
            parse_landmarks_csv(str(p))


def write_plane_points(path, rng, n=200, sigma=0.05):
    """Points on z = 0.2 + 0.3x - 0.1y over the unit right triangle."""
    lines = ["x,y,z,sigma"]
    for _ in range(n):
        while True:
            x, y = rng.uniform(0, 1, 2)
            if x + y <= 1:
                break
        z = 0.2 + 0.3 * x - 0.1 * y + rng.normal(0, sigma)
        lines.append(f"{x},{y},{z},{sigma}")
    path.write_text("\n".join(lines) + "\n")


class TestBuildCommand:
    def test_build_recovers_plane(self, tmp_path, capsys):
        pts = tmp_path / "pts.csv"
        write_plane_points(pts, np.random.default_rng(0))
        out = tmp_path / "map"
        code = main([
            "build", "--points", str(pts), "--global-frame", "0,0,1,1",
            "--depth", "2", "--out", str(out),
        ])
        assert code == 0
        assert (tmp_path / "map.ply").exists()
        assert (tmp_path / "map.manifest.json").exists()
        doc = json.loads((tmp_path / "map.map.json").read_text())
        assert doc["grid"]["depth"] == 2
        assert sum(s["n_meas"] for s in doc["surfels"]) > 150
        # vertex means in the PLY near the generating plane
        ply = (tmp_path / "map.ply").read_text().splitlines()
        n_vert = int(next(l for l in ply if l.startswith("element vertex")).split()[-1])
        start = ply.index("end_header") + 1
        for line in ply[start:start + n_vert]:
            x, y, z, std = (float(v) for v in line.split())
            assert abs(z - (0.2 + 0.3 * x - 0.1 * y)) < 0.2
        assert "ms/measurement" in capsys.readouterr().out

    def test_build_with_landmarks(self, tmp_path):
        pts = tmp_path / "pts.csv"
        write_plane_points(pts, np.random.default_rng(1), n=50)
        lm = tmp_path / "lm.csv"
        lm.write_text("id,x,y,z\n0,0,0,0\n1,1,0,0\n2,0,1,0\n")
        code = main([
            "build", "--points", str(pts), "--landmarks", str(lm),
            "--depth", "1", "--out", str(tmp_path / "m"),
        ])
        assert code == 0

    def test_too_many_bad_rows_exit_4(self, tmp_path, capsys):
        pts = tmp_path / "pts.csv"
        rows = ["x,y,z,sigma"] + ["0.2,0.2,0.1,0.1"] * 5 + ["bad,row,here,0.1"] * 5
        pts.write_text("\n".join(rows) + "\n")
        code = main([
            "build", "--points", str(pts), "--global-frame", "0,0,1,1",
            "--depth", "0", "--out", str(tmp_path / "m"),
        ])
        assert code == 4
        assert "unparseable" in capsys.readouterr().err

    def test_missing_config_exit_2(self, tmp_path, capsys):
        pts = tmp_path / "pts.csv"
        write_plane_points(pts, np.random.default_rng(2), n=10)
        code = main([
            "build", "--points", str(pts), "--global-frame", "0,0,1,1",
            "--config", str(tmp_path / "nope.ini"), "--out", str(tmp_path / "m"),
        ])
        assert code == 2
        assert "config error" in capsys.readouterr().err


class TestSimulateCommand:
    def _small_cfg(self, tmp_path, extra=""):
        p = tmp_path / "cfg.ini"
        p.write_text(
            "[map]\ndepth = 2\n[scenario]\nsteps = 3\ndensity = 5\nn_eval = 200\n"
            "[convergence]\nkl_threshold = 0.3\n" + extra
        )
        return str(p)

    def test_reobserve_outputs_and_determinism(self, tmp_path):
        cfg = self._small_cfg(tmp_path)
        for name in ("a", "b"):
            code = main(["simulate", "--scenario", "reobserve",
                         "--config", cfg, "--out", str(tmp_path / name)])
            assert code == 0
        for ext in (".csv", ".json", ".ply", ".map.json"):
            assert (tmp_path / ("a" + ext)).read_bytes() == \
                (tmp_path / ("b" + ext)).read_bytes()
        header = (tmp_path / "a.csv").read_text().splitlines()[0]
        assert "step" in header

    def test_pushbroom_runs(self, tmp_path):
        cfg = self._small_cfg(tmp_path)
        code = main(["simulate", "--scenario", "pushbroom",
                     "--config", cfg, "--out", str(tmp_path / "p")])
        assert code == 0
        doc = json.loads((tmp_path / "p.map.json").read_text())
        assert doc["metrics"]["message_count"] > 0


class TestEmulationCases:
    def test_cases_deterministic_and_distinct(self):
        a = make_emulation_case("stereo")
        b = make_emulation_case("stereo")
        assert len(a) == 100
        for m1, m2 in zip(a, b):
            np.testing.assert_array_equal(m1.mean, m2.mean)
            np.testing.assert_array_equal(m1.cov, m2.cov)
        c = make_emulation_case("lidar")
        assert len(c) == 10
        # lidar noise is much tighter than stereo
        assert np.mean([np.trace(m.cov) for m in c]) < \
            np.mean([np.trace(m.cov) for m in a])

    def test_points_inside_submap(self):
        for name in ("stereo", "lidar"):
            for m in make_emulation_case(name):
                assert -0.5 < m.mean[0] and -0.5 < m.mean[1]
                assert m.mean[0] + m.mean[1] < 1.5
