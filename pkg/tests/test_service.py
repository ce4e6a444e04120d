import json
import os

import pytest
from click.testing import CliRunner
from fastapi.testclient import TestClient

from latticeblow.cli import main
from latticeblow.harness import SCHEMA_VERSION
from latticeblow.service.app import create_app


@pytest.fixture(scope="module")
def client():
    return TestClient(create_app())


class TestService:
    def test_health(self, client):
        blob = client.get("/health").json()
        assert blob["status"] == "ok"
        assert blob["schema_version"] == SCHEMA_VERSION

    def test_registry(self, client):
        blob = client.get("/drifts").json()
        assert "quadratic" in blob["drifts"]
        assert "srw" in blob["walks"]

    def test_run_moments(self, client):
        r = client.post(
            "/run/moments", json={"reps": 256, "chunk": 128, "seed": 3}
        )
        assert r.status_code == 200
        blob = r.json()
        assert blob["schema_version"] == SCHEMA_VERSION
        assert blob["experiment"] == "moments"
        assert blob["config"]["reps"] == 256
        assert blob["config"]["k"] == 2  # default filled in
        assert blob["estimates"]["moment"]["reps"] == 256
        assert blob["files"] is None

    def test_body_may_name_matching_experiment(self, client):
        r = client.post(
            "/run/moments",
            json={"experiment": "moments", "reps": 128, "chunk": 128},
        )
        assert r.status_code == 200

    def test_experiment_mismatch_rejected(self, client):
        r = client.post("/run/moments", json={"experiment": "sde1d"})
        assert r.status_code == 422
        assert "disagrees with the path" in r.json()["detail"]

    def test_unknown_field_rejected(self, client):
        r = client.post("/run/moments", json={"reps": 16, "bogus": 1})
        assert r.status_code == 422
        assert any(
            e["type"] == "extra_forbidden" for e in r.json()["detail"]
        )

    def test_unknown_experiment_404(self, client):
        assert client.post("/run/warp", json={}).status_code == 404

    def test_invalid_value_rejected(self, client):
        r = client.post("/run/moments", json={"reps": 0})
        assert r.status_code == 422

    def test_runtime_value_error_rejected(self, client):
        r = client.post(
            "/run/lattice",
            json={
                "reps": 4, "window": 6, "probes": [0, 9],
                "T": 0.125, "dt": 1.0 / 256.0,
            },
        )
        assert r.status_code == 422
        assert "outside the window" in r.json()["detail"]

    def test_exhausted_pipeline_is_409(self, client):
        r = client.post("/run/pipeline", json={"reps": 10, "window": 8})
        assert r.status_code == 409
        assert "no site reached the start level" in r.json()["detail"]

    def test_out_dir_writes_files(self, client, tmp_path):
        r = client.post(
            "/run/moments",
            json={
                "reps": 128, "chunk": 128,
                "out_dir": str(tmp_path / "run"),
            },
        )
        assert r.status_code == 200
        files = r.json()["files"]
        assert set(files) == {"replicates", "summary", "long"}
        for path in files.values():
            assert os.path.exists(path)

    def test_workers_query_changes_nothing(self, client):
        body = {"reps": 512, "chunk": 128, "seed": 9}
        a = client.post("/run/moments", json=body).json()
        b = client.post("/run/moments", json=body, params={"workers": 3}).json()
        assert a == b

    def test_golden_endpoints(self, client):
        names = client.get("/golden").json()["goldens"]
        assert "moments" in names
        r = client.post("/golden/check", json={"name": "moments"})
        assert r.status_code == 200
        assert r.json()["ok"] is True
        assert client.post(
            "/golden/check", json={"name": "warp"}
        ).status_code == 404

    def test_golden_check_body_is_strict(self, client):
        r = client.post(
            "/golden/check", json={"name": "moments", "bogus": 1}
        )
        assert r.status_code == 422


class TestCli:
    def setup_method(self):
        self.runner = CliRunner()

    def _ok(self, args):
        res = self.runner.invoke(main, args, catch_exceptions=False)
        assert res.exit_code == 0, res.output
        return res.output

    def test_moments_run(self):
        out = self._ok(["moments", "--reps", "128", "--chunk", "128"])
        assert "moment = " in out
        assert "reps=128" in out

    def test_json_output(self):
        out = self._ok(
            ["moments", "--reps", "128", "--chunk", "128", "--seed", "5",
             "--json"]
        )
        blob = json.loads(out)
        assert blob["config"]["seed"] == 5
        assert blob["experiment"] == "moments"

    def test_config_file_and_override(self, tmp_path):
        p = tmp_path / "m.toml"
        p.write_text(
            'experiment = "moments"\nseed = 11\nreps = 128\nk = 3\n'
            "chunk = 128\n"
        )
        base = json.loads(
            self._ok(["moments", "--config", str(p), "--json"])
        )
        assert base["config"]["k"] == 3
        over = json.loads(
            self._ok(["moments", "--config", str(p), "--k", "2", "--json"])
        )
        assert over["config"]["k"] == 2
        assert over["config"]["seed"] == 11

    def test_out_writes_files(self, tmp_path):
        d = tmp_path / "run"
        out = self._ok(
            ["sde1d", "--reps", "32", "--horizon", "0.01", "--out", str(d)]
        )
        assert "wrote replicates" in out
        assert (d / "replicates.csv").exists()
        assert (d / "summary.json").exists()
        assert (d / "long.csv").exists()

    def test_golden_check_named(self):
        out = self._ok(["golden", "check", "moments"])
        assert "moments: ok" in out

    def test_golden_check_unknown_fails(self):
        res = self.runner.invoke(main, ["golden", "check", "warp"])
        assert res.exit_code != 0
        assert "404" in res.output

    def test_exhausted_pipeline_reported(self):
        res = self.runner.invoke(
            main, ["pipeline", "--reps", "10", "--window", "8"]
        )
        assert res.exit_code != 0
        assert "409" in res.output
        assert "no site reached the start level" in res.output

    def test_skip_domination(self):
        out = self._ok(
            ["splitting", "--n", "8", "--T", "0.125",
             "--dt", "0.00390625", "--reps", "8",
             "--profile", "spike:4@0", "--skip-domination"]
        )
        assert "sq_gap[n=8,probe=0]" in out
        assert "domination" not in out

    def test_repeatable_flags_build_ladders(self):
        out = json.loads(
            self._ok(
                ["lattice", "--J", "1", "--J", "2", "--reps", "8",
                 "--T", "0.125", "--dt", "0.00390625", "--window", "6",
                 "--probe", "0", "--probe", "1", "--json"]
            )
        )
        assert out["config"]["J_ladder"] == [1.0, 2.0]
        assert out["config"]["probes"] == [0, 1]
        assert "mean[J=1,probe=0]" in out["estimates"]
        assert "mean[J=2,probe=1]" in out["estimates"]
