import json

import numpy as np
import pytest

from muae.cli import main


def write_config(path, payload):
    path.write_text(json.dumps(payload))
    return str(path)


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """synth -> prepare -> cooc -> train -> eval, all through the CLI."""
    root = tmp_path_factory.mktemp("cli")
    synth_cfg = write_config(root / "synth.json", {"n_cases": 8, "seed": 21})
    assert main(["synth", "--config", synth_cfg, "--out", str(root / "cohort")]) == 0

    prepare_cfg = write_config(root / "prepare.json", {
        "cohort_dir": str(root / "cohort"), "lead_minutes": 5, "stride_s": 80, "seed": 3,
    })
    assert main(["prepare", "--config", prepare_cfg, "--out", str(root / "shards")]) == 0

    cooc_cfg = write_config(root / "cooc.json", {"shards_dir": str(root / "shards")})
    assert main(["cooc", "--config", cooc_cfg, "--out", str(root / "cooc")]) == 0

    train_cfg = write_config(root / "train.json", {
        "shards_dir": str(root / "shards"),
        "model": {"d_model": 16, "n_heads": 2, "n_layers": 1, "dropout": 0.0},
        "train": {"max_epochs": 1, "seed": 5},
        "lcr": {"scheme": "sqrt_inverse", "lam": 0.02},
    })
    assert main(["train", "--config", train_cfg, "--out", str(root / "run")]) == 0

    eval_cfg = write_config(root / "eval.json", {
        "checkpoint": str(root / "run" / "checkpoint.bin"),
        "shards_dir": str(root / "shards"),
    })
    assert main(["eval", "--config", eval_cfg, "--out", str(root / "eval")]) == 0
    return root


class TestPipeline:
    def test_outputs_and_manifests_exist(self, pipeline):
        assert (pipeline / "cohort" / "cohort.json").exists()
        assert (pipeline / "shards" / "train.muae").exists()
        assert (pipeline / "shards" / "index.json").exists()
        assert (pipeline / "cooc" / "co_matrix.json").exists()
        assert (pipeline / "run" / "checkpoint.bin").exists()
        assert (pipeline / "run" / "run_record.json").exists()
        assert (pipeline / "eval" / "eval_report.json").exists()
        for stage in ("cohort", "shards", "cooc", "run", "eval"):
            manifest = json.loads((pipeline / stage / "run_manifest.json").read_text())
            assert manifest["command"] in {"synth", "prepare", "cooc", "train", "eval"}
            assert manifest["config_hash"] and manifest["manifest_hash"]
            assert manifest["versions"]["muae"]

    def test_co_matrix_has_event_headers(self, pipeline):
        payload = json.loads((pipeline / "cooc" / "co_matrix.json").read_text())
        assert payload["events"][0] == "hypotension"
        m = np.asarray(payload["co_matrix"])
        assert m.shape == (6, 6)
        assert np.allclose(m, m.T)

    def test_eval_report_schema(self, pipeline):
        report = json.loads((pipeline / "eval" / "eval_report.json").read_text())
        assert {"micro_f1", "macro_auc", "hamming", "per_event"} <= set(report)

    def test_eval_rerun_is_byte_identical(self, pipeline, tmp_path):
        eval_cfg = write_config(tmp_path / "eval.json", {
            "checkpoint": str(pipeline / "run" / "checkpoint.bin"),
            "shards_dir": str(pipeline / "shards"),
        })
        assert main(["eval", "--config", eval_cfg, "--out", str(tmp_path / "e1")]) == 0
        assert main(["eval", "--config", eval_cfg, "--out", str(tmp_path / "e2")]) == 0
        a = (tmp_path / "e1" / "eval_report.json").read_bytes()
        b = (tmp_path / "e2" / "eval_report.json").read_bytes()
        assert a == b == (pipeline / "eval" / "eval_report.json").read_bytes()


class TestValidation:
    def test_unknown_top_level_key_exits_two(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "c.json", {"n_cases": 2, "seed": 0, "bogus": 1})
        assert main(["synth", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
        err = json.loads(capsys.readouterr().err)
        assert err["error"] == "config" and "bogus" in err["detail"]

    def test_unknown_nested_key_exits_two(self, tmp_path):
        cfg = write_config(tmp_path / "c.json", {
            "shards_dir": "x", "model": {"d_model": 8, "layers": 2},
        })
        assert main(["train", "--config", cfg, "--out", str(tmp_path / "o")]) == 2

    def test_invalid_value_exits_two(self, tmp_path):
        cfg = write_config(tmp_path / "c.json",
                           {"n_cases": 1, "seed": 0, "event_rates": {"hypotension": 0.9}})
        assert main(["synth", "--config", cfg, "--out", str(tmp_path / "o")]) == 2

    def test_runtime_failure_exits_one(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "c.json", {"shards_dir": str(tmp_path / "nothing")})
        assert main(["cooc", "--config", cfg, "--out", str(tmp_path / "o")]) == 1
        err = json.loads(capsys.readouterr().err)
        assert err["error"] == "runtime"

    def test_malformed_json_exits_two(self, tmp_path):
        bad = tmp_path / "c.json"
        bad.write_text("{not json")
        assert main(["synth", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2


class TestEnvironment:
    def test_thread_cap_env_var(self, tmp_path, monkeypatch):
        import torch

        monkeypatch.setenv("MUAE_THREADS", "1")
        cfg = write_config(tmp_path / "s.json", {"n_cases": 1, "seed": 0})
        assert main(["synth", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
        assert torch.get_num_threads() == 1


class TestOverridesAndIdempotence:
    def test_lead_override_changes_shards(self, pipeline, tmp_path):
        cfg = write_config(tmp_path / "p.json", {
            "cohort_dir": str(pipeline / "cohort"), "stride_s": 80, "seed": 3,
        })
        for lead, steps in ((5, 150), (10, 300), (15, 450)):
            out = tmp_path / f"lead{lead}"
            assert main(["prepare", "--config", str(cfg), "--out", str(out),
                         "--lead", str(lead)]) == 0
            index = json.loads((out / "index.json").read_text())
            assert index["lead_steps"] == steps

    def test_seed_override_reaches_generator(self, tmp_path):
        cfg = write_config(tmp_path / "s.json", {"n_cases": 2, "seed": 0})
        assert main(["synth", "--config", str(cfg), "--out", str(tmp_path / "a"),
                     "--seed", "77"]) == 0
        assert main(["synth", "--config", str(cfg), "--out", str(tmp_path / "b"),
                     "--seed", "77"]) == 0
        assert main(["synth", "--config", str(cfg), "--out", str(tmp_path / "c")]) == 0
        a = (tmp_path / "a" / "case00000.csv").read_bytes()
        b = (tmp_path / "b" / "case00000.csv").read_bytes()
        c = (tmp_path / "c" / "case00000.csv").read_bytes()
        assert a == b
        assert a != c

    def test_rerun_same_out_dir_is_idempotent(self, tmp_path):
        cfg = write_config(tmp_path / "s.json", {"n_cases": 2, "seed": 4})
        out = tmp_path / "o"
        assert main(["synth", "--config", str(cfg), "--out", str(out)]) == 0
        first = {p.name: p.read_bytes() for p in out.iterdir() if p.suffix == ".csv"}
        hash1 = json.loads((out / "run_manifest.json").read_text())["manifest_hash"]
        assert main(["synth", "--config", str(cfg), "--out", str(out)]) == 0
        second = {p.name: p.read_bytes() for p in out.iterdir() if p.suffix == ".csv"}
        hash2 = json.loads((out / "run_manifest.json").read_text())["manifest_hash"]
        assert first == second
        assert hash1 == hash2


class TestAblate:
    def test_lambda_sweep_through_cli(self, pipeline, tmp_path):
        cfg = write_config(tmp_path / "a.json", {
            "shards_dir": str(pipeline / "shards"),
            "axis": "lambda",
            "values": [0.0, 0.02],
            "model": {"d_model": 16, "n_heads": 2, "n_layers": 1, "dropout": 0.0},
            "train": {"max_epochs": 1, "seed": 0},
            "lcr": {},
        })
        out = tmp_path / "ablation"
        assert main(["ablate", "--config", str(cfg), "--out", str(out)]) == 0
        rows = json.loads((out / "ablation.json").read_text())
        assert [r["setting"] for r in rows] == ["0.0", "0.02"]
        assert (out / "ablation.csv").exists()


class TestGradplot:
    def test_emits_full_curve_family(self, tmp_path):
        cfg = write_config(tmp_path / "g.json", {"n_points": 21})
        out = tmp_path / "curves"
        assert main(["gradplot", "--config", str(cfg), "--out", str(out)]) == 0
        names = {p.name for p in out.iterdir()}
        for kind in ("bce", "focal", "asl"):
            for t in (0, 1):
                assert f"grad_{kind}_target{t}.csv" in names
        for scheme in ("inverse", "log_inverse", "sqrt_inverse", "cubic_inverse"):
            for t in (0, 1):
                assert f"grad_lcr_{scheme}_target{t}.csv" in names
        assert "grad_co_probe.csv" in names
        header, first = (out / "grad_bce_target1.csv").read_text().splitlines()[:2]
        assert header == "z,grad"
        assert len(first.split(",")) == 2

    def test_renders_images_when_backend_available(self, tmp_path):
        pytest.importorskip("matplotlib")
        cfg = write_config(tmp_path / "g.json", {"n_points": 11})
        out = tmp_path / "curves"
        assert main(["gradplot", "--config", str(cfg), "--out", str(out)]) == 0
        assert (out / "gradients_target0.png").exists()
        assert (out / "gradients_target1.png").exists()
