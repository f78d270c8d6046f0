import csv
import json
import os

import numpy as np
import pytest

from mnemo import cli
from mnemo.cli import EXIT_CONFIG, EXIT_IO, EXIT_OK, EXIT_STATE, ConfigError, main


TINY_RUN = {
    "seed": 3,
    "model": {
        "L": 2, "d": 16, "n_heads": 2, "vocab": 32, "W_gen": 16,
        "N": 12, "K": 3, "K0": 4, "M": 48, "lora_rank": 2,
    },
    "curriculum": {
        "n_docs": 10, "chunk_len": 12, "max_chunks": 5,
        "steps_per_stage": [5, 5, 5], "revisit_target": [3, 3, 5],
    },
    "eval": {"n_probes": 2, "distractor_counts": [0, 2], "n_distractors": 4},
}


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "run.json"
    cfg.write_text(json.dumps(TINY_RUN))
    out = root / "run"
    rc = main(["train", "--stage", "1", "--config", str(cfg), "--out", str(out)])
    assert rc == EXIT_OK
    return {"root": root, "config": str(cfg), "out": str(out),
            "ckpt": str(out / "stage1")}


class TestSeedResolution:
    def test_flag_beats_env_beats_config(self, monkeypatch):
        monkeypatch.setenv("MNEMO_SEED", "7")
        assert cli.resolve_seed(1, 9) == 9
        assert cli.resolve_seed(1, None) == 7
        monkeypatch.delenv("MNEMO_SEED")
        assert cli.resolve_seed(1, None) == 1

    def test_invalid_env_seed(self, monkeypatch):
        monkeypatch.setenv("MNEMO_SEED", "not-a-number")
        with pytest.raises(ConfigError, match="MNEMO_SEED"):
            cli.resolve_seed(1, None)


class TestConfigLoading:
    def test_unknown_field_names_dotted_path(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text(json.dumps({"model": {"n_layres": 4}}))
        with pytest.raises(ConfigError, match="model.n_layres"):
            cli.load_run_config(str(p))

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            cli.load_run_config(str(tmp_path / "nope.json"))

    def test_invalid_json(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text("{oops")
        with pytest.raises(ConfigError, match="invalid JSON"):
            cli.load_run_config(str(p))

    def test_defaults_when_no_config(self):
        cfg = cli.load_run_config(None)
        assert cfg.seed == 0
        assert cfg.model.d > 0

    def test_invalid_model_values_rejected(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text(json.dumps({"model": {"K": 99, "N": 12}}))
        with pytest.raises(ConfigError, match="model"):
            cli.load_run_config(str(p))


class TestExitCodes:
    def test_unknown_subcommand(self, capsys):
        assert main(["frobnicate"]) == EXIT_CONFIG

    def test_stage_order_violation(self, workdir):
        out2 = str(workdir["root"] / "fresh-out")
        rc = main(["train", "--stage", "3", "--config", workdir["config"], "--out", out2])
        assert rc == EXIT_STATE

    def test_bad_config_is_usage_error(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text(json.dumps({"model": {"bogus": 1}}))
        rc = main(["train", "--stage", "1", "--config", str(p), "--out", str(tmp_path / "o")])
        assert rc == EXIT_CONFIG

    def test_missing_checkpoint_is_io_error(self, workdir, tmp_path):
        rc = main([
            "eval-retention", "--checkpoint", str(tmp_path / "ghost"),
            "--config", workdir["config"], "--out", str(tmp_path / "r.json"),
        ])
        assert rc == EXIT_IO


class TestTrain:
    def test_report_has_provenance_stamps(self, workdir):
        with open(os.path.join(workdir["out"], "stage1_report.json")) as f:
            report = json.load(f)
        assert report["seed"] == 3
        assert len(report["config_digest"]) == 16
        assert report["build_id"]
        assert report["stage"] == 1
        assert np.isfinite(report["validation_loss"])

    def test_deterministic_outputs(self, workdir):
        out2 = str(workdir["root"] / "run2")
        rc = main(["train", "--stage", "1", "--config", workdir["config"], "--out", out2])
        assert rc == EXIT_OK
        for rel in [os.path.join("stage1", "weights.bin"), "stage1_loss.csv"]:
            with open(os.path.join(workdir["out"], rel), "rb") as a, open(
                os.path.join(out2, rel), "rb"
            ) as b:
                assert a.read() == b.read()

    def test_stage_two_uses_default_prev(self, workdir):
        rc = main(["train", "--stage", "2", "--config", workdir["config"], "--out", workdir["out"]])
        assert rc == EXIT_OK
        assert os.path.isdir(os.path.join(workdir["out"], "stage2"))


class TestEvalCommands:
    def test_eval_retention_report_and_csv(self, workdir, tmp_path):
        out = str(tmp_path / "retention.json")
        rc = main([
            "eval-retention", "--checkpoint", workdir["ckpt"],
            "--config", workdir["config"], "--out", out,
        ])
        assert rc == EXIT_OK
        with open(out) as f:
            report = json.load(f)
        assert report["ablation"] == "mplus"
        assert [p["injected_distractor_tokens"] for p in report["points"]] == [0, 24]
        assert report["tiering"]["mode"] == "resident"
        assert len(report["config_digest"]) == 16
        with open(str(tmp_path / "retention.csv")) as f:
            rows = list(csv.DictReader(f))
        assert len(rows) == len(report["points"])

    def test_eval_retention_deterministic(self, workdir, tmp_path):
        outs = []
        for name in ("a.json", "b.json"):
            out = str(tmp_path / name)
            assert main([
                "eval-retention", "--checkpoint", workdir["ckpt"],
                "--config", workdir["config"], "--out", out,
            ]) == EXIT_OK
            with open(out) as f:
                outs.append(json.load(f))
        assert outs[0] == outs[1]

    def test_max_distractors_caps_sweep(self, workdir, tmp_path):
        out = str(tmp_path / "short.json")
        rc = main([
            "eval-retention", "--checkpoint", workdir["ckpt"],
            "--config", workdir["config"], "--out", out, "--max-distractors", "1",
        ])
        assert rc == EXIT_OK
        with open(out) as f:
            report = json.load(f)
        assert [p["injected_distractor_tokens"] for p in report["points"]] == [0, 12]

    def test_eval_retrieval_quality_csv(self, workdir, tmp_path, capsys):
        out = str(tmp_path / "quality.csv")
        rc = main([
            "eval-retrieval-quality", "--checkpoint", workdir["ckpt"],
            "--config", workdir["config"], "--out", out,
        ])
        assert rc == EXIT_OK
        summary = json.loads(capsys.readouterr().out)
        assert {"trained_fraction", "random_baseline", "advantage"} <= set(summary)
        with open(out) as f:
            rows = list(csv.DictReader(f))
        assert rows
        assert {"probe", "layer", "in_ltm", "retrieved", "trained_fraction"} <= set(rows[0])

    def test_ablation_attn_label(self, workdir, tmp_path):
        out = str(tmp_path / "attn.json")
        rc = main([
            "eval-ablation-attn", "--checkpoint", workdir["ckpt"],
            "--config", workdir["config"], "--out", out,
        ])
        assert rc == EXIT_OK
        with open(out) as f:
            assert json.load(f)["ablation"] == "attn_retrieval"

    def test_env_seed_changes_probes(self, workdir, tmp_path, monkeypatch):
        def run(out):
            return main([
                "eval-retention", "--checkpoint", workdir["ckpt"],
                "--config", workdir["config"], "--out", out, "--ablation", "random_retrieval",
            ])

        a, b = str(tmp_path / "a.json"), str(tmp_path / "b.json")
        assert run(a) == EXIT_OK
        monkeypatch.setenv("MNEMO_SEED", "99")
        assert run(b) == EXIT_OK
        with open(a) as f:
            ra = json.load(f)
        with open(b) as f:
            rb = json.load(f)
        assert rb["seed"] == 99
        assert ra["seed"] != rb["seed"]


class TestSimulateRetention:
    def test_reference_operating_point(self, tmp_path, capsys):
        out = str(tmp_path / "sim.csv")
        rc = main([
            "simulate-retention", "--N", "12800", "--K", "256", "--chunks", "12",
            "--out", out,
        ])
        assert rc == EXIT_OK
        summary = json.loads(capsys.readouterr().out)
        assert summary["expected_total_surviving"] == pytest.approx(2755.6, abs=0.5)
        with open(out) as f:
            rows = list(csv.DictReader(f))
        assert len(rows) == 12
        assert "monte_carlo_surviving" not in rows[0]
        per_chunk_total = sum(float(r["expected_surviving"]) for r in rows)
        assert per_chunk_total == pytest.approx(summary["expected_total_surviving"], rel=1e-9)

    def test_monte_carlo_column(self, tmp_path, capsys):
        out = str(tmp_path / "sim.csv")
        rc = main([
            "simulate-retention", "--N", "64", "--K", "8", "--chunks", "4",
            "--trials", "200", "--seed", "1", "--out", out,
        ])
        assert rc == EXIT_OK
        with open(out) as f:
            rows = list(csv.DictReader(f))
        assert len(rows) == 4
        for row in rows:
            assert abs(float(row["monte_carlo_surviving"]) - float(row["expected_surviving"])) < 2.0

    def test_zero_chunks_empty_table(self, tmp_path, capsys):
        out = str(tmp_path / "sim.csv")
        rc = main(["simulate-retention", "--N", "64", "--K", "8", "--chunks", "0", "--out", out])
        assert rc == EXIT_OK
        summary = json.loads(capsys.readouterr().out)
        assert summary["expected_total_surviving"] == 0.0
        with open(out) as f:
            assert list(csv.DictReader(f)) == []


class TestReindex:
    def test_round_trip(self, workdir, tmp_path, capsys):
        from mnemo.cli import load_model
        from mnemo.memory import MemoryState, inject_chunk
        from mnemo.model import MODE_UPDATE
        from mnemo.rng import Rng

        model, base_cfg, stage_cfg, _ = load_model(workdir["ckpt"])
        mem = MemoryState(stage_cfg, Rng(1))
        model.set_adapter_mode(MODE_UPDATE)
        for i in range(3):
            inject_chunk(
                Rng(2 + i).integers(0, base_cfg.vocab, size=6), model, mem, Rng(9), f"doc:{i}"
            )
        src = str(tmp_path / "mem")
        dst = str(tmp_path / "mem2")
        mem.save(src)
        rc = main(["reindex", "--memory", src, "--checkpoint", workdir["ckpt"], "--out", dst])
        assert rc == EXIT_OK
        back = MemoryState.load(dst)
        # same checkpoint computed the original keys, so reindexing is a no-op
        for l in range(stage_cfg.L):
            assert np.allclose(back.ltm_key_matrix(l), mem.ltm_key_matrix(l), atol=1e-6)
