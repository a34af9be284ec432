import json
from pathlib import Path

import pytest

from pick_kie.cli import main
from pick_kie.config import ConfigError, ModelConfig, build_config, parse_config_file
from pick_kie.data import load_dir


def run(argv, capsys=None):
    code = main(argv)
    return code


def dir_bytes(path: Path) -> dict:
    return {p.name: p.read_bytes() for p in sorted(path.glob("*.json"))}


TINY_TRAIN_FLAGS = [
    "--d_model", "8", "--d_hidden", "8", "--blocks", "1", "--heads", "2",
    "--conv_channels", "4,4", "--epochs", "1", "--dropout", "0.0",
]


class TestConfigFile:
    def test_parse_and_reject_unknown(self, tmp_path):
        p = tmp_path / "c.cfg"
        p.write_text("d_model = 16\n# comment\nlr = 0.001\n")
        values = parse_config_file(p)
        assert values == {"d_model": 16, "lr": 0.001}
        p.write_text("warp_factor = 9\n")
        with pytest.raises(ConfigError, match="unknown config key"):
            parse_config_file(p)

    def test_flags_override_file(self, tmp_path):
        p = tmp_path / "c.cfg"
        p.write_text("d_model = 16\nheads = 2\n")
        cfg = build_config(p, {"d_model": "32", "heads": "4"})
        assert cfg.d_model == 32 and cfg.heads == 4

    def test_env_precision_below_file(self, tmp_path):
        p = tmp_path / "c.cfg"
        p.write_text("precision = f64\n")
        cfg = build_config(p, {}, env_precision="f32")
        assert cfg.precision == "f64"
        cfg = build_config(None, {}, env_precision="f32")
        assert cfg.precision == "f32"

    def test_invalid_values_rejected(self):
        with pytest.raises(ConfigError):
            ModelConfig(d_model=15, heads=4).validate()
        with pytest.raises(ConfigError):
            ModelConfig(lam=-1.0).validate()
        with pytest.raises(ConfigError):
            ModelConfig(layers=0).validate()


class TestGenSynth:
    def test_deterministic_rerun(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert run(["gen-synth", "--mode", "fixed", "--count", "5", "--seed", "7", "--out", str(a)]) == 0
        assert run(["gen-synth", "--mode", "fixed", "--count", "5", "--seed", "7", "--out", str(b)]) == 0
        assert dir_bytes(a) == dir_bytes(b)

    def test_probe_flag(self, tmp_path):
        out = tmp_path / "p"
        code = run([
            "gen-synth", "--mode", "variable", "--count", "2", "--seed", "1",
            "--entities", "DATE,TOTAL,SUBTOTAL", "--probe", "--out", str(out),
        ])
        assert code == 0
        assert len(list(out.glob("*.json"))) == 2

    def test_bad_schema_is_data_error(self, tmp_path):
        code = run(["gen-synth", "--mode", "fixed", "--count", "1", "--probe", "--out", str(tmp_path / "x")])
        assert code == 2


class TestTrainEvalPredict:
    @pytest.fixture
    def corpus(self, tmp_path):
        data = tmp_path / "data"
        assert run(["gen-synth", "--mode", "fixed", "--count", "4", "--seed", "3", "--out", str(data)]) == 0
        return data

    def test_train_writes_artifacts(self, corpus, tmp_path):
        out = tmp_path / "run"
        code = run(["train", "--data", str(corpus), "--out", str(out), *TINY_TRAIN_FLAGS])
        assert code == 0
        assert (out / "checkpoint.pkk").exists()
        assert (out / "metrics.jsonl").exists()
        assert (out / "vocab.json").exists()
        line = json.loads((out / "metrics.jsonl").read_text().splitlines()[0])
        assert set(line) == {"epoch", "step", "loss", "l_crf", "l_gl", "val_mEF"}

    def test_train_metrics_reproducible(self, corpus, tmp_path):
        out1, out2 = tmp_path / "r1", tmp_path / "r2"
        argv = ["train", "--data", str(corpus), "--seed", "5", *TINY_TRAIN_FLAGS]
        assert run(argv + ["--out", str(out1)]) == 0
        assert run(argv + ["--out", str(out2)]) == 0
        assert (out1 / "metrics.jsonl").read_bytes() == (out2 / "metrics.jsonl").read_bytes()

    def test_eval_gold_as_predictions_fixture(self, corpus, tmp_path, capsys):
        preds = tmp_path / "preds"
        preds.mkdir()
        for doc in load_dir(corpus):
            payload = {
                "format": "pick-kie/1",
                "document_id": doc.id,
                "spans": [
                    {"entity": s.entity, "text": s.text, "segment_index": s.segment_index}
                    for s in doc.gold_spans()
                ],
            }
            (preds / f"{doc.id}.json").write_text(json.dumps(payload))
        code = run(["eval", "--data", str(corpus), "--predictions", str(preds)])
        assert code == 0
        report = json.loads(capsys.readouterr().out)
        assert report["overall_micro"]["mEF"] == 1.0
        assert report["format"] == "pick-kie-metrics/1"

    def test_predict_and_eval_checkpoint(self, corpus, tmp_path, capsys):
        out = tmp_path / "run"
        assert run(["train", "--data", str(corpus), "--out", str(out), *TINY_TRAIN_FLAGS]) == 0
        doc_file = sorted(corpus.glob("*.json"))[0]
        pred_file = tmp_path / "pred.json"
        code = run([
            "predict", "--checkpoint", str(out / "checkpoint.pkk"),
            "--data", str(doc_file), "--out", str(pred_file),
        ])
        assert code == 0
        payload = json.loads(pred_file.read_text())
        assert payload["format"] == "pick-kie/1"
        assert isinstance(payload["spans"], list)
        capsys.readouterr()
        code = run(["eval", "--data", str(corpus), "--checkpoint", str(out / "checkpoint.pkk")])
        assert code == 0
        report = json.loads(capsys.readouterr().out)
        assert 0.0 <= report["overall_micro"]["mEF"] <= 1.0

    def test_usage_errors_exit_1(self, corpus, tmp_path):
        assert run(["train", "--data", str(corpus)]) == 1  # missing --out
        assert run(["no-such-command"]) == 1
        bad_cfg = tmp_path / "bad.cfg"
        bad_cfg.write_text("banana = 1\n")
        assert run(["train", "--data", str(corpus), "--out", str(tmp_path / "o"), "--config", str(bad_cfg)]) == 1

    def test_missing_data_exit_2(self, tmp_path):
        assert run(["train", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "o")]) == 2

    def test_layer_sweep(self, corpus, tmp_path, capsys):
        out = tmp_path / "sweep"
        code = run([
            "train", "--data", str(corpus), "--out", str(out),
            "--layers", "1,2", *TINY_TRAIN_FLAGS,
        ])
        assert code == 0
        results = json.loads((out / "sweep_results.json").read_text())
        assert set(results["layers"]) == {"1", "2"}
        for row in results["layers"].values():
            assert row["loss"] is not None
        assert (out / "checkpoint_L1.pkk").exists()
        assert (out / "metrics_L2.jsonl").exists()


class TestGradcheckCommand:
    def test_gradcheck_passes_and_reports(self, capsys):
        code = run(["gradcheck", "--samples", "3"])
        assert code == 0
        out = capsys.readouterr().out
        assert "worst:" in out
        assert "decoder.transitions" in out
