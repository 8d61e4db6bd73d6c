import csv
import json
import logging

import pytest

from comp_pruner.config import LogFormat
from comp_pruner.main import main
from comp_pruner.services.solvers import DirectSolver, IterativeSolver
from comp_pruner.utils import ConvergenceError, NotPositiveDefiniteError, get_logger, setup_logging
from comp_pruner.workbench import (
    build_model,
    byte_tokenize,
    checkpoint_digest,
    load_checkpoint,
    perplexity,
    read_corpus,
    save_checkpoint,
)
from comp_pruner.workbench.checkpoint import MANIFEST_NAME
from conftest import CORPUS_PATH, zero_layer_update

CORPUS = str(CORPUS_PATH)
SMALL = ["--samples", "2", "--seq-len", "16", "--eval-samples", "2"]


def _rows(path):
    with open(path, newline="", encoding="utf-8") as handle:
        return list(csv.DictReader(handle))


def _header(path):
    with open(path, encoding="utf-8") as handle:
        return handle.readline().strip()


@pytest.fixture
def base(tmp_path, tiny_model):
    return str(save_checkpoint(tiny_model, tmp_path / "base"))


def _prune(base, out_dir, *extra):
    return main([
        "prune", "--model", base, "--corpus", CORPUS, "--ratio", "0.3", "--layers", "1",
        *SMALL, "--out", str(out_dir / "pruned"), "--report", str(out_dir / "report.json"), *extra,
    ])


class TestPrune:
    def test_writes_report_and_checkpoint(self, tmp_path, base, capsys):
        assert _prune(base, tmp_path) == 0
        report = json.loads((tmp_path / "report.json").read_text())
        assert report["status"] == "ok"
        assert report["target_ratio"] == pytest.approx(0.3)
        assert report["achieved_ratio"] >= 0.3
        assert report["manifest"]["command"] == "prune"
        assert len(load_checkpoint(tmp_path / "pruned").layers) == 5
        assert (tmp_path / "report.json.timings.json").exists()
        assert "strategy=comp" in capsys.readouterr().out

    def test_dense_csv_header(self, tmp_path, base):
        _prune(base, tmp_path)
        assert _header(tmp_path / "report.json.denses.csv") == (
            "schema_version,layer,dense,in_features,out_features,pruned,pruned_params,cap_hit,"
            "variance_threshold,variance,reconstruction_rms,kappa,gradient_fallback,solver_fallback,"
            "solver_iterations"
        )

    def test_byte_identical_reruns(self, tmp_path, base):
        first, second = tmp_path / "a", tmp_path / "b"
        assert _prune(base, first) == 0
        assert _prune(base, second) == 0
        for name in ("report.json", "report.json.denses.csv"):
            assert (first / name).read_bytes() == (second / name).read_bytes(), name
        assert checkpoint_digest(first / "pruned") == checkpoint_digest(second / "pruned")

    def test_missing_model(self, tmp_path):
        code = main([
            "prune", "--model", str(tmp_path / "absent"), "--corpus", CORPUS,
            "--out", str(tmp_path / "o"), "--report", str(tmp_path / "r.json"),
        ])
        assert code == 2

    def test_missing_corpus(self, tmp_path, base, capsys):
        code = main([
            "prune", "--model", base, "--corpus", str(tmp_path / "nowhere.txt"),
            "--out", str(tmp_path / "o"), "--report", str(tmp_path / "r.json"),
        ])
        assert code == 2
        assert "nowhere.txt" in capsys.readouterr().err

    def test_corrupt_checkpoint(self, tmp_path, base):
        (tmp_path / "base" / MANIFEST_NAME).write_text("{broken")
        code = main([
            "prune", "--model", base, "--corpus", CORPUS,
            "--out", str(tmp_path / "o"), "--report", str(tmp_path / "r.json"),
        ])
        assert code == 4

    def test_too_many_layers_writes_partial_report(self, tmp_path, base):
        assert _prune(base, tmp_path, "--layers", "4") == 5
        report = json.loads((tmp_path / "report.json").read_text())
        assert report["status"] == "partial"
        assert not (tmp_path / "pruned").exists()

    def test_layers_exceed_ratio(self, tmp_path, base):
        assert _prune(base, tmp_path, "--ratio", "0.1") == 5

    def test_solver_failure(self, tmp_path, base, monkeypatch):
        def failing_direct(self, system):
            raise NotPositiveDefiniteError("forced", pivot_index=0, pivot=-1.0)

        def failing_iterative(self, system):
            raise ConvergenceError("forced", iterations=1, residual=1.0)

        monkeypatch.setattr(DirectSolver, "solve", failing_direct)
        monkeypatch.setattr(IterativeSolver, "solve", failing_iterative)
        assert _prune(base, tmp_path) == 6
        assert json.loads((tmp_path / "report.json").read_text())["status"] == "partial"

    def test_metrics_textfile(self, tmp_path, base):
        metrics_path = tmp_path / "metrics.prom"
        code = main([
            "--metrics-out", str(metrics_path),
            "prune", "--model", base, "--corpus", CORPUS, "--ratio", "0.3", "--layers", "1", *SMALL,
            "--out", str(tmp_path / "pruned"), "--report", str(tmp_path / "report.json"),
        ])
        assert code == 0
        text = metrics_path.read_text()
        assert "comp_layers_removed_total" in text
        assert "comp_phase_duration_seconds" in text


class TestConfigFile:
    def _write(self, tmp_path, values):
        path = tmp_path / "prune.json"
        path.write_text(json.dumps(values))
        return str(path)

    def _run(self, tmp_path, base, config, *flags):
        return main([
            "--config-file", config, "prune", "--model", base, "--corpus", CORPUS,
            "--out", str(tmp_path / "pruned"), "--report", str(tmp_path / "report.json"), *flags,
        ])

    def test_values_become_defaults(self, tmp_path, base):
        config = self._write(tmp_path, {
            "ratio": 0.3, "layers": 1, "samples": 2, "seq_len": 16, "eval_samples": 2, "unknown_key": 1,
        })
        assert self._run(tmp_path, base, config) == 0
        report = json.loads((tmp_path / "report.json").read_text())
        assert report["target_ratio"] == pytest.approx(0.3)
        assert report["config"]["calibration"]["seq_len"] == 16

    def test_flags_override_file(self, tmp_path, base):
        config = self._write(tmp_path, {"ratio": 0.3, "layers": 1, "samples": 2, "seq_len": 16, "eval_samples": 2})
        assert self._run(tmp_path, base, config, "--ratio", "0.34") == 0
        assert json.loads((tmp_path / "report.json").read_text())["target_ratio"] == pytest.approx(0.34)

    def test_missing_config_file(self, tmp_path, base):
        assert self._run(tmp_path, base, str(tmp_path / "absent.json")) == 2

    def test_invalid_json(self, tmp_path, base):
        path = tmp_path / "bad.json"
        path.write_text("[1, 2")
        assert self._run(tmp_path, base, str(path)) == 5


class TestEval:
    def test_self_baseline(self, base, capsys):
        code = main(["eval", "--model", base, "--baseline", base, "--corpus", CORPUS,
                     "--samples", "2", "--seq-len", "16"])
        assert code == 0
        result = json.loads(capsys.readouterr().out)
        assert result["kl"] == 0.0
        assert result["logit_mse"] == 0.0
        tokens = byte_tokenize(read_corpus(CORPUS), 16, 2, 1)
        assert result["perplexity"] == pytest.approx(perplexity(load_checkpoint(base), tokens), rel=1e-12)

    def test_untrained_model_near_uniform(self, tmp_path, tiny_config, capsys):
        path = save_checkpoint(build_model(tiny_config, seed=0), tmp_path / "fresh")
        assert main(["eval", "--model", str(path), "--text", "the quick brown fox jumps over it"]) == 0
        result = json.loads(capsys.readouterr().out)
        assert result["perplexity"] == pytest.approx(256.0, rel=0.05)
        assert result["kl"] is None

    def test_output_file_has_manifest(self, tmp_path, base):
        out = tmp_path / "eval.json"
        main(["eval", "--model", base, "--corpus", CORPUS, "--samples", "2", "--seq-len", "16", "--out", str(out)])
        data = json.loads(out.read_text())
        assert data["manifest"]["command"] == "eval"
        assert set(data["manifest"]["input_digests"]) == {"corpus", "model"}


class TestTrain:
    @pytest.fixture
    def model_config(self, tmp_path):
        path = tmp_path / "model.json"
        path.write_text(json.dumps({"n_layers": 4, "d_model": 8, "n_heads": 2, "d_ff": 12, "max_seq": 16}))
        return str(path)

    def _train(self, model_config, out):
        return main(["train", "--corpus", CORPUS, "--config", model_config, "--steps", "40",
                     "--batch-size", "4", "--out", str(out)])

    def test_writes_checkpoint_and_curve(self, tmp_path, model_config, capsys):
        assert self._train(model_config, tmp_path / "toy") == 0
        assert len(load_checkpoint(tmp_path / "toy").layers) == 4
        assert _header(tmp_path / "toy.curve.csv") == "schema_version,step,train_loss,heldout_loss"
        assert [row["step"] for row in _rows(tmp_path / "toy.curve.csv")] == ["40"]
        report = json.loads((tmp_path / "toy.train.json").read_text())
        assert report["manifest"]["command"] == "train"
        assert "bits_per_byte=" in capsys.readouterr().out

    def test_same_seed_same_digest(self, tmp_path, model_config):
        self._train(model_config, tmp_path / "a")
        self._train(model_config, tmp_path / "b")
        assert checkpoint_digest(tmp_path / "a") == checkpoint_digest(tmp_path / "b")

    def test_invalid_model_config(self, tmp_path):
        path = tmp_path / "model.json"
        path.write_text(json.dumps({"n_layers": 4, "d_model": 8, "n_heads": 3}))
        assert main(["train", "--corpus", CORPUS, "--config", str(path), "--out", str(tmp_path / "m")]) == 4


class TestScoreLayers:
    def _score(self, model, out, *extra):
        return main(["score-layers", "--model", model, "--corpus", CORPUS,
                     "--samples", "2", "--seq-len", "16", "--out", str(out), *extra])

    def test_single_pass(self, tmp_path, base):
        out = tmp_path / "scores.csv"
        assert self._score(base, out) == 0
        assert _header(out) == "schema_version,iteration,layer,redundancy,importance,skipped_tokens,removed"
        rows = _rows(out)
        assert [int(r["layer"]) for r in rows] == list(range(6))
        assert all(r["iteration"] == "0" and r["removed"] == "False" for r in rows)

    def test_iterative_rows(self, tmp_path, base):
        out = tmp_path / "scores.csv"
        assert self._score(base, out, "--iterative", "2") == 0
        rows = _rows(out)
        assert [r["iteration"] for r in rows] == ["1"] * 3 + ["2"] * 2
        for iteration in ("1", "2"):
            assert sum(r["removed"] == "True" for r in rows if r["iteration"] == iteration) == 1

    def test_planted_pass_through_layer(self, tmp_path, tiny_model):
        model = str(save_checkpoint(zero_layer_update(tiny_model, 3), tmp_path / "planted"))
        out = tmp_path / "scores.csv"
        assert self._score(model, out) == 0
        layer3 = next(r for r in _rows(out) if r["layer"] == "3")
        assert float(layer3["redundancy"]) == pytest.approx(1.0, abs=1e-9)
        assert float(layer3["importance"]) == pytest.approx(0.0, abs=1e-9)


class TestCompare:
    def _compare(self, tmp_path, base, *extra):
        out = tmp_path / "grid.csv"
        code = main(["compare", "--model", base, "--corpus", CORPUS, "--ratios", "0.3", "--strategies", "comp",
                     "--seeds", "1", *SMALL, "--out", str(out), *extra])
        return code, out

    def test_grid_shape(self, tmp_path, base, capsys):
        code, out = self._compare(tmp_path, base, "--report", str(tmp_path / "grid.json"))
        assert code == 0
        assert _header(out) == (
            "schema_version,row,strategy,ratio,seed,perplexity,kl,logit_mse,"
            "achieved_ratio,shortfall,exit_code,error"
        )
        rows = _rows(out)
        assert [r["row"] for r in rows] == ["data", "summary"]
        assert rows[1]["seed"] == "mean"
        assert float(rows[0]["perplexity"]) == pytest.approx(float(rows[1]["perplexity"]))
        cells = json.loads((tmp_path / "grid.json").read_text())["cells"]
        assert len(cells) == 1 and cells[0]["report"]["status"] == "ok"
        assert "cells=1 failed=0" in capsys.readouterr().out

    def test_failed_cell_becomes_row(self, tmp_path, base):
        code, out = self._compare(tmp_path, base, "--layers", "4")
        assert code == 0
        data, summary = _rows(out)
        assert data["exit_code"] == "5"
        assert data["error"]
        assert summary["error"] == "no successful cell"


class TestAblate:
    def test_layer_order_pair(self, tmp_path, base, capsys):
        out = tmp_path / "ablate.csv"
        code = main(["ablate", "--which", "iterative-order", "--model", base, "--corpus", CORPUS,
                     "--seeds", "1", "--layers", "1", *SMALL, "--out", str(out)])
        assert code == 0
        assert _header(out) == "schema_version,kind,seed,metric,a_name,a,b_name,b,identical_orders,exit_code,error"
        rows = _rows(out)
        paired = [r for r in rows if r["seed"] != "mean"]
        assert [r["metric"] for r in paired] == ["perplexity", "kl", "logit_mse", "achieved_ratio"]
        assert all(r["identical_orders"] == "True" for r in paired)
        assert all(float(r["a"]) == pytest.approx(float(r["b"])) for r in paired)
        data = json.loads((tmp_path / "ablate.csv.json").read_text())
        assert data["kind"] == "iterative-order"
        result = data["results"][0]
        assert result["manifest"]["command"] == "ablate"
        assert set(result["reports"]) == {"iterative", "one-shot"}
        assert all(r["manifest"] is not None for r in result["reports"].values())
        assert "succeeded=1" in capsys.readouterr().out


class TestLogging:
    @pytest.fixture
    def json_logs(self, capsys):
        setup_logging("INFO", LogFormat.JSON)
        yield capsys
        logging.getLogger().handlers.clear()

    def test_json_lines_on_stderr(self, json_logs):
        log = get_logger("comp_pruner.cli_test")
        log.debug("Dense scored", layer=1)
        log.info("Layer removed", layer=3)
        try:
            raise ValueError("bad shape")
        except ValueError:
            log.error("Command failed", exc_info=True)

        captured = json_logs.readouterr()
        assert captured.out == ""
        records = [json.loads(line) for line in captured.err.splitlines()]
        assert [r["event"] for r in records] == ["Layer removed", "Command failed"]
        assert set(records[0]) == {"event", "layer", "level", "logger", "timestamp"}
        assert records[0]["level"] == "info"
        assert records[0]["logger"] == "comp_pruner.cli_test"
        assert "ValueError: bad shape" in records[1]["exception"]
