"""End-to-end CLI runs, exit codes, and artifact byte-stability."""

from __future__ import annotations

import csv
import json
import os

import pytest

import dubkit as dk
from dubkit.cli import run


def read_manifest(artifact):
    with open(str(artifact) + ".manifest.json") as fh:
        return json.load(fh)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Full pipeline: gen-corpus, adapt, train, translate, eval."""
    root = tmp_path_factory.mktemp("cli")
    out = str(root)
    paths = {
        "corpus": os.path.join(out, "corpus.jsonl"),
        "adapted": os.path.join(out, "corpus.adapted.jsonl"),
        "model": os.path.join(out, "model.json"),
        "outputs": os.path.join(out, "outputs.jsonl"),
        "report_json": os.path.join(out, "report.json"),
        "report_csv": os.path.join(out, "report.csv"),
        "hist_csv": os.path.join(out, "histogram.csv"),
        "out": out,
    }
    assert run(["--out", out, "gen-corpus", "--n-pairs", "80"]) == 0
    assert run(["--out", out, "adapt", "--in", paths["corpus"]]) == 0
    assert run(["--out", out, "train", "--corpus", paths["adapted"], "--steps", "2000"]) == 0
    assert run([
        "--out", out, "translate", "--corpus", paths["corpus"],
        "--model", paths["model"], "--nfe", "8",
    ]) == 0
    assert run([
        "--out", out, "eval", "--corpus", paths["corpus"], "--outputs", paths["outputs"],
    ]) == 0
    return paths


class TestPipeline:
    def test_artifacts_exist_with_sidecars(self, workspace):
        for key in ("corpus", "adapted", "model", "outputs", "report_json", "report_csv", "hist_csv"):
            assert os.path.exists(workspace[key]), key
            assert os.path.exists(workspace[key] + ".manifest.json"), key

    def test_outputs_align_with_corpus(self, workspace):
        pairs = dk.read_corpus_jsonl(workspace["corpus"])
        records = dk.read_unit_jsonl(workspace["outputs"])
        assert [r.id for r in records] == [p.id for p in pairs]
        assert all(len(r.seq) == len(p.src) for r, p in zip(records, pairs))

    def test_adapted_targets_match_source_speed_better(self, workspace):
        pairs = dk.read_corpus_jsonl(workspace["adapted"])
        assert all(p.tgt_adapted is not None for p in pairs)
        assert pairs == dk.adapt_corpus(dk.read_corpus_jsonl(workspace["corpus"]))

    def test_report_structure(self, workspace):
        obj = json.loads(open(workspace["report_json"]).read())
        assert set(obj["duration_compliance"]) == {"0.2", "0.4"}
        assert obj["n"] == 80
        assert set(obj["manifest"]) == {"config_hash", "seed", "tool_version"}
        hist = obj["duration_ratio_histogram"]
        assert sum(hist["counts"]) + hist["underflow"] + hist["overflow"] == 80

    def test_report_csv_manifest_comment(self, workspace):
        lines = open(workspace["report_csv"]).read().splitlines()
        assert lines[0].startswith("# config_hash=")
        rows = list(csv.reader(lines[1:]))
        assert rows[0] == ["metric", "key", "value"]

    def test_manifest_embeds_match_sidecar(self, workspace):
        side = read_manifest(workspace["report_json"])
        obj = json.loads(open(workspace["report_json"]).read())
        assert obj["manifest"] == {k: side[k] for k in ("config_hash", "seed", "tool_version")}
        assert "created_at" in side

    def test_model_loads_and_predicts(self, workspace):
        model = dk.CountDenoiser.load(workspace["model"])
        assert model.vocab_size == 6

    def test_eval_output_lines(self, workspace, capsys):
        assert run([
            "--out", workspace["out"], "eval",
            "--corpus", workspace["corpus"], "--outputs", workspace["outputs"],
        ]) == 0
        text = capsys.readouterr().out
        assert "DC@0.2" in text and "SC@0.4" in text and "speed correlation" in text


class TestDeterminism:
    def test_gen_corpus_rerun_is_byte_identical(self, workspace, tmp_path):
        out = str(tmp_path)
        assert run(["--out", out, "gen-corpus", "--n-pairs", "80"]) == 0
        a = open(workspace["corpus"], "rb").read()
        b = open(os.path.join(out, "corpus.jsonl"), "rb").read()
        assert a == b

    def test_manifests_differ_only_in_timestamp(self, workspace, tmp_path):
        out = str(tmp_path)
        assert run(["--out", out, "gen-corpus", "--n-pairs", "80"]) == 0
        a = read_manifest(workspace["corpus"])
        b = read_manifest(os.path.join(out, "corpus.jsonl"))
        a.pop("created_at")
        b.pop("created_at")
        assert a == b

    def test_translate_workers_do_not_change_bytes(self, workspace, tmp_path):
        outs = []
        for workers in ("1", "2"):
            path = str(tmp_path / f"outputs.w{workers}.jsonl")
            assert run([
                "--workers", workers, "translate", "--corpus", workspace["corpus"],
                "--model", workspace["model"], "--nfe", "4", "--out-file", path,
            ]) == 0
            outs.append(open(path, "rb").read())
        assert outs[0] == outs[1]

    def test_seed_flag_changes_corpus(self, tmp_path):
        a = str(tmp_path / "a.jsonl")
        b = str(tmp_path / "b.jsonl")
        assert run(["--seed", "1", "gen-corpus", "--n-pairs", "5", "--out-file", a]) == 0
        assert run(["--seed", "2", "gen-corpus", "--n-pairs", "5", "--out-file", b]) == 0
        assert open(a, "rb").read() != open(b, "rb").read()


class TestAdaptSwitch:
    def test_no_adapt_passes_targets_through(self, workspace, tmp_path):
        path = str(tmp_path / "plain.jsonl")
        assert run([
            "adapt", "--in", workspace["corpus"], "--no-adapt", "--out-file", path,
        ]) == 0
        for pair in dk.read_corpus_jsonl(path):
            assert pair.tgt_adapted == pair.tgt

    def test_config_switch_respected(self, workspace, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text('{"adapt": {"enabled": false}}')
        path = str(tmp_path / "plain.jsonl")
        assert run([
            "--config", str(cfg), "adapt", "--in", workspace["corpus"], "--out-file", path,
        ]) == 0
        assert all(p.tgt_adapted == p.tgt for p in dk.read_corpus_jsonl(path))


class TestSweeps:
    def test_nfe_sweep_csv(self, workspace, tmp_path):
        path = str(tmp_path / "sweep.csv")
        assert run([
            "nfe-sweep", "--corpus", workspace["corpus"], "--model", workspace["model"],
            "--grid", "1,2", "--limit", "10", "--csv-out", path,
        ]) == 0
        lines = open(path).read().splitlines()
        assert lines[0].startswith("# ")
        rows = list(csv.reader(lines[1:]))
        assert rows[0][0] == "nfe"
        assert [r[0] for r in rows[1:]] == ["1", "2"]

    def test_duration_sweep_csv(self, workspace, tmp_path):
        path = str(tmp_path / "dur.csv")
        assert run([
            "duration-sweep", "--corpus", workspace["corpus"], "--model", workspace["model"],
            "--ratios", "0.9,1.0", "--limit", "5", "--csv-out", path,
        ]) == 0
        lines = open(path).read().splitlines()
        rows = list(csv.reader(lines[1:]))
        assert rows[0] == ["ratio", "mean_len", "mean_dedup_len", "mean_rel_dedup_len"]
        assert len(rows) == 3

    def test_bad_grids_rejected(self, workspace):
        base = ["nfe-sweep", "--corpus", workspace["corpus"], "--model", workspace["model"]]
        assert run(base + ["--grid", "a,b"]) == 2
        assert run(base + ["--grid", "0,4"]) == 2
        assert run([
            "duration-sweep", "--corpus", workspace["corpus"],
            "--model", workspace["model"], "--ratios", "-1.0",
        ]) == 2


class TestFlowTest:
    @pytest.fixture()
    def flow_cfg(self, tmp_path):
        cfg = tmp_path / "flow.json"
        cfg.write_text(json.dumps({
            "flow": {"n_samples": 50000, "transport_samples": 4000, "euler_steps": 60}
        }))
        return str(cfg)

    def test_passing_checks(self, flow_cfg, tmp_path):
        path = str(tmp_path / "flow_report.json")
        assert run(["--config", flow_cfg, "flow-test", "--json-out", path]) == 0
        obj = json.loads(open(path).read())
        assert len(obj["checks"]) == 4
        assert all(c["passed"] for c in obj["checks"])
        assert obj["testbed"]["format"] == "dubkit.gaussian-testbed/1"

    def test_failing_check_exits_4(self, tmp_path):
        # one global affine bin cannot match the analytic residual variance
        cfg = tmp_path / "flow.json"
        cfg.write_text(json.dumps({
            "flow": {"n_samples": 20000, "bins": 1, "transport_samples": 2000, "euler_steps": 50}
        }))
        path = str(tmp_path / "flow_report.json")
        assert run(["--config", str(cfg), "flow-test", "--json-out", path]) == 4
        obj = json.loads(open(path).read())  # report written before exit
        assert any(not c["passed"] for c in obj["checks"])


class TestExitCodes:
    def test_unknown_command(self):
        assert run(["frobnicate"]) == 2

    def test_missing_config_file(self, tmp_path):
        assert run(["--config", str(tmp_path / "nope.json"), "gen-corpus"]) == 2

    def test_unknown_config_key(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text('{"sampler": {"nfes": 2}}')
        assert run(["--config", str(cfg), "gen-corpus", "--n-pairs", "1"]) == 2

    def test_negative_pairs(self, tmp_path):
        assert run(["--out", str(tmp_path), "gen-corpus", "--n-pairs", "-1"]) == 2

    def test_bad_workers(self):
        assert run(["--workers", "0", "gen-corpus"]) == 2

    def test_missing_corpus_file(self, tmp_path):
        assert run(["adapt", "--in", str(tmp_path / "nope.jsonl")]) == 3

    def test_oracle_refuses_model_flag(self, workspace):
        assert run([
            "translate", "--corpus", workspace["corpus"],
            "--denoiser", "oracle", "--model", workspace["model"],
        ]) == 2

    def test_count_requires_model(self, workspace):
        assert run(["translate", "--corpus", workspace["corpus"]]) == 2

    def test_oracle_refuses_long_targets(self, workspace, tmp_path):
        # standard task sources run past the exact-posterior length bound
        assert run([
            "translate", "--corpus", workspace["corpus"], "--denoiser", "oracle",
            "--out-file", str(tmp_path / "o.jsonl"),
        ]) == 2

    def test_eval_missing_output_id(self, workspace, tmp_path):
        records = dk.read_unit_jsonl(workspace["outputs"])
        partial = str(tmp_path / "partial.jsonl")
        dk.write_unit_jsonl(partial, records[:-1])
        assert run([
            "--out", str(tmp_path), "eval",
            "--corpus", workspace["corpus"], "--outputs", partial,
        ]) == 3

    def test_eval_duplicate_output_id(self, workspace, tmp_path):
        records = dk.read_unit_jsonl(workspace["outputs"])
        dup = str(tmp_path / "dup.jsonl")
        with open(workspace["outputs"]) as fh:
            text = fh.read().splitlines()
        with open(dup, "w") as fh:
            fh.write("\n".join(text + [text[0]]) + "\n")
        assert run([
            "--out", str(tmp_path), "eval",
            "--corpus", workspace["corpus"], "--outputs", dup,
        ]) == 3

    def test_version_flag(self):
        assert run(["--version"]) == 0

    def test_empty_corpus_generation(self, tmp_path):
        path = str(tmp_path / "empty.jsonl")
        assert run(["gen-corpus", "--n-pairs", "0", "--out-file", path]) == 0
        assert open(path).read() == ""
        assert run(["translate", "--corpus", path, "--denoiser", "oracle"]) == 3
