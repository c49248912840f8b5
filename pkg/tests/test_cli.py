import csv
import json
import os
import subprocess
import sys

import pytest

from biasguide import cli, config, pipeline
from biasguide.errors import FormatError, PreconditionError
from conftest import TINY


@pytest.fixture
def tiny_json(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY))
    return str(path)


def call(capsys, *argv):
    code = cli.main(list(argv))
    out, err = capsys.readouterr()
    return code, out.strip(), err.strip()


def metrics_rows(out_dir):
    with open(os.path.join(out_dir, "metrics.csv"), newline="") as fh:
        return list(csv.DictReader(fh))


class TestExitCodes:
    def test_stage_before_its_upstream(self, capsys, tiny_json, tmp_path):
        code, _, err = call(capsys, "train", "--config", tiny_json, "--out-dir", str(tmp_path / "o"))
        assert code == 3
        assert "precondition" in err and "'generate'" in err

    def test_schema_error_names_the_key(self, capsys, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"train": {"batch_size": "many"}}))
        code, _, err = call(capsys, "generate-data", "--config", str(bad), "--out-dir", str(tmp_path))
        assert code == 2 and "train.batch_size" in err

    def test_unknown_key(self, capsys, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"guidance": {"lambda": 3}}))
        code, _, err = call(capsys, "generate-data", "--config", str(bad), "--out-dir", str(tmp_path))
        assert code == 2 and "guidance.lambda" in err

    def test_missing_config_file(self, capsys, tmp_path):
        code, _, err = call(capsys, "generate-data", "--config", str(tmp_path / "nope.json"))
        assert code == 4 and "input error" in err

    def test_invalid_range(self, capsys, tiny_json, tmp_path):
        code, _, err = call(capsys, "generate-data", "--config", tiny_json, "--severity", "150",
                            "--out-dir", str(tmp_path))
        assert code == 2

    def test_unknown_mode_rejected_by_argparse(self, tiny_json):
        with pytest.raises(SystemExit) as info:
            cli.main(["train", "--mode", "bogus"])
        assert info.value.code == 2


class TestOverrides:
    def test_severity_is_a_percentage(self, tiny_json):
        args = cli.build_parser().parse_args(["train", "--config", tiny_json, "--severity", "5"])
        assert cli.resolve_config(args).data.severity == pytest.approx(0.05)

    def test_ablation_flags(self, tiny_json):
        args = cli.build_parser().parse_args(["train", "--config", tiny_json, "--no-guide-loss",
                                              "--pair-source", "d", "--seed", "4"])
        e = cli.resolve_config(args).experiment
        assert not e.guide_loss and e.bn_loss and e.pair_source == "d" and e.seed == 4

    def test_run_id_encodes_mode_seed_and_severity(self, tiny_json):
        args = cli.build_parser().parse_args(["train", "--config", tiny_json, "--severity", "0.5"])
        assert pipeline.run_id(cli.resolve_config(args)) == "full-seed0-sev0p5"


class TestPipeline:
    def test_vanilla_then_full_gives_two_rows(self, capsys, tiny_json, tmp_path):
        out = str(tmp_path / "o")
        for mode in ("vanilla", "full"):
            code, printed, _ = call(capsys, "run-all", "--config", tiny_json, "--mode", mode, "--out-dir", out)
            assert code == 0 and printed.endswith(pipeline.run_id(cli.resolve_config(
                cli.build_parser().parse_args(["train", "--config", tiny_json, "--mode", mode]))))
        rows = metrics_rows(out)
        assert sorted(r["mode"] for r in rows) == ["full", "vanilla"]
        full = next(r for r in rows if r["mode"] == "full")
        vanilla = next(r for r in rows if r["mode"] == "vanilla")
        assert full["bn_auc"] != "" and vanilla["bn_auc"] in ("", "nan")

    def test_outputs_and_manifest(self, capsys, tiny_json, tmp_path):
        out = str(tmp_path / "o")
        assert call(capsys, "run-all", "--config", tiny_json, "--out-dir", out)[0] == 0
        run_dir = os.path.join(out, "runs", "full-seed0-sev1")
        man = pipeline.RunManifest.load(os.path.join(run_dir, "manifest.json"))
        assert all(man.stages[s]["done"] for s in pipeline.STAGES)
        for name in ("dataset", "partitions", "f_d", "f_b", "step_log", "eval_log", "tracker_log",
                     "summary", "metrics", "bn_trajectory", "accuracy", "dbn_composition"):
            assert os.path.exists(os.path.join(out, man.outputs[name])), name
        assert man.dataset_hash
        with open(os.path.join(run_dir, "summary.json")) as fh:
            assert json.load(fh)["mode"] == "full"

    def test_rerun_is_a_no_op_and_force_redoes(self, tiny_json, tmp_path):
        cfg = cli.resolve_config(cli.build_parser().parse_args(["train", "--config", tiny_json]))
        out = str(tmp_path / "o")
        pipeline.Pipeline(cfg, out).run_all()
        again = pipeline.Pipeline(cfg, out)
        assert not any(getattr(again, s)() for s in pipeline.STAGES)
        assert pipeline.Pipeline(cfg, out, force=True).evaluate()

    def test_config_change_invalidates_downstream(self, tiny_json, tmp_path):
        cfg = cli.resolve_config(cli.build_parser().parse_args(["train", "--config", tiny_json]))
        out = str(tmp_path / "o")
        pipeline.Pipeline(cfg, out).run_all()
        changed = config.override(cfg, None, {"tau": 3.0})
        pipe = pipeline.Pipeline(changed, out)
        # data and ensemble do not depend on tau
        assert not pipe.generate() and not pipe.pretrain()
        with pytest.raises(PreconditionError) as info:
            pipe.evaluate()
        assert info.value.stage == "train"

    def test_metrics_are_byte_identical_across_fresh_runs(self, tiny_json, tmp_path):
        cfg = cli.resolve_config(cli.build_parser().parse_args(["train", "--config", tiny_json]))
        blobs = []
        for name in ("a", "b"):
            pipeline.Pipeline(cfg, tmp_path / name).run_all()
            blobs.append((tmp_path / name / "metrics.csv").read_bytes())
        assert blobs[0] == blobs[1]

    def test_corrupt_manifest(self, tiny_json, tmp_path):
        cfg = cli.resolve_config(cli.build_parser().parse_args(["train", "--config", tiny_json]))
        pipe = pipeline.Pipeline(cfg, tmp_path)
        with open(pipe.manifest_path, "w") as fh:
            fh.write("{broken")
        with pytest.raises(FormatError):
            pipeline.Pipeline(cfg, tmp_path)

    def test_console_entry_point(self, tiny_json, tmp_path):
        proc = subprocess.run([sys.executable, "-m", "biasguide", "generate-data", "--config", tiny_json,
                               "--out-dir", str(tmp_path)], capture_output=True, text=True)
        assert proc.returncode == 0, proc.stderr
        assert proc.stdout.strip().endswith("full-seed0-sev1")
