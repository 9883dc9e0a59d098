import json
import os
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from ltdistill.cli import main
from ltdistill.pipeline import (
    ConfigError,
    PipelineConfig,
    PipelineRunner,
    StageError,
    parse_config_text,
    render_report,
    run_pipeline,
)

MICRO = {
    "dataset.classes": 3,
    "dataset.per_class": 40,
    "dataset.height": 8,
    "dataset.width": 8,
    "test.per_class": 8,
    "longtail.n0": 30,
    "longtail.beta": 5.0,
    "model.depth": 2,
    "model.width": 8,
    "expert.iterations": 25,
    "expert.batch_size": 16,
    "distill.ipc": 2,
    "init.n_aug": 3,
    "recovery.iterations": 8,
    "student.epochs": 4,
    "student.seeds": "0,1",
}


def micro_config(**overrides):
    values = dict(MICRO)
    values.update(overrides)
    return PipelineConfig.from_mapping(values)


def write_config(path, **overrides):
    values = dict(MICRO)
    values.update(overrides)
    path.write_text("\n".join(f"{k} = {v}" for k, v in values.items()) + "\n")
    return path


class TestConfigParsing:
    def test_parse_text_with_comments(self):
        text = "# a comment\nmodel.depth = 3  # inline\n\nmodel.width=16\n"
        assert parse_config_text(text) == {"model.depth": "3", "model.width": "16"}

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown"):
            PipelineConfig.from_mapping({"model.depht": 3})

    def test_bad_value_rejected(self):
        with pytest.raises(ConfigError, match="bad value"):
            PipelineConfig.from_mapping({"model.depth": "three"})

    def test_duplicate_key_rejected(self):
        with pytest.raises(ConfigError, match="duplicate"):
            parse_config_text("a.b=1\na.b=2")

    def test_missing_equals_rejected(self):
        with pytest.raises(ConfigError, match="key=value"):
            parse_config_text("just some words")

    def test_dataset_path_must_resolve(self):
        with pytest.raises(ConfigError, match="resolvable"):
            PipelineConfig.from_mapping(
                {**MICRO, "dataset.kind": "file", "dataset.path": "/no/such/file.bin"}
            )

    def test_defaults_fill_in(self):
        cfg = PipelineConfig.from_mapping({})
        assert cfg["distill.ipc"] == 10
        assert cfg["student.seeds"] == [0, 1, 2]

    def test_ablation_toggles_leave_other_slices_identical(self):
        base = micro_config()
        for key in ("ablation.no_debias", "ablation.no_recalibration", "ablation.naive_init"):
            toggled = micro_config(**{key: True})
            for slice_args in (("recovery",), ("student",), ("dataset", "test", "longtail")):
                assert base.slice(*slice_args) == toggled.slice(*slice_args)
            # and exactly the toggled key differs overall
            diff = {
                k
                for k in base.canonical()
                if base.canonical()[k] != toggled.canonical()[k]
            }
            assert diff == {key}


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("pipe") / "run"
    run_pipeline(micro_config(), out)
    return out


class TestRunnerCaching:
    def test_all_artifacts_exist(self, run_dir):
        manifest = json.loads((run_dir / "manifest.json").read_text())
        for rec in manifest["artifacts"].values():
            assert (run_dir / rec["file"]).exists()

    def test_rerun_skips_everything_and_manifest_identical(self, run_dir):
        before = (run_dir / "manifest.json").read_bytes()
        log = []
        run_pipeline(micro_config(), run_dir, log=log.append)
        assert all("cached" in line for line in log)
        assert (run_dir / "manifest.json").read_bytes() == before

    def test_tampering_detected_with_stage_name(self, run_dir, tmp_path):
        import shutil

        tampered = tmp_path / "tampered"
        shutil.copytree(run_dir, tampered)
        ckpt = tampered / "observer.ckpt"
        blob = bytearray(ckpt.read_bytes())
        blob[-1] ^= 0xFF
        ckpt.write_bytes(bytes(blob))
        with pytest.raises(StageError, match="provenance mismatch"):
            run_pipeline(micro_config(), tampered)

    def test_config_change_recomputes_downstream_only(self, run_dir, tmp_path):
        import shutil

        changed = tmp_path / "changed"
        shutil.copytree(run_dir, changed)
        log = []
        run_pipeline(micro_config(**{"recovery.iterations": 9}), changed, log=log.append)
        by_stage = dict(line.strip("[]").split("] ") for line in log)
        assert by_stage["dataset"] == "cached, skipping"
        assert by_stage["observer"] == "cached, skipping"
        assert by_stage["init"] == "cached, skipping"
        assert by_stage["recover"] == "running"
        assert by_stage["eval"] == "running"

    def test_no_recalibration_substitutes_running_stats(self, run_dir, tmp_path):
        import shutil

        from ltdistill.experts import ExpertCheckpoint
        from ltdistill.recalib import load_bundle

        ablated = tmp_path / "ablated"
        shutil.copytree(run_dir, ablated)
        log = []
        run_pipeline(
            micro_config(**{"ablation.no_recalibration": True}), ablated, log=log.append
        )
        by_stage = dict(line.strip("[]").split("] ") for line in log)
        assert by_stage["observer"] == "cached, skipping"
        assert by_stage["recalibrate"] == "running"
        bundle = load_bundle(ablated / "stats.bin")
        observer = ExpertCheckpoint.load(ablated / "observer.ckpt")
        for l, bn in enumerate(observer.model.bns):
            assert np.array_equal(bundle.global_means[l], bn.running_mean)
            assert np.array_equal(bundle.global_vars[l], bn.running_var)

    def test_report_outputs(self, run_dir):
        paths = render_report(run_dir)
        summary = open(paths["summary"]).read().strip().splitlines()
        assert summary[0] == "seed,overall,balanced"
        assert len(summary) == 4  # 2 seeds + header + mean row
        mean_row = summary[-1].split(",")
        per_seed = [float(r.split(",")[2]) for r in summary[1:-1]]
        assert abs(float(mean_row[2]) - np.mean(per_seed)) < 1e-6

        per_class = open(paths["per_class"]).read().strip().splitlines()
        assert len(per_class) == 1 + 3  # header + C rows

        tree = ET.parse(paths["chart"])
        assert tree.getroot().tag.endswith("svg")

    def test_report_requires_eval_artifacts(self, tmp_path):
        with pytest.raises(FileNotFoundError, match="eval"):
            render_report(tmp_path)


class TestDeterminism:
    def test_two_deterministic_runs_byte_identical(self, tmp_path):
        cfg = micro_config()
        out1, out2 = tmp_path / "a", tmp_path / "b"
        run_pipeline(cfg, out1, deterministic=True)
        run_pipeline(cfg, out2, deterministic=True)
        render_report(out1)
        render_report(out2)
        names = [
            "train.bin",
            "test.bin",
            "observer.ckpt",
            "teacher.ckpt",
            "stats.bin",
            "init/images.bin",
            "recovered/images.bin",
            "distilled/images.bin",
            "distilled/soft_labels.bin",
            "distilled/provenance.txt",
            "distilled/report.csv",
            "manifest.json",
            "summary.csv",
            "per_class.csv",
            "per_class_accuracy.svg",
        ]
        for name in names:
            a = (out1 / name).read_bytes()
            b = (out2 / name).read_bytes()
            assert a == b, f"{name} differs between runs"


class TestNaiveInitAblation:
    def test_errors_when_class_too_small(self, tmp_path):
        # ipc above the tail class count must fail, as the dashes in the
        # ablation table imply
        cfg = micro_config(**{"ablation.naive_init": True, "distill.ipc": 20})
        with pytest.raises(StageError, match="init"):
            run_pipeline(cfg, tmp_path / "x")

    def test_runs_without_selection_csv(self, tmp_path):
        cfg = micro_config(**{"ablation.naive_init": True})
        out = tmp_path / "naive"
        run_pipeline(cfg, out)
        assert (out / "init/images.bin").exists()
        assert not (out / "init/selection.csv").exists()


class TestCLI:
    def test_run_and_report(self, tmp_path, capsys):
        cfg_path = write_config(tmp_path / "c.cfg")
        out = tmp_path / "out"
        assert main(["run", "--config", str(cfg_path), "--out", str(out)]) == 0
        assert main(["report", "--artifacts", str(out)]) == 0
        assert (out / "summary.csv").exists()

    def test_config_error_exit_code_2(self, tmp_path):
        bad = tmp_path / "bad.cfg"
        bad.write_text("model.depht = 3\n")
        assert main(["run", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2

    def test_missing_config_exit_code_2(self, tmp_path):
        assert main(["run", "--config", str(tmp_path / "none.cfg"), "--out", str(tmp_path / "o")]) == 2

    def test_stage_failure_exit_code_3(self, tmp_path):
        # naive init with impossible ipc
        cfg_path = write_config(
            tmp_path / "c.cfg", **{"ablation.naive_init": "true", "distill.ipc": 20}
        )
        assert main(["run", "--config", str(cfg_path), "--out", str(tmp_path / "o")]) == 3

    def test_individual_stage_commands(self, tmp_path):
        cfg_path = write_config(tmp_path / "c.cfg")
        blobs = tmp_path / "blobs.bin"
        lt = tmp_path / "lt.bin"
        assert main(["gen-blobs", "--config", str(cfg_path), "--out", str(blobs)]) == 0
        assert main(["make-lt", "--config", str(cfg_path), "--source", str(blobs), "--out", str(lt)]) == 0
        ckpt = tmp_path / "teacher.ckpt"
        assert (
            main(
                ["train-expert", "--config", str(cfg_path), "--dataset", str(lt),
                 "--role", "teacher", "--out", str(ckpt)]
            )
            == 0
        )
        stats = tmp_path / "stats.bin"
        assert (
            main(
                ["recalibrate", "--config", str(cfg_path), "--dataset", str(lt),
                 "--checkpoint", str(ckpt), "--out", str(stats)]
            )
            == 0
        )
        init_dir = tmp_path / "init"
        assert (
            main(
                ["init", "--config", str(cfg_path), "--dataset", str(lt),
                 "--teacher", str(ckpt), "--out-dir", str(init_dir)]
            )
            == 0
        )
        rec_dir = tmp_path / "rec"
        assert (
            main(
                ["recover", "--config", str(cfg_path), "--init-dir", str(init_dir),
                 "--observer", str(ckpt), "--stats", str(stats), "--out-dir", str(rec_dir)]
            )
            == 0
        )
        dist_dir = tmp_path / "dist"
        assert (
            main(
                ["relabel", "--config", str(cfg_path), "--images-dir", str(rec_dir),
                 "--teacher", str(ckpt), "--out-dir", str(dist_dir)]
            )
            == 0
        )
        test_bin = tmp_path / "testset.bin"
        from ltdistill.data import balanced_split, load_dataset, save_dataset

        source = load_dataset(blobs)
        test, _ = balanced_split(source, 5, seed=1)
        save_dataset(test_bin, test)
        results = tmp_path / "eval.csv"
        assert (
            main(
                ["eval", "--config", str(cfg_path), "--distilled", str(dist_dir),
                 "--test", str(test_bin), "--out", str(results)]
            )
            == 0
        )
        assert results.exists()
