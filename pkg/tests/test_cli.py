"""End-to-end tests for the command-line interface.

One tiny experiment directory is built per test session and the commands run
in dependency order against it; reruns must reproduce manifests byte for
byte.
"""

import shutil
from pathlib import Path

import numpy as np
import pytest

from vdlab import cli
from vdlab.config import parse_config, serialize_config
from vdlab.ndcore import read_ptns, write_ptns


def tiny_config_text(out_dir: Path) -> str:
    cfg = parse_config(
        "\n".join(
            [
                "seed = 5",
                f"output_dir = {out_dir.as_posix()}",
                "dataset.n_videos = 12",
                "dataset.n_s = 4",
                "dataset.h = 8",
                "dataset.w = 8",
                "model.channels = 8",
                "model.emb_dim = 8",
                "model.groups = 2",
                "model.n_frames_max = 4",
                "sampler.steps = 8",
                "training.steps = 6",
                "training.image_steps = 10",
                "training.batch = 2",
                "training.image_batch = 3",
                "analysis.eval_videos = 6",
                "analysis.sample_videos = 4",
                "analysis.bank_videos = 4",
                "analysis.bank_frames = 2",
            ]
        )
    )
    return serialize_config(cfg)


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg_path = root / "exp.cfg"
    cfg_path.write_text(tiny_config_text(root / "run"))
    return {"root": root, "cfg": cfg_path.as_posix(), "run": root / "run"}


def run_cli(*argv):
    return cli.main(list(argv))


def manifest(run: Path, command: str) -> str:
    return (run / command / "manifest.txt").read_text()


class TestCommandChain:
    def test_01_gen_data(self, workdir, capsys):
        assert run_cli("gen-data", "--config", workdir["cfg"]) == 0
        out = capsys.readouterr().out
        assert "gen-data" in out
        assert (workdir["run"] / "gen-data" / "dataset" / "index.txt").exists()
        assert (workdir["run"] / "gen-data" / "manifest.txt").exists()

    def test_02_gen_data_rerun_byte_identical(self, workdir):
        before = manifest(workdir["run"], "gen-data")
        assert run_cli("gen-data", "--config", workdir["cfg"]) == 0
        assert manifest(workdir["run"], "gen-data") == before

    def test_03_train_image(self, workdir):
        assert run_cli("train-image", "--config", workdir["cfg"]) == 0
        ck = workdir["run"] / "train-image" / "checkpoint"
        assert (ck / "meta.txt").exists()
        assert (workdir["run"] / "train-image" / "train_log.csv").exists()

    def test_04_finetune_video(self, workdir):
        assert run_cli("finetune-video", "--config", workdir["cfg"]) == 0
        meta = (workdir["run"] / "finetune-video" / "checkpoint" / "meta.txt").read_text()
        assert "noise_kind = mixed" in meta

    def test_05_train_scratch(self, workdir):
        assert run_cli("train-scratch", "--config", workdir["cfg"]) == 0

    def test_06_sample_uses_recorded_prior(self, workdir):
        assert run_cli("sample", "--config", workdir["cfg"], "--n", "3") == 0
        videos = read_ptns(workdir["run"] / "sample" / "samples.ptns")
        assert videos.shape == (3, 4, 1, 8, 8)
        assert np.all(np.isfinite(videos))

    def test_07_invert_round(self, workdir):
        src = workdir["run"] / "sample" / "samples.ptns"
        assert run_cli("invert", "--config", workdir["cfg"], "--input", src.as_posix()) == 0
        noise = read_ptns(workdir["run"] / "invert" / "noise.ptns")
        assert noise.shape == read_ptns(src).shape

    def test_08_analyze_noise(self, workdir):
        assert run_cli("analyze-noise", "--config", workdir["cfg"]) == 0
        stats = (workdir["run"] / "analyze-noise" / "cosine_stats.csv").read_text()
        assert stats.startswith("same_mean,same_std,diff_mean,diff_std\n")
        embed = (workdir["run"] / "analyze-noise" / "embed_2d.csv").read_text()
        assert len(embed.splitlines()) == 1 + 4 * 2  # header + bank entries

    def test_09_sweep_alpha(self, workdir):
        assert run_cli(
            "sweep-alpha", "--config", workdir["cfg"], "--alphas", "0,1,inf"
        ) == 0
        csv = (workdir["run"] / "sweep-alpha" / "alpha_sweep.csv").read_text()
        lines = csv.splitlines()
        assert lines[0] == "kind,alpha,video_metric,frame_metric,seed,steps"
        # 2 kinds x 3 alphas + scratch
        assert len(lines) == 1 + 7
        assert lines[-1].startswith("scratch,")
        assert all(ln.split(",")[4] == "5" for ln in lines[1:])
        assert all(ln.split(",")[5] == "6" for ln in lines[1:])

    def test_10_sweep_alpha_zero_row_matches_kinds(self, workdir):
        # alpha = 0 is the same cell whatever the kind label says
        lines = (workdir["run"] / "sweep-alpha" / "alpha_sweep.csv").read_text().splitlines()
        mixed0 = next(ln for ln in lines if ln.startswith("mixed,0,"))
        prog0 = next(ln for ln in lines if ln.startswith("progressive,0,"))
        assert mixed0.split(",")[2:4] == prog0.split(",")[2:4]
        # and alpha = inf likewise collapses onto the frozen cell
        mixedinf = next(ln for ln in lines if ln.startswith("mixed,inf,"))
        proginf = next(ln for ln in lines if ln.startswith("progressive,inf,"))
        assert mixedinf.split(",")[2:4] == proginf.split(",")[2:4]

    def test_11_compare_strategies(self, workdir):
        assert run_cli("compare-strategies", "--config", workdir["cfg"]) == 0
        lines = (workdir["run"] / "compare-strategies" / "strategies.csv").read_text().splitlines()
        assert lines[0] == "strategy,video_metric,frame_metric,init_hash"
        assert [ln.split(",")[0] for ln in lines[1:]] == [
            "scratch", "finetune", "mixed", "progressive",
        ]

    def test_12_verify_manifests_all_green(self, workdir, capsys):
        for command in ("gen-data", "train-image", "finetune-video", "sample",
                        "invert", "analyze-noise", "sweep-alpha", "compare-strategies"):
            extra = ["--alphas", "0,1,inf"] if command == "sweep-alpha" else []
            assert run_cli(command, "--config", workdir["cfg"], "--verify-manifest", *extra) == 0
        assert run_cli("sweep-alpha", "--config", workdir["cfg"], "--verify-manifest") == 0
        capsys.readouterr()

    def test_13_tampering_detected(self, workdir, capsys):
        target = workdir["run"] / "gen-data" / "dataset" / "video_00000.ptns"
        original = target.read_bytes()
        try:
            a = read_ptns(target)
            a[0, 0, 0, 0] += 1.0
            write_ptns(target, a)
            assert run_cli("gen-data", "--config", workdir["cfg"], "--verify-manifest") == 1
            assert "hash mismatch" in capsys.readouterr().out
        finally:
            target.write_bytes(original)
        assert run_cli("gen-data", "--config", workdir["cfg"], "--verify-manifest") == 0

    def test_14_missing_file_detected(self, workdir, capsys):
        target = workdir["run"] / "sample" / "samples.ptns"
        moved = target.with_suffix(".bak")
        target.rename(moved)
        try:
            assert run_cli("sample", "--config", workdir["cfg"], "--verify-manifest") == 1
            assert "missing" in capsys.readouterr().out
        finally:
            moved.rename(target)


class TestJobsInvariance:
    def test_sweep_manifest_identical_at_any_jobs(self, workdir):
        base = manifest(workdir["run"], "sweep-alpha")
        assert run_cli(
            "sweep-alpha", "--config", workdir["cfg"], "--alphas", "0,1,inf", "--jobs", "3"
        ) == 0
        assert manifest(workdir["run"], "sweep-alpha") == base


class TestErrors:
    def test_missing_config_file(self, capsys):
        assert run_cli("gen-data", "--config", "/nonexistent/exp.cfg") == 2
        assert "not found" in capsys.readouterr().err

    def test_invert_requires_input(self, workdir, capsys):
        assert run_cli("invert", "--config", workdir["cfg"]) == 2
        assert "--input" in capsys.readouterr().err

    def test_sweep_requires_alphas(self, workdir, capsys):
        assert run_cli("sweep-alpha", "--config", workdir["cfg"]) == 1
        assert "alphas" in capsys.readouterr().err

    def test_bad_jobs_rejected(self, workdir, capsys):
        assert run_cli("gen-data", "--config", workdir["cfg"], "--jobs", "0") == 2
        capsys.readouterr()

    def test_sample_without_checkpoint(self, tmp_path, capsys):
        cfg = tmp_path / "exp.cfg"
        cfg.write_text(tiny_config_text(tmp_path / "fresh"))
        assert run_cli("sample", "--config", cfg.as_posix()) == 1
        assert "checkpoint" in capsys.readouterr().err

    def test_finetune_without_image_model(self, tmp_path, capsys):
        cfg = tmp_path / "exp.cfg"
        cfg.write_text(tiny_config_text(tmp_path / "fresh2"))
        assert run_cli("finetune-video", "--config", cfg.as_posix()) == 1
        assert "train-image" in capsys.readouterr().err


class TestGradcheckCommand:
    def test_gradcheck_passes_and_reports(self, workdir, capsys):
        assert run_cli("gradcheck", "--config", workdir["cfg"]) == 0
        out = capsys.readouterr().out
        assert "max relative gradient error" in out
        report = (workdir["run"] / "gradcheck" / "gradcheck.txt").read_text()
        assert "ok = true" in report
