"""Command-line experiment driver.

Every subcommand reads one config file, writes its outputs into a per-command
run directory under `output_dir`, and finishes by writing `manifest.txt`
there: the config hash, the normalized command arguments, the file-format
versions, and a sha256 line per output file. Nothing in a run depends on
wall clock, process id, worker count or filesystem iteration order, so
re-running a command with the same config reproduces every byte; pass
`--verify-manifest` to re-hash a previous run instead of executing.

`--jobs N` (default: the PYOCO_LAB_THREADS environment variable, else 1)
bounds worker threads where a command has independent cells to farm out.
"""

from __future__ import annotations

import argparse
import hashlib
import os
import shutil
import sys
from pathlib import Path

import numpy as np

from . import analysis, pipeline
from .config import ExperimentConfig, config_hash, load_config
from .denoiser_net import finite_difference_check, load_checkpoint
from .denoiser_net.checkpoint import META_VERSION
from .errors import NumericError, ParameterError, VdlabError
from .ndcore.ptns import VERSION as PTNS_VERSION
from .ndcore import read_ptns, write_ptns
from .sampler import invert
from .toydata import export_dataset

MANIFEST_VERSION = 1
GRADCHECK_TOL = 1e-4


# ---------------------------------------------------------------------------
# manifests


def _hash_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_manifest(run: Path, command: str, cfg: ExperimentConfig, args: dict) -> None:
    files = sorted(
        p.relative_to(run).as_posix()
        for p in run.rglob("*")
        if p.is_file() and p.name != "manifest.txt"
    )
    lines = [
        f"manifest_version = {MANIFEST_VERSION}",
        f"command = {command}",
        f"config_hash = {config_hash(cfg)}",
        f"seed = {cfg.seed}",
        f"format.ptns = {PTNS_VERSION}",
        f"format.checkpoint_meta = {META_VERSION}",
    ]
    lines.extend(f"arg.{k} = {args[k]}" for k in sorted(args))
    lines.append("")
    lines.extend(f"{_hash_file(run / f)}  {f}" for f in files)
    (run / "manifest.txt").write_text("\n".join(lines) + "\n")


def _verify_manifest(run: Path) -> int:
    manifest = run / "manifest.txt"
    if not manifest.exists():
        print(f"error: no manifest at {manifest}", file=sys.stderr)
        return 1
    bad = 0
    for line in manifest.read_text().splitlines():
        if not line or "=" in line.split("  ")[0]:
            continue
        digest, _, rel = line.partition("  ")
        target = run / rel
        if not target.exists():
            print(f"missing: {rel}")
            bad += 1
        elif _hash_file(target) != digest:
            print(f"hash mismatch: {rel}")
            bad += 1
    if bad:
        print(f"manifest verification failed for {bad} file(s) in {run}")
        return 1
    print(f"manifest OK: {run}")
    return 0


def _fresh_run_dir(cfg: ExperimentConfig, command: str) -> Path:
    run = pipeline.run_dir(cfg, command)
    if run.exists():
        shutil.rmtree(run)
    run.mkdir(parents=True)
    return run


def _write_loss_csv(run: Path, losses) -> None:
    rows = [(i, float(v)) for i, v in enumerate(losses)]
    (run / "train_log.csv").write_text(analysis.format_csv(("step", "loss"), rows))


# ---------------------------------------------------------------------------
# subcommand bodies: each returns the manifest args dict


def _cmd_gen_data(cfg, ns, run: Path) -> dict:
    dataset = pipeline.build_dataset(cfg)
    export_dataset(dataset, run / "dataset")
    return {}


def _cmd_train_image(cfg, ns, run: Path) -> dict:
    dataset = pipeline.build_dataset(cfg)
    model, state = pipeline.train_image(cfg, dataset)
    meta = pipeline.training_prior_meta(pipeline.IID, cfg.training.image_steps, None)
    pipeline.save_trained(run / "checkpoint", model, state, meta)
    _write_loss_csv(run, state.loss_history)
    return {}


def _cmd_finetune_video(cfg, ns, run: Path) -> dict:
    image_model, _, image_meta = pipeline.load_image_model(cfg)
    dataset = pipeline.build_dataset(cfg)
    prior = pipeline.canonical_noise(cfg.noise)
    model = pipeline.adapt_video_model(cfg, image_model, prior.label())
    state = pipeline.train_video(cfg, model, dataset, prior, cfg.training.steps, prior.label())
    meta = pipeline.training_prior_meta(prior, cfg.training.steps, image_meta)
    pipeline.save_trained(run / "checkpoint", model, state, meta)
    _write_loss_csv(run, state.loss_history)
    return {}


def _cmd_train_scratch(cfg, ns, run: Path) -> dict:
    dataset = pipeline.build_dataset(cfg)
    prior = pipeline.canonical_noise(cfg.noise)
    model = pipeline.fresh_video_model(cfg)
    state = pipeline.train_video(cfg, model, dataset, prior, cfg.training.steps, "scratch")
    meta = pipeline.training_prior_meta(prior, cfg.training.steps, None)
    pipeline.save_trained(run / "checkpoint", model, state, meta)
    _write_loss_csv(run, state.loss_history)
    return {}


def _load_sampling_checkpoint(cfg, ns):
    path = Path(ns.checkpoint) if ns.checkpoint else pipeline.checkpoint_dir(cfg, "finetune-video")
    if not (path / "meta.txt").exists():
        raise ParameterError(f"no checkpoint at {path} (pass --checkpoint)")
    model, ema, meta = load_checkpoint(path)
    return model, ema, meta, path


def _cmd_sample(cfg, ns, run: Path) -> dict:
    model, ema, meta, path = _load_sampling_checkpoint(cfg, ns)
    prior = pipeline.recorded_prior(meta)
    videos = pipeline.generate_videos(cfg, model, ema, prior, ns.n, "sample")
    write_ptns(run / "samples.ptns", videos)
    return {"n": ns.n, "checkpoint": path.as_posix()}


def _cmd_invert(cfg, ns, run: Path) -> dict:
    model, ema, meta, path = _load_sampling_checkpoint(cfg, ns)
    src = Path(ns.input)
    if not src.exists():
        raise ParameterError(f"input tensor {src} does not exist")
    videos = read_ptns(src)
    cond = pipeline.generation_labels(videos.shape[0], model.cfg.n_classes)
    denoise = pipeline.denoise_fn(model, ema, pipeline.edm_params(cfg), cond)
    noise = invert(denoise, cfg.sampler, videos)
    write_ptns(run / "noise.ptns", noise)
    return {"checkpoint": path.as_posix(), "input": src.as_posix()}


def _cmd_analyze_noise(cfg, ns, run: Path) -> dict:
    image_model, ema, _ = pipeline.load_image_model(cfg)
    if ema is not None:
        image_model = image_model.with_params(ema)
    dataset = pipeline.build_dataset(cfg)
    bank = analysis.build_noise_bank(
        image_model, cfg.sampler, dataset,
        cfg.analysis.bank_videos, cfg.analysis.bank_frames, pipeline.edm_params(cfg),
    )
    stats = analysis.cosine_stats(bank)
    (run / "cosine_stats.csv").write_text(
        analysis.format_csv(analysis.COSINE_HEADER, [[stats[k] for k in analysis.COSINE_HEADER]])
    )
    rows = analysis.pca_embed_2d(bank)
    (run / "embed_2d.csv").write_text(analysis.format_csv(analysis.EMBED_HEADER, rows))
    return {}


def _parse_alphas(text: str) -> list[float]:
    try:
        values = [float(tok) for tok in text.split(",") if tok.strip()]
    except ValueError:
        raise ParameterError(f"bad alpha list {text!r}; expected comma-separated numbers") from None
    if not values:
        raise ParameterError("alpha list is empty")
    return values


def _cmd_sweep_alpha(cfg, ns, run: Path) -> dict:
    if ns.alphas is None:
        raise ParameterError("sweep-alpha requires --alphas")
    rows = analysis.run_alpha_sweep(cfg, _parse_alphas(ns.alphas), jobs=ns.jobs)
    (run / "alpha_sweep.csv").write_text(analysis.format_csv(analysis.ALPHA_SWEEP_HEADER, rows))
    return {"alphas": ns.alphas}


def _cmd_compare_strategies(cfg, ns, run: Path) -> dict:
    rows = analysis.run_strategy_comparison(cfg, jobs=ns.jobs)
    (run / "strategies.csv").write_text(analysis.format_csv(analysis.STRATEGIES_HEADER, rows))
    return {}


def _cmd_gradcheck(cfg, ns, run: Path) -> dict:
    model, x_clean, cond, sigma, eps = pipeline.gradcheck_setup(cfg.seed)
    report = finite_difference_check(model, x_clean, cond, sigma, eps, pipeline.edm_params(cfg))
    text = (
        f"max_rel_err = {report.max_rel_err:.6e}\n"
        f"worst_param = {report.worst_param}\n"
        f"n_params = {report.n_params}\n"
        f"tolerance = {GRADCHECK_TOL:g}\n"
        f"ok = {str(report.ok(GRADCHECK_TOL)).lower()}\n"
    )
    (run / "gradcheck.txt").write_text(text)
    print(
        f"max relative gradient error {report.max_rel_err:.3e} over "
        f"{report.n_params} parameters (worst: {report.worst_param})"
    )
    if not report.ok(GRADCHECK_TOL):
        raise NumericError(f"gradient check failed: {report.max_rel_err:.3e} >= {GRADCHECK_TOL:g}")
    return {}


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train-image": _cmd_train_image,
    "finetune-video": _cmd_finetune_video,
    "train-scratch": _cmd_train_scratch,
    "sample": _cmd_sample,
    "invert": _cmd_invert,
    "analyze-noise": _cmd_analyze_noise,
    "sweep-alpha": _cmd_sweep_alpha,
    "compare-strategies": _cmd_compare_strategies,
    "gradcheck": _cmd_gradcheck,
}


def _default_jobs() -> int:
    raw = os.environ.get("PYOCO_LAB_THREADS", "").strip()
    if not raw:
        return 1
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vdlab", description="correlated-noise video diffusion lab"
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="experiment config file")
        p.add_argument("--jobs", type=int, default=_default_jobs(),
                       help="worker thread bound (default: PYOCO_LAB_THREADS or 1)")
        p.add_argument("--verify-manifest", action="store_true",
                       help="re-hash the previous run of this command instead of executing")
        if name == "sample":
            p.add_argument("--n", type=int, default=None, help="number of videos")
            p.add_argument("--checkpoint", default=None)
        if name == "invert":
            p.add_argument("--input", required=False, default=None, help="PTNS video tensor")
            p.add_argument("--checkpoint", default=None)
        if name == "sweep-alpha":
            p.add_argument("--alphas", help="comma-separated, inf allowed")
    return parser


def main(argv=None) -> int:
    ns = build_parser().parse_args(argv)
    try:
        cfg = load_config(ns.config)
    except FileNotFoundError:
        print(f"error: config file {ns.config} not found", file=sys.stderr)
        return 2
    except VdlabError as e:
        print(f"{type(e).__module__}.{type(e).__name__}: {e}", file=sys.stderr)
        return 2

    if ns.command == "sample" and ns.n is None:
        ns.n = cfg.analysis.sample_videos
    if ns.jobs < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return 2

    run = pipeline.run_dir(cfg, ns.command)
    if ns.verify_manifest:
        return _verify_manifest(run)

    if ns.command == "invert" and ns.input is None:
        print("error: invert requires --input", file=sys.stderr)
        return 2

    try:
        run = _fresh_run_dir(cfg, ns.command)
        args = _COMMANDS[ns.command](cfg, ns, run)
        _write_manifest(run, ns.command, cfg, args)
    except VdlabError as e:
        print(f"{type(e).__module__}.{type(e).__name__}: {e}", file=sys.stderr)
        return 1
    print(f"{ns.command}: wrote {run}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
