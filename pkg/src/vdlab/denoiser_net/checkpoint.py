"""Checkpoint directories: one PTNS file per named parameter plus meta.txt.

Layout:

  <dir>/meta.txt          key = value lines (architecture, step count, flags)
  <dir>/params/<name>.ptns
  <dir>/ema/<name>.ptns   present when has_ema = true

Files are written in sorted order with fixed formatting so a checkpoint's
bytes depend only on its contents.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from ..errors import FormatError
from ..ndcore import read_ptns, write_ptns
from .model import DenoiserModel, ModelConfig

META_VERSION = 1


def save_checkpoint(
    path, model: DenoiserModel, ema: np.ndarray | None = None, extra: dict | None = None
) -> None:
    """Write the checkpoint directory. `extra` adds caller-owned meta keys
    (written sorted, after the fixed block); they come back in the meta dict
    of load_checkpoint and must not collide with the fixed keys."""
    root = Path(path)
    (root / "params").mkdir(parents=True, exist_ok=True)
    c = model.cfg
    lines = [
        f"meta_version = {META_VERSION}",
        f"arch_hash = {model.arch_hash()}",
        f"c_in = {c.c_in}",
        f"channels = {c.channels}",
        f"emb_dim = {c.emb_dim}",
        f"groups = {c.groups}",
        f"n_classes = {c.n_classes}",
        f"n_frames_max = {c.n_frames_max}",
        f"temporal_enabled = {str(c.temporal_enabled).lower()}",
        f"train_steps = {model.train_steps}",
        f"has_ema = {str(ema is not None).lower()}",
    ]
    fixed = {ln.split(" = ")[0] for ln in lines}
    for key in sorted(extra or {}):
        if key in fixed:
            raise FormatError(f"extra meta key {key!r} collides with a fixed key")
        lines.append(f"{key} = {(extra or {})[key]}")
    (root / "meta.txt").write_text("\n".join(lines) + "\n")
    for name in model.param_names():
        write_ptns(root / "params" / f"{name}.ptns", model.view(name))
    if ema is not None:
        (root / "ema").mkdir(exist_ok=True)
        shadow = model.with_params(ema)
        for name in shadow.param_names():
            write_ptns(root / "ema" / f"{name}.ptns", shadow.view(name))


def _parse_meta(path: Path) -> dict:
    meta = {}
    for i, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"{path} line {i}: expected 'key = value'")
        key, _, val = line.partition("=")
        meta[key.strip()] = val.strip()
    return meta


def load_checkpoint(path) -> tuple[DenoiserModel, np.ndarray | None, dict]:
    """Returns (model, ema parameter vector or None, meta dict)."""
    root = Path(path)
    meta = _parse_meta(root / "meta.txt")
    if int(meta.get("meta_version", -1)) != META_VERSION:
        raise FormatError(f"{root}: unsupported checkpoint version")
    cfg = ModelConfig(
        c_in=int(meta["c_in"]),
        channels=int(meta["channels"]),
        emb_dim=int(meta["emb_dim"]),
        groups=int(meta["groups"]),
        n_classes=int(meta["n_classes"]),
        n_frames_max=int(meta["n_frames_max"]),
        temporal_enabled=meta["temporal_enabled"] == "true",
    )
    model = DenoiserModel(cfg)
    model.train_steps = int(meta["train_steps"])
    if model.arch_hash() != meta["arch_hash"]:
        raise FormatError(f"{root}: architecture hash mismatch")
    _fill(model, root / "params")
    ema = None
    if meta.get("has_ema") == "true":
        shadow = DenoiserModel(cfg)
        _fill(shadow, root / "ema")
        ema = shadow.params.copy()
    return model, ema, meta


def _fill(model: DenoiserModel, folder: Path) -> None:
    for name in model.param_names():
        f = folder / f"{name}.ptns"
        if not f.exists():
            raise FormatError(f"missing parameter file {f}")
        arr = read_ptns(f)
        view = model.view(name)
        if arr.shape != view.shape:
            raise FormatError(f"{f}: shape {arr.shape}, expected {view.shape}")
        view[...] = arr
    extra = {p.name for p in folder.glob("*.ptns")} - {f"{n}.ptns" for n in model.param_names()}
    if extra:
        raise FormatError(f"unexpected parameter files: {sorted(extra)[:3]}")
