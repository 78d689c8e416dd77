"""Checkpoint directory format.

    <dir>/manifest.json          config, parameter names/shapes, dtype, step, seed
    <dir>/params/<name>.bin      raw little-endian float32, C order
    <dir>/optimizer/<name>.<slot>.bin   optional Adam moments, same encoding
"""

from __future__ import annotations

import json
import os
import shutil
import tempfile
from pathlib import Path

import numpy as np
import torch

from .network import CPDMNet, ModelConfig

FORMAT_VERSION = 1
_DTYPE = "<f4"


def _write_array(path: Path, tensor: torch.Tensor) -> None:
    arr = tensor.detach().cpu().numpy().astype(_DTYPE, copy=False)
    path.write_bytes(np.ascontiguousarray(arr).tobytes())


def _read_array(path: Path, shape) -> torch.Tensor:
    arr = np.frombuffer(path.read_bytes(), dtype=_DTYPE)
    if arr.size != int(np.prod(shape, dtype=np.int64)):
        raise ValueError(f"{path.name}: expected {shape}, found {arr.size} values")
    return torch.from_numpy(arr.astype(np.float32).reshape(shape))


def save_checkpoint(
    directory,
    model: CPDMNet,
    *,
    step: int,
    seed: int,
    optimizer: torch.optim.Optimizer | None = None,
    extra: dict | None = None,
) -> Path:
    """Write a checkpoint atomically (staged next to ``directory`` then renamed)."""
    directory = Path(directory)
    directory.parent.mkdir(parents=True, exist_ok=True)
    stage = Path(tempfile.mkdtemp(prefix=f".{directory.name}.", dir=directory.parent))
    try:
        (stage / "params").mkdir()
        params = []
        names = {}
        for name, p in model.named_parameters():
            _write_array(stage / "params" / f"{name}.bin", p)
            params.append({"name": name, "shape": list(p.shape)})
            names[p] = name
        manifest = {
            "format_version": FORMAT_VERSION,
            "model_config": model.cfg.to_dict(),
            "in_channels": model.cfg.in_channels,
            "dtype": "float32",
            "byte_order": "little",
            "step": int(step),
            "seed": int(seed),
            "parameters": params,
        }
        if optimizer is not None:
            manifest["optimizer"] = _save_optimizer(stage, optimizer, names)
        if extra:
            manifest.update(extra)
        (stage / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
        if directory.exists():
            shutil.rmtree(directory)
        os.replace(stage, directory)
    except BaseException:
        shutil.rmtree(stage, ignore_errors=True)
        raise
    return directory


def _save_optimizer(stage: Path, optimizer, names) -> dict:
    (stage / "optimizer").mkdir()
    sd = optimizer.state_dict()
    ordered = [p for group in optimizer.param_groups for p in group["params"]]
    state = {}
    for idx, slots in sd["state"].items():
        name = names[ordered[idx]]
        entry = {}
        for slot, value in slots.items():
            if torch.is_tensor(value) and value.dim() > 0:
                _write_array(stage / "optimizer" / f"{name}.{slot}.bin", value)
                entry[slot] = {"file": f"{name}.{slot}.bin", "shape": list(value.shape)}
            else:
                entry[slot] = float(value)
        state[name] = entry
    groups = []
    for g in sd["param_groups"]:
        g = dict(g)
        g["params"] = [names[ordered[i]] for i in g["params"]]
        g["betas"] = list(g.get("betas", ()))
        groups.append(g)
    return {"type": type(optimizer).__name__, "param_groups": groups, "state": state}


def read_manifest(directory) -> dict:
    path = Path(directory) / "manifest.json"
    if not path.is_file():
        raise FileNotFoundError(f"no checkpoint manifest at {path}")
    return json.loads(path.read_text())


def load_checkpoint(directory) -> tuple[CPDMNet, dict]:
    directory = Path(directory)
    manifest = read_manifest(directory)
    cfg = ModelConfig.from_dict(manifest["model_config"])
    with torch.random.fork_rng(devices=[]):
        model = CPDMNet(cfg)
    expected = dict(model.named_parameters())
    listed = {e["name"] for e in manifest["parameters"]}
    if listed != set(expected):
        raise ValueError("checkpoint parameter set does not match its model config")
    with torch.no_grad():
        for entry in manifest["parameters"]:
            expected[entry["name"]].copy_(
                _read_array(directory / "params" / f"{entry['name']}.bin", entry["shape"])
            )
    return model, manifest


def restore_optimizer(directory, optimizer: torch.optim.Optimizer, model: CPDMNet) -> None:
    """Load Adam moments saved by :func:`save_checkpoint` into ``optimizer``."""
    directory = Path(directory)
    saved = read_manifest(directory).get("optimizer")
    if saved is None:
        raise ValueError(f"checkpoint {directory} has no optimizer state")
    index = {}
    ordered = [p for group in optimizer.param_groups for p in group["params"]]
    by_param = {p: name for name, p in model.named_parameters()}
    for i, p in enumerate(ordered):
        index[by_param[p]] = i
    state = {}
    for name, slots in saved["state"].items():
        entry = {}
        for slot, value in slots.items():
            if isinstance(value, dict):
                entry[slot] = _read_array(directory / "optimizer" / value["file"], value["shape"])
            else:
                entry[slot] = torch.tensor(value, dtype=torch.float32)
        state[index[name]] = entry
    groups = []
    for g in saved["param_groups"]:
        g = dict(g)
        g["params"] = [index[n] for n in g["params"]]
        g["betas"] = tuple(g["betas"])
        groups.append(g)
    optimizer.load_state_dict({"state": state, "param_groups": groups})
