"""Single-file checkpoint container: named arrays plus a manifest.

Array names follow ``module.submodule.layer.kind`` (torch state-dict keys
prefixed by the owning component). The manifest records shape, dtype, owning
module, and the component's version counter for every array.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

from .errors import ContractError

CKPT_FILE = "checkpoint.npz"
CONFIG_FILE = "config.txt"


def save_checkpoint(out_dir, components: dict, versions: dict | None = None,
                    config=None, env_step: int = 0) -> Path:
    """``components``: name -> nn.Module; parameters and buffers are stored."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    versions = versions or {}
    arrays, manifest = {}, {"env_step": env_step, "arrays": {}}
    for comp_name, module in components.items():
        for key, tensor in module.state_dict().items():
            name = f"{comp_name}.{key}"
            arr = tensor.detach().cpu().numpy()
            arrays[name] = arr
            manifest["arrays"][name] = {
                "shape": list(arr.shape),
                "dtype": str(arr.dtype),
                "module": comp_name,
                "version": int(versions.get(comp_name, 0)),
            }
    path = out_dir / CKPT_FILE
    np.savez(path, __manifest__=np.frombuffer(
        json.dumps(manifest).encode(), dtype=np.uint8), **arrays)
    if config is not None:
        (out_dir / CONFIG_FILE).write_text(config.to_text())
    return path


def load_checkpoint(out_dir):
    """Returns (arrays dict, manifest dict)."""
    path = Path(out_dir) / CKPT_FILE
    if not path.exists():
        raise ContractError(f"no checkpoint at {path}")
    with np.load(path) as data:
        manifest = json.loads(bytes(data["__manifest__"]).decode())
        arrays = {k: data[k] for k in data.files if k != "__manifest__"}
    return arrays, manifest


def restore_components(out_dir, components: dict) -> dict:
    """Load arrays into the given modules; returns the manifest."""
    arrays, manifest = load_checkpoint(out_dir)
    for comp_name, module in components.items():
        prefix = comp_name + "."
        state = {k[len(prefix):]: torch.as_tensor(v)
                 for k, v in arrays.items() if k.startswith(prefix)}
        module.load_state_dict(state)
    return manifest
