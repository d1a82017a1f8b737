"""Model checkpoints: one BTKS tensor file per parameter plus a JSON manifest."""

from __future__ import annotations

import json
import os
import re

from .tensor import InputError, load_tensor, save_tensor

MANIFEST_NAME = "manifest.json"
_STAGE_RE = re.compile(r"\bstages\.(\d)\b")


def _stage_of(name: str):
    if ".stem_" in name or name.startswith("stem_"):
        return 0
    match = _STAGE_RE.search(name)
    return int(match.group(1)) + 1 if match else None


def state_entries(modules: dict) -> list:
    """Sorted (name, array, kind) triples over parameters and buffers."""
    entries = []
    for prefix, module in modules.items():
        for name, param in module.named_parameters(prefix):
            entries.append((name, param.data, "param"))
        for name, _owner, _bname, buf in module.named_buffers(prefix):
            entries.append((name, buf, "buffer"))
    return sorted(entries, key=lambda e: e[0])


def save_checkpoint(directory, modules: dict):
    """Write every parameter and buffer of `modules` (e.g. {"model": m})."""
    os.makedirs(directory, exist_ok=True)
    manifest = {"format": "btks-checkpoint", "version": 1, "tensors": {}}
    for name, array, kind in state_entries(modules):
        filename = name.replace(".", "__") + ".btks"
        save_tensor(os.path.join(directory, filename), array)
        manifest["tensors"][name] = {
            "file": filename,
            "shape": list(array.shape),
            "stage": _stage_of(name),
            "kind": kind,
        }
    with open(os.path.join(directory, MANIFEST_NAME), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_checkpoint(directory, modules: dict, strict: bool = True):
    """Restore parameters and buffers in place from a checkpoint directory."""
    manifest_path = os.path.join(directory, MANIFEST_NAME)
    if not os.path.isfile(manifest_path):
        raise InputError(f"{directory}: no {MANIFEST_NAME} found")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    tensors = manifest.get("tensors", {})

    params = {}
    buffers = {}
    for prefix, module in modules.items():
        for name, param in module.named_parameters(prefix):
            params[name] = param
        for name, owner, bname, _buf in module.named_buffers(prefix):
            buffers[name] = (owner, bname)

    missing = [n for n in list(params) + list(buffers) if n not in tensors]
    if strict and missing:
        raise InputError(f"checkpoint {directory} lacks tensors: {missing[:5]} ...")
    for name, entry in tensors.items():
        array = load_tensor(os.path.join(directory, entry["file"]))
        if name in params:
            target = params[name]
            if tuple(array.shape) != tuple(target.data.shape):
                raise InputError(
                    f"{name}: checkpoint shape {array.shape} vs model {target.data.shape}"
                )
            target.data = array.astype(target.data.dtype)
        elif name in buffers:
            owner, bname = buffers[name]
            owner.set_buffer(bname, array.astype(owner._buffers[bname].dtype))
        elif strict:
            raise InputError(f"checkpoint tensor {name} has no destination in the model")
