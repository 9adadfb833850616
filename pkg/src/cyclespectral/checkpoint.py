"""Checkpoints as safetensors files.

Tensor keys are the model's parameter names (``encoder.<spectrum>.*`` and
``decoder.level<l>.*``) plus ``optim.<slot>.<name>`` for per-parameter
optimizer state (``momentum`` for SGD; ``exp_avg``, ``exp_avg_sq`` and
``step`` for Adam).  All non-tensor state (architecture manifest, iteration, loss
history, config) is one JSON string under the ``cyclespectral`` metadata key,
serialised with sorted keys so that save -> load -> save is byte-identical.
"""

import json
import os
from pathlib import Path
import tempfile

import torch
from safetensors.torch import load as st_load
from safetensors.torch import save as st_save
from safetensors import safe_open

from .errors import IngestionError
from .flowmodule import SigmaModel

META_KEY = "cyclespectral"
OPTIM_PREFIX = "optim."
MOMENTUM_PREFIX = OPTIM_PREFIX + "momentum."
# Optimizer state names -> checkpoint slot names.
SLOTS = {"momentum_buffer": "momentum", "exp_avg": "exp_avg", "exp_avg_sq": "exp_avg_sq", "step": "step"}
FORMAT_VERSION = 1


def atomic_write_bytes(path, payload):
    """Write ``payload`` to a temp file in the target directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def state_tensors(model, optimizer=None):
    tensors = {k: v.detach().contiguous().clone() for k, v in model.state_dict().items()}
    if optimizer is not None:
        names = {id(p): n for n, p in model.named_parameters()}
        for group in optimizer.param_groups:
            for p in group["params"]:
                for key, value in optimizer.state.get(p, {}).items():
                    if key not in SLOTS or value is None:
                        continue
                    value = torch.as_tensor(value)
                    tensors[f"{OPTIM_PREFIX}{SLOTS[key]}.{names[id(p)]}"] = value.detach().contiguous().clone()
    return tensors


def save_checkpoint(path, model, optimizer=None, iteration=0, history=None, config=None, extra=None):
    meta = {
        "format_version": FORMAT_VERSION,
        "manifest": model.manifest(),
        "iteration": int(iteration),
        "history": list(history or []),
        "config": config,
        "extra": extra or {},
    }
    payload = st_save(state_tensors(model, optimizer), metadata={META_KEY: json.dumps(meta, sort_keys=True)})
    atomic_write_bytes(path, payload)
    return Path(path)


def read_metadata(path):
    try:
        with safe_open(str(path), framework="pt") as f:
            raw = (f.metadata() or {}).get(META_KEY)
    except (OSError, Exception) as exc:
        raise IngestionError(f"cannot read checkpoint: {exc}", entry=str(path)) from None
    if raw is None:
        raise IngestionError("checkpoint lacks its manifest", entry=str(path))
    return json.loads(raw)


def load_checkpoint(path, optimizer_factory=None):
    """Rebuild the model (and optionally an optimizer) from a checkpoint.

    ``optimizer_factory(model)`` should return a fresh optimizer; its momentum
    buffers are then restored.  Returns ``(model, optimizer, meta)``.
    """
    meta = read_metadata(path)
    with open(path, "rb") as f:
        tensors = st_load(f.read())
    model = SigmaModel.from_manifest(meta["manifest"])
    params = {k: v for k, v in tensors.items() if not k.startswith(OPTIM_PREFIX)}
    try:
        model.load_state_dict(params, strict=True)
    except RuntimeError as exc:
        raise IngestionError(f"checkpoint does not match its manifest: {exc}", entry=str(path)) from None
    optimizer = None
    if optimizer_factory is not None:
        optimizer = optimizer_factory(model)
        named = dict(model.named_parameters())
        names = {v: k for k, v in SLOTS.items()}
        for key, buf in tensors.items():
            if key.startswith(OPTIM_PREFIX):
                slot, name = key[len(OPTIM_PREFIX):].split(".", 1)
                if slot not in names or name not in named:
                    raise IngestionError(f"unexpected optimizer entry {key!r}", entry=str(path))
                optimizer.state[named[name]][names[slot]] = buf.clone()
    return model, optimizer, meta
