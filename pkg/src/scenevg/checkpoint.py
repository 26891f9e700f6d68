"""Checkpoint files: an ``.npz`` archive of named parameter arrays plus a JSON
manifest (format version, model type, config, vocabulary, estimator
parameters and the shape/dtype of every array)."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

FORMAT_VERSION = 1
_MANIFEST = "__manifest__"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, model: str, config: dict, state: dict, vocab: list,
                    params: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {f"param/{k}": v.detach().cpu().numpy() for k, v in state.items()}
    manifest = {
        "format_version": FORMAT_VERSION,
        "model": model,
        "config": config,
        "vocab": list(vocab),
        "params": params or {},
        "tensors": {k: {"shape": list(a.shape), "dtype": str(a.dtype)} for k, a in arrays.items()},
    }
    with open(path, "wb") as fh:
        np.savez(fh, **arrays, **{_MANIFEST: np.array(json.dumps(manifest, sort_keys=True))})
    return path


def load_checkpoint(path, expected_model: str | None = None) -> dict:
    """Read and validate a checkpoint; returns manifest fields plus ``state`` tensors."""
    with np.load(path, allow_pickle=False) as data:
        if _MANIFEST not in data.files:
            raise CheckpointError(f"{path}: no manifest")
        manifest = json.loads(str(data[_MANIFEST]))
        if manifest.get("format_version") != FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported format version {manifest.get('format_version')}")
        if expected_model is not None and manifest["model"] != expected_model:
            raise CheckpointError(f"{path}: holds a {manifest['model']} model, not {expected_model}")
        declared = manifest["tensors"]
        present = {k for k in data.files if k != _MANIFEST}
        if present != set(declared):
            raise CheckpointError(f"{path}: tensor set differs from manifest")
        state = {}
        for key, meta in declared.items():
            arr = data[key]
            if list(arr.shape) != meta["shape"] or str(arr.dtype) != meta["dtype"]:
                raise CheckpointError(f"{path}: tensor {key} has shape {arr.shape}/{arr.dtype}, "
                                      f"manifest says {meta['shape']}/{meta['dtype']}")
            state[key[len("param/"):]] = torch.from_numpy(arr.copy())
    manifest["state"] = state
    return manifest


def save_model(estimator, path) -> Path:
    """Persist a fitted :class:`KeViLI` or :class:`LeViLM`."""
    from .kevili import KeViLI

    model = "kevili" if isinstance(estimator, KeViLI) else "levilm"
    params = {k: list(v) if isinstance(v, tuple) else v
              for k, v in estimator.get_params().items()}
    return save_checkpoint(path, model, estimator.config_dict(), estimator.net_.state_dict(),
                           estimator.vocab_.itos_, params)


def load_model(path):
    """Rebuild a fitted estimator from a checkpoint, checking every shape against the model."""
    from .kevili import KeViLI, KeviliConfig, KeviliNet
    from .levilm import LeViLM, LeViLMConfig, LeViLMNet
    from .text import Vocabulary

    ck = load_checkpoint(path)
    params = {k: tuple(v) if isinstance(v, list) else v for k, v in ck["params"].items()}
    vocab = Vocabulary.from_tokens(ck["vocab"])
    if ck["model"] == "kevili":
        est = KeViLI(**params)
        config = KeviliConfig(**ck["config"])
        net = KeviliNet(config, len(vocab)).double()
    elif ck["model"] == "levilm":
        params["init_checkpoint"] = None
        est = LeViLM(**params)
        config = LeViLMConfig(**{**ck["config"], "scales": tuple(ck["config"]["scales"])})
        net = LeViLMNet(config, len(vocab)).double()
    else:
        raise CheckpointError(f"unknown model type {ck['model']!r}")
    expected = net.state_dict()
    if set(expected) != set(ck["state"]):
        raise CheckpointError(f"{path}: parameter names do not match the {ck['model']} model")
    for k, v in expected.items():
        if tuple(v.shape) != tuple(ck["state"][k].shape):
            raise CheckpointError(f"{path}: {k} has shape {tuple(ck['state'][k].shape)}, "
                                  f"model expects {tuple(v.shape)}")
    net.load_state_dict(ck["state"])
    net.eval()
    est.net_ = net
    est.vocab_ = vocab
    est._image_cache = {}
    est.loss_history_ = []
    return est
