"""Checkpoint archive: one ``.npz`` with parameters keyed ``<network>/<layer>/<param>``.

Run metadata (network config, train config, trainer state, class weights) is
stored as a JSON string under ``__meta__``; optimizer momentum buffers under
``optimizer/<network>/<layer>/<param>``.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np
import torch

from selpda.errors import ContractError
from selpda.networks import NetworkBundle, NetworkConfig
from selpda.serialization import from_dict, to_dict

META_KEY = "__meta__"


def archive_key(state_dict_key):
    network, *layer, param = state_dict_key.split(".")
    return "/".join([network, ".".join(layer) or "_", param])


def _state_key(archive):
    network, layer, param = archive.split("/")
    parts = [network] + ([] if layer == "_" else [layer]) + [param]
    return ".".join(parts)


def save_checkpoint(path, bundle: NetworkBundle, train_config=None, state=None, optimizer=None):
    arrays = {archive_key(k): v.detach().cpu().numpy() for k, v in bundle.state_dict().items()}
    if optimizer is not None:
        names = {id(p): n for n, p in bundle.named_parameters()}
        for group in optimizer.param_groups:
            for p in group["params"]:
                buf = optimizer.state.get(p, {}).get("momentum_buffer")
                if buf is not None:
                    arrays["optimizer/" + archive_key(names[id(p)])] = buf.detach().cpu().numpy()
    meta = {
        "network_config": to_dict(bundle.config),
        "dtype": str(bundle.dtype).removeprefix("torch."),
        "train_config": None if train_config is None else to_dict(train_config),
        "state": state,
    }
    arrays[META_KEY] = np.array(json.dumps(meta))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    os.replace(tmp, path)


def read_meta(path):
    with np.load(path, allow_pickle=False) as archive:
        return json.loads(str(archive[META_KEY]))


def load_checkpoint(path, bundle: NetworkBundle | None = None, optimizer=None):
    """Restore parameters into ``bundle`` (built from the stored config if omitted).

    Returns ``(bundle, meta)``. Raises :class:`ContractError` on any missing
    key or shape mismatch.
    """
    with np.load(path, allow_pickle=False) as archive:
        meta = json.loads(str(archive[META_KEY]))
        arrays = {k: archive[k] for k in archive.files if k != META_KEY}
    if bundle is None:
        bundle = NetworkBundle(from_dict(NetworkConfig, meta["network_config"]))
        bundle.to(getattr(torch, meta.get("dtype", "float32")))
    state = bundle.state_dict()
    params = {k: v for k, v in arrays.items() if not k.startswith("optimizer/")}
    expected = {archive_key(k) for k in state}
    if set(params) != expected:
        missing, extra = sorted(expected - set(params)), sorted(set(params) - expected)
        raise ContractError(f"checkpoint keys mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
    loaded = {}
    for key, value in params.items():
        target = state[_state_key(key)]
        if tuple(target.shape) != value.shape:
            raise ContractError(f"shape mismatch for {key}: checkpoint {value.shape}, model {tuple(target.shape)}")
        loaded[_state_key(key)] = torch.as_tensor(value, dtype=target.dtype)
    bundle.load_state_dict(loaded)
    if optimizer is not None:
        named = dict(bundle.named_parameters())
        for key, value in arrays.items():
            if key.startswith("optimizer/"):
                p = named[_state_key(key.removeprefix("optimizer/"))]
                optimizer.state[p]["momentum_buffer"] = torch.as_tensor(value, dtype=p.dtype).clone()
    return bundle, meta
