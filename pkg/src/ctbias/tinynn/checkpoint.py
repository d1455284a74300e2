"""Checkpoints: a JSON manifest plus one raw little-endian float64 blob.

The manifest records the architecture, training hyperparameters, Adam step
counter and, for every array, its name, shape and byte offset in the blob.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ..errors import FormatError
from .models import ArchSpec, Network, build_model
from .optim import Adam

MANIFEST = "manifest.json"
BLOB = "weights.f64"
FORMAT = "ctbias-checkpoint/1"


def save_checkpoint(model: Network, directory, train_config=None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    arrays = dict(model.state_arrays())
    opt = model.optimizer
    if opt is not None:
        arrays.update(opt.state_arrays())
    entries = []
    offset = 0
    with (directory / BLOB).open("wb") as fh:
        for name in arrays:
            a = np.ascontiguousarray(arrays[name], dtype="<f8")
            fh.write(a.tobytes())
            entries.append({"name": name, "shape": list(a.shape), "offset": offset})
            offset += a.nbytes
    manifest = {
        "format": FORMAT,
        "arch": model.spec.to_dict(),
        "seed": model.seed,
        "train": train_config.to_dict() if train_config is not None else None,
        "adam": None if opt is None else {
            "t": opt.t, "lr": opt.lr, "beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps,
        },
        "arrays": entries,
    }
    (directory / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return directory


def load_checkpoint(directory) -> Network:
    directory = Path(directory)
    try:
        manifest = json.loads((directory / MANIFEST).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read checkpoint manifest in {directory}: {exc}") from exc
    if manifest.get("format") != FORMAT:
        raise FormatError(f"unknown checkpoint format {manifest.get('format')!r}")
    arch = dict(manifest["arch"])
    for key in ("channels", "input_shape"):
        arch[key] = tuple(arch[key])
    model = build_model(ArchSpec(**arch), manifest["seed"])
    blob = (directory / BLOB).read_bytes()
    loaded = {}
    for e in manifest["arrays"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        if e["offset"] + 8 * count > len(blob):
            raise FormatError(f"checkpoint blob truncated at array {e['name']!r}")
        loaded[e["name"]] = np.frombuffer(blob, "<f8", count, e["offset"]).reshape(e["shape"])
    targets = model.state_arrays()
    missing = set(targets) - set(loaded)
    if missing:
        raise FormatError(f"checkpoint lacks arrays {sorted(missing)[:5]}")
    for k, v in targets.items():
        v[...] = loaded[k]
    if manifest.get("adam"):
        a = manifest["adam"]
        opt = Adam(a["lr"], a["beta1"], a["beta2"], a["eps"])
        opt.t = a["t"]
        for k, v in loaded.items():
            if k.startswith("adam_m:"):
                opt.m[k[7:]] = v.astype(np.float64)
            elif k.startswith("adam_v:"):
                opt.v[k[7:]] = v.astype(np.float64)
        model.optimizer = opt
    return model
