"""Versioned JSON checkpoints for meta parameters (and optional optimizer state)."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .core import BLOCKS, ConfigError, Dims, LayerSpec, MetaParams

VERSION = 1


def _array(a: np.ndarray) -> dict:
    return {"shape": list(a.shape), "data": [float(v) for v in np.asarray(a, dtype=np.float64).ravel()]}


def _unarray(d: dict) -> np.ndarray:
    return np.array(d["data"], dtype=np.float64).reshape(d["shape"])


def params_to_dict(params: MetaParams, layer_spec: LayerSpec | None = None, seeds: dict | None = None,
                   extra: dict | None = None) -> dict:
    if params.batched:
        raise ConfigError("cannot checkpoint batched parameters")
    doc = {
        "version": VERSION,
        "kind": "vsml",
        "dims": {"N": params.dims.N, "Nf": params.dims.Nf, "Nb": params.dims.Nb},
        "layer_spec": layer_spec.to_dict() if layer_spec else None,
        "params": {name: _array(params.block(name)) for name in BLOCKS},
        "seeds": seeds or {},
    }
    if extra:
        doc["extra"] = extra
    return doc


def params_from_dict(doc: dict) -> tuple[MetaParams, LayerSpec | None, dict]:
    if doc.get("version") != VERSION:
        raise ConfigError(f"unsupported checkpoint version {doc.get('version')!r}")
    dims = Dims(**doc["dims"])
    blocks = {name: _unarray(doc["params"][name]) for name in BLOCKS}
    spec = LayerSpec.from_dict(doc["layer_spec"]) if doc.get("layer_spec") else None
    return MetaParams.from_blocks(blocks, dims), spec, doc


def dumps(doc: dict) -> str:
    # float repr is the shortest string that round-trips exactly
    return json.dumps(doc, sort_keys=True, indent=1) + "\n"


def save(path, doc: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(doc))


def load(path) -> dict:
    return json.loads(Path(path).read_text())


def save_params(path, params: MetaParams, layer_spec=None, seeds=None, extra=None) -> None:
    save(path, params_to_dict(params, layer_spec, seeds, extra))


def load_params(path) -> tuple[MetaParams, LayerSpec | None, dict]:
    return params_from_dict(load(path))
