"""Model checkpoints as a single JSON document.

Arrays travel as base64 of little-endian float64 bytes so a load reproduces
the saved parameters bit for bit. A sha256 over the canonical body guards
against truncation and tampering.
"""

from __future__ import annotations

import base64
import hashlib
import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .nncore import Model, ModelSpec
from .quant import QuantConfig

FORMAT = "trendlab-checkpoint"
VERSION = 1


def _enc(a: np.ndarray) -> dict:
    a = np.ascontiguousarray(a, dtype="<f8")
    return {"shape": list(a.shape), "data": base64.b64encode(a.tobytes()).decode("ascii")}


def _dec(d: dict) -> np.ndarray:
    raw = base64.b64decode(d["data"])
    return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(d["shape"])


def _canonical(body: dict) -> bytes:
    return json.dumps(body, sort_keys=True, separators=(",", ":")).encode()


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def model_to_doc(model: Model) -> dict:
    body = {
        "format": FORMAT,
        "version": VERSION,
        "spec": model.spec.to_dict(),
        "quant": model.quant.to_dict() if model.quant else None,
        "bounds": None if model.bounds is None else [_enc(model.bounds[0]), _enc(model.bounds[1])],
        "params": {k: _enc(v) for k, v in sorted(model.params.items())},
        "provenance": model.provenance,
    }
    return {**body, "checksum": hashlib.sha256(_canonical(body)).hexdigest()}


def save_model(model: Model, path) -> None:
    atomic_write_bytes(path, json.dumps(model_to_doc(model), sort_keys=True, indent=1).encode())


def load_model(path) -> Model:
    try:
        doc = json.loads(Path(path).read_bytes())
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: not a readable checkpoint ({exc})") from exc
    if not isinstance(doc, dict) or doc.get("format") != FORMAT:
        raise CheckpointError(f"{path}: not a {FORMAT} document")
    if doc.get("version") != VERSION:
        raise CheckpointError(f"{path}: version {doc.get('version')} not supported (expected {VERSION})")
    checksum = doc.pop("checksum", None)
    if checksum != hashlib.sha256(_canonical(doc)).hexdigest():
        raise CheckpointError(f"{path}: checksum mismatch")
    try:
        bounds = None if doc["bounds"] is None else (_dec(doc["bounds"][0]), _dec(doc["bounds"][1]))
        return Model(
            spec=ModelSpec.from_dict(doc["spec"]),
            params={k: _dec(v) for k, v in doc["params"].items()},
            quant=QuantConfig.from_dict(doc["quant"]),
            bounds=bounds,
            provenance=doc["provenance"],
        )
    except (KeyError, ValueError, TypeError) as exc:
        raise CheckpointError(f"{path}: malformed checkpoint ({exc})") from exc
