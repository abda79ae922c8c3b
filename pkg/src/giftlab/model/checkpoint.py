"""Checkpoint directories: ``manifest.json`` plus raw little-endian float32 params."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from ..exceptions import CheckpointError
from .base import Vocabulary
from .tabular import TabularPolicy
from .transformer import MicroTransformer

FORMAT_VERSION = 1
PARAMS_FILE = "params.f32le"
MANIFEST_FILE = "manifest.json"


def build_model(arch: dict, params=None, seed: int = 0):
    kind = arch["kind"]
    if kind == "tabular":
        return TabularPolicy(arch["vocab_size"], arch["order"], params=params)
    if kind == "micro-transformer":
        return MicroTransformer(
            arch["vocab_size"], arch["width"], arch["n_heads"], arch["n_layers"],
            arch["context_length"], arch.get("mlp_ratio", 4), params=params, seed=seed,
        )
    raise CheckpointError(f"unknown model kind {kind!r}")


def save_checkpoint(model, directory, vocab: Vocabulary | None = None, seed: int | None = None,
                    extra: dict | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    raw = model.params.astype("<f4").tobytes()
    (directory / PARAMS_FILE).write_bytes(raw)
    manifest = {
        "format_version": FORMAT_VERSION,
        "architecture": model.architecture(),
        "vocabulary": vocab.to_dict() if vocab is not None else None,
        "parameter_count": int(model.params.size),
        "creation_seed": seed,
        "params_sha256": hashlib.sha256(raw).hexdigest(),
    }
    if extra:
        manifest["extra"] = extra
    (directory / MANIFEST_FILE).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return directory


def load_checkpoint(directory):
    """Return ``(model, vocab, manifest)``; raises :class:`CheckpointError` on any mismatch."""
    directory = Path(directory)
    mpath = directory / MANIFEST_FILE
    if not mpath.exists():
        raise CheckpointError(f"no {MANIFEST_FILE} in {directory}")
    manifest = json.loads(mpath.read_text())
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint format version {version!r} (supported: {FORMAT_VERSION})"
        )
    raw = (directory / PARAMS_FILE).read_bytes()
    expected = int(manifest["parameter_count"])
    found, rem = divmod(len(raw), 4)
    if rem or found != expected:
        raise CheckpointError(
            f"parameter file holds {len(raw)} bytes ({found} floats); expected {expected} floats"
        )
    digest = hashlib.sha256(raw).hexdigest()
    if manifest.get("params_sha256") not in (None, digest):
        raise CheckpointError(f"parameter hash mismatch: manifest {manifest['params_sha256']}, file {digest}")
    params = np.frombuffer(raw, dtype="<f4").astype(np.float64)
    if not np.all(np.isfinite(params)):
        raise CheckpointError("checkpoint contains non-finite parameters")
    model = build_model(manifest["architecture"], params=params)
    vocab = Vocabulary.from_dict(manifest["vocabulary"]) if manifest.get("vocabulary") else None
    return model, vocab, manifest


def quantize(model):
    """Round parameters to float32 in place, matching what a checkpoint stores."""
    model.params[...] = model.params.astype(np.float32).astype(np.float64)
    return model
