"""Checkpoint container.

Layout::

    PROMPTREC-CHECKPOINT\\n
    <manifest byte length, 16 hex digits>\\n
    <manifest: UTF-8 JSON>
    <payload: parameter blocks, little-endian float64, in manifest order>

The manifest carries the format version, the training and LM configs, the
vocabularies and id maps, and one entry per parameter block (name, shape,
trainable flag, byte offset). ``checksum`` is the SHA-256 of the canonical
manifest without that key, followed by the payload.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict

import numpy as np
import torch

from . import autodiff as ad
from .corpus import AspectVocabulary, Vocabulary
from .extraction import EmbeddingTables
from .lm import LmConfig
from .training import PromptRecModel, TrainConfig

MAGIC = b"PROMPTREC-CHECKPOINT\n"
FORMAT_VERSION = 1

_DTYPES = {"float32": torch.float32, "float64": torch.float64}


class CheckpointError(ValueError):
    pass


def _canonical(manifest: dict) -> bytes:
    return json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_checkpoint(model: PromptRecModel, path, extra: dict | None = None) -> str:
    """Write ``model`` to ``path``; returns the checksum."""
    blocks, chunks, offset = [], [], 0
    for name, t in model.params.items():
        arr = np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f8")
        raw = arr.tobytes()
        blocks.append({"name": name, "shape": list(arr.shape), "trainable": model.params.is_trainable(name),
                       "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    manifest = {
        "format_version": FORMAT_VERSION,
        "dtype": str(model.params.dtype).replace("torch.", ""),
        "config": asdict(model.cfg),
        "lm_config": asdict(model.lm_cfg),
        "vocab": list(model.vocab.tokens),
        "aspects": list(model.aspects.terms),
        "users": list(model.tables.users),
        "items": list(model.tables.items),
        "blocks": blocks,
        "extra": extra or {},
    }
    checksum = hashlib.sha256(_canonical(manifest) + payload).hexdigest()
    manifest["checksum"] = checksum
    body = json.dumps(manifest, sort_keys=True, indent=1).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(f"{len(body):016x}\n".encode("ascii"))
        fh.write(body)
        fh.write(payload)
    return checksum


def read_checkpoint(path) -> tuple[dict, bytes]:
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    pos = len(MAGIC)
    try:
        n = int(data[pos:pos + 16], 16)
    except ValueError:
        raise CheckpointError(f"{path}: corrupt manifest length") from None
    pos += 17
    try:
        manifest = json.loads(data[pos:pos + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt manifest ({exc})") from None
    payload = data[pos + n:]
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {manifest.get('format_version')}")
    stored = manifest.pop("checksum", None)
    actual = hashlib.sha256(_canonical(manifest) + payload).hexdigest()
    if stored != actual:
        raise CheckpointError(f"{path}: checksum mismatch (stored {stored}, computed {actual})")
    manifest["checksum"] = stored
    return manifest, payload


def load_checkpoint(path) -> tuple[PromptRecModel, dict]:
    """Rebuild the model; returns it with the manifest's ``extra`` dict."""
    manifest, payload = read_checkpoint(path)
    p = ad.ParamStore(_DTYPES[manifest["dtype"]])
    for b in manifest["blocks"]:
        raw = payload[b["offset"]: b["offset"] + b["nbytes"]]
        arr = np.frombuffer(raw, dtype="<f8").reshape(b["shape"]).copy()
        p.add(b["name"], arr, b["trainable"])
    model = PromptRecModel(
        cfg=TrainConfig(**manifest["config"]),
        lm_cfg=LmConfig(**manifest["lm_config"]),
        vocab=Vocabulary(tuple(manifest["vocab"])),
        aspects=AspectVocabulary(tuple(manifest["aspects"])),
        tables=EmbeddingTables(tuple(manifest["users"]), tuple(manifest["items"])),
        params=p,
    )
    return model, manifest.get("extra", {})
