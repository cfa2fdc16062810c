"""Single-file checkpoint archive.

Layout: magic "VMSST1", little-endian u32 manifest length, manifest JSON
(model config, step, optional training config, ordered tensor index), then
raw little-endian float32 tensor data in index order. The manifest is
canonical (sorted keys) so save -> load -> save is byte-identical.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import FormatError
from .model import Model, ModelConfig
from .numcore import Tensor, parameter

MAGIC = b"VMSST1"


@dataclass
class LoadedCheckpoint:
    model: Model
    step: int
    training: Optional[dict]
    adam_m: Optional[dict[str, np.ndarray]]
    adam_v: Optional[dict[str, np.ndarray]]


def _tensor_index(model: Model, adam_m, adam_v) -> list[tuple[str, str, np.ndarray]]:
    entries = [("param", name, model.params[name].data) for name in sorted(model.params)]
    if adam_m is not None:
        entries += [("adam_m", name, adam_m[name]) for name in sorted(adam_m)]
        entries += [("adam_v", name, adam_v[name]) for name in sorted(adam_v)]
    return entries


def save_checkpoint(path, model: Model, step: int = 0,
                    adam_m: Optional[dict] = None, adam_v: Optional[dict] = None,
                    training: Optional[dict] = None) -> None:
    entries = _tensor_index(model, adam_m, adam_v)
    manifest = {
        "model_config": model.config.to_dict(),
        "step": int(step),
        "training": training,
        "tensors": [[kind, name, list(arr.shape)] for kind, name, arr in entries],
    }
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for _, _, arr in entries:
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path) -> LoadedCheckpoint:
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) + 4 or raw[: len(MAGIC)] != MAGIC:
        raise FormatError(f"{path}: missing VMSST1 magic")
    (mlen,) = struct.unpack_from("<I", raw, len(MAGIC))
    start = len(MAGIC) + 4
    if start + mlen > len(raw):
        raise FormatError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(raw[start : start + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: bad manifest: {e}") from None
    for key in ("model_config", "step", "tensors"):
        if key not in manifest:
            raise FormatError(f"{path}: manifest missing {key!r}")
    offset = start + mlen
    tensors: dict[str, dict[str, np.ndarray]] = {"param": {}, "adam_m": {}, "adam_v": {}}
    for kind, name, shape in manifest["tensors"]:
        if kind not in tensors:
            raise FormatError(f"{path}: unknown tensor kind {kind!r}")
        n = int(np.prod(shape)) if shape else 1
        nbytes = 4 * n
        if offset + nbytes > len(raw):
            raise FormatError(f"{path}: truncated tensor data at {kind}:{name}")
        arr = np.frombuffer(raw, dtype="<f4", count=n, offset=offset).copy()
        tensors[kind][name] = arr.reshape(shape)
        offset += nbytes
    if offset != len(raw):
        raise FormatError(f"{path}: {len(raw) - offset} trailing bytes")
    config = ModelConfig.from_dict(manifest["model_config"])
    params: dict[str, Tensor] = {name: parameter(arr) for name, arr in tensors["param"].items()}
    model = Model(config, params)
    adam_m = tensors["adam_m"] or None
    adam_v = tensors["adam_v"] or None
    return LoadedCheckpoint(
        model=model,
        step=int(manifest["step"]),
        training=manifest.get("training"),
        adam_m=adam_m,
        adam_v=adam_v,
    )
