"""Checkpoint directories: ``manifest.json`` plus a raw ``weights.bin`` blob.

Tensors are little-endian and row-major, each starting at an 8-byte aligned
offset. Parameters are float32 (``f32le``); the float64 mask buffers keep their
precision as ``f64le`` so tuned masks round-trip bit-exactly. Gaps are zero
padding and the blob ends where the last tensor ends.
"""

import hashlib
import json
from pathlib import Path
from typing import Any, Dict, List, Union

import numpy as np
import torch
from pydantic import ValidationError

from ..models import ModelConfig
from ..utils import get_logger, CheckpointError, InputOutputError
from .transformer import TransformerModel

logger = get_logger(__name__)

MANIFEST_NAME = "manifest.json"
WEIGHTS_NAME = "weights.bin"
CHECKPOINT_SCHEMA_VERSION = 1
# manifest dtype -> (numpy dtype, torch dtype)
DTYPES = {
    "f32le": ("<f4", torch.float32),
    "f64le": ("<f8", torch.float64),
}
ALIGNMENT = 8

PathLike = Union[str, Path]


def _aligned(offset: int) -> int:
    return (offset + ALIGNMENT - 1) // ALIGNMENT * ALIGNMENT


def save_checkpoint(model: TransformerModel, path: PathLike) -> Path:
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise InputOutputError(f"cannot create checkpoint directory {path}: {e}", path=str(path))

    chunks: List[bytes] = []
    entries: List[Dict[str, Any]] = []
    offset = 0
    for name, tensor in model.state_dict().items():
        dtype = "f64le" if tensor.dtype == torch.float64 else "f32le"
        data = tensor.detach().cpu().numpy().astype(DTYPES[dtype][0], copy=False)
        raw = np.ascontiguousarray(data).tobytes()
        start = _aligned(offset)
        if start > offset:
            chunks.append(b"\x00" * (start - offset))
        chunks.append(raw)
        entries.append({
            "name": name,
            "shape": list(data.shape),
            "dtype": dtype,
            "offset": start,
            "byte_len": len(raw),
        })
        offset = start + len(raw)

    manifest = {
        "schema_version": CHECKPOINT_SCHEMA_VERSION,
        "config": model.config.model_dump(mode="json"),
        "layer_indices": model.layer_indices,
        "tensors": entries,
    }
    try:
        (path / WEIGHTS_NAME).write_bytes(b"".join(chunks))
        (path / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as e:
        raise InputOutputError(f"cannot write checkpoint {path}: {e}", path=str(path))

    logger.info("Checkpoint saved", path=str(path), tensors=len(entries), bytes=offset)
    return path


def _read_manifest(path: Path) -> Dict[str, Any]:
    manifest_path = path / MANIFEST_NAME
    try:
        text = manifest_path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise InputOutputError(f"checkpoint manifest not found: {manifest_path}", path=str(manifest_path))
    except (OSError, UnicodeDecodeError) as e:
        raise CheckpointError(f"cannot read manifest {manifest_path}: {e}", path=str(manifest_path))
    try:
        manifest = json.loads(text)
    except json.JSONDecodeError as e:
        raise CheckpointError(f"malformed manifest {manifest_path}: {e}", path=str(manifest_path))
    if not isinstance(manifest, dict):
        raise CheckpointError("malformed manifest: top level must be an object")
    for key in ("config", "layer_indices", "tensors"):
        if key not in manifest:
            raise CheckpointError(f"malformed manifest: missing '{key}'")
    if manifest.get("schema_version", CHECKPOINT_SCHEMA_VERSION) != CHECKPOINT_SCHEMA_VERSION:
        raise CheckpointError(f"unsupported checkpoint schema_version {manifest['schema_version']}")
    return manifest


def _check_entry(entry: Any) -> Dict[str, Any]:
    if not isinstance(entry, dict):
        raise CheckpointError("malformed manifest: tensor entry must be an object")
    name = entry.get("name")
    if not isinstance(name, str):
        raise CheckpointError("malformed manifest: tensor entry without a name")
    shape, offset, byte_len = entry.get("shape"), entry.get("offset"), entry.get("byte_len")
    if not isinstance(shape, list) or not all(isinstance(d, int) and d >= 0 for d in shape):
        raise CheckpointError(f"malformed shape for tensor {name}", tensor=name)
    if entry.get("dtype") not in DTYPES:
        raise CheckpointError(f"unsupported dtype {entry.get('dtype')!r} for tensor {name}", tensor=name)
    if not isinstance(offset, int) or offset < 0 or offset % ALIGNMENT:
        raise CheckpointError(f"misaligned offset for tensor {name}", tensor=name, offset=offset)
    itemsize = np.dtype(DTYPES[entry["dtype"]][0]).itemsize
    if not isinstance(byte_len, int) or byte_len != itemsize * int(np.prod(shape, dtype=np.int64)):
        raise CheckpointError(f"byte_len does not match shape for tensor {name}", tensor=name)
    return entry


def load_checkpoint(path: PathLike) -> TransformerModel:
    path = Path(path)
    manifest = _read_manifest(path)

    try:
        config = ModelConfig.model_validate(manifest["config"])
    except ValidationError as e:
        raise CheckpointError(f"invalid model config in manifest: {e.errors()[0]['msg']}")
    indices = manifest["layer_indices"]
    if not isinstance(indices, list) or not all(isinstance(i, int) for i in indices):
        raise CheckpointError("malformed manifest: layer_indices must be a list of integers")
    if not isinstance(manifest["tensors"], list):
        raise CheckpointError("malformed manifest: tensors must be a list")

    try:
        blob = (path / WEIGHTS_NAME).read_bytes()
    except FileNotFoundError:
        raise InputOutputError(f"checkpoint weights not found: {path / WEIGHTS_NAME}", path=str(path))
    except OSError as e:
        raise InputOutputError(f"cannot read {path / WEIGHTS_NAME}: {e}", path=str(path))

    entries = sorted((_check_entry(e) for e in manifest["tensors"]), key=lambda e: e["offset"])
    end = 0
    tensors: Dict[str, torch.Tensor] = {}
    for entry in entries:
        name = entry["name"]
        if name in tensors:
            raise CheckpointError(f"duplicate tensor {name}", tensor=name)
        if entry["offset"] < end:
            raise CheckpointError(f"overlapping offsets at tensor {name}", tensor=name, offset=entry["offset"])
        end = entry["offset"] + entry["byte_len"]
        if end > len(blob):
            raise CheckpointError(f"truncated tensor {name}", tensor=name, blob_bytes=len(blob))
        np_dtype, torch_dtype = DTYPES[entry["dtype"]]
        data = np.frombuffer(blob, dtype=np_dtype, count=entry["byte_len"] // np.dtype(np_dtype).itemsize,
                             offset=entry["offset"])
        native = data.astype(data.dtype.newbyteorder("="))
        tensors[name] = torch.from_numpy(native.reshape(entry["shape"])).to(torch_dtype)
    if end != len(blob):
        raise CheckpointError(f"weights blob has {len(blob) - end} trailing bytes", blob_bytes=len(blob))

    model = TransformerModel(config, indices)
    expected = model.state_dict()
    missing = sorted(set(expected) - set(tensors))
    unexpected = sorted(set(tensors) - set(expected))
    if missing or unexpected:
        raise CheckpointError(
            f"checkpoint tensors do not match the model (missing {missing[:3]}, unexpected {unexpected[:3]})",
        )
    for name, tensor in tensors.items():
        if tuple(tensor.shape) != tuple(expected[name].shape):
            raise CheckpointError(f"shape mismatch for tensor {name}", tensor=name)
    model.load_state_dict(tensors)

    logger.info("Checkpoint loaded", path=str(path), layers=len(indices), tensors=len(tensors))
    return model


def checkpoint_digest(path: PathLike) -> str:
    """sha256 over the manifest bytes followed by the weights bytes."""
    path = Path(path)
    digest = hashlib.sha256()
    try:
        digest.update((path / MANIFEST_NAME).read_bytes())
        digest.update((path / WEIGHTS_NAME).read_bytes())
    except OSError as e:
        raise InputOutputError(f"cannot read checkpoint {path}: {e}", path=str(path))
    return digest.hexdigest()
