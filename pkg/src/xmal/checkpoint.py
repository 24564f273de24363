"""Versioned binary checkpoint container.

Layout: magic "XMAL", format version (u32 LE), a JSON metadata block, then
named parameter arrays (name, dtype, shape, row-major little-endian data).
One container holds any mix of components; names are namespaced like
"text_encoder.token_embed.weight" or "opt.proj.0.exp_avg".
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .config import ModelConfig
from .encoders import ToyImageEncoder, ToyTextEncoder

MAGIC = b"XMAL"
FORMAT_VERSION = 1


class CorruptCheckpointError(ValueError):
    """File is truncated, has the wrong magic, or fails to parse."""


class ConfigMismatchError(ValueError):
    """Checkpoint architecture disagrees with the requested configuration."""


def save_container(path: str | Path, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(meta_bytes)))
        fh.write(meta_bytes)
        fh.write(struct.pack("<Q", len(arrays)))
        for name in sorted(arrays):
            arr = np.asarray(arrays[name])
            if arr.ndim > 0 and not arr.flags["C_CONTIGUOUS"]:
                arr = np.ascontiguousarray(arr)
            arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
            name_b = name.encode("utf-8")
            dtype_b = arr.dtype.str.encode("ascii")
            fh.write(struct.pack("<H", len(name_b)))
            fh.write(name_b)
            fh.write(struct.pack("<B", len(dtype_b)))
            fh.write(dtype_b)
            fh.write(struct.pack("<B", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<Q", dim))
            fh.write(arr.tobytes())


def _read_exact(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CorruptCheckpointError("unexpected end of file")
    return buf


def load_container(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise CorruptCheckpointError(f"checkpoint not found: {path}")
    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != MAGIC:
            raise CorruptCheckpointError(f"{path} is not a checkpoint container")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != FORMAT_VERSION:
            raise CorruptCheckpointError(f"unsupported container version {version}")
        (meta_len,) = struct.unpack("<Q", _read_exact(fh, 8))
        try:
            meta = json.loads(_read_exact(fh, meta_len).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CorruptCheckpointError(f"bad metadata block: {exc}") from exc
        (n_arrays,) = struct.unpack("<Q", _read_exact(fh, 8))
        arrays = {}
        for _ in range(n_arrays):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2))
            name = _read_exact(fh, name_len).decode("utf-8")
            (dtype_len,) = struct.unpack("<B", _read_exact(fh, 1))
            dtype = np.dtype(_read_exact(fh, dtype_len).decode("ascii"))
            (ndim,) = struct.unpack("<B", _read_exact(fh, 1))
            shape = tuple(struct.unpack("<Q", _read_exact(fh, 8))[0] for _ in range(ndim))
            n_bytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
            data = _read_exact(fh, n_bytes)
            arrays[name] = np.frombuffer(data, dtype=dtype).reshape(shape).copy()
        if fh.read(1):
            raise CorruptCheckpointError("trailing bytes after last array")
    return meta, arrays


# ---------------------------------------------------------------------------
# Module <-> array helpers
# ---------------------------------------------------------------------------

def module_arrays(module: nn.Module, prefix: str) -> dict[str, np.ndarray]:
    """Flatten a module's state dict (parameters and buffers) to named arrays."""
    out = {}
    for name, tensor in module.state_dict().items():
        out[f"{prefix}.{name}"] = tensor.detach().cpu().numpy()
    return out


def load_module_arrays(module: nn.Module, prefix: str, arrays: dict[str, np.ndarray]) -> None:
    state = {}
    want = module.state_dict()
    for name, tensor in want.items():
        key = f"{prefix}.{name}"
        if key not in arrays:
            raise ConfigMismatchError(f"checkpoint missing array {key}")
        arr = arrays[key]
        if tuple(arr.shape) != tuple(tensor.shape):
            raise ConfigMismatchError(
                f"{key}: checkpoint shape {tuple(arr.shape)} != model shape {tuple(tensor.shape)}")
        state[name] = torch.as_tensor(arr.copy()).to(tensor.dtype)
    module.load_state_dict(state)


def state_checksum(module: nn.Module) -> str:
    """SHA-256 over all parameters and buffers; detects any bit-level drift."""
    digest = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        digest.update(name.encode())
        digest.update(tensor.detach().cpu().numpy().tobytes())
    return digest.hexdigest()


# ---------------------------------------------------------------------------
# Encoder checkpoints
# ---------------------------------------------------------------------------

_ENCODER_KINDS = {"image_encoder": ToyImageEncoder, "text_encoder": ToyTextEncoder}


def save_encoder_checkpoint(path: str | Path, encoder: nn.Module, cfg: ModelConfig) -> None:
    kind = ("image_encoder" if isinstance(encoder, ToyImageEncoder) else
            "text_encoder" if isinstance(encoder, ToyTextEncoder) else None)
    if kind is None:
        raise ValueError(f"unsupported encoder type {type(encoder).__name__}")
    meta = {
        "kind": kind,
        "model": asdict(cfg),
        "frozen": bool(getattr(encoder, "frozen", False)),
    }
    save_container(path, meta, module_arrays(encoder, kind))


def load_encoder_checkpoint(path: str | Path, expect: ModelConfig | None = None) -> nn.Module:
    """Rebuild an encoder from its container; the frozen flag is honored."""
    meta, arrays = load_container(path)
    kind = meta.get("kind")
    if kind not in _ENCODER_KINDS:
        raise ConfigMismatchError(f"container holds {kind!r}, not an encoder")
    saved_cfg = ModelConfig(**meta["model"])
    if expect is not None:
        for field_name in ("d_global", "c_regional", "d_text", "t_max", "vocab_size"):
            got, want = getattr(saved_cfg, field_name), getattr(expect, field_name)
            if got != want:
                raise ConfigMismatchError(
                    f"checkpoint {field_name}={got} but configuration expects {want}")
    encoder = _ENCODER_KINDS[kind](saved_cfg)
    load_module_arrays(encoder, kind, arrays)
    encoder.loaded = True
    if meta.get("frozen"):
        encoder.freeze()
    return encoder
