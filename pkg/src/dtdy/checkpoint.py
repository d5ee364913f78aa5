"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"DTDYCKPT"  uint32 version
    uint32 n     n bytes of UTF-8 ``key = value`` text (model config + metadata)
    uint32 count
    count x { uint16 len, name bytes, uint8 ndim, ndim x uint64 dims, <f8 data }

Writing the result of a read reproduces the file byte for byte.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from dtdy.model import ModelConfig, SpeakerNet, build_model

MAGIC = b"DTDYCKPT"
VERSION = 1


class CheckpointError(Exception):
    pass


def write_checkpoint(path, meta_text: str, tensors: dict[str, np.ndarray]) -> None:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    meta = meta_text.encode("utf-8")
    parts += [struct.pack("<I", len(meta)), meta, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


def read_checkpoint(path) -> tuple[str, dict[str, np.ndarray]]:
    buf = Path(path).read_bytes()
    if buf[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", buf, 8)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    pos = 12
    (n,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    meta = buf[pos:pos + n].decode("utf-8")
    pos += n
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (ln,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos:pos + ln].decode("utf-8")
        pos += ln
        (ndim,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}Q", buf, pos)
        pos += 8 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(buf, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * size
        tensors[name] = arr
    if pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - pos} trailing bytes")
    return meta, tensors


def model_state(model) -> dict[str, np.ndarray]:
    state = {f"param/{k}": p.data for k, p in model.named_parameters()}
    state.update({f"buffer/{k}": b for k, b in model.named_buffers()})
    return state


def load_model_state(model, tensors: dict[str, np.ndarray]) -> None:
    for k, p in model.named_parameters():
        arr = tensors.get(f"param/{k}")
        if arr is None or arr.shape != p.shape:
            raise CheckpointError(f"parameter {k} missing or mis-shaped in checkpoint")
        p.data[...] = arr
    for k, b in model.named_buffers():
        arr = tensors.get(f"buffer/{k}")
        if arr is None or arr.shape != b.shape:
            raise CheckpointError(f"buffer {k} missing or mis-shaped in checkpoint")
        b[...] = arr


def split_meta(text: str) -> tuple[str, dict[str, str]]:
    """Separate model-config lines from ``train.*`` metadata lines."""
    model_lines, extra = [], {}
    for line in text.splitlines():
        key = line.partition("=")[0].strip()
        if key.startswith("train."):
            extra[key[len("train."):]] = line.partition("=")[2].strip()
        else:
            model_lines.append(line)
    return "\n".join(model_lines) + "\n", extra


def save_model(path, model: SpeakerNet, extra_tensors: dict[str, np.ndarray] | None = None,
               extra_meta: dict[str, str] | None = None) -> None:
    meta = model.cfg.to_text()
    for k, v in (extra_meta or {}).items():
        meta += f"train.{k} = {v}\n"
    tensors = model_state(model)
    tensors.update(extra_tensors or {})
    write_checkpoint(path, meta, tensors)


def load_model(path) -> tuple[SpeakerNet, dict[str, np.ndarray], dict[str, str]]:
    meta, tensors = read_checkpoint(path)
    model_text, extra_meta = split_meta(meta)
    model = build_model(ModelConfig.from_text(model_text))
    load_model_state(model, tensors)
    extras = {k: v for k, v in tensors.items() if not k.startswith(("param/", "buffer/"))}
    return model, extras, extra_meta
