"""Binary checkpoint files for base models and group heads.

Layout: an ASCII header of ``key=value`` lines between the magic line
``GROUPREC-CHECKPOINT`` and a line ``END``, then the arrays listed in the
``arrays`` key, in order, as raw little-endian float32 in row-major order.
"""
from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np

from .numkit import Activation, DenseLayer
from .models import BaseModel, GroupHead, GroupModel, HeadInput, ModelKind

MAGIC = "GROUPREC-CHECKPOINT"
FORMAT_VERSION = 1
_LE32 = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


def _encode(header: dict, arrays: list[tuple[str, np.ndarray]]) -> bytes:
    header = dict(header)
    header["format_version"] = FORMAT_VERSION
    header["arrays"] = ",".join(f"{name}:{'x'.join(map(str, a.shape))}" for name, a in arrays)
    lines = [MAGIC] + [f"{k}={v}" for k, v in header.items()] + ["END"]
    blob = ("\n".join(lines) + "\n").encode("ascii")
    return blob + b"".join(np.ascontiguousarray(a, dtype=_LE32).tobytes() for _, a in arrays)


def _decode(blob: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    end = blob.find(b"\nEND\n")
    if not blob.startswith(MAGIC.encode()) or end < 0:
        raise CheckpointError("not a checkpoint file")
    header = {}
    for line in blob[:end].decode("ascii").splitlines()[1:]:
        key, _, value = line.partition("=")
        header[key] = value
    if int(header.get("format_version", -1)) != FORMAT_VERSION:
        raise CheckpointError(f"unsupported format version {header.get('format_version')}")
    offset = end + len(b"\nEND\n")
    arrays = {}
    for spec in filter(None, header["arrays"].split(",")):
        name, _, shape = spec.partition(":")
        dims = tuple(int(d) for d in shape.split("x"))
        n = int(np.prod(dims)) * 4
        chunk = blob[offset: offset + n]
        if len(chunk) != n:
            raise CheckpointError(f"truncated array {name}")
        arrays[name] = np.frombuffer(chunk, dtype=_LE32).astype(np.float32).reshape(dims)
        offset += n
    if offset != len(blob):
        raise CheckpointError("trailing bytes after arrays")
    return header, arrays


def _layer_arrays(prefix: str, layers) -> list[tuple[str, np.ndarray]]:
    out = []
    for j, layer in enumerate(layers):
        out += [(f"{prefix}.{j}.weights", layer.weights), (f"{prefix}.{j}.bias", layer.bias)]
    return out


def _layers_from(prefix: str, arrays: dict, activations: list[str]) -> list[DenseLayer]:
    return [DenseLayer(arrays[f"{prefix}.{j}.weights"].copy(), arrays[f"{prefix}.{j}.bias"].copy(),
                       Activation(act)) for j, act in enumerate(activations)]


def _csv(values) -> str:
    return ",".join(str(v) for v in values)


def base_to_bytes(base: BaseModel, id_map_digest: str = "", extra: dict | None = None) -> bytes:
    header = {
        "model_kind": base.kind.value,
        "num_users": base.num_users,
        "num_items": base.num_items,
        "latent_dim": base.k,
        "layer_widths": _csv(layer.out_dim for layer in base.tower),
        "activations": _csv(layer.activation.value for layer in base.tower),
        "seed": "" if base.seed is None else base.seed,
        "init": "embeddings=normal(0,0.01);dense=glorot_uniform",
        "id_map_digest": id_map_digest,
        "frozen": int(base.frozen),
        **(extra or {}),
    }
    arrays = [("user_embeddings", base.user_embeddings), ("item_embeddings", base.item_embeddings)]
    return _encode(header, arrays + _layer_arrays("tower", base.tower))


def base_from_bytes(blob: bytes) -> tuple[BaseModel, dict]:
    header, arrays = _decode(blob)
    kind = ModelKind(header["model_kind"])
    acts = [a for a in header["activations"].split(",") if a]
    seed = int(header["seed"]) if header.get("seed") else None
    base = BaseModel(kind, arrays["user_embeddings"].copy(), arrays["item_embeddings"].copy(),
                     _layers_from("tower", arrays, acts), seed=seed)
    if header.get("frozen") == "1":
        base.freeze()
    return base, header


def head_to_bytes(model: GroupModel, base_digest: str = "", extra: dict | None = None) -> bytes:
    head = model.head
    header = {
        "model_kind": f"{model.name.lower()}-head",
        "num_users": head.input_dim,
        "latent_dim": head.output_dim,
        "group_size": model.group_size,
        "head_input": head.input_mode.value,
        "layer_widths": _csv(head.widths),
        "activations": _csv(layer.activation.value for layer in head.layers),
        "seed": "" if head.seed is None else head.seed,
        "init": "dense=glorot_uniform",
        "base_digest": base_digest,
        **(extra or {}),
    }
    return _encode(header, _layer_arrays("head", head.layers))


def head_from_bytes(blob: bytes) -> tuple[GroupHead, dict]:
    header, arrays = _decode(blob)
    acts = header["activations"].split(",")
    seed = int(header["seed"]) if header.get("seed") else None
    head = GroupHead(_layers_from("head", arrays, acts), int(header["num_users"]),
                     HeadInput(header.get("head_input", "embedding")), seed=seed)
    return head, header


def digest(blob: bytes) -> str:
    return hashlib.sha256(blob).hexdigest()


def save(blob: bytes, path) -> str:
    Path(path).write_bytes(blob)
    return digest(blob)


def load_base(path) -> tuple[BaseModel, dict]:
    return base_from_bytes(Path(path).read_bytes())


def load_head(path) -> tuple[GroupHead, dict]:
    return head_from_bytes(Path(path).read_bytes())
