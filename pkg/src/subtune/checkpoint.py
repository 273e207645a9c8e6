"""Single-file binary checkpoints: a magic tag, a length-prefixed JSON
manifest with sorted keys, then raw float64 matrix blobs in manifest order.
Writing the same state twice yields byte-identical files."""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np

from .decomposition import layer_from_bytes, layer_to_bytes
from .model import Block, DecomposedLayer, Model, ModelConfig, PROJECTION_NAMES

MAGIC = b"SUBT0001"
_LEN = struct.Struct("<Q")

_PLAIN_SLOTS = ("norm1_gain", "norm1_bias", "q", "k", "v", "o", "norm2_gain", "norm2_bias", "mlp_in", "mlp_out")
_DECOMPOSED_PLAIN = ("norm1_gain", "norm1_bias", "norm2_gain", "norm2_bias", "mlp_in", "mlp_out")


def _as_matrix(arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float64)
    return arr.reshape(1, -1) if arr.ndim == 1 else arr


def _matrix_bytes(arr: np.ndarray) -> bytes:
    from .linalg import matrix_to_bytes

    return matrix_to_bytes(_as_matrix(arr))


def _plain_names(cfg: ModelConfig, decomposed: bool) -> list[str]:
    names = ["token_embed"]
    slots = _DECOMPOSED_PLAIN if decomposed else _PLAIN_SLOTS
    for b in range(cfg.n_blocks):
        names.extend(f"block{b}.{slot}" for slot in slots)
    names.append("head")
    return names


def save_model(
    path: str | Path,
    model: Model,
    *,
    step: int = 0,
    rng_state: dict | None = None,
    config_echo: dict | None = None,
) -> None:
    cfg = model.config
    decomposed = model.decomposed
    manifest = {
        "format": 1,
        "kind": "model",
        "step": int(step),
        "decomposed": decomposed,
        "model": {
            "d_model": cfg.d_model,
            "n_blocks": cfg.n_blocks,
            "n_tokens": cfg.n_tokens,
            "n_classes_pretrain": cfg.n_classes_pretrain,
            "n_subspaces": cfg.decomposition.n_subspaces,
            "n_outputs": model.n_outputs,
        },
        "arrays": _plain_names(cfg, decomposed),
        "rng_state": rng_state,
        "config": config_echo,
    }
    if decomposed:
        manifest["decomposed_layers"] = []
        for b, block in enumerate(model.blocks):
            for slot in PROJECTION_NAMES:
                layer: DecomposedLayer = getattr(block, slot)
                manifest["decomposed_layers"].append(
                    {
                        "name": f"block{b}.{slot}",
                        "layer_id": layer.layer_id,
                        "semantic_rank": layer.semantic_rank,
                        "artifact_ranks": [a.rank for a in layer.artifacts],
                    }
                )
    body = io.BytesIO()
    for name in manifest["arrays"]:
        if name == "token_embed":
            body.write(_matrix_bytes(model.token_embed))
        elif name == "head":
            body.write(_matrix_bytes(model.head))
        else:
            b_idx, slot = name.split(".")
            body.write(_matrix_bytes(getattr(model.blocks[int(b_idx[5:])], slot)))
    if decomposed:
        for b, block in enumerate(model.blocks):
            for slot in PROJECTION_NAMES:
                body.write(layer_to_bytes(getattr(block, slot)))
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    with Path(path).open("wb") as fh:
        fh.write(MAGIC)
        fh.write(_LEN.pack(len(blob)))
        fh.write(blob)
        fh.write(body.getvalue())


def read_manifest(path: str | Path) -> dict:
    with Path(path).open("rb") as fh:
        head = fh.read(len(MAGIC))
        if head != MAGIC:
            raise ValueError(f"{path} is not a checkpoint (bad magic)")
        (length,) = _LEN.unpack(fh.read(_LEN.size))
        return json.loads(fh.read(length))


def load_model(path: str | Path) -> tuple[Model, dict]:
    from .linalg import matrix_from_bytes

    raw = Path(path).read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise ValueError(f"{path} is not a checkpoint (bad magic)")
    (length,) = _LEN.unpack(raw[len(MAGIC) : len(MAGIC) + _LEN.size])
    offset = len(MAGIC) + _LEN.size
    manifest = json.loads(raw[offset : offset + length])
    offset += length
    spec = manifest["model"]
    from .decomposition import DecompositionConfig

    cfg = ModelConfig(
        d_model=spec["d_model"],
        n_blocks=spec["n_blocks"],
        n_tokens=spec["n_tokens"],
        n_classes_pretrain=spec["n_classes_pretrain"],
        decomposition=DecompositionConfig(n_subspaces=spec["n_subspaces"]),
    )
    arrays: dict[str, np.ndarray] = {}
    for name in manifest["arrays"]:
        arr, offset = matrix_from_bytes(raw, offset)
        arrays[name] = arr
    decomposed_layers: dict[str, DecomposedLayer] = {}
    if manifest["decomposed"]:
        for entry in manifest["decomposed_layers"]:
            layer, offset = layer_from_bytes(raw, offset)
            if layer.layer_id != entry["layer_id"]:
                raise ValueError(
                    f"checkpoint layer id mismatch for {entry['name']}: "
                    f"{layer.layer_id} != {entry['layer_id']}"
                )
            decomposed_layers[entry["name"]] = layer
    if offset != len(raw):
        raise ValueError(f"{len(raw) - offset} trailing bytes after checkpoint payload")

    def vec(name: str) -> np.ndarray:
        return arrays[name].reshape(-1)

    blocks = []
    for b in range(cfg.n_blocks):
        if manifest["decomposed"]:
            projections = {slot: decomposed_layers[f"block{b}.{slot}"] for slot in PROJECTION_NAMES}
        else:
            projections = {slot: arrays[f"block{b}.{slot}"] for slot in PROJECTION_NAMES}
        blocks.append(
            Block(
                norm1_gain=vec(f"block{b}.norm1_gain"),
                norm1_bias=vec(f"block{b}.norm1_bias"),
                norm2_gain=vec(f"block{b}.norm2_gain"),
                norm2_bias=vec(f"block{b}.norm2_bias"),
                mlp_in=arrays[f"block{b}.mlp_in"],
                mlp_out=arrays[f"block{b}.mlp_out"],
                **projections,
            )
        )
    model = Model(config=cfg, token_embed=arrays["token_embed"], blocks=blocks, head=arrays["head"])
    return model, manifest
