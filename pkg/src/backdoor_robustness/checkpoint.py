"""Bit-exact checkpoint and dataset serialization.

Checkpoint layout (all integers little-endian)::

    b"BPRL" | version u32 | arch tag u8 | layer count u32 | widths u32... | params f32...

A JSON sidecar next to each checkpoint carries the seed, config hash, role
label and a SHA-256 of the parameter bytes, checked on load.
"""
import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field
from datetime import datetime, timezone
from enum import IntEnum
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np

from .data_forge import LabeledDataset
from .errors import CheckpointError, InvalidInputError
from .nn_core import ArchSpec, Model
from .qra import QraGenerator

logger = logging.getLogger(__name__)

MAGIC = b"BPRL"
DATASET_MAGIC = b"BPRD"
FORMAT_VERSION = 1

_HEADER = struct.Struct("<4sIBI")
_DATASET_HEADER = struct.Struct("<4sIIIIII")


class ArchTag(IntEnum):
    CLASSIFIER = 0
    QRA_GENERATOR = 1


@dataclass
class CheckpointMeta:
    """Sidecar contents."""

    role: str
    seed: int
    config_hash: str
    arch_tag: ArchTag = ArchTag.CLASSIFIER
    extra: Dict[str, Any] = field(default_factory=dict)


def sidecar_path(path: Union[str, Path]) -> Path:
    return Path(path).with_suffix(".json")


def encode_model(model: Model, tag: ArchTag = ArchTag.CLASSIFIER) -> bytes:
    widths = model.arch.layer_widths
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, int(tag), len(widths))
    body = struct.pack(f"<{len(widths)}I", *widths)
    return header + body + np.asarray(model.params, dtype="<f4").tobytes()


def decode_model(blob: bytes) -> Tuple[Model, ArchTag]:
    if len(blob) < _HEADER.size:
        raise CheckpointError("checkpoint is truncated")
    magic, version, tag, n_layers = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointError(f"bad checkpoint magic {magic!r}")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        tag = ArchTag(tag)
    except ValueError as e:
        raise CheckpointError(f"unknown architecture tag {tag}") from e
    offset = _HEADER.size + 4 * n_layers
    if len(blob) < offset:
        raise CheckpointError(f"checkpoint is truncated inside its {n_layers} layer widths")
    widths = struct.unpack_from(f"<{n_layers}I", blob, _HEADER.size)
    try:
        arch = ArchSpec(widths)
    except InvalidInputError as e:
        raise CheckpointError(f"checkpoint carries a bad architecture: {e}") from e
    expected = offset + 4 * arch.n_params
    if len(blob) != expected:
        raise CheckpointError(f"checkpoint holds {len(blob)} bytes, expected {expected}")
    params = np.frombuffer(blob, dtype="<f4", offset=offset)
    return Model(arch, params.astype(np.float32)), tag


def _digest(blob: bytes) -> str:
    return hashlib.sha256(blob).hexdigest()


def save_checkpoint(path: Union[str, Path], model: Model, meta: CheckpointMeta) -> Path:
    """Write the binary checkpoint and its JSON sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = encode_model(model, meta.arch_tag)
    path.write_bytes(blob)
    sidecar = {
        "role": meta.role,
        "seed": meta.seed,
        "config_hash": meta.config_hash,
        "arch_tag": int(meta.arch_tag),
        "layer_widths": list(model.arch.layer_widths),
        "sha256": _digest(blob),
        "created_at": datetime.now(timezone.utc).isoformat(),
        **meta.extra,
    }
    sidecar_path(path).write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    logger.info("saved %s checkpoint to %s", meta.role, path)
    return path


def load_checkpoint(
    path: Union[str, Path], expected_config_hash: Optional[str] = None
) -> Tuple[Model, CheckpointMeta]:
    """Read a checkpoint, verifying its bytes and (optionally) the config hash."""
    path = Path(path)
    try:
        blob = path.read_bytes()
    except FileNotFoundError as e:
        raise CheckpointError(f"checkpoint not found: {path}") from e
    model, tag = decode_model(blob)
    side = sidecar_path(path)
    if not side.exists():
        if expected_config_hash is not None:
            raise CheckpointError(f"missing sidecar {side}; cannot verify config hash")
        return model, CheckpointMeta(role="unknown", seed=0, config_hash="", arch_tag=tag)
    sidecar = json.loads(side.read_text())
    if sidecar.get("sha256") != _digest(blob):
        raise CheckpointError(f"checkpoint bytes of {path} do not match its sidecar")
    if expected_config_hash is not None and sidecar.get("config_hash") != expected_config_hash:
        raise CheckpointError(
            f"{path} was produced by config {sidecar.get('config_hash')}, expected {expected_config_hash}"
        )
    known = {"role", "seed", "config_hash", "arch_tag", "layer_widths", "sha256", "created_at"}
    meta = CheckpointMeta(
        role=sidecar["role"],
        seed=int(sidecar["seed"]),
        config_hash=sidecar["config_hash"],
        arch_tag=tag,
        extra={k: v for k, v in sidecar.items() if k not in known},
    )
    return model, meta


def save_generator(path: Union[str, Path], gen: QraGenerator, meta: CheckpointMeta) -> Path:
    meta.arch_tag = ArchTag.QRA_GENERATOR
    meta.extra = {**meta.extra, "epsilon": gen.epsilon, "alpha": gen.alpha}
    return save_checkpoint(path, gen.mlp, meta)


def load_generator(
    path: Union[str, Path], expected_config_hash: Optional[str] = None
) -> Tuple[QraGenerator, CheckpointMeta]:
    model, meta = load_checkpoint(path, expected_config_hash)
    if meta.arch_tag != ArchTag.QRA_GENERATOR:
        raise CheckpointError(f"{path} is not a QRA generator checkpoint")
    return QraGenerator(model, float(meta.extra["epsilon"]), float(meta.extra["alpha"])), meta


class CheckpointStore:
    """Named checkpoints under one output directory."""

    def __init__(self, root: Union[str, Path], config_hash: str, seed: int):
        """
        Initialize the store.

        Args:
            root: Directory holding ``<name>.bprl`` files and sidecars
            config_hash: Hash stamped into (and verified against) every sidecar
            seed: Experiment seed stamped into every sidecar
        """
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.config_hash = config_hash
        self.seed = seed

    def path(self, name: str) -> Path:
        return self.root / f"{name}.bprl"

    def save_model(self, name: str, model: Model, role: Optional[str] = None, **extra) -> Path:
        meta = CheckpointMeta(role or name, self.seed, self.config_hash, extra=extra)
        return save_checkpoint(self.path(name), model, meta)

    def save_generator(self, name: str, gen: QraGenerator, role: Optional[str] = None) -> Path:
        meta = CheckpointMeta(role or name, self.seed, self.config_hash)
        return save_generator(self.path(name), gen, meta)

    def load_model(self, name: str) -> Model:
        model, _ = load_checkpoint(self.path(name), self.config_hash)
        return model

    def list_checkpoints(self) -> List[str]:
        return sorted(p.stem for p in self.root.glob("*.bprl"))


def save_dataset(path: Union[str, Path], data: LabeledDataset) -> Path:
    """Binary dataset blob plus a JSON manifest next to it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    h, w, c = data.dims
    header = _DATASET_HEADER.pack(DATASET_MAGIC, FORMAT_VERSION, len(data), h, w, c, data.class_count)
    path.write_bytes(
        header
        + np.asarray(data.pixels, dtype="<f4").tobytes()
        + np.asarray(data.labels, dtype="<u4").tobytes()
        + np.asarray(data.original_labels, dtype="<u4").tobytes()
        + np.asarray(data.provenance, dtype="u1").tobytes()
    )
    manifest = {
        "dims": [h, w, c],
        "class_count": data.class_count,
        "n": len(data),
        "provenance": data.provenance_counts(),
    }
    sidecar_path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def load_dataset(path: Union[str, Path]) -> LabeledDataset:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except FileNotFoundError as e:
        raise CheckpointError(f"dataset blob not found: {path}") from e
    if len(blob) < _DATASET_HEADER.size:
        raise CheckpointError("dataset blob is truncated")
    magic, version, n, h, w, c, k = _DATASET_HEADER.unpack_from(blob)
    if magic != DATASET_MAGIC or version != FORMAT_VERSION:
        raise CheckpointError(f"not a version {FORMAT_VERSION} dataset blob")
    expected = _DATASET_HEADER.size + n * (4 * h * w * c + 4 + 4 + 1)
    if len(blob) != expected:
        raise CheckpointError(f"dataset blob holds {len(blob)} bytes, expected {expected}")
    offset = _DATASET_HEADER.size
    pixels = np.frombuffer(blob, dtype="<f4", count=n * h * w * c, offset=offset)
    offset += 4 * n * h * w * c
    labels = np.frombuffer(blob, dtype="<u4", count=n, offset=offset)
    offset += 4 * n
    original = np.frombuffer(blob, dtype="<u4", count=n, offset=offset)
    offset += 4 * n
    provenance = np.frombuffer(blob, dtype="u1", count=n, offset=offset)
    try:
        return LabeledDataset(
            pixels=pixels.reshape(n, h, w, c).astype(np.float32),
            labels=labels.astype(np.int64),
            original_labels=original.astype(np.int64),
            provenance=provenance.copy(),
            class_count=int(k),
        )
    except InvalidInputError as e:
        raise CheckpointError(f"dataset blob {path} is inconsistent: {e}") from e
