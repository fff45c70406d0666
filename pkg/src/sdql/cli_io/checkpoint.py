"""Versioned binary checkpoints with deterministic bytes.

Layout: 8-byte magic, u32 format version, u64 header length, then a
canonical JSON header (sorted keys, no whitespace) and a payload of
little-endian float64 arrays. The header embeds the full run configuration,
all trainer counters and generator states, and a section table mapping
array names to payload offsets. Sections are written in sorted name order,
so saving, loading, and saving again reproduces the file byte for byte.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..errors import CheckpointError
from ..stacked_trainer import StackedTrainer
from .config import RunConfig, build_run_config

MAGIC = b"SDQLCKPT"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<IQ")  # version, header length


def save_checkpoint(path, config: RunConfig, trainer: StackedTrainer) -> None:
    meta, arrays = trainer.snapshot()
    sections = []
    chunks = []
    offset = 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        raw = arr.tobytes()
        sections.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    header = {
        "format_version": FORMAT_VERSION,
        "config": config.raw,
        "trainer": meta,
        "sections": sections,
    }
    try:
        header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    except (TypeError, ValueError) as exc:
        raise CheckpointError(f"checkpoint header is not serializable: {exc}") from exc
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(_PREFIX.pack(FORMAT_VERSION, len(header_bytes)))
        fh.write(header_bytes)
        for raw in chunks:
            fh.write(raw)


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Parse a checkpoint into (header, arrays by name)."""
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    base = len(MAGIC) + _PREFIX.size
    if len(blob) < base or blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint file (bad magic)")
    version, header_len = _PREFIX.unpack_from(blob, len(MAGIC))
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"{path} has format version {version}; this build reads version {FORMAT_VERSION} only"
        )
    if len(blob) < base + header_len:
        raise CheckpointError(f"{path} is truncated inside the header")
    try:
        header = json.loads(blob[base : base + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path} has a corrupt header: {exc}") from exc
    payload = blob[base + header_len :]
    arrays = {}
    for sec in header.get("sections", []):
        shape = tuple(int(d) for d in sec["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = int(sec["offset"])
        end = start + 8 * count
        if end > len(payload):
            raise CheckpointError(f"{path} is truncated inside section {sec['name']!r}")
        arrays[sec["name"]] = np.frombuffer(payload, dtype="<f8", count=count, offset=start).reshape(shape)
    return header, arrays


def load_trainer(path) -> tuple[RunConfig, StackedTrainer]:
    """Rebuild the run configuration and a fully restored trainer."""
    header, arrays = read_checkpoint(path)
    if "config" not in header or "trainer" not in header:
        raise CheckpointError(f"{path} header lacks config/trainer entries")
    config = build_run_config(header["config"])
    trainer = StackedTrainer(config.env, config.trainer)
    trainer.restore(header["trainer"], arrays)
    return config, trainer
