"""Writers for the bag-dataset on-disk interface.

The clustering toolkit consumes a JSON manifest referencing binary bag
files plus optional PGM masks; this module emits exactly those formats
(magic "MIBG", version 1, little-endian header and float32 payload) so
the extractor stays decoupled from the toolkit's internals.
"""

from __future__ import annotations

import json
import re
import struct
from pathlib import Path

import numpy as np

MAGIC = b"MIBG"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIIIII")
_SAFE_CHARS = re.compile(r"[^A-Za-z0-9._-]+")


def safe_name(bag_id: str) -> str:
    return _SAFE_CHARS.sub("_", bag_id) or "bag"


def write_bag_file(path: Path, embeddings: np.ndarray, grid: tuple[int, int] | None) -> None:
    emb = np.ascontiguousarray(embeddings, dtype="<f4")
    if emb.ndim != 2:
        raise ValueError(f"embeddings must be (M, D), got {emb.shape}")
    rows, cols = grid if grid is not None else (0, 0)
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, emb.shape[0], emb.shape[1], rows, cols)
    Path(path).write_bytes(header + emb.tobytes())


def write_manifest(
    out_dir: Path,
    category: str,
    bags: list[dict],
    reference_bags: list[dict],
    unit_norm: bool = True,
) -> Path:
    manifest = {
        "category": category,
        "unit_norm": unit_norm,
        "bags": bags,
        "reference_bags": reference_bags,
    }
    path = Path(out_dir) / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return path


def write_pgm(path: Path, image: np.ndarray) -> None:
    arr = np.ascontiguousarray(image, dtype=np.uint8)
    h, w = arr.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + arr.tobytes())
