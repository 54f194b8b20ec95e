"""Data model and file I/O for bags of patch embeddings.

An image is stored as a *bag*: an (M, D) float32 matrix of patch
embeddings, optionally laid out on a spatial grid. Datasets are a JSON
manifest referencing one binary file per bag; segmentation masks are
binary PGM images keyed by bag id.
"""

from __future__ import annotations

import json
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"MIBG"
FORMAT_VERSION = 1
UNIT_NORM_TOL = 1e-4

_HEADER = struct.Struct("<4sIIIII")  # magic, version, M, D, grid_rows, grid_cols


class DataError(ValueError):
    """Malformed or invariant-violating input data."""


@dataclass(frozen=True)
class Bag:
    """One image's set of patch embeddings.

    embeddings is an (M, D) float32 array; grid, when present, gives the
    spatial (rows, cols) layout with rows*cols == M.
    """

    id: str
    embeddings: np.ndarray
    grid: tuple[int, int] | None = None
    label: str | None = None

    def __post_init__(self):
        emb = np.ascontiguousarray(self.embeddings, dtype=np.float32)
        if emb.ndim != 2 or emb.shape[0] < 1 or emb.shape[1] < 1:
            raise DataError(f"bag {self.id!r}: embeddings must be (M>=1, D>=1), got {emb.shape}")
        if not np.all(np.isfinite(emb)):
            raise DataError(f"bag {self.id!r}: non-finite embedding values")
        if self.grid is not None:
            rows, cols = self.grid
            if rows < 1 or cols < 1 or rows * cols != emb.shape[0]:
                raise DataError(
                    f"bag {self.id!r}: grid {self.grid} inconsistent with M={emb.shape[0]}"
                )
            object.__setattr__(self, "grid", (int(rows), int(cols)))
        emb.setflags(write=False)
        object.__setattr__(self, "embeddings", emb)

    @property
    def m(self) -> int:
        return self.embeddings.shape[0]

    @property
    def d(self) -> int:
        return self.embeddings.shape[1]

    def check_unit_norm(self) -> None:
        norms = np.linalg.norm(self.embeddings.astype(np.float64), axis=1)
        bad = np.abs(norms - 1.0) > UNIT_NORM_TOL
        if np.any(bad):
            raise DataError(
                f"bag {self.id!r}: {int(bad.sum())} rows violate unit L2 norm "
                f"(worst |norm-1| = {np.abs(norms - 1.0).max():.3g})"
            )


@dataclass(frozen=True)
class Dataset:
    """Ordered collection of bags to cluster, plus optional labeled-normal reference bags."""

    bags: tuple[Bag, ...]
    reference_bags: tuple[Bag, ...] = ()
    category: str = ""
    unit_norm: bool = False

    def __post_init__(self):
        object.__setattr__(self, "bags", tuple(self.bags))
        object.__setattr__(self, "reference_bags", tuple(self.reference_bags))
        if len(self.bags) == 0:
            raise DataError("empty dataset")
        d = self.bags[0].d
        for bag in (*self.bags, *self.reference_bags):
            if bag.d != d:
                raise DataError(
                    f"embedding dimension mismatch: bag {bag.id!r} has D={bag.d}, expected {d}"
                )
        for group_name, group in (("bags", self.bags), ("reference_bags", self.reference_bags)):
            ids = [b.id for b in group]
            if len(set(ids)) != len(ids):
                dupes = sorted({i for i in ids if ids.count(i) > 1})
                raise DataError(f"duplicate bag ids in {group_name}: {dupes}")
        if self.unit_norm:
            for bag in (*self.bags, *self.reference_bags):
                bag.check_unit_norm()

    @property
    def n(self) -> int:
        return len(self.bags)

    @property
    def d(self) -> int:
        return self.bags[0].d

    @property
    def ids(self) -> list[str]:
        return [b.id for b in self.bags]

    @property
    def labels(self) -> list[str | None]:
        return [b.label for b in self.bags]


@dataclass(frozen=True)
class MaskSet:
    """Per-bag binary masks (1 = anomalous pixel), constant shape within a set."""

    masks: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        shape = None
        frozen = {}
        for bag_id, mask in self.masks.items():
            arr = np.ascontiguousarray(mask, dtype=np.uint8)
            if arr.ndim != 2:
                raise DataError(f"mask for {bag_id!r} must be 2-D, got shape {arr.shape}")
            if not np.isin(arr, (0, 1)).all():
                raise DataError(f"mask for {bag_id!r} has values outside {{0,1}}")
            if shape is None:
                shape = arr.shape
            elif arr.shape != shape:
                raise DataError(
                    f"mask shape mismatch: {bag_id!r} is {arr.shape}, expected {shape}"
                )
            arr.setflags(write=False)
            frozen[bag_id] = arr
        object.__setattr__(self, "masks", frozen)

    def __contains__(self, bag_id: str) -> bool:
        return bag_id in self.masks

    def __getitem__(self, bag_id: str) -> np.ndarray:
        return self.masks[bag_id]

    def check_alignment(self, dataset: Dataset) -> None:
        extra = set(self.masks) - set(dataset.ids)
        if extra:
            raise DataError(f"masks with no matching bag id: {sorted(extra)}")


# ---------------------------------------------------------------------------
# Bag binary format

def write_bag_file(bag: Bag, path: Path) -> None:
    rows, cols = bag.grid if bag.grid is not None else (0, 0)
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, bag.m, bag.d, rows, cols)
    data = np.ascontiguousarray(bag.embeddings, dtype="<f4").tobytes()
    path.write_bytes(header + data)


def read_bag_file(path: Path, bag_id: str, label: str | None = None) -> Bag:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read bag file {path}: {exc}") from exc
    if len(raw) < _HEADER.size:
        raise DataError(f"{path}: truncated header")
    magic, version, m, d, rows, cols = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported version {version}")
    if m < 1 or d < 1:
        raise DataError(f"{path}: invalid dimensions M={m} D={d}")
    expected = _HEADER.size + 4 * m * d
    if len(raw) != expected:
        raise DataError(f"{path}: expected {expected} bytes, found {len(raw)}")
    emb = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(m, d)
    grid = (rows, cols) if (rows, cols) != (0, 0) else None
    return Bag(id=bag_id, embeddings=emb, grid=grid, label=label)


_SAFE_CHARS = re.compile(r"[^A-Za-z0-9._-]+")


def _bag_filename(bag_id: str, taken: set[str]) -> str:
    stem = _SAFE_CHARS.sub("_", bag_id) or "bag"
    name = f"{stem}.mibg"
    suffix = 1
    while name in taken:
        name = f"{stem}.{suffix}.mibg"
        suffix += 1
    taken.add(name)
    return name


def save_dataset(dataset: Dataset, out_dir: Path) -> Path:
    """Write bag files plus a JSON manifest; returns the manifest path.

    load_dataset(save_dataset(d)) reproduces d bit-exactly.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    taken: set[str] = set()

    def dump_group(bags):
        entries = []
        for bag in bags:
            fname = _bag_filename(bag.id, taken)
            write_bag_file(bag, out_dir / fname)
            entry = {"id": bag.id, "file": fname}
            if bag.label is not None:
                entry["label"] = bag.label
            entries.append(entry)
        return entries

    manifest = {
        "category": dataset.category,
        "unit_norm": dataset.unit_norm,
        "bags": dump_group(dataset.bags),
        "reference_bags": dump_group(dataset.reference_bags),
    }
    manifest_path = out_dir / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return manifest_path


def load_dataset(manifest_path: Path) -> Dataset:
    """Load a dataset from a JSON manifest; validates all bag/dataset invariants."""
    manifest_path = Path(manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise DataError(f"cannot read manifest {manifest_path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"manifest {manifest_path} is not valid JSON: {exc}") from exc
    base = manifest_path.parent

    def load_group(entries):
        bags = []
        for entry in entries:
            bags.append(
                read_bag_file(base / entry["file"], bag_id=entry["id"], label=entry.get("label"))
            )
        return tuple(bags)

    return Dataset(
        bags=load_group(manifest.get("bags", [])),
        reference_bags=load_group(manifest.get("reference_bags", [])),
        category=manifest.get("category", ""),
        unit_norm=bool(manifest.get("unit_norm", False)),
    )


# ---------------------------------------------------------------------------
# PGM masks

def save_pgm(path: Path, image: np.ndarray) -> None:
    arr = np.ascontiguousarray(image, dtype=np.uint8)
    if arr.ndim != 2:
        raise DataError(f"PGM image must be 2-D, got shape {arr.shape}")
    h, w = arr.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + arr.tobytes())


def load_pgm(path: Path) -> np.ndarray:
    """Read a binary (P5) PGM file as a uint8 array."""
    raw = Path(path).read_bytes()
    if not raw.startswith(b"P5"):
        raise DataError(f"{path}: not a binary PGM (P5) file")
    # Header: "P5", width, height, maxval as whitespace-separated tokens,
    # '#' comments allowed between tokens.
    pos = 2
    tokens = []
    while len(tokens) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError(f"{path}: truncated PGM header")
        tokens.append(raw[start:pos])
    pos += 1  # single whitespace after maxval
    try:
        width, height, maxval = (int(t) for t in tokens)
    except ValueError as exc:
        raise DataError(f"{path}: bad PGM header tokens {tokens}") from exc
    if maxval <= 0 or maxval > 255:
        raise DataError(f"{path}: unsupported PGM maxval {maxval}")
    data = raw[pos : pos + width * height]
    if len(data) != width * height:
        raise DataError(f"{path}: PGM pixel data truncated")
    return np.frombuffer(data, dtype=np.uint8).reshape(height, width)


def load_masks(mask_dir: Path, threshold: int = 127) -> MaskSet:
    """Load all .pgm files in a directory; pixel > threshold becomes 1."""
    mask_dir = Path(mask_dir)
    masks = {}
    for path in sorted(mask_dir.glob("*.pgm")):
        masks[path.stem] = (load_pgm(path) > threshold).astype(np.uint8)
    if not masks:
        raise DataError(f"no .pgm masks found in {mask_dir}")
    return MaskSet(masks=masks)


# ---------------------------------------------------------------------------
# Mask resizing

def resize_mask_to_grid(mask: np.ndarray, grid: tuple[int, int]) -> np.ndarray:
    """Downscale a binary mask to a patch grid by exact area averaging.

    Output cell (r, c) is the mean of the mask over the rectangular block
    of pixels it covers, with fractional pixels weighted by overlap, so
    sum(output) * block_area == sum(mask).
    """
    mask = np.asarray(mask, dtype=np.float64)
    if mask.ndim != 2:
        raise DataError(f"mask must be 2-D, got shape {mask.shape}")
    rows, cols = grid
    h, w = mask.shape
    if rows < 1 or cols < 1 or rows > h or cols > w:
        raise DataError(f"grid {grid} larger than mask {mask.shape}")

    # Integral image; the mask is piecewise constant on unit pixels, so
    # bilinear interpolation of the integral at fractional coordinates is exact.
    integral = np.zeros((h + 1, w + 1), dtype=np.float64)
    integral[1:, 1:] = mask.cumsum(axis=0).cumsum(axis=1)

    def eval_integral(ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
        yi = np.clip(np.floor(ys).astype(int), 0, h - 1)
        xi = np.clip(np.floor(xs).astype(int), 0, w - 1)
        fy = (ys - yi)[:, None]
        fx = (xs - xi)[None, :]
        tl = integral[np.ix_(yi, xi)]
        tr = integral[np.ix_(yi, xi + 1)]
        bl = integral[np.ix_(yi + 1, xi)]
        br = integral[np.ix_(yi + 1, xi + 1)]
        return (1 - fy) * (1 - fx) * tl + (1 - fy) * fx * tr + fy * (1 - fx) * bl + fy * fx * br

    y_edges = np.linspace(0.0, float(h), rows + 1)
    x_edges = np.linspace(0.0, float(w), cols + 1)
    corner = eval_integral(y_edges, x_edges)
    block_sums = corner[1:, 1:] - corner[:-1, 1:] - corner[1:, :-1] + corner[:-1, :-1]
    block_area = (h / rows) * (w / cols)
    out = block_sums / block_area
    return np.clip(out, 0.0, 1.0)
