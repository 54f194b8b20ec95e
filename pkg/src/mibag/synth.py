"""Synthetic planted-defect datasets for desk-scale end-to-end testing.

Every bag shares instances drawn from one finite background pool; a few
instances per bag come from one of several well-separated defect
distributions. Bags of the same defect class should therefore cluster
together once instance weights suppress the common background.
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from .bagstore import Bag, DataError, Dataset, save_dataset, save_pgm


def _unit_rows(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def _block_shape(count: int) -> tuple[int, int]:
    # Most-square factor pair, rows <= cols.
    best = (1, count)
    for r in range(1, int(math.isqrt(count)) + 1):
        if count % r == 0:
            best = (r, count // r)
    return best


def synthesize(
    n: int,
    m: int,
    d: int,
    k_true: int,
    defect_instances: int,
    noise: float = 0.05,
    seed: int = 0,
    pool_size: int = 256,
    bg_spread: float = 0.1,
) -> tuple[Dataset, dict[str, np.ndarray]]:
    """Build a planted dataset of n bags over k_true defect classes.

    Background instances are drawn from a finite pool clustered around one
    direction and get a small per-bag global shift (nuisance variation that
    swamps plain bag-mean distances but not nearest-instance structure);
    defect instances sit near one of k_true orthogonal directions. Bags
    carry a square grid when m is a perfect square; defect instances then
    occupy a contiguous block of grid cells so that masks line up with
    them. Reference bags jointly cover the entire unshifted pool. Returns
    the dataset plus each bag's defect cell indices (for masks).
    """
    if n < 1 or m < 1 or d < 2 or k_true < 1:
        raise DataError("invalid synth sizes")
    if not 1 <= defect_instances <= m:
        raise DataError(f"defect_instances must be in [1, {m}], got {defect_instances}")
    if d < k_true + 1:
        raise DataError(f"need d >= k_true + 1 separated directions, got d={d}, k_true={k_true}")
    if noise < 0:
        raise DataError("noise must be nonnegative")

    rng = np.random.default_rng(seed)
    basis, _ = np.linalg.qr(rng.standard_normal((d, k_true + 1)))
    bg_dir = basis[:, 0]
    defect_dirs = basis[:, 1:].T

    pool = _unit_rows(bg_dir[None, :] + bg_spread * rng.standard_normal((pool_size, d)))

    side = math.isqrt(m)
    grid = (side, side) if side * side == m else None
    block = _block_shape(defect_instances)

    bags = []
    defect_cells: dict[str, np.ndarray] = {}
    for i in range(n):
        cls = i % k_true
        if grid is not None and block[0] <= side and block[1] <= side:
            top = int(rng.integers(0, side - block[0] + 1))
            left = int(rng.integers(0, side - block[1] + 1))
            rr, cc = np.meshgrid(
                np.arange(top, top + block[0]), np.arange(left, left + block[1]), indexing="ij"
            )
            cells = (rr * side + cc).ravel()
        else:
            cells = np.sort(rng.choice(m, size=defect_instances, replace=False))
        emb = pool[rng.integers(0, pool_size, size=m)].copy()
        nuisance = noise * rng.standard_normal(d)
        emb = _unit_rows(emb + nuisance)
        defects = defect_dirs[cls][None, :] + noise * rng.standard_normal((defect_instances, d))
        emb[cells] = _unit_rows(defects)
        bag_id = f"bag_{i:04d}"
        bags.append(
            Bag(id=bag_id, embeddings=emb.astype(np.float32), grid=grid, label=f"defect_{cls}")
        )
        defect_cells[bag_id] = cells

    n_ref = (pool_size + m - 1) // m
    reference = []
    for r in range(n_ref):
        idx = np.arange(r * m, (r + 1) * m) % pool_size
        reference.append(
            Bag(id=f"ref_{r:04d}", embeddings=pool[idx].astype(np.float32), grid=grid, label="good")
        )

    dataset = Dataset(bags=tuple(bags), reference_bags=tuple(reference),
                      category="synthetic", unit_norm=True)
    return dataset, defect_cells


def write_masks(dataset: Dataset, defect_cells: dict[str, np.ndarray],
                mask_dir: Path, mask_scale: int = 4) -> None:
    """One PGM mask per gridded bag: 255 inside defect cells, 0 elsewhere."""
    mask_dir = Path(mask_dir)
    mask_dir.mkdir(parents=True, exist_ok=True)
    for bag in dataset.bags:
        if bag.grid is None:
            continue
        rows, cols = bag.grid
        cellmask = np.zeros(rows * cols, dtype=np.uint8)
        cellmask[defect_cells[bag.id]] = 1
        cellmask = cellmask.reshape(rows, cols)
        up = np.kron(cellmask, np.ones((mask_scale, mask_scale), dtype=np.uint8)) * 255
        save_pgm(mask_dir / f"{bag.id}.pgm", up)


def synthesize_to_dir(
    out_dir: Path,
    n: int,
    m: int,
    d: int,
    k_true: int,
    defect_instances: int,
    noise: float = 0.05,
    seed: int = 0,
    pool_size: int = 256,
    bg_spread: float = 0.1,
    mask_scale: int = 4,
) -> Path:
    """Generate, save bags + manifest + masks/; returns the manifest path."""
    dataset, defect_cells = synthesize(
        n=n, m=m, d=d, k_true=k_true, defect_instances=defect_instances,
        noise=noise, seed=seed, pool_size=pool_size, bg_spread=bg_spread,
    )
    out_dir = Path(out_dir)
    manifest = save_dataset(dataset, out_dir)
    write_masks(dataset, defect_cells, out_dir / "masks", mask_scale=mask_scale)
    return manifest
