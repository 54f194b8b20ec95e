"""Dataset layouts and the extraction driver."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .backbone import PatchEmbedder, build_trunk
from .bagio import safe_name, write_bag_file, write_manifest, write_pgm
from .config import ExtractorConfig

IMAGE_EXTS = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


class LayoutError(ValueError):
    pass


def _images_in(folder: Path) -> list[Path]:
    return sorted(p for p in folder.iterdir() if p.suffix.lower() in IMAGE_EXTS)


def _category_dir(cfg: ExtractorConfig) -> Path:
    root = cfg.dataset_root
    if cfg.category:
        root = root / cfg.category
    if not root.is_dir():
        raise LayoutError(f"dataset directory not found: {root}")
    return root


def list_images(cfg: ExtractorConfig) -> tuple[list[tuple[str, str, Path]], list[tuple[str, str, Path]]]:
    """Returns (test_items, reference_items) as (bag_id, label, path) triples."""
    root = _category_dir(cfg)
    tests: list[tuple[str, str, Path]] = []
    refs: list[tuple[str, str, Path]] = []
    if cfg.layout == "mvtec":
        test_dir = root / "test"
        if not test_dir.is_dir():
            raise LayoutError(f"mvtec layout requires {test_dir}")
        for sub in sorted(p for p in test_dir.iterdir() if p.is_dir()):
            for img in _images_in(sub):
                tests.append((f"{sub.name}_{img.stem}", sub.name, img))
        train_good = root / "train" / "good"
        if train_good.is_dir():
            for img in _images_in(train_good):
                refs.append((f"train_good_{img.stem}", "good", img))
    elif cfg.layout == "mtd":
        folders = sorted(p for p in root.iterdir() if p.is_dir())
        if not folders:
            raise LayoutError(f"mtd layout requires defect-type folders under {root}")
        for folder in folders:
            imgs_dir = folder / "Imgs" if (folder / "Imgs").is_dir() else folder
            label = folder.name.lower().removeprefix("mt_")
            for img in _images_in(imgs_dir):
                item = (f"{folder.name}_{img.stem}", label, img)
                if "free" in label:
                    refs.append((item[0], "good", img))
                else:
                    tests.append(item)
    else:  # flat
        folders = sorted(p for p in root.iterdir() if p.is_dir())
        if not folders:
            raise LayoutError(f"flat layout requires one folder per label under {root}")
        for folder in folders:
            for img in _images_in(folder):
                tests.append((f"{folder.name}_{img.stem}", folder.name, img))
    if not tests:
        raise LayoutError(f"no images found under {root}")
    return tests, refs


def _load_image(path: Path, size: int) -> np.ndarray:
    try:
        with Image.open(path) as img:
            rgb = img.convert("RGB").resize((size, size), Image.BILINEAR)
    except OSError as exc:
        raise LayoutError(f"unreadable image {path}: {exc}") from exc
    return np.asarray(rgb, dtype=np.uint8)


def extract(cfg: ExtractorConfig, out_dir: Path) -> Path:
    """Emit one bag file per image plus the dataset manifest; returns its path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tests, refs = list_images(cfg)
    embedder = PatchEmbedder(
        build_trunk(cfg.pretrained, cfg.weights_path, cfg.seed), device=cfg.device
    )
    side = cfg.grid_side

    def emit(items):
        entries = []
        for start in range(0, len(items), cfg.batch_size):
            chunk = items[start : start + cfg.batch_size]
            batch = np.stack([_load_image(path, cfg.image_size) for _, _, path in chunk])
            embeddings = embedder.embed_batch(batch)
            for (bag_id, label, _), emb in zip(chunk, embeddings):
                fname = f"{safe_name(bag_id)}.mibg"
                write_bag_file(out_dir / fname, emb, grid=(side, side))
                entries.append({"id": bag_id, "file": fname, "label": label})
        return entries

    bag_entries = emit(tests)
    ref_entries = emit(refs)
    category = cfg.category or _category_dir(cfg).name
    return write_manifest(out_dir, category, bag_entries, ref_entries, unit_norm=True)


def extract_masks(cfg: ExtractorConfig, out_dir: Path) -> list[Path]:
    """One binary PGM per test image, aligned by bag id.

    Anomalous images take their ground-truth segmentation (anything > 0 is
    anomalous), resized to image_size with nearest-neighbor sampling;
    images labeled good get an all-zero mask.
    """
    if cfg.layout != "mvtec":
        raise LayoutError("ground-truth masks are only defined for the mvtec layout")
    root = _category_dir(cfg)
    gt_dir = root / "ground_truth"
    if not gt_dir.is_dir():
        raise LayoutError(f"mask extraction requires {gt_dir}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tests, _ = list_images(cfg)
    written = []
    for bag_id, label, img_path in tests:
        target = out_dir / f"{safe_name(bag_id)}.pgm"
        if label == "good":
            mask = np.zeros((cfg.image_size, cfg.image_size), dtype=np.uint8)
        else:
            candidates = sorted((gt_dir / label).glob(f"{img_path.stem}_mask.*")) or sorted(
                (gt_dir / label).glob(f"{img_path.stem}.*")
            )
            if not candidates:
                raise LayoutError(f"missing ground-truth mask for {bag_id!r}")
            with Image.open(candidates[0]) as img:
                resized = img.convert("L").resize(
                    (cfg.image_size, cfg.image_size), Image.NEAREST
                )
            mask = (np.asarray(resized) > 0).astype(np.uint8) * 255
        write_pgm(target, mask)
        written.append(target)
    return written
