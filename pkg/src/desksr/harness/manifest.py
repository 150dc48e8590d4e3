"""Dataset manifests: deterministic splits, flat-patch curation, patch streams."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from ..imgio import IMAGE_EXTENSIONS, load_image, luminance

SPLITS = ("train", "val", "test")
DEFAULT_VARIANCE_THRESHOLD = 0.02


@dataclass
class ManifestEntry:
    file: str
    split: str
    variance: float
    label: int | None = None


@dataclass
class DatasetManifest:
    root: str
    seed: int
    entries: list = field(default_factory=list)
    rejected: int = 0
    variance_threshold: float = DEFAULT_VARIANCE_THRESHOLD
    split_fractions: tuple = (0.8, 0.1, 0.1)

    def files(self, split: str) -> list:
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}")
        return [e for e in self.entries if e.split == split]

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = asdict(self)
        payload["entries"] = [asdict(e) for e in self.entries]
        path.write_text(json.dumps(payload, indent=2))

    @staticmethod
    def load(path) -> "DatasetManifest":
        raw = json.loads(Path(path).read_text())
        entries = [ManifestEntry(**e) for e in raw.pop("entries")]
        raw["split_fractions"] = tuple(raw["split_fractions"])
        return DatasetManifest(entries=entries, **raw)


def _split_for(name: str, seed: int, fractions) -> str:
    digest = hashlib.sha256(f"{seed}:{name}".encode("utf-8")).digest()
    u = int.from_bytes(digest[:8], "big") / 2**64
    if u < fractions[0]:
        return "train"
    if u < fractions[0] + fractions[1]:
        return "val"
    return "test"


def ingest(directory, seed: int = 0,
           variance_threshold: float = DEFAULT_VARIANCE_THRESHOLD,
           split_fractions=(0.8, 0.1, 0.1)) -> DatasetManifest:
    """Scan a directory tree for images and build a curated manifest.

    Splits are assigned by a seeded hash of the relative filename; entries
    whose luminance variance falls below the threshold are rejected and
    counted. Images sitting in an immediate subdirectory get that
    subdirectory's index (sorted order) as an integer label.
    """
    directory = Path(directory)
    paths = sorted(p for p in directory.rglob("*")
                   if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS)
    if not paths:
        raise ValueError(f"no decodable images under {directory}")
    subdirs = sorted({p.parent.name for p in paths if p.parent != directory})
    label_of = {name: i for i, name in enumerate(subdirs)}

    manifest = DatasetManifest(root=str(directory), seed=seed,
                               variance_threshold=variance_threshold,
                               split_fractions=tuple(split_fractions))
    for p in paths:
        rel = str(p.relative_to(directory))
        img = load_image(p)
        var = float(np.var(luminance(img)))
        if var < variance_threshold:
            manifest.rejected += 1
            continue
        label = label_of.get(p.parent.name) if p.parent != directory else None
        manifest.entries.append(ManifestEntry(
            file=rel, split=_split_for(rel, seed, split_fractions),
            variance=var, label=label))
    if not manifest.entries:
        raise ValueError(f"all {manifest.rejected} images under {directory} "
                         f"fell below the variance threshold {variance_threshold}")
    return manifest


def extract_patches(manifest: DatasetManifest, size: int, count: int,
                    rng: np.random.Generator, split: str = "train"):
    """Yield (patch, label) pairs in a seed-deterministic order.

    Train split: ``count`` uniformly random crops drawn across the split.
    Val/test: one center crop per image (count ignored).
    """
    root = Path(manifest.root)
    entries = manifest.files(split)
    if not entries:
        raise ValueError(f"manifest has no entries in split {split!r}")

    if split != "train":
        for entry in entries:
            img = load_image(root / entry.file)
            if min(img.shape[:2]) < size:
                continue
            top = (img.shape[0] - size) // 2
            left = (img.shape[1] - size) // 2
            yield img[top:top + size, left:left + size], entry.label
        return

    cache: dict = {}
    usable = []
    for entry in entries:
        img = cache.setdefault(entry.file, load_image(root / entry.file))
        if min(img.shape[:2]) >= size:
            usable.append(entry)
    if not usable:
        raise ValueError(f"no image in split {split!r} is at least {size}px")
    for _ in range(count):
        entry = usable[int(rng.integers(len(usable)))]
        img = cache[entry.file]
        top = int(rng.integers(img.shape[0] - size + 1))
        left = int(rng.integers(img.shape[1] - size + 1))
        yield img[top:top + size, left:left + size], entry.label
